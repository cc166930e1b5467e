"""Availability attack against the mixed-precision path.

The optimizer crafts an additive image perturbation that drags the top-k
values of every captured hidden-state column toward a target above the
outlier threshold, so as many columns as possible take the expensive
half-precision route. Two secondary terms keep the attack stealthy: a
logit-matching penalty preserves the clean prediction and a total-variation
penalty smooths the perturbation. Optimization is signed-gradient descent
projected onto the L-inf ball, with a cosine warm-restart step size.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Var
from .quantlinear import OutlierPolicy
from .vit import ViTModel

VARIANTS = ("single", "class-universal", "universal")
PERT_MAGIC = b"QTVP"
PERT_VERSION = 1


class PerturbationFileError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters; defaults follow the evaluated configuration."""

    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 50.0
    epsilon: float = 0.8
    alpha_max: float = 0.02
    alpha_min: float = 1e-5
    restart_period: int = 100
    iterations: int = 300
    k_top: int = 4
    x_target: float = 70.0
    variant: str = "single"
    target_class: Optional[int] = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.alpha_min > self.alpha_max:
            raise ValueError("alpha_min must not exceed alpha_max")
        if self.k_top < 1:
            raise ValueError("k_top must be >= 1")
        if self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "class-universal" and self.target_class is None:
            raise ValueError("class-universal attacks need a target_class")


@dataclass
class Perturbation:
    """A crafted additive perturbation with its budget and provenance tag."""

    delta: np.ndarray
    epsilon: float
    variant: str
    target_class: Optional[int] = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, np.float32)
        if self.delta.ndim != 3:
            raise ValueError("delta must be C x H x W")
        if np.max(np.abs(self.delta)) > self.epsilon:
            raise ValueError("delta exceeds its own epsilon budget")

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Add delta to one image or a batch and clamp to valid pixel range."""
        return np.clip(np.asarray(images, np.float32) + self.delta, 0.0, 1.0)


@dataclass
class AttackScope:
    """The image set the perturbation is optimized over."""

    images: np.ndarray
    variant: str
    labels: Optional[np.ndarray] = None
    target_class: Optional[int] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        if self.images.ndim != 4:
            raise ValueError("scope images must be B x C x H x W")
        if len(self.images) == 0:
            raise ValueError("empty attack scope")
        if self.variant == "single" and len(self.images) != 1:
            raise ValueError("single variant requires exactly one image")
        if self.variant == "class-universal":
            if self.labels is None or self.target_class is None:
                raise ValueError("class-universal scope needs labels and a class")
            if not np.all(self.labels == self.target_class):
                raise ValueError("class-universal scope must be label-homogeneous")

    @classmethod
    def single(cls, image: np.ndarray) -> "AttackScope":
        return cls(images=np.asarray(image)[None], variant="single")

    @classmethod
    def class_universal(
        cls, images: np.ndarray, labels: np.ndarray, target_class: int
    ) -> "AttackScope":
        keep = np.asarray(labels) == target_class
        return cls(
            images=np.asarray(images)[keep],
            labels=np.asarray(labels)[keep],
            variant="class-universal",
            target_class=target_class,
        )

    @classmethod
    def universal(cls, images: np.ndarray) -> "AttackScope":
        return cls(images=np.asarray(images), variant="universal")


@dataclass
class AttackHistory:
    """Per-iteration optimization record."""

    alpha: list = field(default_factory=list)
    total: list = field(default_factory=list)
    quant: list = field(default_factory=list)
    acc: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    outlier_columns: list = field(default_factory=list)


# ----------------------------------------------------------------------
# loss components
# ----------------------------------------------------------------------


def quant_loss(captures, k: int, x_target: float) -> Var:
    """Hinged pull of each layer's per-column top-k values toward x_target.

    Per layer the loss is the mean over the k x h selected entries of
    max(x_target - value, 0)^2, so values already past the target are not
    penalized; layers add up. Accepts graph captures (layer_id, Var) or a
    plain CaptureBuffer for evaluation-only use.
    """
    entries = getattr(captures, "entries", captures)
    if not entries:
        raise ValueError("no captured hidden states")
    out = None
    for _, state in entries:
        if not isinstance(state, Var):
            state = Var(state)
        if state.value.shape[0] < k:
            raise ValueError(
                f"capture has {state.value.shape[0]} rows, need at least {k}"
            )
        top = ag.topk_columns(state, k)
        hinge = ag.maximum(x_target - top, 0.0)
        layer_loss = ag.mean(ag.square(hinge))
        out = layer_loss if out is None else ag.add(out, layer_loss)
    return out


def class_loss(adv_logits: Var, clean_logits: np.ndarray) -> Var:
    """Mean squared deviation of raw logits from the clean forward's logits."""
    clean = np.asarray(clean_logits)
    if adv_logits.value.size != clean.size:
        raise ValueError("logit lengths disagree")
    return ag.mean(ag.square(ag.sub(adv_logits, Var(clean.reshape(adv_logits.value.shape)))))


def tv_loss(delta: Var, eps: float = 1e-8) -> Var:
    """Total variation over each channel, zeroed for constant images.

    Sums sqrt(dh^2 + dw^2 + eps) over interior pixels (forward differences
    exist in both directions), minus the sqrt(eps) floor per term.
    """
    if delta.value.ndim != 3:
        raise ValueError("delta must be C x H x W")
    c, h, w = delta.value.shape
    dtype = delta.value.dtype

    def diff_matrix(n):
        d = np.zeros((n, n - 1), dtype=dtype)
        d[np.arange(n - 1), np.arange(n - 1)] = -1.0
        d[np.arange(1, n), np.arange(n - 1)] = 1.0
        return d

    keep_h = np.eye(h, h - 1, dtype=dtype)
    keep_w = np.eye(w, w - 1, dtype=dtype)

    # row differences via transposed right-multiplication, then drop the
    # last column; column differences directly, then drop the last row
    dh = ag.transpose(ag.matmul(ag.transpose(delta, (0, 2, 1)), Var(diff_matrix(h))), (0, 2, 1))
    dh = ag.matmul(dh, Var(keep_w))
    dw = ag.matmul(delta, Var(diff_matrix(w)))
    dw = ag.transpose(ag.matmul(ag.transpose(dw, (0, 2, 1)), Var(keep_h)), (0, 2, 1))

    terms = ag.sqrt(ag.add(ag.square(dh), ag.square(dw)), eps=eps)
    n_terms = c * (h - 1) * (w - 1)
    floor = np.sqrt(np.asarray(eps, dtype=dtype))
    return ag.sub(ag.total(terms), Var(np.asarray(n_terms * floor, dtype=dtype)))


def total_loss(
    image: np.ndarray,
    delta: Var,
    model: ViTModel,
    config: AttackConfig,
    clean_logits: np.ndarray,
    policy: Optional[OutlierPolicy] = None,
    quantized: bool = True,
):
    """Weighted attack objective for one image.

    The perturbed input is clamped to [0, 1] before the forward pass. Zero
    weights skip their component entirely, so ablations are exact. Returns
    (loss Var, component dict, traces).
    """
    x = np.asarray(image, np.float32)
    perturbed = ag.clamp(ag.add(Var(x.astype(delta.value.dtype)), delta), 0.0, 1.0)
    batched = ag.reshape(perturbed, (1,) + x.shape)
    logits, captures, traces = model.forward_graph(
        batched, quantized=quantized, capture=True, policy=policy
    )

    parts = {}
    loss = None

    def include(weight, term, name):
        nonlocal loss
        parts[name] = float(term.value)
        if weight != 0.0:
            weighted = ag.scale(term, weight)
            loss = weighted if loss is None else ag.add(loss, weighted)

    include(config.lambda1, quant_loss(captures, config.k_top, config.x_target), "quant")
    include(config.lambda2, class_loss(logits, clean_logits), "acc")
    include(config.lambda3, tv_loss(delta), "tv")
    if loss is None:
        raise ValueError("all loss weights are zero")
    parts["total"] = float(loss.value)
    return loss, parts, traces


# ----------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------


def cosine_alpha(t_cur: int, period: int, alpha_max: float, alpha_min: float) -> float:
    """Single-cycle cosine interpolation; exact at both endpoints."""
    w = 0.5 * (1.0 + np.cos(np.pi * t_cur / period))
    return w * alpha_max + (1.0 - w) * alpha_min


def cosine_wr_step(t: int, config: AttackConfig) -> float:
    """Warm-restart step size: the cosine cycle restarts every period."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return cosine_alpha(t % config.restart_period, config.restart_period,
                        config.alpha_max, config.alpha_min)


def pgd_update(
    delta: np.ndarray,
    grad: np.ndarray,
    alpha: float,
    epsilon: float,
    x: np.ndarray,
) -> np.ndarray:
    """One signed-gradient descent step, projected onto the epsilon ball and
    onto the set where x + delta stays a valid image for every x given."""
    delta = np.asarray(delta, np.float32)
    step = np.float32(alpha) * np.sign(grad, dtype=np.float32)
    new = np.clip(delta - step, -epsilon, epsilon)
    x = np.asarray(x, np.float32)
    if x.ndim == delta.ndim + 1:
        lo, hi = -np.min(x, axis=0), 1.0 - np.max(x, axis=0)
    else:
        lo, hi = -x, 1.0 - x
    return np.clip(new, lo, hi).astype(np.float32)


def run_attack(
    models,
    scope: AttackScope,
    config: AttackConfig,
    policy: Optional[OutlierPolicy] = None,
) -> tuple[Perturbation, AttackHistory]:
    """Craft a perturbation over the scope by projected signed-gradient descent.

    Each iteration samples a mini-batch (the full scope when small), picks
    one model uniformly at random when several are given, accumulates the
    perturbation gradient of the summed objective over the batch, and
    applies a cosine warm-restart step. Invariants are asserted in-loop:
    the perturbation never leaves the epsilon ball and every scope image
    stays inside valid pixel range.
    """
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    if not models:
        raise ValueError("need at least one model")
    shape = scope.images.shape[1:]
    for m in models:
        cfg = m.config
        if (cfg.channels, cfg.image_size, cfg.image_size) != shape:
            raise ValueError("model input shape disagrees with scope images")
        if config.x_target <= cfg.tau:
            raise ValueError("x_target must exceed the model's outlier threshold")

    rng = np.random.default_rng(config.seed)
    n = len(scope.images)
    delta = np.zeros(shape, dtype=np.float32)
    history = AttackHistory()

    clean_cache: dict[tuple[int, int], np.ndarray] = {}

    def clean_logits(mi: int, bi: int) -> np.ndarray:
        key = (mi, bi)
        if key not in clean_cache:
            logits, _, _ = models[mi].forward(
                scope.images[bi : bi + 1], quantized=True, policy=policy
            )
            clean_cache[key] = logits[0].copy()
        return clean_cache[key]

    order = rng.permutation(n)
    cursor = 0

    for t in range(config.iterations):
        alpha = cosine_wr_step(t, config)
        mi = int(rng.integers(len(models))) if len(models) > 1 else 0
        model = models[mi]

        if n <= config.batch_size:
            batch = np.arange(n)
        else:
            if cursor + config.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            batch = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size

        grad = np.zeros_like(delta)
        tot = qv = av = tvv = 0.0
        outliers = 0
        for bi in batch:
            dvar = Var(delta, requires_grad=True)
            loss, parts, traces = total_loss(
                scope.images[bi], dvar, model, config,
                clean_logits(mi, int(bi)), policy=policy,
            )
            loss.backward()
            grad += dvar.grad
            tot += parts["total"]
            qv += parts["quant"]
            av += parts["acc"]
            tvv += parts["tv"]
            outliers += sum(len(tr.outlier_columns) for tr in traces)

        delta = pgd_update(delta, grad, alpha, config.epsilon, scope.images)

        assert np.max(np.abs(delta)) <= config.epsilon
        assert np.all(scope.images + delta >= 0.0)
        assert np.all(scope.images + delta <= 1.0)

        history.alpha.append(alpha)
        history.total.append(tot)
        history.quant.append(qv)
        history.acc.append(av)
        history.tv.append(tvv)
        history.outlier_columns.append(outliers / len(batch))

    pert = Perturbation(
        delta=delta,
        epsilon=config.epsilon,
        variant=config.variant,
        target_class=config.target_class,
    )
    return pert, history


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

_VARIANT_CODES = {name: i for i, name in enumerate(VARIANTS)}


def save_perturbation(pert: Perturbation, path: str) -> None:
    """Layout: magic, u32 version, u32 shape triple, f32 epsilon, u8 variant
    code, i32 target class (-1 when absent), then delta as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(PERT_MAGIC)
        fh.write(struct.pack("<I", PERT_VERSION))
        fh.write(struct.pack("<3I", *pert.delta.shape))
        fh.write(struct.pack("<f", pert.epsilon))
        fh.write(struct.pack("<Bi", _VARIANT_CODES[pert.variant],
                             -1 if pert.target_class is None else pert.target_class))
        fh.write(np.ascontiguousarray(pert.delta, dtype="<f4").tobytes())


def load_perturbation(path: str) -> Perturbation:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != PERT_MAGIC:
        raise PerturbationFileError(f"not a perturbation file: {blob[:4]!r}")
    header = 4 + 4 + 12 + 4 + 5
    if len(blob) < header:
        raise PerturbationFileError("perturbation file header is incomplete")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != PERT_VERSION:
        raise PerturbationFileError(f"unsupported perturbation version {version}")
    shape = struct.unpack_from("<3I", blob, 8)
    (epsilon,) = struct.unpack_from("<f", blob, 20)
    code, target = struct.unpack_from("<Bi", blob, 24)
    if code >= len(VARIANTS):
        raise PerturbationFileError(f"unknown variant code {code}")
    count = int(np.prod(shape))
    if len(blob) != header + 4 * count:
        raise PerturbationFileError("perturbation payload size mismatch")
    delta = np.frombuffer(blob, dtype="<f4", count=count, offset=header).reshape(shape)
    return Perturbation(
        delta=delta.copy(),
        epsilon=float(epsilon),
        variant=VARIANTS[code],
        target_class=None if target < 0 else int(target),
    )
