"""A small vision transformer whose block linear layers run through the
mixed-precision path.

Four projections per block are quantized: the fused QKV, the attention
output, and both MLP linears. Patch embedding and the classifier head stay
full precision. Every quantized execution can capture its pre-multiplication
hidden state, which is what the availability attack optimizes against.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Var
from .quantlinear import OutlierPolicy, QuantLinearLayer

WEIGHT_MAGIC = b"QTVW"
WEIGHT_VERSION = 1


class WeightFileError(ValueError):
    """Base class for weight persistence failures."""


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    mlp_dim: int = 256
    num_heads: int = 4
    num_layers: int = 4
    num_classes: int = 10
    tau: float = 6.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    _INT_FIELDS = (
        "image_size",
        "channels",
        "patch_size",
        "hidden_dim",
        "mlp_dim",
        "num_heads",
        "num_layers",
        "num_classes",
    )


@dataclass
class CaptureBuffer:
    """Ordered pre-multiplication hidden states, one per quantized matmul."""

    entries: list = field(default_factory=list)

    def layer_ids(self):
        return [layer_id for layer_id, _ in self.entries]

    def states(self):
        return [state for _, state in self.entries]

    def __len__(self):
        return len(self.entries)


def _param_names(config: ViTConfig) -> list[str]:
    names = ["patch_embed.w", "patch_embed.b", "pos_embed"]
    for k in range(config.num_layers):
        names += [
            f"block{k}.ln1.g",
            f"block{k}.ln1.b",
            f"block{k}.qkv.w",
            f"block{k}.qkv.b",
            f"block{k}.attn_out.w",
            f"block{k}.attn_out.b",
            f"block{k}.ln2.g",
            f"block{k}.ln2.b",
            f"block{k}.mlp_in.w",
            f"block{k}.mlp_in.b",
            f"block{k}.mlp_out.w",
            f"block{k}.mlp_out.b",
        ]
    names += ["final_ln.g", "final_ln.b", "head.w", "head.b"]
    return names


class ViTModel:
    """Toy classifier; weights are plain float32 arrays keyed by name."""

    QUANTIZED_PER_BLOCK = ("qkv", "attn_out", "mlp_in", "mlp_out")

    def __init__(self, config: ViTConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.param_names = _param_names(config)
        missing = set(self.param_names) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.params = {name: np.asarray(params[name], np.float32) for name in self.param_names}
        h = config.hidden_dim
        # column selectors slicing the fused QKV output exactly
        eye = np.eye(3 * h, dtype=np.float32)
        self._selectors = (eye[:, 0:h], eye[:, h : 2 * h], eye[:, 2 * h : 3 * h])
        self._build_quant_layers()

    def _build_quant_layers(self) -> None:
        self.quant_layers: dict[str, QuantLinearLayer] = {}
        for k in range(self.config.num_layers):
            for part in self.QUANTIZED_PER_BLOCK:
                name = f"block{k}.{part}"
                self.quant_layers[name] = QuantLinearLayer(
                    self.params[f"{name}.w"],
                    bias=self.params[f"{name}.b"],
                    layer_id=name,
                )

    def refresh_quant_caches(self) -> None:
        """Re-quantize cached weights after in-place parameter updates."""
        for name, layer in self.quant_layers.items():
            layer.update_weights(self.params[f"{name}.w"])

    def astype(self, dtype) -> "ViTModel":
        """Copy with parameters cast to ``dtype`` (used for double-precision
        gradient checks; only the full-precision forward supports float64)."""
        clone = ViTModel.__new__(ViTModel)
        clone.config = self.config
        clone.param_names = list(self.param_names)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        clone._selectors = tuple(s.astype(dtype) for s in self._selectors)
        clone._build_quant_layers()
        return clone

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def forward_graph(
        self,
        images: Var,
        quantized: bool = True,
        capture: bool = False,
        policy: Optional[OutlierPolicy] = None,
        tau: Optional[float] = None,
        param_vars: Optional[dict[str, Var]] = None,
    ):
        """Differentiable forward pass.

        Returns (logits Var of shape B x M, captures, traces) where captures
        is a list of (layer_id, Var) pre-multiplication hidden states and
        traces the per-quantized-matmul instrumentation records.
        """
        cfg = self.config
        tau = cfg.tau if tau is None else tau
        if images.value.ndim != 4 or images.value.shape[1:] != (
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
        ):
            raise ValueError(
                f"expected images of shape (B, {cfg.channels}, "
                f"{cfg.image_size}, {cfg.image_size}), got {images.value.shape}"
            )
        if param_vars is None:
            param_vars = {name: Var(arr) for name, arr in self.params.items()}
        p = param_vars

        traces: list = []
        captures: list = []
        cap_sink = captures if capture else None

        def qlinear(x, name):
            return ag.quant_matmul(
                x,
                p[f"{name}.w"],
                p[f"{name}.b"],
                self.quant_layers[name],
                tau=tau,
                policy=policy,
                quantized=quantized,
                trace_sink=traces,
                capture_sink=cap_sink,
            )

        patches = ag.extract_patches(images, cfg.patch_size)
        x = ag.matmul(patches, p["patch_embed.w"]) + p["patch_embed.b"]
        x = x + p["pos_embed"]

        b = images.value.shape[0]
        n, h = cfg.num_patches, cfg.hidden_dim
        heads, hd = cfg.num_heads, cfg.hidden_dim // cfg.num_heads

        for k in range(cfg.num_layers):
            ln1 = ag.layernorm(x, p[f"block{k}.ln1.g"], p[f"block{k}.ln1.b"])
            qkv = qlinear(ln1, f"block{k}.qkv")
            parts = []
            for sel in self._selectors:
                part = ag.matmul(qkv, Var(sel))
                part = ag.reshape(part, (b, n, heads, hd))
                parts.append(ag.transpose(part, (0, 2, 1, 3)))
            q, k_, v = parts
            scores = ag.scale(
                ag.matmul(q, ag.transpose(k_, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)
            )
            attn = ag.softmax(scores, axis=-1)
            ctx = ag.matmul(attn, v)
            ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n, h))
            x = x + qlinear(ctx, f"block{k}.attn_out")

            ln2 = ag.layernorm(x, p[f"block{k}.ln2.g"], p[f"block{k}.ln2.b"])
            hidden = ag.gelu(qlinear(ln2, f"block{k}.mlp_in"))
            x = x + qlinear(hidden, f"block{k}.mlp_out")

        x = ag.layernorm(x, p["final_ln.g"], p["final_ln.b"])
        pooled = ag.mean(x, axis=1)
        logits = ag.matmul(pooled, p["head.w"]) + p["head.b"]
        return logits, captures, traces

    def forward(
        self,
        images: np.ndarray,
        quantized: bool = True,
        capture: bool = False,
        policy: Optional[OutlierPolicy] = None,
        tau: Optional[float] = None,
    ):
        """Plain forward: numpy logits, numpy capture buffer, traces."""
        logits, captures, traces = self.forward_graph(
            Var(np.asarray(images, np.float32)),
            quantized=quantized,
            capture=capture,
            policy=policy,
            tau=tau,
        )
        buffer = CaptureBuffer(
            entries=[(layer_id, v.value.copy()) for layer_id, v in captures]
        )
        return logits.value, buffer, traces

    def predict(
        self,
        images: np.ndarray,
        quantized: bool = True,
        policy: Optional[OutlierPolicy] = None,
    ) -> np.ndarray:
        """Argmax class per image (ties to the lowest index).

        Images are processed one at a time so predictions never depend on
        how a batch was assembled.
        """
        images = np.asarray(images, np.float32)
        out = np.empty(images.shape[0], dtype=np.int64)
        for i in range(images.shape[0]):
            logits, _, _ = self.forward(images[i : i + 1], quantized=quantized, policy=policy)
            out[i] = int(np.argmax(logits[0]))
        return out


def init_random(config: ViTConfig, seed: int = 0) -> ViTModel:
    """Deterministic fan-in-scaled uniform initialization."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    h, mlp = config.hidden_dim, config.mlp_dim
    params: dict[str, np.ndarray] = {
        "patch_embed.w": uniform(config.patch_dim, (config.patch_dim, h)),
        "patch_embed.b": np.zeros(h, np.float32),
        "pos_embed": uniform(h, (config.num_patches, h)),
    }
    for k in range(config.num_layers):
        params[f"block{k}.ln1.g"] = np.ones(h, np.float32)
        params[f"block{k}.ln1.b"] = np.zeros(h, np.float32)
        params[f"block{k}.qkv.w"] = uniform(h, (h, 3 * h))
        params[f"block{k}.qkv.b"] = np.zeros(3 * h, np.float32)
        params[f"block{k}.attn_out.w"] = uniform(h, (h, h))
        params[f"block{k}.attn_out.b"] = np.zeros(h, np.float32)
        params[f"block{k}.ln2.g"] = np.ones(h, np.float32)
        params[f"block{k}.ln2.b"] = np.zeros(h, np.float32)
        params[f"block{k}.mlp_in.w"] = uniform(h, (h, mlp))
        params[f"block{k}.mlp_in.b"] = np.zeros(mlp, np.float32)
        params[f"block{k}.mlp_out.w"] = uniform(mlp, (mlp, h))
        params[f"block{k}.mlp_out.b"] = np.zeros(h, np.float32)
    params["final_ln.g"] = np.ones(h, np.float32)
    params["final_ln.b"] = np.zeros(h, np.float32)
    params["head.w"] = uniform(h, (h, config.num_classes))
    params["head.b"] = np.zeros(config.num_classes, np.float32)
    return ViTModel(config, params)


def train_toy(
    model: ViTModel,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 20,
    learning_rate: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Minimize cross-entropy by mini-batch stochastic gradient descent with
    adaptive per-parameter step sizes (Adam moments), driven through the
    straight-through quantized forward. Returns the per-step loss history."""
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.max() >= model.config.num_classes:
        raise ValueError("label outside the configured class range")
    rng = np.random.default_rng(seed)
    history: list[float] = []
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    v = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start : start + batch_size]
            param_vars = {
                name: Var(arr, requires_grad=True) for name, arr in model.params.items()
            }
            logits, _, _ = model.forward_graph(
                Var(images[idx]), quantized=True, param_vars=param_vars
            )
            loss = ag.cross_entropy(logits, labels[idx])
            loss.backward()
            if learning_rate != 0.0:
                step += 1
                bias1 = 1.0 - beta1**step
                bias2 = 1.0 - beta2**step
                for name, var in param_vars.items():
                    g = var.grad
                    m[name] = beta1 * m[name] + (1 - beta1) * g
                    v[name] = beta2 * v[name] + (1 - beta2) * g * g
                    update = (m[name] / bias1) / (np.sqrt(v[name] / bias2) + eps)
                    model.params[name] -= learning_rate * update.astype(np.float32)
                model.refresh_quant_caches()
            history.append(float(loss.value))
    return history


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def save_weights(model: ViTModel, path: str) -> None:
    """Binary layout: magic, u32 version, config ints (i32 LE), tau (f32 LE),
    then every parameter tensor in canonical order as little-endian f32."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", WEIGHT_VERSION))
        fh.write(
            struct.pack(
                "<8i", *(getattr(cfg, name) for name in ViTConfig._INT_FIELDS)
            )
        )
        fh.write(struct.pack("<f", cfg.tau))
        for name in model.param_names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_weights(path: str) -> ViTModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != WEIGHT_MAGIC:
        raise BadMagicError(f"not a weight file: bad magic {blob[:4]!r}")
    if len(blob) < 8 + 32 + 4:
        raise TruncatedFileError("weight file header is incomplete")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != WEIGHT_VERSION:
        raise UnsupportedVersionError(f"unsupported weight file version {version}")
    ints = struct.unpack_from("<8i", blob, 8)
    (tau,) = struct.unpack_from("<f", blob, 40)
    config = ViTConfig(**dict(zip(ViTConfig._INT_FIELDS, ints)), tau=float(tau))

    offset = 44
    params: dict[str, np.ndarray] = {}
    probe = init_random(config, seed=0)  # shapes only
    for name in probe.param_names:
        shape = probe.params[name].shape
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise TruncatedFileError(
                f"weight file ends inside parameter {name!r}"
            )
        params[name] = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(shape)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise WeightFileError("trailing bytes after the last parameter")
    return ViTModel(config, params)
