"""Shared pre-norm transformer encoder with a learnable [CLS] readout.

Both partitioned views of an image pass through the same parameter set;
there is structurally one encoder — no momentum copy, no projection head,
no decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .partition import PartitionPlan, apply_partition
from .patching import TokenSequence
from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    row,
    softmax_rows,
    slice_cols,
    transpose,
)

INIT_STD = 0.02
INIT_TRUNC = 2.0  # in units of std


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters; desk defaults train on a CPU in minutes."""

    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 8
    image: int = 64
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.dim <= 0 or self.heads <= 0 or self.mlp_ratio <= 0:
            raise ConfigError("dim, heads and mlp_ratio must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} not divisible by 4")
        if self.patch <= 0 or self.image <= 0 or self.image % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide image side {self.image}"
            )

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def max_seq(self) -> int:
        return self.n_patches + 1  # content tokens plus [CLS]


class EncoderParams:
    """Flat named-tensor view of the full trainable weight set."""

    def __init__(self, tensors: dict[str, Tensor], cfg: EncoderConfig):
        self.tensors = tensors
        self.cfg = cfg

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @staticmethod
    def decay_applies(name: str) -> bool:
        """Weight decay skips norms, biases and the [CLS] vector."""
        return not (name == "cls" or name.endswith(".bias") or name.endswith(".gain"))


def _shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.dim, cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (cfg.patch * cfg.patch, d),
        "patch.bias": (d,),
        "cls": (d,),
    }
    for i in range(cfg.depth):
        b = f"block{i}"
        shapes[f"{b}.ln1.gain"] = (d,)
        shapes[f"{b}.ln1.bias"] = (d,)
        shapes[f"{b}.qkv.weight"] = (d, 3 * d)
        shapes[f"{b}.qkv.bias"] = (3 * d,)
        shapes[f"{b}.out.weight"] = (d, d)
        shapes[f"{b}.out.bias"] = (d,)
        shapes[f"{b}.ln2.gain"] = (d,)
        shapes[f"{b}.ln2.bias"] = (d,)
        shapes[f"{b}.mlp.fc1.weight"] = (d, m * d)
        shapes[f"{b}.mlp.fc1.bias"] = (m * d,)
        shapes[f"{b}.mlp.fc2.weight"] = (m * d, d)
        shapes[f"{b}.mlp.fc2.bias"] = (d,)
    shapes["final.gain"] = (d,)
    shapes["final.bias"] = (d,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=INIT_TRUNC):
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit gains."""
    tensors: dict[str, Tensor] = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _trunc_normal(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderParams(tensors, cfg)


def _attention(x: Tensor, params: EncoderParams, block: str, cfg: EncoderConfig) -> Tensor:
    qkv = add(matmul(x, params[f"{block}.qkv.weight"]), params[f"{block}.qkv.bias"])
    d, dh = cfg.dim, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(cfg.heads):
        q = slice_cols(qkv, h * dh, (h + 1) * dh)
        k = slice_cols(qkv, d + h * dh, d + (h + 1) * dh)
        v = slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)
        attn = softmax_rows(mul(matmul(q, transpose(k)), scale))
        heads.append(matmul(attn, v))
    merged = heads[0] if cfg.heads == 1 else concat_cols(heads)
    return add(matmul(merged, params[f"{block}.out.weight"]), params[f"{block}.out.bias"])


def forward_cls(view: Tensor, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    """Encode a view (rows already positioned) and return the [CLS] embedding.

    The [CLS] vector is prepended without positional information; blocks are
    pre-norm (LN -> MHSA -> residual, LN -> MLP -> residual) and a final
    layer norm precedes the readout.
    """
    if view.ndim != 2 or view.shape[1] != cfg.dim:
        raise ConfigError(f"view shape {view.shape} does not match width {cfg.dim}")
    if view.shape[0] < 1:
        raise ConfigError("view must contain at least one token")
    if view.shape[0] + 1 > cfg.max_seq:
        raise ConfigError(
            f"sequence of {view.shape[0]} tokens plus [CLS] exceeds maximum {cfg.max_seq}"
        )
    x = concat_rows(reshape(params["cls"], (1, cfg.dim)), view)
    eps = cfg.ln_eps
    for i in range(cfg.depth):
        b = f"block{i}"
        h = layer_norm(x, params[f"{b}.ln1.gain"], params[f"{b}.ln1.bias"], eps)
        x = add(x, _attention(h, params, b, cfg))
        h = layer_norm(x, params[f"{b}.ln2.gain"], params[f"{b}.ln2.bias"], eps)
        h = add(matmul(h, params[f"{b}.mlp.fc1.weight"]), params[f"{b}.mlp.fc1.bias"])
        h = add(matmul(gelu(h), params[f"{b}.mlp.fc2.weight"]), params[f"{b}.mlp.fc2.bias"])
        x = add(x, h)
    x = layer_norm(x, params["final.gain"], params["final.bias"], eps)
    return row(x, 0)


def forward_pair(
    tokens: TokenSequence,
    plan: PartitionPlan,
    params: EncoderParams,
    cfg: EncoderConfig,
) -> tuple[Tensor, Tensor]:
    """Encode both views with the one shared parameter set."""
    view_a, view_b = apply_partition(tokens, plan)
    return forward_cls(view_a, params, cfg), forward_cls(view_b, params, cfg)


def forward_full(tokens: TokenSequence, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    """Inference-time embedding over the full, unmasked token sequence."""
    return forward_cls(tokens.tokens, params, cfg)
