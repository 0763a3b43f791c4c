"""Analytic compute-cost model for encoder forwards, plus an instrumented
cross-check that counts the multiply-accumulates actually executed.

Convention: one multiply-accumulate is one FLOP; normalizations and
activations are excluded (sub-percent contribution).  Under this convention
a 12x768 backbone at sequence length 197 costs ~17.5e9, the figure commonly
quoted for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, forward_cls, init_params
from .errors import ConfigError
from .partition import visible_count
from .patching import embed_tokens, sincos_pos_embed
from .rng import Streams
from .tensor import count_macs, no_grad

BRUTE_MAX_DIM = 8
BRUTE_MAX_DEPTH = 2
BRUTE_MAX_SEQ = 4


def _block_costs(cfg: EncoderConfig, seq_len: int) -> tuple[int, int]:
    """(attention, mlp) MACs for one block at sequence length seq_len."""
    s, d, m = seq_len, cfg.dim, cfg.mlp_ratio
    attention = 3 * s * d * d + 2 * s * s * d + s * d * d  # QKV, scores+values, out
    mlp = 2 * m * s * d * d
    return attention, mlp


def patch_embed_cost(cfg: EncoderConfig, n_tokens: int) -> int:
    return n_tokens * cfg.patch * cfg.patch * cfg.dim


def encoder_forward_cost(cfg: EncoderConfig, seq_len: int) -> int:
    """Total MACs of one forward at seq_len (content tokens plus [CLS])."""
    if seq_len < 1:
        raise ConfigError(f"sequence length must be >= 1, got {seq_len}")
    attention, mlp = _block_costs(cfg, seq_len)
    return cfg.depth * (attention + mlp) + patch_embed_cost(cfg, seq_len - 1)


@dataclass(frozen=True)
class CostReport:
    """Cost breakdown of one two-branch step versus a full-sequence forward."""

    depth: int
    seq_len_branch: int
    seq_len_full: int
    attention_per_block: int  # at the branch length
    mlp_per_block: int
    patch_embed: int  # once over all visible tokens (the branches partition them)
    total_per_branch: int
    spcl_total: int
    baseline_total: int

    @property
    def ratio(self) -> float:
        return self.spcl_total / self.baseline_total

    def __post_init__(self):
        blocks = self.depth * (self.attention_per_block + self.mlp_per_block)
        if 2 * blocks + self.patch_embed != self.spcl_total:
            raise ConfigError("cost report parts do not sum to the total")


def spcl_step_cost(cfg: EncoderConfig, n_tokens: int, ratio: float) -> CostReport:
    """Cost of encoding both disjoint views versus one full-sequence forward.

    Each branch runs at (even-reduced visible)/2 content tokens plus [CLS];
    the two branches together patch-embed exactly the visible tokens once.
    """
    n_vis = visible_count(n_tokens, ratio)
    if n_tokens < 2 or not (0.0 <= ratio < 1.0) or n_vis < 2:
        raise ConfigError(
            f"invalid masking setup: N={n_tokens}, r={ratio} leaves {n_vis} visible"
        )
    n_even = n_vis - (n_vis % 2)
    s_branch = n_even // 2 + 1
    attention, mlp = _block_costs(cfg, s_branch)
    per_branch = encoder_forward_cost(cfg, s_branch)
    return CostReport(
        depth=cfg.depth,
        seq_len_branch=s_branch,
        seq_len_full=n_tokens + 1,
        attention_per_block=attention,
        mlp_per_block=mlp,
        patch_embed=patch_embed_cost(cfg, n_even),
        total_per_branch=per_branch,
        spcl_total=2 * per_branch,
        baseline_total=encoder_forward_cost(cfg, n_tokens + 1),
    )


def brute_force_count(cfg: EncoderConfig, seq_len: int) -> int:
    """Tally MACs of a real instrumented forward; must equal the closed form.

    Guard-railed to tiny configurations: the point is exactness, not scale.
    """
    if cfg.dim > BRUTE_MAX_DIM or cfg.depth > BRUTE_MAX_DEPTH or seq_len > BRUTE_MAX_SEQ:
        raise ConfigError(
            f"brute force counting is limited to dim<={BRUTE_MAX_DIM}, "
            f"depth<={BRUTE_MAX_DEPTH}, seq<={BRUTE_MAX_SEQ}"
        )
    if seq_len < 2:
        raise ConfigError(f"need at least one content token, got seq_len={seq_len}")
    n_content = seq_len - 1
    rng = Streams(0).generator("flops-probe")
    params = init_params(cfg, rng)
    patches = rng.normal(0.0, 1.0, size=(n_content, cfg.patch * cfg.patch)).astype(
        np.float32
    )
    # Positions of the first n_content grid slots; laid out as a 1 x n grid
    # so the real embedding path runs on exactly these tokens.
    pos = sincos_pos_embed(cfg.grid, cfg.grid, cfg.dim)[:n_content]
    with no_grad(), count_macs() as counter:
        tokens = embed_tokens(
            patches, params["patch.weight"], params["patch.bias"], pos, 1, n_content
        )
        forward_cls(tokens.tokens, params, cfg)
    return counter.macs
