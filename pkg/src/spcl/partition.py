"""Global uniform masking and the disjoint two-view split of visible tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MaskRatioError, PlanError
from .rng import Streams
from .tensor import Tensor, gather_rows
from .patching import TokenSequence

# Absorbs binary rounding of decimal mask ratios: floor((1-0.7)*10) must be 3.
_FLOOR_GUARD = 1e-9


def visible_count(n_tokens: int, ratio: float) -> int:
    """floor((1 - r) * N), computed so decimal ratios floor mathematically."""
    return int(math.floor((1.0 - ratio) * n_tokens + _FLOOR_GUARD))


def _even(n: int) -> int:
    return n - (n % 2)


@dataclass(frozen=True)
class PartitionPlan:
    """One image's masking outcome and its split into two equal groups.

    ``visible`` is already reduced to an even count (one uniformly chosen
    token is discarded when floor((1-r)N) is odd) so the two groups
    partition it exactly.  ``seed`` is the replay key of the stream that
    produced the plan.
    """

    n_tokens: int
    ratio: float
    visible: tuple[int, ...]
    group_a: tuple[int, ...]
    group_b: tuple[int, ...]
    seed: str = ""

    def __post_init__(self):
        vis, ga, gb = set(self.visible), set(self.group_a), set(self.group_b)
        if len(vis) != len(self.visible) or len(ga) != len(self.group_a) or len(
            gb
        ) != len(self.group_b):
            raise PlanError("plan contains duplicate indices")
        if ga & gb:
            raise PlanError(f"groups overlap: {sorted(ga & gb)}")
        if len(ga) != len(gb):
            raise PlanError(f"unequal group sizes {len(ga)} and {len(gb)}")
        if not (ga | gb) <= vis:
            raise PlanError("groups are not a subset of the visible set")
        if not all(0 <= i < self.n_tokens for i in self.visible):
            raise PlanError(f"visible indices out of range [0, {self.n_tokens})")
        for name in ("visible", "group_a", "group_b"):
            seq = getattr(self, name)
            if any(a >= b for a, b in zip(seq, seq[1:])):
                raise PlanError(f"{name} is not strictly ascending")

    @property
    def group_size(self) -> int:
        return len(self.group_a)


def sample_partition(
    n_tokens: int,
    ratio: float,
    rng: np.random.Generator,
    seed_label: str = "",
) -> PartitionPlan:
    """Draw visible tokens uniformly without replacement and split them in two.

    Consumes the generator in a fixed order (choice, odd-discard draw,
    permutation) so identical generator state reproduces the plan exactly.
    """
    if n_tokens < 2:
        raise MaskRatioError(f"need at least 2 tokens, got {n_tokens}")
    if not (0.0 <= ratio < 1.0):
        raise MaskRatioError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_vis = visible_count(n_tokens, ratio)
    if n_vis < 2:
        raise MaskRatioError(
            f"mask ratio {ratio} leaves no contrastive pair ({n_vis} visible of {n_tokens})"
        )
    visible = np.sort(rng.choice(n_tokens, size=n_vis, replace=False))
    if n_vis % 2:
        drop = int(rng.integers(n_vis))
        visible = np.delete(visible, drop)
    half = visible.size // 2
    perm = rng.permutation(visible.size)
    group_a = np.sort(visible[perm[:half]])
    group_b = np.sort(visible[perm[half:]])
    return PartitionPlan(
        n_tokens=n_tokens,
        ratio=float(ratio),
        visible=tuple(int(i) for i in visible),
        group_a=tuple(int(i) for i in group_a),
        group_b=tuple(int(i) for i in group_b),
        seed=seed_label,
    )


def effective_branch_ratio(n_tokens: int, ratio: float) -> float:
    """Masking ratio each branch experiences: 1 - (even-reduced visible)/2 / N."""
    n_vis = visible_count(n_tokens, ratio)
    if n_tokens < 2 or not (0.0 <= ratio < 1.0) or n_vis < 2:
        raise MaskRatioError(
            f"invalid masking setup: N={n_tokens}, r={ratio} leaves {n_vis} visible"
        )
    half = _even(n_vis) // 2
    return 1.0 - half / n_tokens


def apply_partition(tokens: TokenSequence, plan: PartitionPlan) -> tuple[Tensor, Tensor]:
    """Gather the two views' rows (ascending order); a differentiable gather."""
    if plan.n_tokens != tokens.n:
        raise PlanError(
            f"plan covers {plan.n_tokens} tokens but sequence has {tokens.n}"
        )
    return (
        gather_rows(tokens.tokens, np.asarray(plan.group_a)),
        gather_rows(tokens.tokens, np.asarray(plan.group_b)),
    )


def coverage_histogram(
    n_tokens: int, ratio: float, trials: int, seed: int
) -> np.ndarray:
    """Per-index frequency of landing in group_a over independently seeded trials."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    streams = Streams(seed)
    counts = np.zeros(n_tokens, dtype=np.int64)
    for t in range(trials):
        plan = sample_partition(
            n_tokens, ratio, streams.generator("partition", t),
            seed_label=streams.label("partition", t),
        )
        counts[list(plan.group_a)] += 1
    return counts / trials
