"""T-distributed spherical similarity and the two-view contrastive objective.

The similarity maps a cosine c into [0, 1] as 0.5*(1+c)/(1+(1-c)*kappa);
kappa > 0 concentrates mass near c = 1.  The batch objective treats the two
views of each image as a positive pair and every other representation in
the batch as a negative.  The trainable temperature multiplies the
similarity inside the exponentials (a learnable logit scale, since the
similarity is bounded in [0, 1]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    Tensor,
    _accum,
    _result,
    add,
    clamp,
    div,
    exp,
    matmul,
    mean_all,
    mul,
    sum_all,
    transpose,
)

_UNIT_TOL = 1e-4


@dataclass
class LossParams:
    """Concentration plus the trainable temperature parameterization.

    The temperature is exp(theta_tau) clamped to [tau_min, tau_max]; the
    exponential keeps it positive, the clamp keeps softmax logits in a
    usable range.
    """

    kappa: float
    theta_tau: Tensor
    tau_min: float = 1.0
    tau_max: float = 100.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if not (0 < self.tau_min <= self.tau_max):
            raise ConfigError(
                f"need 0 < tau_min <= tau_max, got [{self.tau_min}, {self.tau_max}]"
            )

    @classmethod
    def create(cls, kappa: float = 1.0, tau_init: float = 10.0,
               tau_min: float = 1.0, tau_max: float = 100.0) -> "LossParams":
        theta = Tensor(np.float32(math.log(tau_init)), requires_grad=True)
        return cls(kappa=kappa, theta_tau=theta, tau_min=tau_min, tau_max=tau_max)

    def tau(self) -> float:
        """Current clamped temperature value."""
        return float(np.clip(math.exp(float(self.theta_tau.data)), self.tau_min, self.tau_max))

    def clamp_theta(self):
        """Pull theta_tau back so exp(theta_tau) lies within the clamp bounds."""
        lo, hi = math.log(self.tau_min), math.log(self.tau_max)
        self.theta_tau.data = np.clip(self.theta_tau.data, lo, hi)


@dataclass
class BatchLossReport:
    """Loss value with the per-anchor breakdown and similarity diagnostics."""

    total: Tensor  # scalar, differentiable
    per_anchor: np.ndarray  # (2N,), detached
    mean_pos_sim: float
    mean_neg_sim: float
    tau_value: float

    @property
    def value(self) -> float:
        return float(self.total.data)


def tsp_from_cosine(c: float, kappa: float) -> float:
    """Scalar similarity kernel in float64; the analytic reference path."""
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    return 0.5 * (1.0 + c) / (1.0 + (1.0 - c) * kappa)


def _check_unit_rows(data: np.ndarray):
    norms = np.sqrt((data.astype(np.float64) ** 2).sum(axis=-1))
    worst = float(np.abs(norms - 1.0).max())
    if worst > _UNIT_TOL:
        raise ContractError(
            f"rows must be unit vectors (max norm deviation {worst:.2e} > {_UNIT_TOL})"
        )


def tsp_similarity(z1: Tensor, z2: Tensor, kappa: float) -> Tensor:
    """Similarity of two unit vectors as a differentiable scalar."""
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    if z1.shape != z2.shape or z1.ndim != 1:
        raise ContractError(f"expected equal 1-D shapes, got {z1.shape} and {z2.shape}")
    _check_unit_rows(z1.data[None, :])
    _check_unit_rows(z2.data[None, :])
    c = clamp(sum_all(mul(z1, z2)), -1.0, 1.0)
    num = mul(add(c, 1.0), 0.5)
    den = add(mul(c, -float(kappa)), 1.0 + float(kappa))
    return div(num, den)


def similarity_matrix(z: Tensor, kappa: float) -> Tensor:
    """Pairwise similarities of unit rows: symmetric, unit diagonal, in [0, 1]."""
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    if z.ndim != 2:
        raise ContractError(f"expected a 2-D row matrix, got shape {z.shape}")
    _check_unit_rows(z.data)
    c = clamp(matmul(z, transpose(z)), -1.0, 1.0)
    # 0.5*(1+c) / (1 + (1-c)*kappa), with the denominator written as
    # (1+kappa) - kappa*c to stay in two primitive ops.
    num = mul(add(c, 1.0), 0.5)
    den = add(mul(c, -float(kappa)), 1.0 + float(kappa))
    return div(num, den)


def check_pairing(partner: np.ndarray, count: int) -> np.ndarray:
    """Validate that ``partner`` is a perfect matching on range(count)."""
    partner = np.asarray(partner, dtype=np.intp)
    if partner.shape != (count,):
        raise ContractError(f"pairing must have shape ({count},), got {partner.shape}")
    if np.any(partner < 0) or np.any(partner >= count):
        raise ContractError("pairing contains out-of-range indices")
    if np.any(partner == np.arange(count)):
        raise ContractError("pairing maps an anchor to itself")
    if np.any(partner[partner] != np.arange(count)):
        raise ContractError("pairing is not an involution (not a perfect matching)")
    return partner


def _contrastive_per_anchor(
    z: Tensor, partner: np.ndarray, tau: Tensor, kappa: float
) -> tuple[Tensor, np.ndarray]:
    """Fused kernel from unit rows to per-anchor losses, float64 inside.

    Computes cosines, the T-SP transform, the temperature-scaled logits and
    the per-anchor -logit_pos + logsumexp_{j != i} in one pass, so neither
    the similarity matrix nor the large logits pass through float32 storage
    (their quantization, amplified by tau, would drown finite-difference
    verification).  Only the order-one per-anchor values are stored back.
    Gradients flow to the embeddings and to the temperature scalar; the
    float64 similarity matrix is also returned for diagnostics.
    """
    rows = z.shape[0]
    zv = z.data.astype(np.float64)
    c_raw = zv @ zv.T
    in_range = (c_raw >= -1.0) & (c_raw <= 1.0)
    c = np.clip(c_raw, -1.0, 1.0)
    den = 1.0 + (1.0 - c) * kappa
    s = 0.5 * (1.0 + c) / den
    tau_v = float(tau.data)
    logits = s * tau_v
    off_diag = ~np.eye(rows, dtype=bool)
    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    p = np.exp(masked - row_max)  # exact zeros on the diagonal
    z_sum = p.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(z_sum[:, 0])
    anchors = np.arange(rows)
    per = lse - logits[anchors, partner]

    def vjp(g):
        dlogits = g[:, None] * (p / z_sum)
        dlogits[anchors, partner] -= g
        dtau = float((dlogits * s).sum())
        _accum(tau, np.asarray(dtau, dtype=np.float32).reshape(tau.shape))
        ds = dlogits * tau_v
        dc = np.where(in_range, ds * 0.5 * (1.0 + 2.0 * kappa) / (den * den), 0.0)
        _accum(z, ((dc + dc.T) @ zv).astype(np.float32))

    return _result(per.astype(np.float32), (z, tau), vjp), s


def batch_loss(z: Tensor, partner: np.ndarray, params: LossParams) -> BatchLossReport:
    """Mean contrastive loss over all 2N anchors.

    For each anchor i the loss is -log( exp(s(i, partner)*tau) /
    sum_{j != i} exp(s(i, j)*tau) ); the denominator keeps the positive term
    and excludes only the anchor itself.
    """
    rows = z.shape[0]
    if rows < 2 or rows % 2:
        raise ContractError(f"batch must hold 2N >= 2 rows, got {rows}")
    partner = check_pairing(partner, rows)
    _check_unit_rows(z.data)

    tau_t = clamp(exp(params.theta_tau), params.tau_min, params.tau_max)
    per_anchor, sim_data = _contrastive_per_anchor(z, partner, tau_t, params.kappa)
    total = mean_all(per_anchor)

    pos_sims = sim_data[np.arange(rows), partner]
    neg_mask = ~np.eye(rows, dtype=bool)
    neg_mask[np.arange(rows), partner] = False
    return BatchLossReport(
        total=total,
        per_anchor=per_anchor.data.copy(),
        mean_pos_sim=float(pos_sims.mean()),
        mean_neg_sim=float(sim_data[neg_mask].mean()) if neg_mask.any() else float("nan"),
        tau_value=float(tau_t.data),
    )


def collapse_loss_level(rows: int) -> float:
    """Loss value when every embedding is identical: ln(2N - 1)."""
    return math.log(rows - 1)
