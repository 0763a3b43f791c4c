"""Pre-training loop: two-view forwards, contrastive loss, AdamW, schedules.

One optimizer step consumes ``accum_steps`` micro-batches; each micro-batch
computes its own contrastive loss (negatives stay within the micro-batch)
and the gradients are averaged before a single update sweep.  All
randomness derives from per-purpose counter-based streams keyed by the run
seed, so any step can be replayed in isolation and a resumed run retraces
the uninterrupted trajectory.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, EncoderParams, forward_pair, init_params, _shapes
from .errors import ConfigError, DataFormatError, NumericError
from .loss import BatchLossReport, LossParams, batch_loss, collapse_loss_level
from .partition import sample_partition
from .patching import ImageGray, embed_tokens, extract_patches, sincos_pos_embed
from .rng import Streams
from .tensor import Tensor, backward, l2_normalize_rows, stack_rows, zero_grads

log = logging.getLogger(__name__)

COLLAPSE_TOL = 1e-3
COLLAPSE_PATIENCE = 50


@dataclass
class TrainConfig:
    """Optimization hyperparameters; desk defaults run on a CPU in minutes.

    ``lr_peak=None`` applies the linear scaling rule 1.5e-4 * batch/256.
    ``warmup_steps``/``total_steps`` of ``None`` are derived from the
    dataset size at training time (warmup is 5% of the total).
    """

    epochs: int = 20
    batch_size: int = 32
    accum_steps: int = 1
    lr_peak: float | None = None
    warmup_steps: int | None = None
    total_steps: int | None = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    mask_ratio: float = 0.6
    kappa: float = 1.0
    tau_init: float = 10.0
    tau_min: float = 1.0
    tau_max: float = 100.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    standardize: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("epochs, batch_size and accum_steps must be >= 1")
        if self.batch_size < 2:
            log.warning(
                "batch_size=1 yields a degenerate contrastive loss (identically 0)"
            )
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.warmup_steps is not None and self.total_steps is not None:
            if not (0 < self.warmup_steps < self.total_steps):
                raise ConfigError(
                    f"need 0 < warmup_steps < total_steps, got "
                    f"{self.warmup_steps} / {self.total_steps}"
                )
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def resolved_lr_peak(self) -> float:
        if self.lr_peak is not None:
            return self.lr_peak
        return 1.5e-4 * self.batch_size / 256.0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    warmup, total = cfg.warmup_steps, cfg.total_steps
    if warmup is None or total is None:
        raise ConfigError("lr_at needs warmup_steps and total_steps resolved")
    if not (0 <= step <= total):
        raise ConfigError(f"step {step} outside [0, {total}]")
    peak = cfg.resolved_lr_peak()
    if step <= warmup:
        return peak * step / warmup
    t = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptState:
    """Per-parameter AdamW moment buffers plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def ensure(self, name: str, shape: tuple[int, ...]):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)


def adamw_update(
    param: Tensor,
    grad: np.ndarray,
    opt_state: OptState,
    lr: float,
    cfg: TrainConfig,
    name: str,
    decay: bool,
):
    """One decoupled-weight-decay Adam update, in place.

    Call with ``opt_state.step`` already advanced to the 1-based step index.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter '{name}'")
    opt_state.ensure(name, param.shape)
    t = opt_state.step
    m = opt_state.m[name]
    v = opt_state.v[name]
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    update = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    if decay and cfg.weight_decay:
        update = update + cfg.weight_decay * param.data
    param.data = (param.data - np.float32(lr) * update).astype(np.float32)


@dataclass
class TrainState:
    """Everything the loop mutates; the unit of checkpointing."""

    enc_cfg: EncoderConfig
    cfg: TrainConfig
    params: EncoderParams
    loss_params: LossParams
    opt: OptState
    streams: Streams
    pixel_stats: tuple[float, float] | None = None  # (mean, std) when standardizing

    def trainables(self) -> dict[str, Tensor]:
        named = self.params.named()
        named["theta_tau"] = self.loss_params.theta_tau
        return named

    def parameter_count(self) -> int:
        return sum(t.size for t in self.trainables().values())


def init_state(enc_cfg: EncoderConfig, cfg: TrainConfig) -> TrainState:
    streams = Streams(cfg.seed)
    params = init_params(enc_cfg, streams.generator("init"))
    loss_params = LossParams.create(
        kappa=cfg.kappa, tau_init=cfg.tau_init,
        tau_min=cfg.tau_min, tau_max=cfg.tau_max,
    )
    return TrainState(
        enc_cfg=enc_cfg, cfg=cfg, params=params,
        loss_params=loss_params, opt=OptState(), streams=streams,
    )


@dataclass
class StepReport:
    """Aggregated view of one optimizer step (possibly several micro-batches)."""

    loss: float
    tau: float
    mean_pos_sim: float
    mean_neg_sim: float
    lr: float
    micro_reports: list[BatchLossReport]


def _as_patches(item, enc_cfg: EncoderConfig) -> np.ndarray:
    if isinstance(item, ImageGray):
        return extract_patches(item, enc_cfg.patch)
    return np.asarray(item, dtype=np.float32)


def _pair_forward(args):
    patches, plan, params, enc_cfg, pos = args
    tokens = embed_tokens(
        patches, params["patch.weight"], params["patch.bias"],
        pos, enc_cfg.grid, enc_cfg.grid,
    )
    return forward_pair(tokens, plan, params, enc_cfg)


def _micro_batch_loss(
    patch_list: Sequence[np.ndarray],
    plans,
    state: TrainState,
    pos: np.ndarray,
) -> BatchLossReport:
    params, enc_cfg = state.params, state.enc_cfg
    jobs = [(p, plan, params, enc_cfg, pos) for p, plan in zip(patch_list, plans)]
    if state.cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=state.cfg.threads) as pool:
            pairs = list(pool.map(_pair_forward, jobs))
    else:
        pairs = [_pair_forward(j) for j in jobs]
    flat = [z for pair in pairs for z in pair]
    z = l2_normalize_rows(stack_rows(flat))
    partner = np.arange(len(flat)) ^ 1  # rows 2i and 2i+1 are the two views
    return batch_loss(z, partner, state.loss_params)


def train_step(
    micro_batches: Sequence[Sequence],
    state: TrainState,
    pos: np.ndarray | None = None,
) -> StepReport:
    """Run one optimizer step over the given micro-batches of images.

    Images may be :class:`ImageGray` or precomputed patch matrices.  The
    partition of image ``s`` in micro-batch ``j`` replays from the stream
    ``("partition", step * accum_steps + j, s)``.
    """
    if not micro_batches or not any(len(b) for b in micro_batches):
        raise ConfigError("train_step needs at least one non-empty micro-batch")
    cfg, enc_cfg = state.cfg, state.enc_cfg
    if pos is None:
        pos = sincos_pos_embed(enc_cfg.grid, enc_cfg.grid, enc_cfg.dim)

    trainables = state.trainables()
    zero_grads(trainables.values())

    reports: list[BatchLossReport] = []
    n_micro = len(micro_batches)
    for j, batch in enumerate(micro_batches):
        micro_index = state.opt.step * cfg.accum_steps + j
        patch_list, plans = [], []
        for s, item in enumerate(batch):
            patch_list.append(_as_patches(item, enc_cfg))
            rng = state.streams.generator("partition", micro_index, s)
            plans.append(
                sample_partition(
                    enc_cfg.n_patches, cfg.mask_ratio, rng,
                    seed_label=state.streams.label("partition", micro_index, s),
                )
            )
        report = _micro_batch_loss(patch_list, plans, state, pos)
        if not math.isfinite(report.value):
            raise NumericError(
                f"non-finite loss {report.value} in micro-batch {micro_index}"
            )
        backward(report.total)
        reports.append(report)

    if cfg.total_steps is None or cfg.warmup_steps is None:
        raise ConfigError("train_step needs a resolved schedule (see resolve_schedule)")
    # Optimizer step k applies lr_at(k + 1): warmup is effective from the
    # first update and the peak is reached exactly at step warmup_steps.
    lr = lr_at(min(state.opt.step + 1, cfg.total_steps), cfg)
    state.opt.step += 1
    inv = 1.0 / n_micro
    for name, tensor in trainables.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape, np.float32)
        if n_micro > 1:
            grad = grad * np.float32(inv)
        decay = name != "theta_tau" and EncoderParams.decay_applies(name)
        adamw_update(tensor, grad, state.opt, lr, cfg, name, decay)
    state.loss_params.clamp_theta()
    zero_grads(trainables.values())

    return StepReport(
        loss=float(np.mean([r.value for r in reports])),
        tau=state.loss_params.tau(),
        mean_pos_sim=float(np.mean([r.mean_pos_sim for r in reports])),
        mean_neg_sim=float(np.mean([r.mean_neg_sim for r in reports])),
        lr=lr,
        micro_reports=reports,
    )


def resolve_schedule(cfg: TrainConfig, dataset_size: int) -> TrainConfig:
    """Fill in total/warmup steps for a dataset: one step per accum group."""
    if dataset_size < 1:
        raise ConfigError("dataset is empty")
    micro_per_epoch = math.ceil(dataset_size / cfg.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / cfg.accum_steps)
    total = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else max(1, round(0.05 * total))
    if not (0 < warmup < total):
        warmup = max(1, min(warmup, total - 1))
    return TrainConfig(**{**asdict(cfg), "warmup_steps": warmup, "total_steps": total})


@dataclass
class TrainLogRow:
    step: int
    loss: float
    tau: float
    mean_pos_sim: float
    mean_neg_sim: float
    lr: float

    def formatted(self) -> str:
        return (
            f"{self.step}\t{self.loss:.8e}\t{self.tau:.8e}\t"
            f"{self.mean_pos_sim:.8e}\t{self.mean_neg_sim:.8e}\t{self.lr:.8e}"
        )

    HEADER = "step\tloss\ttau\tmean_pos_sim\tmean_neg_sim\tlr"


def run_training(
    dataset: Sequence[ImageGray],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    state: TrainState | None = None,
    on_step: Callable[[TrainLogRow, TrainState], None] | None = None,
    max_steps: int | None = None,
) -> tuple[TrainState, list[TrainLogRow]]:
    """Core optimization loop over the dataset; file I/O lives in ``pretrain``.

    With ``state`` supplied (e.g. restored from a checkpoint) the loop
    continues from ``state.opt.step`` and reproduces the uninterrupted
    trajectory.  Returns the final state and one log row per step taken.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for img in dataset:
        if isinstance(img, ImageGray) and (
            img.height != enc_cfg.image or img.width != enc_cfg.image
        ):
            raise ConfigError(
                f"image {img.height}x{img.width} does not match configured "
                f"side {enc_cfg.image}"
            )
    cfg = resolve_schedule(cfg, len(dataset))
    if state is None:
        state = init_state(enc_cfg, cfg)
    else:
        state.cfg = cfg

    pos = sincos_pos_embed(enc_cfg.grid, enc_cfg.grid, enc_cfg.dim)
    patches = [_as_patches(img, enc_cfg) for img in dataset]
    if cfg.standardize:
        if state.pixel_stats is None:
            stats = np.concatenate([p.reshape(-1) for p in patches])
            state.pixel_stats = (float(stats.mean()), float(stats.std() + 1e-8))
        mean, std = state.pixel_stats
        patches = [((p - mean) / std).astype(np.float32) for p in patches]

    micro_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / cfg.accum_steps)

    rows: list[TrainLogRow] = []
    collapse_streak = 0
    done = 0
    while state.opt.step < cfg.total_steps:
        if max_steps is not None and done >= max_steps:
            break
        step = state.opt.step
        epoch = step // steps_per_epoch
        step_in_epoch = step % steps_per_epoch
        perm = state.streams.generator("shuffle", epoch).permutation(len(dataset))
        micro_batches = []
        for j in range(cfg.accum_steps):
            micro = step_in_epoch * cfg.accum_steps + j
            if micro >= micro_per_epoch:
                break
            sel = perm[micro * cfg.batch_size : (micro + 1) * cfg.batch_size]
            micro_batches.append([patches[i] for i in sel])
        report = train_step(micro_batches, state, pos)
        row = TrainLogRow(
            step=step, loss=report.loss, tau=report.tau,
            mean_pos_sim=report.mean_pos_sim, mean_neg_sim=report.mean_neg_sim,
            lr=report.lr,
        )
        rows.append(row)
        done += 1

        levels = [collapse_loss_level(len(r.per_anchor)) for r in report.micro_reports]
        if all(
            abs(r.value - lv) < COLLAPSE_TOL
            for r, lv in zip(report.micro_reports, levels)
        ):
            collapse_streak += 1
            if collapse_streak == COLLAPSE_PATIENCE:
                log.warning(
                    "loss pinned at the collapse level ln(2N-1) for %d steps; "
                    "representations may have collapsed", COLLAPSE_PATIENCE,
                )
        else:
            collapse_streak = 0

        if on_step is not None:
            on_step(row, state)
    return state, rows


# ---------------------------------------------------------------------------
# checkpoint bridging


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {name: t.data for name, t in state.params.named().items()}
    tensors["theta_tau"] = state.loss_params.theta_tau.data
    for name, buf in state.opt.m.items():
        tensors[f"opt.m.{name}"] = buf
    for name, buf in state.opt.v.items():
        tensors[f"opt.v.{name}"] = buf
    extras = {}
    if state.pixel_stats is not None:
        extras["pixel_mean"], extras["pixel_std"] = state.pixel_stats
    return Checkpoint(
        encoder_cfg=asdict(state.enc_cfg),
        train_cfg=asdict(state.cfg),
        loss_cfg={
            "kappa": state.cfg.kappa,
            "tau_min": state.cfg.tau_min,
            "tau_max": state.cfg.tau_max,
        },
        tensors=tensors,
        step=state.opt.step,
        rng_seed=state.streams.seed,
        extras=extras,
    )


def encoder_from_checkpoint(
    ckpt: Checkpoint,
) -> tuple[EncoderParams, EncoderConfig, tuple[float, float] | None]:
    """Rebuild the encoder weights (validated against the stored config)."""
    enc_cfg = EncoderConfig(**ckpt.encoder_cfg)
    expected = _shapes(enc_cfg)
    tensors: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise DataFormatError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != shape:
            raise DataFormatError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, config needs {shape}"
            )
        tensors[name] = Tensor(arr, requires_grad=True)
    stats = None
    if "pixel_mean" in ckpt.extras:
        stats = (float(ckpt.extras["pixel_mean"]), float(ckpt.extras["pixel_std"]))
    return EncoderParams(tensors, enc_cfg), enc_cfg, stats


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    params, enc_cfg, stats = encoder_from_checkpoint(ckpt)
    cfg = TrainConfig(**ckpt.train_cfg)
    if "theta_tau" not in ckpt.tensors:
        raise DataFormatError("checkpoint is missing tensor 'theta_tau'")
    loss_params = LossParams(
        kappa=ckpt.loss_cfg["kappa"],
        theta_tau=Tensor(ckpt.tensors["theta_tau"], requires_grad=True),
        tau_min=ckpt.loss_cfg["tau_min"],
        tau_max=ckpt.loss_cfg["tau_max"],
    )
    opt = OptState(step=ckpt.step)
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = arr.copy()
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = arr.copy()
    return TrainState(
        enc_cfg=enc_cfg, cfg=cfg, params=params, loss_params=loss_params,
        opt=opt, streams=Streams(ckpt.rng_seed), pixel_stats=stats,
    )


# ---------------------------------------------------------------------------
# file-backed entry point


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics_path: Path
    rows: list[TrainLogRow]
    state: TrainState


def pretrain(
    dataset: Sequence[ImageGray],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    out_dir,
    resume=None,
) -> PretrainResult:
    """Train on the dataset, writing a metrics log and checkpoints to out_dir.

    The metrics log has one tab-separated line per optimizer step (step,
    loss, tau, mean_pos_sim, mean_neg_sim, lr).  With ``resume`` pointing at
    a checkpoint the run continues from its step, retracing the trajectory
    of an uninterrupted run; new metrics rows are appended.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty; nothing written")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"

    state = None
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume))
        cfg, enc_cfg = state.cfg, state.enc_cfg

    fresh = not (resume is not None and metrics_path.exists())
    handle = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
    if fresh:
        handle.write(TrainLogRow.HEADER + "\n")

    def on_step(row: TrainLogRow, st: TrainState):
        handle.write(row.formatted() + "\n")
        handle.flush()
        if cfg.checkpoint_every and st.opt.step % cfg.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"ckpt-{st.opt.step:06d}.spcl", state_to_checkpoint(st)
            )

    try:
        state, rows = run_training(dataset, cfg, enc_cfg, state=state, on_step=on_step)
    finally:
        handle.close()
    final_path = out_dir / "ckpt-final.spcl"
    save_checkpoint(final_path, state_to_checkpoint(state))
    return PretrainResult(
        checkpoint_path=final_path, metrics_path=metrics_path, rows=rows, state=state,
    )
