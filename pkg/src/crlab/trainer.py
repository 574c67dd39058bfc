"""SGD with Nesterov momentum, cosine schedule, EMA, and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .data import AugmentParams, Dataset, augment, sample_batch
from .metrics import accuracy, silhouette_or_nan
from .losses import LOSS_MODES, LossBreakdown, LossWeights, make_pseudo_labels, total_loss
from .numerics import ConfigError, NonFiniteError, make_rng, spawn_rng

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step,lr,loss_total,loss_sup,loss_cs,loss_cr,mask_cs,mask_cr,acc_raw,acc_ema,silhouette"
).split(",")


@dataclass
class TrainConfig:
    B: int = 16
    mu: int = 7
    m: int = 2
    delta: float = 0.95
    delta_prime: float = 0.95
    tau: float = 0.01
    lambda_cs: float = 1.0
    lambda_cr: float = 1.0
    lr: float = 0.03
    nesterov: float = 0.9
    weight_decay: float = 5e-4
    ema: float = 0.999
    steps: int = 20000
    eval_interval: int = 500
    seed: int = 0
    pseudo_source: str = "weak"  # weak | clean
    pseudo_from_ema: bool = False
    loss_mode: str = "cs+cr"
    hidden: tuple[int, ...] = (64, 64)
    feat_dim: int = 16
    proj_dim: int = 8
    leaky_slope: float = 0.0
    sigma_weak: float = 0.05
    sigma_strong: float = 0.25
    p_drop: float = 0.1
    gamma: float = 0.2
    silhouette_views: int = 512

    def validate(self) -> "TrainConfig":
        if min(self.B, self.mu, self.m) < 1:
            raise ConfigError("B, mu and m must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        for name in ("lr", "nesterov", "weight_decay", "ema", "lambda_cs", "lambda_cr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("delta", "delta_prime"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.ema >= 1.0:
            raise ConfigError("ema momentum must be < 1")
        if self.pseudo_source not in ("weak", "clean"):
            raise ConfigError("pseudo_source must be weak or clean")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.loss_mode == "cs+ntxent" and self.m != 2:
            raise ConfigError("cs+ntxent requires m = 2")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cs, self.lambda_cr, self.tau, self.loss_mode)

    @property
    def augment(self) -> AugmentParams:
        return AugmentParams(self.sigma_weak, self.sigma_strong, self.p_drop, self.gamma)

    def model_spec(self, input_dim: int, n_classes: int) -> M.ModelSpec:
        return M.ModelSpec(
            input_dim, n_classes, tuple(self.hidden), self.feat_dim, self.proj_dim, leaky_slope=self.leaky_slope
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


# --------------------------------------------------------------------------
# optimizer


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * cos(7 pi s / (16 S))."""
    if total <= 0:
        raise ConfigError("total steps must be >= 1 for the cosine schedule")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr0 * math.cos(7.0 * math.pi * step / (16.0 * total))


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: M.ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})


def decayed(name: str) -> bool:
    # biases are not decayed
    return name.endswith(".w")


def sgd_nesterov_step(
    params: M.ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta: float,
    weight_decay: float = 0.0,
) -> tuple[M.ModelParams, OptimizerState]:
    """g += wd*p;  v' = beta*v + g;  p' = p - lr*(g + beta*v')."""
    M.check_congruent(params.tensors, grads)
    M.check_congruent(params.tensors, state.velocity)
    new_p, new_v = {}, {}
    for k, p in params.tensors.items():
        g = grads[k] + weight_decay * p if (weight_decay and decayed(k)) else grads[k]
        v = beta * state.velocity[k] + g
        new_v[k] = v
        new_p[k] = p - lr * (g + beta * v)
    return M.ModelParams(params.spec, new_p), OptimizerState(new_v, state.step + 1)


# --------------------------------------------------------------------------
# one step


class TrainingDiverged(NonFiniteError):
    def __init__(self, msg, snapshot_path=None):
        super().__init__(msg)
        self.snapshot_path = snapshot_path


def pseudo_label_batch(params, ema, aug_batch, batch, cfg: TrainConfig):
    """Pseudo-labels from an inference forward pass; nothing flows back."""
    src = batch.x_unlabeled if cfg.pseudo_source == "clean" else aug_batch.weak
    net = ema.as_params(params.spec) if (cfg.pseudo_from_ema and ema is not None) else params
    logits = M.forward(net, src, project=False).logits
    return make_pseudo_labels(logits, cfg.delta, cfg.delta_prime)


def compute_step(params, ema, batch, aug_batch, cfg: TrainConfig):
    """Loss breakdown and parameter gradients for one batch, no update."""
    pseudo = pseudo_label_batch(params, ema, aug_batch, batch, cfg)
    x = np.concatenate([batch.x_labeled, aug_batch.strong])
    cache = M.forward(params, x, project=True)
    return total_loss(
        params, cache, len(batch.x_labeled), batch.y_labeled, pseudo, aug_batch.source, cfg.weights
    )


def train_step(params, state, ema, batch, aug_batch, cfg: TrainConfig, snapshot_dir=None):
    """One optimizer step. Returns (params, state, ema, breakdown, lr)."""
    lr = cosine_lr(state.step, max(cfg.steps, 1), cfg.lr) if state.step <= cfg.steps else 0.0
    bd, grads = compute_step(params, ema, batch, aug_batch, cfg)
    if not (np.isfinite(bd.total) and all(np.all(np.isfinite(g)) for g in grads.values())):
        path = None
        if snapshot_dir is not None:
            path = Path(snapshot_dir) / f"diverged_step{state.step}.json"
            M.save_checkpoint(path, params.tensors, params.spec)
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {bd}", path)
    params, state = sgd_nesterov_step(params, grads, state, lr, cfg.nesterov, cfg.weight_decay)
    ema = M.ema_update(ema, params)
    return params, state, ema, bd, lr


# --------------------------------------------------------------------------
# full run


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss_total: float
    loss_sup: float
    loss_cs: float
    loss_cr: float
    mask_cs: float
    mask_cr: float
    acc_raw: float
    acc_ema: float
    silhouette: float

    def csv_fields(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class RunResult:
    config: TrainConfig
    rows: list[MetricsRow]
    params: M.ModelParams
    ema: M.EmaShadow
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def _mean_breakdown(bds: list[LossBreakdown]) -> LossBreakdown:
    n = len(bds)
    return LossBreakdown(*(sum(getattr(b, f.name) for b in bds) / n for f in fields(LossBreakdown)))


class Probe:
    """Fixed evaluation views drawn once per run from a dedicated stream so
    that arms sharing a seed are measured on identical inputs."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        rng = spawn_rng(cfg.seed, 7)
        n_src = max(1, min(len(dataset.unlabeled), cfg.silhouette_views // cfg.m))
        idx = rng.choice(len(dataset.unlabeled), size=n_src, replace=False)
        x = dataset.unlabeled.x[idx]
        self.weak = augment(x, "weak", rng, cfg.augment)
        self.clean = x
        self.strong = augment(np.tile(x, (cfg.m, 1)), "strong", rng, cfg.augment)
        self.source = np.tile(np.arange(n_src), cfg.m)
        self.batch_rng_seed = int(rng.integers(2**63))


def evaluate(params, ema, dataset: Dataset, probe: Probe, cfg: TrainConfig):
    """(acc_raw, acc_ema, silhouette) on the test split and the probe views."""
    ema_params = ema.as_params(params.spec)
    y = dataset.test._labels
    acc_raw = accuracy(M.forward(params, dataset.test.x, project=False).logits, y)
    acc_ema = accuracy(M.forward(ema_params, dataset.test.x, project=False).logits, y)
    src = probe.clean if cfg.pseudo_source == "clean" else probe.weak
    q_hat = np.argmax(M.forward(ema_params, src, project=False).logits, axis=1)
    feats = M.forward(ema_params, probe.strong, project=False).h
    sil = silhouette_or_nan(feats, q_hat[probe.source])
    return acc_raw, acc_ema, sil


def run(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    unlabeled=None,
) -> RunResult:
    """Train for ``cfg.steps`` steps, logging a metrics row at step 0, every
    ``eval_interval`` steps, and at the final step.

    ``unlabeled`` overrides the dataset's unlabeled pool (open-set runs).
    Loss columns of a row average the training steps since the previous row;
    the step-0 row evaluates one probe batch without updating.
    """
    cfg.validate()
    t0 = time.perf_counter()
    pool = dataset.unlabeled if unlabeled is None else unlabeled
    k = dataset.spec.n_classes
    d = dataset.labeled.x.shape[1]
    spec = cfg.model_spec(d, k)
    params = M.init_params(spec, spawn_rng(cfg.seed, 3))
    ema = M.make_ema(params, cfg.ema)
    state = OptimizerState.zeros_like(params)
    rng = make_rng(cfg.seed)
    probe = Probe(dataset, cfg)
    snap = Path(out_dir) if out_dir is not None else None
    rows: list[MetricsRow] = []

    def emit(step, bd):
        acc_raw, acc_ema, sil = evaluate(params, ema, dataset, probe, cfg)
        lr = cosine_lr(step, max(cfg.steps, 1), cfg.lr)
        rows.append(
            MetricsRow(step, lr, bd.total, bd.loss_sup, bd.loss_cs, bd.loss_cr, bd.mask_cs, bd.mask_cr, acc_raw, acc_ema, sil)
        )

    probe_rng = make_rng(probe.batch_rng_seed)
    b0, a0 = sample_batch(dataset.labeled, pool, cfg.B, cfg.mu, cfg.m, probe_rng, cfg.augment)
    emit(0, compute_step(params, ema, b0, a0, cfg)[0])
    pending: list[LossBreakdown] = []
    for s in range(1, cfg.steps + 1):
        batch, aug = sample_batch(dataset.labeled, pool, cfg.B, cfg.mu, cfg.m, rng, cfg.augment)
        params, state, ema, bd, _ = train_step(params, state, ema, batch, aug, cfg, snap)
        pending.append(bd)
        if s % cfg.eval_interval == 0 or s == cfg.steps:
            emit(s, _mean_breakdown(pending))
            pending = []
    result = RunResult(cfg, rows, params, ema, time.perf_counter() - t0)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: RunResult, out_dir: str | Path, prefix: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}metrics.csv", out / f"{prefix}summary.json", out / f"{prefix}model_raw.json", out / f"{prefix}model_ema.json"]
    paths[0].write_text(metrics_csv(result.rows))
    summary = {
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "final": asdict(result.final),
        "wall_clock_seconds": result.wall_clock,
    }
    paths[1].write_text(json.dumps(summary, indent=2, sort_keys=True))
    M.save_checkpoint(paths[2], result.params.tensors, result.params.spec)
    M.save_checkpoint(paths[3], result.ema.tensors, result.params.spec)
    return paths
