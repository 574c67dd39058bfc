"""Multi-arm, multi-seed experiments built on :func:`crlab.trainer.run`.

Every arm is a (config overrides, OOD count) pair run on each seed. Arms are
independent, so they may run in worker processes; results are reassembled in
a fixed order so the report does not depend on scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetSpec, OodSpec, generate_dataset, inject_ood
from .losses import LOSS_MODES
from .numerics import ConfigError
from .trainer import MetricsRow, TrainConfig, metrics_csv, run

SWEEP_AXES = {
    "lambda_cr": float,
    "lambda_cs": float,
    "mu": int,
    "delta": float,
    "delta_prime": float,
    "m": int,
    "loss_mode": str,
}


@dataclass(frozen=True)
class Arm:
    name: str
    overrides: tuple[tuple[str, object], ...] = ()
    ood_count: int = 0
    ood_preset: str = "far"

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return replace(base, seed=seed, **dict(self.overrides)).validate()

    def describe(self) -> dict:
        d = dict(self.overrides)
        return {"name": self.name, "loss_mode": d.get("loss_mode"), "ood_count": self.ood_count,
                "ood_preset": self.ood_preset, "overrides": d}


def _run_one(job):
    arm, base, data_spec, seed = job
    cfg = arm.config(base, seed)
    spec = replace(data_spec, seed=seed)
    ds = generate_dataset(spec)
    pool = None
    if arm.ood_count:
        pool = inject_ood(ds.unlabeled, OodSpec(arm.ood_count, arm.ood_preset, seed=seed), spec)
    return run(cfg, ds, unlabeled=pool).rows


def run_arms(arms, base: TrainConfig, data_spec: DatasetSpec, seeds, jobs: int = 1):
    """Train every arm on every seed. Returns ``{(arm name, seed): rows}``.

    The dataset seed follows the run seed, so arms sharing a seed see the
    same data and the same probe views.
    """
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ConfigError(f"arm names must be unique: {names}")
    work = [(a, base, data_spec, s) for s in seeds for a in arms]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_run_one, work))
    else:
        rows = [_run_one(w) for w in work]
    return {(w[0].name, w[3]): r for w, r in zip(work, rows)}


def _steps(rows: list[MetricsRow]) -> list[int]:
    return [r.step for r in rows]


@dataclass
class ExperimentReport:
    kind: str
    arms: list[Arm]
    seeds: list[int]
    results: dict  # (arm name, seed) -> list[MetricsRow]
    summary: dict = field(default_factory=dict)
    base_config: dict = field(default_factory=dict)
    data_spec: dict = field(default_factory=dict)

    def rows(self, arm: str, seed: int) -> list[MetricsRow]:
        return self.results[(arm, seed)]

    def column(self, arm: str, seed: int, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows(arm, seed)])

    def final(self, arm: str, seed: int, name: str = "acc_ema") -> float:
        return float(getattr(self.rows(arm, seed)[-1], name))

    def checkpoints(self) -> list[int]:
        steps = {tuple(_steps(r)) for r in self.results.values()}
        if len(steps) != 1:
            raise ConfigError("arms were logged at different checkpoints")
        return list(steps.pop())

    def aggregate(self, name: str = "acc_ema") -> dict:
        """Mean and std across seeds of one metric, per arm and checkpoint."""
        steps = self.checkpoints()
        out = {}
        for arm in self.arms:
            m = np.array([self.column(arm.name, s, name) for s in self.seeds])
            out[arm.name] = {
                "step": steps,
                "mean": np.nanmean(m, axis=0).tolist(),
                "std": np.nanstd(m, axis=0).tolist(),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seeds": self.seeds,
            "arms": [a.describe() for a in self.arms],
            "base_config": self.base_config,
            "data_spec": self.data_spec,
            "summary": self.summary,
            "aggregate": {k: self.aggregate(k) for k in ("acc_ema", "acc_raw", "silhouette")},
            "final": {a.name: {str(s): asdict(self.rows(a.name, s)[-1]) for s in self.seeds} for a in self.arms},
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        """``report.json`` plus one metrics CSV per arm and seed."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for (arm, seed), rows in sorted(self.results.items()):
            p = out / f"{arm}.seed{seed}.csv"
            p.write_text(metrics_csv(rows))
            paths.append(p)
        report = out / "report.json"
        report.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=True))
        return [report, *paths]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def _report(kind, arms, seeds, results, base, data_spec, summary):
    spec = asdict(data_spec)
    if spec.get("centers") is not None:
        spec["centers"] = np.asarray(spec["centers"]).tolist()
    return ExperimentReport(kind, list(arms), list(seeds), results, summary, base.to_dict(), spec)


# --------------------------------------------------------------------------
# efficiency


def crossover_step(acc: np.ndarray, steps, target: float):
    """First logged step at which ``acc`` reaches ``target``, else None."""
    hit = np.flatnonzero(np.asarray(acc) >= target)
    return int(steps[hit[0]]) if len(hit) else None


def silhouette_dominates(sil_a, sil_b, steps, total: int, after: float = 0.1) -> bool:
    """sil_a >= sil_b at every checkpoint strictly after ``after * total``.

    A NaN on either side counts as a failure at that checkpoint.
    """
    ok = True
    for a, b, s in zip(sil_a, sil_b, steps):
        if s > after * total:
            ok &= bool(np.isfinite(a) and np.isfinite(b) and a >= b)
    return ok


def efficiency_summary(report: ExperimentReport, base_arm="cs-only", test_arm="cs+cr") -> dict:
    steps = report.checkpoints()
    total = steps[-1]
    per_seed = {}
    for s in report.seeds:
        target = report.final(base_arm, s)
        cross = crossover_step(report.column(test_arm, s, "acc_ema"), steps, target)
        per_seed[s] = {
            "target_acc": target,
            "final_acc": report.final(test_arm, s),
            "crossover_step": cross,
            "crossover_fraction": None if cross is None or total == 0 else cross / total,
            "silhouette_dominates": silhouette_dominates(
                report.column(test_arm, s, "silhouette"), report.column(base_arm, s, "silhouette"), steps, total
            ),
        }
    frac_ok = sum(1 for v in per_seed.values() if v["crossover_fraction"] is not None and v["crossover_fraction"] <= 0.5)
    sil_ok = sum(1 for v in per_seed.values() if v["silhouette_dominates"])
    return {"per_seed": per_seed, "seeds_crossover_le_half": frac_ok, "seeds_silhouette_dominates": sil_ok}


def run_efficiency_experiment(
    base: TrainConfig,
    data_spec: DatasetSpec,
    seeds,
    jobs: int = 1,
    modes=("cs-only", "cs+cr"),
) -> ExperimentReport:
    arms = [Arm(m, (("loss_mode", m),)) for m in modes]
    results = run_arms(arms, base, data_spec, seeds, jobs)
    rep = _report("efficiency", arms, seeds, results, base, data_spec, {})
    if len(modes) == 2:
        rep.summary = efficiency_summary(rep, modes[0], modes[1])
    return rep


# --------------------------------------------------------------------------
# open-set


def run_openset_experiment(
    base: TrainConfig,
    data_spec: DatasetSpec,
    counts,
    seeds,
    preset: str = "far",
    jobs: int = 1,
    modes=("cs-only", "cs+cr"),
) -> ExperimentReport:
    counts = [int(c) for c in counts]
    if not counts or counts[0] != 0 or counts != sorted(counts):
        raise ConfigError(f"OOD counts must ascend from 0, got {counts}")
    arms = [Arm(f"{m}@ood{c}", (("loss_mode", m),), c, preset) for m in modes for c in counts]
    results = run_arms(arms, base, data_spec, seeds, jobs)
    rep = _report("openset", arms, seeds, results, base, data_spec, {})
    per_seed = {}
    for s in seeds:
        curves = {m: [rep.final(f"{m}@ood{c}", s) for c in counts] for m in modes}
        per_seed[s] = {
            "curves": curves,
            "degradation": {m: curves[m][-1] - curves[m][0] for m in modes},
        }
    rep.summary = {"counts": counts, "preset": preset, "per_seed": per_seed}
    if set(modes) == {"cs-only", "cs+cr"}:
        rep.summary["seeds_cr_degrades_less"] = sum(
            1 for v in per_seed.values() if v["degradation"]["cs+cr"] >= v["degradation"]["cs-only"]
        )
    return rep


# --------------------------------------------------------------------------
# ablation


def parse_axis_values(axis: str, values) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    cast = SWEEP_AXES[axis]
    out = [cast(v) for v in values]
    if not out:
        raise ConfigError("a sweep needs at least one value")
    if axis == "loss_mode" and any(v not in LOSS_MODES for v in out):
        raise ConfigError(f"loss modes must be among {LOSS_MODES}")
    return out


def run_ablation_sweep(
    base: TrainConfig,
    data_spec: DatasetSpec,
    axis: str,
    values,
    seeds,
    jobs: int = 1,
    reference_modes=("cs+ntxent", "cr-only"),
) -> ExperimentReport:
    """One arm per value of ``axis``; the reference loss modes are added as
    extra arms at the base configuration and reported in their own table."""
    values = parse_axis_values(axis, values)
    arms = [Arm(f"{axis}={v}", ((axis, v),)) for v in values]
    refs = [m for m in reference_modes if not (axis == "loss_mode" and m in values)]
    arms += [Arm(f"reference-{m}", (("loss_mode", m),)) for m in refs]
    results = run_arms(arms, base, data_spec, seeds, jobs)
    rep = _report("ablation", arms, seeds, results, base, data_spec, {})

    def row(arm):
        return {
            "final_acc": {s: rep.final(arm.name, s) for s in seeds},
            "mask_cs": {s: rep.column(arm.name, s, "mask_cs").tolist() for s in seeds},
            "mask_cr": {s: rep.column(arm.name, s, "mask_cr").tolist() for s in seeds},
        }

    rep.summary = {
        "axis": axis,
        "table": [{"value": v, **row(a)} for v, a in zip(values, arms)],
        "reference": [{"loss_mode": m, **row(a)} for m, a in zip(refs, arms[len(values):])],
    }
    return rep
