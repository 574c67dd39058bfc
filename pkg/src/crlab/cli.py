"""``crlab`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import experiments as X
from .config import ParsedConfig, known_keys, parse_config
from .data import export_csv, generate_dataset
from .numerics import ConfigError
from .trainer import run, write_run

MANIFEST = "manifest.json"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    outputs: list[str] = field(default_factory=list)
    started: float = 0.0
    finished: float | None = None

    @property
    def complete(self) -> bool:
        return self.finished is not None

    def write(self, out: Path) -> None:
        doc = {
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "data_spec": self.config.get("data"),
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }
        (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def read(cls, out: Path) -> "RunManifest":
        doc = json.loads((out / MANIFEST).read_text())
        return cls(doc["command"], doc["config_hash"], doc["config"], doc["outputs"], doc["started"], doc["finished"])


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        # one line, no usage dump
        self.exit(EXIT_USAGE, f"crlab: error: {message}\n")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crlab", description="Semi-supervised training with contrastive regularization on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_out=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=needs_out, help="output directory (every written file goes here)")
        p.add_argument("--resume", action="store_true", help="skip work if a complete manifest for the same config exists")
        p.add_argument("--jobs", type=int, default=1, help="parallel experiment arms")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in sorted(known_keys()):
            p.add_argument(_flag(key), dest=f"opt_{key}", metavar="V", help=argparse.SUPPRESS)

    common(sub.add_parser("run", help="single training run"))
    common(sub.add_parser("efficiency", help="cs-only vs cs+cr over seeds"))
    common(sub.add_parser("openset", help="accuracy under OOD injection"))
    common(sub.add_parser("ablate", help="sweep one hyperparameter"))
    common(sub.add_parser("export-data", help="write the synthetic dataset as CSV"))
    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="optional directory for a JSON result")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k.strip() not in known_keys():
            raise ConfigError(f"unknown config key {k.strip()!r}")
        out[k.strip()] = v
    for key in known_keys():
        v = getattr(args, f"opt_{key}", None)
        if v is not None:
            out[key] = v
    return out


def _ood_counts(cfg: ParsedConfig) -> list[int]:
    return [int(round(r * cfg.data.n_unlabeled)) for r in cfg.experiment["ood_ratios"]]


def _execute(command: str, cfg: ParsedConfig, out: Path, jobs: int) -> list[Path]:
    seeds = cfg.seeds()
    if command == "run":
        return _run_single(cfg, out)
    if command == "efficiency":
        rep = X.run_efficiency_experiment(cfg.train, cfg.data, seeds, jobs)
    elif command == "openset":
        rep = X.run_openset_experiment(cfg.train, cfg.data, _ood_counts(cfg), seeds, cfg.experiment["ood_preset"], jobs)
    elif command == "ablate":
        axis = cfg.require("axis")
        rep = X.run_ablation_sweep(cfg.train, cfg.data, axis, cfg.require("values"), seeds, jobs)
    elif command == "export-data":
        ds = generate_dataset(cfg.data)
        path = out / "data.csv"
        export_csv(ds, path)
        return [path]
    else:  # pragma: no cover - argparse restricts the choices
        raise CliError(f"unknown command {command}")
    print(json.dumps(X._jsonable(rep.summary), sort_keys=True))
    return rep.write(out)


def _run_single(cfg: ParsedConfig, out: Path) -> list[Path]:
    res = run(cfg.train, generate_dataset(cfg.data))
    paths = write_run(res, out)
    f = res.final
    print(f"step={f.step} acc_raw={f.acc_raw:.4f} acc_ema={f.acc_ema:.4f} silhouette={f.silhouette:.4f}")
    return paths


def _gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.instances, args.seed)
    for r in results:
        print(r.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = [{"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _managed(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    out = Path(args.out)
    digest = cfg.content_hash(args.command)
    if (out / MANIFEST).exists():
        old = RunManifest.read(out)
        if not args.resume:
            raise CliError(f"{out} already holds a run; pass --resume or choose another --out")
        if old.config_hash != digest:
            raise CliError(f"{out} holds a run with a different configuration (hash {old.config_hash[:12]})")
        if old.complete and all((out / p).exists() for p in old.outputs):
            print(f"up to date: {out}")
            return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, digest, cfg.snapshot(), started=time.time())
    manifest.write(out)
    paths = _execute(args.command, cfg, out, max(1, args.jobs))
    manifest.outputs = sorted(str(p.relative_to(out)) for p in paths)
    manifest.finished = time.time()
    manifest.write(out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        if args.command == "gradcheck":
            return _gradcheck(args)
        return _managed(args)
    except (ConfigError, CliError) as exc:
        print(f"crlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # one-line cause instead of a traceback
        print(f"crlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
