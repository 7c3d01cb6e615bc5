"""Command-line entry point: simulate, train, eval, ablate, sweep-lambda, report.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import experiments as ex
from .config import RunConfig, derive_seed, desk_config, load_simulator_config, load_yaml
from .data import ConfigError, DataFormatError, SimulatorConfig, load_corpus, simulate_corpus, write_simulation
from .encoders import BACKBONES
from .evaluation import MetricError, evaluate
from .store import CheckpointError, ParameterStore
from .training import TrainingError, train_run

log = logging.getLogger("fairnewsrec")

OUT_ENV = "FAIRREC_OUT"
MANIFEST = "manifest.json"
RUN_CONFIG_FILE = "config.yaml"
MODEL_FILE = "model.ckpt"


class UsageError(Exception):
    """Bad flags, paths or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# manifest


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hash(paths: list[Path]) -> str:
    """Tree-style hash over the blob hashes of ``paths`` (directories expanded)."""
    files: list[tuple[str, Path]] = []
    for p in paths:
        if p.is_dir():
            files += [(f"{p.name}/{f.relative_to(p).as_posix()}", f) for f in sorted(p.rglob("*")) if f.is_file()
                      and f.name != MANIFEST]
        else:
            files.append((p.name, p))
    lines = "".join(f"{git_blob_hash(f.read_bytes())} {name}\n" for name, f in sorted(files))
    return hashlib.sha1(lines.encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Output:
    """An output directory that refuses to clobber earlier results without ``force``."""

    def __init__(self, root: Path, force: bool):
        self.root = root
        self.files: list[Path] = []
        if root.exists() and any(root.iterdir()):
            if not force:
                raise UsageError(f"output directory {root} is not empty; pass --force to overwrite")
            self._remove_previous()
        self.started = _now()

    def _remove_previous(self) -> None:
        old = self.root / MANIFEST
        if not old.is_file():
            return
        try:
            listed = json.loads(old.read_text())["outputs"]
        except (ValueError, KeyError):
            return
        for rel in listed:
            f = self.root / rel
            if f.is_file():
                f.unlink()

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text, encoding="utf-8", newline="\n")
        self.add(p)
        return p

    def add(self, p: Path) -> None:
        if p not in self.files:
            self.files.append(p)

    def finish(self, command: str, config_path, seed, inputs: list[Path], extra: dict | None = None) -> Path:
        manifest = {
            "command": command,
            "config_path": str(config_path) if config_path else None,
            "seed": seed,
            "input_hash": input_hash(inputs),
            "output_dir": str(self.root),
            "outputs": sorted(f.relative_to(self.root).as_posix() for f in self.files),
            "output_sha256": {f.relative_to(self.root).as_posix(): hashlib.sha256(f.read_bytes()).hexdigest()
                              for f in sorted(self.files)},
            "started": self.started,
            "finished": _now(),
        }
        manifest.update(extra or {})
        p = self.root / MANIFEST
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


# ---------------------------------------------------------------------------
# argument handling


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if not root:
        raise UsageError(f"--out not given and {OUT_ENV} is not set")
    return Path(root) / command


def _data_dir(args) -> Path:
    if not args.data:
        raise UsageError("--data is required")
    d = Path(args.data)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    return d


FLAG_KEYS = {"lambda_a": "lambda_a", "lambda_c": "lambda_c", "lambda_u": "lambda_u", "lambda_n": "lambda_n",
             "epochs": "epochs", "backbone": "backbone", "seed": "seed"}


def run_config(args, base: dict | None = None) -> RunConfig:
    """Desk preset, then the config file, then explicit flags."""
    data = dict(base or {})
    if args.config:
        data.update(load_yaml(args.config))
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return desk_config(**data)


def _load(data_dir: Path):
    try:
        return load_corpus(data_dir)
    except FileNotFoundError as e:
        raise UsageError(f"missing input file: {e.filename}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_simulator_config(args.config) if args.config else SimulatorConfig()
    if args.seed is not None:
        cfg = SimulatorConfig(**{**asdict(cfg), "seed": args.seed})
    cfg.validate()
    out = Output(_out_dir(args, "simulate"), args.force)
    sim = simulate_corpus(cfg)
    for p in write_simulation(sim, out.root):
        out.add(p)
    out.write("simulator.yaml", yaml.safe_dump(_plain(asdict(cfg)), sort_keys=True))
    out.finish("simulate", args.config, cfg.seed, [Path(args.config)] if args.config else [])
    log.info("wrote %d users, %d news to %s", cfg.n_users, cfg.n_news, out.root)
    return 0


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _inputs(args, data_dir: Path) -> list[Path]:
    return [data_dir] + ([Path(args.config)] if args.config else [])


def cmd_train(args) -> int:
    data_dir = _data_dir(args)
    run = run_config(args)
    out = Output(_out_dir(args, "train"), args.force)
    corpus = _load(data_dir)
    res = train_run(corpus, run, out.root)
    for k in range(1, run.epochs + 1):
        out.add(out.root / f"epoch{k}.ckpt")
    out.add(out.root / "metrics.csv")
    res.params.save(out.path(MODEL_FILE))
    out.add(out.root / MODEL_FILE)
    out.write(RUN_CONFIG_FILE, yaml.safe_dump(run.to_dict(), sort_keys=True))
    out.finish("train", args.config, run.seed, _inputs(args, data_dir),
               {"best_epoch": res.best_epoch, "skipped_impressions": res.sampling.skipped_impressions})
    return 0


def cmd_eval(args) -> int:
    data_dir = _data_dir(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.config is None and (ckpt.parent / RUN_CONFIG_FILE).is_file():
        args.config = str(ckpt.parent / RUN_CONFIG_FILE)
    run = run_config(args)
    out = Output(_out_dir(args, "eval"), args.force)
    corpus = _load(data_dir)
    params = ParameterStore.load(ckpt)
    rep = evaluate(corpus, params, run.encoder_config(corpus), split=args.split,
                   probe_seed=derive_seed(run.seed, "probe"), metadata={"checkpoint": ckpt.name, "split": args.split})
    out.write("report.csv", rep.to_csv())
    out.write("report_long.csv", rep.to_long_csv())
    out.write("report.txt", rep.to_table())
    out.finish("eval", args.config, run.seed, _inputs(args, data_dir) + [ckpt])
    sys.stdout.write(rep.to_table())
    return 0


def cmd_ablate(args) -> int:
    data_dir = _data_dir(args)
    run = run_config(args)
    out = Output(_out_dir(args, "ablate"), args.force)
    corpus = _load(data_dir)
    configs = ex.ablation_configs(run)
    outcomes = {}
    for name, cfg in configs.items():
        log.info("ablation variant %s", name)
        outcomes[name] = ex.run_and_evaluate(corpus, cfg)
        out.write(f"{name}/report.csv", outcomes[name].report.to_csv())
    table = ex.ablation_table(outcomes)
    out.write("ablation.csv", table)
    out.finish("ablate", args.config, run.seed, _inputs(args, data_dir),
               {"variants": {n: c.to_dict() for n, c in configs.items()}})
    sys.stdout.write(table)
    return 0


def _lambda_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise UsageError("--values needs at least one non-negative number")
    return vals


def cmd_sweep(args) -> int:
    data_dir = _data_dir(args)
    run = run_config(args)
    values = _lambda_values(args.values)
    out = Output(_out_dir(args, "sweep-lambda"), args.force)
    corpus = _load(data_dir)
    configs = ex.sweep_configs(run, values)
    outcomes = {}
    for v, cfg in configs.items():
        log.info("lambda_a = %g", v)
        outcomes[v] = ex.run_and_evaluate(corpus, cfg)
    table = ex.sweep_table(outcomes)
    out.write("sweep.csv", table)
    out.finish("sweep-lambda", args.config, run.seed, _inputs(args, data_dir), {"values": values})
    sys.stdout.write(table)
    return 0


def cmd_report(args) -> int:
    root = Path(args.path)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    found = False
    for name in ("report.txt", "ablation.csv", "sweep.csv"):
        p = root / name
        if p.is_file():
            found = True
            sys.stdout.write(f"== {name}\n")
            text = p.read_text()
            sys.stdout.write(text if name.endswith(".txt") else _align(text))
    if not found:
        raise UsageError(f"no report.txt, ablation.csv or sweep.csv in {root}")
    return 0


def _align(csv_text: str) -> str:
    rows = [line.split(",") for line in csv_text.strip().splitlines()]
    rows = [[_short(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in rows)


def _short(cell: str) -> str:
    try:
        return f"{float(cell):.4f}"
    except ValueError:
        return cell


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairnewsrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, training=True):
        if data:
            p.add_argument("--data", help="corpus directory in MIND format")
        p.add_argument("--config", help="YAML config; keys mirror the flags")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if training:
            for w in "acun":
                p.add_argument(f"--lambda-{w}", dest=f"lambda_{w}", type=float, help=f"loss weight lambda_{w}")
            p.add_argument("--epochs", type=int)
            p.add_argument("--backbone", choices=BACKBONES)

    p = sub.add_parser("simulate", help="write a synthetic biased-click corpus")
    common(p, data=False, training=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fairness and accuracy report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model against its three ablations")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="adversarial weight trade-off table")
    common(p)
    p.add_argument("--values", default=",".join(str(v) for v in ex.SWEEP_VALUES),
                   help="comma-separated lambda_a values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the tables stored in an output directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, MetricError, DataFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
