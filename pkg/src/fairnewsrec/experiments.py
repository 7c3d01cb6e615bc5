"""Paired training runs behind the ablation and lambda sweep commands."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .config import RunConfig, derive_seed
from .data import Corpus
from .evaluation import FairnessReport, evaluate
from .training import TrainResult, train_run

ABLATIONS = ("full", "no-biased", "no-adv", "no-orth")
SWEEP_VALUES = (0.0, 0.001, 0.004, 0.016, 0.064)
HEADLINE = (0.5, 10)  # r, K of the headline fairness cell


def baseline_config(run: RunConfig) -> RunConfig:
    """The fairness-unaware reference: no auxiliary losses, biased vectors zeroed."""
    return run.with_(lambda_a=0.0, lambda_u=0.0, lambda_n=0.0, biased_reps=False)


def ablation_configs(run: RunConfig) -> dict[str, RunConfig]:
    return {
        "full": run,
        "no-biased": run.with_(biased_reps=False),
        "no-adv": run.with_(lambda_a=0.0),
        "no-orth": run.with_(lambda_u=0.0, lambda_n=0.0),
    }


def sweep_configs(run: RunConfig, values=SWEEP_VALUES) -> dict[float, RunConfig]:
    return {float(v): run.with_(lambda_a=float(v)) for v in values}


@dataclass
class RunOutcome:
    run: RunConfig
    train: TrainResult
    report: FairnessReport

    @property
    def rnd10(self) -> float:
        return self.report.rnd(*HEADLINE)

    @property
    def er10(self) -> float:
        return self.report.er(*HEADLINE)

    @property
    def auc(self) -> float:
        return self.report.auc


def run_and_evaluate(corpus: Corpus, run: RunConfig, out_dir=None, probe: bool = True) -> RunOutcome:
    res = train_run(corpus, run, out_dir)
    probe_seed = derive_seed(run.seed, "probe") if probe else None
    rep = evaluate(corpus, res.params, run.encoder_config(corpus), probe_seed=probe_seed,
                   metadata={"seed": str(run.seed), "best_epoch": str(res.best_epoch)})
    return RunOutcome(run, res, rep)


def _table(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def ablation_table(outcomes: dict[str, RunOutcome]) -> str:
    """One row per variant with fairness deltas against the full model."""
    full = outcomes["full"]
    rows = []
    for name in ABLATIONS:
        o = outcomes[name]
        rows.append([name, repr(o.auc), repr(o.rnd10), repr(o.er10), repr(o.rnd10 - full.rnd10),
                     repr(o.er10 - full.er10), repr(o.report.probe_accuracy)])
    return _table(["variant", "AUC", "rND@10", "ER@10", "delta_rND@10", "delta_ER@10", "probe_accuracy"], rows)


def sweep_table(outcomes: dict[float, RunOutcome]) -> str:
    rows = [[repr(v), repr(o.auc), repr(o.rnd10), repr(o.er10), repr(o.report.probe_accuracy)]
            for v, o in sorted(outcomes.items())]
    return _table(["lambda_a", "AUC", "rND@10", "ER@10", "probe_accuracy"], rows)
