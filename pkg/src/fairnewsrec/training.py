"""Training objective and the alternating discriminator/encoder schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .config import LossWeights, RunConfig, derive_seed
from .data import Corpus, SamplingStats, TrainingInstance, sample_instances
from .optim import AdamState, adam_apply, clip_by_global_norm
from .store import ParameterStore

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
METRICS_HEADER = ("epoch", "L_c", "L_d", "L_a", "L_u", "L_n", "val_auc", "val_rnd10")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss terms


def bias_aware_scores(user_fair: Tensor, user_biased: Tensor | None, news_fair: Tensor, news_biased: Tensor | None) -> Tensor:
    """Click scores ``(u_c + u_p) . (n_c + n_p)``.

    Users are (B, D), candidates (B, K, D); returns (B, K). A ``None`` biased
    part counts as zero.
    """
    u = user_fair if user_biased is None else user_fair + user_biased
    n = news_fair if news_biased is None else news_fair + news_biased
    b, k, d = n.shape
    return (n @ u.reshape(b, d, 1)).reshape(b, k)


def nce_loss(scores: Tensor) -> Tensor:
    """Softmax contrast of column 0 (the click) against the other columns, batch mean."""
    return ad.cross_entropy(scores, np.zeros(scores.shape[0], dtype=np.int64))


def discriminator_loss_from_probs(probs: np.ndarray, labels) -> float:
    """Mean ``-log p[label]`` over rows of a probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(y)), y]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def discriminator_loss(news_fair: Tensor, labels, w: Mapping[str, Tensor]) -> Tensor:
    """Provider cross-entropy for training the discriminator; encoders frozen."""
    return ad.cross_entropy(enc.discriminator_logits(news_fair.detach(), w), labels)


def adversarial_loss(news_fair: Tensor, labels, w: Mapping[str, Tensor]) -> Tensor:
    """Same cross-entropy as :func:`discriminator_loss`, but the discriminator
    is frozen and gradient reaches only the fair news vectors."""
    return ad.cross_entropy(enc.discriminator_logits(news_fair, enc.frozen(w, "disc.")), labels)


def orthogonal_reg(fair: Tensor, biased: Tensor) -> tuple[Tensor, int]:
    """Mean ``|cos(fair_i, biased_i)|`` over rows, and the number of degenerate rows.

    Rows where either vector has norm below 1e-12 contribute nothing and are
    left out of the mean.
    """
    bad = ad.degenerate_mask(fair.data, biased.data)
    n_ok = int((~bad).sum())
    cos = ad.absolute(ad.cosine_similarity(fair, biased))
    if n_ok == 0:
        return cos.sum() * 0.0, int(bad.sum())
    return cos.sum() * (1.0 / n_ok), int(bad.sum())


def total_loss(l_c, l_u, l_n, l_a, w: LossWeights):
    return l_c * w.c + l_u * w.u + l_n * w.n - l_a * w.a


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    news_rows: np.ndarray  # unique corpus rows materialised in the batch
    titles: np.ndarray
    providers: np.ndarray
    labels: np.ndarray  # discriminator classes of news_rows
    history: np.ndarray  # (B, L) codes into news_rows, +1 shifted, 0 = pad
    history_mask: np.ndarray
    candidates: np.ndarray  # (B, 1 + F) codes, positive first


def make_batch(instances: Sequence[TrainingInstance], titles: np.ndarray, providers: np.ndarray,
               labels: np.ndarray, history_len: int) -> Batch:
    rows = sorted({r for inst in instances for r in (*inst.history[-history_len:], *inst.candidates)})
    pos = {r: i for i, r in enumerate(rows)}
    hist, mask = enc.history_matrix([[pos[r] for r in inst.history] for inst in instances], history_len)
    cand = np.array([[pos[r] + 1 for r in inst.candidates] for inst in instances], dtype=np.int64)
    rows = np.array(rows, dtype=np.int64)
    return Batch(rows, titles[rows], providers[rows], labels[rows], hist, mask, cand)


@dataclass
class Forward:
    news_fair: Tensor
    news_biased: Tensor | None
    user_fair: Tensor
    user_biased: Tensor | None
    scores: Tensor
    l_c: Tensor
    l_u: Tensor
    l_n: Tensor
    degenerate: int


def forward(batch: Batch, w: Mapping[str, Tensor], cfg: enc.EncoderConfig, biased_reps: bool = True) -> Forward:
    """Encoders and every loss term except the discriminator ones."""
    c = enc.encode_news_fair(batch.titles, w, cfg)
    u_c = enc.encode_user(enc.lookup_rows(c, batch.history), batch.history_mask, w, cfg, "fair")
    n_c = enc.lookup_rows(c, batch.candidates)
    if biased_reps:
        p = enc.encode_news_biased(batch.providers, w, cfg)
        u_p = enc.encode_user(enc.lookup_rows(p, batch.history), batch.history_mask, w, cfg, "biased")
        n_p = enc.lookup_rows(p, batch.candidates)
        l_u, deg_u = orthogonal_reg(u_c, u_p)
        l_n, deg_n = orthogonal_reg(c, p)
    else:
        p = u_p = n_p = None
        zero = ad.constant(0.0)
        l_u = l_n = zero
        deg_u = deg_n = 0
    scores = bias_aware_scores(u_c, u_p, n_c, n_p)
    return Forward(c, p, u_c, u_p, scores, nce_loss(scores), l_u, l_n, deg_u + deg_n)


# ---------------------------------------------------------------------------
# one alternating step


@dataclass
class StepReport:
    l_c: float
    l_d: float
    l_a: float
    l_u: float
    l_n: float
    total: float
    disc_accuracy: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    degenerate: int = 0


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def _group_norms(grads: Mapping[str, np.ndarray]) -> dict[str, float]:
    sq: dict[str, float] = {}
    for k, g in grads.items():
        sq[_group(k)] = sq.get(_group(k), 0.0) + float((g * g).sum())
    return {k: math.sqrt(v) for k, v in sq.items()}


def _check_finite(**losses: float) -> None:
    for name, v in losses.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss component {name} = {v}; step aborted")


def is_discriminator(name: str) -> bool:
    return name.startswith("disc.")


class Trainer:
    """Owns parameters and both Adam states for one run."""

    def __init__(self, corpus: Corpus, run: RunConfig, params: ParameterStore | None = None):
        self.corpus = corpus
        self.run = run
        self.cfg = run.encoder_config(corpus)
        self.weights = run.weights
        if params is None:
            params = enc.init_params(self.cfg, np.random.default_rng(derive_seed(run.seed, "init")))
            if run.word_vectors:
                enc.load_word_vectors(run.word_vectors, corpus.vocab, params)
        self.params = params
        self.enc_adam = AdamState(lr=run.lr)
        self.disc_adam = AdamState(lr=run.lr)
        self.titles = corpus.title_matrix(run.title_len)
        self.providers = corpus.provider_ids()
        self.labels = corpus.discriminator_labels()

    def batch(self, instances: Sequence[TrainingInstance]) -> Batch:
        return make_batch(instances, self.titles, self.providers, self.labels, self.run.history_len)

    def step(self, batch: Batch) -> StepReport:
        """Phase A: discriminator step(s) on frozen fair vectors. Phase B: one
        encoder step on the combined objective with the discriminator frozen."""
        w = self.params.leaves(lambda k: not is_discriminator(k))
        fw = forward(batch, w, self.cfg, self.run.biased_reps)

        # phase A
        for _ in range(self.run.disc_steps):
            wd = self.params.leaves(is_discriminator)
            logits = enc.discriminator_logits(fw.news_fair.detach(), wd)
            l_d = ad.cross_entropy(logits, batch.labels)
            _check_finite(L_d=l_d.item())
            leaves = {k: t for k, t in wd.items() if t.requires_grad}
            g = ad.backward(l_d, leaves.values())
            grads, _ = clip_by_global_norm({k: g[t] for k, t in leaves.items()}, self.run.clip_norm)
            adam_apply(self.disc_adam, self.params, grads)
        disc_acc = float((logits.data.argmax(-1) == batch.labels).mean())
        disc_norm = _group_norms({k: g[t] for k, t in leaves.items()})

        # phase B
        wd = {k: ad.constant(self.params[k]) for k in self.params if is_discriminator(k)}
        l_a = ad.cross_entropy(enc.discriminator_logits(fw.news_fair, wd), batch.labels)
        total = total_loss(fw.l_c, fw.l_u, fw.l_n, l_a, self.weights)
        _check_finite(L_c=fw.l_c.item(), L_u=fw.l_u.item(), L_n=fw.l_n.item(), L_a=l_a.item())
        trainable = {k: t for k, t in w.items() if t.requires_grad}
        if self.run.biased_reps:
            used = trainable
        else:
            used = {k: t for k, t in trainable.items() if not k.startswith(("prov.", "user_biased."))}
        g = ad.backward(total, used.values())
        raw = {k: g[t] for k, t in used.items()}
        grads, _ = clip_by_global_norm(raw, self.run.clip_norm)
        adam_apply(self.enc_adam, self.params, grads)

        norms = _group_norms(raw)
        norms.update(disc_norm)
        return StepReport(
            l_c=fw.l_c.item(),
            l_d=l_d.item(),
            l_a=l_a.item(),
            l_u=fw.l_u.item(),
            l_n=fw.l_n.item(),
            total=total.item(),
            disc_accuracy=disc_acc,
            grad_norms=norms,
            degenerate=fw.degenerate,
        )


def train_step(trainer: Trainer, instances: Sequence[TrainingInstance]) -> StepReport:
    if not instances:
        raise ValueError("train_step needs a non-empty batch")
    return trainer.step(trainer.batch(instances))


# ---------------------------------------------------------------------------
# full run


@dataclass
class EpochMetrics:
    epoch: int
    l_c: float
    l_d: float
    l_a: float
    l_u: float
    l_n: float
    val_auc: float
    val_rnd10: float

    def row(self) -> list:
        return [self.epoch, *(repr(float(x)) for x in (self.l_c, self.l_d, self.l_a, self.l_u, self.l_n, self.val_auc, self.val_rnd10))]


@dataclass
class TrainResult:
    params: ParameterStore
    epochs: list[EpochMetrics]
    best_epoch: int
    sampling: SamplingStats


def epoch_instances(corpus: Corpus, run: RunConfig, epoch: int, stats: SamplingStats | None = None) -> list[TrainingInstance]:
    inst = list(
        sample_instances(
            corpus, corpus.train, run.n_negatives, derive_seed(run.seed, f"negatives/{epoch}"), run.history_len, stats
        )
    )
    order = np.random.default_rng(derive_seed(run.seed, f"shuffle/{epoch}")).permutation(len(inst))
    return [inst[i] for i in order]


def train_run(corpus: Corpus, run: RunConfig, out_dir=None, validate: bool = True) -> TrainResult:
    """Train for ``run.epochs`` epochs; deterministic given ``run.seed``.

    With ``out_dir`` set, writes ``epoch{k}.ckpt`` per epoch and appends to
    ``metrics.csv``. When validation data exists and ``select_on_valid`` is
    set, the returned parameters are those of the epoch with best
    validation AUC.
    """
    from .evaluation import validation_metrics

    if not corpus.train or not corpus.news:
        raise TrainingError("empty corpus: no training impressions")
    trainer = Trainer(corpus, run)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
    history: list[EpochMetrics] = []
    best = (-math.inf, 0, trainer.params.copy())
    stats = SamplingStats()
    for epoch in range(1, run.epochs + 1):
        inst = epoch_instances(corpus, run, epoch, stats)
        if not inst:
            raise TrainingError("no usable training instances (every impression lacks clicks or non-clicks)")
        reports = []
        for i in range(0, len(inst), run.batch_size):
            reports.append(train_step(trainer, inst[i : i + run.batch_size]))
        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("l_c", "l_d", "l_a", "l_u", "l_n")}
        if validate and corpus.valid:
            auc, rnd = validation_metrics(corpus, trainer.params, trainer.cfg)
        else:
            auc = rnd = float("nan")
        m = EpochMetrics(epoch, val_auc=auc, val_rnd10=rnd, **mean)
        history.append(m)
        log.info("epoch %d: L_c=%.4f L_d=%.4f L_a=%.4f val_auc=%.4f val_rnd10=%.4f",
                 epoch, m.l_c, m.l_d, m.l_a, auc, rnd)
        if out is not None:
            trainer.params.save(out / f"epoch{epoch}.ckpt")
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(m.row())
        score = auc if math.isfinite(auc) else -math.inf
        if not run.select_on_valid or score > best[0] or not math.isfinite(best[0]):
            best = (score, epoch, trainer.params.copy())
    if run.epochs == 0:
        return TrainResult(trainer.params, history, 0, stats)
    return TrainResult(best[2], history, best[1], stats)
