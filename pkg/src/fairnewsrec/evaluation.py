"""Fair inference, accuracy metrics and provider-group exposure metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .data import Corpus, Impression
from .optim import AdamState, adam_apply
from .store import ParameterStore

RATIOS = (0.1, 0.3, 0.5)
CUTOFFS = (10, 30, 50)
RND_STRIDE = 10
UNBOUNDED = math.inf

CONVENTIONS = (
    "rND normaliser Z = larger inner sum of the two extremal rankings "
    "(all protected first / all protected last)",
    "ER@K = ratio of per-user means (mean protected rate / mean unprotected rate)",
)


class MetricError(ValueError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# ---------------------------------------------------------------------------
# inference


def _params_view(params: ParameterStore) -> dict[str, ad.Tensor]:
    return params.leaves(lambda k: False)


def encode_news(corpus: Corpus, params: ParameterStore, cfg: enc.EncoderConfig, biased: bool = False,
                chunk: int = 512) -> np.ndarray:
    """Fair (or biased) vectors of every corpus article, (N, D)."""
    w = _params_view(params)
    out = []
    with ad.no_grad():
        if biased:
            return enc.encode_news_biased(corpus.provider_ids(), w, cfg).data
        titles = corpus.title_matrix(cfg.title_len)
        for i in range(0, len(titles), chunk):
            out.append(enc.encode_news_fair(titles[i : i + chunk], w, cfg).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.rep_dim))


def encode_users(histories: Sequence[Sequence[int]], news_vecs: np.ndarray, params: ParameterStore,
                 cfg: enc.EncoderConfig, which: str = "fair", chunk: int = 256) -> np.ndarray:
    """User vectors from histories given as corpus news rows, (U, D)."""
    w = _params_view(params)
    table = ad.constant(news_vecs)
    out = []
    with ad.no_grad():
        for i in range(0, len(histories), chunk):
            codes, mask = enc.history_matrix(histories[i : i + chunk], cfg.history_len)
            h = enc.lookup_rows(table, codes)
            out.append(enc.encode_user(h, mask, w, cfg, which).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.rep_dim))


def score_fair(user_vecs: np.ndarray, news_vecs: np.ndarray) -> np.ndarray:
    """Unbiased click probabilities ``sigmoid(u_c . n_c)``, (U, N)."""
    return sigmoid(np.asarray(user_vecs) @ np.asarray(news_vecs).T)


@dataclass
class RankedList:
    user_id: str
    news_ids: list[str]
    scores: np.ndarray


def id_order(news_ids: Sequence[str]) -> np.ndarray:
    """Position of each ID in ascending ID order (tie-break key)."""
    order = sorted(range(len(news_ids)), key=lambda i: news_ids[i])
    key = np.empty(len(news_ids), dtype=np.int64)
    key[order] = np.arange(len(news_ids))
    return key


def rank_rows(scores: np.ndarray, tiebreak: np.ndarray) -> np.ndarray:
    """Row-wise ranking by descending score, ties by ascending ``tiebreak``."""
    scores = np.atleast_2d(scores)
    out = np.empty(scores.shape, dtype=np.int64)
    for u in range(scores.shape[0]):
        out[u] = np.lexsort((tiebreak, -scores[u]))
    return out


def rank_all(user_id: str, user_vec: np.ndarray, news_vecs: np.ndarray, news_ids: Sequence[str]) -> RankedList:
    s = score_fair(user_vec[None, :], news_vecs)[0]
    order = rank_rows(s, id_order(news_ids))[0]
    return RankedList(user_id, [news_ids[i] for i in order], s[order])


def latest_histories(corpus: Corpus, impressions: Iterable[Impression]) -> tuple[list[str], list[list[int]]]:
    """One history per user (their last impression in the split), users sorted by ID."""
    last: dict[str, Impression] = {}
    for imp in impressions:
        last[imp.user_id] = imp
    users = sorted(last)
    idx = corpus.news_index
    return users, [[idx[n] for n in last[u].history] for u in users]


# ---------------------------------------------------------------------------
# accuracy


def impression_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Fraction of positive/negative pairs ordered correctly, ties counted 1/2."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    if not len(pos) or not len(neg):
        raise MetricError("AUC needs at least one positive and one negative")
    from scipy.stats import rankdata

    r = rankdata(np.concatenate([pos, neg]))
    return float((r[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def _desc_order(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def impression_mrr(labels, scores) -> float:
    y = np.asarray(labels)[_desc_order(scores)]
    rr = y / (np.arange(len(y)) + 1.0)
    return float(rr.sum() / y.sum())


def impression_ndcg(labels, scores, k: int = 10) -> float:
    y = np.asarray(labels, dtype=np.float64)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    got = (2**y[_desc_order(scores)][:k] - 1)
    ideal = (2 ** np.sort(y)[::-1][:k] - 1)
    return float((got * disc[: len(got)]).sum() / (ideal * disc[: len(ideal)]).sum())


def accuracy_metrics(scored: Iterable[tuple[Sequence[int], Sequence[float]]]) -> dict[str, float]:
    """Mean per-impression AUC, MRR and nDCG@10.

    Impressions without both a positive and a negative are skipped and
    counted under ``excluded``.
    """
    auc, mrr, ndcg = [], [], []
    excluded = 0
    for labels, scores in scored:
        y = np.asarray(labels)
        if y.sum() == 0 or y.sum() == len(y):
            excluded += 1
            continue
        auc.append(impression_auc(y, scores))
        mrr.append(impression_mrr(y, scores))
        ndcg.append(impression_ndcg(y, scores, 10))
    n = len(auc)
    mean = (lambda v: math.fsum(v) / n) if n else (lambda v: float("nan"))
    return {"AUC": mean(auc), "MRR": mean(mrr), "nDCG@10": mean(ndcg), "excluded": excluded, "impressions": n}


def impression_scores(corpus: Corpus, impressions: Sequence[Impression], user_vecs: Mapping[str, np.ndarray] | None,
                      news_vecs: np.ndarray, params=None, cfg=None) -> list[tuple[list[int], np.ndarray]]:
    """Fair scores of each impression's candidates given its own history."""
    idx = corpus.news_index
    if user_vecs is None:
        users = encode_users([[idx[n] for n in imp.history] for imp in impressions], news_vecs, params, cfg)
    out = []
    for i, imp in enumerate(impressions):
        u = users[i] if user_vecs is None else user_vecs[imp.user_id]
        rows = [idx[n] for n, _ in imp.candidates]
        out.append(([y for _, y in imp.candidates], score_fair(u[None, :], news_vecs[rows])[0]))
    return out


# ---------------------------------------------------------------------------
# provider groups and exposure metrics


@dataclass(frozen=True)
class ProviderGroups:
    ratio: float
    protected_providers: frozenset[int]
    unprotected_providers: frozenset[int]
    protected_news: np.ndarray  # bool per corpus row

    @property
    def n_protected_news(self) -> int:
        return int(self.protected_news.sum())


def n_protected(n_providers: int, ratio: float) -> int:
    """round(ratio * n), halves rounded up."""
    return int(math.floor(ratio * n_providers + 0.5))


def partition_groups(avg_clicks: Mapping[int, float], ratio: float, news_providers: np.ndarray) -> ProviderGroups:
    """Bottom ``ratio`` of providers by average clicks per article are protected.

    ``avg_clicks`` maps every provider with at least one article to its
    average; ties put the lower provider ID lower.
    """
    if not 0 < ratio < 1:
        raise MetricError(f"ratio must be in (0, 1), got {ratio}")
    if len(avg_clicks) < 2:
        raise MetricError("need at least two providers to define fairness groups")
    order = sorted(avg_clicks, key=lambda p: (avg_clicks[p], p))
    k = n_protected(len(order), ratio)
    prot = frozenset(order[:k])
    unprot = frozenset(order[k:])
    mask = np.isin(np.asarray(news_providers), list(prot))
    return ProviderGroups(ratio, prot, unprot, mask)


def provider_average_clicks(corpus: Corpus) -> dict[int, float]:
    """Training clicks per article for each provider owning at least one article."""
    arts = corpus.provider_article_counts()
    clicks = corpus.provider_click_counts("train")
    return {p: clicks[p] / arts[p] for p in range(len(arts)) if arts[p] > 0}


def corpus_groups(corpus: Corpus, ratio: float) -> ProviderGroups:
    return partition_groups(provider_average_clicks(corpus), ratio, corpus.provider_ids())


def _top_protected_counts(rankings: np.ndarray, protected: np.ndarray, k: int) -> np.ndarray:
    return protected[np.asarray(rankings)[:, :k]].sum(axis=1)


def exposure_ratio_at_k(rankings: np.ndarray, protected: np.ndarray, k: int) -> float:
    """Mean per-article top-K inclusion rate of protected news over that of
    unprotected news. ``rankings`` is (U, >=K) corpus rows; returns
    :data:`UNBOUNDED` when no unprotected article is ever in a top-K."""
    rankings = np.atleast_2d(rankings)
    protected = np.asarray(protected, dtype=bool)
    n_pos = int(protected.sum())
    n_neg = protected.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both groups need at least one article")
    if k > protected.size or k > rankings.shape[1]:
        raise MetricError(f"K={k} exceeds ranking length")
    hits = _top_protected_counts(rankings, protected, k)
    users = rankings.shape[0]
    num = int(hits.sum()) / (users * n_pos)
    den = int((k - hits).sum()) / (users * n_neg)
    if den == 0:
        return UNBOUNDED
    return num / den


def rnd_checkpoints(k: int) -> list[int]:
    if k < RND_STRIDE:
        raise MetricError(f"rND@K needs K >= {RND_STRIDE}")
    return list(range(RND_STRIDE, k + 1, RND_STRIDE))


def _rnd_inner(prefix_counts: Sequence[int], checkpoints: Sequence[int], share: float) -> float:
    return math.fsum(abs(c / n - share) / math.log2(n) for c, n in zip(prefix_counts, checkpoints))


def rnd_normaliser(n_news: int, n_protected_news: int, k: int) -> float:
    """Inner rND sum of the worse of the two extremal rankings."""
    cps = rnd_checkpoints(k)
    share = n_protected_news / n_news
    n_unprot = n_news - n_protected_news
    first = _rnd_inner([min(n, n_protected_news) for n in cps], cps, share)
    last = _rnd_inner([max(0, n - n_unprot) for n in cps], cps, share)
    return max(first, last)


def rnd_at_k(rankings: np.ndarray, protected: np.ndarray, k: int) -> float:
    rankings = np.atleast_2d(rankings)
    protected = np.asarray(protected, dtype=bool)
    n = protected.size
    n_pos = int(protected.sum())
    if n_pos == 0 or n_pos == n:
        raise MetricError("both groups need at least one article")
    if k > n or k > rankings.shape[1]:
        raise MetricError(f"K={k} exceeds ranking length")
    cps = rnd_checkpoints(k)
    z = rnd_normaliser(n, n_pos, k)
    if z == 0:
        raise MetricError("rND normaliser is zero for these group sizes")
    csum = np.cumsum(protected[rankings[:, :k]], axis=1)
    per_user = [_rnd_inner(csum[u, [c - 1 for c in cps]], cps, n_pos / n) for u in range(rankings.shape[0])]
    # the extreme ranking itself can land one ulp above 1
    return min(1.0, math.fsum(per_user) / len(per_user) / z)


# ---------------------------------------------------------------------------
# discriminator probe


def discriminator_probe(reps: np.ndarray, labels: np.ndarray, seed: int, hidden: int = 64, steps: int = 400,
                        lr: float = 1e-2, train_frac: float = 0.7) -> float:
    """Held-out accuracy of a freshly trained provider classifier on ``reps``.

    Features are standardised with training-split statistics; the classifier
    is the discriminator architecture (relu hidden layer, softmax output)
    trained full-batch with Adam.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise MetricError("probe needs at least two provider classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_train = int(round(train_frac * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    mu = reps[tr].mean(0)
    sd = reps[tr].std(0)
    sd[sd < 1e-12] = 1.0
    x = (reps - mu) / sd
    d = x.shape[1]
    lim1 = math.sqrt(6.0 / (d + hidden))
    lim2 = math.sqrt(6.0 / (hidden + len(classes)))
    params = ParameterStore({
        "disc.w1": rng.uniform(-lim1, lim1, (d, hidden)),
        "disc.b1": np.zeros(hidden),
        "disc.w2": rng.uniform(-lim2, lim2, (hidden, len(classes))),
        "disc.b2": np.zeros(len(classes)),
    })
    state = AdamState(lr=lr)
    xt = ad.constant(x[tr])
    for _ in range(steps):
        w = params.leaves()
        loss = ad.cross_entropy(enc.discriminator_logits(xt, w), y[tr])
        g = ad.backward(loss, w.values())
        adam_apply(state, params, {k: g[t] for k, t in w.items()})
    with ad.no_grad():
        logits = enc.discriminator_logits(ad.constant(x[te]), params.leaves(lambda k: False)).data
    return float((logits.argmax(-1) == y[te]).mean())


def majority_baseline(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    return float(counts.max() / counts.sum())


# ---------------------------------------------------------------------------
# reports


@dataclass
class FairnessReport:
    cells: dict[tuple[float, int], dict[str, float]]  # (r, K) -> {"ER": .., "rND": ..}
    accuracy: dict[str, float]
    probe_accuracy: float = float("nan")
    probe_baseline: float = float("nan")
    metadata: dict[str, str] = field(default_factory=dict)

    def er(self, r: float, k: int) -> float:
        return self.cells[(r, k)]["ER"]

    def rnd(self, r: float, k: int) -> float:
        return self.cells[(r, k)]["rND"]

    @property
    def auc(self) -> float:
        return self.accuracy["AUC"]

    def header_lines(self) -> list[str]:
        lines = [f"# convention: {c}" for c in CONVENTIONS]
        lines += [f"# {k}: {v}" for k, v in sorted(self.metadata.items())]
        return lines

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in self.header_lines():
            buf.write(line + "\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["r", "K", "ER", "rND", "AUC", "MRR", "nDCG@10", "probe_accuracy"])
        for (r, k), cell in sorted(self.cells.items()):
            wr.writerow([r, k, _fmt(cell["ER"]), _fmt(cell["rND"]), _fmt(self.accuracy["AUC"]),
                         _fmt(self.accuracy["MRR"]), _fmt(self.accuracy["nDCG@10"]), _fmt(self.probe_accuracy)])
        return buf.getvalue()

    def to_long_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["metric", "r", "K", "value"])
        for (r, k), cell in sorted(self.cells.items()):
            wr.writerow([f"ER@{k}", r, k, _fmt(cell["ER"])])
            wr.writerow([f"rND@{k}", r, k, _fmt(cell["rND"])])
        for m in ("AUC", "MRR", "nDCG@10"):
            wr.writerow([m, "", "", _fmt(self.accuracy[m])])
        wr.writerow(["probe_accuracy", "", "", _fmt(self.probe_accuracy)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = self.header_lines()
        ks = sorted({k for _, k in self.cells})
        rs = sorted({r for r, _ in self.cells})
        head = "r     " + "".join(f"{'ER@' + str(k):>10}" for k in ks) + "".join(f"{'rND@' + str(k):>10}" for k in ks)
        lines += [head, "-" * len(head)]
        for r in rs:
            row = f"{int(round(r * 100)):>3}%  "
            row += "".join(f"{_fmt(self.er(r, k), 4):>10}" for k in ks)
            row += "".join(f"{_fmt(self.rnd(r, k), 4):>10}" for k in ks)
            lines.append(row)
        lines.append("")
        lines.append("AUC {}  MRR {}  nDCG@10 {}  probe {} (majority {})".format(
            *(_fmt(v, 4) for v in (self.accuracy["AUC"], self.accuracy["MRR"], self.accuracy["nDCG@10"],
                                   self.probe_accuracy, self.probe_baseline))))
        return "\n".join(lines) + "\n"


def _fmt(v: float, digits: int | None = None) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "unbounded"
    if digits is None:
        return repr(float(v))
    return f"{v:.{digits}f}"


def fairness_cells(rankings: np.ndarray, corpus: Corpus, ratios=RATIOS, cutoffs=CUTOFFS) -> dict:
    cells = {}
    for r in ratios:
        g = corpus_groups(corpus, r)
        for k in cutoffs:
            cells[(r, k)] = {"ER": exposure_ratio_at_k(rankings, g.protected_news, k),
                             "rND": rnd_at_k(rankings, g.protected_news, k)}
    return cells


def full_rankings(corpus: Corpus, user_vecs: np.ndarray, news_vecs: np.ndarray) -> np.ndarray:
    return rank_rows(user_vecs @ news_vecs.T, id_order([a.news_id for a in corpus.news]))


def evaluate(corpus: Corpus, params: ParameterStore, cfg: enc.EncoderConfig, split: str = "test",
             probe_seed: int | None = 0, ratios=RATIOS, cutoffs=CUTOFFS, metadata=None) -> FairnessReport:
    """Fairness and accuracy of fair-representation ranking on ``split``."""
    impressions = corpus.split(split)
    if not impressions:
        raise MetricError(f"no impressions in split {split!r}")
    news_vecs = encode_news(corpus, params, cfg)
    users, hists = latest_histories(corpus, impressions)
    user_vecs = encode_users(hists, news_vecs, params, cfg)
    # sigmoid is monotone, so raw dot products give the same ranking
    rankings = full_rankings(corpus, user_vecs, news_vecs)
    cells = fairness_cells(rankings, corpus, ratios, cutoffs)
    acc = accuracy_metrics(impression_scores(corpus, impressions, None, news_vecs, params, cfg))
    probe = base = float("nan")
    if probe_seed is not None:
        labels = corpus.discriminator_labels()
        probe = discriminator_probe(news_vecs, labels, probe_seed)
        base = majority_baseline(labels)
    return FairnessReport(cells, acc, probe, base, dict(metadata or {}))


def validation_metrics(corpus: Corpus, params: ParameterStore, cfg: enc.EncoderConfig) -> tuple[float, float]:
    """(AUC, rND@10 at r = 50%) on the validation split, without the probe."""
    rep = evaluate(corpus, params, cfg, "valid", probe_seed=None, ratios=(0.5,), cutoffs=(10,))
    return rep.auc, rep.rnd(0.5, 10)
