"""MIND-format ingestion, vocabulary, synthetic biased click logs, and
training-instance sampling."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
OOV = 1
N_DISCRIMINATOR_CLASSES = 51

NEWS_FILE = "news.tsv"
PROVIDER_FILE = "providers.tsv"
GROUND_TRUTH_FILE = "ground_truth.tsv"
SPLITS = ("train", "valid", "test")

_TOKEN_RE = re.compile(r"[^\W_]+")


class DataFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def behaviors_file(split: str) -> str:
    return f"behaviors_{split}.tsv"


@dataclass(frozen=True)
class NewsArticle:
    news_id: str
    tokens: tuple[int, ...]
    provider: int
    title: str


@dataclass(frozen=True)
class Impression:
    impression_id: str
    user_id: str
    history: tuple[str, ...]
    candidates: tuple[tuple[str, int], ...]

    @property
    def clicked(self) -> list[str]:
        return [n for n, y in self.candidates if y == 1]

    @property
    def non_clicked(self) -> list[str]:
        return [n for n, y in self.candidates if y == 0]


@dataclass
class Corpus:
    news: list[NewsArticle]
    vocab: dict[str, int]
    providers: dict[str, int]
    train: list[Impression] = field(default_factory=list)
    valid: list[Impression] = field(default_factory=list)
    test: list[Impression] = field(default_factory=list)

    def __post_init__(self):
        self.news_index = {a.news_id: i for i, a in enumerate(self.news)}
        for split in SPLITS:
            for imp in getattr(self, split):
                for nid in (*imp.history, *(c for c, _ in imp.candidates)):
                    if nid not in self.news_index:
                        raise DataFormatError(
                            f"{split} impression {imp.impression_id} references unknown news {nid!r}"
                        )

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return all(getattr(self, f.name) == getattr(other, f.name) for f in fields(self))

    @property
    def n_providers(self) -> int:
        """H, the number of known providers; ID ``H`` is the unknown bucket."""
        return len(self.providers)

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values(), default=OOV) + 1

    def split(self, name: str) -> list[Impression]:
        return getattr(self, name)

    def title_matrix(self, length: int) -> np.ndarray:
        """Token IDs of every title, keeping the first ``length`` tokens."""
        out = np.zeros((len(self.news), length), dtype=np.int64)
        for i, a in enumerate(self.news):
            toks = a.tokens[:length]
            out[i, : len(toks)] = toks
        return out

    def provider_ids(self) -> np.ndarray:
        return np.array([a.provider for a in self.news], dtype=np.int64)

    def provider_article_counts(self) -> np.ndarray:
        return np.bincount(self.provider_ids(), minlength=self.n_providers + 1)

    def provider_click_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.n_providers + 1, dtype=np.int64)
        for imp in self.split(split):
            for nid in imp.clicked:
                counts[self.news[self.news_index[nid]].provider] += 1
        return counts

    def discriminator_labels(self, top: int = N_DISCRIMINATOR_CLASSES - 1) -> np.ndarray:
        """Per-news class for the provider discriminator.

        The ``top`` most-clicked providers (training clicks, ties by ID) get
        their own class; every other provider, including the unknown bucket,
        shares class ``top``.
        """
        clicks = self.provider_click_counts("train")[: self.n_providers]
        order = sorted(range(self.n_providers), key=lambda p: (-clicks[p], p))
        cls = np.full(self.n_providers + 1, top, dtype=np.int64)
        for rank, p in enumerate(order[:top]):
            cls[p] = rank
        return cls[self.provider_ids()]


# ---------------------------------------------------------------------------
# MIND-format files


def _read_rows(path: Path, ncols: int) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise DataFormatError(f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(cols)}")
            yield lineno, cols


def load_provider_map(path) -> dict[str, str]:
    return {cols[0]: cols[1] for _, cols in _read_rows(Path(path), 2)}


def build_vocab(titles: Iterable[str], min_freq: int = 2) -> dict[str, int]:
    counts = Counter(tok for t in titles for tok in tokenize(t))
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    vocab = {"<pad>": PAD, "<unk>": OOV}
    for i, w in enumerate(kept, start=2):
        vocab[w] = i
    return vocab


def encode_title(title: str, vocab: dict[str, int]) -> tuple[int, ...]:
    return tuple(vocab.get(tok, OOV) for tok in tokenize(title))


def load_news(path, provider_map_path, min_freq: int = 2) -> tuple[list[NewsArticle], dict[str, int], dict[str, int]]:
    """Read a MIND news file and a provider map.

    Returns ``(articles, vocab, providers)``. Provider IDs follow sorted
    provider name; news absent from the map get the unknown bucket
    ``len(providers)``.
    """
    rows = [(cols[0], cols[3]) for _, cols in _read_rows(Path(path), 8)]
    pmap = load_provider_map(provider_map_path)
    providers = {name: i for i, name in enumerate(sorted(set(pmap.values())))}
    unknown = len(providers)
    vocab = build_vocab((t for _, t in rows), min_freq)
    missing = 0
    articles = []
    for nid, title in rows:
        name = pmap.get(nid)
        if name is None:
            missing += 1
        articles.append(
            NewsArticle(nid, encode_title(title, vocab), providers.get(name, unknown) if name else unknown, title)
        )
    if missing:
        log.warning("%d news missing from provider map; assigned to unknown-provider bucket", missing)
    return articles, vocab, providers


def parse_candidate(token: str, context: str = "") -> tuple[str, int]:
    nid, sep, label = token.rpartition("-")
    if not sep or label not in ("0", "1") or not nid:
        raise DataFormatError(f"{context}bad candidate {token!r}: expected '<newsID>-0' or '<newsID>-1'")
    return nid, int(label)


def load_behaviors(path) -> list[Impression]:
    path = Path(path)
    out = []
    for lineno, (imp_id, uid, _time, hist, cands) in _read_rows(path, 5):
        ctx = f"{path}:{lineno}: "
        out.append(
            Impression(
                imp_id,
                uid,
                tuple(hist.split()),
                tuple(parse_candidate(tok, ctx) for tok in cands.split()),
            )
        )
    return out


def load_corpus(data_dir, min_freq: int = 2) -> Corpus:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    news, vocab, providers = load_news(data_dir / NEWS_FILE, data_dir / PROVIDER_FILE, min_freq)
    splits = {}
    for split in SPLITS:
        p = data_dir / behaviors_file(split)
        splits[split] = load_behaviors(p) if p.exists() else []
    if not splits["train"]:
        raise DataFormatError(f"{data_dir}: no training impressions")
    return Corpus(news, vocab, providers, **splits)


def write_corpus(corpus: Corpus, out_dir, provider_names: dict[int, str] | None = None) -> list[Path]:
    """Write ``corpus`` as MIND-format files; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = provider_names or {i: n for n, i in corpus.providers.items()}
    written = []
    p = out_dir / NEWS_FILE
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        for a in corpus.news:
            fh.write(f"{a.news_id}\tnews\tnews\t{a.title}\t\t\t[]\t[]\n")
    written.append(p)
    p = out_dir / PROVIDER_FILE
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        for a in corpus.news:
            if a.provider in names:
                fh.write(f"{a.news_id}\t{names[a.provider]}\n")
    written.append(p)
    for split in SPLITS:
        p = out_dir / behaviors_file(split)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for k, imp in enumerate(corpus.split(split)):
                cands = " ".join(f"{n}-{y}" for n, y in imp.candidates)
                stamp = f"11/{1 + k % 28:02d}/2019 {k % 12 + 1}:{k % 60:02d}:00 AM"
                fh.write(f"{imp.impression_id}\t{imp.user_id}\t{stamp}\t{' '.join(imp.history)}\t{cands}\n")
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# synthetic provider-biased click logs


@dataclass
class SimulatorConfig:
    n_users: int = 2000
    n_news: int = 500
    n_providers: int = 20
    n_topics: int = 10
    zipf_exponent: float = 1.0
    alpha: float = 4.0
    beta: float = 2.0
    impressions_per_user: int = 8
    candidates_per_impression: int = 10
    seed: int = 0
    topics_per_user: int = 2
    preference_concentration: float = 0.0  # 0: equal weights; else Dirichlet, rescaled to max 1
    click_offset: float = 3.5
    top_popularity: float = 0.65
    exposure_exponent: float = 1.0
    provider_topic_share: float = 0.0  # chance an article takes its provider's home topic
    warmup_impressions: int = 3
    words_per_topic: int = 12
    topic_words_per_title: tuple[int, int] = (3, 5)
    filler_vocab: int = 40
    filler_words_per_title: tuple[int, int] = (1, 3)
    signature_words_per_provider: int = 2

    def validate(self) -> None:
        counts = (
            "n_users",
            "n_news",
            "n_providers",
            "n_topics",
            "impressions_per_user",
            "candidates_per_impression",
            "topics_per_user",
            "words_per_topic",
            "signature_words_per_provider",
        )
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"simulator: {name} must be >= 1, got {getattr(self, name)}")
        for name in ("alpha", "beta", "zipf_exponent", "warmup_impressions", "filler_vocab", "top_popularity",
                     "exposure_exponent"):
            if getattr(self, name) < 0:
                raise ConfigError(f"simulator: {name} must be >= 0")
        if not 0 <= self.provider_topic_share <= 1:
            raise ConfigError("simulator: provider_topic_share must be in [0, 1]")
        if self.n_news < self.n_providers:
            raise ConfigError("simulator: need at least one article per provider")
        if self.candidates_per_impression > self.n_news:
            raise ConfigError("simulator: more candidates per impression than news")
        if self.topics_per_user > self.n_topics:
            raise ConfigError("simulator: topics_per_user exceeds n_topics")
        if self.impressions_per_user < 3:
            raise ConfigError("simulator: need >= 3 impressions per user for train/valid/test")


@dataclass
class SimulatedCorpus:
    corpus: Corpus
    provider_popularity: np.ndarray  # per provider ID, max top_popularity
    news_topic: np.ndarray
    user_prefs: dict[str, np.ndarray]
    relevance: dict[tuple[str, str], float]  # fair (interest-only) logit term
    exposures: np.ndarray  # per news, times shown across all impressions

    def click_logit(self, user_id: str, news_idx: int, cfg: SimulatorConfig) -> float:
        a = self.corpus.news[news_idx]
        return (
            cfg.alpha * float(self.user_prefs[user_id][self.news_topic[news_idx]])
            + cfg.beta * float(self.provider_popularity[a.provider])
            - cfg.click_offset
        )


def provider_name(i: int) -> str:
    return f"P{i:03d}"


def simulate_corpus(cfg: SimulatorConfig) -> SimulatedCorpus:
    """Generate a click log whose clicks mix user interest with provider popularity.

    Provider ``k`` (0-based) has popularity
    ``top_popularity * (k+1) ** -zipf_exponent``. Articles
    are spread evenly over providers; an article takes its provider's home
    topic with probability ``provider_topic_share`` and a uniform topic
    otherwise. Each title carries topic words, filler words and one provider
    signature word.
    Candidates are drawn with probability proportional to their provider's
    popularity raised to ``exposure_exponent``, and a candidate is clicked with probability
    ``sigmoid(alpha * pref[topic] + beta * popularity - click_offset)``.
    Clicks from a user's earlier impressions (including unrecorded warm-up
    impressions) form the history of later ones; the last impression of each
    user goes to test, the one before to valid, the rest to train.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_p, n_n, n_t = cfg.n_providers, cfg.n_news, cfg.n_topics

    popularity = (np.arange(1, n_p + 1, dtype=np.float64)) ** (-cfg.zipf_exponent)
    popularity *= cfg.top_popularity / popularity[0]
    news_provider = rng.permutation(np.arange(n_n) % n_p)
    news_topic = rng.integers(0, n_t, size=n_n)
    if cfg.provider_topic_share > 0:
        # provider p specialises in topic p mod n_topics
        home = rng.random(n_n) < cfg.provider_topic_share
        news_topic = np.where(home, news_provider % n_t, news_topic)

    topic_words = [[f"t{t}w{j}" for j in range(cfg.words_per_topic)] for t in range(n_t)]
    fillers = [f"f{j}" for j in range(cfg.filler_vocab)]
    signatures = [[f"s{p}x{j}" for j in range(cfg.signature_words_per_provider)] for p in range(n_p)]
    news = []
    for i in range(n_n):
        t = int(news_topic[i])
        k = rng.integers(cfg.topic_words_per_title[0], cfg.topic_words_per_title[1] + 1)
        words = list(rng.choice(topic_words[t], size=min(k, len(topic_words[t])), replace=False))
        if fillers:
            kf = rng.integers(cfg.filler_words_per_title[0], cfg.filler_words_per_title[1] + 1)
            words += list(rng.choice(fillers, size=kf, replace=True))
        words.append(signatures[news_provider[i]][rng.integers(len(signatures[news_provider[i]]))])
        words = [words[j] for j in rng.permutation(len(words))]
        news.append((f"N{i + 1}", " ".join(words), int(news_provider[i])))

    expo_w = popularity[news_provider] ** cfg.exposure_exponent
    expo_p = expo_w / expo_w.sum()
    n_imp = cfg.warmup_impressions + cfg.impressions_per_user
    splits: dict[str, list[Impression]] = {s: [] for s in SPLITS}
    prefs: dict[str, np.ndarray] = {}
    relevance: dict[tuple[str, str], float] = {}
    exposures = np.zeros(n_n, dtype=np.int64)
    imp_counter = 0
    for u in range(cfg.n_users):
        uid = f"U{u + 1}"
        pref = np.zeros(n_t)
        liked = rng.choice(n_t, size=cfg.topics_per_user, replace=False)
        if cfg.preference_concentration > 0:
            wts = rng.dirichlet(np.full(cfg.topics_per_user, cfg.preference_concentration))
            pref[liked] = wts / wts.max()
        else:
            pref[liked] = 1.0
        prefs[uid] = pref
        history: list[str] = []
        for k in range(n_imp):
            cand = rng.choice(n_n, size=cfg.candidates_per_impression, replace=False, p=expo_p)
            fair = cfg.alpha * pref[news_topic[cand]]
            logit = fair + cfg.beta * popularity[news_provider[cand]] - cfg.click_offset
            labels = (rng.random(cand.size) < 1.0 / (1.0 + np.exp(-logit))).astype(int)
            ids = [news[j][0] for j in cand]
            if k >= cfg.warmup_impressions:
                exposures[cand] += 1
                j = k - cfg.warmup_impressions
                split = "test" if j == cfg.impressions_per_user - 1 else (
                    "valid" if j == cfg.impressions_per_user - 2 else "train"
                )
                imp_counter += 1
                splits[split].append(
                    Impression(str(imp_counter), uid, tuple(history), tuple(zip(ids, labels.tolist())))
                )
                for nid, f in zip(ids, fair):
                    relevance[(uid, nid)] = float(f)
            history.extend(n for n, y in zip(ids, labels) if y)

    titles = [t for _, t, _ in news]
    vocab = build_vocab(titles)
    providers = {provider_name(p): p for p in range(n_p)}
    articles = [NewsArticle(nid, encode_title(t, vocab), p, t) for nid, t, p in news]
    corpus = Corpus(articles, vocab, providers, **splits)
    return SimulatedCorpus(corpus, popularity, news_topic, prefs, relevance, exposures)


def write_simulation(sim: SimulatedCorpus, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = write_corpus(sim.corpus, out_dir)
    p = out_dir / GROUND_TRUTH_FILE
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        for (uid, nid), v in sim.relevance.items():
            fh.write(f"{uid}\t{nid}\t{v!r}\n")
    return [*paths, p]


# ---------------------------------------------------------------------------
# training instances


@dataclass(frozen=True)
class TrainingInstance:
    history: tuple[int, ...]  # news rows, oldest first, at most m
    positive: int
    negatives: tuple[int, ...]
    user_id: str = ""

    @property
    def candidates(self) -> tuple[int, ...]:
        return (self.positive, *self.negatives)


@dataclass
class SamplingStats:
    instances: int = 0
    skipped_impressions: int = 0


def sample_instances(
    corpus: Corpus,
    impressions: Sequence[Impression],
    n_negatives: int,
    seed: int,
    history_len: int | None = None,
    stats: SamplingStats | None = None,
) -> Iterator[TrainingInstance]:
    """One instance per clicked candidate, with negatives from the same impression.

    Negatives are drawn without replacement when the impression has at least
    ``n_negatives`` non-clicks and with replacement otherwise; impressions
    with no non-clicks are skipped.
    """
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    rng = np.random.default_rng(seed)
    idx = corpus.news_index
    stats = stats if stats is not None else SamplingStats()
    for imp in impressions:
        pos = imp.clicked
        neg = imp.non_clicked
        if not pos:
            continue
        if not neg:
            stats.skipped_impressions += 1
            continue
        hist = tuple(idx[n] for n in imp.history)
        if history_len is not None:
            hist = hist[-history_len:] if history_len > 0 else ()
        neg_rows = np.array([idx[n] for n in neg])
        for p in pos:
            replace = len(neg_rows) < n_negatives
            chosen = rng.choice(neg_rows, size=n_negatives, replace=replace)
            stats.instances += 1
            yield TrainingInstance(hist, idx[p], tuple(int(c) for c in chosen), imp.user_id)
