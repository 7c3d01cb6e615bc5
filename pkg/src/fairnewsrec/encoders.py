"""Fair/biased news and user encoders and the provider discriminator.

All functions take ``w``, a mapping of parameter name to graph leaf (see
:meth:`ParameterStore.leaves`), so the same code serves training, frozen
evaluation and gradient checks.

Parameter naming: ``word_emb``, ``news.*`` (fair content model),
``prov.*`` (provider encoder), ``user_fair.*``, ``user_biased.*``,
``disc.*`` (discriminator).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_DISCRIMINATOR_CLASSES, PAD
from .store import ParameterStore

MASK_LOGIT = -1e9

BACKBONES = ("mhsa", "meanpool")


@dataclass
class EncoderConfig:
    vocab_size: int
    n_providers: int  # H; embedding rows are H + 1 (unknown bucket)
    title_len: int = 30
    history_len: int = 50
    word_dim: int = 300
    heads: int = 20
    head_dim: int = 20
    rep_dim: int = 400
    provider_dim: int = 400
    n_classes: int = N_DISCRIMINATOR_CLASSES
    attn_hidden: int = 200
    disc_hidden: int = 256
    provider_hidden: int = 400
    backbone: str = "mhsa"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.rep_dim != self.heads * self.head_dim:
            raise ValueError(
                f"rep_dim ({self.rep_dim}) must equal heads * head_dim ({self.heads} * {self.head_dim})"
            )
        for k, v in asdict(self).items():
            if isinstance(v, int) and v < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _mhsa_params(rng, prefix: str, d_in: int, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    d = cfg.rep_dim
    return {
        f"{prefix}.wq": _glorot(rng, d_in, d),
        f"{prefix}.wk": _glorot(rng, d_in, d),
        f"{prefix}.wv": _glorot(rng, d_in, d),
    }


def _pool_params(rng, prefix: str, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.att_w1": _glorot(rng, cfg.rep_dim, cfg.attn_hidden),
        f"{prefix}.att_b1": np.zeros(cfg.attn_hidden),
        f"{prefix}.att_w2": _glorot(rng, cfg.attn_hidden, 1),
    }


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParameterStore:
    """Random initial parameters for every encoder and the discriminator."""
    p = ParameterStore()
    emb = rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, cfg.word_dim))
    emb[PAD] = 0.0
    p["word_emb"] = emb
    if cfg.backbone == "mhsa":
        p.update(_mhsa_params(rng, "news.mhsa", cfg.word_dim, cfg))
        p.update(_pool_params(rng, "news.pool", cfg))
    else:
        p["news.proj"] = _glorot(rng, cfg.word_dim, cfg.rep_dim)
    p["prov.emb"] = rng.uniform(-0.1, 0.1, size=(cfg.n_providers + 1, cfg.provider_dim))
    p["prov.w1"] = _glorot(rng, cfg.provider_dim, cfg.provider_hidden)
    p["prov.b1"] = np.zeros(cfg.provider_hidden)
    p["prov.w2"] = _glorot(rng, cfg.provider_hidden, cfg.rep_dim)
    p["prov.b2"] = np.zeros(cfg.rep_dim)
    for which in ("user_fair", "user_biased"):
        p.update(_mhsa_params(rng, f"{which}.mhsa", cfg.rep_dim, cfg))
        p.update(_pool_params(rng, f"{which}.pool", cfg))
    p["disc.w1"] = _glorot(rng, cfg.rep_dim, cfg.disc_hidden)
    p["disc.b1"] = np.zeros(cfg.disc_hidden)
    p["disc.w2"] = _glorot(rng, cfg.disc_hidden, cfg.n_classes)
    p["disc.b2"] = np.zeros(cfg.n_classes)
    return p


def load_word_vectors(path, vocab: Mapping[str, int], params: ParameterStore) -> int:
    """Overwrite rows of ``word_emb`` from a text file of ``word v1 ... vD`` lines.

    Returns the number of vocabulary words found in the file.
    """
    emb = params["word_emb"].copy()
    dim = emb.shape[1]
    hits = 0
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected word plus {dim} floats, got {len(parts) - 1}")
            idx = vocab.get(parts[0])
            if idx is None or idx == PAD:
                continue
            emb[idx] = np.array(parts[1:], dtype=np.float64)
            hits += 1
    params["word_emb"] = emb
    return hits


# ---------------------------------------------------------------------------
# building blocks


def _key_mask(mask: np.ndarray) -> np.ndarray:
    """Additive logit mask, 0 where ``mask`` is True and MASK_LOGIT elsewhere."""
    return np.where(mask, 0.0, MASK_LOGIT)


def multi_head_self_attention(
    x: Tensor, mask: np.ndarray, w: Mapping[str, Tensor], prefix: str, heads: int, head_dim: int
) -> Tensor:
    """NRMS-style MHSA: per-head scaled dot-product attention, heads concatenated.

    ``x`` is (B, L, d_in); ``mask`` is a (B, L) bool array of valid positions.
    Returns (B, L, heads * head_dim).
    """
    b, length, _ = x.shape

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(x @ w[f"{prefix}.wq"])
    k = split(x @ w[f"{prefix}.wk"])
    v = split(x @ w[f"{prefix}.wv"])
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    logits = logits + ad.constant(_key_mask(mask)[:, None, None, :])
    attn = ad.softmax(logits, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3)
    return out.reshape(b, length, heads * head_dim)


def attention_pool(h: Tensor, mask: np.ndarray, w: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Softmax-weighted sum over positions with tanh-MLP scores: (B, L, D) -> (B, D)."""
    b, length, d = h.shape
    hidden = ad.tanh(h @ w[f"{prefix}.att_w1"] + w[f"{prefix}.att_b1"])
    scores = (hidden @ w[f"{prefix}.att_w2"]).reshape(b, length)
    scores = scores + ad.constant(_key_mask(mask))
    alpha = ad.softmax(scores, axis=-1).reshape(b, 1, length)
    pooled = (alpha @ h).reshape(b, d)
    empty = ~mask.any(axis=1)
    if empty.any():
        pooled = pooled * ad.constant((~empty).astype(np.float64)[:, None])
    return pooled


def _trim(tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing all-padding columns; masked positions contribute nothing."""
    if tokens.shape[1] == 0:
        return tokens, mask
    used = np.flatnonzero(mask.any(axis=0))
    keep = int(used[-1]) + 1 if used.size else 1
    return tokens[:, :keep], mask[:, :keep]


# ---------------------------------------------------------------------------
# encoders


def encode_news_fair(tokens: np.ndarray, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Fair news vectors from title token IDs (N, T) -> (N, rep_dim).

    Titles with no non-padding token map to the zero vector.
    """
    tokens = np.asarray(tokens, dtype=np.int64)[:, : cfg.title_len]
    if cfg.backbone == "meanpool":
        return encode_news_fair_meanpool(tokens, w, cfg)
    mask = tokens != PAD
    tokens, mask = _trim(tokens, mask)
    x = ad.embedding_lookup(w["word_emb"], tokens, padding_idx=PAD)
    h = multi_head_self_attention(x, mask, w, "news.mhsa", cfg.heads, cfg.head_dim)
    return attention_pool(h, mask, w, "news.pool")


def encode_news_fair_meanpool(tokens: np.ndarray, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Mean of the title's word embeddings, linearly projected to rep_dim."""
    tokens = np.asarray(tokens, dtype=np.int64)[:, : cfg.title_len]
    mask = tokens != PAD
    counts = np.maximum(mask.sum(axis=1), 1).astype(np.float64)
    x = ad.embedding_lookup(w["word_emb"], tokens, padding_idx=PAD)
    mean = x.sum(axis=1) * ad.constant(1.0 / counts[:, None])
    return mean @ w["news.proj"]


def encode_news_biased(providers: np.ndarray, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Biased news vectors from provider IDs (N,) -> (N, rep_dim).

    IDs outside ``[0, H)`` use the unknown-provider row ``H``.
    """
    pid = np.asarray(providers, dtype=np.int64)
    pid = np.where((pid >= 0) & (pid < cfg.n_providers), pid, cfg.n_providers)
    e = ad.embedding_lookup(w["prov.emb"], pid)
    hidden = ad.relu(e @ w["prov.w1"] + w["prov.b1"])
    return hidden @ w["prov.w2"] + w["prov.b2"]


def encode_user(
    history: Tensor, mask: np.ndarray, w: Mapping[str, Tensor], cfg: EncoderConfig, which: str
) -> Tensor:
    """User vectors from clicked-news vectors (B, m, rep_dim) -> (B, rep_dim).

    ``which`` is ``"fair"`` or ``"biased"``; the two share architecture but
    not parameters. Users with an empty history map to the zero vector.
    """
    if which not in ("fair", "biased"):
        raise ValueError(f"which must be 'fair' or 'biased', got {which!r}")
    prefix = f"user_{which}"
    h = multi_head_self_attention(history, mask, w, f"{prefix}.mhsa", cfg.heads, cfg.head_dim)
    return attention_pool(h, mask, w, f"{prefix}.pool")


def discriminator_logits(c: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    hidden = ad.relu(c @ w["disc.w1"] + w["disc.b1"])
    return hidden @ w["disc.w2"] + w["disc.b2"]


def discriminate_provider(c: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """Provider class probabilities (N, n_classes) from fair news vectors."""
    return ad.softmax(discriminator_logits(c, w), axis=-1)


def frozen(w: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Copy of ``w`` in which parameters under ``prefix`` are constants."""
    return {k: (ad.constant(v.data) if k.startswith(prefix) else v) for k, v in w.items()}


# ---------------------------------------------------------------------------
# batch helpers


def history_matrix(histories, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack histories (oldest first) keeping the most recent ``length`` items.

    Returns (B, L) news-row indices shifted by one (0 = padding) and the
    validity mask, with L the longest kept history (at least 1).
    """
    kept = [tuple(h)[-length:] if length > 0 else () for h in histories]
    width = max([len(h) for h in kept] + [1])
    out = np.zeros((len(kept), width), dtype=np.int64)
    for i, h in enumerate(kept):
        out[i, : len(h)] = np.asarray(h, dtype=np.int64) + 1
    return out, out != 0


def lookup_rows(table: Tensor, rows: np.ndarray) -> Tensor:
    """Gather (row+1)-coded indices from ``table``; code 0 yields zeros."""
    zero = ad.constant(np.zeros((1, table.shape[1])))
    return ad.embedding_lookup(ad.concat([zero, table], axis=0), rows, padding_idx=0)
