"""Behavioral frustration proxies computed from output text statistics.

Each turn's output is reduced to a :class:`TextDigest` (token count plus
token and n-gram sets). Three proxies are derived from digests alone:
repetition similarity against prior turns, drift away from the task
wording, and length anomaly against the turn-length history. A weighted,
optionally smoothed combination yields the per-turn frustration score.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Optional, Sequence

_PUNCT = ".,;:!?\"'()[]{}"


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization with edge punctuation stripped."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def ngram_set(tokens: Sequence[str], order: int) -> frozenset[str]:
    """Distinct n-grams of the given order, joined with single spaces."""
    if order < 1:
        raise ValueError(f"ngram order must be >= 1, got {order}")
    return frozenset(
        " ".join(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
    )


@dataclass(frozen=True)
class TextDigest:
    """Order-free text statistics: token count, token set, n-gram set."""

    token_count: int
    tokens: frozenset[str]
    ngrams: frozenset[str]
    ngram_order: int = 2

    @classmethod
    def from_text(cls, text: str, order: int = 2) -> "TextDigest":
        toks = tokenize(text)
        return cls.from_tokens(toks, order)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], order: int = 2) -> "TextDigest":
        return cls(
            token_count=len(tokens),
            tokens=frozenset(tokens),
            ngrams=ngram_set(tokens, order),
            ngram_order=order,
        )

    @classmethod
    def empty(cls, order: int = 2) -> "TextDigest":
        return cls(token_count=0, tokens=frozenset(), ngrams=frozenset(), ngram_order=order)

    def to_dict(self) -> dict:
        return {
            "token_count": self.token_count,
            "tokens": sorted(self.tokens),
            "ngrams": sorted(self.ngrams),
            "ngram_order": self.ngram_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextDigest":
        return cls(
            token_count=int(d["token_count"]),
            tokens=frozenset(d["tokens"]),
            ngrams=frozenset(d["ngrams"]),
            ngram_order=int(d["ngram_order"]),
        )


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class ProxyVector:
    """One turn's proxy readings, each in [0, 1]."""

    repetition_similarity: float
    context_drift: float
    length_anomaly: float

    def __post_init__(self) -> None:
        _check_unit("repetition_similarity", self.repetition_similarity)
        _check_unit("context_drift", self.context_drift)
        _check_unit("length_anomaly", self.length_anomaly)


@dataclass(frozen=True)
class SignalConfig:
    """Weights and knobs for aggregating proxies into the frustration score.

    proxy_weights applies to (repetition, drift, length anomaly) and must
    sum to 1. smoothing is the exponential weight given to the previous
    turn's score; 0 disables smoothing entirely.
    """

    proxy_weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    ngram_order: int = 2
    smoothing: float = 0.3

    def __post_init__(self) -> None:
        if len(self.proxy_weights) != 3 or any(w < 0 for w in self.proxy_weights):
            raise ValueError(f"proxy_weights must be 3 non-negative reals, got {self.proxy_weights}")
        if abs(sum(self.proxy_weights) - 1.0) > 1e-9:
            raise ValueError(f"proxy_weights must sum to 1, got {sum(self.proxy_weights)}")
        if self.ngram_order < 1:
            raise ValueError(f"ngram_order must be >= 1, got {self.ngram_order}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")


def jaccard(a: frozenset, b: frozenset) -> float:
    """Set Jaccard similarity; two empty sets count as identical (1.0)."""
    if not a and not b:
        return 1.0
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def repetition_similarity(current: TextDigest, history: Sequence[TextDigest]) -> float:
    """Maximum n-gram Jaccard between the current output and any prior turn.

    Returns 0 when there is no history.
    """
    if not history:
        return 0.0
    return max(jaccard(current.ngrams, past.ngrams) for past in history)


def context_drift(current: TextDigest, task: TextDigest) -> float:
    """1 minus the unigram overlap coefficient against the task wording.

    Higher means further off-task. An empty current output is maximally
    drifted.
    """
    if not task.tokens:
        raise ValueError("task digest has no tokens; cannot measure drift")
    if not current.tokens:
        return 1.0
    inter = len(current.tokens & task.tokens)
    overlap = inter / min(len(current.tokens), len(task.tokens))
    return min(max(1.0 - overlap, 0.0), 1.0)


def length_anomaly(current_count: int, history_counts: Sequence[int]) -> float:
    """Relative deviation of the output length from the running median, clamped to [0, 1]."""
    if not history_counts:
        return 0.0
    med = statistics.median(history_counts)
    if med <= 0:
        return 1.0 if current_count > 0 else 0.0
    return min(abs(current_count - med) / med, 1.0)


def frustration_score(
    proxies: ProxyVector, cfg: SignalConfig, prev: Optional[float] = None
) -> float:
    """Weighted proxy combination, exponentially smoothed against the prior score."""
    if prev is not None:
        _check_unit("prev", prev)
    w_rep, w_drift, w_len = cfg.proxy_weights
    raw = (
        w_rep * proxies.repetition_similarity
        + w_drift * proxies.context_drift
        + w_len * proxies.length_anomaly
    )
    value = raw if prev is None else cfg.smoothing * prev + (1.0 - cfg.smoothing) * raw
    return min(max(value, 0.0), 1.0)


def compute_proxies(
    current: TextDigest,
    history: Sequence[TextDigest],
    task: TextDigest,
    length_history: Sequence[int],
) -> ProxyVector:
    """Evaluate all three proxies for the current output."""
    return ProxyVector(
        repetition_similarity=repetition_similarity(current, history),
        context_drift=context_drift(current, task),
        length_anomaly=length_anomaly(current.token_count, length_history),
    )
