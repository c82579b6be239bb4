"""Interpretability reports: aspect top words and per-pair explanations."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alfm import AlfmModel, aspect_importance, aspect_match
from .atm import AtmPosterior
from .corpus import Vocabulary
from .errors import ConfigError, ContractError

POLARITY_ZERO = 1e-12


def _aspect_topics(posterior: AtmPosterior, subject: int, kind: str) -> np.ndarray:
    if kind == "user":
        table = posterior.theta
    elif kind == "item":
        table = posterior.psi
    else:
        raise ContractError(f"kind must be 'user' or 'item', got {kind!r}")
    if not 0 <= subject < table.shape[0]:
        raise ContractError(f"{kind} index {subject} out of range")
    return table[subject]


def aspect_word_distribution(posterior: AtmPosterior, subject: int, a: int, kind: str = "user") -> np.ndarray:
    """P(w | aspect a of the subject) = sum_k theta[subject, a, k] * phi[k, w]."""
    return _aspect_topics(posterior, subject, kind)[a] @ posterior.phi


def _ranked(dist: np.ndarray) -> np.ndarray:
    # descending probability, ascending token id on ties
    return np.lexsort((np.arange(dist.size), -dist))


def top_words_all(posterior: AtmPosterior, subject: int, n: int = 10, background_threshold: int | None = 3,
                  kind: str = "user") -> list[list[tuple[int, float]]]:
    """Top-``n`` (token id, probability) lists for every aspect of a subject.

    A token in the unfiltered top-``n`` lists of more than
    ``background_threshold`` aspects counts as background and is removed from
    all lists, which are then refilled from further down the ranking.
    ``background_threshold=None`` disables filtering.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    dists = _aspect_topics(posterior, subject, kind) @ posterior.phi
    rankings = [_ranked(d) for d in dists]
    background: set[int] = set()
    if background_threshold is not None:
        membership = np.zeros(dists.shape[1], dtype=np.int64)
        for r in rankings:
            membership[r[:n]] += 1
        background = set(np.flatnonzero(membership > background_threshold).tolist())
    out = []
    for d, r in zip(dists, rankings):
        kept = [int(t) for t in r if int(t) not in background][:n]
        out.append([(t, float(d[t])) for t in kept])
    return out


def top_words(posterior: AtmPosterior, subject: int, a: int, n: int = 10,
              background_threshold: int | None = 3, kind: str = "user") -> list[tuple[int, float]]:
    return top_words_all(posterior, subject, n, background_threshold, kind)[a]


@dataclass
class AspectWordReport:
    subject: int
    kind: str
    words: list[list[tuple[str, float]]]

    def to_records(self) -> list[dict]:
        return [{"subject": self.subject, "kind": self.kind, "aspect": a,
                 "words": [{"token": t, "prob": p} for t, p in ws]}
                for a, ws in enumerate(self.words)]

    def to_text(self, labels: dict[int, str] | None = None) -> str:
        headers = [_label(labels, a) for a in range(len(self.words))]
        rows = max((len(ws) for ws in self.words), default=0)
        cols = [[t for t, _ in ws] + [""] * (rows - len(ws)) for ws in self.words]
        width = max([len(h) for h in headers] + [len(t) for c in cols for t in c] + [4]) + 2
        lines = ["".join(h.ljust(width) for h in headers).rstrip()]
        for j in range(rows):
            lines.append("".join(c[j].ljust(width) for c in cols).rstrip())
        return "\n".join(lines)


def aspect_word_report(posterior: AtmPosterior, vocab: Vocabulary, subject: int, n: int = 10,
                       background_threshold: int | None = 3, kind: str = "user") -> AspectWordReport:
    lists = top_words_all(posterior, subject, n, background_threshold, kind)
    return AspectWordReport(subject, kind, [[(vocab.decode(t), p) for t, p in ws] for ws in lists])


@dataclass
class PairExplanation:
    user: int
    item: int
    importance: np.ndarray
    matching: np.ndarray
    factor_term: np.ndarray  # (w_a * p_u) . (w_a * q_i), before weighting by s
    polarity: list[str]
    predicted: float
    biases: float  # b_0 + b_u + b_i
    actual: float | None = None

    def recombine(self) -> float:
        """Rebuild the prediction from the per-aspect rows."""
        total = 0.0
        for a in range(len(self.importance)):
            total += self.importance[a] * (self.matching[a] * self.factor_term[a])
        return total + self.biases

    def to_record(self) -> dict:
        return {
            "user": self.user, "item": self.item,
            "importance": self.importance.tolist(), "matching": self.matching.tolist(),
            "factor_term": self.factor_term.tolist(), "polarity": self.polarity,
            "predicted": self.predicted, "actual": self.actual,
        }

    def to_text(self, labels: dict[int, str] | None = None) -> str:
        A = len(self.importance)
        headers = [_label(labels, a) for a in range(A)]
        width = max([len(h) for h in headers] + [7]) + 2
        lines = ["Aspects".ljust(12) + "".join(h.rjust(width) for h in headers)]
        lines.append("Importance".ljust(12) + "".join(f"{v:.3f}".rjust(width) for v in self.importance))
        lines.append("Matching".ljust(12) + "".join(f"{v:.3f}".rjust(width) for v in self.matching))
        lines.append("Polarity".ljust(12) + "".join(p.rjust(width) for p in self.polarity))
        tail = f"predicted {self.predicted:.3f}"
        if self.actual is not None:
            tail += f", actual {self.actual:g}"
        lines.append(tail)
        return "\n".join(lines)


def _sign(x: float) -> str:
    if abs(x) < POLARITY_ZERO:
        return "0"
    return "+" if x > 0 else "-"


def explain_pair(model: AlfmModel, posterior: AtmPosterior, u: int, i: int,
                 actual: float | None = None) -> PairExplanation:
    rho = aspect_importance(posterior, u, i)
    s = aspect_match(posterior, u, i)
    F = np.array([np.dot(model.W[:, a] * model.P[u], model.W[:, a] * model.Q[i]) for a in range(model.A)])
    biases = model.b_u[u] + model.b_i[i] + model.b0
    total = 0.0
    for a in range(model.A):
        total += rho[a] * (s[a] * F[a])
    return PairExplanation(int(u), int(i), rho, s, F, [_sign(x) for x in F],
                           float(total + biases), float(biases), actual)


def _label(labels: dict[int, str] | None, a: int) -> str:
    if labels and a in labels:
        return labels[a]
    return f"aspect{a}"


def load_label_map(path: str | Path) -> dict[int, str]:
    """``index=label`` per line; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'index=label'")
        key, value = line.split("=", 1)
        try:
            out[int(key.strip())] = value.strip()
        except ValueError:
            raise ConfigError(f"{path}:{n}: aspect index {key.strip()!r} is not an integer") from None
    return out


def explanations_json(explanations: Sequence[PairExplanation]) -> str:
    return "\n".join(json.dumps(e.to_record()) for e in explanations)
