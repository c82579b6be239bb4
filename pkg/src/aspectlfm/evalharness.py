"""RMSE evaluation, cold-start bucket analysis and the factor/topic grid sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from . import alfm, atm
from .corpus import CorpusSplit, ProcessedCorpus
from .errors import ContractError

log = logging.getLogger(__name__)

BUCKETS = tuple(range(1, 11))


def rmse(predictions: Iterable[tuple[float, float]] | None = None, *, pred=None, truth=None) -> float:
    """Root mean squared error over ``(r_hat, r)`` pairs, or over two aligned arrays."""
    if predictions is not None:
        pairs = np.asarray(list(predictions), dtype=float).reshape(-1, 2)
        pred, truth = pairs[:, 0], pairs[:, 1]
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.size == 0:
        raise ContractError("rmse of an empty prediction list")
    if pred.shape != truth.shape:
        raise ContractError("prediction and truth arrays differ in shape")
    d = pred - truth
    return float(np.sqrt(np.mean(d * d)))


def cold_start_buckets(model_pred, baseline_pred, truth, users, train_counts,
                       buckets: Sequence[int] = BUCKETS) -> dict[int, dict]:
    """Per training-count bucket: baseline RMSE minus model RMSE.

    Users are bucketed by their exact number of training ratings.  Buckets
    with no test pair are absent from the result.
    """
    model_pred = np.asarray(model_pred, dtype=float)
    baseline_pred = np.asarray(baseline_pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    users = np.asarray(users, dtype=np.int64)
    if not (model_pred.shape == baseline_pred.shape == truth.shape == users.shape):
        raise ContractError("model and baseline predictions must cover the same test pairs")
    counts = np.asarray(train_counts)[users]
    out = {}
    for b in buckets:
        mask = counts == b
        if not mask.any():
            continue
        r_model = rmse(pred=model_pred[mask], truth=truth[mask])
        r_base = rmse(pred=baseline_pred[mask], truth=truth[mask])
        out[int(b)] = {
            "gain": r_base - r_model,
            "rmse_model": r_model,
            "rmse_baseline": r_base,
            "n_pairs": int(mask.sum()),
            "n_users": int(np.unique(users[mask]).size),
        }
    return out


@dataclass
class EvalReport:
    rmse: float
    n_predictions: int
    baseline_rmse: float | None = None
    per_bucket: dict[int, dict] | None = None
    sweep_grid: dict[tuple[int, int], float] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"rmse": self.rmse, "n_predictions": self.n_predictions}
        if self.baseline_rmse is not None:
            out["baseline_rmse"] = self.baseline_rmse
        if self.per_bucket is not None:
            out["buckets"] = {str(b): v for b, v in sorted(self.per_bucket.items())}
        if self.sweep_grid is not None:
            out["grid"] = [{"f": f, "K": k, "rmse": v} for (f, k), v in sorted(self.sweep_grid.items())]
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        lines = [f"RMSE        {self.rmse:.4f}  ({self.n_predictions} predictions)"]
        if self.baseline_rmse is not None:
            rel = 100.0 * (self.baseline_rmse - self.rmse) / self.baseline_rmse
            lines.append(f"BMF RMSE    {self.baseline_rmse:.4f}  (relative improvement {rel:.2f}%)")
        if self.per_bucket:
            lines.append("")
            lines.append(f"{'#train':>6} {'pairs':>6} {'users':>6} {'BMF':>8} {'ALFM':>8} {'gain':>8}")
            for b in sorted(self.per_bucket):
                v = self.per_bucket[b]
                lines.append(f"{b:>6} {v['n_pairs']:>6} {v['n_users']:>6} {v['rmse_baseline']:>8.4f} "
                             f"{v['rmse_model']:>8.4f} {v['gain']:>+8.4f}")
        if self.sweep_grid:
            lines.append("")
            lines.append(grid_table(self.sweep_grid))
        return "\n".join(lines)


def grid_table(grid: dict[tuple[int, int], float]) -> str:
    fs = sorted({f for f, _ in grid})
    ks = sorted({k for _, k in grid})
    lines = ["f \\ K " + "".join(f"{k:>9}" for k in ks)]
    for f in fs:
        cells = "".join(f"{grid[(f, k)]:>9.4f}" if (f, k) in grid else f"{'-':>9}" for k in ks)
        lines.append(f"{f:>6}" + cells)
    return "\n".join(lines)


def grid_csv(grid: dict[tuple[int, int], float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["f", "K", "rmse"])
    for (f, k), v in sorted(grid.items()):
        w.writerow([f, k, repr(v)])
    return buf.getvalue()


# ---------------------------------------------------------------- pipeline helpers


def fit_topics(corpus: ProcessedCorpus, split: CorpusSplit, hyper: atm.AtmHyperparams) -> atm.AtmPosterior:
    """Fit the topic model on training-review text only."""
    train_reviews = [corpus.reviews[j] for j in split.train]
    return atm.fit(corpus, hyper, reviews=train_reviews).posterior


def evaluate_alfm(model: alfm.AlfmModel, posterior: atm.AtmPosterior, corpus: ProcessedCorpus,
                  indices: Sequence[int], clamp: bool = False) -> tuple[float, np.ndarray]:
    rs = corpus.ratings(indices)
    pred = alfm.predict_pairs(model, alfm.pair_features(posterior, rs.users, rs.items), clamp=clamp)
    return rmse(pred=pred, truth=rs.ratings), pred


def evaluate_bmf(model: alfm.BmfModel, corpus: ProcessedCorpus, indices: Sequence[int],
                 clamp: bool = False) -> tuple[float, np.ndarray]:
    rs = corpus.ratings(indices)
    pred = np.asarray(alfm.predict_bmf(model, rs.users, rs.items, clamp=clamp), dtype=float)
    return rmse(pred=pred, truth=rs.ratings), pred


def select_regularization(corpus: ProcessedCorpus, split: CorpusSplit, posterior: atm.AtmPosterior | None,
                          hyper: alfm.AlfmHyperparams, mu_grid: Sequence[float],
                          mu_w_grid: Sequence[float] = (None,)):
    """Pick ``mu_u = mu_i = mu_b`` (and ``mu_w``) with the lowest validation RMSE.

    ``posterior=None`` tunes the biased MF baseline instead of ALFM.
    Returns ``(best_hyper, best_model, {(mu, mu_w): valid_rmse})``.
    """
    tr, va = corpus.ratings(split.train), corpus.ratings(split.valid)
    scores = {}
    best = None
    for mu, mu_w in product(mu_grid, mu_w_grid):
        h = replace(hyper, mu_u=mu, mu_i=mu, mu_b=mu, mu_w=hyper.mu_w if mu_w is None else mu_w)
        if posterior is None:
            model = alfm.train_bmf(tr, va, h, corpus.n_users, corpus.n_items)
            score, _ = evaluate_bmf(model, corpus, split.valid)
        else:
            model = alfm.train(tr, va, posterior, h)
            score, _ = evaluate_alfm(model, posterior, corpus, split.valid)
        scores[(mu, h.mu_w)] = score
        log.info("mu=%g mu_w=%g valid RMSE %.4f", mu, h.mu_w, score)
        if best is None or score < best[0]:
            best = (score, h, model)
    return best[1], best[2], scores


# ---------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    grid: dict[tuple[int, int], float]
    best_cell: tuple[int, int]
    test_rmse: float
    posteriors: dict[int, atm.AtmPosterior] = field(repr=False, default_factory=dict)

    def report(self) -> EvalReport:
        return EvalReport(self.test_rmse, 0, sweep_grid=self.grid,
                          extra={"best_cell": {"f": self.best_cell[0], "K": self.best_cell[1]}})


def _cell(args):
    corpus, split, posterior, hyper = args
    tr, va = corpus.ratings(split.train), corpus.ratings(split.valid)
    model = alfm.train(tr, va, posterior, hyper)
    score, _ = evaluate_alfm(model, posterior, corpus, split.valid)
    return score, model


def sweep(corpus: ProcessedCorpus, split: CorpusSplit, f_values: Sequence[int], K_values: Sequence[int],
          atm_hyper: atm.AtmHyperparams, alfm_hyper: alfm.AlfmHyperparams, workers: int = 1,
          posteriors: dict[int, atm.AtmPosterior] | None = None) -> SweepResult:
    """Validation RMSE for every (f, K); one topic-model fit per K.

    The model of the best cell by validation RMSE is then scored on the
    test part.  Cells share seeds, so the grid does not depend on
    evaluation order or on ``workers``.
    """
    posteriors = dict(posteriors or {})
    for K in K_values:
        if K not in posteriors:
            h = atm.with_topics(atm_hyper, K)
            log.info("fitting topic model with K=%d", K)
            posteriors[K] = fit_topics(corpus, split, h)
    cells = list(product(f_values, K_values))
    jobs = [(corpus, split, posteriors[K], replace(alfm_hyper, f=f)) for f, K in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    grid = {cell: res[0] for cell, res in zip(cells, results)}
    best_cell = min(cells, key=lambda c: (grid[c], c))
    best_model = results[cells.index(best_cell)][1]
    test_rmse, _ = evaluate_alfm(best_model, posteriors[best_cell[1]], corpus, split.test) \
        if split.test else (float("nan"), None)
    return SweepResult(grid, best_cell, test_rmse, posteriors)
