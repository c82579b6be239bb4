"""Aspect-aware latent factor model and the biased MF baseline.

Prediction for a (user, item) pair::

    r_hat = sum_a rho[a] * s[a] * (w_a * p_u) . (w_a * q_i) + b_u + b_i + b_0

``rho`` (aspect importance) and ``s`` (aspect match) come from a fitted
topic-model posterior and stay fixed while the factors are trained by SGD.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .arrays import arrays_hash, read_array, write_array
from .atm import AtmPosterior
from .corpus import ProcessedCorpus, ProcessedReview, RatingSet
from .errors import ConfigError, ContractError, DataError, TrainingDiverged

log = logging.getLogger(__name__)

MAGIC = b"ALFM"


# ---------------------------------------------------------------- aspect features


def _jsd_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # p / m with m = (p + q) / 2, written as 2p / (p + q): halving a subnormal sum underflows to 0
    total = p + q
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.where(p > 0, p * np.log2(2 * p / total), 0.0).sum(axis=-1)
        kl_q = np.where(q > 0, q * np.log2(2 * q / total), 0.0).sum(axis=-1)
    return np.clip(0.5 * (kl_p + kl_q), 0.0, 1.0)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs, so the result lies in [0, 1]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or p.shape != q.shape:
        raise ContractError(f"jsd needs two vectors of equal length, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or not np.all(np.isfinite(v)) or abs(v.sum() - 1.0) > 1e-6:
            raise ContractError(f"{name} is not a probability vector")
    return float(_jsd_rows(p, q))


def _check_pair(posterior: AtmPosterior, u: int, i: int):
    M, N = posterior.theta.shape[0], posterior.psi.shape[0]
    if not (0 <= u < M and 0 <= i < N):
        raise ContractError(f"pair ({u}, {i}) outside posterior dimensions ({M}, {N})")


def aspect_match(posterior: AtmPosterior, u: int, i: int) -> np.ndarray:
    """s[a] = 1 - JSD(theta[u, a], psi[i, a])."""
    _check_pair(posterior, u, i)
    return 1.0 - _jsd_rows(posterior.theta[u], posterior.psi[i])


def aspect_importance(posterior: AtmPosterior, u: int, i: int) -> np.ndarray:
    """rho[a] = pi_u * lambda_u[a] + (1 - pi_u) * lambda_i[a]."""
    _check_pair(posterior, u, i)
    pi = posterior.pi[u]
    return pi * posterior.lambda_u[u] + (1.0 - pi) * posterior.lambda_i[i]


@dataclass
class PairFeatures:
    """Aspect importance and match rows for a set of (user, item) pairs."""

    users: np.ndarray
    items: np.ndarray
    rho: np.ndarray  # (n, A)
    s: np.ndarray  # (n, A)

    def __post_init__(self):
        self._row = None

    def __len__(self):
        return len(self.users)

    def row(self, u: int, i: int) -> int:
        if self._row is None:
            self._row = {(int(a), int(b)): n for n, (a, b) in enumerate(zip(self.users, self.items))}
        try:
            return self._row[(int(u), int(i))]
        except KeyError:
            raise ContractError(f"no precomputed features for pair ({u}, {i})") from None

    def get(self, u: int, i: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.row(u, i)
        return self.rho[n], self.s[n]


def pair_features(posterior: AtmPosterior, users, items) -> PairFeatures:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    M, N = posterior.theta.shape[0], posterior.psi.shape[0]
    if len(users) and (users.min() < 0 or users.max() >= M or items.min() < 0 or items.max() >= N):
        raise ContractError("pair indices outside posterior dimensions")
    pi = posterior.pi[users][:, None]
    rho = pi * posterior.lambda_u[users] + (1.0 - pi) * posterior.lambda_i[items]
    s = 1.0 - _jsd_rows(posterior.theta[users], posterior.psi[items])
    return PairFeatures(users, items, rho, s)


def constant_features(users, items, A: int = 1) -> PairFeatures:
    """rho = 1/A and s = 1 everywhere; with A = 1 the model reduces to biased MF."""
    n = len(users)
    return PairFeatures(np.asarray(users, np.int64), np.asarray(items, np.int64),
                        np.full((n, A), 1.0 / A), np.ones((n, A)))


# ---------------------------------------------------------------- models


@dataclass
class AlfmHyperparams:
    f: int = 5
    mu_u: float = 0.1
    mu_i: float = 0.1
    mu_w: float = 0.01
    mu_b: float = 0.1
    epsilon: float = 1e-6
    learn_rate: float = 0.01
    lr_decay: float = 0.9
    max_epochs: int = 100
    patience: int = 5
    clamp_predictions: bool = False
    init_std: float = 0.1
    freeze_w: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.f < 0:
            raise ConfigError("f must be >= 0")
        if min(self.mu_u, self.mu_i, self.mu_w, self.mu_b) < 0:
            raise ConfigError("regularization coefficients must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.learn_rate < 0:
            raise ConfigError("learn_rate must be >= 0")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")


@dataclass
class AlfmModel:
    P: np.ndarray  # (M, f)
    Q: np.ndarray  # (N, f)
    W: np.ndarray  # (f, A); column a is w_a
    b_u: np.ndarray
    b_i: np.ndarray
    b0: float
    history: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def f(self) -> int:
        return self.P.shape[1]

    @property
    def A(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q, "W": self.W, "b_u": self.b_u, "b_i": self.b_i,
                "b0": np.array([self.b0])}

    def copy(self) -> AlfmModel:
        return copy.deepcopy(self)

    def content_hash(self) -> str:
        return arrays_hash(self.arrays())


@dataclass
class BmfModel:
    P: np.ndarray
    Q: np.ndarray
    b_u: np.ndarray
    b_i: np.ndarray
    b0: float
    history: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def f(self) -> int:
        return self.P.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q, "b_u": self.b_u, "b_i": self.b_i,
                "b0": np.array([self.b0])}

    def copy(self) -> BmfModel:
        return copy.deepcopy(self)

    def content_hash(self) -> str:
        return arrays_hash(self.arrays())


# ---------------------------------------------------------------- prediction


def factor_terms(model: AlfmModel, users, items) -> np.ndarray:
    """(w_a * p_u) . (w_a * q_i) for every pair and aspect, shape (n, A)."""
    pw = model.P[users][:, :, None] * model.W[None]
    qw = model.Q[items][:, :, None] * model.W[None]
    return (pw * qw).sum(axis=1)


def aspect_rating(model: AlfmModel, features: PairFeatures, u: int, i: int, a: int) -> float:
    _, s = features.get(u, i)
    wa = model.W[:, a]
    return float(s[a] * np.dot(wa * model.P[u], wa * model.Q[i]))


def predict(model: AlfmModel, features: PairFeatures, u: int, i: int, clamp: bool = False) -> float:
    """Sum of importance-weighted aspect ratings, then + b_u + b_i + b_0."""
    rho, s = features.get(u, i)
    total = 0.0
    for a in range(model.A):
        wa = model.W[:, a]
        total += rho[a] * (s[a] * np.dot(wa * model.P[u], wa * model.Q[i]))
    r = total + model.b_u[u] + model.b_i[i] + model.b0
    return float(np.clip(r, 1.0, 5.0)) if clamp else float(r)


def predict_pairs(model: AlfmModel, features: PairFeatures, clamp: bool = False) -> np.ndarray:
    u, i = features.users, features.items
    inter = (features.rho * (features.s * factor_terms(model, u, i))).sum(axis=1)
    r = inter + model.b_u[u] + model.b_i[i] + model.b0
    return np.clip(r, 1.0, 5.0) if clamp else r


def predict_bmf(model: BmfModel, u, i, clamp: bool = False):
    """b_0 + b_u + b_i + p_u . q_i; accepts scalars or index arrays."""
    u = np.asarray(u)
    i = np.asarray(i)
    r = (model.P[u] * model.Q[i]).sum(axis=-1) + model.b_u[u] + model.b_i[i] + model.b0
    r = np.clip(r, 1.0, 5.0) if clamp else r
    return float(r) if r.ndim == 0 else r


# ---------------------------------------------------------------- losses


def _smooth_l1(W, eps):
    return np.sqrt(W * W + eps).sum()


def objective(model: AlfmModel, train: RatingSet, features: PairFeatures, hyper: AlfmHyperparams) -> float:
    """Regularized squared loss minimised by SGD.

    The l2 terms are accumulated once per training rating (matching the
    per-rating SGD updates) and the smoothed l1 term on W once overall.
    """
    u, i, r = train.users, train.items, train.ratings
    err = predict_pairs(model, features) - r
    loss = 0.5 * float(err @ err)
    loss += 0.5 * hyper.mu_u * float((model.P[u] ** 2).sum())
    loss += 0.5 * hyper.mu_i * float((model.Q[i] ** 2).sum())
    loss += 0.5 * hyper.mu_b * float((model.b_u[u] ** 2).sum() + (model.b_i[i] ** 2).sum())
    loss += hyper.mu_w * _smooth_l1(model.W, hyper.epsilon)
    return loss


def objective_bmf(model: BmfModel, train: RatingSet, hyper: AlfmHyperparams) -> float:
    u, i, r = train.users, train.items, train.ratings
    err = predict_bmf(model, u, i) - r
    loss = 0.5 * float(err @ err)
    loss += 0.5 * hyper.mu_u * float((model.P[u] ** 2).sum())
    loss += 0.5 * hyper.mu_i * float((model.Q[i] ** 2).sum())
    loss += 0.5 * hyper.mu_b * float((model.b_u[u] ** 2).sum() + (model.b_i[i] ** 2).sum())
    return loss


def rating_loss(p, q, W, bu, bi, b0, rho, s, r, hyper: AlfmHyperparams, n_train: int) -> float:
    """Loss localized on one rating; the l1 term carries weight 1/n_train."""
    pred = b0 + bu + bi
    for a in range(W.shape[1]):
        wa = W[:, a]
        pred += rho[a] * (s[a] * np.dot(wa * p, wa * q))
    e = pred - r
    return (0.5 * e * e + 0.5 * hyper.mu_u * p @ p + 0.5 * hyper.mu_i * q @ q
            + 0.5 * hyper.mu_b * (bu * bu + bi * bi)
            + hyper.mu_w / n_train * _smooth_l1(W, hyper.epsilon))


def rating_gradients(p, q, W, bu, bi, b0, rho, s, r, hyper: AlfmHyperparams, n_train: int) -> dict:
    """Analytic gradient of ``rating_loss`` (the same formulas the SGD kernel applies)."""
    F = ((W * p[:, None]) * (W * q[:, None])).sum(axis=0)
    e = (rho * (s * F)).sum() + bu + bi + b0 - r
    c = (W * W) @ (rho * s)
    return {
        "p": e * c * q + hyper.mu_u * p,
        "q": e * c * p + hyper.mu_i * q,
        "W": 2.0 * e * (rho * s)[None, :] * W * (p * q)[:, None]
        + hyper.mu_w / n_train * W / np.sqrt(W * W + hyper.epsilon),
        "b_u": e + hyper.mu_b * bu,
        "b_i": e + hyper.mu_b * bi,
    }


# ---------------------------------------------------------------- SGD kernels


@njit(cache=True)
def _alfm_epoch(order, users, items, ratings, rho, s, P, Q, W, bu, bi, b0,
                lr, mu_u, mu_i, mu_w_local, mu_b, eps, update_w):
    f = P.shape[1]
    A = W.shape[1]
    gp = np.empty(f)
    gq = np.empty(f)
    c = np.empty(f)
    gW = np.empty((f, A))
    sq = 0.0
    for step in range(order.shape[0]):
        n = order[step]
        u = users[n]
        i = items[n]
        inter = 0.0
        for a in range(A):
            F = 0.0
            for k in range(f):
                F += (W[k, a] * P[u, k]) * (W[k, a] * Q[i, k])
            inter += rho[n, a] * (s[n, a] * F)
        e = inter + bu[u] + bi[i] + b0 - ratings[n]
        sq += e * e
        for k in range(f):
            acc = 0.0
            for a in range(A):
                acc += rho[n, a] * s[n, a] * (W[k, a] * W[k, a])
            c[k] = acc
        for k in range(f):
            gp[k] = e * c[k] * Q[i, k] + mu_u * P[u, k]
            gq[k] = e * c[k] * P[u, k] + mu_i * Q[i, k]
        if update_w:
            for k in range(f):
                pq = P[u, k] * Q[i, k]
                for a in range(A):
                    w = W[k, a]
                    gW[k, a] = 2.0 * e * (rho[n, a] * s[n, a]) * w * pq + mu_w_local * w / np.sqrt(w * w + eps)
        gbu = e + mu_b * bu[u]
        gbi = e + mu_b * bi[i]
        for k in range(f):
            P[u, k] -= lr * gp[k]
            Q[i, k] -= lr * gq[k]
        if update_w:
            for k in range(f):
                for a in range(A):
                    W[k, a] -= lr * gW[k, a]
        bu[u] -= lr * gbu
        bi[i] -= lr * gbi
        if not np.isfinite(e) or not np.isfinite(bu[u]) or not np.isfinite(bi[i]):
            return sq, step
    return sq, -1


@njit(cache=True)
def _bmf_epoch(order, users, items, ratings, P, Q, bu, bi, b0, lr, mu_u, mu_i, mu_b):
    f = P.shape[1]
    gp = np.empty(f)
    gq = np.empty(f)
    sq = 0.0
    for step in range(order.shape[0]):
        n = order[step]
        u = users[n]
        i = items[n]
        inter = 0.0
        for k in range(f):
            inter += P[u, k] * Q[i, k]
        e = inter + bu[u] + bi[i] + b0 - ratings[n]
        sq += e * e
        for k in range(f):
            gp[k] = e * Q[i, k] + mu_u * P[u, k]
            gq[k] = e * P[u, k] + mu_i * Q[i, k]
        gbu = e + mu_b * bu[u]
        gbi = e + mu_b * bi[i]
        for k in range(f):
            P[u, k] -= lr * gp[k]
            Q[i, k] -= lr * gq[k]
        bu[u] -= lr * gbu
        bi[i] -= lr * gbi
        if not np.isfinite(e) or not np.isfinite(bu[u]) or not np.isfinite(bi[i]):
            return sq, step
    return sq, -1


def epoch_order(n: int, seed: int, epoch_index: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch_index]).permutation(n).astype(np.int64)


def _check_finite(model, epoch_index, lr, bad_step):
    arrays = model.arrays()
    if bad_step >= 0 or not all(np.all(np.isfinite(v)) for v in arrays.values()):
        raise TrainingDiverged(
            f"non-finite parameters in epoch {epoch_index} (learning rate {lr:g}, "
            f"step {bad_step}); lower learn_rate or raise regularization"
        )


def sgd_epoch(model: AlfmModel, train: RatingSet, features: PairFeatures,
              hyper: AlfmHyperparams, epoch_index: int) -> tuple[AlfmModel, float]:
    """One seeded-shuffled SGD pass; updates ``model`` in place.

    Returns the model and the mean squared training error seen during the pass.
    """
    n = len(train)
    if n == 0:
        return model, 0.0
    if len(features) != n:
        raise ContractError("features must align with the training ratings")
    lr = hyper.learn_rate * hyper.lr_decay ** epoch_index
    order = epoch_order(n, hyper.seed, epoch_index)
    sq, bad = _alfm_epoch(order, train.users, train.items, train.ratings, features.rho, features.s,
                          model.P, model.Q, model.W, model.b_u, model.b_i, float(model.b0),
                          lr, hyper.mu_u, hyper.mu_i, hyper.mu_w / n, hyper.mu_b, hyper.epsilon,
                          not hyper.freeze_w)
    _check_finite(model, epoch_index, lr, bad)
    return model, sq / n


def sgd_epoch_bmf(model: BmfModel, train: RatingSet, hyper: AlfmHyperparams,
                  epoch_index: int) -> tuple[BmfModel, float]:
    n = len(train)
    if n == 0:
        return model, 0.0
    lr = hyper.learn_rate * hyper.lr_decay ** epoch_index
    order = epoch_order(n, hyper.seed, epoch_index)
    sq, bad = _bmf_epoch(order, train.users, train.items, train.ratings, model.P, model.Q,
                         model.b_u, model.b_i, float(model.b0), lr, hyper.mu_u, hyper.mu_i, hyper.mu_b)
    _check_finite(model, epoch_index, lr, bad)
    return model, sq / n


# ---------------------------------------------------------------- training


def _init_factors(train: RatingSet, n_users: int, n_items: int, hyper: AlfmHyperparams):
    rng = np.random.default_rng(hyper.seed)
    P = rng.normal(0.0, hyper.init_std, size=(n_users, hyper.f))
    Q = rng.normal(0.0, hyper.init_std, size=(n_items, hyper.f))
    # entities without training ratings never receive updates; keep them bias-only
    P[np.bincount(train.users, minlength=n_users) == 0] = 0.0
    Q[np.bincount(train.items, minlength=n_items) == 0] = 0.0
    return P, Q, np.zeros(n_users), np.zeros(n_items), float(train.ratings.mean())


def _rmse(pred, r) -> float:
    return float(np.sqrt(np.mean((pred - r) ** 2))) if len(r) else float("nan")


def _run_epochs(model, step, score_valid, score_objective, hyper: AlfmHyperparams, label: str):
    history = [{"epoch": 0, "objective": score_objective(model), "valid_rmse": score_valid(model)}]
    best = model.copy()
    best_score = history[0]["valid_rmse"]
    stale = 0
    for epoch in range(hyper.max_epochs):
        model, mse = step(model, epoch)
        rec = {"epoch": epoch + 1, "train_mse": mse, "objective": score_objective(model),
               "valid_rmse": score_valid(model), "lr": hyper.learn_rate * hyper.lr_decay ** epoch}
        history.append(rec)
        log.debug("%s epoch %d: %s", label, epoch + 1, rec)
        score = rec["valid_rmse"]
        if np.isnan(score):
            best = model
            continue
        if score < best_score or np.isnan(best_score):
            best_score = score
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if np.isnan(best_score):
        best = model
    best.history = history
    return best


def fit_factors(train: RatingSet, valid: RatingSet | None, features_train: PairFeatures,
                features_valid: PairFeatures | None, hyper: AlfmHyperparams,
                n_users: int, n_items: int) -> AlfmModel:
    """SGD with early stopping on validation RMSE; returns the best snapshot."""
    hyper.validate()
    if len(train) == 0:
        raise DataError("empty training set")
    A = features_train.rho.shape[1]
    P, Q, bu, bi, b0 = _init_factors(train, n_users, n_items, hyper)
    model = AlfmModel(P, Q, np.ones((hyper.f, A)), bu, bi, b0)
    if valid is not None and len(valid):
        score_valid = lambda m: _rmse(predict_pairs(m, features_valid), valid.ratings)  # noqa: E731
    else:
        score_valid = lambda m: float("nan")  # noqa: E731
    best = _run_epochs(
        model,
        lambda m, e: sgd_epoch(m, train, features_train, hyper, e),
        score_valid,
        lambda m: objective(m, train, features_train, hyper),
        hyper, "ALFM",
    )
    best.meta["hyper"] = asdict(hyper)
    return best


def train(train_set: RatingSet, valid_set: RatingSet | None, posterior: AtmPosterior,
          hyper: AlfmHyperparams) -> AlfmModel:
    """Precompute aspect features from ``posterior`` and fit the factor model."""
    M, N = posterior.theta.shape[0], posterior.psi.shape[0]
    ft = pair_features(posterior, train_set.users, train_set.items)
    fv = None
    if valid_set is not None and len(valid_set):
        fv = pair_features(posterior, valid_set.users, valid_set.items)
    model = fit_factors(train_set, valid_set, ft, fv, hyper, M, N)
    model.meta["posterior_hash"] = posterior.content_hash()
    return model


def train_bmf(train_set: RatingSet, valid_set: RatingSet | None, hyper: AlfmHyperparams,
              n_users: int, n_items: int) -> BmfModel:
    """Biased MF trained by the same SGD loop, initialization and shuffles."""
    hyper.validate()
    if len(train_set) == 0:
        raise DataError("empty training set")
    P, Q, bu, bi, b0 = _init_factors(train_set, n_users, n_items, hyper)
    model = BmfModel(P, Q, bu, bi, b0)
    if valid_set is not None and len(valid_set):
        score_valid = lambda m: _rmse(predict_bmf(m, valid_set.users, valid_set.items), valid_set.ratings)  # noqa: E731
    else:
        score_valid = lambda m: float("nan")  # noqa: E731
    best = _run_epochs(
        model,
        lambda m, e: sgd_epoch_bmf(m, train_set, hyper, e),
        score_valid,
        lambda m: objective_bmf(m, train_set, hyper),
        hyper, "BMF",
    )
    best.meta["hyper"] = asdict(hyper)
    return best


# ---------------------------------------------------------------- planted data


def plant_ratings(corpus: ProcessedCorpus, truth: AtmPosterior, f: int, seed: int,
                  noise: float = 0.1, factor_std: float = 0.7, bias_std: float = 0.3,
                  b0: float = 3.0) -> tuple[ProcessedCorpus, AlfmModel]:
    """Replace the corpus ratings with draws from a random ALFM built on ``truth``.

    W is a random 0/1 association matrix in which every aspect has at least
    one factor and every factor serves at least one aspect, so the planted
    model really uses all ``f`` dimensions.
    """
    rng = np.random.default_rng(seed)
    M, N, A = corpus.n_users, corpus.n_items, truth.lambda_u.shape[1]
    W = (rng.random((f, A)) < 0.5).astype(float)
    for k in range(f):
        if not W[k].any():
            W[k, rng.integers(A)] = 1.0
    for a in range(A):
        if not W[:, a].any():
            W[rng.integers(f), a] = 1.0
    model = AlfmModel(
        rng.normal(0, factor_std, (M, f)), rng.normal(0, factor_std, (N, f)), W,
        rng.normal(0, bias_std, M), rng.normal(0, bias_std, N), b0,
    )
    users = np.array([r.user_idx for r in corpus.reviews])
    items = np.array([r.item_idx for r in corpus.reviews])
    clean = predict_pairs(model, pair_features(truth, users, items))
    ratings = clean + rng.normal(0, noise, len(clean))
    reviews = [ProcessedReview(r.user_idx, r.item_idx, float(x), r.sentences)
               for r, x in zip(corpus.reviews, ratings)]
    return ProcessedCorpus(reviews, corpus.vocab, corpus.user_ids, corpus.item_ids), model


# ---------------------------------------------------------------- persistence


def save_model(model: AlfmModel | BmfModel, directory: str | Path, meta: dict | None = None) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in model.arrays().items():
        write_array(directory / f"{name}.arr", arr, MAGIC)
    digest = model.content_hash()
    full = {
        **model.meta, **(meta or {}),
        "kind": "alfm" if isinstance(model, AlfmModel) else "bmf",
        "f": model.f, "M": model.P.shape[0], "N": model.Q.shape[0],
        "A": model.A if isinstance(model, AlfmModel) else None,
        "model_hash": digest,
        "history": model.history,
    }
    (directory / "meta.json").write_text(json.dumps(full, indent=1, default=float))
    return digest


def load_model(directory: str | Path) -> AlfmModel | BmfModel:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"model meta missing: {exc.filename}") from exc
    names = ["P", "Q", "b_u", "b_i", "b0"] + (["W"] if meta["kind"] == "alfm" else [])
    arr = {n: read_array(directory / f"{n}.arr", MAGIC) for n in names}
    history = meta.pop("history", [])
    b0 = float(arr.pop("b0")[0])
    if meta["kind"] == "alfm":
        model = AlfmModel(arr["P"], arr["Q"], arr["W"], arr["b_u"], arr["b_i"], b0, history, meta)
    else:
        model = BmfModel(arr["P"], arr["Q"], arr["b_u"], arr["b_i"], b0, history, meta)
    if model.content_hash() != meta.get("model_hash"):
        raise DataError(f"model arrays in {directory} do not match meta hash")
    return model


def save_features(features: PairFeatures, path: str | Path, posterior_hash: str, split_hash: str) -> None:
    np.savez(path, users=features.users, items=features.items, rho=features.rho, s=features.s,
             key=np.array([posterior_hash, split_hash]))


def load_features(path: str | Path, posterior_hash: str, split_hash: str) -> PairFeatures | None:
    """Cached features, or None if the file is missing or keyed to other artifacts."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as data:
        if list(data["key"]) != [posterior_hash, split_hash]:
            return None
        return PairFeatures(data["users"], data["items"], data["rho"], data["s"])
