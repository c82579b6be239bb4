"""Aspect-aware topic model: generative process, collapsed Gibbs sampler, estimates.

Every sentence carries one latent triple ``(y, a, z)``.  ``y = 0`` means the
sentence was written from the user's own preferences (aspect drawn from the
user's aspect distribution, topic from the user's aspect-topic
distribution); ``y = 1`` means it describes the item (item-side
distributions).  All words of a sentence share the topic ``z``.

The sampler integrates out every multinomial/Bernoulli parameter and
resamples each sentence's triple jointly from its exact conditional.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .arrays import arrays_hash, read_array, write_array
from .corpus import ProcessedCorpus, ProcessedReview, Vocabulary
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MAGIC = b"ATM1"
POSTERIOR_FIELDS = ("theta", "psi", "lambda_u", "lambda_i", "pi", "phi")


@dataclass
class AtmHyperparams:
    K: int = 5
    A: int = 5
    eta0: float = 1.0
    eta1: float = 1.0
    alpha_u: float | None = None  # None -> 50 / K
    alpha_i: float | None = None
    gamma_u: float = 1.0
    gamma_i: float = 1.0
    beta: float = 0.01
    sweeps: int = 1000
    burn_in: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.A < 1:
            raise ConfigError("K and A must be >= 1")
        if self.alpha_u is None:
            self.alpha_u = 50.0 / self.K
        if self.alpha_i is None:
            self.alpha_i = 50.0 / self.K
        self.validate()

    def validate(self):
        if self.K < 1 or self.A < 1:
            raise ConfigError("K and A must be >= 1")
        conc = (self.eta0, self.eta1, self.alpha_u, self.alpha_i, self.gamma_u, self.gamma_i, self.beta)
        if any(not c > 0 for c in conc):
            raise ConfigError("all Dirichlet/Beta concentrations must be > 0")
        if self.sweeps < 0 or not 0 <= self.burn_in < max(self.sweeps, 1):
            raise ConfigError("need 0 <= burn_in < sweeps")


def with_topics(hyper: AtmHyperparams, K: int) -> AtmHyperparams:
    """Copy of ``hyper`` with ``K`` topics; alphas left at the 50/K default follow K."""
    def rescale(alpha):
        return 50.0 / K if np.isclose(alpha, 50.0 / hyper.K) else alpha
    return replace(hyper, K=K, alpha_u=rescale(hyper.alpha_u), alpha_i=rescale(hyper.alpha_i))


@dataclass
class AtmPosterior:
    theta: np.ndarray  # (M, A, K) user aspect-topic
    psi: np.ndarray  # (N, A, K) item aspect-topic
    lambda_u: np.ndarray  # (M, A)
    lambda_i: np.ndarray  # (N, A)
    pi: np.ndarray  # (M,) P(y = 0)
    phi: np.ndarray  # (K, V)
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> dict:
        return {
            "M": self.theta.shape[0], "N": self.psi.shape[0], "A": self.theta.shape[1],
            "K": self.phi.shape[0], "V": self.phi.shape[1],
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in POSTERIOR_FIELDS}

    def content_hash(self) -> str:
        return arrays_hash(self.arrays())


class SentenceTable:
    """Flat sentence/token arrays for the numba kernels.

    ``reps[t]`` counts earlier occurrences of the same word inside the same
    sentence, which is the rising-factorial offset in the block word term.
    """

    def __init__(self, reviews: list[ProcessedReview]):
        users, items, review_of, lengths, tokens = [], [], [], [], []
        reps = []
        for j, r in enumerate(reviews):
            for sent in r.sentences:
                users.append(r.user_idx)
                items.append(r.item_idx)
                review_of.append(j)
                lengths.append(len(sent))
                seen: dict[int, int] = {}
                for w in sent:
                    reps.append(seen.get(w, 0))
                    seen[w] = seen.get(w, 0) + 1
                    tokens.append(w)
        self.user = np.asarray(users, dtype=np.int64)
        self.item = np.asarray(items, dtype=np.int64)
        self.review = np.asarray(review_of, dtype=np.int64)
        self.offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(np.asarray(lengths, dtype=np.int64), out=self.offsets[1:])
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.reps = np.asarray(reps, dtype=np.int64)

    def __len__(self):
        return len(self.user)


@dataclass
class AtmState:
    table: SentenceTable
    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    n0: np.ndarray  # (M,) user sentences with y = 0
    n1: np.ndarray  # (M,) user sentences with y = 1
    cU: np.ndarray  # (M, A)
    cI: np.ndarray  # (N, A)
    nI: np.ndarray  # (N,) item sentences with y = 1, == cI.sum(1)
    tU: np.ndarray  # (M, A, K)
    tI: np.ndarray  # (N, A, K)
    nkw: np.ndarray  # (K, V)
    nk: np.ndarray  # (K,)
    hyper: AtmHyperparams
    rng: np.random.Generator
    sweeps_done: int = 0

    @property
    def V(self) -> int:
        return self.nkw.shape[1]


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _add(s, sign, user, item, offsets, tokens, y, a, z, n0, n1, cU, cI, nI, tU, tI, nkw, nk):
    u = user[s]
    i = item[s]
    ya = y[s]
    aa = a[s]
    zz = z[s]
    if ya == 0:
        n0[u] += sign
        cU[u, aa] += sign
        tU[u, aa, zz] += sign
    else:
        n1[u] += sign
        cI[i, aa] += sign
        nI[i] += sign
        tI[i, aa, zz] += sign
    for t in range(offsets[s], offsets[s + 1]):
        nkw[zz, tokens[t]] += sign
    nk[zz] += sign * (offsets[s + 1] - offsets[s])


@njit(cache=True)
def _log_conditional(s, user, item, offsets, tokens, reps, n0, n1, cU, cI, nI, tU, tI, nkw, nk,
                     eta0, eta1, alpha_u, alpha_i, gamma_u, gamma_i, beta, out):
    """Fill ``out[y, a, z]`` with the log collapsed conditional (sentence removed)."""
    A = cU.shape[1]
    K = nk.shape[0]
    V = nkw.shape[1]
    u = user[s]
    i = item[s]
    start = offsets[s]
    length = offsets[s + 1] - start
    log_w = np.empty(K)
    for k in range(K):
        acc = 0.0
        for t in range(start, start + length):
            acc += np.log(nkw[k, tokens[t]] + beta + reps[t])
        denom = nk[k] + V * beta
        for j in range(length):
            acc -= np.log(denom + j)
        log_w[k] = acc
    log_total = np.log(n0[u] + n1[u] + eta0 + eta1)
    sw0 = np.log(n0[u] + eta0) - log_total - np.log(n0[u] + A * gamma_u)
    sw1 = np.log(n1[u] + eta1) - log_total - np.log(nI[i] + A * gamma_i)
    for aa in range(A):
        asp0 = sw0 + np.log(cU[u, aa] + gamma_u) - np.log(cU[u, aa] + K * alpha_u)
        asp1 = sw1 + np.log(cI[i, aa] + gamma_i) - np.log(cI[i, aa] + K * alpha_i)
        for k in range(K):
            out[0, aa, k] = asp0 + np.log(tU[u, aa, k] + alpha_u) + log_w[k]
            out[1, aa, k] = asp1 + np.log(tI[i, aa, k] + alpha_i) + log_w[k]


@njit(cache=True)
def _resample(order, uniforms, user, item, offsets, tokens, reps, y, a, z,
              n0, n1, cU, cI, nI, tU, tI, nkw, nk,
              eta0, eta1, alpha_u, alpha_i, gamma_u, gamma_i, beta, picks):
    A = cU.shape[1]
    K = nk.shape[0]
    buf = np.empty((2, A, K))
    for step in range(order.shape[0]):
        s = order[step]
        _add(s, -1, user, item, offsets, tokens, y, a, z, n0, n1, cU, cI, nI, tU, tI, nkw, nk)
        _log_conditional(s, user, item, offsets, tokens, reps, n0, n1, cU, cI, nI, tU, tI,
                         nkw, nk, eta0, eta1, alpha_u, alpha_i, gamma_u, gamma_i, beta, buf)
        flat = buf.ravel()
        mx = flat.max()
        total = 0.0
        for j in range(flat.shape[0]):
            flat[j] = np.exp(flat[j] - mx)
            total += flat[j]
        target = uniforms[step] * total
        acc = 0.0
        pick = flat.shape[0] - 1
        for j in range(flat.shape[0]):
            acc += flat[j]
            if acc > target:
                pick = j
                break
        picks[step] = pick
        y[s] = pick // (A * K)
        a[s] = (pick // K) % A
        z[s] = pick % K
        _add(s, 1, user, item, offsets, tokens, y, a, z, n0, n1, cU, cI, nI, tU, tI, nkw, nk)


def _count_args(state: AtmState):
    t = state.table
    return (t.user, t.item, t.offsets, t.tokens)


def _hyper_args(h: AtmHyperparams):
    return (h.eta0, h.eta1, h.alpha_u, h.alpha_i, h.gamma_u, h.gamma_i, h.beta)


def _tables(state: AtmState):
    return (state.n0, state.n1, state.cU, state.cI, state.nI, state.tU, state.tI, state.nkw, state.nk)


# ---------------------------------------------------------------- public API


def init_state(corpus: ProcessedCorpus, hyper: AtmHyperparams,
               reviews: list[ProcessedReview] | None = None) -> AtmState:
    """Uniformly random initial triples with consistent count tables.

    ``reviews`` restricts the sampler to a subset (e.g. training reviews)
    while keeping the corpus-wide user, item and vocabulary dimensions.
    """
    hyper.validate()
    table = SentenceTable(corpus.reviews if reviews is None else reviews)
    M, N, V = corpus.n_users, corpus.n_items, len(corpus.vocab)
    A, K = hyper.A, hyper.K
    if len(table.tokens) and table.tokens.max() >= V:
        raise DataError("token id outside the vocabulary")
    rng = np.random.default_rng(hyper.seed)
    S = len(table)
    y = rng.integers(0, 2, size=S).astype(np.int64)
    a = rng.integers(0, A, size=S).astype(np.int64)
    z = rng.integers(0, K, size=S).astype(np.int64)
    state = AtmState(
        table, y, a, z,
        np.zeros(M, np.int64), np.zeros(M, np.int64),
        np.zeros((M, A), np.int64), np.zeros((N, A), np.int64), np.zeros(N, np.int64),
        np.zeros((M, A, K), np.int64), np.zeros((N, A, K), np.int64),
        np.zeros((K, V), np.int64), np.zeros(K, np.int64),
        hyper, rng,
    )
    for s in range(S):
        _add(s, 1, *_count_args(state), y, a, z, *_tables(state))
    return state


def recount(state: AtmState) -> dict[str, np.ndarray]:
    """Count tables rebuilt from scratch out of the assignments."""
    t = state.table
    M, A = state.cU.shape
    N = state.cI.shape[0]
    K, V = state.nkw.shape
    side0 = state.y == 0
    side1 = ~side0
    out = {
        "n0": np.bincount(t.user[side0], minlength=M),
        "n1": np.bincount(t.user[side1], minlength=M),
        "cU": np.zeros((M, A), np.int64),
        "cI": np.zeros((N, A), np.int64),
        "tU": np.zeros((M, A, K), np.int64),
        "tI": np.zeros((N, A, K), np.int64),
        "nkw": np.zeros((K, V), np.int64),
    }
    np.add.at(out["cU"], (t.user[side0], state.a[side0]), 1)
    np.add.at(out["cI"], (t.item[side1], state.a[side1]), 1)
    np.add.at(out["tU"], (t.user[side0], state.a[side0], state.z[side0]), 1)
    np.add.at(out["tI"], (t.item[side1], state.a[side1], state.z[side1]), 1)
    lengths = np.diff(t.offsets)
    np.add.at(out["nkw"], (np.repeat(state.z, lengths), t.tokens), 1)
    out["nk"] = out["nkw"].sum(axis=1)
    out["nI"] = out["cI"].sum(axis=1)
    return out


def verify_counts(state: AtmState, corpus: ProcessedCorpus | None = None) -> bool:
    """True iff every stored count table equals a recount of the assignments."""
    fresh = recount(state)
    return all(np.array_equal(getattr(state, name), arr) for name, arr in fresh.items())


def remove_sentence(state: AtmState, s: int) -> None:
    _add(s, -1, *_count_args(state), state.y, state.a, state.z, *_tables(state))


def add_sentence(state: AtmState, s: int) -> None:
    _add(s, 1, *_count_args(state), state.y, state.a, state.z, *_tables(state))


def sentence_conditional(state: AtmState, corpus: ProcessedCorpus | None, s: int) -> np.ndarray:
    """Unnormalized conditional over ``(y, a, z)`` for sentence ``s``, shape (2, A, K).

    The sentence's own assignment must already be removed from the counts
    (see ``remove_sentence``).  Values are scaled so the largest is 1.
    """
    out = np.empty((2, state.hyper.A, state.hyper.K))
    t = state.table
    _log_conditional(s, t.user, t.item, t.offsets, t.tokens, t.reps, *_tables(state),
                     *_hyper_args(state.hyper), out)
    return np.exp(out - out.max())


def log_sentence_conditional(state: AtmState, s: int) -> np.ndarray:
    out = np.empty((2, state.hyper.A, state.hyper.K))
    t = state.table
    _log_conditional(s, t.user, t.item, t.offsets, t.tokens, t.reps, *_tables(state),
                     *_hyper_args(state.hyper), out)
    return out


def resample_sentences(state: AtmState, order: np.ndarray) -> np.ndarray:
    """Resample the sentences listed in ``order`` in sequence (repeats allowed).

    Returns the flat index ``(y * A + a) * K + z`` drawn at each step.
    """
    order = np.ascontiguousarray(order, dtype=np.int64)
    uniforms = state.rng.random(len(order))
    picks = np.empty(len(order), dtype=np.int64)
    t = state.table
    _resample(order, uniforms, t.user, t.item, t.offsets, t.tokens, t.reps,
              state.y, state.a, state.z, *_tables(state), *_hyper_args(state.hyper), picks)
    return picks


def gibbs_sweep(state: AtmState, corpus: ProcessedCorpus | None = None) -> AtmState:
    """Resample every sentence once, in table order."""
    if len(state.table):
        resample_sentences(state, np.arange(len(state.table), dtype=np.int64))
    state.sweeps_done += 1
    return state


def estimate_posterior(state: AtmState, hyper: AtmHyperparams | None = None) -> AtmPosterior:
    """Smoothed count ratios (posterior means given the current assignment)."""
    h = hyper or state.hyper
    K, A, V = h.K, h.A, state.V
    n0 = state.n0.astype(float)
    n1 = state.n1.astype(float)
    pi = (n0 + h.eta0) / (n0 + n1 + h.eta0 + h.eta1)
    lambda_u = (state.cU + h.gamma_u) / (n0 + A * h.gamma_u)[:, None]
    lambda_i = (state.cI + h.gamma_i) / (state.nI + A * h.gamma_i)[:, None]
    theta = (state.tU + h.alpha_u) / (state.cU + K * h.alpha_u)[:, :, None]
    psi = (state.tI + h.alpha_i) / (state.cI + K * h.alpha_i)[:, :, None]
    phi = (state.nkw + h.beta) / (state.nk + V * h.beta)[:, None]
    return AtmPosterior(theta, psi, lambda_u, lambda_i, pi, phi)


def log_likelihood(posterior: AtmPosterior, corpus: ProcessedCorpus,
                   reviews: list[ProcessedReview] | None = None) -> float:
    """Sum over sentences of the log marginal probability of the sentence's words."""
    table = SentenceTable(corpus.reviews if reviews is None else reviews)
    if len(table) == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        log_phi = np.log(posterior.phi)
    # per-sentence, per-topic log prod_w phi[z, w]
    word_ll = np.add.reduceat(log_phi[:, table.tokens], table.offsets[:-1], axis=1).T
    user_mix = np.einsum("ua,uak->uk", posterior.lambda_u, posterior.theta)
    item_mix = np.einsum("ia,iak->ik", posterior.lambda_i, posterior.psi)
    pi = posterior.pi[table.user][:, None]
    topic_prob = pi * user_mix[table.user] + (1.0 - pi) * item_mix[table.item]
    mx = word_ll.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        return float("-inf")
    with np.errstate(divide="ignore"):
        per_sentence = np.log((topic_prob * np.exp(word_ll - mx)).sum(axis=1)) + mx[:, 0]
    return float(per_sentence.sum())


@dataclass
class FitResult:
    posterior: AtmPosterior
    state: AtmState
    loglik: list[tuple[int, float]]


def fit(corpus: ProcessedCorpus, hyper: AtmHyperparams, reviews: list[ProcessedReview] | None = None,
        average_samples: bool = False, thin: int = 10, monitor_every: int = 0) -> FitResult:
    """Run ``hyper.sweeps`` Gibbs sweeps and estimate the posterior.

    With ``average_samples`` the estimate is the mean over every ``thin``-th
    post-burn-in sweep; otherwise the final sweep is used.
    """
    state = init_state(corpus, hyper, reviews)
    trace = []
    acc = None
    n_acc = 0
    for sweep in range(1, hyper.sweeps + 1):
        gibbs_sweep(state)
        if monitor_every and (sweep % monitor_every == 0 or sweep == hyper.sweeps):
            ll = log_likelihood(estimate_posterior(state), corpus, reviews)
            trace.append((sweep, ll))
            log.info("ATM sweep %d/%d loglik %.4f", sweep, hyper.sweeps, ll)
        if average_samples and sweep > hyper.burn_in and (sweep - hyper.burn_in) % thin == 0:
            est = estimate_posterior(state).arrays()
            if acc is None:
                acc = {k: v.copy() for k, v in est.items()}
            else:
                for k in acc:
                    acc[k] += est[k]
            n_acc += 1
    if acc is not None and n_acc:
        post = AtmPosterior(**{k: v / n_acc for k, v in acc.items()})
    else:
        post = estimate_posterior(state)
    post.meta["hyper"] = asdict(hyper)
    post.meta["averaged_samples"] = n_acc if acc is not None else 0
    return FitResult(post, state, trace)


# ---------------------------------------------------------------- synthetic data


def generate_corpus(hyper: AtmHyperparams, M: int, N: int, reviews_per_user: int,
                    sentences_per_review: int, words_per_sentence: int, V: int, seed: int,
                    pi_override: float | None = None, return_assignments: bool = False):
    """Sample a synthetic corpus by running the generative process forward.

    Each user reviews ``reviews_per_user`` distinct items chosen uniformly.
    Ratings are a placeholder 3.0; plant them separately if needed.
    Returns ``(corpus, truth)`` or ``(corpus, truth, (y, a, z))``.
    """
    if min(M, N, reviews_per_user, sentences_per_review, words_per_sentence, V) < 1:
        raise ConfigError("all sizes must be >= 1")
    if reviews_per_user > N:
        raise ConfigError("reviews_per_user cannot exceed the number of items")
    rng = np.random.default_rng(seed)
    K, A = hyper.K, hyper.A

    def dirichlet(conc, dim, size):
        # small concentrations underflow in numpy's sampler; re-normalise defensively
        x = rng.dirichlet(np.full(dim, conc), size=size)
        bad = ~np.isfinite(x).all(axis=-1) | (x.sum(axis=-1) <= 0)
        if bad.any():
            x[bad] = np.eye(dim)[rng.integers(0, dim, size=int(bad.sum()))]
        return x / x.sum(axis=-1, keepdims=True)

    phi = dirichlet(hyper.beta, V, K)
    lambda_u = dirichlet(hyper.gamma_u, A, M)
    lambda_i = dirichlet(hyper.gamma_i, A, N)
    theta = dirichlet(hyper.alpha_u, K, M * A).reshape(M, A, K)
    psi = dirichlet(hyper.alpha_i, K, N * A).reshape(N, A, K)
    if pi_override is None:
        pi = rng.beta(hyper.eta0, hyper.eta1, size=M)
    else:
        pi = np.full(M, float(pi_override))

    reviews = []
    ys, as_, zs = [], [], []
    for u in range(M):
        for i in rng.choice(N, size=reviews_per_user, replace=False):
            sents = []
            for _ in range(sentences_per_review):
                y = 0 if rng.random() < pi[u] else 1
                if y == 0:
                    a = rng.choice(A, p=lambda_u[u])
                    z = rng.choice(K, p=theta[u, a])
                else:
                    a = rng.choice(A, p=lambda_i[i])
                    z = rng.choice(K, p=psi[i, a])
                words = rng.choice(V, size=words_per_sentence, p=phi[z])
                sents.append(tuple(int(w) for w in words))
                ys.append(y)
                as_.append(int(a))
                zs.append(int(z))
            reviews.append(ProcessedReview(u, int(i), 3.0, tuple(sents)))

    vocab_freq = np.bincount(
        np.fromiter((w for r in reviews for s in r.sentences for w in s), dtype=np.int64), minlength=V
    )
    corpus = ProcessedCorpus(
        reviews, Vocabulary([f"w{j}" for j in range(V)], vocab_freq),
        [f"u{j}" for j in range(M)], [f"i{j}" for j in range(N)],
    )
    truth = AtmPosterior(theta, psi, lambda_u, lambda_i, pi, phi)
    if return_assignments:
        return corpus, truth, (np.array(ys), np.array(as_), np.array(zs))
    return corpus, truth


# ---------------------------------------------------------------- persistence


def save_posterior(posterior: AtmPosterior, directory: str | Path, meta: dict | None = None) -> str:
    """Write ``meta.json`` plus one ``<name>.arr`` per parameter; returns the content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in posterior.arrays().items():
        write_array(directory / f"{name}.arr", arr, MAGIC)
    digest = posterior.content_hash()
    full_meta = {**posterior.meta, **(meta or {}), **posterior.shape, "posterior_hash": digest}
    (directory / "meta.json").write_text(json.dumps(full_meta, indent=1, default=str))
    return digest


def load_posterior(directory: str | Path) -> AtmPosterior:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"posterior meta missing: {exc.filename}") from exc
    arrays = {name: read_array(directory / f"{name}.arr", MAGIC) for name in POSTERIOR_FIELDS}
    post = AtmPosterior(**arrays, meta=meta)
    if meta.get("posterior_hash") and post.content_hash() != meta["posterior_hash"]:
        raise DataError(
            f"posterior arrays in {directory} do not match meta hash "
            f"{meta['posterior_hash']} != {post.content_hash()}"
        )
    return post
