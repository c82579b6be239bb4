"""Small builders shared by several test modules."""
import numpy as np

from aspectlfm.corpus import ProcessedCorpus, ProcessedReview, Vocabulary


def make_corpus(reviews, V, M=None, N=None):
    """``reviews``: list of (user, item, rating, [sentence token lists])."""
    M = M if M is not None else max(r[0] for r in reviews) + 1
    N = N if N is not None else max(r[1] for r in reviews) + 1
    out = [ProcessedReview(u, i, float(r), tuple(tuple(s) for s in sents)) for u, i, r, sents in reviews]
    freqs = np.zeros(V, dtype=np.int64)
    for r in out:
        for s in r.sentences:
            for w in s:
                freqs[w] += 1
    return ProcessedCorpus(out, Vocabulary([f"t{j}" for j in range(V)], freqs),
                           [f"u{j}" for j in range(M)], [f"i{j}" for j in range(N)])


def sentence_list(corpus):
    return [(r.user_idx, r.item_idx, list(s)) for r in corpus.reviews for s in r.sentences]


def random_posterior(rng, M, N, A, K, V):
    from aspectlfm.atm import AtmPosterior

    def simplex(*shape):
        x = rng.gamma(0.7, size=shape) + 1e-3
        return x / x.sum(axis=-1, keepdims=True)

    return AtmPosterior(simplex(M, A, K), simplex(N, A, K), simplex(M, A), simplex(N, A),
                        rng.uniform(0.05, 0.95, M), simplex(K, V))


def planted_sweep_setup(f_true, K_true, V=200, seed=5):
    """Synthetic corpus whose ratings come from an ALFM with ``f_true`` factors
    on the generating topic model with ``K_true`` topics, plus the fixed
    hyperparameters every sweep cell uses."""
    from aspectlfm import alfm, atm, corpus

    gen = atm.AtmHyperparams(K=K_true, A=2, alpha_u=0.5, alpha_i=0.5, beta=0.1, sweeps=10, burn_in=5)
    c, truth = atm.generate_corpus(gen, 60, 60, 30, 3, 6, V, seed=seed)
    c, _ = alfm.plant_ratings(c, truth, f=f_true, seed=seed + 2, noise=0.1)
    split = corpus.split_per_user(c, seed=0)
    fit_h = atm.AtmHyperparams(K=K_true, A=2, alpha_u=0.5, alpha_i=0.5, beta=0.1, sweeps=200, burn_in=150)
    # constant step size and long patience: SGD plateaus otherwise stop the
    # larger cells early and make the grid depend on the order seed
    sgd_h = alfm.AlfmHyperparams(f=f_true, mu_u=0.01, mu_i=0.01, mu_b=0.01, mu_w=0.0, learn_rate=0.05,
                                 lr_decay=1.0, max_epochs=800, patience=150)
    return c, split, fit_h, sgd_h
