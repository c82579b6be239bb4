import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectlfm import corpus
from aspectlfm.corpus import RawReview, TokenizerConfig
from aspectlfm.errors import ConfigError, DataError
from oracles import k_core_queue


def raw(u, i, t=None, rating=4.0, text=""):
    return RawReview(str(u), str(i), rating, text, t)


# ---------------------------------------------------------------- parsing


def test_parse_empty_stream():
    assert corpus.parse_reviews(io.BytesIO(b"")) == ([], 0)


def test_parse_rating_out_of_range_is_skipped():
    line = json.dumps({"reviewerID": "a", "asin": "b", "overall": 6, "reviewText": "x"})
    assert corpus.parse_reviews(io.BytesIO(line.encode())) == ([], 1)


def test_parse_three_lines_round_trip(data_dir):
    text = (data_dir / "good3.json").read_text("utf-8")
    with open(data_dir / "good3.json", "rb") as fh:
        reviews, skipped = corpus.parse_reviews(fh, "amazon_json")
    assert skipped == 0
    expected = [json.loads(line) for line in text.splitlines()]
    assert len(reviews) == 3
    for r, e in zip(reviews, expected):
        assert (r.user_id, r.item_id, r.rating, r.text, r.timestamp) == (
            e["reviewerID"], e["asin"], e["overall"], e["reviewText"], e["unixReviewTime"])
    assert reviews[0].text.encode("utf-8") == expected[0]["reviewText"].encode("utf-8")


def test_parse_counts_malformed(data_dir):
    with open(data_dir / "three.json", "rb") as fh:
        reviews, skipped = corpus.parse_reviews(fh, "amazon_json")
    assert [r.user_id for r in reviews] == ["A"] and skipped == 2
    with open(data_dir / "three.tsv", "rb") as fh:
        reviews, skipped = corpus.parse_reviews(fh, "tsv")
    assert [(r.user_id, r.rating, r.timestamp) for r in reviews] == [("A", 4.0, 5), ("B", 2.0, 6)]
    assert skipped == 1


def test_parse_yelp_iso_dates():
    line = json.dumps({"user_id": "u", "business_id": "b", "stars": 4, "text": "ok",
                       "date": "2016-01-02 03:04:05"})
    (r,), skipped = corpus.parse_reviews([line], "yelp_json")
    assert r.timestamp == 1451703845 and skipped == 0


def test_parse_field_map_override():
    line = json.dumps({"reviewer": "u", "asin": "b", "overall": 2})
    (r,), _ = corpus.parse_reviews([line], "amazon_json", {"user_id": "reviewer"})
    assert r.user_id == "u"
    with pytest.raises(ConfigError):
        corpus.parse_reviews([line], "amazon_json", {"nope": "x"})


def test_parse_unknown_format():
    with pytest.raises(ConfigError):
        corpus.parse_reviews([], "xml")


def test_parse_unreadable_stream():
    class Broken:
        def __iter__(self):
            raise OSError("disk gone")

    with pytest.raises(DataError):
        corpus.parse_reviews(Broken())


def test_parse_bad_utf8_counted():
    good = json.dumps({"reviewerID": "a", "asin": "b", "overall": 3}).encode()
    assert corpus.parse_reviews([b"\xff\xfe{", good])[1] == 1


# ---------------------------------------------------------------- dedupe / k-core


def test_dedupe_examples():
    a = raw("u", "i", 1)
    assert corpus.dedupe([a, a]) == [a]
    distinct = [raw("u", "i"), raw("u", "j"), raw("v", "i")]
    assert corpus.dedupe(distinct) == distinct
    early, late = raw("u", "i", 5, rating=1.0), raw("u", "i", 9, rating=5.0)
    assert corpus.dedupe([late, early]) == [late]
    assert corpus.dedupe([early, late]) == [late]


def test_dedupe_tie_last_wins():
    first, second = raw("u", "i", 5, rating=1.0), raw("u", "i", 5, rating=2.0)
    assert corpus.dedupe([first, second]) == [second]


review_lists = st.lists(
    st.tuples(st.integers(0, 5), st.integers(0, 5), st.one_of(st.none(), st.integers(0, 3))),
    max_size=40,
).map(lambda xs: [raw(u, i, t, rating=float(n % 5 + 1)) for n, (u, i, t) in enumerate(xs)])


@given(review_lists)
def test_dedupe_properties(reviews):
    once = corpus.dedupe(reviews)
    assert corpus.dedupe(once) == once
    pairs = [(r.user_id, r.item_id) for r in once]
    assert len(pairs) == len(set(pairs))
    # oracle: group by pair, keep max timestamp (None lowest), last position on ties
    best = {}
    for n, r in enumerate(reviews):
        key = (-1 if r.timestamp is None else r.timestamp, n)
        if (r.user_id, r.item_id) not in best or key >= best[(r.user_id, r.item_id)][0]:
            best[(r.user_id, r.item_id)] = (key, r)
    assert set(once) == {v[1] for v in best.values()}


def test_k_core_fixed_point_unchanged():
    reviews = [raw(u, i) for u in range(3) for i in range(3)]
    assert corpus.k_core_filter(reviews, 3) == reviews


def test_k_core_everything_peels():
    assert corpus.k_core_filter([raw("u", f"i{j}") for j in range(4)], 5) == []


def test_k_core_cascade_chain():
    # a 2-core block of users 0-2 x items 0-2, plus a chain hanging off item 0
    reviews = [raw(u, i) for u in range(3) for i in range(3)]
    reviews += [raw(3, 0), raw(3, 9), raw(4, 9), raw(4, 8), raw(5, 8)]
    got = corpus.k_core_filter(reviews, 2)
    keep = k_core_queue([(r.user_id, r.item_id) for r in reviews], 2)
    assert got == [reviews[n] for n in keep]
    assert got == reviews[:9]


def test_k_core_rejects_bad_k():
    with pytest.raises(ConfigError):
        corpus.k_core_filter([], 0)


edge_lists = st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=100)


@settings(max_examples=200)
@given(edge_lists, st.integers(1, 4))
def test_k_core_matches_peeling_oracle(edges, k):
    reviews = [raw(u, i) for u, i in edges]
    got = corpus.k_core_filter(reviews, k)
    assert got == [reviews[n] for n in k_core_queue(edges, k)]
    assert corpus.k_core_filter(got, k) == got
    users = {}
    items = {}
    for r in got:
        users[r.user_id] = users.get(r.user_id, 0) + 1
        items[r.item_id] = items.get(r.item_id, 0) + 1
    assert all(v >= k for v in users.values()) and all(v >= k for v in items.values())


# ---------------------------------------------------------------- tokenizing / vocabulary


def test_tokenize_examples():
    assert corpus.tokenize_and_segment("") == []
    cfg = TokenizerConfig(frozenset(), 2)
    assert corpus.tokenize_and_segment("Great shoes. Bad fit!", cfg) == [["great", "shoes"], ["bad", "fit"]]


def test_tokenize_golden_paragraph():
    text = "The strings sound bright and warm. I did not like the tuning pegs!\nWould buy again?"
    got = corpus.tokenize_and_segment(text, TokenizerConfig.default())
    assert got == [["strings", "sound", "bright", "warm"], ["like", "tuning", "pegs"], ["buy"]]


def test_tokenize_strips_non_letters_and_short_tokens():
    cfg = TokenizerConfig(frozenset(), 3)
    assert corpus.tokenize_and_segment("it's 100% GREAT-ish, ok", cfg) == [["its", "greatish"]]


def test_build_corpus_single_review():
    c = corpus.build_corpus([raw("u", "i", text="good good")], TokenizerConfig(), 1)
    assert c.vocab.tokens == ["good"] and c.reviews[0].sentences == ((0, 0),)


def test_build_corpus_empty_vocabulary():
    with pytest.raises(ConfigError):
        corpus.build_corpus([raw("u", "i", text="good good")], TokenizerConfig(), 3)


def test_build_corpus_frequency_oracle():
    texts = ["red blue red", "green blue", "red", "yellow. blue", "violet", "green", "", "red red",
             "orange blue", "cyan"]
    reviews = [raw(f"u{n % 3}", f"i{n % 4}", text=t) for n, t in enumerate(texts)]
    c = corpus.build_corpus(reviews, TokenizerConfig(), 2)
    counts = {}
    for t in texts:
        for w in t.replace(".", " ").split():
            counts[w] = counts.get(w, 0) + 1
    assert set(c.vocab.tokens) == {w for w, n in counts.items() if n >= 2}
    assert all(c.vocab.freqs[c.vocab.encode(w)] == counts[w] for w in c.vocab.tokens)
    assert all(c.vocab.decode(c.vocab.encode(t)) == t for t in c.vocab.tokens)
    # first-appearance ids
    assert c.user_ids == ["u0", "u1", "u2"] and c.item_ids == ["i0", "i1", "i2", "i3"]
    assert c.vocab.tokens == ["red", "blue", "green"]
    # reviews with no surviving token stay as empty rating-only reviews
    assert len(c.reviews) == len(texts)
    assert c.reviews[4].is_empty and c.reviews[6].is_empty
    V = len(c.vocab)
    assert all(w < V for r in c.reviews for s in r.sentences for w in s)
    assert all(len(s) > 0 for r in c.reviews for s in r.sentences)


# ---------------------------------------------------------------- splits


def _user_corpus(counts):
    reviews = [raw(f"u{u}", f"i{j}", text="word word") for u, n in enumerate(counts) for j in range(n)]
    return corpus.build_corpus(reviews, TokenizerConfig(), 1)


@pytest.mark.parametrize("n, sizes", [(5, (3, 1, 1)), (10, (8, 1, 1)), (6, (4, 1, 1)), (20, (16, 2, 2))])
def test_per_user_sizes(n, sizes):
    c = _user_corpus([n])
    s = corpus.split_per_user(c, seed=1)
    assert (len(s.train), len(s.valid), len(s.test)) == sizes
    assert s.train_counts.tolist() == [sizes[0]]


def test_per_user_requires_five():
    with pytest.raises(DataError):
        corpus.split_per_user(_user_corpus([5, 4]))


def test_split_ratio_validation():
    with pytest.raises(ConfigError):
        corpus.split_per_user(_user_corpus([5]), ratios=(0.5, 0.1, 0.1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(5, 25), min_size=1, max_size=6), st.integers(0, 2**31))
def test_per_user_partition(counts, seed):
    c = _user_corpus(counts)
    s = corpus.split_per_user(c, seed=seed)
    parts = [set(s.train), set(s.valid), set(s.test)]
    assert sum(map(len, parts)) == len(c.reviews) and set().union(*parts) == set(range(len(c.reviews)))
    users = np.array([r.user_idx for r in c.reviews])
    for u, n in enumerate(counts):
        tr, va, te = (int(np.sum(users[list(p)] == u)) if p else 0 for p in parts)
        assert tr + va + te == n and tr >= 3 and va >= 1 and te >= 1
    again = corpus.split_per_user(c, seed=seed)
    assert (again.train, again.valid, again.test) == (s.train, s.valid, s.test)


def test_global_split_sizes_and_determinism():
    c = _user_corpus([10])
    s = corpus.split_global(c, seed=4)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)
    t = corpus.split_global(c, seed=4)
    assert (s.train, s.valid, s.test) == (t.train, t.valid, t.test)


def test_global_split_drops_users_without_training():
    # user u9 has a single review; find a seed that lands it outside train
    c = _user_corpus([9, 1])
    lone = len(c.reviews) - 1
    for seed in range(200):
        s = corpus.split_global(c, seed=seed)
        if lone not in s.train:
            break
    assert lone in s.dropped and lone not in s.valid + s.test
    assert s.train_counts[1] == 0
    everything = set(s.train) | set(s.valid) | set(s.test) | set(s.dropped)
    assert everything == set(range(len(c.reviews)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=8), st.integers(0, 1000))
def test_global_partition(counts, seed):
    c = _user_corpus(counts)
    s = corpus.split_global(c, seed=seed)
    parts = [s.train, s.valid, s.test, s.dropped]
    assert sorted(j for p in parts for j in p) == list(range(len(c.reviews)))
    for j in s.valid + s.test:
        assert s.train_counts[c.reviews[j].user_idx] > 0
    for j in s.dropped:
        assert s.train_counts[c.reviews[j].user_idx] == 0


# ---------------------------------------------------------------- persistence


def test_corpus_round_trip(tmp_path, fixture30):
    digest = corpus.save_corpus(fixture30, tmp_path / "c")
    back = corpus.load_corpus(tmp_path / "c")
    assert back.reviews == fixture30.reviews
    assert back.vocab.tokens == fixture30.vocab.tokens
    assert back.user_ids == fixture30.user_ids and back.item_ids == fixture30.item_ids
    assert corpus.corpus_hash(back) == digest
    # saving twice gives byte-identical files
    corpus.save_corpus(back, tmp_path / "d")
    for name in ("vocab.tsv", "users.tsv", "items.tsv", "reviews.bin"):
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "d" / name).read_bytes()


def test_reviews_bin_layout(tmp_path):
    c = corpus.build_corpus([raw("u", "i", rating=4.5, text="aa bb. aa")], TokenizerConfig(), 1)
    corpus.save_corpus(c, tmp_path)
    data = (tmp_path / "reviews.bin").read_bytes()
    import struct
    assert struct.unpack_from("<IIdH", data, 0) == (0, 0, 4.5, 2)
    assert struct.unpack_from("<HII", data, 18) == (2, 0, 1)
    assert struct.unpack_from("<HI", data, 28) == (1, 0)
    assert len(data) == 34


def test_corpus_missing_files(tmp_path):
    with pytest.raises(DataError):
        corpus.load_corpus(tmp_path)


def test_split_round_trip_and_tamper(tmp_path, fixture30, fixture30_split):
    corpus.save_split(fixture30_split, tmp_path)
    back = corpus.load_split(tmp_path)
    assert (back.train, back.valid, back.test) == (fixture30_split.train, fixture30_split.valid,
                                                   fixture30_split.test)
    assert np.array_equal(back.train_counts, fixture30_split.train_counts)
    ids = (tmp_path / "test.ids").read_text().split()
    (tmp_path / "test.ids").write_text("\n".join(ids[:-1]) + "\n")
    with pytest.raises(DataError):
        corpus.load_split(tmp_path)
