"""Review ingestion, cleaning, tokenization and train/validation/test splits.

Pipeline order is ``parse_reviews -> dedupe -> k_core_filter -> build_corpus``
followed by one of the split functions.  Everything here is a pure function
of its inputs (plus an explicit seed where randomness is involved).
"""
from __future__ import annotations

import ast
import hashlib
import io
import json
import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "RawReview",
    "ProcessedReview",
    "Vocabulary",
    "ProcessedCorpus",
    "CorpusSplit",
    "RatingSet",
    "TokenizerConfig",
    "FIELD_MAPS",
    "parse_reviews",
    "dedupe",
    "k_core_filter",
    "tokenize_and_segment",
    "build_corpus",
    "split_per_user",
    "split_global",
    "save_corpus",
    "load_corpus",
    "save_split",
    "load_split",
]

RATING_MIN, RATING_MAX = 1.0, 5.0

# canonical field -> key in the input record
FIELD_MAPS = {
    "amazon_json": {
        "user_id": "reviewerID",
        "item_id": "asin",
        "rating": "overall",
        "text": "reviewText",
        "timestamp": "unixReviewTime",
    },
    "yelp_json": {
        "user_id": "user_id",
        "item_id": "business_id",
        "rating": "stars",
        "text": "text",
        "timestamp": "date",
    },
    "json": {
        "user_id": "user_id",
        "item_id": "item_id",
        "rating": "rating",
        "text": "text",
        "timestamp": "timestamp",
    },
    # column order for TSV input
    "tsv": {
        "user_id": 0,
        "item_id": 1,
        "rating": 2,
        "text": 3,
        "timestamp": 4,
    },
}


@dataclass(frozen=True)
class RawReview:
    user_id: str
    item_id: str
    rating: float
    text: str
    timestamp: int | None = None


@dataclass(frozen=True)
class ProcessedReview:
    user_idx: int
    item_idx: int
    rating: float
    sentences: tuple[tuple[int, ...], ...]

    @property
    def is_empty(self) -> bool:
        """True when no in-vocabulary token survived; the rating is still usable."""
        return len(self.sentences) == 0


class Vocabulary:
    """Bijective token <-> id map with corpus frequencies."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int]):
        if len(tokens) != len(freqs):
            raise ValueError("tokens and freqs must have equal length")
        self.tokens = list(tokens)
        self.freqs = np.asarray(freqs, dtype=np.int64)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, token: str) -> int:
        return self.index[token]

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]


class RatingSet(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __len__(self):
        return len(self.ratings)


@dataclass
class ProcessedCorpus:
    reviews: list[ProcessedReview]
    vocab: Vocabulary
    user_ids: list[str]
    item_ids: list[str]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_sentences(self) -> int:
        return sum(len(r.sentences) for r in self.reviews)

    def ratings(self, indices: Iterable[int] | None = None) -> RatingSet:
        """Rating triples for the reviews at ``indices`` (all reviews by default)."""
        if indices is None:
            revs = self.reviews
        else:
            revs = [self.reviews[j] for j in indices]
        return RatingSet(
            np.array([r.user_idx for r in revs], dtype=np.int64),
            np.array([r.item_idx for r in revs], dtype=np.int64),
            np.array([r.rating for r in revs], dtype=np.float64),
        )

    def subset(self, indices: Iterable[int]) -> ProcessedCorpus:
        """Same vocabulary and index maps, restricted to the given reviews."""
        return ProcessedCorpus(
            [self.reviews[j] for j in indices], self.vocab, self.user_ids, self.item_ids
        )


@dataclass
class CorpusSplit:
    """Review indices (into ``ProcessedCorpus.reviews``) for each part.

    ``dropped`` holds validation/test reviews removed in global mode because
    their user has no training review; train/valid/test/dropped together
    always partition the corpus.
    """

    train: tuple[int, ...]
    valid: tuple[int, ...]
    test: tuple[int, ...]
    split_mode: str
    seed: int
    train_counts: np.ndarray
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    dropped: tuple[int, ...] = field(default_factory=tuple)

    def part(self, name: str) -> tuple[int, ...]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


@dataclass(frozen=True)
class TokenizerConfig:
    stopwords: frozenset[str] = frozenset()
    min_token_len: int = 2

    @classmethod
    def default(cls) -> TokenizerConfig:
        return cls(stopwords=load_stopwords(), min_token_len=2)


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """One word per line; blank lines and ``#`` comments ignored."""
    if path is None:
        text = resources.files("aspectlfm").joinpath("data/stopwords_en.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    words = (w.strip().lower() for w in text.splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


# ---------------------------------------------------------------- parsing


def _parse_timestamp(value) -> int | None:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        raise ValueError("boolean timestamp")
    if isinstance(value, (int, float)):
        return int(value)
    value = str(value).strip()
    try:
        return int(float(value))
    except ValueError:
        pass
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _record_from_json(line: str, fmt: str, fields: dict) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        if fmt != "amazon_json":
            raise
        # older Amazon dumps are python-literal dicts rather than strict JSON
        obj = ast.literal_eval(line)
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    return {name: obj.get(key) for name, key in fields.items()}


def _record_from_tsv(line: str, fields: dict) -> dict:
    cols = line.split("\t")
    rec = {}
    for name, col in fields.items():
        rec[name] = cols[col] if col < len(cols) else None
    return rec


def parse_reviews(
    stream: IO[bytes] | Iterable[bytes | str],
    format: str = "amazon_json",
    field_map: dict | None = None,
) -> tuple[list[RawReview], int]:
    """Parse a line-oriented review dump.

    Returns ``(reviews, n_skipped)``.  Lines that fail to decode, lack a
    user/item/rating, or carry a rating outside [1, 5] are skipped and
    counted.  Blank lines are ignored without being counted.
    """
    if format not in FIELD_MAPS:
        raise ConfigError(f"unknown input format {format!r}; expected one of {sorted(FIELD_MAPS)}")
    fields = dict(FIELD_MAPS[format])
    if field_map:
        unknown = set(field_map) - set(fields)
        if unknown:
            raise ConfigError(f"unknown fields in field map: {sorted(unknown)}")
        fields.update(field_map)

    reviews: list[RawReview] = []
    skipped = 0
    try:
        for raw in stream:
            try:
                line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
            except UnicodeDecodeError:
                skipped += 1
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                if format == "tsv":
                    rec = _record_from_tsv(line, fields)
                else:
                    rec = _record_from_json(line, format, fields)
                user = rec["user_id"]
                item = rec["item_id"]
                if user is None or item is None:
                    raise ValueError("missing id")
                user, item = str(user), str(item)
                rating = float(rec["rating"])
                if not user or not item:
                    raise ValueError("empty id")
                if not math.isfinite(rating) or not RATING_MIN <= rating <= RATING_MAX:
                    raise ValueError("rating out of range")
                text = rec.get("text") or ""
                reviews.append(
                    RawReview(user, item, rating, str(text), _parse_timestamp(rec.get("timestamp")))
                )
            except (ValueError, TypeError, KeyError, SyntaxError):
                skipped += 1
    except OSError as exc:
        raise DataError(f"cannot read review stream: {exc}") from exc
    return reviews, skipped


# ---------------------------------------------------------------- filtering


def dedupe(reviews: Sequence[RawReview]) -> list[RawReview]:
    """Keep one review per (user, item): the latest timestamp, last in input on ties.

    A missing timestamp sorts before any present one.  Survivors keep their
    relative input order.
    """
    best: dict[tuple[str, str], int] = {}
    for pos, r in enumerate(reviews):
        key = (r.user_id, r.item_id)
        prev = best.get(key)
        if prev is None:
            best[key] = pos
            continue
        t_prev = reviews[prev].timestamp
        t_new = r.timestamp
        if t_new is None and t_prev is not None:
            continue
        if t_prev is None or t_new >= t_prev:
            best[key] = pos
    return [reviews[p] for p in sorted(best.values())]


def k_core_filter(reviews: Sequence[RawReview], k: int = 5) -> list[RawReview]:
    """Peel users and items with fewer than ``k`` reviews until none remain.

    The fixed point is the maximal k-core of the user-item graph and is
    unique, so the result does not depend on peeling order.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    current = list(reviews)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


# ---------------------------------------------------------------- text

_SENTENCE_BOUNDARY = re.compile(r"[.!?\n]+")
_NON_ALPHA = re.compile(r"[^a-z]+")


def tokenize_and_segment(text: str, config: TokenizerConfig | None = None) -> list[list[str]]:
    """Split into sentences on ``. ! ?`` and newlines, then into cleaned tokens.

    Tokens are whitespace-delimited, lowercased and stripped of every
    non-letter character; stopwords and tokens shorter than
    ``min_token_len`` are dropped, as are sentences left empty.
    """
    config = config or TokenizerConfig()
    sentences = []
    for chunk in _SENTENCE_BOUNDARY.split(text.lower()):
        toks = []
        for raw in chunk.split():
            tok = _NON_ALPHA.sub("", raw)
            if len(tok) < config.min_token_len or tok in config.stopwords:
                continue
            toks.append(tok)
        if toks:
            sentences.append(toks)
    return sentences


def build_corpus(
    reviews: Sequence[RawReview],
    tokenizer: TokenizerConfig | None = None,
    min_term_count: int = 5,
) -> ProcessedCorpus:
    """Tokenize, drop infrequent terms and re-encode reviews as token ids.

    User, item and token ids are assigned in order of first appearance.
    Reviews whose text has no surviving token are kept with no sentences.
    """
    if min_term_count < 1:
        raise ConfigError("min_term_count must be >= 1")
    tokenizer = tokenizer or TokenizerConfig.default()
    tokenized = [tokenize_and_segment(r.text, tokenizer) for r in reviews]

    counts: Counter[str] = Counter()
    order: dict[str, None] = {}
    for sents in tokenized:
        for sent in sents:
            counts.update(sent)
            for tok in sent:
                order.setdefault(tok, None)
    kept = [t for t in order if counts[t] >= min_term_count]
    if not kept:
        raise ConfigError(
            f"empty vocabulary: no token occurs >= {min_term_count} times "
            f"(max frequency {max(counts.values(), default=0)})"
        )
    vocab = Vocabulary(kept, [counts[t] for t in kept])

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    processed = []
    for r, sents in zip(reviews, tokenized):
        u = user_index.setdefault(r.user_id, len(user_index))
        i = item_index.setdefault(r.item_id, len(item_index))
        encoded = []
        for sent in sents:
            ids = tuple(vocab.index[t] for t in sent if t in vocab.index)
            if ids:
                encoded.append(ids)
        processed.append(ProcessedReview(u, i, float(r.rating), tuple(encoded)))
    return ProcessedCorpus(processed, vocab, list(user_index), list(item_index))


# ---------------------------------------------------------------- splits


def _check_ratios(ratios):
    if len(ratios) != 3 or any(x < 0 for x in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _per_user_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_train = max(3, _round(ratios[0] * n))
    n_valid = max(1, _round(ratios[1] * n))
    n_test = max(1, n - n_train - n_valid)
    excess = n_train + n_valid + n_test - n
    take = min(excess, n_train - 3)
    n_train -= take
    excess -= take
    n_valid -= min(excess, n_valid - 1)
    return n_train, n_valid, n_test


def split_per_user(
    corpus: ProcessedCorpus, ratios=(0.8, 0.1, 0.1), seed: int = 0
) -> CorpusSplit:
    """Shuffle each user's reviews and cut them 80/10/10.

    Sizes are rounded to the nearest integer and then forced to at least
    3 train, 1 validation and 1 test review per user.
    """
    _check_ratios(ratios)
    by_user = defaultdict(list)
    for j, r in enumerate(corpus.reviews):
        by_user[r.user_idx].append(j)
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    counts = np.zeros(corpus.n_users, dtype=np.int64)
    for u in range(corpus.n_users):
        idx = by_user.get(u, [])
        if len(idx) < 5:
            raise DataError(
                f"user {corpus.user_ids[u]!r} has {len(idx)} reviews; per-user split needs >= 5"
            )
        perm = [idx[p] for p in rng.permutation(len(idx))]
        n_tr, n_va, _ = _per_user_sizes(len(idx), ratios)
        train += perm[:n_tr]
        valid += perm[n_tr : n_tr + n_va]
        test += perm[n_tr + n_va :]
        counts[u] = n_tr
    return CorpusSplit(
        tuple(sorted(train)), tuple(sorted(valid)), tuple(sorted(test)),
        "per_user", seed, counts, tuple(ratios),
    )


def split_global(
    corpus: ProcessedCorpus, ratios=(0.8, 0.1, 0.1), seed: int = 0
) -> CorpusSplit:
    """Shuffle all reviews and cut 80/10/10 by count.

    Validation and test reviews of users left without any training review
    are moved to ``dropped``.
    """
    _check_ratios(ratios)
    n = len(corpus.reviews)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = _round(ratios[0] * n)
    n_valid = min(_round(ratios[1] * n), n - n_train)
    train = perm[:n_train]
    counts = np.zeros(corpus.n_users, dtype=np.int64)
    for j in train:
        counts[corpus.reviews[j].user_idx] += 1

    def keep(part):
        return [int(j) for j in part if counts[corpus.reviews[j].user_idx] > 0]

    rest_valid = perm[n_train : n_train + n_valid]
    rest_test = perm[n_train + n_valid :]
    valid, test = keep(rest_valid), keep(rest_test)
    dropped = sorted((set(map(int, rest_valid)) | set(map(int, rest_test))) - set(valid) - set(test))
    return CorpusSplit(
        tuple(sorted(map(int, train))), tuple(sorted(valid)), tuple(sorted(test)),
        "global", seed, counts, tuple(ratios), tuple(dropped),
    )


# ---------------------------------------------------------------- persistence
#
# reviews.bin record, little-endian:
#   user_idx u32 | item_idx u32 | rating f64 | n_sentences u16
#   then per sentence: length u16 | length x token id u32

_HEADER = struct.Struct("<IIdH")
_U16 = struct.Struct("<H")


def _reviews_bytes(reviews: Sequence[ProcessedReview]) -> bytes:
    buf = io.BytesIO()
    for r in reviews:
        if len(r.sentences) > 0xFFFF:
            raise DataError("review has more than 65535 sentences")
        buf.write(_HEADER.pack(r.user_idx, r.item_idx, r.rating, len(r.sentences)))
        for sent in r.sentences:
            if len(sent) > 0xFFFF:
                raise DataError("sentence longer than 65535 tokens")
            buf.write(_U16.pack(len(sent)))
            buf.write(np.asarray(sent, dtype="<u4").tobytes())
    return buf.getvalue()


def _reviews_from_bytes(data: bytes) -> list[ProcessedReview]:
    out = []
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        u, i, rating, n_sent = _HEADER.unpack_from(view, pos)
        pos += _HEADER.size
        sents = []
        for _ in range(n_sent):
            (length,) = _U16.unpack_from(view, pos)
            pos += _U16.size
            ids = np.frombuffer(view[pos : pos + 4 * length], dtype="<u4")
            pos += 4 * length
            sents.append(tuple(int(t) for t in ids))
        out.append(ProcessedReview(u, i, rating, tuple(sents)))
    return out


def _corpus_files(corpus: ProcessedCorpus) -> dict[str, bytes]:
    vocab = "".join(
        f"{j}\t{t}\t{int(f)}\n" for j, (t, f) in enumerate(zip(corpus.vocab.tokens, corpus.vocab.freqs))
    )
    users = "".join(f"{j}\t{u}\n" for j, u in enumerate(corpus.user_ids))
    items = "".join(f"{j}\t{i}\n" for j, i in enumerate(corpus.item_ids))
    return {
        "vocab.tsv": vocab.encode("utf-8"),
        "users.tsv": users.encode("utf-8"),
        "items.tsv": items.encode("utf-8"),
        "reviews.bin": _reviews_bytes(corpus.reviews),
    }


def corpus_hash(corpus: ProcessedCorpus) -> str:
    h = hashlib.sha256()
    for name, data in sorted(_corpus_files(corpus).items()):
        h.update(name.encode())
        h.update(hashlib.sha256(data).digest())
    return h.hexdigest()


def save_corpus(corpus: ProcessedCorpus, directory: str | Path) -> str:
    """Write the corpus directory; returns the corpus hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, data in _corpus_files(corpus).items():
        (directory / name).write_bytes(data)
    return corpus_hash(corpus)


def _read_index_tsv(path: Path) -> list[str]:
    out = []
    for n, line in enumerate(path.read_text("utf-8").splitlines()):
        idx, value = line.split("\t", 1)
        if int(idx) != n:
            raise DataError(f"{path}: non-contiguous index at line {n + 1}")
        out.append(value)
    return out


def load_corpus(directory: str | Path) -> ProcessedCorpus:
    directory = Path(directory)
    try:
        tokens, freqs = [], []
        for n, line in enumerate((directory / "vocab.tsv").read_text("utf-8").splitlines()):
            idx, tok, freq = line.split("\t")
            if int(idx) != n:
                raise DataError(f"vocab.tsv: non-contiguous id at line {n + 1}")
            tokens.append(tok)
            freqs.append(int(freq))
        users = _read_index_tsv(directory / "users.tsv")
        items = _read_index_tsv(directory / "items.tsv")
        reviews = _reviews_from_bytes((directory / "reviews.bin").read_bytes())
    except FileNotFoundError as exc:
        raise DataError(f"corpus file missing: {exc.filename}") from exc
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"corrupt corpus directory {directory}: {exc}") from exc
    return ProcessedCorpus(reviews, Vocabulary(tokens, freqs), users, items)


def split_hash(split: CorpusSplit) -> str:
    h = hashlib.sha256()
    h.update(f"{split.split_mode}:{split.seed}:{split.ratios}".encode())
    for part in (split.train, split.valid, split.test, split.dropped):
        h.update(np.asarray(part, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()


def save_split(split: CorpusSplit, directory: str | Path) -> str:
    """Write ``{train,valid,test,dropped}.ids`` manifests plus ``split.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test", "dropped"):
        ids = getattr(split, name)
        (directory / f"{name}.ids").write_text("".join(f"{j}\n" for j in ids))
    meta = {
        "split_mode": split.split_mode,
        "seed": split.seed,
        "ratios": list(split.ratios),
        "train_counts": split.train_counts.tolist(),
        "hash": split_hash(split),
    }
    (directory / "split.json").write_text(json.dumps(meta, indent=1))
    return meta["hash"]


def load_split(directory: str | Path) -> CorpusSplit:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "split.json").read_text())
        parts = {}
        for name in ("train", "valid", "test", "dropped"):
            text = (directory / f"{name}.ids").read_text()
            parts[name] = tuple(int(x) for x in text.split())
    except FileNotFoundError as exc:
        raise DataError(f"split manifest missing: {exc.filename}") from exc
    split = CorpusSplit(
        parts["train"], parts["valid"], parts["test"], meta["split_mode"], int(meta["seed"]),
        np.asarray(meta["train_counts"], dtype=np.int64), tuple(meta["ratios"]), parts["dropped"],
    )
    if split_hash(split) != meta.get("hash"):
        raise DataError(f"split manifests in {directory} do not match the recorded hash")
    return split
