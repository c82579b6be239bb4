"""Command line pipeline: prepare -> train-atm -> train-alfm -> evaluate / sweep / explain / predict.

Every subcommand works inside one working directory::

    <workdir>/corpus/          processed corpus (+ split/ manifests)
    <workdir>/atm/             topic-model posterior
    <workdir>/alfm/, bmf/      factor models (+ alfm/features.npz cache)
    <workdir>/reports/         evaluation, sweep and explanation outputs

Each artifact records the hashes of the artifacts it was built from; a
mismatch aborts with exit code 2 unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import configparser
import gzip
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import alfm, atm, corpus as corpus_mod, evalharness, explain
from .errors import ConfigError, ContractError, DataError

log = logging.getLogger("aspectlfm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# section -> key -> default; the type of the default drives parsing
DEFAULTS: dict[str, dict[str, object]] = {
    "input": {"path": "", "format": "amazon_json"},
    "corpus": {"k_core": 5, "min_term_count": 5, "min_token_len": 2, "stopwords": ""},
    "split": {"mode": "per_user", "ratios": "0.8,0.1,0.1", "seed": 0},
    "atm": {},
    "alfm": {},
    "tuning": {"mu_grid": "", "mu_w_grid": ""},
    "sweep": {"f_values": "5,10,15,20,25", "K_values": "5,10,15,20,25", "workers": 1},
    "explain": {"top_n": 10, "background_threshold": 3, "labels": ""},
}
for _f in fields(atm.AtmHyperparams):
    DEFAULTS["atm"][_f.name] = _f.default
DEFAULTS["atm"]["average_samples"] = False
for _f in fields(alfm.AlfmHyperparams):
    DEFAULTS["alfm"][_f.name] = _f.default

# hyperparameters that are optional (None allowed) and otherwise floats
_OPTIONAL_FLOATS = {("atm", "alpha_u"), ("atm", "alpha_i")}


def _parse_value(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if (section, key) in _OPTIONAL_FLOATS:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings: command-line flag > config file > built-in default."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self.values = values

    @classmethod
    def load(cls, path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
        values = {s: dict(d) for s, d in DEFAULTS.items()}
        if path:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                parser.read(p, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"{p}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cls._assign(values, section, key, raw)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            cls._assign(values, section, key, raw)
        return cls(values)

    @staticmethod
    def _assign(values, section, key, raw):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        values[section][key] = _parse_value(section, key, raw)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set_seed(self, seed: int) -> None:
        for section in ("split", "atm", "alfm"):
            self.values[section]["seed"] = int(seed)

    def atm_hyper(self) -> atm.AtmHyperparams:
        kw = {k: v for k, v in self["atm"].items() if k != "average_samples"}
        try:
            return atm.AtmHyperparams(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def alfm_hyper(self) -> alfm.AlfmHyperparams:
        return alfm.AlfmHyperparams(**self["alfm"])

    def floats(self, section: str, key: str) -> list[float]:
        return [float(x) for x in _split_list(self[section][key], section, key)]

    def ints(self, section: str, key: str) -> list[int]:
        return [int(x) for x in _split_list(self[section][key], section, key)]

    def to_ini(self) -> str:
        lines = []
        for section, d in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in d.items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.resolved.ini").write_text(self.to_ini())


def _split_list(raw, section, key) -> list[str]:
    items = [x.strip() for x in str(raw).split(",") if x.strip()]
    try:
        [float(x) for x in items]
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected comma-separated numbers, got {raw!r}") from None
    return items


# ---------------------------------------------------------------- artifact I/O


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    corpus = property(lambda self: self.root / "corpus")
    split = property(lambda self: self.root / "corpus" / "split")
    atm = property(lambda self: self.root / "atm")
    alfm = property(lambda self: self.root / "alfm")
    bmf = property(lambda self: self.root / "bmf")
    reports = property(lambda self: self.root / "reports")
    features = property(lambda self: self.root / "alfm" / "features.npz")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing artifact: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def _check_hash(what: str, recorded: str | None, actual: str, force: bool) -> None:
    if recorded == actual:
        return
    msg = f"stale {what}: recorded {recorded} but found {actual}"
    if force:
        log.warning("%s (continuing because of --force)", msg)
        return
    raise DataError(msg)


def _require_dir(path: Path, hint: str) -> None:
    if not path.is_dir():
        raise DataError(f"missing artifact directory {path}; run `{hint}` first")


def load_corpus_and_split(wd: Workdir, force: bool):
    _require_dir(wd.corpus, "prepare")
    c = corpus_mod.load_corpus(wd.corpus)
    c_hash = corpus_mod.corpus_hash(c)
    manifest = _read_json(wd.corpus / "manifest.json")
    _check_hash("corpus", manifest.get("corpus_hash"), c_hash, force)
    _require_dir(wd.split, "prepare")
    split = corpus_mod.load_split(wd.split)
    split_meta = _read_json(wd.split / "split.json")
    _check_hash("split (corpus it was cut from)", split_meta.get("corpus_hash"), c_hash, force)
    return c, split, c_hash, corpus_mod.split_hash(split)


def load_posterior_checked(wd: Workdir, c_hash: str, s_hash: str, force: bool):
    _require_dir(wd.atm, "train-atm")
    post = atm.load_posterior(wd.atm)
    _check_hash("posterior (corpus)", post.meta.get("corpus_hash"), c_hash, force)
    _check_hash("posterior (split)", post.meta.get("split_hash"), s_hash, force)
    return post


def load_model_checked(directory: Path, post_hash: str | None, s_hash: str, force: bool):
    _require_dir(directory, "train-alfm")
    model = alfm.load_model(directory)
    if post_hash is not None:
        _check_hash(f"model in {directory} (posterior)", model.meta.get("posterior_hash"), post_hash, force)
    _check_hash(f"model in {directory} (split)", model.meta.get("split_hash"), s_hash, force)
    return model


def _open_input(path: Path):
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return path.open("rb")


# ---------------------------------------------------------------- subcommands


def cmd_prepare(args, cfg: RunConfig, wd: Workdir) -> int:
    path = args.input or cfg["input"]["path"]
    if not path:
        raise ConfigError("no input given (--input or [input] path)")
    path = Path(path)
    fmt = args.format or cfg["input"]["format"]
    cfg["input"]["path"], cfg["input"]["format"] = str(path), fmt
    with _open_input(path) as fh:
        raw, skipped = corpus_mod.parse_reviews(fh, fmt)
    log.info("parsed %d reviews (%d malformed lines skipped)", len(raw), skipped)
    reviews = corpus_mod.dedupe(raw)
    if cfg["corpus"]["k_core"] > 1:
        reviews = corpus_mod.k_core_filter(reviews, cfg["corpus"]["k_core"])
    if not reviews:
        raise DataError(f"no reviews left in {path} after filtering")
    sw = cfg["corpus"]["stopwords"]
    tok = corpus_mod.TokenizerConfig(corpus_mod.load_stopwords(sw or None), cfg["corpus"]["min_token_len"])
    c = corpus_mod.build_corpus(reviews, tok, cfg["corpus"]["min_term_count"])
    ratios = tuple(cfg.floats("split", "ratios"))
    mode = cfg["split"]["mode"]
    if mode == "per_user":
        split = corpus_mod.split_per_user(c, ratios, cfg["split"]["seed"])
    elif mode == "global":
        split = corpus_mod.split_global(c, ratios, cfg["split"]["seed"])
    else:
        raise ConfigError(f"[split] mode must be per_user or global, got {mode!r}")
    c_hash = corpus_mod.save_corpus(c, wd.corpus)
    summary = {
        "corpus_hash": c_hash, "n_users": c.n_users, "n_items": c.n_items,
        "n_reviews": len(c.reviews), "n_sentences": c.n_sentences, "vocab_size": len(c.vocab),
        "skipped_lines": skipped, "input": str(path),
    }
    (wd.corpus / "manifest.json").write_text(json.dumps(summary, indent=1))
    corpus_mod.save_split(split, wd.split)
    meta = _read_json(wd.split / "split.json")
    meta["corpus_hash"] = c_hash
    (wd.split / "split.json").write_text(json.dumps(meta, indent=1))
    cfg.write(wd.corpus)
    print(json.dumps({**summary, "split_hash": meta["hash"], "train": len(split.train),
                      "valid": len(split.valid), "test": len(split.test),
                      "dropped": len(split.dropped)}))
    return EXIT_OK


def cmd_train_atm(args, cfg: RunConfig, wd: Workdir) -> int:
    hyper = cfg.atm_hyper()
    c, split, c_hash, s_hash = load_corpus_and_split(wd, args.force)
    train_reviews = [c.reviews[j] for j in split.train]
    result = atm.fit(c, hyper, reviews=train_reviews, average_samples=cfg["atm"]["average_samples"])
    digest = atm.save_posterior(result.posterior, wd.atm, {"corpus_hash": c_hash, "split_hash": s_hash})
    cfg.write(wd.atm)
    print(json.dumps({"posterior_hash": digest, **result.posterior.shape}))
    return EXIT_OK


def _all_pairs(c, split) -> tuple[np.ndarray, np.ndarray]:
    rs = c.ratings(sorted(split.train + split.valid + split.test))
    pairs = np.unique(np.stack([rs.users, rs.items], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def cmd_train_alfm(args, cfg: RunConfig, wd: Workdir) -> int:
    hyper = cfg.alfm_hyper()
    mu_grid = cfg.floats("tuning", "mu_grid")
    mu_w_grid = cfg.floats("tuning", "mu_w_grid") or [None]
    c, split, c_hash, s_hash = load_corpus_and_split(wd, args.force)
    post = load_posterior_checked(wd, c_hash, s_hash, args.force)
    p_hash = post.content_hash()
    tr, va = c.ratings(split.train), c.ratings(split.valid)
    if mu_grid:
        h_alfm, model, scores = evalharness.select_regularization(c, split, post, hyper, mu_grid, mu_w_grid)
        h_bmf, baseline, bscores = evalharness.select_regularization(c, split, None, hyper, mu_grid)
        log.info("tuned ALFM mu=%g mu_w=%g; BMF mu=%g", h_alfm.mu_u, h_alfm.mu_w, h_bmf.mu_u)
    else:
        model = alfm.train(tr, va, post, hyper)
        baseline = alfm.train_bmf(tr, va, hyper, c.n_users, c.n_items)
    parents = {"posterior_hash": p_hash, "corpus_hash": c_hash, "split_hash": s_hash}
    m_hash = alfm.save_model(model, wd.alfm, parents)
    b_hash = alfm.save_model(baseline, wd.bmf, {"corpus_hash": c_hash, "split_hash": s_hash})
    users, items = _all_pairs(c, split)
    alfm.save_features(alfm.pair_features(post, users, items), wd.features, p_hash, s_hash)
    cfg.write(wd.alfm)
    cfg.write(wd.bmf)
    print(json.dumps({"alfm_hash": m_hash, "bmf_hash": b_hash,
                      "alfm_epochs": len(model.history) - 1, "bmf_epochs": len(baseline.history) - 1}))
    return EXIT_OK


def _load_all(args, wd):
    c, split, c_hash, s_hash = load_corpus_and_split(wd, args.force)
    post = load_posterior_checked(wd, c_hash, s_hash, args.force)
    model = load_model_checked(wd.alfm, post.content_hash(), s_hash, args.force)
    return c, split, post, model, s_hash


def cmd_evaluate(args, cfg: RunConfig, wd: Workdir) -> int:
    c, split, post, model, s_hash = _load_all(args, wd)
    part = getattr(split, args.part)
    if not part:
        raise DataError(f"the {args.part} part of the split is empty")
    clamp = cfg["alfm"]["clamp_predictions"]
    score, pred = evalharness.evaluate_alfm(model, post, c, part, clamp=clamp)
    report = evalharness.EvalReport(score, len(part), extra={"part": args.part, "split_mode": split.split_mode})
    if wd.bmf.is_dir():
        baseline = load_model_checked(wd.bmf, None, s_hash, args.force)
        b_score, b_pred = evalharness.evaluate_bmf(baseline, c, part, clamp=clamp)
        report.baseline_rmse = b_score
        rs = c.ratings(part)
        report.per_bucket = evalharness.cold_start_buckets(pred, b_pred, rs.ratings, rs.users, split.train_counts)
    wd.reports.mkdir(parents=True, exist_ok=True)
    (wd.reports / "eval.json").write_text(report.to_json())
    (wd.reports / "eval.txt").write_text(report.to_text() + "\n")
    cfg.write(wd.reports)
    print(report.to_text())
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, wd: Workdir) -> int:
    f_values, K_values = cfg.ints("sweep", "f_values"), cfg.ints("sweep", "K_values")
    if not f_values or not K_values:
        raise ConfigError("[sweep] f_values and K_values must be non-empty")
    atm_h, alfm_h = cfg.atm_hyper(), cfg.alfm_hyper()
    c, split, _, _ = load_corpus_and_split(wd, args.force)
    result = evalharness.sweep(c, split, f_values, K_values, atm_h, alfm_h,
                               workers=cfg["sweep"]["workers"])
    wd.reports.mkdir(parents=True, exist_ok=True)
    report = result.report()
    (wd.reports / "sweep.csv").write_text(evalharness.grid_csv(result.grid))
    (wd.reports / "sweep.json").write_text(report.to_json())
    cfg.write(wd.reports)
    print(evalharness.grid_table(result.grid))
    print(f"best (f, K) = {result.best_cell}, test RMSE {result.test_rmse:.4f}")
    return EXIT_OK


def _lookup(ids: list[str], raw: str, what: str) -> int:
    try:
        return ids.index(raw)
    except ValueError:
        raise DataError(f"unknown {what} id {raw!r}") from None


def cmd_explain(args, cfg: RunConfig, wd: Workdir) -> int:
    if args.user is None and args.item is None:
        raise ConfigError("explain needs --user and/or --item")
    labels_path = args.labels or cfg["explain"]["labels"]
    labels = explain.load_label_map(labels_path) if labels_path else None
    thr = cfg["explain"]["background_threshold"]
    thr = None if thr < 0 else thr
    n = cfg["explain"]["top_n"]
    c, split, c_hash, s_hash = load_corpus_and_split(wd, args.force)
    post = load_posterior_checked(wd, c_hash, s_hash, args.force)
    records = []
    texts = []
    if args.user is not None and args.item is not None:
        model = load_model_checked(wd.alfm, post.content_hash(), s_hash, args.force)
        u = _lookup(c.user_ids, args.user, "user")
        i = _lookup(c.item_ids, args.item, "item")
        actual = next((r.rating for r in c.reviews if r.user_idx == u and r.item_idx == i), None)
        ex = explain.explain_pair(model, post, u, i, actual)
        rec = ex.to_record()
        rec.update(user_id=args.user, item_id=args.item)
        records.append(rec)
        texts.append(ex.to_text(labels))
    else:
        kind = "user" if args.user is not None else "item"
        raw = args.user if kind == "user" else args.item
        idx = _lookup(c.user_ids if kind == "user" else c.item_ids, raw, kind)
        rep = explain.aspect_word_report(post, c.vocab, idx, n, thr, kind)
        records += rep.to_records()
        texts.append(rep.to_text(labels))
    out = "\n".join(json.dumps(r) for r in records) if args.json else "\n\n".join(texts)
    print(out)
    if args.output:
        Path(args.output).write_text(out + "\n")
        cfg.write(Path(args.output).resolve().parent)
    return EXIT_OK


def predict_lines(lines, c, post, model, cached: alfm.PairFeatures | None, clamp: bool = False) -> list[str]:
    """Append a prediction to every ``user_id<TAB>item_id`` line.

    Known pairs use cached features when available and fresh ones
    otherwise; an unknown user or item contributes only its bias (zero when
    unknown), so such rows fall back to the global mean plus known biases.
    """
    uidx = {x: n for n, x in enumerate(c.user_ids)}
    iidx = {x: n for n, x in enumerate(c.item_ids)}
    out = []
    for n, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise DataError(f"pairs line {n}: expected user_id<TAB>item_id")
        u, i = uidx.get(cols[0]), iidx.get(cols[1])
        if u is None or i is None:
            r = model.b0 + (model.b_u[u] if u is not None else 0.0) + (model.b_i[i] if i is not None else 0.0)
            r = float(np.clip(r, 1.0, 5.0)) if clamp else float(r)
        else:
            feats = None
            if cached is not None:
                try:
                    cached.row(u, i)
                    feats = cached
                except ContractError:
                    feats = None
            if feats is None:
                feats = alfm.pair_features(post, [u], [i])
            r = alfm.predict(model, feats, u, i, clamp=clamp)
        out.append(f"{cols[0]}\t{cols[1]}\t{r!r}")
    return out


def cmd_predict(args, cfg: RunConfig, wd: Workdir) -> int:
    c, split, post, model, s_hash = _load_all(args, wd)
    cached = alfm.load_features(wd.features, post.content_hash(), s_hash)
    if cached is None:
        log.info("no matching feature cache; computing features on the fly")
    pairs = Path(args.pairs)
    if not pairs.is_file():
        raise DataError(f"pairs file not found: {pairs}")
    rows = predict_lines(pairs.read_text("utf-8").splitlines(), c, post, model, cached,
                         cfg["alfm"]["clamp_predictions"])
    text = "".join(r + "\n" for r in rows)
    if args.output:
        Path(args.output).write_text(text)
        cfg.write(Path(args.output).resolve().parent)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train-atm": cmd_train_atm,
    "train-alfm": cmd_train_alfm,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "explain": cmd_explain,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value settings")
    common.add_argument("--workdir", default=".", help="artifact directory (default: current directory)")
    common.add_argument("--seed", type=int, help="seed for the split, the sampler and SGD")
    common.add_argument("--force", action="store_true", help="continue past artifact hash mismatches")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="aspectlfm", description="Aspect-aware rating prediction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="parse, filter and split a review dump")
    p.add_argument("--input", help="review file (.json, .tsv, optionally .gz)")
    p.add_argument("--format", choices=sorted(corpus_mod.FIELD_MAPS))
    sub.add_parser("train-atm", parents=[common], help="fit the topic model on training reviews")
    sub.add_parser("train-alfm", parents=[common], help="fit the factor model and the MF baseline")
    p = sub.add_parser("evaluate", parents=[common], help="RMSE and cold-start report")
    p.add_argument("--part", choices=("train", "valid", "test"), default="test")
    sub.add_parser("sweep", parents=[common], help="validation RMSE over the (f, K) grid")
    p = sub.add_parser("explain", parents=[common], help="aspect top words or a pair explanation")
    p.add_argument("--user")
    p.add_argument("--item")
    p.add_argument("--labels", help="aspect label map (index=label per line)")
    p.add_argument("--json", action="store_true", help="emit JSON records instead of a table")
    p.add_argument("--output")
    p = sub.add_parser("predict", parents=[common], help="predict ratings for user/item pairs")
    p.add_argument("--pairs", required=True, help="file of user_id<TAB>item_id lines")
    p.add_argument("--output", help="output file (default: standard output)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        force=True)
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.seed is not None:
            cfg.set_seed(args.seed)
        return COMMANDS[args.command](args, cfg, Workdir(args.workdir))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
