"""Command-line driver.

Subcommands compose through files only::

    qafusion synth     --spec spec.json --out-dir data/
    qafusion build-ref --scores corpus/good.jsonl --feature good --out good.cb.json
    qafusion fuse      --scores data/*.jsonl --codebooks *.cb.json --out run.tsv
    qafusion train     --scores data/*.jsonl --qrels data/qrels.txt --out model.bin
    qafusion eval      --ranking run.tsv --qrels data/qrels.txt --out report.json
    qafusion compare   --scores data/*.jsonl --qrels data/qrels.txt --methods uniform,qaf ...

Every setting lives in one flat run config: built-in defaults, overridden by
an optional JSON ``--config`` file, overridden by explicit flags.  Unknown
config keys are an error.  The resolved config is written into (or next to)
every output file.

Exit codes: 0 success, 1 usage/config error, 2 bad input data, 3 internal
invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, jsonio
from .curves import ScoreTable, check_same_universe, format_float, load_score_tables, rank_rows, write_score_table
from .errors import ConfigError, DataError, InvariantError
from .metrics import (
    evaluate_rankings,
    evaluate_scores,
    grid_search_stack,
    load_qrels,
    rank_aggregation_batch,
    write_qrels,
)
from .qaf import QafConfig, fuse_batch, qaf_weights
from .reference import MatchConfig, build_codebook, load_codebook, save_codebook
from .sqaf import SqafModel, TrainConfig, make_samples, sqaf_weights, train
from .synth import SynthSpec, generate

METHODS = ("single", "uniform", "qaf", "sqaf", "rank-aggregation", "grid-search")

DEFAULTS = {
    # fusion
    "rule": "product",
    "epsilon_area": 1e-6,
    "epsilon_score": 1e-6,
    "curve_len": 1000,
    "reference": True,
    # reference matching
    "u": 1,
    "v": 400,
    "k": 5,
    "method": "knn_average",
    # codebook construction
    "feature": None,
    "q": 1000,
    "len": 1000,
    "seed": 0,
    "provenance": "",
    # S-QAF training
    "m": 100,
    "margin": 1.0,
    "alpha": 2.0,
    "learning_rate": 0.01,
    "epochs": 50,
    "batch_size": 16,
    "channels": 16,
    "kernel": 5,
    "pool": "max",
    # evaluation
    "qrels_mode": "pairs",
    "methods": ["single", "uniform", "qaf"],
    "metric": "map",
    "grid_step": 0.1,
    # files
    "spec": None,
    "scores": [],
    "codebooks": [],
    "qrels": None,
    "model": None,
    "ranking": None,
    "out": None,
    "out_dir": None,
}

LIST_KEYS = {"scores", "codebooks", "methods"}


# --------------------------------------------------------------------------
# config layering
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _check_keys(doc: dict, where: str) -> None:
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{where}: unknown config key(s) {unknown}")


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in LIST_KEYS:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} must be a list")
        return [str(v) for v in value]
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: bad value {value!r}") from None
    return str(value)


def resolve_config(config_path: str | None, flags: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = {k: (list(v) if isinstance(v, list) else v) for k, v in DEFAULTS.items()}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: expected a JSON object")
        _check_keys(doc, config_path)
        for k, v in doc.items():
            cfg[k] = _coerce(k, v)
    _check_keys(flags, "command line")
    for k, v in flags.items():
        cfg[k] = _coerce(k, v)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg[k] in (None, []):
            raise ConfigError(f"missing required setting --{k.replace('_', '-')}")


def _qaf_config(cfg: dict) -> QafConfig:
    return QafConfig(
        match=MatchConfig(u=cfg["u"], v=cfg["v"], k=cfg["k"], method=cfg["method"]),
        rule=cfg["rule"],
        epsilon_area=cfg["epsilon_area"],
        epsilon_score=cfg["epsilon_score"],
        curve_len=cfg["curve_len"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        margin=cfg["margin"], alpha=cfg["alpha"], learning_rate=cfg["learning_rate"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        channels=cfg["channels"], kernel=cfg["kernel"], pool=cfg["pool"],
    )


def _provenance(cfg: dict, command: str) -> dict:
    return {"command": command, "version": __version__, "config": cfg}


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {path}")
    return p


def _load_tables(cfg: dict) -> list[ScoreTable]:
    _require(cfg, "scores")
    tables = list(load_score_tables([_existing(p, "score") for p in cfg["scores"]]).values())
    check_same_universe(tables)
    return tables


def _load_relevance(cfg: dict, tables: list[ScoreTable]) -> np.ndarray:
    _require(cfg, "qrels")
    qrels = load_qrels(_existing(cfg["qrels"], "qrels"), cfg["qrels_mode"])
    return qrels.relevance_matrix(tables[0].query_ids, tables[0].gallery_ids)


def _load_codebooks(cfg: dict, tables: list[ScoreTable]):
    books = {}
    for path in cfg["codebooks"]:
        cb = load_codebook(_existing(path, "codebook"))
        if cb.feature_id in books:
            raise DataError(f"two codebooks for feature {cb.feature_id!r}")
        books[cb.feature_id] = cb
    missing = [t.feature_id for t in tables if t.feature_id not in books]
    if missing:
        raise ConfigError(f"no codebook given for feature(s) {missing} (pass --codebooks or --no-reference)")
    return [books[t.feature_id] for t in tables]


def _load_model(cfg: dict, tables: list[ScoreTable]) -> SqafModel:
    model = SqafModel.load(_existing(cfg["model"], "model"))
    feats = (model.train_config or {}).get("feature_ids")
    names = [t.feature_id for t in tables]
    if feats is not None and list(feats) != names:
        raise DataError(f"model was trained on features {feats}, got {names}")
    return model


def _check_weights(weights: np.ndarray) -> None:
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvariantError("fusion weights are not finite and non-negative")
    if weights.size and np.max(np.abs(weights.sum(axis=1) - 1.0)) > 1e-9:
        raise InvariantError("fusion weights do not sum to 1")


def _weights(cfg: dict, tables: list[ScoreTable], use: str) -> np.ndarray:
    if use == "sqaf":
        weights = sqaf_weights(_load_model(cfg, tables), tables)
    else:
        cbs = _load_codebooks(cfg, tables) if cfg["reference"] else None
        weights, _ = qaf_weights(tables, cbs, _qaf_config(cfg))
    _check_weights(weights)
    return weights


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> None:
    _require(cfg, "out_dir")
    spec = SynthSpec()
    if cfg["spec"]:
        try:
            with open(_existing(cfg["spec"], "spec"), encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg['spec']}: invalid JSON ({exc})") from None
        spec = SynthSpec.from_dict(doc)
    data = generate(spec)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t in data.tables:
        path = out / f"{t.feature_id}.jsonl"
        write_score_table(t, path)
        files.append(path.name)
    write_qrels(data.qrels, out / "qrels.txt")
    manifest = _provenance(cfg, "synth")
    manifest.update(spec=spec.to_dict(), score_files=files, qrels_file="qrels.txt")
    jsonio.dump(manifest, out / "manifest.json")
    print(f"wrote {len(files)} score files and qrels to {out}", file=sys.stderr)


def cmd_build_ref(cfg: dict) -> None:
    _require(cfg, "scores", "out")
    tables = load_score_tables([_existing(p, "score") for p in cfg["scores"]])
    feat = cfg["feature"]
    if feat is None:
        if len(tables) != 1:
            raise ConfigError(f"score files hold features {list(tables)}; choose one with --feature")
        feat = next(iter(tables))
    if feat not in tables:
        raise DataError(f"feature {feat!r} not found in score files (have {list(tables)})")
    cb = build_codebook(tables[feat], cfg["q"], cfg["len"], cfg["seed"], cfg["provenance"])
    save_codebook(cb, cfg["out"], _provenance(cfg, "build-ref"))
    print(f"wrote codebook for {feat!r} ({cb.size} x {cb.curve_len}) to {cfg['out']}", file=sys.stderr)


def cmd_fuse(cfg: dict) -> None:
    _require(cfg, "out")
    tables = _load_tables(cfg)
    use = "sqaf" if cfg["model"] else "qaf"
    weights = _weights(cfg, tables, use)
    rule = "sum" if use == "sqaf" else cfg["rule"]
    fused = fuse_batch(np.stack([t.scores for t in tables]), weights, rule, cfg["epsilon_score"])
    if not np.all(np.isfinite(fused)):
        raise InvariantError("non-finite fused score")
    order = rank_rows(fused)
    qids, gids = tables[0].query_ids, tables[0].gallery_ids
    out = Path(cfg["out"])
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# query\tgallery\tscore\trank\n")
        for qi in sorted(range(len(qids)), key=qids.__getitem__):
            row = fused[qi]
            fh.writelines(f"{qids[qi]}\t{gids[g]}\t{format_float(row[g])}\t{r}\n"
                          for r, g in enumerate(order[qi].tolist(), 1))
    with open(f"{out}.weights.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query\t" + "\t".join(t.feature_id for t in tables) + "\n")
        for qi in sorted(range(len(qids)), key=qids.__getitem__):
            fh.write(qids[qi] + "\t" + "\t".join(format_float(w) for w in weights[qi].tolist()) + "\n")
    manifest = _provenance(cfg, "fuse")
    manifest.update(weights_from=use, fusion_rule=rule, features=[t.feature_id for t in tables])
    jsonio.dump(manifest, f"{out}.manifest.json")
    print(f"wrote ranking for {len(qids)} queries to {out}", file=sys.stderr)


def cmd_train(cfg: dict) -> None:
    _require(cfg, "out")
    tables = _load_tables(cfg)
    rel = _load_relevance(cfg, tables)
    samples = make_samples(tables, rel, cfg["m"])
    if len(samples) < rel.shape[0]:
        print(f"skipping {rel.shape[0] - len(samples)} queries without a true match", file=sys.stderr)
    model = train(samples, _train_config(cfg))
    model.train_config["feature_ids"] = [t.feature_id for t in tables]
    model.train_config["m"] = cfg["m"]
    model.save(cfg["out"], _provenance(cfg, "train"))
    print(f"trained on {len(samples)} queries, final loss {model.history[-1] if model.history else float('nan'):.6g}",
          file=sys.stderr)


def read_ranking(path: str | Path):
    """Parse a ranking file into (query ids, gallery ids, (Q, N) order)."""
    per_query: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                rank = int(parts[3])
                float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score or rank") from None
            per_query.setdefault(parts[0], []).append((rank, parts[1]))
    if not per_query:
        raise DataError(f"{path}: empty ranking file")
    qids = list(per_query)
    first = sorted(per_query[qids[0]])
    gids = sorted(g for _, g in first)
    gindex = {g: i for i, g in enumerate(gids)}
    order = np.empty((len(qids), len(gids)), dtype=np.int64)
    for qi, q in enumerate(qids):
        entries = sorted(per_query[q])
        if [r for r, _ in entries] != list(range(1, len(gids) + 1)) or {g for _, g in entries} != set(gids):
            raise DataError(f"{path}: query {q!r} does not rank the same gallery with ranks 1..{len(gids)}")
        order[qi] = [gindex[g] for _, g in entries]
    return qids, gids, order


def _report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "ap"])
    for q, ap in sorted(zip(report.query_ids, report.ap)):
        w.writerow([q, format_float(ap)])
    return buf.getvalue()


def cmd_eval(cfg: dict) -> None:
    _require(cfg, "ranking", "qrels", "out")
    qids, gids, order = read_ranking(_existing(cfg["ranking"], "ranking"))
    qrels = load_qrels(_existing(cfg["qrels"], "qrels"), cfg["qrels_mode"])
    rel = qrels.relevance_matrix(qids, gids)
    report = evaluate_rankings(order, rel, qids, method=Path(cfg["ranking"]).name)
    out = Path(cfg["out"])
    doc = _provenance(cfg, "eval")
    doc["report"] = report.to_dict()
    jsonio.dump(doc, out)
    csv_path = out.with_suffix(".csv") if out.suffix == ".json" else Path(f"{out}.csv")
    csv_path.write_text(_report_csv(report), encoding="utf-8", newline="\n")
    print(f"mAP {report.map:.4f}  rank-1 {report.rank1:.4f}  over {report.num_evaluated} queries", file=sys.stderr)


def cmd_compare(cfg: dict) -> None:
    _require(cfg, "out_dir", "methods")
    methods = cfg["methods"]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    # fail on missing artifacts before doing any work
    if "qaf" in methods and cfg["reference"] and not cfg["codebooks"]:
        raise ConfigError("method 'qaf' needs --codebooks (or --no-reference)")
    if "sqaf" in methods:
        _require(cfg, "model")
        _existing(cfg["model"], "model")
    for p in cfg["codebooks"] if "qaf" in methods and cfg["reference"] else []:
        _existing(p, "codebook")
    tables = _load_tables(cfg)
    rel = _load_relevance(cfg, tables)
    stack = np.stack([t.scores for t in tables])
    qids = list(tables[0].query_ids)
    k = len(tables)
    rows = []

    def add(name, report, **extra):
        d = report.to_dict()
        d.update(extra)
        rows.append(d)

    for m in methods:
        if m == "single":
            for t in tables:
                add(f"single:{t.feature_id}", evaluate_scores(t.scores, rel, qids, f"single:{t.feature_id}"))
        elif m == "uniform":
            fused = fuse_batch(stack, np.full(k, 1.0 / k), cfg["rule"], cfg["epsilon_score"])
            add("uniform", evaluate_scores(fused, rel, qids, "uniform"))
        elif m in ("qaf", "sqaf"):
            w = _weights(cfg, tables, m)
            rule = "sum" if m == "sqaf" else cfg["rule"]
            add(m, evaluate_scores(fuse_batch(stack, w, rule, cfg["epsilon_score"]), rel, qids, m))
        elif m == "rank-aggregation":
            add(m, evaluate_rankings(rank_aggregation_batch(stack), rel, qids, m))
        elif m == "grid-search":
            w, _ = grid_search_stack(stack, rel, cfg["rule"], cfg["grid_step"], cfg["metric"],
                                     cfg["epsilon_score"])
            fused = fuse_batch(stack, w, cfg["rule"], cfg["epsilon_score"])
            add(m, evaluate_scores(fused, rel, qids, m), weights=w.tolist())
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "mAP", "NS", "rank1", "num_evaluated"])
    for r in rows:
        wr.writerow([r["method"], format_float(r["mAP"]), "" if r["NS"] is None else format_float(r["NS"]),
                     format_float(r["rank1"]), r["num_evaluated"]])
    (out / "compare.csv").write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    doc = _provenance(cfg, "compare")
    doc["results"] = rows
    jsonio.dump(doc, out / "compare.json")
    sys.stderr.write(buf.getvalue())


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

S = argparse.SUPPRESS


def _add(p, key, help, type=None, **kw):
    p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=S, type=type, help=help, **kw)


def _fusion_flags(p):
    _add(p, "rule", "fusion rule: product or sum (default product)")
    _add(p, "epsilon_area", "floor on curve areas (default 1e-6)", float)
    _add(p, "epsilon_score", "floor on scores under the product rule (default 1e-6)", float)
    _add(p, "curve_len", "down-sampled curve length (default 1000)", int)
    _add(p, "u", "first rank of the matching segment, 1-based (default 1)", int)
    _add(p, "v", "last rank of the matching segment, inclusive (default 400)", int)
    _add(p, "k", "number of references averaged by knn_average (default 5)", int)
    _add(p, "method", "reference matching: nearest or knn_average (default knn_average)")
    _add(p, "codebooks", "codebook files, one per feature", nargs="+")
    p.add_argument("--no-reference", dest="reference", action="store_false", default=S,
                   help="skip reference subtraction (areas of the min-max normalized curves)")
    _add(p, "model", "S-QAF model file; replaces the unsupervised weights")


def _train_flags(p):
    _add(p, "m", "curve points fed to the network (default 100)", int)
    _add(p, "margin", "loss margin d (default 1.0)", float)
    _add(p, "alpha", "hard negatives per positive (default 2.0)", float)
    _add(p, "learning_rate", "SGD step size (default 0.01)", float)
    _add(p, "epochs", "training epochs (default 50)", int)
    _add(p, "batch_size", "mini-batch size (default 16)", int)
    _add(p, "channels", "convolution channels (default 16)", int)
    _add(p, "kernel", "convolution kernel size (default 5)", int)
    _add(p, "pool", "global pooling: max or avg (default max)")
    _add(p, "seed", "initialization and shuffling seed (default 0)", int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qafusion", description="Query-adaptive late fusion of retrieval scores.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON file of config keys (flags override it)")
        return p

    p = command("synth", "Generate a synthetic benchmark: one score file per feature plus qrels.")
    _add(p, "spec", "synthetic spec JSON (default: built-in good/medium/bad spec)")
    _add(p, "out_dir", "output directory")

    p = command("build-ref", "Build a reference codebook from an irrelevant corpus.")
    _add(p, "scores", "score files of the irrelevant corpus", nargs="+")
    _add(p, "feature", "feature id (required if the files hold several)")
    _add(p, "q", "number of reference curves Q (default 1000)", int)
    _add(p, "len", "stored curve length (default 1000)", int)
    _add(p, "seed", "row sampling seed (default 0)", int)
    _add(p, "provenance", "free-text note stored in the codebook")
    _add(p, "out", "output codebook file")

    p = command("fuse", "Fuse per-feature scores with query-adaptive weights.")
    _add(p, "scores", "score files", nargs="+")
    _fusion_flags(p)
    _add(p, "out", "output ranking file (weights and manifest go to sidecars)")

    p = command("train", "Train the S-QAF weight network.")
    _add(p, "scores", "score files", nargs="+")
    _add(p, "qrels", "ground truth file")
    _add(p, "qrels_mode", "qrels format: pairs or identity (default pairs)")
    _train_flags(p)
    _add(p, "out", "output model file")

    p = command("eval", "Evaluate a ranking file.")
    _add(p, "ranking", "ranking file written by fuse")
    _add(p, "qrels", "ground truth file")
    _add(p, "qrels_mode", "qrels format: pairs or identity (default pairs)")
    _add(p, "out", "output JSON report (per-query AP CSV is written alongside)")

    p = command("compare", "Compare fusion methods on identical inputs.")
    _add(p, "scores", "score files", nargs="+")
    _add(p, "qrels", "ground truth file")
    _add(p, "qrels_mode", "qrels format: pairs or identity (default pairs)")
    _add(p, "methods", f"comma-separated subset of {','.join(METHODS)}")
    _fusion_flags(p)
    _add(p, "metric", "grid-search objective: map, rank1 or ns (default map)")
    _add(p, "grid_step", "grid-search step (default 0.1)", float)
    _add(p, "out_dir", "directory for compare.csv and compare.json")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "build-ref": cmd_build_ref,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        cfg = resolve_config(args.pop("config", None), args)
        COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
