"""Command-line entry point: ``cwh {split,train,eval,sweep,report}``.

Every command reads one JSON config (``--config``), applies ``--set
key.path=value`` overrides, and writes its outputs plus the effective
config under the output directory.  Only ``CWH_OUTPUT_DIR`` and
``CWH_THREADS`` are read from the environment.
"""
import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (ContentBundle, build_catalog, build_popularity, ingest_content,
                   ingest_interactions)
from .encoders import AnalyzerConfig, ContentFeatures
from .errors import CWHError, ConfigError, EvaluationError
from .evaluator import (evaluate_split, popularity_regime_eval, read_results,
                        validation_mrr, write_results)
from .network import build_model, load_checkpoint, save_checkpoint
from .splitter import make_split, read_manifest, write_manifest
from .svg import line_plot
from .synth import SynthConfig, generate
from .trainer import TrainConfig, Trainer, served_cold_mask

log = logging.getLogger("cwh")

DEFAULT_CONFIG = {
    "data": {"source": "synth", "synth": {}, "interactions": None, "content": None,
             "rating_threshold": 3.5},
    "analyzers": AnalyzerConfig().to_dict(),
    "train": {f.name: f.default for f in fields(TrainConfig) if f.name != "analyzers"},
    "split": {"offsets": [0], "seed": 0, "min_items": 8, "width": 1},
    "eval": {"ks": [20], "unified_ratio": 0.9, "seed": 0, "r_values": [0, 40, 100, 200, 500],
             "sets": ["warm", "cold", "unified"]},
    "sweep": {"gammas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "folds": [0]},
    "output_dir": "runs",
}


# ---------------------------------------------------------------- config

def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and k not in ("synth", "dims"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config, assignment):
    """Set ``a.b.c=value`` in a nested config; the value is parsed as JSON if possible."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    parts = key.split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    free = parts[-2] in ("synth", "dims") if len(parts) > 1 else False
    if parts[-1] not in node and not free:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)


def load_config(path=None, overrides=(), env=None):
    env = os.environ if env is None else env
    user = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    config = _merge(DEFAULT_CONFIG, user)
    for a in overrides:
        apply_override(config, a)
    if env.get("CWH_OUTPUT_DIR"):
        config["output_dir"] = env["CWH_OUTPUT_DIR"]
    validate_config(config)
    return config


def validate_config(config):
    gammas = config["sweep"]["gammas"]
    if not gammas:
        raise ConfigError("sweep.gammas must not be empty")
    if any(not 0.0 <= float(g) <= 1.0 for g in gammas):
        raise ConfigError("sweep.gammas must lie in [0, 1]")
    if not config["split"]["offsets"]:
        raise ConfigError("split.offsets must not be empty")
    data = config["data"]
    if data["source"] not in ("synth", "files"):
        raise ConfigError("data.source must be 'synth' or 'files'")
    if data["source"] == "files":
        if not data["interactions"] or not Path(data["interactions"]).is_file():
            raise ConfigError(f"interactions file not found: {data['interactions']}")
        if config["analyzers"]["active"] and not (data["content"]
                                                  and Path(data["content"]).is_file()):
            raise ConfigError(f"content analyzers {config['analyzers']['active']} are enabled "
                              f"but the content file is missing: {data['content']}")
    analyzer_config(config)
    train_config(config)


def analyzer_config(config):
    a = config["analyzers"]
    try:
        return AnalyzerConfig(active=tuple(a["active"]), dims=dict(a["dims"]),
                              hash_dim=int(a["hash_dim"]), max_tokens=int(a["max_tokens"]),
                              tag_aggregation=a["tag_aggregation"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad analyzers section: {exc}") from None


def train_config(config, **changes):
    kw = {**config["train"], **changes}
    try:
        return TrainConfig(analyzers=analyzer_config(config), **kw)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- data

def load_dataset(config):
    """``(log, catalog)`` from synthetic generation or CSV files."""
    data = config["data"]
    if data["source"] == "synth":
        try:
            ds = generate(SynthConfig(**data["synth"]))
        except TypeError as exc:
            raise ConfigError(f"bad data.synth section: {exc}") from None
        return ds.log, ds.catalog
    threshold = data["rating_threshold"]
    log_ = ingest_interactions(data["interactions"],
                               None if threshold is None else float(threshold))
    if data["content"]:
        catalog = build_catalog(log_, ingest_content(data["content"]))
    else:
        catalog = [ContentBundle() for _ in range(log_.n_items)]
    return log_, catalog


def _out(config, *parts):
    p = Path(config["output_dir"]).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def manifest_path(config, fold):
    return Path(config["output_dir"]) / "splits" / f"fold_{fold}.csv"


def load_split(config, fold, log_):
    path = manifest_path(config, fold)
    if not path.is_file():
        raise ConfigError(f"split manifest {path} not found; run `cwh split` first")
    split = read_manifest(path, log_.user_labels, log_.item_labels)
    if split.n_users != log_.n_users or split.n_items != log_.n_items:
        raise ConfigError(f"split manifest {path} does not match the configured dataset")
    return split


def _fold(config, args):
    return int(args.fold) if args.fold is not None else int(config["split"]["offsets"][0])


# ---------------------------------------------------------------- commands

def cmd_split(config, args):
    log_, _ = load_dataset(config)
    s = config["split"]
    out = _out(config, "splits")
    written = []
    for offset in s["offsets"]:
        split = make_split(log_, offset=int(offset), seed=int(s["seed"]),
                           min_items=int(s["min_items"]), width=int(s["width"]))
        path = out / f"fold_{int(offset)}.csv"
        write_manifest(path, split)
        written.append((path, split))
    write_json(out / "effective_config.json", config)
    for p, split in written:
        print(f"{p} relabeled_pairs={split.relabeled} dropped_users={len(split.dropped_users)}")


def run_training(config, split, catalog, features=None, **changes):
    cfg = train_config(config, **changes)
    trainer = Trainer(cfg, split, catalog, features)
    params, rows = trainer.train(progress=_progress)
    return trainer, cfg, params, rows


def _progress(epoch, stats, metrics, seconds):
    log.info("epoch %d loss %.5f val unified MRR %.5f (%.1fs)", epoch, stats.loss,
             metrics["unified"], seconds)


def write_report(path, rows, k):
    cols = ["epoch", "train_loss", f"val_mrr{k}_warm", f"val_mrr{k}_cold", f"val_mrr{k}_unified"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] == "" else (r[c] if c == "epoch" else repr(float(r[c])))
                        for c in cols])


def cmd_train(config, args):
    log_, catalog = load_dataset(config)
    fold = _fold(config, args)
    split = load_split(config, fold, log_)
    trainer, cfg, params, rows = run_training(config, split, catalog)
    out = _out(config, "train", f"fold_{fold}")
    extra = {"fold": fold, "gamma": cfg.gamma, "popularity_mode": cfg.popularity_mode,
             "best_epoch": trainer.state.best_epoch}
    save_checkpoint(out / "checkpoint.npz", params, extra)
    write_report(out / "report.csv", rows, cfg.eval_k)
    write_json(out / "effective_config.json", config)
    print(out / "checkpoint.npz")


def _served_model(params, extra, split, catalog):
    popularity = build_popularity(split.train, extra.get("popularity_mode", "constant-half"))
    mask = served_cold_mask(split.cold_mask(), float(extra.get("gamma", 0.0)), popularity,
                            params.mode)
    return build_model(params, catalog, mask)


def evaluate_all(model, split, config, sets):
    e = config["eval"]
    ks = [int(k) for k in e["ks"]]
    results = evaluate_split(model, split, ks=ks, unified_ratio=float(e["unified_ratio"]),
                             seed=int(e["seed"]), sets=sets)
    r_values = [int(r) for r in e["r_values"] if int(r) < split.n_items]
    for k in ks:
        results += popularity_regime_eval(model, split, r_values, k=k)
    return results


def cmd_eval(config, args):
    log_, catalog = load_dataset(config)
    fold = _fold(config, args)
    split = load_split(config, fold, log_)
    ckpt = Path(args.checkpoint) if args.checkpoint else (
        Path(config["output_dir"]) / "train" / f"fold_{fold}" / "checkpoint.npz")
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} not found; run `cwh train` first")
    params, extra = load_checkpoint(ckpt)
    sets = tuple(args.sets.split(",")) if args.sets else tuple(config["eval"]["sets"])
    if params.mode == "cf_only" and ("cold" in sets or "unified" in sets):
        raise EvaluationError("CF-only model is unable to support cold item recommendations; "
                              "evaluate with --sets warm")
    model = _served_model(params, extra, split, catalog)
    results = evaluate_all(model, split, config, sets)
    out = _out(config, "eval", f"fold_{fold}")
    write_results(out / "results.csv", results)
    write_json(out / "effective_config.json", config)
    print(out / "results.csv")


SWEEP_FIELDS = ("gamma", "set", "metric", "value", "fold")


def select_gamma(rows, k=20):
    """Gamma with the highest fold-mean validation unified MRR@K (smallest on ties)."""
    by_gamma = {}
    for r in rows:
        if r["set"] == "val_unified" and r["metric"] == f"MRR@{k}":
            by_gamma.setdefault(float(r["gamma"]), []).append(float(r["value"]))
    if not by_gamma:
        raise EvaluationError("no validation rows to select gamma from")
    means = {g: float(np.mean(v)) for g, v in by_gamma.items()}
    best = max(means.values())
    return min(g for g, m in means.items() if m == best), means


def cmd_sweep(config, args):
    log_, catalog = load_dataset(config)
    s = config["split"]
    features = ContentFeatures(catalog, analyzer_config(config))
    k = int(config["train"]["eval_k"])
    rows = []
    for fold in config["sweep"]["folds"]:
        fold = int(fold)
        path = manifest_path(config, fold)
        split = (read_manifest(path, log_.user_labels, log_.item_labels) if path.is_file() else
                 make_split(log_, offset=fold, seed=int(s["seed"]), min_items=int(s["min_items"]),
                            width=int(s["width"])))
        for gamma in config["sweep"]["gammas"]:
            gamma = float(gamma)
            log.info("sweep fold %d gamma %g", fold, gamma)
            trainer, cfg, params, _ = run_training(config, split, catalog, features,
                                                   gamma=gamma)
            model = trainer.model(params)
            val = validation_mrr(model, split, k=k, unified_ratio=cfg.unified_ratio,
                                 include_cold=model.supports_cold())
            rows.append({"gamma": gamma, "set": "val_unified", "metric": f"MRR@{k}",
                         "value": val["unified"], "fold": fold})
            sets = ("warm", "cold", "unified") if model.supports_cold() else ("warm",)
            for r in evaluate_split(model, split, ks=[int(x) for x in config["eval"]["ks"]],
                                    unified_ratio=float(config["eval"]["unified_ratio"]),
                                    seed=int(config["eval"]["seed"]), sets=sets):
                rows.append({"gamma": gamma, "set": r.set, "metric": f"{r.metric}@{r.k}",
                             "value": r.value, "fold": fold})
    out = _out(config, "sweep")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"]))})
    gamma_star, means = select_gamma(rows, k)
    write_json(out / "gamma_star.json", {"gamma_star": gamma_star, "metric": f"val_unified MRR@{k}",
                                         "fold_means": {repr(g): m for g, m in sorted(means.items())}})
    series = {}
    for label in ("warm", "cold"):
        pts = {}
        for r in rows:
            if r["set"] == label and r["metric"] == "HR@20":
                pts.setdefault(r["gamma"], []).append(r["value"])
        if pts:
            series[label] = [(g, float(np.mean(v))) for g, v in sorted(pts.items())]
    if series:
        (out / "hr20_vs_gamma.svg").write_text(
            line_plot(series, title="HR@20 vs gamma", xlabel="gamma", ylabel="HR@20"),
            encoding="utf-8")
    write_json(out / "effective_config.json", config)
    print(f"gamma*={gamma_star:g}")


def _result_sources(config, specs):
    if specs:
        out = []
        for spec in specs:
            label, sep, path = spec.partition("=")
            out.append((label, Path(path)) if sep else (Path(spec).parent.name, Path(spec)))
        return out
    root = Path(config["output_dir"]) / "eval"
    return [(p.parent.name, p) for p in sorted(root.glob("*/results.csv"))]


def cmd_report(config, args):
    sources = _result_sources(config, args.results)
    if not sources:
        raise EvaluationError("no results to report; run `cwh eval` or pass --results")
    series, summary = {}, []
    for label, path in sources:
        if not path.is_file():
            raise ConfigError(f"results file {path} not found")
        results = read_results(path)
        pts = [(r.r, r.value * 100.0) for r in results
               if r.set == "T_r" and r.metric == "MRR" and r.k == 20]
        if pts:
            series[label] = pts
        summary += [(label, r) for r in results if r.set != "T_r"]
    out = _out(config, "report")
    lines = ["| source | set | metric | value x100 | pairs |", "|---|---|---|---|---|"]
    for label, r in summary:
        lines.append(f"| {label} | {r.set} | {r.metric}@{r.k} | {r.value * 100:.3f} | {r.pairs} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if series:
        (out / "popularity_regime.svg").write_text(
            line_plot(series, title="MRR@20 on T_r", xlabel="r (most popular items removed)",
                      ylabel="MRR@20 x100"),
            encoding="utf-8")
    print(out / "summary.md")


# ---------------------------------------------------------------- entry point

COMMANDS = {"split": cmd_split, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="cwh", description="Cold-warm hybrid recommender.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. train.gamma=0.6")
        if name in ("train", "eval"):
            p.add_argument("--fold", type=int, help="split offset (default: first configured)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default: the fold's train output)")
            p.add_argument("--sets", help="comma-separated subset of warm,cold,unified")
        if name == "report":
            p.add_argument("--results", action="append", default=[], metavar="[LABEL=]PATH",
                           help="results CSV to include (default: every eval output)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.set)
        threads = os.environ.get("CWH_THREADS")
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                COMMANDS[args.command](config, args)
        else:
            COMMANDS[args.command](config, args)
    except CWHError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        category = "io" if isinstance(exc, OSError) else "value"
        print(f"error: {category}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
