"""Batch command-line front end.

Commands: simulate | train | detect | select-m | permute | inject.
Options come from an optional JSON config file merged with flag overrides;
unknown config keys are rejected.  Every output embeds the tool version, the
sha256 digest of the resolved configuration and the seed, and re-running a
command with identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bnn import load_checkpoint, save_checkpoint
from .core import RngStream
from .data import DataError, read_csv, write_csv
from .evaluation import (
    INJECTION_FORMS,
    InteractionTerm,
    PipelineConfig,
    SyntheticSpec,
    balanced_eq8_spec,
    eq8_spec,
    inject_interaction,
    multiplicative_pair_spec,
    permutation_null,
    simulate,
)
from .hessian import layer_values
from .interactions import (
    bayesian_geh,
    partition_kmeans,
    select_m,
    unstandardized_estimates,
    write_report_csv,
    write_report_json,
    write_selection_csv,
)
from .train import TrainConfig, TrainingDiverged, train_model

log = logging.getLogger("hessix")


class ConfigError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("HESSIX_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """defaults <- config file <- non-None flag overrides, unknown keys fatal."""
    merged = dict(defaults)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(doc)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _meta(config: dict, extra: dict | None = None) -> dict:
    meta = {"tool_version": __version__, "config_digest": config_digest(config),
            "seed": config["seed"]}
    if extra:
        meta.update(extra)
    return meta


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_hidden(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


# --- simulate ---------------------------------------------------------------

SIMULATE_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "preset": "eq8",  # eq8 | pair
    "snr": 4.0,
    "noise_sigma": None,
    "n_train": 2000,
    "n_val": 500,
    "n_test": 500,
    "interaction_weight": 1.0,
    "spec": None,  # full custom generative spec, overrides the preset
}


def _spec_from_config(cfg: dict) -> SyntheticSpec:
    if cfg["spec"] is not None:
        doc = cfg["spec"]
        terms = [InteractionTerm(str(t[0]), int(t[1]), int(t[2]),
                                 float(t[3]) if len(t) > 3 else 1.0)
                 for t in doc.get("interactions", [])]
        return SyntheticSpec(
            n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
            main_weights=[float(w) for w in doc["main_weights"]],
            interactions=terms,
            ranges=[tuple(r) for r in doc.get("ranges", [])],
            snr=float(doc.get("snr", cfg["snr"])),
            noise_sigma=doc.get("noise_sigma", cfg["noise_sigma"]),
            feature_sampling=doc.get("feature_sampling", "uniform"),
            pure_noise=bool(doc.get("pure_noise", False)))
    if cfg["preset"] == "eq8":
        return eq8_spec(snr=cfg["snr"], n_train=cfg["n_train"],
                        n_val=cfg["n_val"], n_test=cfg["n_test"],
                        interaction_weight=cfg["interaction_weight"])
    if cfg["preset"] == "eq8-balanced":
        return balanced_eq8_spec(snr=cfg["snr"], n_train=cfg["n_train"],
                                 n_val=cfg["n_val"], n_test=cfg["n_test"])
    if cfg["preset"] == "pair":
        return multiplicative_pair_spec(
            b12=cfg["interaction_weight"], snr=cfg["snr"],
            noise_sigma=cfg["noise_sigma"], n_train=cfg["n_train"],
            n_val=cfg["n_val"], n_test=cfg["n_test"])
    raise ConfigError(f"unknown preset {cfg['preset']!r}")


def cmd_simulate(args) -> int:
    cfg = resolve_config(SIMULATE_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "preset": args.preset,
        "snr": args.snr, "n_train": args.n_train, "n_val": args.n_val,
        "n_test": args.n_test, "interaction_weight": args.interaction_weight,
    })
    spec = _spec_from_config(cfg)
    train, val, test, truth = simulate(spec, RngStream(cfg["seed"]))
    out = _out_dir(args)
    meta = _meta(cfg)
    write_csv(train, out / "train.csv", meta)
    write_csv(val, out / "val.csv", meta)
    write_csv(test, out / "test.csv", meta)
    truth_doc = {"meta": meta, "pairs": sorted([list(p) for p in truth.pairs])}
    (out / "truth.json").write_text(json.dumps(truth_doc, sort_keys=True),
                                    encoding="utf-8")
    print(json.dumps({"out": str(out), "n_train": train.n, "n_val": val.n,
                      "n_test": test.n, "true_pairs": len(truth.pairs)},
                     sort_keys=True))
    return 0


# --- train --------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "train_csv": None,
    "val_csv": None,
    "test_csv": None,
    "target": None,
    "epochs": 200,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "temperature": 0.1,
    "lengthscale": 1e-4,
    "mc_per_batch": 1,
    "patience": 20,
    "hidden": [64, 64],
    "activation": "tanh",
    "init_drop_probability": 0.1,
    "eval_mc_samples": 50,
    "curve_every": 1,
    "curve_mc_samples": 25,
}


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        temperature=float(cfg["temperature"]),
        lengthscale=float(cfg["lengthscale"]),
        mc_per_batch=int(cfg["mc_per_batch"]), seed=int(cfg["seed"]),
        patience=int(cfg["patience"]), hidden=tuple(_parse_hidden(cfg["hidden"])),
        activation=str(cfg["activation"]),
        init_drop_probability=float(cfg["init_drop_probability"]),
        eval_mc_samples=int(cfg["eval_mc_samples"]),
        curve_every=int(cfg["curve_every"]),
        curve_mc_samples=int(cfg["curve_mc_samples"]))


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "train_csv": args.train_csv,
        "val_csv": args.val_csv, "test_csv": args.test_csv,
        "target": args.target, "epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.learning_rate,
        "hidden": args.hidden, "patience": args.patience,
    })
    if not cfg["train_csv"] or not cfg["val_csv"]:
        raise ConfigError("train needs train_csv and val_csv")
    train = read_csv(cfg["train_csv"], cfg["target"])
    val = read_csv(cfg["val_csv"], cfg["target"])
    test = read_csv(cfg["test_csv"], cfg["target"]) if cfg["test_csv"] else None
    if val.feature_names != train.feature_names:
        raise DataError("train and validation CSV columns differ")
    out = _out_dir(args)
    digest = config_digest(cfg)
    model, report = train_model(train, val, _train_config(cfg), test,
                                curve_path=out / "curve.csv")
    save_checkpoint(model, out / "model.json", config_digest=digest,
                    seed=cfg["seed"], tool_version=__version__)
    fit_doc = {"meta": _meta(cfg), "train_nelbo": report.train_nelbo,
               "val_nelbo": report.val_nelbo, "test_rmse": report.test_rmse,
               "coverage95": report.coverage95, "epochs_run": report.epochs_run}
    (out / "fit.json").write_text(json.dumps(fit_doc, sort_keys=True),
                                  encoding="utf-8")
    print(json.dumps(fit_doc, sort_keys=True))
    return 0


# --- detect ---------------------------------------------------------------------

DETECT_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "model": None,
    "data_csv": None,
    "target": None,
    "layer": 0,
    "clusters": "auto",  # int or "auto"
    "mc_samples": 100,
    "scan_max": 15,
    "tau": 0.05,
    "raw_scale": False,
}


def _detection_points(model, data, layer: int):
    x_std = model.x_standardizer.apply(data.x) if model.x_standardizer else data.x
    if layer == 0:
        return x_std
    return layer_values(model, x_std, layer)


def cmd_detect(args) -> int:
    cfg = resolve_config(DETECT_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "model": args.model,
        "data_csv": args.data_csv, "target": args.target, "layer": args.layer,
        "clusters": args.clusters, "mc_samples": args.mc_samples,
        "raw_scale": args.raw_scale or None,
    })
    if not cfg["model"] or not cfg["data_csv"]:
        raise ConfigError("detect needs model and data_csv")
    model = load_checkpoint(cfg["model"])
    data = read_csv(cfg["data_csv"], cfg["target"])
    if model.feature_names and data.feature_names != model.feature_names:
        raise DataError("data CSV columns do not match the model's features")
    layer = int(cfg["layer"])
    points = _detection_points(model, data, layer)
    rng = RngStream(int(cfg["seed"]))

    chosen = None
    if str(cfg["clusters"]) == "auto":
        scan_top = min(int(cfg["scan_max"]), points.shape[0])
        trace = select_m(model, points, range(2, scan_top + 1),
                         int(cfg["mc_samples"]), rng.substream(1), layer,
                         float(cfg["tau"]))
        chosen = trace.chosen
        n_clusters = trace.chosen
    else:
        n_clusters = int(cfg["clusters"])
    part = partition_kmeans(points, n_clusters, rng.substream(2))
    names = data.feature_names if layer == 0 else [f"node{k + 1}"
                                                   for k in range(points.shape[1])]
    estimates = bayesian_geh(model, part, points, int(cfg["mc_samples"]),
                             rng.substream(3), layer=layer, feature_names=names)
    if cfg["raw_scale"]:
        if layer != 0:
            raise ConfigError("raw-scale reporting only applies to layer 0")
        estimates = unstandardized_estimates(estimates, model)
    out = _out_dir(args)
    meta = _meta(cfg, {"layer": layer, "clusters": n_clusters,
                       "mc_samples": int(cfg["mc_samples"]),
                       "scale": "raw" if cfg["raw_scale"] else "standardized"})
    if chosen is not None:
        meta["chosen_m"] = chosen
    write_report_json(estimates, out / "report.json", meta)
    write_report_csv(estimates, out / "report.csv", meta)
    n_sig = sum(1 for e in estimates if e.ci_low > 0)
    print(json.dumps({"out": str(out), "pairs": len(estimates),
                      "significant": n_sig, "clusters": n_clusters},
                     sort_keys=True))
    return 0


# --- select-m --------------------------------------------------------------------

SELECT_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "model": None,
    "data_csv": None,
    "target": None,
    "layer": 0,
    "m_min": 2,
    "m_max": 15,
    "mc_samples": 50,
    "tau": 0.05,
}


def cmd_select_m(args) -> int:
    cfg = resolve_config(SELECT_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "model": args.model,
        "data_csv": args.data_csv, "target": args.target, "layer": args.layer,
        "m_min": args.m_min, "m_max": args.m_max,
        "mc_samples": args.mc_samples,
    })
    if not cfg["model"] or not cfg["data_csv"]:
        raise ConfigError("select-m needs model and data_csv")
    model = load_checkpoint(cfg["model"])
    data = read_csv(cfg["data_csv"], cfg["target"])
    layer = int(cfg["layer"])
    points = _detection_points(model, data, layer)
    if not (2 <= int(cfg["m_min"]) <= int(cfg["m_max"])):
        raise ConfigError("need 2 <= m_min <= m_max")
    trace = select_m(model, points, range(int(cfg["m_min"]), int(cfg["m_max"]) + 1),
                     int(cfg["mc_samples"]), RngStream(int(cfg["seed"])), layer,
                     float(cfg["tau"]))
    out = _out_dir(args)
    write_selection_csv(trace, out / "selection.csv", _meta(cfg))
    doc = {"meta": _meta(cfg), "chosen_m": trace.chosen,
           "trace": [[m, d] for m, d in trace.rows()]}
    (out / "selection.json").write_text(json.dumps(doc, sort_keys=True),
                                        encoding="utf-8")
    print(json.dumps({"chosen_m": trace.chosen, "out": str(out)}, sort_keys=True))
    return 0


# --- permute --------------------------------------------------------------------

PERMUTE_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data_csv": None,
    "target": None,
    "permutations": 100,
    "clusters": 10,
    "mc_samples": 50,
    "epochs": 60,
    "batch_size": 256,
    "learning_rate": 3e-3,
    "hidden": [24],
    "patience": 20,
}


def cmd_permute(args) -> int:
    cfg = resolve_config(PERMUTE_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "data_csv": args.data_csv,
        "target": args.target, "permutations": args.permutations,
        "clusters": args.clusters, "mc_samples": args.mc_samples,
        "epochs": args.epochs, "hidden": args.hidden,
    })
    if not cfg["data_csv"]:
        raise ConfigError("permute needs data_csv")
    data = read_csv(cfg["data_csv"], cfg["target"])
    train_cfg = TrainConfig(
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        hidden=tuple(_parse_hidden(cfg["hidden"])), seed=int(cfg["seed"]),
        patience=int(cfg["patience"]), curve_every=0)
    pipeline = PipelineConfig(train=train_cfg, clusters=int(cfg["clusters"]),
                              mc_samples=int(cfg["mc_samples"]))
    result = permutation_null(data, pipeline, int(cfg["permutations"]),
                              RngStream(int(cfg["seed"])))
    out = _out_dir(args)
    meta = _meta(cfg, {"permutations": int(cfg["permutations"])})
    fpr_doc = {"meta": meta, "fpr": result.fpr}
    (out / "fpr.json").write_text(json.dumps(fpr_doc, sort_keys=True),
                                  encoding="utf-8")
    write_report_json(result.observed["geh"], out / "report.json", meta,
                      p_permute=result.p_permute["geh"])
    write_report_csv(result.observed["geh"], out / "report.csv", meta,
                     p_permute=result.p_permute["geh"])
    print(json.dumps({"fpr": result.fpr, "out": str(out)}, sort_keys=True))
    return 0


# --- inject ---------------------------------------------------------------------

INJECT_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data_csv": None,
    "target": None,
    "form": "multiplicative",
    "pair": None,  # [i, j], 0-based
    "strength": 1.0,
    "division_offset": None,
}


def cmd_inject(args) -> int:
    pair_override = None
    if args.pair is not None:
        pair_override = [int(v) for v in str(args.pair).split(",")]
    cfg = resolve_config(INJECT_DEFAULTS, args.config, {
        "seed": args.seed, "threads": args.threads, "data_csv": args.data_csv,
        "target": args.target, "form": args.form, "pair": pair_override,
        "strength": args.strength,
    })
    if not cfg["data_csv"]:
        raise ConfigError("inject needs data_csv")
    if not cfg["pair"] or len(cfg["pair"]) != 2:
        raise ConfigError("inject needs a feature pair, e.g. --pair 0,1")
    if cfg["form"] not in INJECTION_FORMS:
        raise ConfigError(f"form must be one of {INJECTION_FORMS}")
    data = read_csv(cfg["data_csv"], cfg["target"])
    modified = inject_interaction(data, cfg["form"],
                                  (int(cfg["pair"][0]), int(cfg["pair"][1])),
                                  float(cfg["strength"]),
                                  cfg["division_offset"])
    out = _out_dir(args)
    write_csv(modified, out / "injected.csv", _meta(cfg))
    print(json.dumps({"out": str(out / 'injected.csv'), "form": cfg["form"],
                      "pair": cfg["pair"], "strength": cfg["strength"]},
                     sort_keys=True))
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hessix",
        description="Detect global pairwise feature interactions with "
                    "calibrated uncertainty from tabular regression data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (results never depend on it)")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("simulate", help="draw synthetic datasets with known truth")
    shared(p)
    p.add_argument("--preset", choices=["eq8", "eq8-balanced", "pair"],
                   default=None)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-val", dest="n_val", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.add_argument("--interaction-weight", dest="interaction_weight",
                   type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the hybrid model on CSV data")
    shared(p)
    p.add_argument("--train-csv", dest="train_csv", default=None)
    p.add_argument("--val-csv", dest="val_csv", default=None)
    p.add_argument("--test-csv", dest="test_csv", default=None)
    p.add_argument("--target", default=None, help="target column name")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   default=None)
    p.add_argument("--hidden", default=None, help="e.g. 64,64")
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="report pairwise interaction effects")
    shared(p)
    p.add_argument("--model", default=None, help="model checkpoint JSON")
    p.add_argument("--data-csv", dest="data_csv", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--layer", type=int, default=None,
                   help="0 = inputs, l >= 1 = hidden node layer")
    p.add_argument("--clusters", default=None, help='cluster count or "auto"')
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=None)
    p.add_argument("--raw-scale", dest="raw_scale", action="store_true",
                   help="report effects in raw data units")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("select-m", help="scan cluster counts for a stable ranking")
    shared(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data-csv", dest="data_csv", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--m-min", dest="m_min", type=int, default=None)
    p.add_argument("--m-max", dest="m_max", type=int, default=None)
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=None)
    p.set_defaults(func=cmd_select_m)

    p = sub.add_parser("permute", help="permutation null: FPR table and p-values")
    shared(p)
    p.add_argument("--data-csv", dest="data_csv", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--permutations", type=int, default=None)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden", default=None)
    p.set_defaults(func=cmd_permute)

    p = sub.add_parser("inject", help="add one synthetic interaction to a CSV")
    shared(p)
    p.add_argument("--data-csv", dest="data_csv", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--form", choices=list(INJECTION_FORMS), default=None)
    p.add_argument("--pair", default=None, help="0-based pair, e.g. 0,1")
    p.add_argument("--strength", type=float, default=None)
    p.set_defaults(func=cmd_inject)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, TrainingDiverged, FileNotFoundError,
            ValueError) as err:
        print(json.dumps({"error": {"type": type(err).__name__,
                                    "message": str(err)}}, sort_keys=True))
        log.error("%s: %s", type(err).__name__, err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
