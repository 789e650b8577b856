"""Command-line front end.

    debias-opt <subcommand> --config <path> --out <dir> [--seed N]

The config is a flat YAML mapping; every key is typed and checked against the
subcommand's schema (see ``SCHEMAS``) before anything runs, and unknown keys
are rejected.  Each run writes its artifacts plus ``manifest.json`` holding
the resolved config, its sha256, the seed and a sha256 per artifact.

Exit codes: 0 ok, 1 gradient check failed, 64 bad config, 65 bad data,
70 divergence.  Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .datasets import (GroupedDataset, SpuriousSpec, gen_multilabel, gen_multitask_data,
                       gen_spurious_binary, multilabel_from_text)
from .dedier import (WeightingParams, curve_to_csv, group_mean_weights, group_trace_to_csv,
                     readout_probe, reports_to_csv, trace_to_csv, weighting_curve)
from .errors import ConfigError, DataError, DivergenceError
from .gradcheck import run_suite
from .harness import Experiment, ExperimentConfig, rows_to_csv, summarize, sweep, train_erm
from .minmax import GumbelConfig, direct_method_train, fixed_weight_train, max_val_loss, uniform_weights
from .saddle import LabelModelBank, solve, solve_fixed_lambda
from .training import ModelConfig

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 64, 65, 70

# key -> (type, default).  Types: int, float, bool, str, or a one-element
# list naming the element type.
SPURIOUS = {
    "data_file": (str, ""),
    "rho": (float, 0.95), "core_snr": (float, 3.0), "spur_snr": (float, 8.0),
    "n_train": (int, 2000), "n_val": (int, 400), "n_test": (int, 1000),
    "core_dim": (int, 2), "spur_dim": (int, 2), "noise_dim": (int, 4),
}
STUDENT = {
    "hidden": ([int], [32, 32]), "lr": (float, 0.05), "batch_size": (int, 64),
    "weight_decay": (float, 0.05), "epochs": (int, 20),
}
TEACHER = {
    "teacher_hidden": ([int], [128, 128]), "teacher_lr": (float, 0.05),
    "teacher_epochs": (int, 30), "teacher_eta_q": (float, 0.05),
    "groupdro_eta_q": (float, 0.05), "jtt_first_epochs": (int, 1),
    "jtt_upweight": (float, 20.0),
}
WEIGHTING = {
    "alpha": (float, 0.05), "beta": (float, 4.0), "kd_mix": (float, 1.0),
    "kd_tau": (float, 1.0), "aux_position": (int, 1), "retrain_interval": (int, 1),
    "aux_epochs": (int, 1), "aux_lr": (float, 0.1),
}

SCHEMAS = {
    "saddle": {
        "data_file": (str, ""), "n": (int, 200), "m": (int, 10), "T": (int, 6),
        "overlap": (float, 1.0), "n_privileged": (int, 2), "max_labels": (int, 2),
        "ridge": (float, 1.0), "eps": (float, 0.05), "mu": (float, 50.0),
        "eta": (float, 0.25), "schedule": (str, "inv_sqrt"), "iters": (int, 2000),
        "literal_dual": (bool, False), "baseline_lambda": (float, 1.0),
    },
    "minmax": {
        "k": (int, 2), "n": (int, 400), "dim": (int, 8), "angle": (float, 1.5),
        "noise": ([float], [0.0, 0.3]), "iters": (int, 300), "alpha1": (float, 0.5),
        "alpha2": (float, 2.0), "mode": (str, "hard_argmax"), "gumbel_tau": (float, 1.0),
        "zero_noise": (bool, False), "noise_seed": (int, 0), "l2": (bool, False),
        "reg_weight": (float, 0.0),
    },
    "dedier": {**SPURIOUS, **STUDENT, **TEACHER, **WEIGHTING,
               "methods": ([str], ["erm", "kd", "dedier"]),
               "curve_alphas": ([float], [0.05, 0.1, 0.5, 1.0]),
               "curve_samples": (int, 100)},
    "probe": {**SPURIOUS, **STUDENT, "erm_epochs": (int, 1), "depths": ([int], []),
              "decoder_epochs": (int, 1), "decoder_lr": (float, 0.1),
              "standardize": (bool, True), "split": (str, "train")},
    "sweep": {**SPURIOUS, **STUDENT, **TEACHER, **WEIGHTING, "method": (str, "dedier"),
              "grid_alpha": ([float], [0.05, 0.1]), "grid_beta": ([float], [2.0, 4.0]),
              "grid_lr": ([float], []), "n_seeds": (int, 3)},
    "gradcheck": {"instances": (int, 100), "tolerance": (float, 1e-4)},
}
for _schema in SCHEMAS.values():
    _schema["seed"] = (int, 0)


# ------------------------------------------------------------------ config


def _coerce(key, kind, value):
    if isinstance(kind, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return [_coerce(key, kind[0], v) for v in value]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if kind is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def validate_config(subcommand: str, raw: dict | None) -> dict:
    """Fill defaults and type-check ``raw`` against the subcommand schema."""
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    schema = SCHEMAS[subcommand]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys for {subcommand}: {', '.join(map(str, unknown))}")
    cfg = {}
    for key, (kind, default) in schema.items():
        cfg[key] = _coerce(key, kind, raw[key]) if key in raw else default
    return cfg


def load_config(subcommand: str, path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return validate_config(subcommand, raw)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode("utf-8")).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# --------------------------------------------------------------- artifacts


class Artifacts:
    """Collects files written for one run so the manifest can checksum them."""

    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        data = text.encode("utf-8")
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def write_json(self, name: str, obj) -> None:
        self.write(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def emit_figure_data(kind: str, obj, artifacts: Artifacts, name: str | None = None) -> str:
    """Write one figure panel's data series as CSV; returns the file name.

    ``kind`` is ``weighting_curve`` (dict of ``(alpha, beta) -> table``),
    ``weight_evolution`` (``(trace, n_groups)``) or ``readout``
    (list of readout reports).
    """
    if kind == "weighting_curve":
        text = curve_to_csv(obj)
    elif kind == "weight_evolution":
        trace, n_groups = obj
        text = group_trace_to_csv(trace, n_groups)
    elif kind == "readout":
        text = reports_to_csv(obj)
    else:
        raise ValueError(f"unknown figure kind {kind!r}")
    name = name or f"{kind}.csv"
    artifacts.write(name, text)
    return name


# -------------------------------------------------------------- subcommands


def _spurious_dataset(cfg: dict, seed: int) -> GroupedDataset:
    if cfg["data_file"]:
        try:
            ds = GroupedDataset.load(cfg["data_file"])
        except OSError as exc:
            raise DataError(f"cannot read dataset: {exc}") from exc
        if ds.n_classes != 2:
            raise DataError("spurious-benchmark methods need a two-class dataset")
        return ds
    keys = ("rho", "core_snr", "spur_snr", "n_train", "n_val", "n_test", "core_dim",
            "spur_dim", "noise_dim")
    spec = _guard_config(lambda: SpuriousSpec(**{k: cfg[k] for k in keys}, seed=seed))
    return gen_spurious_binary(spec)


def _guard_config(fn):
    try:
        return fn()
    except (DataError, DivergenceError):
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _student(cfg: dict) -> ModelConfig:
    return ModelConfig(hidden=tuple(cfg["hidden"]), lr=cfg["lr"], batch_size=cfg["batch_size"],
                       weight_decay=cfg["weight_decay"])


def _experiment_config(cfg: dict) -> ExperimentConfig:
    weighting = WeightingParams(alpha=cfg["alpha"], beta=cfg["beta"], kd_mix=cfg["kd_mix"],
                                kd_temperature=cfg["kd_tau"], aux_position=cfg["aux_position"],
                                retrain_interval=cfg["retrain_interval"],
                                aux_epochs=cfg["aux_epochs"], aux_lr=cfg["aux_lr"])
    _guard_config(lambda: weighting.validate(len(cfg["hidden"]) + 1))
    return ExperimentConfig(
        student=_student(cfg),
        teacher=ModelConfig(hidden=tuple(cfg["teacher_hidden"]), lr=cfg["teacher_lr"],
                            batch_size=cfg["batch_size"]),
        epochs=cfg["epochs"], teacher_epochs=cfg["teacher_epochs"],
        teacher_eta_q=cfg["teacher_eta_q"], groupdro_eta_q=cfg["groupdro_eta_q"],
        kd_tau=cfg["kd_tau"], kd_mix=cfg["kd_mix"], jtt_first_epochs=cfg["jtt_first_epochs"],
        jtt_upweight=cfg["jtt_upweight"], weighting=weighting)


def run_saddle(cfg: dict, seed: int, art: Artifacts) -> int:
    if cfg["data_file"]:
        try:
            text = Path(cfg["data_file"]).read_text(encoding="utf-8")
            bundle = multilabel_from_text(text, cfg["n_privileged"], cfg["ridge"])
        except OSError as exc:
            raise DataError(f"cannot read dataset: {exc}") from exc
        except DataError:
            raise
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    else:
        bundle = _guard_config(lambda: gen_multilabel(
            cfg["n"], cfg["m"], cfg["T"], cfg["overlap"], seed, cfg["n_privileged"],
            cfg["max_labels"], cfg["ridge"]))
    bank = _guard_config(lambda: LabelModelBank.from_prior(
        bundle.W_prior, bundle.partition, eps=cfg["eps"], mu=cfg["mu"], eta=cfg["eta"]))
    if cfg["schedule"] not in ("constant", "inv_sqrt"):
        raise ConfigError("schedule must be constant or inv_sqrt")
    final, trace = solve(bank, bundle.data, bundle.partition, cfg["iters"], cfg["schedule"],
                         literal_dual=cfg["literal_dual"])
    art.write("saddle_trace.csv", trace.to_csv())
    summary = {"obj_P": trace.obj_P[-1] if trace.obj_P else None,
               "max_residual": float(np.max(trace.residuals[-1])) + cfg["eps"]
               if trace.residuals and len(trace.residuals[-1]) else None,
               "lambda": final.lam}
    if cfg["baseline_lambda"] >= 0:
        fixed = np.full(len(bundle.partition.P_bar), cfg["baseline_lambda"])
        _, base = solve_fixed_lambda(bank, bundle.data, bundle.partition, fixed, cfg["iters"],
                                     cfg["schedule"])
        art.write("baseline_trace.csv", base.to_csv())
        summary["baseline_obj_P"] = base.obj_P[-1] if base.obj_P else None
    art.write_json("summary.json", summary)
    return EXIT_OK


def run_minmax(cfg: dict, seed: int, art: Artifacts) -> int:
    if len(cfg["noise"]) != cfg["k"]:
        raise ConfigError("noise needs one rate per task")
    data = _guard_config(lambda: gen_multitask_data(cfg["k"], cfg["n"], seed, cfg["noise"],
                                                    dim=cfg["dim"], angle=cfg["angle"]))
    bundle = data.bundle(l2=cfg["l2"])
    if cfg["mode"] not in ("hard_argmax", "gumbel"):
        raise ConfigError("mode must be hard_argmax or gumbel")
    gumbel = _guard_config(lambda: GumbelConfig(cfg["gumbel_tau"], cfg["noise_seed"],
                                                cfg["zero_noise"]))
    lam0 = uniform_weights(bundle, cfg["reg_weight"])
    theta, lam, trace = direct_method_train(bundle, lam0, bundle.theta0, cfg["iters"],
                                            cfg["alpha1"], cfg["alpha2"], mode=cfg["mode"],
                                            gumbel=gumbel)
    theta_u, uniform = fixed_weight_train(bundle, lam0, bundle.theta0, cfg["iters"],
                                          cfg["alpha1"])
    art.write("minmax_trace.csv", trace.to_csv())
    art.write("uniform_trace.csv", uniform.to_csv())
    learned, base = max_val_loss(theta, bundle), max_val_loss(theta_u, bundle)
    art.write_json("summary.json", {
        "learned_max_val_loss": learned, "uniform_max_val_loss": base,
        "relative_reduction": 1.0 - learned / base, "final_lambda": lam,
        "val_losses": bundle.val_losses(theta), "uniform_val_losses": bundle.val_losses(theta_u)})
    return EXIT_OK


def _metrics_csv(rows) -> str:
    n_groups = len(rows[0][1].group_acc) if rows else 0
    lines = [",".join(["method", "seed", "split", "avg_acc", "wga",
                       *[f"group_{g}_acc" for g in range(n_groups)]])]
    for split, row in rows:
        lines.append(",".join([row.method, str(row.seed), split, repr(row.avg_acc),
                               repr(row.wga), *[repr(a) for a in row.group_acc]]))
    return "\n".join(lines) + "\n"


def run_dedier(cfg: dict, seed: int, art: Artifacts) -> int:
    exp_cfg = _experiment_config(cfg)
    ex = Experiment(exp_cfg, seed, dataset=_spurious_dataset(cfg, seed))
    rows, summary = [], {}
    for method in cfg["methods"]:
        if method not in ("erm", "kd", "dedier", "jtt", "groupdro", "teacher"):
            raise ConfigError(f"unknown method {method!r}")
        if method == "dedier":
            result = ex.run("dedier", return_result=True)
            model = result.student
            n_groups = ex.dataset.n_groups
            art.write("dedier_trace.csv", trace_to_csv(result.trace))
            emit_figure_data("weight_evolution", (result.trace, n_groups), art)
            summary["final_group_mean_weight"] = group_mean_weights(
                result.final_weights, ex.train.group, n_groups)
        else:
            model = ex.run(method)
        val, test = ex.evaluate(model, method)
        rows += [("val", val), ("test", test)]
        summary[method] = {"avg_acc": test.avg_acc, "wga": test.wga}
    art.write("metrics.csv", _metrics_csv(rows))
    curves = {(a, cfg["beta"]): weighting_curve(a, cfg["beta"], cfg["curve_samples"])
              for a in cfg["curve_alphas"]}
    emit_figure_data("weighting_curve", curves, art)
    art.write_json("summary.json", summary)
    return EXIT_OK


def run_probe(cfg: dict, seed: int, art: Artifacts) -> int:
    ds = _spurious_dataset(cfg, seed)
    if cfg["split"] not in ("train", "val", "test"):
        raise ConfigError("split must be train, val or test")
    if cfg["erm_epochs"] < 1:
        raise ConfigError("the probe needs a model trained for at least one epoch")
    model = train_erm(ds.training_view(), _student(cfg), cfg["erm_epochs"], seed)
    depths = cfg["depths"] or list(range(1, model.depth + 1))
    split = ds.part(cfg["split"])
    reports = _guard_config(lambda: readout_probe(
        model, split, depths, cfg["decoder_epochs"], cfg["decoder_lr"], cfg["batch_size"],
        seed, cfg["standardize"]))
    emit_figure_data("readout", reports, art)
    conflicting = ds.conflicting_groups()
    art.write_json("summary.json", {
        "conflicting_groups": conflicting,
        "conflicting_error_share": {str(r.depth): float(r.error_share[conflicting].sum())
                                    for r in reports},
        "n_errors": {str(r.depth): r.n_errors for r in reports}})
    return EXIT_OK


def run_sweep(cfg: dict, seed: int, art: Artifacts) -> int:
    base_cfg = _experiment_config(cfg)
    method = cfg["method"]
    if method not in ("erm", "kd", "dedier", "jtt", "groupdro"):
        raise ConfigError(f"unknown method {method!r}")
    if cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds must be >= 1")
    grid = {name[5:]: values for name, values in cfg.items()
            if name.startswith("grid_") and values}
    base = {}

    def cell(config, s):
        if s not in base:
            base[s] = Experiment(base_cfg, s, dataset=_spurious_dataset(cfg, s))
        ref = base[s]
        exp_cfg = base_cfg
        if "lr" in config:
            exp_cfg = replace(exp_cfg, student=replace(exp_cfg.student, lr=config["lr"]))
        weighting = replace(exp_cfg.weighting,
                            **{k: config[k] for k in ("alpha", "beta") if k in config})
        exp_cfg = replace(exp_cfg, weighting=weighting)
        if method in ("kd", "dedier"):
            ref.teacher()
        ex = Experiment(exp_cfg, s, dataset=ref.dataset, _teacher=ref._teacher)
        return ex.evaluate(ex.run(method), method)

    rows = sweep(cell, grid, range(seed, seed + cfg["n_seeds"]))
    art.write("sweep.csv", rows_to_csv(rows))
    art.write_json("summary.json", summarize(rows, method))
    return EXIT_OK


def run_gradcheck(cfg: dict, seed: int, art: Artifacts) -> int:
    if cfg["instances"] < 1:
        raise ConfigError("instances must be >= 1")
    errors = run_suite(cfg["instances"], seed)
    lines = ["target,max_rel_error,pass"]
    ok = True
    for name, err in errors.items():
        passed = err <= cfg["tolerance"]
        ok &= passed
        lines.append(f"{name},{err!r},{str(passed).lower()}")
        print(f"{name:32s} max rel error {err:.3e}  {'ok' if passed else 'FAIL'}")
    art.write("gradcheck.csv", "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


RUNNERS = {"saddle": run_saddle, "minmax": run_minmax, "dedier": run_dedier,
           "probe": run_probe, "sweep": run_sweep, "gradcheck": run_gradcheck}


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debias-opt", description=__doc__.split("\n\n")[0])
    parser.add_argument("subcommand", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="flat YAML config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.subcommand, args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        art = Artifacts(out)
        # divergence is detected by explicit finiteness checks, not fp traps
        with np.errstate(over="ignore", invalid="ignore"):
            code = RUNNERS[args.subcommand](cfg, cfg["seed"], art)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except DataError as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except DivergenceError as exc:
        return _fail("divergence", EXIT_DIVERGED, str(exc))
    manifest = {"subcommand": args.subcommand, "seed": cfg["seed"], "config": _jsonable(cfg),
                "config_sha256": config_digest(cfg), "artifacts": dict(sorted(art.files.items()))}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8", newline="\n")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
