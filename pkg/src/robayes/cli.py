"""Experiment runner: ``robayes run <config.json>`` and ``robayes report DIR...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    ConfigError,
    ContaminationSpec,
    append_points,
    contaminate,
    gen_channel_gain,
    gen_classification,
    gen_localization,
    gen_multipath,
)
from .diffmath import ContractError
from .metrics import (
    accuracy,
    auroc,
    ece,
    generate_samples,
    mmd,
    model_log_density,
    mse,
    nll_from_log,
    reliability_diagram,
)
from .models import model_from_spec, predictive_log_prob
from .objectives import ObjectiveSpec
from .trainer import TrainConfig, TrainingError, fit
from .variational import GaussianPrior

log = logging.getLogger("robayes")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3

TASK_FAMILY = {
    "channel-gain-density": ("gaussian-location", "density"),
    "synthetic-amc": ("mlp-classifier", "discriminative"),
    "synthetic-localization": ("mlp-regressor", "discriminative"),
    "channel-vae": ("vae", "vae"),
}

DEFAULT_OOD = {
    "channel-gain-density": "fixed",
    "synthetic-amc": "interference",
    "synthetic-localization": "uniform-target",
    "channel-vae": "delay-spread",
}


# ---------------------------------------------------------------------------
# config


def _require(cond: bool, field: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _num_list(cfg: dict, key: str, default) -> list:
    val = cfg.get(key, default)
    if not isinstance(val, list):
        val = [val]
    _require(len(val) > 0, f"sweep.{key}", "grid must be nonempty")
    _require(all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val), f"sweep.{key}",
             "entries must be numbers")
    return val


def validate_config(cfg) -> dict:
    """Check a parsed config and fill defaults. Raises ConfigError naming the field."""
    _require(isinstance(cfg, dict), "config", "top level must be a JSON object")
    task = cfg.get("task")
    _require(task in TASK_FAMILY, "task", f"must be one of {sorted(TASK_FAMILY)}, got {task!r}")
    out = dict(cfg)
    model_family, obj_family = TASK_FAMILY[task]
    out["data"] = dict(cfg.get("data", {}))
    out["model"] = {"family": model_family} | dict(cfg.get("model", {}))
    _require(out["model"]["family"] == model_family, "model.family", f"task {task} needs {model_family}")
    out["prior"] = {"mean": 0.0, "variance": 1.0} | dict(cfg.get("prior", {}))
    out["objective"] = {"beta": 0.01} | dict(cfg.get("objective", {}))
    out["training"] = dict(cfg.get("training", {}))
    out["eval"] = {"test_m": 10, "seeds": [0]} | dict(cfg.get("eval", {}))

    try:
        GaussianPrior.from_dict(out["prior"])
    except (ContractError, TypeError, KeyError) as err:
        raise ConfigError(f"prior: {err}") from None
    try:
        TrainConfig.from_dict(out["training"])
    except (ContractError, TypeError) as err:
        raise ConfigError(f"training: {err}") from None
    ev = out["eval"]
    _require(isinstance(ev["test_m"], int) and ev["test_m"] >= 1, "eval.test_m", "must be an integer >= 1")
    _require(isinstance(ev["seeds"], list) and len(ev["seeds"]) > 0 and all(isinstance(s, int) for s in ev["seeds"]),
             "eval.seeds", "must be a nonempty list of integers")

    sweep = dict(cfg.get("sweep", {}))
    cells = []
    if "cells" not in sweep or any(k in sweep for k in ("m", "t", "epsilon")):
        for m, t, e in itertools.product(_num_list(sweep, "m", 1), _num_list(sweep, "t", 1.0),
                                         _num_list(sweep, "epsilon", 0.0)):
            cells.append({"m": m, "t": t, "epsilon": e, "frequentist": bool(sweep.get("frequentist", False))})
    for i, c in enumerate(sweep.get("cells", [])):
        _require(isinstance(c, dict), f"sweep.cells[{i}]", "must be an object")
        cells.append({"m": c.get("m", 1), "t": c.get("t", 1.0), "epsilon": c.get("epsilon", 0.0),
                      "frequentist": bool(c.get("frequentist", False))})
    _require(len(cells) > 0, "sweep", "grid must be nonempty")
    for i, c in enumerate(cells):
        try:
            _objective(out, c)
            ContaminationSpec(float(c["epsilon"]), DEFAULT_OOD[task])
        except (ContractError, ValueError, TypeError) as err:
            raise ConfigError(f"sweep cell {i} {c}: {err}") from None
    out["cells"] = cells
    out.pop("sweep", None)
    return out


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: malformed JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _objective(cfg: dict, cell: dict) -> ObjectiveSpec:
    family = TASK_FAMILY[cfg["task"]][1]
    beta = float(cfg["objective"]["beta"])
    return ObjectiveSpec(m=int(cell["m"]), t=float(cell["t"]), beta=beta, family=family,
                         frequentist=cell["frequentist"])


def cell_name(cell: dict) -> str:
    if cell["frequentist"]:
        return f"freq-eps{cell['epsilon']:g}"
    return f"m{cell['m']}-t{cell['t']:g}-eps{cell['epsilon']:g}"


# ---------------------------------------------------------------------------
# data and evaluation per task


def _streams(seed: int, cell_index: int, epsilon: float):
    """rngs for one (cell, seed): data depends only on seed and ε so cells are paired."""
    data_rng = np.random.default_rng(seed)
    cont_rng = np.random.default_rng([seed, 1, int(round(epsilon * 1e6))])
    cell_seq = np.random.SeedSequence([seed, cell_index])
    train_seed, eval_seed = (int(s) for s in cell_seq.generate_state(2))
    return data_rng, cont_rng, train_seed, np.random.default_rng(eval_seed)


def _make_data(cfg: dict, epsilon: float, data_rng, cont_rng):
    task, d = cfg["task"], cfg["data"]
    n_tr, n_te = int(d.get("n_train", 300)), int(d.get("n_test", 1000))
    extra = {}
    if task == "channel-gain-density":
        train, test = gen_channel_gain(n_tr, data_rng), gen_channel_gain(n_te, data_rng)
    elif task == "synthetic-amc":
        k, dim = int(d.get("classes", 8)), int(d.get("dim", 16))
        train, test = gen_classification(n_tr, k, data_rng, dim), gen_classification(n_te, k, data_rng, dim)
    elif task == "synthetic-localization":
        train, test = gen_localization(n_tr, data_rng), gen_localization(n_te, data_rng)
    else:
        spread, length = float(d.get("delay_spread", 100.0)), int(d.get("length", 128))
        amp = float(d.get("amplitude", 0.15))
        train = gen_multipath(n_tr, spread, data_rng, length, amp)
        test = gen_multipath(n_te, spread, data_rng, length, amp)
        extra["ood"] = gen_multipath(n_te, float(d.get("ood_delay_spread", 3 * spread)), data_rng, length, amp)
    params = dict(d.get("contamination", {}))
    if task == "channel-vae":
        params.setdefault("delay_spread", float(d.get("delay_spread", 100.0)))
        params.setdefault("amplitude", float(d.get("amplitude", 0.15)))
    train = contaminate(train, ContaminationSpec(epsilon, d.get("ood", DEFAULT_OOD[task]), params), cont_rng)
    if d.get("outliers"):
        train = append_points(train, d["outliers"])
    return train, test, extra


def _grid(cfg: dict) -> np.ndarray:
    g = cfg["eval"].get("grid", {})
    return np.linspace(float(g.get("lo", -1.5)), float(g.get("hi", 2.5)), int(g.get("points", 801)))


def _local_maxima(x: np.ndarray, y: np.ndarray) -> list[float]:
    inner = (y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:])
    return [float(v) for v in x[1:-1][inner]]


def _evaluate(cfg, model, report, train, test, extra, rng, outdir: Path) -> dict:
    task, ev = cfg["task"], cfg["eval"]
    q = report.posterior
    thetas = q.draw(rng.standard_normal((ev["test_m"], q.d)))
    out: dict = {}
    if task == "channel-gain-density":
        out["nll"] = nll_from_log(predictive_log_prob(model, thetas, test.features))
        grid = _grid(cfg)
        dens = model.density(thetas, grid).mean(0)
        out["grid_mass"] = float(np.trapezoid(dens, grid))
        out["modes"] = _local_maxima(grid, dens)
        pts = cfg["data"].get("outliers") or []
        if pts:
            at = np.exp(predictive_log_prob(model, thetas, np.asarray(pts, float)))
            out["density_at_outliers"] = at.tolist()
            out["density_at_outlier"] = float(at[0])
        with open(outdir / "predictive.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "density"])
            w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(grid, dens))
    elif task == "synthetic-amc":
        probs = model.predict_proba(thetas, test.features).mean(0)
        out["accuracy"] = accuracy(probs, test.targets)
        out["ece"] = ece(probs, test.targets, int(ev.get("bins", 10)))
        out["nll"] = nll_from_log(predictive_log_prob(model, thetas, test.features, test.targets))
        reliability_diagram(probs, test.targets, int(ev.get("bins", 10))).to_csv(outdir / "reliability.csv")
    elif task == "synthetic-localization":
        squared = bool(ev.get("squared_mse", False))
        out["mse"] = mse(model.mean(thetas, test.features).mean(0), test.targets, squared=squared)
        out["mse_squared"] = squared
        out["nll"] = nll_from_log(predictive_log_prob(model, thetas, test.features, test.targets))
    else:
        n_lat = int(ev.get("latent_draws", 200))
        gen = generate_samples(model, thetas, int(ev.get("generated", test.features.shape[0])), rng)
        out["mmd"] = mmd(gen, test.features)
        id_score = model_log_density(model, thetas, test.features, n_lat, rng)
        ood_score = model_log_density(model, thetas, extra["ood"].features, n_lat, rng)
        out["auroc"] = auroc(id_score, ood_score)
    return out


# ---------------------------------------------------------------------------
# running


def run_cell(cfg: dict, chash: str, cell_index: int, seed: int, out_root: str) -> dict:
    """Fit and evaluate one (cell, seed); writes its files and returns the metrics record."""
    cell = cfg["cells"][cell_index]
    data_rng, cont_rng, train_seed, eval_rng = _streams(seed, cell_index, float(cell["epsilon"]))
    train, test, extra = _make_data(cfg, float(cell["epsilon"]), data_rng, cont_rng)
    model_spec = dict(cfg["model"])
    if cfg["task"] == "channel-vae":
        model_spec.setdefault("input_dim", train.features.shape[1])
    model = model_from_spec(model_spec)
    spec = _objective(cfg, cell)
    tc = TrainConfig.from_dict(cfg["training"] | {"seed": train_seed})
    outdir = Path(out_root) / f"{cfg['task']}-{chash}-{cell_name(cell)}-seed{seed}"
    outdir.mkdir(parents=True, exist_ok=True)
    report = fit(model, spec, train, tc, GaussianPrior.from_dict(cfg["prior"]))
    report.write_curves(outdir / "loss-curves.csv")
    metrics = _evaluate(cfg, model, report, train, test, extra, eval_rng, outdir)
    record = {
        "task": cfg["task"],
        "config_hash": chash,
        "seed": seed,
        "cell_index": cell_index,
        "m": spec.m,
        "t": spec.t,
        "epsilon": float(cell["epsilon"]),
        "beta": spec.beta,
        "frequentist": spec.frequentist,
        "test_m": cfg["eval"]["test_m"],
        "metrics": metrics,
        "train": report.to_dict() | {"posterior": None},
        "train_outliers": int(train.is_outlier.sum()),
    }
    with open(outdir / "metrics.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    report.posterior.save(outdir / "posterior.json", report.prior)
    return record


def _workers(jobs: int) -> int:
    cap = os.environ.get("ROBAYES_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer ROBAYES_THREADS=%r", cap)
    return max(1, min(n, jobs))


def run_config(cfg: dict, out: str | Path, seed_override: int | None = None) -> list[dict]:
    """Run every cell × seed of a validated config. Training failures propagate."""
    # hashed before the override so a single-seed rerun names the same files
    chash = config_hash(cfg)
    if seed_override is not None:
        cfg = cfg | {"eval": cfg["eval"] | {"seeds": [seed_override]}}
    jobs = [(i, s) for s in cfg["eval"]["seeds"] for i in range(len(cfg["cells"]))]
    workers = _workers(len(jobs))
    if workers == 1:
        return [run_cell(cfg, chash, i, s, str(out)) for i, s in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_cell, cfg, chash, i, s, str(out)) for i, s in jobs]
        return [f.result() for f in futs]


def _summary_line(rec: dict) -> str:
    parts = [f"{k}={v:.4f}" for k, v in rec["metrics"].items() if isinstance(v, float)]
    tag = "freq" if rec["frequentist"] else f"m={rec['m']} t={rec['t']:g}"
    return f"{tag:<14} eps={rec['epsilon']:<5g} seed={rec['seed']:<4} " + " ".join(parts)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        records = run_config(cfg, args.out, args.seed_override)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as err:
        print(f"training failed: {err}", file=sys.stderr)
        return EXIT_TRAINING
    for rec in records:
        print(_summary_line(rec))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

REPORT_COLUMNS = ["task", "m", "t", "epsilon", "seed", "metric", "value"]


def collect(dirs) -> list[dict]:
    """Long-format rows from every metrics.json under the given directories."""
    rows = []
    for d in dirs:
        found = sorted(Path(d).rglob("metrics.json")) if Path(d).is_dir() else []
        if not found:
            log.warning("no metrics.json under %s; skipped", d)
        for path in found:
            try:
                rec = json.loads(path.read_text())
                metrics = rec["metrics"]
            except (json.JSONDecodeError, KeyError) as err:
                log.warning("unreadable metrics in %s (%s); skipped", path, err)
                continue
            m = "freq" if rec.get("frequentist") else rec["m"]
            for name, value in sorted(metrics.items()):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    continue
                rows.append({"task": rec["task"], "m": m, "t": rec["t"], "epsilon": rec["epsilon"],
                             "seed": rec["seed"], "metric": name, "value": float(value)})
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and sample std over seeds for each (task, m, t, epsilon, metric)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["task"], str(r["m"]), r["t"], r["epsilon"], r["metric"]), []).append(r["value"])
    out = []
    for key, vals in sorted(groups.items()):
        v = np.asarray(vals)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(dict(zip(["task", "m", "t", "epsilon", "metric"], key)) |
                   {"mean": float(v.mean()), "std": std, "n": int(v.size)})
    return out


def cmd_report(args) -> int:
    if not args.dirs:
        print("report: at least one directory is required", file=sys.stderr)
        return EXIT_CONFIG
    rows = collect(args.dirs)
    out = sys.stdout if args.csv in (None, "-") else open(args.csv, "w", newline="")
    try:
        w = csv.DictWriter(out, REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    for g in aggregate(rows):
        print(f"{g['task']:<24} m={g['m']:<5} t={g['t']:<5g} eps={g['epsilon']:<5g} "
              f"{g['metric']:<10} {g['mean']:.4f} ± {g['std']:.4f} (n={g['n']})", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robayes", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every sweep cell and seed of a config")
    r.add_argument("config")
    r.add_argument("--out", default="runs")
    r.add_argument("--seed-override", type=int, default=None)
    r.set_defaults(func=cmd_run)
    rep = sub.add_parser("report", help="merge metrics.json files into one long CSV")
    rep.add_argument("dirs", nargs="*")
    rep.add_argument("--csv", default=None, help="write the table here instead of stdout")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
