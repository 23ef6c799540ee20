"""Command-line driver: ``gpcnav <command> --config run.json``.

Commands write into ``--out-dir`` through a staging directory; a command's
files (and its manifest) appear only when the command succeeds.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import itertools
import json
import math
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import harness as H
from .gpc import GpcModel, MegpcModel, evaluate, sobol_first_order
from .perception import PerceptionModel, heldout_rmse, train_perception_model
from .rng import STREAM_HELDOUT, CounterRNG
from .scenarios import ConfigError, build_scenario
from .vehicle import AncillaryClassifier, classifier_accuracy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULT_CONFIG = {
    "perception": {"grid": [11, 11], "samples_per_point": 350, "degree": None, "degrees": [1, 2, 3, 4, 5, 6],
                   "folds": 5, "normality_alpha": 0.01, "heldout_points": 1000},
    "gpc": {"order": 4, "max_nodes": 10**6},
    "simulation": {"gas_samples": 10000, "mcs_samples": 1000, "steps": 100, "alpha": 0.05, "bootstrap": 1000},
    "output": {},
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = set(raw) - {"scenario", "perception", "gpc", "simulation", "output"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config section")
    if "scenario" not in raw:
        raise ConfigError("scenario", "missing section")
    if not isinstance(raw["scenario"], dict) or "name" not in raw["scenario"]:
        raise ConfigError("scenario.name", "missing scenario name")
    cfg = _merge(DEFAULT_CONFIG, raw)
    _check(cfg)
    return cfg


def _positive_int(cfg, section, key, minimum=1):
    v = cfg[section][key]
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(f"{section}.{key}", f"must be an integer >= {minimum}")


def _check(cfg):
    for key in ("gas_samples", "mcs_samples", "steps", "bootstrap"):
        _positive_int(cfg, "simulation", key)
    _positive_int(cfg, "perception", "samples_per_point", 2)
    _positive_int(cfg, "gpc", "order", 1)
    _positive_int(cfg, "gpc", "max_nodes")
    g = cfg["perception"]["grid"]
    if not isinstance(g, list) or not all(isinstance(n, int) and n >= 2 for n in g):
        raise ConfigError("perception.grid", "must be a list of integers >= 2")
    d = cfg["perception"]["degree"]
    if d is not None and (not isinstance(d, int) or d < 1):
        raise ConfigError("perception.degree", "must be null or an integer >= 1")
    a = cfg["simulation"]["alpha"]
    if not (isinstance(a, (int, float)) and 0 < a < 1):
        raise ConfigError("simulation.alpha", "must lie in (0, 1)")


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _scenario(cfg):
    scn = build_scenario(cfg["scenario"])
    if scn.oracle is not None and len(cfg["perception"]["grid"]) != scn.state_dim:
        raise ConfigError("perception.grid", f"needs {scn.state_dim} levels for {scn.name}")
    return scn


# ---------------------------------------------------------------------------
# output plumbing


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return "" if x is None else str(x)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False, ensure_ascii=False)
        fh.write("\n")


class Run:
    """Staging area for one command's outputs plus its manifest."""

    def __init__(self, command: str, out_dir: str, cfg: dict, seed: int, scenario: str):
        self.command, self.out_dir, self.cfg, self.seed, self.scenario = command, out_dir, cfg, seed, scenario
        os.makedirs(out_dir, exist_ok=True)
        self.stage = tempfile.mkdtemp(prefix=f".staging-{command}-", dir=out_dir)
        self.files: dict[str, str] = {}
        self.extra: dict = {}
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def path(self, key: str, name: str) -> str:
        self.files[key] = name
        return os.path.join(self.stage, name)

    def commit(self) -> str:
        for name in self.files.values():
            os.replace(os.path.join(self.stage, name), os.path.join(self.out_dir, name))
        p, s, g = self.cfg["perception"], self.cfg["simulation"], self.cfg["gpc"]
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "scenario": self.scenario,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "artifacts": {k: os.path.join(self.out_dir, v) for k, v in self.files.items()},
            "parameters": {"grid": p["grid"], "samples_per_point": p["samples_per_point"], "degree": p["degree"],
                           "order": g["order"], "gas_samples": s["gas_samples"], "mcs_samples": s["mcs_samples"],
                           "steps": s["steps"]},
            **self.extra,
        }
        name = f"manifest_{self.command.replace('-', '_')}.json"
        write_json(os.path.join(self.stage, name), manifest)
        os.replace(os.path.join(self.stage, name), os.path.join(self.out_dir, name))
        shutil.rmtree(self.stage, ignore_errors=True)
        return os.path.join(self.out_dir, name)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


# ---------------------------------------------------------------------------
# pipeline pieces shared by commands


def _train(scn, cfg, seed, threads, **over) -> PerceptionModel | None:
    if scn.oracle is None:
        return None
    p = {**cfg["perception"], **over}
    return train_perception_model(scn.perception_grid(p["grid"]), scn.oracle, p["samples_per_point"],
                                  CounterRNG(seed), degree=p["degree"], degrees=p["degrees"], folds=p["folds"],
                                  normality_alpha=p["normality_alpha"], threads=threads)


def _build(scn, cfg, m_per, threads, order=None):
    return H.build_surrogate(scn, m_per, order or cfg["gpc"]["order"], max_nodes=cfg["gpc"]["max_nodes"],
                             threads=threads)


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(what, f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"invalid JSON in {path}: {exc}") from None


def load_surrogate(path: str, scn):
    d = _load_json(path, "--surrogate")
    if d.get("format") != "gpcnav.surrogate":
        raise ConfigError("--surrogate", "not a surrogate file")
    if d.get("scenario") != scn.name:
        raise ConfigError("scenario.name", f"surrogate was built for {d.get('scenario')!r}, config says {scn.name!r}")
    m = d["model"]
    model = (MegpcModel.from_dict(m, AncillaryClassifier.from_dict) if m["format"] == "gpcnav.megpc"
             else GpcModel.from_dict(m))
    m_per = PerceptionModel.from_dict(d["perception"]) if d.get("perception") else None
    return model, m_per


def _sim_cfg(scn, cfg, seed, gas: bool):
    s = cfg["simulation"]
    return H.SimulationConfig(s["gas_samples"] if gas else s["mcs_samples"], s["steps"], scn.init_dist, scn.safe,
                              seed, scn.name, scn.other_dist, scn.initial_category if scn.categorical else None,
                              0 if gas else H.MCS_STREAM_OFFSET)


def _gas(scn, cfg, model, seed, threads):
    step = H.SurrogateStep(model, scn.state_dim, scn.raw_dim, scn.wrap_dims)
    return H.estimate_safe_probability(_sim_cfg(scn, cfg, seed, True), step, threads)


def _mcs(scn, cfg, seed, threads):
    return H.estimate_safe_probability(_sim_cfg(scn, cfg, seed, False), H.OracleStep(scn), threads)


def _psafe_rows(ens, B, alpha, seed, stream_step):
    rng = CounterRNG(seed)
    for t in range(ens.steps):
        lo, hi = H.bootstrap_ci(int(ens.survivors[t]), ens.n_samples, 1 - alpha, B, rng, step=stream_step + t)
        yield [t + 1, int(ens.survivors[t]), float(ens.p_safe[t]), lo, hi]


def _state_rows(ens, scn):
    for t in range(ens.steps):
        S, ids = ens.states[t], ens.ids[t]
        cats = ens.categories[t] if ens.categories else None
        for r in range(S.shape[0]):
            row = [t + 1, int(ids[r])] + [float(v) for v in S[r]]
            if cats is not None:
                row.append(scn.categories[int(cats[r])])
            yield row


def _state_header(scn):
    return ["step", "sample"] + list(scn.state_names) + (["advisory"] if scn.categorical else [])


def _heldout_points(scn, n, seed):
    lo, hi = (np.array(b, dtype=float) for b in scn.perception_box)
    u = CounterRNG(seed).uniform(STREAM_HELDOUT, 0, np.arange(n), len(lo))
    return lo + u * (hi - lo)


# ---------------------------------------------------------------------------
# commands


def cmd_train_perception(args, cfg, scn, run: Run):
    if scn.oracle is None:
        raise ConfigError("scenario.name", f"{scn.name} uses ground-truth perception; nothing to train")
    m = _train(scn, cfg, args.seed, args.threads)
    write_json(run.path("perception_model", "perception.json"), m.to_dict())
    with open(run.path("training_summary", "perception_training.csv"), "w", encoding="utf-8") as fh:
        fh.write(m.training_csv())
    run.extra["perception"] = {"grid": list(m.summary["grid_levels"]), "samples_per_point": m.summary["count"],
                               "degree": m.degree,
                               "normality_failure_fraction": m.summary["normality_failure_fraction"]}


def cmd_build_surrogate(args, cfg, scn, run: Run):
    m_per = None
    if scn.oracle is not None:
        if args.perception:
            d = _load_json(args.perception, "--perception")
            try:
                m_per = PerceptionModel.from_dict(d)
            except (KeyError, ValueError) as exc:
                raise ConfigError("--perception", f"not a perception model: {exc}") from None
        else:
            m_per = _train(scn, cfg, args.seed, args.threads)
    model = _build(scn, cfg, m_per, args.threads)
    doc = {"format": "gpcnav.surrogate", "version": 1, "scenario": scn.name, "config_hash": config_hash(cfg),
           "model": model.to_dict(), "perception": m_per.to_dict() if m_per is not None else None}
    write_json(run.path("surrogate", "surrogate.json"), doc)
    if isinstance(model, MegpcModel):
        first = next(iter(model.elements.values()))
        info = {"elements": len(model.elements), "basis_size": len(first.basis),
                "node_evaluations": sum(e.node_evaluations for e in model.elements.values()),
                "input_dim": first.input_dim, "classifier": model.classifier.summary}
        g = scn.classifier_grid(scn.params["classifier"]["levels"])
        info["classifier_heldout_accuracy"] = classifier_accuracy(model.classifier, g.offset(), len(scn.categories),
                                                                  scn.acas.advisory)
    else:
        info = {"elements": 1, "basis_size": len(model.basis), "node_evaluations": model.node_evaluations,
                "input_dim": model.input_dim}
    run.extra["surrogate"] = info


def cmd_estimate(args, cfg, scn, run: Run):
    model, _ = load_surrogate(args.surrogate, scn)
    s = cfg["simulation"]
    gas = _gas(scn, cfg, model, args.seed, args.threads)
    write_csv(run.path("psafe_gas", "psafe_gas.csv"), ["step", "survivors", "p_safe", "ci_lo", "ci_hi"],
              _psafe_rows(gas, s["bootstrap"], s["alpha"], args.seed, 0))
    write_csv(run.path("states_gas", "states_gas.csv"), _state_header(scn), _state_rows(gas, scn))
    if args.baseline == "mcs":
        mcs = _mcs(scn, cfg, args.seed, args.threads)
        write_csv(run.path("psafe_mcs", "psafe_mcs.csv"), ["step", "survivors", "p_safe", "ci_lo", "ci_hi"],
                  _psafe_rows(mcs, s["bootstrap"], s["alpha"], args.seed, 100000))
        write_csv(run.path("states_mcs", "states_mcs.csv"), _state_header(scn), _state_rows(mcs, scn))
        rep = H.compare(gas, mcs, scn.state_names, alpha=s["alpha"], B=s["bootstrap"], seed=args.seed)
        write_json(run.path("comparison", "comparison.json"), rep.to_dict())
        run.extra["comparison"] = {"t_test_passes": rep.t_test_passes, "l2_error": rep.l2_error,
                                   "ks_max": rep.to_dict()["ks_max"]}


def _labelled(S, inputs, outputs):
    return {f"{i}→{o}": (None if not math.isfinite(S[a, b]) else float(S[a, b]))
            for a, i in enumerate(inputs) for b, o in enumerate(outputs)}


def cmd_sensitivity(args, cfg, scn, run: Run):
    model, _ = load_surrogate(args.surrogate, scn)
    inputs, outputs = scn.input_names(), list(scn.state_names)
    elements = model.elements if isinstance(model, MegpcModel) else {None: model}
    doc = {"inputs": inputs, "outputs": outputs, "mcs_samples": args.mcs_samples, "elements": {}}
    for code, (cat, m) in enumerate(elements.items()):
        S = sobol_first_order(m, on_zero="nan")
        entry = {"analytic": _labelled(S, inputs, outputs),
                 "zero_variance_outputs": [outputs[k] for k in np.flatnonzero(np.isnan(S).all(axis=0))]}
        if args.mcs_samples:
            est = H.sobol_mcs(lambda X, m=m: evaluate(m, X), m.basis.joint, args.mcs_samples, CounterRNG(args.seed),
                              step=code)
            entry["mcs"] = _labelled(est.indices, inputs, outputs)
        doc["elements"][cat if cat is not None else "model"] = entry
    write_json(run.path("sobol", "sobol.json"), doc)


SWEEP_KEYS = {"grid": ("perception", "grid"), "samples_per_point": ("perception", "samples_per_point"),
              "degree": ("perception", "degree"), "order": ("gpc", "order")}


def _load_sweep(path: str) -> list[dict]:
    d = _load_json(path, "--sweep")
    if not isinstance(d, dict) or not d or not any(d.values()):
        raise ConfigError("--sweep", "empty sweep")
    for k, v in d.items():
        if k not in SWEEP_KEYS:
            raise ConfigError(f"sweep.{k}", f"unknown sweep axis; choose from {sorted(SWEEP_KEYS)}")
        if not isinstance(v, list) or not v:
            raise ConfigError(f"sweep.{k}", "must be a nonempty list")
    keys = sorted(d)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(d[k] for k in keys))]


def cmd_ablation(args, cfg, scn, run: Run):
    combos = _load_sweep(args.sweep)
    mcs = _mcs(scn, cfg, args.seed, args.threads)
    held = _heldout_points(scn, cfg["perception"]["heldout_points"], args.seed) if scn.oracle is not None else None
    axes = sorted(combos[0])
    rows, times = [], []
    for combo in combos:
        c = copy.deepcopy(cfg)
        for k, v in combo.items():
            sec, key = SWEEP_KEYS[k]
            c[sec][key] = v
        t0 = time.perf_counter()
        try:
            _check(c)
            m_per = _train(scn, c, args.seed, args.threads)
            model = _build(scn, c, m_per, args.threads)
            gas = _gas(scn, c, model, args.seed, args.threads)
            rep = H.compare(gas, mcs, scn.state_names, alpha=c["simulation"]["alpha"], B=c["simulation"]["bootstrap"],
                            seed=args.seed)
            rmse = heldout_rmse(m_per, scn.oracle, held)["combined"] if m_per is not None else None
            deg = m_per.degree if m_per is not None else None
            row = [json.dumps(combo[k]) for k in axes] + ["ok", deg, rmse] + [float(x) for x in rep.ks_max]
            row += [rep.t_test_passes, rep.l2_error]
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            row = [json.dumps(combo[k]) for k in axes] + [f"error: {exc}".replace("\n", " "), None, None]
            row += [None] * len(scn.state_names) + [None, None]
        rows.append(row)
        times.append(time.perf_counter() - t0)
    header = axes + ["status", "degree", "heldout_rmse"] + [f"ks_max_{v}" for v in scn.state_names]
    header += ["t_test_passes", "l2_error"]
    write_csv(run.path("ablation", "ablation.csv"), header, rows)
    base = times[0] if times[0] > 0 else 1.0
    write_csv(run.path("ablation_timing", "ablation_timing.csv"), axes + ["seconds", "relative_time"],
              ([json.dumps(combo[k]) for k in axes] + [t, t / base] for combo, t in zip(combos, times)))


COMMANDS = {
    "train-perception": cmd_train_perception,
    "build-surrogate": cmd_build_surrogate,
    "estimate": cmd_estimate,
    "sensitivity": cmd_sensitivity,
    "ablation": cmd_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpcnav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--threads", type=int, default=1)
    sub.add_parser("train-perception", parents=[common], help="fit the perception model")
    p = sub.add_parser("build-surrogate", parents=[common], help="construct the GPC surrogate")
    p.add_argument("--perception", help="perception model file (trained in-process when omitted)")
    p = sub.add_parser("estimate", parents=[common], help="safe-probability estimation")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--baseline", choices=["none", "mcs"], default="none")
    p = sub.add_parser("sensitivity", parents=[common], help="first-order Sobol indices")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--mcs-samples", type=int, default=0, help="also estimate by Monte Carlo with n samples")
    p = sub.add_parser("ablation", parents=[common], help="perception-parameter sweep")
    p.add_argument("--sweep", required=True, help="JSON object mapping axis -> list of values")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = None
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        if getattr(args, "mcs_samples", 0) and args.mcs_samples < 1000:
            raise ConfigError("--mcs-samples", "must be 0 or >= 1000")
        cfg = load_config(args.config)
        scn = _scenario(cfg)
        run = Run(args.command, args.out_dir, cfg, args.seed, scn.name)
        COMMANDS[args.command](args, cfg, scn, run)
        manifest = run.commit()
        print(manifest)
        return EXIT_OK
    except ConfigError as exc:
        if run is not None:
            run.abort()
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError, FloatingPointError) as exc:
        if run is not None:
            run.abort()
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except H.NodeBudgetError as exc:
        if run is not None:
            run.abort()
        print(f"config error: gpc.order: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaseException:
        if run is not None:
            run.abort()
        raise


if __name__ == "__main__":
    sys.exit(main())
