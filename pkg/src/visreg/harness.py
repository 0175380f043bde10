"""Orchestration: seeded training cells, evaluation grids, bound reports and
the bundled reproduction pipelines.  All outputs are CSV or JSON."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import net as nn
from .agents import train
from .agents.common import ConfigError
from .config import ExperimentConfig, dump, resolve
from .randomizers import Randomizer, xi

log = logging.getLogger("visreg")

OUT_ENV = "VISREG_OUT"
CURVE_COLUMNS = ["episode", "return", "rl_loss", "reg_loss", "epsilon", "steps", "wall_ms"]


def out_root(cli_value: str | None = None, cfg: ExperimentConfig | None = None) -> Path:
    if cli_value:
        return Path(cli_value)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("runs")


def run_dir(cfg: ExperimentConfig, root: Path) -> Path:
    return Path(root) / cfg.name


def derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def cell_name(regime: str, lam: float, index: int) -> str:
    return f"{regime}-lam{lam:g}-s{index}"


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str], provenance: dict) -> None:
    buf = io.StringIO()
    for k, v in provenance.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


# --- training -------------------------------------------------------------------

def _train_cell(cfg_dict: dict, regime: str, lam: float, index: int, cell_dir: str) -> dict:
    from .config import from_dict
    cfg = from_dict(cfg_dict)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, index)
    key = {"training": cfg.training_digest(), "regime": regime, "lam": lam, "index": index}
    record = {"cell": cell_dir.name, "regime": regime, "lam": lam, "seed_index": index,
              "seed": seed, "checkpoint": None, "curve": str(cell_dir / "curve.csv")}
    marker = cell_dir / "cell.json"
    ckpt = cell_dir / "checkpoint.json"
    if marker.exists() and ckpt.exists():
        done = json.loads(marker.read_text())
        if done.get("key") == key:
            record.update(checkpoint=str(ckpt), status="ok", reused=True,
                          wall_s=done.get("wall_s", 0.0))
            return record
    t0 = time.perf_counter()
    try:
        agent_cfg = cfg.agent_config(regime, lam)
        env = cfg.make_env()
        prov = cfg.provenance()
        if agent_cfg.episodes == 0:
            write_csv(cell_dir / "curve.csv", [], CURVE_COLUMNS, prov)
            record["status"] = "no-op"
            return record
        res = train(agent_cfg, env, np.random.default_rng(seed))
        res.net.seed = seed
        nn.save(res.net, ckpt, {"regime": regime, "lam": lam, "seed_index": index,
                                "trainer": agent_cfg.trainer, "n_actions": env.n_actions, **prov})
        write_csv(cell_dir / "curve.csv", res.curve, CURVE_COLUMNS, prov)
        wall = time.perf_counter() - t0
        marker.write_text(json.dumps({"key": key, "wall_s": wall}))
        record.update(checkpoint=str(ckpt), status="ok", wall_s=wall)
    except Exception as exc:  # a failing cell must not take its siblings down
        log.exception("cell %s failed", cell_dir.name)
        record.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return record


def run_train(cfg: ExperimentConfig, root=None, workers: int = 1) -> dict:
    """Train every (regime, lambda, seed) cell and write the run manifest."""
    cfg = resolve(cfg)
    rdir = run_dir(cfg, out_root(root, cfg))
    rdir.mkdir(parents=True, exist_ok=True)
    dump(cfg, rdir / "config.resolved.yaml")
    cells = cfg.cells()
    t0 = time.perf_counter()
    # cells live under the training digest so experiments that differ only in
    # their analysis plan share checkpoints
    cdir = Path(out_root(root, cfg)) / "cells" / cfg.training_digest()
    args = [(cfg.to_dict(), regime, lam, i, str(cdir / cell_name(regime, lam, i)))
            for regime, lam, i in cells]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_train_cell, *zip(*args)))
    else:
        records = []
        for a in args:
            log.info("training %s", Path(a[-1]).name)
            records.append(_train_cell(*a))
    manifest = {
        "experiment": cfg.name,
        "config_hash": cfg.digest(),
        "artifact_version": __version__,
        "master_seed": cfg.seed,
        "cells": records,
        "status": _overall(records),
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    write_json(rdir / "manifest.json", manifest)
    return manifest


def _overall(records: list[dict]) -> str:
    if not records:
        return "no-op"
    if any(r["status"] == "error" for r in records):
        return "error"
    if all(r["status"] == "no-op" for r in records):
        return "no-op"
    return "ok"


def load_manifest(cfg: ExperimentConfig, root=None) -> dict:
    path = run_dir(cfg, out_root(root, cfg)) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}; run 'train' first")
    return json.loads(path.read_text())


# --- evaluation --------------------------------------------------------------------

def grid_domains(cfg: ExperimentConfig, name: str) -> list[Randomizer]:
    n = cfg.analysis.grid_size
    space = cfg.space()
    if name == "rb_plane":
        return an.rb_plane(n)
    if name == "gray_diagonal":
        return an.gray_diagonal(11)
    if name in ("space_grid", "xi"):
        return space.grid(n)
    raise ConfigError(f"analysis.grids: unknown grid preset {name!r}")


def _load_cell(rec: dict) -> nn.Network:
    if not rec.get("checkpoint") or not Path(rec["checkpoint"]).exists():
        raise FileNotFoundError(f"missing checkpoint for cell {rec['cell']}")
    return nn.load(rec["checkpoint"])


def _eval_seed(cfg: ExperimentConfig, rec: dict) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, rec["seed_index"], 1])


def run_eval(cfg: ExperimentConfig, manifest: dict, root=None, grids=None) -> dict:
    """One EvalGrid CSV per checkpoint per grid preset."""
    cfg = resolve(cfg)
    grids = list(grids if grids is not None else cfg.analysis.grids)
    if not grids:
        raise ConfigError("analysis.grids: no evaluation grids requested")
    domains = {g: grid_domains(cfg, g) for g in grids}
    for g, d in domains.items():
        if not d:
            raise ConfigError(f"analysis.grids: grid {g!r} has no domains")
    rdir = run_dir(cfg, out_root(root, cfg))
    (rdir / "eval").mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance()
    results = {"files": [], "errors": []}
    for rec in manifest["cells"]:
        if rec["status"] == "no-op":
            continue
        try:
            net = _load_cell(rec)
        except FileNotFoundError as exc:
            results["errors"].append({"cell": rec["cell"], "error": str(exc)})
            continue
        for g, doms in domains.items():
            env = cfg.make_env()
            grid = an.evaluate_grid(net, env, doms, cfg.analysis.episodes_per_domain,
                                    cfg.analysis.eval_mode, _eval_seed(cfg, rec))
            path = rdir / "eval" / f"{rec['cell']}__{g}.csv"
            rows = grid.rows()
            write_csv(path, rows, list(rows[0].keys()), {**prov, "cell": rec["cell"], "grid": g})
            results["files"].append(str(path))
    return results


def read_eval(path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_csv(path)
    params = np.array([[float(v) for k, v in r.items() if k.startswith("p")] for r in rows])
    means = np.array([float(r["mean"]) for r in rows])
    return params, means


# --- bounds -------------------------------------------------------------------------

def run_bounds(cfg: ExperimentConfig, manifest: dict, root=None) -> dict:
    """Per checkpoint: K, delta, both bounds, the measured gap and gap <= tight."""
    cfg = resolve(cfg)
    a = cfg.analysis
    if a.bounds_mode == "estimate" and (a.lipschitz_grid is None or a.state_samples is None):
        raise ConfigError("analysis.lipschitz_grid/state_samples: estimate mode needs discretization settings")
    env = cfg.make_env()
    space = cfg.space()
    rows = []
    for rec in manifest["cells"]:
        if rec["status"] == "no-op":
            continue
        row = {"cell": rec["cell"], "regime": rec["regime"], "lam": rec["lam"],
               "seed_index": rec["seed_index"], "mode": a.bounds_mode}
        try:
            net = _load_cell(rec)
        except FileNotFoundError as exc:
            row["error"] = str(exc)
            rows.append(row)
            continue
        if a.bounds_mode == "exact":
            phis = tuple(space.grid())
            if len(phis) != 2:
                raise ConfigError("exact bounds compare exactly two xi values")
            rep = an.gridworld_bound_report(net, phis, env.n_actions, env.spec.time_limit,
                                            env.spec.gamma, env.spec.r_max, a.norm)
        else:
            rep = _estimate_bounds(cfg, net, env, rec)
        row.update(rep)
        rows.append(row)
    doc = {"provenance": cfg.provenance(), "rows": rows}
    rdir = run_dir(cfg, out_root(root, cfg))
    rdir.mkdir(parents=True, exist_ok=True)
    write_json(rdir / "bounds.json", _jsonable(doc))
    return doc


def _estimate_bounds(cfg, net, env, rec) -> dict:
    """Lower estimate of K on a colour lattice and a reference-rollout state sample."""
    a = cfg.analysis
    space = cfg.space()
    ref = space.reference
    payloads = an.reference_payloads(net, env, ref, _eval_seed(cfg, rec), max_states=a.state_samples)
    phis = space.grid(a.lipschitz_grid)
    pi = an.greedy_policy(net, env.n_actions)
    K = an.lipschitz_constant(pi, phis, payloads, a.norm)
    far = max(phis, key=lambda p: float(np.linalg.norm(np.subtract(p.params, ref.params))))
    delta = an.sup_distance(ref, far, payloads, a.norm)
    tight, loose = an.prop1_bounds(an.BoundInputs(K, env.spec.r_max, env.spec.gamma, delta,
                                                  env.spec.time_limit))
    grid = an.evaluate_grid(net, env, [ref, far], a.episodes_per_domain, a.eval_mode,
                            _eval_seed(cfg, rec))
    gap = abs(grid.means[0] - grid.means[1])
    return {"K": K, "r_max": env.spec.r_max, "gamma": env.spec.gamma, "delta": delta,
            "horizon": env.spec.time_limit, "tight": tight, "loose": loose,
            "empirical_gap": gap, "gap_within_tight": bool(gap <= tight + 1e-12),
            "far_domain": list(far.params)}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# --- features -------------------------------------------------------------------------

def run_export_features(cfg: ExperimentConfig, manifest: dict, root=None) -> list[str]:
    cfg = resolve(cfg)
    a = cfg.analysis
    env = cfg.make_env()
    ref = cfg.space().reference
    doms = grid_domains(cfg, a.feature_domains)
    rdir = run_dir(cfg, out_root(root, cfg))
    (rdir / "features").mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in manifest["cells"]:
        if rec["status"] != "ok":
            continue
        net = _load_cell(rec)
        payloads = _feature_states(cfg, net, env, ref, rec)
        value_fn = _value_fn(net, cfg, env)
        path = rdir / "features" / f"{rec['cell']}.csv"
        an.export_features(net, payloads, doms, path, value_fn, cfg.provenance())
        paths.append(str(path))
    return paths


def _feature_states(cfg, net, env, ref, rec):
    if cfg.env.kind == "gridworld":
        from .envs import GridWorld, grid_payload
        return np.stack([grid_payload(s) for s in GridWorld.positions()])
    return an.reference_payloads(net, env, ref, _eval_seed(cfg, rec),
                                 max_states=cfg.analysis.feature_states)


def _value_fn(net, cfg, env):
    if cfg.agent.trainer == "dqn":
        return an.q_value(net, env.n_actions)
    return an.baseline_value(net, env.n_actions)


# --- reproduction pipelines ---------------------------------------------------------------

def _cells_by(manifest, regime=None):
    return [r for r in manifest["cells"] if r["status"] == "ok" and (regime is None or r["regime"] == regime)]


def final_return(rec: dict, window: float) -> float:
    rows = read_csv(Path(rec["curve"]))
    rets = [float(r["return"]) for r in rows]
    n = max(1, int(round(window * len(rets))))
    return float(np.mean(rets[-n:]))


def run_repro(name: str, root=None, workers: int = 1, seeds: int | None = None,
              cfg: ExperimentConfig | None = None) -> dict:
    """Train, evaluate and summarise one bundled experiment."""
    from .config import preset
    cfg = cfg or preset(name)
    if seeds is not None:
        cfg.analysis.seeds = seeds
        cfg.analysis.seeds_per_regime = {}
    manifest = run_train(cfg, root, workers)
    if manifest["status"] == "error":
        raise RuntimeError("training failed for some cells; see manifest.json")
    summary = SUMMARIES[name](cfg, manifest, root)
    rdir = run_dir(cfg, out_root(root, cfg))
    cols = list(summary["table"][0].keys()) if summary["table"] else []
    write_csv(rdir / f"summary_{name}.csv", summary["table"], cols, cfg.provenance())
    if "points" in summary:
        pcols = list(summary["points"][0].keys())
        write_csv(rdir / f"points_{name}.csv", summary["points"], pcols, cfg.provenance())
    return summary


def _sum_gridworld_bound(cfg, manifest, root):
    doc = run_bounds(cfg, manifest, root)
    points = [{"lam": r["lam"], "seed_index": r["seed_index"], "K": r["K"], "delta": r["delta"],
               "tight": r["tight"], "empirical_gap": r["empirical_gap"],
               "gap_within_tight": r["gap_within_tight"]} for r in doc["rows"] if "K" in r]
    table = []
    for lam in sorted({p["lam"] for p in points}):
        ps = [p for p in points if p["lam"] == lam]
        table.append({"lam": lam, "seeds": len(ps),
                      "median_K": float(np.median([p["K"] for p in ps])),
                      "median_tight": float(np.median([p["tight"] for p in ps])),
                      "median_gap": float(np.median([p["empirical_gap"] for p in ps])),
                      "all_within_bound": all(p["gap_within_tight"] for p in ps)})
    return {"table": table, "points": points}


def _sum_gridworld_paths(cfg, manifest, root):
    scale = cfg.space().xi_scale
    vals = cfg.space().values
    table = []
    for regime in cfg.analysis.regimes:
        nets = [_load_cell(r) for r in _cells_by(manifest, regime)]
        table.append({"agent": regime, "seeds": len(nets),
                      "same_path_probability": an.same_path_probability(nets, vals, 2, scale)})
    return {"table": table}


def _sum_output_reg(cfg, manifest, root):
    space = cfg.space()
    phis = space.grid()
    from .envs import GridWorld, grid_payload
    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    table = []
    for lam in cfg.analysis.lambdas:
        recs = [r for r in _cells_by(manifest) if r["lam"] == lam]
        finals, tvs, evals = [], [], []
        for r in recs:
            net = _load_cell(r)
            finals.append(final_return(r, cfg.analysis.final_window))
            tvs.append(an.policy_tv(net, payloads, phis[0], phis[1], 2))
            evals.append(an.gridworld_return(an.softmax_policy(net, 2), space.reference))
        table.append({"lam": lam, "seeds": len(recs),
                      "median_final_return": float(np.median(finals)),
                      "median_expected_return": float(np.median(evals)),
                      "median_policy_tv": float(np.median(tvs))})
    return {"table": table}


def _cartpole_eval(cfg, manifest, root, grid_name):
    res = run_eval(cfg, manifest, root, grids=[grid_name])
    rdir = run_dir(cfg, out_root(root, cfg))
    out = {}
    for rec in _cells_by(manifest):
        params, means = read_eval(rdir / "eval" / f"{rec['cell']}__{grid_name}.csv")
        out[rec["cell"]] = (rec, params, means)
    return out, res


def _sum_cartpole_grid(cfg, manifest, root):
    per_cell, _ = _cartpole_eval(cfg, manifest, root, "rb_plane")
    table = []
    for regime in cfg.analysis.regimes:
        cells = [v for v in per_cell.values() if v[0]["regime"] == regime]
        stds = [float(np.std(m)) for _, _, m in cells]
        means = [float(np.mean(m)) for _, _, m in cells]
        table.append({"agent": regime, "seeds": len(cells),
                      "median_across_domain_std": float(np.median(stds)),
                      "median_mean_return": float(np.median(means))})
    return {"table": table}


def _sum_cartpole_extrapolation(cfg, manifest, root):
    per_cell, _ = _cartpole_eval(cfg, manifest, root, "gray_diagonal")
    table = []
    for regime in cfg.analysis.regimes:
        cells = [v for v in per_cell.values() if v[0]["regime"] == regime]
        if not cells:
            continue
        xs = cells[0][1][:, 0]
        M = np.stack([m for _, _, m in cells])
        for j, x in enumerate(xs):
            table.append({"agent": regime, "x": float(x), "seeds": len(cells),
                          "mean_return": float(np.mean(M[:, j])),
                          "median_return": float(np.median(M[:, j]))})
    return {"table": table}


def _sum_value_std(cfg, manifest, root):
    env = cfg.make_env()
    space = cfg.space()
    doms = space.grid(cfg.analysis.grid_size)
    table = []
    for regime in cfg.analysis.regimes:
        stds = []
        for rec in _cells_by(manifest, regime):
            net = _load_cell(rec)
            payloads = an.reference_payloads(net, env, space.reference, _eval_seed(cfg, rec),
                                             max_states=cfg.analysis.feature_states)
            stds.append(an.value_std(_value_fn(net, cfg, env), payloads, doms))
        table.append({"agent": regime, "seeds": len(stds),
                      "median_value_std": float(np.median(stds)) if stds else float("nan"),
                      "mean_value_std": float(np.mean(stds)) if stds else float("nan")})
    return {"table": table}


def _sum_regimes(cfg, manifest, root):
    table = []
    for regime in cfg.analysis.regimes:
        recs = _cells_by(manifest, regime)
        table.append({"agent": regime, "seeds": len(recs),
                      "median_final_return": float(np.median([final_return(r, cfg.analysis.final_window) for r in recs]))
                      if recs else float("nan")})
    return {"table": table}


SUMMARIES = {
    "gridworld_bound": _sum_gridworld_bound,
    "gridworld_paths": _sum_gridworld_paths,
    "output_reg_tradeoff": _sum_output_reg,
    "cartpole_grid": _sum_cartpole_grid,
    "cartpole_extrapolation": _sum_cartpole_extrapolation,
    "value_std": _sum_value_std,
    "gridworld_regimes": _sum_regimes,
    "smoke": _sum_regimes,
}


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0].keys())
    cells = [[c for c in cols]] + [[f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
