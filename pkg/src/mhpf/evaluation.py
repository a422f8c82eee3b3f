"""Baselines, metrics, and the experiment harness.

Two reference filters bracket the hierarchy: BL1 is a flat bootstrap filter
over the single-trajectory leaf classes and BL2 the same filter over one
pooled class following the combined-corpus dynamics. Both ignore coarse
observations. Because every stochastic phase draws from a keyed substream,
BL1 reproduces the hierarchical filter's bottom level bit-for-bit (and BL2 a
one-class tree) under a shared seed, which the test suite exploits as an
oracle for the stack's bookkeeping.

The harness sweeps noise cells over scenarios x repeats, records per-step
squared error and tree-class distance of the MAP prediction against the
ground truth, and summarizes cells with rank-sum tests against BL1.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ranksums

from . import datasets
from .dynamics import build_dynamics
from .errors import InvalidInputError
from .filtration import single_class_tree, single_linkage
from .geometry import Trajectory, distance_matrix, load_trajectories
from .obsgen import ClassPointIndex, ObsConfig, bbox_diagonal, default_coarse_level, observation_plan
from .seeding import (PHASE_DATA, PHASE_DEPLETE, PHASE_INIT, PHASE_OBSERVE,
                      PHASE_PREDICT, PHASE_RESAMPLE, PHASE_SCENARIO,
                      as_seed_sequence, child_seed, substream)
from .stack import (CoarseObservation, FilterStack, FineObservation,
                    bounded_log_weights, class_masses, split_counts,
                    start_point_sampler, weighted_mean)

CONVERGENCE_FRACTION = 0.33


def mse(pred, truth) -> float:
    """Squared L2 distance between prediction and ground truth."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InvalidInputError("point dimensions differ")
    return float(((pred - truth) ** 2).sum())


def map_tree_distance(tree, map_node: int, truth_leaf: int, b: float) -> float:
    """Tree-class distance from a MAP node to the truth's ancestor alive at b."""
    anc = tree.ancestor_alive_at(truth_leaf, b)
    return tree.tree_class_distance(map_node, anc)


def convergence_time(series, root_birth: float,
                     threshold_fraction: float = CONVERGENCE_FRACTION):
    """First step after which the distance stays within the threshold ball.

    Returns the step index, or None if the series never settles below
    threshold_fraction * root_birth.
    """
    thr = threshold_fraction * root_birth
    last_bad = -1
    for i, v in enumerate(series):
        if v > thr:
            last_bad = i
    if last_bad == len(series) - 1:
        return None
    return last_bad + 1


class LeafParticleFilter:
    """Flat bootstrap filter over a fixed set of classes.

    With the leaf classes of a tree this is BL1; with a single pooled class it
    is BL2. Stream keys, update formulas, and resampling mirror the
    hierarchical stack's bottom level exactly.
    """

    def __init__(self, class_ids, dynamics, class_prior, position_sampler,
                 n_particles: int, depletion: float, seed):
        if n_particles < 1:
            raise InvalidInputError("need at least one particle")
        if not (0.0 <= depletion < 1.0):
            raise InvalidInputError("depletion fraction must be in [0, 1)")
        self._class_ids = np.asarray(sorted(int(c) for c in class_ids), dtype=int)
        self.dynamics = dynamics
        self.n_particles = int(n_particles)
        self.depletion = float(depletion)
        self.seed = as_seed_sequence(seed)
        self._t = 0
        probs = np.array([class_prior.get(int(c), 0.0) for c in self._class_ids], dtype=float)
        if probs.sum() <= 0:
            raise InvalidInputError("prior has no mass on any class")
        probs = probs / probs.sum()
        rng = substream(self.seed, PHASE_INIT)
        self.labels = rng.choice(self._class_ids, size=self.n_particles, p=probs)
        self.positions = np.stack([
            np.asarray(position_sampler(int(c), rng), dtype=float) for c in self.labels
        ])
        self.weights = np.full(self.n_particles, 1.0 / self.n_particles)

    @property
    def t(self) -> int:
        return self._t

    def class_probs(self) -> dict[int, float]:
        return class_masses(self.labels, self.weights, [int(c) for c in self._class_ids])

    def map_class(self) -> int:
        probs = self.class_probs()
        return min((int(c) for c in self._class_ids), key=lambda c: (-probs[c], c))

    def point_estimate(self) -> np.ndarray:
        return weighted_mean(self.positions, self.weights)

    def snapshot(self) -> dict:
        probs = self.class_probs()
        classes = [{"id": int(c), "prob": float(probs[int(c)])} for c in self._class_ids]
        return {
            "t": self._t,
            "levels": [{"b": 0.0, "classes": classes}],
            "point_estimate": [float(x) for x in self.point_estimate()],
            "map_class": [{"b": 0.0, "class_id": int(self.map_class())}],
        }

    def step(self, observations=()) -> dict:
        self._t += 1
        for nid in (int(c) for c in self._class_ids):
            idx = np.flatnonzero(self.labels == nid)
            if len(idx) == 0:
                continue
            rng = substream(self.seed, PHASE_PREDICT, self._t, nid)
            new, _ = self.dynamics[nid].step_batch(self.positions[idx], rng)
            self.positions[idx] = new
        if isinstance(observations, (FineObservation, CoarseObservation)):
            observations = (observations,)
        for obs in observations:
            if isinstance(obs, FineObservation):
                xi = np.asarray(obs.position, dtype=float)
                d = np.sqrt(((self.positions - xi) ** 2).sum(axis=1))
                w = bounded_log_weights(d)
                s = w.sum()
                if s <= 0.0:
                    w = np.full(self.n_particles, 1.0 / self.n_particles)
                else:
                    w = w / s
                self.weights = w
            # Coarse observations carry class-level evidence this filter has no
            # hierarchy to interpret; they are ignored.
        snap = self.snapshot()
        self._resample()
        return snap

    def _resample(self) -> None:
        n = self.n_particles
        w = self.weights
        s = w.sum()
        w = np.full(n, 1.0 / n) if s <= 0.0 else w / s
        n_keep, n_random = split_counts(n, self.depletion)
        rng_r = substream(self.seed, PHASE_RESAMPLE, self._t)
        idx = rng_r.choice(n, size=n_keep, p=w)
        rng_d = substream(self.seed, PHASE_DEPLETE, self._t)
        src = rng_d.choice(n, size=n_random)
        fresh = rng_d.choice(self._class_ids, size=n_random)
        self.positions = np.vstack([self.positions[idx], self.positions[src]])
        self.labels = np.concatenate([self.labels[idx], fresh])
        self.weights = np.full(n, 1.0 / n)


# -- scenarios -----------------------------------------------------------------


@dataclass
class Scenario:
    """One held-out trial: corpus, tree, dynamics, and the ground truth."""

    index: int
    corpus: list
    tree: object
    truth: Trajectory
    truth_leaf: int
    scale: float
    epsilon_floor: float
    dynamics_base: dict = field(repr=False, default=None)
    point_index: ClassPointIndex = field(repr=False, default=None)


def mean_spacing(trajectories) -> float:
    vals = [t.arc_length() / (len(t) - 1) for t in trajectories if len(t) >= 2]
    if not vals:
        raise InvalidInputError("no multi-point trajectories")
    return float(np.mean(vals))


def build_scenario(trajectories, truth_index: int, epsilon_floor: float | None = None,
                   holdout: bool = True, full_matrix: np.ndarray | None = None,
                   index: int = 0) -> Scenario:
    """Cluster the corpus (ground truth held out by default) and wire dynamics."""
    if not (0 <= truth_index < len(trajectories)):
        raise InvalidInputError(f"truth index {truth_index} out of range")
    if full_matrix is None:
        full_matrix = distance_matrix(trajectories)
    truth = trajectories[truth_index]
    if holdout:
        keep = [i for i in range(len(trajectories)) if i != truth_index]
    else:
        keep = list(range(len(trajectories)))
    corpus = [trajectories[i] for i in keep]
    if len(corpus) < 2:
        raise InvalidInputError("corpus too small after holdout")
    sub = full_matrix[np.ix_(keep, keep)]
    tree = single_linkage(sub, member_ids=[t.id for t in corpus])
    if holdout:
        row = full_matrix[truth_index, keep]
        nearest = corpus[int(np.argmin(row))]
        truth_leaf = tree.leaf_for(nearest.id)
    else:
        truth_leaf = tree.leaf_for(truth.id)
    if epsilon_floor is None:
        epsilon_floor = 2.0 * mean_spacing(corpus)
    dynamics_base = build_dynamics(tree, corpus, kappa=0.0, epsilon_floor=epsilon_floor)
    return Scenario(
        index=index,
        corpus=corpus,
        tree=tree,
        truth=truth,
        truth_leaf=truth_leaf,
        scale=bbox_diagonal(corpus),
        epsilon_floor=epsilon_floor,
        dynamics_base=dynamics_base,
        point_index=ClassPointIndex(tree, corpus),
    )


@dataclass
class RunParams:
    n_particles: int = 100
    depletion: float = 0.01
    kappa: float = 0.3
    psi: float = 0.01
    mode: str = "mixed"
    coarse_prob: float = 0.0
    coarse_level: float | None = None
    lead_in_fraction: float = 0.0
    eval_level: float | None = None


@dataclass
class ScenarioResult:
    mse: list
    tree_distance: list
    convergence_step: int | None
    meta: dict


def make_observation_plan(scenario: Scenario, params: RunParams, seed, repeat: int):
    """The shared per-step observation lists for one (scenario, repeat) trial."""
    cfg = ObsConfig(
        psi=params.psi,
        coarse_prob=params.coarse_prob,
        coarse_level=params.coarse_level,
        lead_in_fraction=params.lead_in_fraction,
        mode=params.mode,
    )
    rng = substream(seed, PHASE_OBSERVE, scenario.index, repeat)
    return observation_plan(scenario.truth.points, cfg, scenario.tree, scenario.corpus,
                            scenario.scale, rng, index=scenario.point_index)


def _eval_level(scenario: Scenario, params: RunParams) -> float:
    if params.eval_level is not None:
        return params.eval_level
    if params.coarse_level is not None:
        return params.coarse_level
    return default_coarse_level(scenario.tree)


def _uniform_leaf_prior(tree) -> dict[int, float]:
    leaves = tree.leaves()
    return {c: 1.0 / len(leaves) for c in leaves}


def _result(scenario, params, kind, mses, dists, repeat) -> ScenarioResult:
    conv = convergence_time(dists, scenario.tree.root_birth)
    return ScenarioResult(
        mse=mses, tree_distance=dists, convergence_step=conv,
        meta={"filter": kind, "scenario": scenario.index, "repeat": repeat,
              "kappa": params.kappa, "psi": params.psi, "mode": params.mode,
              "lead_in": params.lead_in_fraction,
              "root_birth": scenario.tree.root_birth},
    )


def run_mhpf(scenario: Scenario, params: RunParams, seed, repeat: int = 0,
             plan=None) -> ScenarioResult:
    """Full hierarchical run: cluster tree, stacked filters, both obs kinds."""
    if plan is None:
        plan = make_observation_plan(scenario, params, seed, repeat)
    tree = scenario.tree
    dyn = {nid: d.with_kappa(params.kappa) for nid, d in scenario.dynamics_base.items()}
    stack = FilterStack(tree, dyn, _uniform_leaf_prior(tree),
                        start_point_sampler(tree, scenario.corpus),
                        params.n_particles, params.depletion,
                        child_seed(seed, scenario.index, repeat))
    level = _eval_level(scenario, params)
    mses, dists = [], []
    for t, obs in enumerate(plan, start=1):
        snap = stack.step(obs, snapshot_levels=[level])
        mses.append(mse(snap["point_estimate"], scenario.truth.points[t]))
        map_node = snap["map_class"][0]["class_id"]
        dists.append(map_tree_distance(tree, map_node, scenario.truth_leaf, level))
    return _result(scenario, params, "mhpf", mses, dists, repeat)


def run_bl1(scenario: Scenario, params: RunParams, seed, repeat: int = 0,
            plan=None) -> ScenarioResult:
    """Flat filter over leaf classes; coarse observations are ignored."""
    if plan is None:
        plan = make_observation_plan(scenario, params, seed, repeat)
    tree = scenario.tree
    leaf_dyn = {nid: scenario.dynamics_base[nid].with_kappa(params.kappa)
                for nid in tree.leaves()}
    pf = LeafParticleFilter(tree.leaves(), leaf_dyn, _uniform_leaf_prior(tree),
                            start_point_sampler(tree, scenario.corpus),
                            params.n_particles, params.depletion,
                            child_seed(seed, scenario.index, repeat))
    level = _eval_level(scenario, params)
    mses, dists = [], []
    for t, obs in enumerate(plan, start=1):
        snap = pf.step(obs)
        mses.append(mse(snap["point_estimate"], scenario.truth.points[t]))
        map_leaf = snap["map_class"][0]["class_id"]
        dists.append(map_tree_distance(tree, map_leaf, scenario.truth_leaf, level))
    return _result(scenario, params, "bl1", mses, dists, repeat)


def run_bl2(scenario: Scenario, params: RunParams, seed, repeat: int = 0,
            plan=None) -> ScenarioResult:
    """Single-class filter following the pooled root dynamics."""
    if plan is None:
        plan = make_observation_plan(scenario, params, seed, repeat)
    tree = scenario.tree
    root_dyn = scenario.dynamics_base[tree.root].with_kappa(params.kappa)
    pooled_tree = single_class_tree([t.id for t in scenario.corpus])
    pf = LeafParticleFilter([0], {0: root_dyn}, {0: 1.0},
                            start_point_sampler(pooled_tree, scenario.corpus),
                            params.n_particles, params.depletion,
                            child_seed(seed, scenario.index, repeat))
    level = _eval_level(scenario, params)
    mses, dists = [], []
    for t, obs in enumerate(plan, start=1):
        snap = pf.step(obs)
        mses.append(mse(snap["point_estimate"], scenario.truth.points[t]))
        dists.append(map_tree_distance(tree, tree.root, scenario.truth_leaf, level))
    return _result(scenario, params, "bl2", mses, dists, repeat)


_RUNNERS = {"mhpf": run_mhpf, "bl1": run_bl1, "bl2": run_bl2}


# -- experiment harness ----------------------------------------------------------

RAW_FIELDS = ["mode", "kappa", "psi", "lead_in", "scenario", "repeat", "filter",
              "step", "mse", "tree_distance", "root_birth"]
SUMMARY_FIELDS = ["mode", "kappa", "psi", "lead_in", "filter", "runs",
                  "mean_mse", "sd_mse", "mean_tree_distance", "sd_tree_distance",
                  "mean_final_quarter_distance", "mean_convergence_steps",
                  "p_mse_vs_bl1", "p_dist_vs_bl1", "p_conv_vs_bl1"]


@dataclass
class ExperimentConfig:
    corpus_kind: str = "obstacle"          # junction|fixed|obstacle|harbor|file
    corpus_path: str | None = None
    corpus_n: int | None = None
    corpus_seed: int = 7
    n_points: int = 100
    n_scenarios: int = 10
    n_repeats: int = 25
    seed: int = 1
    filters: tuple = ("mhpf", "bl1", "bl2")
    kappas: tuple = (0.3,)
    psis: tuple = (0.01,)
    mode: str = "mixed"
    coarse_prob: float = 0.0
    coarse_level: float | None = None
    lead_in_fractions: tuple = (0.0,)
    eval_level: float | None = None
    n_particles: int = 100
    depletion: float = 0.01
    epsilon_floor: float | None = None
    holdout: bool = True
    workers: int = 1


def load_corpus(cfg: ExperimentConfig) -> list[Trajectory]:
    rng = substream(cfg.corpus_seed, PHASE_DATA)
    kind = cfg.corpus_kind
    if kind == "file":
        if not cfg.corpus_path:
            raise InvalidInputError("corpus_kind 'file' needs corpus_path")
        raw = load_trajectories(cfg.corpus_path)
    elif kind == "junction":
        raw = datasets.gen_junction(2, (cfg.corpus_n or 14) // 2, 0.15, rng)
    elif kind == "fixed":
        raw = datasets.gen_fixed_endpoints(cfg.corpus_n or 13, rng)
    elif kind == "obstacle":
        raw = datasets.gen_obstacle_world(cfg.corpus_n or 33, rng)
    elif kind == "harbor":
        raw = datasets.gen_harbor_corpus(cfg.corpus_n or 194, rng, n_points=cfg.n_points)
    else:
        raise InvalidInputError(f"unknown corpus kind {kind!r}")
    return [datasets.discretize_uniform(t, cfg.n_points) for t in raw]


def select_scenarios(n_trajectories: int, n_scenarios: int, seed) -> list[int]:
    rng = substream(seed, PHASE_SCENARIO)
    n = min(n_scenarios, n_trajectories)
    return sorted(int(i) for i in rng.choice(n_trajectories, size=n, replace=False))


def _cells(cfg: ExperimentConfig):
    cells = []
    for kappa in cfg.kappas:
        for psi in cfg.psis:
            if cfg.mode == "lead_in":
                for lead in cfg.lead_in_fractions:
                    cells.append((kappa, psi, lead))
            else:
                cells.append((kappa, psi, 0.0))
    return cells


def _run_trial(args):
    scenario, params, seed, repeat, filters = args
    plan = make_observation_plan(scenario, params, seed, repeat)
    rows = []
    for kind in filters:
        res = _RUNNERS[kind](scenario, params, seed, repeat, plan=plan)
        for step, (e, d) in enumerate(zip(res.mse, res.tree_distance), start=1):
            rows.append({
                "mode": params.mode, "kappa": params.kappa, "psi": params.psi,
                "lead_in": params.lead_in_fraction,
                "scenario": scenario.index, "repeat": repeat, "filter": kind,
                "step": step, "mse": e, "tree_distance": d,
                "root_birth": scenario.tree.root_birth,
            })
    return rows


def run_experiment(cfg: ExperimentConfig, corpus=None, scenarios=None):
    """Sweep cells over scenarios x repeats; returns (raw_rows, summary_rows)."""
    if corpus is None:
        corpus = load_corpus(cfg)
    if scenarios is None:
        full = distance_matrix(corpus)
        picks = select_scenarios(len(corpus), cfg.n_scenarios, cfg.seed)
        scenarios = [
            build_scenario(corpus, i, epsilon_floor=cfg.epsilon_floor,
                           holdout=cfg.holdout, full_matrix=full, index=i)
            for i in picks
        ]
    tasks = []
    for (kappa, psi, lead) in _cells(cfg):
        params = RunParams(
            n_particles=cfg.n_particles, depletion=cfg.depletion, kappa=kappa,
            psi=psi, mode=cfg.mode, coarse_prob=cfg.coarse_prob,
            coarse_level=cfg.coarse_level, lead_in_fraction=lead,
            eval_level=cfg.eval_level)
        for sc in scenarios:
            for rep in range(cfg.n_repeats):
                tasks.append((sc, params, cfg.seed, rep, tuple(cfg.filters)))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_trial, tasks, chunksize=4))
    else:
        chunks = [_run_trial(t) for t in tasks]
    raw = [row for chunk in chunks for row in chunk]
    return raw, summarize(raw)


def _final_quarter(values):
    k = max(1, math.ceil(len(values) / 4))
    return values[-k:]


def summarize(raw_rows):
    """Per-cell, per-filter aggregates recomputed purely from raw rows."""
    runs: dict = {}
    for row in raw_rows:
        cell = (row["mode"], row["kappa"], row["psi"], row["lead_in"])
        key = (cell, row["filter"], row["scenario"], row["repeat"])
        runs.setdefault(key, {"mse": [], "dist": [], "root": row["root_birth"]})
        runs[key]["mse"].append((row["step"], row["mse"]))
        runs[key]["dist"].append((row["step"], row["tree_distance"]))

    per_run: dict = {}
    for (cell, kind, scenario, repeat), rec in runs.items():
        ms = [v for _, v in sorted(rec["mse"])]
        ds = [v for _, v in sorted(rec["dist"])]
        conv = convergence_time(ds, rec["root"])
        per_run[(cell, kind, scenario, repeat)] = {
            "mean_mse": float(np.mean(ms)),
            "mean_dist": float(np.mean(ds)),
            "final_quarter": float(np.mean(_final_quarter(ds))),
            "conv": len(ds) if conv is None else conv,
        }

    def scenario_means(cell, kind, metric):
        by_scenario: dict = {}
        for (c, k, scenario, _), rec in per_run.items():
            if c == cell and k == kind:
                by_scenario.setdefault(scenario, []).append(rec[metric])
        return [float(np.mean(v)) for _, v in sorted(by_scenario.items())]

    cells = sorted({k[0] for k in per_run})
    kinds = sorted({k[1] for k in per_run})
    out = []
    for cell in cells:
        for kind in kinds:
            recs = [rec for (c, f, _, _), rec in sorted(per_run.items())
                    if c == cell and f == kind]
            if not recs:
                continue
            mode, kappa, psi, lead = cell
            row = {
                "mode": mode, "kappa": kappa, "psi": psi, "lead_in": lead,
                "filter": kind, "runs": len(recs),
                "mean_mse": float(np.mean([r["mean_mse"] for r in recs])),
                "sd_mse": float(np.std([r["mean_mse"] for r in recs], ddof=1)) if len(recs) > 1 else 0.0,
                "mean_tree_distance": float(np.mean([r["mean_dist"] for r in recs])),
                "sd_tree_distance": float(np.std([r["mean_dist"] for r in recs], ddof=1)) if len(recs) > 1 else 0.0,
                "mean_final_quarter_distance": float(np.mean([r["final_quarter"] for r in recs])),
                "mean_convergence_steps": float(np.mean([r["conv"] for r in recs])),
                "p_mse_vs_bl1": "", "p_dist_vs_bl1": "", "p_conv_vs_bl1": "",
            }
            if kind == "mhpf" and "bl1" in kinds:
                for metric, col in (("mean_mse", "p_mse_vs_bl1"),
                                    ("mean_dist", "p_dist_vs_bl1"),
                                    ("conv", "p_conv_vs_bl1")):
                    a = scenario_means(cell, "mhpf", metric)
                    b = scenario_means(cell, "bl1", metric)
                    if len(a) >= 2 and len(b) >= 2:
                        row[col] = float(ranksums(a, b).pvalue)
            out.append(row)
    return out


def write_csv(path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def parse_raw_rows(rows) -> list[dict]:
    """Re-type raw CSV rows so summaries can be recomputed from disk."""
    out = []
    for r in rows:
        out.append({
            "mode": r["mode"], "kappa": float(r["kappa"]), "psi": float(r["psi"]),
            "lead_in": float(r["lead_in"]), "scenario": int(r["scenario"]),
            "repeat": int(r["repeat"]), "filter": r["filter"], "step": int(r["step"]),
            "mse": float(r["mse"]), "tree_distance": float(r["tree_distance"]),
            "root_birth": float(r["root_birth"]),
        })
    return out
