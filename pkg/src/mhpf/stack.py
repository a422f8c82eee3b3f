"""Consistent stack of particle filters over a cluster tree.

The bottom level carries N weighted (leaf class, position) particles. Every
internal node's particle set is realized each step by re-labeling copies of
its descendants' particles, so any level of the tree holds exactly N
particles. Class probabilities live on the whole tree and are kept consistent
(children sum to their parent) by rebuilding from whichever level an
observation updated: masses are recomputed from that level's particle
weights, pushed down by proportional scaling against the pre-observation
snapshot, and pushed up by summation.

Fine observations reweight bottom-level particles by distance to the observed
position. Coarse observations name a class at some level; every particle of
each class alive there receives the same weight from the tree-class distance
to the observed class, and particles elsewhere are rescaled by their class's
probability ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .seeding import (PHASE_DEPLETE, PHASE_INIT, PHASE_PREDICT, PHASE_RESAMPLE,
                      as_seed_sequence, substream)

WEIGHT_EPS = 1e-9


@dataclass(frozen=True)
class FineObservation:
    position: np.ndarray


@dataclass(frozen=True)
class CoarseObservation:
    class_id: int
    level: float


Observation = FineObservation | CoarseObservation


@dataclass(frozen=True)
class Particle:
    position: np.ndarray
    class_id: int
    weight: float


def bounded_log_weights(dists: np.ndarray) -> np.ndarray:
    """Monotone-decreasing, finite, non-negative weights from distances.

    -log((d + eps) / (dmax + eps)) over the update's candidates: the nearest
    candidate gets the largest weight, the farthest exactly zero. When all
    candidates are equidistant every weight is zero and the caller falls back
    to a uniform reset.
    """
    dists = np.asarray(dists, dtype=float)
    dmax = dists.max()
    return -np.log((dists + WEIGHT_EPS) / (dmax + WEIGHT_EPS))


def weighted_mean(positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (weights[:, None] * positions).sum(axis=0) / weights.sum()


def class_masses(labels: np.ndarray, weights: np.ndarray, class_ids) -> dict[int, float]:
    """Normalized per-class weight sums over one particle set.

    Summation runs in sorted class order so independent filters sharing a
    particle set derive bit-identical masses.
    """
    ordered = sorted(int(c) for c in class_ids)
    sums = {c: float(weights[labels == c].sum()) for c in ordered}
    total = sum(sums.values())
    if total <= 0:
        raise InvalidInputError("all-zero weights: cannot derive class masses")
    return {c: s / total for c, s in sums.items()}


def start_point_sampler(tree, trajectories):
    """Position sampler placing a particle at its class trajectory's start."""
    by_id = {t.id: t for t in trajectories}
    starts = {}
    for nid in tree.leaves():
        node = tree.nodes[nid]
        firsts = [by_id[m].points[0] for m in sorted(node.members)]
        starts[nid] = np.mean(firsts, axis=0)

    def sampler(class_id, rng):
        return starts[class_id].copy()

    return sampler


def member_point_sampler(tree, trajectories):
    """Position sampler drawing a uniform point of the class's trajectories."""
    by_id = {t.id: t for t in trajectories}
    pools = {}
    for nid in tree.leaves():
        node = tree.nodes[nid]
        pools[nid] = np.vstack([by_id[m].points for m in sorted(node.members)])

    def sampler(class_id, rng):
        pool = pools[class_id]
        return pool[int(rng.integers(len(pool)))].copy()

    return sampler


def split_counts(n: int, depletion: float) -> tuple[int, int]:
    """(weight-resampled, randomized) particle counts for one resampling."""
    n_random = int(round(n * depletion))
    return n - n_random, n_random


class FilterStack:
    """Single-writer filter state machine over a cluster tree."""

    def __init__(self, tree, dynamics, class_prior: dict, position_sampler,
                 n_particles: int, depletion: float, seed):
        if n_particles < 1:
            raise InvalidInputError("need at least one particle")
        if not (0.0 <= depletion < 1.0):
            raise InvalidInputError("depletion fraction must be in [0, 1)")
        leaf_ids = tree.leaves()
        leaf_set = set(leaf_ids)
        for c in class_prior:
            if c not in leaf_set:
                raise InvalidInputError(f"prior assigns mass to non-leaf class {c}")
        self.tree = tree
        self.dynamics = dynamics
        self.n_particles = int(n_particles)
        self.depletion = float(depletion)
        self.seed = as_seed_sequence(seed)
        self._t = 0
        self._leaf_ids = np.asarray(leaf_ids, dtype=int)
        self.diagnostics = {"uniform_resets": 0, "extrapolated": 0}

        probs = np.array([class_prior.get(c, 0.0) for c in leaf_ids], dtype=float)
        if probs.sum() <= 0:
            raise InvalidInputError("prior has no mass on any leaf")
        probs = probs / probs.sum()

        rng = substream(self.seed, PHASE_INIT)
        self.leaf_labels = rng.choice(self._leaf_ids, size=self.n_particles, p=probs)
        self.leaf_positions = np.stack([
            np.asarray(position_sampler(int(c), rng), dtype=float) for c in self.leaf_labels
        ])
        self.leaf_weights = np.full(self.n_particles, 1.0 / self.n_particles)

        max_leaf = int(self._leaf_ids.max())
        self._member_lookup = {}
        for nid in tree.nodes:
            if tree.nodes[nid].is_leaf:
                continue
            row = np.zeros(max_leaf + 1, dtype=bool)
            row[np.asarray(tree.leaves_under(nid), dtype=int)] = True
            self._member_lookup[nid] = row
        self._upper: dict[int, dict] = {}
        self.class_probs: dict[int, float] = {}
        self.prev_probs: dict[int, float] = {}
        self.rebuild_tree(leaf_set)
        self.prev_probs = dict(self.class_probs)
        self.propagate_up()

    # -- level bookkeeping ---------------------------------------------------

    @property
    def t(self) -> int:
        return self._t

    def leaf_level(self) -> set[int]:
        return set(int(c) for c in self._leaf_ids)

    def _weights_of(self, node_id: int) -> np.ndarray:
        if self.tree.nodes[node_id].is_leaf:
            return self.leaf_weights[self.leaf_labels == node_id]
        entry = self._upper.get(node_id)
        if entry is None:
            return np.empty(0)
        return entry["weights"]

    def _positions_of(self, node_id: int) -> np.ndarray:
        if self.tree.nodes[node_id].is_leaf:
            return self.leaf_positions[self.leaf_labels == node_id]
        entry = self._upper.get(node_id)
        if entry is None:
            return np.empty((0, self.leaf_positions.shape[1]))
        return entry["positions"]

    def particles_of(self, node_id: int) -> list[Particle]:
        pos = self._positions_of(node_id)
        w = self._weights_of(node_id)
        return [Particle(pos[i].copy(), int(node_id), float(w[i])) for i in range(len(w))]

    def particles_at(self, b: float) -> list[Particle]:
        out: list[Particle] = []
        for c in sorted(self.tree.alive_at(b)):
            out.extend(self.particles_of(c))
        return out

    # -- tree probability rebuild ----------------------------------------------

    def rebuild_tree(self, updated_level) -> None:
        """Recompute class probabilities from one level's particle weights.

        The level's masses come straight from its particles; descendants scale
        proportionally against the pre-update snapshot (an exhausted parent
        spreads its new mass uniformly over its children); ancestors sum.
        """
        level = {int(c) for c in updated_level}
        ordered = sorted(level)
        wsums = {c: float(self._weights_of(c).sum()) for c in ordered}
        total = sum(wsums.values())
        if total <= 0:
            raise InvalidInputError("updated level has zero total weight")
        out: dict[int, float] = {}
        for c in ordered:
            self._assign_down(c, wsums[c] / total, out)
        for nid in sorted(self.tree.nodes):
            if nid in out:
                continue
            children = self.tree.nodes[nid].children
            if children and all(ch in out for ch in children):
                out[nid] = sum(out[ch] for ch in children)
        if len(out) != len(self.tree.nodes):
            raise InvalidInputError("updated level does not partition the tree")
        self.class_probs = out

    def _assign_down(self, node_id: int, value: float, out: dict[int, float]) -> None:
        out[node_id] = value
        children = self.tree.nodes[node_id].children
        if not children:
            return
        prev_parent = self.prev_probs.get(node_id, 0.0)
        if prev_parent > 0.0:
            for ch in children:
                self._assign_down(ch, self.prev_probs.get(ch, 0.0) * value / prev_parent, out)
        else:
            share = value / len(children)
            for ch in children:
                self._assign_down(ch, share, out)

    # -- particle realization and prediction ----------------------------------

    def propagate_up(self) -> None:
        """Realize every internal node's particles as re-labeled leaf copies."""
        self._upper = {}
        n = self.n_particles
        for nid in sorted(self._member_lookup):
            mask = self._member_lookup[nid][self.leaf_labels]
            count = int(mask.sum())
            self._upper[nid] = {
                "positions": self.leaf_positions[mask].copy(),
                "weights": np.full(count, 1.0 / n),
            }

    def predict(self) -> None:
        """Advance every particle at every level by its own class's dynamics."""
        t = self._t
        for nid in sorted(self.tree.nodes):
            if self.tree.nodes[nid].is_leaf:
                idx = np.flatnonzero(self.leaf_labels == nid)
                if len(idx) == 0:
                    continue
                rng = substream(self.seed, PHASE_PREDICT, t, nid)
                new, flags = self.dynamics[nid].step_batch(self.leaf_positions[idx], rng)
                self.leaf_positions[idx] = new
            else:
                entry = self._upper.get(nid)
                if entry is None or len(entry["weights"]) == 0:
                    continue
                rng = substream(self.seed, PHASE_PREDICT, t, nid)
                new, flags = self.dynamics[nid].step_batch(entry["positions"], rng)
                entry["positions"] = new
            self.diagnostics["extrapolated"] += int(flags.sum())

    # -- observation updates ---------------------------------------------------

    def update(self, obs: Observation) -> None:
        if isinstance(obs, FineObservation):
            self._update_fine(np.asarray(obs.position, dtype=float))
        elif isinstance(obs, CoarseObservation):
            self._update_coarse(int(obs.class_id), float(obs.level))
        else:
            raise InvalidInputError(f"unknown observation type {type(obs)!r}")

    def _update_fine(self, xi: np.ndarray) -> None:
        d = np.sqrt(((self.leaf_positions - xi) ** 2).sum(axis=1))
        w = bounded_log_weights(d)
        s = w.sum()
        if s <= 0.0:
            w = np.full(self.n_particles, 1.0 / self.n_particles)
            self.diagnostics["uniform_resets"] += 1
        else:
            w = w / s
        self.leaf_weights = w
        leaf_level = self.leaf_level()
        self.rebuild_tree(leaf_level)
        self._scale_outside(leaf_level)

    def _update_coarse(self, class_id: int, level_value: float) -> None:
        level = self.tree.alive_at(level_value)
        if class_id not in level:
            raise InvalidInputError(f"class {class_id} is not alive at level {level_value}")
        ordered = sorted(level)
        dists = np.array([self.tree.tree_class_distance(c, class_id) for c in ordered])
        values = bounded_log_weights(dists)
        if values.sum() <= 0.0:
            values = np.full(len(ordered), 1.0 / self.n_particles)
            self.diagnostics["uniform_resets"] += 1
        by_class = dict(zip(ordered, values))
        for c in ordered:
            if self.tree.nodes[c].is_leaf:
                self.leaf_weights[self.leaf_labels == c] = by_class[c]
            else:
                entry = self._upper.get(c)
                if entry is not None:
                    entry["weights"][:] = by_class[c]
        level_total = sum(float(self._weights_of(c).sum()) for c in ordered)
        if level_total <= 0.0:
            # Every populated class scored zero: no usable information.
            for c in ordered:
                if self.tree.nodes[c].is_leaf:
                    self.leaf_weights[self.leaf_labels == c] = 1.0 / self.n_particles
                else:
                    entry = self._upper.get(c)
                    if entry is not None:
                        entry["weights"][:] = 1.0 / self.n_particles
            self.diagnostics["uniform_resets"] += 1
        else:
            # Keep the level's particle weights a distribution; the class
            # masses only depend on their ratios.
            for c in ordered:
                if self.tree.nodes[c].is_leaf:
                    mask = self.leaf_labels == c
                    self.leaf_weights[mask] = self.leaf_weights[mask] / level_total
                else:
                    entry = self._upper.get(c)
                    if entry is not None:
                        entry["weights"] /= level_total
        self.rebuild_tree(level)
        self._scale_outside(level)
        s = self.leaf_weights.sum()
        if s <= 0.0:
            self.leaf_weights = np.full(self.n_particles, 1.0 / self.n_particles)
            self.diagnostics["uniform_resets"] += 1
        else:
            self.leaf_weights = self.leaf_weights / s

    def _scale_outside(self, level: set[int]) -> None:
        """w *= P_t(c)/P_prev(c) for every particle of a class outside `level`."""
        ratio = np.ones(len(self._leaf_ids))
        for i, c in enumerate(self._leaf_ids):
            c = int(c)
            if c in level:
                continue
            prev = self.prev_probs.get(c, 0.0)
            if prev > 0.0:
                ratio[i] = self.class_probs[c] / prev
        if not np.all(ratio == 1.0):
            self.leaf_weights = self.leaf_weights * ratio[self.leaf_labels]
        for nid, entry in self._upper.items():
            if nid in level:
                continue
            prev = self.prev_probs.get(nid, 0.0)
            if prev > 0.0:
                entry["weights"] *= self.class_probs[nid] / prev

    # -- resampling -------------------------------------------------------------

    def resample(self) -> None:
        """Multinomial resampling at the bottom level plus depletion guard.

        round(N * v) particles keep their (uniformly chosen) positions but
        receive a uniformly random leaf class; the rest are drawn by weight.
        """
        n = self.n_particles
        w = self.leaf_weights
        s = w.sum()
        if s <= 0.0:
            w = np.full(n, 1.0 / n)
            self.diagnostics["uniform_resets"] += 1
        else:
            w = w / s
        n_keep, n_random = split_counts(n, self.depletion)
        rng_r = substream(self.seed, PHASE_RESAMPLE, self._t)
        idx = rng_r.choice(n, size=n_keep, p=w)
        rng_d = substream(self.seed, PHASE_DEPLETE, self._t)
        src = rng_d.choice(n, size=n_random)
        fresh = rng_d.choice(self._leaf_ids, size=n_random)
        self.leaf_positions = np.vstack([self.leaf_positions[idx], self.leaf_positions[src]])
        self.leaf_labels = np.concatenate([self.leaf_labels[idx], fresh])
        self.leaf_weights = np.full(n, 1.0 / n)
        self.rebuild_tree(self.leaf_level())
        self.propagate_up()

    # -- queries -----------------------------------------------------------------

    def map_class(self, b: float) -> int:
        """Highest-probability alive class at level b (ties: birth, then id)."""
        if b < 0:
            raise InvalidInputError(f"level must be >= 0, got {b}")
        alive = self.tree.alive_at(b)
        return min(alive, key=lambda c: (-self.class_probs.get(c, 0.0),
                                         self.tree.nodes[c].birth, c))

    def point_estimate(self) -> np.ndarray:
        """Weight-averaged bottom-level particle position."""
        return weighted_mean(self.leaf_positions, self.leaf_weights)

    def snapshot(self, levels=None) -> dict:
        if levels is None:
            levels = self.tree.unique_births()
        levels = [float(b) for b in levels]
        per_level = []
        for b in levels:
            alive = sorted(self.tree.alive_at(b))
            per_level.append({
                "b": b,
                "classes": [{"id": int(c), "prob": float(self.class_probs.get(c, 0.0))}
                            for c in alive],
            })
        return {
            "t": self._t,
            "levels": per_level,
            "point_estimate": [float(x) for x in self.point_estimate()],
            "map_class": [{"b": b, "class_id": int(self.map_class(b))} for b in levels],
        }

    # -- main loop ----------------------------------------------------------------

    def step(self, observations=(), snapshot_levels=None) -> dict:
        """One filtering iteration; returns the post-update snapshot.

        Order: rebuild from the bottom level, snapshot the pre-observation
        probabilities, realize parent particles, predict every level, apply
        the step's observations in arrival order, then resample the bottom
        level and restore consistency.
        """
        self._t += 1
        self.rebuild_tree(self.leaf_level())
        self.prev_probs = dict(self.class_probs)
        self.propagate_up()
        self.predict()
        if isinstance(observations, (FineObservation, CoarseObservation)):
            observations = (observations,)
        for obs in observations:
            self.update(obs)
        snap = self.snapshot(snapshot_levels)
        self.resample()
        return snap


def check_consistency(stack: FilterStack, n_levels: int = 20, atol: float = 1e-9) -> None:
    """Assert per-level normalization, parent additivity, and level counts."""
    tree = stack.tree
    root_birth = tree.root_birth
    if root_birth > 0:
        levels = np.linspace(0.0, root_birth, n_levels)
    else:
        levels = np.zeros(1)
    for b in levels:
        alive = tree.alive_at(float(b))
        total = sum(stack.class_probs.get(c, 0.0) for c in alive)
        if abs(total - 1.0) > atol:
            raise AssertionError(f"level {b}: probabilities sum to {total}")
        count = sum(len(stack._weights_of(c)) for c in alive)
        if count != stack.n_particles:
            raise AssertionError(f"level {b}: {count} particles != N={stack.n_particles}")
    for nid, node in tree.nodes.items():
        if node.children:
            child_sum = sum(stack.class_probs.get(ch, 0.0) for ch in node.children)
            if abs(child_sum - stack.class_probs.get(nid, 0.0)) > atol:
                raise AssertionError(
                    f"node {nid}: children sum {child_sum} != {stack.class_probs.get(nid)}")
