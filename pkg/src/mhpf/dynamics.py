"""Localized per-class dynamics learned from member-trajectory points.

A class's motion model is the inverse-distance-weighted average of the point
velocities harvested from its member trajectories, restricted to a ball of
radius epsilon around the query point, plus one-sided uniform noise scaled by
the class's mean step length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError

# Query batches are evaluated against the full sample set in dense blocks of
# at most this many (query, sample) pairs; larger batches are chunked.
_DENSE_PAIR_LIMIT = 1 << 22


@dataclass
class ClassDynamics:
    """Sampled velocity field for one cluster class.

    `positions` and `velocities` hold one row per harvested sample; `epsilon`
    is the neighborhood radius, `kappa` the noise fraction, and
    `velocity_scale` the mean sample-velocity magnitude that gives kappa its
    units. `centered_noise` switches the one-sided uniform noise on
    [0, kappa*scale] to a zero-centered band of the same width.
    """

    class_id: int
    positions: np.ndarray
    velocities: np.ndarray
    epsilon: float
    kappa: float
    velocity_scale: float
    centered_noise: bool = False

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape != self.velocities.shape:
            raise InvalidInputError(f"class {self.class_id}: malformed sample arrays")
        if len(self.positions) == 0:
            raise InvalidInputError(f"class {self.class_id}: no dynamics samples")
        if self.epsilon <= 0:
            raise InvalidInputError(f"class {self.class_id}: epsilon must be > 0")
        if self.kappa < 0:
            raise InvalidInputError(f"class {self.class_id}: kappa must be >= 0")

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def with_kappa(self, kappa: float) -> "ClassDynamics":
        """Cheap copy sharing the sample arrays."""
        out = object.__new__(ClassDynamics)
        out.class_id = self.class_id
        out.positions = self.positions
        out.velocities = self.velocities
        out.epsilon = self.epsilon
        out.kappa = float(kappa)
        out.velocity_scale = self.velocity_scale
        out.centered_noise = self.centered_noise
        return out

    def _dense_velocities(self, zs: np.ndarray):
        d = cdist(zs, self.positions)
        inside = d < self.epsilon
        vels = np.empty_like(zs)
        flags = np.zeros(len(zs), dtype=bool)
        zero_mask = d == 0.0
        has_zero = zero_mask.any(axis=1)
        any_inside = inside.any(axis=1)
        regular = any_inside & ~has_zero
        if regular.any():
            w = np.where(inside[regular], 1.0 / d[regular], 0.0)
            vels[regular] = (w @ self.velocities) / w.sum(axis=1)[:, None]
        if has_zero.any():
            # Inverse-distance weights blow up on a coincident sample; the
            # limit is that (first such) sample's own velocity.
            first = zero_mask[has_zero].argmax(axis=1)
            vels[has_zero] = self.velocities[first]
        empty = ~any_inside
        if empty.any():
            # Off-manifold query: extrapolate from the single nearest sample.
            nearest = d[empty].argmin(axis=1)
            vels[empty] = self.velocities[nearest]
            flags[empty] = True
        return vels, flags

    def local_velocities(self, zs: np.ndarray):
        """Velocity estimates for a (k, d) batch and per-row fallback flags."""
        zs = np.asarray(zs, dtype=float)
        k = len(zs)
        if k == 0:
            return np.empty_like(zs), np.zeros(0, dtype=bool)
        if k * len(self.positions) <= _DENSE_PAIR_LIMIT:
            return self._dense_velocities(zs)
        vels = np.empty_like(zs)
        flags = np.zeros(k, dtype=bool)
        step = max(1, _DENSE_PAIR_LIMIT // len(self.positions))
        for lo in range(0, k, step):
            vels[lo:lo + step], flags[lo:lo + step] = self._dense_velocities(zs[lo:lo + step])
        return vels, flags

    def local_velocity(self, z):
        """Velocity estimate at z and whether the empty-ball fallback fired."""
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("query point must be finite")
        vels, flags = self.local_velocities(z[None, :])
        return vels[0], bool(flags[0])

    def step_batch(self, zs: np.ndarray, rng: np.random.Generator):
        """Advance a batch one step: z + velocity + noise, drawn row-major."""
        zs = np.asarray(zs, dtype=float)
        vels, flags = self.local_velocities(zs)
        width = self.kappa * self.velocity_scale
        if self.centered_noise:
            noise = rng.uniform(-width / 2.0, width / 2.0, size=zs.shape)
        else:
            noise = rng.uniform(0.0, width, size=zs.shape)
        return zs + vels + noise, flags

    def step_sample(self, z, rng: np.random.Generator):
        """Single-point step; returns (new position, extrapolated flag)."""
        z = np.asarray(z, dtype=float)
        new, flags = self.step_batch(z[None, :], rng)
        return new[0], bool(flags[0])


def harvest_samples(trajectories):
    """(positions, velocities) pairs from consecutive points of each trajectory.

    A trajectory of P points contributes P-1 samples with velocity
    next - current; single-point trajectories contribute nothing.
    """
    pos, vel = [], []
    for t in trajectories:
        pts = t.points
        if len(pts) >= 2:
            pos.append(pts[:-1])
            vel.append(np.diff(pts, axis=0))
    if not pos:
        return np.empty((0, 0)), np.empty((0, 0))
    return np.vstack(pos), np.vstack(vel)


def build_dynamics(tree, trajectories, kappa: float, epsilon_floor: float,
                   epsilon_override: float | None = None,
                   centered_noise: bool = False) -> dict[int, ClassDynamics]:
    """One ClassDynamics per tree node.

    The neighborhood radius of a class is its birth index floored at
    `epsilon_floor` (leaves are born at 0, so the floor is what keeps their
    balls non-degenerate); `epsilon_override` forces one global radius instead.
    """
    if epsilon_floor <= 0 and epsilon_override is None:
        raise InvalidInputError("epsilon_floor must be > 0")
    by_id = {t.id: t for t in trajectories}
    out: dict[int, ClassDynamics] = {}
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        missing = [m for m in node.members if m not in by_id]
        if missing:
            raise InvalidInputError(f"class {nid}: unknown member trajectories {sorted(missing)!r}")
        member_trajs = [by_id[m] for m in sorted(node.members)]
        positions, velocities = harvest_samples(member_trajs)
        if positions.size == 0:
            raise InvalidInputError(f"class {nid} has no dynamics samples "
                                    "(all member trajectories are single points)")
        if epsilon_override is not None:
            eps = float(epsilon_override)
        else:
            eps = max(node.birth, epsilon_floor)
        scale = float(np.sqrt((velocities ** 2).sum(axis=1)).mean())
        out[nid] = ClassDynamics(
            class_id=nid,
            positions=positions,
            velocities=velocities,
            epsilon=eps,
            kappa=float(kappa),
            velocity_scale=scale,
            centered_noise=centered_noise,
        )
    return out
