"""Hot numeric kernels with a compiled fast path and a NumPy fallback.

Two operations dominate runtime outside of BLAS matmuls: segment reductions
over graph edges (every message-passing step, forward and backward) and the
mass-spring integrator substep loop of the synthetic data generator. Both are
implemented twice: in ``mango._core`` (Cython) and here in plain NumPy. The
compiled path is selected at import when available; set MANGO_PURE_PYTHON=1
to force the fallback.

Both paths accumulate in identical order so results are bit-identical: the
NumPy fallback relies on ``np.add.reduceat``/``np.add.at`` performing strictly
sequential left-to-right accumulation, which the Cython loops mirror.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from mango import _core
except ImportError:  # pragma: no cover - depends on build environment
    _core = None

compiled_available = _core is not None

_force_pure = os.environ.get("MANGO_PURE_PYTHON", "") not in ("", "0")
_use_compiled = compiled_available and not _force_pure


def using_compiled() -> bool:
    """True when the Cython kernels are active."""
    return _use_compiled


def set_backend(name: str) -> None:
    """Select 'compiled' or 'pure' kernels at runtime (used by benchmarks/tests)."""
    global _use_compiled
    if name == "compiled":
        if not compiled_available:
            raise RuntimeError("compiled kernels are not available in this install")
        _use_compiled = True
    elif name == "pure":
        _use_compiled = False
    else:
        raise ValueError(f"unknown backend {name!r}")


class ScatterPlan:
    """Precomputed sort/segment structure for scatter-style row reductions.

    Maps M rows onto ``num_segments`` targets given an index array. Built once
    per topology and reused for every aggregation and gather-backward on it.
    """

    def __init__(self, index, num_segments: int):
        index = np.ascontiguousarray(index, dtype=np.int64)
        if index.ndim != 1:
            raise ValueError("scatter index must be one-dimensional")
        if index.size and (index.min() < 0 or index.max() >= num_segments):
            raise ValueError("scatter index out of range")
        self.index = index
        self.num_segments = int(num_segments)
        self.order = np.argsort(index, kind="stable")
        self.counts = np.bincount(index, minlength=num_segments).astype(np.int64)
        self.splits = np.zeros(num_segments + 1, dtype=np.int64)
        np.cumsum(self.counts, out=self.splits[1:])
        # divisor for mean aggregation; empty segments stay zero, not NaN
        self._safe_counts = np.maximum(self.counts, 1).astype(np.float64)

    @property
    def size(self) -> int:
        return self.index.size

    def scatter_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum rows of ``values`` (shape [..., M, d]) into their target segments."""
        ordered = np.ascontiguousarray(values[..., self.order, :])
        return segment_sum_sorted(ordered, self.splits)

    def scatter_mean(self, values: np.ndarray) -> np.ndarray:
        summed = self.scatter_sum(values)
        divisor = self._safe_counts.astype(summed.dtype)
        return summed / divisor[:, None]


def segment_sum_sorted(xs: np.ndarray, splits: np.ndarray) -> np.ndarray:
    """Sum contiguous row segments of ``xs``.

    ``xs`` has shape [M, d] or [B, M, d]; ``splits`` has ``num_segments + 1``
    monotone entries with ``splits[0] == 0`` and ``splits[-1] == M``. Empty
    segments produce zero rows.
    """
    xs = np.ascontiguousarray(xs)
    if _use_compiled and xs.dtype in (np.float32, np.float64):
        if xs.ndim == 2:
            return _core.segment_sum_2d(xs, splits)
        if xs.ndim == 3:
            return _core.segment_sum_3d(xs, splits)
    return _segment_sum_numpy(xs, splits)


def _segment_sum_numpy(xs: np.ndarray, splits: np.ndarray) -> np.ndarray:
    num_segments = len(splits) - 1
    out_shape = xs.shape[:-2] + (num_segments, xs.shape[-1])
    out = np.zeros(out_shape, dtype=xs.dtype)
    if xs.shape[-2] == 0:
        return out
    counts = np.diff(splits)
    nonempty = counts > 0
    if not nonempty.any():
        return out
    # reduceat sums from each listed start to the next listed start; with rows
    # sorted by segment, skipped empty segments contribute no rows in between,
    # so restricting the starts to nonempty segments yields exact segment sums
    starts = splits[:-1][nonempty]
    out[..., nonempty, :] = np.add.reduceat(xs, starts, axis=-2)
    return out


def spring_substeps(
    pos: np.ndarray,
    vel: np.ndarray,
    spring_i: np.ndarray,
    spring_j: np.ndarray,
    rest_length: np.ndarray,
    stiffness: float,
    spring_damping: float,
    viscous_damping: float,
    mass: float,
    gravity: np.ndarray,
    fixed: np.ndarray,
    collider_center: np.ndarray,
    collider_velocity: np.ndarray,
    collider_radius: float,
    contact_stiffness: float,
    dt: float,
    n_sub: int,
) -> None:
    """Advance a damped Hookean spring system with a rigid circular collider.

    Semi-implicit Euler, ``n_sub`` substeps of length ``dt``. All arrays are
    float64 and updated in place (``pos``, ``vel``, ``collider_center``).
    Contact is a unilateral penalty force pushing penetrating nodes radially
    out of the collider disc.
    """
    if _use_compiled:
        _core.spring_substeps(
            pos, vel, spring_i, spring_j, rest_length,
            float(stiffness), float(spring_damping), float(viscous_damping),
            float(mass), gravity, fixed.view(np.uint8),
            collider_center, collider_velocity,
            float(collider_radius), float(contact_stiffness), float(dt), int(n_sub),
        )
        return
    inv_mass = 1.0 / mass
    coef = dt * inv_mass
    for _ in range(n_sub):
        force = gravity[None, :] * mass - viscous_damping * vel
        delta = pos[spring_j] - pos[spring_i]
        length = np.sqrt(np.sum(delta * delta, axis=1))
        length = np.maximum(length, 1e-12)
        axis = delta / length[:, None]
        rel_speed = np.sum((vel[spring_j] - vel[spring_i]) * axis, axis=1)
        magnitude = stiffness * (length - rest_length) + spring_damping * rel_speed
        spring_force = magnitude[:, None] * axis
        # two accumulation passes in spring order, matching the compiled loop
        np.add.at(force, spring_i, spring_force)
        np.add.at(force, spring_j, -spring_force)
        offset = pos - collider_center[None, :]
        dist = np.sqrt(np.sum(offset * offset, axis=1))
        dist = np.maximum(dist, 1e-12)
        penetration = collider_radius - dist
        touching = penetration > 0.0
        if touching.any():
            push = contact_stiffness * penetration[touching]
            force[touching] += push[:, None] * (offset[touching] / dist[touching, None])
        vel += coef * force
        vel[fixed] = 0.0
        pos += dt * vel
        collider_center += dt * collider_velocity
