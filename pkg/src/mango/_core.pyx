# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: segment row sums and the spring integrator substep loop.

Accumulation order matches the NumPy fallback in ``mango.backend`` exactly
(sequential left-to-right within segments, two-pass spring accumulation), so
both backends produce bit-identical results.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double


def segment_sum_2d(floating[:, ::1] xs, const long long[::1] splits):
    cdef Py_ssize_t n_seg = splits.shape[0] - 1
    cdef Py_ssize_t d = xs.shape[1]
    if floating is float:
        out_np = np.zeros((n_seg, d), dtype=np.float32)
    else:
        out_np = np.zeros((n_seg, d), dtype=np.float64)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t s, j, k
    with nogil:
        for s in range(n_seg):
            for j in range(splits[s], splits[s + 1]):
                for k in range(d):
                    out[s, k] += xs[j, k]
    return out_np


def segment_sum_3d(floating[:, :, ::1] xs, const long long[::1] splits):
    cdef Py_ssize_t n_batch = xs.shape[0]
    cdef Py_ssize_t n_seg = splits.shape[0] - 1
    cdef Py_ssize_t d = xs.shape[2]
    if floating is float:
        out_np = np.zeros((n_batch, n_seg, d), dtype=np.float32)
    else:
        out_np = np.zeros((n_batch, n_seg, d), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t b, s, j, k
    with nogil:
        for b in range(n_batch):
            for s in range(n_seg):
                for j in range(splits[s], splits[s + 1]):
                    for k in range(d):
                        out[b, s, k] += xs[b, j, k]
    return out_np


def spring_substeps(
    double[:, ::1] pos,
    double[:, ::1] vel,
    const long long[::1] spring_i,
    const long long[::1] spring_j,
    const double[::1] rest_length,
    double stiffness,
    double spring_damping,
    double viscous_damping,
    double mass,
    const double[::1] gravity,
    const unsigned char[::1] fixed,
    double[::1] collider_center,
    const double[::1] collider_velocity,
    double collider_radius,
    double contact_stiffness,
    double dt,
    int n_sub,
):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t dim = pos.shape[1]
    cdef Py_ssize_t n_spring = spring_i.shape[0]
    force_np = np.empty((n, dim), dtype=np.float64)
    sforce_np = np.empty((n_spring, dim), dtype=np.float64)
    cdef double[:, ::1] force = force_np
    cdef double[:, ::1] sforce = sforce_np
    cdef double inv_mass = 1.0 / mass
    cdef double coef = dt * inv_mass
    cdef Py_ssize_t step, i, e, k
    cdef Py_ssize_t a, b
    cdef double dx, length, axis_k, rel_speed, magnitude
    cdef double dist, penetration, push
    with nogil:
        for step in range(n_sub):
            for i in range(n):
                for k in range(dim):
                    force[i, k] = gravity[k] * mass - viscous_damping * vel[i, k]
            for e in range(n_spring):
                a = spring_i[e]
                b = spring_j[e]
                length = 0.0
                for k in range(dim):
                    dx = pos[b, k] - pos[a, k]
                    sforce[e, k] = dx
                    length += dx * dx
                length = sqrt(length)
                if length < 1e-12:
                    length = 1e-12
                rel_speed = 0.0
                for k in range(dim):
                    axis_k = sforce[e, k] / length
                    sforce[e, k] = axis_k
                    rel_speed += (vel[b, k] - vel[a, k]) * axis_k
                magnitude = stiffness * (length - rest_length[e]) + spring_damping * rel_speed
                for k in range(dim):
                    sforce[e, k] = magnitude * sforce[e, k]
            # two passes in spring order, matching np.add.at in the fallback
            for e in range(n_spring):
                a = spring_i[e]
                for k in range(dim):
                    force[a, k] += sforce[e, k]
            for e in range(n_spring):
                b = spring_j[e]
                for k in range(dim):
                    force[b, k] -= sforce[e, k]
            for i in range(n):
                dist = 0.0
                for k in range(dim):
                    dx = pos[i, k] - collider_center[k]
                    dist += dx * dx
                dist = sqrt(dist)
                if dist < 1e-12:
                    dist = 1e-12
                penetration = collider_radius - dist
                if penetration > 0.0:
                    push = contact_stiffness * penetration
                    for k in range(dim):
                        force[i, k] += push * ((pos[i, k] - collider_center[k]) / dist)
            for i in range(n):
                if fixed[i]:
                    for k in range(dim):
                        vel[i, k] = 0.0
                else:
                    for k in range(dim):
                        vel[i, k] += coef * force[i, k]
                for k in range(dim):
                    pos[i, k] += dt * vel[i, k]
            for k in range(dim):
                collider_center[k] += dt * collider_velocity[k]
