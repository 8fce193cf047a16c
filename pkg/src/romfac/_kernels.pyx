# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; ``_kernels_py`` holds the reference versions."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF N_CHANNELS = 5


def encode_observations(
    const cnp.int64_t[:, ::1] occ,
    const cnp.int64_t[::1] team,
    const double[::1] hp,
    const cnp.int64_t[:, ::1] pos,
    const cnp.int64_t[::1] agents,
    int radius,
    double max_hp,
):
    cdef Py_ssize_t height = occ.shape[0]
    cdef Py_ssize_t width = occ.shape[1]
    cdef Py_ssize_t side = 2 * radius + 1
    cdef Py_ssize_t area = side * side
    cdef Py_ssize_t dim = N_CHANNELS * area + 3
    cdef Py_ssize_t k = agents.shape[0]
    out_arr = np.zeros((k, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, dx, dy, cell, x, y, gx, gy, me, other
    cdef cnp.int64_t occupant
    cdef double inv_hp = 1.0 / max_hp if max_hp > 0 else 0.0
    for i in range(k):
        me = agents[i]
        x = pos[me, 0]
        y = pos[me, 1]
        for dy in range(side):
            gy = y + dy - radius
            for dx in range(side):
                gx = x + dx - radius
                cell = dy * side + dx
                if gx < 0 or gy < 0 or gx >= width or gy >= height:
                    out[i, cell] = 1.0
                    continue
                occupant = occ[gy, gx]
                if occupant == 0:
                    continue
                other = occupant - 1
                if other == me:
                    continue
                if team[other] == team[me]:
                    out[i, area + cell] = 1.0
                    out[i, 2 * area + cell] = hp[other] * inv_hp
                else:
                    out[i, 3 * area + cell] = 1.0
                    out[i, 4 * area + cell] = hp[other] * inv_hp
        out[i, N_CHANNELS * area] = x / <double>(width - 1) if width > 1 else 0.0
        out[i, N_CHANNELS * area + 1] = y / <double>(height - 1) if height > 1 else 0.0
        out[i, N_CHANNELS * area + 2] = hp[me] * inv_hp
    return out_arr


def adversarial_backup(
    const double[:, ::1] q,
    const double[:, :, ::1] policy,
    const cnp.int64_t[::1] n_actions,
    const cnp.int64_t[:, ::1] perceived,
    const cnp.int64_t[::1] cand_states,
    const cnp.int64_t[::1] cand_ptr,
    int j,
):
    cdef Py_ssize_t n_states = q.shape[0]
    cdef Py_ssize_t n_joint = q.shape[1]
    cdef Py_ssize_t n_agents = n_actions.shape[0]
    cdef Py_ssize_t aj_count = n_actions[j]
    values_arr = np.empty(n_states, dtype=np.float64)
    argmin_arr = np.empty(n_states, dtype=np.int64)
    cdef double[::1] values = values_arr
    cdef cnp.int64_t[::1] argmin = argmin_arr
    weights_arr = np.empty(aj_count, dtype=np.float64)
    cdef double[::1] weights = weights_arr
    digits_arr = np.zeros(n_agents, dtype=np.int64)
    cdef cnp.int64_t[::1] digits = digits_arr
    cdef Py_ssize_t s, a, k, c, b
    cdef double prob, total, best
    cdef cnp.int64_t best_state
    for s in range(n_states):
        for a in range(aj_count):
            weights[a] = 0.0
        for k in range(n_agents):
            digits[k] = 0
        for a in range(n_joint):
            prob = 1.0
            for k in range(n_agents):
                if k != j:
                    prob *= policy[k, perceived[k, s], digits[k]]
            weights[digits[j]] += prob * q[s, a]
            # odometer, last agent fastest (C order)
            k = n_agents - 1
            while k >= 0:
                digits[k] += 1
                if digits[k] < n_actions[k]:
                    break
                digits[k] = 0
                k -= 1
        best = 0.0
        best_state = -1
        for c in range(cand_ptr[s], cand_ptr[s + 1]):
            b = cand_states[c]
            total = 0.0
            for a in range(aj_count):
                total += policy[j, b, a] * weights[a]
            if best_state < 0 or total < best:
                best = total
                best_state = b
        values[s] = best
        argmin[s] = best_state
    return values_arr, argmin_arr
