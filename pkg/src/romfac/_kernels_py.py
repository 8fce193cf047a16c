"""Pure numpy versions of the compiled kernels.

These are the reference semantics.  ``_kernels.pyx`` must reproduce them
up to floating-point summation order.
"""
from __future__ import annotations

import numpy as np

N_CHANNELS = 5


def encode_observations(occ, team, hp, pos, agents, radius, max_hp):
    """Local window features for each agent in ``agents``.

    Channel layout (each over the ``(2r+1)^2`` window, row-major with the
    agent at the centre): out-of-bounds, ally, ally HP, enemy, enemy HP.
    Three trailing features hold the agent's own normalized x, y and HP.
    """
    height, width = occ.shape
    side = 2 * radius + 1
    area = side * side
    padded = np.full((height + 2 * radius, width + 2 * radius), -1, dtype=np.int64)
    padded[radius : radius + height, radius : radius + width] = occ
    inv_hp = 1.0 / max_hp if max_hp > 0 else 0.0
    out = np.zeros((len(agents), N_CHANNELS * area + 3))
    for i, me in enumerate(agents):
        x, y = int(pos[me, 0]), int(pos[me, 1])
        window = padded[y : y + side, x : x + side].ravel()
        out[i, :area] = window < 0
        others = window - 1
        present = (window > 0) & (others != me)
        idx = np.flatnonzero(present)
        ids = others[idx]
        ally = team[ids] == team[me]
        out[i, area + idx[ally]] = 1.0
        out[i, 2 * area + idx[ally]] = hp[ids[ally]] * inv_hp
        out[i, 3 * area + idx[~ally]] = 1.0
        out[i, 4 * area + idx[~ally]] = hp[ids[~ally]] * inv_hp
        out[i, N_CHANNELS * area] = x / (width - 1) if width > 1 else 0.0
        out[i, N_CHANNELS * area + 1] = y / (height - 1) if height > 1 else 0.0
        out[i, N_CHANNELS * area + 2] = hp[me] * inv_hp
    return out


def adversarial_backup(q, policy, n_actions, perceived, cand_states, cand_ptr, j):
    """Per-state minimum, over agent ``j``'s admissible perceived states, of
    the expected one-step backup ``q[s, joint_action]``.

    ``policy`` is padded to shape ``(N, S, max_actions)``; ``perceived[k, s]``
    is the state agent ``k`` perceives at true state ``s`` (row ``j`` is
    ignored).  Ties go to the first candidate in ``cand_states`` order.
    """
    n_states = q.shape[0]
    n_agents = len(n_actions)
    shape = tuple(int(a) for a in n_actions)
    values = np.empty(n_states)
    argmin = np.empty(n_states, dtype=np.int64)
    for s in range(n_states):
        table = q[s].reshape(shape)
        # contract every other agent's action distribution into the table
        for k in range(n_agents - 1, -1, -1):
            if k == j:
                continue
            dist = policy[k, perceived[k, s], : shape[k]]
            table = np.tensordot(table, dist, axes=([k], [0]))
        weights = np.asarray(table).reshape(shape[j])
        cands = cand_states[cand_ptr[s] : cand_ptr[s + 1]]
        totals = policy[j][cands, : shape[j]] @ weights
        best = int(np.argmin(totals))
        values[s] = totals[best]
        argmin[s] = cands[best]
    return values, argmin
