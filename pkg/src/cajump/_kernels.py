"""Compiled inner loops for the automaton. Grids are square uint8 arrays, periodic."""
from __future__ import annotations

import numpy as np
from numba import njit

_DR = np.array([-1, 1, 0, 0], dtype=np.int64)
_DC = np.array([0, 0, -1, 1], dtype=np.int64)


@njit(cache=True, nogil=True)
def label_components(grid):
    """Label 4-connected solid components on the torus.

    Returns ``(labels, starts, cells)``: ``labels`` holds -1 for void and the
    component id otherwise; component ``k`` owns the flat cell indices
    ``cells[starts[k]:starts[k + 1]]``. Ids follow raster order of each
    component's first cell.
    """
    n = grid.shape[0]
    total = n * n
    labels = np.full(total, -1, dtype=np.int64)
    cells = np.empty(total, dtype=np.int64)
    starts = np.empty(total + 1, dtype=np.int64)
    flat = grid.ravel()
    ncomp = 0
    top = 0
    for seed in range(total):
        if flat[seed] == 0 or labels[seed] >= 0:
            continue
        starts[ncomp] = top
        labels[seed] = ncomp
        cells[top] = seed
        head = top
        top += 1
        while head < top:
            cur = cells[head]
            head += 1
            r = cur // n
            c = cur - r * n
            for k in range(4):
                rr = (r + _DR[k]) % n
                cc = (c + _DC[k]) % n
                nb = rr * n + cc
                if flat[nb] != 0 and labels[nb] < 0:
                    labels[nb] = ncomp
                    cells[top] = nb
                    top += 1
        ncomp += 1
    starts[ncomp] = top
    return labels, starts[: ncomp + 1].copy(), cells[:top].copy()


@njit(cache=True, nogil=True)
def _agg_range(sigma, mu):
    r = int(np.floor(sigma / np.sqrt(mu)))
    # guard the floor against rounding in the square root
    if (r + 1) * (r + 1) * mu <= sigma * sigma:
        r += 1
    elif r > 0 and r * r * mu > sigma * sigma:
        r -= 1
    return r if r > 1 else 1


@njit(cache=True, nogil=True)
def sweep(grid, starts, cells, order, draws, sigma):
    """Move every component once, in ``order``; mutates ``grid`` in place.

    ``draws[i]`` in [0, 1) picks among the maximal candidates of the i-th
    visited component. Returns the number of components that changed position.
    """
    n = grid.shape[0]
    flat = grid.ravel()
    stamp = np.zeros(n * n, dtype=np.int64)
    tick = 0
    moved = 0
    maxmu = 0
    for k in range(starts.shape[0] - 1):
        mu = starts[k + 1] - starts[k]
        if mu > maxmu:
            maxmu = mu
    rows = np.empty(maxmu, dtype=np.int64)
    cols = np.empty(maxmu, dtype=np.int64)
    for i in range(order.shape[0]):
        k = order[i]
        a = starts[k]
        mu = starts[k + 1] - a
        for j in range(mu):
            cell = cells[a + j]
            rows[j] = cell // n
            cols[j] = cell - rows[j] * n
            flat[cell] = 0
        rng_r = _agg_range(sigma, mu)
        ncand = 2 * rng_r * (rng_r + 1) + 1
        scores = np.full(ncand, -1, dtype=np.int64)
        cdr = np.empty(ncand, dtype=np.int64)
        cdc = np.empty(ncand, dtype=np.int64)
        best = -1
        m = 0
        for dr in range(-rng_r, rng_r + 1):
            span = rng_r - abs(dr)
            for dc in range(-span, span + 1):
                cdr[m] = dr
                cdc[m] = dc
                legal = True
                for j in range(mu):
                    t = ((rows[j] + dr) % n) * n + (cols[j] + dc) % n
                    if flat[t] != 0:
                        legal = False
                        break
                if legal:
                    # placed cells are void in the lifted grid; mark them so
                    # they are never counted as their own neighbours
                    tick += 1
                    for j in range(mu):
                        stamp[((rows[j] + dr) % n) * n + (cols[j] + dc) % n] = tick
                    score = 0
                    for j in range(mu):
                        tr = rows[j] + dr
                        tc = cols[j] + dc
                        for q in range(4):
                            nb = ((tr + _DR[q]) % n) * n + (tc + _DC[q]) % n
                            if flat[nb] != 0 and stamp[nb] != tick:
                                stamp[nb] = tick
                                score += 1
                    scores[m] = score
                    if score > best:
                        best = score
                m += 1
        count = 0
        for m in range(ncand):
            if scores[m] == best:
                count += 1
        pick = int(draws[i] * count)
        if pick >= count:
            pick = count - 1
        chosen = 0
        for m in range(ncand):
            if scores[m] == best:
                if pick == 0:
                    chosen = m
                    break
                pick -= 1
        dr = cdr[chosen]
        dc = cdc[chosen]
        if dr != 0 or dc != 0:
            moved += 1
        for j in range(mu):
            flat[((rows[j] + dr) % n) * n + (cols[j] + dc) % n] = 1
    return moved


@njit(cache=True, nogil=True)
def solid_neighbour_mean(grid):
    """Mean count of solid face-neighbours per solid cell (0.0 for no solids)."""
    n = grid.shape[0]
    total = 0
    solids = 0
    for r in range(n):
        for c in range(n):
            if grid[r, c] == 0:
                continue
            solids += 1
            for q in range(4):
                if grid[(r + _DR[q]) % n, (c + _DC[q]) % n] != 0:
                    total += 1
    if solids == 0:
        return 0.0
    return total / solids
