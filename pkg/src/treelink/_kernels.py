"""Compiled inner loops for the linkage sampler.

Kernels take pre-drawn uniforms so the caller's ``numpy.random.Generator``
stays the single source of randomness (reproducible, per-chain streams).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _categorical_pick(logw, m, u):
    mx = logw[0]
    for k in range(1, m):
        if logw[k] > mx:
            mx = logw[k]
    total = 0.0
    for k in range(m):
        logw[k] = np.exp(logw[k] - mx)
        total += logw[k]
    target = u * total
    acc = 0.0
    for k in range(m):
        acc += logw[k]
        if target < acc:
            return k
    return m - 1


@njit(cache=True)
def _insertion_sort(a, m):
    for i in range(1, m):
        v = a[i]
        k = i - 1
        while k >= 0 and a[k] > v:
            a[k + 1] = a[k]
            k -= 1
        a[k + 1] = v


@njit(cache=True)
def grid_build(pts, cs, ox, oy, ncx, ncy):
    """Counting sort of point ids by row-major cell; returns (starts, order)."""
    n = pts.shape[0]
    ncell = ncx * ncy
    cell = np.empty(n, dtype=np.int64)
    starts = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        ix = int((pts[i, 0] - ox) / cs)
        iy = int((pts[i, 1] - oy) / cs)
        if ix > ncx - 1:
            ix = ncx - 1
        if iy > ncy - 1:
            iy = ncy - 1
        c = iy * ncx + ix
        cell[i] = c
        starts[c + 1] += 1
    for c in range(ncell):
        starts[c + 1] += starts[c]
    fill = starts[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = cell[i]
        order[fill[c]] = i
        fill[c] += 1
    return starts, order


@njit(cache=True)
def box_candidates(cx, cy, h, lat, ox, oy, cs, ncx, ncy, starts, order, buf):
    """Fill ``buf`` with ids of latents inside the closed box; returns count (unsorted)."""
    x0 = int(np.floor((cx - h - ox) / cs))
    x1 = int(np.floor((cx + h - ox) / cs))
    y0 = int(np.floor((cy - h - oy) / cs))
    y1 = int(np.floor((cy + h - oy) / cs))
    if x0 < 0:
        x0 = 0
    if y0 < 0:
        y0 = 0
    if x1 > ncx - 1:
        x1 = ncx - 1
    if y1 > ncy - 1:
        y1 = ncy - 1
    m = 0
    for iy in range(y0, y1 + 1):
        row = iy * ncx
        for k in range(starts[row + x0], starts[row + x1 + 1]):
            j = order[k]
            if abs(lat[j, 0] - cx) <= h and abs(lat[j, 1] - cy) <= h:
                buf[m] = j
                m += 1
    return m


@njit(cache=True)
def lambda_box(y, lat, ox, oy, cs, ncx, ncy, starts, order, sigma2,
               half_width, growth, min_cand, max_half, u, out):
    """Redraw each record's latent among box candidates.

    Returns -1 on success, else the index of the record whose search failed.
    """
    n = y.shape[0]
    N = lat.shape[0]
    buf = np.empty(N, dtype=np.int64)
    logw = np.empty(N)
    inv2s = 0.5 / sigma2
    for r in range(n):
        cx = y[r, 0]
        cy = y[r, 1]
        h = half_width
        while True:
            m = box_candidates(cx, cy, h, lat, ox, oy, cs, ncx, ncy, starts, order, buf)
            if m >= min_cand:
                break
            if h >= max_half:
                return r
            h = min(h * growth, max_half)
        _insertion_sort(buf, m)
        for k in range(m):
            j = buf[k]
            dx = cx - lat[j, 0]
            dy = cy - lat[j, 1]
            logw[k] = -(dx * dx + dy * dy) * inv2s
        out[r] = buf[_categorical_pick(logw, m, u[r])]
    return -1


@njit(cache=True)
def lambda_exhaustive(y, lat, sigma2, u, out):
    n = y.shape[0]
    N = lat.shape[0]
    logw = np.empty(N)
    inv2s = 0.5 / sigma2
    for r in range(n):
        cx = y[r, 0]
        cy = y[r, 1]
        for j in range(N):
            dx = cx - lat[j, 0]
            dy = cy - lat[j, 1]
            logw[j] = -(dx * dx + dy * dy) * inv2s
        out[r] = _categorical_pick(logw, N, u[r])
    return -1


@njit(cache=True)
def lambda_box_probs(cx, cy, lat, ox, oy, cs, ncx, ncy, starts, order, sigma2,
                     half_width, growth, min_cand, max_half):
    """Full-length categorical vector for one record (test and diagnostics helper)."""
    N = lat.shape[0]
    buf = np.empty(N, dtype=np.int64)
    probs = np.zeros(N)
    h = half_width
    while True:
        m = box_candidates(cx, cy, h, lat, ox, oy, cs, ncx, ncy, starts, order, buf)
        if m >= min_cand or h >= max_half:
            break
        h = min(h * growth, max_half)
    if m == 0:
        return probs
    logw = np.empty(m)
    for k in range(m):
        j = buf[k]
        dx = cx - lat[j, 0]
        dy = cy - lat[j, 1]
        logw[k] = -(dx * dx + dy * dy) / (2.0 * sigma2)
    mx = logw.max()
    total = 0.0
    for k in range(m):
        logw[k] = np.exp(logw[k] - mx)
        total += logw[k]
    for k in range(m):
        probs[buf[k]] = logw[k] / total
    return probs


@njit(cache=True)
def bbox(pts):
    lo0 = np.inf
    lo1 = np.inf
    hi0 = -np.inf
    hi1 = -np.inf
    for i in range(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        if x < lo0:
            lo0 = x
        if x > hi0:
            hi0 = x
        if y < lo1:
            lo1 = y
        if y > hi1:
            hi1 = y
    return lo0, lo1, hi0, hi1


@njit(cache=True)
def latent_draw(lam, z, sigma2, normals, uniforms, xmin, ymin, xmax, ymax, s, mean, counts):
    """Conjugate latent draws from pre-drawn variates.

    Occupied latents: mean of member records plus sqrt(sigma2/m) * normal.
    Empty latents: uniform on the box. Fills ``s``, ``mean`` and ``counts``;
    returns the number of occupied draws that fell outside the box.
    """
    N = s.shape[0]
    for j in range(N):
        counts[j] = 0
        mean[j, 0] = 0.0
        mean[j, 1] = 0.0
    for r in range(lam.shape[0]):
        j = lam[r]
        counts[j] += 1
        mean[j, 0] += z[r, 0]
        mean[j, 1] += z[r, 1]
    outside = 0
    for j in range(N):
        m = counts[j]
        if m == 0:
            s[j, 0] = xmin + (xmax - xmin) * uniforms[j, 0]
            s[j, 1] = ymin + (ymax - ymin) * uniforms[j, 1]
        else:
            mean[j, 0] /= m
            mean[j, 1] /= m
            sd = np.sqrt(sigma2 / m)
            s[j, 0] = mean[j, 0] + sd * normals[j, 0]
            s[j, 1] = mean[j, 1] + sd * normals[j, 1]
            if s[j, 0] < xmin or s[j, 0] > xmax or s[j, 1] < ymin or s[j, 1] > ymax:
                outside += 1
    return outside
