"""Incremental (Bowyer-Watson) 3D Delaunay tetrahedralization.

The triangulation is kept closed by "ghost" tetrahedra that join each convex
hull facet to a vertex at infinity (index -1). A new point removes every
tetrahedron whose circumsphere contains it (for ghosts: whose hull facet it
sees), and the cavity is re-filled by coning its boundary to the point. The
finite tetrahedra at the end tile the convex hull exactly.

Predicates are plain floating point; callers perturb inputs by a tiny seeded
jitter (see :func:`canopyvol.volume.jitter_points`) so exact degeneracies
(cospherical or coplanar quadruples) do not occur.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import DegenerateGeometryError

__all__ = ["delaunay_tetrahedra", "insertion_order"]

_INF = -1


@njit(cache=True, inline="always")
def _det3(ax, ay, az, bx, by, bz, cx, cy, cz):
    return ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)


@njit(cache=True)
def _orient(p, a, b, c, d):
    """Positive when (a, b, c, d) is positively oriented."""
    return _det3(
        p[b, 0] - p[a, 0], p[b, 1] - p[a, 1], p[b, 2] - p[a, 2],
        p[c, 0] - p[a, 0], p[c, 1] - p[a, 1], p[c, 2] - p[a, 2],
        p[d, 0] - p[a, 0], p[d, 1] - p[a, 1], p[d, 2] - p[a, 2],
    )


@njit(cache=True)
def _insphere(p, a, b, c, d, e):
    """Positive when e is inside the circumsphere of positively oriented abcd."""
    ax = p[a, 0] - p[e, 0]
    ay = p[a, 1] - p[e, 1]
    az = p[a, 2] - p[e, 2]
    bx = p[b, 0] - p[e, 0]
    by = p[b, 1] - p[e, 1]
    bz = p[b, 2] - p[e, 2]
    cx = p[c, 0] - p[e, 0]
    cy = p[c, 1] - p[e, 1]
    cz = p[c, 2] - p[e, 2]
    dx = p[d, 0] - p[e, 0]
    dy = p[d, 1] - p[e, 1]
    dz = p[d, 2] - p[e, 2]
    la = ax * ax + ay * ay + az * az
    lb = bx * bx + by * by + bz * bz
    lc = cx * cx + cy * cy + cz * cz
    ld = dx * dx + dy * dy + dz * dz
    return (
        la * _det3(bx, by, bz, cx, cy, cz, dx, dy, dz)
        - lb * _det3(ax, ay, az, cx, cy, cz, dx, dy, dz)
        + lc * _det3(ax, ay, az, bx, by, bz, dx, dy, dz)
        - ld * _det3(ax, ay, az, bx, by, bz, cx, cy, cz)
    )


@njit(cache=True)
def _orient_replaced(p, tv, t, slot, q):
    """Orientation of tetrahedron t with vertex ``slot`` replaced by point q."""
    v0 = tv[t, 0]
    v1 = tv[t, 1]
    v2 = tv[t, 2]
    v3 = tv[t, 3]
    if slot == 0:
        v0 = q
    elif slot == 1:
        v1 = q
    elif slot == 2:
        v2 = q
    else:
        v3 = q
    return _orient(p, v0, v1, v2, v3)


@njit(cache=True)
def _inf_slot(tv, t):
    for i in range(4):
        if tv[t, i] == _INF:
            return i
    return -1


@njit(cache=True)
def _in_conflict(p, tv, tn, t, q):
    j = _inf_slot(tv, t)
    if j < 0:
        return _insphere(p, tv[t, 0], tv[t, 1], tv[t, 2], tv[t, 3], q) > 0.0
    o = _orient_replaced(p, tv, t, j, q)
    if o > 0.0:
        return True
    if o < 0.0:
        return False
    # q on the hull facet plane: conflict iff inside the finite neighbour's sphere
    f = tn[t, j]
    return _insphere(p, tv[f, 0], tv[f, 1], tv[f, 2], tv[f, 3], q) > 0.0


@njit(cache=True)
def _grow(tv, tn, alive, stamp):
    cap = tv.shape[0] * 2
    tv2 = np.full((cap, 4), -2, np.int64)
    tn2 = np.full((cap, 4), -1, np.int64)
    alive2 = np.zeros(cap, np.bool_)
    stamp2 = np.zeros(cap, np.int64)
    old = tv.shape[0]
    tv2[:old] = tv
    tn2[:old] = tn
    alive2[:old] = alive
    stamp2[:old] = stamp
    return tv2, tn2, alive2, stamp2


@njit(cache=True)
def _link_initial(tv, tn, ntet):
    # two tetrahedra share the face opposite slot i of t when they share its
    # three vertices
    for t in range(ntet):
        for i in range(4):
            for u in range(ntet):
                if u == t:
                    continue
                shared = 0
                for a in range(4):
                    if a == i:
                        continue
                    for b in range(4):
                        if tv[u, b] == tv[t, a]:
                            shared += 1
                if shared == 3:
                    tn[t, i] = u


@njit(cache=True)
def _bowyer_watson(p, order):
    n = p.shape[0]
    cap = max(64, 8 * n + 64)
    tv = np.full((cap, 4), -2, np.int64)
    tn = np.full((cap, 4), -1, np.int64)
    alive = np.zeros(cap, np.bool_)
    stamp = np.zeros(cap, np.int64)
    free = np.empty(cap, np.int64)
    nfree = 0
    ntet = 0

    a, b, c, d = order[0], order[1], order[2], order[3]
    if _orient(p, a, b, c, d) < 0.0:
        c, d = d, c
    base = np.array([a, b, c, d])
    tv[0, 0] = a
    tv[0, 1] = b
    tv[0, 2] = c
    tv[0, 3] = d
    for i in range(4):
        # ghost across face i: replace vertex i by infinity, swap two others
        # so the ghost is positively oriented with infinity as a point
        for s in range(4):
            tv[1 + i, s] = base[s]
        tv[1 + i, i] = _INF
        s1 = (i + 1) % 4
        s2 = (i + 2) % 4
        tmp = tv[1 + i, s1]
        tv[1 + i, s1] = tv[1 + i, s2]
        tv[1 + i, s2] = tmp
    for t in range(5):
        alive[t] = True
    ntet = 5
    _link_initial(tv, tn, 5)

    cavity = np.empty(64, np.int64)
    bface_t = np.empty(64, np.int64)
    bface_s = np.empty(64, np.int64)
    newt = np.empty(64, np.int64)
    stack = np.empty(64, np.int64)
    keys = np.empty(192, np.int64)
    kslot = np.empty(192, np.int64)
    ktet = np.empty(192, np.int64)

    cur_stamp = 0
    last = 0
    rng_state = np.uint64(88172645463325252)
    skipped = 0

    for it in range(4, n):
        q = order[it]

        # ---- locate a conflicting tetrahedron by a stochastic visibility walk
        t = last
        if not alive[t]:
            t = 0
            while not alive[t]:
                t += 1
        start = -1
        steps = 0
        max_steps = 4 * ntet + 100
        while steps < max_steps:
            steps += 1
            j = _inf_slot(tv, t)
            if j >= 0:
                if _in_conflict(p, tv, tn, t, q):
                    start = t
                break
            rng_state ^= rng_state << np.uint64(13)
            rng_state ^= rng_state >> np.uint64(7)
            rng_state ^= rng_state << np.uint64(17)
            off = np.int64(rng_state % np.uint64(4))
            moved = False
            for r in range(4):
                i = (off + r) % 4
                if _orient_replaced(p, tv, t, i, q) < 0.0:
                    t = tn[t, i]
                    moved = True
                    break
            if not moved:
                if _in_conflict(p, tv, tn, t, q):
                    start = t
                break
        if start < 0:
            for u in range(ntet):
                if alive[u] and _in_conflict(p, tv, tn, u, q):
                    start = u
                    break
        if start < 0:
            # duplicate of an existing vertex (or numerically so): skip it
            skipped += 1
            continue

        # ---- grow the cavity; enlarge it while any finite cone is inverted
        cur_stamp += 1
        ncav = 0
        nstack = 0
        stamp[start] = cur_stamp
        stack[0] = start
        nstack = 1
        while nstack > 0:
            nstack -= 1
            t = stack[nstack]
            if ncav >= cavity.shape[0]:
                cavity = np.concatenate((cavity, np.empty(cavity.shape[0], np.int64)))
            cavity[ncav] = t
            ncav += 1
            for i in range(4):
                u = tn[t, i]
                if stamp[u] == cur_stamp or stamp[u] == -cur_stamp:
                    continue
                if _in_conflict(p, tv, tn, u, q):
                    stamp[u] = cur_stamp
                    if nstack >= stack.shape[0]:
                        stack = np.concatenate((stack, np.empty(stack.shape[0], np.int64)))
                    stack[nstack] = u
                    nstack += 1
                else:
                    stamp[u] = -cur_stamp

        while True:
            nb = 0
            bad = -1
            for ci in range(ncav):
                t = cavity[ci]
                for i in range(4):
                    u = tn[t, i]
                    if stamp[u] == cur_stamp:
                        continue
                    if nb >= bface_t.shape[0]:
                        bface_t = np.concatenate((bface_t, np.empty(bface_t.shape[0], np.int64)))
                        bface_s = np.concatenate((bface_s, np.empty(bface_s.shape[0], np.int64)))
                    bface_t[nb] = t
                    bface_s[nb] = i
                    nb += 1
                    if bad < 0:
                        ts = _inf_slot(tv, t)
                        # the cone over this face is finite: it must not be inverted
                        if (ts < 0 or ts == i) and _orient_replaced(p, tv, t, i, q) <= 0.0:
                            bad = u
            if bad < 0:
                break
            stamp[bad] = cur_stamp
            if ncav >= cavity.shape[0]:
                cavity = np.concatenate((cavity, np.empty(cavity.shape[0], np.int64)))
            cavity[ncav] = bad
            ncav += 1

        # ---- cone the cavity boundary to q
        if ntet + nb - ncav + 8 >= tv.shape[0] or ntet + nb + 8 >= tv.shape[0]:
            tv, tn, alive, stamp = _grow(tv, tn, alive, stamp)
            free2 = np.empty(tv.shape[0], np.int64)
            free2[:nfree] = free[:nfree]
            free = free2
        for ci in range(ncav):
            alive[cavity[ci]] = False
        if newt.shape[0] < nb:
            newt = np.empty(2 * nb, np.int64)
        for f in range(nb):
            t = bface_t[f]
            i = bface_s[f]
            if nfree > 0:
                nfree -= 1
                w = free[nfree]
            else:
                w = ntet
                ntet += 1
            newt[f] = w
            for s in range(4):
                tv[w, s] = tv[t, s]
                tn[w, s] = -1
            tv[w, i] = q
            alive[w] = True
            stamp[w] = 0
            outside = tn[t, i]
            tn[w, i] = outside
            for s in range(4):
                if tn[outside, s] == t:
                    tn[outside, s] = w
        # pair up the faces through q: each is keyed by the edge it shares
        # with the cavity boundary
        nk = 0
        if keys.shape[0] < 3 * nb:
            keys = np.empty(6 * nb, np.int64)
            kslot = np.empty(6 * nb, np.int64)
            ktet = np.empty(6 * nb, np.int64)
        for f in range(nb):
            w = newt[f]
            i = bface_s[f]
            for s in range(4):
                if s == i:
                    continue
                e0 = -2
                e1 = -2
                for r in range(4):
                    if r == i or r == s:
                        continue
                    if e0 == -2:
                        e0 = tv[w, r]
                    else:
                        e1 = tv[w, r]
                lo = min(e0, e1) + 1
                hi = max(e0, e1) + 1
                keys[nk] = lo * (n + 1) + hi
                kslot[nk] = s
                ktet[nk] = w
                nk += 1
        srt = np.argsort(keys[:nk])
        for r in range(0, nk - 1, 2):
            x = srt[r]
            y = srt[r + 1]
            if keys[x] != keys[y]:
                return np.empty((0, 4), np.int64), -1
            tn[ktet[x], kslot[x]] = ktet[y]
            tn[ktet[y], kslot[y]] = ktet[x]
        for ci in range(ncav):
            free[nfree] = cavity[ci]
            nfree += 1
        last = newt[0]
        for f in range(nb):
            if _inf_slot(tv, newt[f]) < 0:
                last = newt[f]
                break

    count = 0
    for t in range(ntet):
        if alive[t] and _inf_slot(tv, t) < 0:
            count += 1
    out = np.empty((count, 4), np.int64)
    m = 0
    for t in range(ntet):
        if alive[t] and _inf_slot(tv, t) < 0:
            for s in range(4):
                out[m, s] = tv[t, s]
            m += 1
    return out, skipped


def _morton_keys(pts: np.ndarray, bits: int = 10) -> np.ndarray:
    lo = pts.min(axis=0)
    span = np.ptp(pts, axis=0)
    span[span == 0] = 1.0
    q = np.minimum(((pts - lo) / span * (2**bits - 1)).astype(np.int64), 2**bits - 1)
    key = np.zeros(len(pts), np.int64)
    for bit in range(bits):
        for axis in range(3):
            key |= ((q[:, axis] >> bit) & 1) << (3 * bit + axis)
    return key


def insertion_order(pts: np.ndarray, seed: int = 0) -> np.ndarray:
    """Biased randomized insertion order: rounds of doubling size, each sorted
    along a Morton curve, preceded by four well-spread starting vertices.

    Raises :class:`DegenerateGeometryError` when the points are (nearly)
    coplanar.
    """
    n = len(pts)
    if n < 4:
        raise DegenerateGeometryError(f"tetrahedralization needs at least 4 points, got {n}")
    scale = float(np.ptp(pts, axis=0).max())
    if scale == 0.0:
        raise DegenerateGeometryError("all points coincide")
    a = int(np.argmin(pts[:, 0]))
    b = int(np.argmax(((pts - pts[a]) ** 2).sum(axis=1)))
    ab = pts[b] - pts[a]
    cr = np.cross(pts - pts[a], ab)
    c = int(np.argmax((cr**2).sum(axis=1)))
    normal = np.cross(ab, pts[c] - pts[a])
    nn = np.linalg.norm(normal)
    if nn <= 1e-14 * scale * scale:
        raise DegenerateGeometryError("points are collinear")
    h = (pts - pts[a]) @ (normal / nn)
    d = int(np.argmax(np.abs(h)))
    if abs(h[d]) <= 1e-9 * scale:
        raise DegenerateGeometryError("points are coplanar")

    first = [a, b, c, d]
    rest = np.setdiff1d(np.arange(n), first)
    rng = np.random.default_rng(seed)
    rest = rest[rng.permutation(len(rest))]
    keys = _morton_keys(pts)
    rounds = []
    hi = len(rest)
    while hi > 0:
        lo = hi // 2 if hi > 64 else 0
        chunk = rest[lo:hi]
        rounds.append(chunk[np.argsort(keys[chunk], kind="stable")])
        hi = lo
    return np.concatenate([np.array(first, dtype=np.int64)] + rounds[::-1]).astype(np.int64)


def delaunay_tetrahedra(pts: np.ndarray, seed: int = 0) -> np.ndarray:
    """Finite Delaunay tetrahedra of ``pts`` as an ``(m, 4)`` index array,
    each positively oriented."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    order = insertion_order(pts, seed)
    tets, skipped = _bowyer_watson(pts, order)
    if skipped < 0:
        raise DegenerateGeometryError("tetrahedralization failed: cavity boundary is not a closed surface")
    return tets
