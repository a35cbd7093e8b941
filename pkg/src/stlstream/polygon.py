"""
Planar polygon helpers: signed area, containment, nesting of contours
into outer/hole groups and ear-clipping triangulation with holes.

Polygons are (n, 2) float arrays without a repeated closing point.
Outer contours are counter-clockwise, holes clockwise.
"""
from __future__ import annotations

import numpy as np

EPS = 1e-12


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_ccw(poly) -> bool:
    return signed_area(poly) > 0


def point_in_polygon(point, poly) -> bool:
    """Even-odd ray test; points on the boundary may go either way."""
    x, y = float(point[0]), float(point[1])
    p = np.asarray(poly, dtype=np.float64)
    xi, yi = p[:, 0], p[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    crosses = (yi > y) != (yj > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xi + (y - yi) * (xj - xi) / (yj - yi)
    return bool(np.count_nonzero(crosses & (x < xint)) % 2)


def dedupe(poly, tol: float = 0.0) -> np.ndarray:
    """Drop consecutive duplicate points, including a closing repeat."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) == 0:
        return p.reshape(0, 2)
    keep = [0]
    for i in range(1, len(p)):
        if np.max(np.abs(p[i] - p[keep[-1]])) > tol:
            keep.append(i)
    out = p[keep]
    while len(out) > 1 and np.max(np.abs(out[0] - out[-1])) <= tol:
        out = out[:-1]
    return out


def drop_collinear(poly, tol: float = 1e-9) -> np.ndarray:
    """Remove vertices whose neighbours make a straight line through them."""
    p = dedupe(poly)
    changed = True
    while changed and len(p) > 3:
        changed = False
        prev = np.roll(p, 1, axis=0)
        nxt = np.roll(p, -1, axis=0)
        cross = (p[:, 0] - prev[:, 0]) * (nxt[:, 1] - prev[:, 1]) - (
            p[:, 1] - prev[:, 1]
        ) * (nxt[:, 0] - prev[:, 0])
        seg = np.hypot(nxt[:, 0] - prev[:, 0], nxt[:, 1] - prev[:, 1])
        flat = np.abs(cross) <= tol * np.maximum(seg, 1.0)
        if flat.any():
            i = int(np.argmax(flat))
            p = np.delete(p, i, axis=0)
            changed = True
    return p


def group_contours(loops) -> list[tuple[np.ndarray, list[np.ndarray]]]:
    """
    Pair clockwise holes with the smallest counter-clockwise contour that
    contains them.

    Returns a list of ``(outer, holes)``; holes with no container are
    dropped.
    """
    outers, holes = [], []
    for loop in loops:
        loop = np.asarray(loop, dtype=np.float64)
        a = signed_area(loop)
        if a > 0:
            outers.append((loop, a))
        elif a < 0:
            holes.append(loop)
    groups = [(o, []) for o, _ in outers]
    for h in holes:
        probe = _interior_probe(h)
        best, best_area = None, np.inf
        for i, (o, a) in enumerate(outers):
            if a < best_area and point_in_polygon(probe, o):
                best, best_area = i, a
        if best is not None:
            groups[best][1].append(h)
    return groups


def _interior_probe(loop: np.ndarray) -> np.ndarray:
    # a point just off the midpoint of the longest edge, on the side the
    # contour encloses; avoids testing a vertex shared with another loop
    d = np.roll(loop, -1, axis=0) - loop
    i = int(np.argmax(np.hypot(d[:, 0], d[:, 1])))
    mid = loop[i] + 0.5 * d[i]
    n = np.array([-d[i, 1], d[i, 0]]) / max(np.hypot(*d[i]), EPS)
    # holes are clockwise, so their enclosed side is to the right
    return mid - n * 1e-7


def _bridge_holes(outer: np.ndarray, holes: list[np.ndarray]) -> np.ndarray:
    """
    Splice holes into the outer contour with zero-width bridges so the
    result is a single (weakly simple) counter-clockwise polygon.
    """
    poly = np.asarray(outer, dtype=np.float64)
    pending = sorted(holes, key=lambda h: -float(np.max(h[:, 0])))
    while pending:
        hole = pending.pop(0)
        hi = int(np.lexsort((hole[:, 1], -hole[:, 0]))[0])
        m = hole[hi]
        blockers = [hole] + pending
        j = _visible_vertex(poly, m, blockers)
        ring = np.concatenate([hole[hi:], hole[: hi + 1]])
        # outer[..j] -> hole[hi..] -> hole[..hi] -> outer[j..]
        poly = np.concatenate([poly[: j + 1], ring, poly[j:]])
    return poly


def _segments(loops):
    a = np.concatenate([np.asarray(l) for l in loops])
    b = np.concatenate([np.roll(np.asarray(l), -1, axis=0) for l in loops])
    return a, b


def _visible_vertex(poly: np.ndarray, m: np.ndarray, others) -> int:
    """Index of the nearest vertex of ``poly`` joinable to ``m`` by a free segment."""
    ea, eb = _segments([poly] + list(others))
    d = np.hypot(poly[:, 0] - m[0], poly[:, 1] - m[1])
    for j in np.argsort(d, kind="stable"):
        v = poly[j]
        if d[j] == 0.0:
            return int(j)
        if _segment_clear(m, v, ea, eb) and _bridge_inside(poly, j, m):
            return int(j)
    return int(np.argmin(d))


def _bridge_inside(poly, j, m) -> bool:
    # the bridge must leave vertex j into the polygon interior, i.e. lie
    # within the (possibly reflex) interior angle at j
    n = len(poly)
    p, v, q = poly[j - 1], poly[j], poly[(j + 1) % n]

    def ang(w):
        return np.arctan2(w[1] - v[1], w[0] - v[0])

    a_in, a_out, a_m = ang(q), ang(p), ang(m)
    # interior of a CCW polygon lies counter-clockwise from the outgoing
    # edge (v->q) to the incoming edge reversed (v->p)
    span = (a_out - a_in) % (2 * np.pi)
    rel = (a_m - a_in) % (2 * np.pi)
    return 0.0 < rel < span or span == 0.0


def _segment_clear(p, q, ea, eb) -> bool:
    """True when segment p-q crosses no edge except at shared endpoints."""
    r = q - p
    s = eb - ea
    denom = r[0] * s[:, 1] - r[1] * s[:, 0]
    qp = ea - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / denom
        u = (qp[:, 0] * r[1] - qp[:, 1] * r[0]) / denom
    touch_p = np.all(ea == p, axis=1) | np.all(eb == p, axis=1)
    touch_q = np.all(ea == q, axis=1) | np.all(eb == q, axis=1)
    tol = 1e-12
    hit = (np.abs(denom) > 0) & (t > tol) & (t < 1 - tol) & (u >= -tol) & (u <= 1 + tol)
    hit |= (np.abs(denom) > 0) & (u > tol) & (u < 1 - tol) & (t >= -tol) & (t <= 1 + tol)
    hit &= ~(touch_p | touch_q)
    if hit.any():
        return False
    # collinear overlaps
    col = (np.abs(denom) == 0) & (np.abs(qp[:, 0] * r[1] - qp[:, 1] * r[0]) <= tol)
    if col.any():
        rr = float(r @ r)
        t0 = (qp[col] @ r) / rr
        t1 = ((eb[col] - p) @ r) / rr
        lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
        if np.any((hi > tol) & (lo < 1 - tol)):
            return False
    return True


def triangulate(outer, holes=()):
    """
    Ear-clipping triangulation of a polygon with holes.

    Parameters
    ----------
    outer : (n, 2) float
      Counter-clockwise outer contour.
    holes : sequence of (m, 2) float
      Clockwise hole contours, each inside ``outer``.

    Returns
    -------
    points : (p, 2) float
      Vertex table (outer followed by hole vertices, no duplicates
      added by bridging).
    triangles : list of (i, j, k)
      Counter-clockwise triangles indexing ``points``.
    """
    outer = np.asarray(outer, dtype=np.float64)
    holes = [np.asarray(h, dtype=np.float64) for h in holes if len(h) >= 3]
    table = np.concatenate([outer] + holes) if holes else outer
    index = {}
    for i, p in enumerate(map(tuple, table)):
        index.setdefault(p, i)
    merged = _bridge_holes(outer, holes) if holes else outer
    ids = [index[tuple(p)] for p in merged]
    tris = _earclip(merged, ids)
    return table, tris


def _earclip(pts: np.ndarray, ids: list[int]) -> list[tuple[int, int, int]]:
    n = len(pts)
    out: list[tuple[int, int, int]] = []
    if n < 3:
        return out
    xs = pts[:, 0].copy()
    ys = pts[:, 1].copy()
    nxt = list(range(1, n)) + [0]
    prv = [n - 1] + list(range(n - 1))
    alive = np.ones(n, dtype=bool)
    count = n
    scale = max(float(np.ptp(xs)), float(np.ptp(ys)), 1.0)
    eps = EPS * scale * scale

    def cross(i, j, k):
        return (xs[j] - xs[i]) * (ys[k] - ys[i]) - (ys[j] - ys[i]) * (xs[k] - xs[i])

    def is_ear(i):
        a, c = prv[i], nxt[i]
        if cross(a, i, c) <= eps:
            return False
        ax, ay, bx, by, cx, cy = xs[a], ys[a], xs[i], ys[i], xs[c], ys[c]
        # candidate blockers: live vertices not coincident with the corners
        m = alive.copy()
        m[[a, i, c]] = False
        if not m.any():
            return True
        px, py = xs[m], ys[m]
        same = ((px == ax) & (py == ay)) | ((px == bx) & (py == by)) | ((px == cx) & (py == cy))
        d1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        d2 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        d3 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        inside = (d1 >= -eps) & (d2 >= -eps) & (d3 >= -eps) & ~same
        return not inside.any()

    def clip(i):
        nonlocal count
        a, c = prv[i], nxt[i]
        if ids[a] != ids[i] and ids[i] != ids[c] and ids[a] != ids[c]:
            out.append((ids[a], ids[i], ids[c]))
        nxt[a], prv[c] = c, a
        alive[i] = False
        count -= 1
        return a

    i = 0
    stall = 0
    while count > 3:
        if is_ear(i):
            i = nxt[clip(i)]
            stall = 0
            continue
        i = nxt[i]
        stall += 1
        if stall < count:
            continue
        # no strict ear left: first remove spikes / straight runs, which
        # contribute zero-area triangles and keep the edge set intact
        j = _first(alive, nxt, i, lambda k: abs(cross(prv[k], k, nxt[k])) <= eps)
        if j is None:
            # malformed input; clip the least reflex vertex to guarantee progress
            cand = [k for k in range(n) if alive[k]]
            j = max(cand, key=lambda k: cross(prv[k], k, nxt[k]))
        i = nxt[clip(j)]
        stall = 0
    if count == 3:
        a = i
        b, c = nxt[a], nxt[nxt[a]]
        if len({ids[a], ids[b], ids[c]}) == 3:
            if cross(a, b, c) < -eps:
                out.append((ids[a], ids[c], ids[b]))
            else:
                out.append((ids[a], ids[b], ids[c]))
    return out


def _first(alive, nxt, start, pred):
    k = start
    while True:
        if alive[k] and pred(k):
            return k
        k = nxt[k]
        if k == start:
            return None


def triangulate_loops(loops) -> list[np.ndarray]:
    """
    Triangulate a set of closed contours (outer CCW, holes CW).

    Returns a list of (3, 2) float triangles, counter-clockwise.
    """
    result = []
    for outer, holes in group_contours(loops):
        pts, tris = triangulate(outer, holes)
        for t in tris:
            result.append(pts[list(t)])
    return result
