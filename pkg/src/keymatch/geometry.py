"""Graph construction from 2-D keypoints.

Keypoints become graph nodes, edges come from the Delaunay triangulation
(complete graph for fewer than 3 or all-collinear points), and each
directed edge carries a pseudo-coordinate feature: either a normalized
length (isotropic, width 1) or a normalized relative displacement
(anisotropic, width 2).  All feature entries lie in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Keypoint",
    "Graph",
    "delaunay",
    "isotropic_edge_features",
    "anisotropic_edge_features",
    "build_graph",
    "FEATURE_MODES",
]

FEATURE_MODES = ("isotropic", "anisotropic")
_MODE_ALIASES = {"iso": "isotropic", "aniso": "anisotropic"}


@dataclass
class Keypoint:
    """A 2-D landmark, optionally carrying a per-point feature vector."""

    x: float
    y: float
    feature: np.ndarray | None = None


@dataclass
class Graph:
    """One keypoint set as a graph.

    ``edges`` is the symmetric closure of the triangulation, stored as a
    lexicographically sorted (m, 2) array of directed (source, target)
    pairs.  ``edge_attr`` rows align with ``edges``.  ``cache`` holds
    deterministic per-graph derived quantities (e.g. spline basis plans).
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    edge_attr: np.ndarray
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def normalize_feature_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode: {mode!r}")
    return mode


def _as_points(points) -> np.ndarray:
    """Coerce an (n, 2) array, a sequence of pairs, or Keypoints."""
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
    else:
        seq = list(points)
        if seq and isinstance(seq[0], Keypoint):
            pts = np.array([[kp.x, kp.y] for kp in seq], dtype=np.float64)
        else:
            pts = np.asarray(seq, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty input")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def _point_features(points) -> np.ndarray | None:
    if isinstance(points, np.ndarray):
        return None
    seq = list(points)
    if not (seq and isinstance(seq[0], Keypoint)):
        return None
    feats = [kp.feature for kp in seq]
    if all(f is None for f in feats):
        return None
    if any(f is None for f in feats):
        raise ValueError("either all keypoints carry features or none do")
    return np.asarray([np.asarray(f, dtype=np.float64).ravel() for f in feats])


def _in_circumcircle(verts: np.ndarray, tri: tuple[int, int, int], p: int) -> bool:
    """Strict containment of point p in the circumcircle of tri.

    Degenerate (collinear) triangles are treated as containing every
    point, which removes sliver triangles during incremental insertion.
    """
    a, b, c = (verts[i] for i in tri)
    q = verts[p]
    ax, ay = a[0] - q[0], a[1] - q[1]
    bx, by = b[0] - q[0], b[1] - q[1]
    cx, cy = c[0] - q[0], c[1] - q[1]
    det = (
        (ax * ax + ay * ay) * (bx * cy - by * cx)
        - (bx * bx + by * by) * (ax * cy - ay * cx)
        + (cx * cx + cy * cy) * (ax * by - ay * bx)
    )
    orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(abs(ax), abs(ay), abs(bx), abs(by), abs(cx), abs(cy), 1e-300)
    if abs(orient) <= 1e-14 * scale * scale:
        return True
    if orient < 0:
        det = -det
    return det > 1e-12 * scale**4


def _cocircular_det(verts, a, b, c, d) -> tuple[float, float]:
    """Signed in-circle determinant of d vs circle(a, b, c), plus its scale."""
    pa, pb, pc, pd = verts[a], verts[b], verts[c], verts[d]
    ax, ay = pa[0] - pd[0], pa[1] - pd[1]
    bx, by = pb[0] - pd[0], pb[1] - pd[1]
    cx, cy = pc[0] - pd[0], pc[1] - pd[1]
    det = (
        (ax * ax + ay * ay) * (bx * cy - by * cx)
        - (bx * bx + by * by) * (ax * cy - ay * cx)
        + (cx * cx + cy * cy) * (ax * by - ay * bx)
    )
    scale = max(abs(ax), abs(ay), abs(bx), abs(by), abs(cx), abs(cy), 1e-300)
    return det, scale


def _tri_edges(tri):
    i, j, k = tri
    return ((i, j), (j, k), (k, i))


def _triangulate(pts: np.ndarray) -> list[tuple[int, int, int]]:
    """Incremental insertion with a super-triangle (Bowyer-Watson)."""
    n = len(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1e-9)
    s = 64.0 * span
    super_pts = np.array(
        [
            [center[0] - 3.0 * s, center[1] - s],
            [center[0] + 3.0 * s, center[1] - s],
            [center[0], center[1] + 3.0 * s],
        ]
    )
    verts = np.vstack([pts, super_pts])
    triangles: list[tuple[int, int, int]] = [(n, n + 1, n + 2)]
    for p in range(n):
        bad = [t for t in triangles if _in_circumcircle(verts, t, p)]
        counts: dict[tuple[int, int], int] = {}
        for t in bad:
            for u, v in _tri_edges(t):
                key = (u, v) if u < v else (v, u)
                counts[key] = counts.get(key, 0) + 1
        hole = [key for key, c in counts.items() if c == 1]
        bad_set = set(bad)
        triangles = [t for t in triangles if t not in bad_set]
        triangles.extend((u, v, p) for u, v in hole)
    return [t for t in triangles if max(t) < n]


def _prefer_low_index_diagonals(pts: np.ndarray, triangles: list[tuple[int, int, int]]):
    """Flip exactly co-circular quads toward the lowest-indexed diagonal.

    Random coordinates never tie, but hand-entered symmetric inputs (unit
    squares, grids) admit both diagonals; this pass makes the choice
    deterministic and documented: the diagonal whose sorted index pair is
    lexicographically smallest wins.
    """
    triangles = [tuple(sorted(t)) for t in triangles]
    for _ in range(4 * max(len(triangles), 1) ** 2):
        edge_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for ti, t in enumerate(triangles):
            for u, v in _tri_edges(t):
                key = (u, v) if u < v else (v, u)
                opp = next(w for w in t if w not in key)
                edge_map.setdefault(key, []).append((ti, opp))
        flipped = False
        for (a, b), owners in sorted(edge_map.items()):
            if len(owners) != 2:
                continue
            (t1, c), (t2, d) = owners
            alt = (c, d) if c < d else (d, c)
            if alt >= (a, b):
                continue
            det, scale = _cocircular_det(pts, a, b, c, d)
            if abs(det) > 1e-9 * scale**4:
                continue
            # Quad must be convex for the flip to stay a triangulation.
            ab = pts[b] - pts[a]
            side_c = ab[0] * (pts[c][1] - pts[a][1]) - ab[1] * (pts[c][0] - pts[a][0])
            side_d = ab[0] * (pts[d][1] - pts[a][1]) - ab[1] * (pts[d][0] - pts[a][0])
            if side_c * side_d >= 0:
                continue
            cd = pts[d] - pts[c]
            side_a = cd[0] * (pts[a][1] - pts[c][1]) - cd[1] * (pts[a][0] - pts[c][0])
            side_b = cd[0] * (pts[b][1] - pts[c][1]) - cd[1] * (pts[b][0] - pts[c][0])
            if side_a * side_b >= 0:
                continue
            triangles[t1] = tuple(sorted((c, d, a)))
            triangles[t2] = tuple(sorted((c, d, b)))
            flipped = True
            break
        if not flipped:
            break
    return triangles


def delaunay(points) -> list[tuple[int, int]]:
    """Undirected Delaunay edges of 2-D points, as sorted (i, j) pairs.

    Fewer than 3 points, or all-collinear points, fall back to the
    complete graph so downstream message passing never sees an edgeless
    multi-node graph.  Coincident points are rejected.
    """
    pts = _as_points(points)
    n = len(pts)
    if len(np.unique(pts, axis=0)) != n:
        raise ValueError("degenerate: coincident keypoints")
    if n < 3 or _all_collinear(pts):
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    triangles = _triangulate(pts)
    triangles = _prefer_low_index_diagonals(pts, triangles)
    edges = set()
    for t in triangles:
        for u, v in _tri_edges(t):
            edges.add((u, v) if u < v else (v, u))
    return sorted(edges)


def _all_collinear(pts: np.ndarray) -> bool:
    base = pts - pts[0]
    ref = base[np.argmax(np.einsum("ij,ij->i", base, base))]
    span = float(np.abs(base).max())
    cross = base[:, 0] * ref[1] - base[:, 1] * ref[0]
    return bool(np.all(np.abs(cross) <= 1e-12 * max(span * span, 1e-300)))


def _directed_edges(undirected) -> np.ndarray:
    pairs = sorted({(i, j) for i, j in undirected} | {(j, i) for i, j in undirected})
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def isotropic_edge_features(points, edges) -> np.ndarray:
    """Per-edge lengths divided by the longest edge; shape (m, 1)."""
    pts = _as_points(points)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros((0, 1), dtype=np.float64)
    delta = pts[e[:, 1]] - pts[e[:, 0]]
    lengths = np.hypot(delta[:, 0], delta[:, 1])
    longest = lengths.max()
    if longest == 0.0:
        raise ValueError("degenerate: coincident keypoints")
    return (lengths / longest)[:, None]


def anisotropic_edge_features(points, edges) -> np.ndarray:
    """Normalized relative displacement per directed edge; shape (m, 2).

    Feature of edge (i, j) is (dx, dy) / (2 M) + 0.5 with M the largest
    per-axis displacement magnitude over all edges of this graph, so the
    entries lie in [0, 1] and 0.5 marks a zero offset.  The feature of a
    reversed edge is computed as 1 minus the forward feature, which makes
    the reflection identity exact in floating point.
    """
    pts = _as_points(points)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    delta = pts[e[:, 1]] - pts[e[:, 0]]
    m = np.abs(delta).max()
    if m == 0.0:
        raise ValueError("degenerate: coincident keypoints")
    feat = delta / (2.0 * m) + 0.5
    row_of = {(int(i), int(j)): r for r, (i, j) in enumerate(e)}
    for r, (i, j) in enumerate(e):
        if i > j:
            partner = row_of.get((int(j), int(i)))
            if partner is not None:
                feat[r] = 1.0 - feat[partner]
    return feat


def build_graph(keypoints, feature_mode: str = "anisotropic") -> Graph:
    """Delaunay graph with node features X and edge pseudo-coordinates E.

    Keypoints without attached feature vectors get the constant feature 1,
    which forces matching to rely on structure and edge geometry alone.
    """
    mode = normalize_feature_mode(feature_mode)
    pts = _as_points(keypoints)
    feats = _point_features(keypoints)
    edges = _directed_edges(delaunay(pts))
    if mode == "isotropic":
        edge_attr = isotropic_edge_features(pts, edges)
    else:
        edge_attr = anisotropic_edge_features(pts, edges)
    x = feats if feats is not None else np.ones((len(pts), 1), dtype=np.float64)
    return Graph(n=len(pts), edges=edges, x=x, edge_attr=edge_attr)
