"""Dense occupancy evaluation, marching cubes and mesh-quality metrics.

The marching-cubes case table is generated rather than transcribed.  For each
corner sign pattern the iso-contour is traced on the six cube faces; an
ambiguous face (diagonal corners inside) is resolved by the asymptotic decider,
which depends on that face's four values only, so both cubes sharing a face
make the same choice and the surface stays closed.  The closed contour loops
are then triangulated.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# corner k sits at offset (k & 1, (k >> 1) & 1, (k >> 2) & 1)
CORNERS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)])
# edge e joins corner EDGE_CORNER[e] to the corner one step along EDGE_AXIS[e]
EDGE_AXIS = np.repeat(np.arange(3), 4)
EDGE_CORNER = np.array([k for a in range(3) for k in range(8) if not (k >> a) & 1])
EDGE_ENDS = np.stack([EDGE_CORNER, EDGE_CORNER + (1 << EDGE_AXIS)], axis=1)
T_EPS = 1e-3  # keeps interpolated vertices off the corners


def _faces():
    """(axis, side, 4 corners in cyclic (u, v) order)."""
    out = []
    for a in range(3):
        u, v = [b for b in range(3) if b != a]
        for s in (0, 1):
            cyc = [(0, 0), (1, 0), (1, 1), (0, 1)]
            out.append((a, s, [(s << a) | (i << u) | (j << v) for i, j in cyc]))
    return out


FACES = _faces()
_EDGE_LOOKUP = {tuple(sorted(ends)): e for e, ends in enumerate(EDGE_ENDS.tolist())}


def _edge(c0: int, c1: int) -> int:
    return _EDGE_LOOKUP[(min(c0, c1), max(c0, c1))]


def _edge_faces() -> list[set]:
    faces = [set() for _ in range(12)]
    for f, (_, _, cyc) in enumerate(FACES):
        for i in range(4):
            faces[_edge(cyc[i], cyc[(i + 1) % 4])].add(f)
    return faces


EDGE_FACES = _edge_faces()


def _face_segments(inside: list[bool], cyc: list[int], normal: np.ndarray, connected: bool):
    """Oriented contour segments on one face, inside region kept on the left seen from outside."""
    n_in = sum(inside)
    if n_in in (0, 4):
        return []
    crossings = [i for i in range(4) if inside[i] != inside[(i + 1) % 4]]
    if len(crossings) == 2:
        pairs = [tuple(crossings)]
    else:
        # diagonal case: cut off the corners that are *not* joined through the face centre
        cut = [i for i in range(4) if inside[i] != connected]
        pairs = [((i - 1) % 4, i) for i in cut]
    segs = []
    mid = {}
    for i in range(4):
        mid[i] = 0.5 * (CORNERS[cyc[i]] + CORNERS[cyc[(i + 1) % 4]])
    for i, j in pairs:
        side = [(i + 1 + k) % 4 for k in range((j - i) % 4)]
        other = [k for k in range(4) if k not in side]
        ref = side if len(side) <= len(other) else other
        r = ref[0]
        a, b = mid[i], mid[j]
        w = np.dot(np.cross(b - a, CORNERS[cyc[r]] - a), normal)
        if (w > 0) != inside[r]:
            i, j = j, i
        segs.append((_edge(cyc[i], cyc[(i + 1) % 4]), _edge(cyc[j], cyc[(j + 1) % 4])))
    return segs


@lru_cache(maxsize=None)
def case_polygons(case: int, face_bits: int = 0) -> tuple[tuple[int, ...], ...]:
    """Closed contour loops (cube edge ids) for an 8-bit corner pattern.

    Bit f of ``face_bits`` says whether the inside corners of ambiguous face f
    are joined.  Loops are oriented so that triangles face away from the inside.
    """
    inside = [(case >> k) & 1 == 1 for k in range(8)]
    nxt = {}
    for f, (a, s, cyc) in enumerate(FACES):
        normal = np.zeros(3)
        normal[a] = 1.0 if s else -1.0
        for e0, e1 in _face_segments([inside[c] for c in cyc], cyc, normal, bool((face_bits >> f) & 1)):
            if e0 in nxt:
                raise AssertionError(f"case {case}: edge {e0} leaves twice")
            nxt[e0] = e1
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, e = [], start
        while e not in seen:
            seen.add(e)
            loop.append(e)
            e = nxt[e]
        if e != start:
            raise AssertionError(f"case {case}: contour does not close")
        loops.append(tuple(reversed(loop)))
    return tuple(loops)


def _shares_face(e0: int, e1: int) -> bool:
    return bool(EDGE_FACES[e0] & EDGE_FACES[e1])


@lru_cache(maxsize=None)
def case_triangles(case: int, face_bits: int = 0) -> tuple[np.ndarray, tuple]:
    """Triangles over local vertex ids: 0-11 are cube edges, 12 + j is the centre of loop j.

    A fan diagonal joining two edges of one face could also be a contour edge of
    the neighbouring cube, so fans start at a vertex whose diagonals avoid that;
    loops without such a vertex are fanned around their centroid instead.
    """
    tris, centred = [], []
    for j, loop in enumerate(case_polygons(case, face_bits)):
        n = len(loop)
        if n == 3:
            tris.append(loop)
            continue
        start = next((s for s in range(n)
                      if not any(_shares_face(loop[s], loop[(s + k) % n]) for k in range(2, n - 1))), None)
        if start is None:
            centred.append((12 + j, loop))
            tris.extend((loop[i], loop[(i + 1) % n], 12 + j) for i in range(n))
        else:
            r = loop[start:] + loop[:start]
            tris.extend((r[0], r[i], r[i + 1]) for i in range(1, n - 1))
    return np.array(tris, dtype=np.int64).reshape(-1, 3), tuple(centred)


@dataclass
class OccupancyGrid:
    values: np.ndarray  # (G, G, G) probabilities indexed [x, y, z]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise ValueError(f"occupancy grid must be (G, G, G) with G >= 2, got {v.shape}")
        if np.isnan(v).any() or v.min() < 0 or v.max() > 1:
            raise ValueError("occupancy values must lie in [0, 1]")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def cell_centers(G: int) -> np.ndarray:
        ax = (np.arange(G) + 0.5) / G
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3)
    normals: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit normals and areas per triangle."""
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        length = np.linalg.norm(n, axis=1)
        return n / np.maximum(length, 1e-300)[:, None], 0.5 * length

    def vertex_normals(self) -> np.ndarray:
        n, area = self.face_normals()
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], n * area[:, None])
        return acc / np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)

    def edge_counts(self) -> np.ndarray:
        """Triangles per undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed_manifold(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_counts() == 2))

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6)


Field = Callable[[np.ndarray], np.ndarray]


def eval_occupancy_grid(field: Field, G: int, chunk: int = 65536) -> OccupancyGrid:
    """Evaluate ``field`` (world points -> probabilities) at the G^3 cell centres, chunk by chunk."""
    if G < 2:
        raise ValueError("G must be at least 2")
    if chunk < 1:
        raise ValueError("chunk must be positive")
    pts = OccupancyGrid.cell_centers(G)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = field(pts[s:s + chunk])
    return OccupancyGrid(out.reshape(G, G, G))


def model_field(model, latents) -> Field:
    """World-space probability field of a model encoded on one point cloud."""
    def field(x):
        q = np.clip(latents.pc.from_world(x), 0.0, 1.0)
        return model.predict_proba(latents, q)

    return field


def oracle_field(oracle) -> Field:
    return lambda x: oracle.occupancy(x).astype(np.float64)


def _face_bits(v: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """Asymptotic-decider bit per face for every cube; v, inside are (n_cubes, 8)."""
    bits = np.zeros(len(v), dtype=np.int64)
    for f, (_, _, cyc) in enumerate(FACES):
        g = v[:, cyc]
        ins = inside[:, cyc]
        diag02 = ins[:, 0] & ins[:, 2] & ~ins[:, 1] & ~ins[:, 3]
        diag13 = ins[:, 1] & ins[:, 3] & ~ins[:, 0] & ~ins[:, 2]
        det = g[:, 0] * g[:, 2] - g[:, 1] * g[:, 3]
        joined = (diag02 & (det > 0)) | (diag13 & (det < 0))
        bits |= joined.astype(np.int64) << f
    return bits


def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> Mesh:
    """Iso-surface of the grid; sample i sits at (i + 0.5) / G.  Inside means value > iso."""
    vals = grid.values
    G = grid.resolution
    n = G - 1
    idx = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), -1).reshape(-1, 3)
    corner_idx = idx[:, None, :] + CORNERS[None]  # (cubes, 8, 3)
    cv = vals[corner_idx[..., 0], corner_idx[..., 1], corner_idx[..., 2]] - iso
    inside = cv > 0
    case = (inside.astype(np.int64) << np.arange(8)).sum(axis=1)
    active = (case != 0) & (case != 255)
    if not active.any():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cubes, cv, inside, case = idx[active], cv[active], inside[active], case[active]
    key = case | (_face_bits(cv, inside) << 8)

    # global id of every cube edge: axis * G^3 + flat index of its lower corner
    lower = cubes[:, None, :] + CORNERS[EDGE_CORNER][None]
    edge_gid = EDGE_AXIS[None] * G ** 3 + (lower[..., 0] * G + lower[..., 1]) * G + lower[..., 2]
    tri_blocks, centre_blocks = [], []
    cube_flat = (cubes[:, 0] * n + cubes[:, 1]) * n + cubes[:, 2]
    for k in np.unique(key):
        sel = np.nonzero(key == k)[0]
        tris, centred = case_triangles(int(k) & 255, int(k) >> 8)
        local_ids = np.concatenate([edge_gid[sel], np.zeros((len(sel), 4), dtype=np.int64)], axis=1)
        for slot, loop in centred:
            cid = 3 * G ** 3 + cube_flat[sel] * 4 + (slot - 12)
            local_ids[:, slot] = cid
            centre_blocks.append((cid, edge_gid[sel][:, list(loop)]))
        tri_blocks.append(local_ids[:, tris].reshape(-1, 3))
    tri_gid = np.concatenate(tri_blocks)

    uniq, inv = np.unique(tri_gid, return_inverse=True)
    verts = np.empty((len(uniq), 3))
    is_edge = uniq < 3 * G ** 3
    verts[is_edge] = _edge_vertices(vals, uniq[is_edge], G, iso)
    if centre_blocks:
        pos = {}
        for cid, loops in centre_blocks:
            loop_pos = _edge_vertices(vals, loops.reshape(-1), G, iso).reshape(len(cid), -1, 3).mean(axis=1)
            pos.update(zip(cid.tolist(), loop_pos))
        for j in np.nonzero(~is_edge)[0]:
            verts[j] = pos[int(uniq[j])]
    mesh = Mesh(verts, inv.reshape(-1, 3))
    mesh.normals = mesh.vertex_normals()
    return mesh


def _edge_vertices(vals: np.ndarray, gid: np.ndarray, G: int, iso: float) -> np.ndarray:
    axis, flat = np.divmod(gid, G ** 3)
    p0 = np.stack(np.unravel_index(flat, (G, G, G)), axis=-1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axis] += 1
    v0 = vals[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = vals[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((iso - v0) / (v1 - v0), T_EPS, 1 - T_EPS)
    pos = p0 + t[:, None] * (p1 - p0)
    return (pos + 0.5) / G


def sample_surface(mesh: Mesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples and the unit normal of the triangle each lies on."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    normals, area = mesh.face_normals()
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1, r2 = rng.uniform(size=(2, n))
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    v = mesh.vertices[mesh.triangles[tri]]
    return np.einsum("nk,nkd->nd", w, v), normals[tri]


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to p on triangle (a, b, c); all arrays (..., 3), broadcast together."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[..., None] + ac * w[..., None]  # interior
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    regions = [
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[..., None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[..., None]),
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * t_bc[..., None]),
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
    ]
    for mask, val in regions:  # vertex regions last so they win over degenerate edge ratios
        out = np.where(mask[..., None], np.broadcast_to(val, out.shape), out)
    return out


def _dot(x, y):
    return np.einsum("...i,...i->...", x, y)


def mesh_distance(points: np.ndarray, mesh: Mesh, k: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Exact unsigned distance from each point to the mesh, and the index of the closest triangle.

    Candidates come from a KD-tree over triangle centroids; a point is settled
    once the k-th centroid is farther than its best distance plus the largest
    centroid-to-vertex radius, otherwise its candidate set is widened.
    """
    tri = mesh.vertices[mesh.triangles]
    cen = tri.mean(axis=1)
    radius = np.linalg.norm(tri - cen[:, None], axis=2).max()
    tree = cKDTree(cen)
    k = min(k, len(cen))
    cd, ci = tree.query(points, k=k)
    cd, ci = cd.reshape(len(points), k), ci.reshape(len(points), k)
    dist, best = _candidate_distance(points, tri, ci)
    if k < len(cen):
        open_ = np.nonzero(cd[:, -1] < dist + radius)[0]
        for i in open_:
            cand = np.asarray(tree.query_ball_point(points[i], dist[i] + radius), dtype=np.int64)
            d, b = _candidate_distance(points[i:i + 1], tri, cand[None])
            dist[i], best[i] = d[0], b[0]
    return dist, best


def _candidate_distance(points, tri, cand):
    best_d = np.full(len(points), np.inf)
    best_t = np.zeros(len(points), dtype=np.int64)
    step = max(1, 2 ** 18 // max(cand.shape[1], 1))
    for s in range(0, len(points), step):
        p = points[s:s + step, None, :]
        t = tri[cand[s:s + step]]
        q = closest_point_on_triangles(p, t[..., 0, :], t[..., 1, :], t[..., 2, :])
        d = np.linalg.norm(q - p, axis=-1)
        j = np.argmin(d, axis=1)
        best_d[s:s + step] = d[np.arange(len(j)), j]
        best_t[s:s + step] = cand[s:s + step][np.arange(len(j)), j]
    return best_d, best_t


def inside_mesh(points: np.ndarray, mesh: Mesh, bins: int = 64) -> np.ndarray:
    """Parity of +z ray crossings; meaningful for closed meshes."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros(len(points), dtype=bool)
    if mesh.is_empty:
        return out
    tri = mesh.vertices[mesh.triangles]
    lo, hi = tri[..., :2].min(axis=1), tri[..., :2].max(axis=1)
    box_lo = np.minimum(lo.min(axis=0), points[:, :2].min(axis=0))
    box_hi = np.maximum(hi.max(axis=0), points[:, :2].max(axis=0))
    span = np.maximum(box_hi - box_lo, 1e-12)

    def cell(x):
        return np.clip(((x - box_lo) / span * bins).astype(np.int64), 0, bins - 1)

    tlo, thi = cell(lo), cell(hi)
    pc = cell(points[:, :2])
    pkey = pc[:, 0] * bins + pc[:, 1]
    # expand triangles into the bins their xy bounding box covers
    nx, ny = thi[:, 0] - tlo[:, 0] + 1, thi[:, 1] - tlo[:, 1] + 1
    reps = nx * ny
    t_ids = np.repeat(np.arange(len(tri)), reps)
    offs = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    bx = tlo[t_ids, 0] + offs // ny[t_ids]
    by = tlo[t_ids, 1] + offs % ny[t_ids]
    tkey = bx * bins + by
    order = np.argsort(tkey, kind="stable")
    tkey, t_ids = tkey[order], t_ids[order]
    starts = np.searchsorted(tkey, np.arange(bins * bins))
    ends = np.searchsorted(tkey, np.arange(bins * bins), side="right")
    p_order = np.argsort(pkey, kind="stable")
    p_starts = np.searchsorted(pkey[p_order], np.arange(bins * bins))
    p_ends = np.searchsorted(pkey[p_order], np.arange(bins * bins), side="right")
    for b in np.nonzero(p_ends > p_starts)[0]:
        if ends[b] == starts[b]:
            continue
        pi = p_order[p_starts[b]:p_ends[b]]
        t = tri[t_ids[starts[b]:ends[b]]]
        out[pi] = _ray_parity(points[pi], t)
    return out


def _ray_parity(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = t[None, :, 0], t[None, :, 1], t[None, :, 2]
    q = p[:, None, :]

    def edge(u, v):
        return (v[..., 0] - u[..., 0]) * (q[..., 1] - u[..., 1]) - (v[..., 1] - u[..., 1]) * (q[..., 0] - u[..., 0])

    w0, w1, w2 = edge(b, c), edge(c, a), edge(a, b)
    area = w0 + w1 + w2
    hit = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0) | (w0 <= 0) & (w1 <= 0) & (w2 <= 0)) & (area != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (w0 * a[..., 2] + w1 * b[..., 2] + w2 * c[..., 2]) / area
    crossings = (hit & (z > q[..., 2])).sum(axis=1)
    return crossings % 2 == 1


@dataclass
class Report:
    iou: float
    chamfer_l1: float
    nc: float
    fscore: float
    n_samples: int
    seed: int
    n_probes: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in vars(self).items()}


WORST_CHAMFER = 100 * np.sqrt(3.0)  # unit-cube diagonal, scaled like the metric


def _surface(target, n: int, seed: int):
    """Samples, normals, and a distance/normal lookup for a mesh or an analytic oracle."""
    rng = np.random.default_rng(seed)
    if isinstance(target, Mesh):
        pts, nrm = sample_surface(target, n, rng)
        fn, _ = target.face_normals()

        def lookup(x):
            d, t = mesh_distance(x, target)
            return d, fn[t]
    else:
        pts, nrm = target.surface_sample(n, rng)

        def lookup(x):
            return target.distance(x), target.normal(x)
    return pts, nrm, lookup


def _inside(target, x):
    return inside_mesh(x, target) if isinstance(target, Mesh) else target.occupancy(x).astype(bool)


def metrics(pred: Mesh, gt, n_samples: int = 10000, seed: int = 0, n_probes: int = 100000,
            tau: float = 0.01) -> Report:
    """IoU, Chamfer-L1 (x100), normal consistency and F-score between a mesh and a mesh or oracle.

    Both surfaces are sampled with their own generator seeded by ``seed``,
    which makes the measure symmetric in its arguments.
    """
    probes = np.random.default_rng(seed + 1).uniform(size=(n_probes, 3))
    a, b = _inside(pred, probes), _inside(gt, probes)
    union = np.count_nonzero(a | b)
    iou = np.count_nonzero(a & b) / union if union else 1.0
    if pred.is_empty:
        warnings.warn("empty predicted mesh; surface metrics set to worst case", RuntimeWarning)
        return Report(iou, WORST_CHAMFER, 0.0, 0.0, n_samples, seed, n_probes)
    if isinstance(gt, Mesh) and gt.is_empty:
        warnings.warn("empty reference mesh; surface metrics set to worst case", RuntimeWarning)
        return Report(iou, WORST_CHAMFER, 0.0, 0.0, n_samples, seed, n_probes)
    p_pts, p_nrm, p_look = _surface(pred, n_samples, seed)
    g_pts, g_nrm, g_look = _surface(gt, n_samples, seed)
    d_pg, n_pg = g_look(p_pts)  # accuracy: pred samples against the reference
    d_gp, n_gp = p_look(g_pts)  # completeness
    chamfer = 100 * 0.5 * (d_pg.mean() + d_gp.mean())
    nc = 0.5 * (np.abs(_dot(p_nrm, n_pg)).mean() + np.abs(_dot(g_nrm, n_gp)).mean())
    precision, recall = np.mean(d_pg < tau), np.mean(d_gp < tau)
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Report(float(iou), float(chamfer), float(nc), float(f), n_samples, seed, n_probes)
