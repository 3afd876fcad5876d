"""Analytic shapes with exact occupancy, signed distance and area-weighted surface sampling.

All shapes live in the unit cube.  ``sdf`` is negative inside.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeOracle:
    kind = "abstract"

    def sdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def occupancy(self, x) -> np.ndarray:
        return (self.sdf(np.asarray(x, dtype=np.float64)) < 0).astype(np.uint8)

    def distance(self, x) -> np.ndarray:
        return np.abs(self.sdf(np.asarray(x, dtype=np.float64)))

    def normal(self, x, h: float = 1e-6) -> np.ndarray:
        """Unit gradient of the signed distance (outward at the surface)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.stack([self.sdf(x + h * e) - self.sdf(x - h * e) for e in np.eye(3)], axis=-1)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    @property
    def area(self) -> float:
        raise NotImplementedError

    def surface_sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class Sphere(ShapeOracle):
    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.35
    kind = "sphere"

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x) - np.asarray(self.center), axis=-1) - self.radius

    @property
    def area(self) -> float:
        return 4 * np.pi * self.radius ** 2

    def surface_sample(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d

    def to_dict(self):
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass
class Box(ShapeOracle):
    center: tuple = (0.5, 0.5, 0.5)
    half: tuple = (0.3, 0.25, 0.2)
    kind = "box"

    def sdf(self, x):
        q = np.abs(np.asarray(x) - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        return outside + inside

    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half
        per_axis = np.array([4 * hy * hz, 4 * hx * hz, 4 * hx * hy])
        return np.repeat(per_axis, 2)  # faces -x, +x, -y, +y, -z, +z

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def surface_sample(self, n, rng):
        areas = self.face_areas()
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        half, c = np.asarray(self.half), np.asarray(self.center)
        pts = rng.uniform(-1, 1, size=(n, 3)) * half
        axis, sign = faces // 2, np.where(faces % 2, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        normals = np.zeros((n, 3))
        normals[np.arange(n), axis] = sign
        return pts + c, normals

    def to_dict(self):
        return {"kind": "box", "center": list(self.center), "half": list(self.half)}


@dataclass
class ThinPlate(Box):
    """An axis-aligned slab of the given thickness lying in the xy plane."""

    center: tuple = (0.5, 0.5, 0.5)
    extent: tuple = (0.35, 0.35)
    thickness: float = 0.02
    half: tuple = field(init=False)
    kind = "thin_plate"

    def __post_init__(self):
        self.half = (self.extent[0], self.extent[1], self.thickness / 2)

    def to_dict(self):
        return {"kind": "thin_plate", "center": list(self.center), "extent": list(self.extent),
                "thickness": self.thickness}


@dataclass
class Torus(ShapeOracle):
    """Torus around the z axis."""

    center: tuple = (0.5, 0.5, 0.5)
    major: float = 0.3
    minor: float = 0.1
    kind = "torus"

    def sdf(self, x):
        p = np.asarray(x) - np.asarray(self.center)
        ring = np.hypot(p[..., 0], p[..., 1]) - self.major
        return np.hypot(ring, p[..., 2]) - self.minor

    @property
    def area(self) -> float:
        return 4 * np.pi ** 2 * self.major * self.minor

    def surface_sample(self, n, rng):
        R, r = self.major, self.minor
        out_v = np.empty(0)
        while len(out_v) < n:  # density of the tube angle is proportional to R + r cos v
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(0, R + r, size=2 * n) < R + r * np.cos(v)
            out_v = np.concatenate([out_v, v[keep]])
        v = out_v[:n]
        u = rng.uniform(0, 2 * np.pi, size=n)
        normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
        return np.asarray(self.center) + ring + r * normals, normals

    def to_dict(self):
        return {"kind": "torus", "center": list(self.center), "major": self.major, "minor": self.minor}


@dataclass
class Union(ShapeOracle):
    """Boolean union; the signed distance is the minimum over parts (exact outside)."""

    parts: list = field(default_factory=list)
    kind = "union"

    def sdf(self, x):
        return np.min(np.stack([p.sdf(x) for p in self.parts]), axis=0)

    @property
    def area(self) -> float:
        """Area of the union boundary, estimated once from part samples."""
        rng = np.random.default_rng(0)
        total = 0.0
        for i, p in enumerate(self.parts):
            pts, _ = p.surface_sample(20000, rng)
            total += p.area * float(np.mean(self._exposed(pts, i)))
        return total

    def _exposed(self, pts, skip):
        keep = np.ones(len(pts), dtype=bool)
        for j, q in enumerate(self.parts):
            if j != skip:
                keep &= q.sdf(pts) >= 0
        return keep

    def surface_sample(self, n, rng):
        areas = np.array([p.area for p in self.parts])
        pts_all, nrm_all = [], []
        have = 0
        while have < n:
            counts = rng.multinomial(n, areas / areas.sum())
            for i, (p, k) in enumerate(zip(self.parts, counts)):
                if k == 0:
                    continue
                pts, nrm = p.surface_sample(int(k), rng)
                keep = self._exposed(pts, i)
                pts_all.append(pts[keep])
                nrm_all.append(nrm[keep])
                have += int(keep.sum())
        pts, nrm = np.concatenate(pts_all), np.concatenate(nrm_all)
        order = rng.permutation(len(pts))[:n]
        return pts[order], nrm[order]

    def to_dict(self):
        return {"kind": "union", "parts": [p.to_dict() for p in self.parts]}


NAMED = {
    "sphere": lambda: Sphere(),
    "box": lambda: Box(),
    "torus": lambda: Torus(),
    "thin_plate": lambda: ThinPlate(),
    "union": lambda: Union([Sphere((0.35, 0.5, 0.5), 0.2), Box((0.65, 0.5, 0.5), (0.15, 0.15, 0.15))]),
}


def from_dict(desc: dict) -> ShapeOracle:
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind == "sphere":
        return Sphere(tuple(desc.get("center", (0.5, 0.5, 0.5))), float(desc.get("radius", 0.35)))
    if kind == "box":
        return Box(tuple(desc.get("center", (0.5, 0.5, 0.5))), tuple(desc.get("half", (0.3, 0.25, 0.2))))
    if kind == "thin_plate":
        return ThinPlate(tuple(desc.get("center", (0.5, 0.5, 0.5))), tuple(desc.get("extent", (0.35, 0.35))),
                         float(desc.get("thickness", 0.02)))
    if kind == "torus":
        return Torus(tuple(desc.get("center", (0.5, 0.5, 0.5))), float(desc.get("major", 0.3)),
                     float(desc.get("minor", 0.1)))
    if kind == "union":
        return Union([from_dict(p) for p in desc["parts"]])
    raise ValueError(f"unknown oracle kind {kind!r}")


def parse(name: str) -> ShapeOracle:
    """``oracle:sphere`` or a bare name from :data:`NAMED`."""
    key = name.split(":", 1)[1] if name.startswith("oracle:") else name
    if key not in NAMED:
        raise ValueError(f"unknown oracle {name!r}; choose from {sorted(NAMED)}")
    return NAMED[key]()
