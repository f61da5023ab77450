"""Static cell graphs: 1D files, periodic rings, hexagonal sheets, Voronoi discs.

Every constructor returns an immutable :class:`TissueGraph` that has already
been validated (symmetric adjacency, no self-loops, connectivity, positive
volumes and contact ratios).

Neumann boundaries are realised with *mirror ghosts*: a ghost neighbour of
cell ``i`` always carries the state of ``i`` itself.  It counts towards the
effective neighbour number of ``i`` and adds ``l_ghost * phi(y_i)`` to the
PIN-allocation denominator of ``i``; its diffusive flux and its active
exchange with ``i`` are identically zero.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidGeometryError, ParseError

__all__ = [
    "BoundaryKind",
    "TissueGraph",
    "build_line",
    "build_ring",
    "build_hex_grid",
    "hex_offset_neighbors",
    "build_voronoi_disc",
    "load_tissue",
    "save_tissue",
    "tissue_from_dict",
    "tissue_to_dict",
]

HEX_AREA_FACTOR = 3.0 * math.sqrt(3.0) / 2.0


class BoundaryKind(str, enum.Enum):
    NEUMANN = "neumann"
    FREE = "free"


@dataclass(frozen=True, eq=False)
class TissueGraph:
    neighbors: tuple[tuple[int, ...], ...]
    contact: tuple[tuple[float, ...], ...]
    volumes: np.ndarray
    labels: tuple[str, ...]
    ghosts: np.ndarray = None
    ghost_contact: np.ndarray = None
    coords: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.neighbors)
        vol = np.array(self.volumes, dtype=float)
        ghosts = np.zeros(n, dtype=int) if self.ghosts is None else np.array(self.ghosts, dtype=int)
        gl = np.zeros(n) if self.ghost_contact is None else np.array(self.ghost_contact, dtype=float)
        coords = None if self.coords is None else np.array(self.coords, dtype=float)
        for arr in (vol, ghosts, gl) + ((coords,) if coords is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "volumes", vol)
        object.__setattr__(self, "ghosts", ghosts)
        object.__setattr__(self, "ghost_contact", gl)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "neighbors", tuple(tuple(int(j) for j in nb) for nb in self.neighbors))
        object.__setattr__(self, "contact", tuple(tuple(float(x) for x in c) for c in self.contact))
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        _validate(self)

    # -- basic quantities -------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.neighbors)

    @cached_property
    def degree(self) -> np.ndarray:
        """Number of real neighbours |N_i| (ghosts excluded)."""
        d = np.array([len(nb) for nb in self.neighbors], dtype=int)
        d.setflags(write=False)
        return d

    @cached_property
    def effective_degree(self) -> np.ndarray:
        """Neighbour count including mirror ghosts."""
        d = self.degree + self.ghosts
        d.setflags(write=False)
        return d

    @property
    def mean_contact(self) -> float:
        _, _, l = self.edges
        return float(np.mean(l))

    @property
    def mean_volume(self) -> float:
        return float(np.mean(self.volumes))

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ordered edge list ``(src, dst, l)``, grouped by ``src``."""
        src = np.repeat(np.arange(self.n), self.degree)
        dst = np.array([j for nb in self.neighbors for j in nb], dtype=int)
        l = np.array([x for c in self.contact for x in c], dtype=float)
        for arr in (src, dst, l):
            arr.setflags(write=False)
        return src, dst, l

    @cached_property
    def edge_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All pairs ``(e1, e2)`` of ordered edges sharing the same source cell."""
        src, _, _ = self.edges
        starts = np.concatenate([[0], np.cumsum(self.degree)])
        e1, e2 = [], []
        for i in range(self.n):
            idx = np.arange(starts[i], starts[i + 1])
            e1.append(np.repeat(idx, idx.size))
            e2.append(np.tile(idx, idx.size))
        out = (np.concatenate(e1), np.concatenate(e2))
        for arr in out:
            arr.setflags(write=False)
        return out

    @property
    def is_regular(self) -> bool:
        """Identical cells: one volume value and one contact value."""
        _, _, l = self.edges
        lg = self.ghost_contact[self.ghosts > 0]
        ls = np.concatenate([l, lg])
        return bool(np.all(self.volumes == self.volumes[0]) and np.all(ls == ls[0]))

    def digest(self) -> str:
        blob = json.dumps(tissue_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, TissueGraph):
            return NotImplemented
        same_coords = (self.coords is None and other.coords is None) or (
            self.coords is not None
            and other.coords is not None
            and np.array_equal(self.coords, other.coords)
        )
        return (
            self.neighbors == other.neighbors
            and self.contact == other.contact
            and np.array_equal(self.volumes, other.volumes)
            and self.labels == other.labels
            and np.array_equal(self.ghosts, other.ghosts)
            and np.array_equal(self.ghost_contact, other.ghost_contact)
            and same_coords
            and self.meta == other.meta
        )

    __hash__ = None


def _validate(g: TissueGraph) -> None:
    n = g.n
    if n < 1:
        raise InvalidGeometryError("tissue has no cells")
    if g.volumes.shape != (n,) or len(g.contact) != n or len(g.labels) != n:
        raise InvalidGeometryError("per-cell arrays do not match the cell count")
    if g.ghosts.shape != (n,) or g.ghost_contact.shape != (n,):
        raise InvalidGeometryError("ghost arrays do not match the cell count")
    if g.coords is not None and g.coords.shape[0] != n:
        raise InvalidGeometryError("coords do not match the cell count")
    lookup = []
    for i, (nb, c) in enumerate(zip(g.neighbors, g.contact)):
        if len(nb) != len(c):
            raise InvalidGeometryError(f"cell {i}: neighbors and contact lengths differ")
        if len(nb) == 0:
            raise InvalidGeometryError(f"cell {i} has no neighbours")
        if len(set(nb)) != len(nb):
            raise InvalidGeometryError(f"cell {i} lists a neighbour twice")
        d = {}
        for j, l in zip(nb, c):
            if j == i:
                raise InvalidGeometryError(f"self-loop at cell {i}")
            if not 0 <= j < n:
                raise InvalidGeometryError(f"edge ({i},{j}): neighbour index out of range")
            if not (math.isfinite(l) and l > 0):
                raise InvalidGeometryError(f"edge ({i},{j}): contact must be positive, got {l}")
            d[j] = l
        lookup.append(d)
        if not (math.isfinite(g.volumes[i]) and g.volumes[i] > 0):
            raise InvalidGeometryError(f"cell {i}: volume must be positive, got {g.volumes[i]}")
        if g.ghosts[i] < 0 or (g.ghosts[i] > 0 and not g.ghost_contact[i] > 0):
            raise InvalidGeometryError(f"cell {i}: invalid ghost specification")
    for i, d in enumerate(lookup):
        for j, l in d.items():
            if i not in lookup[j]:
                raise InvalidGeometryError(f"edge ({i},{j}) has no reverse edge")
            if lookup[j][i] != l:
                raise InvalidGeometryError(f"edge ({i},{j}): contact not symmetric ({l} vs {lookup[j][i]})")
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in g.neighbors[i]:
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    if not seen.all():
        raise InvalidGeometryError(f"graph is disconnected ({int(seen.sum())} of {n} cells reachable from cell 0)")


# -- builders -------------------------------------------------------------

def build_line(
    n: int,
    V: float = 1.0,
    l: float = 1.0,
    left: BoundaryKind | str = BoundaryKind.NEUMANN,
    right: BoundaryKind | str = BoundaryKind.FREE,
) -> TissueGraph:
    """File of ``n`` identical cells, cell 0 on the left."""
    if n < 3:
        raise InvalidGeometryError(f"a line needs at least 3 cells, got {n}")
    if not (V > 0 and l > 0):
        raise InvalidGeometryError("V and l must be positive")
    left, right = BoundaryKind(left), BoundaryKind(right)
    neighbors = [[i - 1, i + 1] for i in range(n)]
    neighbors[0] = [1]
    neighbors[-1] = [n - 2]
    contact = [[l] * len(nb) for nb in neighbors]
    ghosts = np.zeros(n, dtype=int)
    gl = np.zeros(n)
    if left is BoundaryKind.NEUMANN:
        ghosts[0], gl[0] = 1, l
    if right is BoundaryKind.NEUMANN:
        ghosts[-1], gl[-1] = 1, l
    labels = ["interior"] * n
    labels[0] = labels[-1] = "edge"
    return TissueGraph(
        neighbors=neighbors,
        contact=contact,
        volumes=np.full(n, float(V)),
        labels=labels,
        ghosts=ghosts,
        ghost_contact=gl,
        coords=np.column_stack([np.arange(n, dtype=float), np.zeros(n)]),
        meta={"kind": "line", "bc": {"left": left.value, "right": right.value}},
    )


def build_ring(n: int, V: float = 1.0, l: float = 1.0) -> TissueGraph:
    """Periodic file: every cell has exactly two neighbours."""
    if n < 3:
        raise InvalidGeometryError(f"a ring needs at least 3 cells, got {n}")
    neighbors = [[(i - 1) % n, (i + 1) % n] for i in range(n)]
    return TissueGraph(
        neighbors=neighbors,
        contact=[[float(l), float(l)] for _ in range(n)],
        volumes=np.full(n, float(V)),
        labels=["interior"] * n,
        meta={"kind": "ring", "bc": {"periodic": True}},
    )


def hex_offset_neighbors(r: int, c: int, rows: int, cols: int) -> list[tuple[int, int]]:
    """Neighbours of ``(r, c)`` in an even-r offset layout (even rows shifted right)."""
    if r % 2 == 1:
        cand = [(r, c - 1), (r, c + 1), (r - 1, c - 1), (r - 1, c), (r + 1, c - 1), (r + 1, c)]
    else:
        cand = [(r, c - 1), (r, c + 1), (r - 1, c), (r - 1, c + 1), (r + 1, c), (r + 1, c + 1)]
    return [(rr, cc) for rr, cc in cand if 0 <= rr < rows and 0 <= cc < cols]


def build_hex_grid(rows: int, cols: int, l: float = 1.0) -> TissueGraph:
    """Sheet of identical pointy-top hexagons, ``rows x cols``, row-major ids.

    With an even number of rows the top-right and bottom-left corners have
    two neighbours while the other two corners have three; the most negative
    ``xi`` then sits next to the top-left and bottom-right corners.
    """
    if rows < 3 or cols < 3:
        raise InvalidGeometryError(f"hex grid needs at least 3x3 cells, got {rows}x{cols}")
    if not l > 0:
        raise InvalidGeometryError("l must be positive")
    neighbors, labels, coords = [], [], []
    for r in range(rows):
        for c in range(cols):
            neighbors.append([rr * cols + cc for rr, cc in hex_offset_neighbors(r, c, rows, cols)])
            labels.append(_hex_label(r, c, rows, cols))
            coords.append((math.sqrt(3.0) * l * (c + 0.5 * ((r + 1) % 2)), -1.5 * l * r))
    n = rows * cols
    return TissueGraph(
        neighbors=neighbors,
        contact=[[float(l)] * len(nb) for nb in neighbors],
        volumes=np.full(n, HEX_AREA_FACTOR * l * l),
        labels=labels,
        coords=np.array(coords),
        meta={"kind": "hex", "rows": rows, "cols": cols},
    )


def _hex_label(r, c, rows, cols):
    top, bottom, left, right = r == 0, r == rows - 1, c == 0, c == cols - 1
    if (top or bottom) and (left or right):
        return "corner"
    if top:
        return "edge-top"
    if bottom:
        return "edge-bottom"
    if left:
        return "edge-left"
    if right:
        return "edge-right"
    return "interior"


def build_voronoi_disc(
    n_target: int,
    radius: float | None = None,
    seed: int = 0,
    *,
    wall_thickness: float = 0.4,
    depth: float = 1.0,
    mean_area: float = 294.0,
    lloyd_iterations: int = 30,
    target_mean_contact: float | None = None,
    max_retries: int = 5,
) -> TissueGraph:
    """Irregular prismatic cells filling a disc.

    Cells are Voronoi regions of Lloyd-relaxed random seeds, clipped to the
    disc.  ``V_i`` is area times ``depth`` and ``l_ij`` is shared wall
    length times ``depth`` divided by ``2 * wall_thickness``.  Passing
    ``target_mean_contact`` rescales the wall thickness so that the mean
    contact ratio matches exactly.  When ``radius`` is omitted it is chosen
    so the mean cell area equals ``mean_area``.
    """
    if n_target < 10:
        raise InvalidGeometryError(f"n_target must be at least 10, got {n_target}")
    if radius is None:
        radius = math.sqrt(n_target * mean_area / math.pi)
    if not (radius > 0 and wall_thickness > 0 and depth > 0):
        raise InvalidGeometryError("radius, wall_thickness and depth must be positive")
    last_err = None
    for attempt in range(max_retries):
        try:
            cells = _voronoi_cells(n_target, radius, seed + 7919 * attempt, lloyd_iterations)
            break
        except _DegenerateCell as exc:
            last_err = exc
    else:
        raise InvalidGeometryError(f"Voronoi generation kept producing degenerate cells: {last_err}")
    centroids, areas, ridges, on_boundary = cells
    pairs = sorted(ridges)
    S = np.array([ridges[p] for p in pairs]) * depth
    W = wall_thickness
    if target_mean_contact is not None:
        W = float(np.mean(S)) / (2.0 * target_mean_contact)
    neighbors = [[] for _ in range(n_target)]
    contact = [[] for _ in range(n_target)]
    for (i, j), s in zip(pairs, S):
        lij = float(s / (2.0 * W))
        neighbors[i].append(j)
        contact[i].append(lij)
        neighbors[j].append(i)
        contact[j].append(lij)
    for i in range(n_target):
        order = np.argsort(neighbors[i])
        neighbors[i] = [neighbors[i][k] for k in order]
        contact[i] = [contact[i][k] for k in order]
    labels = ["edge" if b else "interior" for b in on_boundary]
    return TissueGraph(
        neighbors=neighbors,
        contact=contact,
        volumes=areas * depth,
        labels=labels,
        coords=centroids,
        meta={
            "kind": "voronoi",
            "seed": int(seed),
            "radius": float(radius),
            "wall_thickness": float(W),
            "depth": float(depth),
        },
    )


class _DegenerateCell(Exception):
    pass


def _voronoi_cells(n, radius, seed, iterations):
    from scipy.spatial import Voronoi
    from shapely.geometry import LineString, Point, Polygon

    rng = np.random.default_rng(seed)
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    disc = Point(0.0, 0.0).buffer(radius, quad_segs=64)
    boundary = disc.exterior
    tol = 1e-9 * radius

    for it in range(iterations + 1):
        r = np.linalg.norm(pts, axis=1)
        r = np.maximum(r, 1e-12 * radius)
        mirrored = pts * ((2.0 * radius - r) / r)[:, None]
        vor = Voronoi(np.vstack([pts, mirrored]))
        polys = []
        for i in range(n):
            region = vor.regions[vor.point_region[i]]
            if -1 in region or len(region) < 3:
                raise _DegenerateCell(f"unbounded region for seed point {i}")
            poly = Polygon(vor.vertices[region]).intersection(disc)
            if poly.is_empty or poly.area <= tol * radius:
                raise _DegenerateCell(f"zero-area cell {i}")
            polys.append(poly)
        centroids = np.array([[p.centroid.x, p.centroid.y] for p in polys])
        if it == iterations:
            break
        pts = centroids

    ridges = {}
    for (i, j), verts in zip(vor.ridge_points, vor.ridge_vertices):
        if i >= n or j >= n or -1 in verts:
            continue
        seg = LineString(vor.vertices[verts]).intersection(disc)
        length = seg.length
        if length > tol:
            ridges[(min(i, j), max(i, j))] = float(length)
    areas = np.array([p.area for p in polys])
    on_boundary = [p.exterior.distance(boundary) < 1e-6 * radius or p.intersects(boundary) for p in polys]
    return centroids, areas, ridges, on_boundary


# -- JSON I/O -------------------------------------------------------------

def tissue_to_dict(g: TissueGraph) -> dict:
    cells = []
    for i in range(g.n):
        cell = {
            "id": i,
            "volume": float(g.volumes[i]),
            "neighbors": list(g.neighbors[i]),
            "contact": list(g.contact[i]),
            "label": g.labels[i],
        }
        if g.ghosts[i]:
            cell["ghosts"] = int(g.ghosts[i])
            cell["ghost_contact"] = float(g.ghost_contact[i])
        if g.coords is not None:
            cell["centroid"] = [float(x) for x in g.coords[i]]
        cells.append(cell)
    meta = dict(g.meta)
    meta.setdefault("bc", {})
    meta["mean_contact"] = g.mean_contact
    meta["mean_volume"] = g.mean_volume
    return {"n": g.n, "cells": cells, "meta": meta}


def tissue_from_dict(data: dict) -> TissueGraph:
    if not isinstance(data, dict) or "n" not in data or "cells" not in data:
        raise ParseError("tissue file must be an object with 'n' and 'cells'")
    n = data["n"]
    cells = data["cells"]
    if not isinstance(n, int) or not isinstance(cells, list) or len(cells) != n:
        raise ParseError(f"'n'={n!r} does not match the number of cells")
    neighbors, contact, volumes, labels, ghosts, gl, coords = [], [], [], [], [], [], []
    for k, cell in enumerate(cells):
        try:
            if cell["id"] != k:
                raise ParseError(f"cell {k}: id {cell['id']} out of order")
            vol = float(cell["volume"])
            nb = [int(j) for j in cell["neighbors"]]
            ct = [float(x) for x in cell["contact"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"cell {k}: malformed entry ({exc})") from None
        if not vol > 0:
            raise ParseError(f"cell {k}: nonpositive volume {vol}")
        if len(nb) != len(ct):
            raise ParseError(f"cell {k}: neighbors and contact lengths differ")
        neighbors.append(nb)
        contact.append(ct)
        volumes.append(vol)
        labels.append(str(cell.get("label", "custom")))
        ghosts.append(int(cell.get("ghosts", 0)))
        gl.append(float(cell.get("ghost_contact", 0.0)))
        if "centroid" in cell:
            coords.append(cell["centroid"])
    for i in range(n):
        for j, lij in zip(neighbors[i], contact[i]):
            if not 0 <= j < n:
                raise ParseError(f"edge ({i},{j}): neighbour index out of range")
            if i not in neighbors[j]:
                raise ParseError(f"edge ({i},{j}): adjacency not symmetric")
            lji = contact[j][neighbors[j].index(i)]
            if lji != lij:
                raise ParseError(f"edge ({i},{j}): contact not symmetric ({lij} vs {lji})")
    meta = dict(data.get("meta", {}))
    meta.pop("mean_contact", None)
    meta.pop("mean_volume", None)
    if meta.get("bc") == {}:
        meta.pop("bc")
    try:
        return TissueGraph(
            neighbors=neighbors,
            contact=contact,
            volumes=np.array(volumes),
            labels=labels,
            ghosts=np.array(ghosts, dtype=int),
            ghost_contact=np.array(gl),
            coords=np.array(coords) if len(coords) == n else None,
            meta=meta,
        )
    except InvalidGeometryError as exc:
        raise ParseError(str(exc)) from None


def save_tissue(g: TissueGraph, path: str | Path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(tissue_to_dict(g), indent=1), encoding="utf-8")


def load_tissue(path: str | Path) -> TissueGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"{path}: cannot read tissue file ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    return tissue_from_dict(data)
