"""Deterministic synthetic part-segmentation datasets.

Two tasks are supported. Primitive shapes are made of 2-5 analytic surface
patches (plane, sphere cap, cylinder, cone) with exact normals. Mobility
shapes pair a first frame with a per-point flow produced by per-part rigid
motions. Shapes are grouped into named domains whose primitive-type mixtures
differ, which gives a controlled distribution shift.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CONE, CYLINDER, PLANE, RIGID, SPHERE, PrimitiveParams, RigidTransform, rotation_from_axis_angle

MAGIC = b"AGPD"
VERSION = 1
TASKS = ("primitive", "mobility")
N_TYPES = 4

FLAG_NORMALS, FLAG_FLOW, FLAG_PRIM = 1, 2, 4


class SpecError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class DomainSpec:
    name: str
    weights: tuple[float, float, float, float]
    shapes_count: int = 60
    parts_per_shape: tuple[int, int] = (2, 5)
    points_per_shape: int = 512
    noise: float = 0.0
    max_angle_deg: float = 60.0
    max_translation: float = 0.3

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N_TYPES,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise SpecError(f"domain {self.name!r}: weights must be a 4-simplex point")
        lo, hi = self.parts_per_shape
        if self.shapes_count < 1:
            raise SpecError(f"domain {self.name!r} is empty")
        if not 1 <= lo <= hi:
            raise SpecError(f"domain {self.name!r}: bad parts range {self.parts_per_shape}")
        if self.points_per_shape < 4 * hi:
            raise SpecError(f"domain {self.name!r}: too few points for {hi} parts")


@dataclass(frozen=True, eq=False)
class Shape:
    positions: np.ndarray
    part_labels: np.ndarray
    part_kinds: np.ndarray  # (n_parts,) primitive kind, or RIGID for motion parts
    part_params: np.ndarray  # (n_parts, 10)
    normals: np.ndarray | None = None
    flow: np.ndarray | None = None
    prim_types: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def n_parts(self) -> int:
        return len(self.part_kinds)

    def primitive(self, part: int) -> PrimitiveParams:
        return PrimitiveParams.from_array(self.part_kinds[part], self.part_params[part])

    def transform(self, part: int) -> RigidTransform:
        p = self.part_params[part]
        rotvec = p[0:3]
        angle = float(np.linalg.norm(rotvec))
        R = np.eye(3) if angle == 0.0 else rotation_from_axis_angle(rotvec, angle)
        return RigidTransform(R, p[3:6].copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Shape):
            return NotImplemented
        for name in ("positions", "part_labels", "part_kinds", "part_params", "normals", "flow", "prim_types"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass(eq=False)
class PartDataset:
    task: str
    domains: dict[str, list[Shape]] = field(default_factory=dict)
    seed: int = 0

    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartDataset):
            return NotImplemented
        if self.task != other.task or list(self.domains) != list(other.domains):
            return False
        return all(
            len(self.domains[k]) == len(other.domains[k])
            and all(a == b for a, b in zip(self.domains[k], other.domains[k]))
            for k in self.domains
        )

    def quantized(self) -> "PartDataset":
        """Copy rounded to the file's float32 precision."""
        return PartDataset(
            self.task,
            {k: [_quantize(s) for s in v] for k, v in self.domains.items()},
            self.seed,
        )


def _q(a):
    return None if a is None else a.astype(np.float32).astype(np.float64)


def _quantize(s: Shape) -> Shape:
    return replace(s, positions=_q(s.positions), normals=_q(s.normals), flow=_q(s.flow), part_params=_q(s.part_params))


def default_primitive_specs(shapes_count: int = 60, points_per_shape: int = 512, noise: float = 0.0) -> list[DomainSpec]:
    names = ("plane_heavy", "sphere_heavy", "cylinder_heavy", "cone_heavy")
    specs = []
    for i, name in enumerate(names):
        w = [0.1] * N_TYPES
        w[i] = 0.7
        specs.append(DomainSpec(name, tuple(w), shapes_count, (2, 5), points_per_shape, noise))
    return specs


def default_mobility_specs(shapes_count: int = 60, points_per_shape: int = 512) -> list[DomainSpec]:
    return [
        DomainSpec("two_flat", (0.7, 0.1, 0.1, 0.1), shapes_count, (2, 2), points_per_shape),
        DomainSpec("three_round", (0.1, 0.7, 0.1, 0.1), shapes_count, (3, 3), points_per_shape),
        DomainSpec("mixed_cyl", (0.1, 0.1, 0.7, 0.1), shapes_count, (2, 3), points_per_shape),
        DomainSpec("mixed_cone", (0.1, 0.1, 0.1, 0.7), shapes_count, (2, 3), points_per_shape),
    ]


# ---------------------------------------------------------------------------
# patch sampling (uniform in area on each primitive)


def _random_frame(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q  # columns e1, e2, e3


def _plane_patch(rng, n, anchor):
    f = _random_frame(rng)
    a, b = rng.uniform(0.2, 0.4, size=2)
    u = rng.uniform(-a, a, size=n)
    v = rng.uniform(-b, b, size=n)
    pts = anchor + np.outer(u, f[:, 0]) + np.outer(v, f[:, 1])
    normal = f[:, 2]
    nrm = np.tile(normal, (n, 1))
    return pts, nrm, PrimitiveParams(PLANE, normal, np.zeros(3), float(normal @ anchor))


def _sphere_patch(rng, n, anchor):
    f = _random_frame(rng)
    r = rng.uniform(0.15, 0.35)
    theta_max = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    cos_t = rng.uniform(np.cos(theta_max), 1.0, size=n)
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    dirs = local @ f.T
    pts = anchor + r * dirs
    return pts, dirs, PrimitiveParams(SPHERE, anchor.copy(), np.zeros(3), float(r))


def _cylinder_patch(rng, n, anchor):
    f = _random_frame(rng)
    r = rng.uniform(0.1, 0.25)
    h = rng.uniform(0.3, 0.6)
    span = rng.uniform(np.pi, 2 * np.pi)
    phi = rng.uniform(0, span, size=n)
    z = rng.uniform(-h / 2, h / 2, size=n)
    radial = np.outer(np.cos(phi), f[:, 0]) + np.outer(np.sin(phi), f[:, 1])
    axis = f[:, 2]
    pts = anchor + np.outer(z, axis) + r * radial
    return pts, radial, PrimitiveParams(CYLINDER, axis, anchor.copy(), float(r))


def _cone_patch(rng, n, anchor):
    f = _random_frame(rng)
    alpha = rng.uniform(np.pi / 8, np.pi / 3)
    h0 = rng.uniform(0.1, 0.2)
    h1 = h0 + rng.uniform(0.2, 0.4)
    h = np.sqrt(rng.uniform(h0**2, h1**2, size=n))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    radial = np.outer(np.cos(phi), f[:, 0]) + np.outer(np.sin(phi), f[:, 1])
    axis = f[:, 2]
    # anchor sits mid-height on the axis so the patch is roughly centered there
    apex = anchor - 0.5 * (h0 + h1) * axis
    pts = apex + h[:, None] * (axis + np.tan(alpha) * radial)
    nrm = np.cos(alpha) * radial - np.sin(alpha) * axis
    return pts, nrm, PrimitiveParams(CONE, apex, axis, float(alpha))


_PATCHES = {PLANE: _plane_patch, SPHERE: _sphere_patch, CYLINDER: _cylinder_patch, CONE: _cone_patch}


def _anchors(rng, n_parts: int, min_dist: float = 0.3, tries: int = 100) -> np.ndarray:
    out: list[np.ndarray] = []
    for _ in range(n_parts):
        best = None
        for _ in range(tries):
            c = rng.uniform(-0.8, 0.8, size=3)
            if all(np.linalg.norm(c - o) >= min_dist for o in out):
                best = c
                break
            best = c
        out.append(best)
    return np.array(out)


def _normalize_params(p: PrimitiveParams, center: np.ndarray, scale: float) -> PrimitiveParams:
    if p.kind == PLANE:
        return PrimitiveParams(PLANE, p.vec_a, p.vec_b, float((p.scalar - p.vec_a @ center) / scale))
    if p.kind == SPHERE:
        return PrimitiveParams(SPHERE, (p.vec_a - center) / scale, p.vec_b, p.scalar / scale)
    if p.kind == CYLINDER:
        return PrimitiveParams(CYLINDER, p.vec_a, (p.vec_b - center) / scale, p.scalar / scale)
    return PrimitiveParams(CONE, (p.vec_a - center) / scale, p.vec_b, p.scalar)


def _split_counts(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _primitive_parts(spec: DomainSpec, rng):
    lo, hi = spec.parts_per_shape
    n_parts = int(rng.integers(lo, hi + 1))
    kinds = rng.choice(N_TYPES, size=n_parts, p=np.asarray(spec.weights))
    anchors = _anchors(rng, n_parts)
    pts, nrms, labels, params = [], [], [], []
    for i, (kind, count) in enumerate(zip(kinds, _split_counts(spec.points_per_shape, n_parts))):
        p, nrm, prm = _PATCHES[int(kind)](rng, count, anchors[i])
        pts.append(p)
        nrms.append(nrm)
        labels.append(np.full(count, i))
        params.append(prm)
    positions = np.concatenate(pts)
    center = positions.mean(axis=0)
    scale = float(np.linalg.norm(positions - center, axis=1).max())
    positions = (positions - center) / scale
    params = [_normalize_params(p, center, scale) for p in params]
    normals = np.concatenate(nrms)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return positions, normals, np.concatenate(labels), np.asarray(kinds), params


def gen_primitive_shape(spec: DomainSpec, rng: np.random.Generator) -> Shape:
    positions, normals, labels, kinds, params = _primitive_parts(spec, rng)
    if spec.noise > 0:
        positions = positions + rng.normal(scale=spec.noise, size=positions.shape)
    return Shape(
        positions=positions,
        part_labels=labels.astype(np.int32),
        part_kinds=kinds.astype(np.uint8),
        part_params=np.stack([p.to_array() for p in params]),
        normals=normals,
        prim_types=kinds[labels].astype(np.uint8),
    )


def gen_mobility_shape(spec: DomainSpec, rng: np.random.Generator) -> Shape:
    """Two-frame shape: part 0 static, others moved by a random rigid motion.

    Part labels rank moving parts by translation magnitude (static = 0);
    parts without motion merge into the static part.
    """
    positions, normals, labels, kinds, _ = _primitive_parts(spec, rng)
    n_parts = len(kinds)
    transforms = [(np.zeros(3), np.zeros(3))]
    for _ in range(1, n_parts):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, np.deg2rad(spec.max_angle_deg))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t = direction * rng.uniform(0.0, spec.max_translation)
        transforms.append((axis * angle, t))
    moving = [i for i in range(n_parts) if np.any(transforms[i][0]) or np.any(transforms[i][1])]
    order = sorted(moving, key=lambda i: (float(np.linalg.norm(transforms[i][1])), i))
    rank = {old: new + 1 for new, old in enumerate(order)}
    new_labels = np.array([rank.get(int(l), 0) for l in labels], dtype=np.int32)
    meta = [np.zeros(10)]
    for old in order:
        row = np.zeros(10)
        row[0:3], row[3:6] = transforms[old]
        meta.append(row)
    flow = np.zeros_like(positions)
    shape = Shape(
        positions=positions,
        part_labels=new_labels,
        part_kinds=np.full(len(meta), RIGID, dtype=np.uint8),
        part_params=np.stack(meta),
        normals=normals,
        prim_types=kinds[labels].astype(np.uint8),
    )
    for part in range(1, shape.n_parts):
        mask = new_labels == part
        tr = shape.transform(part)
        flow[mask] = tr.apply(positions[mask]) - positions[mask]
    return replace(shape, flow=flow)


def _gen(specs: list[DomainSpec], seed: int, task: str, make) -> PartDataset:
    if len(specs) < 2:
        raise SpecError("at least two domains are required for cross-validation")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise SpecError("domain names must be unique")
    rng = np.random.default_rng(seed)
    domains = {spec.name: [make(spec, rng) for _ in range(spec.shapes_count)] for spec in specs}
    return PartDataset(task, domains, seed)


def gen_primitive_dataset(specs: list[DomainSpec], seed: int) -> PartDataset:
    return _gen(specs, seed, "primitive", gen_primitive_shape)


def gen_mobility_dataset(specs: list[DomainSpec], seed: int) -> PartDataset:
    return _gen(specs, seed, "mobility", gen_mobility_shape)


def type_histogram(shapes: list[Shape]) -> np.ndarray:
    counts = np.zeros(N_TYPES)
    for s in shapes:
        counts += np.bincount(s.prim_types, minlength=N_TYPES)[:N_TYPES]
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# binary format


def dataset_bytes(ds: PartDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IBI", VERSION, TASKS.index(ds.task), len(ds.domains)))
    for name, shapes in ds.domains.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(shapes)))
        for s in shapes:
            flags = (FLAG_NORMALS if s.normals is not None else 0) | (FLAG_FLOW if s.flow is not None else 0)
            flags |= FLAG_PRIM if s.prim_types is not None else 0
            buf.write(struct.pack("<IHB", s.n_points, s.n_parts, flags))
            buf.write(np.ascontiguousarray(s.positions, dtype="<f4").tobytes())
            if s.normals is not None:
                buf.write(np.ascontiguousarray(s.normals, dtype="<f4").tobytes())
            if s.flow is not None:
                buf.write(np.ascontiguousarray(s.flow, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(s.part_labels, dtype="<i4").tobytes())
            if s.prim_types is not None:
                buf.write(np.ascontiguousarray(s.prim_types, dtype="u1").tobytes())
            for kind, params in zip(s.part_kinds, s.part_params):
                buf.write(struct.pack("<B", int(kind)))
                buf.write(np.ascontiguousarray(params, dtype="<f4").tobytes())
    return buf.getvalue()


def write_dataset(ds: PartDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(self.pos, f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype).copy()


def parse_dataset(data: bytes) -> PartDataset:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(0, "bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(4, f"unsupported version {version}")
    task_code, n_domains = r.unpack("<BI", "header")
    if task_code >= len(TASKS):
        raise FormatError(8, f"unknown task code {task_code}")
    domains: dict[str, list[Shape]] = {}
    for _ in range(n_domains):
        (name_len,) = r.unpack("<H", "domain name length")
        at = r.pos
        try:
            name = r.take(name_len, "domain name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(at, "domain name is not utf-8") from exc
        (n_shapes,) = r.unpack("<I", "shape count")
        shapes = []
        for _ in range(n_shapes):
            n, n_parts, flags = r.unpack("<IHB", "shape header")
            pos = r.array("<f4", 3 * n, "positions").reshape(n, 3).astype(np.float64)
            normals = r.array("<f4", 3 * n, "normals").reshape(n, 3).astype(np.float64) if flags & FLAG_NORMALS else None
            flow = r.array("<f4", 3 * n, "flow").reshape(n, 3).astype(np.float64) if flags & FLAG_FLOW else None
            labels = r.array("<i4", n, "part labels").astype(np.int32)
            prim = r.array("u1", n, "prim types") if flags & FLAG_PRIM else None
            kinds = np.empty(n_parts, dtype=np.uint8)
            params = np.empty((n_parts, 10))
            for j in range(n_parts):
                (kinds[j],) = r.unpack("<B", "part kind")
                params[j] = r.array("<f4", 10, "part params").astype(np.float64)
            shapes.append(Shape(pos, labels, kinds, params, normals, flow, prim))
        domains[name] = shapes
    if r.pos != len(data):
        raise FormatError(r.pos, "trailing bytes after last domain")
    return PartDataset(TASKS[task_code], domains)


def read_dataset(path) -> PartDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# ---------------------------------------------------------------------------
# k-means++ domain split


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-9):
    """k-means++ seeding followed by Lloyd iterations. Returns (labels, centers)."""
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
    centers = np.array(centers, dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return labels, centers


def kmeanspp_domain_split(shapes: list[Shape], k_clusters: int = 7, k_merged: int = 4, seed: int = 0) -> np.ndarray:
    """Cluster shapes by primitive-type histogram, then merge clusters into groups.

    Clusters are merged greedily by size: largest first, each into the
    currently smallest group. Returns one group id per shape.
    """
    if not len(shapes) >= k_clusters >= k_merged >= 2:
        raise SpecError(f"need |shapes| >= k_clusters >= k_merged >= 2, got {len(shapes)}, {k_clusters}, {k_merged}")
    if any(s.prim_types is None for s in shapes):
        raise SpecError("every shape needs prim_types")
    feats = np.stack([np.bincount(s.prim_types, minlength=N_TYPES)[:N_TYPES] / s.n_points for s in shapes])
    labels, _ = kmeans_pp(feats, k_clusters, np.random.default_rng(seed))
    sizes = np.bincount(labels, minlength=k_clusters)
    nonempty = [j for j in np.argsort(-sizes, kind="stable") if sizes[j] > 0]
    if len(nonempty) < k_merged:
        raise SpecError(f"only {len(nonempty)} non-empty clusters for {k_merged} groups")
    group_of = {}
    totals = np.zeros(k_merged, dtype=np.int64)
    for j in nonempty:
        g = int(np.argmin(totals))
        group_of[int(j)] = g
        totals[g] += sizes[j]
    return np.array([group_of[int(l)] for l in labels], dtype=np.int64)
