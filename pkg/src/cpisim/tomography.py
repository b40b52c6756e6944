"""Voxelized absorption tomography from the correlation tensor.

Each (Da pixel, Db pixel) pair defines a geometric ray through the conjugate
point on the focused object plane and the corresponding point on the
focusing element; the log-ratio of the measured correlation to an
object-free reference is linearly proportional to the attenuation integral
along that ray.  The volume is recovered either by a multiplicative
maximum-likelihood iteration (Poisson model on the linearized integrals,
monotone log-likelihood) or by a relaxed Kaczmarz sweep with nonnegativity
projection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import OpticalConfig, ValidationError, axis_centers, validate_config
from .correlation import CorrelationTensor

VOLUME_MAGIC = b"CPIV"
VOLUME_VERSION = 1


@dataclass(frozen=True)
class VoxelGrid:
    """Absorption volume: dims (nx, ny, nz), lateral pitch um, axial pitch mm.

    ``origin`` is the minimum corner (x, y in um; z in mm, measured from the
    focusing element).  ``values`` is stored z-major: shape (nz, ny, nx),
    absorption per mm, nonnegative.
    """

    dims: tuple[int, int, int]
    pitch_lateral: float
    pitch_axial: float
    origin: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise ValidationError("voxel dims must be >= 1")
        if self.pitch_lateral <= 0 or self.pitch_axial <= 0:
            raise ValidationError("voxel pitches must be positive")
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (nz, ny, nx):
            raise ValidationError("values must have shape (nz, ny, nx)")
        if not np.all(np.isfinite(v)) or v.min() < 0:
            raise ValidationError("absorption values must be finite and >= 0")
        object.__setattr__(self, "values", v)
        v.setflags(write=False)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.pitch_lateral, self.pitch_axial,
                         self.origin, values)

    def bounds_mm(self):
        """((x0,x1), (y0,y1), (z0,z1)) in mm."""
        nx, ny, nz = self.dims
        x0, y0, z0 = self.origin
        lx = self.pitch_lateral * 1e-3
        return ((x0 * 1e-3, x0 * 1e-3 + nx * lx),
                (y0 * 1e-3, y0 * 1e-3 + ny * lx),
                (z0, z0 + nz * self.pitch_axial))

    @staticmethod
    def centered(dims: tuple[int, int, int], pitch_lateral: float,
                 pitch_axial: float, z_center: float) -> "VoxelGrid":
        """Laterally centered empty grid whose axial extent straddles z_center (mm)."""
        nx, ny, nz = dims
        origin = (-nx * pitch_lateral / 2.0, -ny * pitch_lateral / 2.0,
                  z_center - nz * pitch_axial / 2.0)
        return VoxelGrid(dims, pitch_lateral, pitch_axial, origin,
                         np.zeros((nz, ny, nx)))


@dataclass(frozen=True)
class RaySet:
    """Rays in mm: one per (Da pixel, Db pixel), Db-major to match the tensor."""

    origins: np.ndarray       # (R, 3) points on the focusing element plane
    directions: np.ndarray    # (R, 3) unit vectors toward the object half-space
    dims_a: tuple[int, int]
    dims_b: tuple[int, int]

    def __len__(self) -> int:
        return self.origins.shape[0]


def build_rays(cfg: OpticalConfig, dims_a: tuple[int, int] | None = None,
               dims_b: tuple[int, int] | None = None) -> RaySet:
    """Geometric rays for the correlation tensor under ``cfg``.

    ``dims_a``/``dims_b`` default to the configured sensor dims; pass the
    tensor dims when accumulation-time binning reduced the directional side.
    Each ray passes through (rb/M_L, 0) on the focusing element and the
    conjugate point (ra/M, s_o), ordered rb-major then ra-major.
    """
    validate_config(cfg)
    dims_a = dims_a or cfg.dims_a
    dims_b = dims_b or cfg.dims_b
    wa, ha = dims_a
    wb, hb = dims_b
    if (cfg.dims_b[0] % wb or cfg.dims_b[1] % hb
            or cfg.dims_b[0] // wb != cfg.dims_b[1] // hb):
        raise ValidationError("tensor Db dims are not a binning of the config dims")
    factor = cfg.dims_b[0] // wb
    xa = axis_centers(wa, cfg.pitch_a) / cfg.M * 1e-3
    ya = axis_centers(ha, cfg.pitch_a) / cfg.M * 1e-3
    xb = axis_centers(wb, cfg.pitch_b * factor) / cfg.M_L * 1e-3
    yb = axis_centers(hb, cfg.pitch_b * factor) / cfg.M_L * 1e-3

    n = wa * ha * wb * hb
    origins = np.empty((n, 3))
    directions = np.empty((n, 3))
    i = 0
    for byi in range(hb):
        for bxi in range(wb):
            for ayi in range(ha):
                dx = xa - xb[bxi]
                dy = ya[ayi] - yb[byi]
                dz = cfg.s_o
                norm = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
                j = i + wa
                origins[i:j, 0] = xb[bxi]
                origins[i:j, 1] = yb[byi]
                origins[i:j, 2] = 0.0
                directions[i:j, 0] = dx / norm
                directions[i:j, 1] = dy / norm
                directions[i:j, 2] = dz / norm
                i = j
    return RaySet(origins=origins, directions=directions, dims_a=dims_a, dims_b=dims_b)


@njit(cache=True)
def _clip_to_box(ox, oy, oz, dx, dy, dz, lo, hi):
    """Slab-clip a ray to an AABB; returns (t0, t1), t0 > t1 when it misses."""
    t0, t1 = 0.0, np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        if abs(d[k]) < 1e-300:
            if o[k] < lo[k] or o[k] > hi[k]:
                return 1.0, 0.0
        else:
            ta = (lo[k] - o[k]) / d[k]
            tb = (hi[k] - o[k]) / d[k]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _traverse(ox, oy, oz, dx, dy, dz, lo, hi, steps, nx, ny, nz,
              out_idx, out_len):
    """Amanatides-Woo walk; fills voxel indices/lengths, returns entry count."""
    t0, t1 = _clip_to_box(ox, oy, oz, dx, dy, dz, lo, hi)
    if t0 >= t1 - 1e-12:
        return 0
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    dims = (nx, ny, nz)
    ix = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    step = np.empty(3, dtype=np.int64)
    for k in range(3):
        pos = o[k] + (t0 + 1e-12) * d[k]
        cell = int(np.floor((pos - lo[k]) / steps[k]))
        if cell < 0:
            cell = 0
        if cell > dims[k] - 1:
            cell = dims[k] - 1
        ix[k] = cell
        if d[k] > 0:
            step[k] = 1
            tmax[k] = (lo[k] + (cell + 1) * steps[k] - o[k]) / d[k]
            tdelta[k] = steps[k] / d[k]
        elif d[k] < 0:
            step[k] = -1
            tmax[k] = (lo[k] + cell * steps[k] - o[k]) / d[k]
            tdelta[k] = -steps[k] / d[k]
        else:
            step[k] = 0
            tmax[k] = np.inf
            tdelta[k] = np.inf
    count = 0
    t = t0
    while t < t1 - 1e-12:
        k = 0
        if tmax[1] < tmax[k]:
            k = 1
        if tmax[2] < tmax[k]:
            k = 2
        t_next = tmax[k] if tmax[k] < t1 else t1
        seg = t_next - t
        if seg > 0:
            out_idx[count] = (ix[2] * ny + ix[1]) * nx + ix[0]
            out_len[count] = seg
            count += 1
        t = t_next
        ix[k] += step[k]
        tmax[k] += tdelta[k]
        if ix[k] < 0 or ix[k] >= dims[k]:
            break
    return count


@njit(cache=True)
def _trace_all(origins, directions, lo, hi, steps, nx, ny, nz):
    n_rays = origins.shape[0]
    max_steps = nx + ny + nz + 3
    idx_buf = np.empty(max_steps, dtype=np.int64)
    len_buf = np.empty(max_steps)
    counts = np.empty(n_rays, dtype=np.int64)
    chords = np.zeros(n_rays)
    total = 0
    # first pass: count entries
    for r in range(n_rays):
        c = _traverse(origins[r, 0], origins[r, 1], origins[r, 2],
                      directions[r, 0], directions[r, 1], directions[r, 2],
                      lo, hi, steps, nx, ny, nz, idx_buf, len_buf)
        counts[r] = c
        total += c
    indptr = np.empty(n_rays + 1, dtype=np.int64)
    indptr[0] = 0
    for r in range(n_rays):
        indptr[r + 1] = indptr[r] + counts[r]
    indices = np.empty(total, dtype=np.int64)
    lengths = np.empty(total)
    for r in range(n_rays):
        c = _traverse(origins[r, 0], origins[r, 1], origins[r, 2],
                      directions[r, 0], directions[r, 1], directions[r, 2],
                      lo, hi, steps, nx, ny, nz, idx_buf, len_buf)
        base = indptr[r]
        s = 0.0
        for i in range(c):
            indices[base + i] = idx_buf[i]
            lengths[base + i] = len_buf[i]
            s += len_buf[i]
        chords[r] = s
    return indptr, indices, lengths, chords


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse ray-voxel intersection lengths (mm), CSR over rays."""

    indptr: np.ndarray
    indices: np.ndarray
    lengths: np.ndarray
    n_voxels: int
    n_rays: int

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.lengths[lo:hi]

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.n_rays)
        np.add.at(out, np.repeat(np.arange(self.n_rays),
                                 np.diff(self.indptr)), self.lengths)
        return out

    def forward(self, mu_flat: np.ndarray) -> np.ndarray:
        return _csr_matvec(self.indptr, self.indices, self.lengths, mu_flat)

    def back(self, vec: np.ndarray) -> np.ndarray:
        return _csr_rmatvec(self.indptr, self.indices, self.lengths, vec,
                            self.n_voxels)


@njit(cache=True)
def _csr_matvec(indptr, indices, lengths, x):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for i in range(indptr[r], indptr[r + 1]):
            acc += lengths[i] * x[indices[i]]
        out[r] = acc
    return out


@njit(cache=True)
def _csr_rmatvec(indptr, indices, lengths, v, n_cols):
    out = np.zeros(n_cols)
    for r in range(indptr.shape[0] - 1):
        vr = v[r]
        if vr != 0.0:
            for i in range(indptr[r], indptr[r + 1]):
                out[indices[i]] += lengths[i] * vr
    return out


def trace_lengths(origin, direction, grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-voxel intersection lengths (mm) of one ray; empty on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ValidationError("degenerate zero-length ray")
    sysm = build_system_matrix(
        RaySet(np.asarray(origin, dtype=np.float64)[None, :],
               (direction / norm)[None, :], (1, 1), (1, 1)), grid)
    return sysm.row(0)


def build_system_matrix(rays: RaySet, grid: VoxelGrid) -> SystemMatrix:
    (x0, x1), (y0, y1), (z0, z1) = grid.bounds_mm()
    lo = np.array([x0, y0, z0])
    hi = np.array([x1, y1, z1])
    nx, ny, nz = grid.dims
    steps = np.array([grid.pitch_lateral * 1e-3, grid.pitch_lateral * 1e-3,
                      grid.pitch_axial])
    indptr, indices, lengths, _ = _trace_all(
        np.ascontiguousarray(rays.origins), np.ascontiguousarray(rays.directions),
        lo, hi, steps, nx, ny, nz)
    return SystemMatrix(indptr=indptr, indices=indices, lengths=lengths,
                        n_voxels=grid.n_voxels, n_rays=len(rays))


@dataclass(frozen=True)
class RayMeasurement:
    """Linearized attenuation integrals with a validity mask."""

    p: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.p, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if p.shape != valid.shape:
            raise ValidationError("p and valid must share a shape")
        if np.any(~np.isfinite(p[valid])):
            raise ValidationError("valid projections must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "valid", valid)


def linearize(gamma: CorrelationTensor, gamma_ref: CorrelationTensor,
              eps_frac: float = 1e-3, p_max: float = 10.0) -> RayMeasurement:
    """p = -ln(Gamma / Gamma_ref) clamped to [0, p_max], rb-major ray order.

    ``gamma_ref`` comes from an object-free run (or the analytic oracle) with
    the same geometry; reference entries below ``eps_frac`` of the reference
    peak are masked invalid.
    """
    if gamma.dims_a != gamma_ref.dims_a or gamma.dims_b != gamma_ref.dims_b:
        raise ValidationError("tensor and reference dims differ")
    g = gamma.data.ravel()
    ref = gamma_ref.data.ravel()
    peak_ref = ref.max()
    if peak_ref <= 0:
        raise ValidationError("reference tensor has no positive entries")
    valid = ref >= eps_frac * peak_ref
    if not valid.any():
        raise ValidationError("all rays masked by the reference floor")
    floor = np.exp(-p_max)
    ratio = np.ones_like(g)
    np.divide(g, ref, out=ratio, where=valid)
    ratio = np.clip(ratio, floor, 1.0)
    p = np.where(valid, -np.log(ratio), 0.0)
    return RayMeasurement(p=p, valid=valid)


@dataclass(frozen=True)
class TomoResult:
    volume: VoxelGrid
    history: np.ndarray       # log-likelihood (MLEM) or residual norm (ART)
    observed: np.ndarray      # voxels touched by at least one valid ray


def _poisson_loglik(p, q):
    # Poisson log-likelihood up to the ln(p!) constant; 0*ln(0) -> 0
    good = q > 0
    if np.any((~good) & (p > 0)):
        return -np.inf
    return float(np.sum(p[good] * np.log(q[good]) - q[good]) - np.sum(q[~good]))


def mlem_solve(system: SystemMatrix, measurement: RayMeasurement,
               grid: VoxelGrid, iters: int) -> TomoResult:
    """Multiplicative ML iteration for the linearized Poisson model.

    Nonnegativity is preserved by construction, untouched voxels stay at
    their initialization (reported through ``observed``), and the model
    log-likelihood is non-decreasing at every iteration.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    if system.indices.size == 0:
        raise ValidationError("empty system matrix")
    p = np.asarray(measurement.p, dtype=np.float64)
    if p.shape[0] != system.n_rays:
        raise ValidationError("measurement length does not match the ray count")
    if np.any(p[measurement.valid] < 0):
        raise ValidationError("projections must be >= 0")
    row_len = system.row_sums()
    use_rows = measurement.valid & (row_len > 0)
    if not use_rows.any():
        raise ValidationError("no valid ray intersects the grid")
    p_used = np.where(use_rows, p, 0.0)
    colsum = system.back(use_rows.astype(np.float64))
    observed = colsum > 0
    scale = p_used[use_rows].mean() / row_len[use_rows].mean() \
        if p_used[use_rows].mean() > 0 else 1.0
    mu = np.full(system.n_voxels, scale)

    history = np.empty(iters)
    for it in range(iters):
        q = system.forward(mu)
        ratio = np.zeros_like(q)
        np.divide(p_used, q, out=ratio, where=(q > 0) & use_rows)
        update = system.back(ratio)
        mu = np.where(observed, mu * np.divide(update, colsum,
                                               out=np.ones_like(update),
                                               where=observed), mu)
        history[it] = _poisson_loglik(p_used[use_rows],
                                      system.forward(mu)[use_rows])
    values = mu.reshape(grid.values.shape)
    return TomoResult(volume=grid.with_values(values), history=history,
                      observed=observed.reshape(grid.values.shape))


@njit(cache=True)
def _kaczmarz_sweeps(indptr, indices, lengths, p, valid, mu, relaxation, iters):
    n_rays = indptr.shape[0] - 1
    residuals = np.empty(iters)
    for it in range(iters):
        for r in range(n_rays):
            if not valid[r]:
                continue
            lo, hi = indptr[r], indptr[r + 1]
            if lo == hi:
                continue
            dot = 0.0
            norm2 = 0.0
            for i in range(lo, hi):
                dot += lengths[i] * mu[indices[i]]
                norm2 += lengths[i] * lengths[i]
            coef = relaxation * (p[r] - dot) / norm2
            for i in range(lo, hi):
                j = indices[i]
                val = mu[j] + coef * lengths[i]
                mu[j] = val if val > 0.0 else 0.0
        rss = 0.0
        for r in range(n_rays):
            if not valid[r]:
                continue
            dot = 0.0
            for i in range(indptr[r], indptr[r + 1]):
                dot += lengths[i] * mu[indices[i]]
            diff = p[r] - dot
            rss += diff * diff
        residuals[it] = np.sqrt(rss)
    return residuals


def art_solve(system: SystemMatrix, measurement: RayMeasurement, grid: VoxelGrid,
              iters: int, relaxation: float = 1.0) -> TomoResult:
    """Relaxed Kaczmarz row-action baseline with nonnegativity projection."""
    if not (0.0 < relaxation < 2.0):
        raise ValidationError("relaxation must lie in (0, 2)")
    if iters < 0:
        raise ValidationError("iters must be >= 0")
    if system.indices.size == 0:
        raise ValidationError("empty system matrix")
    p = np.asarray(measurement.p, dtype=np.float64)
    if p.shape[0] != system.n_rays:
        raise ValidationError("measurement length does not match the ray count")
    observed = system.back(np.asarray(measurement.valid, dtype=np.float64)) > 0
    mu = np.zeros(system.n_voxels)
    if iters == 0:
        return TomoResult(volume=grid.with_values(mu.reshape(grid.values.shape)),
                          history=np.empty(0), observed=observed.reshape(grid.values.shape))
    residuals = _kaczmarz_sweeps(system.indptr, system.indices, system.lengths,
                                 p, measurement.valid.astype(np.bool_), mu,
                                 relaxation, iters)
    return TomoResult(volume=grid.with_values(mu.reshape(grid.values.shape)),
                      history=residuals, observed=observed.reshape(grid.values.shape))


_VOLUME_HEADER = "<BIIIddddd"
_VOLUME_HEADER_BYTES = 4 + struct.calcsize(_VOLUME_HEADER)


def save_volume(path, grid: VoxelGrid) -> None:
    header = VOLUME_MAGIC + struct.pack(
        _VOLUME_HEADER, VOLUME_VERSION,
        grid.dims[0], grid.dims[1], grid.dims[2],
        grid.pitch_lateral, grid.pitch_axial,
        grid.origin[0], grid.origin[1], grid.origin[2])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.values.astype("<f4").tobytes())


def load_volume(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != VOLUME_MAGIC:
        raise ValidationError(f"{path}: not a volume file")
    version, nx, ny, nz, pl, pa, ox, oy, oz = struct.unpack(
        _VOLUME_HEADER, raw[4:_VOLUME_HEADER_BYTES])
    if version != VOLUME_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    values = np.frombuffer(raw[_VOLUME_HEADER_BYTES:], dtype="<f4")
    return VoxelGrid((nx, ny, nz), pl, pa, (ox, oy, oz),
                     values.reshape(nz, ny, nx).astype(np.float64))
