"""Shared domain types for the two-sensor correlation imaging geometry.

Conventions used throughout the package:

* transverse positions are in micrometers (um), axial distances in mm;
* a sensor or grid axis with ``n`` cells of pitch ``p`` has cell centers at
  ``(i + 0.5) * p - n * p / 2`` (optical axis through the geometric center);
* 2D arrays are indexed ``[y, x]`` (row-major), flattened C-order, so a
  flat pixel index is ``y * width + x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    """Raised when a configuration or input violates a documented invariant."""


def axis_centers(n: int, pitch: float) -> np.ndarray:
    """Cell-center coordinates (um) of an axis with ``n`` cells of ``pitch`` um."""
    return (np.arange(n) + 0.5) * pitch - n * pitch / 2.0


@dataclass(frozen=True)
class OpticalConfig:
    """Geometry of the two-sensor setup.

    Sensor Da images the object plane at distance ``s_o`` (mm) from the
    focusing element with lateral magnification ``M``; sensor Db images the
    focusing-element plane with magnification ``M_L``.  ``n_paths`` is the
    exponent applied to the transmission profile (1 when the object sits in
    a single optical path, 2 when it sits in both).
    """

    s_o: float
    M: float
    M_L: float
    n_paths: int = 1
    pitch_a: float = 10.0
    pitch_b: float = 10.0
    dims_a: tuple[int, int] = (64, 64)   # (width, height) of Da
    dims_b: tuple[int, int] = (16, 16)   # (width, height) of Db

    @property
    def n_pixels_a(self) -> int:
        return self.dims_a[0] * self.dims_a[1]

    @property
    def n_pixels_b(self) -> int:
        return self.dims_b[0] * self.dims_b[1]

    def pixel_centers_a(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) center coordinates (um) of the Da pixel axes."""
        return axis_centers(self.dims_a[0], self.pitch_a), axis_centers(self.dims_a[1], self.pitch_a)

    def pixel_centers_b(self) -> tuple[np.ndarray, np.ndarray]:
        return axis_centers(self.dims_b[0], self.pitch_b), axis_centers(self.dims_b[1], self.pitch_b)

    def digest(self) -> str:
        """Stable hex digest of the configuration, stored in stream metadata."""
        import hashlib

        payload = repr((self.s_o, self.M, self.M_L, self.n_paths, self.pitch_a,
                        self.pitch_b, self.dims_a, self.dims_b)).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def validate_config(cfg: OpticalConfig) -> None:
    """Check every OpticalConfig invariant; raise ValidationError on the first violation."""
    if not (np.isfinite(cfg.s_o) and cfg.s_o > 0):
        raise ValidationError("s_o must be positive")
    if not (np.isfinite(cfg.M) and cfg.M != 0):
        raise ValidationError("M must be nonzero")
    if not (np.isfinite(cfg.M_L) and cfg.M_L != 0):
        raise ValidationError("M_L must be nonzero")
    if cfg.n_paths not in (1, 2):
        raise ValidationError("n_paths must be 1 or 2")
    for name, pitch in (("pitch_a", cfg.pitch_a), ("pitch_b", cfg.pitch_b)):
        if not (np.isfinite(pitch) and pitch > 0):
            raise ValidationError(f"{name} must be positive")
    for name, dims in (("dims_a", cfg.dims_a), ("dims_b", cfg.dims_b)):
        if len(dims) != 2 or any(int(d) < 1 or int(d) != d for d in dims):
            raise ValidationError(f"{name} entries must be integers >= 1")


@dataclass(frozen=True)
class MaskPlane:
    """A planar transmission mask at axial distance ``depth`` (mm).

    ``values`` is an (H, W) array of transmissions in [0, 1] sampled on a
    grid of ``pitch`` um, centered on the optical axis plus ``center`` (um).
    """

    depth: float
    values: np.ndarray
    pitch: float
    center: tuple[float, float] = (0.0, 0.0)   # (x, y) offset of the grid center

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.size == 0:
            raise ValidationError("mask values must be a nonempty 2D array")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValidationError("mask transmissions must lie in [0, 1]")
        if not (np.isfinite(self.depth) and self.depth > 0):
            raise ValidationError("mask depth must be positive")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValidationError("mask pitch must be positive")
        v.setflags(write=False)

    def grid_axes(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.values.shape
        return (axis_centers(w, self.pitch) + self.center[0],
                axis_centers(h, self.pitch) + self.center[1])


@dataclass(frozen=True)
class ObjectScene:
    """One or more transmission masks; points outside a mask grid are opaque.

    ``opaque_surround=False`` asserts instead that every propagated footprint
    must stay inside the mask grids; plan construction then rejects
    geometries that would sample beyond an edge.
    """

    masks: tuple[MaskPlane, ...]
    opaque_surround: bool = True

    def __post_init__(self):
        masks = tuple(self.masks)
        object.__setattr__(self, "masks", masks)
        if not masks:
            raise ValidationError("scene must contain at least one mask")
        depths = [m.depth for m in masks]
        if len(set(depths)) != len(depths):
            raise ValidationError("mask depths must be distinct")

    @property
    def depths(self) -> tuple[float, ...]:
        return tuple(m.depth for m in self.masks)

    def mask_at(self, depth: float, rtol: float = 1e-9) -> MaskPlane:
        for m in self.masks:
            if abs(m.depth - depth) <= rtol * max(abs(depth), 1.0):
                return m
        raise ValidationError(f"no mask at depth {depth} mm")


def bilinear_sample(values: np.ndarray, ix: np.ndarray, iy: np.ndarray,
                    fill: float = 0.0) -> np.ndarray:
    """Bilinear interpolation of ``values`` at fractional indices (ix, iy).

    Points outside the full support [0, n-1] on either axis return ``fill``.
    """
    h, w = values.shape
    ix = np.asarray(ix, dtype=np.float64)
    iy = np.asarray(iy, dtype=np.float64)
    inside = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
    ixc = np.clip(ix, 0, w - 1)
    iyc = np.clip(iy, 0, h - 1)
    x0 = np.clip(np.floor(ixc).astype(np.intp), 0, w - 1 if w == 1 else w - 2)
    y0 = np.clip(np.floor(iyc).astype(np.intp), 0, h - 1 if h == 1 else h - 2)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = ixc - x0
    fy = iyc - y0
    out = (values[y0, x0] * (1 - fx) * (1 - fy)
           + values[y0, x1] * fx * (1 - fy)
           + values[y1, x0] * (1 - fx) * fy
           + values[y1, x1] * fx * fy)
    return np.where(inside, out, fill)


def scene_value(scene: ObjectScene, depth: float, point) -> np.ndarray:
    """Transmission of the mask at ``depth`` at object-plane ``point`` (x, y) um.

    Bilinear interpolation of the mask grid; points outside the grid return 0.
    ``point`` may be a pair of scalars or a pair of equal-shape arrays.
    """
    mask = scene.mask_at(depth)
    px, py = np.asarray(point[0], float), np.asarray(point[1], float)
    h, w = mask.values.shape
    # fractional grid indices: grid x-axis starts at center of cell 0
    ix = (px - mask.center[0]) / mask.pitch + w / 2.0 - 0.5
    iy = (py - mask.center[1]) / mask.pitch + h / 2.0 - 0.5
    return bilinear_sample(mask.values, ix, iy, fill=0.0)


def slit_mask(dims: tuple[int, int], pitch: float, centers: list[float],
              slit_width: float, background: float = 0.0,
              value: float = 1.0) -> np.ndarray:
    """(H, W) mask with vertical transmitting slits on an opaque background.

    ``centers`` are slit center x-positions (um); slits span the full height.
    A cell transmits when its center lies within slit_width/2 of a center.
    """
    w, h = dims
    x = axis_centers(w, pitch)
    row = np.full(w, background, dtype=np.float64)
    for c in centers:
        row[np.abs(x - c) <= slit_width / 2.0] = value
    return np.tile(row, (h, 1))


def double_slit_scene(depth: float, center_distance: float, slit_width: float,
                      dims: tuple[int, int] = (96, 96), pitch: float = 4.0,
                      center: tuple[float, float] = (0.0, 0.0)) -> ObjectScene:
    """Two-slit mask centered on the axis, classic resolution target."""
    half = center_distance / 2.0
    vals = slit_mask(dims, pitch, [-half, +half], slit_width)
    return ObjectScene(masks=(MaskPlane(depth, vals, pitch, center),))


def triple_slit_scene(depth: float, center_distance: float, slit_width: float,
                      dims: tuple[int, int] = (96, 96), pitch: float = 4.0,
                      center: tuple[float, float] = (0.0, 0.0)) -> ObjectScene:
    vals = slit_mask(dims, pitch, [-center_distance, 0.0, +center_distance], slit_width)
    return ObjectScene(masks=(MaskPlane(depth, vals, pitch, center),))
