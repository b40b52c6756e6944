"""Refocusing the correlation tensor onto arbitrary depths.

For a target depth s the correlation map of each directional pixel rb is a
sheared copy of the object; inverting the propagation argument gives the Da
position that saw object point r through rb:

    ra = M (s_o / s) * (r - (1 - s/s_o) * rb / M_L).

Summing the interpolated tensor over rb (and normalizing by how many rb
actually landed on the sensor) synthesizes the image focused at s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OpticalConfig, ValidationError, axis_centers, bilinear_sample
from .correlation import CorrelationTensor
from .frames import FramePairStream


@dataclass(frozen=True)
class RefocusedImage:
    """Object-plane image at ``depth`` with per-pixel contribution counts.

    Pixels that received no directional contribution are reported through
    ``counts == 0`` (their value is 0 but carries no information).
    """

    values: np.ndarray
    depth: float
    pitch: float              # object-plane pitch, um
    counts: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        c = np.ascontiguousarray(self.counts, dtype=np.int64)
        if v.shape != c.shape:
            raise ValidationError("values and counts must share a shape")
        if not np.all(np.isfinite(v)):
            raise ValidationError("refocused values must be finite")
        if c.min() < 0:
            raise ValidationError("contribution counts must be >= 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "counts", c)

    def observed(self) -> np.ndarray:
        return self.counts > 0

    def mean_profile(self, axis: int = 0) -> np.ndarray:
        """1D section averaged along ``axis`` over observed pixels."""
        obs = self.observed()
        weight = obs.sum(axis=axis)
        total = np.where(obs, self.values, 0.0).sum(axis=axis)
        out = np.zeros_like(total)
        np.divide(total, weight, out=out, where=weight > 0)
        return out


def _db_axes(gamma: CorrelationTensor, cfg: OpticalConfig):
    """Db pixel-center axes (um), honoring any accumulation-time binning."""
    wb_cfg, hb_cfg = cfg.dims_b
    wb, hb = gamma.dims_b
    if wb_cfg % wb or hb_cfg % hb or wb_cfg // wb != hb_cfg // hb:
        raise ValidationError("tensor Db dims are not a binning of the config dims")
    factor = wb_cfg // wb
    pitch = cfg.pitch_b * factor
    return axis_centers(wb, pitch), axis_centers(hb, pitch)


def refocus(gamma: CorrelationTensor, cfg: OpticalConfig, s_target: float,
            mode: str = "bilinear") -> RefocusedImage:
    """Synthesize the image focused at ``s_target`` (mm) from the tensor.

    ``mode`` selects bilinear interpolation of the tensor in the Da indices
    (default) or nearest-neighbor lookup for exact small-case checks.
    """
    if not (np.isfinite(s_target) and s_target > 0):
        raise ValidationError("s_target must be positive")
    if gamma.dims_a != cfg.dims_a:
        raise ValidationError("tensor Da dims do not match the config")
    if mode not in ("bilinear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    wa, ha = cfg.dims_a
    pitch_obj = cfg.pitch_a / abs(cfg.M)
    x_obj = axis_centers(wa, pitch_obj)
    y_obj = axis_centers(ha, pitch_obj)
    xb, yb = _db_axes(gamma, cfg)
    c = 1.0 - s_target / cfg.s_o
    back = cfg.M * cfg.s_o / s_target

    total = np.zeros((ha, wa))
    counts = np.zeros((ha, wa), dtype=np.int64)
    for byi in range(len(yb)):
        for bxi in range(len(xb)):
            rax = back * (x_obj - c * xb[bxi] / cfg.M_L)
            ray = back * (y_obj - c * yb[byi] / cfg.M_L)
            ix = rax / cfg.pitch_a + wa / 2.0 - 0.5
            iy = ray / cfg.pitch_a + ha / 2.0 - 0.5
            if mode == "nearest":
                ix = np.round(ix)
                iy = np.round(iy)
            inside = ((ix >= 0) & (ix <= wa - 1))[None, :] \
                & ((iy >= 0) & (iy <= ha - 1))[:, None]
            slab = bilinear_sample(gamma.slice_at(byi, bxi), ix[None, :], iy[:, None],
                                   fill=0.0)
            total += np.where(inside, slab, 0.0)
            counts += inside
    if not counts.any():
        raise ValidationError("geometry maps every directional sample off-sensor")
    values = np.zeros_like(total)
    np.divide(total, counts, out=values, where=counts > 0)
    return RefocusedImage(values=values, depth=s_target, pitch=pitch_obj, counts=counts)


def refocus_stack(gamma: CorrelationTensor, cfg: OpticalConfig, s_list,
                  mode: str = "bilinear") -> list[RefocusedImage]:
    """Refocused image per depth in ``s_list`` (possibly empty)."""
    return [refocus(gamma, cfg, s, mode=mode) for s in s_list]


def direct_image(stream: FramePairStream) -> np.ndarray:
    """Per-pixel mean of the spatial-sensor frames: the standard image baseline."""
    if not len(stream):
        raise ValidationError("direct image requires at least one frame")
    f0 = stream.frames_a[0]
    total = np.zeros((f0.height, f0.width))
    for fa in stream.frames_a:
        total += fa.values()
    return total / len(stream)
