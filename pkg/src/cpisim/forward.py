"""Geometric-optics propagation of speckle realizations onto the two sensors.

A ray reaching Da pixel ``ra`` via focusing-element point ``sigma`` crosses
the plane at depth ``s`` at the transverse point

    (s/s_o) * (ra / M) + (1 - s/s_o) * sigma,

so the intensity collected by ``ra`` is the speckle intensity summed over
``sigma`` weighted by the transmissions met along each path, while Db simply
records the (magnified) image of the focusing-element speckle.  Because the
scene is fixed while the speckle changes per frame, the whole Da response is
one matrix-vector product with a precomputed transfer matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (ObjectScene, OpticalConfig, ValidationError, bilinear_sample,
                   validate_config)
from .correlation import CorrelationTensor
from .frames import Frame
from .speckle import SpeckleField, SpeckleGrid

# transfer matrices above this element count are stored as float32
_T_FLOAT32_THRESHOLD = 32_000_000


@dataclass(frozen=True, eq=False)
class PropagationPlan:
    """Precomputed geometry for one (scene, config, speckle grid) triple.

    ``transfer`` has shape (n_pixels_a, n_speckle_cells) and already contains
    the uniform quadrature weight 1/n_pixels_a and the transmission products;
    ``map_x``/``map_y`` are the per-depth per-axis mapping tables from
    (Da pixel, speckle cell) to object-plane coordinates (um).
    """

    cfg: OpticalConfig
    scene: ObjectScene
    grid: SpeckleGrid
    transfer: np.ndarray
    map_x: dict
    map_y: dict
    b_index_x: np.ndarray     # fractional speckle-grid indices for Db pixels
    b_index_y: np.ndarray

    def matches(self, scene: ObjectScene, cfg: OpticalConfig, grid: SpeckleGrid) -> bool:
        return self.cfg == cfg and self.scene is scene and self.grid == grid


def _fractional_indices(mask, px: np.ndarray, py: np.ndarray):
    h, w = mask.values.shape
    ix = (px - mask.center[0]) / mask.pitch + w / 2.0 - 0.5
    iy = (py - mask.center[1]) / mask.pitch + h / 2.0 - 0.5
    return ix, iy


def build_plan(scene: ObjectScene, cfg: OpticalConfig, grid: SpeckleGrid,
               dtype=None) -> PropagationPlan:
    """Assemble the transfer matrix and mapping tables for ``scene`` under ``cfg``."""
    validate_config(cfg)
    wa, ha = cfg.dims_a
    ws, hs = grid.dims
    xa, ya = cfg.pixel_centers_a()
    sx, sy = grid.axes()
    n_a = cfg.n_pixels_a
    n_s = grid.n_cells
    if dtype is None:
        dtype = np.float64 if n_a * n_s <= _T_FLOAT32_THRESHOLD else np.float32

    map_x, map_y = {}, {}
    for mask in scene.masks:
        alpha = mask.depth / cfg.s_o
        c = 1.0 - alpha
        mx = alpha * (xa / cfg.M)[:, None] + c * sx[None, :]
        my = alpha * (ya / cfg.M)[:, None] + c * sy[None, :]
        map_x[mask.depth] = mx
        map_y[mask.depth] = my
        if not scene.opaque_surround:
            gx, gy = mask.grid_axes()
            half = mask.pitch / 2.0
            if (mx.min() < gx[0] - half or mx.max() > gx[-1] + half
                    or my.min() < gy[0] - half or my.max() > gy[-1] + half):
                raise ValidationError(
                    f"mapped footprint at depth {mask.depth} mm exceeds the mask grid")

    transfer = np.empty((n_a, n_s), dtype=dtype)
    weight = 1.0 / n_a
    # assemble in slabs of Da rows to bound peak memory
    rows_per_slab = max(1, int(4e6 // max(wa * n_s, 1)))
    for y0 in range(0, ha, rows_per_slab):
        y1 = min(y0 + rows_per_slab, ha)
        prod = np.full((y1 - y0, wa, hs, ws), weight, dtype=np.float64)
        for mask in scene.masks:
            ix, iy = _fractional_indices(
                mask, map_x[mask.depth][None, :, None, :],
                map_y[mask.depth][y0:y1, None, :, None])
            samp = bilinear_sample(mask.values, ix, iy, fill=0.0)
            if cfg.n_paths == 2:
                samp *= samp
            prod *= samp
        transfer[y0 * wa:y1 * wa] = prod.reshape((y1 - y0) * wa, n_s)

    xb, yb = cfg.pixel_centers_b()
    bx = (xb / cfg.M_L - sx[0]) / grid.pitch
    by = (yb / cfg.M_L - sy[0]) / grid.pitch
    b_index_x = np.broadcast_to(bx[None, :], (cfg.dims_b[1], cfg.dims_b[0])).copy()
    b_index_y = np.broadcast_to(by[:, None], (cfg.dims_b[1], cfg.dims_b[0])).copy()

    return PropagationPlan(cfg=cfg, scene=scene, grid=grid, transfer=transfer,
                           map_x=map_x, map_y=map_y,
                           b_index_x=b_index_x, b_index_y=b_index_y)


def propagate_frame(speckle: SpeckleField, scene: ObjectScene, cfg: OpticalConfig,
                    plan: PropagationPlan, index: int = 0) -> tuple[Frame, Frame]:
    """Propagate one speckle realization; returns analog (frame_a, frame_b).

    frame_b is the speckle intensity sampled at sigma = rb / M_L (bilinear,
    zero outside the speckle grid); frame_a applies the transfer matrix.
    """
    if not plan.matches(scene, cfg, speckle.grid):
        raise ValidationError("propagation plan does not match scene/config/grid")
    intensity = speckle.intensity()
    a = plan.transfer @ intensity.ravel().astype(plan.transfer.dtype, copy=False)
    fa = Frame.analog(a.reshape(cfg.dims_a[1], cfg.dims_a[0]), index=index, sensor="a")
    b = bilinear_sample(intensity, plan.b_index_x, plan.b_index_y, fill=0.0)
    fb = Frame.analog(b, index=index, sensor="b")
    return fa, fb


def propagate_batch(intensities: np.ndarray, plan: PropagationPlan
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized propagation of a (K, Hs, Ws) stack of speckle intensities.

    Returns float64 arrays A (K, n_pixels_a) and B (K, n_pixels_b); identical
    per-frame values to propagate_frame up to summation order.
    """
    k = intensities.shape[0]
    flat = intensities.reshape(k, -1).T.astype(plan.transfer.dtype, copy=False)
    a = (plan.transfer @ flat).T.astype(np.float64)
    b = np.empty((k, plan.b_index_x.size), dtype=np.float64)
    for i in range(k):
        b[i] = bilinear_sample(intensities[i], plan.b_index_x, plan.b_index_y,
                               fill=0.0).ravel()
    return a, b


def mean_direct_image(plan: PropagationPlan, mean_intensity: float = 1.0) -> np.ndarray:
    """Speckle-averaged Da image (H, W): transfer row sums times the mean intensity."""
    cfg = plan.cfg
    row = plan.transfer.sum(axis=1, dtype=np.float64) * mean_intensity
    return row.reshape(cfg.dims_a[1], cfg.dims_a[0])


def expected_gamma(scene: ObjectScene, cfg: OpticalConfig, sigma_c: float,
                   normalize: bool = True) -> CorrelationTensor:
    """Analytic geometric-limit correlation tensor for a single-depth scene.

    The transmission profile (raised to n_paths) is convolved with the
    intensity-covariance kernel scaled by (1 - s/s_o), then evaluated at
    (s/s_o)(ra/M) + (1 - s/s_o)(rb/M_L).  Peak-normalized by default.
    """
    validate_config(cfg)
    if len(scene.masks) != 1:
        raise ValidationError("analytic correlation oracle requires a single-depth scene")
    from scipy.ndimage import gaussian_filter

    mask = scene.masks[0]
    alpha = mask.depth / cfg.s_o
    c = 1.0 - alpha
    profile = mask.values.astype(np.float64) ** cfg.n_paths
    sigma_px = abs(c) * sigma_c / mask.pitch
    if sigma_px > 1e-9:
        profile = gaussian_filter(profile, sigma=sigma_px, mode="constant", cval=0.0)

    wa, ha = cfg.dims_a
    wb, hb = cfg.dims_b
    xa, ya = cfg.pixel_centers_a()
    xb, yb = cfg.pixel_centers_b()
    gamma = np.empty((hb, wb, ha, wa), dtype=np.float64)
    for byi in range(hb):
        for bxi in range(wb):
            px = alpha * xa / cfg.M + c * xb[bxi] / cfg.M_L
            py = alpha * ya / cfg.M + c * yb[byi] / cfg.M_L
            ix, iy = _fractional_indices(mask, px[None, :], py[:, None])
            gamma[byi, bxi] = bilinear_sample(profile, ix, iy, fill=0.0)
    norm = "raw"
    peak = gamma.max()
    if normalize and peak > 0:
        gamma = gamma / peak
        norm = "unit-peak"
    return CorrelationTensor(data=gamma, dims_a=cfg.dims_a, dims_b=cfg.dims_b,
                             n_frames=0, normalization=norm)
