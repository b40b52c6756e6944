"""Image-quality statistics: visibility, sharpness, similarity, resolution scans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .core import OpticalConfig, ValidationError, double_slit_scene
from .forward import build_plan, expected_gamma, mean_direct_image
from .refocus import refocus
from .speckle import SpeckleGrid


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation coefficient between two equal-size maps."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError("images must have the same size")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise ValidationError("Pearson r undefined for a constant image")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def visibility(profile: np.ndarray, period_hint: float | None = None) -> float:
    """(I_max - I_min) / (I_max + I_min) over the detected slit peaks.

    I_max is the mean of the detected peak maxima, I_min the central trough
    between them.  ``period_hint`` (samples) sets the minimum peak spacing.
    Raises if fewer than two peaks are found (e.g. a flat profile).
    """
    profile = np.asarray(profile, dtype=np.float64)
    if profile.ndim != 1:
        raise ValidationError("visibility expects a 1D profile")
    if profile.min() < 0:
        raise ValidationError("profile must be nonnegative")
    span = profile.max() - profile.min()
    kwargs = {}
    if span > 0:
        kwargs["prominence"] = 0.02 * span
    if period_hint is not None and period_hint > 2:
        kwargs["distance"] = max(1, int(round(0.75 * period_hint)))
    peaks, _ = find_peaks(profile, **kwargs)
    if len(peaks) < 2:
        raise ValidationError("fewer than two peaks found")
    i_max = float(profile[peaks].mean())
    mid = len(peaks) // 2
    left, right = peaks[mid - 1], peaks[mid]
    i_min = float(profile[left:right + 1].min())
    if i_max + i_min == 0:
        return 0.0
    return (i_max - i_min) / (i_max + i_min)


def sharpness(image: np.ndarray) -> float:
    """Mean gradient magnitude; larger on better-focused images."""
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    return float(np.sqrt(gx ** 2 + gy ** 2).mean())


@dataclass(frozen=True)
class ResolutionCurve:
    """Smallest resolvable slit distance (um) per depth, for CPI and direct imaging."""

    s_values: np.ndarray
    d_cpi: np.ndarray
    d_direct: np.ndarray
    threshold: float


def _scan_mask_dims(cfg: OpticalConfig, d_max: float) -> tuple[tuple[int, int], float]:
    pitch = cfg.pitch_a / abs(cfg.M) / 2.0
    width = max(32, int(np.ceil(3.0 * d_max / pitch)))
    return (width, 32), pitch


def resolution_scan(cfg: OpticalConfig, sigma_c: float, s_values,
                    speckle_grid: SpeckleGrid, d_range: tuple[float, float],
                    threshold: float = 0.1, bisect_iters: int = 10) -> ResolutionCurve:
    """Bisect the double-slit distance d at each depth until visibility crosses
    ``threshold``; slit width is d/2 throughout.

    Both curves are computed from the analytic model: the CPI branch refocuses
    the geometric-limit correlation tensor, the direct branch uses the
    speckle-averaged sensor image.  Unresolvable depths report ``inf``.
    """
    d_lo, d_hi = d_range
    if not (0 < d_lo < d_hi):
        raise ValidationError("d_range must satisfy 0 < d_min < d_max")
    field = cfg.dims_a[0] * cfg.pitch_a / abs(cfg.M)
    if 1.5 * d_hi > 0.9 * field:
        raise ValidationError(
            "d_max too large: the outer slit edges must stay inside the "
            f"refocused field ({field:.0f} um across)")
    s_values = np.asarray(list(s_values), dtype=np.float64)
    if np.any(s_values <= 0):
        raise ValidationError("depths must be positive")
    mask_dims, mask_pitch = _scan_mask_dims(cfg, d_hi)
    pitch_obj = cfg.pitch_a / abs(cfg.M)

    def vis_cpi(s: float, d: float) -> float:
        scene = double_slit_scene(s, d, d / 2.0, dims=mask_dims, pitch=mask_pitch)
        gamma = expected_gamma(scene, cfg, sigma_c)
        img = refocus(gamma, cfg, s)
        try:
            return visibility(img.mean_profile(axis=0), period_hint=d / pitch_obj)
        except ValidationError:
            return 0.0

    def vis_direct(s: float, d: float) -> float:
        scene = double_slit_scene(s, d, d / 2.0, dims=mask_dims, pitch=mask_pitch)
        plan = build_plan(scene, cfg, speckle_grid)
        img = mean_direct_image(plan)
        try:
            return visibility(img.mean(axis=0), period_hint=d * abs(cfg.M) / cfg.pitch_a)
        except ValidationError:
            return 0.0

    def smallest_resolvable(vis) -> float:
        # strict crossing: a profile never exceeds unit visibility, so a
        # threshold of 1.0 marks everything unresolvable
        if not vis(d_hi) > threshold:
            return np.inf
        lo, hi = d_lo, d_hi
        if vis(lo) > threshold:
            return lo
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            if vis(mid) > threshold:
                hi = mid
            else:
                lo = mid
        return hi

    d_cpi = np.array([smallest_resolvable(lambda d: vis_cpi(s, d)) for s in s_values])
    d_direct = np.array([smallest_resolvable(lambda d: vis_direct(s, d)) for s in s_values])
    return ResolutionCurve(s_values=s_values, d_cpi=d_cpi, d_direct=d_direct,
                           threshold=threshold)


def format_report(entries: dict) -> str:
    """Render a report as sorted ``key=value`` lines."""
    lines = []
    for key in sorted(entries):
        value = entries[key]
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_report(path, entries: dict) -> None:
    with open(path, "w") as fh:
        fh.write(format_report(entries))
