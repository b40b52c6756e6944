"""Sparse image recovery from a reduced set of frame pairs.

Every (frame, Da pixel) measurement is a linear projection of the unknown
object profile: the intensity collected at ra is the directional-sensor
speckle image sampled along the line of object points that ra sees, so one
acquisition yields as many regression rows as Da pixels.  The unknown is
expanded in an orthonormal 2D DCT basis and fitted by an L1-penalized least
squares (LASSO) via cyclic coordinate descent, with the penalty weight set
by row-wise cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.fft import dctn, idctn

from .core import OpticalConfig, ValidationError, axis_centers, bilinear_sample, validate_config
from .frames import FramePairStream

# treat the geometry as degenerate (no directional leverage) below this
_DEGENERATE_SHEAR = 1e-9


def dct2(image: np.ndarray) -> np.ndarray:
    """Orthonormal type-II 2D DCT."""
    return dctn(image, type=2, norm="ortho")


def idct2(coef: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2` (orthonormal type-III)."""
    return idctn(coef, type=2, norm="ortho")


def soft_threshold(x: float, t: float) -> float:
    """Proximal operator of t*|x|: shrink toward zero by t."""
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@dataclass
class CsProblem:
    """Measurements, sensing rows, and the DCT-domain design matrix.

    ``design`` is Phi*Psi materialized row-per-measurement (Fortran order for
    fast column access); Phi rows themselves are rebuilt on demand from the
    stored directional frames via :meth:`phi_row`.
    """

    y: np.ndarray
    design: np.ndarray
    obj_shape: tuple[int, int]       # (H, W) of the object grid
    obj_pitch: float
    row_ids: list                    # (frame_position, Da flat pixel) or (frame_position, -1)
    b_images: np.ndarray             # (n_frames, Hb, Wb) directional frames
    geometry: dict
    lam: float = 0.0
    bucket_mode: bool = False

    @property
    def n_rows(self) -> int:
        return self.y.size

    @property
    def n_coef(self) -> int:
        return self.obj_shape[0] * self.obj_shape[1]

    def phi_row(self, i: int) -> np.ndarray:
        """Sensing-row image (H, W) for measurement ``i``."""
        frame_pos, pixel = self.row_ids[i]
        return _phi_row_image(self.b_images[frame_pos], pixel, self.geometry)

    @classmethod
    def from_arrays(cls, y: np.ndarray, design: np.ndarray,
                    obj_shape: tuple[int, int], obj_pitch: float = 1.0,
                    lam: float = 0.0) -> "CsProblem":
        """Wrap a ready-made (y, PhiPsi) pair, e.g. for synthetic studies."""
        y = np.asarray(y, dtype=np.float64)
        design = np.asfortranarray(design, dtype=np.float64)
        if design.shape != (y.size, obj_shape[0] * obj_shape[1]):
            raise ValidationError("design shape must be (len(y), H*W)")
        return cls(y=y, design=design, obj_shape=obj_shape, obj_pitch=obj_pitch,
                   row_ids=[], b_images=np.zeros((0, 1, 1)), geometry={}, lam=lam)


def _object_grid(cfg: OpticalConfig) -> tuple[np.ndarray, np.ndarray, float]:
    pitch_obj = cfg.pitch_a / abs(cfg.M)
    wa, ha = cfg.dims_a
    return axis_centers(wa, pitch_obj), axis_centers(ha, pitch_obj), pitch_obj


def _phi_row_image(b_image: np.ndarray, pixel: int, geom: dict) -> np.ndarray:
    """Sample the directional frame at the sigma solving the propagation map."""
    x_obj, y_obj = geom["x_obj"], geom["y_obj"]
    cfg: OpticalConfig = geom["cfg"]
    scale = geom["kappa"]
    if pixel < 0:   # bucket row: object grid projected straight onto Db
        ix = (cfg.M_L * x_obj) / cfg.pitch_b + cfg.dims_b[0] / 2.0 - 0.5
        iy = (cfg.M_L * y_obj) / cfg.pitch_b + cfg.dims_b[1] / 2.0 - 0.5
    else:
        alpha, c = geom["alpha"], geom["c"]
        xa, ya = geom["xa"], geom["ya"]
        wa = cfg.dims_a[0]
        ax, ay = pixel % wa, pixel // wa
        sigma_x = (x_obj - alpha * xa[ax] / cfg.M) / c
        sigma_y = (y_obj - alpha * ya[ay] / cfg.M) / c
        ix = (cfg.M_L * sigma_x) / cfg.pitch_b + cfg.dims_b[0] / 2.0 - 0.5
        iy = (cfg.M_L * sigma_y) / cfg.pitch_b + cfg.dims_b[1] / 2.0 - 0.5
    return scale * bilinear_sample(b_image, ix[None, :], iy[:, None], fill=0.0)


def build_cs_problem(stream: FramePairStream, cfg: OpticalConfig, s_target: float,
                     max_rows: int = 8000, row_stride: int | None = None,
                     lam: float = 0.0, row_select: str = "strided") -> CsProblem:
    """Assemble the regression problem for the object profile at ``s_target``.

    Each frame contributes one measurement per (strided) Da pixel; at the
    degenerate depth s_target = s_o, where direction carries no information,
    the problem falls back to one bucket measurement per frame.

    ``row_select="photon"`` keeps every row whose measurement is positive
    (them all, for photon-sparse binary data) and fills the remaining budget
    with a strided sample of empty rows; ``"strided"`` subsamples uniformly.
    """
    validate_config(cfg)
    if not len(stream):
        raise ValidationError("cannot build a problem from zero frames")
    if lam < 0:
        raise ValidationError("lam must be >= 0")
    if not (np.isfinite(s_target) and s_target > 0):
        raise ValidationError("s_target must be positive")
    for fb in stream.frames_b:
        if (fb.width, fb.height) != cfg.dims_b:
            raise ValidationError("directional frames do not match the config dims")

    x_obj, y_obj, pitch_obj = _object_grid(cfg)
    wa, ha = cfg.dims_a
    n_frames = len(stream)
    alpha = s_target / cfg.s_o
    c = 1.0 - alpha
    bucket = abs(c) < _DEGENERATE_SHEAR

    # quadrature factor making Phi @ x match the propagated intensities when
    # the stream metadata records the speckle sampling; otherwise scale-free
    kappa = 1.0
    speckle_pitch = stream.meta.get("speckle_pitch_um")
    if not bucket and speckle_pitch:
        kappa = (pitch_obj / (abs(c) * speckle_pitch)) ** 2 / cfg.n_pixels_a

    b_images = np.stack([fb.values() for fb in stream.frames_b])
    a_values = [fa.values() for fa in stream.frames_a]
    geometry = {
        "cfg": cfg, "alpha": alpha, "c": c, "x_obj": x_obj, "y_obj": y_obj,
        "xa": cfg.pixel_centers_a()[0], "ya": cfg.pixel_centers_a()[1],
        "kappa": kappa, "s_target": s_target,
    }

    row_ids: list[tuple[int, int]] = []
    if bucket:
        row_ids = [(k, -1) for k in range(n_frames)]
    elif row_select == "photon":
        positive = [(k, p) for k in range(n_frames)
                    for p in np.flatnonzero(a_values[k].ravel() > 0)]
        budget = max(0, max_rows - len(positive))
        n_a = wa * ha
        total = n_frames * n_a
        stride = max(1, int(np.ceil(total / budget))) if budget else total + 1
        zero_rows = [(g // n_a, g % n_a) for g in range(0, total, stride)
                     if a_values[g // n_a].flat[g % n_a] == 0]
        row_ids = sorted(positive + zero_rows)
    elif row_select == "strided":
        n_a = wa * ha
        total = n_frames * n_a
        stride = row_stride if row_stride else max(1, int(np.ceil(total / max_rows)))
        for g in range(0, total, stride):
            row_ids.append((g // n_a, g % n_a))
    else:
        raise ValidationError(f"unknown row_select {row_select!r}")

    m = len(row_ids)
    n = wa * ha
    y = np.empty(m)
    design = np.empty((m, n), order="F")
    for i, (k, pixel) in enumerate(row_ids):
        if pixel < 0:
            y[i] = a_values[k].mean()
        else:
            y[i] = a_values[k].flat[pixel]
        design[i] = dct2(_phi_row_image(b_images[k], pixel, geometry)).ravel()

    return CsProblem(y=y, design=design, obj_shape=(ha, wa), obj_pitch=pitch_obj,
                     row_ids=row_ids, b_images=b_images, geometry=geometry,
                     lam=lam, bucket_mode=bucket)


@njit(cache=True)
def _cd_kernel(design, lam_m, coef, resid, inv_scale, max_sweeps, tol):
    """Cyclic coordinate descent on unit-norm columns; returns
    (sweeps_run, converged, objective_per_sweep)."""
    m, n = design.shape
    objectives = np.empty(max_sweeps)
    sweeps = 0
    converged = False
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(n):
            if inv_scale[j] == 0.0:
                continue
            old = coef[j]
            dot = 0.0
            for i in range(m):
                dot += design[i, j] * resid[i]
            rho = dot + old
            if rho > lam_m:
                new = rho - lam_m
            elif rho < -lam_m:
                new = rho + lam_m
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for i in range(m):
                    resid[i] -= design[i, j] * delta
                coef[j] = new
                change = abs(delta) * inv_scale[j]
                if change > max_delta:
                    max_delta = change
        rss = 0.0
        for i in range(m):
            rss += resid[i] * resid[i]
        l1 = 0.0
        for j in range(n):
            l1 += abs(coef[j])
        objectives[sweep] = rss / (2.0 * m) + (lam_m / m) * l1
        sweeps = sweep + 1
        if max_delta < tol:
            converged = True
            break
    return sweeps, converged, objectives[:sweeps]


@dataclass(frozen=True)
class LassoResult:
    image: np.ndarray
    coef: np.ndarray
    lam: float
    converged: bool
    sweeps: int
    objectives: np.ndarray


def _prepare(design: np.ndarray, y: np.ndarray):
    """Center rows/targets and rescale columns to unit norm."""
    col_mean = design.mean(axis=0)
    y_mean = y.mean()
    centered = np.asfortranarray(design - col_mean[None, :])
    scale = np.sqrt((centered ** 2).sum(axis=0))
    keep = scale > 0
    inv_scale = np.where(keep, 1.0 / np.where(keep, scale, 1.0), 0.0)
    centered *= inv_scale[None, :]
    return centered, y - y_mean, col_mean, y_mean, scale, inv_scale


def lasso_lambda_max(design: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty that zeroes every coefficient (normalized columns)."""
    centered, yc, *_ = _prepare(design, y)
    m = design.shape[0]
    return float(np.abs(centered.T @ yc).max() / m)


def lasso_cd(problem: CsProblem, lam: float | None = None, max_sweeps: int = 500,
             tol: float = 1e-6, coef0: np.ndarray | None = None) -> LassoResult:
    """Solve min ||y - PhiPsi c||^2 / (2m) + lam ||c||_1 by coordinate descent.

    Columns are rescaled to unit 2-norm for the sweeps and the scaling is
    undone on the returned coefficients; the image is the inverse DCT of the
    coefficient grid.  A budget overrun returns the partial result with
    ``converged=False``.
    """
    lam = problem.lam if lam is None else lam
    if lam < 0:
        raise ValidationError("lam must be >= 0")
    design, y = problem.design, problem.y
    m = design.shape[0]
    centered, yc, col_mean, y_mean, scale, inv_scale = _prepare(design, y)
    coef = np.zeros(design.shape[1]) if coef0 is None else coef0 * scale
    resid = yc - centered @ coef
    sweeps, converged, objectives = _cd_kernel(
        centered, lam * m, coef, resid, inv_scale, max_sweeps, tol)
    coef_user = coef * inv_scale
    h, w = problem.obj_shape
    image = idct2(coef_user.reshape(h, w))
    return LassoResult(image=image, coef=coef_user, lam=float(lam),
                       converged=bool(converged), sweeps=int(sweeps),
                       objectives=objectives)


def cross_validate_lambda(problem: CsProblem, k_folds: int, grid,
                          seed: int = 0, max_sweeps: int = 500,
                          tol: float = 1e-6) -> tuple[float, np.ndarray]:
    """Pick the penalty minimizing mean held-out squared error over row folds.

    Ties break toward the larger (sparser) value.  Returns (lam_star, table)
    where table[g] is the mean CV error for grid entry g.
    """
    grid = np.asarray(sorted(grid, reverse=True), dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0):
        raise ValidationError("grid must be nonempty and positive")
    m = problem.n_rows
    if k_folds < 2:
        raise ValidationError("k_folds must be >= 2")
    if k_folds > m:
        raise ValidationError("more folds than rows")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    folds = np.array_split(order, k_folds)

    errors = np.zeros((grid.size, k_folds))
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(order, test_idx, assume_unique=True)
        d_tr = problem.design[train_idx]
        y_tr = problem.y[train_idx]
        d_te = problem.design[test_idx]
        y_te = problem.y[test_idx]
        centered, yc, col_mean, y_mean, scale, inv_scale = _prepare(d_tr, y_tr)
        coef = np.zeros(d_tr.shape[1])
        for g, lam in enumerate(grid):
            resid = yc - centered @ coef
            _cd_kernel(centered, lam * len(train_idx), coef, resid,
                       inv_scale, max_sweeps, tol)
            coef_user = coef * inv_scale
            pred = (d_te - col_mean[None, :]) @ coef_user + y_mean
            errors[g, f] = float(((y_te - pred) ** 2).mean())
    mean_err = errors.mean(axis=1)
    best = int(np.argmin(mean_err))   # grid is descending: argmin prefers larger lam on ties
    return float(grid[best]), mean_err


def default_lambda_grid(problem: CsProblem, n_points: int = 20) -> np.ndarray:
    lam_max = lasso_lambda_max(problem.design, problem.y)
    if lam_max <= 0:
        raise ValidationError("degenerate problem: zero lambda_max")
    return np.geomspace(1e-3 * lam_max, lam_max, n_points)


@dataclass(frozen=True)
class CsResult:
    image: np.ndarray
    lam: float
    r_vs_reference: float | None
    lasso: LassoResult


def cs_reconstruct(stream: FramePairStream, cfg: OpticalConfig, s_target: float,
                   lam="cv", reference: np.ndarray | None = None,
                   max_rows: int = 8000, k_folds: int = 5, cv_grid=None,
                   seed: int = 0, max_sweeps: int = 500,
                   row_select: str = "strided") -> CsResult:
    """Full reduced-data reconstruction at depth ``s_target``.

    ``lam`` is either a numeric penalty or "cv" for cross-validation on the
    default logarithmic grid.  When ``reference`` is given, the Pearson
    correlation against it is reported alongside the image.
    """
    problem = build_cs_problem(stream, cfg, s_target, max_rows=max_rows,
                               row_select=row_select)
    if lam == "cv":
        grid = default_lambda_grid(problem) if cv_grid is None else cv_grid
        lam_value, _ = cross_validate_lambda(problem, k_folds, grid, seed=seed,
                                             max_sweeps=max_sweeps)
    else:
        lam_value = float(lam)
    result = lasso_cd(problem, lam=lam_value, max_sweeps=max_sweeps)
    r = None
    if reference is not None:
        from .metrics import pearson_r
        try:
            r = pearson_r(result.image, reference)
        except ValidationError:
            r = 0.0   # all-zero solution carries no similarity
    return CsResult(image=result.image, lam=lam_value, r_vs_reference=r, lasso=result)
