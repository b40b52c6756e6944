"""End-to-end frame acquisition: speckle -> propagation -> detection.

Every frame is a pure function of (seed, frame_index), so batches can be
produced by any number of workers in any order with identical results; the
stream is always assembled in index order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import MaskPlane, ObjectScene, OpticalConfig, ValidationError, validate_config
from .detector import DetectorParams, detect_binary
from .forward import PropagationPlan, build_plan, propagate_batch
from .frames import Frame, FramePairStream
from .speckle import SpeckleGrid, generate_speckle

_BATCH = 64


def uniform_scene_for(cfg: OpticalConfig, grid: SpeckleGrid, depth: float,
                      margin: float = 1.25) -> ObjectScene:
    """Fully transparent scene at ``depth`` covering the whole mapped footprint.

    Used as the object-free calibration run for tomography references and as
    the trivial-scene baseline in tests.
    """
    alpha = depth / cfg.s_o
    c = 1.0 - alpha
    xa, ya = cfg.pixel_centers_a()
    sx, sy = grid.axes()
    half_x = (abs(alpha / cfg.M) * np.abs(xa).max() + abs(c) * np.abs(sx).max()) * margin
    half_y = (abs(alpha / cfg.M) * np.abs(ya).max() + abs(c) * np.abs(sy).max()) * margin
    pitch = max(2.0 * half_x / 63, 2.0 * half_y / 63, 1e-6)
    dims = (int(np.ceil(2 * half_x / pitch)) + 2, int(np.ceil(2 * half_y / pitch)) + 2)
    values = np.ones((dims[1], dims[0]))
    return ObjectScene(masks=(MaskPlane(depth, values, pitch),))


def simulate_stream(scene: ObjectScene, cfg: OpticalConfig, grid: SpeckleGrid,
                    sigma_c: float, mean_intensity: float, n_frames: int,
                    seed: int, detector: DetectorParams | None = None,
                    binary: bool = False, workers: int = 1,
                    plan: PropagationPlan | None = None,
                    detector_b: DetectorParams | None = None,
                    start_index: int = 0) -> FramePairStream:
    """Simulate ``n_frames`` simultaneous frame pairs.

    Analog output by default; with ``binary=True`` both sensors go through
    the gated single-photon detector (``detector`` defaults to the stock
    parameters with the stream seed).  The directional sensor images the raw
    speckle and usually sees far more photons per pixel than the spatial
    sensor, so ``detector_b`` can gate it separately (defaults to
    ``detector``).
    """
    validate_config(cfg)
    if n_frames < 0:
        raise ValidationError("n_frames must be >= 0")
    if plan is None:
        plan = build_plan(scene, cfg, grid)
    if binary and detector is None:
        detector = DetectorParams(seed=seed, gate_ns=DetectorParams().exposure_ns)
    if binary and detector_b is None:
        detector_b = detector

    wa, ha = cfg.dims_a
    wb, hb = cfg.dims_b

    def run_batch(lo: int, hi: int):
        k = hi - lo
        stack = np.empty((k, grid.dims[1], grid.dims[0]))
        for i in range(k):
            stack[i] = generate_speckle(seed, start_index + lo + i, grid,
                                        sigma_c, mean_intensity).intensity()
        a_vals, b_vals = propagate_batch(stack, plan)
        out = []
        for i in range(k):
            idx = start_index + lo + i
            fa = Frame.analog(a_vals[i].reshape(ha, wa), index=idx, sensor="a")
            fb = Frame.analog(b_vals[i].reshape(hb, wb), index=idx, sensor="b")
            if binary:
                fa = detect_binary(fa, detector, idx)
                fb = detect_binary(fb, detector_b, idx)
            out.append((fa, fb))
        return out

    spans = [(lo, min(lo + _BATCH, n_frames)) for lo in range(0, n_frames, _BATCH)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(lambda s: run_batch(*s), spans))
    else:
        batches = [run_batch(*s) for s in spans]

    frames_a, frames_b = [], []
    for batch in batches:
        for fa, fb in batch:
            frames_a.append(fa)
            frames_b.append(fb)

    meta = {
        "config_digest": cfg.digest(),
        "seed": int(seed),
        "start_index": int(start_index),
        "sigma_c_um": float(sigma_c),
        "mean_intensity": float(mean_intensity),
        "speckle_dims": list(grid.dims),
        "speckle_pitch_um": float(grid.pitch),
        "payload": "binary" if binary else "analog",
    }
    if binary:
        for key, det in (("detector", detector), ("detector_b", detector_b)):
            meta[key] = {
                "eta": det.eta, "gate_ns": det.gate_ns,
                "exposure_ns": det.exposure_ns, "dark_cps": det.dark_cps,
                "seed": det.seed,
            }
    return FramePairStream(tuple(frames_a), tuple(frames_b), meta)
