"""Structured-text run configuration (INI-style key = value sections).

Sections: [optics], [speckle], optional [detector] and [run], and one or more
[mask:NAME] sections describing the scene.  Unknown sections or keys are
rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .core import (MaskPlane, ObjectScene, OpticalConfig, ValidationError,
                   slit_mask, validate_config)
from .detector import DetectorParams
from .speckle import SpeckleGrid

_OPTICS_KEYS = {
    "s_o_mm", "magnification", "lens_magnification", "n_paths",
    "pitch_a_um", "pitch_b_um", "width_a", "height_a", "width_b", "height_b",
}
_SPECKLE_KEYS = {"width", "height", "pitch_um", "sigma_c_um", "mean_intensity"}
_DETECTOR_KEYS = {"eta", "gate_ns", "exposure_ns", "dark_cps", "mode"}
_RUN_KEYS = {"frames", "seed"}
_MASK_COMMON = {"type", "depth_mm", "pitch_um", "grid_width", "grid_height",
                "center_x_um", "center_y_um"}
_MASK_KEYS = {
    "double-slit": _MASK_COMMON | {"center_distance_um", "slit_width_um", "background"},
    "triple-slit": _MASK_COMMON | {"center_distance_um", "slit_width_um", "background"},
    "uniform": _MASK_COMMON | {"value"},
    "image-file": _MASK_COMMON | {"file"},
}


@dataclass(frozen=True)
class RunConfig:
    optics: OpticalConfig
    scene: ObjectScene
    speckle_grid: SpeckleGrid
    sigma_c: float
    mean_intensity: float
    detector: DetectorParams
    binary: bool
    n_frames: int
    seed: int


def _check_keys(section: str, present, allowed) -> None:
    unknown = set(present) - set(allowed)
    if unknown:
        raise ValidationError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _getfloat(sec, key, default=None):
    raw = sec.get(key)
    if raw is None:
        if default is None:
            raise ValidationError(f"missing required key {key!r} in [{sec.name}]")
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ValidationError(f"{key} = {raw!r} is not a number") from exc


def _getint(sec, key, default=None):
    value = _getfloat(sec, key, default)
    if value != int(value):
        raise ValidationError(f"{key} must be an integer")
    return int(value)


def _parse_mask(sec) -> MaskPlane:
    kind = sec.get("type")
    if kind not in _MASK_KEYS:
        raise ValidationError(
            f"[{sec.name}] type must be one of {sorted(_MASK_KEYS)}, got {kind!r}")
    _check_keys(sec.name, sec.keys(), _MASK_KEYS[kind])
    depth = _getfloat(sec, "depth_mm")
    pitch = _getfloat(sec, "pitch_um")
    center = (_getfloat(sec, "center_x_um", 0.0), _getfloat(sec, "center_y_um", 0.0))
    if kind == "image-file":
        from PIL import Image

        path = sec.get("file")
        if not path:
            raise ValidationError(f"[{sec.name}] image-file mask needs file=")
        img = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
        return MaskPlane(depth, img, pitch, center)
    dims = (_getint(sec, "grid_width", 96), _getint(sec, "grid_height", 96))
    if kind == "uniform":
        value = _getfloat(sec, "value", 1.0)
        return MaskPlane(depth, np.full((dims[1], dims[0]), value), pitch, center)
    d = _getfloat(sec, "center_distance_um")
    width = _getfloat(sec, "slit_width_um")
    background = _getfloat(sec, "background", 0.0)
    centers = [-d / 2, d / 2] if kind == "double-slit" else [-d, 0.0, d]
    return MaskPlane(depth, slit_mask(dims, pitch, centers, width,
                                      background=background), pitch, center)


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValidationError(f"cannot read config file {path}")

    known = {"optics", "speckle", "detector", "run"}
    for name in parser.sections():
        if name not in known and not name.startswith("mask:"):
            raise ValidationError(f"unknown section [{name}]")
    for required in ("optics", "speckle"):
        if required not in parser:
            raise ValidationError(f"missing required section [{required}]")

    opt = parser["optics"]
    _check_keys("optics", opt.keys(), _OPTICS_KEYS)
    optics = OpticalConfig(
        s_o=_getfloat(opt, "s_o_mm"),
        M=_getfloat(opt, "magnification"),
        M_L=_getfloat(opt, "lens_magnification"),
        n_paths=_getint(opt, "n_paths", 1),
        pitch_a=_getfloat(opt, "pitch_a_um"),
        pitch_b=_getfloat(opt, "pitch_b_um"),
        dims_a=(_getint(opt, "width_a"), _getint(opt, "height_a")),
        dims_b=(_getint(opt, "width_b"), _getint(opt, "height_b")),
    )
    validate_config(optics)

    spk = parser["speckle"]
    _check_keys("speckle", spk.keys(), _SPECKLE_KEYS)
    grid = SpeckleGrid(dims=(_getint(spk, "width"), _getint(spk, "height")),
                       pitch=_getfloat(spk, "pitch_um"))
    sigma_c = _getfloat(spk, "sigma_c_um")
    mean_intensity = _getfloat(spk, "mean_intensity", 1.0)

    binary = False
    detector = DetectorParams(seed=0, gate_ns=DetectorParams().exposure_ns)
    if "detector" in parser:
        det = parser["detector"]
        _check_keys("detector", det.keys(), _DETECTOR_KEYS)
        mode = det.get("mode", "analog")
        if mode not in ("analog", "binary"):
            raise ValidationError("detector mode must be analog or binary")
        binary = mode == "binary"
        exposure = _getfloat(det, "exposure_ns", DetectorParams().exposure_ns)
        detector = DetectorParams(
            eta=_getfloat(det, "eta", DetectorParams().eta),
            gate_ns=_getfloat(det, "gate_ns", exposure),
            exposure_ns=exposure,
            dark_cps=_getfloat(det, "dark_cps", DetectorParams().dark_cps),
            seed=0,
        )

    n_frames, seed = 0, 0
    if "run" in parser:
        run = parser["run"]
        _check_keys("run", run.keys(), _RUN_KEYS)
        n_frames = _getint(run, "frames", 0)
        seed = _getint(run, "seed", 0)

    masks = [_parse_mask(parser[name]) for name in parser.sections()
             if name.startswith("mask:")]
    if not masks:
        raise ValidationError("config must define at least one [mask:NAME] section")
    scene = ObjectScene(masks=tuple(masks))

    detector = DetectorParams(eta=detector.eta, gate_ns=detector.gate_ns,
                              exposure_ns=detector.exposure_ns,
                              dark_cps=detector.dark_cps, seed=seed)
    return RunConfig(optics=optics, scene=scene, speckle_grid=grid,
                     sigma_c=sigma_c, mean_intensity=mean_intensity,
                     detector=detector, binary=binary, n_frames=n_frames,
                     seed=seed)
