"""Per-shot sensor frames, bit packing, and the on-disk frame format.

A frame is either *analog* (nonnegative float32 per pixel, mean photons per
pixel per exposure) or *binary* (one bit per pixel, bit-packed row-major with
rows padded to whole bytes, padding bits zero).

File format (little-endian, bit-exact):

    offset  size  field
    0       4     magic "CPIF"
    4       1     format version (1)
    5       1     payload kind: 0 = analog float32, 1 = binary bit-packed
    6       1     sensor tag: 0x61 'a' or 0x62 'b'
    7       1     reserved (0)
    8       4     width  (u32)
    12      4     height (u32)
    16      4     frame count (u32)
    20      ...   frames, concatenated; analog frames are width*height
                  float32 values, binary frames are height*ceil(width/8) bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import ValidationError

MAGIC = b"CPIF"
FORMAT_VERSION = 1
KIND_ANALOG = 0
KIND_BINARY = 1


def packed_row_bytes(width: int) -> int:
    return (width + 7) // 8


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack an (H, W) array of 0/1 into (H, ceil(W/8)) bytes, MSB first."""
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise ValidationError("expected a 2D bit array")
    return np.packbits(bits.astype(np.uint8, copy=False), axis=1)


def unpack_bits(packed: np.ndarray, width: int) -> np.ndarray:
    """Inverse of pack_bits; returns an (H, width) uint8 array of 0/1."""
    packed = np.asarray(packed, dtype=np.uint8)
    return np.unpackbits(packed, axis=1, count=width)


@dataclass(frozen=True)
class Frame:
    """One sensor frame; ``payload`` is float32 (H, W) or packed uint8 (H, bytes)."""

    width: int
    height: int
    payload: np.ndarray
    kind: int                 # KIND_ANALOG or KIND_BINARY
    index: int = 0
    sensor: str = "a"

    def __post_init__(self):
        if self.sensor not in ("a", "b"):
            raise ValidationError("sensor tag must be 'a' or 'b'")
        p = self.payload
        if self.kind == KIND_ANALOG:
            p = np.ascontiguousarray(p, dtype=np.float32)
            if p.shape != (self.height, self.width):
                raise ValidationError("analog payload shape must be (height, width)")
            if not np.all(np.isfinite(p)) or p.min() < 0:
                raise ValidationError("analog values must be finite and >= 0")
        elif self.kind == KIND_BINARY:
            p = np.ascontiguousarray(p, dtype=np.uint8)
            if p.shape != (self.height, packed_row_bytes(self.width)):
                raise ValidationError("binary payload must be height x ceil(width/8) bytes")
            pad = self.width % 8
            if pad and np.any(p[:, -1] & ((1 << (8 - pad)) - 1)):
                raise ValidationError("padding bits must be zero")
        else:
            raise ValidationError(f"unknown payload kind {self.kind}")
        object.__setattr__(self, "payload", p)
        p.setflags(write=False)

    @property
    def is_binary(self) -> bool:
        return self.kind == KIND_BINARY

    def values(self) -> np.ndarray:
        """Pixel values as a float64 (H, W) array (bits unpacked for binary)."""
        if self.kind == KIND_ANALOG:
            return self.payload.astype(np.float64)
        return unpack_bits(self.payload, self.width).astype(np.float64)

    def bits(self) -> np.ndarray:
        if self.kind != KIND_BINARY:
            raise ValidationError("frame is not binary")
        return unpack_bits(self.payload, self.width)

    def nbytes(self) -> int:
        return self.payload.nbytes

    @staticmethod
    def analog(values: np.ndarray, index: int = 0, sensor: str = "a") -> "Frame":
        values = np.asarray(values)
        h, w = values.shape
        return Frame(w, h, values.astype(np.float32), KIND_ANALOG, index, sensor)

    @staticmethod
    def binary(bits: np.ndarray, index: int = 0, sensor: str = "a") -> "Frame":
        bits = np.asarray(bits)
        h, w = bits.shape
        return Frame(w, h, pack_bits(bits), KIND_BINARY, index, sensor)


@dataclass(frozen=True)
class FramePairStream:
    """An ordered sequence of simultaneous (Da, Db) frame pairs.

    ``meta`` carries the acquisition context (config digest, seed, exposure
    parameters) so downstream stages can verify provenance.
    """

    frames_a: tuple[Frame, ...]
    frames_b: tuple[Frame, ...]
    meta: dict

    def __post_init__(self):
        a, b = tuple(self.frames_a), tuple(self.frames_b)
        object.__setattr__(self, "frames_a", a)
        object.__setattr__(self, "frames_b", b)
        if len(a) != len(b):
            raise ValidationError("sensor streams must have equal length")
        for fa, fb in zip(a, b):
            if fa.index != fb.index:
                raise ValidationError("paired frames must share an index")
        for frames in (a, b):
            if frames:
                w, h, k = frames[0].width, frames[0].height, frames[0].kind
                for f in frames:
                    if (f.width, f.height, f.kind) != (w, h, k):
                        raise ValidationError("frames of one sensor must share shape and kind")

    def __len__(self) -> int:
        return len(self.frames_a)

    def __iter__(self):
        return iter(zip(self.frames_a, self.frames_b))

    def pair_nbytes(self) -> int:
        if not self.frames_a:
            return 0
        return self.frames_a[0].nbytes() + self.frames_b[0].nbytes()

    def subset(self, indices) -> "FramePairStream":
        idx = list(indices)
        return FramePairStream(
            frames_a=tuple(self.frames_a[i] for i in idx),
            frames_b=tuple(self.frames_b[i] for i in idx),
            meta=dict(self.meta),
        )


def write_frames(path, frames: list[Frame]) -> None:
    """Write frames (all same sensor/shape/kind) to ``path`` in CPIF format."""
    if not frames:
        raise ValidationError("cannot write an empty frame file")
    f0 = frames[0]
    for f in frames:
        if (f.width, f.height, f.kind, f.sensor) != (f0.width, f0.height, f0.kind, f0.sensor):
            raise ValidationError("all frames in one file must share shape, kind, and sensor")
    header = MAGIC + struct.pack(
        "<BBBBIII", FORMAT_VERSION, f0.kind, ord(f0.sensor), 0,
        f0.width, f0.height, len(frames))
    with open(path, "wb") as fh:
        fh.write(header)
        for f in frames:
            fh.write(f.payload.tobytes())


def read_frames(path) -> list[Frame]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a CPIF file")
    version, kind, sensor, _res, width, height, count = struct.unpack("<BBBBIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    if kind == KIND_ANALOG:
        frame_bytes = width * height * 4
    elif kind == KIND_BINARY:
        frame_bytes = height * packed_row_bytes(width)
    else:
        raise ValidationError(f"{path}: unknown payload kind {kind}")
    expected = 20 + count * frame_bytes
    if len(raw) != expected:
        raise ValidationError(f"{path}: truncated file ({len(raw)} of {expected} bytes)")
    frames = []
    for i in range(count):
        chunk = raw[20 + i * frame_bytes:20 + (i + 1) * frame_bytes]
        if kind == KIND_ANALOG:
            payload = np.frombuffer(chunk, dtype="<f4").reshape(height, width)
        else:
            payload = np.frombuffer(chunk, dtype=np.uint8).reshape(height, packed_row_bytes(width))
        frames.append(Frame(width, height, payload.copy(), kind, i, chr(sensor)))
    return frames


def write_stream(dirpath, stream: FramePairStream) -> None:
    """Write a pair stream as frames_a.cpif / frames_b.cpif plus manifest.json."""
    import json
    from pathlib import Path

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    if len(stream):
        write_frames(d / "frames_a.cpif", list(stream.frames_a))
        write_frames(d / "frames_b.cpif", list(stream.frames_b))
    manifest = dict(stream.meta)
    manifest["n_frames"] = len(stream)
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_stream(dirpath) -> FramePairStream:
    import json
    from pathlib import Path

    d = Path(dirpath)
    with open(d / "manifest.json") as fh:
        meta = json.load(fh)
    n = meta.get("n_frames", 0)
    if n == 0:
        return FramePairStream((), (), meta)
    frames_a = read_frames(d / "frames_a.cpif")
    frames_b = read_frames(d / "frames_b.cpif")
    return FramePairStream(tuple(frames_a), tuple(frames_b), meta)
