"""Streaming, mergeable estimation of the two-sensor correlation function.

The estimator keeps running first moments and the (Da pixel, Db pixel) outer
product; finalizing divides by the frame count (population convention) to get

    Gamma[ra, rb] = <Ia(ra) Ib(rb)> - <Ia(ra)> <Ib(rb)>.

Binary frames take a fast path: pixel bits are repacked frame-major into
64-bit words, so each (Da pixel, Db pixel) pair accumulates via bit-counting
word-wise conjunctions over blocks of frames.  Integer sums make the binary
estimate exact under any accumulation order or merge tree; analog sums use
compensated (Kahan) summation.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .core import ValidationError
from .frames import (KIND_ANALOG, KIND_BINARY, Frame, FramePairStream,
                     unpack_bits)

GAMMA_MAGIC = b"CPIG"
GAMMA_VERSION = 1
_NORM_TAGS = {"raw": 0, "unit-peak": 1}
_NORM_NAMES = {v: k for k, v in _NORM_TAGS.items()}

# frames per bit-packed accumulation block; multiple of 64 so packed rows
# view cleanly as uint64 words
_BLOCK_FRAMES = 1024
# 32-bit popcount lanes would overflow after 2**32 blocks; int64 sums push
# that far beyond any desk-scale run, but keep the guard explicit
_MAX_FRAMES = 2 ** 62


@dataclass(frozen=True)
class CorrelationTensor:
    """Finalized 4-index correlation map, stored rb-major: (Hb, Wb, Ha, Wa)."""

    data: np.ndarray
    dims_a: tuple[int, int]   # (width, height) of Da
    dims_b: tuple[int, int]   # (width, height) of the (possibly binned) Db
    n_frames: int
    normalization: str = "raw"

    def __post_init__(self):
        wa, ha = self.dims_a
        wb, hb = self.dims_b
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.shape != (hb, wb, ha, wa):
            raise ValidationError("tensor shape must be (Hb, Wb, Ha, Wa)")
        if not np.all(np.isfinite(d)):
            raise ValidationError("tensor entries must be finite")
        if self.normalization not in _NORM_TAGS:
            raise ValidationError(f"unknown normalization tag {self.normalization!r}")
        object.__setattr__(self, "data", d)
        d.setflags(write=False)

    def slice_at(self, by: int, bx: int) -> np.ndarray:
        """Contiguous (Ha, Wa) view of Gamma for one Db pixel."""
        return self.data[by, bx]

    def peak_normalized(self) -> "CorrelationTensor":
        peak = np.abs(self.data).max()
        if peak == 0:
            raise ValidationError("cannot peak-normalize an all-zero tensor")
        return CorrelationTensor(self.data / peak, self.dims_a, self.dims_b,
                                 self.n_frames, "unit-peak")


def save_tensor(path, tensor: CorrelationTensor) -> None:
    header = GAMMA_MAGIC + struct.pack(
        "<BIIIIQB", GAMMA_VERSION,
        tensor.dims_a[0], tensor.dims_a[1], tensor.dims_b[0], tensor.dims_b[1],
        tensor.n_frames, _NORM_TAGS[tensor.normalization])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tensor.data.astype("<f8").tobytes())


def load_tensor(path) -> CorrelationTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != GAMMA_MAGIC:
        raise ValidationError(f"{path}: not a correlation tensor file")
    version, wa, ha, wb, hb, n, norm = struct.unpack("<BIIIIQB", raw[4:30])
    if version != GAMMA_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw[30:], dtype="<f8").reshape(hb, wb, ha, wa).copy()
    return CorrelationTensor(data, (wa, ha), (wb, hb), n, _NORM_NAMES[norm])


def _kahan_add(total: np.ndarray, comp: np.ndarray, x: np.ndarray) -> None:
    y = x - comp
    t = total + y
    comp[...] = (t - total) - y
    total[...] = t


def bin_sum(values: np.ndarray, k: int) -> np.ndarray:
    """k x k sum-pooling of a 2D map; dims must be divisible by k."""
    h, w = values.shape
    if h % k or w % k:
        raise ValidationError(f"binning factor {k} must divide the frame dims")
    return values.reshape(h // k, k, w // k, k).sum(axis=(1, 3))


class CorrelationAccumulator:
    """Single-writer accumulator of correlation moments over frame pairs.

    ``bin_b`` sum-pools Db frames by that factor before the outer product.
    Analog and binary payloads use separate storage; binary sums are exact
    integers.  Use :func:`merge` to combine per-worker accumulators.
    """

    def __init__(self, dims_a: tuple[int, int], dims_b: tuple[int, int],
                 kind: int, bin_b: int = 1):
        wa, ha = dims_a
        wb, hb = dims_b
        if bin_b < 1 or wb % bin_b or hb % bin_b:
            raise ValidationError("bin_b must divide the Db dims")
        if kind not in (KIND_ANALOG, KIND_BINARY):
            raise ValidationError(f"unknown payload kind {kind}")
        self.dims_a = (wa, ha)
        self.dims_b_raw = (wb, hb)
        self.bin_b = bin_b
        self.dims_b = (wb // bin_b, hb // bin_b)
        self.kind = kind
        self.n_frames = 0
        na = wa * ha
        nb = self.dims_b[0] * self.dims_b[1]
        if kind == KIND_ANALOG:
            self.sum_a = np.zeros(na)
            self.sum_b = np.zeros(nb)
            self.sum_ab = np.zeros((na, nb))
            self._comp_a = np.zeros(na)
            self._comp_b = np.zeros(nb)
            self._comp_ab = np.zeros((na, nb))
        else:
            self.sum_a = np.zeros(na, dtype=np.int64)
            self.sum_b = np.zeros(nb, dtype=np.int64)
            self.sum_ab = np.zeros((na, nb), dtype=np.int64)
            self._pending_a: list[np.ndarray] = []   # packed Da rows
            self._pending_b: list[np.ndarray] = []   # packed or binned Db rows

    # -- ingestion ---------------------------------------------------------

    def _check_pair(self, frame_a: Frame, frame_b: Frame) -> None:
        if (frame_a.width, frame_a.height) != self.dims_a:
            raise ValidationError("frame_a dims do not match the accumulator")
        if (frame_b.width, frame_b.height) != self.dims_b_raw:
            raise ValidationError("frame_b dims do not match the accumulator")
        if frame_a.kind != self.kind or frame_b.kind != self.kind:
            raise ValidationError("payload kind does not match the accumulator")

    def add_pair(self, frame_a: Frame, frame_b: Frame) -> None:
        self._check_pair(frame_a, frame_b)
        if self.n_frames >= _MAX_FRAMES:
            raise ValidationError("accumulator frame budget exhausted")
        if self.kind == KIND_ANALOG:
            a = frame_a.values().ravel()
            b = frame_b.values()
            if self.bin_b > 1:
                b = bin_sum(b, self.bin_b)
            b = b.ravel()
            _kahan_add(self.sum_a, self._comp_a, a)
            _kahan_add(self.sum_b, self._comp_b, b)
            _kahan_add(self.sum_ab, self._comp_ab, np.multiply.outer(a, b))
        else:
            self._pending_a.append(frame_a.payload)
            if self.bin_b > 1:
                self._pending_b.append(
                    bin_sum(frame_b.bits().astype(np.int64), self.bin_b).ravel())
            else:
                self._pending_b.append(frame_b.payload)
            if len(self._pending_a) >= _BLOCK_FRAMES:
                self._flush()
        self.n_frames += 1

    def add_analog_block(self, a_block: np.ndarray, b_block: np.ndarray) -> None:
        """Accumulate (K, Na)/(K, Nb_raw) float blocks via one matrix product."""
        if self.kind != KIND_ANALOG:
            raise ValidationError("block ingestion is for analog accumulators")
        k = a_block.shape[0]
        a_block = np.asarray(a_block, dtype=np.float64)
        b_block = np.asarray(b_block, dtype=np.float64)
        if self.bin_b > 1:
            wb, hb = self.dims_b_raw
            b_block = b_block.reshape(k, hb, wb)
            b_block = b_block.reshape(k, hb // self.bin_b, self.bin_b,
                                      wb // self.bin_b, self.bin_b).sum(axis=(2, 4))
            b_block = b_block.reshape(k, -1)
        _kahan_add(self.sum_a, self._comp_a, a_block.sum(axis=0))
        _kahan_add(self.sum_b, self._comp_b, b_block.sum(axis=0))
        _kahan_add(self.sum_ab, self._comp_ab, a_block.T @ b_block)
        self.n_frames += k

    # -- binary fast path ----------------------------------------------------

    def _flush(self) -> None:
        if self.kind != KIND_BINARY or not self._pending_a:
            return
        k = len(self._pending_a)
        wa, ha = self.dims_a
        na = wa * ha
        bits_a = np.empty((k, na), dtype=np.uint8)
        for i, payload in enumerate(self._pending_a):
            bits_a[i] = unpack_bits(payload, wa).ravel()
        self.sum_a += bits_a.sum(axis=0, dtype=np.int64)
        if self.bin_b > 1:
            b_block = np.asarray(self._pending_b, dtype=np.int64)
            self.sum_b += b_block.sum(axis=0)
            # exact in float32: products and per-block sums stay far below 2**24
            self._gemm_flush(bits_a, b_block.astype(np.float32))
        else:
            wb, hb = self.dims_b_raw
            nb = wb * hb
            bits_b = np.empty((k, nb), dtype=np.uint8)
            for i, payload in enumerate(self._pending_b):
                bits_b[i] = unpack_bits(payload, wb).ravel()
            self.sum_b += bits_b.sum(axis=0, dtype=np.int64)
            self._popcount_flush(bits_a, bits_b)
        self._pending_a.clear()
        self._pending_b.clear()

    def _popcount_flush(self, bits_a: np.ndarray, bits_b: np.ndarray) -> None:
        """sum_ab += bits_a.T @ bits_b via word-wise AND + popcount."""
        k = bits_a.shape[0]
        pad = (-k) % 64
        if pad:
            bits_a = np.vstack([bits_a, np.zeros((pad, bits_a.shape[1]), np.uint8)])
            bits_b = np.vstack([bits_b, np.zeros((pad, bits_b.shape[1]), np.uint8)])
        # frame-major packing: one uint64 word holds 64 frames of one pixel
        words_a = np.ascontiguousarray(np.packbits(bits_a, axis=0).T).view(np.uint64)
        words_b = np.ascontiguousarray(np.packbits(bits_b, axis=0).T).view(np.uint64)
        n_a, n_words = words_a.shape
        tmp = np.empty_like(words_a)
        counts = np.empty(words_a.shape, dtype=np.uint8)
        for q in range(words_b.shape[0]):
            np.bitwise_and(words_a, words_b[q][None, :], out=tmp)
            np.bitwise_count(tmp, out=counts)
            self.sum_ab[:, q] += counts.sum(axis=1, dtype=np.int64)

    def _gemm_flush(self, bits_a: np.ndarray, b_block: np.ndarray) -> None:
        k, na = bits_a.shape
        step = max(1, 8_388_608 // max(k, 1))
        for p0 in range(0, na, step):
            p1 = min(p0 + step, na)
            chunk = bits_a[:, p0:p1].astype(np.float32)
            self.sum_ab[p0:p1] += np.round(chunk.T @ b_block).astype(np.int64)

    # -- results -------------------------------------------------------------

    def copy(self) -> "CorrelationAccumulator":
        self._flush()
        out = CorrelationAccumulator(self.dims_a, self.dims_b_raw, self.kind, self.bin_b)
        out.n_frames = self.n_frames
        out.sum_a = self.sum_a.copy()
        out.sum_b = self.sum_b.copy()
        out.sum_ab = self.sum_ab.copy()
        if self.kind == KIND_ANALOG:
            out._comp_a = self._comp_a.copy()
            out._comp_b = self._comp_b.copy()
            out._comp_ab = self._comp_ab.copy()
        return out


def accumulate(acc: CorrelationAccumulator, frame_a: Frame, frame_b: Frame
               ) -> CorrelationAccumulator:
    """Add one simultaneous frame pair to the accumulator (returned for chaining)."""
    acc.add_pair(frame_a, frame_b)
    return acc


def merge(acc1: CorrelationAccumulator, acc2: CorrelationAccumulator
          ) -> CorrelationAccumulator:
    """Combine two accumulators; associative and commutative."""
    if (acc1.dims_a != acc2.dims_a or acc1.dims_b_raw != acc2.dims_b_raw
            or acc1.kind != acc2.kind or acc1.bin_b != acc2.bin_b):
        raise ValidationError("cannot merge accumulators with different layouts")
    acc2._flush()
    out = acc1.copy()
    out.n_frames += acc2.n_frames
    out.sum_a += acc2.sum_a
    out.sum_b += acc2.sum_b
    out.sum_ab += acc2.sum_ab
    if out.kind == KIND_ANALOG:
        out._comp_a += acc2._comp_a
        out._comp_b += acc2._comp_b
        out._comp_ab += acc2._comp_ab
    return out


def finalize(acc: CorrelationAccumulator) -> CorrelationTensor:
    """Population-covariance estimate Gamma = sum_ab/N - (sum_a/N)(sum_b/N)."""
    if acc.n_frames < 2:
        raise ValidationError("finalize requires at least 2 frames")
    if acc.kind == KIND_BINARY:
        acc._flush()
    n = float(acc.n_frames)
    mean_a = acc.sum_a.astype(np.float64) / n
    mean_b = acc.sum_b.astype(np.float64) / n
    gamma = acc.sum_ab.astype(np.float64) / n - np.multiply.outer(mean_a, mean_b)
    wa, ha = acc.dims_a
    wb, hb = acc.dims_b
    gamma = gamma.reshape(ha, wa, hb, wb).transpose(2, 3, 0, 1)
    return CorrelationTensor(np.ascontiguousarray(gamma), acc.dims_a, acc.dims_b,
                             acc.n_frames, "raw")


def accumulate_stream(stream: FramePairStream, bin_b: int = 1) -> CorrelationAccumulator:
    if not len(stream):
        raise ValidationError("empty stream")
    f0 = stream.frames_a[0]
    g0 = stream.frames_b[0]
    acc = CorrelationAccumulator((f0.width, f0.height), (g0.width, g0.height),
                                 f0.kind, bin_b)
    for fa, fb in stream:
        acc.add_pair(fa, fb)
    return acc


def bench_accumulate(stream: FramePairStream, mode: str, bin_b: int = 1) -> dict:
    """Wall-clock accumulation throughput; returns a report dict.

    ``naive-float`` unpacks each binary frame and accumulates the per-pixel
    float outer product; ``bit-packed`` runs the popcount fast path.  Both
    produce identical finalized tensors on binary input.
    """
    if len(stream) < 1000:
        raise ValidationError("benchmark requires at least 1000 frames")
    f0, g0 = stream.frames_a[0], stream.frames_b[0]
    if f0.kind != KIND_BINARY:
        raise ValidationError("benchmark expects binary frames")
    dims_a, dims_b = (f0.width, f0.height), (g0.width, g0.height)

    t0 = time.perf_counter()
    if mode == "bit-packed":
        acc = CorrelationAccumulator(dims_a, dims_b, KIND_BINARY, bin_b)
        for fa, fb in stream:
            acc.add_pair(fa, fb)
        acc._flush()
        tensor = finalize(acc)
    elif mode == "naive-float":
        na = dims_a[0] * dims_a[1]
        nb_binned = (dims_b[0] // bin_b) * (dims_b[1] // bin_b)
        sum_a = np.zeros(na, dtype=np.float32)
        sum_b = np.zeros(nb_binned, dtype=np.float32)
        sum_ab = np.zeros((na, nb_binned), dtype=np.float32)
        outer = np.empty_like(sum_ab)
        for fa, fb in stream:
            a = fa.values().astype(np.float32).ravel()
            b = fb.values().astype(np.float32)
            if bin_b > 1:
                b = bin_sum(b, bin_b).astype(np.float32)
            b = b.ravel()
            sum_a += a
            sum_b += b
            np.multiply(a[:, None], b[None, :], out=outer)
            sum_ab += outer
        n = float(len(stream))
        gamma = (sum_ab.astype(np.float64) / n
                 - np.multiply.outer(sum_a.astype(np.float64) / n,
                                     sum_b.astype(np.float64) / n))
        wa, ha = dims_a
        wb, hb = dims_b[0] // bin_b, dims_b[1] // bin_b
        gamma = gamma.reshape(ha, wa, hb, wb).transpose(2, 3, 0, 1)
        tensor = CorrelationTensor(np.ascontiguousarray(gamma), dims_a, (wb, hb),
                                   len(stream), "raw")
    else:
        raise ValidationError(f"unknown benchmark mode {mode!r}")
    elapsed = time.perf_counter() - t0

    pair_bytes = stream.pair_nbytes()
    fps = len(stream) / elapsed
    return {
        "mode": mode,
        "n_frames": len(stream),
        "wall_s": elapsed,
        "frames_per_s": fps,
        "pair_bytes": pair_bytes,
        "bytes_per_s": fps * pair_bytes,
        "tensor": tensor,
    }
