"""Tensor and quantized-artifact containers with bit-exact file formats.

Two native little-endian formats are written (see ``docs/formats.md``):

* ``DACQT`` -- a plain float32 tensor (weights or calibration activations).
* ``DACQQ`` -- a group-wise quantized tensor: per-group grid parameters,
  per-input-channel scales and packed level indices.

safetensors files are accepted on input only, so real checkpoints can be
ingested without writing a third-party format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

TENSOR_MAGIC = b"DACQT"
QUANT_MAGIC = b"DACQQ"
FORMAT_VERSION = 1

DTYPE_F32 = 0

KIND_UNIFORM = 0
KIND_LOGISTIC = 1
KIND_HYBRID = 2
KIND_NAMES = {KIND_UNIFORM: "uniform", KIND_LOGISTIC: "logistic", KIND_HYBRID: "hybrid"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

FLAG_DEGENERATE = 0x01
FLAG_WEIGHT_FALLBACK = 0x02

GROUP_DTYPE = np.dtype(
    [
        ("mu", "<f4"),
        ("sigma", "<f4"),
        ("w_min", "<f4"),
        ("w_max", "<f4"),
        ("gamma", "<f4"),
        ("kind", "u1"),
        ("flags", "u1"),
    ]
)

SUPPORTED_BITS = (2, 3, 4, 8)


class FormatError(ValueError):
    """Raised when a file or buffer does not follow the documented layout."""


class ShapeMismatchError(FormatError):
    """Payload length disagrees with the declared shape."""


class NonFiniteError(FormatError):
    """A tensor contains NaN or Inf."""


class InvariantError(FormatError):
    """A quantized artifact violates one of its field invariants."""


def _as_f32_matrix(data, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{what} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr


@dataclass(eq=False)
class WeightTensor:
    """A named ``out_features x in_features`` float32 weight matrix."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32_matrix(self.data, f"tensor {self.name!r}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return self.name == other.name and _bit_equal(self.data, other.data)


@dataclass(eq=False)
class CalibrationSet:
    """Cached input activations for one layer, ``tokens x cols``.

    Zero tokens is allowed; consumers fall back to a weight-space objective.
    """

    layer_name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32_matrix(self.data, f"calibration {self.layer_name!r}")

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(eq=False)
class QuantizedTensor:
    """Packed group-wise quantized weights plus everything needed to dequantize.

    ``group_params`` is a structured array with ``GROUP_DTYPE``, one record per
    group in row-major order (all groups of row 0 first).  ``packed`` holds one
    level index per weight in row-major order, two per byte (low nibble first)
    for ``bits <= 4`` and one per byte for ``bits == 8``.
    """

    name: str
    rows: int
    cols: int
    group_size: int
    bits: int
    packed: bytes
    group_params: np.ndarray
    channel_scales: np.ndarray = field(default=None)

    def __post_init__(self):
        self.group_params = np.ascontiguousarray(self.group_params, dtype=GROUP_DTYPE)
        if self.channel_scales is None:
            self.channel_scales = np.ones(self.cols, dtype=np.float32)
        self.channel_scales = np.ascontiguousarray(self.channel_scales, dtype=np.float32)
        self.packed = bytes(self.packed)

    @property
    def groups_per_row(self) -> int:
        return math.ceil(self.cols / self.group_size)

    @property
    def n_groups(self) -> int:
        return self.rows * self.groups_per_row

    def indices(self) -> np.ndarray:
        """Unpacked level indices as a ``rows x cols`` uint8 matrix."""
        n = self.rows * self.cols
        if self.bits == 8:
            flat = np.frombuffer(self.packed, dtype=np.uint8)
        else:
            flat = unpack_nibbles(self.packed, n)
        return flat.reshape(self.rows, self.cols)

    def validate(self) -> None:
        validate_quantized(self)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and (self.rows, self.cols, self.group_size, self.bits)
            == (other.rows, other.cols, other.group_size, other.bits)
            and self.packed == other.packed
            and self.group_params.tobytes() == other.group_params.tobytes()
            and _bit_equal(self.channel_scales, other.channel_scales)
        )


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Nibble packing
# ---------------------------------------------------------------------------


def pack_nibbles(indices) -> bytes:
    """Pack 4-bit indices two per byte, low nibble first.

    An odd-length input leaves the high nibble of the final byte zero.
    """
    idx = np.asarray(indices)
    if idx.size == 0:
        return b""
    if idx.ndim != 1:
        idx = idx.ravel()
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("indices must be integers")
    if idx.min() < 0 or idx.max() > 15:
        raise ValueError("nibble index out of range [0, 15]")
    idx = idx.astype(np.uint8)
    if idx.size % 2:
        idx = np.concatenate([idx, np.zeros(1, dtype=np.uint8)])
    return (idx[0::2] | (idx[1::2] << 4)).tobytes()


def unpack_nibbles(buf: bytes, n: int) -> np.ndarray:
    """Inverse of :func:`pack_nibbles`; returns ``n`` uint8 indices."""
    if len(buf) != (n + 1) // 2:
        raise ShapeMismatchError(f"{len(buf)} bytes cannot hold exactly {n} nibbles")
    raw = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(2 * raw.size, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:n]


def packed_length(n: int, bits: int) -> int:
    return n if bits == 8 else (n + 1) // 2


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    idx = np.asarray(indices).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise ValueError(f"index out of range for {bits}-bit levels")
    if bits == 8:
        return idx.astype(np.uint8).tobytes()
    return pack_nibbles(idx)


# ---------------------------------------------------------------------------
# DACQT: plain tensors
# ---------------------------------------------------------------------------


def tensor_to_bytes(data: np.ndarray) -> bytes:
    arr = np.asarray(data, dtype=np.float32)
    header = TENSOR_MAGIC + struct.pack("<BBB", FORMAT_VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    """Parse a ``DACQT`` buffer into a float32 array (any rank)."""
    if len(buf) < 8 or buf[:5] != TENSOR_MAGIC:
        raise FormatError("bad magic, not a DACQT tensor file")
    version, dtype, ndim = struct.unpack_from("<BBB", buf, 5)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = 8
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = math.prod(dims)
    if len(buf) - off != 4 * count:
        raise ShapeMismatchError(
            f"payload holds {(len(buf) - off) / 4:g} floats, shape {dims} needs {count}"
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


def save_tensor(t: WeightTensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t.data))


def load_tensor(path) -> WeightTensor:
    """Load a 2-D ``DACQT`` file; the tensor name is the file stem."""
    path = Path(path)
    arr = tensor_from_bytes(path.read_bytes())
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{path.name}: expected a 2-D tensor, got {arr.ndim}-D")
    return WeightTensor(path.stem, arr)


def save_calibration(cal: CalibrationSet, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(cal.data))


def load_calibration(path) -> CalibrationSet:
    path = Path(path)
    arr = tensor_from_bytes(path.read_bytes())
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{path.name}: calibration must be 2-D (tokens x cols)")
    return CalibrationSet(path.stem, arr)


# ---------------------------------------------------------------------------
# safetensors (read-only)
# ---------------------------------------------------------------------------

_ST_DTYPES = {"F32": "<f4", "F16": "<f2", "F64": "<f8", "BF16": "bf16"}


def iter_safetensors(path) -> Iterator[WeightTensor]:
    """Yield every 2-D float tensor of a safetensors file, converted to float32.

    Other ranks and integer dtypes are skipped.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError("truncated safetensors file")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if 8 + hlen > len(buf):
        raise FormatError("safetensors header length exceeds file size")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed safetensors header: {exc}") from exc
    base = 8 + hlen
    for name in sorted(header):
        if name == "__metadata__":
            continue
        info = header[name]
        dtype = _ST_DTYPES.get(info.get("dtype"))
        shape = info.get("shape", [])
        if dtype is None or len(shape) != 2:
            continue
        start, end = info["data_offsets"]
        raw = buf[base + start : base + end]
        count = math.prod(shape)
        width = 2 if dtype in ("<f2", "bf16") else int(dtype[-1])
        if len(raw) != count * width:
            raise ShapeMismatchError(f"{name}: data length does not match shape {shape}")
        if dtype == "bf16":
            bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
            arr = bits.view(np.float32)
        else:
            arr = np.frombuffer(raw, dtype=dtype).astype(np.float32)
        yield WeightTensor(name, arr.reshape(shape))


# ---------------------------------------------------------------------------
# DACQQ: quantized artifacts
# ---------------------------------------------------------------------------


def validate_quantized(qt: QuantizedTensor) -> None:
    """Check every field invariant, raising :class:`InvariantError`."""
    if qt.bits not in SUPPORTED_BITS:
        raise InvariantError(f"unsupported bit width {qt.bits}")
    if qt.rows < 0 or qt.cols < 0 or qt.group_size < 1:
        raise InvariantError("invalid shape or group size")
    gp = qt.group_params
    if gp.shape != (qt.n_groups,):
        raise InvariantError(f"expected {qt.n_groups} group records, got {gp.shape}")
    if qt.channel_scales.shape != (qt.cols,):
        raise InvariantError("channel scale vector length differs from cols")
    if not np.all(np.isfinite(qt.channel_scales)) or np.any(qt.channel_scales <= 0):
        raise InvariantError("channel scales must be finite and positive")
    for key in ("mu", "sigma", "w_min", "w_max", "gamma"):
        if not np.all(np.isfinite(gp[key])):
            raise InvariantError(f"non-finite group parameter {key}")
    if np.any(gp["sigma"] < 0):
        raise InvariantError("group sigma must be >= 0")
    if np.any(gp["w_min"] > gp["w_max"]):
        raise InvariantError("group w_min exceeds w_max")
    if np.any((gp["gamma"] < 0) | (gp["gamma"] > 1)):
        raise InvariantError("group gamma outside [0, 1]")
    if np.any(gp["kind"] > KIND_HYBRID):
        raise InvariantError("unknown grid kind")
    if np.any((gp["kind"] == KIND_UNIFORM) & (gp["gamma"] != 1)) or np.any(
        (gp["kind"] == KIND_LOGISTIC) & (gp["gamma"] != 0)
    ):
        raise InvariantError("grid kind inconsistent with gamma")
    n = qt.rows * qt.cols
    if len(qt.packed) != packed_length(n, qt.bits):
        raise InvariantError(
            f"packed buffer is {len(qt.packed)} bytes, expected {packed_length(n, qt.bits)}"
        )
    if qt.bits < 8 and n % 2 and qt.packed and qt.packed[-1] >> 4:
        raise InvariantError("padding nibble of the last byte is not zero")
    if n and qt.bits < 8 and int(qt.indices().max()) >= 1 << qt.bits:
        raise InvariantError(f"index exceeds {qt.bits}-bit range")


def quantized_to_bytes(qt: QuantizedTensor) -> bytes:
    validate_quantized(qt)
    name = qt.name.encode("utf-8")
    out = [
        QUANT_MAGIC,
        struct.pack("<BH", FORMAT_VERSION, len(name)),
        name,
        struct.pack("<QQIBQ", qt.rows, qt.cols, qt.group_size, qt.bits, qt.n_groups),
        qt.group_params.tobytes(),
        qt.channel_scales.astype("<f4").tobytes(),
        struct.pack("<Q", len(qt.packed)),
        qt.packed,
    ]
    return b"".join(out)


def quantized_from_bytes(buf: bytes) -> QuantizedTensor:
    if len(buf) < 8 or buf[:5] != QUANT_MAGIC:
        raise FormatError("bad magic, not a DACQQ artifact")
    try:
        version, name_len = struct.unpack_from("<BH", buf, 5)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        off = 8
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols, group_size, bits, n_groups = struct.unpack_from("<QQIBQ", buf, off)
        off += struct.calcsize("<QQIBQ")
        gp_bytes = n_groups * GROUP_DTYPE.itemsize
        if off + gp_bytes + 4 * cols + 8 > len(buf):
            raise FormatError("truncated artifact")
        gp = np.frombuffer(buf, dtype=GROUP_DTYPE, count=n_groups, offset=off).copy()
        off += gp_bytes
        scales = np.frombuffer(buf, dtype="<f4", count=cols, offset=off).astype(np.float32)
        off += 4 * cols
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed artifact header: {exc}") from exc
    if off + plen != len(buf):
        raise FormatError("packed payload length disagrees with file size")
    if group_size < 1:
        raise InvariantError("group size must be >= 1")
    qt = QuantizedTensor(name, rows, cols, group_size, bits, buf[off:], gp, scales)
    validate_quantized(qt)
    return qt


def save_quantized(qt: QuantizedTensor, path) -> None:
    Path(path).write_bytes(quantized_to_bytes(qt))


def load_quantized(path) -> QuantizedTensor:
    return quantized_from_bytes(Path(path).read_bytes())
