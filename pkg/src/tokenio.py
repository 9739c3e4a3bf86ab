"""Token tensor and fusion-state persistence, plus synthetic token generation"""

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union
import json
import struct

import numpy as np

from errors import FormatError, ParameterError, StateError, TokenWriteError
from rng import SplitMix64


MAGIC = b"MAMT"
FORMAT_VERSION = 1
STATE_VERSION = 1

# magic, u16 version, u8 dtype code, u8 reserved, u32 B, L, d, l_spec
HEADER = struct.Struct("<4sHBBIIII")

DTYPE_CODES = {"f32": 0, "f64": 1}
NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dtype_name(array: np.ndarray) -> str:
    return "f32" if array.dtype == np.float32 else "f64"


class TokenMatrix:
    """Batched token tensor (B x L x d) with a count of leading special tokens"""

    def __init__(self, data: np.ndarray, l_spec: int = 0):
        data = np.asarray(data)
        if data.ndim != 3:
            raise ParameterError(f"token data must be 3-D (B, L, d), got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        batch, length, dim = data.shape
        if batch < 1 or length < 1 or dim < 1:
            raise ParameterError(f"empty token tensor {data.shape}")
        if not 0 <= l_spec < length:
            raise ParameterError(f"l_spec must satisfy 0 <= l_spec < L={length}, got {l_spec}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("token data contains NaN or Inf")
        self.data = data
        self.l_spec = int(l_spec)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> str:
        return dtype_name(self.data)

    def equals(self, other: "TokenMatrix") -> bool:
        """Field-by-field equality (bitwise on values)"""
        return (
            self.l_spec == other.l_spec
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"TokenMatrix(B={self.batch}, L={self.length}, d={self.dim}, l_spec={self.l_spec}, {self.dtype})"


def write_tokens(t: TokenMatrix, path: str, dtype: Optional[str] = None) -> None:
    """
    Write a token tensor in the .mamt format

    Args:
        t: tokens to store
        path: destination file
        dtype: "f32" or "f64"; defaults to the tensor's own precision
    """
    dtype = dtype or t.dtype
    if dtype not in DTYPE_CODES:
        raise ParameterError(f"Unknown dtype: {dtype}. Use 'f32' or 'f64'")

    header = HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_CODES[dtype], 0,
                         t.batch, t.length, t.dim, t.l_spec)
    with np.errstate(over="ignore"):
        stored = np.ascontiguousarray(t.data, dtype=NUMPY_DTYPES[dtype])
    if not np.isfinite(stored).all():
        raise ParameterError(f"{path}: values overflow {dtype} (largest magnitude {np.abs(t.data).max():g})")
    payload = stored.tobytes(order="C")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise TokenWriteError(path, e) from e


def read_tokens(path: str) -> TokenMatrix:
    """Read a .mamt file, validating header, payload length and finiteness"""
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {HEADER.size} bytes", len(raw), path)

    magic, version, code, reserved, batch, length, dim, l_spec = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    names = {v: k for k, v in DTYPE_CODES.items()}
    if code not in names:
        raise FormatError(f"unknown dtype code {code}", 6, path)
    if reserved != 0:
        raise FormatError(f"reserved byte is {reserved}, expected 0", 7, path)
    if batch < 1 or length < 1 or dim < 1:
        raise FormatError(f"empty shape B={batch} L={length} d={dim}", 8, path)
    if l_spec >= length:
        raise FormatError(f"l_spec={l_spec} not below L={length}", 20, path)

    np_dtype = NUMPY_DTYPES[names[code]]
    count = batch * length * dim
    expected = count * np_dtype.itemsize
    available = len(raw) - HEADER.size
    if available < expected:
        raise FormatError(
            f"truncated payload: {available} of {expected} bytes", HEADER.size + available, path
        )
    if available > expected:
        raise FormatError(
            f"{available - expected} trailing bytes after payload", HEADER.size + expected, path
        )

    values = np.frombuffer(raw, dtype=np_dtype, count=count, offset=HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        offset = HEADER.size + int(bad[0]) * np_dtype.itemsize
        raise FormatError(f"non-finite value {values[bad[0]]}", offset, path)

    data = values.astype(np_dtype.newbyteorder("="), copy=True).reshape(batch, length, dim)
    return TokenMatrix(data, l_spec)


@dataclass
class FusionStateFile:
    """Serialized fusion state: partition, final mask and sparse W^F"""

    M: int
    N: int
    l_spec: int
    dst_index: List[int]
    src_index: List[int]
    preserved_mask: List[int]
    weights: List[Tuple[int, int, int, float]]
    layout_order: List[int]
    batch: int = 1
    dtype: str = "f64"
    style: str = "alternating"
    version: int = STATE_VERSION

    @property
    def length(self) -> int:
        return self.l_spec + self.M + self.N

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "batch": self.batch,
            "length": self.length,
            "dtype": self.dtype,
            "style": self.style,
            "M": self.M,
            "N": self.N,
            "l_spec": self.l_spec,
            "dst_index": list(self.dst_index),
            "src_index": list(self.src_index),
            "preserved_mask": list(self.preserved_mask),
            "weights": [[b, i, j, v] for b, i, j, v in sorted(self.weights)],
            "layout_order": list(self.layout_order),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionStateFile":
        try:
            state = cls(
                M=int(data["M"]),
                N=int(data["N"]),
                l_spec=int(data["l_spec"]),
                dst_index=[int(x) for x in data["dst_index"]],
                src_index=[int(x) for x in data["src_index"]],
                preserved_mask=[int(x) for x in data["preserved_mask"]],
                weights=[(int(b), int(i), int(j), float(v)) for b, i, j, v in data["weights"]],
                layout_order=[int(x) for x in data["layout_order"]],
                batch=int(data.get("batch", 1)),
                dtype=str(data.get("dtype", "f64")),
                style=str(data.get("style", "alternating")),
                version=int(data["version"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise StateError("schema", f"missing or malformed field: {e}") from e
        if "length" in data and int(data["length"]) != state.length:
            raise StateError("counts", f"length {data['length']} != l_spec + M + N = {state.length}")
        return state

    def validate(self) -> None:
        """Raise StateError naming the first violated rule"""
        if self.version != STATE_VERSION:
            raise StateError("version", f"unsupported version {self.version}")
        if self.dtype not in DTYPE_CODES:
            raise StateError("dtype", f"unknown dtype {self.dtype!r}")
        if self.batch < 1:
            raise StateError("counts", f"batch must be >= 1, got {self.batch}")
        if len(self.dst_index) != self.M or len(self.src_index) != self.N:
            raise StateError("counts", "M/N disagree with index list lengths")

        length = self.length
        specials = list(range(self.l_spec))
        union = specials + list(self.dst_index) + list(self.src_index)
        if sorted(union) != list(range(length)):
            raise StateError("partition_cover", "specials, dst_index and src_index must partition 0..L-1")

        if len(self.preserved_mask) != self.N or any(m not in (0, 1) for m in self.preserved_mask):
            raise StateError("preserved_mask", "must hold N flags in {0, 1}")

        previous = None
        for b, i, j, value in self.weights:
            if not (0 <= b < self.batch and 0 <= i < self.M and 0 <= j < self.N):
                raise StateError("triplet_range", f"({b}, {i}, {j}) outside B={self.batch}, M={self.M}, N={self.N}")
            if not (np.isfinite(value) and value > 0):
                raise StateError("triplet_value", f"({b}, {i}, {j}) has value {value}")
            if self.preserved_mask[j]:
                raise StateError("preserved_column", f"triplet ({b}, {i}, {j}) references preserved source {j}")
            if previous is not None and (b, i, j) <= previous:
                raise StateError("triplet_order", f"({b}, {i}, {j}) not strictly after {previous}")
            previous = (b, i, j)

        if sorted(self.layout_order) != list(range(length)):
            raise StateError("layout_order", "must be a permutation of 0..L-1")
        kept = [s for s, m in zip(self.src_index, self.preserved_mask) if m]
        merged = [s for s, m in zip(self.src_index, self.preserved_mask) if not m]
        if list(self.layout_order) != specials + list(self.dst_index) + kept + merged:
            raise StateError("layout_order", "does not match [specials, dst, preserved src, merged src]")

    def equals(self, other: "FusionStateFile") -> bool:
        return self.to_dict() == other.to_dict()


def write_fusion_state(s: FusionStateFile, path: str) -> None:
    """Save a fusion state as JSON with triplets sorted by (b, i, j)"""
    try:
        with open(path, "w") as f:
            json.dump(s.to_dict(), f, indent=2)
    except OSError as e:
        raise TokenWriteError(path, e) from e


def read_fusion_state(path: str) -> FusionStateFile:
    """Load and validate a fusion state JSON document"""
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise StateError("schema", f"{path} is not valid JSON: {e}") from e

    state = FusionStateFile.from_dict(data)
    state.validate()
    return state


@dataclass(frozen=True)
class Pattern:
    """Synthetic token pattern: gaussian, or clustered(k, noise_scale)"""

    kind: str = "gaussian"
    k: int = 1
    noise_scale: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Pattern":
        """Parse 'gaussian' or 'clustered:K:NOISE'"""
        parts = text.split(":")
        if parts == ["gaussian"]:
            return cls("gaussian")
        if parts[0] == "clustered" and len(parts) == 3:
            try:
                return cls("clustered", int(parts[1]), float(parts[2]))
            except ValueError as e:
                raise ParameterError(f"bad clustered pattern {text!r}: {e}") from e
        raise ParameterError(f"Unknown pattern: {text!r}. Use 'gaussian' or 'clustered:K:NOISE'")


def gen_synthetic(
    B: int,
    L: int,
    d: int,
    l_spec: int = 0,
    seed: int = 0,
    pattern: Union[str, Pattern] = "gaussian",
    dtype: str = "f64",
) -> TokenMatrix:
    """
    Deterministic synthetic tokens

    Args:
        B, L, d: tensor shape
        l_spec: number of leading special tokens
        seed: splitmix64 seed
        pattern: "gaussian" (i.i.d. standard normals) or clustered(k, noise):
            k random unit centers, non-special token with ordinal o gets
            center o % k plus noise_scale * N(0, 1)
        dtype: "f32" or "f64"

    Returns:
        TokenMatrix of shape (B, L, d)
    """
    if isinstance(pattern, str):
        pattern = Pattern.parse(pattern)
    if B < 1 or L < 1 or d < 1:
        raise ParameterError(f"B, L, d must be >= 1, got {B}, {L}, {d}")
    if not 0 <= l_spec < L:
        raise ParameterError(f"l_spec must satisfy 0 <= l_spec < L={L}, got {l_spec}")
    if dtype not in NUMPY_DTYPES:
        raise ParameterError(f"Unknown dtype: {dtype}. Use 'f32' or 'f64'")

    stream = SplitMix64(seed)
    if pattern.kind == "gaussian":
        data = stream.normal(B * L * d).reshape(B, L, d)
    elif pattern.kind == "clustered":
        if not 1 <= pattern.k <= L:
            raise ParameterError(f"clustered pattern needs 1 <= k <= L={L}, got k={pattern.k}")
        if pattern.noise_scale < 0:
            raise ParameterError(f"noise_scale must be >= 0, got {pattern.noise_scale}")
        centers = stream.normal(pattern.k * d).reshape(pattern.k, d)
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        data = stream.normal(B * L * d).reshape(B, L, d)
        ordinals = np.arange(L - l_spec)
        data[:, l_spec:, :] = centers[ordinals % pattern.k][None] + pattern.noise_scale * data[:, l_spec:, :]
    else:
        raise ParameterError(f"Unknown pattern kind: {pattern.kind}")

    return TokenMatrix(data.astype(NUMPY_DTYPES[dtype].newbyteorder("=")), l_spec)
