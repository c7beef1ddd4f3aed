"""Tensor container, NPY v1.0 file I/O, batch manifests and the synthetic batch generator.

Tensors are plain ``numpy.ndarray`` objects in float64, C-contiguous.  The NPY
reader/writer is implemented directly on the byte layout so every failure mode
maps onto a specific exception class.
"""

from __future__ import annotations

import ast
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BatchIOError,
    ConfigError,
    ConsistencyError,
    DataError,
    FormatError,
    UnsupportedError,
)

NPY_MAGIC = b"\x93NUMPY"
MANIFEST_SCHEMA = "dualprune.manifest/1"

_READABLE_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


# ---------------------------------------------------------------------------
# NPY v1.0
# ---------------------------------------------------------------------------


def _parse_header(raw: bytes, path: Path) -> tuple[str, bool, tuple[int, ...]]:
    try:
        header = ast.literal_eval(raw.decode("latin1"))
    except (SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: unparseable NPY header ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: NPY header must have exactly descr/fortran_order/shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(fortran, bool):
        raise FormatError(f"{path}: fortran_order must be a bool")
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"{path}: shape must be a tuple of non-negative ints, got {shape!r}")
    if not isinstance(descr, str):
        raise UnsupportedError(f"{path}: structured dtypes are not supported")
    return descr, fortran, shape


def read_npy(path: str | Path) -> np.ndarray:
    """Read a little-endian f4/f8 C-order NPY v1.0 file into a float64 array.

    Raises
    ------
    FormatError
        Bad magic, version, header, or payload length.
    UnsupportedError
        Fortran order or a dtype other than ``<f4``/``<f8``.
    DataError
        The payload contains NaN or Inf.
    BatchIOError
        The file cannot be opened.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise BatchIOError(f"{path}: {exc.strerror or exc}") from exc

    if len(blob) < 10 or blob[:6] != NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    major, minor = blob[6], blob[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"{path}: only NPY version 1.0 is read, got {major}.{minor}")
    (header_len,) = struct.unpack("<H", blob[8:10])
    start = 10 + header_len
    if len(blob) < start:
        raise FormatError(f"{path}: truncated NPY header")
    descr, fortran, shape = _parse_header(blob[10:start], path)

    if fortran:
        raise UnsupportedError(f"{path}: Fortran-order arrays are not supported")
    if descr not in _READABLE_DTYPES:
        raise UnsupportedError(f"{path}: unsupported dtype {descr!r} (want <f4 or <f8)")
    dtype = _READABLE_DTYPES[descr]

    count = math.prod(shape)
    payload = blob[start:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, shape {shape} needs {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: array contains NaN or Inf")
    return arr


def _header_bytes(shape: tuple[int, ...]) -> bytes:
    if len(shape) == 1:
        shape_repr = f"({shape[0]},)"
    else:
        shape_repr = "(" + ", ".join(str(s) for s in shape) + ")"
    text = f"{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64
    pad = (-(10 + len(text) + 1)) % 64
    return (text + " " * pad + "\n").encode("latin1")


def write_npy(path: str | Path, t: np.ndarray) -> None:
    """Write ``t`` as a little-endian float64 C-order NPY v1.0 file."""
    path = Path(path)
    arr = np.asarray(t, dtype="<f8", order="C")
    header = _header_bytes(tuple(int(s) for s in arr.shape))
    try:
        with open(path, "wb") as fh:
            fh.write(NPY_MAGIC + b"\x01\x00")
            fh.write(struct.pack("<H", len(header)))
            fh.write(header)
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise BatchIOError(f"{path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# TokenBatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """One layer's token sequence, split per head.

    Image tokens occupy indices ``[0, n_img)`` and text tokens ``[n_img, n_img + n_text)``.
    Queries and keys are pre-RoPE projections; ``rotary=False`` marks a batch whose
    model has no rotary embedding, so RoPE settings are no-ops for it.
    ``diagnostics`` carries side-channel data such as the generator's ground-truth
    cluster labels; it never affects scoring.
    """

    queries: np.ndarray  # [H, N, d]
    keys: np.ndarray  # [H, N, d]
    values: np.ndarray  # [H, N, d_v]
    n_img: int
    n_text: int
    positions: np.ndarray  # [N] int64
    layer: int = 0
    hidden: np.ndarray | None = None  # [N, d_model]
    rotary: bool = True  # the source model applies RoPE to these q/k before attention
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        q, k, v = self.queries, self.keys, self.values
        for name, t in (("queries", q), ("keys", k), ("values", v)):
            if t.ndim != 3:
                raise ConsistencyError(f"{name} must be [H, N, dim], got shape {t.shape}")
        if q.shape != k.shape:
            raise ConsistencyError(f"queries {q.shape} and keys {k.shape} must match")
        if v.shape[:2] != k.shape[:2]:
            raise ConsistencyError(f"values {v.shape} disagree with keys {k.shape} on [H, N]")
        n = k.shape[1]
        if self.n_img < 1 or self.n_text < 1:
            raise ConsistencyError(f"need n_img >= 1 and n_text >= 1, got {self.n_img}, {self.n_text}")
        if self.n_img + self.n_text != n:
            raise ConsistencyError(f"n_img + n_text = {self.n_img + self.n_text} but N = {n}")
        pos = np.asarray(self.positions)
        if pos.shape != (n,):
            raise ConsistencyError(f"positions must have length {n}, got shape {pos.shape}")
        if np.any(pos < 0) or np.any(np.diff(pos) <= 0):
            raise ConsistencyError("positions must be non-negative and strictly increasing")
        if self.hidden is not None and (self.hidden.ndim != 2 or self.hidden.shape[0] != n):
            raise ConsistencyError(f"hidden must be [N={n}, d_model], got {self.hidden.shape}")
        for name, t in (("queries", q), ("keys", k), ("values", v), ("hidden", self.hidden)):
            if t is not None and not np.all(np.isfinite(t)):
                raise DataError(f"{name} contains NaN or Inf")

    @property
    def n_heads(self) -> int:
        return self.keys.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]

    @property
    def value_dim(self) -> int:
        return self.values.shape[2]

    @property
    def modality(self) -> list[str]:
        return ["image"] * self.n_img + ["text"] * self.n_text

    @property
    def image_slice(self) -> slice:
        return slice(0, self.n_img)

    @property
    def text_slice(self) -> slice:
        return slice(self.n_img, self.n_img + self.n_text)


# ---------------------------------------------------------------------------
# Synthetic batches with planted redundancy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    H: int = 2
    N_img: int = 64
    N_text: int = 8
    d: int = 16
    d_v: int = 16
    cluster_count: int = 4
    cluster_noise: float = 0.05
    key_norm_cap: float | None = None  # None -> sqrt(2 d)
    value_amplitude_spread: float = 0.2  # sigma of the lognormal per-token value amplitude
    seed: int = 0
    layer: int = 4

    def __post_init__(self) -> None:
        for name in ("H", "N_img", "N_text", "d", "d_v", "cluster_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.cluster_count > self.N_img:
            raise ConfigError(
                f"cluster_count ({self.cluster_count}) cannot exceed N_img ({self.N_img})"
            )
        if self.cluster_noise < 0:
            raise ConfigError(f"cluster_noise must be >= 0, got {self.cluster_noise}")
        if self.value_amplitude_spread < 0:
            raise ConfigError(f"value_amplitude_spread must be >= 0, got {self.value_amplitude_spread}")
        if self.key_norm_cap is not None and not self.key_norm_cap > 0:
            raise ConfigError(f"key_norm_cap must be positive, got {self.key_norm_cap}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def cap(self) -> float:
        return self.key_norm_cap if self.key_norm_cap is not None else math.sqrt(2 * self.d)


def _cap_rows(mat: np.ndarray, cap: float) -> np.ndarray:
    norms = np.sqrt(np.sum(mat * mat, axis=-1, keepdims=True))
    scale = np.where(norms > cap, cap / np.where(norms > 0, norms, 1.0), 1.0)
    return mat * scale


def _to_radius(mat: np.ndarray, radius: float) -> np.ndarray:
    return mat * (radius / np.sqrt(np.sum(mat * mat, axis=-1, keepdims=True)))


def generate_synthetic_batch(spec: SynthSpec) -> TokenBatch:
    """Draw a batch whose image tokens form ``cluster_count`` near-duplicate groups.

    Each image token copies its cluster's per-head key/value/query centroid and
    adds isotropic Gaussian noise of standard deviation ``cluster_noise``.  Key
    centroids sit on the ``key_norm_cap`` sphere and value centroids on the
    ``sqrt(d_v)`` sphere, so every cluster carries comparable dual-weight mass.
    Image values are then scaled by a per-token lognormal amplitude
    (``value_amplitude_spread``), which leaves value directions, and hence
    duplication, untouched.  Text tokens are independent standard normals.
    Keys beyond the cap are shrunk back onto it.

    The synthetic model has no rotary embedding (``rotary=False``); ground-truth
    cluster labels land in ``batch.diagnostics["clusters"]``.
    """
    rng = np.random.default_rng(spec.seed)
    H, n_img, n_text, d, d_v, c = spec.H, spec.N_img, spec.N_text, spec.d, spec.d_v, spec.cluster_count

    labels = rng.permutation(np.arange(n_img) % c)
    key_centroids = _to_radius(rng.standard_normal((H, c, d)), spec.cap)
    value_centroids = _to_radius(rng.standard_normal((H, c, d_v)), math.sqrt(d_v))
    query_centroids = rng.standard_normal((H, c, d))
    amplitude = np.exp(spec.value_amplitude_spread * rng.standard_normal(n_img))

    noise = spec.cluster_noise
    img_k = key_centroids[:, labels] + noise * rng.standard_normal((H, n_img, d))
    img_v = value_centroids[:, labels] + noise * rng.standard_normal((H, n_img, d_v))
    img_v = amplitude[None, :, None] * img_v
    img_q = query_centroids[:, labels] + noise * rng.standard_normal((H, n_img, d))

    txt_k = rng.standard_normal((H, n_text, d))
    txt_v = rng.standard_normal((H, n_text, d_v))
    txt_q = rng.standard_normal((H, n_text, d))

    keys = _cap_rows(np.concatenate([img_k, txt_k], axis=1), spec.cap)
    values = np.concatenate([img_v, txt_v], axis=1)
    queries = np.concatenate([img_q, txt_q], axis=1)
    hidden = np.ascontiguousarray(values.transpose(1, 0, 2).reshape(n_img + n_text, H * d_v))

    return TokenBatch(
        queries=queries,
        keys=keys,
        values=values,
        n_img=n_img,
        n_text=n_text,
        positions=np.arange(n_img + n_text, dtype=np.int64),
        layer=spec.layer,
        hidden=hidden,
        rotary=False,
        diagnostics={"clusters": labels.astype(np.int64)},
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_TENSOR_FIELDS = ("queries", "keys", "values", "hidden", "positions", "clusters")


def save_batch(batch: TokenBatch, out_dir: str | Path) -> Path:
    """Write every tensor of ``batch`` as NPY plus a ``manifest.json``; return the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BatchIOError(f"{out_dir}: {exc.strerror or exc}") from exc

    manifest: dict[str, Any] = {
        "schema": MANIFEST_SCHEMA,
        "n_img": batch.n_img,
        "n_text": batch.n_text,
        "layer": batch.layer,
        "rotary": batch.rotary,
    }
    tensors = {
        "queries": batch.queries,
        "keys": batch.keys,
        "values": batch.values,
        "hidden": batch.hidden,
        "positions": np.asarray(batch.positions, dtype=np.float64),
        "clusters": batch.diagnostics.get("clusters"),
    }
    for name, arr in tensors.items():
        if arr is None:
            continue
        fname = f"{name}.npy"
        write_npy(out_dir / fname, np.asarray(arr, dtype=np.float64))
        manifest[name] = fname

    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise BatchIOError(f"{path}: {exc.strerror or exc}") from exc
    return path


def _as_index_array(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim != 1 or np.any(arr != np.round(arr)):
        raise FormatError(f"{name} must be a 1-D array of integers")
    return arr.astype(np.int64)


def load_batch(manifest_path: str | Path) -> TokenBatch:
    """Assemble a :class:`TokenBatch` from a JSON manifest of NPY files.

    Relative tensor paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise BatchIOError(f"{manifest_path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    schema = manifest.get("schema", MANIFEST_SCHEMA)
    if schema != MANIFEST_SCHEMA:
        raise UnsupportedError(f"{manifest_path}: unknown manifest schema {schema!r}")
    for key in ("queries", "keys", "values", "n_img", "n_text"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing required field {key!r}")

    base = manifest_path.parent
    loaded: dict[str, np.ndarray] = {}
    for name in _TENSOR_FIELDS:
        rel = manifest.get(name)
        if rel is not None:
            loaded[name] = read_npy(base / rel)

    n_img, n_text = int(manifest["n_img"]), int(manifest["n_text"])
    n = loaded["keys"].shape[1] if loaded["keys"].ndim == 3 else -1
    if "positions" in loaded:
        positions = _as_index_array(loaded["positions"], "positions")
    else:
        positions = np.arange(max(n, 0), dtype=np.int64)
    diagnostics = {}
    if "clusters" in loaded:
        diagnostics["clusters"] = _as_index_array(loaded["clusters"], "clusters")
        if diagnostics["clusters"].shape != (n_img,):
            raise ConsistencyError(f"clusters must have length n_img={n_img}")

    return TokenBatch(
        queries=loaded["queries"],
        keys=loaded["keys"],
        values=loaded["values"],
        n_img=n_img,
        n_text=n_text,
        positions=positions,
        layer=int(manifest.get("layer", 0)),
        hidden=loaded.get("hidden"),
        rotary=bool(manifest.get("rotary", True)),
        diagnostics=diagnostics,
    )
