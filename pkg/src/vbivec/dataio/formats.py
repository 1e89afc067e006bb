"""Binary and text file formats: features, posteriors, models and i-vectors.

Every binary format is little-endian regardless of host. ``dump_*``/``load_*``
work on open file objects; ``write_*``/``read_*`` wrap them for paths.
Readers reject malformed input instead of repairing it.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, TextIO

import numpy as np

from vbivec.errors import (
    BadMagicError,
    DimensionMismatchError,
    FormatError,
    NonFiniteValueError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from vbivec.state import CalibrationParams, CovarianceMode, ModelParams, RawPosteriors, Recipe, SegmentFeatures

FORMAT_VERSION = 1

FEATURE_MAGIC = b"IVFE"
POSTERIOR_MAGIC = b"IVPO"
IVECTOR_MAGIC = b"IVIV"

# magic, version, D (or N), T_s
_HEADER = struct.Struct("<4sIIQ")
# magic, version, M, count, has-covariance flag
_IVECTOR_HEADER = struct.Struct("<4sIIQI")
_U32 = struct.Struct("<I")
_PAIR = np.dtype([("index", "<u4"), ("prob", "<f4")])

POSTERIOR_SUM_TOL = 1e-3
# largest dense T x N matrix a posterior file may expand to
MAX_DENSE_ENTRIES = 1 << 28

MODEL_META = "meta.json"
MODEL_BLOB = "params.bin"
MODEL_FORMAT = "vbivec-model"


def _read_header(data: bytes, magic: bytes, what: str) -> tuple[int, int]:
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"not a {what} file: expected magic {magic!r}, found {data[:4]!r}", offset=0, field="magic")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{what} header needs {_HEADER.size} bytes, file has {len(data)}", offset=len(data), field="header")
    _, version, width, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{what} version {version} is not supported (expected {FORMAT_VERSION})", offset=4, field="version")
    return width, count


# ── FEAT-v1 ──


def dump_features(seg: SegmentFeatures, fh: BinaryIO) -> None:
    frames = np.ascontiguousarray(seg.frames, dtype="<f4")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteValueError(f"segment {seg.segment_id}: frames overflow float32", field="payload")
    t, d = frames.shape
    fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, d, t))
    fh.write(frames.tobytes())


def load_features(fh: BinaryIO, segment_id: str = "") -> SegmentFeatures:
    """Read one FEAT-v1 matrix; frames come back as float32."""
    data = fh.read()
    dim, num_frames = _read_header(data, FEATURE_MAGIC, "feature")
    if dim < 1 or num_frames < 1:
        raise FormatError(f"feature file declares an empty {num_frames} x {dim} matrix", offset=8, field="dims")
    expected = _HEADER.size + 4 * dim * num_frames
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"feature payload needs {expected - _HEADER.size} bytes, file has {len(data) - _HEADER.size}",
            offset=len(data),
            field="payload",
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after the feature payload", offset=expected, field="payload")
    frames = np.frombuffer(data, dtype="<f4", count=dim * num_frames, offset=_HEADER.size).reshape(num_frames, dim)
    bad = np.flatnonzero(~np.isfinite(frames))
    if bad.size:
        raise NonFiniteValueError(
            f"non-finite feature value at frame {bad[0] // dim}", offset=_HEADER.size + 4 * int(bad[0]), field="payload"
        )
    return SegmentFeatures(frames.astype(np.float32), segment_id)


def write_features(path: Path, seg: SegmentFeatures) -> None:
    with open(path, "wb") as f:
        dump_features(seg, f)


def read_features(path: Path, segment_id: str | None = None) -> SegmentFeatures:
    with open(path, "rb") as f:
        return load_features(f, segment_id if segment_id is not None else Path(path).stem)


# ── POST-v1 ──


def dump_posteriors(probs: np.ndarray, fh: BinaryIO) -> None:
    """Write a dense T x N probability matrix, keeping only its non-zero entries per frame."""
    probs = np.asarray(probs, dtype="<f4")
    if probs.ndim != 2 or probs.shape[1] < 1:
        raise DimensionMismatchError(f"posteriors must be a T x N matrix, got {probs.shape}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
        raise NonFiniteValueError("posteriors must be finite and non-negative", field="prob")
    dev = np.abs(probs.astype(np.float64).sum(axis=1) - 1.0)
    if dev.size and dev.max() > POSTERIOR_SUM_TOL:
        raise FormatError(f"frame {int(dev.argmax())} posteriors sum to {1.0 + dev.max():.6g}", field="prob")
    t, n = probs.shape
    out = io.BytesIO()
    out.write(_HEADER.pack(POSTERIOR_MAGIC, FORMAT_VERSION, n, t))
    for row in probs:
        nz = np.flatnonzero(row)
        pairs = np.empty(nz.size, dtype=_PAIR)
        pairs["index"] = nz
        pairs["prob"] = row[nz]
        out.write(_U32.pack(nz.size))
        out.write(pairs.tobytes())
    fh.write(out.getvalue())


def load_posterior_probs(fh: BinaryIO) -> np.ndarray:
    """Read a POST-v1 file into a dense float32 T x N matrix (unlisted entries are zero)."""
    data = fh.read()
    n, num_frames = _read_header(data, POSTERIOR_MAGIC, "posterior")
    if n < 1:
        raise FormatError("posterior file declares N=0", offset=8, field="N")
    if n * num_frames > MAX_DENSE_ENTRIES:
        raise FormatError(f"posterior file declares {num_frames} x {n} entries, more than {MAX_DENSE_ENTRIES}", offset=8, field="N")
    pos = _HEADER.size
    if num_frames > (len(data) - pos) // _U32.size:
        raise TruncatedPayloadError(f"posterior file declares {num_frames} frames but has {len(data) - pos} payload bytes", offset=len(data), field="K")
    probs = np.zeros((num_frames, n), dtype=np.float32)
    for t in range(num_frames):
        if pos + _U32.size > len(data):
            raise TruncatedPayloadError(f"frame {t}: missing entry count", offset=pos, field="K")
        (k,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        if k > n:
            raise FormatError(f"frame {t}: {k} entries exceed N={n}", offset=pos - _U32.size, field="K")
        end = pos + k * _PAIR.itemsize
        if end > len(data):
            raise TruncatedPayloadError(f"frame {t}: {k} entries run past end of file", offset=len(data), field="pairs")
        pairs = np.frombuffer(data, dtype=_PAIR, count=k, offset=pos)
        idx = pairs["index"]
        if k and idx.max() >= n:
            j = int(np.argmax(idx >= n))
            raise FormatError(f"frame {t}: component index {int(idx[j])} >= N={n}", offset=pos + j * _PAIR.itemsize, field="index")
        if np.unique(idx).size != k:
            raise FormatError(f"frame {t}: duplicate component index", offset=pos, field="index")
        p = pairs["prob"]
        if not np.all(np.isfinite(p)):
            j = int(np.argmax(~np.isfinite(p)))
            raise NonFiniteValueError(f"frame {t}: non-finite probability", offset=pos + j * _PAIR.itemsize + 4, field="prob")
        if np.any(p < 0.0):
            raise FormatError(f"frame {t}: negative probability", offset=pos, field="prob")
        total = float(p.astype(np.float64).sum())
        if abs(total - 1.0) > POSTERIOR_SUM_TOL:
            raise FormatError(f"frame {t}: probabilities sum to {total:.6g}", offset=pos, field="prob")
        probs[t, idx] = p
        pos = end
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the posterior payload", offset=pos, field="payload")
    return probs


def load_posteriors(fh: BinaryIO, segment_id: str = "", floor: float = 1e-10) -> RawPosteriors:
    return RawPosteriors.from_probs(load_posterior_probs(fh), segment_id, floor=floor, tol=POSTERIOR_SUM_TOL)


def write_posteriors(path: Path, probs: np.ndarray) -> None:
    with open(path, "wb") as f:
        dump_posteriors(probs, f)


def read_posteriors(path: Path, segment_id: str | None = None, floor: float = 1e-10) -> RawPosteriors:
    with open(path, "rb") as f:
        return load_posteriors(f, segment_id if segment_id is not None else Path(path).stem, floor)


# ── model directory ──


@dataclass(frozen=True)
class StoredModel:
    params: ModelParams
    calibration: CalibrationParams | None = None
    recipe: Recipe | None = None


def _model_arrays(params: ModelParams, calibration: CalibrationParams | None) -> list[tuple[str, np.ndarray]]:
    arrays = [
        ("weights", params.weights),
        ("means", params.means),
        ("covariances", params.covariances),
        ("loadings", params.loadings),
    ]
    if calibration is not None:
        arrays.append(("alpha", np.atleast_1d(np.asarray(calibration.alpha, dtype=np.float64))))
        arrays.append(("beta", calibration.beta))
    return arrays


def encode_model(
    params: ModelParams,
    calibration: CalibrationParams | None = None,
    recipe: Recipe | None = None,
) -> tuple[dict[str, Any], bytes]:
    """Metadata document and float64 LE blob (w, μ, C, T, α, β) for one model."""
    if calibration is not None and calibration.num_components != params.dims.N:
        raise DimensionMismatchError(f"calibration has N={calibration.num_components}, model has N={params.dims.N}")
    offsets: dict[str, dict[str, Any]] = {}
    blob = io.BytesIO()
    for name, arr in _model_arrays(params, calibration):
        data = np.ascontiguousarray(arr, dtype="<f8")
        offsets[name] = {"offset": blob.tell(), "shape": list(data.shape)}
        blob.write(data.tobytes())
    meta = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "N": params.dims.N,
        "D": params.dims.D,
        "M": params.dims.M,
        "covariance_mode": params.mode.value,
        "recipe": recipe.value if recipe is not None else None,
        "calibration": calibration is not None,
        "alpha_mode": None if calibration is None else ("diagonal" if calibration.is_diagonal else "scalar"),
        "byte_order": "little",
        "dtype": "float64",
        "arrays": offsets,
        "blob_bytes": blob.tell(),
    }
    return meta, blob.getvalue()


def _expected_shapes(meta: dict[str, Any]) -> list[tuple[str, tuple[int, ...]]]:
    n, d, m = int(meta["N"]), int(meta["D"]), int(meta["M"])
    mode = CovarianceMode(meta["covariance_mode"])
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("weights", (n,)),
        ("means", (n, d)),
        ("covariances", (n, d) if mode is CovarianceMode.DIAGONAL else (n, d, d)),
        ("loadings", (n, d, m)),
    ]
    if meta["calibration"]:
        shapes.append(("alpha", (n,) if meta["alpha_mode"] == "diagonal" else (1,)))
        shapes.append(("beta", (n,)))
    return shapes


def decode_model(meta: Any, blob: bytes) -> StoredModel:
    if not isinstance(meta, dict) or meta.get("format") != MODEL_FORMAT:
        raise BadMagicError(f"not a {MODEL_FORMAT} document", field="format")
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"model version {meta.get('version')} is not supported (expected {FORMAT_VERSION})", field="version")
    try:
        shapes = _expected_shapes(meta)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"incomplete model metadata: {e}", field=MODEL_META) from e

    expected = 8 * sum(int(np.prod(shape)) for _, shape in shapes)
    if len(blob) != expected:
        raise DimensionMismatchError(
            f"model blob has {len(blob)} bytes but N={meta['N']}, D={meta['D']}, M={meta['M']} need {expected}"
        )
    arrays: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arrays[name])):
            raise NonFiniteValueError(f"model array {name} holds non-finite values", offset=pos, field=name)
        pos += 8 * count

    params = ModelParams(arrays["weights"], arrays["means"], arrays["covariances"], arrays["loadings"])
    calibration = None
    if meta["calibration"]:
        alpha = arrays["alpha"] if meta["alpha_mode"] == "diagonal" else float(arrays["alpha"][0])
        calibration = CalibrationParams(alpha, arrays["beta"])
    recipe = Recipe(meta["recipe"]) if meta.get("recipe") else None
    return StoredModel(params, calibration, recipe)


def write_model(
    directory: Path,
    params: ModelParams,
    calibration: CalibrationParams | None = None,
    recipe: Recipe | None = None,
) -> None:
    """Write ``meta.json`` and ``params.bin`` into ``directory``."""
    meta, blob = encode_model(params, calibration, recipe)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MODEL_BLOB).write_bytes(blob)
    (directory / MODEL_META).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_model(directory: Path) -> StoredModel:
    directory = Path(directory)
    meta_path, blob_path = directory / MODEL_META, directory / MODEL_BLOB
    if not meta_path.is_file() or not blob_path.is_file():
        raise FormatError(f"{directory} is not a model directory (needs {MODEL_META} and {MODEL_BLOB})")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable model metadata: {e}", field=MODEL_META) from e
    return decode_model(meta, blob_path.read_bytes())


# ── i-vectors ──


@dataclass(frozen=True)
class IVectorRecord:
    segment_id: str
    mean: np.ndarray
    covariance: np.ndarray | None = None


def _check_records(records: list[IVectorRecord]) -> tuple[int, bool]:
    if not records:
        return 0, False
    dim = np.asarray(records[0].mean).size
    with_cov = records[0].covariance is not None
    for k, rec in enumerate(records):
        if any(c in rec.segment_id for c in "\t\r\n") or not rec.segment_id:
            raise FormatError(f"row {k}: segment id {rec.segment_id!r} is empty or holds tabs or newlines", field="segment_id")
        if np.asarray(rec.mean).shape != (dim,):
            raise DimensionMismatchError(f"row {k} ({rec.segment_id}): mean has shape {np.shape(rec.mean)}, expected ({dim},)")
        if (rec.covariance is not None) != with_cov:
            raise DimensionMismatchError(f"row {k} ({rec.segment_id}): covariance presence differs from the first row")
        if with_cov and np.shape(rec.covariance) != (dim, dim):
            raise DimensionMismatchError(f"row {k} ({rec.segment_id}): covariance has shape {np.shape(rec.covariance)}")
    return dim, with_cov


def _upper(cov: np.ndarray) -> np.ndarray:
    return np.asarray(cov, dtype=np.float64)[np.triu_indices(cov.shape[0])]


def _from_upper(values: np.ndarray, dim: int) -> np.ndarray:
    cov = np.zeros((dim, dim))
    rows, cols = np.triu_indices(dim)
    cov[rows, cols] = values
    cov[cols, rows] = values
    return cov


def dump_ivectors_text(records: list[IVectorRecord], fh: TextIO) -> None:
    """Tab-separated table with a column header; values use 17 significant digits."""
    dim, with_cov = _check_records(records)
    header = ["segment_id"] + [f"m{j}" for j in range(dim)]
    if with_cov:
        header += [f"c{i}_{j}" for i, j in zip(*np.triu_indices(dim))]
    fh.write("\t".join(header) + "\n")
    for rec in records:
        values = list(np.asarray(rec.mean, dtype=np.float64))
        if with_cov:
            values += list(_upper(rec.covariance))
        fh.write("\t".join([rec.segment_id] + [format(float(v), ".17g") for v in values]) + "\n")


def load_ivectors_text(fh: TextIO) -> list[IVectorRecord]:
    lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("segment_id"):
        raise FormatError("i-vector table must start with a segment_id header", offset=0, field="header")
    header = lines[0].split("\t")
    dim = sum(1 for col in header if col.startswith("m"))
    n_cov = len(header) - 1 - dim
    if n_cov not in (0, dim * (dim + 1) // 2):
        raise FormatError(f"header has {n_cov} covariance columns for M={dim}", offset=0, field="header")
    records = []
    for k, line in enumerate(lines[1:], start=1):
        cols = line.split("\t")
        if len(cols) != len(header):
            raise FormatError(f"ragged row: {len(cols)} columns, header has {len(header)}", offset=k, field="row")
        try:
            values = np.array([float(v) for v in cols[1:]], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"row {k}: {e}", offset=k, field="value") from e
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError(f"row {k}: non-finite value", offset=k, field="value")
        cov = _from_upper(values[dim:], dim) if n_cov else None
        records.append(IVectorRecord(cols[0], values[:dim], cov))
    return records


def dump_ivectors_binary(records: list[IVectorRecord], fh: BinaryIO) -> None:
    """Binary variant: header, then per row a u32-prefixed UTF-8 id and float64 values."""
    dim, with_cov = _check_records(records)
    out = io.BytesIO()
    out.write(_IVECTOR_HEADER.pack(IVECTOR_MAGIC, FORMAT_VERSION, dim, len(records), int(with_cov)))
    for rec in records:
        name = rec.segment_id.encode("utf-8")
        out.write(_U32.pack(len(name)))
        out.write(name)
        out.write(np.ascontiguousarray(rec.mean, dtype="<f8").tobytes())
        if with_cov:
            out.write(np.ascontiguousarray(_upper(rec.covariance), dtype="<f8").tobytes())
    fh.write(out.getvalue())


def load_ivectors_binary(fh: BinaryIO) -> list[IVectorRecord]:
    data = fh.read()
    if len(data) < 4 or data[:4] != IVECTOR_MAGIC:
        raise BadMagicError(f"not an i-vector file: found magic {data[:4]!r}", offset=0, field="magic")
    if len(data) < _IVECTOR_HEADER.size:
        raise TruncatedPayloadError("i-vector header is truncated", offset=len(data), field="header")
    _, version, dim, count, flag = _IVECTOR_HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"i-vector version {version} is not supported", offset=4, field="version")
    if flag not in (0, 1):
        raise FormatError(f"covariance flag must be 0 or 1, got {flag}", offset=20, field="flag")
    per_row = dim + (dim * (dim + 1) // 2 if flag else 0)
    pos = _IVECTOR_HEADER.size
    records = []
    for k in range(count):
        if pos + _U32.size > len(data):
            raise TruncatedPayloadError(f"row {k}: missing id length", offset=pos, field="id_length")
        (length,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        end = pos + length + 8 * per_row
        if end > len(data):
            raise TruncatedPayloadError(f"row {k}: record runs past end of file", offset=len(data), field="row")
        try:
            name = data[pos : pos + length].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"row {k}: segment id is not UTF-8", offset=pos, field="segment_id") from e
        values = np.frombuffer(data, dtype="<f8", count=per_row, offset=pos + length).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError(f"row {k}: non-finite value", offset=pos + length, field="value")
        cov = _from_upper(values[dim:], dim) if flag else None
        records.append(IVectorRecord(name, values[:dim], cov))
        pos = end
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the i-vector rows", offset=pos, field="payload")
    return records


def write_ivectors(path: Path, records: list[IVectorRecord], binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as f:
            dump_ivectors_binary(records, f)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            dump_ivectors_text(records, f)


def read_ivectors(path: Path) -> list[IVectorRecord]:
    """Read either variant, telling them apart by the binary magic."""
    with open(path, "rb") as f:
        head = f.read(4)
        f.seek(0)
        if head == IVECTOR_MAGIC:
            return load_ivectors_binary(f)
        return load_ivectors_text(io.TextIOWrapper(f, encoding="utf-8", newline=""))
