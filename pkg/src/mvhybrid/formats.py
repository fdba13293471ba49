"""Binary containers (EMB1, MVW1), CSV readers with line-numbered errors, atomic writes."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputFormatError

EMB_MAGIC = b"EMB1"
WEIGHTS_MAGIC = b"MVW1"
LABEL_FIELDS = ("patch_id", "sample_id", "patient_id", "study_id")


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# --------------------------------------------------------------------------- EMB1

def encode_emb1(matrix) -> bytes:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise InputFormatError("EMB1 holds a 2-D matrix")
    return EMB_MAGIC + struct.pack("<II", *m.shape) + np.ascontiguousarray(m).tobytes()


def decode_emb1(blob: bytes) -> np.ndarray:
    if blob[:4] != EMB_MAGIC:
        raise InputFormatError("not an EMB1 file (bad magic)")
    if len(blob) < 12:
        raise InputFormatError("truncated EMB1 header")
    rows, cols = struct.unpack_from("<II", blob, 4)
    payload = blob[12:]
    if len(payload) != 4 * rows * cols:
        raise InputFormatError(f"EMB1 payload has {len(payload)} bytes, expected {4 * rows * cols}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


# --------------------------------------------------------------------------- MVW1

def encode_mvw1(tensors: dict) -> bytes:
    """Records of ``u32 name_len, name, u32 rank, u32 dims[rank], f32 data``."""
    out = [WEIGHTS_MAGIC]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_mvw1(blob: bytes) -> dict:
    if blob[:4] != WEIGHTS_MAGIC:
        raise InputFormatError("not an MVW1 file (bad magic)")
    pos, out = 4, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            size = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + size > len(blob):
                raise InputFormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(blob[pos:pos + size], dtype="<f4").reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise InputFormatError(f"corrupt MVW1 record at byte {pos}: {exc}") from exc
    return out


# --------------------------------------------------------------------------- CSV

def _rows(text: str, what: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputFormatError(f"{what}: line 1: empty file") from None
    return header, ((reader.line_num, row) for row in reader if row)


def _floats(row, line: int, what: str, width: int) -> list[float]:
    if len(row) != width:
        raise InputFormatError(f"{what}: line {line}: expected {width} fields, got {len(row)}")
    try:
        vals = [float(v) for v in row]
    except ValueError as exc:
        raise InputFormatError(f"{what}: line {line}: {exc}") from None
    if not all(np.isfinite(vals)):
        raise InputFormatError(f"{what}: line {line}: non-finite value")
    return vals


def read_matrix_csv(text: str, what: str = "matrix") -> tuple[list[str], np.ndarray]:
    """Numeric CSV with a header row; returns ``(header, matrix)``."""
    header, rows = _rows(text, what)
    data = [_floats(row, line, what, len(header)) for line, row in rows]
    if not data:
        raise InputFormatError(f"{what}: line 2: no data rows")
    return header, np.array(data)


def read_expression_csv(text: str) -> tuple[list[str], np.ndarray]:
    genes, expr = read_matrix_csv(text, "expression")
    if len(set(genes)) != len(genes):
        raise InputFormatError("expression: line 1: duplicate gene names")
    bad = np.argwhere(expr < 0)
    if bad.size:
        raise InputFormatError(f"expression: line {bad[0][0] + 2}: negative expression value")
    return genes, expr


def read_labels_csv(text: str) -> dict[str, list[str]]:
    header, rows = _rows(text, "labels")
    if tuple(h.strip() for h in header) != LABEL_FIELDS:
        raise InputFormatError(f"labels: line 1: header must be {','.join(LABEL_FIELDS)}")
    out = {f: [] for f in LABEL_FIELDS}
    for line, row in rows:
        if len(row) != len(LABEL_FIELDS):
            raise InputFormatError(f"labels: line {line}: expected {len(LABEL_FIELDS)} fields, got {len(row)}")
        if any(not v.strip() for v in row):
            raise InputFormatError(f"labels: line {line}: empty label")
        for f, v in zip(LABEL_FIELDS, row):
            out[f].append(v.strip())
    if not out["patch_id"]:
        raise InputFormatError("labels: line 2: no data rows")
    return out


def matrix_csv(header, matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in np.asarray(matrix):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
