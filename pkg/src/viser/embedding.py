"""Feature vectors, L2 normalization, cosine similarity and corpus files.

Similarities are always accumulated in float64 with one fixed summation
order (dimension 0, 1, ..., D-1), so a score never depends on which matrix
block, shard or operand order produced it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CorpusFormatError,
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    NonFinite,
    ZeroVector,
)

BINARY_MAGIC = b"VSRE"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
HEADER_SIZE = _HEADER.size  # 20 bytes

# a vector whose computed norm is this close to 1 is returned untouched, which
# makes normalize() bitwise idempotent
_UNIT_SLACK = 8 * np.finfo(np.float64).eps

# rows per block when building similarity matrices
_BLOCK_ROWS = 512


def as_feature_vector(values) -> np.ndarray:
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"feature vector must be 1-D and non-empty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite("feature vector has non-finite entries")
    return v


def normalize(v) -> np.ndarray:
    """Return ``v`` scaled to unit L2 norm.

    >>> normalize([3.0, 4.0]).tolist()
    [0.6, 0.8]
    """
    v = as_feature_vector(v)
    scale = np.max(np.abs(v))
    if scale == 0.0:
        raise ZeroVector("cannot normalize an all-zero vector")
    norm = scale * np.sqrt(np.dot(v / scale, v / scale))
    if abs(norm - 1.0) <= _UNIT_SLACK:
        return v
    return v / norm


def similarity_matrix(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Dot products ``out[i, j] = queries[i] . refs[j]`` in float64.

    Every entry is summed left to right over the feature dimension, so entry
    (i, j) is bitwise the same whatever the shapes of the two operands and
    ``similarity_matrix(a, b) == similarity_matrix(b, a).T`` exactly. Results
    are clamped to [-1, 1], and values within rounding error of +-1 are
    snapped to it so a unit vector scores exactly 1.0 against itself.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2:
        raise DimensionMismatch("similarity_matrix expects 2-D arrays")
    if q.shape[1] != r.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {q.shape[1]} vs {r.shape[1]}")
    n, dim = q.shape
    out = np.empty((n, r.shape[0]), dtype=np.float64)
    rt = np.ascontiguousarray(r.T)
    for start in range(0, n, _BLOCK_ROWS):
        qb = q[start:start + _BLOCK_ROWS]
        acc = out[start:start + _BLOCK_ROWS]
        tmp = np.empty_like(acc)
        np.multiply(qb[:, 0:1], rt[0], out=acc)
        for d in range(1, dim):
            np.multiply(qb[:, d:d + 1], rt[d], out=tmp)
            acc += tmp
    np.clip(out, -1.0, 1.0, out=out)
    # accumulated rounding of a unit-norm self dot product is bounded by ~dim ulps
    snap = 1.0 - 2.0 * max(dim, 8) * np.finfo(np.float64).eps
    out[out >= snap] = 1.0
    out[out <= -snap] = -1.0
    return out


@dataclass(frozen=True)
class EmbeddingRecord:
    id: int
    vector: np.ndarray
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if isinstance(self.id, bool) or int(self.id) < 0:
            raise ValueError(f"record id must be an unsigned integer, got {self.id!r}")
        vec = as_feature_vector(self.vector)
        vec.setflags(write=False)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "vector", vec)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def normalized(self) -> "EmbeddingRecord":
        return EmbeddingRecord(self.id, normalize(self.vector), self.labels)


def cosine_sim(a: EmbeddingRecord, b: EmbeddingRecord) -> float:
    va = a.vector if isinstance(a, EmbeddingRecord) else as_feature_vector(a)
    vb = b.vector if isinstance(b, EmbeddingRecord) else as_feature_vector(b)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    return float(similarity_matrix(va[None, :], vb[None, :])[0, 0])


@dataclass
class Corpus:
    """Column-oriented set of embedding records.

    ``vectors`` is an (n, D) float64 array; ``labels`` is either None or one
    tuple of class indices per record.
    """

    ids: np.ndarray
    vectors: np.ndarray
    labels: list[tuple[int, ...]] | None = None
    _index: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionMismatch(f"corpus vectors must be 2-D, got shape {self.vectors.shape}")
        if self.vectors.shape[0] != self.ids.shape[0]:
            raise ValueError("ids and vectors disagree on record count")
        if self.labels is not None:
            if len(self.labels) != len(self.ids):
                raise ValueError("labels and ids disagree on record count")
            self.labels = [tuple(int(c) for c in lab) for lab in self.labels]
        if len(np.unique(self.ids)) != len(self.ids):
            uniq, counts = np.unique(self.ids, return_counts=True)
            raise DuplicateId(f"duplicate record id {int(uniq[counts > 1][0])}")

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @classmethod
    def from_records(cls, records: Iterable[EmbeddingRecord]) -> "Corpus":
        records = list(records)
        if not records:
            raise EmptyCorpus("no records")
        dims = {r.dim for r in records}
        if len(dims) != 1:
            raise DimensionMismatch(f"records disagree on dimension: {sorted(dims)}")
        labels = None
        if any(r.labels is not None for r in records):
            labels = [r.labels or () for r in records]
        return cls(
            ids=np.array([r.id for r in records], dtype=np.uint64),
            vectors=np.stack([r.vector for r in records]),
            labels=labels,
        )

    def records(self) -> list[EmbeddingRecord]:
        return [
            EmbeddingRecord(int(i), self.vectors[k], None if self.labels is None else self.labels[k])
            for k, i in enumerate(self.ids)
        ]

    def normalized(self) -> "Corpus":
        vecs = np.empty_like(self.vectors)
        for k in range(len(self)):
            try:
                vecs[k] = normalize(self.vectors[k])
            except ZeroVector:
                raise ZeroVector(f"record id {int(self.ids[k])} has an all-zero vector") from None
        return Corpus(self.ids.copy(), vecs, None if self.labels is None else list(self.labels))

    def position(self, record_id: int) -> int:
        if self._index is None:
            self._index = {int(i): k for k, i in enumerate(self.ids)}
        return self._index[int(record_id)]

    def label_table(self) -> dict[int, tuple[int, ...]]:
        if self.labels is None:
            return {}
        return {int(i): lab for i, lab in zip(self.ids, self.labels)}


def as_corpus(obj) -> Corpus:
    if isinstance(obj, Corpus):
        return obj
    return Corpus.from_records(obj)


# ---------------------------------------------------------------------------
# file formats


def write_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(len(corpus)):
            obj = {"id": int(corpus.ids[k]), "vector": [float(x) for x in corpus.vectors[k]]}
            if corpus.labels is not None:
                obj["labels"] = list(corpus.labels[k])
            fh.write(json.dumps(obj) + "\n")


def _is_uint(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def read_jsonl(path, *, normalize_vectors: bool = False) -> Corpus:
    ids, vecs, labels = [], [], []
    any_labels = False
    seen: dict[int, int] = {}
    dim = None
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line_offset = offset
            offset += len(raw)
            if not raw.strip():
                continue

            def fail(msg):
                return CorpusFormatError(msg, path=path, line=lineno, offset=line_offset)

            try:
                obj = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise fail(f"invalid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise fail("expected a JSON object")
            rid = obj.get("id")
            if not _is_uint(rid):
                raise fail(f"'id' must be an unsigned integer, got {rid!r}")
            vec = obj.get("vector")
            if not isinstance(vec, list) or not vec or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec
            ):
                raise fail("'vector' must be a non-empty array of numbers")
            arr = np.array(vec, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise fail("'vector' has non-finite entries")
            if dim is None:
                dim = arr.size
            elif arr.size != dim:
                raise fail(f"dimension {arr.size} differs from {dim}")
            if rid in seen:
                raise fail(f"duplicate id {rid} (first seen on line {seen[rid]})")
            seen[rid] = lineno
            if normalize_vectors:
                if not np.any(arr):
                    raise fail(f"record id {rid} has an all-zero vector")
                arr = normalize(arr)
            lab = obj.get("labels")
            if lab is not None:
                if not isinstance(lab, list) or not all(_is_uint(c) for c in lab):
                    raise fail("'labels' must be an array of unsigned integers")
                any_labels = True
            ids.append(rid)
            vecs.append(arr)
            labels.append(tuple(lab) if lab is not None else ())
    if not ids:
        raise EmptyCorpus(f"{path}: no records")
    return Corpus(np.array(ids, dtype=np.uint64), np.stack(vecs), labels if any_labels else None)


def write_binary(corpus: Corpus, path) -> None:
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (corpus.dim,))])
    buf = np.empty(len(corpus), dtype=rec)
    buf["id"] = corpus.ids
    buf["vec"] = corpus.vectors.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, corpus.dim, len(corpus)))
        fh.write(buf.tobytes())


def read_binary(path, *, normalize_vectors: bool = False) -> Corpus:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise CorpusFormatError(f"file shorter than the {HEADER_SIZE}-byte header", path=path, offset=len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != BINARY_VERSION:
        raise CorpusFormatError(f"unsupported format version {version}", path=path, offset=4)
    if dim == 0:
        raise CorpusFormatError("dimension must be at least 1", path=path, offset=8)
    rec_size = 8 + 4 * dim
    body = len(data) - HEADER_SIZE
    complete = body // rec_size
    if complete < count:
        raise CorpusFormatError(
            f"truncated: header declares {count} records, record {complete} is incomplete",
            path=path, record=complete, offset=HEADER_SIZE + complete * rec_size,
        )
    if body > count * rec_size:
        raise CorpusFormatError(
            f"{body - count * rec_size} trailing bytes after {count} records",
            path=path, offset=HEADER_SIZE + count * rec_size,
        )
    if count == 0:
        raise EmptyCorpus(f"{path}: no records")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    arr = np.frombuffer(data, dtype=rec, count=count, offset=HEADER_SIZE)
    ids = arr["id"].astype(np.uint64)
    vecs = arr["vec"].astype(np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(vecs), axis=1))
    if bad.size:
        k = int(bad[0])
        raise CorpusFormatError("non-finite vector entries", path=path, record=k, offset=HEADER_SIZE + k * rec_size)
    uniq, first, counts = np.unique(ids, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = int(uniq[counts > 1][0])
        k = int(np.flatnonzero(ids == dup)[1])
        raise CorpusFormatError(f"duplicate id {dup}", path=path, record=k, offset=HEADER_SIZE + k * rec_size)
    if normalize_vectors:
        zero = np.flatnonzero(~np.any(vecs, axis=1))
        if zero.size:
            k = int(zero[0])
            raise CorpusFormatError("all-zero vector", path=path, record=k, offset=HEADER_SIZE + k * rec_size)
        vecs = np.stack([normalize(v) for v in vecs])
    return Corpus(ids, vecs)


def load_corpus(path, *, normalize_vectors: bool = True) -> Corpus:
    """Read a corpus, detecting the binary format by its magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return read_binary(path, normalize_vectors=normalize_vectors)
    return read_jsonl(path, normalize_vectors=normalize_vectors)


def save_corpus(corpus: Corpus, path, fmt: str | None = None) -> None:
    fmt = fmt or ("binary" if str(path).endswith((".bin", ".vsre")) else "jsonl")
    if fmt == "binary":
        write_binary(corpus, path)
    elif fmt == "jsonl":
        write_jsonl(corpus, path)
    else:
        raise ValueError(f"unknown corpus format {fmt!r}")


def check_same_dim(*corpora: Sequence[Corpus]) -> int:
    dims = {c.dim for c in corpora}
    if len(dims) != 1:
        raise DimensionMismatch(f"corpora disagree on dimension: {sorted(dims)}")
    return dims.pop()
