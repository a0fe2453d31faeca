"""Nested-embedding store with prefix-truncated exhaustive cosine search."""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import validate_ladder
from .errors import ConfigError, DimensionError, FormatError, InputError, ValidationError

STORE_MAGIC = b"WLES"
STORE_VERSION = 1
UNIT_TOL = 1e-6


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SearchStats:
    dims_used: int
    candidates: int
    multiply_accumulate_count: int
    bytes_scanned: int


class EmbeddingStore:
    """Full vectors are kept once; truncated views are sliced at query time.

    Writers take an exclusive lock and publish a fresh immutable snapshot,
    so concurrent readers never see a half-written record.
    """

    def __init__(self, dim: int, ladder: Sequence[int] | None = None):
        ladder = list(ladder) if ladder is not None else [dim]
        validate_ladder(ladder, dim)
        self.dim = dim
        self.ladder = ladder
        self._lock = threading.Lock()
        self._records: dict[str, EmbeddingRecord] = {}
        self._snapshot = self._build_snapshot()

    def __len__(self):
        return len(self._records)

    def __contains__(self, rid: str) -> bool:
        return rid in self._records

    def get(self, rid: str) -> EmbeddingRecord:
        return self._records[rid]

    def records(self) -> list[EmbeddingRecord]:
        return [self._records[k] for k in self._snapshot[0]]

    def _build_snapshot(self):
        ids = sorted(self._records)
        if ids:
            matrix = np.stack([self._records[i].vector for i in ids])
        else:
            matrix = np.zeros((0, self.dim))
        return ids, matrix

    def ingest(self, records: Iterable[EmbeddingRecord]) -> int:
        """Validate and store ``records`` (overwriting ids); returns the store size."""
        staged: dict[str, EmbeddingRecord] = {}
        for rec in records:
            vec = np.asarray(rec.vector, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise DimensionError(f"record {rec.id!r} has shape {vec.shape}, store dim is {self.dim}")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > UNIT_TOL:
                raise ValidationError(f"record {rec.id!r} is not unit-norm (|v| = {norm:.9f})")
            meta = {str(k): str(v) for k, v in (rec.metadata or {}).items()}
            staged[rec.id] = EmbeddingRecord(rec.id, vec.copy(), meta)
        with self._lock:
            self._records.update(staged)
            self._snapshot = self._build_snapshot()
            return len(self._records)

    def search(self, query, dim_level: int, top_k: int) -> tuple[list[tuple[str, float]], SearchStats]:
        """Rank stored ids by cosine similarity on the first ``dim_level`` channels."""
        if dim_level not in self.ladder:
            raise ConfigError(f"dimension {dim_level} not in ladder {self.ladder}")
        if top_k < 1:
            raise InputError("top_k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionError(f"query has shape {q.shape}, store dim is {self.dim}")
        ids, matrix = self._snapshot
        view = matrix[:, :dim_level]
        qs = q[:dim_level]
        qn = np.linalg.norm(qs)
        if qn == 0.0:
            raise ValidationError("query prefix has zero norm")
        norms = np.linalg.norm(view, axis=1)
        scores = (view @ qs) / (np.where(norms == 0.0, 1.0, norms) * qn)
        # ids are already sorted, so a stable sort on -score breaks ties by id
        order = np.argsort(-scores, kind="stable")[:top_k]
        n = len(ids)
        stats = SearchStats(dim_level, n, dim_level * n, dim_level * n * 8)
        return [(ids[i], float(scores[i])) for i in order], stats

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """``WLES``, u16 version, u32 dim, u32 ladder length + u32 entries, u64 count,
        then per record: u16-length UTF-8 id, dim little-endian f64, u32-length
        UTF-8 JSON metadata."""
        ids, matrix = self._snapshot
        try:
            with open(path, "wb") as fh:
                fh.write(STORE_MAGIC)
                fh.write(struct.pack("<HI", STORE_VERSION, self.dim))
                fh.write(struct.pack(f"<I{len(self.ladder)}I", len(self.ladder), *self.ladder))
                fh.write(struct.pack("<Q", len(ids)))
                for rid, vec in zip(ids, matrix):
                    raw = rid.encode("utf-8")
                    meta = json.dumps(self._records[rid].metadata, sort_keys=True).encode("utf-8")
                    fh.write(struct.pack("<H", len(raw)) + raw)
                    fh.write(vec.astype("<f8").tobytes())
                    fh.write(struct.pack("<I", len(meta)) + meta)
        except OSError as exc:
            raise FormatError(f"cannot write store {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read store {path}: {exc}") from exc
        view = memoryview(blob)
        pos = 0

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(view):
                raise FormatError(f"{path}: truncated store")
            out = struct.unpack_from(fmt, view, pos)
            pos += size
            return out

        def take_bytes(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"{path}: truncated store")
            out = bytes(view[pos : pos + n])
            pos += n
            return out

        if take_bytes(4) != STORE_MAGIC:
            raise FormatError(f"{path}: not a WLES store")
        version, dim = take("<HI")
        if version != STORE_VERSION:
            raise FormatError(f"{path}: unsupported store version {version}")
        (nladder,) = take("<I")
        ladder = list(take(f"<{nladder}I"))
        (count,) = take("<Q")
        store = cls(dim, ladder)
        for _ in range(count):
            (nlen,) = take("<H")
            rid = take_bytes(nlen).decode("utf-8")
            vec = np.frombuffer(take_bytes(8 * dim), dtype="<f8").astype(np.float64)
            (mlen,) = take("<I")
            meta = json.loads(take_bytes(mlen).decode("utf-8"))
            store._records[rid] = EmbeddingRecord(rid, vec, meta)
        store._snapshot = store._build_snapshot()
        return store


def read_manifest(path: str | Path) -> list[EmbeddingRecord]:
    """JSON-lines manifest with ``id``, ``vector`` and optional ``metadata``."""
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(EmbeddingRecord(str(obj["id"]), np.asarray(obj["vector"], dtype=np.float64),
                                           obj.get("metadata", {})))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{path}:{n}: bad manifest line ({exc})") from exc
    return records


def write_manifest(records: Iterable[EmbeddingRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "vector": [float(x) for x in rec.vector],
                                 "metadata": dict(rec.metadata)}) + "\n")


def infer_ladder(dim: int, levels: int = 4) -> list[int]:
    ladder = [dim]
    while len(ladder) < levels and ladder[-1] % 2 == 0:
        ladder.append(ladder[-1] // 2)
    return ladder
