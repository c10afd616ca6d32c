"""Persistent vector store over feature sets with exact cosine retrieval.

On disk a store is ``manifest.json`` plus ``records.jsonl``. Each record
line is a JSON object carrying its vectors as base64 of little-endian
32-bit floats and a ``crc32`` field computed over the canonical encoding of
the rest of the object (keys sorted, separators ``,``/``:``, ASCII-escaped).
That encoding is pinned so stores written by any conforming implementation
are readable by any other, bit for bit.
"""
from __future__ import annotations

import base64
import json
import os
import threading
import time
import zlib
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from .core import (
    FeatureSet,
    FunctionSpec,
    PipelineError,
    SolutionProgram,
    SolutionSketch,
)
from .gateway import EmbeddingVector
from .similarity import scan_scores

FORMAT_VERSION = 1
CHECKSUM_ALGORITHM = "crc32"

MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"


class DimensionMismatch(PipelineError):
    pass


class EmbedderMismatch(PipelineError):
    pass


class StorageFailure(PipelineError):
    pass


class FormatVersionUnsupported(PipelineError):
    pass


class ChecksumMismatch(PipelineError):
    pass


@dataclass(frozen=True)
class StoreManifest:
    dimension: int
    embedder_id: str
    record_count: int
    format_version: int = FORMAT_VERSION
    checksum_algorithm: str = CHECKSUM_ALGORITHM


@dataclass(frozen=True)
class LearnedRecord:
    record_id: str
    problem_id: str
    feature_set: FeatureSet
    category_vector: EmbeddingVector
    steps_vector: EmbeddingVector
    program: SolutionProgram
    created_at: int
    embedder_id: str


@dataclass(frozen=True)
class SimilarityHit:
    record_id: str
    score: float
    category_score: float
    steps_score: float


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in float64; zero whenever either vector is zero."""
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"{a.dimension} vs {b.dimension}")
    x = a.values.astype(np.float64)
    y = b.values.astype(np.float64)
    nx = float(np.sqrt(np.dot(x, x)))
    ny = float(np.sqrt(np.dot(y, y)))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def record_id_for(problem_id: str, feature_set: FeatureSet, source: str) -> str:
    """Content-derived id, so identical learn results get identical ids
    regardless of scheduling order."""
    h = sha256()
    for part in (problem_id, feature_set.category_feature, feature_set.steps_text(), source):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def build_record(
    problem_id: str,
    feature_set: FeatureSet,
    program: SolutionProgram,
    embedder,
    clock=time.time,
) -> LearnedRecord:
    """Embed the features and assemble a storable record."""
    return LearnedRecord(
        record_id=record_id_for(problem_id, feature_set, program.source),
        problem_id=problem_id,
        feature_set=feature_set,
        category_vector=embedder.embed(feature_set.category_feature),
        steps_vector=embedder.embed(feature_set.steps_text()),
        program=program,
        created_at=int(clock()),
        embedder_id=embedder.embedder_id,
    )


# ---------------------------------------------------------------------------
# Record (de)serialization
# ---------------------------------------------------------------------------

def _encode_vector(vec: EmbeddingVector) -> str:
    return base64.b64encode(vec.values.astype("<f4").tobytes()).decode("ascii")


def _decode_vector(data: str) -> EmbeddingVector:
    raw = np.frombuffer(base64.b64decode(data), dtype="<f4")
    return EmbeddingVector(values=raw.copy())


def _canonical_bytes(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def _record_to_obj(record: LearnedRecord) -> dict:
    return {
        "record_id": record.record_id,
        "problem_id": record.problem_id,
        "feature_set": {
            "category_feature": record.feature_set.category_feature,
            "step_features": list(record.feature_set.step_features),
        },
        "category_vector": _encode_vector(record.category_vector),
        "steps_vector": _encode_vector(record.steps_vector),
        "program": {
            "source": record.program.source,
            "entry_point": record.program.entry_point,
            "verified": record.program.verified,
            "attempts": record.program.attempts,
            "sketch": {
                "steps": list(record.program.sketch.steps),
                "functions": [
                    {
                        "name": f.name,
                        "purpose": f.purpose,
                        "inputs": list(f.inputs),
                        "output": f.output,
                        "dependencies": list(f.dependencies),
                    }
                    for f in record.program.sketch.functions
                ],
            },
        },
        "created_at": record.created_at,
        "embedder_id": record.embedder_id,
    }


def _record_from_obj(obj: dict) -> LearnedRecord:
    sketch_obj = obj["program"]["sketch"]
    sketch = SolutionSketch(
        steps=tuple(sketch_obj["steps"]),
        functions=tuple(
            FunctionSpec(
                name=f["name"],
                purpose=f["purpose"],
                inputs=tuple(f["inputs"]),
                output=f["output"],
                dependencies=tuple(f["dependencies"]),
            )
            for f in sketch_obj["functions"]
        ),
    )
    program = SolutionProgram(
        source=obj["program"]["source"],
        sketch=sketch,
        verified=obj["program"]["verified"],
        attempts=obj["program"]["attempts"],
        entry_point=obj["program"]["entry_point"],
    )
    return LearnedRecord(
        record_id=obj["record_id"],
        problem_id=obj["problem_id"],
        feature_set=FeatureSet(
            category_feature=obj["feature_set"]["category_feature"],
            step_features=tuple(obj["feature_set"]["step_features"]),
        ),
        category_vector=_decode_vector(obj["category_vector"]),
        steps_vector=_decode_vector(obj["steps_vector"]),
        program=program,
        created_at=obj["created_at"],
        embedder_id=obj["embedder_id"],
    )


def _record_line(record: LearnedRecord) -> str:
    obj = _record_to_obj(record)
    obj["crc32"] = zlib.crc32(_canonical_bytes(obj))
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _parse_record_line(line: str) -> LearnedRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StorageFailure(f"corrupt or truncated record line: {exc}") from exc
    if not isinstance(obj, dict) or "crc32" not in obj:
        raise StorageFailure("record line missing crc32 field")
    expected = obj.pop("crc32")
    actual = zlib.crc32(_canonical_bytes(obj))
    if actual != expected:
        raise ChecksumMismatch(f"crc32 {actual} != recorded {expected}")
    try:
        return _record_from_obj(obj)
    except (KeyError, TypeError) as exc:
        raise StorageFailure(f"malformed record object: {exc}") from exc


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class FeatureStore:
    """Append-only record store with exact brute-force retrieval.

    When bound to a directory, every ``put`` appends the record line and
    refreshes the manifest before returning. Readers see a consistent
    snapshot: a query scores the records present when it started.
    """

    def __init__(
        self,
        dimension: int,
        embedder_id: str,
        embedder=None,
        directory: str | Path | None = None,
    ) -> None:
        if embedder is not None:
            if embedder.dimension != dimension:
                raise DimensionMismatch(f"embedder dimension {embedder.dimension} != {dimension}")
            if embedder.embedder_id != embedder_id:
                raise EmbedderMismatch(f"{embedder.embedder_id!r} != {embedder_id!r}")
        self.dimension = dimension
        self.embedder_id = embedder_id
        self.embedder = embedder
        self._records: list[LearnedRecord] = []
        self._lock = threading.RLock()
        self._cat_matrix: np.ndarray | None = None
        self._steps_matrix: np.ndarray | None = None
        self._directory: Path | None = None
        self._records_fh = None
        if directory is not None:
            directory = Path(directory)
            if (directory / MANIFEST_FILE).exists():
                raise StorageFailure(f"a store already exists at {directory}; use load()")
            self._bind_directory(directory)

    @classmethod
    def create(cls, embedder, directory: str | Path | None = None) -> "FeatureStore":
        return cls(embedder.dimension, embedder.embedder_id, embedder, directory)

    # -- directory binding ---------------------------------------------------

    def _bind_directory(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        self._directory = directory
        self._write_manifest()
        self._records_fh = (directory / RECORDS_FILE).open("a", encoding="utf-8")

    def _write_manifest(self) -> None:
        manifest = {
            "format_version": FORMAT_VERSION,
            "dimension": self.dimension,
            "embedder_id": self.embedder_id,
            "record_count": len(self._records),
            "checksum_algorithm": CHECKSUM_ALGORITHM,
        }
        path = self._directory / MANIFEST_FILE
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    def close(self) -> None:
        with self._lock:
            if self._records_fh is not None:
                self._records_fh.close()
                self._records_fh = None

    # -- core operations ------------------------------------------------------

    @property
    def manifest(self) -> StoreManifest:
        with self._lock:
            return StoreManifest(
                dimension=self.dimension,
                embedder_id=self.embedder_id,
                record_count=len(self._records),
            )

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def records(self) -> list[LearnedRecord]:
        with self._lock:
            return list(self._records)

    def get(self, record_id: str) -> LearnedRecord:
        with self._lock:
            for rec in self._records:
                if rec.record_id == record_id:
                    return rec
        raise KeyError(record_id)

    def put(self, record: LearnedRecord) -> str:
        if record.category_vector.dimension != self.dimension:
            raise DimensionMismatch(
                f"category vector has {record.category_vector.dimension} dims, store expects {self.dimension}"
            )
        if record.steps_vector.dimension != self.dimension:
            raise DimensionMismatch(
                f"steps vector has {record.steps_vector.dimension} dims, store expects {self.dimension}"
            )
        if record.embedder_id != self.embedder_id:
            raise EmbedderMismatch(f"{record.embedder_id!r} != {self.embedder_id!r}")
        if not record.program.verified:
            raise ValueError("only execution-verified programs may be stored")
        with self._lock:
            self._records.append(record)
            self._cat_matrix = None
            self._steps_matrix = None
            if self._records_fh is not None:
                try:
                    self._records_fh.write(_record_line(record) + "\n")
                    self._records_fh.flush()
                    os.fsync(self._records_fh.fileno())
                    self._write_manifest()
                except OSError as exc:
                    raise StorageFailure(str(exc)) from exc
        return record.record_id

    def _matrices(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        with self._lock:
            if self._cat_matrix is None:
                self._cat_matrix = np.stack(
                    [r.category_vector.values.astype(np.float64) for r in self._records]
                )
                self._steps_matrix = np.stack(
                    [r.steps_vector.values.astype(np.float64) for r in self._records]
                )
            return self._cat_matrix, self._steps_matrix, [r.record_id for r in self._records]

    def query(self, features: FeatureSet, k: int, threshold: float, alpha: float) -> list[SimilarityHit]:
        """Top-``k`` records by blended cosine score, descending, all at or
        above ``threshold``; ties broken by smaller record id."""
        if k < 1:
            raise ValueError("k must be at least 1")
        if self.embedder is None:
            raise StorageFailure("store has no embedder attached; cannot featurize queries")
        with self._lock:
            if not self._records:
                return []
            cat_m, steps_m, ids = self._matrices()
        q_cat = self.embedder.embed(features.category_feature).values.astype(np.float64)
        q_steps = self.embedder.embed(features.steps_text()).values.astype(np.float64)
        scores = scan_scores(cat_m, steps_m, q_cat, q_steps, alpha)
        order = sorted(
            (i for i in range(len(ids)) if scores[i] >= threshold),
            key=lambda i: (-scores[i], ids[i]),
        )[:k]
        hits = []
        for i in order:
            cs = float(cat_m[i] @ q_cat)
            ss = float(steps_m[i] @ q_steps)
            hits.append(
                SimilarityHit(
                    record_id=ids[i],
                    score=alpha * cs + (1.0 - alpha) * ss,
                    category_score=cs,
                    steps_score=ss,
                )
            )
        return hits


def persist(store: FeatureStore, path: str | Path) -> None:
    """Write a complete copy of the store under ``path``."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    records = store.records()
    try:
        with (directory / RECORDS_FILE).open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(_record_line(record) + "\n")
        manifest = {
            "format_version": FORMAT_VERSION,
            "dimension": store.dimension,
            "embedder_id": store.embedder_id,
            "record_count": len(records),
            "checksum_algorithm": CHECKSUM_ALGORITHM,
        }
        tmp = directory / (MANIFEST_FILE + ".tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, directory / MANIFEST_FILE)
    except OSError as exc:
        raise StorageFailure(str(exc)) from exc


def load(path: str | Path, embedder=None) -> FeatureStore:
    """Load a store; never silently accepts truncated or mismatched data."""
    directory = Path(path)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.is_file():
        raise StorageFailure(f"no {MANIFEST_FILE} under {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StorageFailure(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionUnsupported(str(manifest.get("format_version")))
    if manifest.get("checksum_algorithm") != CHECKSUM_ALGORITHM:
        raise FormatVersionUnsupported(f"checksum algorithm {manifest.get('checksum_algorithm')!r}")
    dimension = int(manifest["dimension"])
    embedder_id = manifest["embedder_id"]
    expected_count = int(manifest["record_count"])

    if embedder is not None:
        if embedder.dimension != dimension:
            raise DimensionMismatch(f"embedder dimension {embedder.dimension} != store {dimension}")
        if embedder.embedder_id != embedder_id:
            raise EmbedderMismatch(f"{embedder.embedder_id!r} != {embedder_id!r}")

    store = FeatureStore(dimension, embedder_id, embedder)
    records_path = directory / RECORDS_FILE
    lines = records_path.read_text(encoding="utf-8").splitlines() if records_path.is_file() else []
    for line in lines:
        if not line.strip():
            continue
        record = _parse_record_line(line)
        if record.category_vector.dimension != dimension or record.steps_vector.dimension != dimension:
            raise DimensionMismatch(
                f"record {record.record_id} vectors disagree with manifest dimension {dimension}"
            )
        if record.embedder_id != embedder_id:
            raise EmbedderMismatch(f"record {record.record_id}: {record.embedder_id!r} != {embedder_id!r}")
        store._records.append(record)
    if len(store._records) != expected_count:
        raise StorageFailure(
            f"manifest says {expected_count} records but {len(store._records)} were read (truncated?)"
        )
    store._bind_directory(directory)
    return store
