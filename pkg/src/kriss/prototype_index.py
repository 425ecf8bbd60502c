"""Per-entity prototype sampling and maximum-inner-product linking.

Linking scores a query vector against every stored prototype vector exactly
(full scan); an entity's score is the maximum over its prototypes, optionally
fused with the entity's reference vector. Vector stores (.krsv / vectors.bin)
hold magic "KRSV", u32 version, u32 dim, u64 count, then count rows of
little-endian float32; a sidecar "<path>.meta.jsonl" aligns row index to
entity id and prototype metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import Checkpoint, encode_sequences, tokenize_mention, tokenize_reference
from .errors import (
    DataError,
    DimMismatchError,
    EmptyIndexError,
    MissingReferenceError,
    UnknownEntityError,
)
from .mention_gen import GOLD, SELF_SUPERVISED, MentionExample, MentionStore
from .ontology import EntityCatalog

KRSV_MAGIC = b"KRSV"
KRSV_VERSION = 1


@dataclass
class Prototype:
    entity_id: str
    example: MentionExample
    source: str = SELF_SUPERVISED
    vector: np.ndarray | None = None


@dataclass
class PrototypeStore:
    """Sampled (not yet encoded) prototypes per entity; zero-mention entities keep empty lists."""

    prototypes: dict[str, list[Prototype]]
    k: int

    def entity_ids(self) -> list[str]:
        return sorted(self.prototypes)

    def total(self) -> int:
        return sum(len(v) for v in self.prototypes.values())


def sample_prototypes(store: MentionStore, k: int, seed: int,
                      entity_ids: Iterable[str] | None = None) -> PrototypeStore:
    """Uniformly sample up to k mentions per entity, without replacement.

    entity_ids widens coverage beyond the store (typically to the full
    catalog) so entities without mentions stay linkable via references.
    """
    ids = sorted(entity_ids) if entity_ids is not None else store.entities()
    rng = np.random.default_rng(seed)
    sampled: dict[str, list[Prototype]] = {}
    for entity_id in ids:
        examples = store.examples_for(entity_id)
        if len(examples) > k:
            picked = sorted(rng.choice(len(examples), size=k, replace=False))
            examples = [examples[int(i)] for i in picked]
        sampled[entity_id] = [Prototype(entity_id, ex, source=ex.source) for ex in examples]
    return PrototypeStore(prototypes=sampled, k=k)


@dataclass
class Candidate:
    entity_id: str
    score: float
    prototype: Prototype | None  # None when scored by reference fallback
    row: int | None = None


@dataclass
class LinkResult:
    query: MentionExample
    candidates: list[Candidate]

    def entity_ids(self) -> list[str]:
        return [c.entity_id for c in self.candidates]


class VectorIndex:
    """Exact inner-product search over prototype vectors, immutable once built."""

    def __init__(self, prototypes: list[Prototype], dim: int,
                 references: dict[str, np.ndarray] | None = None,
                 checkpoint: Checkpoint | None = None,
                 entity_ids: Iterable[str] | None = None):
        self.prototypes = prototypes
        self.dim = dim
        self.references = references
        self.checkpoint = checkpoint
        if checkpoint is not None and checkpoint.config.dim != dim:
            raise DimMismatchError(
                f"index dim {dim} != encoder dim {checkpoint.config.dim}")
        known: set[str] = set(entity_ids) if entity_ids is not None else set()
        known.update(p.entity_id for p in prototypes)
        if references:
            known.update(references)
        self.known_entities = frozenset(known)
        for p in prototypes:
            if p.vector is None:
                raise DataError("index prototypes must carry vectors")
            if p.vector.shape != (dim,):
                raise DimMismatchError(
                    f"prototype vector of shape {p.vector.shape}, expected ({dim},)")
        if prototypes:
            self._matrix = np.stack([p.vector for p in prototypes]).astype(np.float64)
        else:
            self._matrix = np.zeros((0, dim), dtype=np.float64)
        self._rows_by_entity: dict[str, list[int]] = {}
        for row, p in enumerate(prototypes):
            self._rows_by_entity.setdefault(p.entity_id, []).append(row)

    def __len__(self) -> int:
        return len(self.prototypes)

    def encode_query(self, query: MentionExample) -> np.ndarray:
        if self.checkpoint is None:
            raise DataError("index has no encoder attached; pass a query vector instead")
        seq = tokenize_mention(query, self.checkpoint.vocab, self.checkpoint.config.max_len)
        return encode_sequences(self.checkpoint.mention, [seq])[0]

    def link_vector(self, query_vec: np.ndarray, top_k: int, fusion: bool = False,
                    cosine: bool = False) -> list[Candidate]:
        """Rank entities by max inner product; ties break on ascending entity id."""
        if top_k < 1:
            raise DataError("top_k must be >= 1")
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimMismatchError(f"query of shape {q.shape}, expected ({self.dim},)")
        if fusion and not self.references:
            raise MissingReferenceError("fusion requested but no reference vectors stored")
        if len(self.prototypes) == 0 and not (fusion and self.references):
            raise EmptyIndexError("index holds no prototypes")
        matrix = self._matrix
        if cosine:
            q = _unit(q)
            matrix = matrix / _norms(matrix)
        scores = matrix @ q
        if fusion:
            ref_scores = {
                e: float((_unit(v.astype(np.float64)) if cosine else v.astype(np.float64)) @ q)
                for e, v in self.references.items()}
        best: dict[str, tuple[float, int | None]] = {}
        for entity_id, rows in self._rows_by_entity.items():
            bonus = ref_scores.get(entity_id, 0.0) if fusion else 0.0
            top_row = min(rows, key=lambda r: (-scores[r], r))
            best[entity_id] = (float(scores[top_row]) + bonus, top_row)
        if fusion:
            for entity_id, bonus in ref_scores.items():
                if entity_id not in best:
                    best[entity_id] = (bonus, None)  # reference-only fallback
        ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:top_k]
        return [
            Candidate(entity_id=e, score=score,
                      prototype=self.prototypes[row] if row is not None else None,
                      row=row)
            for e, (score, row) in ranked]

    def with_added(self, prototypes: list[Prototype]) -> "VectorIndex":
        return VectorIndex(self.prototypes + prototypes, self.dim,
                           references=self.references, checkpoint=self.checkpoint,
                           entity_ids=self.known_entities)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _norms(matrix: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(matrix, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return n


def build_index(protos: PrototypeStore, checkpoint: Checkpoint,
                catalog: EntityCatalog | None = None, fusion: bool = False,
                include_description: bool = True, batch_size: int = 64) -> VectorIndex:
    """Encode every sampled prototype once (and references when fusion is on)."""
    ordered: list[Prototype] = []
    for entity_id in protos.entity_ids():
        ordered.extend(protos.prototypes[entity_id])
    sequences = [
        tokenize_mention(p.example, checkpoint.vocab, checkpoint.config.max_len)
        for p in ordered]
    if sequences:
        vectors = encode_sequences(checkpoint.mention, sequences, batch_size=batch_size)
        for p, vec in zip(ordered, vectors):
            p.vector = vec
    references = None
    if fusion:
        if catalog is None:
            raise MissingReferenceError("fusion needs the entity catalog to render references")
        ids = [e for e in protos.entity_ids() if e in catalog]
        ref_seqs = [
            tokenize_reference(catalog[e], checkpoint.vocab, checkpoint.config.max_len,
                               include_description)
            for e in ids]
        ref_vecs = encode_sequences(checkpoint.reference, ref_seqs, batch_size=batch_size)
        references = {e: v for e, v in zip(ids, ref_vecs)}
    return VectorIndex(ordered, checkpoint.config.dim, references=references,
                       checkpoint=checkpoint, entity_ids=protos.entity_ids())


def link(query: MentionExample, index: VectorIndex, top_k: int,
         cosine: bool = False) -> LinkResult:
    """Nearest-prototype linking of one query mention."""
    vec = index.encode_query(query)
    return LinkResult(query, index.link_vector(vec, top_k, fusion=False, cosine=cosine))


def link_with_references(query: MentionExample, index: VectorIndex, top_k: int,
                         cosine: bool = False) -> LinkResult:
    """Linking with reference fusion: score(e, p) = c_q . (c_p + r_e).

    Entities without prototypes but with a reference vector fall back to
    c_q . r_e.
    """
    vec = index.encode_query(query)
    return LinkResult(query, index.link_vector(vec, top_k, fusion=True, cosine=cosine))


def add_gold_prototypes(index: VectorIndex, gold: Iterable[MentionExample],
                        checkpoint: Checkpoint,
                        catalog: EntityCatalog | None = None) -> VectorIndex:
    """Append encoded gold prototypes (no retraining); returns a new snapshot."""
    added: list[Prototype] = []
    sequences = []
    for example in gold:
        universe_ok = (example.entity_id in catalog) if catalog is not None \
            else (example.entity_id in index.known_entities)
        if not universe_ok:
            raise UnknownEntityError(
                f"gold mention refers to unknown entity {example.entity_id!r}")
        added.append(Prototype(example.entity_id, example, source=GOLD))
        sequences.append(tokenize_mention(example, checkpoint.vocab,
                                          checkpoint.config.max_len))
    if not added:
        return index.with_added([])
    vectors = encode_sequences(checkpoint.mention, sequences)
    for p, vec in zip(added, vectors):
        p.vector = vec
    return index.with_added(added)


# -- persistence ---------------------------------------------------------------

def write_krsv(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(KRSV_MAGIC)
        fh.write(struct.pack("<I", KRSV_VERSION))
        fh.write(struct.pack("<I", matrix.shape[1] if matrix.ndim == 2 else 0))
        fh.write(struct.pack("<Q", matrix.shape[0]))
        fh.write(matrix.tobytes())


def read_krsv(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != KRSV_MAGIC:
            raise DataError(f"{path}: not a KRSV vector store")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != KRSV_VERSION:
            raise DataError(f"{path}: unsupported KRSV version {version}")
        (dim,) = struct.unpack("<I", fh.read(4))
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read()
    expected = 4 * dim * count
    if len(payload) != expected:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


def save_index(index: VectorIndex, directory: str | Path) -> None:
    """Persist prototypes as vectors.bin (+ sidecar) and references as refs.bin."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vec_path = directory / "vectors.bin"
    write_krsv(vec_path, index._matrix.astype(np.float32))
    with open(str(vec_path) + ".meta.jsonl", "w", encoding="utf-8") as fh:
        for p in index.prototypes:
            record = {"entity_id": p.entity_id, "source": p.source,
                      "example": p.example.to_record()}
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    with open(directory / "entities.txt", "w", encoding="utf-8") as fh:
        for entity_id in sorted(index.known_entities):
            fh.write(entity_id + "\n")
    if index.references is not None:
        ids = sorted(index.references)
        ref_path = directory / "refs.bin"
        write_krsv(ref_path, np.stack([index.references[e] for e in ids])
                   if ids else np.zeros((0, index.dim), dtype=np.float32))
        with open(str(ref_path) + ".meta.jsonl", "w", encoding="utf-8") as fh:
            for entity_id in ids:
                fh.write(json.dumps({"entity_id": entity_id}) + "\n")


def load_index(directory: str | Path, checkpoint: Checkpoint | None = None) -> VectorIndex:
    directory = Path(directory)
    vec_path = directory / "vectors.bin"
    matrix = read_krsv(vec_path)
    prototypes: list[Prototype] = []
    with open(str(vec_path) + ".meta.jsonl", encoding="utf-8") as fh:
        for row, line in enumerate(l for l in fh if l.strip()):
            record = json.loads(line)
            prototypes.append(Prototype(
                entity_id=record["entity_id"],
                example=MentionExample.from_record(record["example"]),
                source=record["source"],
                vector=matrix[row].copy()))
    if len(prototypes) != matrix.shape[0]:
        raise DataError(f"{vec_path}: sidecar rows != vector rows")
    references = None
    ref_path = directory / "refs.bin"
    if ref_path.exists():
        ref_matrix = read_krsv(ref_path)
        ids = []
        with open(str(ref_path) + ".meta.jsonl", encoding="utf-8") as fh:
            ids = [json.loads(line)["entity_id"] for line in fh if line.strip()]
        if len(ids) != ref_matrix.shape[0]:
            raise DataError(f"{ref_path}: sidecar rows != vector rows")
        references = {e: ref_matrix[i].copy() for i, e in enumerate(ids)}
    entity_ids = None
    ent_path = directory / "entities.txt"
    if ent_path.exists():
        entity_ids = [line.strip() for line in ent_path.read_text().splitlines() if line.strip()]
    return VectorIndex(prototypes, matrix.shape[1], references=references,
                       checkpoint=checkpoint, entity_ids=entity_ids)
