"""Linking metrics: strict id accuracy, the lenient surface-form metric, the
mention-as-is baseline, ambiguity partitions, and top-K oracle accuracy.

The lenient metric counts a predicted surface as correct when it matches the
gold entity's name or any alias case-insensitively, ignoring that the surface
may map to several entities. It exists here to quantify its own inflation,
not to certify systems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DataError, InsufficientCandidatesError
from .mention_gen import MentionExample, MentionStore
from .ontology import EntityCatalog
from .prototype_index import Candidate, LinkResult


def normalize_surface(surface: str) -> str:
    """Case-fold and collapse whitespace runs; the lenient comparison key."""
    return " ".join(surface.split()).lower()


@dataclass
class GoldDataset:
    """Gold mention examples plus an optional domain-entity candidate set."""

    examples: list[MentionExample]
    domain_ids: frozenset[str] | None = None

    def __post_init__(self):
        if self.domain_ids is not None:
            missing = {e.entity_id for e in self.examples} - self.domain_ids
            if missing:
                raise DataError(
                    f"{len(missing)} gold entity ids outside the domain set "
                    f"(e.g. {sorted(missing)[:3]})")

    def __len__(self) -> int:
        return len(self.examples)


def load_gold(path: str | Path, domain_path: str | Path | None = None) -> GoldDataset:
    store = MentionStore.load(path)
    domain_ids = None
    if domain_path is not None:
        lines = Path(domain_path).read_text(encoding="utf-8").splitlines()
        domain_ids = frozenset(line.strip() for line in lines if line.strip())
    return GoldDataset(examples=list(store), domain_ids=domain_ids)


def build_ci_surface_map(catalog: EntityCatalog) -> dict[str, tuple[str, ...]]:
    """Case-insensitive surface -> sorted entity ids over names and aliases."""
    surfaces: dict[str, set[str]] = {}
    for entity in catalog:
        for surface in (entity.name, *entity.aliases):
            surfaces.setdefault(normalize_surface(surface), set()).add(entity.id)
    return {s: tuple(sorted(ids)) for s, ids in surfaces.items()}


def _check_alignment(n_predictions: int, gold: GoldDataset) -> None:
    if n_predictions != len(gold):
        raise AlignmentError(
            f"{n_predictions} predictions for {len(gold)} gold mentions")


def strict_accuracy(predictions: Sequence[LinkResult], gold: GoldDataset) -> float:
    """Fraction of mentions whose rank-1 entity id equals the gold id."""
    _check_alignment(len(predictions), gold)
    if not gold.examples:
        return 0.0
    hits = sum(
        1 for result, example in zip(predictions, gold.examples)
        if result.candidates and result.candidates[0].entity_id == example.entity_id)
    return hits / len(gold)


def _lenient_hit(surface: str | None, gold_example: MentionExample,
                 catalog: EntityCatalog) -> bool:
    if surface is None or gold_example.entity_id not in catalog:
        return False
    entity = catalog[gold_example.entity_id]
    pool = {normalize_surface(s) for s in (entity.name, *entity.aliases)}
    return normalize_surface(surface) in pool


def lenient_surface_accuracy(surfaces: Sequence[str | None], gold: GoldDataset,
                             catalog: EntityCatalog) -> float:
    """Fraction of predicted surfaces matching the gold entity's name or aliases."""
    _check_alignment(len(surfaces), gold)
    if not gold.examples:
        return 0.0
    hits = sum(1 for surface, example in zip(surfaces, gold.examples)
               if _lenient_hit(surface, example, catalog))
    return hits / len(gold)


@dataclass
class AsIsBaseline:
    """Mention-as-is system: the predicted surface is the mention itself."""

    strict: float
    lenient: float
    resolved_ids: list[str | None]


def as_is_baseline(gold: GoldDataset, catalog: EntityCatalog, seed: int = 1729) -> AsIsBaseline:
    """Echo each mention string back as the prediction.

    Lenient scoring matches it against the gold entity's surface pool. Strict
    scoring must name one entity: an ambiguous surface is resolved by a seeded
    uniform choice among its matches, and a surface matching nothing scores
    zero.
    """
    surface_map = build_ci_surface_map(catalog)
    rng = np.random.default_rng(seed)
    resolved: list[str | None] = []
    strict_hits = 0
    for example in gold.examples:
        matches = surface_map.get(normalize_surface(example.mention), ())
        if not matches:
            resolved.append(None)
            continue
        choice = matches[int(rng.integers(len(matches)))]
        resolved.append(choice)
        if choice == example.entity_id:
            strict_hits += 1
    lenient = lenient_surface_accuracy([e.mention for e in gold.examples], gold, catalog)
    strict = strict_hits / len(gold) if gold.examples else 0.0
    return AsIsBaseline(strict=strict, lenient=lenient, resolved_ids=resolved)


def ambiguity_partition(gold: GoldDataset, catalog: EntityCatalog) -> tuple[list[int], list[int]]:
    """Split gold mention indices into (ambiguous, unambiguous).

    A mention is ambiguous iff its surface cannot be matched to exactly one
    entity as-is (case-insensitively over names and aliases); zero matches
    count as ambiguous.
    """
    surface_map = build_ci_surface_map(catalog)
    ambiguous, unambiguous = [], []
    for i, example in enumerate(gold.examples):
        matches = surface_map.get(normalize_surface(example.mention), ())
        (unambiguous if len(matches) == 1 else ambiguous).append(i)
    return ambiguous, unambiguous


def topk_oracle_accuracy(predictions: Sequence[LinkResult], gold: GoldDataset,
                         ks: Sequence[int]) -> dict[int, float]:
    """For each K, the fraction of mentions with the gold id anywhere in the top K."""
    _check_alignment(len(predictions), gold)
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise DataError("top-K list must hold integers >= 1")
    max_k = ks[-1]
    for result in predictions:
        if len(result.candidates) < max_k:
            raise InsufficientCandidatesError(
                f"a prediction carries {len(result.candidates)} candidates; "
                f"top-{max_k} oracle needs at least {max_k}")
    out = {}
    for k in ks:
        hits = sum(
            1 for result, example in zip(predictions, gold.examples)
            if example.entity_id in {c.entity_id for c in result.candidates[:k]})
        out[k] = hits / len(gold) if gold.examples else 0.0
    return out


def filter_candidates(predictions: Sequence[LinkResult],
                      domain_ids: frozenset[str]) -> list[LinkResult]:
    """Drop candidates outside the domain-entity set, preserving rank order."""
    return [
        LinkResult(r.query, [c for c in r.candidates if c.entity_id in domain_ids])
        for r in predictions]


@dataclass
class MetricReport:
    strict_accuracy: float
    lenient_accuracy: float
    as_is_accuracy: float
    ambiguous_fraction: float
    strict_on_ambiguous: float
    strict_on_unambiguous: float
    topk_oracle: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "strict_accuracy": self.strict_accuracy,
            "lenient_accuracy": self.lenient_accuracy,
            "as_is_accuracy": self.as_is_accuracy,
            "ambiguous_fraction": self.ambiguous_fraction,
            "strict_on_ambiguous": self.strict_on_ambiguous,
            "strict_on_unambiguous": self.strict_on_unambiguous,
            "topk_oracle": {str(k): v for k, v in sorted(self.topk_oracle.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        rows = [
            ("strict_accuracy", self.strict_accuracy),
            ("lenient_accuracy", self.lenient_accuracy),
            ("as_is_accuracy", self.as_is_accuracy),
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("strict_on_ambiguous", self.strict_on_ambiguous),
            ("strict_on_unambiguous", self.strict_on_unambiguous),
        ]
        rows += [(f"topk_oracle@{k}", v) for k, v in sorted(self.topk_oracle.items())]
        return "\n".join(f"{name}\t{value:.4f}" for name, value in rows)


def build_metric_report(predictions: Sequence[LinkResult], gold: GoldDataset,
                        catalog: EntityCatalog, seed: int = 1729,
                        ks: Sequence[int] = ()) -> MetricReport:
    """Assemble the full report for one prediction set.

    The system's lenient accuracy uses the rank-1 entity's canonical name as
    its predicted surface, so a strict hit is always a lenient hit.
    """
    _check_alignment(len(predictions), gold)
    surfaces = [
        catalog[r.candidates[0].entity_id].name
        if r.candidates and r.candidates[0].entity_id in catalog else None
        for r in predictions]
    strict = strict_accuracy(predictions, gold)
    lenient = lenient_surface_accuracy(surfaces, gold, catalog)
    as_is = as_is_baseline(gold, catalog, seed=seed)
    ambiguous_idx, unambiguous_idx = ambiguity_partition(gold, catalog)

    def _strict_subset(indices: list[int]) -> float:
        if not indices:
            return 0.0
        hits = sum(
            1 for i in indices
            if predictions[i].candidates
            and predictions[i].candidates[0].entity_id == gold.examples[i].entity_id)
        return hits / len(indices)

    total = len(gold)
    return MetricReport(
        strict_accuracy=strict,
        lenient_accuracy=lenient,
        as_is_accuracy=as_is.lenient,
        ambiguous_fraction=len(ambiguous_idx) / total if total else 0.0,
        strict_on_ambiguous=_strict_subset(ambiguous_idx),
        strict_on_unambiguous=_strict_subset(unambiguous_idx),
        topk_oracle=topk_oracle_accuracy(predictions, gold, ks) if ks else {},
    )


# -- results serialization -----------------------------------------------------

def save_results(predictions: Sequence[LinkResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in predictions:
            record = {
                "query": result.query.to_record(),
                "candidates": [
                    {"entity_id": c.entity_id, "score": c.score, "row": c.row}
                    for c in result.candidates],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_results(path: str | Path, index=None) -> list[LinkResult]:
    """Read results.jsonl; with an index attached, candidate prototypes are rehydrated."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            candidates = []
            for c in record["candidates"]:
                prototype = None
                if index is not None and c["row"] is not None:
                    prototype = index.prototypes[c["row"]]
                candidates.append(Candidate(entity_id=c["entity_id"], score=c["score"],
                                            prototype=prototype, row=c["row"]))
            out.append(LinkResult(MentionExample.from_record(record["query"]), candidates))
    return out
