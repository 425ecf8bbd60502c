"""Entity catalog loading, surface-form indexing, and reference text rendering.

The catalog format is JSONL: one object per line with keys
{"id","name","aliases","stn","semtype","description"}; the optional keys may
be absent. Surfaces are indexed case-sensitively and exactly as written.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import CatalogError, ConfigError, UnknownEntityError

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"

# Joins aliases inside a reference text; never appears in identifiers.
ALIAS_DELIMITER = ";"

_OPTIONAL_KEYS = ("aliases", "stn", "semtype", "description")
_ALL_KEYS = ("id", "name") + _OPTIONAL_KEYS


@dataclass(frozen=True)
class Entity:
    """One ontology record: unique id, preferred name, and optional knowledge."""

    id: str
    name: str
    aliases: tuple[str, ...] = ()
    stn: str | None = None
    semtype: str | None = None
    description: str | None = None

    def __post_init__(self):
        if not self.id:
            raise CatalogError("entity id must be non-empty")
        if not self.name:
            raise CatalogError(f"entity {self.id!r}: name must be non-empty")
        if len(set(self.aliases)) != len(self.aliases):
            raise CatalogError(f"entity {self.id!r}: duplicate aliases")
        if self.name in self.aliases:
            raise CatalogError(f"entity {self.id!r}: name repeated in aliases")

    def surfaces(self, include_aliases: bool) -> tuple[str, ...]:
        return (self.name, *self.aliases) if include_aliases else (self.name,)


class EntityCatalog:
    """Immutable id -> Entity mapping; lookup of an unknown id is an error."""

    def __init__(self, entities: list[Entity]):
        self._by_id: dict[str, Entity] = {}
        for entity in entities:
            if entity.id in self._by_id:
                raise CatalogError(f"duplicate entity id {entity.id!r}")
            self._by_id[entity.id] = entity

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._by_id.values())

    def __getitem__(self, entity_id: str) -> Entity:
        try:
            return self._by_id[entity_id]
        except KeyError:
            raise UnknownEntityError(f"unknown entity id {entity_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self._by_id)


def _entity_from_record(record: dict, lineno: int) -> Entity:
    if not isinstance(record, dict):
        raise CatalogError(f"line {lineno}: expected a JSON object")
    unknown = set(record) - set(_ALL_KEYS)
    if unknown:
        raise CatalogError(f"line {lineno}: unknown keys {sorted(unknown)}")
    for key in ("id", "name"):
        if key not in record:
            raise CatalogError(f"line {lineno}: missing required field {key!r}")
    try:
        return Entity(
            id=record["id"],
            name=record["name"],
            aliases=tuple(record.get("aliases") or ()),
            stn=record.get("stn"),
            semtype=record.get("semtype"),
            description=record.get("description"),
        )
    except CatalogError as exc:
        raise CatalogError(f"line {lineno}: {exc}") from None


def load_catalog(path: str | Path, format: str = "jsonl") -> EntityCatalog:
    """Load and validate an entity catalog; duplicate ids are rejected."""
    if format != "jsonl":
        raise ConfigError(f"unsupported catalog format {format!r}")
    entities = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            entities.append(_entity_from_record(record, lineno))
    return EntityCatalog(entities)


def save_catalog(catalog: EntityCatalog, path: str | Path) -> None:
    """Write the catalog in canonical JSONL form (optional keys only when set)."""
    with open(path, "w", encoding="utf-8") as fh:
        for entity in catalog:
            record: dict = {"id": entity.id, "name": entity.name}
            if entity.aliases:
                record["aliases"] = list(entity.aliases)
            if entity.stn is not None:
                record["stn"] = entity.stn
            if entity.semtype is not None:
                record["semtype"] = entity.semtype
            if entity.description is not None:
                record["description"] = entity.description
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


@dataclass(frozen=True)
class SurfaceIndex:
    """Exact, case-preserved surface -> entity-id map (names, optionally aliases)."""

    surfaces: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def ambiguous(self, surface: str) -> bool:
        return len(self.surfaces.get(surface, ())) >= 2

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self.surfaces


def build_surface_index(catalog: EntityCatalog, include_aliases: bool = False) -> SurfaceIndex:
    """Map every surface form to the sorted set of entity ids that carry it.

    Names and aliases go into one merged pool, so a name of one entity
    colliding with an alias of another makes the surface ambiguous.
    """
    surfaces: dict[str, set[str]] = {}
    for entity in catalog:
        for surface in entity.surfaces(include_aliases):
            surfaces.setdefault(surface, set()).add(entity.id)
    return SurfaceIndex({s: tuple(sorted(ids)) for s, ids in surfaces.items()})


def unambiguous_surfaces(index: SurfaceIndex) -> dict[str, str]:
    """Surfaces that resolve to exactly one entity; ambiguous ones are skipped."""
    return {s: ids[0] for s, ids in index.surfaces.items() if len(ids) == 1}


def entity_reference_text(entity: Entity, include_description: bool = False) -> list[str]:
    """Render the entity-centric reference token sequence.

    Layout: [CLS] stn [SEP] semtype [SEP] aliases [SEP], with aliases joined
    by ";" and an extra "description [SEP]" segment when requested and
    available. Missing stn/semtype render as empty segments so that segment
    positions stay stable.
    """
    tokens = [CLS_TOKEN]
    tokens += (entity.stn or "").split()
    tokens.append(SEP_TOKEN)
    tokens += (entity.semtype or "").split()
    tokens.append(SEP_TOKEN)
    for i, alias in enumerate(entity.aliases):
        if i:
            tokens.append(ALIAS_DELIMITER)
        tokens += alias.split()
    tokens.append(SEP_TOKEN)
    if include_description and entity.description is not None:
        tokens += entity.description.split()
        tokens.append(SEP_TOKEN)
    return tokens
