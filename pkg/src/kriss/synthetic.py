"""Synthetic ontology and corpus builder for the demo and end-to-end checks.

Every entity gets a private context vocabulary, so mentions are separable
from context alone. Five entity pairs share an alias: those surfaces are
ambiguous, excluded from self-supervision, and exercise context
disambiguation and the lenient-metric inflation. A "hard" split renders
mentions with unseen surfaces in blended contexts, where adding gold
prototypes should pay off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mention_gen import GOLD, Document, MentionExample, extract_context
from .ontology import Entity, EntityCatalog, save_catalog

_SYLLABLES = ("ka", "ri", "zo", "mel", "tu", "ven", "dor", "pla", "qui", "xen")
_FILLERS = ("the", "of", "in", "and", "with", "for", "study", "results",
            "analysis", "observed", "across", "samples")
_SEMTYPES = ("compound", "pathway", "lesion", "assay", "device")


def _word(*keys: int) -> str:
    parts = [_SYLLABLES[k % len(_SYLLABLES)] for k in keys]
    return "".join(parts) + "".join(str(k % 97) for k in keys[-2:])


@dataclass
class WorldConfig:
    n_entities: int = 50
    n_docs: int = 5000
    n_shared_pairs: int = 5
    pool_size: int = 12
    window: int = 64
    test_per_entity: int = 4
    disamb_per_entity: int = 10
    hard_test_per_entity: int = 4
    seed: int = 1729

    def __post_init__(self):
        assert self.n_entities >= 2 * self.n_shared_pairs + 2


@dataclass
class SyntheticWorld:
    config: WorldConfig
    root: Path
    entities_path: Path
    corpus_path: Path
    test_path: Path
    disamb_path: Path
    inflation_path: Path
    hard_train_path: Path
    hard_test_path: Path
    domain_path: Path
    catalog: EntityCatalog


def _entity_name(i: int) -> str:
    return _word(i, i * 3 + 1)


def _entity_alias(i: int) -> str:
    return _word(i * 5 + 2, i) + "syn"


def _shared_alias(pair: int) -> str:
    return _word(pair * 11 + 3, pair * 7 + 5) + "amb"


def _hard_surface(i: int) -> str:
    return _word(i * 13 + 4, i * 17 + 9) + "rare"


def _pool(i: int, size: int) -> list[str]:
    return [_word(i * 2 + j, j * 3 + i) + f"c{i}" for j in range(size)]


def build_catalog(config: WorldConfig) -> EntityCatalog:
    entities = []
    for i in range(config.n_entities):
        aliases = [_entity_alias(i)]
        if i < 2 * config.n_shared_pairs:
            aliases.append(_shared_alias(i // 2))
        description = None
        if i % 3 == 0:
            description = f"prototypical {_SEMTYPES[i % len(_SEMTYPES)]} record {_word(i, i + 1)}"
        entities.append(Entity(
            id=f"E{i:04d}",
            name=_entity_name(i),
            aliases=tuple(aliases),
            stn=f"A{i // 10 + 1}.{i % 10 + 1}",
            semtype=_SEMTYPES[i % len(_SEMTYPES)],
            description=description,
        ))
    return EntityCatalog(entities)


def _context_tokens(rng: np.random.Generator, pool: list[str], length: int) -> list[str]:
    tokens = []
    for _ in range(length):
        if rng.random() < 0.7:
            tokens.append(pool[int(rng.integers(len(pool)))])
        else:
            tokens.append(_FILLERS[int(rng.integers(len(_FILLERS)))])
    return tokens


def build_corpus(config: WorldConfig, rng: np.random.Generator) -> list[Document]:
    docs = []
    pools = [_pool(i, config.pool_size) for i in range(config.n_entities)]
    for d in range(config.n_docs):
        i = d % config.n_entities
        tokens = _context_tokens(rng, pools[i], int(rng.integers(10, 18)))
        surface = _entity_name(i) if rng.random() < 0.7 else _entity_alias(i)
        tokens.insert(int(rng.integers(len(tokens) + 1)), surface)
        if i < 2 * config.n_shared_pairs and rng.random() < 0.1:
            # Plant the shared (ambiguous) alias; generation must skip it.
            tokens.insert(int(rng.integers(len(tokens) + 1)), _shared_alias(i // 2))
        docs.append(Document(doc_id=f"doc{d:05d}", text=" ".join(tokens) + " ."))
    return docs


def _gold_example(doc_id: str, entity_id: str, surface: str, left: list[str],
                  right: list[str], window: int) -> MentionExample:
    text = " ".join([*left, surface, *right])
    start = len(" ".join(left)) + 1 if left else 0
    end = start + len(surface)
    doc = Document(doc_id=doc_id, text=text)
    ctx_l, ctx_r = extract_context(doc, start, end, window)
    return MentionExample(doc_id=doc_id, entity_id=entity_id, mention=surface,
                          start_char=start, end_char=end, ctx_l=ctx_l, ctx_r=ctx_r,
                          source=GOLD)


def _split_context(rng: np.random.Generator, tokens: list[str]) -> tuple[list[str], list[str]]:
    cut = int(rng.integers(len(tokens) + 1))
    return tokens[:cut], tokens[cut:]


def build_test_mentions(config: WorldConfig, rng: np.random.Generator) -> list[MentionExample]:
    """Held-out mentions with known surfaces in fresh same-pool contexts."""
    out = []
    for i in range(config.n_entities):
        pool = _pool(i, config.pool_size)
        for t in range(config.test_per_entity):
            surface = _entity_name(i) if t % 2 == 0 else _entity_alias(i)
            left, right = _split_context(rng, _context_tokens(rng, pool, 12))
            out.append(_gold_example(f"test{i:04d}n{t}", f"E{i:04d}", surface,
                                     left, right, config.window))
    return out


def build_disamb_mentions(config: WorldConfig, rng: np.random.Generator) -> list[MentionExample]:
    """Mentions whose surface is a shared alias; only context identifies the entity."""
    out = []
    for i in range(2 * config.n_shared_pairs):
        pool = _pool(i, config.pool_size)
        surface = _shared_alias(i // 2)
        for t in range(config.disamb_per_entity):
            left, right = _split_context(rng, _context_tokens(rng, pool, 12))
            out.append(_gold_example(f"amb{i:04d}n{t}", f"E{i:04d}", surface,
                                     left, right, config.window))
    return out


def build_inflation_mentions(config: WorldConfig, rng: np.random.Generator) -> list[MentionExample]:
    """A set with a majority of ambiguous-surface mentions for metric auditing."""
    out = []
    for i in range(2 * config.n_shared_pairs):
        pool = _pool(i, config.pool_size)
        for t in range(6):
            left, right = _split_context(rng, _context_tokens(rng, pool, 12))
            out.append(_gold_example(f"inf-a{i:04d}n{t}", f"E{i:04d}", _shared_alias(i // 2),
                                     left, right, config.window))
    unambiguous_ids = range(2 * config.n_shared_pairs, config.n_entities)
    for t, i in enumerate(list(unambiguous_ids)[:40]):
        pool = _pool(i, config.pool_size)
        left, right = _split_context(rng, _context_tokens(rng, pool, 12))
        out.append(_gold_example(f"inf-u{i:04d}n{t}", f"E{i:04d}", _entity_name(i),
                                 left, right, config.window))
    return out


def _hard_context(rng: np.random.Generator, pool_a: list[str], pool_b: list[str]) -> list[str]:
    tokens = []
    for t in range(14):
        pool = pool_a if t % 2 == 0 else pool_b
        tokens.append(pool[int(rng.integers(len(pool)))])
    return tokens


def build_hard_split(config: WorldConfig, rng: np.random.Generator
                     ) -> tuple[list[MentionExample], list[MentionExample]]:
    """(gold-train, gold-test): unseen surfaces in blended two-entity contexts.

    Each entity's context mixes its own pool with a fixed partner's pool, so
    self-supervised prototypes (pure pools) are a poor match while gold
    prototypes drawn from the same blend are a strong one.
    """
    train, test = [], []
    n = config.n_entities
    for i in range(n):
        partner = (i + 7) % n
        pool_a, pool_b = _pool(i, config.pool_size), _pool(partner, config.pool_size)
        surface = _hard_surface(i)
        left, right = _split_context(rng, _hard_context(rng, pool_a, pool_b))
        train.append(_gold_example(f"hardtrain{i:04d}", f"E{i:04d}", surface,
                                   left, right, config.window))
        for t in range(config.hard_test_per_entity):
            left, right = _split_context(rng, _hard_context(rng, pool_a, pool_b))
            test.append(_gold_example(f"hardtest{i:04d}n{t}", f"E{i:04d}", surface,
                                      left, right, config.window))
    return train, test


def _save_mentions(examples: list[MentionExample], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example.to_record(), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")


def make_world(root: str | Path, config: WorldConfig | None = None) -> SyntheticWorld:
    """Write the synthetic ontology, corpus, and gold splits under root."""
    config = config or WorldConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seq = np.random.SeedSequence(config.seed)
    rng_corpus, rng_test, rng_disamb, rng_inflation, rng_hard = (
        np.random.default_rng(s) for s in seq.spawn(5))

    catalog = build_catalog(config)
    entities_path = root / "entities.jsonl"
    save_catalog(catalog, entities_path)

    corpus_path = root / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for doc in build_corpus(config, rng_corpus):
            fh.write(json.dumps({"doc_id": doc.doc_id, "text": doc.text},
                                ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")

    test_path = root / "test_mentions.jsonl"
    _save_mentions(build_test_mentions(config, rng_test), test_path)
    disamb_path = root / "disamb_mentions.jsonl"
    _save_mentions(build_disamb_mentions(config, rng_disamb), disamb_path)
    inflation_path = root / "inflation_mentions.jsonl"
    _save_mentions(build_inflation_mentions(config, rng_inflation), inflation_path)
    hard_train, hard_test = build_hard_split(config, rng_hard)
    hard_train_path = root / "hard_train_mentions.jsonl"
    hard_test_path = root / "hard_test_mentions.jsonl"
    _save_mentions(hard_train, hard_train_path)
    _save_mentions(hard_test, hard_test_path)

    domain_path = root / "domain_entities.txt"
    with open(domain_path, "w", encoding="utf-8") as fh:
        for entity_id in catalog.ids():
            fh.write(entity_id + "\n")

    return SyntheticWorld(
        config=config, root=root, entities_path=entities_path, corpus_path=corpus_path,
        test_path=test_path, disamb_path=disamb_path, inflation_path=inflation_path,
        hard_train_path=hard_train_path, hard_test_path=hard_test_path,
        domain_path=domain_path, catalog=catalog)
