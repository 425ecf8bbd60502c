"""Self-supervised mention generation from unlabeled text.

A multi-pattern automaton over unambiguous surface forms scans documents in
one pass; matches must start and end at word boundaries, overlaps resolve
leftmost-longest, and each match is emitted with a fixed-size whitespace-token
context window.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError, EmptySurfaceError, InvalidSpanError

SELF_SUPERVISED = "self_supervised"
GOLD = "gold"


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class MentionExample:
    """One occurrence of an entity surface form with its context window.

    After mention replacement augmentation the surface string no longer
    matches text[start_char:end_char] of the source document; the offsets keep
    pointing at the original span.
    """

    doc_id: str
    entity_id: str
    mention: str
    start_char: int
    end_char: int
    ctx_l: tuple[str, ...]
    ctx_r: tuple[str, ...]
    source: str = SELF_SUPERVISED

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "entity_id": self.entity_id,
            "mention": self.mention,
            "start_char": self.start_char,
            "end_char": self.end_char,
            "ctx_l": list(self.ctx_l),
            "ctx_r": list(self.ctx_r),
            "source": self.source,
        }

    @classmethod
    def from_record(cls, record: dict) -> "MentionExample":
        return cls(
            doc_id=record["doc_id"],
            entity_id=record["entity_id"],
            mention=record["mention"],
            start_char=record["start_char"],
            end_char=record["end_char"],
            ctx_l=tuple(record["ctx_l"]),
            ctx_r=tuple(record["ctx_r"]),
            source=record["source"],
        )


class MentionStore:
    """Append-only collection of mention examples with per-entity counts."""

    def __init__(self, examples: Iterable[MentionExample] = ()):
        self._examples: list[MentionExample] = []
        self._by_entity: dict[str, list[int]] = {}
        for example in examples:
            self.add(example)

    def add(self, example: MentionExample) -> None:
        self._by_entity.setdefault(example.entity_id, []).append(len(self._examples))
        self._examples.append(example)

    def __len__(self) -> int:
        return len(self._examples)

    def __iter__(self) -> Iterator[MentionExample]:
        return iter(self._examples)

    def __getitem__(self, i: int) -> MentionExample:
        return self._examples[i]

    def entities(self) -> list[str]:
        return sorted(self._by_entity)

    def count(self, entity_id: str) -> int:
        return len(self._by_entity.get(entity_id, ()))

    def examples_for(self, entity_id: str) -> list[MentionExample]:
        return [self._examples[i] for i in self._by_entity.get(entity_id, ())]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for example in self._examples:
                fh.write(json.dumps(example.to_record(), ensure_ascii=False,
                                    separators=(",", ":")))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "MentionStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    store.add(MentionExample.from_record(json.loads(line)))
        return store


@dataclass(frozen=True)
class RawMatch:
    start: int
    end: int
    surface: str
    entity_id: str


class Matcher:
    """Aho-Corasick automaton over unambiguous surfaces, case preserved.

    find_all returns every word-boundary match (the raw set); overlap
    resolution lives in scan_document.
    """

    def __init__(self, surfaces: dict[str, str]):
        for surface in surfaces:
            if surface == "":
                raise EmptySurfaceError("surface patterns must be non-empty")
        self._entity_by_surface = dict(surfaces)
        # goto/fail/output in flat arrays; state 0 is the root.
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._output: list[list[str]] = [[]]
        for surface in sorted(surfaces):
            self._insert(surface)
        self._build_failure_links()

    def _insert(self, surface: str) -> None:
        state = 0
        for ch in surface:
            nxt = self._goto[state].get(ch)
            if nxt is None:
                nxt = len(self._goto)
                self._goto[state][ch] = nxt
                self._goto.append({})
                self._fail.append(0)
                self._output.append([])
            state = nxt
        self._output[state].append(surface)

    def _build_failure_links(self) -> None:
        queue = deque(self._goto[0].values())
        while queue:
            state = queue.popleft()
            for ch, child in self._goto[state].items():
                queue.append(child)
                fallback = self._fail[state]
                while ch not in self._goto[fallback] and fallback != 0:
                    fallback = self._fail[fallback]
                # A fallback target is always strictly shallower than child.
                self._fail[child] = self._goto[fallback].get(ch, 0)
                self._output[child] = self._output[child] + self._output[self._fail[child]]

    def __len__(self) -> int:
        return len(self._entity_by_surface)

    def entity_for(self, surface: str) -> str:
        return self._entity_by_surface[surface]

    def find_all(self, text: str) -> list[RawMatch]:
        """All word-boundary matches in one pass, ordered by (start, end)."""
        matches = []
        state = 0
        for i, ch in enumerate(text):
            while ch not in self._goto[state] and state != 0:
                state = self._fail[state]
            state = self._goto[state].get(ch, 0)
            for surface in self._output[state]:
                start = i + 1 - len(surface)
                if _at_word_boundary(text, start, i + 1):
                    matches.append(RawMatch(start, i + 1, surface,
                                            self._entity_by_surface[surface]))
        matches.sort(key=lambda m: (m.start, m.end))
        return matches


def _at_word_boundary(text: str, start: int, end: int) -> bool:
    if start > 0 and text[start - 1].isalnum():
        return False
    if end < len(text) and text[end].isalnum():
        return False
    return True


def build_matcher(surfaces: dict[str, str]) -> Matcher:
    """Build the scan automaton from an unambiguous surface -> entity-id map."""
    return Matcher(surfaces)


def scan_document(matcher: Matcher, doc: Document) -> list[tuple[str, str, int, int]]:
    """Non-overlapping leftmost-longest matches as (surface, entity_id, start, end)."""
    selected = []
    cursor = 0
    # Raw matches sorted by (start, end); for equal starts the longest wins.
    pending = sorted(matcher.find_all(doc.text), key=lambda m: (m.start, -(m.end - m.start)))
    for match in pending:
        if match.start >= cursor:
            selected.append((match.surface, match.entity_id, match.start, match.end))
            cursor = match.end
    return selected


def extract_context(doc: Document, start: int, end: int,
                    window_size: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Whitespace-token contexts: up to window_size//2 tokens per side.

    The mention span itself is excluded; truncation at document boundaries
    does not transfer leftover budget to the other side.
    """
    if not (0 <= start < end <= len(doc.text)):
        raise InvalidSpanError(
            f"span ({start}, {end}) invalid for document {doc.doc_id!r} "
            f"of length {len(doc.text)}")
    half = window_size // 2
    left_tokens = doc.text[:start].split()
    right_tokens = doc.text[end:].split()
    ctx_l = tuple(left_tokens[-half:]) if half else ()
    ctx_r = tuple(right_tokens[:half]) if half else ()
    return ctx_l, ctx_r


@dataclass
class GenerationReport:
    documents_scanned: int = 0
    mentions_emitted: int = 0
    entities_covered: int = 0


def generate_corpus(matcher: Matcher, corpus: Iterable[Document], window_size: int,
                    store: MentionStore) -> GenerationReport:
    """Scan a corpus and append one example per resolved match to the store.

    Output order is canonicalized by (doc_id, start_char) so that scan
    parallelism or input order never changes the persisted bytes.
    """
    report = GenerationReport()
    seen_doc_ids: set[str] = set()
    emitted: list[MentionExample] = []
    for doc in corpus:
        if doc.doc_id in seen_doc_ids:
            raise DataError(f"duplicate doc_id {doc.doc_id!r} in corpus")
        seen_doc_ids.add(doc.doc_id)
        report.documents_scanned += 1
        for surface, entity_id, start, end in scan_document(matcher, doc):
            ctx_l, ctx_r = extract_context(doc, start, end, window_size)
            emitted.append(MentionExample(
                doc_id=doc.doc_id, entity_id=entity_id, mention=surface,
                start_char=start, end_char=end, ctx_l=ctx_l, ctx_r=ctx_r,
                source=SELF_SUPERVISED))
    emitted.sort(key=lambda e: (e.doc_id, e.start_char))
    for example in emitted:
        store.add(example)
    report.mentions_emitted = len(emitted)
    report.entities_covered = len({e.entity_id for e in emitted})
    return report


def load_corpus(path: str | Path) -> Iterator[Document]:
    """Yield documents from a JSONL file or a directory of .txt files."""
    path = Path(path)
    if path.is_dir():
        for txt in sorted(path.glob("*.txt")):
            yield Document(doc_id=txt.stem, text=txt.read_text(encoding="utf-8"))
        return
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                yield Document(doc_id=record["doc_id"], text=record["text"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record ({exc})") from None
