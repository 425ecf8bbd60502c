"""Cross-attention re-ranking of top-K link candidates.

The cross input concatenates the query's mention template with the candidate
prototype's template, dropping the candidate's leading [CLS] so exactly one
[CLS] remains. A linear head over the joint [CLS] state yields the re-ranking
score; training minimizes cross-entropy over the K candidate scores against
the gold position.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoder import (
    CLS,
    EncoderConfig,
    M_END,
    M_START,
    SEP,
    TransformerEncoder,
    Vocabulary,
    _load_tensors,
    pad_batch,
    read_krsm,
    vocab_path_for,
    write_krsm,
)
from .errors import (
    ConfigError,
    DataError,
    NonFiniteGradientError,
    NoTrainableExamplesError,
    SequenceTooLongError,
    SkeletonsTooLongError,
)
from .mention_gen import MentionExample, MentionStore
from .prototype_index import Candidate, LinkResult, VectorIndex


@dataclass(frozen=True)
class RerankConfig:
    lr: float = 1e-3
    steps: int = 200
    seed: int = 1729


def build_cross_tokens(query: MentionExample, candidate: MentionExample,
                       max_len: int) -> list[str]:
    """Joint template as string tokens, trimmed evenly across both halves.

    Trimming removes outer-end context tokens from whichever half currently
    has more context (ties trim the candidate half), always from that half's
    longer side (ties take the left side). Both mention skeletons survive.
    """
    q_span, c_span = query.mention.split(), candidate.mention.split()
    skeleton = (4 + len(q_span)) + (3 + len(c_span))
    if skeleton > max_len:
        raise SkeletonsTooLongError(
            f"joint skeleton of {skeleton} tokens exceeds max_len {max_len}")
    budget = max_len - skeleton
    ql, qr = list(query.ctx_l), list(query.ctx_r)
    cl, cr = list(candidate.ctx_l), list(candidate.ctx_r)
    while len(ql) + len(qr) + len(cl) + len(cr) > budget:
        if len(ql) + len(qr) > len(cl) + len(cr):
            side_l, side_r = ql, qr
        else:
            side_l, side_r = cl, cr
        if len(side_l) >= len(side_r):
            side_l.pop(0)
        else:
            side_r.pop()
    return ([CLS, *ql, M_START, *q_span, M_END, *qr, SEP]
            + [*cl, M_START, *c_span, M_END, *cr, SEP])


def build_cross_input(query: MentionExample, candidate: MentionExample,
                      vocab: Vocabulary, max_len: int) -> list[int]:
    return vocab.encode(build_cross_tokens(query, candidate, max_len))


class CrossEncoder(nn.Module):
    """Transformer encoder plus a scalar scoring head over the [CLS] state."""

    def __init__(self, config: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.encoder = TransformerEncoder(config, vocab_size, rng)
        # Zero-initialized head: fresh models score every pairing identically.
        self.head = nn.Linear(config.dim, 1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(ids, pad_mask)).squeeze(-1)


@dataclass
class RerankModel:
    """Cross encoder bundled with the vocabulary it was trained with."""

    config: EncoderConfig
    vocab: Vocabulary
    model: CrossEncoder

    @classmethod
    def initialize(cls, config: EncoderConfig, vocab: Vocabulary) -> "RerankModel":
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        return cls(config=config, vocab=vocab, model=CrossEncoder(config, len(vocab), rng))

    def score_sequences(self, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
        ids, mask = pad_batch(sequences)
        return self.model(ids, mask)

    def score_pair(self, query: MentionExample, candidate: MentionExample) -> float:
        seq = build_cross_input(query, candidate, self.vocab, self.config.max_len)
        return rerank_score(seq, self)

    def save(self, path: str | Path) -> None:
        tensors = self.model.encoder.ordered_parameters() + [
            self.model.head.weight, self.model.head.bias]
        write_krsm(path, kind="cross", config=self.config, vocab_size=len(self.vocab),
                   tensors=tensors)
        self.vocab.save(vocab_path_for(path))

    @classmethod
    def load(cls, path: str | Path) -> "RerankModel":
        kind, config, vocab_size, payload = read_krsm(path)
        if kind != "cross":
            raise DataError(f"checkpoint {path} holds a {kind!r} model, expected 'cross'")
        vocab = Vocabulary.load(vocab_path_for(path))
        if len(vocab) != vocab_size:
            raise DataError("vocabulary size disagrees with checkpoint header")
        reranker = cls.initialize(config, vocab)
        tensors = reranker.model.encoder.ordered_parameters() + [
            reranker.model.head.weight, reranker.model.head.bias]
        _load_tensors(tensors, payload, path)
        return reranker


def rerank_score(sequence: Sequence[int], model: RerankModel) -> float:
    """Deterministic scalar score of one joint sequence."""
    if len(sequence) > model.config.max_len:
        raise SequenceTooLongError(
            f"sequence length {len(sequence)} exceeds max_len {model.config.max_len}")
    with torch.no_grad():
        return float(model.score_sequences([list(sequence)])[0])


def _cross_entropy(logits: torch.Tensor, target: int) -> torch.Tensor:
    top = logits.max()
    return top + torch.log(torch.exp(logits - top).sum()) - logits[target]


def train_reranker(store: MentionStore, index: VectorIndex, k: int,
                   config: RerankConfig) -> RerankModel:
    """Train the cross encoder on self-supervised mentions paired with top-K candidates.

    Mentions whose gold entity is not retrieved in the top K are skipped; if a
    whole pass over the store is skipped, there is nothing to train on.
    """
    if index.checkpoint is None:
        raise DataError("reranker training needs an index with an attached encoder")
    enc_config = index.checkpoint.config
    model = RerankModel.initialize(
        EncoderConfig(dim=enc_config.dim, layers=enc_config.layers, heads=enc_config.heads,
                      max_len=enc_config.max_len, seed=config.seed),
        index.checkpoint.vocab)
    optimizer = torch.optim.Adam(model.model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    examples = list(store)
    if not examples:
        raise NoTrainableExamplesError("mention store is empty")
    order = rng.permutation(len(examples))
    updates = 0
    cursor = 0
    skipped_in_pass = 0
    while updates < config.steps:
        if cursor == len(order):
            if skipped_in_pass == len(order) and updates == 0:
                raise NoTrainableExamplesError(
                    "gold entity absent from the top-K candidates of every example")
            cursor = 0
            skipped_in_pass = 0
            order = rng.permutation(len(examples))
        example = examples[int(order[cursor])]
        cursor += 1
        candidates = index.link_vector(index.encode_query(example), top_k=k)
        gold_pos = next((i for i, c in enumerate(candidates)
                         if c.entity_id == example.entity_id), None)
        if gold_pos is None or any(c.prototype is None for c in candidates):
            skipped_in_pass += 1
            continue
        sequences = [
            build_cross_input(example, c.prototype.example, model.vocab,
                              model.config.max_len)
            for c in candidates]
        logits = model.score_sequences(sequences)
        loss = _cross_entropy(logits, gold_pos)
        optimizer.zero_grad()
        loss.backward()
        for name, param in model.model.named_parameters():
            if param.grad is not None and not torch.all(torch.isfinite(param.grad)):
                raise NonFiniteGradientError(name)
        optimizer.step()
        updates += 1
    return model


def rerank(result: LinkResult, model: RerankModel) -> LinkResult:
    """Reorder candidates by descending cross-attention score.

    The candidate set is never changed. Candidates without a prototype text
    (reference-only fallbacks) cannot be cross-scored and are placed after the
    scored ones, keeping their original relative order.
    """
    scored: list[tuple[float, Candidate]] = []
    unscored: list[Candidate] = []
    for candidate in result.candidates:
        if candidate.prototype is None:
            unscored.append(candidate)
            continue
        scored.append((model.score_pair(result.query, candidate.prototype.example),
                       candidate))
    scored.sort(key=lambda pair: (-pair[0], pair[1].entity_id))
    return LinkResult(result.query, [c for _, c in scored] + unscored)
