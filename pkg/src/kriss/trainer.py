"""Contrastive training: minibatch sampling, InfoNCE losses, optimization.

A minibatch holds 2N mention vectors (rows 2k and 2k+1 share entity k) and N
reference vectors aligned with the entity slots. The mention-pair loss scores
each positive pair against the other in-batch mentions; the reference loss
scores each mention against the N in-batch references.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import (
    Checkpoint,
    EncoderConfig,
    Vocabulary,
    apply_mask_augmentation,
    apply_replacement_augmentation,
    build_vocab,
    pad_batch,
    tokenize_mention,
    tokenize_reference,
)
from .errors import ConfigError, InsufficientEntitiesError, NonFiniteGradientError
from .mention_gen import MentionStore
from .ontology import EntityCatalog

TRAIN_MENTION_CAP = 3


@dataclass(frozen=True)
class TrainConfig:
    n_entities: int = 16
    tau: float = 1.0
    pi: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    p_mask: float = 0.2
    p_replace: float = 0.2
    lr: float = 1e-3
    steps: int = 2000
    seed: int = 1729

    def __post_init__(self):
        if self.tau <= 0 or self.pi <= 0:
            raise ConfigError("temperatures must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        for name in ("p_mask", "p_replace"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class RawBatch:
    """Token-id sequences for one minibatch, before encoding."""

    entity_ids: list[str]
    mention_seqs: list[list[int]]   # 2N rows; rows 2k, 2k+1 belong to entity k
    reference_seqs: list[list[int]]  # N rows aligned with entity_ids


@dataclass
class EncodedBatch:
    """Encoded minibatch: (2N, dim) mention and (N, dim) reference vectors."""

    entity_ids: list[str]
    mentions: torch.Tensor
    references: torch.Tensor


@dataclass(frozen=True)
class LossBreakdown:
    mention_pair: float
    reference: float
    joint: float


def _example_sort_key(example) -> str:
    raw = f"{example.doc_id}:{example.start_char}:{example.end_char}:{example.mention}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def cap_training_store(store: MentionStore, cap: int = TRAIN_MENTION_CAP) -> MentionStore:
    """Keep at most `cap` mentions per entity, chosen by deterministic hash order."""
    kept = []
    for entity_id in store.entities():
        examples = sorted(store.examples_for(entity_id), key=_example_sort_key)
        kept.extend(examples[:cap])
    kept.sort(key=lambda e: (e.doc_id, e.start_char, e.entity_id))
    return MentionStore(kept)


def eligible_entities(store: MentionStore) -> list[str]:
    """Entities with at least two stored mentions, in sorted id order."""
    return [e for e in store.entities() if store.count(e) >= 2]


def sample_minibatch(store: MentionStore, catalog: EntityCatalog, vocab: Vocabulary,
                     config: TrainConfig, rng: np.random.Generator,
                     max_len: int, include_description: bool = True) -> RawBatch:
    """Draw N entities and two mentions each, with augmentations applied."""
    pool = eligible_entities(store)
    if len(pool) < config.n_entities:
        raise InsufficientEntitiesError(
            f"{len(pool)} entities have >= 2 mentions; minibatch needs {config.n_entities}")
    picked = rng.choice(len(pool), size=config.n_entities, replace=False)
    entity_ids = [pool[i] for i in picked]
    mention_seqs: list[list[int]] = []
    reference_seqs: list[list[int]] = []
    for entity_id in entity_ids:
        examples = store.examples_for(entity_id)
        first, second = rng.choice(len(examples), size=2, replace=False)
        for example in (examples[int(first)], examples[int(second)]):
            example = apply_replacement_augmentation(example, catalog, config.p_replace, rng)
            seq = tokenize_mention(example, vocab, max_len)
            mention_seqs.append(apply_mask_augmentation(seq, config.p_mask, rng))
        reference_seqs.append(
            tokenize_reference(catalog[entity_id], vocab, max_len, include_description))
    return RawBatch(entity_ids, mention_seqs, reference_seqs)


def encode_batch(checkpoint: Checkpoint, batch: RawBatch) -> EncodedBatch:
    """Forward both encoders with gradients enabled."""
    ids, mask = pad_batch(batch.mention_seqs)
    mentions = checkpoint.mention(ids, mask)
    ids, mask = pad_batch(batch.reference_seqs)
    references = checkpoint.reference(ids, mask)
    return EncodedBatch(batch.entity_ids, mentions, references)


def _as_matrix(vectors) -> torch.Tensor:
    if isinstance(vectors, torch.Tensor):
        return vectors
    return torch.as_tensor(np.asarray(vectors))


def _log_denominator(scores: torch.Tensor) -> torch.Tensor:
    # log sum exp, stabilized by subtracting the row maximum.
    top = scores.max()
    return top + torch.log(torch.exp(scores - top).sum())


def info_nce_pair_loss(i: int, j: int, vectors, tau: float) -> torch.Tensor:
    """-log[ exp(c_i.c_j / tau) / sum_{k != i} exp(c_i.c_k / tau) ]."""
    if i == j:
        raise ConfigError("positive pair needs two distinct indices")
    c = _as_matrix(vectors)
    row = c @ c[i] / tau
    others = torch.cat([row[:i], row[i + 1:]])
    return _log_denominator(others) - row[j]


def mention_pair_loss(vectors, tau: float) -> torch.Tensor:
    """Mean of both directional pair losses over the N in-batch positive pairs."""
    c = _as_matrix(vectors)
    two_n = c.shape[0]
    if two_n % 2 != 0:
        raise ConfigError("mention batch must hold 2N vectors")
    total = c.new_zeros(())
    for k in range(two_n // 2):
        total = total + info_nce_pair_loss(2 * k, 2 * k + 1, c, tau)
        total = total + info_nce_pair_loss(2 * k + 1, 2 * k, c, tau)
    return total / two_n


def mention_reference_loss(mention_vectors, reference_vectors, pi: float) -> torch.Tensor:
    """Mention-vs-reference InfoNCE, denominator over all N references."""
    c = _as_matrix(mention_vectors)
    r = _as_matrix(reference_vectors)
    if c.shape[0] != 2 * r.shape[0]:
        raise ConfigError("expected 2N mentions for N references")
    total = c.new_zeros(())
    for k in range(r.shape[0]):
        for idx in (2 * k, 2 * k + 1):
            row = r @ c[idx] / pi
            total = total + _log_denominator(row) - row[k]
    return total / c.shape[0]


def _loss_tensors(batch: EncodedBatch, config: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pair = mention_pair_loss(batch.mentions, config.tau)
    ref = mention_reference_loss(batch.mentions, batch.references, config.pi)
    return pair, ref, config.alpha * pair + config.beta * ref


def joint_loss(batch: EncodedBatch, config: TrainConfig) -> LossBreakdown:
    """Scalar snapshot of the trained objective alpha*L + beta*L'."""
    pair, ref, _ = _loss_tensors(batch, config)
    pair_f, ref_f = float(pair), float(ref)
    return LossBreakdown(pair_f, ref_f, config.alpha * pair_f + config.beta * ref_f)


def train_step(checkpoint: Checkpoint, optimizer: torch.optim.Optimizer,
               batch: RawBatch, config: TrainConfig) -> LossBreakdown:
    """One joint-objective update; aborts without stepping on non-finite gradients."""
    encoded = encode_batch(checkpoint, batch)
    pair, ref, joint = _loss_tensors(encoded, config)
    optimizer.zero_grad()
    joint.backward()
    for name, param in checkpoint.named_parameters():
        if param.grad is not None and not torch.all(torch.isfinite(param.grad)):
            raise NonFiniteGradientError(name)
    optimizer.step()
    pair_f, ref_f = float(pair), float(ref)
    return LossBreakdown(pair_f, ref_f, config.alpha * pair_f + config.beta * ref_f)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step\tL\tLprime\tjoint\n")
            for step, pair, ref, joint in self.log:
                fh.write(f"{step}\t{pair:.6f}\t{ref:.6f}\t{joint:.6f}\n")


def train_loop(store: MentionStore, catalog: EntityCatalog, config: TrainConfig,
               encoder_config: EncoderConfig | None = None,
               log_every: int = 50) -> TrainResult:
    """Cap the store, build the vocabulary, then run `steps` Adam updates.

    Fully reproducible from config.seed: the capped store, vocabulary,
    initialization, and sampling stream are all derived deterministically.
    """
    torch.manual_seed(config.seed)
    capped = cap_training_store(store)
    vocab = build_vocab(capped, min_freq=2)
    enc_config = encoder_config or EncoderConfig(seed=config.seed)
    checkpoint = Checkpoint.initialize(enc_config, vocab)
    result = TrainResult(checkpoint=checkpoint)
    if config.steps == 0:
        return result
    optimizer = torch.optim.Adam(list(checkpoint.parameters()), lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    for step in range(1, config.steps + 1):
        batch = sample_minibatch(capped, catalog, vocab, config, rng, enc_config.max_len)
        losses = train_step(checkpoint, optimizer, batch, config)
        if step % log_every == 0 or step == config.steps or step == 1:
            result.log.append((step, losses.mention_pair, losses.reference, losses.joint))
    return result


def load_train_config(path: str | Path, seed: int | None = None) -> TrainConfig:
    """Read a flat key=value training config; unknown keys are rejected."""
    values: dict = {}
    casts = {
        "n_entities": int, "tau": float, "pi": float, "alpha": float, "beta": float,
        "p_mask": float, "p_replace": float, "lr": float, "steps": int, "seed": int,
    }
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in casts:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = casts[key](raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}") from None
    if seed is not None:
        values["seed"] = seed
    return TrainConfig(**values)
