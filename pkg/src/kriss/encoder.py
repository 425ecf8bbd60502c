"""Trainable transformer encoders for mentions and entity references.

Mention input format: [CLS] ctx_l [M_s] mention [M_e] ctx_r [SEP]; the
position-0 ([CLS]) last-layer hidden state is the mention vector. Entity
references go through a second encoder with separate parameters but the same
architecture.

Checkpoint container (.krsm): magic "KRSM", u32 version, u32 config length,
config JSON, then parameter tensors back to back as little-endian float32 in
the order given by TransformerEncoder.tensor_names() (mention encoder first,
then reference encoder; cross checkpoints store one encoder plus the scoring
head). The vocabulary is serialized as an adjacent "<path>.vocab.jsonl".
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigError,
    DataError,
    MentionTooLongError,
    NumericError,
    SequenceTooLongError,
)
from .mention_gen import MentionExample, MentionStore
from .ontology import Entity, EntityCatalog, entity_reference_text

CLS, SEP, M_START, M_END, MASK, UNK, PAD = (
    "[CLS]", "[SEP]", "[M_s]", "[M_e]", "[MASK]", "[UNK]", "[PAD]")
RESERVED_TOKENS = (CLS, SEP, M_START, M_END, MASK, UNK, PAD)
CLS_ID, SEP_ID, M_START_ID, M_END_ID, MASK_ID, UNK_ID, PAD_ID = range(7)

KRSM_MAGIC = b"KRSM"
KRSM_VERSION = 1


class Vocabulary:
    """Whole-token vocabulary with fixed reserved indices 0-6."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._token_to_id)
        self._token_to_id[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self._token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_for(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._token_to_id.get(t, UNK_ID) for t in tokens]

    def tokens(self) -> list[str]:
        return list(self._token_to_id)

    @classmethod
    def build(cls, token_counts: dict[str, int], min_freq: int = 2) -> "Vocabulary":
        """Keep tokens with count >= min_freq, most frequent first."""
        kept = sorted(
            (t for t, c in token_counts.items() if c >= min_freq and t not in RESERVED_TOKENS),
            key=lambda t: (-token_counts[t], t))
        return cls(kept)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, idx in self._token_to_id.items():
                fh.write(json.dumps({"token": token, "id": idx}, ensure_ascii=False))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                token, idx = record["token"], record["id"]
                if idx < len(RESERVED_TOKENS):
                    if RESERVED_TOKENS[idx] != token:
                        raise DataError(f"reserved token mismatch at id {idx}: {token!r}")
                    continue
                got = vocab.add(token)
                if got != idx:
                    raise DataError(f"non-contiguous vocabulary id {idx} for {token!r}")
        return vocab


def build_vocab(store: MentionStore, min_freq: int = 2) -> Vocabulary:
    """Vocabulary from a training mention store: context and mention tokens."""
    counts: dict[str, int] = {}
    for example in store:
        for token in (*example.ctx_l, *example.mention.split(), *example.ctx_r):
            counts[token] = counts.get(token, 0) + 1
    return Vocabulary.build(counts, min_freq=min_freq)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    seed: int = 1729

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.max_len < 8:
            raise ConfigError(f"max_len {self.max_len} < 8")


def _trimmed_contexts(ctx_l: Sequence[str], ctx_r: Sequence[str],
                      budget: int) -> tuple[list[str], list[str]]:
    """Trim outer-end context tokens down to budget, longer side first (ties: left)."""
    keep_l, keep_r = len(ctx_l), len(ctx_r)
    while keep_l + keep_r > budget:
        if keep_l >= keep_r:
            keep_l -= 1
        else:
            keep_r -= 1
    left = list(ctx_l[len(ctx_l) - keep_l:]) if keep_l else []
    right = list(ctx_r[:keep_r]) if keep_r else []
    return left, right


def mention_tokens(example: MentionExample, ctx_budget: int | None = None) -> list[str]:
    """String-token form of the mention template, optionally context-trimmed."""
    span = example.mention.split()
    ctx_l, ctx_r = list(example.ctx_l), list(example.ctx_r)
    if ctx_budget is not None:
        ctx_l, ctx_r = _trimmed_contexts(ctx_l, ctx_r, ctx_budget)
    return [CLS, *ctx_l, M_START, *span, M_END, *ctx_r, SEP]


def tokenize_mention(example: MentionExample, vocab: Vocabulary, max_len: int) -> list[int]:
    """Encode the mention template, trimming context symmetrically to max_len.

    The [CLS]/[M_s]/mention/[M_e]/[SEP] skeleton is never trimmed; if it alone
    exceeds max_len the example is rejected.
    """
    skeleton = 4 + len(example.mention.split())
    if skeleton > max_len:
        raise MentionTooLongError(
            f"mention skeleton of {skeleton} tokens exceeds max_len {max_len}")
    return vocab.encode(mention_tokens(example, ctx_budget=max_len - skeleton))


def tokenize_reference(entity: Entity, vocab: Vocabulary, max_len: int,
                       include_description: bool = True) -> list[int]:
    """Encode the entity-centric reference, truncated at max_len from the tail."""
    ids = vocab.encode(entity_reference_text(entity, include_description))
    return ids[:max_len]


def apply_mask_augmentation(sequence: Sequence[int], p_mask: float,
                            rng: np.random.Generator) -> list[int]:
    """All-or-nothing: with probability p_mask, mask every token between the markers."""
    seq = list(sequence)
    if M_START_ID not in seq or M_END_ID not in seq:
        raise DataError("sequence has no [M_s] .. [M_e] span to mask")
    if rng.random() >= p_mask:
        return seq
    i = seq.index(M_START_ID)
    j = seq.index(M_END_ID)
    return seq[:i + 1] + [MASK_ID] * (j - i - 1) + seq[j:]


def apply_replacement_augmentation(example: MentionExample, catalog: EntityCatalog,
                                   p_replace: float,
                                   rng: np.random.Generator) -> MentionExample:
    """With probability p_replace, swap the mention for one of its entity's aliases.

    Contexts and entity id are untouched; entities without a differing alias
    pass through unchanged.
    """
    draw = rng.random()
    entity = catalog[example.entity_id]
    candidates = [a for a in entity.aliases if a != example.mention]
    if draw >= p_replace or not candidates:
        return example
    alias = candidates[int(rng.integers(len(candidates)))]
    return dc_replace(example, mention=alias)


def _uniform_tensor(rng: np.random.Generator, shape: tuple[int, ...]) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(-0.02, 0.02, size=shape).astype(np.float32))


class _Block(nn.Module):
    """Post-norm transformer block: self-attention and feed-forward sublayers."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        d = config.dim
        self.heads = config.heads
        self.head_dim = d // config.heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 4 * d)
        self.ff2 = nn.Linear(4 * d, d)
        self.ln2 = nn.LayerNorm(d)
        for linear in (self.q, self.k, self.v, self.o, self.ff1, self.ff2):
            with torch.no_grad():
                linear.weight.copy_(_uniform_tensor(rng, tuple(linear.weight.shape)))
                linear.bias.zero_()

    def forward(self, h: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        bsz, length, d = h.shape
        q = self.q(h).view(bsz, length, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(h).view(bsz, length, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(h).view(bsz, length, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # Mask padded keys for real queries only; padded query rows stay finite
        # (their outputs are never read and receive zero gradient).
        mask = pad_mask[:, None, None, :] & ~pad_mask[:, None, :, None]
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(bsz, length, d)
        h = self.ln1(h + self.o(mixed))
        h = self.ln2(h + self.ff2(torch.nn.functional.gelu(self.ff1(h))))
        return h


class TransformerEncoder(nn.Module):
    """Token+position embeddings followed by `layers` attention blocks.

    forward() returns the [CLS] (position 0) hidden state of the last layer.
    """

    def __init__(self, config: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.token_emb = nn.Parameter(_uniform_tensor(rng, (vocab_size, config.dim)))
        self.pos_emb = nn.Parameter(_uniform_tensor(rng, (config.max_len, config.dim)))
        self.blocks = nn.ModuleList(_Block(config, rng) for _ in range(config.layers))

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        length = ids.shape[1]
        if length > self.config.max_len:
            raise SequenceTooLongError(
                f"sequence length {length} exceeds max_len {self.config.max_len}")
        h = self.token_emb[ids] + self.pos_emb[:length]
        for block in self.blocks:
            h = block(h, pad_mask)
        return h[:, 0]

    def tensor_names(self) -> list[str]:
        """Checkpoint serialization order of this encoder's parameter tensors."""
        names = ["token_emb", "pos_emb"]
        for i in range(self.config.layers):
            for sub in ("q.weight", "q.bias", "k.weight", "k.bias", "v.weight",
                        "v.bias", "o.weight", "o.bias", "ln1.weight", "ln1.bias",
                        "ff1.weight", "ff1.bias", "ff2.weight", "ff2.bias",
                        "ln2.weight", "ln2.bias"):
                names.append(f"blocks.{i}.{sub}")
        return names

    def ordered_parameters(self) -> list[torch.Tensor]:
        state = dict(self.named_parameters())
        return [state[name] for name in self.tensor_names()]


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length id sequences into (ids, pad_mask) tensors."""
    if not sequences:
        raise DataError("cannot pad an empty batch")
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), PAD_ID, dtype=torch.long)
    pad_mask = torch.ones((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        pad_mask[row, :len(seq)] = False
    return ids, pad_mask


def _check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")
    return array


def encode_sequences(encoder: TransformerEncoder, sequences: Sequence[Sequence[int]],
                     batch_size: int = 64) -> np.ndarray:
    """Encode token-id sequences to a float32 (n, dim) matrix, without gradients."""
    out = np.empty((len(sequences), encoder.config.dim), dtype=np.float32)
    with torch.no_grad():
        for lo in range(0, len(sequences), batch_size):
            chunk = sequences[lo:lo + batch_size]
            ids, pad_mask = pad_batch(chunk)
            vecs = encoder(ids, pad_mask)
            out[lo:lo + len(chunk)] = vecs.to(torch.float32).numpy()
    return _check_finite(out, "encoded vectors")


def encode_mention(sequence: Sequence[int], encoder: TransformerEncoder) -> np.ndarray:
    """Encode one tokenized mention; deterministic in (sequence, parameters)."""
    return encode_sequences(encoder, [list(sequence)])[0]


def encode_reference(entity: Entity, vocab: Vocabulary, encoder: TransformerEncoder,
                     include_description: bool = True) -> np.ndarray:
    """Encode one entity-centric reference through the reference parameter set."""
    seq = tokenize_reference(entity, vocab, encoder.config.max_len, include_description)
    return encode_sequences(encoder, [seq])[0]


@dataclass
class Checkpoint:
    """Paired mention/reference encoders plus their shared vocabulary."""

    config: EncoderConfig
    vocab: Vocabulary
    mention: TransformerEncoder
    reference: TransformerEncoder

    @classmethod
    def initialize(cls, config: EncoderConfig, vocab: Vocabulary) -> "Checkpoint":
        seq = np.random.SeedSequence(config.seed)
        rng_m, rng_r = (np.random.default_rng(s) for s in seq.spawn(2))
        return cls(config=config, vocab=vocab,
                   mention=TransformerEncoder(config, len(vocab), rng_m),
                   reference=TransformerEncoder(config, len(vocab), rng_r))

    def parameters(self):
        yield from self.mention.parameters()
        yield from self.reference.parameters()

    def named_parameters(self):
        for name, p in self.mention.named_parameters():
            yield f"mention.{name}", p
        for name, p in self.reference.named_parameters():
            yield f"reference.{name}", p

    def save(self, path: str | Path) -> None:
        tensors = self.mention.ordered_parameters() + self.reference.ordered_parameters()
        write_krsm(path, kind="bi", config=self.config, vocab_size=len(self.vocab),
                   tensors=tensors)
        self.vocab.save(vocab_path_for(path))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        kind, config, vocab_size, payload = read_krsm(path)
        if kind != "bi":
            raise DataError(f"checkpoint {path} holds a {kind!r} model, expected 'bi'")
        vocab = Vocabulary.load(vocab_path_for(path))
        if len(vocab) != vocab_size:
            raise DataError("vocabulary size disagrees with checkpoint header")
        ckpt = cls.initialize(config, vocab)
        tensors = ckpt.mention.ordered_parameters() + ckpt.reference.ordered_parameters()
        _load_tensors(tensors, payload, path)
        return ckpt


def vocab_path_for(path: str | Path) -> Path:
    return Path(str(path) + ".vocab.jsonl")


def write_krsm(path: str | Path, kind: str, config: EncoderConfig, vocab_size: int,
               tensors: Sequence[torch.Tensor]) -> None:
    header = {
        "kind": kind,
        "dim": config.dim,
        "layers": config.layers,
        "heads": config.heads,
        "max_len": config.max_len,
        "seed": config.seed,
        "vocab_size": vocab_size,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(KRSM_MAGIC)
        fh.write(struct.pack("<I", KRSM_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in tensors:
            fh.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def read_krsm(path: str | Path) -> tuple[str, EncoderConfig, int, bytes]:
    with open(path, "rb") as fh:
        if fh.read(4) != KRSM_MAGIC:
            raise DataError(f"{path}: not a KRSM checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != KRSM_VERSION:
            raise DataError(f"{path}: unsupported KRSM version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    config = EncoderConfig(dim=header["dim"], layers=header["layers"],
                           heads=header["heads"], max_len=header["max_len"],
                           seed=header["seed"])
    return header["kind"], config, header["vocab_size"], payload


def _load_tensors(tensors: Sequence[torch.Tensor], payload: bytes, path: str | Path) -> None:
    offset = 0
    for tensor in tensors:
        n = tensor.numel()
        end = offset + 4 * n
        if end > len(payload):
            raise DataError(f"{path}: checkpoint payload truncated")
        array = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(array.copy()).view(tensor.shape))
        offset = end
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} trailing bytes in checkpoint")
