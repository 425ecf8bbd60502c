"""Pipelined stage execution over a flat key=value configuration.

Stages run in the canonical order generate, train, index, link, rerank, eval.
Every stage appends a manifest line recording the SHA-256 of its inputs and
outputs plus wall time, so artifacts are traceable to their exact inputs and
reruns are comparable hash-for-hash.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import Checkpoint, EncoderConfig
from .errors import ConfigError, MissingDependencyError
from .evaluation import (
    build_metric_report,
    filter_candidates,
    load_gold,
    load_results,
    save_results,
)
from .mention_gen import MentionStore, build_matcher, generate_corpus, load_corpus
from .ontology import build_surface_index, load_catalog, unambiguous_surfaces
from .prototype_index import (
    build_index,
    link,
    link_with_references,
    load_index,
    sample_prototypes,
    save_index,
)
from .reranker import RerankConfig, RerankModel, rerank, train_reranker
from .trainer import TrainConfig, train_loop

STAGES = ("generate", "train", "index", "link", "rerank", "eval")

_PATH_KEYS = ("entities", "corpus", "mentions", "checkpoint", "index", "results",
              "queries", "reranker", "reranked", "report", "domain", "manifest")

_FLAG_VALUES = {"on": True, "off": False, "true": True, "false": False}


def _parse_flag(raw: str, key: str) -> bool:
    try:
        return _FLAG_VALUES[raw.lower()]
    except KeyError:
        raise ConfigError(f"{key} must be on/off, got {raw!r}") from None


@dataclass
class PipelineConfig:
    base_dir: Path
    paths: dict[str, Path] = field(default_factory=dict)
    seed: int = 1729
    window: int = 64
    use_aliases: bool = True
    encoder: EncoderConfig | None = None
    train: TrainConfig | None = None
    top_k: int = 100
    fusion: bool = False
    k_proto: int = 16
    link_seed: int | None = None
    rerank_k: int = 10
    rerank_lr: float = 1e-3
    rerank_steps: int = 200
    eval_topk: tuple[int, ...] = (1, 5, 10)
    eval_input: str = "results"

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"pipeline config declares no paths.{key}")
        return self.paths[key]

    def manifest_path(self) -> Path:
        return self.paths.get("manifest", self.base_dir / "manifest.jsonl")


def parse_pipeline_config(path: str | Path) -> PipelineConfig:
    """Read a flat dotted key=value pipeline config; unknown keys are rejected."""
    path = Path(path)
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()

    base = path.parent.resolve()
    cfg = PipelineConfig(base_dir=base)
    enc: dict = {}
    trn: dict = {}
    for key, value in raw.items():
        try:
            if key == "seed":
                cfg.seed = int(value)
            elif key.startswith("paths."):
                name = key[len("paths."):]
                if name not in _PATH_KEYS:
                    raise ConfigError(f"unknown path key {key!r}")
                cfg.paths[name] = (base / value).resolve() if not Path(value).is_absolute() \
                    else Path(value)
            elif key == "generate.window":
                cfg.window = int(value)
            elif key == "generate.aliases":
                cfg.use_aliases = _parse_flag(value, key)
            elif key in ("encoder.dim", "encoder.layers", "encoder.heads", "encoder.max_len"):
                enc[key.split(".", 1)[1]] = int(value)
            elif key == "train.n":
                trn["n_entities"] = int(value)
            elif key in ("train.tau", "train.pi", "train.alpha", "train.beta",
                         "train.p_mask", "train.p_replace", "train.lr"):
                trn[key.split(".", 1)[1]] = float(value)
            elif key == "train.steps":
                trn["steps"] = int(value)
            elif key == "link.top_k":
                cfg.top_k = int(value)
            elif key == "link.fusion":
                cfg.fusion = _parse_flag(value, key)
            elif key == "link.k_proto":
                cfg.k_proto = int(value)
            elif key == "link.seed":
                cfg.link_seed = int(value)
            elif key == "rerank.k":
                cfg.rerank_k = int(value)
            elif key == "rerank.lr":
                cfg.rerank_lr = float(value)
            elif key == "rerank.steps":
                cfg.rerank_steps = int(value)
            elif key == "eval.topk":
                cfg.eval_topk = tuple(int(v) for v in value.split(",") if v.strip())
            elif key == "eval.input":
                if value not in ("results", "reranked"):
                    raise ConfigError(f"eval.input must be results|reranked, got {value!r}")
                cfg.eval_input = value
            else:
                raise ConfigError(f"unknown pipeline config key {key!r}")
        except ValueError:
            raise ConfigError(f"{path}: bad value for {key!r}: {value!r}") from None
    cfg.encoder = EncoderConfig(seed=cfg.seed, **enc)
    cfg.train = TrainConfig(seed=cfg.seed, **trn)
    if cfg.link_seed is None:
        cfg.link_seed = cfg.seed
    return cfg


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class StageRecord:
    stage: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps({
            "stage": self.stage, "inputs": self.inputs, "outputs": self.outputs,
            "wall_time_s": round(self.wall_time_s, 3)}, sort_keys=True)


# stage -> (input path keys, output path keys); the index stage's artifact is
# a directory, hashed through its vectors.bin.
_STAGE_IO = {
    "generate": (("entities", "corpus"), ("mentions",)),
    "train": (("entities", "mentions"), ("checkpoint",)),
    "index": (("entities", "mentions", "checkpoint"), ("index",)),
    "link": (("index", "queries"), ("results",)),
    "rerank": (("index", "mentions", "results"), ("reranker", "reranked")),
    "eval": (("entities", "queries"), ("report",)),
}


def _artifact_file(cfg: PipelineConfig, key: str) -> Path:
    p = cfg.path(key)
    if key == "index":
        return p / "vectors.bin"
    if key == "checkpoint":
        return p
    return p


def _run_generate(cfg: PipelineConfig) -> None:
    catalog = load_catalog(cfg.path("entities"))
    surfaces = unambiguous_surfaces(build_surface_index(catalog, cfg.use_aliases))
    matcher = build_matcher(surfaces)
    store = MentionStore()
    generate_corpus(matcher, load_corpus(cfg.path("corpus")), cfg.window, store)
    store.save(cfg.path("mentions"))


def _run_train(cfg: PipelineConfig) -> None:
    store = MentionStore.load(cfg.path("mentions"))
    catalog = load_catalog(cfg.path("entities"))
    result = train_loop(store, catalog, cfg.train, encoder_config=cfg.encoder)
    result.checkpoint.save(cfg.path("checkpoint"))
    result.write_log(Path(str(cfg.path("checkpoint")) + ".losses.tsv"))


def _run_index(cfg: PipelineConfig) -> None:
    checkpoint = Checkpoint.load(cfg.path("checkpoint"))
    store = MentionStore.load(cfg.path("mentions"))
    catalog = load_catalog(cfg.path("entities"))
    protos = sample_prototypes(store, cfg.k_proto, cfg.link_seed,
                               entity_ids=catalog.ids())
    index = build_index(protos, checkpoint, catalog=catalog, fusion=cfg.fusion)
    save_index(index, cfg.path("index"))


def _run_link(cfg: PipelineConfig) -> None:
    checkpoint = Checkpoint.load(cfg.path("checkpoint"))
    index = load_index(cfg.path("index"), checkpoint)
    queries = MentionStore.load(cfg.path("queries"))
    linker = link_with_references if cfg.fusion else link
    results = [linker(q, index, cfg.top_k) for q in queries]
    save_results(results, cfg.path("results"))


def _run_rerank(cfg: PipelineConfig) -> None:
    checkpoint = Checkpoint.load(cfg.path("checkpoint"))
    index = load_index(cfg.path("index"), checkpoint)
    store = MentionStore.load(cfg.path("mentions"))
    model = train_reranker(store, index, cfg.rerank_k,
                           RerankConfig(lr=cfg.rerank_lr, steps=cfg.rerank_steps,
                                        seed=cfg.seed))
    model.save(cfg.path("reranker"))
    results = load_results(cfg.path("results"), index)
    save_results([rerank(r, model) for r in results], cfg.path("reranked"))


def _run_eval(cfg: PipelineConfig) -> None:
    catalog = load_catalog(cfg.path("entities"))
    domain = cfg.paths.get("domain")
    gold = load_gold(cfg.path("queries"), domain)
    results_key = "reranked" if cfg.eval_input == "reranked" else "results"
    results = load_results(cfg.path(results_key))
    if gold.domain_ids is not None:
        results = filter_candidates(results, gold.domain_ids)
    report = build_metric_report(results, gold, catalog, seed=cfg.seed, ks=cfg.eval_topk)
    cfg.path("report").write_text(report.to_json() + "\n", encoding="utf-8")


_STAGE_RUNNERS = {
    "generate": _run_generate,
    "train": _run_train,
    "index": _run_index,
    "link": _run_link,
    "rerank": _run_rerank,
    "eval": _run_eval,
}


def run_pipeline(cfg: PipelineConfig, stages: set[str] | list[str]) -> list[StageRecord]:
    """Run the requested stages in canonical order, writing the manifest."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    selected = [s for s in STAGES if s in set(stages)]
    done_earlier: set[str] = set()
    records: list[StageRecord] = []
    manifest = cfg.manifest_path()
    manifest.parent.mkdir(parents=True, exist_ok=True)
    manifest.write_text("", encoding="utf-8")
    for stage in selected:
        input_keys, output_keys = _STAGE_IO[stage]
        if stage == "eval":
            input_keys = input_keys + (("reranked",) if cfg.eval_input == "reranked"
                                       else ("results",))
            if "domain" in cfg.paths:
                input_keys = input_keys + ("domain",)
        for key in input_keys:
            produced_by = next((s for s, (_, outs) in _STAGE_IO.items() if key in outs), None)
            if produced_by in done_earlier:
                continue
            if not _artifact_file(cfg, key).exists():
                raise MissingDependencyError(
                    f"stage {stage!r} needs missing artifact paths.{key} "
                    f"({_artifact_file(cfg, key)})")
        started = time.monotonic()
        _STAGE_RUNNERS[stage](cfg)
        elapsed = time.monotonic() - started
        record = StageRecord(
            stage=stage,
            inputs={key: _sha256(_artifact_file(cfg, key)) for key in input_keys},
            outputs={key: _sha256(_artifact_file(cfg, key)) for key in output_keys},
            wall_time_s=elapsed,
        )
        records.append(record)
        with open(manifest, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
        done_earlier.add(stage)
    return records
