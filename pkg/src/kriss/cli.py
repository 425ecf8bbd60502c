"""kriss command line: one subcommand per pipeline stage.

Every command takes --seed; when omitted, the fixed constant DEFAULT_SEED is
used so runs never depend on wall-clock entropy. Exit codes: 0 success,
2 usage or configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import pipeline as pipeline_mod
from .encoder import Checkpoint, EncoderConfig, tokenize_mention
from .encoder import encode_sequences
from .errors import ConfigError, DataError, KrissError, NumericError
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
    write_krsv,
)
from .reranker import RerankConfig, RerankModel, rerank, train_reranker
from .synthetic import WorldConfig, make_world
from .trainer import TrainConfig, load_train_config, train_loop

DEFAULT_SEED = 1729

_flag = click.Choice(["on", "off"])


@click.group()
def cli():
    """Self-supervised entity linking toolkit."""


@cli.group()
def ontology():
    """Entity catalog utilities."""


@ontology.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def ontology_validate(path):
    """Load and validate an entity catalog, printing a short summary."""
    catalog = load_catalog(path)
    n_aliases = sum(len(e.aliases) for e in catalog)
    click.echo(f"ok: {len(catalog)} entities, {n_aliases} aliases")


@ontology.command("ambiguity-report")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--aliases", type=_flag, default="on", show_default=True,
              help="Include aliases in the surface pool.")
def ontology_ambiguity_report(path, aliases):
    """Print ambiguous surfaces as TSV: surface, count, ids."""
    catalog = load_catalog(path)
    index = build_surface_index(catalog, include_aliases=(aliases == "on"))
    for surface in sorted(index.surfaces):
        ids = index.surfaces[surface]
        if len(ids) >= 2:
            click.echo(f"{surface}\t{len(ids)}\t{','.join(ids)}")


@cli.command()
@click.option("--entities", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--window", default=64, show_default=True)
@click.option("--aliases", type=_flag, default="on", show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate(entities, corpus, window, aliases, out):
    """Scan a corpus and emit self-supervised mention examples."""
    catalog = load_catalog(entities)
    surfaces = unambiguous_surfaces(build_surface_index(catalog, aliases == "on"))
    matcher = build_matcher(surfaces)
    store = MentionStore()
    report = generate_corpus(matcher, load_corpus(corpus), window, store)
    store.save(out)
    click.echo(f"scanned {report.documents_scanned} documents, "
               f"emitted {report.mentions_emitted} mentions "
               f"covering {report.entities_covered} entities")


@cli.command()
@click.option("--mentions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--entities", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key=value training config.")
@click.option("--steps", type=int, default=None, help="Override the configured step count.")
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
def train(mentions, entities, config_path, steps, seed, out):
    """Train the mention and reference encoders with the joint contrastive loss."""
    if config_path:
        config = load_train_config(config_path, seed=seed)
    else:
        config = TrainConfig(seed=seed if seed is not None else DEFAULT_SEED)
    if steps is not None:
        config = TrainConfig(**{**config.__dict__, "steps": steps})
    store = MentionStore.load(mentions)
    catalog = load_catalog(entities)
    result = train_loop(store, catalog, config,
                        encoder_config=EncoderConfig(seed=config.seed))
    result.checkpoint.save(out)
    result.write_log(out + ".losses.tsv")
    if result.log:
        step, pair, ref, joint = result.log[-1]
        click.echo(f"step {step}: L={pair:.4f} L'={ref:.4f} joint={joint:.4f}")
    click.echo(f"checkpoint written to {out}")


@cli.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mentions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path())
def encode(checkpoint_path, mentions, out):
    """Encode mention examples into a KRSV vector store."""
    checkpoint = Checkpoint.load(checkpoint_path)
    store = MentionStore.load(mentions)
    sequences = [tokenize_mention(e, checkpoint.vocab, checkpoint.config.max_len)
                 for e in store]
    vectors = encode_sequences(checkpoint.mention, sequences)
    write_krsv(out, vectors)
    with open(out + ".meta.jsonl", "w", encoding="utf-8") as fh:
        for example in store:
            fh.write(json.dumps({"entity_id": example.entity_id,
                                 "example": example.to_record()},
                                ensure_ascii=False, separators=(",", ":")) + "\n")
    click.echo(f"encoded {len(store)} mentions into {out}")


@cli.group()
def index():
    """Prototype index commands."""


@index.command("build")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mentions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--entities", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", "k_proto", default=16, show_default=True,
              help="Prototypes sampled per entity.")
@click.option("--fusion", type=_flag, default="off", show_default=True,
              help="Also precompute entity reference vectors.")
@click.option("--gold", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Gold mentions appended as extra prototypes (lazy learning).")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def index_build(checkpoint_path, mentions, entities, k_proto, fusion, gold, seed, out):
    """Sample prototypes per entity and precompute their vectors."""
    checkpoint = Checkpoint.load(checkpoint_path)
    store = MentionStore.load(mentions)
    catalog = load_catalog(entities)
    protos = sample_prototypes(store, k_proto, seed, entity_ids=catalog.ids())
    idx = build_index(protos, checkpoint, catalog=catalog, fusion=(fusion == "on"))
    if gold:
        from .prototype_index import add_gold_prototypes
        idx = add_gold_prototypes(idx, MentionStore.load(gold), checkpoint, catalog)
    save_index(idx, out)
    click.echo(f"indexed {len(idx)} prototypes over {len(idx.known_entities)} entities")


@cli.command("link")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_dir", required=True, type=click.Path(exists=True))
@click.option("--queries", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--top-k", default=100, show_default=True)
@click.option("--fusion", type=_flag, default="off", show_default=True)
@click.option("--cosine", type=_flag, default="off", show_default=True,
              help="Experimental: score with cosine instead of raw inner product.")
@click.option("--out", required=True, type=click.Path())
def link_cmd(checkpoint_path, index_dir, queries, top_k, fusion, cosine, out):
    """Link query mentions to their nearest prototypes."""
    checkpoint = Checkpoint.load(checkpoint_path)
    idx = load_index(index_dir, checkpoint)
    store = MentionStore.load(queries)
    linker = link_with_references if fusion == "on" else link
    results = [linker(q, idx, top_k, cosine=(cosine == "on")) for q in store]
    save_results(results, out)
    click.echo(f"linked {len(results)} queries")


@cli.command("rerank-train")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_dir", required=True, type=click.Path(exists=True))
@click.option("--mentions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=10, show_default=True, help="Candidates per training query.")
@click.option("--steps", default=200, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--out", required=True, type=click.Path())
def rerank_train(checkpoint_path, index_dir, mentions, k, steps, lr, seed, out):
    """Train the cross-attention re-ranker on self-supervised mentions."""
    checkpoint = Checkpoint.load(checkpoint_path)
    idx = load_index(index_dir, checkpoint)
    store = MentionStore.load(mentions)
    model = train_reranker(store, idx, k, RerankConfig(lr=lr, steps=steps, seed=seed))
    model.save(out)
    click.echo(f"re-ranker written to {out}")


@cli.command("rerank")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_dir", required=True, type=click.Path(exists=True))
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path())
def rerank_cmd(model_path, checkpoint_path, index_dir, results_path, out):
    """Reorder linking candidates with the cross-attention scorer."""
    model = RerankModel.load(model_path)
    checkpoint = Checkpoint.load(checkpoint_path)
    idx = load_index(index_dir, checkpoint)
    results = load_results(results_path, idx)
    save_results([rerank(r, model) for r in results], out)
    click.echo(f"re-ranked {len(results)} results")


@cli.command("eval")
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--gold", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--entities", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--domain", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--topk", default="1,5,10", show_default=True,
              help="Comma-separated K values for the top-K oracle curve.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "tsv"]), default="json",
              show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the report here instead of stdout.")
def eval_cmd(results_path, gold, entities, domain, topk, seed, fmt, out):
    """Score linking results with strict, lenient, and oracle metrics."""
    catalog = load_catalog(entities)
    dataset = load_gold(gold, domain)
    results = load_results(results_path)
    if dataset.domain_ids is not None:
        results = filter_candidates(results, dataset.domain_ids)
    try:
        ks = tuple(int(v) for v in topk.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad --topk list {topk!r}") from None
    report = build_metric_report(results, dataset, catalog, seed=seed, ks=ks)
    text = report.to_json() if fmt == "json" else report.to_tsv()
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
        click.echo(f"report written to {out}")
    else:
        click.echo(text)


@cli.command("run")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--stages", default="generate,train,index,link,eval", show_default=True,
              help="Comma-separated subset of: " + ",".join(pipeline_mod.STAGES))
def run_cmd(config_path, stages):
    """Run pipeline stages in canonical order with a hash manifest."""
    cfg = pipeline_mod.parse_pipeline_config(config_path)
    wanted = [s.strip() for s in stages.split(",") if s.strip()]
    records = pipeline_mod.run_pipeline(cfg, wanted)
    for record in records:
        click.echo(f"{record.stage}: {record.wall_time_s:.2f}s")


@cli.command("demo")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--entities", "n_entities", default=20, show_default=True)
@click.option("--docs", "n_docs", default=600, show_default=True)
@click.option("--steps", default=300, show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
def demo(out, n_entities, n_docs, steps, seed):
    """Build a bundled synthetic world and run the full pipeline on it."""
    root = Path(out)
    world = make_world(root, WorldConfig(n_entities=n_entities, n_docs=n_docs, seed=seed))
    config_path = root / "pipeline.cfg"
    config_path.write_text(demo_config_text(n_entities, steps, seed), encoding="utf-8")
    cfg = pipeline_mod.parse_pipeline_config(config_path)
    records = pipeline_mod.run_pipeline(
        cfg, ["generate", "train", "index", "link", "rerank", "eval"])
    for record in records:
        click.echo(f"{record.stage}: {record.wall_time_s:.2f}s")
    click.echo((root / "report.json").read_text())


def demo_config_text(n_entities: int, steps: int, seed: int) -> str:
    top_k = min(10, n_entities)
    return "\n".join([
        f"seed={seed}",
        "paths.entities=entities.jsonl",
        "paths.corpus=corpus.jsonl",
        "paths.mentions=mentions.jsonl",
        "paths.checkpoint=checkpoint.krsm",
        "paths.index=index",
        "paths.queries=test_mentions.jsonl",
        "paths.results=results.jsonl",
        "paths.reranker=reranker.krsm",
        "paths.reranked=reranked.jsonl",
        "paths.report=report.json",
        "paths.domain=domain_entities.txt",
        "generate.window=64",
        "generate.aliases=on",
        f"train.steps={steps}",
        "train.n=8",
        f"link.top_k={top_k}",
        "link.k_proto=16",
        "link.fusion=off",
        "rerank.k=5",
        "rerank.steps=60",
        f"eval.topk=1,5,{top_k}",
        "eval.input=results",
    ]) + "\n"


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(4)
    except (DataError, KrissError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
