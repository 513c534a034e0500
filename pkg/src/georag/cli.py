"""Command-line front end: synth, train, build-index, predict, evaluate,
and compare-retrieval.

Every command with a --seed flag is bit-reproducible. A config file of
"key = value" lines overrides flags. Exit codes: 0 success, 1 usage,
2 data, 3 transport.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from georag import alignment, synth
from georag.diversify import (EchoLmmClient, HttpLmmClient, MockLmmClient,
                              PromptSet, PromptSpec)
from georag.errors import (DataError, GeoragError, TransportError, UsageError)
from georag.index import IvfParams, VectorIndex


def _load_config(path) -> dict:
    cfg = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


class _Ctx:
    def __init__(self, config):
        self.config = config

    def get(self, name, value, cast):
        if name in self.config:
            raw = self.config[name]
            return cast(raw) if cast is not bool else raw.lower() in ("1", "true", "yes")
        return value


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="key = value file overriding flags")
@click.pass_context
def cli(ctx, config_path):
    """Geolocalization pipeline tools."""
    ctx.obj = _Ctx(_load_config(config_path) if config_path else {})


@cli.command("synth")
@click.option("--seed", default=0, type=int)
@click.option("--n-clusters", default=8, type=int)
@click.option("--points-per-cluster", default=256, type=int)
@click.option("--noise-sigma", default=1.0, type=float)
@click.option("--radius-km", default=50.0, type=float)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def synth_cmd(ctx, seed, n_clusters, points_per_cluster, noise_sigma,
              radius_km, out):
    """Generate the synthetic world fixture into a directory."""
    config = synth.SyntheticWorldConfig(
        seed=ctx.get("seed", seed, int),
        n_clusters=ctx.get("n_clusters", n_clusters, int),
        points_per_cluster=ctx.get("points_per_cluster", points_per_cluster, int),
        embedding_noise_sigma=ctx.get("noise_sigma", noise_sigma, float),
        cluster_radius_km=ctx.get("radius_km", radius_km, float),
    )
    world = synth.synthesize_world(config)
    synth.save_world(world, out)
    click.echo(json.dumps({"written": out, "n_samples": len(world),
                           "config": asdict(config)}))


@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=10, type=int)
@click.option("--batch-size", default=256, type=int)
@click.option("--lr", default=3e-5, type=float)
@click.option("--weight-decay", default=1e-6, type=float)
@click.option("--gamma", default=0.87, type=float)
@click.option("--t-init", default=3.99, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--log-out", default=None, type=click.Path())
@click.pass_obj
def train_cmd(ctx, data, out, epochs, batch_size, lr, weight_decay, gamma,
              t_init, seed, log_out):
    """Train the alignment model on a world directory."""
    records, image_emb, text_emb = synth.load_world_data(data)
    config = alignment.TrainConfig(
        batch_size=ctx.get("batch_size", batch_size, int),
        lr=ctx.get("lr", lr, float),
        weight_decay=ctx.get("weight_decay", weight_decay, float),
        epochs=ctx.get("epochs", epochs, int),
        gamma=ctx.get("gamma", gamma, float),
        t_init=ctx.get("t_init", t_init, float),
        seed=ctx.get("seed", seed, int),
    )
    dataset = alignment.TriModalBatch(image_emb, text_emb,
                                      [r.point for r in records])
    model, log = alignment.train(dataset, config)
    alignment.save_alignment_model(out, model)
    log_lines = [json.dumps(entry) for entry in log]
    if log_out:
        Path(log_out).write_text("\n".join(log_lines) + "\n")
    for line in log_lines:
        click.echo(line)


@cli.command("build-index")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--ivf-clusters", default=0, type=int,
              help="0 keeps the index flat-only")
@click.option("--ivf-nprobe", default=1, type=int)
@click.option("--ivf-iters", default=20, type=int)
@click.option("--seed", default=0, type=int)
@click.pass_obj
def build_index_cmd(ctx, model_path, data, out, ivf_clusters, ivf_nprobe,
                    ivf_iters, seed):
    """Vectorize a world with a trained model and persist the index."""
    records, image_emb, _ = synth.load_world_data(data)
    model = alignment.load_alignment_model(model_path)
    index = synth.build_index_from_embeddings(records, image_emb, model)
    ivf_clusters = ctx.get("ivf_clusters", ivf_clusters, int)
    if ivf_clusters > 0:
        index.build_ivf(IvfParams(n_clusters=ivf_clusters,
                                  kmeans_iters=ctx.get("ivf_iters", ivf_iters, int),
                                  seed=ctx.get("seed", seed, int),
                                  nprobe=ctx.get("ivf_nprobe", ivf_nprobe, int)))
    index.save(out)
    click.echo(json.dumps({"written": out, "records": len(index),
                           "ivf_clusters": ivf_clusters}))


def _parse_prompt_specs(text: str) -> list:
    specs = []
    for part in text.split(","):
        pos_s, neg_s = part.split(":")
        specs.append(PromptSpec(int(pos_s), int(neg_s)))
    return specs


def _make_client(kind, base_url, lmm_model, noise_sigma_deg):
    if kind == "mock":
        return MockLmmClient(noise_sigma_deg=noise_sigma_deg)
    if kind == "echo":
        return EchoLmmClient()
    if kind == "http":
        if not base_url or not lmm_model:
            raise UsageError("http client needs --base-url and --lmm-model")
        return HttpLmmClient(base_url, lmm_model)
    raise UsageError(f"unknown client kind {kind!r}")


@cli.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True),
              help="world directory providing query embeddings")
@click.option("--client", "client_kind",
              type=click.Choice(["mock", "echo", "http"]), default="mock")
@click.option("--base-url", default=None)
@click.option("--lmm-model", default=None)
@click.option("--prompt-specs", default="0:0,5:5,10:10,15:15")
@click.option("--n-generations", default=5, type=int)
@click.option("--s-retrieved", default=0, type=int)
@click.option("--noise-sigma-deg", default=0.5, type=float)
@click.option("--limit", default=0, type=int, help="0 = all queries")
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def predict_cmd(ctx, model_path, index_path, data, client_kind, base_url,
                lmm_model, prompt_specs, n_generations, s_retrieved,
                noise_sigma_deg, limit, seed, out):
    """Run the full retrieval/diversification/verification pipeline."""
    records, image_emb, _ = synth.load_world_data(data)
    model = alignment.load_alignment_model(model_path)
    index = VectorIndex.load(index_path)
    prompt_set = PromptSet(
        specs=_parse_prompt_specs(ctx.get("prompt_specs", prompt_specs, str)),
        n_generations=ctx.get("n_generations", n_generations, int),
        s_retrieved=ctx.get("s_retrieved", s_retrieved, int),
    )
    client = _make_client(ctx.get("client", client_kind, str), base_url,
                          lmm_model, noise_sigma_deg)
    limit = ctx.get("limit", limit, int)
    queries = [(r.img_id, image_emb[i]) for i, r in enumerate(records)]
    truths = [r.point for r in records]
    if limit:
        queries, truths = queries[:limit], truths[:limit]
    result = synth.run_pipeline(queries, model, index, client, prompt_set,
                                seed=ctx.get("seed", seed, int), truths=truths)
    with open(out, "w", encoding="utf-8") as f:
        for pred in result.predictions:
            f.write(json.dumps(pred) + "\n")
    summary = {
        "n_predictions": len(result.predictions),
        "failures": result.failures,
        "report": result.report.as_dict() if result.report else None,
        "config": {
            "prompt_specs": prompt_specs, "n_generations": prompt_set.n_generations,
            "s_retrieved": prompt_set.s_retrieved, "client": client_kind,
            "seed": seed, "limit": limit,
        },
    }
    click.echo(json.dumps(summary))


@cli.command("evaluate")
@click.option("--preds", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
def evaluate_cmd(preds, data, out):
    """Score a predictions file against a world's ground truth."""
    records, _, _ = synth.load_world_data(data)
    truth_by_id = {r.img_id: r.point for r in records}
    pred_points, truth_points, missing = [], [], []
    with open(preds, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            truth = truth_by_id.get(row["img_id"])
            if truth is None:
                missing.append(row["img_id"])
                continue
            from georag.geodesy import GeoPoint
            pred_points.append(GeoPoint(row["pred_lat"], row["pred_lon"]))
            truth_points.append(truth)
    if not pred_points:
        raise DataError(f"{preds}: no scorable predictions")
    from georag.geodesy import threshold_accuracy
    report = threshold_accuracy(pred_points, truth_points)
    payload = {"report": report.as_dict(), "unmatched_ids": missing,
               "config": {"preds": str(preds), "data": str(data)}}
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


@cli.command("compare-retrieval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--n-queries", default=128, type=int)
@click.option("--top-ns", default="5,10,15")
@click.option("--seed", default=0, type=int)
@click.option("--out", default=None, type=click.Path())
@click.pass_obj
def compare_retrieval_cmd(ctx, model_path, data, n_queries, top_ns, seed, out):
    """Raw-vs-aligned retrieval distance statistics on held-out queries."""
    records, image_emb, _ = synth.load_world_data(data)
    model = alignment.load_alignment_model(model_path)
    seed = ctx.get("seed", seed, int)
    n_queries = ctx.get("n_queries", n_queries, int)
    rng = np.random.default_rng(seed)
    query_rows = rng.choice(len(records), size=min(n_queries, len(records)),
                            replace=False)
    db_rows = np.setdiff1d(np.arange(len(records)), query_rows)
    db_records = [records[i] for i in db_rows]
    raw_index = synth.build_raw_index(db_records, image_emb[db_rows])
    aligned_index = synth.build_index_from_embeddings(db_records,
                                                     image_emb[db_rows], model)
    raw_q = synth.normalized_image_vectors(image_emb[query_rows])
    aligned_q = alignment.vectorize_images(image_emb[query_rows], model)
    truths = [records[i].point for i in query_rows]
    ns = tuple(int(x) for x in ctx.get("top_ns", top_ns, str).split(","))
    stats = synth.compare_retrieval(raw_index, aligned_index, raw_q, aligned_q,
                                    truths, top_ns=ns)
    payload = {"stats": stats,
               "config": {"n_queries": int(n_queries), "seed": int(seed),
                          "top_ns": list(ns)}}
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except UsageError as exc:
        click.echo(f"usage error: {exc}", err=True)
        return 1
    except TransportError as exc:
        click.echo(f"transport error: {exc}", err=True)
        return 3
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except GeoragError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
