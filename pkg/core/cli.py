"""
Command-line interface for botgraph.

Every pipeline stage is a subcommand; ``pipeline`` runs them all with stage
caching. Reports go to stdout as JSON. Failures print one line

    error stage=<stage> type=<ExceptionName> message=<JSON string>

to stderr and exit with code 1; click usage errors exit with code 2.
"""

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, NoReturn, Optional, Tuple

import click
import numpy as np

from core.config_loader import (
    DatasetManifest,
    load_manifest,
    load_run_config,
    load_synth_config,
)
from core.features import load_features, save_features
from core.gnn import build_model, evaluate, load_gnn, save_gnn, train
from core.graph import BOT, load_graph, load_labels, scan_edge_file
from core.pipeline import (
    PipelineError,
    build_features,
    run_ablations,
    run_pipeline,
    sweep_k,
    write_training_log,
)
from core.ppr import approx_ppr, write_ppr_scores
from core.preclassifier import hidden_repr, load_mlp, mlp_accuracy, save_mlp, train_mlp
from core.sampler import (
    SubgraphCacheWriter,
    export_subgraphs,
    homophily_report,
    node_homophilies,
    read_cache,
)
from core.synth import generate, write_dataset
from lib.logger import get_logger, setup_logger
from lib.utils import configure_threads, seed_everything, write_json
from plugins.samplers import SAMPLING_MODES, get_sampler

logger = get_logger()

PathType = click.Path(path_type=Path)
ExistingPath = click.Path(exists=True, dir_okay=False, path_type=Path)


def _fail(stage: str, error: BaseException) -> NoReturn:
    message = json.dumps(str(error))
    click.echo(
        f"error stage={stage} type={type(error).__name__} message={message}", err=True
    )
    sys.exit(1)


@contextmanager
def stage_errors(stage: str) -> Iterator[None]:
    """Turn any failure inside a command into the one-line error report."""
    try:
        yield
    except click.ClickException:
        raise
    except PipelineError as e:
        _fail(e.stage, e.cause)
    except Exception as e:
        _fail(stage, e)


def _emit(report: Dict[str, Any]) -> None:
    click.echo(json.dumps(report, sort_keys=True))


def _split_ints(text: Optional[str]) -> List[int]:
    if not text:
        return []
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(
            f"expected comma-separated integers, got {text!r}"
        ) from e


def _edge_manifest(graph_path: Path) -> Optional[DatasetManifest]:
    """The dataset.yaml beside an edge file, when it describes that file."""
    if not (graph_path.parent / "dataset.yaml").exists():
        return None
    manifest = load_manifest(graph_path.parent)
    if manifest.edges != graph_path.name:
        return None
    return manifest


def _graph_shape(
    graph_path: Path, n: Optional[int], relations: Optional[str]
) -> Tuple[int, List[str]]:
    """
    Node count and relation order of an edge file.

    ``--relations`` wins, then the dataset manifest next to the file. Without
    either, the order is read from the edges, so relations without edges
    are unknown.
    """
    manifest = _edge_manifest(Path(graph_path))
    if manifest is not None:
        scanned_n, names = manifest.n, list(manifest.relations)
    else:
        scanned_n, names = scan_edge_file(graph_path)
    if relations:
        names = [r.strip() for r in relations.split(",") if r.strip()]
    return (n if n is not None else scanned_n), names


@click.group()
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Threads for sampling and torch",
)
@click.option(
    "--log-level",
    default="INFO",
    show_default=True,
    type=click.Choice(
        ["TRACE", "DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False
    ),
)
@click.option("--log-file", type=PathType, default=None, help="Also log to this file")
@click.pass_context
def cli(
    ctx: click.Context, workers: int, log_level: str, log_file: Optional[Path]
) -> None:
    """Bot detection on biased heterogeneous subgraphs."""
    setup_logger(log_level=log_level.upper(), log_file=log_file)
    configure_threads(workers)
    ctx.obj = {"workers": workers}


@cli.command()
@click.option("--config", "config_path", type=ExistingPath, default=None)
@click.option("--out-dir", type=PathType, required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed")
@click.option("--n", "n", type=int, default=None, help="Overrides the node count")
@click.option("--delta", type=float, default=None, help="Overrides the class-mean gap")
def synth(
    config_path: Optional[Path],
    out_dir: Path,
    seed: Optional[int],
    n: Optional[int],
    delta: Optional[float],
) -> None:
    """Generate a synthetic labeled dataset directory."""
    with stage_errors("synth"):
        cfg = load_synth_config(config_path, seed=seed, n=n, delta=delta)
        dataset = generate(cfg)
        write_dataset(dataset, out_dir)
        graph = dataset.graph
        _emit(
            {
                "out_dir": str(out_dir),
                "n": graph.n,
                "edges": {r: graph.edge_count(r) for r in graph.relations},
                "bots": int((dataset.labels.labels == BOT).sum()),
                "features": dataset.features.s,
            }
        )


@cli.command()
@click.option(
    "--data-dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
)
@click.option("--config", "config_path", type=ExistingPath, default=None)
@click.option("--drop", "drop", multiple=True, help="Feature block to leave out")
@click.option("--out", type=PathType, required=True)
def features(
    data_dir: Path, config_path: Optional[Path], drop: Tuple[str, ...], out: Path
) -> None:
    """Assemble the feature matrix of a dataset directory."""
    with stage_errors("features"):
        cfg = load_run_config(
            config_path, data_dir=data_dir, drop_blocks=list(drop) or None
        )
        matrix = build_features(data_dir, cfg)
        save_features(matrix, out)
        _emit(
            {
                "out": str(out),
                "n": matrix.n,
                "s": matrix.s,
                "schema": dict(matrix.schema),
            }
        )


@cli.command()
@click.option("--features", "features_path", type=ExistingPath, required=True)
@click.option("--labels", "labels_path", type=ExistingPath, required=True)
@click.option("--splits", "splits_path", type=ExistingPath, required=True)
@click.option("--hidden", type=int, default=128, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=1e-2, show_default=True)
@click.option("--patience", type=int, default=10, show_default=True)
@click.option(
    "--optimizer", type=click.Choice(["adam", "sgd"]), default="adam", show_default=True
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=PathType, required=True)
def pretrain(
    features_path: Path,
    labels_path: Path,
    splits_path: Path,
    hidden: int,
    epochs: int,
    lr: float,
    patience: int,
    optimizer: str,
    seed: int,
    out: Path,
) -> None:
    """Train the MLP pre-classifier."""
    with stage_errors("pretrain"):
        matrix = load_features(features_path)
        labels = load_labels(labels_path, splits_path, matrix.n)
        seed_everything(seed)
        model = train_mlp(
            matrix,
            labels,
            hidden=hidden,
            epochs=epochs,
            lr=lr,
            seed=seed,
            patience=patience,
            optimizer=optimizer,  # type: ignore[arg-type]
        )
        save_mlp(model, out)
        report: Dict[str, Any] = {"out": str(out), "epochs": len(model.training_log)}
        report["fitting_accuracy"] = mlp_accuracy(model, matrix, labels, labels.fitting)
        if labels.test.size:
            report["test_accuracy"] = mlp_accuracy(model, matrix, labels, labels.test)
        _emit(report)


@cli.command()
@click.option("--graph", "graph_path", type=ExistingPath, required=True)
@click.option("--relation", required=True)
@click.option("--start", type=int, required=True)
@click.option("--alpha", type=float, default=0.15, show_default=True)
@click.option("--eps", type=float, default=1e-4, show_default=True)
@click.option("--reverse", is_flag=True, help="Walk in-edges instead of out-edges")
@click.option(
    "--n", "n", type=int, default=None, help="Node count (default: from the file)"
)
@click.option("--out", type=PathType, default=None, help="TSV file (default: stdout)")
def ppr(
    graph_path: Path,
    relation: str,
    start: int,
    alpha: float,
    eps: float,
    reverse: bool,
    n: Optional[int],
    out: Optional[Path],
) -> None:
    """Approximate PPR scores of one start node as node<TAB>score rows."""
    with stage_errors("ppr"):
        node_count, relations = _graph_shape(graph_path, n, None)
        if relation not in relations:
            relations.append(relation)
        graph = load_graph(graph_path, node_count, relations)
        vector = approx_ppr(graph.view(relation, reverse=reverse), start, alpha, eps)
        if out is not None:
            write_ppr_scores(vector, out)
        else:
            for u, score in vector.ranked():
                click.echo(f"{u}\t{score:.12g}")


@cli.command()
@click.option("--graph", "graph_path", type=ExistingPath, required=True)
@click.option("--features", "features_path", type=ExistingPath, required=True)
@click.option(
    "--model",
    "model_path",
    type=ExistingPath,
    default=None,
    help="Pre-classifier (required for biased sampling)",
)
@click.option("--labels", "labels_path", type=ExistingPath, default=None)
@click.option("--splits", "splits_path", type=ExistingPath, default=None)
@click.option("--relations", default=None, help="Comma-separated relation order")
@click.option(
    "--sampling",
    type=click.Choice(list(SAMPLING_MODES)),
    default="biased",
    show_default=True,
)
@click.option("--k", "k", type=int, default=32, show_default=True)
@click.option("--alpha", type=float, default=0.15, show_default=True)
@click.option("--eps", type=float, default=1e-4, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.5, show_default=True)
@click.option("--reverse", is_flag=True)
@click.option("--activated-hidden", is_flag=True, help="Use leaky-relu hidden features")
@click.option(
    "--nodes",
    default="train,val,test",
    show_default=True,
    help="'all' or a comma list of splits",
)
@click.option("--out", type=PathType, required=True)
@click.pass_context
def sample(
    ctx: click.Context,
    graph_path: Path,
    features_path: Path,
    model_path: Optional[Path],
    labels_path: Optional[Path],
    splits_path: Optional[Path],
    relations: Optional[str],
    sampling: str,
    k: int,
    alpha: float,
    eps: float,
    lam: float,
    reverse: bool,
    activated_hidden: bool,
    nodes: str,
    out: Path,
) -> None:
    """Build and cache the biased subgraph of every start node."""
    with stage_errors("sample"):
        matrix = load_features(features_path)
        _, names = _graph_shape(graph_path, matrix.n, relations)
        graph = load_graph(graph_path, matrix.n, names)

        hidden = None
        if sampling == "biased":
            if model_path is None:
                raise click.UsageError("--model is required for biased sampling")
            hidden = hidden_repr(
                load_mlp(model_path), matrix.values, activated=activated_hidden
            )

        if nodes == "all":
            starts = np.arange(graph.n, dtype=np.int64)
        else:
            if labels_path is None or splits_path is None:
                raise click.UsageError(
                    "--labels and --splits are required unless --nodes all"
                )
            labels = load_labels(labels_path, splits_path, graph.n)
            chosen = [labels.split(name.strip()) for name in nodes.split(",")]
            starts = np.empty(0, np.int64)
            if chosen:
                starts = np.unique(np.concatenate(chosen))

        settings = {
            "k": k,
            "alpha": alpha,
            "eps": eps,
            "lambda": lam,
            "reverse": reverse,
            "workers": ctx.obj["workers"],
        }
        sampler = get_sampler(sampling, graph, settings, hidden)
        writer = SubgraphCacheWriter(out, graph.relations)
        sampler.sample_many(starts, writer=writer)
        writer.close()
        _emit(
            {
                "out": str(out),
                "subgraphs": len(writer),
                "relations": list(graph.relations),
            }
        )


@cli.command("homophily-report")
@click.option("--graph", "graph_path", type=ExistingPath, required=True)
@click.option("--labels", "labels_path", type=ExistingPath, required=True)
@click.option(
    "--subgraphs",
    "cache_path",
    type=ExistingPath,
    default=None,
    help="Report start-node homophily inside cached subgraphs",
)
@click.option(
    "--n", "n", type=int, default=None, help="Node count (default: from the file)"
)
@click.option("--out", type=PathType, default=None, help="JSON file (default: stdout)")
def homophily_report_command(
    graph_path: Path,
    labels_path: Path,
    cache_path: Optional[Path],
    n: Optional[int],
    out: Optional[Path],
) -> None:
    """Node and graph homophily of the graph, or of cached subgraphs."""
    with stage_errors("homophily-report"):
        node_count, relations = _graph_shape(graph_path, n, None)
        graph = load_graph(graph_path, node_count, relations)
        labels = load_labels(labels_path, None, node_count)
        report = homophily_report(graph, labels).to_dict()
        if cache_path is not None:
            sampled = homophily_report(read_cache(cache_path).ordered(), labels)
            report = {"graph": report, "subgraphs": sampled.to_dict()}
        if out is not None:
            write_json(out, report)
        _emit(report)


@cli.command("train")
@click.option("--cache", "cache_path", type=ExistingPath, required=True)
@click.option("--features", "features_path", type=ExistingPath, required=True)
@click.option("--labels", "labels_path", type=ExistingPath, required=True)
@click.option("--splits", "splits_path", type=ExistingPath, required=True)
@click.option("--config", "config_path", type=ExistingPath, default=None)
@click.option("--out", type=PathType, required=True)
@click.option(
    "--log", "log_path", type=PathType, default=None, help="Per-epoch JSON lines"
)
def train_command(
    cache_path: Path,
    features_path: Path,
    labels_path: Path,
    splits_path: Path,
    config_path: Optional[Path],
    out: Path,
    log_path: Optional[Path],
) -> None:
    """Train the subgraph GNN on cached subgraphs."""
    with stage_errors("train"):
        cfg = load_run_config(config_path)
        matrix = load_features(features_path)
        labels = load_labels(labels_path, splits_path, matrix.n)
        cache = read_cache(cache_path)
        seed_everything(cfg.seed)
        model = build_model(matrix.s, cache.relations, cfg)
        model, log = train(
            model,
            cache,
            matrix,
            labels,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            max_epochs=cfg.max_epochs,
            patience=cfg.patience,
            reg_lambda=cfg.reg_lambda,
            seed=cfg.seed,
        )
        save_gnn(model, out)
        if log_path is not None:
            write_training_log(log, log_path)
        _emit({"out": str(out), "epochs": len(log), "final": log[-1] if log else {}})


@cli.command("eval")
@click.option("--model", "model_path", type=ExistingPath, required=True)
@click.option("--cache", "cache_path", type=ExistingPath, required=True)
@click.option("--features", "features_path", type=ExistingPath, required=True)
@click.option("--labels", "labels_path", type=ExistingPath, required=True)
@click.option("--splits", "splits_path", type=ExistingPath, required=True)
@click.option(
    "--split",
    type=click.Choice(["train", "val", "test"]),
    default="test",
    show_default=True,
)
@click.option(
    "--graph",
    "graph_path",
    type=ExistingPath,
    default=None,
    help="Adds accuracy per node-homophily bin",
)
@click.option(
    "--out", type=PathType, default=None, help="Metrics JSON (default: stdout)"
)
def eval_command(
    model_path: Path,
    cache_path: Path,
    features_path: Path,
    labels_path: Path,
    splits_path: Path,
    split: str,
    graph_path: Optional[Path],
    out: Optional[Path],
) -> None:
    """Accuracy and F1 of a trained GNN on one split."""
    with stage_errors("eval"):
        matrix = load_features(features_path)
        labels = load_labels(labels_path, splits_path, matrix.n)
        homophily = None
        if graph_path is not None:
            _, names = _graph_shape(graph_path, matrix.n, None)
            graph = load_graph(graph_path, matrix.n, names)
            homophily = node_homophilies(graph, labels)
        metrics = evaluate(
            load_gnn(model_path),
            read_cache(cache_path),
            matrix,
            labels,
            split=split,
            homophily=homophily,
        )
        if out is not None:
            write_json(out, metrics)
        _emit(metrics)


@cli.command()
@click.option("--config", "config_path", type=ExistingPath, required=True)
@click.option("--data-dir", type=PathType, default=None, help="Overrides data_dir")
@click.option("--out-dir", type=PathType, default=None, help="Overrides out_dir")
@click.option("--seed", type=int, default=None, help="Overrides seed")
@click.option(
    "--ablation-name", default=None, help="Tags the run directory and metrics"
)
@click.pass_context
def pipeline(
    ctx: click.Context,
    config_path: Path,
    data_dir: Optional[Path],
    out_dir: Optional[Path],
    seed: Optional[int],
    ablation_name: Optional[str],
) -> None:
    """Run every stage, skipping stages already completed for this configuration."""
    with stage_errors("pipeline"):
        cfg = load_run_config(
            config_path,
            data_dir=data_dir,
            out_dir=out_dir,
            seed=seed,
            ablation_name=ablation_name,
            workers=ctx.obj["workers"],
        )
        _emit(run_pipeline(cfg))


@cli.command()
@click.option("--config", "config_path", type=ExistingPath, required=True)
@click.option(
    "--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds"
)
@click.option(
    "--feature-blocks", is_flag=True, help="Also drop the category/temporal blocks"
)
@click.pass_context
def ablations(
    ctx: click.Context, config_path: Path, seeds: str, feature_blocks: bool
) -> None:
    """Run the ablation variants over several seeds and write ablations.json."""
    with stage_errors("ablations"):
        cfg = load_run_config(config_path, workers=ctx.obj["workers"])
        report = run_ablations(
            cfg, _split_ints(seeds), include_feature_blocks=feature_blocks
        )
        _emit(report)


@cli.command("sweep-k")
@click.option("--config", "config_path", type=ExistingPath, required=True)
@click.option(
    "--ks", default="8,16,32,64", show_default=True, help="Comma-separated k values"
)
@click.pass_context
def sweep_k_command(ctx: click.Context, config_path: Path, ks: str) -> None:
    """Retrain and evaluate for several subgraph sizes and write sweep_k.json."""
    with stage_errors("sweep-k"):
        cfg = load_run_config(config_path, workers=ctx.obj["workers"])
        _emit(sweep_k(cfg, _split_ints(ks)))


@cli.command()
@click.option("--cache", "cache_path", type=ExistingPath, required=True)
@click.option("--out", type=PathType, required=True)
def export(cache_path: Path, out: Path) -> None:
    """Export cached subgraphs as an .npz edge-index bundle."""
    with stage_errors("export"):
        cache = read_cache(cache_path)
        path = export_subgraphs(cache, out)
        _emit(
            {
                "out": str(path),
                "subgraphs": len(cache),
                "relations": list(cache.relations),
            }
        )


def main() -> None:
    """Console-script entry point."""
    cli(prog_name="botgraph")


if __name__ == "__main__":
    main()
