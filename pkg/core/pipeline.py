"""
Pipeline orchestration for botgraph.

This module runs the stages ``features -> pretrain -> sample -> train -> eval
-> homophily-report`` for one RunConfig. Every stage is content-addressed:
its digest covers the stage's own settings and the digests of the stages it
reads from, its artifacts live in ``<out_dir>/stages/<stage>-<digest>/`` and
completion is recorded in the StateManager ledger, so a rerun with an equal
configuration skips the stage and reuses the files.
"""

import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.config_loader import (
    ConfigError,
    RunConfig,
    dump_yaml,
    load_manifest,
    write_resolved,
)
from core.features import (
    FeatureMatrix,
    assemble_features,
    category_feature,
    load_block,
    load_features,
    load_monthly_counts,
    load_tweet_embeddings,
    save_features,
    temporal_feature,
)
from core.gnn import (
    TrainingError,
    build_model,
    evaluate,
    load_gnn,
    save_gnn,
    train,
)
from core.graph import HeteroGraph, LabelSet, load_graph, load_labels
from core.preclassifier import hidden_repr, load_mlp, mlp_accuracy, save_mlp, train_mlp
from core.sampler import (
    SubgraphCache,
    SubgraphCacheWriter,
    homophily_report,
    node_homophilies,
    read_cache,
)
from lib.logger import get_logger, log_context, stage_timer
from lib.state_manager import StateManager
from lib.utils import (
    atomic_write_bytes,
    configure_threads,
    config_digest,
    ensure_directory,
    seed_everything,
    write_json,
)
from plugins.samplers import get_sampler

STAGES = ("features", "pretrain", "sample", "train", "eval", "homophily-report")
ABLATION_VARIANTS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "ppr-sampling": {"sampling": "ppr"},
    "no-concat": {"concat_intermediate": False},
    "mean-fusion": {"fusion": "mean"},
}
FEATURE_ABLATIONS: Dict[str, Dict[str, Any]] = {
    "no-category": {"drop_blocks": ["category"]},
    "no-temporal": {"drop_blocks": ["temporal"]},
}

logger = get_logger()

Artifacts = Dict[str, str]
Producer = Callable[[Path, Dict[str, Any]], Artifacts]


class PipelineError(Exception):
    """
    Exception raised when a pipeline stage fails.

    Attributes:
        stage: Name of the failing stage
        cause: The original exception
    """

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class PipelineEngine:
    """
    Runs the stages of one configuration against a dataset directory.

    Attributes:
        config: Validated run configuration
        out_dir: Root of stage directories, run directories and the ledger
        state: Stage ledger
        digests: stage -> digest of the stages run (or skipped) so far
        skipped: Stages whose artifacts were reused
    """

    def __init__(self, config: RunConfig, state: Optional[StateManager] = None):
        self.config = config
        self.out_dir = ensure_directory(config.out_dir)
        self.state = state or StateManager(self.out_dir / "state.db")
        self.digests: Dict[str, str] = {}
        self.artifacts: Dict[str, Artifacts] = {}
        self.skipped: List[str] = []
        self._graph: Optional[HeteroGraph] = None
        self._labels: Optional[LabelSet] = None
        configure_threads(config.workers)

    @property
    def run_dir(self) -> Path:
        """Directory of the per-run outputs (resolved config, metrics, report)."""
        return self.out_dir / (self.config.ablation_name or "default")

    # ------------------------------------------------------------------
    # Dataset access

    @property
    def data_dir(self) -> Path:
        if self.config.data_dir is None:
            raise ConfigError("data_dir is required to run pipeline stages")
        return Path(self.config.data_dir)

    def _manifest_digest(self) -> str:
        return config_digest(load_manifest(self.data_dir).model_dump(mode="json"))

    def graph(self) -> HeteroGraph:
        if self._graph is None:
            manifest = load_manifest(self.data_dir)
            self._graph = load_graph(
                self.data_dir / manifest.edges, manifest.n, manifest.relations
            )
        return self._graph

    def labels(self) -> LabelSet:
        if self._labels is None:
            manifest = load_manifest(self.data_dir)
            self._labels = load_labels(
                self.data_dir / manifest.labels,
                self.data_dir / manifest.splits,
                manifest.n,
            )
        return self._labels

    # ------------------------------------------------------------------
    # Stage driver

    def _run_stage(
        self,
        stage: str,
        params: Dict[str, Any],
        upstream: Sequence[str],
        produce: Producer,
    ) -> Artifacts:
        missing = [u for u in upstream if u not in self.digests]
        if missing:
            error = RuntimeError(f"upstream stage(s) {missing} have not run")
            raise PipelineError(stage, error)
        inputs = {u: self.digests[u] for u in upstream}
        digest = config_digest({"stage": stage, "params": params, "upstream": inputs})
        self.digests[stage] = digest

        record = self.state.stage_record(stage, digest)
        if record is not None:
            logger.info(
                f"Stage '{stage}' already completed for digest {digest}, skipping"
            )
            self.skipped.append(stage)
            self.artifacts[stage] = record["artifacts"]
            return record["artifacts"]

        stage_dir = ensure_directory(self.out_dir / "stages" / f"{stage}-{digest}")
        try:
            context = log_context(digest=digest, ablation=self.config.ablation_name)
            with stage_timer(stage, **context) as info:
                artifacts = produce(stage_dir, info)
                description = {
                    "stage": stage,
                    "digest": digest,
                    "seed": self.config.seed,
                    "params": params,
                    "upstream": inputs,
                }
                atomic_write_bytes(
                    stage_dir / "stage.yaml", dump_yaml(description).encode("utf-8")
                )
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(stage, e) from e

        self.state.record_stage(stage, digest, artifacts)
        self.artifacts[stage] = artifacts
        return artifacts

    # ------------------------------------------------------------------
    # Stages

    def features(self) -> Artifacts:
        cfg = self.config
        try:
            data = self._manifest_digest()
        except Exception as e:
            raise PipelineError("features", e) from e
        params = {
            "data": data,
            "data_dir": str(self.data_dir.resolve()),
            "kmeans_k": cfg.kmeans_k,
            "max_tweets": cfg.max_tweets,
            "temporal_window": cfg.temporal_window,
            "drop_blocks": sorted(cfg.drop_blocks),
            "seed": cfg.seed,
        }

        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            matrix = build_features(self.data_dir, cfg)
            info["schema"] = [name for name, _ in matrix.schema]
            path = save_features(matrix, stage_dir / "features.bin")
            return {"features": str(path)}

        return self._run_stage("features", params, [], produce)

    def pretrain(self) -> Artifacts:
        cfg = self.config
        params = {
            "mlp_hidden": cfg.mlp_hidden,
            "mlp_epochs": cfg.mlp_epochs,
            "mlp_lr": cfg.mlp_lr,
            "mlp_patience": cfg.mlp_patience,
            "mlp_optimizer": cfg.mlp_optimizer,
            "seed": cfg.seed,
        }

        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            features = self._features()
            seed_everything(cfg.seed)
            model = train_mlp(
                features,
                self.labels(),
                hidden=cfg.mlp_hidden,
                epochs=cfg.mlp_epochs,
                lr=cfg.mlp_lr,
                seed=cfg.seed,
                patience=cfg.mlp_patience,
                optimizer=cfg.mlp_optimizer,
            )
            info["epochs"] = len(model.training_log)
            path = save_mlp(model, stage_dir / "mlp.bin")
            return {"mlp": str(path)}

        return self._run_stage("pretrain", params, ["features"], produce)

    def sample(self) -> Artifacts:
        cfg = self.config
        params = {
            "sampling": cfg.sampling,
            "k": cfg.k,
            "alpha": cfg.alpha,
            "eps": cfg.eps,
            "lambda": cfg.lam,
            "reverse": cfg.reverse,
            "sample_nodes": cfg.sample_nodes,
        }
        upstream = ["features"]
        if cfg.sampling == "biased":
            params["mlp_activated_hidden"] = cfg.mlp_activated_hidden
            upstream.append("pretrain")

        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            graph = self.graph()
            hidden = None
            if cfg.sampling == "biased":
                model = load_mlp(self.artifacts["pretrain"]["mlp"])
                hidden = hidden_repr(
                    model, self._features().values, activated=cfg.mlp_activated_hidden
                )
            sampler = get_sampler(cfg.sampling, graph, self.sampler_settings(), hidden)
            starts = start_nodes(self.labels(), graph.n, cfg.sample_nodes)
            writer = SubgraphCacheWriter(stage_dir / "cache.bsg", graph.relations)
            sampler.sample_many(starts, writer=writer)
            info["subgraphs"] = len(writer)
            return {"cache": str(writer.close())}

        return self._run_stage("sample", params, upstream, produce)

    def train(self) -> Artifacts:
        cfg = self.config
        params = {
            "gnn_hidden": cfg.gnn_hidden,
            "gnn_layers": cfg.gnn_layers,
            "attention_dim": cfg.attention_dim,
            "concat_intermediate": cfg.concat_intermediate,
            "fusion": cfg.fusion,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "max_epochs": cfg.max_epochs,
            "patience": cfg.patience,
            "reg_lambda": cfg.reg_lambda,
            "dropout": cfg.dropout,
            "seed": cfg.seed,
        }

        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            features = self._features()
            cache = self._cache()
            seed_everything(cfg.seed)
            model = build_model(features.s, cache.relations, cfg)
            try:
                model, log = train(
                    model,
                    cache,
                    features,
                    self.labels(),
                    batch_size=cfg.batch_size,
                    lr=cfg.lr,
                    max_epochs=cfg.max_epochs,
                    patience=cfg.patience,
                    reg_lambda=cfg.reg_lambda,
                    seed=cfg.seed,
                )
            except TrainingError as e:
                if e.last_good_state is not None:
                    model.load_state_dict(e.last_good_state)
                    path = save_gnn(model, stage_dir / "gnn.last_good.bin")
                    logger.warning(
                        f"Training stopped in epoch {e.epoch}; last good parameters "
                        f"saved to {path}"
                    )
                raise
            info["epochs"] = len(log)
            model_path = save_gnn(model, stage_dir / "gnn.bin")
            log_path = write_training_log(log, stage_dir / "train.jsonl")
            return {"gnn": str(model_path), "train_log": str(log_path)}

        return self._run_stage("train", params, ["features", "sample"], produce)

    def evaluate(self, split: str = "test") -> Artifacts:
        cfg = self.config
        params = {"split": split, "batch_size": cfg.batch_size}

        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            features = self._features()
            labels = self.labels()
            model = load_gnn(self.artifacts["train"]["gnn"])
            metrics = evaluate(
                model,
                self._cache(),
                features,
                labels,
                split=split,
                batch_size=cfg.batch_size,
                homophily=node_homophilies(self.graph(), labels),
            )
            mlp = load_mlp(self.artifacts["pretrain"]["mlp"])
            split_nodes = labels.split(split)
            metrics["mlp_accuracy"] = mlp_accuracy(mlp, features, labels, split_nodes)
            info.update(
                accuracy=round(metrics["accuracy"], 4), f1=round(metrics["f1"], 4)
            )
            return {"metrics": str(write_json(stage_dir / "metrics.json", metrics))}

        return self._run_stage("eval", params, ["train", "sample", "pretrain"], produce)

    def homophily(self) -> Artifacts:
        def produce(stage_dir: Path, info: Dict[str, Any]) -> Artifacts:
            labels = self.labels()
            original = homophily_report(self.graph(), labels)
            sampled = homophily_report(self._cache().ordered(), labels)
            info.update(graph=round(original.graph_homophily, 4))
            info.update(subgraphs=round(sampled.graph_homophily, 4))
            report = {"graph": original.to_dict(), "subgraphs": sampled.to_dict()}
            return {"homophily": str(write_json(stage_dir / "homophily.json", report))}

        return self._run_stage("homophily-report", {}, ["sample"], produce)

    # ------------------------------------------------------------------
    # Whole run

    def run(self) -> Dict[str, str]:
        """
        Execute every stage in order and write the run directory.

        Returns:
            Mapping of artifact name -> path, including ``metrics``,
            ``homophily`` and ``config`` in the run directory

        Raises:
            PipelineError: On the first failing stage
        """
        self.features()
        self.pretrain()
        self.sample()
        self.train()
        self.evaluate()
        self.homophily()
        return self.finalize()

    def finalize(self) -> Dict[str, str]:
        run_dir = ensure_directory(self.run_dir)
        config_path = write_resolved(run_dir / "config.resolved.yaml", self.config)

        eval_metrics = Path(self.artifacts["eval"]["metrics"])
        metrics = json.loads(eval_metrics.read_text(encoding="utf-8"))
        metrics["ablation"] = self.config.ablation_name
        metrics["seed"] = self.config.seed
        metrics_path = write_json(run_dir / "metrics.json", metrics)

        report = Path(self.artifacts["homophily-report"]["homophily"]).read_bytes()
        report_path = atomic_write_bytes(run_dir / "homophily.json", report)

        outputs: Dict[str, str] = {}
        for stage_artifacts in self.artifacts.values():
            outputs.update(stage_artifacts)
        outputs.update(
            metrics=str(metrics_path),
            homophily=str(report_path),
            config=str(config_path),
        )
        logger.info(
            f"Run '{run_dir.name}' done: accuracy={metrics['accuracy']:.4f} "
            f"f1={metrics['f1']:.4f} (skipped: {', '.join(self.skipped) or 'none'})"
        )
        return outputs

    # ------------------------------------------------------------------
    # Helpers

    def sampler_settings(self) -> Dict[str, Any]:
        cfg = self.config
        return {
            "k": cfg.k,
            "alpha": cfg.alpha,
            "eps": cfg.eps,
            "lambda": cfg.lam,
            "reverse": cfg.reverse,
            "workers": cfg.workers,
        }

    def _features(self) -> FeatureMatrix:
        return load_features(self.artifacts["features"]["features"])

    def _cache(self) -> SubgraphCache:
        return read_cache(self.artifacts["sample"]["cache"])


def build_features(data_dir: Path, cfg: RunConfig) -> FeatureMatrix:
    """
    Assemble the FeatureMatrix of a dataset directory.

    Precomputed blocks come from the manifest; the category block is
    computed from tweet embeddings and the temporal block from monthly
    counts when the dataset provides them.
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    blocks: List[Tuple[str, np.ndarray]] = []
    for name in ("description", "tweet", "num_meta", "cat_meta"):
        if name in manifest.blocks:
            path = data_dir / manifest.blocks[name]
            blocks.append((name, load_block(path, manifest.n, name)))

    if manifest.tweets is not None and "category" not in cfg.drop_blocks:
        tweets = load_tweet_embeddings(
            data_dir / manifest.tweets,
            data_dir / str(manifest.tweet_owners),
            manifest.n,
        )
        blocks.append(
            (
                "category",
                category_feature(
                    tweets, k=cfg.kmeans_k, max_tweets=cfg.max_tweets, seed=cfg.seed
                ),
            )
        )
    if manifest.monthly_counts is not None and "temporal" not in cfg.drop_blocks:
        counts = load_monthly_counts(data_dir / manifest.monthly_counts, manifest.n)
        temporal = temporal_feature(counts, window=cfg.temporal_window)
        blocks.append(("temporal", temporal))

    return assemble_features(blocks, drop=cfg.drop_blocks)


def start_nodes(labels: LabelSet, n: int, mode: str) -> np.ndarray:
    """Start nodes to sample: every labeled split member, or every node."""
    if mode == "all":
        return np.arange(n, dtype=np.int64)
    return np.unique(np.concatenate([labels.train, labels.val, labels.test]))


def write_training_log(log: Sequence[Dict[str, float]], path: Path) -> Path:
    """One JSON object per epoch."""
    lines = "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log)
    return atomic_write_bytes(path, lines.encode("utf-8"))


def run_pipeline(
    config: RunConfig, state: Optional[StateManager] = None
) -> Dict[str, str]:
    """Run every stage of one configuration."""
    return PipelineEngine(config, state).run()


def _variant_config(
    config: RunConfig, name: str, seed: int, update: Dict[str, Any]
) -> RunConfig:
    data = config.model_dump()
    data.update(update)
    data.update(seed=seed, ablation_name=f"{name}-seed{seed}")
    return RunConfig.model_validate(data)


def run_ablations(
    config: RunConfig,
    seeds: Sequence[int],
    include_feature_blocks: bool = False,
) -> Dict[str, Any]:
    """
    Run the full model and its ablation variants for every seed.

    Variants: full, ppr-sampling (lambda = 1), no-concat, mean-fusion and,
    with ``include_feature_blocks``, no-category and no-temporal. Stages
    shared between variants run once thanks to the ledger.

    Returns:
        Report written to ``<out_dir>/ablations.json``: per variant the
        per-seed accuracies and F1 scores, their medians and whether the
        full model's median is at least the variant's
    """
    variants = dict(ABLATION_VARIANTS)
    if include_feature_blocks:
        variants.update(FEATURE_ABLATIONS)

    state = StateManager(Path(config.out_dir) / "state.db")
    results: Dict[str, Dict[str, List[float]]] = {
        name: {"accuracy": [], "f1": []} for name in variants
    }
    mlp: List[float] = []
    for seed in seeds:
        for name, update in variants.items():
            outputs = run_pipeline(_variant_config(config, name, seed, update), state)
            metrics = json.loads(Path(outputs["metrics"]).read_text(encoding="utf-8"))
            results[name]["accuracy"].append(metrics["accuracy"])
            results[name]["f1"].append(metrics["f1"])
            if name == "full":
                mlp.append(metrics["mlp_accuracy"])

    report: Dict[str, Any] = {"seeds": list(seeds), "variants": {}}
    for name, values in results.items():
        report["variants"][name] = {
            "accuracy": values["accuracy"],
            "f1": values["f1"],
            "median_accuracy": float(np.median(values["accuracy"])),
            "median_f1": float(np.median(values["f1"])),
        }
    full_median = report["variants"]["full"]["median_accuracy"]
    for name, entry in report["variants"].items():
        entry["full_at_least"] = bool(full_median >= entry["median_accuracy"])
    full_accuracy = results["full"]["accuracy"]
    report["mlp"] = {
        "accuracy": mlp,
        "median_accuracy": float(np.median(mlp)),
        "seeds_gnn_ahead_by_2_points": int(
            sum(g >= m + 0.02 for g, m in zip(full_accuracy, mlp))
        ),
    }
    write_json(Path(config.out_dir) / "ablations.json", report)
    logger.info(
        f"Ablation report over {len(seeds)} seed(s) written to {config.out_dir}"
    )
    return report


def sweep_k(config: RunConfig, ks: Sequence[int]) -> Dict[str, Any]:
    """
    Retrain and evaluate for several subgraph sizes.

    Returns:
        Report written to ``<out_dir>/sweep_k.json`` mapping k to accuracy and F1
    """
    state = StateManager(Path(config.out_dir) / "state.db")
    report: Dict[str, Any] = {"seed": config.seed, "k": {}}
    for k in ks:
        variant = _variant_config(config, f"k{k}", config.seed, {"k": int(k)})
        outputs = run_pipeline(variant, state)
        metrics = json.loads(Path(outputs["metrics"]).read_text(encoding="utf-8"))
        report["k"][str(k)] = {"accuracy": metrics["accuracy"], "f1": metrics["f1"]}
    write_json(Path(config.out_dir) / "sweep_k.json", report)
    return report
