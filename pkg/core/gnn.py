"""
Relational subgraph GNN with semantic attention.

For a batch of biased subgraphs the model computes

1. an input transform ``h0 = leaky_relu(W2 . x + b2)`` for every node;
2. per relation, ``layers`` mean-aggregation GCN layers over the subgraph
   edges (in-neighbors plus a self-loop);
3. per relation, the concatenation of h0..h_layers at each root row
   (or h_layers alone when concatenation is off);
4. a softmax attention over relations, scored on the batch's root rows
   (or a plain mean when fusion is "mean");
5. a softmax output head over {human, bot}.

Only root (start-node) predictions enter the loss: summed binary
cross-entropy on the bot probability plus an L2 term over all parameters.
Everything runs on CPU in float64.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import accuracy_score, f1_score
from torch import nn

from core.features import FeatureMatrix
from core.graph import BOT, LabelSet
from core.sampler import BiasedSubgraph, SubgraphCache, homophily_bin
from lib.logger import get_logger
from lib.utils import atomic_write_bytes

MODEL_MAGIC = b"BOTGGNN\x00"
MODEL_VERSION = 1
PROB_CLAMP = 1e-12
DEFAULT_SLOPE = 0.01

logger = get_logger()


class GnnError(Exception):
    """
    Exception raised for subgraph GNN errors.

    Used for dimension mismatches, invalid labels, empty batches and splits,
    and malformed model files.
    """


class TrainingError(GnnError):
    """
    Exception raised when training cannot continue.

    Attributes:
        epoch: Epoch in which training stopped
        last_good_state: state_dict of the last parameters with a finite loss
    """

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        last_good_state: Optional[Dict[str, torch.Tensor]] = None,
    ):
        super().__init__(message)
        self.epoch = epoch
        self.last_good_state = last_good_state


def _features_array(features: Union[np.ndarray, FeatureMatrix]) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    return np.asarray(features, dtype=np.float64)


class GnnModel(nn.Module):
    """
    Parameters of the subgraph learner.

    Attributes:
        input: W2, b2 (hidden x s)
        gcn: per relation, per layer W3 (hidden x hidden, no bias)
        attention: W, b (attention_dim x out_dim); ``query`` is q
        head: W_O, b_O (2 x out_dim)
    """

    def __init__(
        self,
        s: int,
        relations: Sequence[str],
        hidden: int = 64,
        layers: int = 2,
        attention_dim: int = 32,
        concat_intermediate: bool = True,
        fusion: str = "attention",
        dropout: float = 0.3,
        slope: float = DEFAULT_SLOPE,
        seed: int = 0,
    ):
        super().__init__()
        if not relations:
            raise GnnError("GnnModel needs at least one relation")
        if fusion not in ("attention", "mean"):
            raise GnnError(f"Unknown fusion '{fusion}'; expected 'attention' or 'mean'")
        if s < 1 or hidden < 1 or attention_dim < 1 or layers < 0:
            raise GnnError(
                f"Invalid dimensions s={s}, hidden={hidden}, "
                f"attention_dim={attention_dim}, layers={layers}"
            )
        self.s = s
        self.relations = tuple(relations)
        self.hidden = hidden
        self.layers = layers
        self.attention_dim = attention_dim
        self.concat_intermediate = concat_intermediate
        self.fusion = fusion
        self.dropout = dropout
        self.slope = slope
        self.seed = seed
        self.out_dim = (layers + 1) * hidden if concat_intermediate else hidden

        dtype = torch.float64
        self.input = nn.Linear(s, hidden, dtype=dtype)
        self.gcn = nn.ModuleList(
            nn.ModuleList(
                nn.Linear(hidden, hidden, bias=False, dtype=dtype)
                for _ in range(layers)
            )
            for _ in self.relations
        )
        self.attention = nn.Linear(self.out_dim, attention_dim, dtype=dtype)
        self.query = nn.Parameter(torch.zeros(attention_dim, dtype=dtype))
        self.head = nn.Linear(self.out_dim, 2, dtype=dtype)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    nn.init.xavier_uniform_(module.weight)
                    if module.bias is not None:
                        nn.init.zeros_(module.bias)
            bound = 1.0 / np.sqrt(attention_dim)
            nn.init.uniform_(self.query, -bound, bound)

    def config(self) -> Dict[str, Any]:
        return {
            "s": self.s,
            "relations": list(self.relations),
            "hidden": self.hidden,
            "layers": self.layers,
            "attention_dim": self.attention_dim,
            "concat_intermediate": self.concat_intermediate,
            "fusion": self.fusion,
            "dropout": self.dropout,
            "slope": self.slope,
            "seed": self.seed,
        }

    def forward(self, batch: "Batch") -> Tuple[torch.Tensor, torch.Tensor]:
        """Root-node class probabilities (B x 2) and relation weights beta (R)."""
        h0 = init_hidden(self, batch.x)
        h0 = F.dropout(h0, self.dropout, self.training)
        per_relation = []
        for index, relation in enumerate(self.relations):
            src, dst = batch.edges[relation]
            outputs = [h0]
            h = h0
            for layer in range(1, self.layers + 1):
                h = gcn_layer(self, index, layer, h, src, dst)
                h = F.dropout(h, self.dropout, self.training)
                outputs.append(h)
            final = concat_intermediate(outputs, self.concat_intermediate)
            per_relation.append(final[batch.roots])
        fused, beta = semantic_attention(self, per_relation)
        return predict(self, fused), beta


def init_hidden(model: GnnModel, x: torch.Tensor) -> torch.Tensor:
    """Input transform ``leaky_relu(W2 . x + b2)`` of every row."""
    if x.shape[-1] != model.s:
        raise GnnError(
            f"Feature width {x.shape[-1]} does not match model width s={model.s}"
        )
    return F.leaky_relu(model.input(x), model.slope)


def gcn_layer(
    model: GnnModel,
    relation: int,
    layer: int,
    h: torch.Tensor,
    src: torch.Tensor,
    dst: torch.Tensor,
    self_loop: bool = True,
    activation: bool = True,
) -> torch.Tensor:
    """
    One mean-aggregation GCN layer of a relation.

    Each node i averages ``W3 . h_j`` over its in-neighbors j (edges src -> dst)
    and, with ``self_loop``, itself. Nodes with nothing to average get a zero
    row.

    Args:
        model: Model holding W3 per relation and layer
        relation: Relation index
        layer: Layer number in [1, layers]
        h: Rows of the previous layer
        src, dst: Edge endpoints (messages flow src -> dst)
        self_loop: Include each node in its own neighborhood
        activation: Apply leaky-relu
    """
    if not 1 <= layer <= model.layers:
        raise GnnError(f"layer must lie in [1, {model.layers}], got {layer}")
    if h.shape[-1] != model.hidden:
        raise GnnError(f"hidden width {h.shape[-1]} does not match {model.hidden}")
    transformed = model.gcn[relation][layer - 1](h)
    n = h.shape[0]
    counts = torch.zeros(n, dtype=h.dtype).index_add(
        0, dst, torch.ones(dst.shape[0], dtype=h.dtype)
    )
    if self_loop:
        summed = transformed.index_add(0, dst, transformed[src])
        counts = counts + 1.0
    else:
        summed = torch.zeros_like(transformed).index_add(0, dst, transformed[src])
    out = summed / counts.clamp(min=1.0).unsqueeze(1)
    return F.leaky_relu(out, model.slope) if activation else out


def concat_intermediate(
    outputs: Sequence[torch.Tensor], enabled: bool = True
) -> torch.Tensor:
    """Concatenate h0..h_layers column-wise, or return the last one when disabled."""
    if not outputs:
        raise GnnError("no layer outputs to combine")
    if not enabled:
        return outputs[-1]
    return torch.cat(list(outputs), dim=-1)


def semantic_attention(
    model: GnnModel, per_relation: Sequence[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Fuse per-relation root rows with softmax relation weights.

    w_r is the mean over the batch rows of ``q . tanh(W . z + b)``; beta is
    softmax(w), or uniform when the model uses mean fusion.

    Returns:
        (fused B x out_dim rows, beta of length R)
    """
    if not per_relation:
        raise GnnError("semantic attention needs at least one relation")
    stacked = torch.stack(list(per_relation), dim=0)
    if stacked.shape[1] == 0:
        raise GnnError("semantic attention over an empty batch")
    if model.fusion == "mean":
        count = stacked.shape[0]
        beta = torch.full((count,), 1.0 / count, dtype=stacked.dtype)
    else:
        scores = torch.tanh(model.attention(stacked)) @ model.query
        beta = torch.softmax(scores.mean(dim=1), dim=0)
    fused = (beta[:, None, None] * stacked).sum(dim=0)
    return fused, beta


def predict(model: GnnModel, fused: torch.Tensor) -> torch.Tensor:
    """Class probabilities ``softmax(W_O . h + b_O)``."""
    if fused.shape[-1] != model.out_dim:
        raise GnnError(
            f"fused width {fused.shape[-1]} does not match output head {model.out_dim}"
        )
    return torch.softmax(model.head(fused), dim=-1)


def gnn_loss(
    probs: torch.Tensor,
    labels: torch.Tensor,
    reg_lambda: float = 0.0,
    parameters: Iterable[torch.Tensor] = (),
) -> torch.Tensor:
    """
    Summed binary cross-entropy of the bot probability plus L2 regularization.

    Probabilities are clamped to [1e-12, 1 - 1e-12].

    Raises:
        GnnError: If a label is not 0 or 1
    """
    if labels.numel() and not bool(((labels == 0) | (labels == 1)).all()):
        raise GnnError("labels must be 0 (human) or 1 (bot)")
    p = probs[:, BOT].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.to(p.dtype)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()
    if reg_lambda:
        loss = loss + reg_lambda * sum((w**2).sum() for w in parameters)
    return loss


def loss(
    model: GnnModel, probs: torch.Tensor, labels: torch.Tensor, reg_lambda: float
) -> torch.Tensor:
    """gnn_loss regularized over every parameter of the model."""
    return gnn_loss(probs, labels, reg_lambda, model.parameters())


@dataclass
class Batch:
    """
    Subgraphs merged into one disjoint local index space.

    Attributes:
        starts: Global start node of each subgraph
        x: Feature rows of every merged node
        roots: Merged row of each start node
        edges: relation -> (src, dst) merged indices, messages flowing src -> dst
        y: Start-node labels, or None for unlabeled prediction batches
    """

    starts: np.ndarray
    x: torch.Tensor
    roots: torch.Tensor
    edges: Dict[str, Tuple[torch.Tensor, torch.Tensor]]
    y: Optional[torch.Tensor] = None
    sizes: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.starts.shape[0])


def message_edges(subgraph: BiasedSubgraph, relation: str) -> np.ndarray:
    """
    Local edges of a relation oriented for message passing.

    Edges leaving the root (the star edges) are flipped so selected nodes send
    into the root; duplicates are dropped.
    """
    edges = subgraph.edges[relation]
    if not len(edges):
        return np.empty((0, 2), dtype=np.int64)
    oriented = edges.copy()
    from_root = oriented[:, 0] == 0
    oriented[from_root] = oriented[from_root][:, ::-1]
    return np.unique(oriented, axis=0)


def collate(
    subgraphs: Sequence[BiasedSubgraph],
    features: Union[np.ndarray, FeatureMatrix],
    relations: Sequence[str],
    labels: Optional[LabelSet] = None,
) -> Batch:
    """
    Merge subgraphs into one Batch.

    Raises:
        GnnError: If the batch is empty, a relation is missing, or a start
            node lacks a label when labels are given
    """
    if not subgraphs:
        raise GnnError("cannot collate an empty batch")
    x_all = _features_array(features)
    rows: List[np.ndarray] = []
    roots: List[int] = []
    per_relation: Dict[str, List[np.ndarray]] = {r: [] for r in relations}
    offset = 0
    for subgraph in subgraphs:
        rows.append(subgraph.node_ids)
        roots.append(offset)
        for relation in relations:
            if relation not in subgraph.edges:
                raise GnnError(
                    f"subgraph of {subgraph.start} has no relation '{relation}'"
                )
            per_relation[relation].append(message_edges(subgraph, relation) + offset)
        offset += subgraph.n_local

    node_ids = np.concatenate(rows)
    edges = {}
    for relation, parts in per_relation.items():
        merged = np.concatenate(parts) if parts else np.empty((0, 2), dtype=np.int64)
        merged = merged.reshape(-1, 2)
        edges[relation] = (
            torch.from_numpy(np.ascontiguousarray(merged[:, 0])),
            torch.from_numpy(np.ascontiguousarray(merged[:, 1])),
        )

    starts = np.array([sg.start for sg in subgraphs], dtype=np.int64)
    y = None
    if labels is not None:
        start_labels = labels.labels[starts].astype(np.int64)
        unlabeled = starts[start_labels < 0]
        if unlabeled.size:
            raise GnnError(
                f"start node {int(unlabeled[0])} in a training batch is unlabeled"
            )
        y = torch.from_numpy(start_labels)

    return Batch(
        starts=starts,
        x=torch.from_numpy(np.ascontiguousarray(x_all[node_ids])),
        roots=torch.tensor(roots, dtype=torch.int64),
        edges=edges,
        y=y,
        sizes=[sg.n_local for sg in subgraphs],
    )


def _batches(
    cache: SubgraphCache,
    nodes: np.ndarray,
    features: np.ndarray,
    labels: Optional[LabelSet],
    batch_size: int,
) -> List[Batch]:
    return [
        collate(
            [cache.get(v) for v in nodes[i : i + batch_size].tolist()],
            features,
            cache.relations,
            labels,
        )
        for i in range(0, len(nodes), batch_size)
    ]


def _require_cached(cache: SubgraphCache, nodes: np.ndarray, split: str) -> None:
    missing = cache.missing(nodes.tolist())
    if missing:
        raise GnnError(
            f"{len(missing)} {split} node(s) have no cached subgraph "
            f"(first: {missing[0]})"
        )


def _clone_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    model: GnnModel,
    cache: SubgraphCache,
    features: Union[np.ndarray, FeatureMatrix],
    labels: LabelSet,
    batch_size: int = 64,
    lr: float = 1e-3,
    max_epochs: int = 100,
    patience: int = 10,
    reg_lambda: float = 1e-5,
    seed: int = 0,
) -> Tuple[GnnModel, List[Dict[str, float]]]:
    """
    Mini-batch training with early stopping on validation loss.

    Training batches are reshuffled every epoch from ``seed``. After training
    the parameters with the lowest validation loss are restored (the last
    epoch's when there is no validation split).

    Args:
        model: Freshly initialized model (trained in place)
        cache: Subgraphs covering the train and val nodes
        features: Node features
        labels: Labels and splits
        batch_size: Subgraphs per batch
        lr: Adam learning rate
        max_epochs: Epoch limit
        patience: Epochs without validation improvement before stopping
        reg_lambda: L2 coefficient
        seed: Shuffling and dropout seed

    Returns:
        (model, log) where log holds one dict per epoch with train_loss,
        val_loss and val_accuracy

    Raises:
        GnnError: If train is empty or split nodes are not cached
        TrainingError: If the loss becomes non-finite
    """
    x_all = _features_array(features)
    if labels.train.size == 0:
        raise GnnError("training split is empty")
    _require_cached(cache, labels.train, "train")
    _require_cached(cache, labels.val, "val")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    val_batches: List[Batch] = []
    if labels.val.size:
        val_batches = _batches(cache, labels.val, x_all, labels, batch_size)

    log: List[Dict[str, float]] = []
    best_val = float("inf")
    best_state = _clone_state(model)
    last_good = _clone_state(model)
    stale = 0

    for epoch in range(1, max_epochs + 1):
        model.train()
        order = labels.train[rng.permutation(len(labels.train))]
        total = 0.0
        for batch in _batches(cache, order, x_all, labels, batch_size):
            optimizer.zero_grad()
            probs, _ = model(batch)
            value = loss(model, probs, batch.y, reg_lambda)
            if not torch.isfinite(value):
                raise TrainingError(
                    f"training loss became non-finite in epoch {epoch}; "
                    "the last good parameters are attached",
                    epoch=epoch,
                    last_good_state=last_good,
                )
            value.backward()
            optimizer.step()
            last_good = _clone_state(model)
            total += float(value.item())

        entry: Dict[str, float] = {
            "epoch": epoch,
            "train_loss": total / len(labels.train),
        }
        if val_batches:
            val_loss, val_acc = _validation(model, val_batches)
            entry.update(val_loss=val_loss, val_accuracy=val_acc)
            if val_loss < best_val:
                best_val = val_loss
                best_state = _clone_state(model)
                stale = 0
            else:
                stale += 1
        else:
            best_state = _clone_state(model)
        log.append(entry)
        logger.debug(
            f"epoch {epoch} train_loss={entry['train_loss']:.6f} "
            f"val_loss={entry.get('val_loss', float('nan')):.6f}"
        )
        if val_batches and stale >= patience:
            logger.info(
                f"Early stopping after epoch {epoch} (best val loss {best_val:.6f})"
            )
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, log


def _validation(model: GnnModel, batches: Sequence[Batch]) -> Tuple[float, float]:
    model.eval()
    total = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for batch in batches:
            probs, _ = model(batch)
            total += float(gnn_loss(probs, batch.y).item())
            correct += int((probs.argmax(dim=1) == batch.y).sum().item())
            count += len(batch)
    return total / count, correct / count


def predict_nodes(
    model: GnnModel,
    cache: SubgraphCache,
    features: Union[np.ndarray, FeatureMatrix],
    nodes: Sequence[int],
    batch_size: int = 64,
) -> np.ndarray:
    """Bot/human probabilities of the given start nodes (len(nodes) x 2)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return np.empty((0, 2), dtype=np.float64)
    _require_cached(cache, nodes, "requested")
    model.eval()
    outputs = []
    with torch.no_grad():
        x_all = _features_array(features)
        for batch in _batches(cache, nodes, x_all, None, batch_size):
            probs, _ = model(batch)
            outputs.append(probs.numpy())
    return np.concatenate(outputs, axis=0)


def evaluate(
    model: GnnModel,
    cache: SubgraphCache,
    features: Union[np.ndarray, FeatureMatrix],
    labels: LabelSet,
    split: str = "test",
    batch_size: int = 64,
    homophily: Optional[Dict[int, float]] = None,
) -> Dict[str, Any]:
    """
    Accuracy and F1 (bot = positive class) on a split.

    Args:
        homophily: Optional node -> homophily in the original graph; adds
            accuracy per homophily bin under ``by_homophily``

    Raises:
        GnnError: If the split is empty or not cached
    """
    nodes = labels.split(split)
    if nodes.size == 0:
        raise GnnError(f"split '{split}' is empty")
    probs = predict_nodes(model, cache, features, nodes, batch_size)
    predicted = probs.argmax(axis=1)
    truth = labels.labels[nodes].astype(np.int64)
    metrics: Dict[str, Any] = {
        "accuracy": float(accuracy_score(truth, predicted)),
        "f1": float(f1_score(truth, predicted, pos_label=BOT, zero_division=0)),
        "split": split,
        "n": int(nodes.size),
    }
    if homophily is not None:
        metrics["by_homophily"] = accuracy_by_homophily(
            nodes, truth, predicted, homophily
        )
    return metrics


def accuracy_by_homophily(
    nodes: np.ndarray,
    truth: np.ndarray,
    predicted: np.ndarray,
    homophily: Dict[int, float],
) -> Dict[str, Dict[str, float]]:
    """Accuracy per node-homophily bin; nodes with undefined homophily are skipped."""
    names = ["[0.00,0.25)", "[0.25,0.50)", "[0.50,0.75)", "[0.75,1.00]"]
    hits = [0, 0, 0, 0]
    counts = [0, 0, 0, 0]
    for node, y, p in zip(nodes.tolist(), truth.tolist(), predicted.tolist()):
        if node not in homophily:
            continue
        b = homophily_bin(homophily[node])
        counts[b] += 1
        hits[b] += int(y == p)
    return {
        names[b]: {"n": counts[b], "accuracy": hits[b] / counts[b]}
        for b in range(4)
        if counts[b]
    }


# Model files: magic, version and config length (uint32), JSON config, then
# every state_dict tensor in key order as little-endian float64.

_HEADER = struct.Struct("<II")


def save_gnn(model: GnnModel, path: Union[str, Path]) -> Path:
    """Write the model in the versioned binary format."""
    config = json.dumps(model.config(), sort_keys=True).encode("utf-8")
    state = model.state_dict()
    body = b"".join(
        np.ascontiguousarray(state[key].detach().numpy(), dtype="<f8").tobytes()
        for key in sorted(state)
    )
    return atomic_write_bytes(
        path, MODEL_MAGIC + _HEADER.pack(MODEL_VERSION, len(config)) + config + body
    )


def load_gnn(path: Union[str, Path]) -> GnnModel:
    """
    Read a model written by save_gnn().

    Raises:
        GnnError: On a bad magic string, unknown version or size mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise GnnError(f"{path}: not a GNN model file")
    offset = len(MODEL_MAGIC)
    try:
        version, length = _HEADER.unpack_from(raw, offset)
    except struct.error as e:
        raise GnnError(f"{path}: truncated header") from e
    if version != MODEL_VERSION:
        raise GnnError(f"{path}: unsupported model version {version}")
    offset += _HEADER.size
    try:
        config = json.loads(raw[offset : offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GnnError(f"{path}: unreadable model config") from e
    offset += length

    model = GnnModel(**config)
    state = model.state_dict()
    loaded = {}
    for key in sorted(state):
        count = state[key].numel()
        if offset + count * 8 > len(raw):
            raise GnnError(f"{path}: truncated parameters at '{key}'")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        loaded[key] = torch.from_numpy(values.reshape(tuple(state[key].shape)).copy())
        offset += count * 8
    if offset != len(raw):
        raise GnnError(f"{path}: {len(raw) - offset} trailing bytes")
    model.load_state_dict(loaded)
    model.eval()
    return model


def build_model(s: int, relations: Sequence[str], config: Any) -> GnnModel:
    """GnnModel from a RunConfig-like object."""
    return GnnModel(
        s=s,
        relations=relations,
        hidden=config.gnn_hidden,
        layers=config.gnn_layers,
        attention_dim=config.attention_dim,
        concat_intermediate=config.concat_intermediate,
        fusion=config.fusion,
        dropout=config.dropout,
        seed=config.seed,
    )
