"""
Two-layer MLP pre-classifier.

The model is ``softmax(W1 . leaky_relu(W0 . x + b0) + b1)``, trained full-batch
on the train and validation nodes together. Its first layer defines the hidden
representation used for node similarity when sampling subgraphs; by default
that representation is the pre-activation ``W0 . x + b0``.
"""

import struct
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from core.features import FeatureMatrix
from core.graph import LabelSet
from lib.logger import get_logger
from lib.utils import atomic_write_bytes

MODEL_MAGIC = b"BOTGMLP\x00"
MODEL_VERSION = 1
DEFAULT_SLOPE = 0.01

logger = get_logger()


class PreclassifierError(Exception):
    """
    Exception raised for pre-classifier errors.

    Used for empty fitting sets, feature width mismatches, diverging training
    and malformed model files.
    """


ArrayLike = Union[np.ndarray, FeatureMatrix]


def _as_array(features: ArrayLike) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    return np.asarray(features, dtype=np.float64)


class MlpModel(nn.Module):
    """
    Pre-classifier parameters W0 (h x s), b0, W1 (2 x h), b1 in float64.

    Weights use Xavier-uniform initialization drawn from ``seed``; biases
    start at zero.
    """

    def __init__(
        self, s: int, h: int = 128, slope: float = DEFAULT_SLOPE, seed: int = 0
    ):
        super().__init__()
        if s < 1 or h < 1:
            raise PreclassifierError(
                f"Feature width and hidden width must be >= 1, got s={s}, h={h}"
            )
        self.s = s
        self.h = h
        self.slope = slope
        self.seed = seed
        self.hidden = nn.Linear(s, h, dtype=torch.float64)
        self.output = nn.Linear(h, 2, dtype=torch.float64)
        self.training_log: List[float] = []

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            nn.init.xavier_uniform_(self.hidden.weight)
            nn.init.xavier_uniform_(self.output.weight)
        nn.init.zeros_(self.hidden.bias)
        nn.init.zeros_(self.output.bias)

    @property
    def W0(self) -> torch.Tensor:
        return self.hidden.weight

    @property
    def b0(self) -> torch.Tensor:
        return self.hidden.bias

    @property
    def W1(self) -> torch.Tensor:
        return self.output.weight

    @property
    def b1(self) -> torch.Tensor:
        return self.output.bias

    def pre_activation(self, x: torch.Tensor) -> torch.Tensor:
        return self.hidden(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(F.leaky_relu(self.hidden(x), self.slope))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=-1)


def _check_width(model: MlpModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.s:
        raise PreclassifierError(
            f"Feature width {x.shape[-1]} does not match model width s={model.s}"
        )


def fitting_loss(model: MlpModel, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the model on (x, y)."""
    return F.cross_entropy(model.logits(x), y)


def train_mlp(
    features: ArrayLike,
    labels: LabelSet,
    hidden: int = 128,
    epochs: int = 200,
    lr: float = 1e-2,
    seed: int = 0,
    patience: int = 10,
    optimizer: Literal["adam", "sgd"] = "adam",
    slope: float = DEFAULT_SLOPE,
    min_delta: float = 1e-8,
) -> MlpModel:
    """
    Train the pre-classifier on the train and validation nodes.

    Full-batch gradient descent on the mean cross-entropy. Training stops after
    ``epochs`` updates or once the fitting loss failed to improve by more than
    ``min_delta`` for ``patience`` consecutive epochs; the parameters with the
    lowest fitting loss are kept. ``model.training_log`` holds the fitting
    loss measured before every update (and after the last one).

    Args:
        features: n x s features
        labels: Labels with splits; train and val form the fitting set
        hidden: Hidden width h
        epochs: Maximum number of updates (0 returns the initialization)
        lr: Learning rate
        seed: Initialization seed
        patience: Early-stopping patience in epochs
        optimizer: "adam" or "sgd"
        slope: leaky-relu negative slope

    Returns:
        Trained MlpModel

    Raises:
        PreclassifierError: If the fitting set is empty or the loss diverges
    """
    x_all = _as_array(features)
    fitting = labels.fitting
    if fitting.size == 0:
        raise PreclassifierError("Fitting set (train + val) is empty")
    if x_all.shape[0] != labels.n:
        raise PreclassifierError(
            f"Feature rows ({x_all.shape[0]}) and label count ({labels.n}) differ"
        )

    model = MlpModel(x_all.shape[1], hidden, slope=slope, seed=seed)
    x = torch.from_numpy(np.ascontiguousarray(x_all[fitting]))
    y = torch.from_numpy(labels.labels[fitting].astype(np.int64))

    if optimizer == "adam":
        opt: torch.optim.Optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=lr)
    else:
        raise PreclassifierError(
            f"Unknown optimizer '{optimizer}'; expected 'adam' or 'sgd'"
        )

    best_loss = float("inf")
    best_state: Dict[str, torch.Tensor] = {
        k: v.clone() for k, v in model.state_dict().items()
    }
    stale = 0
    log: List[float] = []

    for epoch in range(epochs + 1):
        opt.zero_grad()
        loss = fitting_loss(model, x, y)
        value = float(loss.item())
        if not np.isfinite(value):
            last = log[-1] if log else float("nan")
            raise PreclassifierError(
                f"Pre-classifier loss became non-finite at epoch {epoch} "
                f"(last finite loss {last:.6g}, lr={lr}); lower the learning rate"
            )
        log.append(value)

        if value < best_loss - min_delta:
            best_loss = value
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
        if epoch == epochs or stale >= patience:
            break

        loss.backward()
        opt.step()

    model.load_state_dict(best_state)
    model.training_log = log
    model.eval()
    logger.debug(
        f"Pre-classifier trained: {len(log) - 1} updates, "
        f"best fitting loss {best_loss:.6f}"
    )
    return model


def hidden_repr(
    model: MlpModel, x: ArrayLike, activated: bool = False
) -> np.ndarray:
    """
    Hidden representation ``W0 . x + b0`` of one row or a matrix of rows.

    Args:
        model: Trained pre-classifier
        x: s-vector or m x s matrix
        activated: Apply leaky-relu to the representation

    Raises:
        PreclassifierError: On width mismatch
    """
    array = _as_array(x)
    _check_width(model, array)
    with torch.no_grad():
        out = model.pre_activation(torch.from_numpy(np.ascontiguousarray(array)))
        if activated:
            out = F.leaky_relu(out, model.slope)
    return out.numpy()


def pair_similarity(h_i: np.ndarray, h_j: np.ndarray) -> float:
    """
    Cosine similarity mapped to [0, 1]: ``(1 + cos) / 2``.

    A zero vector has cosine 0 with everything, i.e. similarity 0.5.

    Example:
        >>> pair_similarity(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
        0.5
    """
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    norm = float(np.linalg.norm(h_i) * np.linalg.norm(h_j))
    if norm == 0.0:
        return 0.5
    cos = float(np.dot(h_i, h_j)) / norm
    return (1.0 + min(1.0, max(-1.0, cos))) / 2.0


def similarity_to(hidden: np.ndarray, v: int, candidates: np.ndarray) -> np.ndarray:
    """Vectorized pair_similarity between row v and each candidate row."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        return np.empty(0, dtype=np.float64)
    anchor = hidden[v]
    rows = hidden[candidates]
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(anchor)
    dots = rows @ anchor
    cos = np.zeros(len(candidates), dtype=np.float64)
    nonzero = norms > 0
    cos[nonzero] = np.clip(dots[nonzero] / norms[nonzero], -1.0, 1.0)
    return (1.0 + cos) / 2.0


def predict_proba(model: MlpModel, features: ArrayLike) -> np.ndarray:
    """
    Class probabilities (column 0 human, column 1 bot) for every row.

    Raises:
        PreclassifierError: On width mismatch
    """
    array = np.atleast_2d(_as_array(features))
    _check_width(model, array)
    with torch.no_grad():
        return model(torch.from_numpy(np.ascontiguousarray(array))).numpy()


def mlp_accuracy(
    model: MlpModel,
    features: ArrayLike,
    labels: LabelSet,
    nodes: Optional[np.ndarray] = None,
) -> float:
    """Accuracy of argmax predictions over ``nodes`` (default: the test split)."""
    nodes = labels.test if nodes is None else np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise PreclassifierError("Cannot compute accuracy over an empty node set")
    proba = predict_proba(model, _as_array(features)[nodes])
    return float((proba.argmax(axis=1) == labels.labels[nodes]).mean())


# Model files: magic, (version, s, h) as uint32, slope and seed,
# then W0, b0, W1, b1 as f8

_HEADER = struct.Struct("<IIIdq")


def save_mlp(model: MlpModel, path: Union[str, Path]) -> Path:
    """Write the model in the versioned binary format."""
    header = MODEL_MAGIC + _HEADER.pack(
        MODEL_VERSION, model.s, model.h, model.slope, model.seed
    )
    body = b"".join(
        np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes()
        for t in (model.W0, model.b0, model.W1, model.b1)
    )
    return atomic_write_bytes(path, header + body)


def load_mlp(path: Union[str, Path]) -> MlpModel:
    """
    Read a model written by save_mlp().

    Raises:
        PreclassifierError: On a bad magic string, unknown version or truncated body
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise PreclassifierError(f"{path}: not a pre-classifier model file")
    offset = len(MODEL_MAGIC)
    try:
        version, s, h, slope, seed = _HEADER.unpack_from(raw, offset)
    except struct.error as e:
        raise PreclassifierError(f"{path}: truncated header") from e
    if version != MODEL_VERSION:
        raise PreclassifierError(f"{path}: unsupported model version {version}")
    offset += _HEADER.size

    shapes = [(h, s), (h,), (2, h), (2,)]
    expected = sum(int(np.prod(shape)) for shape in shapes) * 8
    if len(raw) - offset != expected:
        raise PreclassifierError(
            f"{path}: body has {len(raw) - offset} bytes, expected {expected}"
        )

    model = MlpModel(s, h, slope=slope, seed=seed)
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        flat = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        values = flat.reshape(shape)
        tensors.append(torch.from_numpy(values.copy()))
        offset += count * 8
    with torch.no_grad():
        for param, value in zip((model.W0, model.b0, model.W1, model.b1), tensors):
            param.copy_(value)
    model.eval()
    return model
