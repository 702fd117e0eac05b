"""
Tests for core.preclassifier.

Tests cover:
- Analytic gradients against finite differences
- Training behavior (monotone SGD loss, separable accuracy, early stopping)
- Hidden representations and cosine similarities
- Model file round-trips and error handling
"""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from core.graph import LabelSet
from core.preclassifier import (
    MlpModel,
    PreclassifierError,
    fitting_loss,
    hidden_repr,
    load_mlp,
    mlp_accuracy,
    pair_similarity,
    predict_proba,
    save_mlp,
    similarity_to,
    train_mlp,
)


class TestGradients:
    """Tests for the cross-entropy gradients."""

    def test_gradcheck_all_parameters(self):
        """Test autograd gradients of the fitting loss against finite differences."""
        model = MlpModel(5, 4, seed=1)
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.standard_normal((7, 5)))
        y = torch.from_numpy(rng.integers(0, 2, size=7))
        names = [name for name, _ in model.named_parameters()]
        params = tuple(
            p.detach().clone().requires_grad_(True) for p in model.parameters()
        )

        def loss_of(*values):
            logits = functional_call(model, dict(zip(names, values)), (x,))
            return F.nll_loss(torch.log(logits), y)

        assert torch.autograd.gradcheck(loss_of, params, eps=1e-6, atol=1e-5)

    def test_fitting_loss_is_mean_cross_entropy(self):
        """Test fitting_loss against the per-row negative log-likelihood."""
        model = MlpModel(3, 2, seed=2)
        x = torch.tensor([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
        y = torch.tensor([1, 0])

        proba = model(x)
        expected = -(torch.log(proba[0, 1]) + torch.log(proba[1, 0])) / 2

        loss = float(fitting_loss(model, x, y))
        assert loss == pytest.approx(float(expected), rel=1e-12)


class TestTrainMlp:
    """Tests for train_mlp."""

    def test_sgd_loss_is_monotone(self, separable_problem):
        """Test that small-step full-batch SGD never increases the fitting loss."""
        features, labels = separable_problem

        model = train_mlp(
            features, labels, hidden=8, epochs=50, lr=1e-3, optimizer="sgd",
            patience=50, min_delta=0.0,
        )

        log = np.array(model.training_log)
        assert len(log) == 51
        assert np.all(np.diff(log) <= 1e-9)

    def test_separable_problem_is_learned(self, separable_problem):
        """Test near-perfect accuracy on well-separated classes."""
        features, labels = separable_problem

        model = train_mlp(features, labels, hidden=16, epochs=200, lr=1e-2)

        assert mlp_accuracy(model, features, labels, labels.fitting) >= 0.99
        assert mlp_accuracy(model, features, labels) >= 0.95

    def test_one_class_fitting_set_predicts_that_class(self, separable_problem):
        """Test that an all-bot fitting set drives every prediction to bot."""
        features, labels = separable_problem
        bots = LabelSet.from_arrays(
            np.ones(features.n, dtype=np.int8), labels.train, labels.val, labels.test
        )

        model = train_mlp(
            features, bots, hidden=8, epochs=500, lr=5e-2, patience=500, min_delta=0.0
        )

        assert model.training_log[-1] < 1e-2
        assert min(model.training_log) < model.training_log[0]
        proba = predict_proba(model, features.values[labels.fitting])
        assert np.all(proba[:, 1] > 0.99)

    def test_zero_epochs_returns_initialization(self, separable_problem):
        """Test that epochs=0 keeps the seeded initialization."""
        features, labels = separable_problem

        model = train_mlp(features, labels, hidden=4, epochs=0, seed=5)

        assert len(model.training_log) == 1
        assert torch.equal(model.W0, MlpModel(features.s, 4, seed=5).W0)

    def test_same_seed_same_model(self, separable_problem):
        """Test that training is deterministic for a fixed seed."""
        features, labels = separable_problem

        a = train_mlp(features, labels, hidden=8, epochs=20, seed=3)
        b = train_mlp(features, labels, hidden=8, epochs=20, seed=3)

        assert torch.equal(a.W0, b.W0)
        assert a.training_log == b.training_log

    def test_early_stopping_keeps_best_loss(self, separable_problem):
        """Test that the kept parameters reach the lowest logged loss."""
        features, labels = separable_problem

        model = train_mlp(features, labels, hidden=8, epochs=300, lr=0.5, patience=3)

        x = torch.from_numpy(features.values[labels.fitting])
        y = torch.from_numpy(labels.labels[labels.fitting].astype(np.int64))
        with torch.no_grad():
            kept = float(fitting_loss(model, x, y))
        assert kept == pytest.approx(min(model.training_log), abs=1e-7)

    def test_empty_fitting_set_raises(self):
        """Test that training needs labeled train or val nodes."""
        labels = LabelSet.from_arrays(
            np.array([0, 1, 0], dtype=np.int8), train=[], test=[0, 1]
        )

        with pytest.raises(PreclassifierError, match="empty"):
            train_mlp(np.zeros((3, 2)), labels)

    def test_row_count_mismatch_raises(self, toy_labels):
        """Test that feature rows must match the label count."""
        with pytest.raises(PreclassifierError, match="differ"):
            train_mlp(np.zeros((4, 2)), toy_labels)

    def test_unknown_optimizer_raises(self, separable_problem):
        """Test that only adam and sgd are accepted."""
        features, labels = separable_problem

        with pytest.raises(PreclassifierError, match="Unknown optimizer"):
            train_mlp(features, labels, optimizer="rmsprop")


class TestHiddenRepresentation:
    """Tests for hidden_repr and the similarity helpers."""

    def test_hidden_repr_is_pre_activation(self):
        """Test hidden_repr equals W0 . x + b0 by default."""
        model = MlpModel(3, 4, seed=0)
        with torch.no_grad():
            model.b0.copy_(torch.tensor([0.1, -0.2, 0.3, -5.0], dtype=torch.float64))
        x = np.array([1.0, -2.0, 0.5])

        h = hidden_repr(model, x)

        expected = model.W0.detach().numpy() @ x + model.b0.detach().numpy()
        assert h.shape == (4,)
        assert np.allclose(h, expected, atol=1e-12)

    def test_hidden_repr_is_affine(self):
        """Test that hidden_repr minus the bias is linear in its input."""
        model = MlpModel(5, 3, seed=2)
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal(5), rng.standard_normal(5)
        a, b = 1.7, -0.6
        b0 = model.b0.detach().numpy()

        combined = hidden_repr(model, a * x + b * y) - b0
        parts = a * (hidden_repr(model, x) - b0) + b * (hidden_repr(model, y) - b0)

        assert np.allclose(combined, parts, atol=1e-12)

    def test_activated_applies_leaky_relu(self):
        """Test activated=True scales negative entries by the slope."""
        model = MlpModel(2, 3, seed=4)
        x = np.array([[1.0, -1.0], [0.2, 3.0]])

        raw = hidden_repr(model, x)
        active = hidden_repr(model, x, activated=True)

        assert np.allclose(active, np.where(raw > 0, raw, 0.01 * raw))

    def test_width_mismatch_raises(self):
        """Test that rows must have width s."""
        model = MlpModel(3, 2)

        with pytest.raises(PreclassifierError, match="does not match"):
            hidden_repr(model, np.zeros(4))
        with pytest.raises(PreclassifierError, match="does not match"):
            predict_proba(model, np.zeros((2, 5)))

    def test_pair_similarity_range(self):
        """Test identical, opposite and zero vectors."""
        v = np.array([1.0, 2.0, -1.0])

        assert pair_similarity(v, 3 * v) == pytest.approx(1.0)
        assert pair_similarity(v, -v) == pytest.approx(0.0)
        assert pair_similarity(v, np.zeros(3)) == 0.5

    def test_similarity_to_matches_pairwise(self):
        """Test the vectorized form against pair_similarity."""
        rng = np.random.default_rng(1)
        hidden = rng.standard_normal((6, 3))
        hidden[4] = 0.0
        candidates = np.array([1, 2, 4, 5])

        sims = similarity_to(hidden, 0, candidates)

        expected = [pair_similarity(hidden[0], hidden[c]) for c in candidates]
        assert np.allclose(sims, expected)
        assert sims[2] == 0.5
        assert similarity_to(hidden, 0, np.array([], dtype=np.int64)).size == 0

    def test_probabilities_sum_to_one(self, separable_problem):
        """Test that predict_proba rows are distributions."""
        features, _ = separable_problem
        model = MlpModel(features.s, 5, seed=9)

        proba = predict_proba(model, features)

        assert proba.shape == (features.n, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)


class TestModelFiles:
    """Tests for save_mlp and load_mlp."""

    def test_round_trip_is_exact(self, tmp_path, separable_problem):
        """Test that a saved model reloads with identical parameters."""
        features, labels = separable_problem
        model = train_mlp(features, labels, hidden=6, epochs=10, seed=2)
        save_mlp(model, tmp_path / "mlp.bin")

        loaded = load_mlp(tmp_path / "mlp.bin")

        for name in ("W0", "b0", "W1", "b1"):
            assert torch.equal(getattr(model, name), getattr(loaded, name))
        assert loaded.slope == model.slope
        expected = predict_proba(model, features)
        assert np.array_equal(predict_proba(loaded, features), expected)

    def test_bad_magic_raises(self, tmp_path):
        """Test that foreign files are rejected."""
        path = tmp_path / "mlp.bin"
        path.write_bytes(b"not a model")

        with pytest.raises(PreclassifierError, match="not a pre-classifier"):
            load_mlp(path)

    def test_truncated_body_raises(self, tmp_path):
        """Test that a short parameter payload is reported."""
        path = save_mlp(MlpModel(3, 2), tmp_path / "mlp.bin")
        path.write_bytes(path.read_bytes()[:-8])

        with pytest.raises(PreclassifierError, match="expected"):
            load_mlp(path)

    def test_missing_file_raises(self, tmp_path):
        """Test that a missing model file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_mlp(tmp_path / "absent.bin")
