import numpy as np
import pytest

from mergelab.statistics import (
    ActivationBatch,
    ToyModel,
    compute_fisher_diag,
    compute_gram,
    finite_difference_check,
    layer_activations,
    model_statistics,
)


def toy(gen, sizes=(3, 4, 2), bias=True, activation=None, loss="squared"):
    params = {}
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(f"l{i}")
        params[f"l{i}.weight"] = gen.standard_normal((a, b))
        if bias:
            params[f"l{i}.bias"] = gen.standard_normal(b)
    return ToyModel(layers, params, activation=activation, loss=loss)


def test_gram_examples():
    g = compute_gram([ActivationBatch("x", np.eye(2))])
    np.testing.assert_array_equal(g.G, 0.5 * np.eye(2))
    z = np.array([[1.0, 2.0, -1.0]])
    g = compute_gram([ActivationBatch("x", z)])
    np.testing.assert_allclose(g.G, np.outer(z, z), rtol=1e-7)
    assert np.linalg.matrix_rank(g.G) == 1


def test_gram_accumulates_batches(gen):
    Z1, Z2 = gen.standard_normal((5, 3)), gen.standard_normal((7, 3))
    g = compute_gram([ActivationBatch("x", Z1), ActivationBatch("x", Z2)])
    Z = np.vstack([Z1, Z2])
    np.testing.assert_allclose(g.G, Z.T @ Z / 12, rtol=1e-6)
    assert g.count == 12
    with pytest.raises(ValueError, match="dim"):
        compute_gram([ActivationBatch("x", Z1), ActivationBatch("x", np.ones((2, 4)))])


@pytest.mark.parametrize("activation, loss", [(None, "squared"), ("tanh", "squared"), (None, "softmax"), ("tanh", "softmax")])
def test_gradients_match_finite_differences(gen, activation, loss):
    model = toy(gen, activation=activation, loss=loss)
    X = gen.standard_normal((6, 3))
    Y = gen.integers(0, 2, 6) if loss == "softmax" else gen.standard_normal((6, 2))
    assert finite_difference_check(model, X, Y, eps=1e-4) < 1e-6


def test_finite_difference_detects_corruption(gen):
    model = ToyModel(["l"], {"l.weight": 0.1 * gen.standard_normal((3, 2))})
    X, Y = 0.1 * gen.standard_normal((6, 3)), 0.1 * gen.standard_normal((6, 2))
    grad = model.loss_gradient(X, Y)
    grad["l.weight"] = grad["l.weight"].copy()
    grad["l.weight"][0, 0] += 1.0
    assert finite_difference_check(model, X, Y, gradient=grad) == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        finite_difference_check(model, X, Y, eps=0.0)


def test_finite_difference_constant_loss():
    model = ToyModel(["l"], {"l.weight": np.zeros((2, 2))})
    X, Y = np.zeros((3, 2)), np.zeros((3, 2))
    assert finite_difference_check(model, X, Y) == 0.0


def test_fisher_matches_per_example_scores(gen):
    model = toy(gen, activation="tanh")
    X, Y = gen.standard_normal((5, 3)), gen.standard_normal((5, 2))
    fisher = compute_fisher_diag(model, X, labels=Y, empirical=True)
    # oracle: square per-example gradients of log p one example at a time
    acc = {n: np.zeros_like(model.params[n]) for n in model.param_names}
    for i in range(5):
        g = model.loss_gradient(X[i : i + 1], Y[i : i + 1])  # gradient of -log p
        for n in acc:
            acc[n] += g[n] ** 2
    for n in acc:
        np.testing.assert_allclose(fisher[n], acc[n] / 5, rtol=1e-5)


def test_fisher_nonnegative_and_sampled(gen):
    model = toy(gen, loss="softmax")
    X = gen.standard_normal((20, 3))
    f1 = compute_fisher_diag(model, X, n_samples=3, seed=1)
    assert all((v >= 0).all() for v in f1.values())
    f2 = compute_fisher_diag(model, X, n_samples=3, seed=1)
    assert all(np.array_equal(f1[n], f2[n]) for n in f1)
    with pytest.raises(ValueError):
        compute_fisher_diag(model, X, n_samples=0)
    with pytest.raises(ValueError):
        compute_fisher_diag(model, X, empirical=True)


def test_fisher_zero_at_perfect_fit(gen):
    model = toy(gen, bias=False)
    X = gen.standard_normal((8, 3))
    fisher = compute_fisher_diag(model, X, labels=model.predict(X), empirical=True)
    assert all(not v.any() for v in fisher.values())


def test_gram_of_layer_inputs_psd(gen):
    model = toy(gen, activation="tanh")
    for batch in layer_activations(model, gen.standard_normal((10, 3))):
        G = compute_gram([batch]).G.astype(np.float64)
        assert np.array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() >= -1e-6 * np.abs(G).max()


def test_model_statistics_keys(gen):
    model = toy(gen)
    base = {n: np.zeros_like(v) for n, v in model.params.items()}
    stats = model_statistics(model, gen.standard_normal((4, 3)), base=base, k_fraction=0.5)
    assert list(stats) == sorted(stats)
    assert "gram/l0.weight" in stats and "fisher/l1.bias" in stats and "trim/l0.weight" in stats
    assert stats["gram/l1.weight"].shape == (4, 4)
    total = sum(v.size for n, v in stats.items() if n.startswith("trim/"))
    kept = sum(v.sum() for n, v in stats.items() if n.startswith("trim/"))
    assert kept == np.ceil(0.5 * total)
    with pytest.raises(ValueError):
        model_statistics(model, gen.standard_normal((4, 3)), base=base)


def test_toy_model_validation(gen):
    with pytest.raises(ValueError):
        ToyModel(["a"], {"a.weight": np.ones(3)})
    with pytest.raises(ValueError):
        ToyModel(["a", "b"], {"a.weight": np.ones((2, 3)), "b.weight": np.ones((2, 2))})
    with pytest.raises(ValueError):
        ToyModel(["a"], {"a.weight": np.ones((2, 3))}, loss="hinge")
