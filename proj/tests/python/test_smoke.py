"""Smoke tests for the python bindings."""

import math

import numpy as np
import pytest

import spfl


def test_version():
    assert spfl.__version__


def test_softmax_rows_sum_to_one():
    z = np.array([[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]])
    p = spfl.softmax(z)
    assert p.shape == (2, 3)
    np.testing.assert_allclose(p.sum(axis=1), [1.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(p[1], [1 / 3] * 3, atol=1e-9)


def test_softened_matches_softmax_at_tau_one():
    z = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_allclose(spfl.softened(z, 1.0), spfl.softmax(z))
    with pytest.raises(ValueError):
        spfl.softened(z, 0.0)


def test_losses():
    p = np.array([[0.5, 0.5]])
    y = np.array([[1.0, 0.0]])
    assert spfl.task_loss(p, y) == pytest.approx(math.log(2))
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.5, 0.5]])
    assert spfl.kd_loss(a, b) == pytest.approx(math.log(2))
    assert spfl.kd_loss(b, b) == pytest.approx(0.0, abs=1e-12)


def test_beta_schedule_endpoints():
    assert spfl.beta_schedule(0, 30, 2.0) == 0.0
    assert spfl.beta_schedule(30, 30, 2.0) == pytest.approx(2.0)
    assert spfl.beta_schedule(15, 30, 2.0) == pytest.approx(1.0)


def test_aggregators():
    u = np.array([[0.0, 1.0], [2.0, 1.0], [7.0, 1.0]], dtype=np.float32)
    np.testing.assert_allclose(spfl.fedavg(u), [3.0, 1.0])
    np.testing.assert_allclose(spfl.coordinate_median(u), [2.0, 1.0])
    gm, converged = spfl.geometric_median(np.array([[0.0], [0.0], [10.0]],
                                                   dtype=np.float32))
    assert converged
    assert abs(gm[0]) < 1e-3
    step = spfl.rlr_aggregate(np.ones((10, 3), dtype=np.float32), 4, 1.0)
    np.testing.assert_allclose(step, np.ones(3), atol=1e-6)


def test_attack_primitives():
    x = np.array([1.0, -2.0], dtype=np.float32)
    w0 = np.zeros(2, dtype=np.float32)
    np.testing.assert_allclose(spfl.mpa_scale(x, w0, 10.0), [10.0, -20.0])
    out = spfl.lie_craft(
        np.array([5.0], dtype=np.float32),
        np.array([0.0], dtype=np.float32),
        np.array([1.0], dtype=np.float32),
        1.0,
    )
    assert out[0] == pytest.approx(1.0)


def test_network_forward_shapes():
    net = spfl.Network("mnist_cnn")
    assert 150_000 < net.param_count < 250_000
    params = net.init(seed=3)
    images, labels = spfl.synth_digits(4, seed=5)
    logits = net.forward(params, images.astype(np.float64))
    assert logits.shape == (4, 10)
    zero = net.forward(np.zeros_like(params), images.astype(np.float64))
    np.testing.assert_allclose(zero, 0.0)
    maps = net.attention(params, images.astype(np.float64), [0, 1, 2, 3],
                         net.attention_layers()[0])
    assert maps.shape[0] == 4
    assert (maps >= 0).all()


def test_canonical_attacks_table():
    rows = {r["name"]: r for r in spfl.canonical_attacks()}
    assert len(rows) == 10
    assert rows["DPA-5"]["adversaries"] == 5
    assert rows["MPA-SS"]["gamma"] == 10.0


def test_tiny_run_is_deterministic(tmp_path):
    config = f"""
[dataset]
name = synth
synth_train = 240
synth_test = 80
clients_cap = 60
test_cap = 80

[model]
arch = file:{tmp_path}/tiny.spec

[federation]
clients = 3
rounds = 2
epochs = 1
batch = 32
seed = 5

[defense]
method = FedAvg

[output]
dir = {tmp_path}/run
plots = false
"""
    spec = """
input 1 28 28
classes 10
conv 4 3 2 1
relu
maxpool 2 2
dense 10
attention 2
"""
    (tmp_path / "tiny.spec").write_text(spec)
    first = spfl.run_config(config)
    second = spfl.run_config(config)
    assert len(first) == 2
    assert first == second
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "manifest.json").exists()
