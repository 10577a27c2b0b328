import math

import numpy as np
import pytest
from conftest import check_grad

from propulsion_lab import tensor as T
from propulsion_lab.data import blobs, keywords, linear_regression
from propulsion_lab.errors import ConfigError, DataError, DivergedError
from propulsion_lab.model import ModelSpec, build
from propulsion_lab.peft import make_adapter_set
from propulsion_lab.tensor import Parameter, Tensor
from propulsion_lab.trainer import SGD, AdamW, TrainConfig, cross_entropy, evaluate, mse, train


def test_cross_entropy_values():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-15)
    assert cross_entropy(Tensor([[1000.0, -1000.0]]), [0]).item() == 0.0


def test_cross_entropy_label_range():
    with pytest.raises(DataError):
        cross_entropy(Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(DataError):
        cross_entropy(Tensor([[0.0]]), [0])


def test_mse_values_and_gradient():
    assert mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert mse(Tensor([0.0, 2.0]), [0.0, 0.0]).item() == 2.0
    p = Parameter([0.5, -1.0, 2.0], trainable=True)
    y = np.array([0.0, 1.0, 1.0])
    T.backward(mse(p, y))
    np.testing.assert_allclose(p.grad, (2 / 3) * (p.data - y), rtol=1e-15)
    with pytest.raises(DataError):
        mse(Tensor([1.0]), [1.0, 2.0])


def test_loss_gradients(rng):
    logits = Parameter(rng.standard_normal((6, 4)), trainable=True)
    labels = rng.integers(0, 4, 6)
    assert check_grad(lambda: cross_entropy(logits, labels), [logits]) <= 1e-7
    pred = Parameter(rng.standard_normal(6), trainable=True)
    assert check_grad(lambda: mse(pred, rng.standard_normal(6) * 0 + 1.0), [pred]) <= 1e-7


def test_sgd_step():
    p = Parameter([1.0], trainable=True)
    p.grad = np.array([2.0])
    SGD([p], 0.1).step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    p.grad = np.array([0.0])
    SGD([p], 0.1).step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_decay_center():
    z = Parameter([3.0], trainable=True, decay_center=1.0)
    z.grad = np.array([0.0])
    SGD([z], 0.5, weight_decay=0.2).step()
    assert z.data[0] == pytest.approx(3.0 - 0.5 * 0.2 * 2.0)
    w = Parameter([3.0], trainable=True, decay_center=1.0)
    w.grad = np.array([0.0])
    SGD([w], 0.5, weight_decay=0.2, decay_toward_one=False).step()
    assert w.data[0] == pytest.approx(3.0 - 0.5 * 0.2 * 3.0)


def test_adamw_first_step_is_unit():
    p = Parameter(np.full(4, 2.0), trainable=True)
    p.grad = np.ones(4)
    AdamW([p], 0.01).step()
    np.testing.assert_allclose(p.data, 2.0 - 0.01, atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError) as err:
        TrainConfig(dropout=1.0)
    assert err.value.field == "train.dropout"
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lion")


def _setup(kind="propulsion", seed=0, **kw):
    model = build(ModelSpec(kind="mlp", depth=2, d_model=16, d_in=8, n_classes=2, seed=seed))
    ds = blobs(120, 8, 2, 3.0, seed=seed)
    return model, make_adapter_set(model, kind, **kw), ds


def test_zero_epochs_changes_nothing():
    model, aset, ds = _setup()
    before = aset.state()
    res = train(model, aset, ds, TrainConfig(epochs=0))
    assert res.history == []
    for k, v in aset.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_zero_lr_keeps_everything_constant():
    model, aset, ds = _setup()
    res = train(model, aset, ds, TrainConfig(epochs=3, learning_rate=0.0, dropout=0.0))
    assert np.all(aset.parameters()[0].data == 1.0)
    accs = {row["train_accuracy"] for row in res.history}
    assert len(accs) == 1


@pytest.mark.parametrize("kind", ["propulsion", "multi_propulsion", "lora", "bitfit", "full_ft"])
def test_base_checksum_constant(kind):
    model, aset, ds = _setup(kind, p=2, rank=2)
    before = model.checksum()
    train(model, aset, ds, TrainConfig(epochs=2, learning_rate=0.01))
    assert model.checksum() == before


def test_initial_loss_equals_frozen_loss():
    model, aset, ds = _setup()
    res = train(model, aset, ds, TrainConfig(epochs=1))
    frozen, _ = evaluate(model, None, ds, TrainConfig())
    assert res.initial_loss == frozen


def test_training_is_bitwise_reproducible():
    runs = []
    for _ in range(2):
        model, aset, ds = _setup()
        res = train(model, aset, ds, TrainConfig(epochs=3, learning_rate=0.05))
        runs.append((res.history, aset.state()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()


def test_degree_gradient_relation():
    grads = {}
    for k in (1, 2, 15):
        model, aset, ds = _setup(degree=k)
        params = aset.parameters()
        loss = cross_entropy(model.forward(ds.inputs[:16], aset), ds.targets[:16])
        T.backward(loss, params)
        grads[k] = np.concatenate([p.grad for p in params])
    for k in (2, 15):
        np.testing.assert_allclose(grads[k], k * grads[1], rtol=1e-8, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    model = build(ModelSpec(kind="mlp", depth=2, d_model=16, d_in=8, n_classes=1, seed=0))
    aset = make_adapter_set(model, "propulsion", degree=3)
    with pytest.raises(DivergedError) as err:
        train(model, aset, linear_regression(64, 8, seed=0), TrainConfig(epochs=20, learning_rate=10.0, optimizer="sgd", loss="mse"))
    assert err.value.step == 4
    assert err.value.exit_code == 4


def test_clamp_keeps_z_in_range():
    model = build(ModelSpec(kind="mlp", depth=1, d_model=8, d_in=8, seed=0))
    ds = blobs(64, 8, 2, 3.0, seed=1)
    aset = make_adapter_set(model, "propulsion", clamp=(0.5, 1.5))
    train(model, aset, ds, TrainConfig(epochs=20, learning_rate=0.5, optimizer="sgd", clamp=True))
    z = aset.parameters()[0].data
    assert z.min() >= 0.5 and z.max() <= 1.5


def test_validation_split_and_regression():
    from propulsion_lab.data import assign_split

    model = build(ModelSpec(kind="mlp", depth=1, d_model=8, d_in=8, n_classes=1, seed=0))
    ds = assign_split(linear_regression(100, 8, seed=2), 0.2, seed=0)
    aset = make_adapter_set(model, "lora", rank=2)
    res = train(model, aset, ds, TrainConfig(epochs=30, learning_rate=0.02, loss="mse", dropout=0.0))
    row = res.history[-1]
    assert {"train_pearson", "train_spearman", "val_loss", "val_pearson"} <= set(row)
    assert row["train_pearson"] > 0.5


def test_transformer_keyword_task_learns():
    spec = ModelSpec(kind="transformer", depth=1, d_model=16, d_ff=32, n_heads=2, vocab_size=16, max_seq=8, seed=0)
    model = build(spec)
    ds = keywords(128, 8, 16, seed=0)
    aset = make_adapter_set(model, "propulsion", "All")
    res = train(model, aset, ds, TrainConfig(epochs=25, learning_rate=0.05, batch_size=16))
    assert res.history[-1]["train_accuracy"] >= 0.9
