import numpy as np
import pytest

from iatseg import ops
from iatseg.errors import CheckpointError, ShapeError
from iatseg.layers import MLP, FFN, LayerNorm, Linear, ParameterStore
from iatseg.optim import Adam, split_optimizer_state
from iatseg.tensor import ComputationTape, Tensor, backward


def test_store_names_are_prefixed_and_ordered():
    store = ParameterStore(seed=0)
    Linear(store.child("enc"), "proj", 3, 2)
    LayerNorm(store, "norm", 2)
    assert list(store.named()) == ["enc.proj.weight", "enc.proj.bias", "norm.gamma", "norm.beta"]
    assert list(store.child("enc").named()) == ["enc.proj.weight", "enc.proj.bias"]
    assert store.num_scalars() == 6 + 2 + 2 + 2


def test_same_seed_same_weights():
    a = ParameterStore(seed=5)
    b = ParameterStore(seed=5)
    MLP(a, "mlp", 4, 8, 2)
    MLP(b, "mlp", 4, 8, 2)
    for (name, x), (_, y) in zip(a.named().items(), b.named().items()):
        assert np.array_equal(x.data, y.data), name


def test_duplicate_and_bad_init():
    store = ParameterStore()
    store.create("w", (2,))
    with pytest.raises(ValueError):
        store.create("w", (2,))
    with pytest.raises(ValueError):
        store.create("v", (2,), "magic")
    with pytest.raises(ShapeError):
        store.create("u", (2,), np.zeros(3))


def test_state_dict_mismatch_raises_checkpoint_error():
    store = ParameterStore()
    store.create("w", (2, 2))
    with pytest.raises(CheckpointError):
        store.load_state_dict({})
    with pytest.raises(CheckpointError):
        store.load_state_dict({"w": np.zeros((2, 2)), "extra": np.zeros(1)})
    with pytest.raises(CheckpointError):
        store.load_state_dict({"w": np.zeros(4)})
    store.load_state_dict({"w": np.full((2, 2), 3.0)})
    assert np.all(store.named()["w"].data == 3.0)


def test_mlp_and_ffn_shapes(rng):
    store = ParameterStore(seed=1)
    mlp = MLP(store, "mlp", 6, 12, 4, num_layers=3, last_init="zeros")
    ffn = FFN(store, "ffn", 6, 10)
    x = Tensor(rng.normal(size=(5, 6)))
    assert mlp(x).shape == (5, 4)
    assert np.all(mlp(x).data == 0.0)
    assert ffn(x).shape == (5, 6)
    with pytest.raises(ValueError):
        MLP(store, "empty", 6, 12, 4, num_layers=0)


def _quadratic_problem():
    store = ParameterStore()
    w = store.create("w", (3,), np.array([2.0, -1.0, 0.5]))
    return store, w


def _step(opt: Adam, w: Tensor) -> float:
    opt.zero_grad()
    with ComputationTape():
        backward(ops.sum(ops.mul(w, w)))
    return opt.step()


def test_adam_descends_a_quadratic():
    store, w = _quadratic_problem()
    opt = Adam(store.named(), lr=0.1, grad_clip=0.0)
    start = float(np.sum(w.data ** 2))
    for _ in range(200):
        _step(opt, w)
    assert float(np.sum(w.data ** 2)) < 0.1 * start
    assert opt.t == 200


def test_first_adam_step_moves_each_coordinate_by_lr():
    store, w = _quadratic_problem()
    before = w.data.copy()
    norm = _step(Adam(store.named(), lr=0.01, grad_clip=0.0), w)
    assert norm == pytest.approx(np.linalg.norm(2 * before))
    assert np.allclose(np.abs(w.data - before), 0.01, rtol=1e-6)


def test_gradient_clip_reports_norm_before_clipping():
    store, w = _quadratic_problem()
    opt = Adam(store.named(), lr=0.01, grad_clip=0.5)
    norm = _step(opt, w)
    assert norm == pytest.approx(np.linalg.norm([4.0, -2.0, 1.0]))
    assert np.allclose(opt.m["w"], 0.1 * np.array([4.0, -2.0, 1.0]) * 0.5 / norm)


def test_learning_rate_drop_and_weight_decay():
    store, w = _quadratic_problem()
    opt = Adam(store.named(), lr=0.1, lr_drop_step=2, lr_drop_factor=0.1)
    assert [opt.lr_at(s) for s in (1, 2, 3)] == [0.1, 0.1, pytest.approx(0.01)]
    store2 = ParameterStore()
    v = store2.create("v", (1,), np.array([1.0]))
    decayed = Adam(store2.named(), lr=0.1, weight_decay=0.5)
    v.grad = np.zeros(1)
    decayed.step()
    assert v.data[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_optimizer_state_round_trip():
    store, w = _quadratic_problem()
    opt = Adam(store.named(), lr=0.05)
    for _ in range(3):
        _step(opt, w)
    state = opt.state_dict()
    assert set(state) == {"adam.m.w", "adam.v.w"}
    model_part, optim_part = split_optimizer_state({**store.state_dict(), **state})
    assert set(model_part) == {"w"} and set(optim_part) == set(state)

    fresh = Adam(store.named(), lr=0.05)
    fresh.load_state_dict(optim_part, opt.t)
    assert fresh.t == 3
    assert np.array_equal(fresh.m["w"], opt.m["w"])
    with pytest.raises(CheckpointError):
        fresh.load_state_dict({}, 3)
