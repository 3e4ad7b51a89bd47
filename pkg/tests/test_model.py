import numpy as np
import pytest

from iatseg import ops
from iatseg.checks import micro_config
from iatseg.deformable import AttentionTrace
from iatseg.errors import ShapeError
from iatseg.gradcheck import check_gradients
from iatseg.heads import FOCAL_PRIOR, PredictionHeads, StageHeads
from iatseg.iat import (InstanceAwareHead, MaskFeature, expected_param_count, flatten_params, layer_shapes,
                        predict_mask, unpack_params)
from iatseg.layers import ParameterStore
from iatseg.model import IatSegModel
from iatseg.tensor import Tensor, no_grad


# --- heads ---

def test_fresh_heads_predict_prior_and_centered_boxes(rng):
    store = ParameterStore(seed=0)
    heads = PredictionHeads(store, "h", 8, 3, 65)
    q = Tensor(rng.normal(size=(4, 8)))
    pred = heads(q)
    assert pred.class_logits.shape == (4, 3)
    assert pred.dyn_params.shape == (4, 65)
    assert np.all(pred.boxes.data == 0.5)
    prior = ops.sigmoid(heads.class_head(Tensor(np.zeros((1, 8))))).data
    assert prior == pytest.approx(np.full((1, 3), FOCAL_PRIOR))


def test_stage_heads_share_or_split_parameters():
    shared_store = ParameterStore()
    shared = StageHeads(shared_store, 3, 8, 3, 65, shared=True)
    assert all(h is shared.per_stage[0] for h in shared.per_stage)
    split_store = ParameterStore()
    split = StageHeads(split_store, 3, 8, 3, 65, shared=False)
    assert len({id(h) for h in split.per_stage}) == 3
    assert split_store.num_scalars() == 3 * shared_store.num_scalars()
    assert any(name.startswith("heads.stage2.") for name in split_store.named())


# --- dynamic parameters ---

@pytest.mark.parametrize("channels, heads, points, expected", [(8, 4, 4, 441), (8, 8, 4, 873), (4, 2, 2, 65)])
def test_dynamic_parameter_count(channels, heads, points, expected):
    assert expected_param_count(channels, heads, points) == expected
    assert sum(int(np.prod(s)) for _, s in layer_shapes(channels, heads, points)) == expected


def test_parameter_count_needs_divisible_channels():
    with pytest.raises(ShapeError):
        expected_param_count(6, 4, 4)


def test_unpack_shapes_and_inverse(rng):
    vec = Tensor(rng.normal(size=(2, 441)))
    layers = unpack_params(vec, 8, 4, 4)
    assert layers.offset_weight.shape == (2, 32, 8)
    assert layers.offset_bias.shape == (2, 32)
    assert layers.attn_weight.shape == (2, 16, 8)
    assert layers.attn_bias.shape == (2, 16)
    assert layers.output_weight.shape == (2, 1, 8)
    assert layers.output_bias.shape == (2, 1)
    assert np.array_equal(layers.offset_weight.data[1, 0], vec.data[1, :8])
    assert np.array_equal(flatten_params(layers).data, vec.data)
    single = unpack_params(Tensor(vec.data[0]), 8, 4, 4)
    assert single.attn_weight.shape == (16, 8)
    with pytest.raises(ShapeError):
        unpack_params(Tensor(np.zeros(440)), 8, 4, 4)


def _dyn(channels, heads, points, output_weight=None, output_bias=0.0):
    d = expected_param_count(channels, heads, points)
    vec = np.zeros(d)
    if output_weight is not None:
        vec[d - channels - 1:d - 1] = output_weight
    vec[-1] = output_bias
    return vec


def test_output_bias_alone_gives_constant_mask(rng):
    fm = MaskFeature(Tensor(rng.normal(size=(4, 8, 8))))
    head = InstanceAwareHead(2, 2, "rel")
    logits = head.mask_logits(fm, np.array([[0.5, 0.5]]), Tensor(_dyn(4, 2, 2, output_bias=2.0)[None]))
    assert logits.shape == (1, 8, 8)
    assert np.allclose(logits.data, 2.0)


def test_relative_encoding_moves_mask_with_center(rng):
    """특징이 0이면 마스크는 pos - center 만의 함수: 중심을 한 칸 옮기면 마스크도 한 칸 이동"""
    fm = MaskFeature(Tensor(np.zeros((4, 8, 8))))
    head = InstanceAwareHead(2, 2, "rel")
    dyn = Tensor(np.stack([_dyn(4, 2, 2, rng.normal(size=4))] * 2))
    centers = np.array([[0.5, 0.5], [0.5 + 1 / 8, 0.5]])
    logits = head.mask_logits(fm, centers, dyn).data
    assert np.allclose(logits[1][:, 1:], logits[0][:, :-1], atol=1e-12)
    assert not np.allclose(logits[0], logits[1])


def test_no_encoding_with_zero_feature_is_flat(rng):
    fm = MaskFeature(Tensor(np.zeros((4, 8, 8))))
    head = InstanceAwareHead(2, 2, "none")
    logits = head.mask_logits(fm, np.array([[0.3, 0.3]]), Tensor(_dyn(4, 2, 2, rng.normal(size=4), 0.7)[None]))
    assert np.allclose(logits.data, 0.7)


def test_instance_head_trace_and_probabilities(rng):
    fm = MaskFeature(Tensor(rng.normal(size=(8, 4, 4))))
    head = InstanceAwareHead(4, 3, "abs")
    dyn = Tensor(rng.normal(0.0, 0.1, size=(3, expected_param_count(8, 4, 3))))
    trace = AttentionTrace()
    probs = head.predict_masks(fm, rng.uniform(size=(3, 2)), dyn, trace).data
    assert probs.shape == (3, 4, 4)
    assert np.all((probs > 0) & (probs < 1))
    kind, attn = trace.records[0]
    assert kind == "instance" and attn.shape == (3, 16, 4, 3)
    assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
    single = predict_mask(fm, (0.5, 0.5), Tensor(dyn.data[0]), "abs", 4, 3)
    assert single.shape == (4, 4)


@pytest.mark.parametrize("pe_mode", ["rel", "abs", "none"])
def test_mask_gradient_matches_finite_differences(rng, pe_mode):
    fm = MaskFeature(Tensor(rng.normal(size=(8, 8, 8))))
    dyn = Tensor(rng.normal(0.0, 0.3, size=expected_param_count(8, 4, 4)))
    pixel_weights = ops.constant(rng.normal(size=(8, 8)), like=dyn)

    def f():
        return ops.sum(ops.mul(predict_mask(fm, (0.4, 0.6), dyn, pe_mode, 4, 4), pixel_weights))

    # a short step keeps every sample point inside its bilinear cell
    assert check_gradients(f, [dyn], h=1e-7) < 1e-4


def test_instance_head_rejects_bad_inputs(rng):
    fm = MaskFeature(Tensor(rng.normal(size=(6, 4, 4))))
    with pytest.raises(ValueError):
        InstanceAwareHead(2, 2, "sideways")
    with pytest.raises(ShapeError):
        InstanceAwareHead(4, 2, "none").mask_logits(fm, np.zeros((1, 2)), Tensor(np.zeros((1, 10))))
    head = InstanceAwareHead(2, 2, "none")
    dyn = Tensor(np.zeros((2, expected_param_count(6, 2, 2))))
    with pytest.raises(ShapeError):
        head.mask_logits(fm, np.zeros((3, 2)), dyn)


# --- full model ---

def test_model_output_shapes(micro_cfg, scene):
    model = IatSegModel(micro_cfg)
    trace = AttentionTrace()
    with no_grad():
        output = model(scene.image, trace)
        masks = model.mask_logits(output, 0, np.array([1, 0]), trace)
    d = expected_param_count(micro_cfg.mask_channels, micro_cfg.mask_heads, micro_cfg.mask_points)
    assert len(output.stages) == micro_cfg.dec_layers
    assert output.final.class_logits.shape == (2, 3)
    assert output.final.boxes.shape == (2, 4)
    assert output.final.dyn_params.shape == (2, d)
    assert output.mask_feature.map.shape == (4, 8, 8)
    assert output.memory.shapes == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert masks.shape == (2, 8, 8)
    assert set(trace.kinds()) == {"deform", "self", "instance"}


def test_center_override_changes_relative_masks(micro_cfg, scene):
    model = IatSegModel(micro_cfg)
    with no_grad():
        output = model(scene.image)
        default = model.mask_logits(output, 0, np.array([0])).data
        same = model.mask_logits(output, 0, np.array([0]), centers=output.final.boxes.data[[0], :2]).data
        moved = model.mask_logits(output, 0, np.array([0]), centers=np.array([[0.1, 0.9]])).data
    assert np.array_equal(default, same)
    assert not np.allclose(default, moved)


def test_same_seed_builds_the_same_model(micro_cfg, scene):
    a, b = IatSegModel(micro_cfg), IatSegModel(micro_cfg)
    with no_grad():
        out_a, out_b = a(scene.image), b(scene.image)
    assert np.array_equal(out_a.final.class_logits.data, out_b.final.class_logits.data)
    other = IatSegModel(micro_cfg.replace(seed=99))
    assert not np.array_equal(other.parameters()["decoder.query_pos"].data,
                              a.parameters()["decoder.query_pos"].data)


def test_state_dict_transfers_weights(micro_cfg, scene):
    a = IatSegModel(micro_cfg)
    b = IatSegModel(micro_cfg.replace(seed=5))
    b.load_state_dict(a.state_dict())
    with no_grad():
        assert np.array_equal(a(scene.image).final.boxes.data, b(scene.image).final.boxes.data)


def test_model_rejects_bad_extent(micro_cfg):
    with pytest.raises(ShapeError):
        IatSegModel(micro_cfg)(np.zeros((3, 48, 64)))


def test_ablation_axes_change_dynamic_size():
    base = micro_config()
    sizes = {}
    for heads in (1, 2, 4):
        model = IatSegModel(base.replace(mask_heads=heads))
        sizes[heads] = model.num_dyn_params
    assert sizes == {1: 5 * 7, 2: 5 * 13, 4: 5 * 25}
    no_encoder = IatSegModel(base.replace(mask_encoder_layers=0))
    assert not any(name.startswith("mask_encoder.layers") for name in no_encoder.parameters())


def test_float32_model_builds_float32_parameters(scene):
    model = IatSegModel(micro_config(precision="float32"))
    assert all(p.dtype == np.float32 for p in model.parameters().values())
    with no_grad():
        output = model(scene.image)
    assert output.final.boxes.shape == (2, 4)
    assert np.all(np.isfinite(output.final.class_logits.data))
