import numpy as np
import pytest

from amulet.backbone import VGG_CHANNELS, BackboneConfig, FeatureSet, backbone_specs, extract_features
from amulet.heads import fuse, predict_all, predict_level, refine_boundary
from amulet.model import VARIANTS, AmuletNet, HeadsConfig, ModelConfig
from amulet.params import build_params
from amulet.rfc import IntegratedFeature, RfcConfig, extend, integrate, rfc_specs, shrink
from amulet.tensor import ShapeError, Tape, Tensor, backward, mul, sum_all
from amulet.training import bilinear_kernel, init_msra, joint_loss

from conftest import tiny_config, tiny_model


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _params(specs, seed=0):
    p = build_params(specs, np.float64)
    init_msra(p, specs, seed)
    return p


# --- backbone ---------------------------------------------------------------


def test_default_backbone_extents():
    cfg = BackboneConfig(channels_per_level=(2, 2, 2, 2, 2))
    feats = extract_features(_t(np.ones((1, 3, 64, 64))), cfg, _params(backbone_specs(cfg)))
    assert cfg.strides == [1, 2, 4, 8, 16]
    assert [m.shape[2] for m in feats.maps] == [64, 32, 16, 8, 4]
    assert [m.shape[1] for m in feats.maps] == [2] * 5


def test_vgg_width_deepest_map():
    cfg = BackboneConfig(channels_per_level=VGG_CHANNELS, input_size=(256, 256))
    cfg.validate()
    assert 256 // cfg.strides[-1] == 16


def test_two_level_toy_backbone():
    cfg = BackboneConfig(levels=2, convs_per_level=(1, 1), channels_per_level=(2, 3), input_size=(8, 8))
    feats = extract_features(_t(np.ones((1, 3, 8, 8))), cfg, _params(backbone_specs(cfg)))
    assert [m.shape[2:] for m in feats.maps] == [(8, 8), (4, 4)]


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(levels=3, convs_per_level=(1, 1, 1), channels_per_level=(2, 2, 2), input_size=(6, 6)).validate()
    with pytest.raises(ValueError):
        BackboneConfig(channels_per_level=(1, 2)).validate()


# --- rfc --------------------------------------------------------------------


def test_shrink_shapes(rng):
    out = shrink(_t(rng.normal(size=(1, 5, 32, 32))), 2, _t(rng.normal(size=(7, 5, 2, 2))))
    assert out.shape == (1, 7, 16, 16)
    out = shrink(_t(rng.normal(size=(1, 2, 64, 64))), 16, _t(rng.normal(size=(3, 2, 16, 16))))
    assert out.shape == (1, 3, 4, 4)
    zero = shrink(_t(np.zeros((1, 2, 8, 8))), 2, _t(rng.normal(size=(3, 2, 2, 2))), _t(np.zeros((1, 3, 1, 1))))
    assert not zero.data.any()
    with pytest.raises(ShapeError):
        shrink(_t(np.zeros((1, 2, 8, 8))), 3, _t(np.zeros((3, 2, 3, 3))))


def test_extend_shapes(rng):
    out = extend(_t(rng.normal(size=(1, 2, 8, 8))), 2, _t(rng.normal(size=(2, 4, 4, 4))))
    assert out.shape == (1, 4, 16, 16)
    out = extend(_t(rng.normal(size=(1, 2, 4, 4))), 16, _t(rng.normal(size=(2, 1, 32, 32))))
    assert out.shape == (1, 1, 64, 64)


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_extend_bilinear_preserves_constants(factor):
    w = np.eye(2)[:, :, None, None] * bilinear_kernel(factor)
    out = extend(_t(np.full((1, 2, 6, 6), 3.0)), factor, _t(w)).data
    # away from the border every output pixel sees the full kernel support
    m = factor
    np.testing.assert_allclose(out[:, :, m:-m, m:-m], 3.0, rtol=1e-12)


def test_bilinear_kernel_interpolates():
    k = bilinear_kernel(2)
    np.testing.assert_allclose(k[0], [0.0625, 0.1875, 0.1875, 0.0625])
    # stride-2 phases each sum to one: partition of unity
    for a in range(2):
        for b in range(2):
            assert k[a::2, b::2].sum() == pytest.approx(1.0)


def _feature_set(rng, chans, size, n=1):
    maps = [_t(rng.normal(size=(n, c, size >> l, size >> l))) for l, c in enumerate(chans)]
    return FeatureSet(maps, [2**l for l in range(len(chans))])


def test_integrate_vgg_width(rng):
    chans = [64] * 5
    cfg = RfcConfig(per_level_channels=64, combined_channels=64)
    specs = rfc_specs(2, chans, cfg)
    feat = integrate(_feature_set(rng, chans, 16), 2, _params(specs))
    assert feat.concat_channels == 320
    assert feat.map.shape == (1, 64, 4, 4)


def test_integrate_boundary_levels():
    chans = [2, 2, 2]
    top = [s.name for s in rfc_specs(2, chans, RfcConfig())]
    assert not any(".extend." in n for n in top) and sum(".shrink." in n for n in top) == 4
    bottom = [s.name for s in rfc_specs(0, chans, RfcConfig())]
    assert not any(".shrink." in n for n in bottom) and sum(".extend." in n for n in bottom) == 4


def test_integrate_rejects_bad_level(rng):
    chans = [2, 2]
    with pytest.raises(ValueError):
        integrate(_feature_set(rng, chans, 8), 2, {})


def test_rfc_shared_parameter_gradient_sums_branches(rng):
    """A weight reused in two integrations accumulates both contributions."""
    chans = [2, 2]
    cfg = RfcConfig(2, 2)
    params = _params(rfc_specs(0, chans, cfg) + rfc_specs(1, chans, cfg))
    params["rfc.t1.same.l1.w"] = params["rfc.t0.same.l0.w"]  # tie the two 1x1 branches
    shared = params["rfc.t0.same.l0.w"]
    fs = _feature_set(rng, chans, 8)

    def loss(w):
        p = dict(params)
        p["rfc.t0.same.l0.w"] = p["rfc.t1.same.l1.w"] = w
        return sum_all(mul(integrate(fs, 0, p).map, integrate(fs, 0, p).map))

    from amulet.tensor import gradcheck

    assert gradcheck(loss, [shared]).passed


# --- heads ------------------------------------------------------------------


def _head_setup(rng, levels=3, size=8, c=3):
    cfg = tiny_config(levels=levels, size=size)
    model = AmuletNet(cfg, dtype=np.float64)
    init_msra(model.params, model.specs, 0)
    integrated = {
        l: IntegratedFeature(_t(rng.normal(size=(2, c, size >> l, size >> l)), grad=True), l, 0) for l in range(levels)
    }
    return model, integrated


def test_predict_level_top_zero(rng):
    model, integrated = _head_setup(rng)
    zero = IntegratedFeature(_t(np.zeros_like(integrated[2].map.data)), 2, 0)
    assert not predict_level(zero, None, model.params, top=2).data.any()


def test_predict_level_zero_deconv_is_pointwise(rng):
    model, integrated = _head_setup(rng)
    assert model.params["heads.l0.deconv.w"].shape == (2, 3, 1, 1)
    p1 = _t(rng.normal(size=(2, 2, 8, 8)))
    assert predict_level(integrated[0], p1, model.params, top=2).shape == (2, 2, 8, 8)


def test_predict_level_contract(rng):
    model, integrated = _head_setup(rng)
    with pytest.raises(ValueError):
        predict_level(integrated[2], _t(np.zeros((2, 2, 8, 8))), model.params, top=2)
    with pytest.raises(ShapeError):
        predict_level(integrated[1], _t(np.zeros((2, 2, 4, 4))), model.params, top=2)


def test_chain_gradient_reach(rng):
    model, integrated = _head_setup(rng)
    for target in range(3):
        for f in integrated.values():
            f.map.grad = None
        with Tape() as tape:
            preds = predict_all(integrated, _t(rng.normal(size=(2, 3, 8, 8))), model.params)
            r = _t(rng.normal(size=preds.raw[target].shape))
            loss = sum_all(mul(preds.raw[target], r))
        backward(loss, tape)
        for l, f in integrated.items():
            reached = f.map.grad is not None and np.abs(f.map.grad).sum() > 0
            assert reached == (l >= target), (target, l)


def test_recurrent_term_matters(rng):
    model, integrated = _head_setup(rng)
    p_next = _t(rng.normal(size=(2, 2, 8, 8)))
    with_rec = predict_level(integrated[0], p_next, model.params, top=2).data
    without = predict_level(integrated[0], _t(np.zeros((2, 2, 8, 8))), model.params, top=2).data
    assert not np.allclose(with_rec, without)


def test_refine_identity_and_zero(rng):
    model, _ = _head_setup(rng)
    p = dict(model.params)
    p["bpr.l0.boundary.w"] = _t(np.zeros((2, 3, 1, 1)))
    p["bpr.l0.refine.w"] = _t(np.eye(2)[:, :, None, None])
    raw = _t(np.abs(rng.normal(size=(2, 2, 8, 8))))
    np.testing.assert_allclose(refine_boundary(_t(rng.normal(size=(2, 3, 8, 8))), raw, p, 0).data, raw.data)
    out = refine_boundary(_t(np.zeros((1, 3, 8, 8))), _t(np.zeros((1, 2, 8, 8))), model.params, 0)
    assert not out.data.any()
    with pytest.raises(ShapeError):
        refine_boundary(_t(np.zeros((1, 3, 4, 4))), _t(np.zeros((1, 2, 8, 8))), model.params, 0)


def test_refine_relu_stage_non_negative(rng):
    model, _ = _head_setup(rng)
    with Tape() as tape:
        refine_boundary(_t(rng.normal(size=(1, 3, 8, 8))), _t(rng.normal(size=(1, 2, 8, 8)), grad=True), model.params, 0)
    relu_out = [r.output for r in tape.records if r.op == "relu"]
    assert len(relu_out) == 1 and relu_out[0].data.min() >= 0


def test_fuse_channels_and_fixed_point(rng):
    cfg = ModelConfig(BackboneConfig(channels_per_level=(2,) * 5))
    params = AmuletNet(cfg, np.float64).params
    assert params["fuse.w"].shape == (2, 10, 1, 1)
    w = np.zeros((2, 10, 1, 1))
    for c in range(2):
        w[c, c::2] = 1 / 5
    p = {"fuse.w": _t(w), "fuse.b": _t(np.zeros((1, 2, 1, 1)))}
    same = _t(rng.normal(size=(1, 2, 4, 4)))
    np.testing.assert_allclose(fuse({l: same for l in range(5)}, p).data, same.data)
    with pytest.raises(ValueError):
        fuse({l: same for l in range(6)}, p)


def test_fused_gradient_reaches_every_refinement():
    model = tiny_model()
    rng = np.random.default_rng(3)
    with Tape() as tape:
        preds = model(_t(rng.random((2, 3, 8, 8))))
        loss = sum_all(mul(preds.fused, _t(rng.normal(size=preds.fused.shape))))
    backward(loss, tape)
    for name, p in model.params.items():
        if name.startswith("bpr."):
            assert np.abs(p.grad).sum() > 0, name


# --- assembled model ----------------------------------------------------------


def test_prediction_set_contract():
    model = tiny_model()
    preds = model(_t(np.random.default_rng(0).random((2, 3, 8, 8))))
    assert preds.num_outputs == 4
    for fe, be in preds.excitations():
        assert fe.shape == (2, 1, 8, 8)
        np.testing.assert_allclose(fe + be, 1.0)
        assert fe.min() >= 0 and fe.max() <= 1


def test_every_head_parameter_gets_gradient():
    model = tiny_model()
    rng = np.random.default_rng(5)
    gt = (rng.random((2, 1, 8, 8)) < 0.3).astype(float)
    gt[:, 0, 0, 0] = 1
    with Tape() as tape:
        loss, _ = joint_loss(model(_t(rng.random((2, 3, 8, 8)))), gt)
    backward(loss, tape)
    for name, p in model.params.items():
        if name.split(".")[0] in ("heads", "bpr", "fuse", "rfc"):
            assert np.abs(p.grad).sum() > 0, name


def test_low_level_loss_reaches_high_level_rfc():
    model = tiny_model()
    rng = np.random.default_rng(9)
    gt = (rng.random((2, 1, 8, 8)) < 0.3).astype(float)
    gt[:, 0, 0, 0] = 1
    from amulet.tensor import balanced_bce_loss

    with Tape() as tape:
        preds = model(_t(rng.random((2, 3, 8, 8))))
        loss = balanced_bce_loss(preds.level_probs[0], gt)
    backward(loss, tape)
    for t in range(3):
        assert np.abs(model.params[f"rfc.t{t}.combine.w"].grad).sum() > 0, t


def test_variants_mask_levels():
    cfg = ModelConfig(BackboneConfig(channels_per_level=(2,) * 5), heads=HeadsConfig(min_stride=VARIANTS["amulet-1/16"]))
    assert cfg.active_levels == [4]
    assert ModelConfig().active_levels == [0, 1, 2, 3, 4]
    assert ModelConfig(heads=HeadsConfig(min_stride=4)).active_levels == [2, 3, 4]
    with pytest.raises(ValueError):
        ModelConfig(heads=HeadsConfig(min_stride=32)).validate()


def test_variant_schemas_match_and_outputs_count():
    full = tiny_model(levels=3)
    coarse = tiny_model(levels=3, min_stride=4)
    assert list(full.params) == list(coarse.params)
    x = _t(np.random.default_rng(0).random((1, 3, 8, 8)))
    assert coarse(x).num_outputs == 2
    nobpr = tiny_model(levels=3, use_bpr=False)
    preds = nobpr(x)
    assert all(preds.refined[l] is preds.raw[l] for l in preds.levels)
