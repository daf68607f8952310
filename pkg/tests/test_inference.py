import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amulet.heads import PredictionSet
from amulet.inference import contrast_map, infer, infer_fused_only, normalize_minmax
from amulet.tensor import Tensor, softmax_pair

from conftest import tiny_model


def _preds_from_scores(level_scores, fused_scores):
    probs = {l: softmax_pair(Tensor(s)) for l, s in enumerate(level_scores)}
    fused = Tensor(fused_scores)
    return PredictionSet(list(probs), {}, {}, fused, probs, softmax_pair(fused))


def test_constant_contrast_gives_zero_map():
    raw = contrast_map([np.full((1, 1, 3, 3), 0.2)] * 3, np.full((1, 1, 3, 3), 0.1))
    np.testing.assert_allclose(raw, 0.3)
    assert not normalize_minmax(raw).any()


def test_hand_example_two_levels():
    c0, c1, f = (np.zeros((1, 1, 2, 2)) for _ in range(3))
    c0[0, 0, 1, 1], c1[0, 0, 1, 1], f[0, 0, 1, 1] = 0.2, 0.4, 0.3
    raw = contrast_map([c0, c1], f)
    assert raw[0, 0, 1, 1] == pytest.approx(0.6)
    assert raw.sum() == pytest.approx(0.6)
    norm = normalize_minmax(raw)
    assert norm.max() == 1.0 and norm[0, 0, 1, 1] == 1.0


def test_symmetric_excitations_give_zero_map():
    z = np.zeros((2, 2, 4, 4))
    assert not infer(_preds_from_scores([z, z, z], z)).any()


def test_fused_only_examples(rng):
    z = np.zeros((1, 2, 3, 3))
    np.testing.assert_allclose(infer_fused_only(_preds_from_scores([z], z)), 0.5)
    strong = np.zeros((1, 2, 3, 3))
    strong[:, 1] = 30
    assert infer_fused_only(_preds_from_scores([z], strong)).min() > 0.999
    scores = rng.normal(size=(2, 2, 4, 4))
    preds = _preds_from_scores([z[:, :, :1, :1]], scores)
    np.testing.assert_array_equal(infer_fused_only(preds)[:, 0], softmax_pair(Tensor(scores)).data[:, 1])


def test_reduces_to_fused_contrast():
    f = np.array([-0.5, 0.1, 0.7, 0.2]).reshape(1, 1, 2, 2)
    raw = contrast_map([np.zeros_like(f)] * 4, f)
    np.testing.assert_allclose(raw, np.maximum(f, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 2), st.floats(0.01, 1.0))
def test_monotone_in_level_contrast(seed, level, bump):
    r = np.random.default_rng(seed)
    levels = [r.uniform(-1, 1, (1, 1, 3, 3)) for _ in range(3)]
    f = r.uniform(-1, 1, (1, 1, 3, 3))
    before = contrast_map(levels, f)
    levels[level] = levels[level].copy()
    levels[level][0, 0, 1, 1] += bump
    after = contrast_map(levels, f)
    assert after[0, 0, 1, 1] >= before[0, 0, 1, 1]


def test_model_saliency_range(rng):
    model = tiny_model()
    preds = model(Tensor(rng.random((3, 3, 8, 8))))
    for s in (infer(preds), infer_fused_only(preds)):
        assert s.shape == (3, 1, 8, 8)
        assert s.min() >= 0 and s.max() <= 1
