import numpy as np
import pytest
from hypothesis import given, strategies as st

from decur import autodiff as ad
from decur import explain as ex
from decur.autodiff import Tensor
from decur.objective import DimSplit


def test_histogram_identical_inputs_delta_at_zero():
    z = np.random.default_rng(0).normal(size=(64, 10))
    h = ex.alignment_histogram(z, z, bins=10)
    assert h.counts[0] == 10 and h.counts.sum() == 10
    assert np.all(h.losses < 1e-8)


@given(st.integers(0, 2**31), st.integers(2, 12))
def test_histogram_counts_sum_to_k(seed, k):
    rng = np.random.default_rng(seed)
    h = ex.alignment_histogram(rng.normal(size=(16, k)), rng.normal(size=(16, k)) * 3 + 1, bins=7)
    assert h.counts.sum() == k and len(h.edges) == 8 and h.edges[0] == 0 and h.edges[-1] == 1


def test_histogram_independent_inputs_near_one():
    means = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        means.append(ex.alignment_histogram(rng.normal(size=(256, 32)), rng.normal(size=(256, 32))).losses.mean())
    assert 0.9 <= np.mean(means) <= 1.1


def test_histogram_keeps_raw_losses_above_one():
    z = np.random.default_rng(0).normal(size=(50, 4))
    h = ex.alignment_histogram(z, -z)
    assert np.allclose(h.losses, 4.0, atol=1e-3)  # C_ii = -1 gives (1 - (-1))^2
    assert h.counts[-1] == 4


def test_histogram_needs_two_samples():
    with pytest.raises(ValueError):
        ex.alignment_histogram(np.ones((1, 3)), np.ones((1, 3)))


def linear_model(w):
    W = Tensor(np.asarray(w, dtype=float).reshape(1, -1))

    def model(x):
        return ad.matmul(x, ad.transpose(W))  # N x 1 embedding
    return model


@pytest.mark.parametrize("m", [8, 13, 64])
def test_ig_linear_model_exact(m):
    rng = np.random.default_rng(0)
    w, x, base = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    att = ex.integrated_gradients(linear_model(w), x, "common", DimSplit(1, 1), steps=m, baseline=base)
    np.testing.assert_allclose(att.values, (x - base) * w, atol=1e-12)
    assert att.residual < 1e-12 and att.steps == m and att.target == "common"


def test_ig_at_baseline_is_zero():
    x = np.random.default_rng(1).normal(size=5)
    att = ex.integrated_gradients(linear_model(np.ones(5)), x, "common", DimSplit(1, 1), baseline=x)
    assert np.all(att.values == 0)


def test_ig_requires_min_steps():
    with pytest.raises(ValueError):
        ex.integrated_gradients(linear_model([1.0]), np.ones(1), "common", DimSplit(1, 1), steps=4)


def tanh_model(seed=0, d=6, K=4):
    rng = np.random.default_rng(seed)
    W1, W2 = Tensor(rng.normal(size=(10, d))), Tensor(rng.normal(size=(K, 10)) / 3)

    def model(x):
        return ad.linear(ad.tanh(ad.linear(x, W1)), W2)
    return model


def test_ig_residual_decreases_monotonically_smooth_model():
    model = tanh_model()
    x = np.random.default_rng(3).normal(size=6)
    res = [ex.integrated_gradients(model, x, "unique", DimSplit(4, 2), steps=m).residual for m in (16, 32, 64, 128, 256)]
    assert all(a > b for a, b in zip(res, res[1:]))


def test_ig_non_finite_reports_step():
    def model(x):
        return ad.sqrt(ad.add_scalar(ad.square(x), 0.0))  # d sqrt at 0 is infinite

    with pytest.raises(ex.AttributionError, match="path step"):
        ex.integrated_gradients(model, np.zeros(3), "common", DimSplit(3, 3), steps=8, baseline=np.zeros(3) - 1)


def test_ig_requires_eval_mode():
    from decur import nn
    b = nn.init_params(nn.BranchConfig(in_dim=4, encoder_widths=[6], embed_dim=4), 0)
    with pytest.raises(ValueError):
        ex.integrated_gradients(b.embed, np.ones(4), "common", DimSplit(4, 2))


def test_target_needs_nonempty_block():
    with pytest.raises(ValueError):
        ex.target_output(Tensor(np.ones((2, 3))), "unique", DimSplit(3, 3))


# ------------------------------------------------------------ overlap

def test_overlap_identical_maps_maximal():
    rng = np.random.default_rng(0)
    a = rng.normal(size=20)
    s_same = ex.overlap_score(a, a)
    for k in range(20):
        b = a + rng.normal(scale=0.5, size=20)
        assert ex.overlap_score(a, b) <= s_same * 1.0000001 or np.linalg.norm(ex.minmax(b)) > np.linalg.norm(ex.minmax(a))


def test_overlap_disjoint_support_zero():
    a = np.array([0, 0, 0, 1.0, 2.0])
    b = np.array([3.0, 1.0, 0, 0, 0])
    assert ex.overlap_score(a, b) == 0.0
    stat = ex.saliency_overlap([a, a], [b, a], [a, a], [a, a])
    assert stat.common[0] == 0.0 and stat.common[1] == 1.0


def test_overlap_scores_in_unit_interval_and_histograms():
    rng = np.random.default_rng(0)
    maps = [rng.normal(size=(30, 12)) for _ in range(2)] + [rng.normal(size=(30, 9)) for _ in range(2)]
    for mode in ("dataset", "sample"):
        st_ = ex.saliency_overlap(*maps, normalize=mode)
        assert np.all((0 <= st_.common) & (st_.common <= 1)) and np.all((0 <= st_.unique) & (st_.unique <= 1))
        edges, hc, hu = st_.histograms(5)
        assert hc.sum() == 30 and hu.sum() == 30


def test_overlap_resamples_different_lengths():
    a = np.linspace(0, 1, 10)
    b = np.linspace(0, 1, 25)
    assert abs(ex.overlap_score(a, b) - np.dot(a, a)) < 1e-12


def test_overlap_empty_rejected():
    with pytest.raises(ValueError):
        ex.saliency_overlap(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))


def test_spectral_saliency_simplex():
    model = tanh_model(d=8)
    X = np.random.default_rng(0).normal(size=(10, 8))
    imp = ex.spectral_saliency(model, X, "common", DimSplit(4, 2), steps=16)
    assert imp.shape == (8,) and np.all(imp >= 0) and abs(imp.sum() - 1) < 1e-9


def test_explain_is_pure():
    model = tanh_model()
    X = np.random.default_rng(0).normal(size=(5, 6))
    a = ex.integrated_gradients_batch(model, X, "common", DimSplit(4, 2), steps=16)[0]
    b = ex.integrated_gradients_batch(model, X, "common", DimSplit(4, 2), steps=16)[0]
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------ export

def test_export_embeddings(tmp_path):
    rng = np.random.default_rng(0)
    z1, z2 = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    split = DimSplit(6, 4)
    p = tmp_path / "e.csv"
    ex.export_embeddings(z1, z2, split, p)
    meta, vals = ex.read_embeddings_csv(p)
    assert len(meta) == 12
    for m in ("m1", "m2"):
        assert sum(1 for mm, _, role in meta if mm == m and role == "common") == 4
    np.testing.assert_allclose(vals[:6], z1.T.astype(np.float32), rtol=1e-7)
    np.testing.assert_allclose(vals[6:], z2.T.astype(np.float32), rtol=1e-7)
