import numpy as np
import pytest
import torch

from saber.baselines import BASELINE_KINDS, ConstantVelocity, build_variant, cvm_predict
from saber.errors import ConfigError
from saber.scene_data import build_observations, collate, make_windows
from saber.training import loss


def test_cvm_predict_examples():
    np.testing.assert_array_equal(cvm_predict([0.0, 0.0], [1.0, 2.0]), [2.0, 4.0])
    np.testing.assert_array_equal(cvm_predict([[5.0, 1.0]], [[5.0, 1.0]]), [[5.0, 1.0]])


def test_cvm_error_is_velocity_change(make_straight):
    s = make_straight([[10, -5.25]], [[2.0, 0.0]], T=18)
    s.positions[0, 10:] += np.array([0.0, 0.5])  # one lateral jump between steps 9 and 10
    batch = collate(make_windows(build_observations(s), 15), dtype=torch.float64)
    err, valid, offset = ConstantVelocity().window_errors(batch)
    assert offset == 1
    # the jump is displacement index 9; error k compares X[k + 1] with X[k]
    row = err[0, 0].numpy()
    np.testing.assert_array_equal(np.nonzero(row)[0], [8, 9])
    assert row[8] == pytest.approx(0.5) and row[9] == pytest.approx(0.5)


@pytest.mark.parametrize("kind", BASELINE_KINDS)
def test_build_every_kind(kind):
    det = build_variant(kind) if kind == "cvm" else build_variant(kind, attn_dim=8, heads=2)
    assert hasattr(det, "window_errors")


def test_build_errors():
    with pytest.raises(ConfigError):
        build_variant("stgae")
    with pytest.raises(ConfigError):
        build_variant("cvm", attn_dim=8)


def _batch(make_straight, dtype=torch.float32):
    s = make_straight([[10, -5.25], [25, -1.75]], [[2.5, 0.01], [2.2, 0.0]], T=18)
    return collate(make_windows(build_observations(s), 15), dtype=dtype)


def test_vv_rae_sees_neighbours_rae_pred_does_not(make_straight):
    torch.manual_seed(0)
    vv = build_variant("vv_rae", attn_dim=8, heads=2).eval()
    torch.manual_seed(0)
    raw = build_variant("rae_pred", attn_dim=8, heads=2).eval()
    batch = _batch(make_straight)
    moved = batch.select(torch.arange(batch.X.shape[0]))
    moved.R = batch.R + 3.0 * batch.nbr_mask[..., None]
    assert not torch.equal(vv.window_errors(batch)[0], vv.window_errors(moved)[0])
    assert torch.equal(raw.window_errors(batch)[0], raw.window_errors(moved)[0])


def test_saber_ae_has_no_kl(make_straight):
    torch.manual_seed(0)
    m = build_variant("saber_ae", attn_dim=8, heads=2)
    batch = _batch(make_straight)
    out = m(batch, *m.draw_eps(batch))
    assert out.sigma_vv is None and out.sigma_lv is None
    a = loss(out, batch, 1.0, 1.0)
    b = loss(out, batch, 0.0, 0.0)
    assert torch.equal(a.total, b.total)


def test_rae_recon_scores_reconstruction(make_straight):
    torch.manual_seed(0)
    m = build_variant("rae_recon", attn_dim=8, heads=2).eval()
    batch = _batch(make_straight)
    err, valid, offset = m.window_errors(batch)
    assert offset == 0
    out = m(batch)
    expected = torch.linalg.vector_norm(batch.X[:, :, :-1] - out.x_recon, dim=-1)
    torch.testing.assert_close(err, expected)
    terms = loss(out, batch, objective="reconstruction")
    assert terms.n_pred == 0 and terms.pred.item() == 0.0


def test_stochastic_variant_mc_scoring(make_straight):
    torch.manual_seed(0)
    m = build_variant("saber_vae", attn_dim=8, heads=2).eval()
    batch = _batch(make_straight)
    det = m.window_errors(batch)[0]
    assert torch.equal(det, m.window_errors(batch)[0])
    m.mc_samples = 4
    a = m.window_errors(batch, torch.Generator().manual_seed(1))[0]
    b = m.window_errors(batch, torch.Generator().manual_seed(1))[0]
    assert torch.equal(a, b) and not torch.equal(a, det)
