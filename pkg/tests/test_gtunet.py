import numpy as np
import pytest
import torch

from diffcast.gtunet import GlobalNet, GTUNet, TemporalAttention

from gradcheck import finite_difference_check


def test_globalnet_level_shapes():
    g = GlobalNet(1, 64, [1, 2, 4, 8])
    levels = g(torch.rand(1, 8, 1, 32, 32))
    assert [tuple(l.shape[-2:]) for l in levels] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert [l.shape[1] for l in levels] == [64, 128, 256, 512]


def test_globalnet_zero_forecast_gives_zero_features():
    g = GlobalNet(1, 8, [1, 2, 2])
    for lvl in g(torch.zeros(2, 4, 1, 16, 16)):
        assert torch.count_nonzero(lvl) == 0


def test_globalnet_sensitive_to_frame_order():
    torch.manual_seed(0)
    g = GlobalNet(1, 8, [1, 2])
    mu = torch.rand(1, 4, 1, 16, 16)
    a = g(mu)
    b = g(mu[:, [1, 0, 3, 2]])
    assert any(not torch.allclose(x, y) for x, y in zip(a, b))


def _net(use_globalnet=True, K=4, hidden=8, mults=(1, 2)):
    torch.manual_seed(0)
    return GTUNet(1, K, hidden, list(mults), use_globalnet), GlobalNet(1, hidden, list(mults))


def test_denoise_shape_contract():
    net, g = _net(K=4, hidden=8, mults=(1, 2, 2))
    s = torch.randn(1, 4, 1, 32, 32)
    h = g(torch.rand(1, 8, 1, 32, 32))
    assert net(s, torch.randn_like(s), h, 10, 1).shape == (1, 4, 1, 32, 32)


def test_denoise_depends_on_every_conditioning_input():
    net, g = _net()
    s, prev = torch.randn(2, 4, 1, 16, 16), torch.randn(2, 4, 1, 16, 16)
    h = g(torch.rand(2, 8, 1, 16, 16))
    base = net(s, prev, h, 5, 1)
    assert (net(s, prev, h, 5, 2) - base).abs().max() > 0          # segment index
    assert (net(s, prev, h, 6, 1) - base).abs().max() > 0          # diffusion step
    assert (net(s, torch.zeros_like(prev), h, 5, 1) - base).abs().max() > 0
    assert (net(s, prev, [2 * x for x in h], 5, 1) - base).abs().max() > 0


def test_embedding_paths_are_live():
    net, g = _net()
    s, prev = torch.randn(1, 4, 1, 16, 16), torch.randn(1, 4, 1, 16, 16)
    h = g(torch.rand(1, 8, 1, 16, 16))
    base = net(s, prev, h, 7, 3)
    t, j = torch.tensor([7]), torch.tensor([3])
    orig = net.embed
    for zero_t, zero_j in ((True, False), (False, True)):
        def embed(tt, jj, dtype, zt=zero_t, zj=zero_j):
            from diffcast.gtunet import sinusoidal_embedding
            e = (0 if zt else sinusoidal_embedding(tt, net.hidden)) + (0 if zj else sinusoidal_embedding(jj, net.hidden))
            return net.emb_mlp(e.to(dtype))
        net.embed = embed
        assert (net(s, prev, h, t, j) - base).abs().max() > 0
    net.embed = orig


def test_ablated_model_ignores_h_and_is_smaller():
    full, _ = _net(use_globalnet=True)
    abl, g = _net(use_globalnet=False)
    assert sum(p.numel() for p in abl.parameters()) < sum(p.numel() for p in full.parameters())
    s = torch.randn(1, 4, 1, 16, 16)
    h = g(torch.rand(1, 8, 1, 16, 16))
    assert torch.equal(abl(s, s, h, 3, 1), abl(s, s, None, 3, 1))
    with pytest.raises(ValueError):
        full(s, s, None, 3, 1)


@pytest.mark.parametrize("t, j", [(0, 1), (3, 0)])
def test_denoise_rejects_bad_indices(t, j):
    net, g = _net()
    s = torch.randn(1, 4, 1, 16, 16)
    with pytest.raises(ValueError):
        net(s, s, g(torch.rand(1, 8, 1, 16, 16)), t, j)


def test_denoise_rejects_shape_mismatch():
    net, g = _net()
    s = torch.randn(1, 4, 1, 16, 16)
    with pytest.raises(ValueError):
        net(s, s[:, :2], None, 3, 1)
    with pytest.raises(ValueError):
        net(torch.randn(1, 4, 1, 18, 18), torch.randn(1, 4, 1, 18, 18), None, 3, 1)


def test_temporal_attention_single_key_is_identity_mixing():
    torch.manual_seed(0)
    att = TemporalAttention(8)
    x = torch.randn(2, 1, 8, 4, 4)
    w, v = att.attention_weights(x)
    assert torch.allclose(w, torch.ones_like(w))
    value_path = att.proj(v.transpose(1, 2).reshape(-1, 1, 8)).reshape(2, 4, 4, 1, 8).permute(0, 3, 4, 1, 2)
    torch.testing.assert_close(att(x), x + value_path)


def test_temporal_attention_permutation_equivariance():
    torch.manual_seed(0)
    att = TemporalAttention(8)
    x = torch.randn(1, 5, 8, 3, 3)
    perm = torch.tensor([3, 0, 4, 1, 2])
    w, _ = att.attention_weights(x)
    wp, _ = att.attention_weights(x[:, perm])
    torch.testing.assert_close(wp, w[:, :, perm][:, :, :, perm])
    torch.testing.assert_close(att(x[:, perm]), att(x)[:, perm])


def test_temporal_attention_mixes_only_along_time():
    torch.manual_seed(0)
    att = TemporalAttention(8)
    x = torch.randn(1, 3, 8, 4, 4)
    y = x.clone()
    y[..., 0, 0] += 1.0  # perturb one pixel across all frames
    # GroupNorm statistics couple pixels within a frame, so compare against a norm-free probe
    att.norm = torch.nn.Identity()
    diff = (att(y) - att(x)).abs().sum(dim=(1, 2))[0]
    assert diff[0, 0] > 0
    mask = torch.ones_like(diff, dtype=torch.bool)
    mask[0, 0] = False
    assert torch.all(diff[mask] == 0)


def test_temporal_attention_shape_and_empty_segment():
    att = TemporalAttention(8, max_len=4)
    x = torch.randn(2, 4, 8, 5, 5)
    assert att(x).shape == x.shape
    with pytest.raises(ValueError):
        att.attention_weights(torch.randn(1, 0, 8, 2, 2))


def test_denoiser_gradients_match_finite_differences():
    torch.manual_seed(3)
    net = GTUNet(1, 2, 8, [1, 2], True)
    g = GlobalNet(1, 8, [1, 2])
    gen = torch.Generator().manual_seed(0)
    s = torch.randn(2, 2, 1, 8, 8, generator=gen, dtype=torch.float64)
    prev = torch.randn(2, 2, 1, 8, 8, generator=gen, dtype=torch.float64)
    mu = torch.rand(2, 2, 1, 8, 8, generator=gen, dtype=torch.float64)
    target = torch.randn(2, 2, 1, 8, 8, generator=gen, dtype=torch.float64)
    both = torch.nn.ModuleList([net, g])

    def loss():
        return (net(s, prev, g(mu), torch.tensor([4, 9]), torch.tensor([1, 2])) - target).pow(2).mean()

    errs = finite_difference_check(both, loss, n_coords=8)
    assert len(errs) >= 5
    assert max(errs) <= 1e-3, errs
