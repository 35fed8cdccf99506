import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from punet.config import toy_preset
from punet.selfsup import (PrototypeBank, assign, cluster, correspondence, cosine, cpa_loss, cpa_step, ema_update,
                           feature_grid, make_views, seed_prototypes, similarity_map, spatial_weights, to_gray8,
                           update_prototypes)
from punet.windowing import GeometryError, make_grid


def grid(h, w, origin=(0.0, 0.0), stride=1.0):
    return torch.from_numpy(make_grid(origin, stride, (h, w)))[None]


def lloyd(F, g, seeds, seed_pos, iters):
    """Hard-assignment k-means on cosine similarity, empty clusters kept."""
    F = F.reshape(-1, F.shape[-1])
    g = g.reshape(-1, 2)
    cent, pos = seeds.copy(), seed_pos.copy()
    for _ in range(iters):
        fn = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-8)
        cn = cent / np.maximum(np.linalg.norm(cent, axis=1, keepdims=True), 1e-8)
        lab = np.argmax(fn @ cn.T, axis=1)
        for k in range(len(cent)):
            sel = lab == k
            if sel.any():
                cent[k] = F[sel].mean(0)
                pos[k] = g[sel].mean(0)
    return cent, pos


def margin_ok(F, cent, margin=2e-3):
    s = np.sort(cosine(torch.from_numpy(F)[None], torch.from_numpy(cent)[None])[0].numpy(), axis=-1)
    return (s[..., -1] - s[..., -2]).min() > margin


# ---------------------------------------------------------------- views


def test_make_views(toy):
    img = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    a = make_views(img, toy, np.random.default_rng(5))
    b = make_views(img, toy, np.random.default_rng(5))
    assert np.array_equal(a.students[1].image, b.students[1].image)
    assert a.teacher.image.shape == (64, 64)
    assert [s.image.shape for s in a.students] == [(48, 48), (32, 32)]
    for s in a.students:
        assert toy.mask_fraction[0] <= s.record["masked_fraction"] <= toy.mask_fraction[1]
        assert feature_grid(s.grid).shape == (s.image.shape[0] // 2, s.image.shape[1] // 2, 2)
    with pytest.raises(GeometryError):
        make_views(img[:32, :32], toy, np.random.default_rng(0))


@given(seed=st.integers(0, 10_000))
def test_student_crop_inside_teacher(seed):
    from punet.data import AugmentPolicy

    cfg = toy_preset().replace(teacher_fov=48, student1_fov=32, student2_fov=16)
    img = np.zeros((64, 64), np.float32)
    ident = AugmentPolicy.identity()
    v = make_views(img, cfg, np.random.default_rng(seed), teacher_policy=ident, student_policy=ident)
    t = v.teacher.grid
    for s in v.students:
        assert s.grid[..., 0].min() >= t[..., 0].min() and s.grid[..., 0].max() <= t[..., 0].max()
        assert s.grid[..., 1].min() >= t[..., 1].min() and s.grid[..., 1].max() <= t[..., 1].max()


def test_feature_grid_stride():
    g = feature_grid(make_grid((3, 5), 1, (8, 8)))
    assert np.allclose(g[0, 0], (3.5, 5.5)) and np.allclose(np.diff(g[..., 0], axis=1), 2)


# ---------------------------------------------------------------- ema


def test_ema_cases():
    for m, expect in ((1.0, 0.0), (0.0, 2.0), (0.5, 1.0)):
        t = {"w": torch.zeros(3)}
        ema_update(t, {"w": torch.full((3,), 2.0)}, m)
        assert torch.equal(t["w"], torch.full((3,), expect))
    with pytest.raises(KeyError):
        ema_update({"a": torch.zeros(1)}, {"b": torch.zeros(1)}, 0.5)


def test_ema_modules_and_buffers():
    a, b = torch.nn.BatchNorm2d(2), torch.nn.BatchNorm2d(2)
    b.running_mean.fill_(4.0)
    b.weight.data.fill_(3.0)
    ema_update(a, b, 0.5)
    assert torch.equal(a.running_mean, torch.full((2,), 2.0)) and torch.equal(a.weight.data, torch.full((2,), 2.0))


# ---------------------------------------------------------------- prototypes


def test_seed_cases():
    F = torch.randn(1, 32, 32, 3, dtype=torch.float64)
    g = grid(32, 32)
    bank = seed_prototypes(F, g, 8)
    assert bank.n_prototypes == 16
    assert torch.allclose(bank.positions[0, :4, 0], torch.tensor([3.5, 11.5, 19.5, 27.5], dtype=torch.float64))
    assert torch.allclose(bank.positions[0, ::4, 1], torch.tensor([3.5, 11.5, 19.5, 27.5], dtype=torch.float64))
    one = seed_prototypes(F, g, 1)
    assert torch.equal(one.centroids, F.reshape(1, -1, 3))
    whole = seed_prototypes(F, g, 32)
    centre = F[0, 15:17, 15:17].mean(dim=(0, 1))
    assert torch.allclose(whole.centroids[0, 0], centre)
    odd = seed_prototypes(F[:, :9, :9], grid(9, 9), 9)
    assert torch.equal(odd.centroids[0, 0], F[0, 4, 4])
    with pytest.raises(GeometryError):
        seed_prototypes(F, g, 5)


def test_spatial_weights_values():
    fwhm = 10.0
    pos = torch.tensor([[[0.0, 0.0]]], dtype=torch.float64)
    g = torch.tensor([[[[0.0, 0.0], [5.0, 0.0], [0.0, 10.0]]]], dtype=torch.float64)
    w = spatial_weights(g, pos, fwhm)[0, 0, :, 0]
    assert w[0] == 1.0
    assert abs(w[1].item() - 0.5) < 1e-15
    assert abs(w[2].item() - math.exp(-4 * math.log(2))) < 1e-15
    assert abs(w[2].item() - 0.0625) < 1e-15
    with pytest.raises(ValueError):
        spatial_weights(g, pos, 0.0)


def test_assign_cases():
    F = torch.randn(2, 5, 5, 4, dtype=torch.float64)
    phi = assign(F, torch.randn(2, 1, 4, dtype=torch.float64), 0.1)
    assert torch.equal(phi, torch.ones_like(phi))
    cent = torch.randn(2, 6, 4, dtype=torch.float64)
    phi = assign(F, cent, 0.5)
    assert torch.allclose(phi.sum(-1), torch.ones(2, 5, 5, dtype=torch.float64), atol=1e-6)
    hard = assign(F, cent, 1e-4)
    onehot = torch.nn.functional.one_hot(cosine(F, cent).argmax(-1), 6).double()
    sims = cosine(F, cent).sort(-1).values
    ok = (sims[..., -1] - sims[..., -2]) > 2e-3
    assert (hard - onehot).abs()[ok].max() < 1e-3
    with pytest.raises(ValueError):
        assign(F, cent, 0.0)


def test_update_cases():
    F = torch.randn(1, 4, 4, 3, dtype=torch.float64)
    g = grid(4, 4)
    prev = PrototypeBank(torch.zeros(1, 2, 3, dtype=torch.float64), torch.zeros(1, 2, 2, dtype=torch.float64))
    uniform = torch.ones(1, 4, 4, 2, dtype=torch.float64)
    new = update_prototypes(F, uniform, g, prev)
    assert torch.allclose(new.centroids[0, 0], F[0].mean(dim=(0, 1)))
    assert torch.allclose(new.positions[0, 0], torch.tensor([1.5, 1.5], dtype=torch.float64))
    one = torch.zeros(1, 4, 4, 2, dtype=torch.float64)
    one[0, 2, 1, 0] = 1.0
    new = update_prototypes(F, one, g, prev)
    assert torch.allclose(new.centroids[0, 0], F[0, 2, 1])
    # prototype 1 received no weight: kept and flagged
    assert torch.equal(new.centroids[0, 1], prev.centroids[0, 1]) and new.empty[0].tolist() == [False, True]


def _instance(rng, h, w, c, r):
    F = rng.normal(size=(h, w, c))
    return torch.from_numpy(F)[None], grid(h, w)


def test_lloyd_one_step_and_three():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 10:
        F, g = _instance(rng, 16, 16, 4, 8)
        seeds = seed_prototypes(F, g, 8)
        c0, p0 = seeds.centroids[0].numpy(), seeds.positions[0].numpy()
        c1, _ = lloyd(F[0].numpy(), g[0].numpy(), c0, p0, 1)
        if not (margin_ok(F[0].numpy(), c0) and margin_ok(F[0].numpy(), c1)):
            continue
        bank = cluster(F, g, 8, 1, math.inf, 1e-4)
        assert np.abs(bank.centroids[0].numpy() - c1).max() < 1e-5
        checked += 1


def test_cluster_zero_iters_and_fixed_point():
    rng = np.random.default_rng(1)
    F = torch.from_numpy(rng.normal(size=(1, 16, 16, 3)))
    g = grid(16, 16)
    assert torch.equal(cluster(F, g, 8, 0, 8.0, 0.1).centroids, seed_prototypes(F, g, 8).centroids)
    vals = torch.from_numpy(np.linalg.qr(rng.normal(size=(4, 4)))[0])  # orthogonal cell features
    Fc = vals.reshape(2, 2, 4).repeat_interleave(8, 0).repeat_interleave(8, 1)[None]
    bank = cluster(Fc, g, 8, 3, 8.0, 1e-3)
    assert torch.allclose(bank.centroids[0], vals, atol=1e-9)


def test_no_gradient_into_teacher():
    F = torch.randn(1, 8, 8, 3, requires_grad=True)
    bank = cluster(F, grid(8, 8), 4, 2, 8.0, 0.1)
    assert not bank.centroids.requires_grad


# ---------------------------------------------------------------- correspondence


def test_correspondence_cases():
    t = grid(6, 6, stride=2)
    idx = correspondence(t, t)
    assert torch.equal(idx, torch.arange(36).reshape(1, 6, 6))
    s = grid(3, 3, origin=(2.0, 0.0), stride=2)
    assert correspondence(s, t)[0, 0].tolist() == [1, 2, 3]
    tie = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    assert correspondence(tie, grid(1, 3, stride=2))[0, 0, 0] == 0


@given(seed=st.integers(0, 10_000))
def test_correspondence_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    t = grid(8, 8, origin=tuple(rng.uniform(0, 4, 2)), stride=2)
    from punet.data import affine_matrix

    m = affine_matrix(rng.uniform(-0.5, 0.5), rng.uniform(0.8, 1.2), 0.0)
    base = make_grid((0, 0), 1, (5, 5)) - 2
    s = torch.from_numpy(base @ m.T + rng.uniform(2, 14, 2))[None]
    idx = correspondence(s, t)
    tf = t.reshape(-1, 2).numpy()
    for i in range(5):
        for j in range(5):
            d = ((tf - s[0, i, j].numpy()) ** 2).sum(-1)
            assert idx[0, i, j] == int(np.flatnonzero(d == d.min())[0])


# ---------------------------------------------------------------- loss


def test_cpa_hand_cases():
    t = torch.tensor([[[[0.8, 0.2]]]], dtype=torch.float64)
    s = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    idx = torch.zeros(1, 1, 1, dtype=torch.long)
    assert abs(cpa_loss([s, s], t, [idx, idx]).item() - 0.6931) < 1e-4
    onehot = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    assert cpa_loss([onehot], onehot, [idx]).item() == 0.0


@given(seed=st.integers(0, 10_000))
def test_entropy_identity_and_gibbs(seed):
    rng = np.random.default_rng(seed)
    p = torch.from_numpy(rng.dirichlet(np.ones(5), size=(1, 2, 3)))
    idx = torch.arange(6).reshape(1, 2, 3)
    H = -(p * p.log()).sum(-1).mean()
    assert abs(cpa_loss([p], p, [idx]).item() - H.item()) < 1e-9
    q = torch.from_numpy(rng.dirichlet(np.ones(5), size=(1, 2, 3)))
    assert cpa_loss([q], p, [idx]).item() >= H.item() - 1e-12


def test_loss_decreases_toward_fixed_teacher():
    torch.manual_seed(0)
    cfg = toy_preset().replace(proto_reduction=4)
    F_t = torch.randn(1, 16, 16, 8)
    g = grid(16, 16)
    student = torch.nn.Parameter(torch.randn(1, 16, 16, 8))
    opt = torch.optim.SGD([student], lr=0.5)
    losses = []
    for _ in range(50):
        res = cpa_step(F_t, g, [student], [g], cfg, np.random.default_rng(0))
        opt.zero_grad()
        res.loss.backward()
        opt.step()
        losses.append(res.loss.item())
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 5 and losses[-1] < losses[0]


def test_cpa_step_shapes(toy):
    F_t = torch.randn(2, 32, 32, 8)
    g_t = grid(32, 32, stride=2).expand(2, -1, -1, -1)
    F_s = torch.randn(2, 24, 24, 8, requires_grad=True)
    g_s = grid(24, 24, origin=(8.0, 8.0), stride=2).expand(2, -1, -1, -1)
    res = cpa_step(F_t, g_t, [F_s], [g_s], toy, np.random.default_rng(0))
    assert res.bank.n_prototypes == 16
    assert res.teacher_phi.shape == (2, 16, 16, 16) and res.student_phis[0].shape == (2, 12, 12, 16)
    res.loss.backward()
    assert F_s.grad.abs().sum() > 0


def test_similarity_map():
    F_t = torch.randn(1, 4, 4, 3)
    sim = similarity_map(F_t, F_t, (1, 2))
    assert sim.shape == (4, 4) and abs(sim[1, 2].item() - 1.0) < 1e-6
    img = to_gray8(sim)
    assert img.dtype == np.uint8 and img[1, 2] == 255
