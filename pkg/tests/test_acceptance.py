"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 (full adaptation runs) and 6 (trend suite) train real models on the
toy preset and take roughly 1.5 h together on one CPU thread.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from punet.attention import PMA, SlotPrompt
from punet.config import SCHEMES, full_config, toy_preset
from punet.data import PhantomSpec, generate
from punet.freeze import freeze_policy, registry
from punet.gradcheck import DIFFERENTIABLE_OPS, run_all
from punet.harness import adapt_p2, evaluate, load_pretrained, pretrain_p1
from punet.metrics import assd, dsc, paired_t_test, write_csv
from punet.model import backbone_parameter_count, build
from punet.seghead import PromptStore, aggregate, aggregate_variants, init_prompts
from punet.selfsup import (cluster, correspondence, cosine, cpa_loss, feature_grid, make_views,
                           seed_prototypes, spatial_weights)
from punet.trends import check_trends, run_trend_suite
from punet.windowing import FeatureMap, cyclic_shift, make_grid, partition, reverse

from test_metrics import brute_assd


# ---------------------------------------------------------------- shared runs


@pytest.fixture(scope="module")
def phantom():
    return generate(PhantomSpec(), 0)


@pytest.fixture(scope="module")
def trend_run(phantom, tmp_path_factory):
    out = tmp_path_factory.mktemp("trends")
    t0 = time.time()
    reports = run_trend_suite(toy_preset(), phantom, out)
    return reports, time.time() - t0, out


# ---------------------------------------------------------------- 1


def test_criterion_1_gradients(criterion):
    t0 = time.time()
    reports = run_all()
    elapsed = time.time() - t0
    worst = max(reports, key=lambda r: r.max_rel_error / 1e-4)
    ok = (len(reports) == len(DIFFERENTIABLE_OPS) and all(r.passed and r.max_rel_error < 1e-4 for r in reports)
          and elapsed < 300)
    assert criterion(1, ok, f"{len(reports)} ops, worst {worst.op} {worst.max_rel_error:.2e} < 1e-4, "
                            f"{elapsed:.0f}s < 300s")


# ---------------------------------------------------------------- 2


def _exhaustive_nearest(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    tf = t.reshape(-1, 2)
    out = np.empty(s.shape[:2], np.int64)
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            d = ((tf - s[i, j]) ** 2).sum(-1)
            out[i, j] = np.flatnonzero(d == d.min())[0]
    return out


def test_criterion_2_geometry(criterion):
    rng = np.random.default_rng(2)
    round_trips = 0
    for case in range(100):
        window = int(rng.choice([1, 2, 4, 8]))
        h, w = window * int(rng.integers(1, 4)), window * int(rng.integers(1, 4))
        fm = FeatureMap(torch.from_numpy(rng.normal(size=(h, w, 3))),
                        make_grid(tuple(rng.uniform(0, 9, 2)), 2.0, (h, w)), 2.0)
        shift = tuple(int(v) for v in rng.integers(-9, 10, 2))
        back = reverse(partition(fm, window))
        shifted = cyclic_shift(fm, shift)
        undone = cyclic_shift(shifted, (-shift[0], -shift[1]))
        through = reverse(partition(shifted, window))
        assert torch.equal(back.values, fm.values) and np.array_equal(back.grid, fm.grid)
        assert torch.equal(undone.values, fm.values) and np.array_equal(undone.grid, fm.grid)
        assert torch.equal(through.values, fm.values)
        round_trips += 1

    cfg = toy_preset()
    image = rng.uniform(size=(80, 80)).astype(np.float32)
    matches = 0
    for case in range(100):
        views = make_views(image, cfg, rng)
        t_grid = feature_grid(views.teacher.grid)
        s_grid = feature_grid(views.students[case % 2].grid)
        idx = correspondence(torch.from_numpy(s_grid)[None], torch.from_numpy(t_grid)[None])[0].numpy()
        matches += int(np.array_equal(idx, _exhaustive_nearest(s_grid, t_grid)))
    ok = round_trips == 100 and matches == 100
    assert criterion(2, ok, f"{round_trips}/100 exact round trips, {matches}/100 crops match exhaustive NN")


# ---------------------------------------------------------------- 3


def _lloyd(F, g, cent, pos, iters):
    """Hard-assignment k-means on cosine similarity; returns every iterate."""
    F, g = F.reshape(-1, F.shape[-1]), g.reshape(-1, 2)
    cent, pos = cent.copy(), pos.copy()
    history = [cent.copy()]
    for _ in range(iters):
        fn = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-8)
        cn = cent / np.maximum(np.linalg.norm(cent, axis=1, keepdims=True), 1e-8)
        lab = np.argmax(fn @ cn.T, axis=1)
        for k in range(len(cent)):
            if (lab == k).any():
                cent[k], pos[k] = F[lab == k].mean(0), g[lab == k].mean(0)
        history.append(cent.copy())
    return cent, history


def _separated(F, history, margin=2e-3) -> bool:
    """Hard assignments are well defined at every iterate. Below a cosine gap of
    about tau * ln(1e7) = 1.6e-3 a tau = 1e-4 softmax is not yet one-hot to 1e-5."""
    for c in history[:-1]:
        s = np.sort(cosine(torch.from_numpy(F)[None], torch.from_numpy(c)[None])[0].numpy(), axis=-1)
        if (s[..., -1] - s[..., -2]).min() <= margin:
            return False
    return True


def test_criterion_3_clustering_oracle(criterion):
    rng = np.random.default_rng(3)
    iters = toy_preset().cluster_iters
    worst, done, skipped = 0.0, 0, 0
    while done < 50:
        side = int(rng.choice([8, 16]))
        c = int(rng.integers(2, 5))
        centres = rng.normal(size=(4, c))
        # quadrant regions with scattered outliers, so lattice seeds start near distinct clusters
        labels = np.add.outer(np.arange(side) >= side // 2, 2 * (np.arange(side) >= side // 2)).astype(int)
        flip = rng.uniform(size=labels.shape) < 0.2
        labels[flip] = rng.integers(0, 4, size=int(flip.sum()))
        F = centres[labels] + 0.3 * rng.normal(size=(side, side, c))
        g = make_grid((0.0, 0.0), 1.0, (side, side))
        seeds = seed_prototypes(torch.from_numpy(F)[None], torch.from_numpy(g)[None], side // 2)
        ref, history = _lloyd(F, g, seeds.centroids[0].numpy(), seeds.positions[0].numpy(), iters)
        if not _separated(F, history):
            skipped += 1
            continue
        bank = cluster(torch.from_numpy(F)[None], torch.from_numpy(g)[None], side // 2, iters, math.inf, 1e-4)
        assert bank.centroids.shape[1] == 4
        worst = max(worst, float(np.abs(bank.centroids[0].numpy() - ref).max()))
        done += 1
    ok = worst < 1e-5
    assert criterion(3, ok, f"50 instances ({skipped} near-tie instances redrawn), "
                            f"max centroid deviation {worst:.2e} < 1e-5")


# ---------------------------------------------------------------- 4


def _plain_mha(layer: PMA, xw: torch.Tensor) -> torch.Tensor:
    """Windowed multi-head attention with the relative-distance bias spelled out
    entry by entry."""
    bt, win, d = layer.bias_table, layer.bias_table.window, layer.head_dim
    cells = [(r, c) for r in range(win) for c in range(win)]
    q, k, v = layer.q(xw), layer.k(xw), layer.v(xw)
    outs = []
    for h in range(layer.heads):
        bias = torch.empty(len(cells), len(cells), dtype=xw.dtype)
        for i, (ri, ci) in enumerate(cells):
            for j, (rj, cj) in enumerate(cells):
                bias[i, j] = (bt.E_row[ri - rj + win - 1] @ bt.w_row[h] + bt.E_col[ci - cj + win - 1] @ bt.w_col[h]) / 2
        sl = slice(h * d, (h + 1) * d)
        scores = q[..., sl] @ k[..., sl].transpose(-1, -2) / math.sqrt(d) + bias / math.sqrt(bt.bias_channels)
        outs.append(torch.softmax(scores, -1) @ v[..., sl])
    return layer.o(torch.cat(outs, -1))


@torch.no_grad()
def test_criterion_4_reductions(criterion):
    torch.manual_seed(4)
    layer = PMA(8, 2, 2, 4)
    for p in layer.bias_table.parameters():
        p.normal_(0, 0.5)
    xw = torch.randn(2, 3, 4, 8)
    empty = SlotPrompt(torch.zeros(2, 0, 8), torch.zeros(2, 0, 4))
    err_plain = float((layer(xw, empty) - _plain_mha(layer, xw)).abs().max())
    p = SlotPrompt(torch.randn(2, 5, 8), torch.randn(2, 5, 4), torch.zeros(2, 5, dtype=torch.bool))
    err_mask = float((layer(xw, p) - layer(xw)).abs().max())
    sim = torch.rand(2, 4, 4, 3, 1) * 2 - 1
    t1 = torch.equal(aggregate(sim, 0.1), sim[..., 0])
    simT = torch.rand(2, 4, 4, 3, 5) * 2 - 1
    topk = torch.equal(aggregate_variants(simT, "topk", 5), aggregate_variants(simT, "mean"))
    ok = err_plain < 1e-6 and err_mask < 1e-6 and t1 and topk
    assert criterion(4, ok, f"Np=0 vs MHA {err_plain:.1e}, masked vs absent {err_mask:.1e}, "
                            f"T=1 exact {t1}, top-k(T)=mean exact {topk}")


# ---------------------------------------------------------------- 5


def test_criterion_5_freeze_contracts(criterion, trend_run, phantom):
    _, _, out = trend_run
    pre = load_pretrained(out / "p1_joint")
    source = {**{f"model.{k}": v for k, v in pre.student.state_dict().items()},
              **{f"prompts.{k}": v for k, v in pre.store.state_dict().items()}}
    checked = []
    for scheme in [s for s in SCHEMES if s in ("fixed", "bias", "prompt_no_bias", "prompt", "bias_plus_prompt",
                                                "adapter", "decoder")]:
        ad = adapt_p2(pre, phantom, scheme)  # raises if the frozen checksum moved
        params = registry(ad.model, ad.store)
        frozen_inherited = [n for n in ad.mask.frozen() if n in source]
        same = all(torch.equal(params[n].detach(), source[n]) for n in frozen_inherited)
        moved = ad.trainable_after != ad.trainable_before
        checked.append((scheme, same and ad.frozen_before == ad.frozen_after and moved, len(ad.logs)))
    m = build(full_config())
    store = init_prompts(PromptStore.for_model(m), [1], "binary", 0)
    n_prompt = freeze_policy(m, store, "prompt").count(registry(m, store))
    n_backbone = backbone_parameter_count(m)
    frac = n_prompt / n_backbone
    ok = all(c[1] for c in checked) and frac < 0.015 and 6.0e6 <= n_backbone <= 7.6e6
    detail = ", ".join(f"{s}:{'ok' if good else 'MOVED'}" for s, good, _ in checked)
    assert criterion(5, ok, f"{detail} ({checked[0][2]} P2 steps each); prompt fraction {100 * frac:.3f}% < 1.5%; "
                            f"backbone {n_backbone / 1e6:.2f}M in [6.0M, 7.6M]")


# ---------------------------------------------------------------- 6


def test_criterion_6_trends(criterion, trend_run):
    reports, elapsed, _ = trend_run
    checks = check_trends(reports)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks) and elapsed < 7200
    summary = "; ".join(f"{c.name} {'ok' if c.passed else 'FAIL'} {c.lhs:.1f} vs {c.rhs:.1f}" for c in checks)
    assert criterion(6, ok, f"{summary}; suite {elapsed / 60:.0f} min < 120 min")


# ---------------------------------------------------------------- 7


def test_criterion_7_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    cells = list(itertools.product(range(4), repeat=2))
    small = []
    for k in (1, 2):
        for combo in itertools.combinations(cells, k):
            m = np.zeros((4, 4), bool)
            m[tuple(zip(*combo))] = True
            small.append(m)
    worst, n_pairs = 0.0, 0
    for a in small:
        for b in small:
            worst = max(worst, abs(assd(a, b) - brute_assd(a, b)))
            n_pairs += 1
    for _ in range(2000):
        ms = []
        for _ in range(2):
            m = np.zeros(64, bool)
            m[rng.choice(64, size=rng.integers(1, 7), replace=False)] = True
            ms.append(m.reshape(8, 8))
        worst = max(worst, abs(assd(*ms) - brute_assd(*ms)))
        n_pairs += 1
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[:2, :1] = True
    hand = [dsc(a, a) == 1.0, dsc(a, ~a) == 0.0, dsc(a, b) == 2 * 2 / 6, dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0]
    # t = 4.604 on 4 degrees of freedom is the tabulated two-sided 0.01 point
    x = 4.604 * math.sqrt(2.5 / 5) + np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    p = paired_t_test(x, np.zeros(5))
    ok = worst < 1e-9 and all(hand) and round(p, 3) == 0.010
    assert criterion(7, ok, f"ASSD vs brute force on {n_pairs} pairs max err {worst:.1e}; "
                            f"DSC hand cases {sum(hand)}/4 exact; t-test p {p:.4f} -> 0.010")


# ---------------------------------------------------------------- 8


def test_criterion_8_cpa_fixtures(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        p = torch.from_numpy(rng.dirichlet(np.ones(6), size=(2, 3, 3)))
        idx = torch.arange(9).reshape(1, 3, 3).expand(2, 3, 3)
        H = -(p * p.log()).sum(-1).mean()
        worst = max(worst, abs(cpa_loss([p], p, [idx]).item() - H.item()))
    t = torch.tensor([[[[0.8, 0.2]]]], dtype=torch.float64)
    s = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    zero = torch.zeros(1, 1, 1, dtype=torch.long)
    hand = cpa_loss([s, s], t, [zero, zero]).item()
    fwhm = 12.0
    w = spatial_weights(torch.tensor([[[[fwhm / 2, 0.0]]]], dtype=torch.float64),
                        torch.zeros(1, 1, 2, dtype=torch.float64), fwhm).item()
    ok = worst < 1e-9 and abs(hand - 0.6931) <= 1e-4 and w == 0.5
    assert criterion(8, ok, f"CE(p,p)=H(p) max err {worst:.1e}; hand case {hand:.6f}; weight at fwhm/2 = {w!r}")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(criterion, tmp_path):
    ds = generate(PhantomSpec(subjects=10, slices_per_subject=2), 9)
    cfg = toy_preset().replace(batch_size=4)
    blobs = []
    for run in range(2):
        pre = pretrain_p1(cfg, ds, "joint", steps=20)
        rep = evaluate(adapt_p2(pre, ds, "prompt", steps=20), ds, "prompt")
        path = tmp_path / f"run{run}.csv"
        write_csv([rep], path)
        blobs.append((path.read_bytes(), pre.logs))
    ok = blobs[0][0] == blobs[1][0] and blobs[0][1] == blobs[1][1]
    assert criterion(9, ok, f"two seeded P1+P2+eval runs: report CSVs identical {blobs[0][0] == blobs[1][0]}, "
                            f"loss curves identical {blobs[0][1] == blobs[1][1]}")
