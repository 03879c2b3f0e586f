"""Acceptance criteria, one test per criterion.

Run ``pytest tests/test_acceptance.py`` to get the PASS/FAIL summary; the
end-to-end smoke run (criterion 12) takes most of the time, so
``-k "not criterion_12"`` gives a quick pass over the rest.
"""
import math
import statistics
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from conftest import central_diff, rel_err, tiny_bank, tiny_cfg
from test_metrics import _brute_force_pr, _mmd_double_loop, _stats
from test_selection import SHIFTS, separability_bank, shifted_images
from test_training import _restore, _rng_states, add_head, make_state, real_batch
from visionaid.augment import AugPolicy, adapt, augment
from visionaid.bank import FeatureExtractorSpec, FeatureOutput, preprocess
from visionaid.config import parse_config
from visionaid.data import two_mode_images
from visionaid.heads import build_head, head_forward
from visionaid.metrics import fid, fit_gaussian, kid, kid_subsets, mmd2_unbiased, precision_recall
from visionaid.networks import Discriminator, Generator, seeded
from visionaid.selection import k_fixed_select, linear_probe, rank_models
from visionaid.trainer import Trainer, fork, read_jsonl
from visionaid.training import D_NAME, loss_terms, make_rng, train_step, vision_aided_loss

E2E_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "e2e_smoke.toml"
E2E_SEEDS = (0, 1, 2, 3, 4)


def test_criterion_01_frozen_backbone(record_property):
    """Frozen backbones: 1000 steps with 3 surrogate heads leave extractor weights untouched, move every head"""
    t0 = time.perf_counter()
    state = make_state(channels=8, latent=16)
    before = state.bank.checksums()
    heads = [add_head(state, mid) for mid in ("pool8", "edges16", "conv_a")]
    init = [[p.detach().clone() for p in h.head.parameters()] for h in heads]
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        train_step(state, torch.rand(4, 3, 32, 32, generator=g) * 2 - 1)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{elapsed:.0f} s")
    assert state.bank.checksums() == before
    for h, ps in zip(heads, init):
        for p, q in zip(h.head.parameters(), ps):
            assert not torch.equal(p, q), h.model_id
    assert elapsed < 120


def test_criterion_02_k_zero_is_a_plain_gan(record_property):
    """K=0 reduction: 200 steps match a hand-written GAN loop bitwise"""
    t0 = time.perf_counter()
    seed, latent, batch, gamma, r1_every, ada_every = 3, 16, 8, 1.0, 16, 4
    state = make_state(seed=seed, channels=8, latent=latent)
    G = seeded(Generator(latent, 8), seed)
    D = seeded(Discriminator(8), seed + 1)
    g_opt = torch.optim.Adam(G.parameters(), lr=0.002, betas=(0.0, 0.99))
    d_opt = torch.optim.Adam(D.parameters(), lr=0.002, betas=(0.0, 0.99))
    z_rng, aug_rng = make_rng(seed, "latent"), make_rng(seed, f"aug:{D_NAME}")
    p, signs = state.d_policy.current_p, []
    data = torch.Generator().manual_seed(9)
    for step in range(200):
        real = torch.rand(batch, 3, 32, 32, generator=data) * 2 - 1
        train_step(state, real)

        policy = AugPolicy(D_NAME, "adaptive", p, 0.6, state.d_policy.ops)
        with torch.no_grad():
            fake = G(torch.randn(batch, latent, generator=z_rng))
        real_in = augment(real, policy, aug_rng)
        if step % r1_every == 0:
            real_in = real_in.detach().requires_grad_(True)
        real_logits = D(real_in)
        fake_logits = D(augment(fake, policy, aug_rng))
        loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
        if step % r1_every == 0:
            (grad,) = torch.autograd.grad(real_logits.sum(), real_in, create_graph=True)
            loss = loss + 0.5 * gamma * grad.square().flatten(1).sum(1).mean() * r1_every
        for prm, gr in zip(D.parameters(), torch.autograd.grad(loss, list(D.parameters()))):
            prm.grad = gr
        d_opt.step()
        fake = G(torch.randn(batch, latent, generator=z_rng))
        g_loss = F.softplus(-D(augment(fake, policy, aug_rng))).mean()
        for prm, gr in zip(G.parameters(), torch.autograd.grad(g_loss, list(G.parameters()))):
            prm.grad = gr
        g_opt.step()
        signs += torch.sign(real_logits.detach()).tolist()
        if (step + 1) % ada_every == 0:
            p = min(max(p + (0.01 if sum(signs) / len(signs) > 0.6 else -0.01), 0.0), 1.0)
            signs = []

        for a, b in ((state.generator, G), (state.discriminator, D)):
            for x, y in zip(a.parameters(), b.parameters()):
                assert torch.equal(x, y), f"diverged at step {step}"
        assert state.d_policy.current_p == p
    record_property("detail", f"{time.perf_counter() - t0:.0f} s")
    assert time.perf_counter() - t0 < 60


def test_criterion_03_loss_additivity(record_property):
    """Loss additivity: K heads minus K-1 heads equals the K-th head alone over 100 batches"""
    state = make_state()
    for mid in ("pool8", "conv_ms", "conv_a"):
        add_head(state, mid, p=0.5)
    worst = 0.0
    for i in range(100):
        real, fake = real_batch(4, 2 * i), real_batch(4, 2 * i + 1)
        side = "discriminator" if i % 2 == 0 else "generator"
        real = real if side == "discriminator" else None
        saved = _rng_states(state)
        with torch.no_grad():
            full = vision_aided_loss(state, real, fake, side)
            _restore(state, saved)
            last = state.vision.pop()
            state.selection.selected.pop()
            partial = vision_aided_loss(state, real, fake, side)
            state.vision.append(last)
            state.selection.selected.append(last.model_id)
            _restore(state, saved)
            alone = loss_terms(state, real, fake, side, names=[last.model_id])[last.model_id]["loss"]
        worst = max(worst, abs((full - partial - alone).item()))
    record_property("detail", f"max |delta| {worst:.1e}")
    assert worst < 1e-6


def test_criterion_04_selection_oracle(record_property):
    """Selection oracle: ranking recovers strong > medium > none, K-fixed picks the top two"""
    bank = separability_bank()
    hits = 0
    for seed in range(10):
        real, fake = shifted_images(500, 2 * seed, False), shifted_images(500, 2 * seed + 1, True)
        hits += [p.model_id for p in rank_models(bank, fake, real, seed=seed)] == ["strong", "medium", "none"]
    real, fake = shifted_images(500, 100, False), shifted_images(500, 101, True)
    record_property("detail", f"{hits}/10 seeds")
    assert hits >= 9
    assert k_fixed_select(bank, fake, real, K=2, seed=0) == ["strong", "medium"]
    assert set(SHIFTS) == {"strong", "medium", "none"}


def test_criterion_05_probe_calibration(record_property):
    """Probe calibration: chance on identical distributions, near 1 on point masses"""
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        accs.append(linear_probe(rng.normal(size=(300, 8)), rng.normal(size=(300, 8)), seed=seed).val_accuracy)
    separated = linear_probe(np.full((200, 2), 3.0), np.full((200, 2), -3.0), seed=0).val_accuracy
    record_property("detail", f"chance range [{min(accs):.3f}, {max(accs):.3f}], separated {separated:.3f}")
    assert all(0.43 <= a <= 0.57 for a in accs)
    assert separated >= 0.99


def test_criterion_06_fid_oracle():
    """FID oracle: closed forms, identity and symmetry"""
    e = np.eye(2)
    assert abs(fid(_stats([0, 0], e), _stats([1, 0], e)) - 1.0) < 1e-6
    assert abs(fid(_stats([0, 0], 4 * e), _stats([0, 0], e)) - 2.0) < 1e-6
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b = fit_gaussian(rng.normal(size=(40, 8))), fit_gaussian(rng.normal(size=(30, 8)) * 2 + 1)
        assert abs(fid(a, a)) < 1e-8
        assert abs(fid(a, b) - fid(b, a)) < 1e-8


def test_criterion_07_kid_oracle(record_property):
    """KID oracle: matches the double loop, unbiased on one distribution"""
    rng = np.random.default_rng(0)
    for n in (2, 4, 9, 16):
        x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) + 0.2
        assert abs(mmd2_unbiased(x, y) - _mmd_double_loop(x, y)) < 1e-9
    pool = rng.normal(size=(4000, 16))
    vals = kid_subsets(pool[:2000], pool[2000:], subset_size=100, n_subsets=200, seed=0)
    mean, se = float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
    record_property("detail", f"mean {mean:.2e}, 3 SE {3 * se:.2e}")
    assert abs(mean) < 3 * se
    x = rng.normal(size=(20, 4))
    assert abs(kid(x, x.copy(), subset_size=20, n_subsets=1)) < 1e-9


def test_criterion_08_precision_recall_limits():
    """Precision/recall: identical sets, far clusters, and an outlier against brute force"""
    rng = np.random.default_rng(0)
    real = rng.normal(size=(100, 5))
    assert precision_recall(real, real.copy(), 3) == (1.0, 1.0)
    assert precision_recall(real, real + 1e6, 3) == (0.0, 0.0)
    fake = np.vstack([real, np.full((1, 5), 50.0)])
    got = precision_recall(real, fake, 3)
    assert got == _brute_force_pr(real, fake, 3)
    assert got[0] == 100 / 101


def test_criterion_09_schedule_conformance(tmp_path, record_property):
    """Schedule: additions at the configured steps, restore before each, smoothing iff accuracy > 0.9"""
    t0 = time.perf_counter()
    t = Trainer(tiny_cfg(tmp_path / "run"), bank=tiny_bank(), dataset=two_mode_images(64, seed=0))
    t.run()
    elapsed = time.perf_counter() - t0
    events = read_jsonl(t.out / "events.jsonl")
    adds = [e for e in events if e["kind"] == "add_model"]
    assert [e["step"] for e in adds] == [0, 100, 150]
    for add in adds:
        at = [e for e in events if e["step"] == add["step"]]
        kinds = [e["kind"] for e in at]
        i = kinds.index("add_model")
        assert "snapshot" in kinds[:i] and kinds[i - 2:i] == ["restore", "probe"]
        probe = at[i - 1]["payload"]["ranking"]
        acc = {p["model_id"]: p["val_accuracy"] for p in probe}[add["payload"]["model_id"]]
        assert (add["payload"]["smoothing"] > 0) == (acc > 0.9)
    smoothing = {e["payload"]["model_id"]: e["payload"]["smoothing"] for e in adds}
    record_property("detail", f"{elapsed:.0f} s, smoothing {smoothing}")
    assert 0.0 in smoothing.values() and 0.1 in smoothing.values()
    assert elapsed < 30


def test_criterion_10_augmentation_contract():
    """Augmentation: p=0 identity, double flip identity, adapt direction and clamp, FD gradients"""
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 16, 16, generator=g) * 2 - 1
    assert torch.equal(augment(x, AugPolicy("D", current_p=0.0), g), x)
    flip = AugPolicy("D", current_p=1.0, ops=("xflip",))
    assert torch.equal(augment(augment(x, flip, g), flip, g), x)
    pol = AugPolicy("D", current_p=0.5, target=0.6, adjust_step=0.01)
    assert adapt(pol, torch.ones(8)).current_p > 0.5 > adapt(pol, -torch.ones(8)).current_p
    assert adapt(AugPolicy("D", current_p=1.0), torch.ones(4)).current_p == 1.0
    assert adapt(AugPolicy("D", current_p=0.0), -torch.ones(4)).current_p == 0.0
    xd = x.double()
    full = AugPolicy("D", current_p=0.7, ops=("xflip", "translation", "color", "cutout"))
    f = lambda t: (augment(t, full, torch.Generator().manual_seed(11)) ** 2).mean()
    xg = xd.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xg), xg)
    assert rel_err(grad, central_diff(f, xd.clone())) < 1e-3


def test_criterion_11_gradients(record_property):
    """Gradients: heads and preprocessing against central differences on 10 instances each"""
    specs = [FeatureExtractorSpec("s", 32, 3, [(3, 4, 4)]),
             FeatureExtractorSpec("m", 32, 3, [(2, 6, 6), (3, 4, 4), (5,)], head_kind="multi_scale")]
    worst = 0.0
    for spec in specs:
        for i in range(10):
            head = build_head(spec, init_seed=i, width=6).double()
            g = torch.Generator().manual_seed(100 + i)
            feats = [torch.randn(2, *s, generator=g, dtype=torch.float64) for s in spec.output_shapes]
            w = torch.randn(2, generator=g, dtype=torch.float64)
            for j in range(len(feats)):
                def f(t, j=j):
                    parts = list(feats)
                    parts[j] = t
                    return (head_forward(head, FeatureOutput(spec.model_id, parts, 2)).reduced * w).sum()

                xg = feats[j].clone().requires_grad_(True)
                (grad,) = torch.autograd.grad(f(xg), xg)
                worst = max(worst, rel_err(grad, central_diff(f, feats[j].clone())))
    pspec = FeatureExtractorSpec("p", 12, 3, [(3, 4, 4)], normalization=((0.5, 0.4, 0.3), (0.2, 0.25, 0.5)))
    for i in range(10):
        g = torch.Generator().manual_seed(i)
        size = (16, 24, 32)[i % 3]
        x = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1
        w = torch.randn(1, 3, 12, 12, generator=g, dtype=torch.float64)
        f = lambda t: (preprocess(t, pspec) * w).sum()
        xg = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(f(xg), xg)
        worst = max(worst, rel_err(grad, central_diff(f, x.clone())))
    record_property("detail", f"max rel err {worst:.1e}")
    assert worst < 1e-3


def _e2e_seed(seed: int, root: Path) -> tuple[float, float]:
    """K=0 baseline for the full budget, then the K=2 arm forked from its warm-up checkpoint."""
    cfg = parse_config(E2E_CONFIG, echo=False).replace(run={"seed": seed, "output_dir": str(root / "k2")})
    base = cfg.replace(selection={"k_max": 0}, schedule={"intervals": []}, run={"output_dir": str(root / "k0")})
    k0 = Trainer(base).run()
    warmup = root / "k0" / "checkpoints" / f"step_{cfg.schedule.warmup_steps:08d}"
    k2 = fork(warmup, cfg).run()
    # the divergence guard may end the K=2 arm before its second addition
    events = (root / "k2" / "events.jsonl").read_text()
    assert len(k2.state.selection.selected) == 2 or '"kind":"diverged"' in events
    return k0.report.fid, k2.report.fid


def test_criterion_12_end_to_end_smoke(tmp_path, record_property):
    """End-to-end smoke: median final FID over 5 seeds, K=2 no worse than K=0"""
    t0 = time.perf_counter()
    results = {seed: _e2e_seed(seed, tmp_path / f"seed{seed}") for seed in E2E_SEEDS}
    elapsed = time.perf_counter() - t0
    k0 = statistics.median(r[0] for r in results.values())
    k2 = statistics.median(r[1] for r in results.values())
    per_seed = ", ".join(f"{s}: {a:.3f}/{b:.3f}" for s, (a, b) in results.items())
    record_property("detail", f"median K0 {k0:.3f} vs K2 {k2:.3f}; per seed K0/K2 {per_seed}; {elapsed / 60:.0f} min")
    assert k2 <= k0
    assert elapsed < 2 * 3600


def test_criterion_13_determinism(tmp_path):
    """Determinism: identical config and seed give byte-identical event logs"""
    data = two_mode_images(64, seed=0)
    logs = []
    for name in ("a", "b"):
        t = Trainer(tiny_cfg(tmp_path / name), bank=tiny_bank(), dataset=data)
        t.run()
        logs.append((t.out / "events.jsonl").read_bytes())
    assert logs[0] == logs[1] and len(logs[0]) > 0
