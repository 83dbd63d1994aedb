"""Acceptance gate: one test per criterion, one printed line per criterion.

Cheap analytic criteria come first; the smoke-training criteria at the end
dominate the runtime (tens of minutes on one CPU core, well inside their
stated budgets).
"""

import os
import time

import numpy as np

import conftest
from spngan import metrics, spn
from spngan.cli import main as cli_main
from spngan.data import make_shapes_dataset
from spngan.gradcheck import run_spn_gradcheck
from spngan.metrics import (GaussianSummary, collect_masks, frechet_distance,
                            inception_score, mask_spatial_variance,
                            summarize_features)
from spngan.models import (DiscriminatorSpec, Generator, GeneratorSpec,
                           count_flops, count_parameters)
from spngan.spectral import power_iteration
from spngan.training import TrainConfig, Trainer, logs_match

SMOKE_OVERRIDES = [
    "--set", "model.gen_width=16", "--set", "model.disc_width=16",
    "--set", "model.z_dim=32", "--set", "data.n=5000",
    "--set", "train.batch_d=8", "--set", "train.batch_g=16",
]


def report(num, name, ok, detail):
    line = "%s criterion %2d %-18s %s" % ("PASS" if ok else "FAIL",
                                          num, name, detail)
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def gen32(norm):
    return Generator(GeneratorSpec(resolution=32, norm=norm),
                     np.random.default_rng(0))


def test_criterion_01_parameter_audit():
    t0 = time.perf_counter()
    p_bn = count_parameters(gen32("bn"))
    p_spn = count_parameters(gen32("spn"))
    elapsed = time.perf_counter() - t0
    delta = p_spn - p_bn
    ok = (abs(p_bn - 4.07e6) <= 0.01 * 4.07e6
          and abs(p_spn - 4.52e6) <= 0.01 * 4.52e6
          and delta == 453_120
          and elapsed < 1.0)
    report(1, "parameter audit",
           ok, "bn %d, spn %d, delta %d (want 453120), %.2fs"
           % (p_bn, p_spn, delta, elapsed))


def test_criterion_02_flop_audit():
    t0 = time.perf_counter()
    deltas = {c: count_flops(gen32("spn"), c) - count_flops(gen32("bn"), c)
              for c in ("mac1", "mac2")}
    elapsed = time.perf_counter() - t0
    ok = all(0.10e9 <= d <= 0.26e9 for d in deltas.values()) and elapsed < 1.0
    report(2, "flop audit",
           ok, "delta mac1 %.4fB, mac2 %.4fB (want within [0.10B, 0.26B]), %.2fs"
           % (deltas["mac1"] / 1e9, deltas["mac2"] / 1e9, elapsed))


def test_criterion_03_gradient_suite():
    t0 = time.perf_counter()
    results = run_spn_gradcheck(shape=(2, 8, 8, 4), seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(err for _, err, _ in results)
    ok = worst < 1e-4 and elapsed < 60.0
    report(3, "gradient suite",
           ok, "%d checks, worst rel err %.2e (tol 1e-4), %.1fs (budget 60s)"
           % (len(results), worst, elapsed))


def test_criterion_04_reduction_suite():
    rng = np.random.default_rng(1)
    worst_identity = 0.0
    for shape in [(2, 6, 6, 4), (3, 8, 8, 8), (1, 4, 4, 16)]:
        x = rng.standard_normal(shape).astype(np.float32)
        params, stats = spn.init_spn_params(shape[3],
                                            rng=np.random.default_rng(7),
                                            dtype=np.float32)
        y, _, _ = spn.spn_forward(x, params, stats, train=True)
        xhat, _, _ = spn.channelwise_normalize(x, stats.main, train=True)
        worst_identity = max(worst_identity, float(np.abs(y - xhat).max()))

    # constant mask via zero projection, k=1 banks: a per-channel affine
    c = 6
    params, stats = spn.init_spn_params(c, kernel_size=1,
                                        rng=np.random.default_rng(8),
                                        dtype=np.float64)
    params.proj_w[...] = 0.0
    params.norm_shift[...] = rng.standard_normal(c)
    for bank in (params.k_gamma_fg, params.k_gamma_bg,
                 params.k_beta_fg, params.k_beta_bg):
        bank[...] = rng.standard_normal(bank.shape)
    x = rng.standard_normal((2, 5, 5, c))
    y, _, _ = spn.spn_forward(x, params, stats, train=True)
    xhat, _, _ = spn.channelwise_normalize(x, stats.main, train=True)
    m = spn.sigmoid(params.norm_shift)  # zero-variance mask branch logits
    gamma = m * params.k_gamma_fg[0, 0] + (1 - m) * params.k_gamma_bg[0, 0]
    beta = m * params.k_beta_fg[0, 0] + (1 - m) * params.k_beta_bg[0, 0]
    affine_err = float(np.abs(y - (gamma * xhat + beta)).max())

    ok = worst_identity <= 1e-6 and affine_err <= 1e-10
    report(4, "reduction suite",
           ok, "identity-at-init max dev %.1e (tol 1e-6), "
           "constant-mask affine dev %.1e (tol 1e-10)"
           % (worst_identity, affine_err))


def test_criterion_05_mask_invariants():
    rng = np.random.default_rng(2)
    checked = 0
    ok_range = True
    for _ in range(1000):
        b = int(rng.integers(1, 4))
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        c = int(rng.integers(1, 9))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        x = (rng.standard_normal((b, h, w, c)) * 3).astype(dtype)
        params, stats = spn.init_spn_params(c, rng=rng, dtype=dtype)
        params.proj_w[...] += (0.5 * rng.standard_normal(params.proj_w.shape)
                               ).astype(dtype)
        params.norm_shift[...] += rng.standard_normal(c).astype(dtype)
        m, _, _ = spn.build_self_latent_mask(x, params, stats.mask, train=True)
        minv = spn.invert_mask(m)
        if not (m.min() > 0.0 and m.max() < 1.0
                and np.array_equal(m + minv, np.ones_like(m))):
            ok_range = False
            break
        checked += 1

    # depthwise affine estimation: each mask channel drives only its own
    # gamma/beta channel
    c = 8
    params, _ = spn.init_spn_params(c, rng=np.random.default_rng(3),
                                    dtype=np.float64)
    for bank in (params.k_gamma_fg, params.k_gamma_bg,
                 params.k_beta_fg, params.k_beta_bg):
        bank[...] = np.random.default_rng(4).standard_normal(bank.shape)
    base = np.random.default_rng(5).uniform(0.2, 0.8, (2, 6, 6, c))
    g0, b0, _ = spn.estimate_affine_field(base, spn.invert_mask(base), params)
    independent = True
    for ch in range(c):
        bumped = base.copy()
        bumped[:, :, :, ch] = np.clip(bumped[:, :, :, ch] + 0.05, 0.01, 0.99)
        g1, b1, _ = spn.estimate_affine_field(bumped, spn.invert_mask(bumped),
                                              params)
        touched = {i for i in range(c)
                   if np.any(g1[..., i] != g0[..., i])
                   or np.any(b1[..., i] != b0[..., i])}
        if touched != {ch}:
            independent = False
            break
    ok = ok_range and checked == 1000 and independent
    report(5, "mask invariants",
           ok, "%d/1000 forwards in (0,1) with exact complement, "
           "channel independence on 8/8 channels" % checked)


def test_criterion_06_metric_oracles():
    uni = frechet_distance(
        GaussianSummary(np.array([0.0]), np.array([[1.0]]), 2),
        GaussianSummary(np.array([1.0]), np.array([[4.0]]), 2))
    uni_err = abs(uni - 2.0)
    s = summarize_features(np.random.default_rng(6).standard_normal((50, 5)))
    self_dist = frechet_distance(s, s)
    is_uniform, _ = inception_score(np.full((30, 7), 1.0 / 7), splits=3)
    k = 16
    is_onehot, _ = inception_score(np.eye(k), splits=1)
    ok = (uni_err <= 1e-8 and self_dist <= 1e-8
          and abs(is_uniform - 1.0) <= 1e-10 and abs(is_onehot - k) <= 1e-10)
    report(6, "metric oracles",
           ok, "univariate err %.1e, self distance %.1e, IS uniform %.12f, "
           "IS one-hot %.8f (K=%d)" % (uni_err, self_dist, is_uniform,
                                       is_onehot, k))


def test_criterion_07_spectral_norm():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        rows = int(rng.integers(2, 65))
        cols = int(rng.integers(2, 65))
        r = min(rows, cols)
        # random orthogonal factors with a fixed spectral gap so 50 power
        # iterations provably converge: (sigma2/sigma1)^100 < 1e-9
        sv = np.empty(r)
        sv[0] = rng.uniform(1.0, 3.0)
        if r > 1:
            sv[1:] = rng.uniform(0.05, 0.8, r - 1) * sv[0]
            sv[1:] = np.sort(sv[1:])[::-1]
        qa, _ = np.linalg.qr(rng.standard_normal((rows, r)))
        qb, _ = np.linalg.qr(rng.standard_normal((cols, r)))
        w = (qa * sv) @ qb.T
        u = rng.standard_normal(rows)
        _, _, sigma = power_iteration(w, u, iters=50)
        true = np.linalg.svd(w, compute_uv=False)[0]
        worst = max(worst, abs(float(sigma) - float(true)))
    ok = worst <= 1e-6
    report(7, "spectral norm",
           ok, "100 matrices up to 64x64, worst |sigma_hat - sigma_1| %.2e "
           "(tol 1e-6)" % worst)


def _smoke_trainer(seed, total_iters):
    ds = make_shapes_dataset(n=5000, size=32, seed=0)
    gs = GeneratorSpec(resolution=32, norm="spn", base_width=16, z_dim=32)
    dsc = DiscriminatorSpec(resolution=32, base_width=16)
    cfg = TrainConfig(loss="hinge", lr_g=2e-4, lr_d=2e-4, n_dis=1,
                      batch_d=8, batch_g=16, total_iters=total_iters,
                      seed=seed, log_every=50)
    return Trainer(ds, gs, dsc, cfg)


def test_criterion_08_smoke_training():
    t0 = time.perf_counter()
    variances = []
    finite = True
    for seed in (0, 1, 2):
        trainer = _smoke_trainer(seed, total_iters=5000)
        rows = trainer.run()
        finite = finite and all(np.isfinite(r["d_loss"]) and
                                np.isfinite(r["g_loss"]) for r in rows)
        z = np.random.default_rng(100 + seed).standard_normal((16, 32))
        masks = collect_masks(trainer.gen, z.astype(np.float32), train=False)
        variances.append(mask_spatial_variance(masks))
    elapsed = time.perf_counter() - t0
    ok = finite and all(v > 1e-3 for v in variances) and elapsed < 4 * 3600
    report(8, "smoke training",
           ok, "3 seeds x 5000 iters, losses finite %s, mask variance %s "
           "(floor 1e-3), %.1f min (budget 240 min)"
           % (finite, ["%.4f" % v for v in variances], elapsed / 60))


def test_criterion_09_loss_sweep(tmp_path):
    lines = ["out_dir = %s" % (tmp_path / "sweep"),
             "model.gen_width = 16", "model.disc_width = 16",
             "model.z_dim = 32", "data.n = 5000",
             "train.batch_d = 8", "train.batch_g = 16",
             "train.total_iters = 1000", "train.log_every = 100",
             "sweep = hinge_bn, hinge_spn, ce_bn, ce_spn, lsgan_bn, lsgan_spn"]
    for loss in ("hinge", "ce", "lsgan"):
        for norm in ("bn", "spn"):
            lines.append("%s_%s.train.loss = %s" % (loss, norm, loss))
            lines.append("%s_%s.model.norm = %s" % (loss, norm, norm))
    cfg_path = tmp_path / "sweep.cfg"
    cfg_path.write_text("\n".join(lines) + "\n")
    code = cli_main(["ablate", str(cfg_path)])
    finite = code == 0
    seen = 0
    for loss in ("hinge", "ce", "lsgan"):
        for norm in ("bn", "spn"):
            log = tmp_path / "sweep" / ("%s_%s" % (loss, norm)) / "metrics.csv"
            if not log.exists():
                finite = False
                continue
            body = log.read_text().strip().splitlines()[1:]
            values = [float(v) for row in body for v in row.split(",")[1:5]]
            finite = finite and all(np.isfinite(values).tolist()) and len(body) > 0
            seen += 1
    ok = finite and seen == 6
    report(9, "loss sweep",
           ok, "{hinge,ce,lsgan} x {bn,spn} at 1000 iters, exit %d, "
           "%d/6 finite logs" % (code, seen))


def test_criterion_10_determinism(tmp_path):
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli_main(["train"] + SMOKE_OVERRIDES + [
            "--set", "out_dir=%s" % out, "--set", "seed=12",
            "--set", "train.total_iters=200", "--set", "train.log_every=10"])
        assert code == 0
        logs.append((out / "metrics.csv").read_text())
    same = logs_match(logs[0], logs[1])
    rows = len(logs[0].strip().splitlines()) - 1
    report(10, "determinism",
           same, "two seed-identical 200-iter runs, %d logged rows identical "
           "up to wall_time" % rows)
