"""Acceptance criteria C1 to C9. Each test records one PASS/FAIL line, shown in
the "acceptance criteria" section of the pytest summary.

The training criteria share cached session fixtures; the whole module takes
about 25 minutes on one core.
"""

import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import alfa.train as train_mod
from alfa import tensor as T
from alfa.augment import affine_transform, hed_jitter, hed_to_rgb, make_triplet_batch, pixelate, rgb_to_hed, AugmentSpec
from alfa.datasets import DomainDataset, batch_iter, lodo_split, synth_generate
from alfa.evaluation import accuracy, binary_auroc, macro_recall, normalized_cross_cov, pca_project
from alfa.losses import (
    COMPONENTS,
    LossWeights,
    alignment_from_rows,
    classification_loss,
    cov_loss,
    kl_divergence,
    mine_semi_hard,
    soft_class_label,
    soft_confusion_row,
    specific_loss,
    ssl_triplet_loss,
    total_loss,
)
from alfa.model import EncoderConfig, encode, init_params
from alfa.tensor import AdamState, Tensor
from alfa.train import ABLATION_MASKS, TrainConfig, accuracy_on, erm_baseline_run, first_order_meta_grad, mask_label, train_run
from criteria import record
from gradcases import loss_cases, op_cases

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
TARGETS = range(4)
# desk-scale schedule for the benchmark runs
BENCH = TrainConfig(iterations=600, lr=1e-3)
LONG_ITERATIONS = 1200


@pytest.fixture(scope="session")
def bench_data():
    return {s: synth_generate(400, seed=s) for s in SEEDS}


def _target_acc(ds, seed, target, run):
    split = lodo_split(ds, target, 0.2, seed)
    return accuracy_on(run(ds, split).params, ds, ds.domain_indices(target))


@pytest.fixture(scope="session")
def ablation_accs(bench_data):
    """mask label -> array (seed, target) of target-domain accuracy."""
    out = {}
    for mask in ABLATION_MASKS:
        cfg = replace(BENCH, mask=mask)
        acc = np.zeros((len(SEEDS), len(TARGETS)))
        for s in SEEDS:
            for t in TARGETS:
                acc[s, t] = _target_acc(bench_data[s], s, t, lambda d, sp: train_run(d, sp, replace(cfg, seed=s)))
        out[mask_label(mask)] = acc
    return out


@pytest.fixture(scope="session")
def erm_accs(bench_data):
    acc = np.zeros((len(SEEDS), len(TARGETS)))
    for s in SEEDS:
        for t in TARGETS:
            acc[s, t] = _target_acc(bench_data[s], s, t, lambda d, sp: erm_baseline_run(d, sp, replace(BENCH, seed=s)))
    return acc


# ----------------------------------------------------------------------- C1


def test_c1_gradient_fidelity():
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    for seed in range(100):
        for name, x, f in op_cases(seed) + loss_cases(seed):
            err = T.grad_check(f, x)
            if err > worst:
                worst, worst_name = err, f"{name} (seed {seed})"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record("C1", "gradient fidelity", ok, f"worst relative error {worst:.2e} at {worst_name}; {elapsed:.0f}s")
    assert ok


# ----------------------------------------------------------------------- C2


def _oracles():
    """(name, computed, expected, exact) for every hand or enumeration oracle."""
    out = []

    def add(name, computed, expected, exact=False):
        out.append((name, np.asarray(computed, dtype=np.float64), np.asarray(expected, dtype=np.float64), exact))

    add("frobenius [[3,4],[0,0]]", T.frobenius_norm(Tensor([[3.0, 4.0], [0.0, 0.0]])).item(), 5.0)
    x = Tensor([[3.0, 4.0]], requires_grad=True)
    T.backward(T.frobenius_norm(x))
    add("grad of frobenius", x.grad, [[0.6, 0.8]])
    x = Tensor([-1.0, 2.0], requires_grad=True)
    T.backward(T.mean(T.relu(x)))
    add("grad of mean relu", x.grad, [0.0, 0.5], exact=True)
    sq = np.random.default_rng(0).normal(size=(3, 3))
    add("grad_check sum of squares below 1e-6", T.grad_check(lambda t: T.sum(t * t), sq, eps=1e-5) < 1e-6, True, exact=True)
    add("grad_check alignment below 1e-5", max(T.grad_check(f, x0) for n, x0, f in loss_cases(0) if n.startswith("alignment")) < 1e-5, True, exact=True)

    p = {"p": Tensor([1.0], requires_grad=True)}
    adam_step_state = AdamState(lr=0.1)
    T.adam_step(p, {"p": np.array([1.0])}, adam_step_state)
    add("adam first step", p["p"].data[0], 1.0 - 0.1 * 1.0 / (1.0 + 1e-8))
    p = {"p": Tensor([2.0], requires_grad=True)}
    state = AdamState(lr=0.1)
    vals = [4.0]
    for _ in range(2):
        T.adam_step(p, {"p": 2 * p["p"].data}, state)
        vals.append(p["p"].data[0] ** 2)
    add("adam reduces p^2", vals[2] < vals[1] < vals[0], True, exact=True)

    gray = np.full((3, 4, 4), 0.5)
    add("hed jitter reproducible", hed_jitter(gray, 0.5, seed=11), hed_jitter(gray, 0.5, seed=11), exact=True)
    px = np.random.default_rng(1).uniform(0.01, 1.0, size=(3, 10, 10))
    add("rgb-hed round trip below 1e-6", np.abs(hed_to_rgb(rgb_to_hed(px)) - px).max() < 1e-6, True, exact=True)
    a, b, c, d = 0.1, 0.2, 0.3, 0.4
    add("quarter turn of 2x2", affine_transform(np.tile([[a, b], [c, d]], (3, 1, 1)), angle=90.0)[0], [[b, d], [a, c]])
    img = np.random.default_rng(5).uniform(size=(3, 8, 8))
    border = np.all(np.isclose(affine_transform(img, translate=(0.5, 0.0)), img[:, :, :1]), axis=(0, 1))
    add("half translation fills half the columns", border.sum() >= 4, True, exact=True)
    add("pixelate [[0,1],[0,1]]", pixelate(np.tile([[0.0, 1.0], [0.0, 1.0]], (3, 1, 1)), 2), np.full((3, 2, 2), 0.5))
    pool = np.random.default_rng(2).uniform(size=(5, 3, 6, 6))
    t1, t2 = make_triplet_batch(pool, AugmentSpec(), 6, seed=3), make_triplet_batch(pool, AugmentSpec(), 6, seed=3)
    add("triplet batch determinism", t1.positives, t2.positives, exact=True)

    d1, d2 = synth_generate(12, image_size=8, seed=5), synth_generate(12, image_size=8, seed=5)
    add("synth determinism", d1.images, d2.images, exact=True)
    d3 = synth_generate(21, image_size=8, seed=0, thetas=(0.0, 0.1, 0.2))
    split = lodo_split(d3, 0, 0.2, 0)
    gaps = [abs(np.sum(d3.y[split.val[k]] == c) - 0.2 * np.sum((d3.h == k) & (d3.y == c))) for k in split.sources for c in range(2)]
    add("val stratification within 1", max(gaps) <= 1, True, exact=True)
    dom = np.arange(300) % 3
    counts = {int(v) for bt in batch_iter(np.arange(300), 32, seed=0, domains=dom, n_batches=20) for v in np.bincount(dom[bt], minlength=3)}
    add("stratified batch counts in {10,11}", counts <= {10, 11}, True, exact=True)

    params = init_params(EncoderConfig(48, (8,), 4), 2, 3, seed=0)
    imgs = np.random.default_rng(4).uniform(size=(5, 3, 4, 4))
    before = encode(params, imgs)
    params.tensors["alpha.0.w"].data = params.tensors["alpha.0.w"].data + 0.5
    after = encode(params, imgs)
    add("alpha perturbation leaves beta", after.beta.data, before.beta.data, exact=True)
    add("alpha perturbation leaves gamma", after.gamma.data, before.gamma.data, exact=True)
    ln = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    add("layer norm [1,3]", np.abs(ln - [[-1.0, 1.0]]).max() < 1e-5, True, exact=True)

    add("KL([1,0] || [.5,.5])", kl_divergence([1.0, 0.0], [0.5, 0.5]).item(), np.log(2))
    rng = np.random.default_rng(0)
    add("KL nonnegative on 1000 pairs", all(kl_divergence(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))).item() >= 0 for _ in range(1000)), True, exact=True)
    add("triplet satisfied margin", ssl_triplet_loss(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]), Tensor([[2.0, 0.0]]), 1.5).item(), 0.0)
    add("triplet hand value", ssl_triplet_loss(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[1.2, 0.0]]), 1.5).item(), 1.3)
    line = np.array([[v, 0.0] for v in (0.0, 0.4, 0.5, 0.9, 3.0)])
    add("semi-hard pick", mine_semi_hard(line, [0, 0, 1, 2, 3], 0.7, pairs=[(0, 1)])[0, 2], 2, exact=True)
    line = np.array([[v, 0.0] for v in (0.0, 0.4, 0.2, 3.0, 5.0)])
    add("hardest fallback", mine_semi_hard(line, [0, 0, 1, 2, 3], 0.7, pairs=[(0, 1)])[0, 2], 2, exact=True)
    add("soft label normalized", soft_class_label(0, 3, 0.9), [1 / 1.9, 0.45 / 1.9, 0.45 / 1.9])
    head = init_params(EncoderConfig(8, (), 4), 2, 3, seed=0)
    z = Tensor(np.random.default_rng(1).normal(size=(4, 4)))
    row = soft_confusion_row(head, z, [0, 1, 0, 1], [0, 0, 1, 1], k=0, c=1, tau=1e6).data
    add("confusion row at tau=1e6 within 1e-5 of uniform", np.abs(row - 0.5).max() < 1e-5, True, exact=True)
    p_c = soft_class_label(0, 2)
    s1 = np.array([1.0, 0.0])
    aligned = alignment_from_rows(Tensor(np.stack([s1, p_c])), [(0, 0), (1, 0)], np.stack([p_c, soft_class_label(1, 2)])).item()
    kl_sp = np.log(1.0 / p_c[0])
    kl_ps = p_c[0] * np.log(p_c[0]) + p_c[1] * (np.log(p_c[1]) - np.log(1e-12))
    add("alignment six-term oracle", aligned, (2 * kl_sp + 2 * kl_ps) / 6)
    add("specific loss uniform over 4", specific_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item(), np.log(4))
    add("cov 1-d [1,-1]", cov_loss(Tensor([[1.0], [-1.0]]), Tensor([[1.0], [-1.0]])).item(), 2.0)
    add("classification uniform over 2", classification_loss(Tensor(np.zeros((2, 2))), [0, 1]).item(), np.log(2))
    comps = {c: Tensor([0.0]) for c in COMPONENTS}
    comps["l_ssl"] = Tensor([1.3])
    add("weighted total", total_loss(comps, LossWeights(a=(2, 0, 0, 0, 0, 0, 0)))[1].total, 2.6)

    w0 = {"w": np.array([1.0])}

    def half_square(om):
        return T.scale(T.sum(om["w"] * om["w"]), 0.5)

    loss, grad, tilde, _ = first_order_meta_grad(half_square, half_square, w0, 0.1)
    add("meta inner point", tilde["w"][0], 0.9)
    add("meta loss", loss, 0.405)
    add("meta gradient", grad["w"][0], 0.9)

    add("accuracy 75", accuracy([0, 1, 1, 0], [0, 1, 0, 0]), 75.0, exact=True)
    add("recall 75", macro_recall([0, 1, 1, 1], [0, 0, 1, 1]), 75.0, exact=True)
    add("recall constant predictor", macro_recall([1, 1, 1, 1], [0, 1, 0, 1]), 50.0, exact=True)
    add("AUROC hand case", binary_auroc([0.9, 0.4, 0.6, 0.1], [True, True, False, False]) * 100, 75.0, exact=True)
    pts = np.random.default_rng(0).normal(size=(12, 2)) * [3.0, 1.0]
    proj = pca_project(pts)
    dist = lambda q: np.linalg.norm(q[:, None] - q[None], axis=-1)  # noqa: E731
    add("PCA isometry within 1e-8", np.abs(dist(proj) - dist(pts)).max() < 1e-8, True, exact=True)
    return out


def test_c2_equation_oracles():
    start = time.perf_counter()
    failures = []
    for name, computed, expected, exact in _oracles():
        good = np.array_equal(computed, expected) if exact else np.allclose(computed, expected, rtol=0, atol=1e-9)
        if not good:
            failures.append(name)
    elapsed = time.perf_counter() - start
    n = len(_oracles())
    ok = not failures and elapsed < 60
    record("C2", "equation oracles", ok, f"{n - len(failures)}/{n} oracles hold; {elapsed:.0f}s" + (f"; failed: {failures}" if failures else ""))
    assert ok


# ----------------------------------------------------------------------- C3


def test_c3_meta_step_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        w, lr = rng.uniform(-3, 3), rng.uniform(0, 1)
        a, c, b, d = rng.uniform(0.1, 3), rng.uniform(-2, 2), rng.uniform(0.1, 3), rng.uniform(-2, 2)

        def quad(scale, centre):
            return lambda om: T.scale(T.sum((om["w"] - Tensor([centre])) * (om["w"] - Tensor([centre]))), 0.5 * scale)

        loss, grad, tilde, _ = first_order_meta_grad(quad(a, c), quad(b, d), {"w": np.array([w])}, lr)
        # explicit two steps: inner gradient step, then the outer objective at the adapted point
        w_t = w - lr * a * (w - c)
        worst = max(worst, abs(tilde["w"][0] - w_t), abs(loss - 0.5 * b * (w_t - d) ** 2), abs(grad["w"][0] - b * (w_t - d)))
    ok = worst < 1e-10
    record("C3", "meta-step oracle", ok, f"max deviation {worst:.1e} over 100 draws")
    assert ok


# ----------------------------------------------------------------------- C4


def test_c4_lodo_trend(ablation_accs, erm_accs):
    alfa = ablation_accs["abg"]
    hardest = alfa[:, 3].mean() - erm_accs[:, 3].mean()
    ok = alfa.mean() >= erm_accs.mean() and hardest >= 1.0
    record(
        "C4",
        "synthetic LODO trend",
        ok,
        f"mean ALFA {alfa.mean():.2f} vs ERM {erm_accs.mean():.2f}; theta=0.5 gap {hardest:+.2f}",
    )
    assert ok


# ----------------------------------------------------------------------- C5


def test_c5_ablation_trend(ablation_accs):
    means = {k: v.mean() for k, v in ablation_accs.items()}
    full = means["abg"]
    singles = [means[k] for k in ("a--", "-b-", "--g")]
    pairs = np.mean([means[k] for k in ("ab-", "a-g", "-bg")])
    ok = full >= max(singles) and full >= pairs
    table = ", ".join(f"{k} {v:.2f}" for k, v in means.items())
    record("C5", "ablation trend", ok, f"{table}; pair mean {pairs:.2f}")
    assert ok


# ----------------------------------------------------------------------- C6


NO_COV = LossWeights(a=(1, 1, 1, 0, 0, 0, 1))


@pytest.fixture(scope="session")
def long_runs(bench_data):
    """seed -> (run with cov losses, run without), trained on target 3."""
    out = {}
    for s in SEEDS:
        ds = bench_data[s]
        split = lodo_split(ds, 3, 0.2, s)
        cfg = replace(BENCH, iterations=LONG_ITERATIONS, seed=s)
        out[s] = (train_run(ds, split, cfg), train_run(ds, split, replace(cfg, weights=NO_COV)), split)
    return out


def _alpha_beta_stat(params, ds, idx):
    f = encode(params.detached(), ds.images[idx])
    return normalized_cross_cov(f.alpha.data, f.beta.data)


def test_c6_decorrelation(bench_data, long_runs):
    with_cov, without = [], []
    for s, (r_cov, r_plain, split) in long_runs.items():
        idx = split.val_indices()
        with_cov.append(_alpha_beta_stat(r_cov.final_params, bench_data[s], idx))
        without.append(_alpha_beta_stat(r_plain.final_params, bench_data[s], idx))
    m_cov, m_plain = np.median(with_cov), np.median(without)
    ok = m_cov < 0.1 and m_cov < m_plain
    record("C6", "alpha-beta decorrelation", ok, f"median statistic {m_cov:.3f} with cov losses vs {m_plain:.3f} without (threshold 0.1)")
    assert ok


# ----------------------------------------------------------------------- C7


def test_c7_frozen_contract(bench_data, monkeypatch):
    ds = bench_data[0]
    split = lodo_split(ds, 3, 0.2, 0)
    checked, changed = [], []
    original = train_mod.phase2_meta_step

    def guarded(params, *args, **kwargs):
        frozen = params.group("alpha", "beta", "head_beta", "head_gamma")
        before = {k: v.data.copy() for k, v in frozen.items()}
        result = original(params, *args, **kwargs)
        checked.append(1)
        changed.extend(k for k, v in frozen.items() if not np.array_equal(before[k], v.data))
        return result

    monkeypatch.setattr(train_mod, "phase2_meta_step", guarded)
    run = train_run(ds, split, replace(BENCH, iterations=300, seed=0))
    ok = len(checked) == 300 and not changed and run.frozen_violations == 0
    record("C7", "frozen-phase contract", ok, f"{len(checked)} meta steps checked bitwise, {len(changed)} frozen tensors changed")
    assert ok


# ----------------------------------------------------------------------- C8


def test_c8_cli_determinism(tmp_path):
    args = ["--n-per-domain", "40", "--image-size", "8", "--iterations", "20", "--hidden", "16", "--embed-dim", "8", "--seed", "3"]
    for d in ("a", "b"):
        cmd = [sys.executable, "-m", "alfa", "lodo", "--out", str(tmp_path / d), *args]
        subprocess.run(cmd, check=True, capture_output=True)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = len(files) >= 9 and not differing
    record("C8", "lodo determinism", ok, f"{len(files)} CSV files compared, {len(differing)} differ")
    assert ok


# ----------------------------------------------------------------------- C9


def test_c9_convergence(long_runs):
    run = long_runs[0][0]
    lines, ok = [], True
    for comp in COMPONENTS:
        series = np.array([r.components[comp] for r in run.losses if r.components[comp] is not None])
        if len(series) == 0:
            continue
        lead, trail = series[:500].mean(), series[-500:].mean()
        good = trail < lead
        ok &= good
        lines.append(f"{comp} {lead:.3g}->{trail:.3g} {'pass' if good else 'fail'}")
    record("C9", "convergence", ok, f"{len(run.losses)} steps; " + ", ".join(lines))
    assert ok
