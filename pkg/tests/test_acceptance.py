"""Acceptance suite: one test per criterion, numbered to match the project's
acceptance checklist. Each test prints one ``ACCEPTANCE n: ...`` line with the
measured values next to the pinned bound.

The desk-scale criteria (1-4, 8) share one set of chains: three seed
replicates of a 3-iteration chain for each origin kind (standard and
adversarially trained), at extraction count 20k — the CPU-only allowance,
with the matching relaxed bound M1 >= 93. This module is the expensive part
of the suite (several CPU-hours); everything else in tests/ runs in minutes.
"""

import dataclasses
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dfmkit.attacks import AttackConfig, pgd_attack
from dfmkit.chain import ChainConfig, config_from_profile, cross_eval, run_chain
from dfmkit.data import load_extracted
from dfmkit.extraction import PgdConfig, extract_batch
from dfmkit.models import ModelSpec, build_model, input_gradient, load_checkpoint
from dfmkit.training import TrainConfig
from dfmkit.vlogits import VirtualLogitConfig, non_top_means, sample_virtual_logits

SEEDS = (0, 1, 2)
COUNT = 20_000  # CPU-only allowance; bound on M1 relaxed to 93.0 accordingly


def _line(num: int, text: str) -> None:
    print(f"ACCEPTANCE {num}: {text}")


def desk_config(seed: int, robust: bool) -> ChainConfig:
    return ChainConfig(
        dataset="mnist",
        arch="lenet",
        substitute="uniform-noise",
        robust_origin=robust,
        iterations=3,
        count=COUNT,
        # 150 steps at 0.25 keeps >=99.5% of samples on their designated class
        # across seeds; 100 steps at 0.5 overshoots and leaves ~1% astray
        pgd=PgdConfig(steps=150, step_size=0.25),
        # adversarial training wants a gentler lr and a few more epochs to
        # absorb the epsilon ramp; standard training converges faster and hotter
        origin_train=(TrainConfig(epochs=24, lr=0.02, loss_kind="cross_entropy")
                      if robust else
                      TrainConfig(epochs=20, lr=0.05, loss_kind="cross_entropy")),
        chain_train=TrainConfig(epochs=30, lr=0.01, loss_kind="logit_l2"),
        adv_attack=AttackConfig(epsilon=2.0, steps=7),
        eps_grid=(0.0, 2.0),
        attack_steps=20,
        seed=seed,
        n_train=20_000,
        n_val=3_000,
        eval_max_samples=2_000,
    )


@pytest.fixture(scope="session")
def desk_chains(tmp_path_factory):
    """{(robust, seed): (ChainReport, out_dir)} for all six desk chains."""
    root = tmp_path_factory.mktemp("desk")
    chains = {}
    for robust in (False, True):
        for seed in SEEDS:
            out = root / f"{'robust' if robust else 'standard'}-s{seed}"
            chains[(robust, seed)] = (run_chain(desk_config(seed, robust), out), out)
    return chains


def _clean(report, i):
    return report.entries[i].clean_accuracy


def _acc_at_eps(report, i, eps):
    return report.entries[i].eval_report["accuracy_by_eps"][str(float(eps))]


# ---------------------------------------------------------------------------
# 1. Desk-scale chain accuracy
# ---------------------------------------------------------------------------


def test_criterion_01_desk_chain_accuracy(desk_chains):
    report, _ = desk_chains[(False, 0)]
    m0, m1, m2 = (_clean(report, i) for i in range(3))
    _line(1, f"desk chain M0={m0:.2f}% (>=99.0), M1={m1:.2f}% (>=93.0), "
             f"M2={m2:.2f}% (>=92.0) at count {COUNT}")
    assert m0 >= 99.0
    assert m1 >= 93.0
    assert m2 >= 92.0


def test_desk_scale_holdout_loss_reduction(desk_chains):
    """Logit-matching trainer reduces the held-out matching loss by >=90%
    versus the freshly initialized model (asserted here at desk scale; the
    unit suite checks a looser bound at its reduced sample count)."""
    import csv

    from dfmkit.chain import stage_seed
    from dfmkit.training import HOLDOUT_FRACTION, _mean_loss

    _, out = desk_chains[(False, 0)]
    d1 = load_extracted(out / "d1")
    n = d1.images.shape[0]
    n_holdout = max(1, int(n * HOLDOUT_FRACTION))
    hold_x = torch.as_tensor(d1.images[n - n_holdout:])
    hold_z = torch.as_tensor(d1.logits[n - n_holdout:])

    init = build_model(ModelSpec("lenet", (1, 28, 28), 10),
                       init_seed=stage_seed(0, "train-1"))
    at_init = _mean_loss(init.model, hold_x, hold_z, "logit_l2")
    with open(out / "m1" / "metrics.csv", newline="") as fh:
        final = float(list(csv.DictReader(fh))[-1]["holdout_loss"])
    print(f"holdout matching loss: {at_init:.3f} at init -> {final:.3f} "
          f"({100 * (1 - final / at_init):.1f}% reduction, need >=90%)")
    assert final <= 0.1 * at_init


# ---------------------------------------------------------------------------
# 2. Robust-retention at M3 (2 of 3 seed replicates)
# ---------------------------------------------------------------------------


def test_criterion_02_robust_retention(desk_chains):
    held = []
    pairs = []
    for seed in SEEDS:
        rob = _clean(desk_chains[(True, seed)][0], 3)
        non = _clean(desk_chains[(False, seed)][0], 3)
        pairs.append(f"seed {seed}: robust M3 {rob:.2f}% vs standard M3 {non:.2f}%")
        held.append(rob >= non)
    _line(2, "; ".join(pairs) + f" -> holds on {sum(held)}/3 (need >=2)")
    assert sum(held) >= 2


# ---------------------------------------------------------------------------
# 3. Source-consistency of every extracted dataset
# ---------------------------------------------------------------------------


def _replay_designated(manifest: dict, num_classes: int) -> np.ndarray:
    v = manifest["vlogit"]
    vcfg = VirtualLogitConfig(
        num_classes=num_classes, top_mean=v["top_mean"], top_std=v["top_std"],
        others_lo=v["lo"], others_hi=v["hi"], others_std=v["others_std"],
    )
    rng = np.random.default_rng(manifest["seed"])
    out, done = [], 0
    while done < manifest["count"]:
        n = min(256, manifest["count"] - done)  # extraction batch size
        _, designated = sample_virtual_logits(vcfg, n, rng)
        out.append(designated)
        done += n
    return np.concatenate(out)


def test_criterion_03_source_consistency(desk_chains):
    from dfmkit.models import forward_logits

    worst_src = 100.0
    worst_des = {False: 100.0, True: 100.0}
    for (robust, seed), (report, out) in desk_chains.items():
        for i in (1, 2, 3):
            d = load_extracted(out / f"d{i}")
            assert d.manifest["source_checkpoint_sha256"] == report.entries[i - 1].checkpoint_digest
            labels = d.logits.argmax(axis=1)
            source = load_checkpoint(out / f"m{i - 1}")
            preds = forward_logits(source, d.images).argmax(axis=1)
            worst_src = min(worst_src, 100.0 * float((preds == labels).mean()))
            # stricter than the criterion: the argmax should also be the
            # *designated* virtual class the sampler drew for each image
            designated = _replay_designated(d.manifest, d.logits.shape[1])
            agree = 100.0 * float((labels == designated).mean())
            worst_des[robust] = min(worst_des[robust], agree)
    _line(3, f"source-model agreement >= {worst_src:.2f}% across 18 datasets (bound 99.5); "
             f"designated-class agreement >= {worst_des[False]:.2f}% (standard sources, "
             f"bound 99.5) / >= {worst_des[True]:.2f}% (robust sources, reported)")
    assert worst_src >= 99.5
    assert worst_des[False] >= 99.5


# ---------------------------------------------------------------------------
# 4. Robustness bench calibration at eps=2
# ---------------------------------------------------------------------------


def test_criterion_04_robustness_calibration(desk_chains):
    non = _acc_at_eps(desk_chains[(False, 0)][0], 0, 2.0)
    rob = _acc_at_eps(desk_chains[(True, 0)][0], 0, 2.0)
    _line(4, f"M0 accuracy at eps=2: standard {non:.2f}% (<=15), robust {rob:.2f}% (>=35)")
    assert non <= 15.0
    assert rob >= 35.0


# ---------------------------------------------------------------------------
# 5. Gradient correctness against central finite differences
# ---------------------------------------------------------------------------


def test_criterion_05_gradient_finite_differences():
    import copy

    spec = ModelSpec("tinyconv", (1, 8, 8), 10)
    ckpt = build_model(spec, init_seed=3)
    assert ckpt.param_count() <= 10_000
    model64 = copy.deepcopy(ckpt.model).double()
    rng = np.random.default_rng(17)
    # h small enough that no perturbed element crosses a ReLU kink (central
    # differences are wrong across kinks regardless of h); 64-bit arithmetic
    # keeps the roundoff floor orders below the 1e-4 bound
    h, worst = 1e-5, 0.0
    for probe in range(20):
        x = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
        if probe % 2 == 0:
            loss = ("logit_l2", rng.normal(size=(1, 10)))
        else:
            loss = ("cross_entropy", np.array([probe % 10]))
        g = input_gradient(ckpt, x, loss, float64=True)

        def scalar(v):
            with torch.no_grad():
                z = model64(torch.as_tensor(v, dtype=torch.float64))
            if loss[0] == "logit_l2":
                return float(((z - torch.as_tensor(loss[1])) ** 2).sum())
            return float(torch.nn.functional.cross_entropy(
                z, torch.as_tensor(loss[1]), reduction="sum"))

        fd = np.zeros_like(g)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = (scalar(xp) - scalar(xm)) / (2 * h)
        denom = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(g - fd).max() / denom))
    _line(5, f"max relative gradient error over 20 probes: {worst:.2e} (< 1e-4)")
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# 6. Projection invariants under randomized configs
# ---------------------------------------------------------------------------


_SPEC6 = ModelSpec("tinyconv", (1, 8, 8), 10)
_CKPT6 = build_model(_SPEC6, init_seed=9)


@settings(max_examples=25, deadline=None)
@given(
    epsilon=st.floats(0.05, 5.0),
    steps=st.integers(1, 25),
    step_size=st.floats(0.01, 2.0),
    seed=st.integers(0, 2**16),
)
def test_criterion_06_projection_invariants(epsilon, steps, step_size, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(6, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 10, size=6)
    z = rng.normal(0, 3, size=(6, 10)).astype(np.float32)

    adv = pgd_attack(_CKPT6, x, y, epsilon=epsilon, steps=steps)
    cfg = PgdConfig(steps=steps, step_size=step_size, epsilon=epsilon)
    ext = extract_batch(_CKPT6, x, z, cfg)
    for out in (adv, ext):
        delta = (out - x).reshape(6, -1)
        assert np.all(np.linalg.norm(delta, axis=1) <= epsilon + 1e-5)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_criterion_06_report():
    _line(6, "per-sample ||delta||_2 <= eps + 1e-5 and outputs in [0,1] over "
             "25 randomized attack/extraction configs")


# ---------------------------------------------------------------------------
# 7. Virtual-logit sampler statistics
# ---------------------------------------------------------------------------


def test_criterion_07_sampler_statistics():
    cfg = VirtualLogitConfig(num_classes=10)
    rng = np.random.default_rng(123)
    z, designated = sample_virtual_logits(cfg, 10_000, rng)
    tops = z[np.arange(10_000), designated]
    grid_ok = np.array_equal(non_top_means(cfg), np.linspace(-3.0, 3.0, 9))
    counts = np.bincount(designated, minlength=10)
    p = stats.chisquare(counts).pvalue
    _line(7, f"top mean {tops.mean():.3f} (in [19.5,20.5]), std {tops.std():.3f} "
             f"(in [1.7,2.3]), grid exact: {grid_ok}, uniformity p={p:.3f} (>0.01)")
    assert 19.5 <= tops.mean() <= 20.5
    assert 1.7 <= tops.std() <= 2.3
    assert grid_ok
    assert p > 0.01


# ---------------------------------------------------------------------------
# 8. Cross-eval non-triviality between independently seeded models
# ---------------------------------------------------------------------------


def test_criterion_08_cross_eval_nontrivial(desk_chains):
    _, out_a = desk_chains[(False, 0)]
    _, out_b = desk_chains[(False, 1)]
    d1 = load_extracted(out_a / "d1")
    model_a = load_checkpoint(out_a / "m0")
    model_b = load_checkpoint(out_b / "m0")
    matrix = cross_eval([("d1", d1)], [("A", model_a), ("A'", model_b)])
    self_acc, other = matrix["d1"]["A"], matrix["d1"]["A'"]
    _line(8, f"extracted-from-A: self accuracy {self_acc:.2f}% (>=99.5), "
             f"on A' {other:.2f}% (in (15, self))")
    assert self_acc >= 99.5
    assert 15.0 < other < self_acc


# ---------------------------------------------------------------------------
# 9. Byte-identical determinism of containers and report CSVs
# ---------------------------------------------------------------------------


def test_criterion_09_determinism(tmp_path):
    cfg = dataclasses.replace(
        desk_config(5, robust=False),
        iterations=1, count=256, n_train=800, n_val=200, eval_max_samples=100,
        pgd=PgdConfig(steps=20, step_size=0.5),
        origin_train=TrainConfig(epochs=4, lr=0.02, batch_size=64, loss_kind="cross_entropy"),
        chain_train=TrainConfig(epochs=4, lr=0.02, batch_size=64, loss_kind="logit_l2"),
    )
    run_chain(cfg, tmp_path / "a")
    torch.manual_seed(31337)  # ambient RNG state must not leak in
    np.random.seed(31337)
    run_chain(cfg, tmp_path / "b")
    compared = [
        "d1/images.dfm", "d1/logits.dfm", "report.csv",
        "m0/robustness.csv", "m1/robustness.csv", "m0/metrics.csv", "m1/metrics.csv",
    ]
    for rel in compared:
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"
    _line(9, f"{len(compared)} container/CSV artifacts byte-identical across reruns")


# ---------------------------------------------------------------------------
# 10. Paper-profile configs exist; smoke run completes
# ---------------------------------------------------------------------------


def test_criterion_10_paper_profile_smoke(tmp_path):
    full = config_from_profile("paper")
    assert (full.dataset, full.arch) == ("cifar10", "vgg8")
    assert full.count == 500_000 and full.iterations == 5

    # smoke run: 1 iteration over 1k images; sizes/steps cut to CPU scale
    cfg = config_from_profile(
        "paper", count=1_000, iterations=1, n_train=1_200, n_val=300,
        eval_max_samples=100, seed=0,
        origin_train=TrainConfig(epochs=2, lr=0.05, loss_kind="cross_entropy"),
        chain_train=TrainConfig(epochs=2, lr=0.01, loss_kind="logit_l2"),
        pgd=PgdConfig(steps=25, step_size=0.5),
    )
    report = run_chain(cfg, tmp_path / "smoke")
    assert [e.index for e in report.entries] == [0, 1]
    assert load_extracted(tmp_path / "smoke" / "d1").images.shape == (1_000, 3, 32, 32)
    for e in report.entries:
        assert set(e.eval_report["accuracy_by_eps"]) == {"0.0", "0.25", "0.5", "1.0"}
    _line(10, "paper profile present (count 500k, n=5); 1-iteration/1k-image "
              "smoke run completed without error")
