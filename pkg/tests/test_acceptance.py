"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n ... PASS|FAIL`` line (also collected in
the terminal summary) before asserting. The desk-scale training experiment
(criteria 8 and 10) trains 9 networks twice and takes the better part of an hour
on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from aggseg import losses as L
from aggseg.blindspot import BlindSpotModel, bias_report, blind_spot_probability, simulate_blind_spot
from aggseg.data import SynthConfig
from aggseg.experiment import median_by_variant, run_ablation
from aggseg.metrics import ConfusionCounts, accumulate, aggregate_metrics, class_metrics, mean_f1
from aggseg.model import ArchConfig, build_model, save_checkpoint
from aggseg.perturb import PerturbConfig, drop_perturb, noise_perturb, perturb_latent
from aggseg.trainer import TrainConfig, initialize_weights, make_optimizer, train_step

from conftest import SMALL_DEPTHS

RESULTS = []


def report(number, passed, detail):
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


# -- 1. closed-form blind-spot probability vs Monte Carlo ---------------------

def test_criterion_01_blind_spot_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_models = 21
    for m_idx in range(n_models):
        n = (2, 3, 5)[m_idx % 3]
        priors = rng.dirichlet(np.ones(n))
        model = BlindSpotModel(tuple(priors / priors.sum()), float(rng.uniform(0.05, 0.5)))
        sim = simulate_blind_spot(model, 1_000_000, rng=rng)
        for i in range(n):
            # binomial standard error under the closed-form probability (stays positive when a rare
            # class records no blind spots at all)
            p = blind_spot_probability(model, i)
            se = math.sqrt(p * (1 - p) / sim.trials)
            if se > 0:
                worst = max(worst, abs(sim.frequency[i] - p) / se)
            elif sim.frequency[i] != p:
                worst = math.inf
    elapsed = time.perf_counter() - start
    report(1, worst <= 3.0 and elapsed < 60,
           f"{n_models} models x 1e6 trials, worst deviation {worst:.2f} SE (<= 3), {elapsed:.1f} s (< 60)")


# -- 2. majority/minority blind-spot ratio ------------------------------------

def test_criterion_02_imbalance_ratio():
    model = BlindSpotModel((0.362, 0.638), 0.2)
    rows = bias_report(model, trials=1_000_000, rng=np.random.default_rng(7),
                       class_names=("aggregate", "suspension"))
    majority, minority = rows
    analytic_ok = abs(majority["ratio"] - 1.7624) <= 1e-4
    # empirical ratio: delta-method standard error of a ratio of two frequencies
    emp = majority["empirical_p"] / minority["empirical_p"]
    se = emp * math.hypot(majority["std_error"] / majority["empirical_p"],
                          minority["std_error"] / minority["empirical_p"])
    empirical_ok = abs(emp - 0.638 / 0.362) <= 3 * se
    report(2, analytic_ok and empirical_ok,
           f"analytic ratio {majority['ratio']:.6f} (1.7624 +- 1e-4), empirical {emp:.4f} +- {se:.4f}")


# -- 3. analytic gradients vs central differences -----------------------------

def _central_difference(f, x, h=1e-5):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def _relative_error(analytic, numeric):
    return float((analytic - numeric).abs().max() / numeric.abs().max().clamp_min(1e-12))


def test_criterion_03_gradients():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(3)
    rand = lambda *s: 0.05 + 0.9 * torch.rand(*s, generator=g, dtype=torch.float64)  # noqa: E731
    ref = (torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) > 0.6).double()
    target = rand(2, 1, 8, 8)
    image = rand(2, 3, 8, 8)
    prior = L.ClassPrior((0.362, 0.638), (0.08, 0.08))
    cases = {
        "supervised": (lambda p: L.supervised_loss(p, ref, (1.7, 0.6)), rand(2, 1, 8, 8)),
        "consensus": (lambda p: L.consensus_loss(target, p), rand(2, 1, 8, 8)),
        "prior": (lambda p: L.prior_loss(p, prior), rand(2, 1, 8, 8)),
        "reconstruction": (lambda p: L.reconstruction_loss(p, image), rand(2, 3, 8, 8)),
    }
    errors = {}
    for name, (f, x) in cases.items():
        x = x.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(f(x), x)
        with torch.no_grad():
            numeric = _central_difference(f, x.detach().clone())
        errors[name] = _relative_error(analytic, numeric)
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(3, max(errors.values()) <= 1e-3 and elapsed < 60, f"relative errors {detail} (<= 1e-3), {elapsed:.1f} s")


# -- 4. loss fixed points -----------------------------------------------------

def test_criterion_04_fixed_points():
    g = torch.Generator().manual_seed(4)
    pred = torch.rand(3, 1, 8, 8, generator=g, dtype=torch.float64)
    ref = (pred > 0.5).double()
    image = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64)
    values = {
        "supervised": L.supervised_loss(ref.clone(), ref, (2.0, 0.5)).item(),
        "consensus": L.consensus_loss(pred, pred.clone()).item(),
        "reconstruction": L.reconstruction_loss(image.clone(), image).item(),
    }
    # a map whose soft aggregate proportion is exactly mu
    mu = 0.375
    at_prior = torch.zeros(3, 1, 8, 8, dtype=torch.float64)
    at_prior[:, :, :3, :] = 1.0
    values["prior"] = L.prior_loss(at_prior, L.ClassPrior((mu, 1 - mu), (0.05, 0.05))).item()
    exact = all(values[k] == 0.0 for k in ("supervised", "consensus", "reconstruction"))
    report(4, exact and abs(values["prior"]) <= 1e-9,
           "losses at equality: " + ", ".join(f"{k}={v:.1e}" for k, v in values.items()))


# -- 5. unlabelled gradient routing -------------------------------------------

def test_criterion_05_gradient_routing():
    model = build_model(ArchConfig(input_size=32, block_depths=SMALL_DEPTHS))
    initialize_weights(model, seed=5)
    g = torch.Generator().manual_seed(5)
    x_l = torch.rand(4, 3, 32, 32, generator=g)
    y_l = (torch.rand(4, 1, 32, 32, generator=g) > 0.6).float()
    x_u = torch.rand(4, 3, 32, 32, generator=g)
    config = TrainConfig(variant="full")
    opt = make_optimizer(model, config)
    before = {name: [p.detach().clone() for p in getattr(model, name).parameters()]
              for name in ("encoder", "main_decoder", "aux_decoder")}
    train_step(model, opt, x_l, y_l, x_u, config, L.ClassPrior((0.36, 0.64), (0.05, 0.05)), generator=g,
               supervised=False)
    delta = {name: max(float((p.detach() - b).abs().max()) for p, b in zip(getattr(model, name).parameters(), old))
             for name, old in before.items()}
    report(5, delta["main_decoder"] == 0.0 and delta["encoder"] > 0 and delta["aux_decoder"] > 0,
           "max |delta|: " + ", ".join(f"{k}={v:.2e}" for k, v in delta.items()))


# -- 6. parameter budget ------------------------------------------------------

def test_criterion_06_parameter_budget(tmp_path):
    model = build_model(ArchConfig())
    path = save_checkpoint(model, tmp_path / "default.pt")
    manifest = json.loads((tmp_path / "default.pt.manifest.json").read_text())
    count = manifest["parameter_counts"]["inference"]
    report(6, 1.6e6 <= count <= 2.2e6 and path.exists(),
           f"default inference parameters {count:,} in [1.6e6, 2.2e6], from checkpoint manifest")


# -- 7. metrics vs a per-pixel loop -------------------------------------------

def _pixel_loop_metrics(pred, ref):
    tp, fp, fn = [0, 0], [0, 0], [0, 0]
    correct = 0
    for p, r in zip(pred.ravel().tolist(), ref.ravel().tolist()):
        if p == r:
            tp[p] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[r] += 1
    per_class = []
    for c in range(2):
        recall = 100.0 * tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else math.nan
        precision = 100.0 * tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else math.nan
        f1 = (2 * recall * precision / (recall + precision)
              if not (math.isnan(recall) or math.isnan(precision)) and recall + precision > 0 else math.nan)
        per_class.append((recall, precision, f1))
    return per_class, 100.0 * correct / pred.size


def _close(a, b, tol=1e-9):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


def test_criterion_07_metrics_oracle():
    rng = np.random.default_rng(77)
    worst = 0.0
    ok = True
    for _ in range(50):
        fraction = rng.uniform(0.05, 0.95)
        ref = (rng.random((32, 32)) < fraction).astype(np.uint8)
        pred = np.where(rng.random((32, 32)) < 0.2, 1 - ref, ref).astype(np.uint8)
        counts = accumulate(ConfusionCounts(2), pred, ref)
        expected, oa = _pixel_loop_metrics(pred, ref)
        for c in range(2):
            for got, want in zip(class_metrics(counts, c), expected[c]):
                ok &= _close(got, want)
                if not math.isnan(want):
                    worst = max(worst, abs(got - want))
        got_oa, got_mf1 = aggregate_metrics(counts)
        want_mf1 = (expected[0][2] + expected[1][2]) / 2
        ok &= _close(got_oa, oa) and _close(got_mf1, want_mf1)
        worst = max(worst, abs(got_oa - oa), abs(got_mf1 - want_mf1))
    table_row = mean_f1([83.2, 90.6])
    ok &= round(table_row, 1) == 86.9
    report(7, ok, f"50 random 32x32 pairs, worst abs difference {worst:.1e} (<= 1e-9); "
                  f"mean(83.2, 90.6) = {table_row:.2f}")


# -- 8 & 10. desk-scale ablation ----------------------------------------------

DESK_SEEDS = (0, 1, 2)
DESK_SYNTH = SynthConfig(tile_size=128, num_labelled=40, num_unlabelled=64, target_minority_fraction=0.25,
                         tiles_per_pipe=5)
DESK_TRAIN = TrainConfig(epochs=40)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("desk") / "metrics.csv"
    start = time.perf_counter()
    rows = run_ablation(DESK_SYNTH, DESK_TRAIN, DESK_SEEDS, k=1, csv_path=path)
    return rows, path, time.perf_counter() - start


def test_criterion_08_directional_ablation(desk_run):
    rows, path, elapsed = desk_run
    for row in rows:
        print(f"  seed {row['setup']} {row['variant']:<4} MF1 {row['MF1']:.2f} "
              f"aggregate recall {row['aggregate_recall']:.2f}")
    recall = median_by_variant(rows, "aggregate_recall")
    mf1 = median_by_variant(rows, "MF1")
    checks = {
        "recall cons < base": recall["cons"] < recall["base"],
        "recall full > cons": recall["full"] > recall["cons"],
        "MF1 full >= cons": mf1["full"] >= mf1["cons"],
        "runtime <= 45 min": elapsed <= 45 * 60,
    }
    detail = (f"median aggregate recall base/cons/full {recall['base']:.2f}/{recall['cons']:.2f}/"
              f"{recall['full']:.2f}; median MF1 {mf1['base']:.2f}/{mf1['cons']:.2f}/{mf1['full']:.2f}; "
              f"{elapsed / 60:.1f} min; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(8, all(checks.values()), detail)


# -- 9. perturbation statistics -----------------------------------------------

def test_criterion_09_perturbation_properties():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(9)
    failures = []

    z = torch.randn(10_000, generator=g)
    noisy = noise_perturb(z, g)
    if not (noisy.abs() <= 1.3 * z.abs() + 1e-6).all():
        failures.append("noise magnitude bound")
    ones = noise_perturb(torch.ones(10_000), g)
    if not (ones.min() > 0.7 and ones.max() < 1.3):
        failures.append("noise interval on ones")
    factor = ones - 1.0  # the sampled N
    # U(-0.3, 0.3): mean 0, variance 0.03; 4-sigma bands for 1e4 samples
    if abs(float(factor.mean())) > 4 * math.sqrt(0.03 / 1e4) or abs(float(factor.var()) - 0.03) > 0.003:
        failures.append("noise distribution moments")

    latent = torch.rand(10_000, 4, 4, 8, generator=g)  # nonnegative like post-ReLU encoder output
    for i in range(10_000 // 100):
        batch = latent[i * 100:(i + 1) * 100]
        out = drop_perturb(batch, g)
        if not ((out == batch) | (out == 0)).all():
            failures.append("drop is not a masked copy")
            break
        maxima = batch.amax(dim=(1, 2), keepdim=True)
        if not (out[batch == maxima] == 0).all():
            failures.append("channel maxima kept")
            break
        # every surviving element is at most gamma * max, every dropped one above it
        kept_ratio = torch.where(out != 0, batch / maxima, torch.zeros_like(batch)).max().item()
        dropped_ratio = torch.where(out == 0, batch / maxima, torch.ones_like(batch)).min().item()
        if not kept_ratio < dropped_ratio:
            failures.append("drop threshold is not a single cut")
            break
        # some gamma in [kept, dropped) must lie in the configured range
        if not (kept_ratio < 0.9 and dropped_ratio > 0.6):
            failures.append("threshold outside (0.6, 0.9)")
            break

    zero = torch.zeros(100, 4, 4, 8)
    if not torch.equal(drop_perturb(zero, g), zero):
        failures.append("all-zero channel changed")
    a = perturb_latent(latent[:100], PerturbConfig(seed=1))
    b = perturb_latent(latent[:100], PerturbConfig(seed=1))
    if not torch.equal(a, b):
        failures.append("seeded reproducibility")
    elapsed = time.perf_counter() - start
    report(9, not failures and elapsed < 10,
           f"1e4-sample checks of noise bounds and drop masking, {elapsed:.1f} s (< 10); "
           f"failures: {failures or 'none'}")


def test_criterion_10_reproducibility(desk_run, tmp_path):
    _, first, _ = desk_run
    second = tmp_path / "metrics.csv"
    run_ablation(DESK_SYNTH, DESK_TRAIN, DESK_SEEDS, k=1, csv_path=second)
    same = first.read_bytes() == second.read_bytes()
    report(10, same, f"two desk runs with seeds {DESK_SEEDS} give {'identical' if same else 'different'} "
                     "metrics CSVs under deterministic mode")
