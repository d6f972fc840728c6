"""Acceptance suite: one test per criterion, each timed against its budget.

Every test records a PASS/FAIL line that is printed in the terminal summary.
The reference experiment (criteria 5, 7 and 8) runs once per session and
takes roughly 20 minutes on one CPU core.
"""

import copy
import filecmp
import math
import time

import numpy as np
import pytest
import torch
from torch import nn

import oracles
from liteheart import experiment as ex
from liteheart.bench import count_flops, measure_latency
from liteheart.config import load_config, reference_config_path
from liteheart.losses import (
    KDConfig,
    Models,
    bce_multilabel,
    combined_objective,
    discriminator_loss,
    kd_loss,
    region_mix,
    sample_region_box,
    vanilla_total,
)
from liteheart.metrics import auc_macro, coverage, map_macro, ranking_loss
from liteheart.models import (
    build_classifier,
    build_discriminator,
    build_restoration,
    load_checkpoint,
    param_count,
    within_tier_tolerance,
)
from liteheart.pipeline import CardiacSystem
from liteheart.training import TrainConfig, distill_step, fit, state_hash
from liteheart.xai import localization_recall

LN2 = math.log(2)


def _elapsed(t0):
    return time.perf_counter() - t0


# -- 1: loss oracles -------------------------------------------------------------------


def test_criterion_1_loss_oracles(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        n, c = (int(v) for v in rng.integers(1, 7, 2))
        tau = float(rng.uniform(0.5, 6))
        ps, pt, y = rng.normal(0, 4, (n, c)), rng.normal(0, 4, (n, c)), rng.random((n, c))
        worst = max(worst, abs(kd_loss(torch.tensor(ps), torch.tensor(pt), tau).item()
                               - oracles.kd_scalar(ps.tolist(), pt.tolist(), tau)))
        worst = max(worst, abs(bce_multilabel(torch.tensor(ps), torch.tensor(y)).item()
                               - oracles.bce_scalar(ps.tolist(), y.tolist())))
        n2, f = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        z, o, w = rng.normal(size=(n2, f)), rng.normal(size=(n2, c)), rng.normal(size=(f, c))
        worst = max(worst, abs(discriminator_loss(torch.tensor(z), torch.tensor(o), oracles.Bilinear(w)).item()
                               - oracles.bilinear_disc_scalar(z.tolist(), o.tolist(), w.tolist())))

    zeros = torch.zeros(3, 5, dtype=torch.float64)
    exact = [
        abs(kd_loss(zeros, zeros, 1.0).item() - LN2),
        abs(kd_loss(zeros, zeros, 2.0).item() - 4 * LN2),
        abs(discriminator_loss(torch.zeros(4, 3, dtype=torch.float64), torch.zeros(4, 5, dtype=torch.float64),
                               lambda a, b: torch.zeros(a.shape[0], dtype=a.dtype)).item() - 2 * LN2),
    ]
    secs = _elapsed(t0)
    ok = worst < 1e-9 and max(exact) < 1e-12 and secs < 10
    record_criterion(1, ok, f"max oracle error {worst:.2e}, closed-form error {max(exact):.1e}, {secs:.1f}s")
    assert worst < 1e-9
    assert max(exact) < 1e-12
    assert secs < 10


# -- 2: gradient checks ------------------------------------------------------------------


def test_criterion_2_gradient_checks(record_criterion):
    t0 = time.perf_counter()
    worst = {}
    for trial in range(50):
        g = torch.Generator().manual_seed(1000 + trial)
        ps, pt = 2 * torch.randn(3, 4, generator=g), 2 * torch.randn(3, 4, generator=g)
        y = torch.rand(3, 4, generator=g)
        tau = 0.5 + 4 * torch.rand(1, generator=g).item()
        errs = {
            "kd": oracles.finite_diff_check(lambda a: kd_loss(a, pt.double(), tau), [ps]),
            "bce": oracles.finite_diff_check(lambda a: bce_multilabel(a, y.double()), [ps]),
        }
        z, o, w = torch.randn(4, 3, generator=g), torch.randn(4, 2, generator=g), torch.randn(3, 2, generator=g)
        errs["disc"] = oracles.finite_diff_check(
            lambda zz, ww: discriminator_loss(zz, o.double(), lambda a, b: ((a @ ww) * b).sum(1)), [z, w])

        torch.manual_seed(trial)
        disc = build_discriminator(5, 4).double()
        cfg = KDConfig(tau=tau, loss_alpha=0.7, loss_beta=0.4)
        errs["step"] = oracles.finite_diff_check(
            lambda a, zz: combined_objective(a, zz, pt.double(), y.double(), disc, cfg),
            [ps, torch.randn(3, 5, generator=g)])
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    secs = _elapsed(t0)
    ok = max(worst.values()) < 1e-4 and secs < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(2, ok, f"max relative error over 50 trials: {detail}; {secs:.1f}s")
    assert max(worst.values()) < 1e-4
    assert secs < 120


# -- 3: mask geometry ---------------------------------------------------------------------


def _round_half_away(v):
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def test_criterion_3_mask_geometry(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    bad_area = bad_weight = 0
    for _ in range(10_000):
        length = int(rng.integers(1, 2049))
        box = sample_region_box(length, float(rng.uniform(0.2, 5)), rng)
        side = math.sqrt(1 - box.lam)
        bad_area += box.nominal_area != _round_half_away(length * side) * _round_half_away(12 * side)
        zeros = int((box.mask == 0).sum())
        bad_weight += box.weight != zeros / (12 * length)

    x_i, x_j = torch.randn(2, 12, 300, dtype=torch.float64)
    identity = torch.equal(region_mix(x_i, x_j, sample_region_box(300, 1.0, rng, lam=1.0)), x_i)

    # one optimizer step at lambda = 1 versus one vanilla-KD step from the same state
    torch.manual_seed(0)
    student = build_classifier("micro", 3).double()
    teacher = build_classifier("micro", 3).double().eval()
    disc = build_discriminator(student.feature_dim, 3).double()
    g = torch.Generator().manual_seed(1)
    batch = {"x": torch.randn(6, 12, 128, generator=g, dtype=torch.float64),
             "restored": torch.randn(6, 12, 128, generator=g, dtype=torch.float64),
             "y": torch.randint(0, 2, (6, 3), generator=g).double()}
    kd = KDConfig(loss_beta=0.0, semi_supervised=False)
    s_mix, s_van = copy.deepcopy(student), copy.deepcopy(student)
    opt_mix = torch.optim.AdamW(s_mix.parameters(), lr=1e-3)
    distill_step(Models(s_mix, teacher, disc), opt_mix, batch, None, kd, np.random.default_rng(5), grad_clip=1.0, lam=1.0)
    opt_van = torch.optim.AdamW(s_van.parameters(), lr=1e-3)
    loss = vanilla_total(batch, Models(s_van, teacher, disc), kd)
    opt_van.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(s_van.parameters(), 1.0)
    opt_van.step()
    same_step = state_hash(s_mix) == state_hash(s_van)

    secs = _elapsed(t0)
    ok = bad_area == 0 and bad_weight == 0 and identity and same_step and secs < 30
    record_criterion(3, ok, f"area mismatches {bad_area}/10000, weight mismatches {bad_weight}/10000, "
                            f"identity mix {identity}, lambda=1 step equals vanilla step {same_step}; {secs:.1f}s")
    assert bad_area == 0 and bad_weight == 0
    assert identity and same_step
    assert secs < 30


# -- 4: metric oracles ----------------------------------------------------------------------


def test_criterion_4_metric_oracles(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    invariant = True
    for _ in range(500):
        s, y = oracles.random_metric_instance(rng)
        pairs = [
            (ranking_loss(s, y), oracles.ranking_loss_bf(s.tolist(), y.tolist())),
            (coverage(s, y), oracles.coverage_bf(s.tolist(), y.tolist())),
            (map_macro(s, y), oracles.map_bf(s, y)),
            (auc_macro(s, y), oracles.auc_macro_bf(s, y)),
        ]
        for got, want in pairs:
            if not (np.isnan(got) and np.isnan(want)):
                worst = max(worst, abs(got - want))
        # strictly increasing map on a value set where it stays injective in floating point
        t = np.exp(np.round(s * 64) / 64)
        base = np.round(s * 64) / 64
        for fn in (ranking_loss, coverage, map_macro, auc_macro):
            a, b = fn(base, y), fn(t, y)
            invariant &= (a == b) or (np.isnan(a) and np.isnan(b))
    secs = _elapsed(t0)
    ok = worst < 1e-12 and invariant and secs < 60
    record_criterion(4, ok, f"max brute-force error {worst:.1e} over 500 instances, "
                            f"monotone invariance exact {invariant}; {secs:.1f}s")
    assert worst < 1e-12
    assert invariant
    assert secs < 60


# -- 6: efficiency bench ----------------------------------------------------------------------


def test_criterion_6_efficiency(record_criterion):
    t0 = time.perf_counter()
    hand = [
        (nn.Conv1d(1, 2, 3, padding=1), (1, 1, 100), 2 * 3 * 1 * 2 * 100),
        (nn.Linear(16, 8), (4, 16), 2 * 16 * 8 * 4),
        (nn.ConvTranspose1d(4, 2, 2, stride=2), (1, 4, 50), 2 * 2 * 4 * 2 * 50),
    ]
    flops_ok = all(count_flops(m, shape) == want for m, shape, want in hand)

    teacher = build_classifier("teacher", 6)
    student = build_classifier("base", 6)
    restoration = build_restoration("base")
    counts = {"teacher": param_count(teacher), "base student": param_count(student),
              "base restoration": param_count(restoration)}
    targets = {"teacher": 50_500_000, "base student": 1_600_000, "base restoration": 5_710_000}
    sizes_ok = all(within_tier_tolerance(counts[k], targets[k]) for k in counts)

    torch.set_num_threads(1)
    length = 4096
    t_lat = measure_latency(teacher, (4, 12, length), reps=5, warmup=2).median_ms
    system = CardiacSystem(student, restoration, 0)
    s_lat = measure_latency(system, (4, 1, length), reps=5, warmup=2).median_ms
    secs = _elapsed(t0)
    ok = flops_ok and sizes_ok and s_lat < t_lat and secs < 300
    sizes = ", ".join(f"{k} {v / 1e6:.2f}M" for k, v in counts.items())
    record_criterion(6, ok, f"hand FLOPs match {flops_ok}; {sizes}; latency at batch 4 "
                            f"system {s_lat:.0f} ms vs teacher {t_lat:.0f} ms; {secs:.1f}s")
    assert flops_ok
    assert sizes_ok
    assert s_lat < t_lat
    assert secs < 300


# -- reference experiment (5, 7, 8) --------------------------------------------------------------


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    cfg = load_config(reference_config_path(), environ={})
    out = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    prep = ex.downstream_data(cfg)
    t_path, r_path = ex.pretrain_upstream(cfg, out / "pretrain")
    results, seed0 = [], None
    for seed in cfg.seeds:
        res = ex.run_seed(prep, cfg, seed, t_path, r_path, out / f"seed{seed}", keep_models=seed == 0)
        if seed == 0:
            res, rp, models = res
            seed0 = (rp, models)
        results.append(res)
    secs = _elapsed(t0)
    return {"cfg": cfg, "out": out, "prep": prep, "results": results, "seed0": seed0, "secs": secs,
            "paths": (t_path, r_path)}


def test_criterion_5_reference_experiment(reference, record_criterion):
    cfg, results = reference["cfg"], reference["results"]
    f1 = {name: np.array([r.reports[name]["macro_f1"] for r in results]) for name in ("teacher",) + ex.VARIANTS}

    gap = f1["teacher"] - f1["baseline"]
    a_ok = bool(np.all(gap >= 0.10))

    closed = (f1["liteheart"] - f1["baseline"]) / gap
    b_ok = int((closed >= 0.40).sum()) >= 3

    table = ex.aggregate(results)
    ladder = ["liteheart", "liteheart_ii", "liteheart_i", "vanilla_kd"]
    steps = []
    for upper, lower in zip(ladder, ladder[1:]):
        mu_u, mu_l = table[upper]["macro_f1"]["mean"], table[lower]["macro_f1"]["mean"]
        tol = max(table[upper]["macro_f1"]["std"], table[lower]["macro_f1"]["std"])
        steps.append(mu_u - mu_l >= -tol)
    c_ok = all(steps)

    invisible = [k for k, p in enumerate(cfg.synth.pattern_table) if cfg.models.lead_index not in p.leads]
    auc_gain = {
        cfg.synth.pattern_table[k].name: float(np.mean([r.reports["liteheart"]["per_class_auc"][k]
                                                        - r.reports["baseline"]["per_class_auc"][k] for r in results]))
        for k in invisible
    }
    d_ok = max(auc_gain.values()) >= 0.05

    secs = reference["secs"]
    ok = a_ok and b_ok and c_ok and d_ok and secs < 1800
    means = ", ".join(f"{n} {100 * table[n]['macro_f1']['mean']:.1f}" for n in ("teacher",) + ex.VARIANTS)
    record_criterion(5, ok, (
        f"(a) gap per seed {np.round(100 * gap, 1).tolist()} -> {'pass' if a_ok else 'fail'}; "
        f"(b) share closed {np.round(closed, 2).tolist()} -> {'pass' if b_ok else 'fail'}; "
        f"(c) ladder steps {steps} -> {'pass' if c_ok else 'fail'}; "
        f"(d) invisible-class AUC gain {({k: round(v, 3) for k, v in auc_gain.items()})} -> {'pass' if d_ok else 'fail'}; "
        f"mean macro F1 [{means}]; {secs / 60:.1f} min"))
    assert a_ok, f"teacher-baseline gap {gap}"
    assert b_ok, f"gap share closed {closed}"
    assert c_ok, f"ladder steps {steps}"
    assert d_ok, f"invisible-class AUC gains {auc_gain}"
    assert secs < 1800


def test_criterion_7_training_contracts(reference, record_criterion):
    # rigged plateau: best at epoch 3, nothing better afterwards
    model = nn.Linear(2, 1)
    script = iter([3.0, 2.0, 1.0] + [1.0 + 0.1 * i for i in range(100)])
    run = fit([model], lambda opt: [{"total": 0.0}], lambda: next(script), TrainConfig(patience=10, max_epochs=100))
    plateau_ok = run.stopped_early and run.epochs_run - run.best_epoch == 10

    cfg, out = reference["cfg"], reference["out"]
    _, models = reference["seed0"]
    frozen_ok = all(
        state_hash(models[name]) == state_hash(load_checkpoint(out / "seed0" / f"{name}.pt")[0])
        for name in ("teacher", "restoration")
    )

    t_path, r_path = reference["paths"]
    rerun = out / "seed0_rerun"
    ex.run_seed(reference["prep"], cfg, 0, t_path, r_path, rerun)
    first = out / "seed0"
    # timing.json holds wall-clock seconds and is the one file expected to differ
    files = sorted(p.relative_to(first) for p in first.rglob("*")
                   if p.suffix in (".json", ".csv", ".jsonl") and p.name != "timing.json")
    mismatched = [str(f) for f in files if not filecmp.cmp(first / f, rerun / f, shallow=False)]
    identical = bool(files) and not mismatched

    ok = plateau_ok and frozen_ok and identical
    record_criterion(7, ok, f"stopped {run.epochs_run - run.best_epoch} epochs after best; frozen hashes unchanged "
                            f"{frozen_ok}; {len(files) - len(mismatched)}/{len(files)} metric and log files "
                            f"byte-identical on rerun")
    assert plateau_ok
    assert frozen_ok
    assert identical, f"differing files: {mismatched}"


def test_criterion_8_grad_cam_localization(reference, record_criterion):
    t0 = time.perf_counter()
    cfg = reference["cfg"]
    rp, models = reference["seed0"]
    student = models["liteheart"].eval()
    inputs = rp.test.restored
    cases = ex.saliency_cases(rp.test.y, cfg.synth, inputs.shape[-1], 50, cfg.models.lead_index)
    recalls = localization_recall(student, inputs, cases)
    mean = float(np.mean(recalls))
    secs = _elapsed(t0)
    ok = len(cases) == 50 and mean > 0.5 and secs < 120
    record_criterion(8, ok, f"mean top-decile recall {mean:.3f} over {len(cases)} positive test records "
                            f"(chance about 0.1); {secs:.1f}s")
    assert len(cases) == 50
    assert mean > 0.5
    assert secs < 120
