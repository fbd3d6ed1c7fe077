"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line verdict that the terminal summary prints under
"acceptance criteria", then asserts it.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from quantlock.analysis_defense import DefenseConfig, defense_sweep, synthetic_checkpoint, vulnerability_profile, width_ratios
from quantlock.attack_pipeline import AttackConfig, attack_datasets, run_attack
from quantlock.cli import bundled
from quantlock.constraints import compute_constraints, compute_intervals, intersect
from quantlock.nn_lab import ToyModel, backward, forward
from quantlock.projection import project
from quantlock.quantizers import Method, alphabet, dequantize, quantize_tensor
from quantlock.tensor_store import BlockSpec, Layout, QuantizablePolicy

from oracles import finite_difference, relative_errors

METHODS = list(Method)
ALL = QuantizablePolicy(min_dim=1)
ORACLE = json.loads((Path(__file__).parent / "fixtures" / "attack_oracle.json").read_text())


def record(request, n, ok, detail):
    request.config.acceptance_results[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _spec(method, length):
    return None if method is Method.INT8 else BlockSpec(Layout.FLAT, length)


def _draw(rng, n, length):
    """Rows from Gaussian, uniform and heavy-tailed draws with scales spanning seven decades."""
    kind = rng.integers(0, 3, n)
    g = rng.standard_normal((n, length))
    u = rng.uniform(-1, 1, (n, length))
    t = rng.standard_t(2, (n, length))
    x = np.where(kind[:, None] == 0, g, np.where(kind[:, None] == 1, u, t))
    return (x * 10.0 ** rng.uniform(-4, 3, (n, 1))).astype(np.float32)


def _perturb(rng, t, s):
    """Noise at a random magnitude per row, plus some coordinates pushed hard to a bound."""
    mag = np.abs(t).max(axis=1, keepdims=True) * rng.choice([1e-7, 1e-3, 0.1, 10, 1e3], (t.shape[0], 1))
    cand = t.astype(np.float64) + rng.standard_normal(t.shape) * mag
    push = rng.random(t.shape) < 0.2
    cand = np.where(push, np.where(rng.random(t.shape) < 0.5, -1e30, 1e30), cand)
    return cand.astype(np.float32)


def _blocks_equal(a, b):
    return np.all(a.codes == b.codes, axis=1) & (a.scales == b.scales)


@pytest.fixture(scope="module")
def default_run():
    cfg = AttackConfig.load(bundled("default_attack.json"))
    t0 = time.perf_counter()
    report = run_attack(cfg)
    return cfg, report, time.perf_counter() - t0


def test_criterion_1_preservation_soundness(request):
    rng = np.random.default_rng(1)
    n_blocks = 10_000
    t0 = time.perf_counter()
    total = ok = 0
    for method in METHODS:
        for length in (1, 7, 64, 300):
            t = _draw(rng, n_blocks, length)
            spec = _spec(method, length)
            s = compute_intervals(t, method, ALL, spec=spec)
            ref = quantize_tensor(t, method, spec)
            cand = project({"w": _perturb(rng, t, s)}, {"w": s})["w"]
            same = _blocks_equal(quantize_tensor(cand, method, spec), ref)
            total += same.size
            ok += int(same.sum())
    elapsed = time.perf_counter() - t0
    record(request, 1, ok == total and elapsed < 60,
           f"{ok}/{total} blocks re-quantize bit-identically after projection, {elapsed:.1f}s (limit 60s)")


def test_criterion_2_containment_and_intersection(request):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    contained = nonempty = 0
    n = 1000
    for _ in range(n):
        rows, cols = rng.integers(1, 48, 2)
        t = _draw(rng, rows, cols)
        sets = [compute_intervals(t, m, ALL) for m in METHODS]
        contained += all(np.all(s.contains(t)) for s in sets)
        merged = intersect(intersect(sets[0], sets[1]), sets[2])
        nonempty += bool(np.all(merged.lo <= merged.hi))
    elapsed = time.perf_counter() - t0
    record(request, 2, contained == n and nonempty == n,
           f"containment {contained}/{n}, nonempty three-way intersection {nonempty}/{n}, {elapsed:.1f}s")


def test_criterion_3_int8_closed_forms(request):
    rng = np.random.default_rng(3)
    abc = alphabet(Method.INT8)
    a = np.arange(-127, 128) / 127  # the exact grid, not its float32 roundings
    # Interior widths on random rows.
    t = _draw(rng, 2000, 128)
    s = compute_intervals(t, Method.INT8, ALL)
    codes = quantize_tensor(t, Method.INT8).codes
    scale = np.abs(t).max(axis=1, keepdims=True).astype(np.float64)
    interior = ~s.frozen & (codes > 0) & (codes < len(abc) - 1)
    width = np.nextafter(s.hi, np.float32(np.inf)).astype(np.float64) - s.lo
    ulp = np.spacing(np.maximum(np.abs(s.lo), np.abs(s.hi))).astype(np.float64)
    interior_ok = np.all(np.abs(width - scale / 127)[interior] <= ulp[interior])

    # Constructed boundary blocks: [s, -s, s, interior...]; element 0 defines the scale.
    sc = (10.0 ** rng.uniform(-3, 3, 500)).astype(np.float32)
    body = rng.uniform(-0.9, 0.9, (500, 13)).astype(np.float32) * sc[:, None]
    blocks = np.concatenate([sc[:, None], -sc[:, None], sc[:, None], body], axis=1)
    b = compute_intervals(blocks, Method.INT8, ALL)
    s64 = sc.astype(np.float64)

    def next_up(x):
        return np.nextafter(x, np.float32(np.inf)).astype(np.float64)

    low_edge = s64 * (a[0] + a[1]) / 2
    high_edge = s64 * (a[-2] + a[-1]) / 2

    def ulp(x):
        return np.abs(np.spacing(np.float32(x))).astype(np.float64)

    low_ok = bool(np.all(b.lo[:, 1] == -sc) and np.all(np.abs(next_up(b.hi[:, 1]) - low_edge) <= ulp(low_edge)))
    high_ok = bool(np.all(b.hi[:, 2] == sc) and np.all(np.abs(b.lo[:, 2] - high_edge) <= ulp(high_edge)))
    frozen_ok = bool(np.all(b.frozen[:, 0]) and not b.frozen[:, 1:].any())
    ok = interior_ok and low_ok and high_ok and frozen_ok
    record(request, 3, ok,
           f"interior s/127 within 1 ulp on {int(interior.sum())} weights: {interior_ok}; "
           f"j=1 {low_ok}; j=|A| {high_ok}; only the scale-defining weight frozen: {frozen_ok}")


def _per_element(values, method, spec, shape):
    if method is Method.INT8:
        return np.broadcast_to(values[:, None], shape)
    return np.repeat(values, spec.block_size)[:int(np.prod(shape))].reshape(shape)


def test_criterion_4_round_trip(request):
    rng = np.random.default_rng(4)
    bound_ok = dq_bound_ok = idem_ok = n = n_dq = 0
    for _ in range(200):
        rows, cols = rng.integers(1, 64, 2)
        t = _draw(rng, rows, cols)
        for method in METHODS:
            spec = method.default_spec
            half_gap = alphabet(method).max_gap / 2
            blocks = np.abs(t) if method is Method.INT8 else np.pad(
                np.abs(t).ravel(), (0, -t.size % spec.block_size)).reshape(-1, spec.block_size)
            absmax = blocks.max(axis=1).astype(np.float64)
            for dq in (False, True):
                q = quantize_tensor(t, method, double_quant=dq)
                err = np.abs(t.astype(np.float64) - dequantize(q))
                s = q.scales.astype(np.float64)
                if dq:
                    # Codes are chosen against the exact absmax and decoded with
                    # the reconstructed scale, so the scale error adds on.
                    bound = _per_element(absmax * half_gap + np.abs(absmax - s), method, spec, t.shape)
                    dq_bound_ok += bool(np.all(err <= bound))
                    n_dq += 1
                else:
                    bound_ok += bool(np.all(err <= _per_element(s * half_gap, method, spec, t.shape)))
                    n += 1
                idem_ok += quantize_tensor(dequantize(q), method, double_quant=dq) == q
    record(request, 4, bound_ok == n and dq_bound_ok == n_dq and idem_ok == n + n_dq,
           f"error <= s*gap/2 on {bound_ok}/{n} tensors; double-quant bound {dq_bound_ok}/{n_dq}; "
           f"quantize(dequantize) bit-identical {idem_ok}/{n + n_dq}")


def test_criterion_5_gradients(request):
    t0 = time.perf_counter()
    rels = []
    shrunk = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        m = ToyModel.init((8, 8, 2), seed=seed).astype(np.float64)
        x = rng.standard_normal((32, 8))
        y = rng.integers(0, 2, 32)
        fd, flags = finite_difference(m, x, y)
        rels.append(relative_errors(backward(m, forward(m, x)[1], y), fd))
        shrunk += sum(int(f.sum()) for f in flags.values())
    rel = np.concatenate(rels)
    frac = float(np.mean(rel <= 1e-4))
    elapsed = time.perf_counter() - t0
    record(request, 5, frac >= 0.99 and rel.max() <= 1e-2,
           f"{frac:.4f} of {rel.size} coordinates within 1e-4, max {rel.max():.2e} "
           f"({shrunk} needed a smaller step at a kink), {elapsed:.1f}s")


def test_criterion_6_attack_demo(request, default_run):
    cfg, report, elapsed = default_run
    full = report.metrics["repaired"]["full"]
    contrast = report.contrast()
    a = report.preserved and set(report.preservation) == {"int8", "fp4", "nf4"}
    b = full.clean_accuracy >= 0.90 and full.attack_success_rate <= 0.10
    c = all(v >= 0.60 for v in contrast.values())
    got = report.to_dict(timings=False)["metrics"]
    drift = max(abs(got[st][p][k] - ORACLE["metrics"][st][p][k])
                for st in got for p in got[st] for k in got[st][p])
    oracle_ok = cfg.digest() == ORACLE["config_digest"] and drift <= 0.05
    cells = ", ".join(f"{p}={v:+.3f}" for p, v in contrast.items())
    record(request, 6, a and b and c and oracle_ok and elapsed < 300,
           f"(a) preserved={a}; (b) full clean={full.clean_accuracy:.4f} attack={full.attack_success_rate:.4f} "
           f"-> {b}; (c) quantized minus full attack {cells} -> {c}; "
           f"oracle drift {drift:.3f}; {elapsed:.1f}s")


def test_criterion_7_noise_defense(request, default_run):
    cfg, report, _ = default_run
    t0 = time.perf_counter()
    _, test = attack_datasets(cfg)
    sweep = defense_sweep(report.models["repaired"], test, DefenseConfig())
    base = sweep.baseline
    contrast = {m: base[m].attack_success_rate - base["full"].attack_success_rate for m in ("int8", "fp4", "nf4")}
    found = None
    for row in sweep.rows:
        if row.sigma == 0:
            continue
        drops = {m: base[m].attack_success_rate - row.metrics[m].attack_success_rate for m in contrast}
        clean_loss = base["full"].clean_accuracy - row.metrics["full"].clean_accuracy
        if all(drops[m] >= 0.8 * contrast[m] for m in contrast) and clean_loss <= 0.05:
            found = row.sigma
            break
    worst = base["full"].clean_accuracy - sweep.rows[-1].metrics["full"].clean_accuracy
    elapsed = time.perf_counter() - t0
    cells = ", ".join(f"{m}={v:+.3f}" for m, v in contrast.items())
    record(request, 7, found is not None and worst >= 0.20 and elapsed < 300,
           f"undefended contrast {cells}; sigma meeting the 80% drop within 5 points: {found}; "
           f"largest sigma costs {worst * 100:.1f} points clean; {elapsed:.1f}s")


def test_criterion_8_heavy_tail_widths(request):
    t0 = time.perf_counter()
    heavy = vulnerability_profile(synthetic_checkpoint("student_t", 1 << 20, seed=8, df=3), METHODS)
    light = vulnerability_profile(synthetic_checkpoint("gaussian", 1 << 20, seed=8), METHODS)
    ratios = width_ratios(heavy, light)
    elapsed = time.perf_counter() - t0
    cells = ", ".join(f"{m}={r:.3f}" for m, r in ratios.items())
    record(request, 8, all(r >= 1.5 for r in ratios.values()) and elapsed < 60,
           f"Student-t/Gaussian mean width ratio {cells} (need >= 1.5), {elapsed:.1f}s")


def test_criterion_9_intersection_never_wider(request):
    rng = np.random.default_rng(9)
    n = ok = 0
    for _ in range(500):
        rows, cols = rng.integers(1, 80, 2)
        t = _draw(rng, rows, cols)
        sets = [compute_intervals(t, m, ALL) for m in METHODS]
        merged = intersect(intersect(sets[0], sets[1]), sets[2])
        for s in sets:
            n += 1
            ok += bool(np.all(merged.lo >= s.lo) and np.all(merged.hi <= s.hi))
    record(request, 9, ok == n, f"{ok}/{n} tensor-method pairs elementwise no wider")


def test_criterion_10_int8_performance(request):
    ckpt = synthetic_checkpoint("gaussian", 10_000_000, seed=10)
    times = {}
    for threads in (1, 2, 4):
        t0 = time.perf_counter()
        compute_constraints(ckpt, ["int8"], threads=threads)
        times[threads] = time.perf_counter() - t0
    eff = {k: times[1] / times[k] / k for k in (2, 4)}
    scaling = all(e >= 0.7 for e in eff.values())
    cells = ", ".join(f"{k} threads {times[k]:.2f}s (efficiency {eff[k]:.2f})" for k in (2, 4))
    record(request, 10, times[1] < 60 and scaling,
           f"{ckpt.num_parameters()} params single-threaded {times[1]:.2f}s (limit 60s); {cells}; "
           f"{os.cpu_count()} CPU(s) available")
