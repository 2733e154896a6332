"""Acceptance suite: one verdict line per criterion, tolerances pinned as stated."""

import itertools
import time

import numpy as np
from scipy import stats

from reluplan import accounting as acc
from reluplan import cellgraph as cg
from reluplan import gradcore as gc
from reluplan import latency as lat
from reluplan import pisim as ps
from reluplan import placement as pl
from reluplan import relaxation as rx
from reluplan.plan import NetworkPlan

import clicases
import fdcheck
import gumbeloracle as go
from acceptance_log import report
from test_latency import brute_frontier
from test_relaxation import LEGACY_OPS, oracle_cell


def _cells_oracle(h0, w0, c, depth, placement, factor):
    h, w, ch, total = h0, w0, c, 0
    for i in range(depth):
        if i in placement:
            h, w, ch = h // 2, w // 2, ch * factor
        total += h * w * ch
    return total


def _round_k(relus, digits=1):
    return round(relus / 1000, digits)


# (h0, c, d, placement, printed K, stem)
TABLE_ROWS = [
    (32, 5, 5, (0, 1), 25.6, "direct"), (32, 5, 6, (0, 1), 30.2, "direct"),
    (32, 5, 8, (1, 3), 41.0, "direct"), (32, 5, 10, (0, 5), 51.2, "direct"),
    (32, 7, 10, (0, 5), 71.7, "direct"), (32, 10, 10, (0, 5), 102.4, "direct"),
    (32, 15, 15, (2, 6), 230.0, "direct"),
    (64, 5, 5, (0, 1), 102.4, "direct"), (64, 5, 10, (0, 5), 204.8, "direct"),
    (64, 7, 10, (0, 5), 286.7, "direct"), (64, 20, 10, (0, 5), 819.2, "direct"),
    (28, 10, 10, (1, 5), 172, "imagenet3"), (28, 20, 10, (1, 5), 345, "imagenet3"),
    (28, 30, 10, (1, 5), 517, "imagenet3"), (28, 40, 10, (1, 5), 690, "imagenet3"),
    (28, 50, 10, (1, 5), 862, "imagenet3"), (28, 60, 10, (1, 5), 1034, "imagenet3"),
]
# printed figures contradicted by the closed-form count; exact integers are asserted instead
SUSPECT_TYPOS = {(32, 5, 6): 30720, (32, 15, 15): 230400}


def test_criterion_1_relu_ledger():
    t0 = time.perf_counter()
    bad = []
    for h0, c, d, place, printed, stem in TABLE_ROWS:
        got = acc.count_sphynx(NetworkPlan(h0, h0, c, d, place, stem=stem)).relus
        stem_relus = (112 * 112 * c // 2 + 56 * 56 * c) if stem == "imagenet3" else 0
        exact = stem_relus + _cells_oracle(h0, h0, c, d, place, 4)
        if got != exact:
            bad.append((h0, c, d, got, exact))
        elif (h0, c, d) in SUSPECT_TYPOS:
            if got != SUSPECT_TYPOS[(h0, c, d)]:
                bad.append((h0, c, d, got))
        elif stem == "imagenet3":
            if abs(got / 1000 - printed) >= 1:
                bad.append((h0, c, d, got, printed))
        elif _round_k(got) != printed:
            bad.append((h0, c, d, got, printed))
    ms = (time.perf_counter() - t0) * 1e3
    ok = report(1, "ReLU ledger exactness", not bad,
                f"{len(TABLE_ROWS)} rows exact vs per-cell oracle; printed figures at 0.1K (ImageNet +-1K); "
                f"(5,6)->30720 and (15,15)->230400 asserted as exact counts; mismatches={bad}; {ms:.1f} ms")
    assert ok


def test_criterion_2_flop_balanced():
    rows = [(17, 5, (0, 1), 26.1), (14, 10, (0, 5), 53.7)]
    got = [acc.count_flop_balanced(NetworkPlan(32, 32, c, d, p, balancing="flop")).relus for c, d, p, _ in rows]
    exact = [_cells_oracle(32, 32, c, d, p, 2) for c, d, p, _ in rows]
    truncated = [int(g / 100) / 10 for g in got]
    ok = got == exact and truncated == [r[3] for r in rows]
    report(2, "FLOP-balanced ledger", ok,
           f"counts {got} truncate to {truncated}K (printed 26.1K, 53.7K); (C=12,D=8) row excluded")
    assert ok


def test_criterion_3_placement_invariance():
    t0 = time.perf_counter()
    violations = 0
    checked = 0
    for depth in range(2, 11):
        for c in (1, 3, 5, 16):
            totals = {}
            flop = {}
            for i, j in itertools.combinations(range(depth), 2):
                totals[(i, j)] = acc.count_sphynx(NetworkPlan(32, 32, c, depth, (i, j))).relus
                flop[(i, j)] = acc.count_flop_balanced(
                    NetworkPlan(32, 32, c, depth, (i, j), balancing="flop")).relus
                checked += 1
            violations += len(set(totals.values())) != 1
            for (i, j), v in flop.items():
                if i > 0 and flop[(i - 1, j)] > v:
                    violations += 1
                if j - 1 > i and flop[(i, j - 1)] > v:
                    violations += 1
    secs = time.perf_counter() - t0
    ok = violations == 0 and secs < 1.0
    report(3, "placement invariance", ok,
           f"{checked} plans (D<=10, all C(D,2) placements, C in 1,3,5,16); violations={violations}; {secs:.2f} s")
    assert ok


def test_criterion_4_gumbel():
    t0 = time.perf_counter()
    beta = np.random.default_rng(41).normal(size=10)
    p_random = go.chi2_pvalue(beta, 100_000, seed=43)

    dist, clear, threshold = go.low_tau_draws(beta, 1e-3, 2000, seed=44)
    clear_ok = bool(np.all(dist[clear] <= 1e-3))
    ties = int((~clear).sum())
    p_tie = go.near_tie_probability(beta, threshold)
    tie_rate_ok = stats.binomtest(ties, clear.size, p_tie).pvalue > 0.01

    rng = np.random.default_rng(45)
    high = max(np.abs(gc.gumbel_softmax_st(gc.Tensor(rng.uniform(-10, 10, 10)), 1e6, rng).relaxed.value - 0.1).max()
               for _ in range(2000))
    secs = time.perf_counter() - t0
    ok = p_random > 0.01 and clear_ok and tie_rate_ok and high < 1e-3 and secs < 10
    report(4, "Gumbel correctness", ok,
           f"chi2 vs softmax(beta), K=10, 1e5 draws: p={p_random:.3f} (alpha 0.01); "
           f"tau=1e-3: {int(clear.sum())}/{clear.size} draws within 1e-3 of one-hot, the other {ties} are "
           f"near-ties (gap < {threshold:.2e}, expected rate {p_tie:.4f}); tau=1e6 max dev {high:.1e}; {secs:.1f} s")
    assert ok


def test_criterion_5_algorithm_efficacy():
    t0 = time.perf_counter()
    cfg = pl.desk_config()
    lines = []
    ratio_ok = True
    matched = {}
    for family, make in (("bowl", lambda s: pl.QuadraticBowlEvaluator.planted(6, best=s % 6, margin=0.5, seed=s)),
                         ("synthetic", lambda s: pl.SyntheticEvaluator.planted(6, best=s % 6, seed=s))):
        hits = 0
        for seed in range(10):
            ev = make(seed)
            search = pl.run_search(ev, cfg, seed=seed)
            grid = pl.grid_search(ev, cfg, seed=seed)
            hits += search.picked == grid.argmin()
            per_epoch = (search.gradient_steps / cfg.epochs) / (grid.gradient_steps / cfg.epochs)
            ratio_ok &= per_epoch <= 2.2 / 6
        matched[family] = hits
        lines.append(f"{family} {hits}/10")
    secs = time.perf_counter() - t0
    ok = all(h >= 9 for h in matched.values()) and ratio_ok and secs < 300
    report(5, "placement search efficacy", ok,
           f"pick == grid argmin: {', '.join(lines)}; steps per epoch ratio 2/6 <= 2.2/6: {ratio_ok}; {secs:.0f} s")
    assert ok


def test_criterion_6_autodiff():
    t0 = time.perf_counter()
    worst = fdcheck.run(instances=100, seed=0)
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < fdcheck.TOL for v in worst.values()) and secs < 30
    report(6, "autodiff finite differences", ok,
           f"{len(worst)} ops x 100 instances, step {fdcheck.STEP:g}; worst relative error "
           f"{worst[top]:.1e} ({top}); {secs:.1f} s")
    assert ok


def test_criterion_7_discretization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    invalid = mismatched = 0
    for _ in range(10_000):
        n = int(rng.integers(4, 9))
        ops = rx.DEFAULT_OPS if rng.random() < 0.5 else LEGACY_OPS
        state = rx.RelaxationState.init(n, ops, rng, scale=float(rng.choice([0.01, 1.0, 5.0])))
        g = rx.discretize(state)
        invalid += not cg.validate(g).ok
        mismatched += (g.normal != oracle_cell(state.normal, n, ops)) + (g.reduce != oracle_cell(state.reduce, n, ops))
    secs = time.perf_counter() - t0
    ok = invalid == 0 and mismatched == 0 and secs < 30
    report(7, "discretization", ok,
           f"10000 fuzzed states: invalid={invalid}, oracle mismatches={mismatched}; {secs:.1f} s")
    assert ok


def test_criterion_8_protocol():
    t0 = time.perf_counter()
    codec = ps.FixedPointCodec()
    mismatches = runs = 0
    worst = 0.0
    for dims in ([8, 6, 4], [8, 6, 5, 4]):
        rng = np.random.default_rng(len(dims))
        for _ in range(100):
            dense = ps.DenseModel.random(dims, rng)
            enc = ps.EncodedModel.encode(dense, codec)
            for _ in range(100):
                x = rng.uniform(-2, 2, dims[0])
                res = ps.online_inference(enc, x, ps.offline_phase(enc, rng))
                mismatches += res.output != ps.plaintext_forward(enc, codec.encode_vec(x))
                worst = max(worst, float(np.abs(np.array(res.decoded(codec)) - dense.forward(x)).max()))
                runs += 1
    small = ps.FixedPointCodec(scale_bits=0, modulus=101, guard_bits=0)
    model = ps.EncodedModel([[[1, 2, 3], [4, 5, 6]]], [[0, 0]], small, [3, 2])
    audit = ps.transcript_audit(ps.share_slot_samples(model, [7, 11, 13], 100_000, np.random.default_rng(8)), 101)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 2 ** -8 and audit.uniform and secs < 120
    pmin = min(s["p_value"] for s in audit.slots)
    report(8, "protocol equivalence", ok,
           f"{runs} inferences (100 models x 100 inputs, 8-6-4 and 8-6-5-4): field mismatches={mismatches}, "
           f"max real error {worst:.1e} <= 2^-8; audit p=101 1e5 trials uniform={audit.uniform} "
           f"(min slot p={pmin:.3f}); {secs:.0f} s")
    assert ok


def test_criterion_9_latency():
    t0 = time.perf_counter()
    tiny = lat.fixture("tiny_imagenet")
    model = lat.calibrate([(tiny[0].relus, tiny[0].latency_ms), (tiny[1].relus, tiny[1].latency_ms)])
    errors = [abs(lat.predict(model, r.relus) - r.latency_ms) / r.latency_ms for r in tiny[2:]]
    ratios = [r.latency_ms / r.relus for r in lat.fixture("imagenet")]
    spread = max(ratios) / min(ratios) - 1
    secs = time.perf_counter() - t0
    ok = max(errors) < 0.05 and spread < 0.03 and secs < 1
    report(9, "latency model", ok,
           f"{model.per_relu_us:.2f} us/ReLU + {model.base_ms:.0f} ms; held-out errors "
           f"{', '.join(f'{e:.1%}' for e in errors)}; ImageNet latency/ReLU spread {spread:.2%}")
    assert ok


def test_criterion_10_pareto():
    t0 = time.perf_counter()
    rows = lat.fixture("cifar100")
    front = lat.pareto_frontier(rows)
    cells_on = all(r in front for r in rows if r.label == "cells")
    crypto = next(r for r in rows if r.label == "CryptoNAS" and r.latency_ms == 1670)
    rng = np.random.default_rng(10)
    recs = [lat.RunRecord(f"r{i}", 1, float(rng.integers(1, 200)), float(rng.integers(0, 100)))
            for i in range(1000)]
    brute_ok = lat.pareto_frontier(recs) == brute_frontier(recs)
    secs = time.perf_counter() - t0
    ok = cells_on and crypto not in front and brute_ok and secs < 1
    report(10, "Pareto frontier", ok,
           f"all own rows on frontier={cells_on}; CryptoNAS 1670 ms dominated={crypto not in front}; "
           f"1000 random records equal brute force={brute_ok}")
    assert ok


def test_criterion_11_cli_determinism(tmp_path):
    inputs = clicases.write_inputs(tmp_path / "inputs")
    differing, failed = [], []
    for name, argv in clicases.cases(inputs).items():
        a = clicases.run_with_artifacts(argv, tmp_path / name / "a")
        b = clicases.run_with_artifacts(argv, tmp_path / name / "b")
        if a[0] != 0:
            failed.append(name)
        if a != b:
            differing.append(name)
    ok = not differing and not failed
    report(11, "CLI determinism", ok,
           f"{len(clicases.cases(inputs))} subcommands run twice: stdout and artifacts byte-identical; "
           f"differing={differing}, failed={failed}")
    assert ok
