"""Acceptance criteria at pinned tolerances; one PASS/FAIL line per criterion in the summary."""

import csv
import json
import time

import numpy as np
import pytest

from qslq import cli
from qslq import clifford as cl
from qslq import verify as vf
from qslq.lq import flow_reconstruct_P
from qslq.riccati import integrate_riccati

TOL = vf.DEFAULT_TOLERANCES


def _rows(results, *prefixes):
    return [r for r in results if r.check.split(":")[0] in prefixes]


def _worst(rows):
    """Largest measured/tolerance ratio."""
    return max(r.measured / r.tolerance for r in rows)


def _ladder(results, key):
    return next(r for r in results if r.check == f"{key}:ladder")


def _fmt_orders(results, keys):
    # an order of None means every ladder error sat below the floor
    orders = {k: _ladder(results, k).order for k in keys}
    return ", ".join(f"{k} {'exact' if o is None else f'{o:.3f}'}" for k, o in orders.items())


@pytest.fixture(scope="module")
def random_suite():
    """15 random PSD problems per (N, m) cell, 100 random controls each, plus the scalar ladder."""
    cfg = vf.SuiteConfig(problems_per_cell=15, structures=("random",), flow_structures=(), random_controls=100)
    start = time.perf_counter()
    results = vf.run_suite(cfg)
    return results, time.perf_counter() - start


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """The CLI ``verify`` command with shipped defaults."""
    out = tmp_path_factory.mktemp("verify-defaults")
    code = cli.main(["--command", "verify", "--out", str(out)])
    results = cli.results_from_json((out / "results.json").read_text())
    return code, results, out


def test_criterion_01_algebra(report_criterion):
    cfg = vf.SuiteConfig()
    start = time.perf_counter()
    rows = [r for N in range(1, 9) for r in vf.algebra_checks(cfg, N) if r.check in ("algebra", "jordan_wigner")]
    jw = 0.0
    for N in range(1, 5):
        dt = 1.0 / N
        space = cl.CliffordSpace(N, dt)
        gam = vf.jordan_wigner_gammas(N, dt)
        mats = [vf.jordan_wigner_matrix(space.basis(S).coeffs, N, dt, gam) for S in range(space.dim)]
        for S in range(space.dim):
            for T in range(space.dim):
                prod = cl.mul(space.basis(S), space.basis(T))
                jw = max(jw, float(np.max(np.abs(vf.jordan_wigner_matrix(prod.coeffs, N, dt, gam) - mats[S] @ mats[T]))))
    elapsed = time.perf_counter() - start
    worst = max(r.measured for r in rows)
    ok = worst <= 1e-12 and jw <= 1e-12 and elapsed <= 10.0
    report_criterion(1, "algebra exactness", ok,
                     f"CAR/trace/parity/m(1) max {worst:.1e}, all JW basis products max {jw:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_brownian_square(report_criterion):
    worst = 0.0
    for N in range(1, 11):
        space = cl.CliffordSpace(N, 1.0 / N)
        for k in range(N + 1):
            W = cl.brownian(space, k)
            worst = max(worst, float(np.max(np.abs((cl.mul(W, W) - (k / N) * space.one()).coeffs))))
    ok = worst <= 1e-12
    report_criterion(2, "W(t)^2 = t", ok, f"max defect {worst:.1e} over every node, N <= 10")
    assert ok


def test_criterion_03_ito_isometry(report_criterion):
    N = 8
    space = cl.CliffordSpace(N, 1.0 / N)
    rng = vf.make_rng(3)
    worst = 0.0
    for _ in range(100):
        f = [space.random_element(rng, k) * rng.exponential() for k in range(N)]
        rhs = sum(cl.norm(x) ** 2 for x in f) * space.dt
        worst = max(worst, abs(cl.norm(cl.stochastic_integral(f)) ** 2 - rhs) / rhs)
    ok = worst <= 1e-10
    report_criterion(3, "Ito-Clifford isometry", ok, f"max relative defect {worst:.1e} on 100 integrands, N=8")
    assert ok


def test_criterion_04_martingale_representation(report_criterion):
    N = 10
    space = cl.CliffordSpace(N, 1.0 / N)
    rng = vf.make_rng(4)
    worst = 0.0
    for _ in range(100):
        a = space.random_element(rng)
        mean, kern = cl.martingale_repr(a)
        worst = max(worst, float(np.max(np.abs(cl.martingale_reconstruct(mean, kern).coeffs - a.coeffs))))
    ok = worst <= 1e-12
    report_criterion(4, "martingale representation", ok, f"max round-trip error {worst:.1e} on 100 elements, N=10")
    assert ok


def test_criterion_05_value_function(random_suite, report_criterion):
    results, elapsed = random_suite
    rows = _rows(results, "value_function")
    order = _ladder(results, "value_function").order
    ok = all(r.passed for r in rows) and len(rows) == 3 * 2 * 15 + 1 and order >= 0.9 and elapsed <= 300
    report_criterion(5, "value function", ok,
                     f"worst |J-V|/(C dt) {_worst(rows[:-1]):.2f} on 90 problems, ladder order {order:.3f}, "
                     f"{elapsed:.0f}s")
    assert ok


def test_criterion_06_optimality_vs_qp(random_suite, report_criterion):
    results, _ = random_suite
    rows = _rows(results, "qp_lower", "qp_upper", "qp_convexity")
    ok = all(r.passed for r in rows)
    report_criterion(6, "optimality vs QP oracle", ok,
                     f"lower {max(r.measured for r in _rows(results, 'qp_lower')):.1e}, "
                     f"upper/(C dt) {_worst(_rows(results, 'qp_upper')[:-1]):.2f}, "
                     f"convexity {max(r.measured for r in _rows(results, 'qp_convexity')):.1e} over 100 controls")
    assert ok


def test_criterion_07_completion_of_squares(random_suite, report_criterion):
    results, _ = random_suite
    rows = _rows(results, "completion_of_squares")
    order = _ladder(results, "completion_of_squares").order
    ok = all(r.passed for r in rows) and order >= 0.9
    report_criterion(7, "completion of squares", ok, f"worst ratio {_worst(rows):.2f}, ladder order {order:.3f}")
    assert ok


def test_criterion_08_first_order_condition(random_suite, report_criterion):
    results, _ = random_suite
    rows = _rows(results, "stationarity", "convex_variation", "spike_variation")
    order = _ladder(results, "stationarity").order
    ok = all(r.passed for r in rows) and order >= 0.9
    report_criterion(8, "first-order condition", ok,
                     f"stationarity ratio {_worst(_rows(results, 'stationarity')):.2f} order {order:.3f}, "
                     f"variations ratio {_worst(_rows(results, 'convex_variation', 'spike_variation')):.2f}")
    assert ok


def test_criterion_09_second_order_condition(random_suite, report_criterion):
    results, _ = random_suite
    rows = _rows(results, "second_order", "min_eig_K")
    ok = all(r.passed for r in rows)
    report_criterion(9, "second-order condition", ok,
                     f"most negative eigenvalue {max(r.measured for r in rows):.1e} (tolerance 1e-8)")
    assert ok


FLOW_KEYS = ("flow_duality", "flow_P", "flow_Pi", "flow_gain", "flow_pi_relation", "flow_hermitian")


def test_criterion_10_flow_identities(default_run, report_criterion):
    _, results, _ = default_run
    rows = [r for r in _rows(results, *FLOW_KEYS) if not r.check.endswith(":ladder")]
    ladders = [_ladder(results, k) for k in FLOW_KEYS]
    ok = bool(rows) and all(r.passed for r in rows + ladders)
    report_criterion(10, "flow identities (scalar family)", ok,
                     f"worst ratio {_worst(rows):.2f}; orders {_fmt_orders(results, FLOW_KEYS)}")
    assert ok


@pytest.mark.xfail(strict=True, reason="weak-solution ladder slope 0.85 < 0.9 over N=4..8; analysed in the notes")
def test_criterion_11_weak_solution(default_run, random_suite, report_criterion):
    _, results, _ = default_run
    rows = [r for r in _rows(results, "weak_solution") + _rows(random_suite[0], "weak_solution")
            if not r.check.endswith(":ladder")]
    lad = _ladder(results, "weak_solution")
    ok = all(r.passed for r in rows) and lad.passed
    report_criterion(11, "weak-solution pairing", ok,
                     f"magnitudes within C dt on {len(rows)} problems (worst ratio {_worst(rows):.2f}), "
                     f"ladder order {lad.order:.3f} < 0.9")
    assert ok


def test_criterion_11_magnitudes_hold(default_run, random_suite):
    """The magnitude part of the weak-solution criterion passes; only the slope falls short."""
    for results in (default_run[1], random_suite[0]):
        rows = _rows(results, "weak_solution")
        assert rows and all(r.measured <= r.tolerance for r in rows)


def test_criterion_12_galerkin(default_run, random_suite, report_criterion):
    rows = _rows(default_run[1], "galerkin_monotone", "galerkin_endpoint") + _rows(
        random_suite[0], "galerkin_monotone", "galerkin_endpoint")
    mono = max(r.measured for r in rows if r.check.startswith("galerkin_monotone"))
    end = max(r.measured for r in rows if r.check.startswith("galerkin_endpoint"))
    ok = all(r.passed for r in rows) and end == 0.0
    report_criterion(12, "Galerkin truncation", ok, f"max increase {mono:.1e}, full-level error {end:g}")
    assert ok


def test_criterion_13_scalar_oracle(default_run, report_criterion):
    _, results, _ = default_run
    rows = _rows(results, "scalar_riccati_oracle", "scalar_lyapunov_oracle") + [_ladder(results, "riccati_substeps")]
    ok = len(rows) > 1 and all(r.passed for r in rows)
    report_criterion(13, "scalar-reduction oracle", ok,
                     f"Riccati {max(r.measured for r in _rows(results, 'scalar_riccati_oracle')):.1e}, "
                     f"Lyapunov {max(r.measured for r in _rows(results, 'scalar_lyapunov_oracle')):.1e}, "
                     f"substep study {rows[-1].measured:.1e} order {rows[-1].order:.2f}")
    assert ok


def test_criterion_14_reproducibility(tmp_path, report_criterion):
    doc = {"command": "verify", "N_list": [4, 6], "m_list": [1, 2], "problems_per_cell": 2,
           "ladder": [4, 5, 6], "plots": False, "seed": 11}
    blobs = []
    for par in (1, 2):
        out = tmp_path / f"par{par}"
        cfg = tmp_path / f"par{par}.json"
        cfg.write_text(json.dumps(dict(doc, out=str(out), parallel=par)))
        cli.main(["--config", str(cfg)])
        blobs.append((out / "results.csv").read_bytes())
    rows = blobs[0].count(b"\r\n") - 1
    ok = blobs[0] == blobs[1] and rows > 0
    report_criterion(14, "reproducibility", ok, f"results.csv byte-identical at parallel 1 and 2 ({rows} rows)")
    assert ok


def test_default_report_has_one_row_per_result(default_run):
    _, results, out = default_run
    rows = list(csv.DictReader((out / "results.csv").open(newline="")))
    assert len(rows) == len(results)
    assert [r["check"] for r in rows] == [r.check for r in results]
    man = json.loads((out / "manifest.json").read_text())
    assert man["checks"]["total"] == len(results) and man["status"] == "complete"
    assert (out / "check_margins.png").exists()


@pytest.mark.xfail(strict=True, reason="only the weak-solution ladder order fails; see criterion 11")
def test_verify_shipped_defaults_exit_0(default_run):
    code, results, _ = default_run
    assert code == 0, [r.check for r in results if not r.passed]


def test_only_known_failure_in_default_run(default_run):
    _, results, _ = default_run
    assert [r.check for r in results if not r.passed] == ["weak_solution:ladder"]


@pytest.mark.xfail(strict=True, reason="operator flow identities need the scalar-like structure; "
                                       "random problems leave an O(1) defect")
def test_flow_identities_on_random_problems():
    worst = 0.0
    for N in (4, 6):
        spec = vf.random_problem(N, 1, seed=N)
        path, gains = integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid)
        fr = flow_reconstruct_P(spec, gains.Theta, path)
        worst = max(worst, fr.Pi_error.max() / spec.grid.dt)
    assert worst <= TOL["flow_Pi"]
