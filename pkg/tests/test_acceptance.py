"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest

from dln_lab.analysis import (
    distance_sweep, ntk_matrix, ntk_sample, ntk_tensor, operator_norm_bound_check,
    operator_norm_bound_probability,
)
from dln_lab.cli import FLAT_SLOPE_TOL, EXIT_OK, preset, run_config
from dln_lab.core import NetShape, Params, init_gaussian, loss_gradient, product_map
from dln_lab.costs import LocalizedCost, MCCost, MSECost, TraceCost, homogeneous_gradient, homogeneous_value
from dln_lab.escape import (
    GridSpec, default_radius, escape_profile, escape_time_scaling, flow_residual,
    homogeneous_path, homogeneous_rescale_check, refine_escape_path,
)
from dln_lab.flow import FlowConfig, integrate
from dln_lab.symmetry import (
    NtkParametrizedCost, apply_rotation, balanced_init, balancedness_defect, include,
    ntk_param_map, random_rotation,
)

from oracles import central_difference_gradient, jacobian_of_product, loss_from_flat


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def _random_cost(rng, kind, n_out, n_in):
    if kind == 0:
        X, Y = rng.standard_normal((n_in, 6)), rng.standard_normal((n_out, 6))
        return MSECost(X, Y), lambda A: float(np.sum((A @ X - Y) ** 2)) / 6
    if kind == 1:
        A_star = rng.standard_normal((n_out, n_in))
        mask = rng.random((n_out, n_in)) < 0.6
        mask[0, 0] = True
        obs = [tuple(ij) for ij in np.argwhere(mask)]
        return MCCost(A_star, obs), lambda A: sum((A[i, j] - A_star[i, j]) ** 2 for i, j in obs) / len(obs)
    G = rng.standard_normal((n_out, n_in))
    return TraceCost(G), lambda A: float(np.sum(G * A))


def test_ac01_gradient_correctness(acceptance_report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    with Timer() as tm:
        for k in range(200):
            L = int(rng.integers(1, 5))
            widths = tuple(int(n) for n in rng.integers(1, 6, size=L + 1))
            shape = NetShape(widths)
            cost, ref = _random_cost(rng, k % 3, shape.n_out, shape.n_in)
            theta = init_gaussian(shape, 0.8, k)
            fd = central_difference_gradient(
                lambda x: loss_from_flat(x, shape.layer_shapes(), ref), theta.flat(), h=1e-5)
            g = loss_gradient(theta, cost).flat()
            scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
            worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    acceptance_report("AC1 gradient vs finite differences", worst <= 1e-6 and tm.seconds < 10,
                      f"max rel err {worst:.2e} over 200 instances, {tm.seconds:.1f}s")


def test_ac02_symmetry_suite(acceptance_report):
    rng = np.random.default_rng(7)
    rot_inv = grad_eq = incl = flow_eq = 0.0
    with Timer() as tm:
        for k in range(20):
            L, w = 2 + k % 3, 2 + k % 4
            cost = MSECost(rng.standard_normal((3, 5)), rng.standard_normal((2, 5)))
            theta = init_gaussian(NetShape.rectangular(L, w, 3, 2), 0.7, k)
            R = random_rotation(w, L, 100 + k)
            A = product_map(theta)
            rot_inv = max(rot_inv, np.linalg.norm(product_map(apply_rotation(R, theta)) - A)
                          / np.linalg.norm(A))
            g = loss_gradient(theta, cost)
            diff = loss_gradient(apply_rotation(R, theta), cost) - apply_rotation(R, g)
            grad_eq = max(grad_eq, diff.norm() / g.norm())
            big = include(theta, w + 2)
            incl = max(incl, (loss_gradient(big, cost) - include(g, w + 2)).norm() / g.norm(),
                       np.linalg.norm(product_map(big) - A) / np.linalg.norm(A))
        toy = MSECost(np.eye(2), np.diag([2.0, 1.0]))
        for L in (2, 3, 4):
            theta = init_gaussian(NetShape.rectangular(L, 3, 2, 2), 0.5, L)
            R = random_rotation(3, L, L)
            cfg = FlowConfig(step_size=1e-2, max_steps=900, snapshot_every=100,
                             integrator="rk4", keep_params=True)
            a = integrate(theta, toy, cfg)
            b = integrate(apply_rotation(R, theta), toy, cfg)
            assert len(a.params) == 10
            for pa, pb in zip(a.params, b.params):
                flow_eq = max(flow_eq, (apply_rotation(R, pa) - pb).norm())
    ok = rot_inv <= 1e-10 and grad_eq <= 1e-9 and incl <= 1e-10 and flow_eq <= 1e-8 and tm.seconds < 30
    acceptance_report("AC2 symmetry suite", ok,
                      f"rotation {rot_inv:.1e}, equivariance {grad_eq:.1e}, inclusion {incl:.1e}, "
                      f"flow {flow_eq:.1e}, {tm.seconds:.1f}s")


def test_ac03_homogeneous_rescale(acceptance_report):
    G = np.random.default_rng(0).standard_normal((2, 2))
    cfg = FlowConfig(step_size=1e-5, integrator="rk4")
    worst = 0.0
    with Timer() as tm:
        for L in (2, 3):
            theta0 = init_gaussian(NetShape.rectangular(L, 2, 2, 2), 0.3, 1)
            for lam in (0.5, 2.0):
                worst = max(worst, homogeneous_rescale_check(theta0, G, lam, 0.3, cfg))
    acceptance_report("AC3 homogeneous rescale law", worst <= 1e-6 and tm.seconds < 60,
                      f"max discrepancy {worst:.1e}, {tm.seconds:.1f}s")


def test_ac04_escape_direction_equation(acceptance_report):
    rng = np.random.default_rng(11)
    eq_err = h_err = 0.0
    checked = 0
    while checked < 50:
        G = rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(2, 6))))
        s = np.linalg.svd(G, compute_uv=False)
        if (s[0] - s[1]) / s[0] < 0.1:
            continue
        checked += 1
        for L in (2, 3, 4):
            prof = escape_profile(TraceCost(G), L)
            rho = prof.rho_star
            eq_err = max(eq_err, (homogeneous_gradient(rho, G) + rho * prof.s_star).norm())
            h_err = max(h_err, abs(homogeneous_value(rho, G) + prof.s_star / L))
    acceptance_report("AC4 escape-direction equation", eq_err <= 1e-9 and h_err <= 1e-10,
                      f"equation residual {eq_err:.1e}, H error {h_err:.1e}")


@pytest.mark.slow
def test_ac05_escape_time_scaling(acceptance_report):
    toy = MSECost(np.eye(2), np.diag([2.0, 1.0]))
    cfg = FlowConfig(step_size=1e-3, max_steps=200_000, integrator="rk45", rtol=1e-9, atol=1e-12)
    alphas = [1e-2, 1e-3, 1e-4, 1e-5]
    with Timer() as tm:
        fits = {}
        for L in (2, 3):
            theta0 = init_gaussian(NetShape.rectangular(L, 2, 2, 2), 1.0, 0)
            fits[L] = escape_time_scaling(theta0, toy, cfg, 0.5, alphas)
    f2, f3 = fits[2], fits[3]
    ok2 = f2["r_squared"] >= 0.99 and abs(f2["slope"] - f2["theory_slope"]) <= 0.05 * f2["theory_slope"]
    ok3 = abs(f3["slope"] + 1.0) <= 0.1
    acceptance_report("AC5 escape-time scaling", ok2 and ok3 and tm.seconds < 300,
                      f"L=2 slope {f2['slope']:.4f} (1/s*={f2['theory_slope']:.4f}, "
                      f"R2={f2['r_squared']:.5f}); L=3 log-log slope {f3['slope']:.4f}; {tm.seconds:.1f}s")


@pytest.mark.slow
def test_ac06_figure1_desk_scale(acceptance_report, tmp_path):
    with Timer() as tm:
        status = run_config(preset("figure1"), tmp_path)
    s = json.loads((tmp_path / "summary.json").read_text())
    ranks = s["rank_sequence"]
    ok = (status == EXIT_OK and ranks == [1, 2, 3] and s["plateau_count"] == 3
          and s["final_train_loss"] <= 1e-6 and s["final_test_loss"] <= 1e-2 and tm.seconds < 600)
    acceptance_report("AC6 figure-1 saddle-to-saddle", ok,
                      f"ranks {ranks}, plateaus {s['plateau_count']}, train {s['final_train_loss']:.1e}, "
                      f"test {s['final_test_loss']:.1e}, {tm.seconds:.1f}s")


@pytest.mark.slow
def test_ac07_greedy_matches_small_init_flow(acceptance_report, tmp_path):
    with Timer() as tm:
        status = run_config(preset("greedy"), tmp_path)
    c = json.loads((tmp_path / "summary.json").read_text())["comparison"]
    ok = (status == EXIT_OK and c["relative_difference"] <= 1e-2 and c["ranks_match"]
          and tm.seconds < 300)
    acceptance_report("AC7 greedy vs small-alpha flow", ok,
                      f"rel diff {c['relative_difference']:.1e}, flow ranks {c['flow_ranks']}, "
                      f"greedy ranks {c['greedy_ranks']}, {tm.seconds:.1f}s")


def test_ac08_distance_exponents(acceptance_report):
    A_star = 10.0 * np.arange(1.0, 6.0)[:, None]
    widths = [8, 16, 32, 64, 128]
    lines, ok = [], True
    with Timer() as tm:
        for gamma in (0.5, 1.5):
            res = distance_sweep(widths, gamma, range(7), 3, A_star)
            sad, mini = res["saddle"], res["minimum"]
            ok &= sad.relative_error() <= 0.15
            if gamma < 1:
                ok &= mini.relative_error() <= 0.15
            else:
                ok &= abs(mini.slope) <= FLAT_SLOPE_TOL
            lines.append(f"gamma={gamma}: saddle {sad.slope:.3f} (theory {sad.theory_slope:.3f}), "
                         f"minimum {mini.slope:.3f} (theory {mini.theory_slope:.3f})")
    acceptance_report("AC8 constructive distance exponents", ok and tm.seconds < 300,
                      "; ".join(lines) + f"; {tm.seconds:.1f}s")


def test_ac09_ntk_expectation(acceptance_report):
    with Timer() as tm:
        res = ntk_sample(3, 64, 1.0, 200, 0)
        jac_err = 0.0
        for widths in [(2, 3, 2), (3, 2, 4, 2), (2, 3, 3, 3, 2)]:
            theta = init_gaussian(NetShape(widths), 0.8, 1)
            J = jacobian_of_product(theta.layers)
            jac_err = max(jac_err, float(np.max(np.abs(ntk_matrix(ntk_tensor(theta)) - J @ J.T))))
    rel = abs(res["diag_mean"] - 3.0) / 3.0
    acceptance_report("AC9 NTK expectation and Jacobian oracle",
                      rel <= 0.05 and jac_err <= 1e-8 and tm.seconds < 120,
                      f"diag mean {res['diag_mean']:.4f} vs 3 ({rel:.1%}), Jacobian err {jac_err:.1e}, "
                      f"{tm.seconds:.1f}s")


def test_ac10_ntk_parametrization_equivalence(acceptance_report):
    rng = np.random.default_rng(3)
    worst = 0.0
    with Timer() as tm:
        for L in (2, 3):
            shape = NetShape.rectangular(L, 4, 3, 2)
            base = MSECost(rng.standard_normal((3, 5)), rng.standard_normal((2, 5)))
            ntk_cost = NtkParametrizedCost(base, shape)
            theta_ntk = init_gaussian(shape, 1.0, L)
            theta0, c = ntk_param_map(theta_ntk)
            eta, n = 1e-4, 10_000
            cfg = FlowConfig(step_size=eta, max_steps=n, snapshot_every=500, integrator="rk4",
                             keep_params=True)
            classical = integrate(theta0, base, cfg)
            ntk = integrate(theta_ntk, ntk_cost, cfg.replace(step_size=c * eta))
            for pc, pn in zip(classical.params, ntk.params):
                worst = max(worst, float(np.max(np.abs(product_map(pc) - ntk_cost.matrix(pn)))))
    acceptance_report("AC10 NTK-parametrization equivalence", worst <= 1e-6 and tm.seconds < 60,
                      f"sup error {worst:.1e}, {tm.seconds:.1f}s")


def test_ac11_balancedness_invariance(acceptance_report):
    T = np.random.default_rng(5).standard_normal((3, 3))
    cost = MSECost(np.eye(3), T)
    with Timer() as tm:
        theta = balanced_init(NetShape.rectangular(3, 4, 3, 3), 0.5, 0)
        traj = integrate(theta, cost, FlowConfig(step_size=1e-4, max_steps=10_000,
                                                 snapshot_every=1000, integrator="rk4"))
    defect = balancedness_defect(traj.final)
    moved = (traj.final - theta).norm()
    acceptance_report("AC11 balancedness invariance", defect <= 1e-6 and moved > 0.1 and tm.seconds < 60,
                      f"defect {defect:.1e} after t=1 (parameters moved {moved:.2f}), {tm.seconds:.1f}s")


@pytest.mark.slow
def test_ac12_regime_trend(acceptance_report, tmp_path):
    with Timer() as tm:
        status = run_config(preset("figure3"), tmp_path)
    s = json.loads((tmp_path / "summary.json").read_text())
    rows = {(t["width"], t["gamma"]): t for t in s["table"]}
    ok, parts = status == EXIT_OK, []
    for w in (16, 64):
        lazy, s2s = rows[(w, 0.75)], rows[(w, 1.5)]
        ok &= s2s["median_test_loss"] < lazy["median_test_loss"]
        ok &= s2s["median_rank"] <= lazy["median_rank"]
        parts.append(f"w={w}: test {lazy['median_test_loss']:.3g} -> {s2s['median_test_loss']:.3g}, "
                     f"rank {lazy['median_rank']:g} -> {s2s['median_rank']:g}")
    acceptance_report("AC12 regime trend (gamma 0.75 -> 1.5)", ok and tm.seconds < 600,
                      "; ".join(parts) + f"; {tm.seconds:.1f}s")


def test_ac13_operator_norm_bound(acceptance_report):
    with Timer() as tm:
        freq = operator_norm_bound_check(50, 50, 1.0, 2.0, 1000, 0)
    p = operator_norm_bound_probability(2.0)
    floor = p - 3 * math.sqrt(p * (1 - p) / 1000)
    acceptance_report("AC13 operator-norm bound", freq >= floor and tm.seconds < 30,
                      f"frequency {freq:.3f} >= {floor:.3f}, {tm.seconds:.1f}s")


def test_ac14_fixed_point_refinement(acceptance_report):
    toy = MSECost(np.eye(2), np.diag([2.0, 1.0]))
    with Timer() as tm:
        lin = TraceCost(toy.zero_gradient())
        prof_lin = escape_profile(lin, 2)
        path_lin, ratios_lin = refine_escape_path(lin, prof_lin, GridSpec(width=2), tol=1e-12)
        unchanged = np.array_equal(path_lin.matrix(),
                                   homogeneous_path(prof_lin, path_lin.times, 2).matrix())
        prof = escape_profile(toy, 2)
        path, ratios = refine_escape_path(toy, prof, GridSpec(width=2), tol=1e-12)
        loc = LocalizedCost(toy, TraceCost(prof.G), default_radius(prof.s1, 2))
        residual = flow_residual(path, loc)
    ok = unchanged and ratios_lin == [] and ratios and max(ratios) < 1 and residual <= 1e-4
    acceptance_report("AC14 fixed-point path refinement", ok and tm.seconds < 120,
                      f"homogeneous unchanged={unchanged}; ratios {ratios[0]:.3f}..{ratios[-1]:.3f}, "
                      f"flow residual {residual:.1e}, {tm.seconds:.1f}s")
