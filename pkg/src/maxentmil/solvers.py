"""Joint estimation over all bags.

Three solvers share one geometry: the (m, N) parameter matrix whose column
i is bag i's density parameter.

* fit_mde       — column-wise maximum likelihood (separable Newton fits).
* fit_rmde      — likelihood plus eta * nuclear norm, by proximal gradient.
* fit_cmen      — nuclear-norm minimization subject to the likelihood
                  confidence constraint g(L) <= eps, by an accelerated
                  proximal inner loop nested in a bisection on the dual
                  multiplier z (CMENA).

g(L) is the total KL divergence of the columns from the unrestricted ML
estimates, weighted by bag sizes; eps = a*N*m/2 is its parameter-free
in-probability ceiling, so the constraint needs no tuning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError
from .lowrank import nuclear_norm, numeric_rank, soft_threshold, svd
from .maxent import (
    BasisGrid,
    NewtonConfig,
    SufficientStats,
    fit_sde,
    fit_sde_relaxed,
)

RANK_TOL = 1e-8  # threshold for the ranks recorded in fit reports


@dataclass(frozen=True)
class LambdaMatrix:
    """Joint parameter matrix; column i belongs to bag_ids[i]."""

    data: np.ndarray  # (m, N)
    bag_ids: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError("data must be an (m, N) matrix")
        if not np.isfinite(data).all():
            raise ValueError("data entries must be finite")
        if data.shape[1] != len(self.bag_ids):
            raise ValueError("one bag id per column required")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bag_ids", tuple(self.bag_ids))

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n_bags(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CmenaConfig:
    """Knobs for the constrained solver; defaults follow the stopping rule
    MaxIter <= 100, objTol < 1e-2, consTol < 1e-1."""

    a: float = 1.0
    max_outer: int = 30
    max_inner: int = 100
    obj_tol: float = 1e-2
    cons_tol: float = 1e-1
    ls_alpha: float = 0.7
    tau_floor: float = 1e-3
    z_lo: float = 0.0
    z_hi_init: float = 1.0

    def __post_init__(self):
        if min(self.max_outer, self.max_inner) < 1:
            raise ValueError("iteration budgets must be >= 1")
        if min(self.obj_tol, self.cons_tol, self.tau_floor, self.z_hi_init) <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.ls_alpha < 1:
            raise ValueError("ls_alpha must be in (0, 1)")
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.z_lo < 0:
            raise ValueError("z_lo must be >= 0")


@dataclass
class FitReport:
    """Per-run traces and provenance for a joint solve."""

    solver: str = ""
    objective_trace: list = field(default_factory=list)
    constraint_trace: list = field(default_factory=list)
    rank_trace: list = field(default_factory=list)
    z_trace: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = True
    tau_used: float | None = None
    tau_unweighted: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "solver": self.solver,
            "objective_trace": [float(v) for v in self.objective_trace],
            "constraint_trace": [float(v) for v in self.constraint_trace],
            "rank_trace": [int(v) for v in self.rank_trace],
            "z_trace": [float(v) for v in self.z_trace],
            "inner_iters": [int(v) for v in self.inner_iters],
            "etas": [float(v) for v in self.etas],
            "warnings": list(self.warnings),
            "converged": bool(self.converged),
            "tau_used": None if self.tau_used is None else float(self.tau_used),
            "tau_unweighted": None if self.tau_unweighted is None else float(self.tau_unweighted),
            "wall_time": float(self.wall_time),
        }


class _JointProblem:
    """Batched likelihood terms for a fixed set of bags on one engine."""

    def __init__(self, engine: BasisGrid, stats_list: list[SufficientStats]):
        ms = {s.m for s in stats_list}
        if len(ms) != 1:
            raise ValueError(f"bags disagree on feature count: {sorted(ms)}")
        if ms.pop() != engine.m:
            raise ValueError("stats feature count does not match the basis")
        self.engine = engine
        self.ns = np.array([s.n for s in stats_list], dtype=float)
        self.phi_bars = np.column_stack([s.phi_bar for s in stats_list])
        self.bag_ids = tuple(s.bag_id for s in stats_list)

    @property
    def n_bags(self) -> int:
        return self.ns.shape[0]

    def nll(self, data: np.ndarray) -> float:
        """Total scaled negative log-likelihood sum_i n_i (Z_i - l_i.phibar_i)."""
        logz = self.engine.log_partition_many(data)
        return float(self.ns @ (logz - np.einsum("mi,mi->i", data, self.phi_bars)))

    def nll_and_grad(self, data: np.ndarray) -> tuple[float, np.ndarray]:
        logz, means = self.engine.logz_and_mean_many(data)
        val = float(self.ns @ (logz - np.einsum("mi,mi->i", data, self.phi_bars)))
        grad = (means - self.phi_bars) * self.ns[None, :]
        return val, grad


def _as_engine(spec, grid, engine: BasisGrid | None) -> BasisGrid:
    return engine if engine is not None else BasisGrid(spec, grid)


def fit_mde(
    stats_list: list[SufficientStats],
    spec,
    grid,
    cfg: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
) -> LambdaMatrix:
    """Unrestricted ML estimate: the objective separates over bags, so each
    column is an independent single-bag Newton fit.

    Raises one ConvergenceError listing every bag that failed.
    """
    if not stats_list:
        raise ValueError("need at least one bag")
    eng = _as_engine(spec, grid, engine)
    columns, failed = [], []
    for stats in stats_list:
        try:
            columns.append(fit_sde(stats, spec, grid, cfg, engine=eng).lam)
        except ConvergenceError:
            columns.append(np.zeros(eng.m))
            failed.append(stats.bag_id)
    if failed:
        raise ConvergenceError(
            f"{len(failed)} bag(s) failed to converge: {', '.join(failed)}",
            failed_bag_ids=failed,
        )
    return LambdaMatrix(
        data=np.column_stack(columns), bag_ids=tuple(s.bag_id for s in stats_list)
    )


def fit_columns_relaxed(
    stats_list: list[SufficientStats],
    spec,
    grid,
    cfg: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
    max_relax: int = 3,
) -> tuple[LambdaMatrix, list[str]]:
    """Column-wise ML matrix with the per-bag tolerance-relaxation ladder.

    Unlike fit_mde, a bag whose Newton system plateaus above the requested
    gradient tolerance is refit at a looser one instead of failing the
    whole matrix; the relaxations used are returned as warnings.
    """
    if not stats_list:
        raise ValueError("need at least one bag")
    eng = _as_engine(spec, grid, engine)
    columns, notes = [], []
    for stats in stats_list:
        dens, bag_notes = fit_sde_relaxed(
            stats, spec, grid, cfg, engine=eng, max_relax=max_relax
        )
        columns.append(dens.lam)
        notes.extend(bag_notes)
    matrix = LambdaMatrix(
        data=np.column_stack(columns),
        bag_ids=tuple(s.bag_id for s in stats_list),
    )
    return matrix, notes


def g_and_grad(
    Lambda: LambdaMatrix,
    lambda_hat: LambdaMatrix,
    stats_list: list[SufficientStats],
    spec,
    grid,
    engine: BasisGrid | None = None,
) -> tuple[float, np.ndarray]:
    """Constraint value g(L) = sum_i n_i KL(p_hat_i || p_i) and its gradient.

    Uses the moment-matching identity of the ML estimate (its model feature
    mean equals phi_bar), so column i of the gradient is
    n_i (E_{p_i}[phi] - phi_bar_i).
    """
    if Lambda.data.shape != lambda_hat.data.shape:
        raise ValueError("Lambda and lambda_hat shapes differ")
    eng = _as_engine(spec, grid, engine)
    prob = _JointProblem(eng, stats_list)
    if Lambda.m != eng.m:
        raise ValueError("Lambda row count does not match the basis")
    val, grad = prob.nll_and_grad(Lambda.data)
    return val - prob.nll(lambda_hat.data), grad


def epsilon_bound(n_bags: int, m: int, a: float) -> float:
    """Parameter-free confidence radius a * n_bags * m / 2 for the total
    weighted KL estimation error."""
    if n_bags < 1 or m < 1 or a <= 0:
        raise ValueError("n_bags, m and a must be positive")
    return a * n_bags * m / 2.0


def lipschitz_tau(stats_list: list[SufficientStats], m: int) -> float:
    """Gradient-Lipschitz bound m * max_i n_i for the constraint gradient.

    Each bag's Hessian block is n_i * Cov[phi] with Cov[phi] <= m*I
    (features are bounded by 1), and the blocks are decoupled, so the
    largest block bounds the whole map.
    """
    if not stats_list:
        raise ValueError("need at least one bag")
    return float(m * max(s.n for s in stats_list))


def _prox_data(data: np.ndarray, z: float, tau: float, grad: np.ndarray) -> np.ndarray:
    return soft_threshold(data - grad / tau, 1.0 / (tau * z))


def prox_step(
    Lambda0: LambdaMatrix, z: float, tau: float, grad: np.ndarray
) -> LambdaMatrix:
    """One proximal step: gradient move by 1/tau, then singular-value
    shrinkage at 1/(tau*z)."""
    if z <= 0 or tau <= 0:
        raise ValueError("z and tau must be positive")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != Lambda0.data.shape:
        raise ValueError("gradient shape must match Lambda0")
    return LambdaMatrix(
        data=_prox_data(Lambda0.data, z, tau, grad), bag_ids=Lambda0.bag_ids
    )


def _majorized(g_cand, g_bar, diff, grad_bar, tau) -> bool:
    quad = g_bar + float(np.vdot(diff, grad_bar)) + 0.5 * tau * float(
        np.vdot(diff, diff)
    )
    return g_cand <= quad + 1e-9 * max(1.0, abs(g_bar))


def line_search(
    lambda_bar: np.ndarray,
    z: float,
    tau_start: float,
    cfg: CmenaConfig,
    g_fn,
    g_bar: float,
    grad_bar: np.ndarray,
) -> tuple[float, np.ndarray, bool, float]:
    """Grow the step (shrink tau) while the quadratic majorization holds.

    Starting from tau_start, each round multiplies tau by ls_alpha, forms
    the proximal candidate at the smaller tau, and keeps it only while
    L(cand, z) <= Q(cand, lambda_bar) still holds; the last validated
    candidate wins. tau never drops below tau_floor * tau_start.

    Returns (accepted tau, accepted candidate, whether the accepted
    candidate satisfies the majorization, g at the accepted candidate).
    The flag can only be False if tau_start itself is below the true
    curvature.
    """
    if tau_start <= 0:
        raise ValueError("tau_start must be positive")
    tau = tau_start
    cand = _prox_data(lambda_bar, z, tau, grad_bar)
    g_cand = g_fn(cand)
    ok = _majorized(g_cand, g_bar, cand - lambda_bar, grad_bar, tau)
    if not ok:
        return tau, cand, False, g_cand
    while True:
        tau_next = cfg.ls_alpha * tau
        if tau_next < cfg.tau_floor * tau_start:
            break
        cand_next = _prox_data(lambda_bar, z, tau_next, grad_bar)
        g_next = g_fn(cand_next)
        if not _majorized(g_next, g_bar, cand_next - lambda_bar, grad_bar, tau_next):
            break
        tau, cand, g_cand = tau_next, cand_next, g_next
    return tau, cand, True, g_cand


def _cmen_inner(
    prob: _JointProblem,
    nll_hat: float,
    init: np.ndarray,
    z: float,
    tau_lip: float,
    cfg: CmenaConfig,
    tau_start: float | None = None,
) -> tuple[np.ndarray, int, bool, float]:
    """Accelerated proximal descent on |L|_* + z*(g(L) - eps) at fixed z.

    The step control carries the accepted tau from one iteration to the
    next (shrinking while the majorization holds, growing back toward the
    Lipschitz bound when it fails there), so most iterations cost only a
    couple of constraint evaluations and tau adapts to the visited
    curvature instead of the global bound. Stops when the running minimum
    of the nuclear norm stalls by less than obj_tol, or after max_inner
    steps. Returns the last iterate, the step count, whether every
    accepted step passed the majorization check, and the final tau.
    """
    if tau_start is None:
        tau_start = tau_lip

    def g_of(data):
        return prob.nll(data) - nll_hat

    def searched_step(base, tau_from):
        """Line-searched proximal step from `base`, growing tau back toward
        the Lipschitz bound if the warm-started value undershoots the local
        curvature (accelerating so a deep undershoot costs few probes)."""
        nll_b, grad_b = prob.nll_and_grad(base)
        tau_try = tau_from
        tau_acc, cand, ok, g_cand = line_search(
            base, z, tau_try, cfg, g_of, nll_b - nll_hat, grad_b
        )
        grow = 1.0 / cfg.ls_alpha
        while not ok and tau_try < tau_lip:
            tau_try = min(tau_try * grow, tau_lip)
            grow = grow * grow
            tau_acc, cand, ok, g_cand = line_search(
                base, z, tau_try, cfg, g_of, nll_b - nll_hat, grad_b
            )
        return tau_acc, cand, ok, g_cand

    cur = init.copy()
    prev = init.copy()
    g_cur = g_of(cur)
    lagr_cur = nuclear_norm(cur) + z * g_cur
    a_prev, a_cur = 1.0, 1.0
    all_ok = True
    steps = 0
    tau_run = tau_start
    for k in range(1, cfg.max_inner + 1):
        momentum = (a_prev - 1.0) / a_cur
        cand_ok = False
        if momentum > 0:
            bar = cur + momentum * (cur - prev)
            tau_acc, cand, ok, g_cand = searched_step(bar, tau_run)
            lagr_cand = nuclear_norm(cand) + z * g_cand
            cand_ok = lagr_cand <= lagr_cur + 1e-9 * max(1.0, abs(lagr_cur))
        if not cand_ok:
            # Extrapolation overshot (or first step): plain majorized step
            # from the current iterate, which cannot increase L; restart
            # the momentum sequence.
            tau_acc, cand, ok, g_cand = searched_step(cur, tau_run)
            lagr_cand = nuclear_norm(cand) + z * g_cand
            a_prev, a_cur = 1.0, 1.0
        all_ok = all_ok and ok
        tau_run = tau_acc
        delta_lagr = lagr_cur - lagr_cand
        delta_g = abs(g_cand - g_cur)
        moved = float(np.linalg.norm(cand - cur))
        scale = max(1.0, float(np.linalg.norm(cur)))
        prev, cur, g_cur, lagr_cur = cur, cand, g_cand, lagr_cand
        a_prev, a_cur = a_cur, 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * a_cur**2))
        steps = k
        # Near-stationary for this z: the iterate stopped moving.
        if moved <= 1e-5 * scale:
            break
        # Or the Lagrangian and the constraint value both stalled; at small
        # z real constraint progress is nearly invisible in L alone, so the
        # stall must be joint.
        if delta_lagr < cfg.obj_tol and delta_g < 0.1 * cfg.cons_tol:
            break
    return cur, steps, all_ok, tau_run


def fit_cmen(
    stats_list: list[SufficientStats],
    spec,
    grid,
    cfg: CmenaConfig = CmenaConfig(),
    newton: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
    lambda_hat: LambdaMatrix | None = None,
) -> tuple[LambdaMatrix, FitReport]:
    """Minimize the nuclear norm subject to g(L) <= eps = a*N*m/2.

    Outer loop bisects the dual multiplier z (doubling the upper end first
    until a feasible inner solution brackets the boundary). Primal warm
    state persists per bracket endpoint — the ML estimate anchors the high
    end, the zero matrix the low end — and each midpoint is solved from
    both on half budgets, keeping the lower-Lagrangian result. Terminates
    when |g - eps| < cons_tol or the budgets run out, returning the
    feasible iterate with the smallest nuclear norm either way; budget
    exhaustion is flagged in the report, never raised.
    """
    start = time.perf_counter()
    eng = _as_engine(spec, grid, engine)
    if lambda_hat is None:
        lambda_hat = fit_mde(stats_list, spec, grid, newton, engine=eng)
    prob = _JointProblem(eng, stats_list)
    n_bags, m = prob.n_bags, eng.m
    eps = epsilon_bound(n_bags, m, cfg.a)
    tau0 = lipschitz_tau(stats_list, m)
    report = FitReport(solver="cmen", tau_used=tau0, tau_unweighted=float(n_bags * m))

    nll_hat = prob.nll(lambda_hat.data)
    g_hat = prob.nll(lambda_hat.data) - nll_hat  # zero by construction
    if g_hat > eps:
        raise RuntimeError("internal error: ML estimate violates its own bound")

    zero = np.zeros_like(lambda_hat.data)
    g_zero = prob.nll(zero) - nll_hat
    if g_zero <= eps:
        # The zero matrix is feasible, hence optimal (nuclear norm 0).
        report.objective_trace.append(0.0)
        report.constraint_trace.append(g_zero - eps)
        report.rank_trace.append(0)
        report.z_trace.append(0.0)
        report.inner_iters.append(0)
        report.wall_time = time.perf_counter() - start
        return LambdaMatrix(data=zero, bag_ids=lambda_hat.bag_ids), report

    best = lambda_hat.data
    best_nuc = nuclear_norm(best)
    z_lo, z_hi = cfg.z_lo, cfg.z_hi_init
    # Warm primal state per bracket endpoint: (iterate, accepted tau, g).
    # The zero matrix is the exact solution of the z -> 0 end; the ML
    # estimate anchors the high end. A midpoint is solved from BOTH
    # endpoints on half budgets and the lower-Lagrangian result wins: the
    # two endpoint families (near-zero vs near-ML boundary solutions) are
    # cheap to approach from opposite sides, and the contest picks the
    # cheap side automatically.
    warm_lo = (zero, tau0, g_zero)
    warm_hi = (lambda_hat.data, tau0, g_hat)
    bracketed = False
    converged = False
    for _ in range(cfg.max_outer):
        if not bracketed:
            z = z_hi
            sol, steps, ls_ok, tau_out = _cmen_inner(
                prob, nll_hat, warm_hi[0], z, tau0, cfg, tau_start=warm_hi[1]
            )
            gval = prob.nll(sol) - nll_hat
        else:
            z = 0.5 * (z_lo + z_hi)
            half = max(1, cfg.max_inner // 2)
            half_cfg = replace(cfg, max_inner=half)
            trial = []
            for init, tau_warm, _ in (warm_lo, warm_hi):
                s_, k_, ok_, t_ = _cmen_inner(
                    prob, nll_hat, init, z, tau0, half_cfg, tau_start=tau_warm
                )
                g_ = prob.nll(s_) - nll_hat
                trial.append((nuclear_norm(s_) + z * (g_ - eps), s_, k_, ok_, t_, g_))
            _, sol, steps, ls_ok, tau_out, gval = min(trial, key=lambda t: t[0])
            steps = trial[0][2] + trial[1][2]
        nuc = nuclear_norm(sol)
        report.objective_trace.append(nuc)
        report.constraint_trace.append(gval - eps)
        report.rank_trace.append(numeric_rank(sol, RANK_TOL))
        report.z_trace.append(z)
        report.inner_iters.append(steps)
        if not ls_ok:
            report.warnings.append(f"majorization check failed at z={z:.6g}")
        feasible_tol = gval <= eps + cfg.cons_tol
        if feasible_tol and nuc < best_nuc:
            best, best_nuc = sol, nuc
        if abs(gval - eps) < cfg.cons_tol:
            converged = True
            break
        state = (sol, tau_out, gval)
        if gval - eps >= 0:
            if bracketed:
                z_lo, warm_lo = z, state
            else:
                z_hi *= 2.0
                warm_hi = state
                if z_hi > 1e12:
                    report.warnings.append("no feasible z found up to 1e12")
                    break
        else:
            if bracketed:
                z_hi, warm_hi = z, state
            else:
                bracketed = True
                warm_hi = state
    if not converged:
        report.converged = False
        report.warnings.append(
            "outer budget exhausted before |g - eps| < cons_tol; "
            "returning the best feasible iterate"
        )
    report.wall_time = time.perf_counter() - start
    return LambdaMatrix(data=best, bag_ids=lambda_hat.bag_ids), report


def fit_rmde(
    stats_list: list[SufficientStats],
    spec,
    grid,
    eta: float,
    cfg: CmenaConfig = CmenaConfig(),
    newton: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
    init: LambdaMatrix | None = None,
) -> tuple[LambdaMatrix, FitReport]:
    """Proximal gradient on the likelihood plus eta * nuclear norm.

    Fixed step 1/tau with tau the Lipschitz bound, so every step descends
    the penalized objective; stops when the iterate displacement (equal to
    the prox-stationarity residual, by non-expansiveness) is within
    obj_tol.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    start = time.perf_counter()
    eng = _as_engine(spec, grid, engine)
    if init is None:
        init = fit_mde(stats_list, spec, grid, newton, engine=eng)
    prob = _JointProblem(eng, stats_list)
    tau = lipschitz_tau(stats_list, eng.m)
    report = FitReport(
        solver="rmde", tau_used=tau, tau_unweighted=float(prob.n_bags * eng.m), etas=[eta]
    )
    data = init.data
    report.objective_trace.append(prob.nll(data) + eta * nuclear_norm(data))
    report.rank_trace.append(numeric_rank(data, RANK_TOL))
    converged = False
    steps = 0
    for k in range(1, cfg.max_inner + 1):
        _, grad = prob.nll_and_grad(data)
        cand = soft_threshold(data - grad / tau, eta / tau)
        residual = float(np.linalg.norm(cand - data))
        data = cand
        steps = k
        report.objective_trace.append(prob.nll(data) + eta * nuclear_norm(data))
        report.rank_trace.append(numeric_rank(data, RANK_TOL))
        if residual <= cfg.obj_tol:
            converged = True
            break
    report.inner_iters.append(steps)
    if not converged:
        report.converged = False
        report.warnings.append(
            f"prox residual still above obj_tol after {cfg.max_inner} steps"
        )
    report.wall_time = time.perf_counter() - start
    return LambdaMatrix(data=data, bag_ids=init.bag_ids), report


def rmde_continuation(
    stats_list: list[SufficientStats],
    spec,
    grid,
    cfg: CmenaConfig = CmenaConfig(),
    newton: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
    lambda_hat: LambdaMatrix | None = None,
) -> tuple[LambdaMatrix, FitReport]:
    """Solve the penalized problem down a geometric eta ladder.

    eta starts at |L_hat|_F^2, decays by 10x per stage, floors at 1e-3 of
    the start, and every stage warm-starts from the previous solution; the
    per-stage rank trace is kept in the report.
    """
    start = time.perf_counter()
    eng = _as_engine(spec, grid, engine)
    if lambda_hat is None:
        lambda_hat = fit_mde(stats_list, spec, grid, newton, engine=eng)
    eta0 = max(float(np.linalg.norm(lambda_hat.data) ** 2), 1e-12)
    eta_floor = 1e-3 * eta0
    etas = [eta0]
    while etas[-1] > eta_floor * (1.0 + 1e-9):
        etas.append(max(0.1 * etas[-1], eta_floor))
    report = FitReport(solver="rmde-continuation", etas=etas)
    current = lambda_hat
    for eta in etas:
        current, stage = fit_rmde(
            stats_list, spec, grid, eta, cfg, newton, engine=eng, init=current
        )
        report.objective_trace.append(stage.objective_trace[-1])
        report.rank_trace.append(stage.rank_trace[-1])
        report.inner_iters.append(stage.inner_iters[-1])
        report.warnings.extend(f"eta={eta:.6g}: {w}" for w in stage.warnings)
        report.converged = report.converged and stage.converged
        report.tau_used = stage.tau_used
        report.tau_unweighted = stage.tau_unweighted
    report.wall_time = time.perf_counter() - start
    return current, report


def rmde_cross_validate(
    stats_list: list[SufficientStats],
    spec,
    grid,
    etas: list[float],
    split_seed: int,
    cfg: CmenaConfig = CmenaConfig(),
    newton: NewtonConfig = NewtonConfig(),
    engine: BasisGrid | None = None,
) -> tuple[float, LambdaMatrix]:
    """Pick eta on a seeded 70/30 bag split, then refit on all bags.

    A held-out bag is scored against its best-matching trained column:
    min over columns of n * (logZ(col) - col . phi_bar). The eta with the
    lowest total held-out score wins (first on ties).
    """
    if not etas:
        raise ValueError("etas must be nonempty")
    n_bags = len(stats_list)
    if n_bags < 4:
        raise ValueError("cross-validation needs at least 4 bags")
    eng = _as_engine(spec, grid, engine)
    perm = np.random.default_rng(split_seed).permutation(n_bags)
    n_train = min(max(int(round(0.7 * n_bags)), 1), n_bags - 1)
    train = [stats_list[i] for i in perm[:n_train]]
    held = [stats_list[i] for i in perm[n_train:]]
    hat_train, _ = fit_columns_relaxed(train, spec, grid, newton, engine=eng)
    errors = []
    for eta in etas:
        fitted, _ = fit_rmde(
            train, spec, grid, eta, cfg, newton, engine=eng, init=hat_train
        )
        logz = eng.log_partition_many(fitted.data)
        total = 0.0
        for s in held:
            scores = s.n * (logz - fitted.data.T @ s.phi_bar)
            total += float(scores.min())
        errors.append(total)
    best_eta = float(etas[int(np.argmin(errors))])
    hat_all, _ = fit_columns_relaxed(stats_list, spec, grid, newton, engine=eng)
    final, _ = fit_rmde(
        stats_list, spec, grid, best_eta, cfg, newton, engine=eng, init=hat_all
    )
    return best_eta, final


@dataclass(frozen=True)
class PsiBasis:
    """Reduced basis psi_j(x) = u_j . phi(x) from the left singular vectors
    of a fitted parameter matrix."""

    u: np.ndarray  # (m, k)
    spec: object

    @property
    def k(self) -> int:
        return self.u.shape[1]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """k reduced features at one point."""
        x = np.asarray(x, dtype=float)
        return self.spec.evaluate(x[None, :])[0] @ self.u

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        return self.spec.evaluate(points) @ self.u


def psi_basis(
    lambda_star: LambdaMatrix, spec, k: int
) -> tuple[np.ndarray, PsiBasis]:
    """Rank-k reduced representation of every bag's log-density direction.

    Returns coefficients beta (k, N) with beta[j, i] = s_j * v_j[i] and the
    reduced basis, so that sum_j beta[j, i] * psi_j(x) reconstructs
    lambda_i . phi(x) exactly when k equals the rank.
    """
    f = svd(lambda_star.data)
    available = int((f.s > RANK_TOL).sum())
    if k < 1 or k > available:
        raise ValueError(f"k must be in [1, {available}], got {k}")
    beta = f.s[:k, None] * f.v[:, :k].T
    return beta, PsiBasis(u=f.u[:, :k], spec=spec)
