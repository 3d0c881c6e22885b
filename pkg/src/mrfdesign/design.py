"""Weighted A-optimal design of flip-angle / repetition-time schedules.

The design cost for a schedule is ``sum_l tr(W V_l)`` where ``V_l`` is the
CRB matrix of representative tissue ``l``. Minimization runs over
(alpha_2..alpha_N, TR_1..TR_N) with alpha_1 held at its initial value,
subject to box bounds and an optional limit on consecutive flip-angle
changes.

Feasibility is built into the parametrization rather than restored after
each step: every point ``z`` of the unit box maps to a feasible schedule via

    alpha_2     = lo + z_2 (hi - lo)
    alpha_{n+1} = L_n + z_{n+1} (U_n - L_n),
    L_n = max(lo, alpha_n - delta),  U_n = min(hi, alpha_n + delta)

and every feasible schedule has a preimage. A bound-constrained quasi-Newton
method (L-BFGS-B) on ``z`` is then a monotone, feasible descent method for the
original problem. Ramps where the variation limit is active show up as
``z`` sitting on a bound.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .bloch import (
    FAST_NV,
    DEFAULT_NV,
    AcqSchedule,
    IsochromatEnsemble,
    TissueParams,
    _col,
    rf_matrices,
    rf_matrices_dalpha,
)
from .crb import SingularInformation, crb, crb_for, fisher

INFEASIBLE = math.inf

DEFAULT_TISSUES = (
    TissueParams(700.0, 60.0, 0.6),
    TissueParams(850.0, 50.0, 0.6),
    TissueParams(1100.0, 102.0, 0.6),
)
DEFAULT_WEIGHTS = (2.0e-5, 5.0e-4, 3.0e1)
DEFAULT_SNR_DB = 33.0
DEFAULT_SIGNAL = 0.6

FD_STEP_ALPHA = 1e-4
FD_STEP_TR = 1e-3
CONSTRAINT_ATOL = 1e-12


class NonconvergenceWarning(RuntimeWarning):
    """The optimizer stopped on its iteration cap."""


def _default_sigma() -> float:
    return DEFAULT_SIGNAL * 10.0 ** (-DEFAULT_SNR_DB / 20.0)


@dataclass(frozen=True)
class DesignConfig:
    """Everything the optimizer needs apart from the initial schedule.

    Angles are in radians and times in ms. ``delta_alpha_max = inf`` removes
    the variation limit (the "Optimized-I" variant); the default of one
    degree is "Optimized-II".
    """

    tissues: tuple = DEFAULT_TISSUES
    weights: tuple = DEFAULT_WEIGHTS
    sigma: float = field(default_factory=_default_sigma)
    n: int = 400
    tr_min: float = 11.0
    tr_max: float = 15.0
    alpha_min: float = math.radians(10.0)
    alpha_max_first: float = math.radians(180.0)
    alpha_max_rest: float = math.radians(60.0)
    delta_alpha_max: float = math.radians(1.0)
    nv_design: int = FAST_NV
    nv_report: int = DEFAULT_NV
    tol: float = 1e-4
    max_iter: int = 50_000

    def __post_init__(self):
        tissues = tuple(self.tissues)
        object.__setattr__(self, "tissues", tissues)
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(tissues) < 1:
            raise ValueError("at least one tissue is required")
        if not all(isinstance(t, TissueParams) for t in tissues):
            raise TypeError("tissues must be TissueParams")
        if len(w) != 3 or min(w) < 0 or max(w) <= 0:
            raise ValueError("weights must be 3 nonnegative values, one positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 < self.tr_min <= self.tr_max:
            raise ValueError("need 0 < tr_min <= tr_max")
        if not self.alpha_min <= self.alpha_max_rest <= self.alpha_max_first:
            raise ValueError("need alpha_min <= alpha_max_rest <= alpha_max_first")
        if not self.delta_alpha_max > 0:
            raise ValueError("delta_alpha_max must be > 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1 or self.nv_design < 1 or self.nv_report < 1:
            raise ValueError("max_iter, nv_design and nv_report must be >= 1")

    @property
    def weight_matrix(self) -> np.ndarray:
        return np.diag(self.weights)

    @property
    def mode(self) -> str:
        return "opt1" if math.isinf(self.delta_alpha_max) else "opt2"

    def with_mode(self, mode: str) -> "DesignConfig":
        """'opt1' drops the flip-angle variation limit, 'opt2' sets it to 1 degree."""
        if mode == "opt1":
            return replace(self, delta_alpha_max=math.inf)
        if mode == "opt2":
            return replace(self, delta_alpha_max=math.radians(1.0))
        raise ValueError(f"unknown mode {mode!r}")


@dataclass
class DesignResult:
    schedule: AcqSchedule
    cost_history: list
    per_tissue_ncrb: np.ndarray
    iterations: int
    converged: bool
    message: str = ""


def _check_length(schedule: AcqSchedule, config: DesignConfig) -> None:
    if len(schedule) != config.n:
        raise ValueError(f"schedule has length {len(schedule)}, config expects {config.n}")


def design_cost(schedule: AcqSchedule, config: DesignConfig) -> float:
    """Sum over tissues of tr(W V); ``INFEASIBLE`` if any FIM is singular."""
    _check_length(schedule, config)
    ens = IsochromatEnsemble.uniform(config.nv_design)
    w = np.asarray(config.weights)
    total = 0.0
    for theta in config.tissues:
        try:
            rep = crb_for(schedule, theta, ens, config.sigma)
        except SingularInformation:
            return INFEASIBLE
        total += float(np.dot(w, np.diag(rep.crb_matrix)))
    return total


def per_tissue_ncrb(schedule: AcqSchedule, config: DesignConfig, nv: int | None = None) -> np.ndarray:
    """L x 3 table of normalized bounds, by default at the reporting ensemble size."""
    ens = IsochromatEnsemble.uniform(config.nv_report if nv is None else nv)
    rows = []
    for theta in config.tissues:
        try:
            rows.append(crb_for(schedule, theta, ens, config.sigma).ncrb)
        except SingularInformation:
            rows.append(np.full(3, np.inf))
    return np.array(rows)


def cost_and_gradient(schedule: AcqSchedule, config: DesignConfig) -> tuple[float, np.ndarray]:
    """Design cost and its exact gradient by a reverse (adjoint) sweep.

    The gradient is returned as a 2N vector ``[d/dalpha_1..N, d/dTR_1..N]``.
    The alpha_1 entry is the true derivative here; the optimizer ignores it.
    On a singular FIM the cost is ``INFEASIBLE`` and the gradient is NaN.
    """
    _check_length(schedule, config)
    n = len(schedule)
    ens = IsochromatEnsemble.uniform(config.nv_design)
    cb, sb = np.cos(ens.betas), np.sin(ens.betas)
    q = rf_matrices(schedule)
    dq = rf_matrices_dalpha(schedule)
    te, tr = _col(schedule.te), _col(schedule.tr)
    w = np.asarray(config.weights)
    wmat = np.diag(w)
    s2 = config.sigma**2
    g_alpha = np.zeros(n)
    g_tr = np.zeros(n)
    sig = np.empty((n, 2))
    jac = np.empty((n, 2, 3))
    hist = np.empty((n, 12, ens.nv))
    total = 0.0
    for theta in config.tissues:
        _kernels.sensitivity(q, te, tr, theta.t1, theta.t2, theta.m0, cb, sb, sig, jac, hist, True)
        try:
            rep = crb(fisher(jac, config.sigma), theta)
        except SingularInformation:
            return INFEASIBLE, np.full(2 * n, np.nan)
        v = rep.crb_matrix
        total += float(np.dot(w, np.diag(v)))
        gamma = -(v @ wmat @ v)
        gamma = 0.5 * (gamma + gamma.T)
        gbar = (2.0 / s2) * (jac @ gamma)
        _kernels.adjoint(q, dq, te, tr, theta.t1, theta.t2, theta.m0, cb, sb, hist, gbar, g_alpha, g_tr)
    return total, np.concatenate([g_alpha, g_tr])


def cost_gradient(schedule: AcqSchedule, config: DesignConfig) -> np.ndarray:
    """Finite-difference gradient of :func:`design_cost` (2N vector).

    Central differences with steps of 1e-4 rad (flips) and 1e-3 ms (TRs).
    Where a step would leave the box, or a perturbed cost is infeasible, a
    one-sided difference is used instead. The alpha_1 entry is always 0
    because the first pulse is not a design variable.
    """
    _check_length(schedule, config)
    n = len(schedule)
    alpha = np.array(schedule.alpha)
    tr = np.array(schedule.tr)
    f0 = None
    grad = np.zeros(2 * n)

    def eval_with(col, idx, value):
        a, t = alpha.copy(), tr.copy()
        (a if col == "alpha" else t)[idx] = value
        return design_cost(schedule.replace(alpha=a, tr=t), config)

    for k in range(1, 2 * n):
        if k < n:
            col, idx, h, x = "alpha", k, FD_STEP_ALPHA, alpha[k]
            lo, hi = config.alpha_min, config.alpha_max_rest
        else:
            col, idx, h, x = "tr", k - n, FD_STEP_TR, tr[k - n]
            lo, hi = config.tr_min, config.tr_max
        up = eval_with(col, idx, x + h) if x + h <= hi else INFEASIBLE
        dn = eval_with(col, idx, x - h) if x - h >= lo else INFEASIBLE
        if math.isfinite(up) and math.isfinite(dn):
            grad[k] = (up - dn) / (2 * h)
            continue
        if f0 is None:
            f0 = design_cost(schedule, config)
        if math.isfinite(up):
            grad[k] = (up - f0) / h
        elif math.isfinite(dn):
            grad[k] = (f0 - dn) / h
        else:
            grad[k] = np.nan
    return grad


def check_constraints(schedule: AcqSchedule, config: DesignConfig) -> list[str]:
    """Human-readable list of violated constraints; empty when feasible.

    Indices in the messages are 1-based pulse numbers.
    """
    _check_length(schedule, config)
    out = []
    alpha, tr = schedule.alpha, schedule.tr
    atol = CONSTRAINT_ATOL
    for i in np.flatnonzero((tr < config.tr_min - atol) | (tr > config.tr_max + atol)):
        out.append(f"TR[{i + 1}]={tr[i]:.6g} outside [{config.tr_min}, {config.tr_max}]")
    if not config.alpha_min - atol <= alpha[0] <= config.alpha_max_first + atol:
        out.append(f"alpha[1]={alpha[0]:.6g} outside [{config.alpha_min:.6g}, {config.alpha_max_first:.6g}]")
    rest = alpha[1:]
    bad = (rest < config.alpha_min - atol) | (rest > config.alpha_max_rest + atol)
    for i in np.flatnonzero(bad):
        out.append(f"alpha[{i + 2}]={rest[i]:.6g} outside [{config.alpha_min:.6g}, {config.alpha_max_rest:.6g}]")
    if math.isfinite(config.delta_alpha_max) and len(rest) > 1:
        jumps = np.abs(np.diff(rest))
        for i in np.flatnonzero(jumps > config.delta_alpha_max + atol):
            out.append(
                f"|alpha[{i + 3}] - alpha[{i + 2}]|={jumps[i]:.6g} exceeds {config.delta_alpha_max:.6g}"
            )
    return out


class _FeasibleMap:
    """Unit-box coordinates <-> feasible schedules for one config and init."""

    def __init__(self, config: DesignConfig, template: AcqSchedule):
        self.cfg = config
        self.template = template
        self.n = config.n
        self.alpha1 = float(np.clip(template.alpha[0], config.alpha_min, config.alpha_max_first))
        self.a_lo, self.a_hi = config.alpha_min, config.alpha_max_rest
        self.t_lo, self.t_hi = config.tr_min, config.tr_max
        self.delta = config.delta_alpha_max
        self.alpha_free = self.a_hi > self.a_lo and self.n > 1
        self.tr_free = self.t_hi > self.t_lo
        self.size = (self.n - 1) * self.alpha_free + self.n * self.tr_free

    def _window(self, prev: float) -> tuple[float, float]:
        return max(self.a_lo, prev - self.delta), min(self.a_hi, prev + self.delta)

    def split(self, z):
        k = (self.n - 1) if self.alpha_free else 0
        return z[:k], z[k:]

    def to_schedule(self, z) -> tuple[AcqSchedule, np.ndarray]:
        """Schedule and the per-pulse window widths (needed by the gradient)."""
        za, zt = self.split(np.clip(z, 0.0, 1.0))
        n = self.n
        alpha = np.empty(n)
        alpha[0] = self.alpha1
        width = np.zeros(n)
        if self.alpha_free:
            lo, hi = self.a_lo, self.a_hi
            for k in range(1, n):
                if k > 1:
                    lo, hi = self._window(alpha[k - 1])
                alpha[k] = min(max(lo + za[k - 1] * (hi - lo), lo), hi)
                width[k] = hi - lo
        else:
            alpha[1:] = self.a_lo
        if self.tr_free:
            tr = np.clip(self.t_lo + zt * (self.t_hi - self.t_lo), self.t_lo, self.t_hi)
        else:
            tr = np.full(n, self.t_lo)
        return self.template.replace(alpha=alpha, tr=tr), width

    def from_schedule(self, schedule: AcqSchedule) -> np.ndarray:
        """Preimage of a schedule; infeasible inputs land on a nearby feasible one."""
        parts = []
        if self.alpha_free:
            a = schedule.alpha
            za = np.empty(self.n - 1)
            prev = None
            lo, hi = self.a_lo, self.a_hi
            for k in range(1, self.n):
                if k > 1:
                    lo, hi = self._window(prev)
                za[k - 1] = min(max((a[k] - lo) / (hi - lo), 0.0), 1.0)
                prev = min(max(lo + za[k - 1] * (hi - lo), lo), hi)
            parts.append(za)
        if self.tr_free:
            parts.append(np.clip((schedule.tr - self.t_lo) / (self.t_hi - self.t_lo), 0.0, 1.0))
        return np.concatenate(parts) if parts else np.zeros(0)

    def pullback(self, z, schedule: AcqSchedule, width, g_alpha, g_tr) -> np.ndarray:
        """Chain rule from physical gradients to the box coordinates."""
        za, zt = self.split(np.clip(z, 0.0, 1.0))
        parts = []
        if self.alpha_free:
            alpha = schedule.alpha
            gz = np.empty(self.n - 1)
            carry = 0.0
            for k in range(self.n - 1, 0, -1):
                total = g_alpha[k] + carry
                gz[k - 1] = total * width[k]
                if k > 1:
                    prev = alpha[k - 1]
                    d_lo = 1.0 if prev - self.delta > self.a_lo else 0.0
                    d_hi = 1.0 if prev + self.delta < self.a_hi else 0.0
                    carry = total * ((1.0 - za[k - 1]) * d_lo + za[k - 1] * d_hi)
            parts.append(gz)
        if self.tr_free:
            parts.append(g_tr * (self.t_hi - self.t_lo))
        return np.concatenate(parts) if parts else np.zeros(0)

    def normalized(self, schedule: AcqSchedule) -> np.ndarray:
        """Free variables rescaled to [0, 1] by their box, for the stopping rule."""
        parts = []
        if self.alpha_free:
            parts.append((schedule.alpha[1:] - self.a_lo) / (self.a_hi - self.a_lo))
        if self.tr_free:
            parts.append((schedule.tr - self.t_lo) / (self.t_hi - self.t_lo))
        return np.concatenate(parts) if parts else np.zeros(0)


def project(schedule: AcqSchedule, config: DesignConfig) -> AcqSchedule:
    """Map a schedule onto the feasible set.

    Feasible schedules are returned as they are; otherwise bounds
    are clipped and the variation limit is enforced by a forward sweep.
    """
    _check_length(schedule, config)
    if not check_constraints(schedule, config):
        return schedule
    fm = _FeasibleMap(config, schedule)
    out, _ = fm.to_schedule(fm.from_schedule(schedule))
    return out


def optimize(config: DesignConfig, init: AcqSchedule, callback=None) -> DesignResult:
    """Locally minimize :func:`design_cost` from ``init``.

    Stops when the largest change of any free variable (relative to its box
    width) between accepted iterates drops below ``config.tol``, when the
    quasi-Newton method reports convergence, or after ``config.max_iter``
    iterations. ``callback(iteration, cost)`` is called on each improvement.
    """
    _check_length(init, config)
    start = project(init, config)
    fm = _FeasibleMap(config, start)
    z0 = fm.from_schedule(start)
    sched0 = start
    cost0 = design_cost(sched0, config)
    if not math.isfinite(cost0):
        raise SingularInformation("initial schedule has singular Fisher information")

    best = {"sched": sched0, "cost": cost0, "norm": fm.normalized(sched0)}
    history = [cost0]
    seen: dict[bytes, tuple[float, AcqSchedule]] = {}
    state = {"stalled": False, "iters": 0}

    if fm.size == 0:
        return DesignResult(sched0, history, per_tissue_ncrb(sched0, config), 0, True, "no free variables")

    def fun(z):
        sched, width = fm.to_schedule(z)
        f, g = cost_and_gradient(sched, config)
        if not math.isfinite(f):
            seen[z.tobytes()] = (INFEASIBLE, sched)
            return 1e30, np.zeros_like(z)
        seen[z.tobytes()] = (f, sched)
        gz = fm.pullback(z, sched, width, g[: config.n], g[config.n :])
        return f / cost0, gz / cost0

    def on_iter(intermediate_result):
        state["iters"] += 1
        f, sched = seen.get(intermediate_result.x.tobytes(), (None, None))
        if f is None:
            sched, _ = fm.to_schedule(intermediate_result.x)
            f = design_cost(sched, config)
        if f < best["cost"]:
            norm = fm.normalized(sched)
            step = float(np.max(np.abs(norm - best["norm"])))
            best.update(sched=sched, cost=f, norm=norm)
            history.append(f)
            if callback is not None:
                callback(state["iters"], f)
            if step < config.tol:
                state["stalled"] = True
                raise StopIteration
        seen.clear()

    res = minimize(
        fun,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * fm.size,
        callback=on_iter,
        options={
            "maxiter": config.max_iter,
            "maxfun": 20 * config.max_iter,
            "ftol": 1e-15,
            "gtol": 1e-12,
            "maxcor": 20,
        },
    )
    # the quasi-Newton method may end on a point it never reported
    f_end, s_end = seen.get(res.x.tobytes(), (None, None))
    if f_end is not None and f_end < best["cost"]:
        best.update(sched=s_end, cost=f_end)
        history.append(f_end)

    hit_cap = state["iters"] >= config.max_iter and not state["stalled"]
    converged = not hit_cap
    if hit_cap:
        warnings.warn(f"optimizer stopped after {config.max_iter} iterations", NonconvergenceWarning)
    message = "solution change below tolerance" if state["stalled"] else str(res.message)
    sched = best["sched"]
    return DesignResult(
        schedule=sched,
        cost_history=history,
        per_tissue_ncrb=per_tissue_ncrb(sched, config),
        iterations=state["iters"],
        converged=converged,
        message=message,
    )
