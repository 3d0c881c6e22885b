"""Sensitivities, Fisher information and Cramér-Rao bounds for tissue parameters.

The Jacobian ``J_n = dm[n]/dtheta`` (theta = T1, T2, M0) is obtained by
propagating the state derivatives alongside the state, so the cost is one
forward pass per isochromat rather than one simulation per parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .bloch import (
    AcqSchedule,
    IsochromatEnsemble,
    TissueParams,
    _col,
    dephasing,
    recovery,
    relaxation,
    rf_matrices,
    rf_rotation,
)

PARAM_NAMES = ("t1", "t2", "m0")
COND_LIMIT = 1e14


class SingularInformation(ArithmeticError):
    """The Fisher information cannot be inverted (unidentifiable design)."""


@dataclass(frozen=True)
class MatrixDerivatives:
    dR_dT1: np.ndarray
    dR_dT2: np.ndarray
    db_dT1: np.ndarray


def matrix_derivatives(theta: TissueParams, t: float) -> MatrixDerivatives:
    """Closed-form derivatives of R(T1, T2, t) and b(T1, t)."""
    t1, t2 = theta.t1, theta.t2
    if t < 0:
        raise ValueError("t must be >= 0")
    g1 = t / t1**2 * math.exp(-t / t1)
    g2 = t / t2**2 * math.exp(-t / t2)
    return MatrixDerivatives(
        dR_dT1=np.diag([0.0, 0.0, g1]),
        dR_dT2=np.diag([g2, g2, 0.0]),
        db_dT1=np.array([0.0, 0.0, -g1]),
    )


def sensitivity_trajectory(
    schedule: AcqSchedule,
    theta: TissueParams,
    ensemble: IsochromatEnsemble,
) -> tuple[np.ndarray, np.ndarray]:
    """Signal ``m`` (N, 2) and Jacobians ``J`` (N, 2, 3) by forward recursion."""
    n = len(schedule)
    sig = np.empty((n, 2))
    jac = np.empty((n, 2, 3))
    _kernels.sensitivity(
        rf_matrices(schedule), _col(schedule.te), _col(schedule.tr),
        float(theta.t1), float(theta.t2), float(theta.m0),
        np.cos(ensemble.betas), np.sin(ensemble.betas),
        sig, jac, np.empty((1, 12, 1)), False,
    )
    return sig, jac


@dataclass(frozen=True)
class FisherMatrix:
    matrix: np.ndarray
    sigma: float


def fisher(jac, sigma: float) -> FisherMatrix:
    """I = sum_n J_n^T J_n / sigma^2 for i.i.d. Gaussian noise on each channel."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    j = np.asarray(jac, dtype=float)
    j = j.reshape(-1, j.shape[-1])
    f = j.T @ j
    f = 0.5 * (f + f.T)
    return FisherMatrix(f / sigma**2, float(sigma))


@dataclass(frozen=True)
class CrbReport:
    """CRB matrix, normalized bounds sqrt(V_ii)/theta_i, and diagnostics.

    ``condition_number`` is that of the FIM after rescaling each parameter by
    its true value, i.e. of diag(theta) I diag(theta).
    """

    crb_matrix: np.ndarray
    ncrb: np.ndarray
    fim: np.ndarray = field(repr=False)
    condition_number: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "fim": self.fim.tolist(),
            "crb": self.crb_matrix.tolist(),
            "ncrb": dict(zip(PARAM_NAMES, self.ncrb.tolist())),
            "condition_number": self.condition_number,
        }


def crb(fim: FisherMatrix, theta: TissueParams) -> CrbReport:
    """Invert the FIM by a symmetric eigendecomposition in relative units."""
    f = np.asarray(fim.matrix, dtype=float)
    th = theta.as_array()[: f.shape[0]]
    if not np.all(np.isfinite(f)):
        raise SingularInformation("non-finite Fisher information")
    fs = th[:, None] * f * th[None, :]
    w, v = np.linalg.eigh(fs)
    wmax = w.max()
    if wmax <= 0 or w.min() <= wmax / COND_LIMIT:
        raise SingularInformation(
            f"Fisher information is singular or ill-conditioned (eigenvalues {w})"
        )
    cond = float(wmax / w.min())
    vs = (v / w) @ v.T
    vmat = vs * (th[:, None] * th[None, :])
    vmat = 0.5 * (vmat + vmat.T)
    ncrb = np.sqrt(np.diag(vmat)) / th
    return CrbReport(vmat, ncrb, f, cond)


def crb_for(
    schedule: AcqSchedule,
    theta: TissueParams,
    ensemble: IsochromatEnsemble,
    sigma: float,
) -> CrbReport:
    """Convenience: sensitivities -> FIM -> CRB in one call."""
    _, jac = sensitivity_trajectory(schedule, theta, ensemble)
    return crb(fisher(jac, sigma), theta)


# Generic state-space route. Slow and memory hungry, but written directly from
# the two difference equations with no IR-FISP specific shortcuts; used as an
# independent reference and for change-of-basis checks.


@dataclass
class StateSpace:
    """Per-step, per-isochromat system matrices and their theta-derivatives.

    Shapes: A (N, Nv, d, d), B (N, Nv, d), C (N, Nv, 2, d), x0 (Nv, d); the
    derivative arrays carry a leading parameter axis of length p.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: np.ndarray
    dA: np.ndarray
    dB: np.ndarray
    dC: np.ndarray
    dx0: np.ndarray

    def transformed(self, u: np.ndarray) -> "StateSpace":
        """Change of state basis x' = U x (U orthogonal)."""
        ut = u.T
        return StateSpace(
            A=u @ self.A @ ut,
            B=self.B @ ut,
            C=self.C @ ut,
            x0=self.x0 @ ut,
            dA=u @ self.dA @ ut,
            dB=self.dB @ ut,
            dC=self.dC @ ut,
            dx0=self.dx0 @ ut,
        )


def irfisp_state_space(
    schedule: AcqSchedule, theta: TissueParams, ensemble: IsochromatEnsemble
) -> StateSpace:
    """Assemble the IR-FISP system matrices one TR at a time."""
    n, nv = len(schedule), ensemble.nv
    p = 3
    proj = np.eye(3)[:2]
    A = np.empty((n, nv, 3, 3))
    B = np.empty((n, nv, 3))
    C = np.empty((n, nv, 2, 3))
    dA = np.zeros((p, n, nv, 3, 3))
    dB = np.zeros((p, n, nv, 3))
    dC = np.zeros((p, n, nv, 2, 3))
    gs = np.stack([dephasing(b) for b in ensemble.betas])
    for k, u in enumerate(schedule):
        q = rf_rotation(u.alpha, u.phi)
        r_tr = relaxation(theta.t1, theta.t2, u.tr)
        r_te = relaxation(theta.t1, theta.t2, u.te)
        d_tr = matrix_derivatives(theta, u.tr)
        d_te = matrix_derivatives(theta, u.te)
        b = recovery(theta.t1, u.tr)
        A[k] = gs @ (r_tr @ q)
        B[k] = theta.m0 / nv * b
        C[k] = proj @ r_te @ q
        dA[0, k] = gs @ (d_tr.dR_dT1 @ q)
        dA[1, k] = gs @ (d_tr.dR_dT2 @ q)
        dB[0, k] = theta.m0 / nv * d_tr.db_dT1
        dB[2, k] = b / nv
        dC[0, k] = proj @ d_te.dR_dT1 @ q
        dC[1, k] = proj @ d_te.dR_dT2 @ q
    x0 = np.zeros((nv, 3))
    x0[:, 2] = theta.m0 / nv
    dx0 = np.zeros((p, nv, 3))
    dx0[2, :, 2] = 1.0 / nv
    return StateSpace(A, B, C, x0, dA, dB, dC, dx0)


def state_space_sensitivities(ss: StateSpace) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the state and derivative recursions; returns (m, J)."""
    n = ss.A.shape[0]
    p = ss.dA.shape[0]
    x = ss.x0.copy()
    dx = ss.dx0.copy()
    m = np.empty((n, 2))
    jac = np.empty((n, 2, p))
    for k in range(n):
        m[k] = np.einsum("rij,rj->i", ss.C[k], x)
        for i in range(p):
            jac[k, :, i] = np.einsum("rij,rj->i", ss.dC[i, k], x) + np.einsum(
                "rij,rj->i", ss.C[k], dx[i]
            )
        dx = (
            np.einsum("prij,rj->pri", ss.dA[:, k], x)
            + np.einsum("rij,prj->pri", ss.A[k], dx)
            + ss.dB[:, k]
        )
        x = np.einsum("rij,rj->ri", ss.A[k], x) + ss.B[k]
    return m, jac
