"""Discrete-time IR-FISP spin dynamics with isochromat summation.

Each isochromat evolves as

    M[n] = G(beta) R(T1, T2, TR_n) Q(alpha_n, phi_n) M[n-1] + (M0/Nv) b(T1, TR_n)

and the voxel signal at the n-th echo is the sum over isochromats of
``P R(T1, T2, TE_n) Q(alpha_n, phi_n) M[n-1]``. The spoiler dephasing G is part
of the state update only; it happens after the echo.

Times are in milliseconds and angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import _kernels

DEFAULT_TE = 2.0
DEFAULT_NV = 400
FAST_NV = 40


@dataclass(frozen=True)
class TissueParams:
    """Unknown tissue parameters (T1 [ms], T2 [ms], M0)."""

    t1: float
    t2: float
    m0: float = 1.0

    def __post_init__(self):
        for name in ("t1", "t2", "m0"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.m0], dtype=float)

    def with_m0(self, m0: float) -> "TissueParams":
        return TissueParams(self.t1, self.t2, m0)


@dataclass(frozen=True)
class AcqParams:
    """Acquisition parameters for one TR."""

    alpha: float
    phi: float
    te: float
    tr: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.phi)):
            raise ValueError("alpha and phi must be finite")
        if not (0 < self.te < self.tr):
            raise ValueError(f"need 0 < te < tr, got te={self.te}, tr={self.tr}")


class AcqSchedule:
    """Length-N acquisition schedule stored column-wise.

    Parameters
    ----------
    alpha, phi, te, tr : array_like
        Per-TR flip angle [rad], RF phase [rad], echo time [ms] and
        repetition time [ms]. Scalars are broadcast to the length of ``alpha``.
    """

    __slots__ = ("alpha", "phi", "te", "tr")

    def __init__(self, alpha, phi=0.0, te=DEFAULT_TE, tr=12.0):
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if alpha.ndim != 1 or alpha.size == 0:
            raise ValueError("schedule must have at least one entry")
        n = alpha.size
        cols = [alpha]
        for v in (phi, te, tr):
            a = np.asarray(v, dtype=float)
            cols.append(np.full(n, float(a)) if a.ndim == 0 else a.reshape(-1))
        for col in cols[1:]:
            if col.size != n:
                raise ValueError("schedule columns must have equal length")
        alpha, phi, te, tr = (np.ascontiguousarray(c) for c in cols)
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(phi))):
            raise ValueError("alpha and phi must be finite")
        if not (np.all(np.isfinite(te)) and np.all(np.isfinite(tr))):
            raise ValueError("te and tr must be finite")
        bad = np.flatnonzero(~((te > 0) & (te < tr)))
        if bad.size:
            raise ValueError(f"need 0 < te < tr at entries {bad[:5].tolist()}")
        for name, col in zip(self.__slots__, (alpha, phi, te, tr)):
            col.setflags(write=False)
            setattr(self, name, col)

    @classmethod
    def from_entries(cls, entries: Sequence[AcqParams]) -> "AcqSchedule":
        return cls(
            [e.alpha for e in entries],
            [e.phi for e in entries],
            [e.te for e in entries],
            [e.tr for e in entries],
        )

    @property
    def entries(self) -> list[AcqParams]:
        return list(self)

    def __len__(self) -> int:
        return self.alpha.size

    def __iter__(self) -> Iterator[AcqParams]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> AcqParams:
        return AcqParams(float(self.alpha[i]), float(self.phi[i]), float(self.te[i]), float(self.tr[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, AcqSchedule):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__)

    def __repr__(self) -> str:
        return f"AcqSchedule(N={len(self)})"

    def prefix(self, n: int) -> "AcqSchedule":
        """First ``n`` TRs."""
        return AcqSchedule(self.alpha[:n], self.phi[:n], self.te[:n], self.tr[:n])

    def replace(self, **cols) -> "AcqSchedule":
        kw = {k: getattr(self, k) for k in self.__slots__}
        kw.update(cols)
        return AcqSchedule(**kw)


class IsochromatEnsemble:
    """Dephasing angles of the Nv isochromats partitioning a voxel."""

    __slots__ = ("betas",)

    def __init__(self, betas):
        betas = np.ascontiguousarray(np.atleast_1d(np.asarray(betas, dtype=float)))
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("ensemble needs at least one isochromat")
        if not np.all(np.isfinite(betas)):
            raise ValueError("betas must be finite")
        betas.setflags(write=False)
        self.betas = betas

    @classmethod
    def uniform(cls, nv: int = DEFAULT_NV) -> "IsochromatEnsemble":
        """One full spoiler cycle: beta_r = -pi + 2 pi (r - 1/2) / Nv."""
        if nv < 1:
            raise ValueError("nv must be >= 1")
        r = np.arange(1, nv + 1, dtype=float)
        return cls(-np.pi + 2.0 * np.pi * (r - 0.5) / nv)

    @property
    def nv(self) -> int:
        return self.betas.size

    def __len__(self) -> int:
        return self.betas.size

    def __repr__(self) -> str:
        return f"IsochromatEnsemble(nv={self.nv})"


def rf_rotation(alpha: float, phi: float) -> np.ndarray:
    """RF excitation matrix Q(alpha, phi) = Rz(-phi) Rx(alpha) Rz(phi)."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cp, sp = math.cos(phi), math.sin(phi)
    left = np.array([[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]])
    mid = np.array([[1.0, 0.0, 0.0], [0.0, ca, sa], [0.0, -sa, ca]])
    right = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    return left @ mid @ right


def rf_rotation_dalpha(alpha: float, phi: float) -> np.ndarray:
    """Derivative of :func:`rf_rotation` with respect to the flip angle."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cp, sp = math.cos(phi), math.sin(phi)
    left = np.array([[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]])
    mid = np.array([[0.0, 0.0, 0.0], [0.0, -sa, ca], [0.0, -ca, -sa]])
    right = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    return left @ mid @ right


def _check_relax(t1: float, t2: float) -> None:
    if not (t1 > 0 and t2 > 0):
        raise ValueError(f"relaxation times must be > 0, got t1={t1}, t2={t2}")


def relaxation(t1: float, t2: float, t: float) -> np.ndarray:
    """Relaxation matrix diag(exp(-t/T2), exp(-t/T2), exp(-t/T1))."""
    _check_relax(t1, t2)
    if t < 0:
        raise ValueError("elapsed time must be >= 0")
    e2 = math.exp(-t / t2)
    return np.diag([e2, e2, math.exp(-t / t1)])


def recovery(t1: float, t: float) -> np.ndarray:
    """Longitudinal recovery input vector b(T1, t) = [0, 0, 1 - exp(-t/T1)]."""
    if not t1 > 0:
        raise ValueError("t1 must be > 0")
    return np.array([0.0, 0.0, -math.expm1(-t / t1)])


def dephasing(beta: float) -> np.ndarray:
    """Spoiler dephasing G(beta): transverse rotation by -beta, identity on z."""
    c, s = math.cos(beta), math.sin(beta)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def step(state, u: AcqParams, theta: TissueParams, beta: float, nv: int) -> np.ndarray:
    """Advance one isochromat by one TR."""
    a = dephasing(beta) @ relaxation(theta.t1, theta.t2, u.tr) @ rf_rotation(u.alpha, u.phi)
    return a @ np.asarray(state, dtype=float) + (theta.m0 / nv) * recovery(theta.t1, u.tr)


def _rf_stack(alpha, phi, deriv=False) -> np.ndarray:
    ca, sa = np.cos(alpha), np.sin(alpha)
    if deriv:
        ca, sa = -sa, ca
        base = np.zeros_like(alpha)
    else:
        base = np.ones_like(alpha)
    cp, sp = np.cos(phi), np.sin(phi)
    # closed form of Rz(-phi) Rx(alpha) Rz(phi) (or its alpha-derivative)
    out = np.empty((alpha.size, 3, 3))
    out[:, 0, 0] = cp * cp * base + sp * sp * ca
    out[:, 0, 1] = -cp * sp * base + sp * cp * ca
    out[:, 0, 2] = sp * sa
    out[:, 1, 0] = -sp * cp * base + cp * sp * ca
    out[:, 1, 1] = sp * sp * base + cp * cp * ca
    out[:, 1, 2] = cp * sa
    out[:, 2, 0] = -sp * sa
    out[:, 2, 1] = -cp * sa
    out[:, 2, 2] = ca
    return out


def rf_matrices(schedule: AcqSchedule) -> np.ndarray:
    """Stack of Q(alpha_n, phi_n), shape (N, 3, 3)."""
    return _rf_stack(schedule.alpha, schedule.phi)


def rf_matrices_dalpha(schedule: AcqSchedule) -> np.ndarray:
    """Stack of dQ/dalpha at each TR, shape (N, 3, 3)."""
    return _rf_stack(schedule.alpha, schedule.phi, deriv=True)


def _col(a) -> np.ndarray:
    # writable contiguous float64 keeps a single compiled kernel signature
    return np.array(a, dtype=np.float64, order="C")


def simulate_many(schedule: AcqSchedule, t1, t2, m0, ensemble: IsochromatEnsemble) -> np.ndarray:
    """Signals for many tissues at once, shape (K, N, 2)."""
    t1 = _col(np.atleast_1d(t1))
    t2 = _col(np.atleast_1d(t2))
    m0 = _col(np.broadcast_to(np.asarray(m0, dtype=float), t1.shape))
    if t1.shape != t2.shape:
        raise ValueError("t1 and t2 must have the same shape")
    if not (np.all(t1 > 0) and np.all(t2 > 0)):
        raise ValueError("relaxation times must be > 0")
    out = np.empty((t1.size, len(schedule), 2))
    _kernels.simulate_batch(
        rf_matrices(schedule), _col(schedule.te), _col(schedule.tr), t1, t2, m0,
        np.cos(ensemble.betas), np.sin(ensemble.betas), out,
    )
    return out


def simulate(schedule: AcqSchedule, theta: TissueParams, ensemble: IsochromatEnsemble) -> np.ndarray:
    """Noiseless voxel transverse magnetization m[n], shape (N, 2)."""
    return simulate_many(schedule, theta.t1, theta.t2, theta.m0, ensemble)[0]


def conventional_schedule(n: int, seed: int = 0, te: float = DEFAULT_TE) -> AcqSchedule:
    """FISP-style fingerprinting schedule used to initialize designs.

    A 180 degree inversion is followed by half-sine flip-angle lobes of 250 TRs
    rising from 10 degrees to a per-lobe peak between 40 and 60 degrees.
    TRs are smooth value noise between 11 and 15 ms. Deterministic for a
    given ``seed``.
    """
    if n < 2:
        raise ValueError("conventional schedule needs n >= 2")
    rng = np.random.default_rng(seed)
    lobe = 250
    nlobes = -(-(n - 1) // lobe)
    peaks = np.deg2rad(rng.uniform(40.0, 60.0, nlobes))
    j = np.arange(n - 1)
    k, pos = np.divmod(j, lobe)
    lo = np.deg2rad(10.0)
    flips = lo + (peaks[k] - lo) * np.sin(np.pi * (pos + 0.5) / lobe)
    alpha = np.concatenate([[np.pi], flips])

    # cosine-interpolated knots keep every TR inside [11, 15]
    spacing = 25
    knots = rng.uniform(11.0, 15.0, n // spacing + 2)
    t = np.arange(n) / spacing
    i0 = np.floor(t).astype(int)
    w = 0.5 - 0.5 * np.cos(np.pi * (t - i0))
    tr = (1.0 - w) * knots[i0] + w * knots[i0 + 1]
    return AcqSchedule(alpha, 0.0, te, np.clip(tr, 11.0, 15.0))
