"""Noise model, Monte Carlo evaluation of the dictionary estimator, CRB sweeps.

Noise for trial ``k`` of a run seeded with ``seed`` is drawn from
``Generator(PCG64(SeedSequence(seed, spawn_key=(k,))))`` using NumPy's
standard normal sampler, so any single trial can be reproduced without
replaying the ones before it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .bloch import DEFAULT_NV, AcqSchedule, IsochromatEnsemble, TissueParams, simulate
from .crb import PARAM_NAMES, crb_for
from .dictionary import Dictionary, match_batch


def snr_to_sigma(snr_db: float, s_ref: float) -> float:
    """Noise std for SNR = 20 log10(s_ref / sigma)."""
    if not s_ref > 0:
        raise ValueError("s_ref must be > 0")
    return float(s_ref * 10.0 ** (-snr_db / 20.0))


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    def rng(self, trial: int = 0) -> np.random.Generator:
        """Independent stream for one trial."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(trial),))
        return np.random.Generator(np.random.PCG64(ss))


def add_noise(signal, noise: NoiseModel, trial: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) to every real channel of ``signal``."""
    s = np.asarray(signal, dtype=float)
    return s + noise.sigma * noise.rng(trial).standard_normal(s.shape)


@dataclass
class McResult:
    """Normalized error statistics per parameter (T1, T2, M0).

    ``nbias`` is |mean(est) - true| / true and satisfies
    ``nrmse**2 == nbias**2 + nstd**2``; ``nmae`` is mean(|est - true|) / true.
    Standard deviations use the 1/K normalization except
    ``empirical_std_over_crb``, which uses the unbiased 1/(K-1) form.
    """

    nbias: np.ndarray
    nstd: np.ndarray
    nrmse: np.ndarray
    nmae: np.ndarray
    trials: int
    empirical_std_over_crb: np.ndarray
    theta_true: np.ndarray
    mean_estimate: np.ndarray
    estimates: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        def named(v):
            return dict(zip(PARAM_NAMES, np.asarray(v, dtype=float).tolist()))

        return {
            "trials": self.trials,
            "theta_true": named(self.theta_true),
            "mean_estimate": named(self.mean_estimate),
            "nbias": named(self.nbias),
            "nstd": named(self.nstd),
            "nrmse": named(self.nrmse),
            "nmae": named(self.nmae),
            "empirical_std_over_crb": named(self.empirical_std_over_crb),
        }


def error_metrics(estimates, theta_true) -> dict:
    """Normalized bias, std, RMSE and MAE of an estimate matrix (K, p)."""
    est = np.asarray(estimates, dtype=float)
    th = np.asarray(theta_true, dtype=float)
    mean = est.mean(axis=0)
    err = est - th
    return {
        "mean": mean,
        "nbias": np.abs(mean - th) / th,
        "nstd": np.sqrt(np.mean((est - mean) ** 2, axis=0)) / th,
        "nrmse": np.sqrt(np.mean(err**2, axis=0)) / th,
        "nmae": np.mean(np.abs(err), axis=0) / th,
    }


def run_mc(
    schedule: AcqSchedule,
    theta_true: TissueParams,
    noise: NoiseModel,
    dictionary: Dictionary,
    trials: int,
    ensemble: IsochromatEnsemble | None = None,
) -> McResult:
    """Monte Carlo evaluation of dictionary matching at one tissue.

    ``ensemble`` defaults to the isochromat count recorded in the dictionary
    so that the simulated data and the atoms share one signal model.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    if ensemble is None:
        ensemble = IsochromatEnsemble.uniform(int(dictionary.meta.get("nv") or DEFAULT_NV))
    clean = simulate(schedule, theta_true, ensemble).reshape(-1)
    noisy = np.stack([add_noise(clean, noise, k) for k in range(trials)])
    est = match_batch(noisy, dictionary)[:, :3]
    th = theta_true.as_array()
    m = error_metrics(est, th)
    # CRB is proportional to sigma^2; evaluate at unit noise so tiny sigmas do not underflow
    unit = crb_for(schedule, theta_true, ensemble, 1.0)
    ratio = est.std(axis=0, ddof=1) / (noise.sigma * np.sqrt(np.diag(unit.crb_matrix)))
    return McResult(
        nbias=m["nbias"],
        nstd=m["nstd"],
        nrmse=m["nrmse"],
        nmae=m["nmae"],
        trials=int(trials),
        empirical_std_over_crb=ratio,
        theta_true=th,
        mean_estimate=m["mean"],
        estimates=est,
    )


SWEEP_COLUMNS = ("label", "n", "ncrb_t1", "ncrb_t2", "ncrb_m0")


def sweep_ncrb(
    schedules,
    theta: TissueParams,
    sigma: float,
    ensemble: IsochromatEnsemble | None = None,
) -> list[dict]:
    """nCRB rows for a list of ``(label, schedule)`` pairs (or bare schedules)."""
    items = list(schedules)
    if not items:
        raise ValueError("no schedules given")
    ens = ensemble or IsochromatEnsemble.uniform(DEFAULT_NV)
    rows = []
    for i, item in enumerate(items):
        label, sched = item if isinstance(item, tuple) else (str(i), item)
        nc = crb_for(sched, theta, ens, sigma).ncrb
        rows.append(dict(zip(SWEEP_COLUMNS, (label, len(sched), *map(float, nc)))))
    return rows


def write_rows(rows, path, columns=None, header_lines=()) -> None:
    """CSV writer for lists of dicts; ``header_lines`` become '# ' comments."""
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def overall_error(true_vals, est_vals) -> float:
    """||true - est||_2 / ||true||_2."""
    t = np.asarray(true_vals, dtype=float).ravel()
    e = np.asarray(est_vals, dtype=float).ravel()
    if t.shape != e.shape:
        raise ValueError("length mismatch")
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ValueError("true vector has zero norm")
    return float(np.linalg.norm(t - e) / nt)


def local_grid(theta: TissueParams, t1_half: float, t1_step: float, t2_half: float, t2_step: float) -> np.ndarray:
    """Refined (T1, T2) grid centred on ``theta``, truth included exactly."""
    k1 = int(math.floor(t1_half / t1_step))
    k2 = int(math.floor(t2_half / t2_step))
    t1 = theta.t1 + t1_step * np.arange(-k1, k1 + 1)
    t2 = theta.t2 + t2_step * np.arange(-k2, k2 + 1)
    t1, t2 = t1[t1 > 0], t2[t2 > 0]
    g1, g2 = np.meshgrid(t1, t2, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])
