import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrfdesign.bloch import (
    AcqSchedule,
    IsochromatEnsemble,
    TissueParams,
    conventional_schedule,
    recovery,
    relaxation,
    simulate,
)
from mrfdesign.crb import (
    COND_LIMIT,
    FisherMatrix,
    SingularInformation,
    crb,
    crb_for,
    fisher,
    irfisp_state_space,
    matrix_derivatives,
    sensitivity_trajectory,
    state_space_sensitivities,
)

from conftest import random_schedule, random_tissue


def fd_jacobian(schedule, theta, ens, rel=1e-5):
    cols = []
    base = theta.as_array()
    for i in range(3):
        h = rel * base[i]
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        cols.append((simulate(schedule, TissueParams(*up), ens) - simulate(schedule, TissueParams(*dn), ens)) / (2 * h))
    return np.stack(cols, axis=-1)


def colwise_rel_error(a, b):
    a, b = a.reshape(-1, 3), b.reshape(-1, 3)
    return np.linalg.norm(a - b, axis=0) / np.linalg.norm(b, axis=0)


def test_matrix_derivatives_against_finite_differences():
    t1, t2, t, h = 900.0, 70.0, 12.0, 1e-4
    d = matrix_derivatives(TissueParams(t1, t2), t)
    np.testing.assert_allclose(
        d.dR_dT1, (relaxation(t1 + h, t2, t) - relaxation(t1 - h, t2, t)) / (2 * h), atol=1e-12
    )
    np.testing.assert_allclose(
        d.dR_dT2, (relaxation(t1, t2 + h, t) - relaxation(t1, t2 - h, t)) / (2 * h), atol=1e-12
    )
    np.testing.assert_allclose(d.db_dT1, (recovery(t1 + h, t) - recovery(t1 - h, t)) / (2 * h), atol=1e-12)
    with pytest.raises(ValueError):
        matrix_derivatives(TissueParams(t1, t2), -1.0)


@pytest.mark.parametrize("seed", [0, 1])
def test_fast_recursion_matches_generic_state_space(seed):
    rng = np.random.default_rng(seed)
    s = random_schedule(rng, 30, phi=True)
    theta = random_tissue(rng)
    ens = IsochromatEnsemble.uniform(9)
    m, jac = sensitivity_trajectory(s, theta, ens)
    m_ref, jac_ref = state_space_sensitivities(irfisp_state_space(s, theta, ens))
    np.testing.assert_allclose(m, m_ref, rtol=0, atol=1e-14)
    assert np.all(colwise_rel_error(jac, jac_ref) < 1e-12)
    np.testing.assert_array_equal(m, simulate(s, theta, ens))


@pytest.mark.parametrize("seed", [3, 4])
def test_sensitivities_against_finite_differences(seed, ens40):
    rng = np.random.default_rng(seed)
    s = random_schedule(rng, 60)
    theta = random_tissue(rng)
    _, jac = sensitivity_trajectory(s, theta, ens40)
    assert np.all(colwise_rel_error(jac, fd_jacobian(s, theta, ens40)) < 1e-7)


def test_m0_sensitivity_is_signal_over_m0(rng, ens40):
    s = random_schedule(rng, 40)
    theta = random_tissue(rng)
    m, jac = sensitivity_trajectory(s, theta, ens40)
    np.testing.assert_allclose(jac[..., 2], m / theta.m0, rtol=1e-12, atol=1e-16)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1.0))
def test_fisher_is_symmetric_psd_and_scales_with_noise(seed, sigma):
    rng = np.random.default_rng(seed)
    jac = rng.normal(size=(rng.integers(2, 20), 2, 3)) * rng.uniform(1e-3, 1e3, size=3)
    f = fisher(jac, sigma).matrix
    assert np.array_equal(f, f.T)
    w = np.linalg.eigvalsh(f)
    assert w.min() >= -1e-10 * w.max()
    f2 = fisher(jac, 2 * sigma).matrix
    np.testing.assert_allclose(f2 * 4, f, rtol=1e-12)


def test_fisher_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        fisher(np.ones((3, 2, 3)), 0.0)


def test_crb_of_diagonal_information():
    rep = crb(FisherMatrix(np.diag([4.0, 25.0, 100.0]), 1.0), TissueParams(1.0, 1.0, 1.0))
    np.testing.assert_allclose(rep.ncrb, [0.5, 0.2, 0.1], rtol=1e-14)
    np.testing.assert_allclose(rep.crb_matrix, np.diag([0.25, 0.04, 0.01]), rtol=1e-14)
    assert rep.condition_number == pytest.approx(25.0)
    d = rep.as_dict()
    assert set(d) == {"fim", "crb", "ncrb", "condition_number"}
    assert d["ncrb"]["t2"] == pytest.approx(0.2)


def test_crb_inverts_realistic_fim(white_matter):
    s = conventional_schedule(300)
    rep = crb_for(s, white_matter, IsochromatEnsemble.uniform(40), 0.02)
    prod = rep.crb_matrix @ rep.fim
    np.testing.assert_allclose(prod, np.eye(3), atol=1e-9)
    np.testing.assert_array_equal(rep.crb_matrix, rep.crb_matrix.T)


def test_crb_scales_with_noise_variance(white_matter, ens40):
    s = conventional_schedule(200)
    a = crb_for(s, white_matter, ens40, 0.01).crb_matrix
    b = crb_for(s, white_matter, ens40, 0.02).crb_matrix
    np.testing.assert_allclose(b, 4 * a, rtol=1e-10)


def test_zero_flip_schedule_is_singular(white_matter, ens40):
    s = AcqSchedule(np.zeros(50), 0.0, 2.0, 12.0)
    with pytest.raises(SingularInformation):
        crb_for(s, white_matter, ens40, 0.01)


def test_rank_deficient_fim_is_singular():
    f = np.outer([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(SingularInformation):
        crb(FisherMatrix(f, 1.0), TissueParams(1, 1, 1))
    near = np.diag([1.0, 1.0, 0.1 / COND_LIMIT])
    with pytest.raises(SingularInformation):
        crb(FisherMatrix(near, 1.0), TissueParams(1, 1, 1))


def test_crb_diagonals_shrink_with_longer_prefixes(white_matter, ens40):
    s = conventional_schedule(400)
    diags = [np.diag(crb_for(s.prefix(n), white_matter, ens40, 0.01).crb_matrix) for n in range(50, 401, 50)]
    assert np.all(np.diff(np.array(diags), axis=0) <= 0)


def test_crb_invariant_to_state_basis_change(rng):
    s = random_schedule(rng, 40, phi=True)
    theta = random_tissue(rng)
    ens = IsochromatEnsemble.uniform(6)
    ss = irfisp_state_space(s, theta, ens)
    u, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    _, j0 = state_space_sensitivities(ss)
    _, j1 = state_space_sensitivities(ss.transformed(u))
    c0 = crb(fisher(j0, 0.01), theta).crb_matrix
    c1 = crb(fisher(j1, 0.01), theta).crb_matrix
    assert np.max(np.abs(c1 - c0) / np.abs(np.diag(c0)).max()) < 1e-10


def test_small_ensemble_is_accurate_enough_for_design(white_matter):
    s = conventional_schedule(400)
    a = crb_for(s, white_matter, IsochromatEnsemble.uniform(40), 0.01).ncrb
    b = crb_for(s, white_matter, IsochromatEnsemble.uniform(400), 0.01).ncrb
    np.testing.assert_allclose(a, b, rtol=0.01)
