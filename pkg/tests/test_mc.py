import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrfdesign.bloch import IsochromatEnsemble, TissueParams, conventional_schedule, simulate
from mrfdesign.crb import crb_for
from mrfdesign.dictionary import GridSpec, build_grid, generate
from mrfdesign.mc import (
    NoiseModel,
    add_noise,
    error_metrics,
    local_grid,
    overall_error,
    run_mc,
    snr_to_sigma,
    sweep_ncrb,
    write_rows,
)

ENS = IsochromatEnsemble.uniform(40)


@pytest.fixture(scope="module")
def setup():
    sched = conventional_schedule(150, seed=2)
    theta = TissueParams(700.0, 60.0, 0.6)
    spec = GridSpec(((500.0, 900.0, 10.0),), ((40.0, 80.0, 1.0),))
    return sched, theta, generate(sched, build_grid(spec), ENS, spec)


def test_snr_conversion():
    assert snr_to_sigma(0, 1) == 1.0
    assert snr_to_sigma(20, 1) == pytest.approx(0.1, rel=1e-15)
    assert snr_to_sigma(33, 0.6) == pytest.approx(0.6 * 10 ** (-1.65), rel=1e-15)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            snr_to_sigma(10, bad)


def test_noise_model_validation():
    for kw in (dict(sigma=0.0), dict(sigma=-1.0), dict(sigma=1.0, seed=-1), dict(sigma=1.0, seed=1.5)):
        with pytest.raises(ValueError):
            NoiseModel(**kw)


def test_vanishing_noise_is_identity():
    s = np.linspace(-1, 1, 50)
    np.testing.assert_allclose(add_noise(s, NoiseModel(1e-300, 3)), s, rtol=0, atol=1e-12)


def test_noise_is_deterministic_per_seed_and_trial():
    s = np.zeros(100)
    nm = NoiseModel(1.0, 7)
    assert np.array_equal(add_noise(s, nm, 4), add_noise(s, nm, 4))
    assert not np.array_equal(add_noise(s, nm, 4), add_noise(s, nm, 5))
    assert not np.array_equal(add_noise(s, nm, 4), add_noise(s, NoiseModel(1.0, 8), 4))


def test_noise_std_law_of_large_numbers():
    z = add_noise(np.zeros(100_000), NoiseModel(0.3, 11))
    assert abs(z.std() / 0.3 - 1) < 0.01
    assert abs(z.mean()) < 0.01


def test_trials_are_uncorrelated():
    nm = NoiseModel(1.0, 0)
    z = np.stack([add_noise(np.zeros(800), nm, k) for k in range(20)])
    c = np.corrcoef(z)
    off = c[~np.eye(20, dtype=bool)]
    assert np.max(np.abs(off)) < 0.15
    assert abs(np.corrcoef(z[0], z[1])[0, 1]) < 0.05


def test_error_metrics_by_hand():
    est = np.array([[1.0, 2.0], [3.0, 2.0], [2.0, 5.0]])
    th = np.array([2.0, 2.0])
    m = error_metrics(est, th)
    np.testing.assert_allclose(m["mean"], [2.0, 3.0])
    np.testing.assert_allclose(m["nbias"], [0.0, 0.5])
    np.testing.assert_allclose(m["nstd"], [math.sqrt(2 / 3) / 2, math.sqrt(2.0) / 2])
    np.testing.assert_allclose(m["nrmse"], [math.sqrt(2 / 3) / 2, math.sqrt(3.0) / 2])
    np.testing.assert_allclose(m["nmae"], [1 / 3, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_rmse_decomposition_identity(seed):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.5, 1000, 3)
    est = th + rng.normal(rng.normal(0, 5, 3), rng.uniform(0.01, 50, 3), (rng.integers(2, 200), 3))
    m = error_metrics(est, th)
    np.testing.assert_allclose(m["nrmse"] ** 2, m["nbias"] ** 2 + m["nstd"] ** 2, rtol=1e-10)


def test_noiseless_mc_is_exact(setup):
    sched, theta, d = setup
    res = run_mc(sched, theta, NoiseModel(1e-300, 0), d, trials=5)
    np.testing.assert_array_equal(res.nbias[:2], 0.0)
    np.testing.assert_array_equal(res.nstd[:2], 0.0)
    np.testing.assert_array_equal(res.nrmse[:2], 0.0)
    np.testing.assert_allclose(res.estimates[:, 2], 0.6, rtol=1e-14)


def test_mc_result_contract(setup):
    sched, theta, d = setup
    nm = NoiseModel(snr_to_sigma(33, 0.6), 1)
    res = run_mc(sched, theta, nm, d, trials=100)
    assert res.trials == 100 and res.estimates.shape == (100, 3)
    np.testing.assert_allclose(res.nrmse**2, res.nbias**2 + res.nstd**2, rtol=1e-10)
    for v in (res.nbias, res.nstd, res.nrmse, res.nmae, res.empirical_std_over_crb):
        assert np.all(v >= 0)
    d2 = res.as_dict()
    assert set(d2["nbias"]) == {"t1", "t2", "m0"}
    again = run_mc(sched, theta, nm, d, trials=100)
    assert np.array_equal(again.estimates, res.estimates)
    with pytest.raises(ValueError):
        run_mc(sched, theta, nm, d, trials=1)


def test_sweep_single_row_matches_crb(white_matter):
    s = conventional_schedule(300)
    rows = sweep_ncrb([("a", s)], white_matter, 0.02, ENS)
    ref = crb_for(s, white_matter, ENS, 0.02).ncrb
    assert rows == [{"label": "a", "n": 300, "ncrb_t1": ref[0], "ncrb_t2": ref[1], "ncrb_m0": ref[2]}]
    assert sweep_ncrb([s], white_matter, 0.02, ENS)[0]["label"] == "0"
    with pytest.raises(ValueError):
        sweep_ncrb([], white_matter, 0.02)


def test_sweep_over_lengths_decreases(white_matter):
    rows = sweep_ncrb([conventional_schedule(n) for n in range(300, 801, 100)], white_matter, 0.02, ENS)
    t2 = [r["ncrb_t2"] for r in rows]
    assert all(b < a for a, b in zip(t2, t2[1:]))


def test_overall_error():
    t = np.array([3.0, -4.0, 12.0])
    assert overall_error(t, t) == 0.0
    assert overall_error(t, 1.1 * t) == pytest.approx(0.1, rel=1e-14)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=10), rng.normal(size=10)
    hand = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))) / math.sqrt(sum(x * x for x in a))
    assert overall_error(a, b) == pytest.approx(hand, rel=1e-14)
    with pytest.raises(ValueError):
        overall_error(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        overall_error(np.ones(3), np.ones(4))


def test_local_grid_contains_truth():
    g = local_grid(TissueParams(700, 60, 1), 10, 2, 1, 0.25)
    assert g.shape == (11 * 9, 2)
    assert any((row == [700, 60]).all() for row in g)


def test_write_rows_with_header(tmp_path):
    p = tmp_path / "x.csv"
    write_rows([{"a": 1, "b": 2}], p, header_lines=["seed=3"])
    assert p.read_text().splitlines() == ["# seed=3", "a,b", "1,2"]
