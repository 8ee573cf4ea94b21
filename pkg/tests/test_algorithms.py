from __future__ import annotations

import math

import numpy as np
import pytest

from gfa_oamp.algorithms import (
    DivergenceError,
    error_recursion_view,
    oamp_tau_schedule,
    run_amp,
    run_ist,
    run_oamp,
)
from gfa_oamp.denoisers import Linear, MmseBG, Prior, SoftThreshold, make_factory, mmse_factory
from gfa_oamp.linear_model import ProblemInstance, generate_instance
from gfa_oamp.state_evolution import se_run


def small_instance():
    A = np.array([[1.0, 0.5, -0.2], [0.3, -1.0, 0.4]])
    x0 = np.array([1.0, 0.0, -2.0])
    omega = np.array([0.1, -0.05])
    return ProblemInstance(A=A, x0=x0, omega=omega, y=A @ x0 + omega, sigma0_2=0.01, seed=0)


class TestIst:
    def test_hand_computed_steps(self):
        inst = small_instance()
        eta = SoftThreshold(0.3)
        traj = run_ist(inst, eta, 2)
        x = np.zeros(3)
        mses = [np.mean(inst.x0**2)]
        for _ in range(2):
            u = inst.A.T @ (inst.y - inst.A @ x) + x
            x = np.sign(u) * np.maximum(np.abs(u) - 0.3, 0)
            mses.append(np.mean((inst.x0 - x) ** 2))
        np.testing.assert_allclose(traj.mse, mses, rtol=1e-14)

    def test_zero_iterations(self):
        inst = generate_instance(50, 0.5, 0.01, Prior(0.2), seed=0)
        traj = run_ist(inst, SoftThreshold(1.0), 0)
        assert traj.T == 0
        np.testing.assert_allclose(traj.mse, [np.mean(inst.x0**2)])

    def test_schedule_too_short(self):
        with pytest.raises(ValueError):
            run_ist(small_instance(), [SoftThreshold(1.0)], 2)

    def test_divergence_detected(self):
        inst = generate_instance(200, 0.5, 0.01, Prior(0.2), seed=1)
        with pytest.raises(DivergenceError) as info:
            run_ist(inst, Linear(1.0), 60)
        assert info.value.algorithm == "IST"


class TestAmp:
    def test_hand_computed_onsager(self):
        inst = small_instance()
        eta = SoftThreshold(0.2)
        traj = run_amp(inst, eta, 3)
        x, z = np.zeros(3), inst.y.copy()
        for t in range(3):
            u = inst.A.T @ z + x
            x = eta(u)
            b = np.mean(eta.derivative(u))
            np.testing.assert_allclose(traj.onsager[t], b)
            z = inst.y - inst.A @ x + z * b / inst.delta
            np.testing.assert_allclose(traj.mse[t + 1], np.mean((inst.x0 - x) ** 2), rtol=1e-14)

    def test_tracks_state_evolution(self):
        prior = Prior(0.1)
        se = se_run(prior, 0.5, 0.01, mmse_factory(prior), 6)
        mses = [run_amp(generate_instance(2000, 0.5, 0.01, prior, s), list(se.denoisers), 6).mse for s in range(20)]
        mses = np.array(mses)
        se_err = mses.std(0, ddof=1) / math.sqrt(len(mses))
        assert np.all(np.abs(mses.mean(0) - se.sigma2) <= 4 * se_err + 0.03 * se.sigma2)


class TestOamp:
    def test_tau_sources_agree_with_explicit_schedule(self):
        prior = Prior(0.1)
        inst = generate_instance(400, 0.5, 0.01, prior, seed=3)
        base = mmse_factory(prior)
        taus = oamp_tau_schedule("se", base, prior, 0.5, 0.01, 4)
        a = run_oamp(inst, base, prior, 4, "se")
        b = run_oamp(inst, base, prior, 4, list(taus))
        np.testing.assert_array_equal(a.mse, b.mse)
        np.testing.assert_allclose(a.tau2, taus**2)
        assert all(eta.name == "df(mmse_bg)" for eta in a.denoisers)

    def test_empirical_tau(self):
        prior = Prior(0.1)
        inst = generate_instance(400, 0.5, 0.01, prior, seed=3)
        traj = run_oamp(inst, mmse_factory(prior), prior, 3, "empirical")
        np.testing.assert_allclose(traj.tau2[0], inst.y @ inst.y / inst.M)

    def test_unknown_source(self):
        prior = Prior(0.1)
        with pytest.raises(ValueError):
            run_oamp(small_instance(), mmse_factory(prior), prior, 2, "oracle")

    def test_gfa_tau_source_close_to_se(self):
        prior = Prior(0.1)
        base = mmse_factory(prior)
        se = oamp_tau_schedule("se", base, prior, 0.5, 0.01, 3)
        gfa = oamp_tau_schedule("gfa", base, prior, 0.5, 0.01, 3, mc_samples=100_000)
        np.testing.assert_allclose(gfa, se, rtol=0.02)


class TestLedgers:
    @pytest.mark.parametrize("algo", ["IST", "AMP", "OAMP"])
    def test_decomposition(self, algo):
        prior = Prior(0.1)
        inst = generate_instance(500, 0.5, 0.01, prior, seed=4)
        if algo == "IST":
            traj = run_ist(inst, SoftThreshold(0.5), 5)
        elif algo == "AMP":
            traj = run_amp(inst, MmseBG(prior, 0.1), 5)
        else:
            traj = run_oamp(inst, mmse_factory(prior), prior, 5)
        assert np.all(np.abs(traj.decomposition_gap()) <= 1e-10 * traj.mse.max())

    def test_error_recursion_reproduces_mse(self):
        prior = Prior(0.1)
        inst = generate_instance(500, 0.5, 0.01, prior, seed=4)
        traj = run_oamp(inst, make_factory("soft", prior), prior, 5)
        h2, q2 = error_recursion_view(inst, traj)
        assert len(h2) == 5 and len(q2) == 6
        np.testing.assert_allclose(q2, traj.mse, rtol=1e-10)

    def test_error_recursion_rejects_amp(self):
        inst = small_instance()
        with pytest.raises(ValueError):
            error_recursion_view(inst, run_amp(inst, SoftThreshold(0.2), 1))
