import numpy as np
import pytest

from pggru.inversion import (
    InversionError,
    StableInverseFF,
    assemble_stable_ff,
    derive_feedforward,
    design_stable_inverse,
    factor_unstable,
    inverse_prediction,
    linear_ff_input,
    noncausal_expand,
    relative_degree,
    residuals,
    zpetc_factor,
)
from pggru.lti import RationalTransferFunction, simulate_lti, ss_to_tf, tf_to_ss
from pggru.plant import TwoMsdParams, discrete_model

Ts = 5e-4


def tf_from_roots(zeros, poles, gain=1.0):
    P = np.polynomial.polynomial
    return RationalTransferFunction(gain * P.polyfromroots(zeros).real,
                                    P.polyfromroots(poles).real, Ts)


def min_phase_system(eta0):
    poles = [0.9, 0.5 + 0.3j, 0.5 - 0.3j, -0.2]
    zeros = [0.3, -0.6, 0.1][: 4 - eta0]
    return tf_to_ss(tf_from_roots(zeros, poles, 0.7))


def smooth_reference(n=600):
    t = np.arange(n) / n
    r = np.where(t < 0.2, 0.0, np.sin(np.pi * np.clip((t - 0.2) / 0.6, 0, 1)) ** 4)
    return r


@pytest.mark.parametrize("eta0", [1, 2, 3])
def test_relative_degree(eta0):
    assert relative_degree(min_phase_system(eta0)) == eta0


def test_relative_degree_of_plant():
    assert relative_degree(discrete_model(TwoMsdParams())) == 1


@pytest.mark.parametrize("eta0", [1, 2, 3])
def test_inverse_realization_cancels_plant(eta0):
    dss = min_phase_system(eta0)
    ff = derive_feedforward(dss)
    H = ss_to_tf(ff.as_state_space())
    G = ss_to_tf(dss)
    z = np.exp(1j * np.linspace(0.01, 3.1, 50))
    # G(z) H(z) = z^-eta0: the inverse is driven by r(k + eta0)
    assert np.allclose(G(z) * H(z), z ** -eta0, atol=1e-9)


@pytest.mark.parametrize("eta0", [1, 2])
def test_minimum_phase_tracking_is_exact(eta0):
    dss = min_phase_system(eta0)
    sff = design_stable_inverse(dss)
    assert sff.n_ep == 0 and sff.preview == eta0
    r = smooth_reference()
    y = simulate_lti(dss, linear_ff_input(sff, r))
    assert np.max(np.abs(y - r)) < 1e-9


def test_plant_inverse_structure():
    ff = derive_feedforward(discrete_model(TwoMsdParams()))
    assert ff.eta0 == 1
    eig = np.linalg.eigvals(ff.A_ff)
    assert np.sum(np.abs(eig) > 1) == 1
    _, unstable = factor_unstable(ff)
    assert len(unstable) == 1
    p = unstable[0]
    assert p.imag == 0 and p.real < -1
    sff = assemble_stable_ff(ff, "zpetc")
    assert sff.n_ep == 1 and sff.preview == 2


def test_zpetc_real_pole_zero_phase_and_dc():
    for p in (-4.5, -1.3, 1.7, 3.0):
        F, ep = zpetc_factor(p, Ts)
        assert ep == 1
        w = np.linspace(-np.pi, np.pi, 1000)
        z = np.exp(1j * w)
        v = (z - p) * F(z)
        assert np.max(np.abs(np.angle(v))) < 1e-10
        assert F(1.0) == pytest.approx(1.0 / (1.0 - p), rel=1e-12)


def test_zpetc_complex_pair_zero_phase():
    p = 1.3 * np.exp(0.7j)
    F, ep = zpetc_factor(p, Ts)
    assert ep == 2
    z = np.exp(1j * np.linspace(-np.pi, np.pi, 1000))
    v = (z - p) * (z - np.conj(p)) * F(z)
    assert np.max(np.abs(np.angle(v))) < 1e-10
    assert F(1.0).real == pytest.approx(1.0 / abs(1 - p) ** 2, rel=1e-12)


def test_zpetc_dc_gain_equals_exact_inverse():
    # non-minimum-phase test system without an integrator
    dss = tf_to_ss(tf_from_roots([-2.5, 0.4], [0.9, 0.6, 0.2], 0.3))
    ff = derive_feedforward(dss)
    H = ss_to_tf(ff.as_state_space())
    sff = assemble_stable_ff(ff, "zpetc")
    assert sff.n_ep == 1
    # at z = 1 the preview shifts are invisible
    assert abs(sff.kff(1.0) - H(1.0)) <= 1e-10 * abs(H(1.0))


def test_zpetc_dc_gain_on_plant():
    # the rig has a free-rotation mode, so the exact inverse vanishes at DC
    ff = derive_feedforward(discrete_model(TwoMsdParams()))
    H = ss_to_tf(ff.as_state_space())
    sff = assemble_stable_ff(ff, "zpetc")
    assert abs(sff.kff(1.0) - H(1.0)) < 1e-10


@pytest.mark.parametrize("p", [1.2, -1.2, 2.0, -2.0, 5.0, -5.0])
def test_noncausal_tail_bound(p):
    z = np.exp(1j * np.linspace(-np.pi, np.pi, 2001))
    exact = 1.0 / (z - p)
    for order in range(1, 31):
        c, ep, bound = noncausal_expand(p, order)
        assert ep == order + 1
        approx = np.polynomial.polynomial.polyval(z, c)
        assert np.max(np.abs(exact - approx)) <= bound * (1 + 1e-9) + 1e-15


def test_noncausal_complex_pair_tail_bound():
    p = 1.5 * np.exp(1.1j)
    z = np.exp(1j * np.linspace(-np.pi, np.pi, 2001))
    exact = 1.0 / ((z - p) * (z - np.conj(p)))
    for order in (1, 5, 20):
        c, ep, bound = noncausal_expand(p, order)
        assert ep == order + 2
        assert np.max(np.abs(exact - np.polynomial.polynomial.polyval(z, c))) <= bound * (1 + 1e-9)


def test_noncausal_requires_unstable_pole_and_order():
    with pytest.raises(InversionError):
        noncausal_expand(0.5, 3)
    with pytest.raises(InversionError):
        noncausal_expand(2.0, 0)


@pytest.mark.parametrize("order", [5, 10, 20, 30])
def test_noncausal_design_on_plant(order):
    ff = derive_feedforward(discrete_model(TwoMsdParams()))
    sff = assemble_stable_ff(ff, "noncausal", order=order)
    assert sff.n_ep == order + 1 and sff.preview == order + 2
    H = ss_to_tf(ff.as_state_space())
    z = np.exp(1j * np.linspace(1e-3, np.pi, 800))
    exact = H(z) * z ** ff.eta0
    rel = np.abs(sff.kff(z) * z ** sff.preview - exact) / np.abs(exact)
    # relative error is the series tail times |z - p|, plus a rounding floor
    p = abs(sff.unstable_poles[0])
    assert rel.max() <= sff.tail_bound * (1 + p) + 1e-8


def test_assembled_filter_is_stable_and_proper():
    sff = design_stable_inverse(discrete_model(TwoMsdParams()))
    assert sff.kff.is_proper
    assert np.all(np.abs(sff.kff.poles()) < 1)


def test_unknown_method():
    ff = derive_feedforward(discrete_model(TwoMsdParams()))
    with pytest.raises(InversionError):
        assemble_stable_ff(ff, "magic")


def test_round_trip_dict():
    sff = design_stable_inverse(discrete_model(TwoMsdParams()))
    back = StableInverseFF.from_dict(sff.to_dict())
    assert np.array_equal(back.kff.num, sff.kff.num)
    assert back.preview == sff.preview
    assert back.unstable_poles == sff.unstable_poles


def test_prediction_and_residual_lengths():
    sff = design_stable_inverse(discrete_model(TwoMsdParams()))
    y = np.linspace(0, 1, 100)
    u_hat = inverse_prediction(sff, y)
    assert len(u_hat) == 100 - sff.preview
    eps = residuals(np.zeros(100), u_hat, sff.preview)
    assert np.allclose(eps, -u_hat)
    with pytest.raises(InversionError, match="length"):
        residuals(np.zeros(100), u_hat[:-1], sff.preview)


def test_ff_input_full_length_and_consistent_with_prediction():
    sff = design_stable_inverse(discrete_model(TwoMsdParams()))
    r = smooth_reference(400)
    u = linear_ff_input(sff, r)
    assert len(u) == len(r)
    # same filter, same shifted sequence
    assert np.allclose(u[: len(r) - sff.preview], inverse_prediction(sff, r), atol=0)
