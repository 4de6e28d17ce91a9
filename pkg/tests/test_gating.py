import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedrecon.gating import (AttenuationModel, GatingModel, GatingParams, ParameterDomainError, gated_pixel,
                               profile, profile_grad, profile_numeric_oracle, profile_torch)

C = 0.3
G = GatingParams(xi=400.0, t_l=240.0, t_g=500.0, c=C)


def z_of(t):
    return np.asarray(t, dtype=float) * C


@pytest.mark.parametrize("t,expected", [(450.0, 240.0), (100.0, 0.0), (200.0, 40.0)])
def test_profile_examples(t, expected):
    assert profile(z_of(t), 0, G) == pytest.approx(expected, abs=1e-9)
    assert profile_numeric_oracle(z_of(t), 0, G) == pytest.approx(expected, rel=1e-6, abs=1e-9)


def test_profile_matches_oracle_across_cases():
    t = np.linspace(100.0, 1000.0, 301)
    a = profile(z_of(t), 0, G)
    o = profile_numeric_oracle(z_of(t), 0, G)
    np.testing.assert_allclose(a, o, rtol=1e-6, atol=1e-9)


def test_profile_continuous_at_case_boundaries():
    for tb in (160.0, 400.0, 660.0, 900.0):
        left = profile(z_of(tb - 1e-9), 0, G)
        right = profile(z_of(tb + 1e-9), 0, G)
        assert abs(left - right) < 1e-6
    t = np.linspace(0, 1200, 12001)
    p = profile(z_of(t), 0, G)
    assert p.max() == pytest.approx(240.0)
    support = t[p > 0]
    assert support[-1] - support[0] == pytest.approx(G.t_g[0] + G.t_l[0], abs=0.2)


def test_params_domain():
    with pytest.raises(ParameterDomainError):
        GatingParams(xi=400, t_l=300, t_g=200)
    with pytest.raises(ParameterDomainError):
        GatingParams(xi=100, t_l=240, t_g=500)
    with pytest.raises(ParameterDomainError):
        GatingParams(m=0.0)
    with pytest.raises(ParameterDomainError):
        GatingParams(dark=-0.1)
    with pytest.raises(ParameterDomainError):
        GatingParams(xi=(1.0, 2.0))


def test_params_round_trip():
    g = GatingParams(xi=(250, 500, 800), d0=0.3, dark=(0.01, 0.02, 0.03))
    assert GatingParams.from_dict(g.to_dict()) == g


def test_profile_grad_examples():
    plateau = profile_grad(z_of(450.0), 0, G)
    assert plateau["z"] == 0 and plateau["t_l"] == 1
    rise = profile_grad(z_of(200.0), 0, G)
    # profile is a function of z / c, so the rising-edge slope is 1 / c
    assert rise["z"] == pytest.approx(1 / C)
    out = profile_grad(z_of(50.0), 0, G)
    assert all(v == 0 for v in out.values())


def test_profile_grad_matches_fd():
    rng = np.random.default_rng(0)
    t = rng.uniform(100.0, 950.0, 100)
    kinks = np.array([160.0, 400.0, 660.0, 900.0])
    t = t[np.min(np.abs(t[:, None] - kinks), 1) > 0.01]
    h = 1e-3
    g = profile_grad(z_of(t), 0, G)
    for name in ("xi", "t_l", "t_g"):
        up = profile(z_of(t), 0, G.replace(**{name: getattr(G, name)[0] + h}))
        dn = profile(z_of(t), 0, G.replace(**{name: getattr(G, name)[0] - h}))
        np.testing.assert_allclose(g[name], (up - dn) / (2 * h), rtol=1e-5, atol=1e-7)
    hz = h * C
    fd = (profile(z_of(t) + hz, 0, G) - profile(z_of(t) - hz, 0, G)) / (2 * hz)
    np.testing.assert_allclose(g["z"], fd, rtol=1e-5, atol=1e-6)


def test_gated_pixel_examples():
    g = GatingParams(xi=400, t_l=240, t_g=500, dark=0.01, c=C)
    assert gated_pixel(0.0, 1.0, 1.0, 1.0, z_of(450), 0.2, 0, g) == pytest.approx(0.21)
    assert gated_pixel(0.7, 1.0, 0.0, 1.0, z_of(450), 0.2, 0, g) == pytest.approx(0.21)
    g0 = GatingParams(xi=400, t_l=240, t_g=500, c=C)
    assert gated_pixel(0.5, 2.0, 1.0, 1.0, z_of(450), 0.0, 0, g0) == pytest.approx(240.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 3), st.floats(0, 1))
def test_gated_pixel_affine(a, b, iota, lam):
    z = z_of(300.0)
    f = lambda al, io, la: gated_pixel(al, io, 0.8, 0.9, z, la, 0, G)
    assert f(a + b, iota, lam) - f(b, iota, lam) == pytest.approx(f(a, iota, 0) - f(0, iota, 0), abs=1e-9)
    assert f(a, iota, lam + b) - f(a, iota, lam) == pytest.approx(b, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(10.0, 400.0), st.floats(1.0, 2.5), st.floats(0.0, 1500.0))
def test_profile_torch_agrees(tl, ratio, t):
    g = GatingParams(xi=tl + 200.0, t_l=tl, t_g=tl * ratio, c=C)
    ref = profile(z_of(t), 0, g)
    got = profile_torch(torch.tensor(t, dtype=torch.float64), torch.tensor(g.xi[0], dtype=torch.float64),
                        torch.tensor(tl, dtype=torch.float64), torch.tensor(g.t_g[0], dtype=torch.float64))
    assert float(got) == pytest.approx(ref, abs=1e-9)
    assert 0.0 <= ref <= tl + 1e-12


def test_attenuation():
    a = AttenuationModel()
    z = np.array([0.1, 0.5, 1.0, 2.0, 10.0])
    v = a(z)
    assert np.all(np.diff(v) <= 0)
    assert v[2] == 1.0 and v[3] == 0.25
    assert np.all(AttenuationModel("none")(z) == 1.0)
    with pytest.raises(ParameterDomainError):
        AttenuationModel("exp")


def test_gating_model_round_trip():
    g = GatingParams(xi=(250, 500, 800), t_l=(240, 250, 260), t_g=(300, 400, 500), m=(2, 3, 4),
                     dark=(0.01, 0.02, 0.03), dark_p=0.005, d0=0.2)
    back = GatingModel(g, dtype=torch.float64).to_params()
    for f in ("xi", "t_l", "t_g", "m", "dark"):
        np.testing.assert_allclose(getattr(back, f), getattr(g, f), rtol=1e-12)
    assert back.d0 == pytest.approx(0.2)
