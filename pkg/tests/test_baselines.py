import numpy as np
import pytest

from umaircomp.agp import AgpOptions
from umaircomp.baselines import (
    SCHEMES,
    digital_lower_bound,
    digital_projection_scheme,
    identity_f_scheme,
    register_scheme,
    solve_scheme,
)
from umaircomp.pam import PamOptions, SolveResult, f_block, pam_solve, update_r
from umaircomp.system import ChannelSet, Structure, SystemConfig, check_feasibility, generate_channels


def test_identity_scalar_system():
    cfg = SystemConfig(N=1, K=2, P0=1, sigma_b2=0.1, sigma_u2=0.1, alpha=[0.5, 0.5], pathloss=1)
    ch = generate_channels(SystemConfig.from_physical(1, 2).replace(pathloss=1.0), 0)
    res = identity_f_scheme(ch, cfg)
    assert np.array_equal(res.design.F, [[1]])
    assert res.design.structure == Structure.IDENTITY
    assert check_feasibility(res.design, cfg).ok()


def test_identity_objective_never_increases():
    cfg = SystemConfig.from_physical(6, 3)
    ch = generate_channels(cfg, 3)
    obj = [r["objective"] for r in identity_f_scheme(ch, cfg).trace]
    assert all(b <= a for a, b in zip(obj, obj[1:]))


def test_digital_scalar_noiseless_zero():
    cfg = SystemConfig(N=1, K=1, P0=1, sigma_b2=0, sigma_u2=0, alpha=[1], pathloss=1)
    ch = ChannelSet([[0.4 + 0.1j]], [[-0.3 + 0.9j]])
    res = digital_lower_bound(ch, cfg, PamOptions(M_max=50, Q_max=50))
    assert res.objective <= 1e-10
    assert res.design.structure == Structure.DIGITAL


def test_relaxed_inner_trace_not_worse():
    cfg = SystemConfig.from_physical(5, 3)
    ch = generate_channels(cfg, 4)
    F = np.ones((5, 5), dtype=complex)
    t = np.full(3, np.sqrt(cfg.P0), dtype=complex)
    r = update_r(F, t, ch, cfg)
    _, proj = f_block(F, ch, cfg, r, t, 1.0, 100, True)
    _, free = f_block(F, ch, cfg, r, t, 1.0, 100, False)
    assert free[-1] <= proj[-1] * (1 + 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_dominance_chain(seed):
    cfg = SystemConfig.from_physical(8, 4)
    ch = generate_channels(cfg, seed)
    dig = digital_lower_bound(ch, cfg)
    pam = pam_solve(ch, cfg)
    ident = identity_f_scheme(ch, cfg)
    proj = digital_projection_scheme(ch, cfg, digital=dig)
    assert dig.objective <= pam.objective + 1e-9
    assert pam.objective < ident.objective
    assert check_feasibility(proj.design, cfg).ok()
    assert proj.design.structure == Structure.FULLY_CONNECTED


def test_projection_of_unit_modulus_digital_is_identity():
    cfg = SystemConfig.from_physical(3, 2)
    ch = generate_channels(cfg, 2)
    pam = pam_solve(ch, cfg, PamOptions(N_max=2))
    out = digital_projection_scheme(ch, cfg, digital=pam)
    assert np.array_equal(out.design.F, pam.design.F)
    assert np.array_equal(out.design.t, pam.design.t)
    assert np.array_equal(out.design.r, pam.design.r)


def test_registry():
    assert set(SCHEMES) >= {"identity", "digital", "digital-proj", "pam", "agp"}
    with pytest.raises(ValueError, match="available"):
        solve_scheme("sdr", None, None)
    with pytest.raises(ValueError):
        register_scheme("pam", lambda *a: None)
    cfg = SystemConfig.from_physical(2, 2)
    ch = generate_channels(cfg, 0)
    register_scheme("_test_identity", lambda c, s, po, ao: identity_f_scheme(c, s, po))
    try:
        res = solve_scheme("_test_identity", ch, cfg)
        assert isinstance(res, SolveResult)
    finally:
        SCHEMES.pop("_test_identity")


@pytest.mark.parametrize("name", ["identity", "digital", "digital-proj", "pam", "agp"])
def test_every_scheme_feasible(name):
    cfg = SystemConfig.from_physical(4, 2)
    ch = generate_channels(cfg, 1)
    res = solve_scheme(name, ch, cfg, PamOptions(N_max=3), AgpOptions())
    assert check_feasibility(res.design, cfg).ok()
    assert np.isfinite(res.objective)
