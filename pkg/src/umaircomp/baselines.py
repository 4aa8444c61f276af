"""Benchmark schemes and the scheme registry shared by the CLI and simulator."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .agp import AgpOptions, agp_solve
from .pam import PamOptions, SolveResult, alternate, pam_solve, t_block, update_r
from .system import (
    ChannelSet,
    Structure,
    SystemConfig,
    TransceiverDesign,
    max_normalized_mse,
    unit_modulus_projection,
)


def identity_f_scheme(ch: ChannelSet, config: SystemConfig,
                      opts: PamOptions | None = None) -> SolveResult:
    """F = I with t and r alternated.

    The t-block minimizes the summed alignment error rather than the max-MSE,
    so a t/r sweep is only accepted when it does not raise the max-MSE.
    """
    opts = opts or PamOptions()
    ch.check(config)
    F = np.eye(config.N, dtype=complex)
    t = np.full(config.K, np.sqrt(config.P0), dtype=complex)
    r = update_r(F, t, ch, config)
    obj = max_normalized_mse(TransceiverDesign(F, t, r, Structure.IDENTITY), ch, config)
    rows = [{"outer_iter": 0, "block": "init", "objective": obj}]
    for it in range(1, opts.N_max + 1):
        t_new, _ = t_block(F, ch, config, r, t, opts.rho, opts.Q_max, opts.inner_tol)
        r_new = update_r(F, t_new, ch, config)
        obj_new = max_normalized_mse(TransceiverDesign(F, t_new, r_new, Structure.IDENTITY), ch, config)
        if obj_new > obj:
            break
        done = obj - obj_new <= opts.rel_tol * max(obj, 1e-300)
        t, r, obj = t_new, r_new, obj_new
        rows.append({"outer_iter": it, "block": "t", "objective": obj})
        if done:
            break
    design = TransceiverDesign(F=F, t=t, r=r, structure=Structure.IDENTITY)
    return SolveResult(design=design, objective=obj, trace=rows)


def digital_lower_bound(ch: ChannelSet, config: SystemConfig, opts: PamOptions | None = None,
                        init: TransceiverDesign | None = None) -> SolveResult:
    """PAM outer loop without the unit-modulus copy z (unconstrained F).

    With ``init`` set to a constrained design, the result can never be worse
    than that design, since the best iterate (including the start) is returned.
    """
    return alternate(ch, config, opts or PamOptions(), init=init, project=False)


def digital_projection_scheme(ch: ChannelSet, config: SystemConfig, opts: PamOptions | None = None,
                              digital: SolveResult | None = None) -> SolveResult:
    """Project the digital F to unit modulus, then refit r and t."""
    opts = opts or PamOptions()
    if digital is None:
        digital = digital_lower_bound(ch, config, opts)
    Fd = digital.design.F
    F = unit_modulus_projection(Fd)
    if np.array_equal(F, Fd):
        d = digital.design
        design = TransceiverDesign(F=d.F, t=d.t, r=d.r, structure=Structure.FULLY_CONNECTED)
        return SolveResult(design=design, objective=max_normalized_mse(design, ch, config), trace=[])
    t = np.array(digital.design.t)
    r = update_r(F, t, ch, config)
    first = TransceiverDesign(F=F, t=t, r=r, structure=Structure.FULLY_CONNECTED)
    t, _ = t_block(F, ch, config, r, t, opts.rho, opts.Q_max, opts.inner_tol)
    r = update_r(F, t, ch, config)
    second = TransceiverDesign(F=F, t=t, r=r, structure=Structure.FULLY_CONNECTED)
    objs = [max_normalized_mse(d, ch, config) for d in (first, second)]
    i = int(np.argmin(objs))
    rows = [{"outer_iter": 1, "block": b, "objective": o} for b, o in zip(("r", "t"), objs)]
    return SolveResult(design=(first, second)[i], objective=objs[i], trace=rows)


Solver = Callable[[ChannelSet, SystemConfig, PamOptions, AgpOptions], SolveResult]

SCHEMES: dict[str, Solver] = {
    "identity": lambda ch, cfg, po, ao: identity_f_scheme(ch, cfg, po),
    "digital": lambda ch, cfg, po, ao: digital_lower_bound(ch, cfg, po),
    "digital-proj": lambda ch, cfg, po, ao: digital_projection_scheme(ch, cfg, po),
    "pam": lambda ch, cfg, po, ao: pam_solve(ch, cfg, po),
    "agp": lambda ch, cfg, po, ao: agp_solve(ch, cfg, ao),
}


def register_scheme(name: str, solver: Solver) -> None:
    """Add a solver under a new name (e.g. an SDP-based benchmark)."""
    if name in SCHEMES:
        raise ValueError(f"scheme {name!r} already registered")
    SCHEMES[name] = solver


def solve_scheme(name: str, ch: ChannelSet, config: SystemConfig,
                 pam_opts: PamOptions | None = None,
                 agp_opts: AgpOptions | None = None) -> SolveResult:
    try:
        solver = SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; available: {sorted(SCHEMES)}") from None
    return solver(ch, config, pam_opts or PamOptions(), agp_opts or AgpOptions())
