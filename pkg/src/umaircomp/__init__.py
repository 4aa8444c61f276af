"""Unit-modulus over-the-air computation transceiver design for federated learning."""

__version__ = "0.1.0"

from .agp import AgpOptions, agp_solve, recover_design, simplex_projection  # noqa: E402
from .baselines import SCHEMES, solve_scheme  # noqa: E402
from .pam import PamOptions, pam_solve  # noqa: E402
from .system import (  # noqa: E402
    ChannelSet,
    Structure,
    SystemConfig,
    TransceiverDesign,
    check_feasibility,
    generate_channels,
    max_mse_objective,
    mse_per_user,
    unit_modulus_projection,
)

__all__ = [
    "AgpOptions", "ChannelSet", "PamOptions", "SCHEMES", "Structure", "SystemConfig",
    "TransceiverDesign", "agp_solve", "check_feasibility", "generate_channels",
    "max_mse_objective", "mse_per_user", "pam_solve", "recover_design", "simplex_projection",
    "solve_scheme", "unit_modulus_projection",
]
