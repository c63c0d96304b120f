"""Single-satellite LEO positioning through a reconfigurable intelligent surface.

Simulates the OFDM downlink over a direct and a RIS-reflected path, runs a
staged delay/Doppler/angle estimator, solves for UE position, clock bias
and CFO, and compares the errors with Cramer-Rao bounds.
"""

from .geometry import Angles, OrbitSpec, orbit_state, path_geometry
from .scenario import EstimatorConfig, Scenario, desk_scale, load_config, table_i

__all__ = [
    "Angles",
    "EstimatorConfig",
    "OrbitSpec",
    "Scenario",
    "desk_scale",
    "load_config",
    "orbit_state",
    "path_geometry",
    "table_i",
]
__version__ = "0.1.0"
