"""Built-in generator and simulator functions (registered by name on import)."""

from .calibration import borehole, gen_calibration_cancel, sim_borehole
from .multistart import gen_multistart_opt, nelder_mead, neighborhood_radius, sim_six_hump_camel, six_hump_camel
from .sampling import (
    gen_persistent_uniform,
    gen_uniform_sample,
    gen_variable_resources,
    sim_faulty,
    sim_norm,
    sim_resource_probe,
)
from .watchdog import sim_app_with_watchdog

__all__ = [
    "borehole",
    "gen_calibration_cancel",
    "gen_multistart_opt",
    "gen_persistent_uniform",
    "gen_uniform_sample",
    "gen_variable_resources",
    "neighborhood_radius",
    "nelder_mead",
    "sim_app_with_watchdog",
    "sim_borehole",
    "sim_faulty",
    "sim_norm",
    "sim_resource_probe",
    "sim_six_hump_camel",
    "six_hump_camel",
]
