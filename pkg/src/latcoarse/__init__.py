"""Event-driven simulator and analysis toolkit for a singular coarsening lattice.

Particles on a chain evolve by the second difference of x**(-beta) over
nearest living neighbours; particles reaching size zero are removed and
the survivors re-couple.  The package provides the chain state
(:mod:`~latcoarse.lattice`), an event-locating adaptive integrator
(:mod:`~latcoarse.dynamics`), coarsening statistics
(:mod:`~latcoarse.analysis`), the headline experiments
(:mod:`~latcoarse.scenarios`), the two-particle local problem and its
linearization (:mod:`~latcoarse.localproblem`), and a CLI (``latcoarse``).
"""

from .lattice import ParticleSystem, new_system, write_snapshot_csv
from .dynamics import (StepControl, VanishEvent, advance_to, reference_advance,
                       HalfLifeMonitor, write_events_csv)
from .errors import NumericError, ConfigError, CheckFailure

__all__ = [
    "ParticleSystem", "new_system", "write_snapshot_csv",
    "StepControl", "VanishEvent", "advance_to", "reference_advance",
    "HalfLifeMonitor", "write_events_csv",
    "NumericError", "ConfigError", "CheckFailure",
]

__version__ = "0.1.0"
