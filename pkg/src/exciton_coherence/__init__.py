"""Exciton transfer efficiency, coherence measures and process tomography."""
__version__ = "0.1.0"

from .core import ExcitonSystem, bundled_system, load_system, site_state  # noqa: E402
from .efficiency import efficiency_report, integrated_coherence  # noqa: E402
from .estimators import (  # noqa: E402
    BathSpectralDensity,
    ProcessTomography,
    TransferEfficiencyAnalyzer,
)
from .heom import build_heom_generator  # noqa: E402
from .redfield import DrudeBath, build_redfield_generator  # noqa: E402

__all__ = [
    "__version__", "ExcitonSystem", "bundled_system", "load_system", "site_state",
    "efficiency_report", "integrated_coherence", "build_heom_generator",
    "build_redfield_generator", "DrudeBath", "TransferEfficiencyAnalyzer",
    "ProcessTomography", "BathSpectralDensity",
]
