"""Cross-silo federated learning orchestration.

Data-holder nodes form a federated data space; analysts submit whitelisted
instruction pipelines through a workbench to an entry-point node, which
compiles them into task graphs, schedules the tasks across nodes, and hands
back the aggregated model.
"""

__version__ = "0.1.0"

from .errors import FleetError
from .model import canonical_serialize

__all__ = ["FleetError", "canonical_serialize", "__version__"]
