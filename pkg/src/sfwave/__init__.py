"""Two-stage multiscale reduced-order solver for time-domain acoustic waves.

Offline, each subdomain of a block-partitioned box is compressed into
a small structured model that reproduces its Neumann-to-Dirichlet
response on a handful of face modes.  Online, the compressed
subdomains are stepped explicitly in time and exchange only those few
modal values per shared face per step.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    InstabilityError,
    NumericalError,
    ProtocolError,
    SfwaveError,
)
from .grid import (
    Box,
    DomainPartition,
    DomainSpec,
    MediumModel,
    SubdomainOperator,
    assemble_global_operator,
    assemble_subdomain_operator,
    build_partition,
    opposite_face,
    sample_medium,
)
from .io import TraceRecord, load_model, read_traces, save_model, write_traces
from .rom import SubdomainModel, build_subdomain_model
from .sim import (
    ReceiverLine,
    RunConfig,
    SourceSpec,
    compare_traces,
    run_offline,
    run_online,
    run_reference,
)
from .stepper import CoupledStepper

__all__ = [
    "Box",
    "ConfigError",
    "CoupledStepper",
    "DataError",
    "DomainPartition",
    "DomainSpec",
    "InstabilityError",
    "MediumModel",
    "NumericalError",
    "ProtocolError",
    "ReceiverLine",
    "RunConfig",
    "SfwaveError",
    "SourceSpec",
    "SubdomainModel",
    "SubdomainOperator",
    "TraceRecord",
    "assemble_global_operator",
    "assemble_subdomain_operator",
    "build_partition",
    "build_subdomain_model",
    "compare_traces",
    "load_model",
    "opposite_face",
    "read_traces",
    "run_offline",
    "run_online",
    "run_reference",
    "sample_medium",
    "save_model",
    "write_traces",
    "__version__",
]
