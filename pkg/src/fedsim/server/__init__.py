"""Server runtime: client registry, task brokering and workflow controllers."""

from .checkpoint import EventLog, load_model, read_marker, save_model, write_marker
from .communicator import (
    ClientRecord,
    ClientRegistry,
    ClientState,
    Communicator,
    InsufficientResponses,
    NotEnoughClients,
)
from .controller import (
    ClientLost,
    ConfigError,
    Controller,
    Cyclic,
    FedAvg,
    JobConfig,
    JobFailed,
    MetricMissing,
    TaskFailed,
    Workflow,
    ZeroTotalWeight,
    aggregate_weighted,
    make_controller,
    round_metric,
    run_cyclic,
    run_fedavg,
    sample_clients,
    select_best,
)
