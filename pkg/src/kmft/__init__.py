"""Fault-tolerant distributed K-means over a simulated multi-rank cluster."""

from .bench import (
    CSV_HEADER,
    RunConfig,
    RunReport,
    append_rows,
    read_rows,
    run_experiment,
    summarize,
    write_summary,
)
from .checkpoint import (
    Checkpointer,
    CheckpointPolicy,
    CommitMode,
    mirror_target,
    mirror_source,
)
from .datasets import make_blobs, read_dataset, write_dataset
from .errors import (
    CommError,
    ConfigError,
    InitError,
    KmftError,
    PeerDead,
    PolicyError,
    SegmentError,
    SequenceError,
    SimDeadlock,
    Timeout,
    UnrecoverableError,
)
from .kmeans import (
    AssignmentTable,
    CentroidSet,
    Dataset,
    KmeansConfig,
    init_centroids,
    lloyd_step,
    nearest_center,
    objective,
    run_sequential,
    squared_distance,
)
from .parallel import Method, ParallelResult, partition, run_parallel
from .runtime import RunOutcome, WorldLayout, run_ft_kmeans
from .simcluster import (
    DEFAULT_TIMEOUT,
    FailPhase,
    FailureEvent,
    FailurePlan,
    Mode,
    VtPhase,
)

__all__ = [
    "AssignmentTable",
    "CSV_HEADER",
    "CentroidSet",
    "Checkpointer",
    "CheckpointPolicy",
    "CommError",
    "CommitMode",
    "ConfigError",
    "DEFAULT_TIMEOUT",
    "Dataset",
    "FailPhase",
    "FailureEvent",
    "FailurePlan",
    "InitError",
    "KmeansConfig",
    "KmftError",
    "Method",
    "Mode",
    "ParallelResult",
    "PeerDead",
    "PolicyError",
    "RunConfig",
    "RunOutcome",
    "RunReport",
    "SegmentError",
    "SequenceError",
    "SimDeadlock",
    "Timeout",
    "UnrecoverableError",
    "VtPhase",
    "WorldLayout",
    "append_rows",
    "init_centroids",
    "lloyd_step",
    "make_blobs",
    "mirror_target",
    "nearest_center",
    "objective",
    "partition",
    "read_dataset",
    "read_rows",
    "mirror_source",
    "run_experiment",
    "run_ft_kmeans",
    "run_parallel",
    "run_sequential",
    "squared_distance",
    "summarize",
    "write_dataset",
    "write_summary",
]
