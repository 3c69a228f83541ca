"""CTC training with peak-first regularization at desk scale.

The package is split by concern:

* :mod:`pfctc.numerics` -- log-domain helpers, tempered softmax, percentiles
* :mod:`pfctc.ctc` -- forward-backward CTC loss, occupancy, gradients
* :mod:`pfctc.pfr` -- peak-first regularizer and the joint objective
* :mod:`pfctc.encoder` -- windowed feed-forward encoder with manual backprop
* :mod:`pfctc.synthdata` -- aligned synthetic utterances and JSONL I/O
* :mod:`pfctc.metrics` -- greedy decoding, peak latency, CER
* :mod:`pfctc.trainer` -- Adam + warmup loop, checkpoints, evaluation
* :mod:`pfctc.cli` -- command line entry point
"""

from pfctc.errors import (
    CheckpointError,
    DatasetError,
    InfeasibleError,
    PfctcError,
    TrainingError,
    UndefinedMetricError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DatasetError",
    "InfeasibleError",
    "PfctcError",
    "TrainingError",
    "UndefinedMetricError",
    "UsageError",
]
