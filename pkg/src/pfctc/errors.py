"""Exception hierarchy shared across the package."""


class PfctcError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(PfctcError, ValueError):
    """Invalid arguments passed to a public function."""


class InfeasibleError(PfctcError):
    """The label sequence cannot be aligned to the available frames."""

    def __init__(self, frames: int, required: int, utt_id: str | None = None):
        self.frames = frames
        self.required = required
        self.utt_id = utt_id
        where = f" (utterance {utt_id})" if utt_id is not None else ""
        super().__init__(
            f"CTC alignment infeasible{where}: {frames} frames, need at least {required}"
        )


class UndefinedMetricError(PfctcError):
    """A metric has no defined value for the given inputs."""


class DatasetError(PfctcError):
    """Malformed or inconsistent dataset file."""


class CheckpointError(PfctcError):
    """Checkpoint could not be read or has the wrong version."""


class TrainingError(PfctcError):
    """Numerical failure during optimization."""
