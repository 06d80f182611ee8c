"""Exception types shared across the package.

The CLI maps UserError (and subclasses) to exit code 1; anything else that
escapes is an internal error and exits 2.
"""


class UserError(Exception):
    """Invalid input, configuration, or usage."""


class ManifestError(UserError):
    """Malformed dataset manifest; carries a 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ConfigError(UserError):
    """Inconsistent or out-of-range configuration."""


class SamplingError(UserError):
    """Episode sampling cannot satisfy its invariants (e.g. too few subjects)."""


class CheckpointError(UserError):
    """Checkpoint archive missing, corrupt, or incompatible."""


class AdaptationError(RuntimeError):
    """Non-finite loss during inner-loop adaptation; carries the task id."""

    def __init__(self, task_id, message):
        self.task_id = task_id
        super().__init__(f"task {task_id!r}: {message}")


class MetaGradientError(RuntimeError):
    """Non-finite meta-gradient; the outer step was rejected."""
