"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes (2 config, 3 data, 4 protocol).
"""


class FedLoGError(Exception):
    """Base class for all package errors."""


class ContractError(FedLoGError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operands have incompatible dimensions."""


class FormatError(FedLoGError, ValueError):
    """On-disk data is malformed or inconsistent."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ScenarioError(FedLoGError, ValueError):
    """A federated scenario cannot be built as requested (degenerate client, unsatisfiable mode)."""


class ProtocolError(FedLoGError, RuntimeError):
    """The round protocol was driven in an invalid order or with missing inputs."""


class ConfigError(FedLoGError, ValueError):
    """Invalid run configuration."""
