"""Exception hierarchy shared by every subsystem."""


class ConfuError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ConfuError, ValueError):
    pass


class MaskError(ConfuError, ValueError):
    pass


class StateError(ConfuError, RuntimeError):
    pass


class NumericError(ConfuError, ArithmeticError):
    pass


class ConfigError(ConfuError, ValueError):
    pass


class ContractError(ConfuError, ValueError):
    pass


class CapacityError(ConfuError, RuntimeError):
    pass


class ProposalError(ConfuError, ValueError):
    pass


class FormatError(ConfuError, ValueError):
    pass
