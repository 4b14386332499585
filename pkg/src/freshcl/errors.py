"""Exception types. Each CLI exit code maps to one family."""


class FreshCLError(Exception):
    exit_code = 1


class ParameterError(FreshCLError, ValueError):
    pass


class DimensionError(FreshCLError, ValueError):
    pass


class DegenerateInputError(FreshCLError, ValueError):
    pass


class ContractError(FreshCLError, ValueError):
    pass


class RegistryError(FreshCLError, KeyError):
    pass


class StateError(FreshCLError, RuntimeError):
    exit_code = 5


class CapacityError(FreshCLError):
    exit_code = 4


class InfeasibleSpecError(FreshCLError):
    exit_code = 3


class ParseError(FreshCLError, ValueError):
    exit_code = 2
