"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class UnicadError(Exception):
    exit_code = 1


class ShapeError(UnicadError, ValueError):
    exit_code = 2


class InputError(UnicadError, ValueError):
    exit_code = 2


class CapacityError(InputError):
    pass


class ContractError(UnicadError, ValueError):
    exit_code = 2


class ConflictError(UnicadError):
    exit_code = 3


class NotFoundError(UnicadError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CompatibilityError(UnicadError):
    exit_code = 2


class CodecError(UnicadError):
    exit_code = 4


class NumericError(UnicadError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    pass
