"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage 1, data 2, numeric 3.
"""


class TransferKitError(Exception):
    exit_code = 1


class UsageError(TransferKitError, ValueError):
    exit_code = 1


class ShapeError(TransferKitError, ValueError):
    exit_code = 2


class ContractError(TransferKitError, RuntimeError):
    exit_code = 1


class DataError(TransferKitError, ValueError):
    exit_code = 2


class DecodeError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class StaleCacheError(DataError):
    pass


class NumericError(TransferKitError, ArithmeticError):
    exit_code = 3
