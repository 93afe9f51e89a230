"""Exception hierarchy shared across the package."""


class MddmError(Exception):
    pass


class ConfigError(MddmError, ValueError):
    pass


class InputError(MddmError, ValueError):
    pass


class ShapeError(MddmError, ValueError):
    pass


class StateError(MddmError, RuntimeError):
    pass


class NumericError(MddmError, ArithmeticError):
    pass


class SpecError(MddmError, ValueError):
    """Invalid room / RIR description."""


class UnsupportedError(MddmError, TypeError):
    pass


class TrainingDiverged(MddmError, RuntimeError):
    def __init__(self, step, last_checkpoint=None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        msg = f"loss became non-finite at step {step}"
        if last_checkpoint is not None:
            msg += f"; last good checkpoint: {last_checkpoint}"
        else:
            msg += "; no checkpoint had been written yet"
        super().__init__(msg)
