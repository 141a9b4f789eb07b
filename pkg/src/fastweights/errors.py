"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes or precisions are incompatible."""


class ConfigError(ValueError):
    """A rule/model/training configuration is illegal."""


class DivergenceError(ArithmeticError):
    """Base for numerical failures that count as a training divergence.

    ``t`` is the failing timestep when the error comes out of a scan.
    """

    def __init__(self, message: str, t: int | None = None):
        if t is not None:
            message = f"{message} (timestep {t})"
        super().__init__(message)
        self.t = t


class NearZeroSum(DivergenceError):
    pass


class NormalizerUnderflow(DivergenceError):
    pass


class DivergedState(DivergenceError):
    pass
