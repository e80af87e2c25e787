"""Exception hierarchy shared by the library and the experiment runner.

Config errors map to exit code 2 and numerical errors to exit code 3 in
`experiments/src/commands.py`.
"""


class CompatLabError(Exception):
    pass


class ConfigError(CompatLabError, ValueError):
    pass


class NumericalError(CompatLabError, ArithmeticError):
    pass


class UnknownFamilyError(ConfigError):

    def __init__(self, family, valid):
        self.family = family
        self.valid = tuple(valid)
        super().__init__(f"unknown spectrum family {family!r}; valid families: {', '.join(self.valid)}")


class SpectrumIndexError(ConfigError, IndexError):
    pass


class UnsupportedTailError(ConfigError):
    pass


class InstanceTooLargeError(ConfigError):
    pass


class ScanCapError(NumericalError):

    def __init__(self, spectrum, cap):
        self.spectrum = spectrum
        self.cap = cap
        super().__init__(f"effective-dimension scan did not terminate within {cap} indices for {spectrum!r}; "
                         "the instance is pathological for this sample size")


class RankDeficientSampleError(NumericalError):

    def __init__(self, seeds, ratio=None):
        self.seeds = list(seeds)
        msg = f"rank-deficient design matrix for seed(s) {self.seeds}"
        if ratio is not None:
            msg += f" (mu_n / mu_1 = {ratio:.3e})"
        super().__init__(msg)


class StabilityError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DivisionGuardError(NumericalError, ZeroDivisionError):
    pass


class GridTooNarrowError(NumericalError):
    pass


class ExperimentAbortedError(NumericalError):

    def __init__(self, seeds, cause):
        self.seeds = list(seeds)
        self.cause = cause
        super().__init__(f"experiment aborted, failing trial seed(s) {self.seeds}: {cause}")
