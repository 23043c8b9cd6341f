"""Exception hierarchy shared by all modules.

Every error carries the process exit code the command line front-end uses
when the error escapes a command.
"""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONRESONANCE = 2
EXIT_KAM = 3
EXIT_NONDEGENERACY = 4
EXIT_INTEGRATION = 5


class KamLatticeError(Exception):
    exit_code = EXIT_CONFIG


class ConfigError(KamLatticeError):
    exit_code = EXIT_CONFIG


# spectral algebra

class NonZeroAverage(KamLatticeError):
    exit_code = EXIT_KAM

    def __init__(self, value, tolerance):
        super().__init__(f"right-hand side has average {value!r} above tolerance {tolerance:.3e}")
        self.value = value
        self.tolerance = tolerance


class ResonantDivisor(KamLatticeError):
    exit_code = EXIT_NONRESONANCE

    def __init__(self, index, value, floor):
        super().__init__(f"divisor <l, omega> = {value:.3e} at l = {index} is below the floor {floor:.3e}")
        self.index = index
        self.value = value
        self.floor = floor


class TruncationLossExceeded(KamLatticeError):
    exit_code = EXIT_KAM

    def __init__(self, lost, budget):
        super().__init__(f"mass {lost:.3e} dropped by the truncation caps exceeds the budget {budget:.3e}")
        self.lost = lost
        self.budget = budget


# nonresonance

class ZeroIndex(KamLatticeError):
    exit_code = EXIT_CONFIG


class BudgetOverflow(KamLatticeError):
    exit_code = EXIT_CONFIG


class ExhaustedRetries(KamLatticeError):
    exit_code = EXIT_NONRESONANCE


class OutOfRange(KamLatticeError):
    exit_code = EXIT_CONFIG


# KAM engine

class DegenerateHessian(KamLatticeError):
    exit_code = EXIT_NONDEGENERACY


class InversionDiverged(KamLatticeError):
    exit_code = EXIT_KAM


class AliasingBudgetExceeded(KamLatticeError):
    exit_code = EXIT_KAM


class Diverged(KamLatticeError):
    exit_code = EXIT_KAM


# action-angle reduction

class TurningPointNotFound(KamLatticeError):
    exit_code = EXIT_CONFIG


class NondegeneracyViolated(KamLatticeError):
    exit_code = EXIT_NONDEGENERACY

    def __init__(self, h, detail=""):
        super().__init__(f"nondegeneracy fails near h = {h:.6g}{': ' + detail if detail else ''}")
        self.h = h


class IntegrationFailure(KamLatticeError):
    exit_code = EXIT_INTEGRATION


# lattice

class CapsExceeded(KamLatticeError):
    exit_code = EXIT_KAM


class NoDiophantineXi(KamLatticeError):
    exit_code = EXIT_NONRESONANCE


class UnstableStep(KamLatticeError):
    exit_code = EXIT_INTEGRATION
