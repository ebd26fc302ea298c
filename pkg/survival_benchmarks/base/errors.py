# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.


class SurvivalBenchmarkError(Exception):
    """Root of every error raised by the package"""


class ConfigError(SurvivalBenchmarkError, ValueError):
    """Invalid configuration key or value, or a bad command line"""


class DataError(SurvivalBenchmarkError, ValueError):
    """Malformed input file or a record violating its invariants"""


class NumericalError(SurvivalBenchmarkError, ArithmeticError):
    """Divergence, non-finite values or a solver that failed to converge"""
