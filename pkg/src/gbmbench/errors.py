"""Exception hierarchy.

``UserError`` subclasses signal bad inputs (exit code 1 from the CLI);
anything else escaping the CLI is treated as an internal error.
"""


class GBMBenchError(Exception):
    """Base class for all harness errors."""


class UserError(GBMBenchError):
    """Problem with user-supplied inputs, configuration or files."""


# cohort
class MissingVisitFile(UserError):
    pass


class MalformedRow(UserError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyStage(UserError):
    pass


class IOFailure(GBMBenchError):
    pass


# prep
class EmptyMask(GBMBenchError):
    pass


class ZeroVariance(GBMBenchError):
    pass


class PluginFailure(GBMBenchError):
    pass


# labels
class EmptyVisitList(UserError):
    pass


class UnorderedVisits(UserError):
    pass


# balance
class InsufficientData(UserError):
    pass


class ClassTooSmall(GBMBenchError):
    pass


class LeakageError(GBMBenchError):
    """A balancing artifact references patients outside the training split."""


# zoo
class UnknownFamily(UserError):
    pass


class PretrainedWeightsUnavailable(UserError):
    pass


# harness
class TooFewPatients(UserError):
    pass


class NonFiniteLoss(GBMBenchError):
    pass


class DegenerateValSet(GBMBenchError):
    pass


class UnsupportedLayer(GBMBenchError):
    pass


# report / config
class NoResults(UserError):
    pass


class ConfigError(UserError):
    pass
