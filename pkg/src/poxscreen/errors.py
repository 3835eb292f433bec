"""Exception hierarchy.

Errors deriving from :class:`UserError` are caused by bad inputs or
configuration; the CLI maps them to exit code 2.
"""


class PoxscreenError(Exception):
    pass


class UserError(PoxscreenError):
    pass


class DatasetStructureError(UserError):
    pass


class FoldPlanError(UserError, ValueError):
    pass


class RegistryError(UserError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class WeightsUnavailableError(UserError):
    pass


class TrainingDivergedError(PoxscreenError):
    pass


class OutOfMemoryError(PoxscreenError):
    pass


class IntegrityError(UserError):
    pass


class DataError(UserError, ValueError):
    pass


class UndefinedMetricError(UserError, ValueError):
    pass


class AlignmentError(UserError, ValueError):
    pass


class CompletenessError(UserError):
    pass


class LayerResolutionError(UserError, ValueError):
    pass


class ExplanationError(PoxscreenError):
    pass
