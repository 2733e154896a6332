"""Exception hierarchy. Every domain failure derives from ReluPlanError so the CLI
can map it to exit code 1."""


class ReluPlanError(Exception):
    code = "domain_error"

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class GenotypeError(ReluPlanError):
    code = "invalid_genotype"


class PlanError(ReluPlanError):
    code = "invalid_plan"


class ShapeError(ReluPlanError, ValueError):
    code = "shape_mismatch"


class SearchAborted(ReluPlanError):
    code = "search_aborted"


class ProtocolError(ReluPlanError):
    code = "protocol_error"


class OverflowAbort(ProtocolError):
    code = "fixed_point_overflow"


class CalibrationError(ReluPlanError):
    code = "calibration_error"
