"""Exception hierarchy.

Every error carries a machine-readable ``code`` and the CLI exit status it
maps to (1 for validation problems, 2 for numerical failures).
"""


class TreelinkError(Exception):
    code = "TreelinkError"
    exit_status = 1

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details


class ValidationError(TreelinkError):
    code = "ValidationError"


class ParseError(ValidationError):
    code = "ParseError"


class SchemaError(ValidationError):
    code = "SchemaError"


class EmptyInput(ValidationError):
    code = "EmptyInput"


class CovariateUnavailable(ValidationError):
    code = "CovariateUnavailable"


class DegenerateCovariate(ValidationError):
    code = "DegenerateCovariate"


class InvalidTailParameter(ValidationError):
    code = "InvalidTailParameter"


class NumericalFailure(TreelinkError):
    code = "NumericalFailure"
    exit_status = 2


class CandidateSearchFailed(NumericalFailure):
    code = "CandidateSearchFailed"


class PoorMixing(NumericalFailure):
    code = "PoorMixing"

    def __init__(self, message="", trace=None, **details):
        super().__init__(message, **details)
        self.trace = trace


class NoUsableDraws(NumericalFailure):
    code = "NoUsableDraws"


class PackingInfeasible(NumericalFailure):
    code = "PackingInfeasible"
