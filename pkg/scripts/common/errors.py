"""Exception hierarchy shared by every pipeline stage.

Each error carries the CLI exit code the orchestrator reports for it.
"""


class HLMWorkflowError(Exception):
    exit_code = 1


class DataLoadError(HLMWorkflowError):
    exit_code = 5


class MissingColumnError(DataLoadError):
    def __init__(self, column: str, context: str = "dataset"):
        self.column = column
        super().__init__(f"column '{column}' absent from {context}")


class RaggedRowError(DataLoadError):
    def __init__(self, row: int, expected: int, found: int):
        self.row = row
        super().__init__(f"ragged row {row}: expected {expected} fields, found {found}")


class EmptyDatasetError(DataLoadError):
    def __init__(self, message: str = "empty dataset after deletion"):
        super().__init__(message)


class CenteringError(DataLoadError):
    pass


class CodebookParseError(HLMWorkflowError):
    exit_code = 2

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"codebook line {line_no}: {message}")


class UnmappedCategoryError(HLMWorkflowError):
    exit_code = 3

    def __init__(self, variable: str, category: str, row: int):
        self.variable = variable
        self.category = category
        self.row = row
        super().__init__(f"unmapped category '{category}' in '{variable}' at row {row}")


class ModelSpecError(HLMWorkflowError):
    exit_code = 5

    def __init__(self, message: str, line_no: int = None):
        self.line_no = line_no
        prefix = f"model spec line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


class SpecDataMismatchError(HLMWorkflowError):
    exit_code = 5


class SingularDesignError(SpecDataMismatchError):
    pass


class Level2VariationError(SpecDataMismatchError):
    def __init__(self, variable: str, cluster):
        self.variable = variable
        self.cluster = cluster
        super().__init__(f"level-2 predictor '{variable}' varies within group '{cluster}'")


class ConvergenceError(HLMWorkflowError):
    exit_code = 4

    def __init__(self, message: str, result=None):
        # partial FitResult, kept for diagnosis
        self.result = result
        super().__init__(message)


class ReliabilityUndefinedError(HLMWorkflowError):
    exit_code = 5

    def __init__(self):
        super().__init__("reliability undefined: both variance components are zero")


class TestDegreesOfFreedomError(HLMWorkflowError):
    exit_code = 5
    __test__ = False

    def __init__(self, df: int):
        self.df = df
        super().__init__(f"df ≤ 0 (df = {df})")


class PoolingError(HLMWorkflowError):
    exit_code = 5

    def __init__(self, message: str, pv_index: int = None, cause: Exception = None):
        self.pv_index = pv_index
        self.cause = cause
        if cause is not None and hasattr(cause, 'exit_code'):
            self.exit_code = cause.exit_code
        super().__init__(message)


class SimConfigError(HLMWorkflowError):
    exit_code = 5


class UnbalancedDesignError(HLMWorkflowError):
    exit_code = 5
