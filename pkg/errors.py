"""Exceptions raised across the markovgp modules."""

from typing import Optional

import numpy as np


class MarkovGPError(Exception):
    """Base class for every error raised by markovgp."""


class KernelSpecError(MarkovGPError, ValueError):
    pass


class CubatureBudgetError(MarkovGPError, ValueError):
    pass


class CholeskyError(MarkovGPError, np.linalg.LinAlgError):
    pass


class LikelihoodError(MarkovGPError, ValueError):
    pass


class ConfigError(MarkovGPError, ValueError):
    pass


class SkippedUpdate(MarkovGPError):
    """A local site update could not be formed; the stored site is kept."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class CavityNotPSD(SkippedUpdate):
    def __init__(self, variances):
        self.variances = np.asarray(variances, dtype=float)
        super().__init__(f"cavity variance not positive: {self.variances.tolist()}")


class StepError(MarkovGPError):
    """Numerical failure at a given filter/smoother step."""

    def __init__(self, message: str, step_index: int, pass_index: Optional[int] = None):
        self.step_index = step_index
        self.pass_index = pass_index
        where = f"step {step_index}" if pass_index is None else f"pass {pass_index}, step {step_index}"
        super().__init__(f"{message} ({where})")


class TrainingAborted(MarkovGPError):
    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = history


class DatasetError(MarkovGPError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        prefix = f"{source}:" if source else ""
        if line is not None:
            prefix = f"{prefix}line {line}: "
        elif prefix:
            prefix = prefix + " "
        super().__init__(f"{prefix}{message}")
