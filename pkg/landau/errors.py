from typing import Dict, List, Optional


class LandauError(Exception):
    """Base error. `exit_code` is the CLI contract for the failure family."""

    exit_code = 2


class ConfigError(LandauError):
    exit_code = 1

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = diagnostics or []
        if self.diagnostics:
            message = message + "\n" + "\n".join(f"  {d}" for d in self.diagnostics)
        super().__init__(message)


class AnalyticUnavailable(ConfigError):
    """The benchmark has no closed-form density or score for the request."""


class NumericError(LandauError):
    exit_code = 2


class DomainError(NumericError):
    pass


class SamplingError(NumericError):
    pass


class NonFiniteGradient(NumericError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"non-finite gradient at index {index}: {value!r}")


class TrainingDiverged(NumericError):
    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step} ({parts})")


class SteppingDiverged(NumericError):
    def __init__(self, step: int, solver: str):
        self.step = step
        self.solver = solver
        super().__init__(f"{solver}: non-finite particle positions after step {step}")


class ArtifactError(LandauError):
    exit_code = 3
