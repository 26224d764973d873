"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent (both shapes are reported in the message)."""


class DegenerateSliceError(ArithmeticError):
    """A slice normalization entry d_jj fell below the representable floor."""


class DegenerateTargetError(ValueError):
    """Relative L2 loss is undefined because the target field has zero norm."""


class FingerprintMismatchError(RuntimeError):
    """A state cache was built with different parameters than the ones supplied."""


class MeshFormatError(ValueError):
    """Malformed mesh file; carries the 1-based line number of the offending row."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the optimizer step index."""

    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step
