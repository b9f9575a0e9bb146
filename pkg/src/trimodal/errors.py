class DataError(ValueError):
    """Malformed input data: bad records, unknown labels, shape mismatches."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in activations, losses or gradients."""


class CheckpointError(DataError):
    """A checkpoint or index file could not be read back faithfully."""
