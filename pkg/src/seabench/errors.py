"""Exception types shared across the workbench."""


class SeabenchError(Exception):
    """Base class for all workbench errors."""


class ValidationError(SeabenchError, ValueError):
    """Invalid arguments, shapes, or configuration."""


class QuantizationError(ValidationError):
    """Non-finite inputs or invalid quantization parameters."""


class ParseError(SeabenchError, ValueError):
    """Malformed file content; message carries a byte offset where known."""


class TrainingDivergedError(SeabenchError, RuntimeError):
    """Loss became non-finite during training."""


class CraftingError(SeabenchError, RuntimeError):
    """Input crafting could not produce the requested attack set."""
