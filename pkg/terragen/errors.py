"""
Error hierarchy and standardized error records
Every subsystem raises a TerraGenError subclass carrying a stable code
"""
from datetime import datetime, timezone
from typing import Any, Dict, Optional
import logging
import traceback

logger = logging.getLogger(__name__)

# ============= ERROR TYPES =============

class TerraGenError(Exception):
    """Base error for the package"""

    code = "TERRAGEN_ERROR"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ShapeError(TerraGenError):
    code = "SHAPE_MISMATCH"


class NonFiniteError(TerraGenError):
    code = "NON_FINITE"


class GraphError(TerraGenError):
    code = "GRAPH_ERROR"


class LayoutError(TerraGenError):
    code = "LAYOUT_ERROR"


class TransformError(TerraGenError):
    code = "UNSUPPORTED_TRANSFORM"


class DatasetError(TerraGenError):
    code = "DATASET_ERROR"


class CheckpointError(TerraGenError):
    code = "CHECKPOINT_ERROR"


class ConfigError(TerraGenError):
    code = "CONFIG_ERROR"


class MetricError(TerraGenError):
    code = "METRIC_ERROR"


class SamplingError(TerraGenError):
    code = "SAMPLING_ERROR"


class TrainingDivergedError(TerraGenError):
    """Raised when a training loss stops being finite"""

    code = "TRAINING_DIVERGED"

    def __init__(self, step: int, stage: int, loss: float):
        super().__init__(
            f"Loss became non-finite ({loss}) at stage {stage}, step {step}",
            details={"step": step, "stage": stage, "loss": repr(loss)},
        )
        self.step = step
        self.stage = stage

# ============= STANDARDIZED ERROR RECORDS =============

def format_error(exc: BaseException, include_trace: bool = False) -> Dict[str, Any]:
    """Format an exception as the standard error record"""
    if isinstance(exc, TerraGenError):
        message, code, details = exc.message, exc.code, dict(exc.details)
    else:
        message, code, details = str(exc), "INTERNAL_ERROR", {}

    error_data: Dict[str, Any] = {
        "success": False,
        "error": {
            "message": message,
            "code": code,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
    }

    if include_trace:
        details["trace"] = traceback.format_exception(type(exc), exc, exc.__traceback__)

    if details:
        error_data["error"]["details"] = details

    return error_data


def log_error(exc: BaseException, context: str) -> Dict[str, Any]:
    """Log an error with its context and return the error record"""
    record = format_error(exc, include_trace=logger.isEnabledFor(logging.DEBUG))
    if isinstance(exc, TerraGenError):
        logger.error(f"{context}: {exc.code} {exc.message}")
    else:
        logger.error(f"Unhandled exception in {context}: {exc}")
        logger.error(traceback.format_exc())
    return record
