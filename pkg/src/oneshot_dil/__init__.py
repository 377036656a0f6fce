"""One-shot domain incremental learning with configurable batch-norm statistics."""
from .batchnorm import BatchNormState, StatsMode, StatsTrace
from .models import Model, ModelSpec, build, loss_ce, predict

__all__ = ["BatchNormState", "Model", "ModelSpec", "StatsMode", "StatsTrace", "build", "loss_ce", "predict"]
__version__ = "0.1.0"
