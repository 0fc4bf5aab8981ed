from .checkpoint import load_checkpoint, save_checkpoint
from .experiment import run_experiment
from .report import emit_report

__all__ = ["emit_report", "load_checkpoint", "run_experiment", "save_checkpoint"]
