from pathlib import Path
from typing import Optional, Union
import logging

from flowmc.config import get_settings
from flowmc.errors import RejectedStepsError, TargetEvaluationError
from flowmc.schemas import ExperimentReport, RunConfig

logger = logging.getLogger(__name__)


def output_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir or get_settings().output_root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_input(path: Union[str, Path], base_dir: Optional[Path]) -> Path:
    """Input files may be given relative to the working directory or to the config file"""
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists() or base_dir is None:
        return candidate
    return base_dir / candidate


def check_report(report: ExperimentReport, config: RunConfig, label: str) -> None:
    """Raise once outputs are written if the run aborted or rejected too many steps"""
    if report.aborted:
        raise TargetEvaluationError(f"{label}: {report.error}")
    limit = config.train.max_rejected_fraction
    if report.rejected_fraction > limit:
        raise RejectedStepsError(
            f"{label}: {report.rejected_steps} of {report.total_steps} training steps rejected "
            f"({report.rejected_fraction:.2%} > {limit:.2%})"
        )
    logger.info(f"{label}: {report.total_steps} training steps, {report.rejected_steps} rejected")
