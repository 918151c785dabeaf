from pathlib import Path
import logging

from flowmc.bench import appendix_b_curve
from flowmc.formats import write_rows
from flowmc.schemas import RunConfig

logger = logging.getLogger(__name__)

COLUMNS = ["theta", "density_norm_grad", "mass_norm_grad", "exact_grad", "density_norm_sign"]


def run(config: RunConfig, out: Path, progress: bool = True, base_dir=None) -> int:
    """Bin-edge gradients of a two-bin adaptive warp over the theta grid"""
    spec = config.diagnose
    curve = appendix_b_curve(spec)
    rows = [
        {
            "theta": g.theta,
            "density_norm_grad": g.density_norm_grad,
            "mass_norm_grad": g.mass_norm_grad,
            "exact_grad": g.exact_grad,
            "density_norm_sign": g.density_norm_grad_sign,
        }
        for g in curve
    ]
    write_rows(out / "appendix_b.csv", COLUMNS, rows)
    signs = {g.density_norm_grad_sign for g in curve} - {0}
    logger.info(
        f"Wrote {len(rows)} gradient rows for the {spec.target} target with Q=({spec.q1}, {spec.q2}); "
        f"density-normalized gradient signs: {sorted(signs)}"
    )
    return 0
