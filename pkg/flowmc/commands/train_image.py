"""Fit a 2D flow to an image: samples are uniform and weighted by the pixel value."""

from pathlib import Path
from typing import Optional
import logging

from flowmc.bench import (
    ImageTarget,
    collect_metrics,
    cross_entropy,
    density_grid,
    procedural_target,
    reference_density,
)
from flowmc.commands.common import check_report, resolve_input
from flowmc.flow import build_flow
from flowmc.formats import read_pgm, save_flow, write_key_values, write_pfm, write_report_csv
from flowmc.rng import RngStreams
from flowmc.schemas import IterationRecord, RunConfig
from flowmc.training import FlowProposal, UniformProposal, online_loop

logger = logging.getLogger(__name__)


def _or_nan(value: Optional[float]) -> float:
    return float("nan") if value is None else value


def load_target(config: RunConfig, base_dir: Optional[Path] = None) -> ImageTarget:
    spec = config.target
    if spec.procedural is not None:
        return procedural_target(spec.procedural, spec.resolution)
    path = resolve_input(spec.image, base_dir)
    return ImageTarget(read_pgm(path), name=path.stem)


def run(config: RunConfig, out: Path, progress: bool = True, base_dir: Optional[Path] = None) -> int:
    target = load_target(config, base_dir)
    resolution = config.schedule.grid_resolution
    reference = reference_density(target, resolution)
    flow = build_flow(config.flow, seed=config.seed)
    streams = RngStreams(config.seed)
    start_entropy = cross_entropy(density_grid(flow, resolution), reference)
    logger.info(f"Training on {target.name} {target.shape}, initial cross-entropy {start_entropy:.6g}")

    def write_density(record: IterationRecord) -> None:
        write_pfm(out / f"density_{record.iteration:02d}.pfm", density_grid(flow, resolution))

    report = online_loop(
        flow,
        target,
        config.schedule,
        config.train,
        proposal=UniformProposal(flow.dim),
        streams=streams,
        on_iteration=write_density,
        progress=progress,
    )
    write_report_csv(out / "metrics.csv", report)
    save_flow(out / "flow.ckpt", flow)

    density = density_grid(flow, resolution)
    metrics = collect_metrics(
        FlowProposal(flow), target, config.schedule.eval_samples, streams.evaluation, density, reference
    )
    metrics.clamped_inputs = flow.clamped_inputs
    rows = metrics.as_rows() + [
        {"key": "cross_entropy_start", "value": start_entropy},
        {"key": "combined_estimate", "value": _or_nan(report.combined_estimate)},
    ]
    write_key_values(out / "summary.csv", rows)
    logger.info(f"Wrote metrics, {len(report.iterations)} density grids and the checkpoint to {out}")
    check_report(report, config, "train-image")
    return 0
