import logging
from pathlib import Path
from typing import Optional

import typer

from services.evaluation import format_report, metrics_report, plot_trajectories
from services.pipeline import SlamSystem
from services.simulator import generate_sequence
from utils.config import RunConfig
from utils.file_utils import (
    depth_file_name,
    find_depth_files,
    read_map,
    read_sequence,
    read_trajectory,
    write_graph,
    write_key_values,
    write_map,
    write_sequence,
    write_trajectory,
)
from utils.logger import remove_file_handlers, setup_logger

app = typer.Typer(help="Factor-graph SLAM backend on synthetic sequences.")

logger = logging.getLogger("main")


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log solver and verification details")):
    setup_logger(level=logging.DEBUG if verbose else logging.INFO)


@app.command()
def simulate(
    out: Path = typer.Option(..., "--out", help="Directory for the generated sequence"),
    config: Optional[Path] = typer.Option(None, "--config", help="key = value settings file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Scene seed, overrides scene.seed"),
):
    """Generate a synthetic sequence with ground truth."""
    try:
        cfg = RunConfig.load(config)
        if seed is not None:
            cfg.scene.seed = seed
        cfg.validate()
        sequence = generate_sequence(cfg.scene)
        manifest = write_sequence(sequence, out)
        logger.info(f"Sequence written: {manifest}")
    except Exception as e:
        logger.error(f"Error generating sequence: {str(e)}")
        raise


@app.command()
def run(
    sequence: Path = typer.Argument(..., help="Sequence directory written by 'simulate'"),
    out: Path = typer.Option(..., "--out", help="Directory for the run outputs"),
    config: Optional[Path] = typer.Option(None, "--config", help="key = value settings file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for match filtering"),
    deterministic: bool = typer.Option(
        True, "--deterministic/--concurrent", help="Single-threaded loop verification"
    ),
    disable_loop_closure: bool = typer.Option(False, "--disable-loop-closure", help="Skip local and global loops"),
    disable_local_loop: bool = typer.Option(False, "--disable-local-loop", help="Skip local loops only"),
    disable_rp: bool = typer.Option(False, "--disable-rp", help="No reprojection factor in tracking"),
    disable_fm: bool = typer.Option(False, "--disable-fm", help="No feature-metric factor in tracking and mapping"),
):
    """Run the SLAM pipeline on a sequence."""
    root = logging.getLogger()
    try:
        cfg = RunConfig.load(config)
        if seed is not None:
            cfg.slam.seed = seed
        if not deterministic:
            cfg.slam.loop.n_jobs = -1
        if disable_loop_closure:
            cfg.slam.enable_loop_closure = False
        if disable_local_loop:
            cfg.slam.enable_local_loop = False
        if disable_rp:
            cfg.slam.tracking.use_rp = False
        if disable_fm:
            cfg.slam.tracking.use_fm = False
            cfg.slam.mapping.use_fm = False
        cfg.validate()

        out.mkdir(parents=True, exist_ok=True)
        setup_logger(level=root.level or logging.INFO, log_file=out / "run.log")
        for line in cfg.dump().splitlines():
            logger.info(f"config {line}")

        loaded = read_sequence(sequence)
        result = SlamSystem(cfg.slam).run(loaded.frames)

        write_trajectory(out / "trajectory.txt", result.trajectory)
        for index, depth in result.keyframe_depths.items():
            write_map(out / depth_file_name(index), depth)
        write_graph(out / "graph.txt", result.graph)
        for stage, seconds in result.timings.items():
            logger.info(f"timing {stage} = {seconds:.3f}s")
        logger.info(
            f"Run complete - frames: {len(result.records)}, lost: {len(result.lost_frames)}, "
            f"keyframes: {len(result.graph)}"
        )
    except Exception as e:
        logger.error(f"Error in SLAM run: {str(e)}")
        raise
    finally:
        remove_file_handlers(root)


@app.command(name="eval")
def evaluate(
    estimate: Path = typer.Argument(..., help="Estimated trajectory file"),
    groundtruth: Path = typer.Argument(..., help="Ground-truth trajectory file"),
    depths: Optional[Path] = typer.Option(None, "--depths", help="Directory with estimated depth_<frame>.sgdm"),
    sequence: Optional[Path] = typer.Option(None, "--sequence", help="Sequence directory with ground-truth depths"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for report.txt"),
    config: Optional[Path] = typer.Option(None, "--config", help="key = value settings file"),
    plot: bool = typer.Option(False, "--plot", help="Also write trajectory.html"),
):
    """Trajectory and depth metrics of an estimate against ground truth."""
    try:
        cfg = RunConfig.load(config)
        est = read_trajectory(estimate)
        gt = read_trajectory(groundtruth)

        est_depths = gt_depths = masks = None
        if depths is not None:
            if sequence is None:
                raise typer.BadParameter("--depths needs --sequence for the ground-truth depths")
            loaded = read_sequence(sequence)
            files = {i: p for i, p in find_depth_files(depths).items() if i in loaded.depths}
            est_depths = [read_map(p)[0].astype(float) for p in files.values()]
            gt_depths = [loaded.depths[i] for i in files]
            masks = [loaded.masks[i] for i in files]

        report = metrics_report(est, gt, est_depths, gt_depths, masks, cfg.eval.rpe_interval)
        typer.echo(format_report(report))
        if out is not None:
            write_key_values(out / "report.txt", report)
            if plot:
                plot_trajectories(est, gt, out / "trajectory.html")
        elif plot:
            plot_trajectories(est, gt, Path("trajectory.html"))
    except Exception as e:
        logger.error(f"Error evaluating {estimate}: {str(e)}")
        raise


if __name__ == "__main__":
    app()
