"""Command-line surface tying the pipeline together."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import io
from .checks import run_grad_suite, run_voxel_suite
from .events import VoxelGrid, clip_to_voxels, egdb_mask, generate_events, interpolate_frames
from .metrics import evaluate_frames
from .networks import ModelConfig, enhance_forward, restore_events
from .scenegen import VideoClip, sample_degradation_params
from .training import (
    TrainConfig,
    load_checkpoint,
    pair_from_clips,
    render_pair,
    save_checkpoint,
    train_stage1,
    train_stage2,
)


def _parse_res(res):
    try:
        h, w = res.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise click.BadParameter(f"expected HxW, got '{res}'") from exc


def _write_clip(directory, clip):
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(clip.n_frames):
        io.write_ppm(directory / f"frame_{i:03d}.ppm", clip.frames[i])


def load_clip_dir(directory):
    """Read frame_*.ppm files (sorted) into a clip with unit-spaced times."""
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.ppm"))
    if not paths:
        raise click.ClickException(f"no frame_*.ppm files in {directory}")
    frames = np.stack([io.read_ppm(p) for p in paths])
    return VideoClip(frames=frames, timestamps=np.arange(len(paths), dtype=np.float64))


def _load_configs(config_path):
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    if config_path:
        raw = io.read_config(config_path)
        model_keys = set(model_cfg.to_dict())
        model_kv = {}
        train_kv = {}
        for k, v in raw.items():
            key = k.split(".", 1)[1] if "." in k else k
            if key in model_keys:
                model_kv[key] = v
            else:
                train_kv[key] = v
        if model_kv:
            model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **model_kv})
        if train_kv:
            train_cfg = TrainConfig.from_dict(train_kv)
    return model_cfg, train_cfg


def _load_dataset(data_dir, n_frames, interp_factor=4):
    data_dir = Path(data_dir)
    clip_dirs = sorted(d for d in data_dir.iterdir() if d.is_dir() and d.name.startswith("clip_"))
    if not clip_dirs:
        raise click.ClickException(f"no clip_* directories in {data_dir}")
    dataset = []
    for d in clip_dirs:
        gt = load_clip_dir(d / "gt")
        low = load_clip_dir(d / "low")
        dataset.append(pair_from_clips(gt, low, n_frames, interp_factor))
    return dataset


@click.group()
def main():
    """Synthetic-event guided low-light video enhancement."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--clips", default=8, show_default=True)
@click.option("--frames", default=5, show_default=True)
@click.option("--res", default="64x64", show_default=True)
@click.option("--seed", default=0, show_default=True)
def gen_data(out_dir, clips, frames, res, seed):
    """Generate paired normal/low-light clips with sidecar metadata."""
    h, w = _parse_res(res)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(clips):
        clip_seed = seed * 100003 + i
        gt, low = render_pair(h, w, frames, clip_seed)
        clip_dir = out_dir / f"clip_{i:03d}"
        _write_clip(clip_dir / "gt", gt)
        _write_clip(clip_dir / "low", low)
        deg = sample_degradation_params(clip_seed)
        io.write_config(
            clip_dir / "meta.txt",
            {
                "H": h,
                "W": w,
                "N": frames,
                "seed": clip_seed,
                "brightness": f"{gt.frames.mean():.6f}",
                "gamma": f"{deg.gamma:.6f}",
                "alpha": f"{deg.alpha:.6f}",
                "beta": f"{deg.beta:.6f}",
                "sigma": f"{deg.sigma:.6f}",
            },
        )
    click.echo(f"wrote {clips} clip pairs to {out_dir}")


@main.command("synth-events")
@click.option("--clip", "clip_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--threshold", default=2.0, show_default=True)
@click.option("--interp-factor", default=4, show_default=True)
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
def synth_events(clip_dir, threshold, interp_factor, out_file):
    """Difference a clip directory into an event stream file."""
    clip = load_clip_dir(clip_dir)
    dense = interpolate_frames(clip, interp_factor)
    events = generate_events(dense, threshold)
    io.write_events(out_file, events)
    click.echo(f"wrote {events.size} events to {out_file}")


@main.command("train-stage1")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_train_stage1(data_dir, config_path, out_path):
    """Train the event restoration network."""
    model_cfg, train_cfg = _load_configs(config_path)
    train_cfg.stage = 1
    dataset = _load_dataset(data_dir, model_cfg.n_frames)
    params, history = train_stage1(dataset, model_cfg, train_cfg, progress=100)
    save_checkpoint(out_path, params, model_cfg, train_cfg, history)
    click.echo(f"stage-1 checkpoint written to {out_path} (final loss {history[-1][3]:.4f})")


@main.command("train-stage2")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--stage1", "stage1_path", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_train_stage2(data_dir, stage1_path, config_path, out_path):
    """Freeze the restoration network and train fusion + enhancement."""
    stage1_path = Path(stage1_path)
    if not stage1_path.exists():
        raise click.ClickException(f"missing stage-1 checkpoint {stage1_path}")
    model_cfg, train_cfg = _load_configs(config_path)
    train_cfg.stage = 2
    stage1_params, ckpt_cfg = load_checkpoint(stage1_path)
    if config_path is None:
        model_cfg = ckpt_cfg
    dataset = _load_dataset(data_dir, model_cfg.n_frames)
    params, history = train_stage2(dataset, stage1_params, model_cfg, train_cfg, progress=100)
    save_checkpoint(out_path, params, model_cfg, train_cfg, history)
    click.echo(f"stage-2 checkpoint written to {out_path} (final loss {history[-1][3]:.4f})")


@main.command("enhance")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--clip", "clip_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--interp-factor", default=4, show_default=True)
def cmd_enhance(ckpt_path, clip_dir, out_dir, interp_factor):
    """Enhance a low-light clip; writes PPM frames and the guidance mask."""
    params, model_cfg = load_checkpoint(ckpt_path)
    clip_dir = Path(clip_dir)
    if (clip_dir / "low").is_dir():
        clip_dir = clip_dir / "low"
    clip = load_clip_dir(clip_dir)
    dtype = params[list(params.names())[0]].dtype
    grid = clip_to_voxels(clip, 2.0, model_cfg.n_frames, interp_factor)
    restored = restore_events(params, model_cfg, grid.values.astype(dtype)).restored.data
    h, w = clip.resolution
    rgrid = VoxelGrid(values=restored.astype(np.float64), n_bins=model_cfg.n_frames,
                      t0=grid.t0, tn=grid.tn)
    mask = egdb_mask(rgrid, (h, w))
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(clip.n_frames):
        pred = enhance_forward(params, model_cfg, clip.frames[i].astype(dtype),
                               restored, mask, clamp_output=True)
        io.write_ppm(out_dir / f"frame_{i:03d}.ppm", pred.data.transpose(1, 2, 0))
    io.write_pgm(out_dir / "mask.pgm", mask)
    click.echo(f"wrote {clip.n_frames} enhanced frames and mask.pgm to {out_dir}")


@main.command("eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_eval(pred_dir, gt_dir, out_path):
    """PSNR/SSIM report between two frame directories."""
    pred = load_clip_dir(pred_dir)
    gt_dir = Path(gt_dir)
    if (gt_dir / "gt").is_dir():
        gt_dir = gt_dir / "gt"
    gt = load_clip_dir(gt_dir)
    report = evaluate_frames(list(pred.frames), list(gt.frames))
    Path(out_path).write_text(report.to_csv())
    click.echo(f"PSNR {report.psnr_mean:.2f} dB, SSIM {report.ssim_mean:.4f} -> {out_path}")


@main.command("check")
@click.option("--suite", type=click.Choice(["grad", "voxel", "all"]), default="all", show_default=True)
@click.option("--streams", default=1000, show_default=True, help="voxel suite stream count")
def cmd_check(suite, streams):
    """Run the oracle/gradient verification suites; nonzero exit on failure."""
    results = []
    if suite in ("grad", "all"):
        results += [(n, ok, f"worst rel err {d:.2e}") for n, ok, d in run_grad_suite()]
    if suite in ("voxel", "all"):
        results += run_voxel_suite(n_streams=streams)
    failed = 0
    for name, ok, detail in results:
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        click.echo(f"{failed} check(s) failed")
        sys.exit(1)
    click.echo(f"all {len(results)} checks passed")


if __name__ == "__main__":
    main()
