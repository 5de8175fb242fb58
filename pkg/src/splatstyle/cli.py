"""Command line: synth, train, stylize, evaluate.

Options can also come from a JSON config file passed to the group (``--config``),
keyed by subcommand: ``{"train": {"pretrain_iters": 500}}``. Precedence is
defaults < config file < flags. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import click
import numpy as np

from .errors import SplatStyleError, UsageError


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except UsageError as exc:
            raise click.UsageError(str(exc), ctx) from exc
        except SplatStyleError as exc:
            raise click.ClickException(str(exc)) from exc


def _load_config(ctx, param, value):
    if value is None:
        return None
    try:
        data = json.loads(Path(value).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.BadParameter(f"cannot read config: {exc}", ctx, param) from exc
    if not isinstance(data, dict):
        raise click.BadParameter("config must be a JSON object keyed by subcommand", ctx, param)
    group = ctx.command
    for name, opts in data.items():
        cmd = group.commands.get(name)
        if cmd is None or not isinstance(opts, dict):
            raise click.BadParameter(f"unknown config section {name!r}", ctx, param)
        known = {p.name for p in cmd.params}
        unknown = set(opts) - known
        if unknown:
            raise click.BadParameter(f"unknown option(s) for {name}: {sorted(unknown)}", ctx, param)
    ctx.default_map = data
    return value


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(dir_okay=False), callback=_load_config, is_eager=True, expose_value=False,
              help="JSON file with per-subcommand defaults (overridden by flags).")
def cli():
    """Zero-shot stylization of dynamic Gaussian scenes."""


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="Scene and trajectory seed.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
@click.option("--blobs", type=click.IntRange(min=1), default=3, show_default=True, help="Number of moving blobs.")
@click.option("--gaussians-per-blob", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--cameras", type=click.IntRange(min=1), default=4, show_default=True, help="Number of cameras.")
@click.option("--frames", type=click.IntRange(min=1), default=30, show_default=True, help="Frames per camera.")
@click.option("--res", type=click.IntRange(min=1), default=64, show_default=True, help="Square image resolution.")
@click.option("--styles", type=click.IntRange(min=0), default=4, show_default=True,
              help="Also write this many procedural style images to OUT/styles.")
def synth(seed, out, blobs, gaussians_per_blob, cameras, frames, res, styles):
    """Generate a synthetic multi-view video with its hidden ground-truth scene."""
    from .dataio.synthetic import SyntheticSpec, generate_synthetic, write_style_images

    spec = SyntheticSpec(n_blobs=blobs, gaussians_per_blob=gaussians_per_blob, n_cameras=cameras, n_frames=frames,
                         resolution=res)
    path = generate_synthetic(seed, out, spec)
    if styles:
        write_style_images(seed + 1000, styles, Path(out) / "styles", size=res)
    click.echo(f"wrote {cameras * frames} frames to {path}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset directory.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--pretrain-iters", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--joint-iters", type=click.IntRange(min=0), default=1000, show_default=True)
@click.option("--feature-dim", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--lambda", "lam", type=click.FloatRange(0.0, 1.0), default=0.2, show_default=True,
              help="D-SSIM weight.")
@click.option("--no-dssim-joint", is_flag=True, help="Drop the D-SSIM term during the joint phase.")
@click.option("--held-out", type=int, multiple=True, default=(0,), show_default=True,
              help="Camera index excluded from training (repeatable).")
@click.option("--codec-iters", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--codec-from", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse the codec stored in an existing checkpoint.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a checkpoint written by this command.")
@click.option("--checkpoint-interval", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train(data, out, pretrain_iters, joint_iters, feature_dim, lam, no_dssim_joint, held_out, codec_iters,
          codec_from, resume, checkpoint_interval, seed):
    """Pretrain on RGB, then jointly distill encoder features."""
    from .codec import FeatureCodec
    from .dataio.manifest import load_dataset
    from .estimator import corpus_for
    from .trainer import TrainConfig, Trainer, load_state

    dataset = load_dataset(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = out / "checkpoint.bin", out / "train_log.jsonl"
    t0 = time.perf_counter()
    if resume:
        trainer = Trainer.resume(resume, dataset)
    else:
        config = TrainConfig(pretrain_iters=pretrain_iters, joint_iters=joint_iters, feature_dim=feature_dim,
                             lambda_dssim=lam, dssim_in_joint=not no_dssim_joint, held_out_cameras=held_out,
                             checkpoint_interval=checkpoint_interval, seed=seed)
        codec = None
        if codec_from:
            codec = load_state(codec_from)[2]
        elif joint_iters > 0:
            codec = FeatureCodec(feature_dim=feature_dim, n_iter=codec_iters, random_state=seed)
            codec.fit(corpus_for(dataset, 200, seed + 1))
            click.echo(f"codec reconstruction PSNR {codec.reconstruction_psnr(_stack(dataset.images)):.2f} dB")
        trainer = Trainer(dataset, config, codec)
        if log.exists():
            log.unlink()
    trainer.run(log_path=log, checkpoint_path=ckpt)
    flag = "" if trainer.state.has_features else " (no features)"
    click.echo(f"checkpoint {ckpt}{flag}; {len(trainer.state.scene)} Gaussians; {time.perf_counter() - t0:.0f} s")
    click.echo(f"held-out PSNR {trainer.held_out_psnr():.2f} dB")


def _stack(images):
    return images if isinstance(images, np.ndarray) else np.stack(images)


def _parse_times(spec: str) -> list[float]:
    spec = spec.strip()
    if spec.startswith("linspace:"):
        n = int(spec.split(":", 1)[1])
        if n < 1:
            raise UsageError("linspace needs at least one time")
        return [0.0] if n == 1 else [k / (n - 1) for k in range(n)]
    try:
        return [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --times value {spec!r}") from exc


def load_camera_path(path_file, cameras, times):
    """(camera, time) views from a JSON path file.

    ``{"type": "hold", "camera": k}`` renders camera k at every time.
    ``{"type": "orbit", "n": 24, "radius": 4, "elevation": 0, "start": -30, "end": 30, "reference": 0}``
    moves around the origin with the reference camera's intrinsics; times are
    broadcast (one value) or paired one-to-one with the views.
    """
    from .scene import Camera

    spec = json.loads(Path(path_file).read_text()) if path_file else {"type": "hold", "camera": 0}
    kind = spec.get("type")
    if kind == "hold":
        k = int(spec.get("camera", 0))
        if not 0 <= k < len(cameras):
            raise UsageError(f"camera {k} does not exist")
        return [(cameras[k], t) for t in times]
    if kind == "orbit":
        ref = cameras[int(spec.get("reference", 0))]
        n = int(spec.get("n", 24))
        az = np.radians(np.linspace(float(spec.get("start", -30)), float(spec.get("end", 30)), n))
        el = np.radians(float(spec.get("elevation", 0.0)))
        r = float(spec.get("radius", np.linalg.norm(ref.center)))
        if len(times) == 1:
            times = times * n
        if len(times) != n:
            raise UsageError(f"orbit has {n} views but {len(times)} times were given")
        views = []
        for a, t in zip(az, times):
            eye = r * np.array([np.sin(a) * np.cos(el), -np.sin(el), -np.cos(a) * np.cos(el)])
            cam = Camera.look_at(eye, [0, 0, 0], [0, -1, 0], ref.fx, ref.fy, ref.width, ref.height, ref.near, ref.far)
            views.append((cam, t))
        return views
    raise UsageError(f"unknown camera path type {kind!r} (use 'hold' or 'orbit')")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--style", type=click.Path(exists=True, dir_okay=False), required=True, help="Style image.")
@click.option("--style-b", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Second style image for interpolation.")
@click.option("--interp", type=click.FloatRange(0.0, 1.0), default=0.0, show_default=True,
              help="Weight of --style-b.")
@click.option("--camera-path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON camera path file (default: hold camera 0).")
@click.option("--times", default="linspace:30", show_default=True,
              help="Comma-separated times in [0, 1] or linspace:N.")
@click.option("--normalization", type=click.Choice(["running", "naive"]), default="running", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Directory for numbered frames.")
def stylize(ckpt, style, style_b, interp, camera_path, times, normalization, out):
    """Render stylized frames for an unseen style image (no optimization)."""
    from .dataio.images import read_image, write_image
    from .rasterizer.render import backward_call_count

    est, cameras, _ = _open_checkpoint(ckpt)
    views = load_camera_path(camera_path, cameras, _parse_times(times))
    before = backward_call_count()
    frames = est.stylize(read_image(style), views, read_image(style_b) if style_b else None, interp, normalization)
    if backward_call_count() != before:
        raise SplatStyleError("stylization ran a backward pass")
    out = Path(out)
    for i, frame in enumerate(frames):
        write_image(out / f"{i:04d}.png", frame)
    click.echo(f"wrote {len(frames)} frames to {out} (optimization steps: 0)")


def _open_checkpoint(path):
    from .dataio.checkpoint import load_checkpoint
    from .estimator import SceneStylizer
    from .trainer import cameras_from_meta

    est = SceneStylizer.from_checkpoint(path)
    if not est.state_.has_features:
        raise SplatStyleError("checkpoint has no features: it was trained with --joint-iters 0")
    cameras, times = cameras_from_meta(load_checkpoint(path)[1])
    return est, cameras, times


def _style_dir(path) -> dict:
    from .dataio.images import read_image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise UsageError(f"no style images in {path}")
    return {p.stem: read_image(p) for p in files}


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--styles", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory of style images (at least two).")
@click.option("--protocol", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON protocol overrides (axes, ranges, cameras, reference_camera, long_gap, time_stride).")
@click.option("--normalization", type=click.Choice(["running", "naive"]), default="running", show_default=True,
              help="Content statistics for per-Gaussian AdaIN.")
@click.option("--baseline/--no-baseline", default=False, show_default=True,
              help="Also score the per-frame image-space AdaIN baseline.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def evaluate(ckpt, styles, protocol, normalization, baseline, out):
    """Warped-consistency table for stylized renders (values x1e3)."""
    from .evaluation import ConsistencyProtocol, consistency_suite, format_table
    from .stylization import StyleCode

    est, cameras, times = _open_checkpoint(ckpt)
    images = _style_dir(styles)
    if len(images) < 2:
        raise UsageError("the consistency suite needs at least two style images")
    overrides = json.loads(Path(protocol).read_text()) if protocol else {}
    try:
        proto = ConsistencyProtocol(**overrides)
    except TypeError as exc:
        raise UsageError(f"bad protocol file: {exc}") from exc
    methods = ["ours" if normalization == "running" else "naive"] + (["pixel"] if baseline else [])
    proto.methods = tuple(methods)
    codes = {name: StyleCode.from_image(est.codec_, img) for name, img in images.items()}
    st = est.state_
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    reports = consistency_suite(st.scene, st.field, st.head, st.rs, est.codec_, cameras, times, codes, proto,
                                log_path=out / "consistency.jsonl")
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    click.echo(table)


def main(argv=None):
    cli.main(args=argv, prog_name="splatstyle")


if __name__ == "__main__":
    main()
