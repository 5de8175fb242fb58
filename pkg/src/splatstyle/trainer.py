"""Two-phase scene optimization: RGB pretraining, then joint feature distillation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .codec import FeatureCodec, pool_features
from .dataio.checkpoint import load_checkpoint, save_checkpoint
from .dataio.manifest import MANIFEST_FORMAT, MANIFEST_VERSION, Dataset, DatasetManifest
from .deformation import DeformationHead, HexPlaneField, deform_scene
from .errors import CheckpointError, InvalidParameterError, TrainingFailureError, UsageError
from .losses import feature_loss, photometric_loss, psnr
from .optim import SceneOptimizer, exponential_lr
from .rasterizer.render import render
from .scene import GaussianScene, inverse_sigmoid, quaternion_to_matrix
from .stylization import RunningStats, compute_stats

CHECKPOINT_FORMAT = "splatstyle-checkpoint"
PRETRAIN, JOINT = "pretrain", "joint"


@dataclass
class TrainConfig:
    pretrain_iters: int = 2000
    joint_iters: int = 1000
    feature_dim: int = 32
    lambda_dssim: float = 0.2
    dssim_in_joint: bool = True
    # learning rates; means are scaled by the scene extent and decay exponentially
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_features: float = 2.5e-3
    lr_field: float = 1.6e-3
    lr_head: float = 1.6e-3
    densify_interval: int = 100
    densify_from: int = 200
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    n_init_points: int = 2000
    init_opacity: float = 0.1
    sh_degree: int = 0
    held_out_cameras: tuple = (0,)
    stats_momentum: float = 0.9
    stats_mode: str = "ema"
    stats_masked: bool = False
    deform_rotation_scale: bool = True
    plane_dim: int = 16
    resolutions: tuple = ((16, 8), (32, 16))
    head_hidden: int = 64
    tile_size: int = 16
    checkpoint_interval: int = 0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.held_out_cameras = tuple(int(c) for c in self.held_out_cameras)
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)

    def validate(self) -> TrainConfig:
        if self.pretrain_iters < 0 or self.joint_iters < 0:
            raise InvalidParameterError("iteration counts must be >= 0")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise InvalidParameterError("lambda_dssim must lie in [0, 1]")
        for name in ("densify_interval", "densify_grad_threshold", "prune_opacity", "opacity_reset_interval",
                     "percent_dense", "n_init_points", "feature_dim", "max_gaussians"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")
        if not 0.0 < self.init_opacity < 1.0:
            raise InvalidParameterError("init_opacity must lie in (0, 1)")
        for name in ("lr_means", "lr_means_final", "lr_rotations", "lr_scales", "lr_opacities", "lr_colors",
                     "lr_features", "lr_field", "lr_head"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise InvalidParameterError("dtype must be float32 or float64")
        return self

    @property
    def total_iters(self) -> int:
        return self.pretrain_iters + self.joint_iters

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["held_out_cameras"] = list(self.held_out_cameras)
        d["resolutions"] = [list(r) for r in self.resolutions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    iteration: int
    phase: str
    l1_rgb: float
    dssim: float
    feature_l1: float
    total: float
    lam: float
    n_gaussians: int

    def weighted_sum(self) -> float:
        return (1 - self.lam) * self.l1_rgb + self.lam * self.dssim + self.feature_l1

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DensifyStats:
    grad_accum: torch.Tensor
    denom: torch.Tensor

    @classmethod
    def zeros(cls, n, dtype=torch.float32):
        return cls(torch.zeros(n, dtype=dtype), torch.zeros(n, dtype=dtype))

    def __len__(self):
        return self.grad_accum.shape[0]


@dataclass
class TrainState:
    scene: GaussianScene
    field: HexPlaneField
    head: DeformationHead
    optimizer: SceneOptimizer
    rs: RunningStats
    densify: DensifyStats
    extent: float
    bounds: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def has_features(self) -> bool:
        return any(r.phase == JOINT for r in self.history) or self.rs.initialized

    def modules(self) -> dict:
        return {"field": self.field, "head": self.head}


def camera_extent(cameras, bounds) -> float:
    """Radius of the camera rig around its centroid (x1.1); falls back to the box half-diagonal."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(0), axis=1).max()) * 1.1
    if radius < 1e-6:
        b = np.asarray(bounds, dtype=np.float64)
        radius = float(np.linalg.norm(b[1] - b[0]) / 2)
    return radius


def learning_rates(config: TrainConfig, extent: float) -> dict[str, float]:
    return {
        "means": config.lr_means * extent,
        "rotations": config.lr_rotations,
        "log_scales": config.lr_scales,
        "opacity_logits": config.lr_opacities,
        "sh": config.lr_colors,
        "features": config.lr_features,
        "field": config.lr_field,
        "head": config.lr_head,
    }


def phase_of(config: TrainConfig, iteration: int) -> str:
    return PRETRAIN if iteration < config.pretrain_iters else JOINT


def init_state(bounds, cameras, config: TrainConfig, background=(0.0, 0.0, 0.0)) -> TrainState:
    config.validate()
    dtype = config.torch_dtype
    bounds = np.asarray(bounds, dtype=np.float64)
    scene = GaussianScene.create_random(
        config.n_init_points, bounds, feature_dim=config.feature_dim, sh_degree=config.sh_degree,
        seed=config.seed, init_opacity=config.init_opacity, background=background, dtype=dtype,
    )
    fld = HexPlaneField(bounds, config.plane_dim, config.resolutions, seed=config.seed, dtype=dtype)
    head = DeformationHead(fld.out_dim, config.head_hidden, seed=config.seed, dtype=dtype)
    extent = camera_extent(cameras, bounds)
    opt = SceneOptimizer(scene, {"field": fld, "head": head}, learning_rates(config, extent))
    rs = RunningStats(momentum=config.stats_momentum, mode=config.stats_mode)
    return TrainState(scene, fld, head, opt, rs, DensifyStats.zeros(len(scene), dtype), extent, bounds)


def _finite(x) -> bool:
    return bool(torch.isfinite(x).all())


def forward_loss(state: TrainState, batch, phase: str, config: TrainConfig, target=None, downsample: int = 4) -> dict:
    """Loss terms of one batch with the graph attached (no optimizer step)."""
    if phase not in (PRETRAIN, JOINT):
        raise UsageError(f"unknown phase {phase!r}")
    cam, image, t = batch
    joint = phase == JOINT
    if joint and target is None:
        raise UsageError("the joint phase needs encoder feature targets")
    params = deform_scene(state.scene, state.field, state.head, t, config.deform_rotation_scale)
    out = render(params, cam, with_features=joint, tile_size=config.tile_size)
    gt = torch.as_tensor(np.asarray(image), dtype=out["color"].dtype)
    lam = config.lambda_dssim if (not joint or config.dssim_in_joint) else 0.0
    total, l1_term, d_term = photometric_loss(out["color"], gt, lam, return_terms=True)
    feat_term = total.new_zeros(())
    pooled = None
    if joint:
        pooled = pool_features(out["features"], downsample)
        feat_term = feature_loss(pooled, target)
        total = total + feat_term
    return {"total": total, "l1_rgb": l1_term, "dssim": d_term, "feature_l1": feat_term, "lam": float(lam),
            "render": out, "pooled": pooled}


def train_step(state: TrainState, batch, phase: str, config: TrainConfig, target=None,
               downsample: int = 4) -> LossReport:
    """One forward/backward/update on ``batch = (camera, image, t)``.

    ``target`` is the encoder feature map of the image (joint phase only). The pretrain
    phase renders no feature channels, so feature tensors get no gradient and keep
    their optimizer state untouched.
    """
    it = state.iteration
    opt = state.optimizer
    opt.set_lr("means", exponential_lr(it, config.lr_means * state.extent, config.lr_means_final * state.extent,
                                       config.total_iters))
    terms = forward_loss(state, batch, phase, config, target, downsample)
    total, out, pooled = terms["total"], terms["render"], terms["pooled"]
    if not _finite(total):
        raise TrainingFailureError(f"{phase} loss is not finite", it)
    opt.zero_grad()
    total.backward()
    opt.step()
    state.scene.normalize_rotations_()
    for name in GaussianScene.PARAM_NAMES:
        if not _finite(getattr(state.scene, name)):
            raise TrainingFailureError(f"parameter {name} became non-finite", it)
    if phase == PRETRAIN:
        _accumulate_view_gradients(state, out["projection"], batch[0])
    else:
        mask = None
        if config.stats_masked:
            mask = torch.nn.functional.avg_pool2d(out["alpha"].detach()[None, None], downsample)[0, 0]
            mask = mask if float(mask.sum()) > 0 else None
        state.rs = state.rs.update(compute_stats(pooled.detach(), mask))
    report = LossReport(it, phase, terms["l1_rgb"].item(), terms["dssim"].item(), terms["feature_l1"].item(),
                        0.0, terms["lam"], len(state.scene))
    # the reported total is re-summed in float64 so it matches its terms exactly
    report.total = report.weighted_sum()
    state.iteration += 1
    state.history.append(report)
    return report


def _accumulate_view_gradients(state: TrainState, proj: dict, cam):
    g = proj["mean2d"].grad
    if g is None:
        return
    # pixel-space gradient to normalized device coordinates
    scale = torch.tensor([cam.width * 0.5, cam.height * 0.5], dtype=g.dtype)
    norm = (g.detach() * scale).norm(dim=-1).to(state.densify.grad_accum.dtype)
    vis = torch.as_tensor(proj["visible"]) & (proj["radius"].detach() > 0)
    state.densify.grad_accum[vis] += norm[vis]
    state.densify.denom[vis] += 1


def _sample_offsets(scales: torch.Tensor, rotations: torch.Tensor, gen: torch.Generator):
    z = torch.randn(scales.shape, generator=gen, dtype=scales.dtype) * scales
    return torch.einsum("nij,nj->ni", quaternion_to_matrix(rotations), z)


def densify_and_prune(state: TrainState, config: TrainConfig, seed: int | None = None) -> dict:
    """Clone small high-gradient Gaussians, split large ones in two, prune transparent ones.

    Offspring copy every attribute (features included) of their parent and start with
    zero optimizer moments. Returns counts of cloned/split/pruned Gaussians.
    """
    scene = state.scene
    n = len(scene)
    stats = state.densify
    with torch.no_grad():
        grads = stats.grad_accum / stats.denom
        grads[~torch.isfinite(grads)] = 0.0
        max_scale = scene.scales.max(dim=1).values
        high = grads >= config.densify_grad_threshold
        big = max_scale > config.percent_dense * state.extent
        clone_mask, split_mask = high & ~big, high & big
        room = max(config.max_gaussians - n, 0)
        # one extra row per clone and per split
        if int(clone_mask.sum() + split_mask.sum()) > room:
            order = torch.argsort(torch.where(high, grads, torch.full_like(grads, -1.0)), descending=True, stable=True)
            allowed = torch.zeros(n, dtype=torch.bool)
            allowed[order[:room]] = True
            clone_mask &= allowed
            split_mask &= allowed
        gen = torch.Generator().manual_seed(int(config.seed if seed is None else seed))
        rows = {name: getattr(scene, name).detach() for name in GaussianScene.PARAM_NAMES}
        extra = {name: [] for name in GaussianScene.PARAM_NAMES}
        if clone_mask.any():
            c = {k: v[clone_mask] for k, v in rows.items()}
            c["means"] = c["means"] + _sample_offsets(scene.scales[clone_mask], c["rotations"], gen)
            for k in extra:
                extra[k].append(c[k])
        if split_mask.any():
            s = {k: v[split_mask] for k, v in rows.items()}
            scales = scene.scales[split_mask]
            for _ in range(2):
                child = dict(s)
                child["means"] = s["means"] + _sample_offsets(scales, s["rotations"], gen)
                child["log_scales"] = s["log_scales"] - math.log(1.6)
                for k in extra:
                    extra[k].append(child[k])
        extra = {k: torch.cat(v) if v else rows[k][:0] for k, v in extra.items()}
        keep = ~split_mask
        opacity = torch.sigmoid(torch.cat([rows["opacity_logits"][keep], extra["opacity_logits"]]))
        alive = opacity >= config.prune_opacity
        if not alive.any():
            alive[int(torch.argmax(opacity))] = True
        n_keep = int(keep.sum())
        keep_idx = torch.nonzero(keep).squeeze(1)[alive[:n_keep]]
        keep_final = torch.zeros(n, dtype=torch.bool)
        keep_final[keep_idx] = True
        extra = {k: v[alive[n_keep:]] for k, v in extra.items()}
        state.optimizer.reindex(keep_final, extra)
        state.densify = DensifyStats.zeros(len(state.scene), stats.grad_accum.dtype)
    return {
        "cloned": int(clone_mask.sum()),
        "split": int(split_mask.sum()),
        "pruned": int((~alive).sum()),
        "n_gaussians": len(state.scene),
    }


def reset_opacity(state: TrainState, ceiling: float = 0.01):
    logits = state.scene.opacity_logits.detach()
    capped = torch.minimum(logits, torch.full_like(logits, float(inverse_sigmoid(ceiling))))
    state.optimizer.replace_values("opacity_logits", capped, reset=True)


def batch_index(config: TrainConfig, iteration: int, n: int) -> int:
    rng = np.random.default_rng([int(config.seed), int(iteration)])
    return int(rng.integers(n))


def render_rgb(state: TrainState, cam, t, tile_size=16) -> torch.Tensor:
    with torch.no_grad():
        params = deform_scene(state.scene, state.field, state.head, t)
        return render(params, cam, with_features=False, tile_size=tile_size)["color"]


def evaluate_psnr(state: TrainState, dataset: Dataset, cameras, tile_size=16) -> float:
    """Mean per-frame PSNR over all frames of ``cameras``."""
    idx = dataset.indices(cameras=set(cameras))
    if not idx:
        raise UsageError("no frames for the requested cameras")
    vals = []
    for i in idx:
        f = dataset.frames[i]
        img = render_rgb(state, dataset.cameras[f.camera], f.time, tile_size)
        vals.append(psnr(img, dataset.images[i]))
    return float(np.mean(vals))


def state_hash(state: TrainState) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(state_sections(state).items()):
        if name.startswith("optim."):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------- persistence

def _param_arrays(prefix, module) -> dict:
    return {f"{prefix}.{k}": v.detach().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def state_sections(state: TrainState, codec: FeatureCodec | None = None) -> dict[str, np.ndarray]:
    out = {f"scene.{k}": v.astype(np.float32) for k, v in state.scene.arrays().items()}
    out.update(_param_arrays("field", state.field))
    out.update(_param_arrays("head", state.head))
    if codec is not None:
        out.update({f"codec.{k}": v.astype(np.float32) for k, v in codec.state_arrays().items()})
    if state.rs.initialized:
        out["stats.mean_avg"] = state.rs.mean_avg.numpy().astype(np.float64)
        out["stats.std_avg"] = state.rs.std_avg.numpy().astype(np.float64)
    out["stats.update_count"] = np.asarray(state.rs.update_count, dtype=np.int64)
    out["progress.iteration"] = np.asarray(state.iteration, dtype=np.int64)
    out["densify.grad_accum"] = state.densify.grad_accum.numpy().astype(np.float32)
    out["densify.denom"] = state.densify.denom.numpy().astype(np.float32)
    out.update({f"optim.{k}": v for k, v in state.optimizer.state_arrays().items()})
    hist = state.history
    out["history.iteration"] = np.asarray([r.iteration for r in hist], dtype=np.int64)
    out["history.n_gaussians"] = np.asarray([r.n_gaussians for r in hist], dtype=np.int64)
    out["history.pretrain"] = np.asarray([r.phase == PRETRAIN for r in hist], dtype=np.uint8)
    for key in ("l1_rgb", "dssim", "feature_l1", "total", "lam"):
        out[f"history.{key}"] = np.asarray([getattr(r, key) for r in hist], dtype=np.float64)
    return out


def state_meta(state: TrainState, config: TrainConfig, codec: FeatureCodec | None = None, extra=None) -> dict:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "bounds": state.bounds.tolist(),
        "extent": state.extent,
        "background": [float(v) for v in state.scene.background],
        "has_features": state.has_features,
        "stats_momentum": state.rs.momentum,
        "stats_mode": state.rs.mode,
        "codec": None,
    }
    if codec is not None:
        meta["codec"] = {"feature_dim": codec.feature_dim, "widths": list(codec.widths),
                         "downsample": codec.downsample, "random_state": codec.random_state}
    if extra:
        meta["extra"] = extra
    return meta


def save_state(state: TrainState, config: TrainConfig, path, codec: FeatureCodec | None = None, extra=None):
    return save_checkpoint(state_sections(state, codec), path, state_meta(state, config, codec, extra))


def _load_module(module, prefix, sections):
    sd = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in sections.items() if k.startswith(prefix + ".")}
    ref = module.state_dict()
    if set(sd) != set(ref):
        raise CheckpointError(f"checkpoint {prefix} tensors do not match the model layout")
    module.load_state_dict({k: v.to(ref[k].dtype) for k, v in sd.items()})


def restore_state(sections: dict, meta: dict) -> tuple[TrainState, TrainConfig, FeatureCodec | None]:
    if not meta or meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    dtype = config.torch_dtype
    try:
        arrays = {k: sections[f"scene.{k}"] for k in GaussianScene.PARAM_NAMES}
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks section {exc}") from exc
    scene = GaussianScene.from_arrays(**arrays, sh_degree=config.sh_degree, background=meta["background"], dtype=dtype)
    bounds = np.asarray(meta["bounds"], dtype=np.float64)
    fld = HexPlaneField(bounds, config.plane_dim, config.resolutions, seed=config.seed, dtype=dtype)
    head = DeformationHead(fld.out_dim, config.head_hidden, seed=config.seed, dtype=dtype)
    _load_module(fld, "field", sections)
    _load_module(head, "head", sections)
    extent = float(meta["extent"])
    opt = SceneOptimizer(scene, {"field": fld, "head": head}, learning_rates(config, extent))
    opt.load_state_arrays({k[len("optim."):]: v for k, v in sections.items() if k.startswith("optim.")})
    rs = RunningStats(momentum=meta["stats_momentum"], mode=meta["stats_mode"])
    count = int(sections.get("stats.update_count", 0))
    if count:
        rs = RunningStats(torch.from_numpy(sections["stats.mean_avg"]), torch.from_numpy(sections["stats.std_avg"]),
                          rs.momentum, count, rs.mode)
    dens = DensifyStats(torch.as_tensor(sections["densify.grad_accum"]).to(dtype),
                        torch.as_tensor(sections["densify.denom"]).to(dtype))
    hist = []
    h = {k[len("history."):]: v for k, v in sections.items() if k.startswith("history.")}
    for i in range(len(h.get("iteration", []))):
        hist.append(LossReport(int(h["iteration"][i]), PRETRAIN if h["pretrain"][i] else JOINT,
                               float(h["l1_rgb"][i]), float(h["dssim"][i]), float(h["feature_l1"][i]),
                               float(h["total"][i]), float(h["lam"][i]), int(h["n_gaussians"][i])))
    state = TrainState(scene, fld, head, opt, rs, dens, extent, bounds, int(sections["progress.iteration"]), hist)
    codec = None
    if meta.get("codec"):
        c = meta["codec"]
        codec = FeatureCodec(feature_dim=c["feature_dim"], widths=tuple(c["widths"]), downsample=c["downsample"],
                             random_state=c["random_state"])
        codec.load_state_arrays({k[len("codec."):]: v for k, v in sections.items() if k.startswith("codec.")})
    return state, config, codec


def load_state(path):
    sections, meta = load_checkpoint(path)
    return restore_state(sections, meta)


# ----------------------------------------------------------------------- driver

class Trainer:
    """Runs the pretrain and joint schedules over a dataset.

    Frames of ``config.held_out_cameras`` are never used for optimization.
    """

    def __init__(self, dataset: Dataset, config: TrainConfig | None = None, codec: FeatureCodec | None = None,
                 state: TrainState | None = None):
        self.dataset = dataset
        self.config = (config or TrainConfig()).validate()
        self.codec = codec
        if self.config.joint_iters > 0 and codec is None:
            raise UsageError("joint training needs a trained codec")
        if codec is not None and codec.feature_dim != self.config.feature_dim:
            raise UsageError("codec feature_dim differs from the scene feature_dim")
        self.train_idx = dataset.indices(exclude_cameras=set(self.config.held_out_cameras))
        if not self.train_idx:
            raise UsageError("no training frames left after holding out cameras")
        self.state = state or init_state(dataset.manifest.bounds, dataset.cameras, self.config)
        self._targets = {}

    @classmethod
    def resume(cls, path, dataset: Dataset) -> Trainer:
        state, config, codec = load_state(path)
        return cls(dataset, config, codec, state)

    def target(self, i: int) -> torch.Tensor:
        # the codec is frozen, so encoder targets are computed once per frame
        if i not in self._targets:
            self._targets[i] = self.codec.encode(self.dataset.images[i]).to(self.config.torch_dtype)
        return self._targets[i]

    def step(self) -> LossReport:
        cfg, st = self.config, self.state
        it = st.iteration
        phase = phase_of(cfg, it)
        i = self.train_idx[batch_index(cfg, it, len(self.train_idx))]
        f = self.dataset.frames[i]
        batch = (self.dataset.cameras[f.camera], self.dataset.images[i], f.time)
        target = self.target(i) if phase == JOINT else None
        k = self.codec.downsample if self.codec is not None else 1
        report = train_step(st, batch, phase, cfg, target, downsample=k)
        done = st.iteration
        if phase == PRETRAIN:
            if done >= cfg.densify_from and done % cfg.densify_interval == 0 and done < cfg.pretrain_iters:
                densify_and_prune(st, cfg, seed=hash_seed(cfg.seed, done))
            if done % cfg.opacity_reset_interval == 0 and done < cfg.pretrain_iters:
                reset_opacity(st)
        return report

    def run(self, log_path=None, checkpoint_path=None, until: int | None = None, callback=None) -> TrainState:
        """Train up to iteration ``until`` (default: the end of both phases)."""
        cfg = self.config
        end = cfg.total_iters if until is None else min(int(until), cfg.total_iters)
        log = open(log_path, "a") if log_path else None
        try:
            while self.state.iteration < end:
                report = self.step()
                if log:
                    log.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
                if callback:
                    callback(report)
                if checkpoint_path and cfg.checkpoint_interval and self.state.iteration % cfg.checkpoint_interval == 0:
                    self.save(checkpoint_path)
        finally:
            if log:
                log.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.state

    def save(self, path, extra=None):
        info = {"cameras": cameras_to_meta(self.dataset.cameras, self.dataset.manifest.camera_names),
                "times": self.dataset.manifest.times}
        info.update(extra or {})
        return save_state(self.state, self.config, path, self.codec, info)

    def held_out_psnr(self) -> float:
        cams = self.config.held_out_cameras or tuple(range(len(self.dataset.cameras)))
        return evaluate_psnr(self.state, self.dataset, cams, self.config.tile_size)


def cameras_to_meta(cameras, names=()) -> list:
    m = DatasetManifest(list(cameras), [], np.zeros((2, 3)), camera_names=list(names))
    return m.to_dict()["cameras"]


def cameras_from_meta(meta: dict):
    """Cameras and timestamps of the training dataset recorded in checkpoint metadata."""
    extra = (meta or {}).get("extra") or {}
    if "cameras" not in extra:
        raise CheckpointError("checkpoint does not record its cameras")
    m = DatasetManifest.from_dict({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "bounds": meta["bounds"],
                                   "cameras": extra["cameras"], "frames": []})
    return m.cameras, [float(t) for t in extra.get("times", [0.0])]


def hash_seed(seed: int, iteration: int) -> int:
    return int(np.random.default_rng([int(seed), int(iteration), 7]).integers(2**62))


def run_training(dataset: Dataset, config: TrainConfig | None = None, codec: FeatureCodec | None = None,
                 out_dir=None) -> Trainer:
    """Pretrain then joint-train; writes ``checkpoint.bin`` and ``train_log.jsonl`` into ``out_dir``."""
    trainer = Trainer(dataset, config, codec)
    ckpt = log = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt, log = out / "checkpoint.bin", out / "train_log.jsonl"
        if log.exists():
            log.unlink()
    trainer.run(log_path=log, checkpoint_path=ckpt)
    return trainer
