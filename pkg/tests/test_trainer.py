import json
import math

import numpy as np
import pytest
import torch

from helpers import front_camera, random_scene
from oracles import central_difference
from splatstyle.codec import FeatureCodec
from splatstyle.dataio.checkpoint import load_checkpoint
from splatstyle.dataio.manifest import load_dataset
from splatstyle.dataio.synthetic import SyntheticSpec, generate_synthetic
from splatstyle.deformation import DeformationHead, HexPlaneField
from splatstyle.errors import InvalidParameterError, TrainingFailureError, UsageError
from splatstyle.optim import SceneOptimizer, exponential_lr
from splatstyle.scene import GaussianScene, inverse_sigmoid
from splatstyle.stylization import RunningStats
from splatstyle.trainer import (
    JOINT,
    PRETRAIN,
    DensifyStats,
    LossReport,
    TrainConfig,
    Trainer,
    TrainState,
    densify_and_prune,
    forward_loss,
    init_state,
    learning_rates,
    load_state,
    render_rgb,
    run_training,
    state_hash,
    train_step,
)

SMALL = SyntheticSpec(n_blobs=2, gaussians_per_blob=40, n_cameras=2, n_frames=4, resolution=16)


def small_config(**kw):
    base = dict(pretrain_iters=10, joint_iters=10, feature_dim=4, n_init_points=150, plane_dim=4,
                resolutions=((4, 3), (8, 4)), head_hidden=16, densify_from=4, densify_interval=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return load_dataset(generate_synthetic(3, tmp_path_factory.mktemp("toy"), SMALL))


@pytest.fixture(scope="module")
def codec(toy):
    return FeatureCodec(feature_dim=4, n_iter=0, random_state=0).fit(toy.images[:4])


def batch_of(ds, i):
    f = ds.frames[i]
    return ds.cameras[f.camera], ds.images[i], f.time


def snapshot(state):
    out = {k: v.detach().clone() for k, v in state.scene.parameters().items()}
    out.update({f"field.{k}": v.detach().clone() for k, v in state.field.state_dict().items()})
    out.update({f"head.{k}": v.detach().clone() for k, v in state.head.state_dict().items()})
    return out


def test_config_validation():
    for bad in (dict(pretrain_iters=-1), dict(lambda_dssim=1.5), dict(prune_opacity=0.0),
                dict(densify_grad_threshold=-1.0), dict(dtype="float16")):
        with pytest.raises(InvalidParameterError):
            TrainConfig(**bad).validate()
    with pytest.raises(InvalidParameterError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = small_config(seed=5)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_exponential_lr_endpoints():
    assert exponential_lr(0, 1e-2, 1e-4, 100) == pytest.approx(1e-2)
    assert exponential_lr(100, 1e-2, 1e-4, 100) == pytest.approx(1e-4)
    assert exponential_lr(50, 1e-2, 1e-4, 100) == pytest.approx(1e-3)


def test_zero_learning_rates_leave_parameters_unchanged(toy, codec):
    zero = {k: 0.0 for k in ("lr_means", "lr_means_final", "lr_rotations", "lr_scales", "lr_opacities",
                             "lr_colors", "lr_features", "lr_field", "lr_head")}
    cfg = small_config(**zero)
    state = init_state(toy.manifest.bounds, toy.cameras, cfg)
    before = snapshot(state)
    rep = train_step(state, batch_of(toy, 5), PRETRAIN, cfg)
    rep2 = train_step(state, batch_of(toy, 6), JOINT, cfg, codec.encode(toy.images[6]))
    for k, v in snapshot(state).items():
        assert torch.equal(v, before[k]), k
    assert rep.total > 0 and rep2.total > 0 and rep2.feature_l1 > 0


@pytest.mark.parametrize("phase", [PRETRAIN, JOINT])
def test_one_small_step_descends(toy, codec, phase):
    base = small_config()
    scale = 0.05
    cfg = small_config(**{k: getattr(base, k) * scale for k in (
        "lr_means", "lr_means_final", "lr_rotations", "lr_scales", "lr_opacities", "lr_colors", "lr_features",
        "lr_field", "lr_head")})
    train = toy.indices(exclude_cameras={0})
    wins = 0
    for trial in range(100):
        cfg.seed = trial
        state = init_state(toy.manifest.bounds, toy.cameras, cfg)
        i = train[trial % len(train)]
        batch = batch_of(toy, i)
        target = codec.encode(toy.images[i]) if phase == JOINT else None
        with torch.no_grad():
            before = float(forward_loss(state, batch, phase, cfg, target)["total"])
        train_step(state, batch, phase, cfg, target)
        with torch.no_grad():
            after = float(forward_loss(state, batch, phase, cfg, target)["total"])
        wins += after <= before
    assert wins >= 95


class ExplodingCodec(FeatureCodec):
    def encode(self, image):
        raise AssertionError("the codec must not be read during pretraining")


def test_pretrain_never_touches_features_or_codec(toy, codec):
    cfg = small_config(pretrain_iters=12, joint_iters=1)
    exploding = ExplodingCodec(feature_dim=4).load_state_arrays(codec.state_arrays())
    trainer = Trainer(toy, cfg, exploding)
    trainer.run(until=cfg.pretrain_iters)
    # features start at zero; densification copies rows, so any change would show as a nonzero
    assert not torch.any(trainer.state.scene.features)
    assert not trainer.state.optimizer.opt.state.get(trainer.state.scene.features)
    assert not trainer.state.rs.initialized


def test_pretrain_leaves_nonzero_features_bitwise(toy):
    cfg = small_config(pretrain_iters=6, joint_iters=0, densify_from=100)
    state = init_state(toy.manifest.bounds, toy.cameras, cfg)
    with torch.no_grad():
        state.scene.features.normal_(generator=torch.Generator().manual_seed(0))
    features = state.scene.features.detach().numpy().tobytes()
    for i in range(6):
        train_step(state, batch_of(toy, 5 + i % 3), PRETRAIN, cfg)
    assert state.scene.features.detach().numpy().tobytes() == features


def test_joint_phase_never_mutates_codec(toy, codec):
    cfg = small_config(pretrain_iters=2, joint_iters=5)
    digest = codec.weights_hash()
    trainer = Trainer(toy, cfg, codec)
    trainer.run()
    assert codec.weights_hash() == digest
    assert trainer.state.rs.update_count == 5
    assert trainer.state.has_features


def test_loss_reports_equal_weighted_sum(toy, codec):
    cfg = small_config(pretrain_iters=4, joint_iters=4)
    trainer = Trainer(toy, cfg, codec)
    reports = [trainer.step() for _ in range(cfg.total_iters)]
    for r in reports:
        assert abs(r.total - r.weighted_sum()) <= 1e-9 * max(1.0, abs(r.total)) + 1e-9
        if r.phase == PRETRAIN:
            assert r.feature_l1 == 0.0
        else:
            assert r.feature_l1 > 0
    assert [r.phase for r in reports] == [PRETRAIN] * 4 + [JOINT] * 4


def test_dssim_can_be_dropped_in_joint_phase(toy, codec):
    cfg = small_config(pretrain_iters=1, joint_iters=2, dssim_in_joint=False)
    trainer = Trainer(toy, cfg, codec)
    reports = [trainer.step() for _ in range(3)]
    assert reports[0].lam == cfg.lambda_dssim and reports[1].lam == 0.0


def test_non_finite_loss_raises_with_iteration(toy):
    cfg = small_config()
    state = init_state(toy.manifest.bounds, toy.cameras, cfg)
    state.iteration = 7
    cam, image, t = batch_of(toy, 5)
    bad = image.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingFailureError) as info:
        train_step(state, (cam, bad, t), PRETRAIN, cfg)
    assert info.value.iteration == 7


def test_joint_without_target_is_usage_error(toy):
    cfg = small_config()
    state = init_state(toy.manifest.bounds, toy.cameras, cfg)
    with pytest.raises(UsageError):
        train_step(state, batch_of(toy, 5), JOINT, cfg)


def test_total_loss_gradient_matches_finite_differences(toy, codec):
    cfg = small_config(dtype="float64", n_init_points=10, seed=2)
    ds = toy
    state = init_state(ds.manifest.bounds, ds.cameras, cfg)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        state.scene.features.normal_(generator=gen)
        state.scene.opacity_logits.fill_(0.5)
        state.scene.log_scales.add_(0.3)
        state.head.out.weight.normal_(0.0, 0.05, generator=gen)
        state.head.out.bias.normal_(0.0, 0.05, generator=gen)
    i = 5
    batch = batch_of(ds, i)
    target = codec.encode(ds.images[i]).double()
    terms = forward_loss(state, batch, JOINT, cfg, target)
    state.optimizer.zero_grad()
    terms["total"].backward()

    tensors = dict(state.scene.parameters())
    tensors.update({f"field.{k}": v for k, v in state.field.named_parameters()})
    tensors.update({f"head.{k}": v for k, v in state.head.named_parameters()})
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    for name, p in tensors.items():
        flat = p.detach().view(-1)
        k = max(2, int(math.ceil(0.01 * flat.numel())))
        idx = rng.choice(flat.numel(), size=min(k, flat.numel()), replace=False)
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        for j in idx:
            def f(x, j=j, p=p):
                old = float(p.data.view(-1)[j])
                p.data.view(-1)[j] = float(x)
                try:
                    with torch.no_grad():
                        return float(forward_loss(state, batch, JOINT, cfg, target)["total"])
                finally:
                    p.data.view(-1)[j] = old

            numeric.append(central_difference(f, np.array(float(p.data.view(-1)[j])))[()])
            analytic.append(float(grad[j]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(numeric) > 0
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-3


def dense_state(seed, n=400):
    scene = random_scene(seed, n=n, feature_dim=4, dtype=torch.float32, scale=(0.05, 0.15))
    with torch.no_grad():
        scene.opacity_logits.clamp_(-1, 3)
    bounds = np.array([[-2.0, -2, 2], [2, 2, 7]])
    cfg = small_config()
    fld = HexPlaneField(bounds, 4, ((4, 3),))
    head = DeformationHead(fld.out_dim, 8)
    opt = SceneOptimizer(scene, {"field": fld, "head": head}, learning_rates(cfg, 1.0))
    return TrainState(scene, fld, head, opt, RunningStats(), DensifyStats.zeros(n), 1.0, bounds), cfg


def test_densify_without_candidates_is_a_no_op():
    state, cfg = dense_state(0)
    with torch.no_grad():
        state.scene.opacity_logits.clamp_(min=0.0)
    before = {k: v.detach().clone() for k, v in state.scene.parameters().items()}
    result = densify_and_prune(state, cfg)
    assert result == {"cloned": 0, "split": 0, "pruned": 0, "n_gaussians": 400}
    for k, v in state.scene.parameters().items():
        assert torch.equal(v.detach(), before[k])


def test_transparent_gaussian_is_pruned():
    state, cfg = dense_state(1, n=20)
    with torch.no_grad():
        state.scene.opacity_logits.clamp_(min=0.0)
        state.scene.opacity_logits[7] = float(inverse_sigmoid(0.001))
    kept = torch.cat([state.scene.means.detach()[:7], state.scene.means.detach()[8:]])
    result = densify_and_prune(state, cfg)
    assert result["pruned"] == 1 and len(state.scene) == 19
    assert torch.equal(state.scene.means.detach(), kept)


@pytest.mark.parametrize("seed", range(5))
def test_split_roughly_conserves_rendered_image(seed):
    state, cfg = dense_state(seed)
    cam = front_camera(32, 32)
    before = render_rgb(state, cam, 0.0)
    rng = np.random.default_rng(seed)
    pick = torch.from_numpy(rng.choice(len(state.scene), 20, replace=False))
    state.densify.grad_accum[pick] = 1.0
    state.densify.denom[:] = 1.0
    result = densify_and_prune(state, cfg)
    assert result["split"] == 20 and result["cloned"] == 0
    after = render_rgb(state, cam, 0.0)
    assert float((after - before).abs().mean() / before.abs().mean()) <= 0.05


def test_densify_keeps_invariants_and_zero_moments(toy, codec):
    cfg = small_config(pretrain_iters=3, joint_iters=0)
    trainer = Trainer(toy, cfg, None)
    trainer.run()
    st = trainer.state
    n = len(st.scene)
    with torch.no_grad():
        st.scene.features.normal_(generator=torch.Generator().manual_seed(1))
    st.densify.denom[:] = 1.0
    st.densify.grad_accum[:] = 0.0
    max_scale = st.scene.scales.detach().max(1).values
    cfg.percent_dense = float(max_scale.median()) / st.extent
    small = max_scale <= cfg.percent_dense * st.extent
    clone_idx = int(torch.nonzero(small)[0])
    split_idx = int(torch.nonzero(~small)[0])
    st.densify.grad_accum[[clone_idx, split_idx]] = 1.0
    parent_feat = st.scene.features.detach()[[clone_idx, split_idx]].clone()
    result = densify_and_prune(st, cfg)
    assert result["cloned"] == 1 and result["split"] == 1
    assert len(st.scene) == n + 2 - result["pruned"]
    st.optimizer.check_consistency()
    torch.testing.assert_close(st.scene.rotations.detach().norm(dim=1), torch.ones(len(st.scene)))
    assert bool(torch.all(st.scene.scales > 0))
    new_feat = st.scene.features.detach()[-3:]
    assert torch.equal(new_feat[0], parent_feat[0])
    assert torch.equal(new_feat[1], parent_feat[1]) and torch.equal(new_feat[2], parent_feat[1])
    for name in GaussianScene.PARAM_NAMES:
        state = st.optimizer.opt.state.get(getattr(st.scene, name))
        if state:
            assert not torch.any(state["exp_avg"][-3:]) and not torch.any(state["exp_avg_sq"][-3:])


def test_zero_iterations_yield_initial_state_and_checkpoint(toy, tmp_path):
    cfg = small_config(pretrain_iters=0, joint_iters=0)
    trainer = run_training(toy, cfg, None, tmp_path)
    fresh = init_state(toy.manifest.bounds, toy.cameras, cfg)
    assert state_hash(trainer.state) == state_hash(fresh)
    state, config, codec = load_state(tmp_path / "checkpoint.bin")
    assert config == cfg and codec is None and state.iteration == 0
    assert state_hash(state) == state_hash(fresh)


def test_same_seed_gives_identical_logs(toy, codec, tmp_path):
    cfg = small_config()
    a = run_training(toy, cfg, codec, tmp_path / "a")
    b = run_training(toy, cfg, codec, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert state_hash(a.state) == state_hash(b.state)
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == cfg.total_iters
    assert set(json.loads(lines[0])) == {"iteration", "phase", "l1_rgb", "dssim", "feature_l1", "total", "lam",
                                         "n_gaussians"}


@pytest.mark.parametrize("stop", [6, 13])
def test_resume_matches_uninterrupted_run(toy, codec, tmp_path, stop):
    cfg = small_config()
    full = Trainer(toy, cfg, codec)
    full.run()
    part = Trainer(toy, cfg, codec)
    part.run(until=stop, checkpoint_path=tmp_path / "mid.bin")
    resumed = Trainer.resume(tmp_path / "mid.bin", toy)
    assert resumed.state.iteration == stop
    resumed.run()
    assert state_hash(resumed.state) == state_hash(full.state)
    assert [r.as_dict() for r in resumed.state.history] == [r.as_dict() for r in full.state.history]


def test_checkpoint_records_sections(toy, codec, tmp_path):
    cfg = small_config()
    trainer = Trainer(toy, cfg, codec)
    trainer.run(checkpoint_path=tmp_path / "c.bin")
    sections, meta = load_checkpoint(tmp_path / "c.bin")
    assert sections["stats.mean_avg"].dtype == np.float64
    assert sections["scene.means"].dtype == np.float32
    assert sections["optim.means.0.step"].dtype == np.float64
    assert any(k.startswith("codec.encoder.") for k in sections)
    assert meta["has_features"] and meta["config"]["seed"] == cfg.seed
    assert len(meta["extra"]["cameras"]) == 2


def test_loss_report_as_dict():
    r = LossReport(3, JOINT, 0.1, 0.2, 0.3, 0.9 * 0.1 + 0.1 * 0.2 + 0.3, 0.1, 12)
    assert r.weighted_sum() == pytest.approx(r.total)
    assert r.as_dict()["n_gaussians"] == 12
