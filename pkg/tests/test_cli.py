"""Tests for the pipeline CLI: config, manifests, caching, and exit codes."""

import json
import os

import numpy as np
import pytest

from dualstream import cli
from dualstream.cli import (PipelineConfig, build_train_samples, cached_ok,
                            list_episodes, load_episode, main, make_episode,
                            worker_count, write_manifest)
from dualstream.supervise import ConsistentKeypointBundle


def _tiny_cfg(**kw):
    base = dict(episodes=2, trajectory_steps=4, cloud_points=600,
                static_resolution=16, supervision_resolution=64,
                ego_resolution=32, train_steps=2, pretrain_epochs=1,
                batch_size=2, warmup_steps=1)
    base.update(kw)
    return PipelineConfig(**base)


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("CORTICAL_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("CORTICAL_THREADS", "6")
    assert worker_count() == 6
    monkeypatch.setenv("CORTICAL_THREADS", "garbage")
    assert worker_count() == 1
    monkeypatch.setenv("CORTICAL_THREADS", "-3")
    assert worker_count() == 1


def test_config_dict_roundtrip_and_hash():
    cfg = _tiny_cfg(seed=5)
    back = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.hash() == cfg.hash()
    other = _tiny_cfg(seed=6)
    assert other.hash() != cfg.hash()


def test_make_episode_deterministic_and_valid():
    cfg = _tiny_cfg()
    a = make_episode(11, cfg)
    b = make_episode(11, cfg)
    np.testing.assert_allclose(a.actions[0].translation,
                               b.actions[0].translation)
    np.testing.assert_allclose(a.clouds[0].points, b.clouds[0].points)
    assert len(a.scenes) == 2 and len(a.actions) == 2
    assert not a.actions[0].gripper_open and a.actions[1].gripper_open
    assert len(a.trajectory) == cfg.trajectory_steps
    lo, hi = cfg.bounds
    for act in a.actions:
        assert np.all(act.translation >= lo) and np.all(act.translation <= hi)


def test_episode_save_load_roundtrip(tmp_path):
    cfg = _tiny_cfg()
    ep = make_episode(3, cfg)
    cli.save_episode(str(tmp_path / "episode_0"), ep)
    back = load_episode(str(tmp_path / "episode_0"))
    assert back.task_id == ep.task_id
    np.testing.assert_allclose(back.clouds[1].points, ep.clouds[1].points)
    np.testing.assert_allclose(back.actions[0].translation,
                               ep.actions[0].translation)
    np.testing.assert_allclose(back.trajectory[2][0], ep.trajectory[2][0])


def test_synth_supervise_render_artifacts(tmp_path):
    cfg = _tiny_cfg()
    data = str(tmp_path / "data")
    bundles = str(tmp_path / "bundles")
    ego = str(tmp_path / "ego")
    cli.cmd_synth(cfg, data)
    assert len(list_episodes(data)) == 2
    cli.cmd_supervise(cfg, data, bundles)
    b = ConsistentKeypointBundle.load(os.path.join(bundles, "episode_0_kf0"))
    assert len(b.world_points) >= 2
    assert b.view_count == 3
    cli.cmd_render(cfg, data, ego)
    from dualstream.render import load_ego_sequence
    seq = load_ego_sequence(os.path.join(ego, "episode_0"))
    assert len(seq.frames) == cfg.trajectory_steps
    for d in (data, bundles, ego):
        assert os.path.exists(os.path.join(d, "manifest.json"))


def test_synth_is_deterministic(tmp_path):
    cfg = _tiny_cfg()
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    cli.cmd_synth(cfg, a)
    cli.cmd_synth(cfg, b)
    ea = load_episode(os.path.join(a, "episode_1"))
    eb = load_episode(os.path.join(b, "episode_1"))
    np.testing.assert_allclose(ea.clouds[0].points, eb.clouds[0].points)
    np.testing.assert_allclose(ea.actions[1].translation,
                               eb.actions[1].translation)


def test_cached_skips_when_unchanged(tmp_path):
    cfg = _tiny_cfg()
    data = str(tmp_path / "data")
    cli.cmd_synth(cfg, data)
    out = cli.cmd_synth(cfg, data, cached=True)
    assert out == {"cached": True}
    # a config change invalidates the cache
    cfg2 = _tiny_cfg(seed=99)
    assert not cached_ok(data, "synth", cfg2, {})


def test_manifest_tracks_input_hashes(tmp_path):
    cfg = _tiny_cfg()
    data = str(tmp_path / "data")
    bundles = str(tmp_path / "bundles")
    cli.cmd_synth(cfg, data)
    cli.cmd_supervise(cfg, data, bundles)
    assert cli.cmd_supervise(cfg, data, bundles, cached=True) == {"cached": True}
    # touching the input invalidates the supervise cache
    with open(os.path.join(data, "episode_0", "extra.txt"), "w") as fh:
        fh.write("x")
    assert not cached_ok(bundles, "supervise", cfg, {"dataset": data})


def test_build_train_samples_tracks_in_image(tmp_path):
    cfg = _tiny_cfg()
    data = str(tmp_path / "data")
    bundles = str(tmp_path / "bundles")
    cli.cmd_synth(cfg, data)
    cli.cmd_supervise(cfg, data, bundles)
    samples = build_train_samples(cfg, data, bundles)
    assert len(samples) == 4  # 2 episodes x 2 keyframes
    for s in samples:
        assert len(s.static_views) == 3
        h, w = s.static_views[0].camera.resolution
        tr = s.bundle.tracks
        assert np.all(tr[:, :, 0] >= -0.5) and np.all(tr[:, :, 0] <= w - 0.5)
        assert np.all(tr[:, :, 1] >= -0.5) and np.all(tr[:, :, 1] <= h - 0.5)


def test_augmentation_keeps_targets_in_bounds(tmp_path):
    cfg = _tiny_cfg(augment=True)
    data = str(tmp_path / "data")
    bundles = str(tmp_path / "bundles")
    cli.cmd_synth(cfg, data)
    cli.cmd_supervise(cfg, data, bundles)
    rng = np.random.default_rng(0)
    samples = build_train_samples(cfg, data, bundles, augment=True, rng=rng)
    lo, hi = cfg.bounds
    for s in samples:
        assert np.all(s.action.translation >= lo)
        assert np.all(s.action.translation <= hi)
        np.testing.assert_array_equal(
            s.action.grid_cell,
            cli.world_to_cell(s.action.translation, cfg.bounds, cfg.grid_n))


def test_main_exit_codes(tmp_path):
    cfgfile = str(tmp_path / "cfg.json")
    with open(cfgfile, "w") as fh:
        json.dump(_tiny_cfg().to_dict(), fh)
    data = str(tmp_path / "data")
    rc = main(["synth", "--config", cfgfile, "--out", data])
    assert rc == 0
    # missing input directory is a pipeline error
    rc = main(["supervise", "--config", cfgfile,
               "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "b")])
    assert rc == 3
    # malformed config file is a config error
    badcfg = str(tmp_path / "bad.json")
    with open(badcfg, "w") as fh:
        fh.write('{"tau": "not a field"}')
    rc = main(["synth", "--config", badcfg, "--out", data])
    assert rc == 2


def test_main_flag_overrides(tmp_path):
    cfgfile = str(tmp_path / "cfg.json")
    with open(cfgfile, "w") as fh:
        json.dump(_tiny_cfg().to_dict(), fh)
    data = str(tmp_path / "data")
    rc = main(["synth", "--config", cfgfile, "--out", data, "--episodes", "1"])
    assert rc == 0
    assert len(list_episodes(data)) == 1


def test_wrist_pose_looks_at_end_effector():
    ee = np.array([0.4, 0.5, 0.2])
    c2w = cli._wrist_pose_for(ee)
    eye = c2w[:3, 3]
    fwd = c2w[:3, 2]
    to_ee = ee - eye
    np.testing.assert_allclose(fwd, to_ee / np.linalg.norm(to_ee), atol=1e-12)
