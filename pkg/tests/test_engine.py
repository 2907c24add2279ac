import io
import struct

import numpy as np
import pytest

from omnistream.attention import CapacityError
from omnistream.engine import (CHECKPOINT_MAGIC, BadMagicError,
                               CheckpointError, DuplicateTensorError,
                               EngineConfig, MissingParameterError,
                               TruncatedFileError, UnknownDtypeError,
                               VersionMismatchError, cache_stats,
                               caption_targets_for, checkpoint_load,
                               checkpoint_save, config_from_dict, config_load,
                               config_save, config_to_dict, forward_offline,
                               init_engine_params, required_param_names,
                               session_new, synth_scene, toy_config,
                               toy_train)
from omnistream.heads import compose_points
from omnistream.losses import LossWeights
from omnistream.numerics import ShapeError


def small_config(**overrides):
    base = dict(n_layers=2, d_model=32, n_heads=2, patch=4,
                selected_layers=(1, 2), cam_enabled=True, capacity=8)
    base.update(overrides)
    return EngineConfig(**base)


class TestConfig:
    def test_save_load_round_trip(self, tmp_path):
        config = small_config(rope_base=500.0, capacity=12)
        path = tmp_path / "config.json"
        config_save(path, config)
        assert config_load(path) == config

    def test_missing_key_rejected(self):
        data = config_to_dict(small_config())
        del data["n_heads"]
        with pytest.raises(KeyError):
            config_from_dict(data)

    def test_layout_divisibility(self):
        with pytest.raises(ShapeError):
            small_config().layout(2, 10, 8)

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            small_config(capacity=0)


class TestCheckpoint:
    def setup_method(self):
        self.config = small_config()
        self.params = init_engine_params(self.config, seed=0)

    def save(self, tmp_path, name="model.omst"):
        path = tmp_path / name
        checkpoint_save(path, self.params, self.config)
        return path

    def test_round_trip_bit_exact(self, tmp_path):
        path = self.save(tmp_path)
        loaded, config = checkpoint_load(path)
        assert config == self.config
        assert set(loaded) == set(self.params)
        for name in self.params:
            assert loaded[name].dtype == self.params[name].dtype
            assert np.array_equal(loaded[name], self.params[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        path1 = self.save(tmp_path, "a.omst")
        loaded, config = checkpoint_load(path1)
        path2 = tmp_path / "b.omst"
        checkpoint_save(path2, loaded, config)
        assert path1.read_bytes() == path2.read_bytes()

    def test_float64_round_trip(self, tmp_path):
        self.params = init_engine_params(self.config, seed=1, dtype=np.float64)
        path = self.save(tmp_path)
        loaded, _ = checkpoint_load(path)
        for name in self.params:
            assert loaded[name].dtype == np.float64
            assert np.array_equal(loaded[name], self.params[name])

    def test_bad_magic(self, tmp_path):
        path = self.save(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            checkpoint_load(path)

    def test_version_mismatch(self, tmp_path):
        path = self.save(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            checkpoint_load(path)

    def test_truncation(self, tmp_path):
        path = self.save(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(TruncatedFileError):
            checkpoint_load(path)

    def test_trailing_bytes(self, tmp_path):
        path = self.save(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError):
            checkpoint_load(path)

    def test_duplicate_tensor(self, tmp_path):
        from omnistream.engine import _write_tensor
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", 1))
        buf.write(struct.pack("<I", 2))
        arr = np.zeros(3, dtype=np.float32)
        _write_tensor(buf, "twin", arr)
        _write_tensor(buf, "twin", arr)
        path = tmp_path / "dup.omst"
        path.write_bytes(buf.getvalue())
        with pytest.raises(DuplicateTensorError):
            checkpoint_load(path)

    def test_unknown_dtype_on_save(self, tmp_path):
        self.params["bad"] = np.zeros(3, dtype=np.int64)
        with pytest.raises(UnknownDtypeError):
            self.save(tmp_path)

    def test_unknown_dtype_tag_on_load(self, tmp_path):
        from omnistream.engine import _write_tensor
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", 1))
        buf.write(struct.pack("<I", 1))
        _write_tensor(buf, "x", np.zeros(2, dtype=np.float32))
        data = bytearray(buf.getvalue())
        # dtype tag sits right before the 8-byte payload
        data[-9] = 250
        path = tmp_path / "tag.omst"
        path.write_bytes(bytes(data))
        with pytest.raises(UnknownDtypeError):
            checkpoint_load(path)

    def test_missing_parameter_named(self, tmp_path):
        del self.params["camera_head.w2"]
        path = self.save(tmp_path)
        with pytest.raises(MissingParameterError, match="camera_head.w2"):
            checkpoint_load(path, expected_config=self.config)


class TestSession:
    def setup_method(self):
        self.config = small_config()
        self.params = init_engine_params(self.config, seed=2)

    def test_fresh_session_is_empty(self):
        session = session_new(self.params, self.config, capacity_frames=4)
        stats = cache_stats(session)
        assert (stats.frames, stats.tokens, stats.byte_estimate) == (0, 0, 0)

    def test_capacity_contract(self):
        rng = np.random.default_rng(3)
        session = session_new(self.params, self.config, capacity_frames=3,
                              height=8, width=8)
        for _ in range(3):
            session.push(rng.random((8, 8, 3), dtype=np.float32))
        with pytest.raises(CapacityError):
            session.push(rng.random((8, 8, 3), dtype=np.float32))
        assert session.frames == 3

    def test_push_equals_offline_forward(self):
        rng = np.random.default_rng(4)
        frames = rng.random((4, 8, 8, 3), dtype=np.float32)
        session = session_new(self.params, self.config, capacity_frames=4,
                              height=8, width=8)
        outs = [session.push(frames[t]) for t in range(4)]
        full, pred = forward_offline(frames, self.params, self.config)
        z_cls = np.concatenate([o.z_cls for o in outs])
        assert np.abs(z_cls - full.z_cls).max() < 1e-5
        z_cam = np.concatenate([o.z_cam for o in outs])
        assert np.abs(z_cam - full.z_cam).max() < 1e-5
        depth = np.concatenate([o.prediction.depth for o in outs])
        assert np.abs(depth - pred.depth).max() < 1e-4
        pose = np.concatenate([o.prediction.pose for o in outs])
        assert np.abs(pose - pred.pose).max() < 1e-4

    def test_first_push_equals_single_image(self):
        rng = np.random.default_rng(5)
        frame = rng.random((8, 8, 3), dtype=np.float32)
        session = session_new(self.params, self.config, capacity_frames=1,
                              height=8, width=8)
        out = session.push(frame)
        full, _ = forward_offline(frame[None], self.params, self.config)
        assert np.abs(out.z_cls - full.z_cls).max() < 1e-6

    def test_sessions_are_independent(self):
        rng = np.random.default_rng(6)
        a = session_new(self.params, self.config, 4, height=8, width=8)
        b = session_new(self.params, self.config, 4, height=8, width=8)
        frame1 = rng.random((8, 8, 3), dtype=np.float32)
        frame2 = rng.random((8, 8, 3), dtype=np.float32)
        a.push(frame1)
        b.push(frame2)
        out_a = a.push(frame1)
        out_b = b.push(frame1)  # same second frame, different history
        assert np.abs(out_a.z_cls - out_b.z_cls).max() > 0

    def test_token_and_byte_accounting(self):
        rng = np.random.default_rng(7)
        session = session_new(self.params, self.config, 8, height=8, width=8)
        per_frame = session.layout.per_frame
        estimates = []
        for t in range(1, 5):
            session.push(rng.random((8, 8, 3), dtype=np.float32))
            stats = cache_stats(session)
            assert stats.tokens == t * per_frame
            assert stats.resident_value_count == (
                stats.tokens * 2 * self.config.n_layers * self.config.d_model)
            assert stats.byte_estimate == stats.resident_value_count * 4
            estimates.append(stats.byte_estimate)
        assert estimates[1] == 2 * estimates[0]
        assert estimates[3] == 2 * estimates[1]

    def test_frame_shape_mismatch(self):
        session = session_new(self.params, self.config, 2, height=8, width=8)
        with pytest.raises(ShapeError):
            session.push(np.zeros((8, 12, 3), dtype=np.float32))

    def test_missing_parameter(self):
        params = dict(self.params)
        del params["depth_head.w1"]
        with pytest.raises(MissingParameterError):
            session_new(params, self.config, 2)

    def test_length_extrapolation_beyond_typical_clip(self):
        # capacity alone bounds the stream length, not the training clip size
        rng = np.random.default_rng(8)
        session = session_new(self.params, self.config, 24, height=8, width=8)
        for _ in range(24):
            out = session.push(rng.random((8, 8, 3), dtype=np.float32))
        assert np.all(np.isfinite(out.z_cls))
        assert session.frames == 24


class TestSynthScene:
    def test_seed_determinism(self):
        a = synth_scene(3, 4, 16, 16)
        b = synth_scene(3, 4, 16, 16)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.targets.depth, b.targets.depth)
        assert np.array_equal(a.targets.pose, b.targets.pose)

    def test_points_compose_exactly(self):
        scene = synth_scene(4, 3, 16, 16)
        recomposed = compose_points(scene.targets.depth, scene.targets.rays)
        assert np.array_equal(recomposed, scene.targets.points)

    def test_static_camera(self):
        scene = synth_scene(5, 4, 8, 8, motion_scale=0.0)
        for t in range(1, 4):
            assert np.array_equal(scene.targets.rays[t], scene.targets.rays[0])
            assert np.array_equal(scene.targets.pose[t], scene.targets.pose[0])

    def test_pose_invariants(self):
        scene = synth_scene(6, 5, 8, 8)
        pose = scene.targets.pose
        assert np.abs(np.linalg.norm(pose[:, :4], axis=-1) - 1.0).max() < 1e-10
        assert np.all(pose[:, 7:9] > 0)

    def test_ray_directions_unit_norm(self):
        scene = synth_scene(7, 2, 8, 8)
        norms = np.linalg.norm(scene.targets.rays[..., 3:6], axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-12

    def test_depth_positive_and_frames_bounded(self):
        scene = synth_scene(8, 3, 16, 16)
        assert np.all(scene.targets.depth > 0)
        assert scene.frames.min() >= 0.0 and scene.frames.max() <= 1.0

    def test_needs_one_frame(self):
        with pytest.raises(ValueError):
            synth_scene(0, 0, 8, 8)


class TestCaptionTargets:
    def test_known_quadrants(self):
        frame = np.zeros((4, 4, 3))
        frame[:2, :2, 0] = 1.0   # red, overall mean 1/3 -> dark -> 2*0+0 = 0
        frame[:2, 2:, 1] = 0.3   # green, dark -> 2*1+0 = 2
        frame[2:, :2, 2] = 0.9   # blue, dark (mean 0.3) -> 2*2+0 = 4
        frame[2:, 2:, :] = 1.0   # tie -> argmax 0, bright -> 1
        assert caption_targets_for(frame).tolist() == [0, 2, 4, 1]

    def test_tokens_in_vocabulary(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            tokens = caption_targets_for(rng.random((8, 8, 3)))
            assert np.all((tokens >= 0) & (tokens < 8))


class TestToyTrain:
    def test_zero_weights_leave_parameters_unchanged(self):
        from omnistream.engine import _init_toy_params
        config = toy_config()
        before = _init_toy_params(config, seed=0)
        weights = LossWeights(lam_ssl=0.0, lam_geo=0.0, lam_cap=0.0)
        history = toy_train(2, seed=0, weights=weights)
        assert history["total"] == [0.0, 0.0]
        after = _init_toy_params(config, seed=0)
        for name in before:
            assert np.array_equal(before[name], after[name])

    def test_seed_determinism(self):
        a = toy_train(3, seed=1)
        b = toy_train(3, seed=1)
        for name in a:
            assert a[name] == b[name]

    def test_history_shape(self):
        history = toy_train(2, seed=2)
        assert history["step"] == [1, 2]
        for name in ("total", "dino", "ibot", "koleo", "gram", "depth",
                     "ray", "points", "camera", "caption"):
            assert len(history[name]) == 2
            assert np.all(np.isfinite(history[name]))

    def test_geo_only_smoothed_monotone(self):
        weights = LossWeights(lam_ssl=0.0, lam_geo=1.0, lam_cap=0.0)
        history = toy_train(40, seed=0, weights=weights)
        geo = np.array(history["depth"]) + np.array(history["ray"]) \
            + np.array(history["points"]) + np.array(history["camera"])
        assert geo[20:].mean() < geo[:20].mean()

    def test_steps_validation(self):
        with pytest.raises(ValueError):
            toy_train(0)
