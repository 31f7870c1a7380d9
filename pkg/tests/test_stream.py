import numpy as np
import pytest

from oracles import conv2d_loops, deformable_conv_loops
from streamkf.data_io import SynthConfig, synth_video
from streamkf.stream import (ALWAYS_KEYFRAME, FrameScore, MotionDiffMap, OkfemConfig, OnlineContractError,
                             ReceptiveFieldMap, appearance, deformable_conv, frame_score, gate, init_model,
                             init_state, motion_diff, receptive_field, scan, step, step_map)
from streamkf.tensor import ConvParams, ShapeError, conv2d, relu


def zero_offsets(model):
    off = model.deform.offset_predictor
    off.weight = np.zeros_like(off.weight)
    off.bias = np.zeros_like(off.bias)
    return model


def backbone_out(frame, params):
    x = frame
    for conv in params.backbone:
        x = relu(conv2d(x, conv))
    return x


class TestState:
    def test_default_state_is_empty(self, small_config):
        s = init_state(small_config)
        assert s.prev_receptive_field is None and s.prev_appearance is None and s.frame_index == 0

    def test_two_inits_identical(self, small_config):
        assert init_state(small_config) == init_state(small_config)

    def test_one_step_advances_index(self, small_model, rng):
        state, _ = step(init_state(small_model.config), rng.random((3, 16, 16), np.float32), small_model)
        assert state.frame_index == 1

    @pytest.mark.parametrize("kwargs", [{"deform_kernel_size": 2}, {"input_shape": (3, 2, 2)},
                                        {"first_frame_policy": "sometimes"}, {"backbone_layers": -1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            OkfemConfig(**kwargs)

    @pytest.mark.parametrize("seed", range(4))
    def test_init_map_scales_with_brightness(self, small_config, rng, seed):
        model = zero_offsets(init_model(small_config, seed=seed))
        assert np.all(model.deform.response_kernel.weight >= 0)
        frame = rng.random((3, 16, 16)).astype(np.float32)
        base = receptive_field(frame, model.deform).map
        np.testing.assert_allclose(receptive_field(2 * frame, model.deform).map, 2 * base, rtol=1e-5, atol=1e-7)
        assert base.sum() > 0

    def test_init_state_rejects_non_config(self):
        with pytest.raises(TypeError):
            init_state({"input_shape": (3, 16, 16)})


class TestReceptiveField:
    def test_zero_offsets_equal_plain_conv(self, small_model, rng):
        model = zero_offsets(small_model)
        frame = rng.random((3, 16, 16)).astype(np.float32)
        d = receptive_field(frame, model.deform).map
        want = conv2d(backbone_out(frame, model.deform), model.deform.response_kernel)
        np.testing.assert_allclose(d, want, atol=1e-5)

    def test_constant_frame_constant_interior(self, small_config):
        model = init_model(small_config, seed=0, offset_scale=0.01)
        model.deform.offset_predictor.bias[:] = 0
        frame = np.full((3, 16, 16), 0.7, np.float32)
        d = receptive_field(frame, model.deform).map[0]
        interior = d[4:-4, 4:-4]
        np.testing.assert_allclose(interior, interior[0, 0], rtol=1e-5, atol=1e-6)

    def test_deformable_conv_matches_loops(self, rng):
        feats = rng.normal(size=(4, 7, 6))
        offsets = rng.normal(scale=1.5, size=(18, 7, 6))
        resp = ConvParams(rng.normal(size=(1, 4, 3, 3)), rng.normal(size=1))
        got, _ = deformable_conv(feats, offsets, resp)
        np.testing.assert_allclose(got, deformable_conv_loops(feats, offsets, resp.weight, resp.bias), atol=1e-10)

    def test_full_map_matches_loop_oracle(self, small_model, rng):
        frame = rng.random((3, 16, 16)).astype(np.float32)
        p = small_model.deform
        x = frame.astype(np.float64)
        for conv in p.backbone:
            x = np.maximum(conv2d_loops(x, conv.weight, conv.bias), 0)
        offsets = conv2d_loops(x, p.offset_predictor.weight, p.offset_predictor.bias)
        want = deformable_conv_loops(x, offsets, p.response_kernel.weight, p.response_kernel.bias)
        np.testing.assert_allclose(receptive_field(frame, p).map, want, atol=1e-5)

    def test_five_tap_kernel(self, rng):
        model = init_model(OkfemConfig(input_shape=(2, 9, 9), backbone_layers=0, deform_kernel_size=5),
                           seed=1, offset_scale=0.5)
        frame = rng.random((2, 9, 9)).astype(np.float32)
        p = model.deform
        offsets = conv2d_loops(frame, p.offset_predictor.weight, p.offset_predictor.bias)
        want = deformable_conv_loops(frame, offsets, p.response_kernel.weight, p.response_kernel.bias)
        np.testing.assert_allclose(receptive_field(frame, p).map, want, atol=1e-5)

    def test_shape_mismatch(self, small_model):
        with pytest.raises(ShapeError):
            receptive_field(np.zeros((1, 16, 16), np.float32), small_model.deform)


class TestEquations:
    def test_motion_diff_example(self):
        d_t = ReceptiveFieldMap(np.array([[[1, 2], [3, 4]]], np.float32), 5)
        d_p = ReceptiveFieldMap(np.ones((1, 2, 2), np.float32), 4)
        np.testing.assert_array_equal(motion_diff(d_t, d_p).r, [[[0, 1], [2, 3]]])

    def test_motion_diff_identical_maps(self, rng):
        m = rng.random((1, 4, 4)).astype(np.float32)
        assert np.all(motion_diff(ReceptiveFieldMap(m, 1), ReceptiveFieldMap(m, 0)).r == 0)

    def test_motion_diff_random_exact(self, rng):
        a, b = rng.random((2, 1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(motion_diff(ReceptiveFieldMap(a, 3), ReceptiveFieldMap(b, 2)).r, a - b)

    def test_motion_diff_rejects_gap(self):
        m = np.zeros((1, 2, 2), np.float32)
        with pytest.raises(OnlineContractError):
            motion_diff(ReceptiveFieldMap(m, 3), ReceptiveFieldMap(m, 1))

    def test_frame_score_example(self):
        s = frame_score(MotionDiffMap(np.array([[[0, 1], [2, 3]]], np.float32), 1), np.ones((1, 2, 2), np.float32))
        np.testing.assert_array_equal(s.s_map, [[[-1, 0], [1, 2]]])
        assert s.total == 2

    def test_frame_score_equal_maps(self, rng):
        r = rng.random((1, 4, 4)).astype(np.float32)
        assert frame_score(MotionDiffMap(r, 1), r.copy()).total == 0

    def test_frame_score_random_sum(self, rng):
        r, th = rng.normal(size=(2, 1, 8, 8))
        s = frame_score(MotionDiffMap(r, 1), th)
        assert abs(s.total - float(np.sum(r - th))) <= 1e-4 * max(1.0, abs(s.total))

    def test_frame_score_shape_mismatch(self):
        with pytest.raises(ShapeError):
            frame_score(MotionDiffMap(np.zeros((1, 2, 2)), 1), np.zeros((1, 3, 3)))

    @pytest.mark.parametrize("total,selected", [(2.0, True), (0.0, False), (-0.5, False), (1e-30, True)])
    def test_gate_strict(self, total, selected):
        assert gate(FrameScore(np.zeros((1, 1, 1)), total)).selected is selected

    def test_appearance_zero(self):
        conv = ConvParams(np.ones((3, 3, 3, 3), np.float32), np.zeros(3, np.float32))
        y = appearance(np.zeros((3, 5, 5), np.float32), ReceptiveFieldMap(np.zeros((1, 5, 5), np.float32), 0), conv)
        assert np.all(y == 0)

    def test_appearance_identity(self, rng):
        frame = rng.random((3, 5, 5)).astype(np.float32)
        conv = ConvParams(np.eye(3, dtype=np.float32)[:, :, None, None], np.zeros(3, np.float32))
        y = appearance(frame, ReceptiveFieldMap(np.zeros((1, 5, 5), np.float32), 0), conv)
        np.testing.assert_array_equal(y, frame)

    def test_appearance_random_oracle(self, rng):
        frame = rng.random((3, 6, 6)).astype(np.float32)
        d = rng.normal(size=(1, 6, 6)).astype(np.float32)
        conv = ConvParams(rng.normal(size=(3, 3, 3, 3)).astype(np.float32), rng.normal(size=3).astype(np.float32))
        y = appearance(frame, ReceptiveFieldMap(d, 0), conv)
        np.testing.assert_allclose(y, conv2d_loops(frame + d, conv.weight, conv.bias), atol=1e-5)


def two_scene_sequence(model, rng, n=8, change=5):
    """Static scene A then static scene B, ordered so the receptive field grows at the cut."""
    a = rng.random((3, 16, 16)).astype(np.float32)
    b = np.roll(a, 5, axis=2) * 1.5
    if receptive_field(b, model.deform).map.sum() < receptive_field(a, model.deform).map.sum():
        a, b = b, a
    return np.stack([a] * change + [b] * (n - change))


class TestStep:
    def test_first_frame_never_keyframe(self, small_model, rng):
        _, rec = step(init_state(small_model.config), rng.random((3, 16, 16), np.float32), small_model)
        assert rec is None

    def test_first_frame_always_keyframe(self, rng):
        model = init_model(OkfemConfig(input_shape=(3, 16, 16), first_frame_policy=ALWAYS_KEYFRAME), seed=3)
        frame = rng.random((3, 16, 16)).astype(np.float32)
        _, rec = step(init_state(model.config), frame, model)
        assert rec is not None and rec.frame_index == 0
        d = receptive_field(frame, model.deform)
        np.testing.assert_array_equal(rec.k_fm, d.map)
        np.testing.assert_allclose(rec.k_fa, appearance(frame, d, model.appearance), atol=1e-6)

    def test_static_scene_positive_threshold(self, small_model, rng):
        small_model.threshold[:] = 0.01
        frame = rng.random((3, 16, 16)).astype(np.float32)
        outs = list(scan([frame] * 6, small_model))
        assert all(o.record is None for o in outs)
        assert all(o.score < 0 for o in outs[1:])

    def test_single_cut_with_zero_threshold(self, small_model, rng):
        small_model.threshold[:] = 0
        frames = two_scene_sequence(small_model, rng)
        outs = list(scan(frames, small_model))
        recs = [o.record for o in outs if o.record is not None]
        assert [r.frame_index for r in recs] == [5]
        d4 = receptive_field(frames[4], small_model.deform, 4)
        d5 = receptive_field(frames[5], small_model.deform, 5)
        y4 = appearance(frames[4], d4, small_model.appearance)
        y5 = appearance(frames[5], d5, small_model.appearance)
        np.testing.assert_allclose(recs[0].k_fa, y5 + y4, atol=1e-5)
        np.testing.assert_array_equal(recs[0].k_fm, d5.map - d4.map)

    def test_gate_consistency_and_record_fidelity(self, small_model):
        small_model.threshold[:] = -0.002
        frames = synth_video(SynthConfig(num_frames=16, frame_shape=(3, 16, 16), num_events=2, seed=4,
                                         noise_level=0.05)).frames
        state = init_state(small_model.config)
        prev_d = prev_y = None
        for t, frame in enumerate(frames):
            state, rec = step(state, frame, small_model)
            d = receptive_field(frame, small_model.deform, t)
            y = appearance(frame, d, small_model.appearance)
            if prev_d is not None:
                r = motion_diff(d, prev_d)
                total = frame_score(r, small_model.threshold).total
                assert (rec is not None) == (total > 0)
                if rec is not None:
                    assert rec.score > 0
                    assert rec.k_fm.tobytes() == r.r.tobytes()
                    np.testing.assert_allclose(rec.k_fa, y + prev_y, atol=1e-5)
            prev_d, prev_y = d, y

    def test_state_size_constant(self, small_model, rng):
        state = init_state(small_model.config)
        sizes = []
        for _ in range(12):
            state, _ = step(state, rng.random((3, 16, 16), np.float32), small_model)
            sizes.append(len(state.to_bytes()))
        assert len(set(sizes)) == 1

    def test_truncation_invariance(self, small_model):
        small_model.threshold[:] = -0.001
        frames = synth_video(SynthConfig(num_frames=20, frame_shape=(3, 16, 16), seed=9, noise_level=0.1)).frames
        full = [(o.record.frame_index, o.record.k_fm.tobytes()) for o in scan(frames, small_model) if o.record]
        for t in (3, 10, 19):
            part = [(o.record.frame_index, o.record.k_fm.tobytes()) for o in scan(frames[:t + 1], small_model)
                    if o.record]
            assert part == [r for r in full if r[0] <= t]

    def test_precomputed_maps(self, small_model, rng):
        maps = rng.normal(size=(5, 1, 16, 16)).astype(np.float32)
        outs = list(scan(maps, small_model, precomputed=True))
        for t in range(1, 5):
            want = float(np.sum(maps[t] - maps[t - 1] - small_model.threshold, dtype=np.float64))
            assert abs(outs[t].score - want) < 1e-4
        state = init_state(small_model.config)
        with pytest.raises(ShapeError):
            step_map(state, np.zeros((2, 16, 16)), small_model)

    def test_wrong_frame_shape(self, small_model):
        with pytest.raises(ShapeError):
            step(init_state(small_model.config), np.zeros((3, 8, 8), np.float32), small_model)
