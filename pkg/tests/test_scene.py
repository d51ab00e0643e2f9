"""Scene data model, coordinate transforms and JSON persistence."""

import json
import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from acoustic_primitives.scene import (
    JOINT_LAYOUTS,
    AcousticPrimitive,
    JointTrack,
    MicArraySpec,
    Scene,
    SchemaError,
    apply_offset,
    from_spherical,
    load_mic_array,
    load_scene,
    positions_at_frames,
    primitive_weights,
    save_mic_array,
    save_scene,
    scene_to_dict,
    static_track,
    to_listener_spherical,
)
from acoustic_primitives.spectral import StftConfig
from acoustic_primitives.sphmath import DomainError

CFG = StftConfig()
L = 4800  # 0.1 s
T = CFG.n_frames(L)
F = CFG.n_bins


def make_scene(K=2, order=1, seed=0, moving=False):
    rng = np.random.default_rng(seed)
    Q = (order + 1) ** 2
    joints = JOINT_LAYOUTS[12][:K] if K <= 12 else None
    tracks = {}
    for j in dict.fromkeys(joints):
        if moving:
            pos = np.linspace([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 31)
            tracks[j] = JointTrack(j, pos)
        else:
            tracks[j] = static_track(j, rng.uniform(-0.5, 0.5, 3), L / 48000)
    prims = tuple(
        AcousticPrimitive(
            j,
            rng.standard_normal((Q, F, T)) + 1j * rng.standard_normal((Q, F, T)),
            rng.standard_normal(3),
            rng.standard_normal(T),
        )
        for j in joints
    )
    return Scene(tracks, prims, CFG, L)


class TestApplyOffset:
    def test_zero(self):
        np.testing.assert_array_equal(apply_offset([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])

    def test_saturation(self):
        np.testing.assert_allclose(apply_offset([1e3, 1e3, 1e3]), [0.2, 0.2, 0.2], rtol=1e-15)

    def test_tanh_one(self):
        # 0.2 * tanh(1) = 0.2 * (e^2 - 1) / (e^2 + 1)
        ref = 0.2 * (math.e**2 - 1) / (math.e**2 + 1)
        np.testing.assert_allclose(apply_offset([1.0, -1.0, 0.0]), [ref, -ref, 0.0], rtol=1e-15)
        assert ref == pytest.approx(0.1523188, abs=1e-7)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(float, 3, elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_strict_bound(self, u):
        assert np.max(np.abs(apply_offset(u))) < 0.2


class TestWeights:
    def test_equal_logits(self):
        np.testing.assert_allclose(primitive_weights(np.full((4, 7), 3.3)), 0.25, rtol=1e-15)

    def test_closed_form(self):
        w = primitive_weights(np.array([[np.log(2.0)], [0.0]]))
        np.testing.assert_allclose(w[:, 0], [2 / 3, 1 / 3], rtol=1e-14)

    def test_large_logits_are_stable(self):
        w = primitive_weights(np.array([[1000.0], [0.0]]))
        np.testing.assert_allclose(w[:, 0], [1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(
        hnp.arrays(float, st.tuples(st.integers(1, 12), st.integers(1, 20)), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_sums_and_shift_invariance(self, z, c):
        w = primitive_weights(z)
        np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)
        np.testing.assert_allclose(primitive_weights(z + c), w, atol=1e-12)


class TestSpherical:
    def test_on_axis(self):
        r, th, ph = to_listener_spherical([0, 0, 0], [0, 0, 1])
        assert (r, th, ph) == (1.0, 0.0, 0.0)

    def test_equator(self):
        r, th, ph = to_listener_spherical([0, 0, 0], [1, 0, 0])
        assert r == 1.0
        assert th == pytest.approx(np.pi / 2, abs=1e-15)
        assert ph == 0.0

    def test_negative_y_wraps(self):
        _, _, ph = to_listener_spherical([0, 0, 0], [0, -1, 0])
        assert ph == pytest.approx(1.5 * np.pi)

    def test_near_field_error(self):
        with pytest.raises(DomainError):
            to_listener_spherical([0, 0, 0], [0.01, 0, 0])

    @settings(max_examples=200, deadline=None)
    @given(
        hnp.arrays(float, 3, elements=st.floats(-5, 5)),
        hnp.arrays(float, 3, elements=st.floats(-5, 5)),
    )
    # almost on the polar axis, where z / r rounds to 1
    @example(np.zeros(3), np.array([7.55211381e-12, 7.55211381e-12, 1.0]))
    def test_round_trip(self, p, listener):
        d = listener - p
        if np.linalg.norm(d) < 0.05:
            return
        r, th, ph = to_listener_spherical(p, listener)
        assert 0 <= th <= np.pi and 0 <= ph < 2 * np.pi
        np.testing.assert_allclose(from_spherical(r, th, ph), d, atol=1e-12)


class TestPositions:
    def test_static_track_is_constant(self):
        s = make_scene(K=2)
        pos = positions_at_frames(s)
        assert pos.shape == (2, T, 3)
        np.testing.assert_allclose(pos, np.broadcast_to(pos[:, :1], pos.shape), atol=0)

    def test_linear_motion_midpoint(self):
        s = make_scene(K=1, moving=True)
        delta = apply_offset(s.primitives[0].offset_raw)
        pos = positions_at_frames(s, np.array([0.5]))
        np.testing.assert_allclose(pos[0, 0], np.array([0.5, 0, 0]) + delta, atol=1e-14)

    def test_pose_sample_time(self):
        s = make_scene(K=1, moving=True)
        delta = apply_offset(s.primitives[0].offset_raw)
        track = s.tracks[s.primitives[0].joint].positions
        pos = positions_at_frames(s, np.array([4 / 30]))
        np.testing.assert_allclose(pos[0, 0], track[4] + delta, atol=1e-14)

    def test_out_of_range(self):
        s = make_scene(K=1, moving=True)
        with pytest.raises(ValueError):
            positions_at_frames(s, np.array([1.5]))


class TestValidation:
    def test_track_shape_and_finiteness(self):
        with pytest.raises(ValueError):
            JointTrack("a", np.zeros((3, 2)))
        with pytest.raises(ValueError):
            JointTrack("a", [[0.0, np.nan, 0.0]])

    def test_coefficient_grid_must_match(self):
        s = make_scene(K=1)
        bad = AcousticPrimitive(s.primitives[0].joint, np.zeros((4, F, T + 1), complex))
        with pytest.raises(ValueError):
            Scene(s.tracks, (bad,), CFG, L)

    def test_non_square_harmonics(self):
        with pytest.raises(ValueError):
            AcousticPrimitive("head", np.zeros((5, F, T), complex))

    def test_unknown_joint(self):
        s = make_scene(K=1)
        p = AcousticPrimitive("elbow", np.zeros((4, F, T), complex))
        with pytest.raises(ValueError):
            Scene(s.tracks, (p,), CFG, L)

    def test_mic_array(self):
        assert len(MicArraySpec(np.eye(3))) == 3
        with pytest.raises(ValueError):
            MicArraySpec(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            MicArraySpec(np.zeros((0, 3)))

    def test_scene_weights_sum_to_one(self):
        np.testing.assert_allclose(make_scene(K=5, seed=1).weights().sum(axis=0), 1.0, atol=1e-6)


class TestPersistence:
    def test_byte_identical_round_trip(self, tmp_path):
        s = make_scene(K=2, order=1)
        a = save_scene(tmp_path / "a.json", s, inline=True).read_text()
        b = save_scene(tmp_path / "b.json", load_scene(tmp_path / "a.json"), inline=True).read_text()
        assert a == b

    def test_fields_are_bit_exact(self, tmp_path):
        s = make_scene(K=2, order=1, seed=3)
        save_scene(tmp_path / "s.json", s, inline=True)
        r = load_scene(tmp_path / "s.json")
        np.testing.assert_array_equal(r.coeff_array(), s.coeff_array())
        np.testing.assert_array_equal(r.offset_raw_array(), s.offset_raw_array())
        np.testing.assert_array_equal(r.logits_array(), s.logits_array())
        assert (r.r_ref, r.v_sound, r.pose_rate, r.num_samples) == (s.r_ref, s.v_sound, s.pose_rate, s.num_samples)

    def test_sidecar_round_trip(self, tmp_path):
        s = make_scene(K=2, order=1)
        save_scene(tmp_path / "s.json", s, inline=False)
        assert (tmp_path / "s.coeffs.npy").exists()
        np.testing.assert_array_equal(load_scene(tmp_path / "s.json").coeff_array(), s.coeff_array())
        (tmp_path / "s.coeffs.npy").unlink()
        with pytest.raises(SchemaError, match="coeffs.file"):
            load_scene(tmp_path / "s.json")

    def test_missing_r_ref(self, tmp_path):
        d = scene_to_dict(make_scene(K=1))
        del d["r_ref"]
        (tmp_path / "s.json").write_text(json.dumps(d))
        with pytest.raises(SchemaError, match="r_ref"):
            load_scene(tmp_path / "s.json")

    def test_nested_field_path(self, tmp_path):
        d = scene_to_dict(make_scene(K=1))
        del d["stft"]["hop"]
        (tmp_path / "s.json").write_text(json.dumps(d))
        with pytest.raises(SchemaError, match=r"stft\.hop"):
            load_scene(tmp_path / "s.json")

    def test_wrong_schema_and_json(self, tmp_path):
        d = scene_to_dict(make_scene(K=1))
        d["schema"] = "other"
        (tmp_path / "s.json").write_text(json.dumps(d))
        with pytest.raises(SchemaError, match="schema"):
            load_scene(tmp_path / "s.json")
        (tmp_path / "t.json").write_text("{not json")
        with pytest.raises(SchemaError):
            load_scene(tmp_path / "t.json")

    def test_twelve_primitives_order_two(self, tmp_path):
        s = make_scene(K=12, order=2, seed=4)
        save_scene(tmp_path / "s.json", s)
        r = load_scene(tmp_path / "s.json")
        assert r.K == 12 and r.order == 2
        assert r.coeff_array().shape == (12, 9, F, T)
        assert [p.joint for p in r.primitives] == JOINT_LAYOUTS[12]

    def test_mic_array_round_trip(self, tmp_path):
        arr = MicArraySpec(np.random.default_rng(0).standard_normal((5, 3)), 44100)
        save_mic_array(tmp_path / "a.json", arr)
        back = load_mic_array(tmp_path / "a.json")
        np.testing.assert_array_equal(back.positions, arr.positions)
        assert back.sample_rate == 44100
