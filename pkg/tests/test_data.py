"""Preprocessing, augmentation and dataset IO tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmpose import data
from pmpose.data import (
    AugmentParams,
    LabeledFrame,
    MatGeometry,
    NormStats,
    ParseError,
    PressureImage,
    augment,
    bed_height_channel,
    build_input_stack,
    fit_normalization,
    mirror_labels,
    read_dataset,
    sobel_edges,
    upsample2x,
    write_dataset,
)


def make_frame(taxels=None, bed_angle=0.0, frame_id=0, pid=1, joints=None):
    if taxels is None:
        taxels = np.zeros((64, 27))
    if joints is None:
        joints = np.tile([0.4, 1.0, 0.1], (10, 1))
    return LabeledFrame(
        image=PressureImage(taxels, bed_angle, frame_id, pid), joints=joints
    )


class TestUpsample:
    def test_output_shape(self):
        out = upsample2x(np.zeros((64, 27)))
        assert out.shape == (128, 54)

    def test_constant_stays_constant(self):
        out = upsample2x(np.full((64, 27), 37.25))
        np.testing.assert_array_equal(out, 37.25)

    def test_bilinear_midpoints(self):
        # checkerboard corner: the odd/odd output samples the exact center
        img = np.zeros((64, 27))
        img[10, 5] = 0.0
        img[10, 6] = 100.0
        img[11, 5] = 100.0
        img[11, 6] = 0.0
        up = upsample2x(img)
        assert up[20, 10] == 0.0  # copies input sample
        assert up[21, 11] == 50.0  # center of the 2x2 block
        assert up[20, 11] == 50.0  # midpoint along a row
        assert up[21, 10] == 50.0  # midpoint along a column

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_preserves_min_max(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 100, (64, 27))
        up = upsample2x(img)
        assert up.min() >= img.min() - 1e-12
        assert up.max() <= img.max() + 1e-12
        assert math.isclose(up.max(), img.max())
        assert math.isclose(up.min(), img.min())

    def test_wrong_shape_rejected(self):
        with pytest.raises(data.DimensionError):
            upsample2x(np.zeros((32, 27)))


def manual_sobel(img):
    """Loop-free reference: explicit 3x3 correlation with edge replication."""
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    padded = np.pad(img, 1, mode="edge")
    gx = np.zeros_like(img, dtype=float)
    gy = np.zeros_like(img, dtype=float)
    for di in range(3):
        for dj in range(3):
            window = padded[di : di + img.shape[0], dj : dj + img.shape[1]]
            gx += kx[di, dj] * window
            gy += kx.T[di, dj] * window
    return np.sqrt(gx * gx + gy * gy)


class TestSobel:
    def test_constant_is_zero(self):
        np.testing.assert_array_equal(sobel_edges(np.full((128, 54), 42.0)), 0.0)

    def test_vertical_step_edge(self):
        img = np.zeros((128, 54))
        img[:, 20:] = 100.0
        e = sobel_edges(img)
        # response confined to the two columns adjacent to the step,
        # with magnitude 400 = 100 * (1 + 2 + 1)
        np.testing.assert_allclose(e[:, 19], 400.0)
        np.testing.assert_allclose(e[:, 20], 400.0)
        mask = np.ones(54, dtype=bool)
        mask[[19, 20]] = False
        np.testing.assert_array_equal(e[:, mask], 0.0)

    def test_matches_manual_convolution(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 100, (128, 54))
        np.testing.assert_allclose(sobel_edges(img), manual_sobel(img), atol=1e-9)

    def test_shape_checked(self):
        with pytest.raises(data.DimensionError):
            sobel_edges(np.zeros((64, 27)))


class TestBedHeight:
    def test_flat_bed_is_zero(self):
        np.testing.assert_array_equal(
            bed_height_channel(0.0, MatGeometry()), 0.0
        )

    def test_hinge_taxel_is_zero(self):
        geom = MatGeometry()
        b = bed_height_channel(60.0, geom)
        # upsampled row at exactly the hinge coordinate
        assert b[2 * geom.bend_row, 0] == 0.0

    def test_known_height_02m(self):
        # pitch chosen so a taxel lands exactly 0.2 m up-mat of the hinge
        geom = MatGeometry(taxel_pitch=0.025, bend_row=38)
        b = bed_height_channel(60.0, geom)
        row = 2 * (38 + 8)  # 8 raw rows * 0.025 m = 0.2 m
        expected = 0.2 * math.sin(math.radians(60.0))
        assert abs(b[row, 13] - expected) < 1e-12
        assert abs(expected - 0.1732) < 1e-4

    def test_monotone_above_hinge_zero_below(self):
        geom = MatGeometry()
        b = bed_height_channel(45.0, geom)
        col = b[:, 7]
        np.testing.assert_array_equal(col[: 2 * geom.bend_row + 1], 0.0)
        assert np.all(np.diff(col[2 * geom.bend_row :]) >= 0)
        assert col[-1] > 0

    def test_angle_validation(self):
        with pytest.raises(ValueError):
            bed_height_channel(-5.0, MatGeometry())
        with pytest.raises(ValueError):
            bed_height_channel(95.0, MatGeometry())


class TestInputStack:
    def test_shape_and_flat_bed_zero_channel(self):
        geom = MatGeometry()
        frame = make_frame(np.random.default_rng(0).uniform(0, 80, (64, 27)))
        stack = build_input_stack(frame.image, geom, NormStats.identity())
        assert stack.channels.shape == (3, 128, 54)
        np.testing.assert_array_equal(stack.channels[2], 0.0)

    def test_fitted_moments_standardize(self):
        rng = np.random.default_rng(1)
        frames = [
            make_frame(rng.uniform(0, 90, (64, 27)), bed_angle=a, frame_id=i)
            for i, a in enumerate([0.0, 60.0, 30.0, 0.0, 60.0, 45.0])
        ]
        geom = MatGeometry()
        norm = fit_normalization(frames, geom)
        stacks = np.stack(
            [
                build_input_stack(f.image, geom, norm).channels.astype(np.float64)
                for f in frames
            ]
        )
        for ch in range(3):
            vals = stacks[:, ch]
            assert abs(vals.mean()) < 1e-6
            assert abs(vals.var() - 1.0) < 1e-6

    def test_missing_norm_is_configuration_error(self):
        with pytest.raises(data.ConfigurationError):
            build_input_stack(make_frame().image, MatGeometry(), None)


class TestAugment:
    def test_identity_when_disabled(self):
        params = AugmentParams(
            flip_prob=0.0, shift_sigma=0.0, scale_sigma=0.0, noise_sigma=0.0
        )
        rng = np.random.default_rng(0)
        taxels = np.random.default_rng(1).integers(0, 100, (64, 27)).astype(float)
        frame = make_frame(taxels, joints=np.random.default_rng(2).uniform(0, 1, (10, 3)))
        out = augment(frame, params, rng)
        np.testing.assert_array_equal(out.image.taxels, frame.image.taxels)
        np.testing.assert_array_equal(out.joints, frame.joints)

    def test_flip_is_involution(self):
        params = AugmentParams(
            flip_prob=1.0, shift_sigma=0.0, scale_sigma=0.0, noise_sigma=0.0
        )
        rng = np.random.default_rng(0)
        taxels = np.random.default_rng(3).integers(0, 100, (64, 27)).astype(float)
        frame = make_frame(taxels, joints=np.random.default_rng(4).uniform(0, 1, (10, 3)))
        once = augment(frame, params, rng)
        twice = augment(once, params, rng)
        np.testing.assert_array_equal(twice.image.taxels, frame.image.taxels)
        np.testing.assert_allclose(twice.joints, frame.joints, atol=1e-12)

    def test_flip_maps_taxel_and_swaps_left_right(self):
        geom = MatGeometry()
        taxels = np.zeros((64, 27))
        taxels[30, 5] = 77.0
        joints = np.tile([0.1, 1.0, 0.05], (10, 1))
        joints[4] = [0.2, 0.9, 0.04]  # left wrist
        frame = make_frame(taxels, joints=joints)
        params = AugmentParams(
            flip_prob=1.0, shift_sigma=0.0, scale_sigma=0.0, noise_sigma=0.0
        )
        out = augment(frame, params, np.random.default_rng(0), geom)
        assert out.image.taxels[30, 21] == 77.0
        assert out.image.taxels[30, 5] == 0.0
        # left wrist label moved to the right-wrist slot, x mirrored
        np.testing.assert_allclose(
            out.joints[5], [geom.width - 0.2, 0.9, 0.04], atol=1e-12
        )

    def test_mirror_commutes_with_label_map(self):
        geom = MatGeometry()
        rng = np.random.default_rng(5)
        joints = rng.uniform(0, 1, (10, 3))
        np.testing.assert_allclose(
            mirror_labels(mirror_labels(joints, geom), geom), joints, atol=1e-12
        )

    def test_noise_clipped_at_saturation_and_zero(self):
        params = AugmentParams(
            flip_prob=0.0, shift_sigma=0.0, scale_sigma=0.0, noise_sigma=5.0
        )
        frame = make_frame(np.full((64, 27), 100.0))
        out = augment(frame, params, np.random.default_rng(0))
        assert out.image.taxels.max() <= 100.0
        # positive draws exist, so saturated taxels must stay pinned at 100
        assert (out.image.taxels == 100.0).sum() > 0
        frame0 = make_frame(np.zeros((64, 27)))
        out0 = augment(frame0, params, np.random.default_rng(0))
        assert out0.image.taxels.min() >= 0.0
        assert (out0.image.taxels == 0.0).sum() > 0

    def test_seated_suppresses_longitudinal_shift_and_scale(self):
        geom = MatGeometry()
        params = AugmentParams(
            flip_prob=0.0, shift_sigma=0.05, scale_sigma=0.5, noise_sigma=0.0,
            seated=True,
        )
        taxels = np.zeros((64, 27))
        taxels[40, 13] = 50.0
        joints = np.tile([0.3, 1.1, 0.1], (10, 1))
        frame = make_frame(taxels, bed_angle=60.0, joints=joints)
        out = augment(frame, params, np.random.default_rng(12), geom)
        # y untouched (no longitudinal shift, no scaling)
        np.testing.assert_array_equal(out.joints[:, 1], joints[:, 1])
        rows = np.nonzero(out.image.taxels)[0]
        assert set(rows) == {40}

    def test_degenerate_shift_falls_back_to_unshifted(self):
        taxels = np.zeros((64, 27))
        taxels[0, 0] = 60.0
        frame = make_frame(taxels)
        params = AugmentParams(
            flip_prob=0.0, shift_sigma=5.0, scale_sigma=0.0, noise_sigma=0.0
        )
        out = augment(frame, params, np.random.default_rng(0))
        assert out.image.taxels.sum() > 0  # never everything off the mat

    def test_param_validation(self):
        with pytest.raises(ValueError):
            AugmentParams(flip_prob=1.5)
        with pytest.raises(ValueError):
            AugmentParams(shift_sigma=-1.0)


class TestDatasetIO:
    def _frames(self, n=5):
        rng = np.random.default_rng(7)
        frames = []
        for i in range(n):
            taxels = rng.integers(0, 101, (64, 27)).astype(float)
            joints = rng.uniform(-1, 2, (10, 3))
            frames.append(
                make_frame(taxels, bed_angle=60.0 if i % 2 else 0.0,
                           frame_id=i, pid=i % 2 + 1, joints=joints)
            )
        return frames

    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.pmpd"
        frames = self._frames()
        write_dataset(frames, path)
        back, geom = read_dataset(path)
        assert len(back) == len(frames)
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.image.taxels, b.image.taxels)
            assert a.image.frame_id == b.image.frame_id
            assert a.image.participant_id == b.image.participant_id
            assert a.image.bed_angle == b.image.bed_angle
            assert np.abs(a.joints - b.joints).max() < 1e-9

    def test_known_taxel_sum_fixture(self, tmp_path):
        taxels = np.zeros((64, 27))
        taxels[5, 5] = 17.0
        taxels[60, 20] = 83.0
        path = tmp_path / "one.pmpd"
        write_dataset([make_frame(taxels)], path)
        back, _ = read_dataset(path)
        assert back[0].image.taxels.sum() == 100.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.pmpd"
        write_dataset(self._frames(1), path)
        text = path.read_text()
        path.write_text(text.replace("PMPD1", "XXPD1", 1))
        with pytest.raises(ParseError):
            read_dataset(path)

    def test_wrong_column_count_names_line(self, tmp_path):
        path = tmp_path / "d.pmpd"
        write_dataset(self._frames(2), path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2] + ",0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 3"):
            read_dataset(path)

    def test_out_of_range_taxel(self, tmp_path):
        path = tmp_path / "d.pmpd"
        write_dataset(self._frames(1), path)
        lines = path.read_text().splitlines()
        parts = lines[1].split(",")
        parts[3] = "101"
        lines[1] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 2"):
            read_dataset(path)

    def test_non_integral_taxels_rejected_on_write(self, tmp_path):
        taxels = np.zeros((64, 27))
        taxels[0, 0] = 1.5
        with pytest.raises(ValueError):
            write_dataset([make_frame(taxels)], tmp_path / "x.pmpd")


class TestTypes:
    def test_pressure_image_validation(self):
        with pytest.raises(data.DimensionError):
            PressureImage(np.zeros((63, 27)))
        with pytest.raises(ValueError):
            PressureImage(np.full((64, 27), 101.0))
        with pytest.raises(ValueError):
            PressureImage(np.zeros((64, 27)), bed_angle=91.0)

    def test_geometry_validation(self):
        with pytest.raises(ValueError):
            MatGeometry(taxel_pitch=0.0)
        with pytest.raises(ValueError):
            MatGeometry(bend_row=64)

    def test_derive_rng_streams_differ(self):
        a = data.derive_rng(1, 2, 3).random(4)
        b = data.derive_rng(1, 2, 4).random(4)
        c = data.derive_rng(1, 2, 3).random(4)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)
