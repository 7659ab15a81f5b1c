import math
import warnings

import numpy as np
import pytest

from oracles import warp_loop
from patchreg import (
    InvalidParam,
    Raster,
    RoleMismatch,
    SizeMismatch,
    TransformParams,
    build_affine,
    center_crop,
    channel_mean,
    decompose_params,
    invert,
    load_raster,
    normalize,
    read_pgm,
    save_raster,
    warp_by_affine,
    warp_parametric,
    write_pgm,
)


def smooth_field(side, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(side, side))
    k = np.ones(7) / 7
    for _ in range(3):
        f = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, f)
        f = np.apply_along_axis(lambda c: np.convolve(c, k, mode="same"), 0, f)
    return f


class TestNormalize:
    def test_full_range_ramp(self):
        ramp = np.tile(np.linspace(0, 255, 256), (4, 1))
        out = normalize(Raster(ramp), 0.0, 100.0)
        np.testing.assert_allclose(out.data, np.tile(np.linspace(-1, 1, 256), (4, 1)), atol=1e-12)
        assert out.value_range == (-1.0, 1.0)

    def test_constant_image_flagged(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            out = normalize(Raster(np.full((8, 8), 7.0)))
        assert out.degenerate
        assert (out.data == 0).all()
        assert any("constant" in str(w.message) for w in rec)

    def test_random_outputs_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = Raster(rng.normal(0, rng.uniform(0.5, 50), (16, 16)))
            out = normalize(r)
            assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_percentile_clipping(self):
        data = np.zeros((10, 10))
        data[0, 0] = 1000.0  # outlier beyond the upper percentile
        data[1:, :] = np.linspace(0, 10, 90).reshape(9, 10)
        out = normalize(Raster(data), 0.5, 99.5)
        assert out.data.max() == 1.0


class TestWarp:
    def test_identity_bit_exact(self):
        rng = np.random.default_rng(1)
        r = Raster(rng.normal(size=(16, 16)))
        out = warp_parametric(r, TransformParams(side=16), interp="nearest")
        np.testing.assert_array_equal(out.data, r.data)

    def test_quarter_turn_2x2(self):
        # positive angle = clockwise on screen: top-left content moves to
        # the top-right corner
        r = Raster(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = warp_parametric(r, TransformParams(theta=math.radians(90), side=2), interp="nearest")
        np.testing.assert_array_equal(out.data, [[3.0, 1.0], [4.0, 2.0]])

    def test_translation_shift(self):
        # third column (-0.5, -0.25) at L=8 shifts content right 2, down 1
        m = build_affine(TransformParams(dx=2, dy=1, side=8))
        data = np.zeros((8, 8))
        data[3, 4] = 1.0
        out = warp_by_affine(Raster(data), m, interp="nearest")
        assert out.data[4, 6] == 1.0
        assert out.data.sum() == 1.0

    @pytest.mark.parametrize("interp", ["nearest", "bilinear"])
    def test_against_loop_oracle(self, interp):
        side = 64
        board = np.indices((side, side)).sum(axis=0) % 2 * 1.0
        p = TransformParams(theta=math.radians(45), side=side)
        got = warp_parametric(Raster(board), p, interp=interp, fill=0.25)
        want = warp_loop(board, build_affine(p).m, interp=interp, fill=0.25)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_random_oracle_with_scale_and_shift(self):
        rng = np.random.default_rng(2)
        side = 17
        img = rng.normal(size=(side, side))
        for _ in range(10):
            p = TransformParams(
                theta=rng.uniform(-np.pi, np.pi),
                scale=float(rng.choice([0.5, 1.0, 2.0])),
                dx=rng.uniform(-3, 3),
                dy=rng.uniform(-3, 3),
                side=side,
            )
            for interp in ("nearest", "bilinear"):
                got = warp_parametric(Raster(img), p, interp=interp, fill=-1.0)
                want = warp_loop(img, build_affine(p).m, interp=interp, fill=-1.0)
                np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_parametric_equals_matrix_route(self):
        rng = np.random.default_rng(3)
        img = Raster(smooth_field(32, seed=5))
        for _ in range(200):
            p = TransformParams(
                theta=rng.uniform(-np.pi, np.pi),
                dx=rng.uniform(-8, 8),
                dy=rng.uniform(-8, 8),
                side=32,
            )
            m = build_affine(p)
            a = warp_parametric(img, p, interp="bilinear")
            b = warp_by_affine(img, m, interp="bilinear")
            np.testing.assert_allclose(a.data, b.data, atol=1e-6)
            c = warp_parametric(img, decompose_params(m), interp="bilinear")
            np.testing.assert_allclose(b.data, c.data, atol=1e-6)

    def test_right_angle_rotations_are_permutations(self):
        rng = np.random.default_rng(4)
        img = Raster(rng.normal(size=(12, 12)))
        for quarter in (1, 2, 3):
            out = warp_parametric(
                img, TransformParams(theta=quarter * math.pi / 2, side=12), interp="nearest"
            )
            assert sorted(out.data.ravel()) == sorted(img.data.ravel())

    def test_round_trip_interior(self):
        # warp by p then by its inverse; away from the border the bilinear
        # round trip must stay within 2e-2 on a smooth field
        side = 64
        img = Raster(smooth_field(side, seed=7))
        rng = np.random.default_rng(5)
        for _ in range(10):
            theta = rng.uniform(-math.pi / 4, math.pi / 4)
            dx, dy = rng.uniform(-4, 4, 2)
            p = TransformParams(theta=theta, dx=dx, dy=dy, side=side)
            m = build_affine(p)
            fwd = warp_by_affine(img, m, interp="bilinear")
            back = warp_by_affine(fwd, invert(m), interp="bilinear")
            # sufficient interior: the inf-norm ball that survives both maps
            c = (side - 1) / 2
            grow = abs(math.cos(theta)) + abs(math.sin(theta))
            safe = c / grow - max(abs(dx), abs(dy)) - 2
            rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
            interior = (np.abs(rows - c) <= safe) & (np.abs(cols - c) <= safe)
            err = np.abs(back.data - img.data)[interior]
            assert err.max() < 2e-2

    def test_role_and_size_checks(self):
        img = Raster(np.zeros((8, 8)))
        from patchreg import build_coord

        with pytest.raises(RoleMismatch):
            warp_by_affine(img, build_coord(TransformParams(side=8)))
        with pytest.raises(SizeMismatch):
            warp_parametric(img, TransformParams(side=16))
        with pytest.raises(InvalidParam):
            warp_by_affine(img, build_affine(TransformParams(side=8)), interp="cubic")


class TestCrop:
    def test_offset_512_to_256(self):
        data = np.zeros((512, 512))
        data[128, 128] = 1.0
        out = center_crop(Raster(data), 256)
        assert out.data[0, 0] == 1.0
        assert out.side == 256

    def test_same_size_identity(self):
        r = Raster(np.arange(16.0).reshape(4, 4))
        np.testing.assert_array_equal(center_crop(r, 4).data, r.data)

    def test_5_to_3(self):
        r = Raster(np.arange(25.0).reshape(5, 5))
        np.testing.assert_array_equal(center_crop(r, 3).data, r.data[1:4, 1:4])

    def test_too_large(self):
        with pytest.raises(SizeMismatch):
            center_crop(Raster(np.zeros((4, 4))), 5)


class TestIO:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        r = Raster(rng.uniform(-1, 1, (9, 7)), value_range=(-1.0, 1.0))
        path = tmp_path / "x.pgm"
        write_pgm(r, path)
        back = read_pgm(path)
        assert back.data.shape == (9, 7)
        assert back.value_range == (0.0, 65535.0)
        rescaled = back.data / 65535.0 * 2.0 - 1.0
        np.testing.assert_allclose(rescaled, r.data, atol=1.0 / 65535.0)

    def test_ppm_channel_mean(self, tmp_path):
        arr = np.zeros((2, 2, 3), dtype=np.uint8)
        arr[..., 0] = 30
        arr[..., 1] = 60
        arr[..., 2] = 90
        path = tmp_path / "x.ppm"
        with open(path, "wb") as f:
            f.write(b"P6\n2 2\n255\n")
            f.write(arr.tobytes())
        r = read_pgm(path, collapse_color=True)
        np.testing.assert_allclose(r.data, 60.0)
        with pytest.raises(InvalidParam):
            read_pgm(path)

    def test_raw_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        r = Raster(rng.normal(size=(5, 11)).astype(np.float32), value_range=(-1.0, 1.0))
        save_raster(r, tmp_path / "r")
        back = load_raster(tmp_path / "r")
        np.testing.assert_array_equal(back.data, r.data)
        assert back.value_range == (-1.0, 1.0)

    def test_channel_mean_passthrough(self):
        mono = np.ones((3, 3))
        np.testing.assert_array_equal(channel_mean(mono), mono)
