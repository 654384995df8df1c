import itertools
import math
import struct

import numpy as np
import pytest
import torch

import cfa_pose as cp
from oracles import flip_average_oracle, fuse_oracle


def geom(side=24, stride=4, sigma=2.0):
    return cp.HeatmapGeometry(side, side, stride, sigma)


def single_joint(keypoint, g, p=1):
    keypoints = [keypoint] * p
    return cp.encode_heatmaps(keypoints, [True] * p, g)


class TestGeometry:
    def test_for_image(self):
        g = cp.HeatmapGeometry.for_image(96, stride=4, sigma=2.0)
        assert (g.height, g.width) == (24, 24)
        assert g.image_height == g.image_width == 96

    def test_indivisible_image(self):
        with pytest.raises(ValueError, match="divisible"):
            cp.HeatmapGeometry.for_image(50, stride=4)

    @pytest.mark.parametrize("kwargs", [
        dict(height=0, width=4, stride=4, sigma=1.0),
        dict(height=4, width=4, stride=0, sigma=1.0),
        dict(height=4, width=4, stride=4, sigma=0.0),
    ])
    def test_invalid_fields(self, kwargs):
        with pytest.raises(ValueError):
            cp.HeatmapGeometry(**kwargs)


class TestEncode:
    def test_peak_and_neighbor_values(self):
        g = geom(sigma=1.0)
        maps = single_joint((22.0, 22.0), g)  # cell (5, 5)
        assert maps[0, 5, 5].item() == 1.0
        assert maps[0, 5, 6].item() == pytest.approx(math.exp(-0.5), rel=1e-6)
        assert maps[0, 6, 5].item() == pytest.approx(math.exp(-0.5), rel=1e-6)
        assert maps[0, 6, 6].item() == pytest.approx(math.exp(-1.0), rel=1e-6)

    def test_all_invisible_gives_zero_maps(self):
        g = geom()
        maps = cp.encode_heatmaps([(10.0, 10.0)] * 16, [False] * 16, g)
        assert torch.equal(maps, torch.zeros(16, 24, 24))

    def test_two_joints_peak_in_own_cells(self):
        g = geom()
        maps = cp.encode_heatmaps([(10.0, 50.0), (70.0, 30.0)], [True, True], g)
        for j, (x, y) in enumerate([(10.0, 50.0), (70.0, 30.0)]):
            flat = maps[j].argmax().item()
            v, u = divmod(flat, g.width)
            assert (u, v) == (int(x // 4), int(y // 4))

    def test_visible_out_of_bounds_rejected(self):
        g = geom()
        with pytest.raises(ValueError, match="outside image bounds"):
            cp.encode_heatmaps([(96.0, 4.0)], [True], g)
        cp.encode_heatmaps([(96.0, 4.0)], [False], g)  # invisible: allowed

    def test_tail_clamped_to_zero(self):
        g = geom(sigma=1.0)
        maps = single_joint((2.0, 2.0), g)
        assert maps[0, 23, 23].item() == 0.0
        assert (maps[0] >= 0).all()

    def test_peak_always_one_at_keypoint_cell(self, rng):
        g = geom()
        for _ in range(50):
            x, y = rng.uniform(0, 96, size=2)
            maps = single_joint((x, y), g)
            v, u = divmod(maps[0].argmax().item(), g.width)
            assert maps[0, v, u].item() == 1.0
            assert (u, v) == (int(x // 4), int(y // 4))


class TestDecode:
    def test_single_peak_cell_center(self):
        g = geom()
        maps = torch.zeros(1, 24, 24)
        maps[0, 3, 7] = 1.0  # row 3 (y), column 7 (x)
        keypoints, scores = cp.decode_heatmaps(maps, g)
        assert keypoints[0].tolist() == [30.0, 14.0]
        assert scores[0] == 1.0

    def test_uniform_channel_breaks_ties_to_origin_cell(self):
        g = geom()
        keypoints, scores = cp.decode_heatmaps(torch.full((1, 24, 24), 0.25), g)
        assert keypoints[0].tolist() == [2.0, 2.0]
        assert scores[0] == 0.25

    def test_tie_break_row_then_column(self):
        g = geom()
        maps = torch.zeros(1, 24, 24)
        maps[0, 5, 9] = 1.0
        maps[0, 5, 3] = 1.0
        maps[0, 8, 1] = 1.0
        keypoints, _ = cp.decode_heatmaps(maps, g)
        assert keypoints[0].tolist() == [(3 + 0.5) * 4, (5 + 0.5) * 4]

    def test_roundtrip_exhaustive_sweep(self):
        g = cp.HeatmapGeometry.for_image(32, stride=4, sigma=2.0)
        for x, y in itertools.product(range(32), range(32)):
            for dx, dy in ((0.0, 0.0), (0.5, 0.25)):
                kx, ky = min(x + dx, 31.99), min(y + dy, 31.99)
                maps = cp.encode_heatmaps([(kx, ky)], [True], g)
                decoded, _ = cp.decode_heatmaps(maps, g)
                err = max(abs(decoded[0, 0] - kx), abs(decoded[0, 1] - ky))
                assert err <= g.stride


class TestFuse:
    def test_single_nonnegative_map_is_identity(self, rng):
        maps = torch.tensor(rng.uniform(0, 2, size=(4, 6, 6)))
        fused = cp.fuse_heatmaps([maps])
        assert torch.allclose(fused, maps, rtol=1e-12, atol=1e-12)

    def test_two_constant_halves(self):
        maps = torch.full((2, 5, 5), 0.5, dtype=torch.float64)
        fused = cp.fuse_heatmaps([maps, maps])
        expected = math.sqrt(0.5) / 2
        assert torch.allclose(fused, torch.full_like(maps, expected), rtol=1e-12, atol=0)

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    @pytest.mark.parametrize("mode", ["eq5", "mean"])
    def test_matches_scalar_loop_oracle(self, rng, n, mode):
        window = [torch.tensor(rng.uniform(0, 1.5, size=(3, 5, 4))) for _ in range(n)]
        fused = cp.fuse_heatmaps(window, mode)
        expected = fuse_oracle(window, mode)
        assert np.allclose(fused.numpy(), expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("mode", ["eq5", "mean"])
    def test_homogeneity_exact_for_binary_scales(self, rng, mode):
        window = [torch.tensor(rng.uniform(0, 1, size=(2, 4, 4))) for _ in range(3)]
        for c in (0.5, 2.0, 4.0):
            scaled = cp.fuse_heatmaps([c * m for m in window], mode)
            assert torch.equal(scaled, c * cp.fuse_heatmaps(window, mode))

    @pytest.mark.parametrize("mode", ["eq5", "mean"])
    def test_homogeneity_close_for_any_scale(self, rng, mode):
        window = [torch.tensor(rng.uniform(0, 1, size=(2, 4, 4))) for _ in range(3)]
        for c in (0.3, 1.7, 9.9):
            scaled = cp.fuse_heatmaps([c * m for m in window], mode)
            assert torch.allclose(scaled, c * cp.fuse_heatmaps(window, mode), rtol=1e-12, atol=0)

    @pytest.mark.parametrize("mode", ["eq5", "mean"])
    def test_permutation_invariance_exact(self, rng, mode):
        window = [torch.tensor(rng.uniform(0, 1, size=(2, 3, 3))) for _ in range(3)]
        reference = cp.fuse_heatmaps(window, mode)
        for perm in itertools.permutations(range(3)):
            assert torch.equal(cp.fuse_heatmaps([window[i] for i in perm], mode), reference)

    def test_identical_window_closed_form(self, rng):
        maps = torch.tensor(rng.uniform(0, 1, size=(4, 6, 6)))
        for n in (1, 2, 3, 5):
            fused = cp.fuse_heatmaps([maps] * n)
            assert torch.allclose(fused, maps / math.sqrt(n), rtol=1e-12, atol=1e-15)

    def test_fused_argmax_matches_common_argmax(self, rng, skel):
        g = geom()
        maps = cp.encode_heatmaps([(18.0, 66.0)] * 3, [True] * 3, g).double()
        fused = cp.fuse_heatmaps([maps] * 3)
        assert torch.equal(fused.flatten(1).argmax(1), maps.flatten(1).argmax(1))

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            cp.fuse_heatmaps([])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            cp.fuse_heatmaps([torch.zeros(2, 4, 4), torch.zeros(2, 4, 5)])

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="fusion mode"):
            cp.fuse_heatmaps([torch.zeros(1, 2, 2)], mode="median")

    def test_differentiable(self):
        maps = [torch.rand(2, 4, 4, requires_grad=True) for _ in range(3)]
        cp.fuse_heatmaps(maps).sum().backward()
        assert all(m.grad is not None and torch.isfinite(m.grad).all() for m in maps)


class TestFlipAverage:
    def test_symmetric_input_identity_permutation(self):
        plain = cp.SkeletonSpec(("a", "b"), (), (), ())
        maps = torch.zeros(2, 4, 6, dtype=torch.float64)
        maps[:, :, 1] = 0.7
        maps[:, :, 4] = 0.7  # symmetric about the vertical axis
        out = cp.flip_average(maps, maps, plain)
        assert torch.equal(out, maps)

    def test_linearity(self, skel, rng):
        maps = torch.tensor(rng.uniform(0, 1, size=(16, 8, 8)))
        out = cp.flip_average(2 * maps, torch.zeros_like(maps), skel)
        assert torch.allclose(out, maps, rtol=0, atol=0)

    def test_matches_loop_oracle(self, skel, rng):
        original = torch.tensor(rng.uniform(0, 1, size=(16, 6, 5)))
        flipped = torch.tensor(rng.uniform(0, 1, size=(16, 6, 5)))
        out = cp.flip_average(original, flipped, skel)
        expected = flip_average_oracle(original, flipped, skel.flip_permutation())
        assert np.allclose(out.numpy(), expected, rtol=1e-12, atol=1e-12)

    def test_equivariant_pair_restores_argmax(self, skel, rng):
        g = geom()
        perm = skel.flip_permutation()
        keypoints = rng.uniform(8, 88, size=(16, 2))
        maps = cp.encode_heatmaps(keypoints, [True] * 16, g).double()
        # what a perfectly mirror-equivariant model would emit for the flipped image
        mirrored = torch.flip(maps[perm], dims=[-1])
        out = cp.flip_average(maps, mirrored, skel)
        assert torch.allclose(out, maps, rtol=0, atol=1e-15)
        assert torch.equal(out.flatten(1).argmax(1), maps.flatten(1).argmax(1))

    def test_shape_mismatch_rejected(self, skel):
        with pytest.raises(ValueError, match="shape"):
            cp.flip_average(torch.zeros(16, 4, 4), torch.zeros(16, 4, 5), skel)

    def test_batched_inputs(self, skel, rng):
        original = torch.tensor(rng.uniform(0, 1, size=(2, 16, 6, 5)))
        flipped = torch.tensor(rng.uniform(0, 1, size=(2, 16, 6, 5)))
        out = cp.flip_average(original, flipped, skel)
        for b in range(2):
            expected = flip_average_oracle(original[b], flipped[b], skel.flip_permutation())
            assert np.allclose(out[b].numpy(), expected, rtol=1e-12, atol=1e-12)


class TestDump:
    def test_round_trip_and_header(self, tmp_path, rng):
        g = geom()
        maps = rng.uniform(0, 1, size=(16, 24, 24)).astype(np.float32)
        path = tmp_path / "maps.bin"
        cp.save_heatmap_dump(maps, g, path)
        raw = path.read_bytes()
        assert struct.unpack_from("<4i", raw) == (16, 24, 24, 4)
        assert len(raw) == 16 + 16 * 24 * 24 * 4
        loaded, stride = cp.load_heatmap_dump(path)
        assert stride == 4
        assert np.array_equal(loaded, maps)
