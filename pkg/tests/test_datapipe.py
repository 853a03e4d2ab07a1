import numpy as np
import pytest

from deepz import datapipe as dp
from deepz.errors import DegenerateInputError, DimensionError
from deepz.optics import GridSpec, PsfModel, SampleField, render_stack
from deepz.stack import ImageStack


def brute_force_triangular(image):
    """Independent re-derivation: max perpendicular distance to the chord."""
    values = np.asarray(image, dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=256, range=(values.min(), values.max()))
    peak = int(counts.argmax())
    nonempty = np.nonzero(counts)[0]
    tail = int(nonempty[-1] if nonempty[-1] - peak >= peak - nonempty[0] else nonempty[0])
    x1, y1, x2, y2 = peak, counts[peak], tail, counts[tail]
    norm = np.hypot(y2 - y1, x2 - x1)
    best, best_d = None, -1.0
    lo, hi = sorted((peak, tail))
    for i in range(lo, hi + 1):
        d = abs((y2 - y1) * i - (x2 - x1) * counts[i] + x2 * y1 - y2 * x1) / norm
        if d > best_d:
            best_d, best = d, i
    return 0.5 * (edges[best] + edges[best + 1])


def bead_stack(seed=5, n=6, grid=GridSpec(128, 128, 0.325)):
    gen = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        rows.append([gen.uniform(8, 33), gen.uniform(8, 33), gen.uniform(-1, 1), gen.uniform(0.8, 1.2), 0.05])
    sample = SampleField(np.array(rows), extent_um=grid.extent_um, seed=seed)
    return render_stack(sample, PsfModel(), (-4.0, 4.0), 0.5, grid), sample


class TestEdf:
    def test_single_plane_unchanged(self):
        plane = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        assert np.array_equal(dp.edf_reference(ImageStack(plane[None])), plane)

    def test_dominant_plane_wins(self):
        a = np.full((4, 4), 2.0, dtype=np.float32)
        b = np.ones((4, 4), dtype=np.float32)
        assert np.array_equal(dp.edf_reference(ImageStack(np.stack([a, b]))), a)

    def test_edf_peak_at_least_plane_peak(self):
        stack, sample = bead_stack()
        edf = dp.edf_reference(stack)
        for x, y, *_ in sample.emitters:
            r = int(y / 0.325)
            c = int(x / 0.325)
            window = (slice(max(r - 2, 0), r + 3), slice(max(c - 2, 0), c + 3))
            assert edf[window].max() >= stack.planes[:, window[0], window[1]].max(axis=(1, 2)).max() - 1e-6


class TestTriangularThreshold:
    def test_bimodal_between_modes(self):
        gen = np.random.default_rng(1)
        img = np.where(gen.random((64, 64)) < 0.9, 0.1, 0.9)
        thr = dp.triangular_threshold(img)
        assert 0.1 < thr < 0.9

    def test_shift_invariance_up_to_bin(self):
        gen = np.random.default_rng(2)
        img = gen.gamma(2.0, 1.0, size=(64, 64))
        thr = dp.triangular_threshold(img)
        shifted = dp.triangular_threshold(img + 5.0)
        bin_width = (img.max() - img.min()) / 256
        assert abs(shifted - thr - 5.0) <= bin_width + 1e-9

    def test_matches_brute_force(self):
        gen = np.random.default_rng(3)
        for _ in range(10):
            img = gen.gamma(1.5, 1.0, size=(48, 48)) + np.where(gen.random((48, 48)) < 0.05, 5.0, 0.0)
            assert dp.triangular_threshold(img) == pytest.approx(brute_force_triangular(img))

    def test_constant_image_rejected(self):
        with pytest.raises(DegenerateInputError, match="degenerate"):
            dp.triangular_threshold(np.ones((8, 8)))

    def test_bead_centers_in_foreground(self):
        stack, sample = bead_stack()
        edf = dp.edf_reference(stack)
        thr = dp.triangular_threshold(edf)
        for x, y, *_ in sample.emitters:
            assert edf[int(round(y / 0.325)), int(round(x / 0.325))] >= thr


class TestNormalize:
    def test_one_percent_above_one(self):
        stack, _ = bead_stack()
        reference = dp.edf_reference(stack)
        normalized, record = dp.normalize_stack(stack, reference)
        thr = dp.triangular_threshold(reference)
        fg = reference >= thr
        ref_norm = record.apply(reference)
        above = int((ref_norm[fg] > 1.0).sum())
        assert abs(above - 0.01 * fg.sum()) <= 1.0 + 1e-9

    def test_record_roundtrip_bit_exact(self):
        stack, _ = bead_stack()
        reference = dp.edf_reference(stack)
        normalized, record = dp.normalize_stack(stack, reference)
        assert np.array_equal(record.apply(stack.planes), normalized.planes)
        restored = record.invert(normalized.planes)
        assert np.allclose(restored, stack.planes, atol=1e-5)

    def test_constant_reference_rejected(self):
        stack = ImageStack(np.ones((3, 16, 16), dtype=np.float32))
        with pytest.raises(DegenerateInputError):
            dp.normalize_stack(stack, stack.planes[0])

    def test_shape_mismatch_rejected(self):
        stack, _ = bead_stack()
        with pytest.raises(DimensionError):
            dp.normalize_stack(stack, np.zeros((4, 4)))


class TestCropCover:
    def test_single_blob_single_tile(self):
        mask = np.zeros((512, 512), dtype=bool)
        mask[100:110, 200:210] = True
        tiles = dp.crop_cover(mask, tile=256)
        assert len(tiles) == 1
        r, c = tiles[0]
        assert r <= 100 and 110 <= r + 256
        assert c <= 200 and 210 <= c + 256

    def test_two_distant_blobs_two_tiles(self):
        mask = np.zeros((900, 900), dtype=bool)
        mask[100:108, 100:108] = True
        mask[700:708, 700:708] = True
        tiles = dp.crop_cover(mask, tile=256)
        assert len(tiles) == 2

    def test_full_coverage_random_mask(self):
        gen = np.random.default_rng(4)
        mask = gen.random((500, 380)) < 0.001
        tiles = dp.crop_cover(mask, tile=128)
        covered = np.zeros_like(mask)
        for r, c in tiles:
            covered[r : r + 128, c : c + 128] = True
        assert np.all(covered[mask])

    def test_empty_mask(self):
        assert dp.crop_cover(np.zeros((300, 300), dtype=bool), tile=256) == []

    def test_tile_larger_than_image_rejected(self):
        with pytest.raises(DimensionError):
            dp.crop_cover(np.ones((100, 100), dtype=bool), tile=256)

    def test_tie_break_top_left(self):
        mask = np.zeros((300, 300), dtype=bool)
        mask[10, 10] = True
        mask[10, 40] = True
        tiles = dp.crop_cover(mask, tile=256)
        assert tiles == [(0, 0)]


class TestBuildPairs:
    def make_stack(self, nz=13):
        gen = np.random.default_rng(6)
        planes = gen.random((nz, 32, 32)).astype(np.float32)
        return ImageStack(planes, step_um=0.5)

    def test_pair_count(self):
        stack = self.make_stack()
        pairs = dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=3, range_planes=6, seed=0)
        assert len(pairs) == 13 * 3

    def test_distances_in_range(self):
        stack = self.make_stack(nz=21)
        pairs = dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=5, range_planes=10, seed=0)
        for p in pairs:
            assert abs(p.distance_um) <= 10 * 0.5 * 2  # window spans +/- range_planes * step
            assert p.distance_um == pytest.approx(p.dpm[0, 0] * 10.0, abs=1e-6)
            assert np.all(p.dpm == p.dpm[0, 0])

    def test_zero_distance_pair_is_identity(self):
        stack = self.make_stack()
        pairs = dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=13, range_planes=6, seed=0)
        identity = [p for p in pairs if p.distance_um == 0.0]
        assert identity
        for p in identity:
            assert np.all(p.dpm == 0)
            assert np.array_equal(p.input_plane, p.target_plane)

    def test_shallow_stack_rejected(self):
        stack = self.make_stack(nz=9)
        with pytest.raises(DimensionError, match="Nz >= 13"):
            dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=3, range_planes=6)

    def test_deterministic(self):
        stack = self.make_stack()
        a = dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=3, range_planes=6, seed=9)
        b = dp.build_pairs(stack, [(0, 0)], tile=32, targets_per_input=3, range_planes=6, seed=9)
        assert all(x.distance_um == y.distance_um for x, y in zip(a, b))


class TestAugment:
    def make_pair(self):
        gen = np.random.default_rng(7)
        return dp.TrainingPair(
            input_plane=gen.random((16, 16)).astype(np.float32),
            dpm=np.full((16, 16), 0.2, dtype=np.float32),
            target_plane=gen.random((16, 16)).astype(np.float32),
            distance_um=2.0,
            region_id=0,
        )

    def test_identity_op(self):
        pair = self.make_pair()
        out = dp.augment(pair, 0)
        assert np.array_equal(out.input_plane, pair.input_plane)
        assert np.array_equal(out.target_plane, pair.target_plane)

    def test_rot90_four_times_is_identity(self):
        pair = self.make_pair()
        out = pair
        for _ in range(4):
            out = dp.augment(out, 1)
        assert np.array_equal(out.input_plane, pair.input_plane)

    def test_flip_preserves_histogram(self):
        pair = self.make_pair()
        for op in range(8):
            out = dp.augment(pair, op)
            assert np.array_equal(np.sort(out.input_plane.ravel()), np.sort(pair.input_plane.ravel()))
            assert out.distance_um == pair.distance_um

    def test_same_transform_on_all_components(self):
        pair = self.make_pair()
        pair.dpm = np.arange(256, dtype=np.float32).reshape(16, 16)
        out = dp.augment(pair, 5)
        assert np.array_equal(out.dpm, np.fliplr(np.rot90(pair.dpm)))

    def test_invalid_op_rejected(self):
        with pytest.raises(ValueError):
            dp.augment(self.make_pair(), 8)


class TestDataset:
    def test_build_save_load_roundtrip(self, tmp_path):
        stack, _ = bead_stack()
        ds = dp.build_dataset(stack, tile=64, targets_per_input=2, range_planes=4, seed=1)
        assert len(ds) > 0
        ds.save(tmp_path / "d")
        loaded = dp.Dataset.load(tmp_path / "d")
        assert np.array_equal(loaded.inputs, ds.inputs)
        assert np.array_equal(loaded.distance_um, ds.distance_um)
        assert loaded.normalization.scale == pytest.approx(ds.normalization.scale)

    def test_split_by_region_disjoint(self):
        stack, _ = bead_stack()
        ds = dp.build_dataset(stack, tile=64, targets_per_input=2, range_planes=4, seed=1)
        train_idx, val_idx = ds.split_by_region(val_frac=0.25, seed=0)
        assert len(set(train_idx) & set(val_idx)) == 0
        assert len(train_idx) + len(val_idx) == len(ds)
        train_regions = set(ds.region_id[train_idx].tolist())
        val_regions = set(ds.region_id[val_idx].tolist())
        assert not (train_regions & val_regions)

    def test_build_deterministic(self):
        stack, _ = bead_stack()
        a = dp.build_dataset(stack, tile=64, targets_per_input=2, range_planes=4, seed=2)
        b = dp.build_dataset(stack, tile=64, targets_per_input=2, range_planes=4, seed=2)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)

    def test_pair_view_dpm_normalized(self):
        stack, _ = bead_stack()
        ds = dp.build_dataset(stack, tile=64, targets_per_input=2, range_planes=4, seed=1)
        p = ds.pair(0)
        assert np.all(np.abs(p.dpm) <= 1.0)
        assert p.dpm[0, 0] == pytest.approx(p.distance_um / 10.0)
