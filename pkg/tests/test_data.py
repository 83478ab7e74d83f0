"""Dataset tests: generator determinism and balance, centroid behaviour
under position traversal, IDX robustness, labeled-subset budgets, and the
synthetic sanity task distribution."""

import numpy as np
import pytest
from scipy import stats

from partedvae.data import (
    ArrayDataset,
    FactorSpec,
    IdxFormatError,
    ImageBatch,
    generate_dsprites_lite,
    load_mnist_split,
    load_pvp1,
    make_sanity_task,
    read_idx,
    save_pvp1,
    select_labeled_subset,
    write_idx,
)
from partedvae.tensor import make_rng


@pytest.fixture(scope="module")
def small_sprites():
    # 3 * 2 * 4 * 8 * 8 = 1536 items; renders in well under a second
    return generate_dsprites_lite(subsample=(1, 3, 10, 4, 4))


class TestSpriteGenerator:
    def test_full_grid_has_paper_cardinality(self):
        assert len(generate_dsprites_lite()) == 737_280
        assert FactorSpec().grid_size() == 3 * 6 * 40 * 32 * 32

    def test_same_tuple_renders_bitwise_identical(self, small_sprites):
        a = small_sprites.image_batch(np.array([7, 123]))
        b = small_sprites.image_batch(np.array([7, 123]))
        assert np.array_equal(a, b)

    def test_every_factor_level_equally_frequent(self, small_sprites):
        factors = small_sprites.factors_array
        n = len(small_sprites)
        for col, size in enumerate(small_sprites.factor_sizes):
            counts = np.bincount(factors[:, col], minlength=size)
            assert np.all(counts == n // size)

    def test_posx_traversal_moves_centroid_right(self):
        ds = generate_dsprites_lite(subsample=(1, 1, 4, 2, 2))
        nx = ds.factor_sizes[3]
        levels = np.zeros((nx, 5), dtype=np.int64)
        levels[:, 0] = 0  # square
        levels[:, 1] = 3
        levels[:, 3] = np.arange(nx)
        levels[:, 4] = ds.factor_sizes[4] // 2
        images = ds.image_batch(ds.index_of(levels))
        cols = np.arange(ds.resolution)
        centroids = [(im[0].sum(axis=0) * cols).sum() / im[0].sum() for im in images]
        diffs = np.diff(centroids)
        assert np.all(diffs >= 0)  # never moves left
        assert centroids[-1] - centroids[0] > 10  # and sweeps most of the frame

    def test_shapes_are_distinct(self, small_sprites):
        levels = np.array([[s, 1, 0, 2, 2] for s in range(3)])
        imgs = small_sprites.image_batch(small_sprites.index_of(levels))
        assert not np.array_equal(imgs[0], imgs[1])
        assert not np.array_equal(imgs[1], imgs[2])

    def test_images_are_binary(self, small_sprites):
        imgs = small_sprites.image_batch(np.arange(64))
        assert set(np.unique(imgs)) <= {0.0, 1.0}

    def test_resolution_floor(self):
        with pytest.raises(ValueError, match="resolution"):
            generate_dsprites_lite(resolution=8)

    def test_materialize_matches_lazy_rendering(self, small_sprites):
        idx = np.array([0, 100, 999])
        lazy = small_sprites.image_batch(idx)
        small_sprites.materialize()
        np.testing.assert_array_equal(lazy, small_sprites.image_batch(idx))


class TestIdx:
    def test_label_example(self, tmp_path):
        p = tmp_path / "l.idx"
        p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 2]))
        np.testing.assert_array_equal(read_idx(p), [7, 2])

    def test_unsupported_magic(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(bytes([0, 0, 1, 2]) + bytes(8))
        with pytest.raises(IdxFormatError, match="0x00000102"):
            read_idx(p)

    def test_round_trip_is_bytewise(self, tmp_path):
        rng = make_rng(0)
        images = rng.integers(0, 256, size=(5, 7, 9), dtype=np.uint8)
        labels = rng.integers(0, 10, size=11, dtype=np.uint8)
        for name, arr in [("im.idx", images), ("lb.idx", labels)]:
            p = tmp_path / name
            write_idx(p, arr)
            original = p.read_bytes()
            write_idx(p, read_idx(p))
            assert p.read_bytes() == original

    def test_rejects_64_single_byte_magic_corruptions(self, tmp_path):
        p = tmp_path / "ok.idx"
        write_idx(p, np.arange(24, dtype=np.uint8).reshape(2, 3, 4))
        good = bytearray(p.read_bytes())
        rejected = 0
        for pos in range(4):
            for delta in range(1, 17):
                corrupted = bytearray(good)
                corrupted[pos] = (good[pos] + delta) % 256
                q = tmp_path / "bad.idx"
                q.write_bytes(bytes(corrupted))
                with pytest.raises(IdxFormatError):
                    read_idx(q)
                rejected += 1
        assert rejected == 64

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.idx"
        write_idx(p, np.zeros((2, 3, 4), dtype=np.uint8))
        data = p.read_bytes()
        p.write_bytes(data[:-5])
        with pytest.raises(IdxFormatError, match="byte offset 16"):
            read_idx(p)

    def test_dimension_overflow(self, tmp_path):
        import struct

        p = tmp_path / "o.idx"
        p.write_bytes(struct.pack(">IIII", 0x00000803, 2**31 - 1, 2**31 - 1, 4) + bytes(8))
        with pytest.raises(IdxFormatError, match="overflow"):
            read_idx(p)

    def test_mnist_loader_pads_and_scales(self, tmp_path):
        rng = make_rng(1)
        images = rng.integers(0, 256, size=(6, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=6, dtype=np.uint8)
        write_idx(tmp_path / "im.idx", images)
        write_idx(tmp_path / "lb.idx", labels)
        ds = load_mnist_split(tmp_path / "im.idx", tmp_path / "lb.idx")
        assert ds.images.shape == (6, 1, 32, 32)
        batch = ds.image_batch(np.arange(6))
        assert batch.min() >= 0.0 and batch.max() <= 1.0
        np.testing.assert_allclose(batch[:, 0, 2:30, 2:30], images / 255.0, atol=1e-7)
        assert np.all(batch[:, 0, :2, :] == 0)


class TestPvp1Cache:
    def test_round_trip(self, tmp_path):
        ds = generate_dsprites_lite(subsample=(1, 3, 20, 8, 8))
        images = ds.materialize()
        p = tmp_path / "cache.pvp1"
        save_pvp1(p, images, ds.factor_sizes, ds.factors_array)
        got_images, got_sizes, got_factors = load_pvp1(p)
        np.testing.assert_array_equal(got_images, images)
        assert tuple(got_sizes) == tuple(ds.factor_sizes)
        np.testing.assert_array_equal(got_factors, ds.factors_array)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "x.pvp1"
        p.write_bytes(bytes(40))
        with pytest.raises(ValueError, match="PVP1"):
            load_pvp1(p)


class TestLabeledSubset:
    def test_half_percent_of_full_grid_is_3686(self):
        ds = generate_dsprites_lite()  # lazy: only labels are touched
        subset = select_labeled_subset(ds, 0.005, make_rng(0))
        assert len(subset) == 3686

    def test_zero_budget_gives_empty_subset(self, small_sprites):
        subset = select_labeled_subset(small_sprites, 0, make_rng(0))
        assert len(subset) == 0

    def test_stratified_exact_split(self, small_sprites):
        subset = select_labeled_subset(small_sprites, 99, make_rng(1), stratified=True)
        counts = np.bincount(subset.labels, minlength=3)
        np.testing.assert_array_equal(counts, [33, 33, 33])

    def test_same_seed_is_reproducible(self, small_sprites):
        a = select_labeled_subset(small_sprites, 50, make_rng(7))
        b = select_labeled_subset(small_sprites, 50, make_rng(7))
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_budget_exceeding_dataset_rejected(self, small_sprites):
        with pytest.raises(ValueError, match="budget"):
            select_labeled_subset(small_sprites, len(small_sprites) + 1, make_rng(0))

    def test_indices_unique(self, small_sprites):
        subset = select_labeled_subset(small_sprites, 200, make_rng(3))
        assert len(np.unique(subset.indices)) == 200


class TestSanityTask:
    def test_linearly_separable_by_pixel_mean_difference(self):
        ds = make_sanity_task(make_rng(5))
        batch = ds.image_batch(np.arange(len(ds)))
        left = batch[:, 0, :, :4].mean(axis=(1, 2))
        right = batch[:, 0, :, 4:].mean(axis=(1, 2))
        predicted = (right > left).astype(np.int64)
        assert np.array_equal(predicted, ds.labels)

    def test_balanced_2000_items(self):
        ds = make_sanity_task(make_rng(6))
        assert len(ds) == 2000
        assert np.bincount(ds.labels).tolist() == [1000, 1000]

    def test_brightness_uniform_by_ks(self):
        ds = make_sanity_task(make_rng(7))
        stat = stats.kstest(ds.factor_values["brightness"], stats.uniform(0.5, 0.5).cdf)
        assert stat.pvalue > 0.01


class TestImageBatch:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match="0, 1"):
            ImageBatch(images=np.full((2, 1, 4, 4), 1.5, dtype=np.float32))

    def test_wraps_valid_images(self):
        b = ImageBatch(images=np.zeros((3, 1, 4, 4), dtype=np.float32), labels=np.zeros(3))
        assert len(b) == 3
