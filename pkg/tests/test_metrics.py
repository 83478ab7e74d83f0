"""Metric tests built around controllable fake encoders: an oracle that reads
the true factors out of the pixels (score must be 1), a noise encoder (score
must sit at chance), and degenerate encoders that must be rejected."""

import numpy as np
import pytest

from partedvae.data import generate_dsprites_lite, make_sanity_task
from partedvae.metrics import (
    FactorScoreConfig,
    MetricError,
    classification_accuracy,
    factor_score,
    prior_separation_report,
    representation_fn,
)
from partedvae.model import ModelShape, PartedModel
from partedvae.tensor import make_rng


class FactorPixelDataset:
    """Synthetic factor grid whose images literally contain the factor levels
    (pixel i = level_i / size_i), so an oracle encoder can read them back."""

    def __init__(self, sizes=(4, 4, 4, 4, 4)):
        self.factor_sizes = tuple(sizes)

    def __len__(self):
        return int(np.prod(self.factor_sizes))

    def _images_from_levels(self, levels):
        levels = np.asarray(levels, dtype=np.float64)
        scaled = levels / np.array(self.factor_sizes)
        n, f = scaled.shape
        images = np.zeros((n, 1, 1, f), dtype=np.float32)
        images[:, 0, 0, :] = scaled
        return images

    def image_batch(self, indices):
        levels = np.stack(np.unravel_index(np.asarray(indices), self.factor_sizes), axis=-1)
        return self._images_from_levels(levels)

    def sample_fixed_factor_batch(self, factor_index, count, rng):
        levels = np.stack([rng.integers(0, s, size=count) for s in self.factor_sizes], axis=1)
        levels[:, factor_index] = rng.integers(0, self.factor_sizes[factor_index])
        return self._images_from_levels(levels), levels


def oracle_encoder(images):
    """Reads the factor levels from the pixels and appends two noise dims
    derived deterministically from the image bytes."""
    codes = images[:, 0, 0, :].astype(np.float64)
    noise = np.stack(
        [np.frombuffer(img.tobytes(), dtype=np.uint8).astype(np.float64).cumsum()[-2:] % 7.3 for img in images]
    )
    return np.concatenate([codes, noise], axis=1)


class TestFactorScore:
    def test_oracle_encoder_scores_one(self):
        ds = FactorPixelDataset()
        cfg = FactorScoreConfig(num_votes=200, num_eval_votes=200, samples_per_vote=32, seed=0)
        assert factor_score(oracle_encoder, ds, cfg) == 1.0

    def test_noise_encoder_scores_at_chance(self):
        ds = FactorPixelDataset()  # 5 factors: chance = 0.2
        scores = []
        for seed in range(10):
            noise_rng = np.random.default_rng(1000 + seed)

            def noise_encoder(images):
                return noise_rng.normal(size=(images.shape[0], 6))

            cfg = FactorScoreConfig(num_votes=300, num_eval_votes=300, samples_per_vote=16, seed=seed)
            scores.append(factor_score(noise_encoder, ds, cfg))
        assert abs(np.mean(scores) - 0.2) < 0.05

    def test_constant_encoder_raises(self):
        ds = FactorPixelDataset()

        def constant_encoder(images):
            return np.ones((images.shape[0], 4))

        with pytest.raises(MetricError, match="collapsed"):
            factor_score(constant_encoder, ds, FactorScoreConfig(seed=1))

    def test_invariant_under_per_dim_affine_rescaling(self):
        # scales mild enough that no dimension crosses the pruning cutoff:
        # the std normalization then cancels them exactly
        ds = FactorPixelDataset(sizes=(3, 3, 3, 3))
        scale = np.array([1.7, 0.5, 2.0, 0.8, 1.3, 0.6])
        shift = np.array([-4.0, 0.0, 2.5, 1.0, -1.0, 0.3])

        def rescaled(images):
            return oracle_encoder(images) * scale + shift

        cfg = FactorScoreConfig(num_votes=150, num_eval_votes=150, samples_per_vote=24, seed=2)
        assert factor_score(oracle_encoder, ds, cfg) == factor_score(rescaled, ds, cfg)

    def test_deterministic_given_seed(self):
        ds = FactorPixelDataset(sizes=(3, 3, 3))
        cfg = FactorScoreConfig(num_votes=100, num_eval_votes=100, samples_per_vote=16, seed=3)
        assert factor_score(oracle_encoder, ds, cfg) == factor_score(oracle_encoder, ds, cfg)

    def test_works_on_sprite_dataset_with_real_model(self):
        # untrained model: just exercises the full pipeline end to end
        ds = generate_dsprites_lite(subsample=(1, 3, 20, 8, 8))
        ds.materialize()
        shape = ModelShape(K=1, L=(3,), d_u=1, d_z=5, image_shape=(1, 32, 32), h_dim=32)
        model = PartedModel(shape, make_rng(4), arch="mlp", mlp_hidden=(64,), dtype=np.float32)
        fn, layout = representation_fn(model)
        assert layout.dim == 6
        assert layout.block_of(5) == "u0"
        cfg = FactorScoreConfig(num_votes=50, num_eval_votes=50, samples_per_vote=16, std_sample=500, seed=5)
        score = factor_score(fn, ds, cfg)
        assert 0.0 <= score <= 1.0

    def test_class_probability_blocks_optional(self):
        shape = ModelShape(K=2, L=(3, 4), d_u=2, d_z=5, image_shape=(1, 8, 8), h_dim=16)
        model = PartedModel(shape, make_rng(6), arch="mlp", mlp_hidden=(16,), dtype=np.float32)
        fn, layout = representation_fn(model, include_class_probs=True)
        assert layout.dim == 5 + 2 * 2 + 3 + 4
        codes = fn(make_rng(7).random((3, 1, 8, 8)).astype(np.float32))
        assert codes.shape == (3, layout.dim)


class TestClassificationAccuracy:
    def _model(self, seed=0):
        shape = ModelShape(K=1, L=(2,), d_u=1, d_z=2, image_shape=(1, 8, 8), h_dim=16)
        return PartedModel(shape, make_rng(seed), arch="mlp", mlp_hidden=(16,), dtype=np.float32)

    def test_perfect_posterior_scores_one(self):
        ds = make_sanity_task(make_rng(8), count=200)
        m = self._model()
        # wire the class head to the left/right pixel-mass difference:
        # unit 0 fires on right-lit images, unit 1 on left-lit ones
        img_w = np.zeros((8, 8), dtype=np.float32)
        img_w[:, :4] = -1.0
        img_w[:, 4:] = 1.0
        m.params["encoder.fc0.w"].data[:] = 0.0
        m.params["encoder.fc0.w"].data[:, 0] = img_w.reshape(-1)
        m.params["encoder.fc0.w"].data[:, 1] = -img_w.reshape(-1)
        m.params["encoder.fc1.w"].data[:] = np.eye(16, dtype=np.float32)
        m.params["encoder.fc1.b"].data[:] = 0.0
        m.params["encoder.c0.w"].data[:] = 0.0
        m.params["encoder.c0.w"].data[0, :] = [-50.0, 50.0]
        m.params["encoder.c0.w"].data[1, :] = [50.0, -50.0]
        assert classification_accuracy(m, ds) == 1.0

    def test_constant_predictor_on_balanced_classes(self):
        ds = make_sanity_task(make_rng(9), count=200)
        m = self._model(seed=1)
        m.params["encoder.c0.w"].data[:] = 0.0
        m.params["encoder.c0.b"].data[:] = [10.0, -10.0]  # always class 0
        assert classification_accuracy(m, ds) == 0.5

    def test_agrees_with_manual_recount(self):
        ds = make_sanity_task(make_rng(10), count=128)
        m = self._model(seed=2)
        got = classification_accuracy(m, ds)
        pred = m.predict_classes(ds.image_batch(np.arange(len(ds))))
        want = sum(int(p == l) for p, l in zip(pred, ds.labels)) / len(ds)
        assert got == want

    def test_subset_indices_respected(self):
        ds = make_sanity_task(make_rng(11), count=64)
        m = self._model(seed=3)
        sub = np.arange(10)
        acc = classification_accuracy(m, ds, indices=sub)
        assert 0.0 <= acc <= 1.0
        assert acc * 10 == int(acc * 10)  # computed over exactly 10 items


class TestPriorSeparationReport:
    def _model(self, L=(3,), seed=0):
        shape = ModelShape(K=len(L), L=L, d_u=2, d_z=2, image_shape=(1, 8, 8), h_dim=16)
        return PartedModel(shape, make_rng(seed), arch="mlp", mlp_hidden=(16,), dtype=np.float64)

    def test_fresh_bank_has_unit_overlap_everywhere(self):
        report = prior_separation_report(self._model(), delta=0.1)
        mat = report[0]["matrix"]
        np.testing.assert_allclose(mat, np.ones((3, 3)), atol=1e-12)
        assert report[0]["exceeding"] == 3  # all i<j pairs

    def test_matrix_symmetric_with_unit_diagonal(self):
        m = self._model(L=(4,), seed=1)
        m.params["prior.u0.mean"].data[:] = make_rng(2).normal(size=(4, 2))
        report = prior_separation_report(m, delta=0.1)
        mat = report[0]["matrix"]
        np.testing.assert_allclose(mat, mat.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-15)

    def test_separated_bank_reports_zero_exceeding(self):
        m = self._model(seed=3)
        m.params["prior.u0.mean"].data[:] = [[-30.0, 0.0], [0.0, 30.0], [30.0, -30.0]]
        report = prior_separation_report(m, delta=0.1)
        assert report[0]["exceeding"] == 0
        assert report[0]["max_offdiag"] <= 0.1
