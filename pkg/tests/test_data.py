"""Dataset generator, augmentation, and PK sampler contracts."""

import csv

import numpy as np
import pytest

from xmreid.data import (
    IMAGE_HW,
    IR_WEIGHTS,
    Dataset,
    PKBatchSpec,
    PKLoader,
    augment,
    generate_dataset,
    luminance,
    render,
    sample_latent,
)
from xmreid.errors import ConfigError
from xmreid.rng import derive_rng, new_rng


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(40, 8, seed=1)


class TestGeneration:
    def test_single_shot_gallery_size(self, dataset):
        assert len(dataset.gallery) == 10
        gal_ids = [s.identity for s in dataset.gallery]
        assert len(set(gal_ids)) == 10
        assert all(s.modality == 0 for s in dataset.gallery)

    def test_probes_are_infrared(self, dataset):
        assert all(s.modality == 1 for s in dataset.query)
        assert len(dataset.query) == 10 * 8

    def test_train_test_identities_disjoint(self, dataset):
        train_ids = {s.identity for s in dataset.train}
        test_ids = {s.identity for s in dataset.query + dataset.gallery}
        assert not train_ids & test_ids
        assert len(train_ids) == 30

    def test_same_seed_is_bit_identical(self, dataset):
        again = generate_dataset(40, 8, seed=1)
        assert len(again.samples) == len(dataset.samples)
        for a, b in zip(dataset.samples, again.samples):
            np.testing.assert_array_equal(a.image, b.image)
            assert (a.identity, a.modality, a.camera) == (b.identity, b.modality, b.camera)

    def test_different_seed_differs(self, dataset):
        other = generate_dataset(40, 8, seed=2)
        assert any(
            not np.array_equal(a.image, b.image)
            for a, b in zip(dataset.samples, other.samples)
        )

    def test_images_are_valid(self, dataset):
        for s in dataset.samples[::37]:
            assert s.image.shape == (3, *IMAGE_HW)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_insufficient_counts_rejected(self):
        with pytest.raises(ConfigError):
            generate_dataset(3, 8, seed=0)
        with pytest.raises(ConfigError):
            generate_dataset(40, 1, seed=0)
        with pytest.raises(ConfigError):
            generate_dataset(8, 4, seed=0, test_identities=7)


class TestInfraredRendering:
    def test_equal_luminance_hues_collapse(self):
        """Distinct hues with equal luminance are near-identical in infrared."""
        latent = sample_latent(derive_rng(0, 1000))
        a = np.array([0.5, 0.5, 0.5])
        # Solve for g so the weighted sum matches luminance(a) exactly.
        r, b = 0.8, 0.3
        g = (luminance(a) - IR_WEIGHTS[0] * r - IR_WEIGHTS[2] * b) / IR_WEIGHTS[1]
        hue = np.array([r, g, b])
        assert abs(luminance(hue) - luminance(a)) < 1e-12
        la, lb = dict(latent), dict(latent)
        la["shirt"], lb["shirt"] = a, hue
        img_a = render(la, 1, 1.0, derive_rng(0, 5))
        img_b = render(lb, 1, 1.0, derive_rng(0, 5))
        assert np.abs(img_a - img_b).max() < 1e-9
        # The same two albedos are clearly different in colour.
        img_ca = render(la, 0, 1.0, derive_rng(0, 6))
        img_cb = render(lb, 0, 1.0, derive_rng(0, 6))
        assert np.abs(img_ca - img_cb).max() > 0.1

    def test_infrared_channels_are_replicated_up_to_noise(self, dataset):
        ir = next(s for s in dataset.query)
        assert np.abs(ir.image[0] - ir.image[1]).max() < 0.2
        colourful = max(dataset.gallery, key=lambda s: np.abs(s.image[0] - s.image[1]).max())
        assert np.abs(colourful.image[0] - colourful.image[1]).max() > 0.2

    def test_pixel_nearest_neighbour_beats_chance(self, dataset):
        """Cross-modal signal floor: raw-pixel retrieval >= 2x chance."""
        probes = np.stack([s.image.ravel() for s in dataset.query])
        gallery = np.stack([s.image.ravel() for s in dataset.gallery])
        qid = np.array([s.identity for s in dataset.query])
        gid = np.array([s.identity for s in dataset.gallery])
        d2 = ((probes[:, None, :] - gallery[None, :, :]) ** 2).sum(-1)
        rank1 = (gid[d2.argmin(axis=1)] == qid).mean()
        assert rank1 >= 2.0 / len(dataset.gallery)


class TestRedChannelOption:
    def test_extra_colour_only_identities(self):
        ds = generate_dataset(8, 2, seed=3, test_identities=2, red_channel_identities=3)
        train_ids = {s.identity for s in ds.train}
        assert {8, 9, 10} <= train_ids
        fake = [s for s in ds.train if s.identity >= 8 and s.modality == 1]
        assert fake
        for s in fake:
            assert np.abs(s.image[0] - s.image[2]).max() < 0.2


class TestAugment:
    def test_forced_flip_is_involution(self):
        rng = new_rng(4)
        img = rng.uniform(size=(3, 96, 48))
        once = augment(img, flip_p=1.0, erase_p=0.0, rng=new_rng(0))
        twice = augment(once, flip_p=1.0, erase_p=0.0, rng=new_rng(0))
        np.testing.assert_array_equal(twice, img)

    def test_disabled_augment_is_identity(self):
        img = new_rng(5).uniform(size=(3, 96, 48))
        out = augment(img, flip_p=0.0, erase_p=0.0, rng=new_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_erased_region_is_a_proper_subrectangle(self):
        rng = new_rng(6)
        h, w = IMAGE_HW
        for _ in range(1000):
            img = np.zeros((3, h, w))
            out = augment(img, flip_p=0.0, erase_p=1.0, rng=rng, fill=np.ones(3))
            erased = out[0] == 1.0
            count = int(erased.sum())
            assert 0.02 <= count / (h * w) <= 0.2
            ys, xs = np.nonzero(erased)
            box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            assert box == count  # solid rectangle


class TestPKLoader:
    def test_batch_composition(self, dataset):
        loader = PKLoader(dataset, PKBatchSpec())
        images, labels, modalities = loader.next_batch(new_rng(7))
        assert images.shape == (32, 3, 96, 48)
        assert len(set(labels.tolist())) == 8
        assert (modalities == 0).sum() == 16 and (modalities == 1).sum() == 16
        for lab in set(labels.tolist()):
            sel = labels == lab
            assert sel.sum() == 4
            assert modalities[sel].sum() == 2  # two infrared per id

    def test_batch_satisfies_triplet_precondition(self, dataset):
        loader = PKLoader(dataset, PKBatchSpec(p_identities=2, k_samples=2))
        _, labels, _ = loader.next_batch(new_rng(8))
        uniq, counts = np.unique(labels, return_counts=True)
        assert len(uniq) >= 2 and counts.min() >= 2

    def test_labels_are_contiguous_classes(self, dataset):
        loader = PKLoader(dataset, PKBatchSpec())
        assert loader.num_classes == 30
        assert sorted(loader.class_of.values()) == list(range(30))

    def test_same_rng_same_batch(self, dataset):
        loader = PKLoader(dataset, PKBatchSpec())
        a = loader.next_batch(new_rng(9))
        b = loader.next_batch(new_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_infeasible_spec_rejected_at_construction(self, dataset):
        with pytest.raises(ConfigError):
            PKLoader(dataset, PKBatchSpec(p_identities=31))
        with pytest.raises(ConfigError):
            PKLoader(dataset, PKBatchSpec(k_samples=18))

    def test_bad_spec_values(self):
        with pytest.raises(ConfigError):
            PKBatchSpec(p_identities=1)
        with pytest.raises(ConfigError):
            PKBatchSpec(k_samples=3)


class TestExportImport:
    def test_roundtrip(self, tmp_path, dataset):
        ds = generate_dataset(6, 2, seed=11, test_identities=2)
        ds.export_dir(tmp_path / "d")
        back = Dataset.import_dir(tmp_path / "d")
        assert len(back.samples) == len(ds.samples)
        for a, b in zip(ds.samples, back.samples):
            np.testing.assert_array_equal(a.image, b.image)
            assert (a.identity, a.modality, a.camera) == (b.identity, b.modality, b.camera)
        assert back.split_of == ds.split_of
        np.testing.assert_array_equal(back.channel_means, ds.channel_means)

    def test_manifest_schema(self, tmp_path):
        ds = generate_dataset(4, 2, seed=12, test_identities=1)
        ds.export_dir(tmp_path / "d")
        with open(tmp_path / "d" / "manifest.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["filename", "identity", "modality", "camera", "split"]
        assert len(rows) - 1 == 4 * 2 * 2

    def test_import_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            Dataset.import_dir(tmp_path)
