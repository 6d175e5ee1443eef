import numpy as np
import pytest

from aeroseg import data as D
from aeroseg.errors import ConfigurationError, LabelError


class TestColorMapping:
    def test_blue_is_class_zero(self):
        image = np.zeros((1, 1, 3), dtype=np.uint8)
        image[0, 0] = (0, 0, 255)
        assert D.color_to_index(image)[0, 0] == 0

    def test_within_tolerance(self):
        image = np.array([[[7, 3, 250]]], dtype=np.uint8)
        assert D.color_to_index(image, tolerance=8)[0, 0] == 0

    def test_unmatched_is_ignore(self):
        image = np.array([[[128, 128, 128]]], dtype=np.uint8)
        assert D.color_to_index(image, tolerance=8)[0, 0] == D.IGNORE_INDEX

    def test_ambiguous_legend_rejected(self):
        legend = D.ColorLegend(entries=(("a", (0, 0, 0)), ("b", (5, 5, 5))))
        with pytest.raises(ConfigurationError):
            D.color_to_index(np.zeros((1, 1, 3), dtype=np.uint8), legend, tolerance=8)

    def test_roads_render_white(self):
        mask = np.full((2, 2), 4, dtype=np.uint8)
        assert (D.index_to_color(mask) == 255).all()

    def test_ignore_renders_black(self):
        mask = np.full((1, 1), D.IGNORE_INDEX, dtype=np.uint8)
        assert (D.index_to_color(mask) == 0).all()

    def test_out_of_range_value(self):
        with pytest.raises(LabelError):
            D.index_to_color(np.full((1, 1), 9, dtype=np.uint8))

    def test_round_trip_all_classes(self):
        mask = np.arange(6, dtype=np.uint8).reshape(2, 3)
        rendered = D.index_to_color(mask)
        np.testing.assert_array_equal(D.color_to_index(rendered, tolerance=0), mask)


def _sample(seed=0, size=8, with_mask=True):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 4, (size, size)).astype(np.uint8) if with_mask else None
    return D.Sample(image=rng.random((3, size, size)), mask=mask,
                    domain=D.DEFAULT_TAGS["A"], id=f"A:{seed}")


class TestAugment:
    def test_flip_involution(self):
        s = _sample()
        twice = D.flip_horizontal(D.flip_horizontal(s))
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.mask, s.mask)
        twice_v = D.flip_vertical(D.flip_vertical(s))
        np.testing.assert_array_equal(twice_v.image, s.image)

    def test_four_quarter_turns(self):
        s = _sample()
        out = s
        for _ in range(4):
            out = D.rotate90(out)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_histogram_preserved_by_geometry(self):
        s = _sample(3)
        for transform in (D.flip_horizontal, D.flip_vertical, D.rotate90):
            out = transform(s)
            np.testing.assert_array_equal(np.bincount(out.mask.ravel(), minlength=5),
                                          np.bincount(s.mask.ravel(), minlength=5))

    def test_seeded_determinism(self):
        policy = D.AugmentPolicy(horizontal_flip=True, vertical_flip=True, rotate90=True,
                                 downsample_factors=(2, 4))
        s = _sample(4)
        a = D.augment(s, seed=9, policy=policy)
        b = D.augment(s, seed=9, policy=policy)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_identical_geometry_for_image_and_mask(self):
        size = 8
        mask = np.arange(size * size, dtype=np.uint8).reshape(size, size) % 4
        image = np.stack([mask / 4.0] * 3)
        s = D.Sample(image=image, mask=mask, domain=D.DEFAULT_TAGS["A"], id="A:x")
        policy = D.AugmentPolicy(horizontal_flip=True, vertical_flip=True, rotate90=True)
        out = D.augment(s, seed=2, policy=policy)
        np.testing.assert_array_equal((out.image[0] * 4).astype(np.uint8), out.mask)

    def test_downsample_upsample_shapes_and_blocks(self):
        s = _sample(5, size=8)
        out = D.downsample_upsample(s, 2)
        assert out.image.shape == s.image.shape
        blocks = out.mask.reshape(4, 2, 4, 2)
        assert (blocks == blocks[:, :1, :, :1]).all()

    def test_disabled_policy_is_identity(self):
        s = _sample(6)
        out = D.augment(s, seed=0, policy=D.AugmentPolicy())
        assert out is s


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    specs = D.synth_generate(seed=42, n_per_domain=12, size=(32, 32), num_classes=6,
                             out_dir=root)
    return root, specs


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch_corpus")
    D.synth_generate(seed=11, n_per_domain=8, size=(16, 16), num_classes=4, out_dir=root)
    return [D.load_dataset(root / f"domain_{s}" / "manifest.txt") for s in ("a", "b", "c")]


class TestSynth:
    def test_specs(self, corpus):
        _, (spec_a, spec_b, spec_c) = corpus
        assert spec_a.labelled and spec_b.labelled and not spec_c.labelled
        assert (spec_a.tag.symbol, spec_b.tag.symbol, spec_c.tag.symbol) == ("A", "B", "C")

    def test_deterministic_bytes(self, corpus, tmp_path):
        root, _ = corpus
        D.synth_generate(seed=42, n_per_domain=12, size=(32, 32), num_classes=6,
                         out_dir=tmp_path)
        for rel in ["domain_a/images/0000.png", "domain_b/images/0003.png",
                    "domain_c/images/0011.png", "domain_a/manifest.txt"]:
            assert (root / rel).read_bytes() == (tmp_path / rel).read_bytes()

    def test_domain_c_hides_masks(self, corpus):
        root, (_, _, spec_c) = corpus
        dataset = D.load_dataset(root / "domain_c" / "manifest.txt")
        assert all(s.mask is None for s in dataset.samples)
        hidden = D.load_hidden_truth(spec_c)
        assert len(hidden) == 12
        assert all(m.shape == (32, 32) for m in hidden.values())

    def test_manifest_round_trip(self, corpus):
        root, _ = corpus
        dataset = D.load_dataset(root / "domain_a" / "manifest.txt")
        assert dataset.spec.labelled and dataset.spec.tag.symbol == "A"
        assert len(dataset.samples) == 12
        sample = dataset.samples[0]
        assert sample.image.shape == (3, 32, 32)
        assert sample.mask.shape == (32, 32)
        assert set(np.unique(sample.mask)) <= set(range(6))

    def test_size_not_divisible_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            D.synth_generate(seed=0, n_per_domain=2, size=(30, 30), num_classes=6,
                             out_dir=tmp_path)


def test_brightness_shift_between_domains(tmp_path):
    """Domain B sits ~0.2 above domain A in mean brightness, measured over
    the PNG-decoded corpus."""
    D.synth_generate(seed=7, n_per_domain=100, size=(16, 16), num_classes=6,
                     out_dir=tmp_path)
    means = {}
    for symbol in ("a", "b"):
        dataset = D.load_dataset(tmp_path / f"domain_{symbol}" / "manifest.txt")
        means[symbol] = float(np.mean([s.image.mean() for s in dataset.samples]))
    delta = means["b"] - means["a"]
    assert abs(delta - 0.2) <= 0.02, f"brightness delta {delta}"


class TestBatches:
    def test_composition(self, datasets):
        batches = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=0)
        for batch in batches:
            assert batch.labelled.sum() == 2
            assert (~batch.labelled).sum() == 2
        assert len(batches) == 8  # 16 labelled total, 2 per batch

    def test_fully_labelled(self, datasets):
        batches = D.make_batches(datasets, batch_size=4, labelled_fraction=1.0, seed=0)
        for batch in batches:
            assert batch.labelled.all()
            assert set(batch.domains) <= {0, 1}

    def test_epoch_determinism(self, datasets):
        a = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=3)
        b = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=3)
        assert [x.ids for x in a] == [y.ids for y in b]
        different = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=4)
        assert [x.ids for x in a] != [z.ids for z in different]

    def test_labelled_epoch_covers_pool_once(self, datasets):
        batches = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=0)
        labelled_ids = [i for b in batches for i, lab in zip(b.ids, b.labelled) if lab]
        assert len(labelled_ids) == len(set(labelled_ids)) == 16

    def test_unlabelled_requested_but_missing(self, datasets):
        with pytest.raises(ConfigurationError):
            D.make_batches(datasets[:2], batch_size=4, labelled_fraction=0.5, seed=0)

    def test_unlabelled_rows_carry_ignore(self, datasets):
        batches = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=0)
        for batch in batches:
            for i, lab in enumerate(batch.labelled):
                if not lab:
                    assert (batch.masks[i] == D.IGNORE_INDEX).all()

    def test_domain_c_mask_never_visible(self, datasets):
        """The training-visible fields of every batch expose no mask for tag C."""
        batches = D.make_batches(datasets, batch_size=4, labelled_fraction=0.5, seed=1)
        c_index = D.DEFAULT_TAGS["C"].index
        seen_c = 0
        for batch in batches:
            for i in range(len(batch.ids)):
                if batch.domains[i] == c_index:
                    seen_c += 1
                    assert (batch.masks[i] == D.IGNORE_INDEX).all()
                    assert not batch.labelled[i]
        assert seen_c > 0

    def test_bad_fraction(self, datasets):
        with pytest.raises(ConfigurationError):
            D.make_batches(datasets, batch_size=4, labelled_fraction=0.0, seed=0)
        with pytest.raises(ConfigurationError):
            D.make_batches(datasets, batch_size=16, labelled_fraction=0.01, seed=0)
