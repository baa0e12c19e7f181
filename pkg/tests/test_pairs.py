import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from cfcontrast.bank import MissingCounterfactual, bank_from_oracle
from cfcontrast.pairs import (
    N_GLOBAL, N_LOCAL, AugmentationPipeline, PairFactory, cf_dino_bundle, cf_pair, dino_bundle,
    plus_stream, standard_pair, training_multiset,
)
from cfcontrast.worlds import WorldSpec, generate_dataset

IDENT = AugmentationPipeline.identity()


@pytest.fixture(scope="module")
def val(tiny_world):
    return tiny_world.split("val")


@pytest.fixture(scope="module")
def bank(val):
    return bank_from_oracle(val)


def test_identity_pipeline_gives_identical_views(val):
    b = standard_pair(val.sample(0), IDENT, seed=3)
    np.testing.assert_array_equal(b.views[0], val.images[0])
    np.testing.assert_array_equal(b.views[1], val.images[0])
    assert b.provenance == ["real", "real"]


def test_standard_pairs_never_touch_the_bank(val):
    assert all(standard_pair(val.sample(i % len(val)), IDENT, seed=i).count("counterfactual") == 0
               for i in range(1000))


def test_seeded_pairs_repeat(val, bank):
    pipe = AugmentationPipeline()
    a, b = cf_pair(val.sample(5), bank, pipe, seed=11), cf_pair(val.sample(5), bank, pipe, seed=11)
    assert a.target == b.target
    for x, y in zip(a.views, b.views):
        np.testing.assert_array_equal(x, y)


def test_cf_pair_uses_real_image_when_observed_value_drawn(val, bank):
    s = val.sample(0)
    seen = set()
    for seed in range(60):
        b = cf_pair(s, bank, IDENT, seed=seed)
        seen.add(b.target)
        if b.target == s.parents["domain"]:
            assert b.provenance == ["real", "real"]
            np.testing.assert_array_equal(b.views[1], s.image)
        else:
            np.testing.assert_array_equal(b.views[1], bank.get(s.sample_id, b.target))
    assert seen == {0, 1, 2}


def test_single_domain_cf_pair_is_real_real():
    spec = WorldSpec(num_domains=1, domain_weights=(1.0,), samples_per_split={"train": 5, "val": 0, "test": 0})
    ds = generate_dataset(spec)
    bank = bank_from_oracle(ds)
    assert len(bank) == 0
    b = cf_pair(ds.sample(0), bank, IDENT, seed=0)
    assert b.provenance == ["real", "real"]


def test_missing_entry_names_sample_and_target(val, bank):
    s = val.sample(0)
    empty = bank.restrict([])
    other = (s.parents["domain"] + 1) % 3
    seed = next(i for i in range(100) if np.random.default_rng(i).integers(3) == other)
    with pytest.raises(MissingCounterfactual) as err:
        cf_pair(s, empty, IDENT, seed=seed)
    assert s.sample_id in str(err.value) and str(other) in str(err.value)


def test_five_domain_targets_uniform():
    spec = WorldSpec(num_domains=5, domain_weights=(0.6, 0.1, 0.1, 0.1, 0.1),
                     samples_per_split={"train": 0, "val": 10, "test": 0})
    ds = generate_dataset(spec)
    fac = PairFactory(ds, "cf", "simclr", bank_from_oracle(ds), IDENT)
    _, targets, _ = fac.partners(np.zeros(20000, dtype=int), np.random.default_rng(0))
    assert chisquare(np.bincount(targets, minlength=5)).pvalue > 0.01
    assert abs((targets != ds.domains[0]).mean() - 4 / 5) <= 0.015


def test_plus_stream_is_balanced_union(val, bank):
    pool = plus_stream(val, bank, seed=0)
    assert len(pool) == 3 * len(val)
    assert np.bincount(pool.values).tolist() == [len(val)] * 3
    assert training_multiset(val, bank, "plus") == training_multiset(val, bank, "cf")


def test_plus_stream_single_domain_is_real():
    spec = WorldSpec(num_domains=1, domain_weights=(1.0,), samples_per_split={"train": 8, "val": 0, "test": 0})
    ds = generate_dataset(spec)
    pool = plus_stream(ds, bank_from_oracle(ds))
    assert pool.is_real.all()
    assert training_multiset(ds, None, "standard") == sorted(im.tobytes() for im in pool.images)


def test_dino_bundle_shapes(val):
    b = dino_bundle(val.sample(0), AugmentationPipeline.dino_global(), AugmentationPipeline.dino_local(), seed=1)
    assert len(b.views) == N_GLOBAL + N_LOCAL == 10
    assert [v.shape for v in b.views] == [(32, 32)] * 2 + [(16, 16)] * 8
    assert b.count("real") == 10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 39), st.integers(0, 10_000))
def test_cf_dino_bundle_allocation(val, bank, i, seed):
    b = cf_dino_bundle(val.sample(i), bank, AugmentationPipeline.dino_global(), AugmentationPipeline.dino_local(), seed)
    assert b.count(role="global") == 2 and b.count(role="local") == 8
    partner = b.provenance[1]
    assert b.provenance == ["real", partner] + ["real"] * 4 + [partner] * 4
    if b.target != val.sample(i).parents["domain"]:
        assert b.count("real", "global") == 1 and b.count("counterfactual", "global") == 1
        assert b.count("real", "local") == 4 and b.count("counterfactual", "local") == 4


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 40), st.floats(0.1, 1.0), st.integers(0, 2**31 - 1))
def test_augmentations_stay_in_range(size, lo, seed):
    pipe = AugmentationPipeline(out_size=size, crop_scale=(lo, 1.0), brightness=0.5, contrast=0.5, blur_p=0.5)
    x = torch.rand(3, 32, 32)
    y = pipe(x, torch.Generator().manual_seed(seed))
    assert y.shape == (3, size, size)
    assert float(y.min()) >= 0 and float(y.max()) <= 1


def test_factory_batches(val, bank):
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    idx = np.arange(8)
    a, b = PairFactory(val, "cf", "simclr", bank).batch(idx, rng, g)
    assert a.shape == b.shape == (8, 32, 32)
    glob, loc = PairFactory(val, "standard", "dino").batch(idx, rng, g)
    assert len(glob) == 2 and len(loc) == 8 and loc[0].shape == (8, 16, 16)


def test_factory_validates_arguments(val):
    with pytest.raises(ValueError, match="pair_strategy"):
        PairFactory(val, "mixup")
    with pytest.raises(ValueError, match="bank"):
        PairFactory(val, "cf")
