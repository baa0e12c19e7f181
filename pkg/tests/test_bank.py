import logging

import numpy as np
import pytest

from cfcontrast.bank import (
    MissingCounterfactual, bank_entry_id, bank_from_oracle, build_counterfactual_bank, combined_counts,
    read_bank, write_bank,
)
from cfcontrast.hvae import HvaeConfig, build_mechanism
from cfcontrast.worlds import WorldSpec, generate_dataset


@pytest.fixture(scope="module")
def fresh(tiny_spec):
    # bank bookkeeping does not depend on generator quality
    return build_mechanism(HvaeConfig(), tiny_spec.parent_cardinalities())


def test_sizes_and_balance(fresh, tiny_world):
    train = tiny_world.split("train")
    bank = build_counterfactual_bank(fresh, train)
    assert len(bank) == 2 * len(train)
    assert combined_counts(train, bank).tolist() == [len(train)] * 3
    assert (bank.targets != bank.sources).all()


def test_two_domains_gives_one_entry_per_image(tiny_world):
    spec = WorldSpec(num_domains=2, domain_weights=(0.7, 0.3), samples_per_split={"train": 20, "val": 0, "test": 0})
    ds = generate_dataset(spec)
    bank = build_counterfactual_bank(build_mechanism(HvaeConfig(), spec.parent_cardinalities()), ds)
    assert len(bank) == 20
    assert (bank.targets == 1 - bank.sources).all()


def test_single_domain_bank_is_empty():
    spec = WorldSpec(num_domains=1, domain_weights=(1.0,), samples_per_split={"train": 10, "val": 0, "test": 0})
    ds = generate_dataset(spec)
    bank = build_counterfactual_bank(build_mechanism(HvaeConfig(), spec.parent_cardinalities()), ds)
    assert len(bank) == 0


def test_unknown_domain_skipped_with_warning(fresh, caplog):
    spec = WorldSpec(samples_per_split={"train": 12, "val": 0, "test": 6}, holdout_test_samples=4)
    ds = generate_dataset(spec)
    with caplog.at_level(logging.WARNING):
        bank = build_counterfactual_bank(fresh, ds)
    assert bank.skipped == 4 and "skipping 4" in caplog.text
    assert len(bank) == 2 * 18


def test_attribute_bank_targets_other_value(fresh, tiny_world):
    bank = build_counterfactual_bank(fresh, tiny_world.split("val"), "sexlike")
    assert len(bank) == 40 and bank.cardinality == 2
    assert bank.entry_id(0).startswith(bank.sample_ids[0] + "__sexlike__to__")


def test_lookup_and_missing(fresh, tiny_world):
    val = tiny_world.split("val")
    bank = build_counterfactual_bank(fresh, val)
    sid, d = val.sample_ids[0], int(val.domains[0])
    other = (d + 1) % 3
    assert bank.get(sid, other).shape == (32, 32)
    with pytest.raises(MissingCounterfactual, match=sid):
        bank.get(sid, d)


def test_bank_is_deterministic_and_roundtrips(fresh, tiny_world, tmp_path):
    val = tiny_world.split("val")
    a = build_counterfactual_bank(fresh, val)
    b = build_counterfactual_bank(fresh, val)
    np.testing.assert_array_equal(a.images, b.images)
    write_bank(a, tmp_path)
    back = read_bank(tmp_path)
    np.testing.assert_array_equal(back.images, a.images)
    assert back.sample_ids == a.sample_ids and (back.targets == a.targets).all()
    assert bank_entry_id("s1", "domain", 2) == "s1__to__2"


def test_oracle_bank_is_exact(tiny_world):
    from cfcontrast.worlds import domain_oracle
    val = tiny_world.split("val")
    bank = bank_from_oracle(val)
    assert (domain_oracle(bank.images, val.spec) == bank.targets).all()
