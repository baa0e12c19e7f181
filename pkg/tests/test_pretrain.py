import numpy as np
import pytest

from cfcontrast.bank import bank_from_oracle
from cfcontrast.checkpoint import load_encoder, save_encoder
from cfcontrast.models import EncoderConfig
from cfcontrast.pairs import OBJECTIVES, STRATEGIES
from cfcontrast.pretrain import PretrainConfig, pretrain
from cfcontrast.trainlog import read_log
from cfcontrast.worlds import WorldSpec, generate_dataset

SMALL = EncoderConfig(width=8, rep_dim=32, proj_dim=16, head_hidden=32, head_bottleneck=16, prototypes=32)


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(WorldSpec(samples_per_split={"train": 256, "val": 64, "test": 0}))
    return ds.split("train"), ds.split("val"), bank_from_oracle(ds)


@pytest.mark.parametrize("objective", OBJECTIVES)
@pytest.mark.parametrize("strategy", STRATEGIES)
def test_two_epoch_smoke(data, tmp_path, strategy, objective):
    train, val, bank = data
    cfg = PretrainConfig(epochs=2, batch_size=64, dino_batch_size=32, encoder=SMALL)
    out = pretrain(train, val, strategy, objective, cfg, bank=bank, log_path=tmp_path / "log.csv")
    assert len(out.history) == 2
    assert all(np.isfinite(r["loss"]) and np.isfinite(r["val_loss"]) for r in out.history)
    assert len(read_log(tmp_path / "log.csv")) == 2
    save_encoder(tmp_path / "enc.ckpt", out, train.spec)
    assert load_encoder(tmp_path / "enc.ckpt").metadata["pair_strategy"] == strategy


def test_strategies_share_everything_but_the_pairing(data):
    train, val, bank = data
    cfg = PretrainConfig(epochs=1, batch_size=64, encoder=SMALL)
    a = pretrain(train, val, "standard", "simclr", cfg).metadata
    b = pretrain(train, val, "cf", "simclr", cfg, bank=bank).metadata
    assert a["pair_strategy"] != b["pair_strategy"]
    assert a["config"] == b["config"] and a["config_hash"] == b["config_hash"]


def test_matched_plus_takes_as_many_steps(data):
    train, val, bank = data
    cfg = PretrainConfig(epochs=1, batch_size=64, encoder=SMALL)
    std = pretrain(train, val, "standard", "simclr", cfg)
    plus = pretrain(train, val, "plus", "simclr", cfg, bank=bank)
    pool = pretrain(train, val, "plus", "simclr", PretrainConfig(epochs=1, batch_size=64, encoder=SMALL,
                                                                plus_epoch="pool"), bank=bank)
    assert std.history[0]["step"] == plus.history[0]["step"] == 4
    assert pool.history[0]["step"] == 12


def test_same_seed_same_weights(data):
    train, val, _ = data
    cfg = PretrainConfig(epochs=1, batch_size=64, encoder=SMALL, seed=4)
    x = val.images[:8]
    np.testing.assert_array_equal(pretrain(train, val, "standard", "simclr", cfg).embed(x),
                                  pretrain(train, val, "standard", "simclr", cfg).embed(x))


@pytest.mark.slow
def test_training_loss_falls_on_default_world(lab):
    for obj in ("simclr", "dino"):
        hist = lab.encoder("standard", obj, 0).history
        assert hist[-1]["loss"] < hist[0]["loss"], obj
