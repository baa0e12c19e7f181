import numpy as np
import pytest
import torch

from cfcontrast.hvae import (
    HVAE, HvaeConfig, TrainConfig, TrainingDiverged, batch_indices, build_mechanism,
    domain_balanced_weights, evaluate_elbo, train_mechanism,
)
from cfcontrast.scm import ConfigurationError, ExogenousState, counterfactual
from cfcontrast.trainlog import read_log


def _val(world, n=64):
    v = world.split("val")
    return v.images[:n], v.parents(np.arange(min(n, len(v))))


def test_reconstruction_before_clipping(tiny_mechanism, tiny_world):
    x, pa = _val(tiny_world)
    exo = tiny_mechanism.abduct(x, pa)
    rec = tiny_mechanism.predict(exo, pa, clip=False)
    assert np.abs(rec - x).max() <= 1e-6


def test_zero_noise_predicts_the_mean(tiny_mechanism, tiny_world):
    x, pa = _val(tiny_world, 8)
    exo = tiny_mechanism.abduct(x, pa)
    np.testing.assert_allclose(tiny_mechanism.predict(exo.scaled(0.0), pa, clip=False),
                               tiny_mechanism.mean(exo, pa))


def test_deterministic_abduction_repeats(tiny_mechanism, tiny_world):
    x, pa = _val(tiny_world, 16)
    a, b = tiny_mechanism.abduct(x, pa), tiny_mechanism.abduct(x, pa)
    for za, zb in zip(a.latents, b.latents):
        np.testing.assert_array_equal(za, zb)
    np.testing.assert_array_equal(a.residual, b.residual)


def test_single_image_abduction(tiny_mechanism, tiny_world):
    x, pa = _val(tiny_world, 1)
    out = counterfactual(tiny_mechanism, x[0], {k: int(v[0]) for k, v in pa.items()}, {"domain": 2})
    assert out.shape == x[0].shape


def test_level_mismatch_is_configuration_error(tiny_mechanism, tiny_world):
    x, pa = _val(tiny_world, 4)
    exo = tiny_mechanism.abduct(x, pa)
    with pytest.raises(ConfigurationError, match="levels"):
        tiny_mechanism.predict(ExogenousState(exo.latents[:1], exo.residual), pa)


def test_wrong_image_size_rejected(tiny_mechanism):
    with pytest.raises(ConfigurationError):
        tiny_mechanism.abduct(np.zeros((2, 28, 28), np.float32), {"domain": np.zeros(2, int), "sexlike": np.zeros(2, int)})


def test_one_epoch_on_64_images_is_finite(tiny_world, tmp_path):
    train = tiny_world.split("train").subset(np.arange(64))
    res = train_mechanism(train, tiny_world.split("val"), TrainConfig(epochs=1), log_path=tmp_path / "log.csv")
    assert np.isfinite(res.history[0]["loss"]) and np.isfinite(res.best_val)
    rows = read_log(tmp_path / "log.csv")
    assert list(rows[0]) == ["step", "loss", "lr", "val_loss"]


def test_nan_input_raises_with_step(tiny_world):
    train = tiny_world.split("train").subset(np.arange(32))
    train.images = train.images.copy()
    train.images[:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train_mechanism(train, tiny_world.split("val"), TrainConfig(epochs=1))
    assert err.value.step == 0 and "step 0" in str(err.value)


def test_weighted_sampling_balances_domains():
    domains = np.repeat([0, 1, 2], [800, 150, 50])
    w = domain_balanced_weights(domains)
    rng = np.random.default_rng(0)
    drawn = np.concatenate([domains[b] for _ in range(13) for b in batch_indices(1000, 64, rng, w)])
    freq = np.bincount(drawn[: 64 * 200]) / (64 * 200)
    assert np.all(np.abs(freq - 1 / 3) <= 0.03)


def test_elbo_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = HvaeConfig(image_size=4, levels=1, width=4, top_latent_dim=2, embed_dim=4)
    model = HVAE(cfg, {"domain": 2}).double()
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    pa = {"domain": torch.tensor([0, 1, 1])}

    def f():
        loss, _, _ = model.loss(x, pa, generator=torch.Generator().manual_seed(5))
        return loss

    loss = f()
    model.zero_grad()
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    checked = 0
    for p in params[::3]:
        for j in range(min(2, p.numel())):
            flat = p.data.view(-1)
            old = flat[j].item()
            h = 1e-6
            flat[j] = old + h
            up = f().item()
            flat[j] = old - h
            down = f().item()
            flat[j] = old
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[j].item()
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(an)), (fd, an)
            checked += 1
    assert checked >= 6


def test_build_is_seeded():
    a = build_mechanism(HvaeConfig(), {"domain": 3, "sexlike": 2}, seed=3)
    b = build_mechanism(HvaeConfig(), {"domain": 3, "sexlike": 2}, seed=3)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k


@pytest.mark.slow
def test_trained_generator_beats_untrained_elbo(lab):
    val = lab.split("val")
    fresh = build_mechanism(HvaeConfig(), lab.spec.parent_cardinalities(), seed=0)
    trained = lab.mechanism(0)
    assert evaluate_elbo(trained, val.images, val.parents()) < evaluate_elbo(fresh, val.images, val.parents())
