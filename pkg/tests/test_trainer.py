import hashlib
import json

import numpy as np
import pytest
import torch

from plgan.config import TrainConfig
from plgan.dataio import synth_thin_lines
from plgan.losses import LossWeights
from plgan.networks import GeneratorSpec, read_checkpoint
from plgan.trainer import LOG_FIELDS, Trainer, TrainingAborted, fit, lr_at_epoch, trainer_from_checkpoint

SMALL = GeneratorSpec(base_width=8, n_resblocks=1)


def cfg(**kw):
    base = dict(epochs=2, image_size=32, generator=SMALL, checkpoint_every=0, seed=0, lr0=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return synth_thin_lines(4, 32, 1, seed=3)


def digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ schedule

def test_lr_schedule_values():
    c = TrainConfig()
    assert lr_at_epoch(0, c) == 1e-4
    assert lr_at_epoch(99, c) == 1e-4
    assert lr_at_epoch(100, c) == pytest.approx(1e-4 * 0.99)
    assert lr_at_epoch(149, c) == pytest.approx(5e-5, abs=1e-15)
    assert lr_at_epoch(199, c) == pytest.approx(0.0, abs=1e-12)


def test_lr_schedule_monotone_and_range():
    c = TrainConfig(epochs=10)
    lrs = [lr_at_epoch(e, c) for e in range(10)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at_epoch(10, c)
    with pytest.raises(ValueError):
        lr_at_epoch(-1, c)


# ------------------------------------------------------------------ steps

def test_step_updates_discriminator(samples):
    t = Trainer(cfg())
    before = digest(t.bundle.disc.parameters())
    t.train_step(samples[:1])
    assert digest(t.bundle.disc.parameters()) != before


def test_two_optimizer_separation(samples):
    t = Trainer(cfg())
    b = t.bundle
    seen = []

    def wrap(opt, frozen):
        inner = opt.step

        def step(*a, **kw):
            h = digest(frozen())
            out = inner(*a, **kw)
            seen.append(h == digest(frozen()))
            return out
        opt.step = step

    wrap(t.opt_g, lambda: b.discriminator_parameters())
    wrap(t.opt_d, lambda: b.generator_parameters())
    t.train_step(samples[:2])
    assert seen == [True, True]


def test_every_generator_tensor_gets_gradient(samples):
    t = Trainer(cfg())
    grads_ok = []
    inner = t.opt_g.step

    def step(*a, **kw):
        for name, p in list(t.bundle.generator.named_parameters()) + list(t.bundle.semantic.named_parameters()):
            grads_ok.append((name, p.grad is not None and bool(torch.count_nonzero(p.grad))))
        return inner(*a, **kw)
    t.opt_g.step = step
    t.train_step(samples[:1])
    dead = [n for n, ok in grads_ok if not ok]
    assert grads_ok and not dead


@pytest.mark.parametrize("ablation", ["G_S", "G_S_HT", "full"])
def test_ablation_switches(ablation, samples):
    parts = Trainer(cfg(ablation=ablation)).train_step(samples[:1]).as_floats()
    assert parts["adv"] > 0 and parts["spl"] > 0
    assert (parts["ht"] > 0) == (ablation != "G_S")
    has_t = ablation == "full"
    for k in ("adv_t", "spl_t", "pgeo", "sgeo"):
        assert (parts[k] > 0) == has_t, k
    assert (parts["ht_t"] > 0) == has_t


def test_g_only_variant(samples):
    t = Trainer(cfg(ablation="G_only"))
    s_before = digest(t.bundle.semantic.parameters())
    dt_before = digest(t.bundle.disc_t.parameters())
    parts = t.train_step(samples[:1]).as_floats()
    assert parts["adv"] > 0 and parts["spl"] > 0
    assert parts["ht"] == parts["pgeo"] == parts["sgeo"] == parts["adv_t"] == 0
    assert digest(t.bundle.semantic.parameters()) == s_before
    assert digest(t.bundle.disc_t.parameters()) == dt_before
    probs = t.predict_probs(torch.zeros(1, 3, 32, 32))
    assert probs.shape == (1, 32, 32) and probs.min() >= 0 and probs.max() <= 1


def test_total_recomputable(samples):
    c = cfg()
    parts = Trainer(c).train_step(samples[:1]).as_floats()
    w = c.effective_weights
    expected = (parts["adv"] + parts["adv_t"] + w.lambda_spl * (parts["spl"] + parts["spl_t"])
                + w.lambda_ht * (parts["ht"] + parts["ht_t"]) + w.lambda_geo * (parts["pgeo"] + parts["sgeo"]))
    assert parts["total"] == pytest.approx(expected, rel=1e-6)


def test_first_step_deterministic(samples):
    a = Trainer(cfg(seed=5)).train_step(samples[:2]).as_floats()
    b = Trainer(cfg(seed=5)).train_step(samples[:2]).as_floats()
    assert a == b


def test_adversarial_gradient_with_zero_weights(samples):
    t = Trainer(cfg(weights=LossWeights(0, 0, 0)))
    for p in t.bundle.discriminator_parameters():
        p.requires_grad_(False)
    t.opt_d.step = lambda *a, **k: None  # frozen discriminator
    seen = []
    inner = t.opt_g.step

    def step(*a, **kw):
        seen.append(sum(float(p.grad.abs().sum()) for p in t.bundle.generator.parameters() if p.grad is not None))
        return inner(*a, **kw)
    t.opt_g.step = step
    parts = t.train_step(samples[:1]).as_floats()
    assert parts["total"] == pytest.approx(parts["adv"] + parts["adv_t"])
    assert seen[0] > 0


def test_rejects_wrong_size(samples):
    t = Trainer(cfg(image_size=64))
    with pytest.raises(ValueError):
        t.train_step(samples[:1])
    with pytest.raises(ValueError):
        t.train_step([])


# ------------------------------------------------------------------ fit

def read_log(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def test_fit_two_epochs(tmp_path):
    data = synth_thin_lines(8, 32, 1, seed=1)
    path = fit(data, cfg(batch_size=2, checkpoint_every=10), tmp_path)
    assert path.endswith("final.ckpt")
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["final.ckpt"]
    records = read_log(tmp_path / "train_log.jsonl")
    assert len(records) == 8
    assert all(tuple(r) == LOG_FIELDS for r in records)
    assert [r["step"] for r in records] == list(range(1, 9))
    meta, _ = read_checkpoint(path)
    assert meta["epoch"] == 2 and meta["step"] == 8 and meta["config"]["epochs"] == 2
    assert len(meta["config_hash"]) == 16


def test_fit_applies_schedule(tmp_path, samples):
    seen = []
    fit(samples, cfg(epochs=4, batch_size=2), tmp_path, on_step=seen.append)
    c = cfg(epochs=4)
    for r in seen:
        assert r["lr"] == lr_at_epoch(r["epoch"], c)


def test_fit_resume_is_bitwise(tmp_path, samples):
    c = cfg(epochs=2, checkpoint_every=1, batch_size=2)
    fit(samples, c, tmp_path / "full")
    full = read_log(tmp_path / "full" / "train_log.jsonl")
    assert (tmp_path / "full" / "epoch_0001.ckpt").exists()

    fit(samples, c, tmp_path / "resumed", resume=tmp_path / "full" / "epoch_0001.ckpt")
    resumed = read_log(tmp_path / "resumed" / "train_log.jsonl")
    assert resumed == [r for r in full if r["epoch"] == 1]
    a, b = read_checkpoint(tmp_path / "full" / "final.ckpt")[1], read_checkpoint(tmp_path / "resumed" / "final.ckpt")[1]
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_fit_aborts_on_nan(tmp_path, samples):
    bad = [type(s)(s.id, np.full_like(s.image, np.nan), s.mask, s.pl_highlighted) for s in samples]
    with pytest.raises(TrainingAborted) as err:
        fit(bad, cfg(), tmp_path)
    assert err.value.checkpoint is None


def test_fit_abort_keeps_last_checkpoint(tmp_path, samples, monkeypatch):
    calls = {"n": 0}
    real = Trainer.train_step

    def flaky(self, batch):
        calls["n"] += 1
        if self.epoch >= 1:
            from plgan.losses import NonFiniteLossError
            raise NonFiniteLossError("total", float("nan"))
        return real(self, batch)
    monkeypatch.setattr(Trainer, "train_step", flaky)
    with pytest.raises(TrainingAborted) as err:
        fit(samples, cfg(epochs=4, checkpoint_every=1, batch_size=4), tmp_path)
    assert err.value.checkpoint.endswith("epoch_0001.ckpt")
    assert (tmp_path / "epoch_0001.ckpt").exists()


def test_trainer_from_checkpoint(tmp_path, samples):
    path = fit(samples, cfg(batch_size=4), tmp_path)
    t = trainer_from_checkpoint(path)
    assert t.cfg.image_size == 32 and t.epoch == 2
    x = torch.from_numpy(samples[0].image).permute(2, 0, 1)[None]
    p = t.predict_probs(x)
    assert p.shape == (1, 32, 32) and (p > 0).all() and (p < 1).all()


def test_augment_flips_triples_data(tmp_path, samples):
    fit(samples, cfg(batch_size=4, augment_flips=True), tmp_path)
    assert len(read_log(tmp_path / "train_log.jsonl")) == 2 * 3
