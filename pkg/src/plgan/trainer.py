"""Alternating least-squares adversarial training of {G, S} against {D, D^t}."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .config import Ablation, TrainConfig, to_flat
from .dataio import Sample, augment_flip, resize_sample
from .geometry import apply_transform
from .hough import hough_loss
from .losses import (LossBreakdown, NonFiniteLossError, geometry_consistency, lsgan_d_loss,
                     lsgan_g_loss, semantic_loss, total_generator_loss)
from .networks import (NetworkBundle, build_bundle, config_hash, load_checkpoint, predict,
                       save_checkpoint)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "adv", "adv_t", "spl", "spl_t", "ht", "ht_t", "pgeo", "sgeo", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[str]):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_at_epoch(e: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` for the first half of training, then linear decay reaching 0 at the last epoch."""
    if not 0 <= e < cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs})")
    half = cfg.epochs // 2
    if e < half:
        return cfg.lr0
    return cfg.lr0 * (1.0 - (e - half + 1) / half)


def batch_tensors(batch: Sequence[Sample]):
    image = torch.from_numpy(np.stack([s.image for s in batch])).permute(0, 3, 1, 2).float().contiguous()
    mask = torch.from_numpy(np.stack([s.mask for s in batch])).float()
    pl = torch.from_numpy(np.stack([s.pl_highlighted for s in batch])).permute(0, 3, 1, 2).float().contiguous()
    return image, mask, pl


def mask_as_image(mask: torch.Tensor) -> torch.Tensor:
    """{0,1} mask (N,H,W) -> 3-channel [-1,1] image, the real sample for the G_only discriminator."""
    return (mask * 2 - 1)[:, None].expand(-1, 3, -1, -1)


def generator_semantic(pl_image: torch.Tensor) -> torch.Tensor:
    """Probability map read directly off the generator output (G_only variant)."""
    return ((pl_image.mean(dim=1) + 1) / 2).clamp(0, 1)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


class Trainer:
    def __init__(self, cfg: TrainConfig, bundle: NetworkBundle | None = None):
        self.cfg = cfg
        self.bundle = bundle if bundle is not None else build_bundle(cfg.generator, cfg.seed, cfg.init)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        g_params = self.bundle.generator_parameters() if cfg.ablation.uses_semantic_decoder \
            else list(self.bundle.generator.parameters())
        d_params = self.bundle.discriminator_parameters() if cfg.ablation.uses_transformed_branch \
            else list(self.bundle.disc.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr0, betas=betas)
        self.opt_d = torch.optim.Adam(d_params, lr=cfg.lr0, betas=betas)
        self.epoch = 0
        self.step = 0

    @property
    def optimizers(self):
        return {"g": self.opt_g, "d": self.opt_d}

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    # ------------------------------------------------------------------ one step

    def train_step(self, batch: Sequence[Sample]) -> LossBreakdown:
        if not batch:
            raise ValueError("empty batch")
        size = self.cfg.image_size
        for s in batch:
            if s.size != (size, size):
                raise ValueError(f"sample {s.id} is {s.size}, expected {size}x{size}")
        self.bundle.train()
        x, m, p = batch_tensors(batch)
        if self.cfg.ablation is Ablation.G_ONLY:
            return self._step_g_only(x, m)
        return self._step_plgan(x, m, p)

    def _update_d(self, d_loss: torch.Tensor) -> None:
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("d_loss", float(d_loss.detach()))
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

    def _update_g(self, parts: LossBreakdown) -> LossBreakdown:
        out = total_generator_loss(parts, self.cfg.effective_weights)
        if not torch.isfinite(torch.as_tensor(out.total)):
            raise NonFiniteLossError("total", float(out.total))
        self.opt_g.zero_grad(set_to_none=True)
        out.total.backward()
        self.opt_g.step()
        self.step += 1
        return out

    def _step_g_only(self, x, m) -> LossBreakdown:
        b = self.bundle
        _, fake = b.generator(x)
        real = mask_as_image(m)

        _set_requires_grad(b.disc.parameters(), True)
        self._update_d(lsgan_d_loss(b.disc(real), b.disc(fake.detach())))

        _set_requires_grad(b.disc.parameters(), False)
        parts = LossBreakdown(adv=lsgan_g_loss(b.disc(fake)), spl=semantic_loss(generator_semantic(fake), m))
        return self._update_g(parts)

    def _step_plgan(self, x, m, p) -> LossBreakdown:
        b, cfg = self.bundle, self.cfg
        kind = cfg.transform
        branch_t = cfg.ablation.uses_transformed_branch
        n = x.shape[0]

        xs = torch.cat([x, apply_transform(x, kind)]) if branch_t else x
        emb, fake_all = b.generator(xs)
        prob_all = b.semantic(emb)
        fake, prob = fake_all[:n], prob_all[:n]
        if branch_t:
            fake_t, prob_t = fake_all[n:], prob_all[n:]
            m_t, p_t = apply_transform(m, kind), apply_transform(p, kind)

        d_params = b.discriminator_parameters()
        _set_requires_grad(d_params, True)
        d_loss = lsgan_d_loss(b.disc(p), b.disc(fake.detach()))
        if branch_t:
            d_loss = d_loss + lsgan_d_loss(b.disc_t(p_t), b.disc_t(fake_t.detach()))
        self._update_d(d_loss)

        _set_requires_grad(d_params, False)
        parts = LossBreakdown(adv=lsgan_g_loss(b.disc(fake)), spl=semantic_loss(prob, m))
        if cfg.ablation.uses_hough:
            parts.ht = hough_loss(m, prob, cfg.hough)
        if branch_t:
            parts.adv_t = lsgan_g_loss(b.disc_t(fake_t))
            parts.spl_t = semantic_loss(prob_t, m_t)
            if cfg.ablation.uses_hough:
                parts.ht_t = hough_loss(m_t, prob_t, cfg.hough)
            parts.pgeo = geometry_consistency(fake, fake_t, kind)
            parts.sgeo = geometry_consistency(prob, prob_t, kind)
        return self._update_g(parts)

    # ------------------------------------------------------------------ inference

    def predict_probs(self, images: torch.Tensor) -> torch.Tensor:
        b = self.bundle
        if self.cfg.ablation is Ablation.G_ONLY:
            was = b.generator.training
            b.generator.eval()
            with torch.no_grad():
                out = generator_semantic(b.generator(images)[1])
            b.generator.train(was)
            return out
        return predict(b.generator, b.semantic, images)

    # ------------------------------------------------------------------ checkpoints

    def meta(self) -> dict:
        flat = to_flat(self.cfg)
        return {"epoch": self.epoch, "step": self.step, "seed": self.cfg.seed,
                "config": flat, "config_hash": config_hash(flat)}

    def save(self, path: str | os.PathLike) -> str:
        save_checkpoint(path, self.bundle, self.meta(), self.optimizers)
        return os.fspath(path)

    @classmethod
    def resume(cls, path: str | os.PathLike, cfg: TrainConfig) -> "Trainer":
        trainer = cls(cfg)
        _, meta = load_checkpoint(path, trainer.bundle, trainer.optimizers)
        trainer.epoch, trainer.step = int(meta["epoch"]), int(meta["step"])
        return trainer


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def prepare_training_samples(samples: Sequence[Sample], cfg: TrainConfig) -> List[Sample]:
    out = [s if s.size == (cfg.image_size,) * 2 else resize_sample(s, cfg.image_size) for s in samples]
    if cfg.augment_flips:
        out = out + [augment_flip(s, "hflip") for s in out] + [augment_flip(s, "vflip") for s in out]
    return out


def fit(samples: Sequence[Sample], cfg: TrainConfig, out_dir: str | os.PathLike,
        resume: str | os.PathLike | None = None,
        on_step: Callable[[dict], None] | None = None) -> str:
    """Train for ``cfg.epochs`` epochs, logging one JSON record per step to
    ``out_dir/train_log.jsonl`` and writing ``out_dir/final.ckpt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_training_samples(samples, cfg)
    if not data:
        raise ValueError("no training samples")
    trainer = Trainer.resume(resume, cfg) if resume else Trainer(cfg)
    log_path = out_dir / "train_log.jsonl"
    last_ckpt: Optional[str] = os.fspath(resume) if resume else None

    with open(log_path, "a" if resume else "w") as log_file:
        for epoch in range(trainer.epoch, cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            trainer.set_lr(lr)
            order = epoch_order(len(data), cfg.seed, epoch)
            for start in range(0, len(order), cfg.batch_size):
                batch = [data[i] for i in order[start:start + cfg.batch_size]]
                try:
                    parts = trainer.train_step(batch)
                except NonFiniteLossError as e:
                    raise TrainingAborted(f"epoch {epoch}, step {trainer.step}: {e}", last_ckpt) from e
                record = {"step": trainer.step, "epoch": epoch, "lr": lr, **parts.as_floats()}
                log_file.write(json.dumps({k: record[k] for k in LOG_FIELDS}) + "\n")
                if on_step:
                    on_step(record)
            log_file.flush()
            trainer.epoch = epoch + 1
            if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0 and trainer.epoch < cfg.epochs:
                last_ckpt = trainer.save(out_dir / f"epoch_{trainer.epoch:04d}.ckpt")
            log.info("epoch %d/%d done (lr %.3g)", trainer.epoch, cfg.epochs, lr)
    return trainer.save(out_dir / "final.ckpt")


def trainer_from_checkpoint(path: str | os.PathLike) -> Trainer:
    """Rebuild a Trainer (networks and config) from a checkpoint for inference."""
    from .config import from_flat
    from .networks import read_checkpoint

    meta, _ = read_checkpoint(path)
    cfg, _ = from_flat(meta["config"])
    trainer = Trainer(cfg)
    load_checkpoint(path, trainer.bundle)
    trainer.epoch, trainer.step = int(meta["epoch"]), int(meta["step"])
    return trainer
