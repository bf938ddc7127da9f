"""Shared training-loop plumbing and the prosody codec trainer."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import MultimodalDiscriminator, feature_matching, lsgan_losses
from .autodiff import Tensor
from .codec import ProsodyCodec, TrackBatch, masked_inputs, phoneme_batch, prosody_losses
from .corpus import Utterance
from .nn import AdamW, Module


class Trainer:
    """Owns modules, their optimisers, an RNG and a step counter; all of it round-trips through tensors."""

    log_columns: tuple[str, ...] = ("step", "loss")

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.modules: dict[str, Module] = {}
        self.optimizers: dict[str, AdamW] = {}
        self.history: list[dict[str, float]] = []

    def rng_state(self) -> str:
        return json.dumps(self.rng.bit_generator.state)

    def set_rng_state(self, state: str) -> None:
        self.rng.bit_generator.state = json.loads(state)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.modules.items():
            for k, v in mod.state_dict().items():
                out[f"{name}.{k}"] = v
        for name, opt in self.optimizers.items():
            for k, v in opt.state_dict().items():
                out[f"optim.{name}.{k}"] = v
        out.update(self.extra_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, mod in self.modules.items():
            pre = f"{name}."
            mod.load_state_dict({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
        for name, opt in self.optimizers.items():
            pre = f"optim.{name}."
            opt.load_state_dict({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
        self.load_extra_tensors(tensors)

    def extra_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_extra_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        pass

    def train_step(self) -> dict[str, float]:
        raise NotImplementedError

    def run(self, steps: int, log: Callable[[dict[str, float]], None] | None = None) -> list[dict[str, float]]:
        rows = []
        for _ in range(steps):
            row = self.train_step()
            self.step_count += 1
            row = {"step": float(self.step_count), **row}
            for k, v in row.items():
                if not np.isfinite(v):
                    raise ad.NonFiniteError(f"non-finite {k} at step {self.step_count}")
            rows.append(row)
            self.history.append(row)
            if log is not None:
                log(row)
        return rows


def sample_batch(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=min(batch, n), replace=False)


@dataclass(frozen=True)
class CodecTrainConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    mask_prob: float = 0.5
    adversarial: bool = False
    adv_warmup: int = 1000
    adv_weight: float = 1.0
    fm_weight: float = 1.0
    disc_blocks: int = 2


class CodecTrainer(Trainer):
    log_columns = ("step", "loss", "L_dur", "L_f0", "L_n", "aux", "adv_g", "adv_d", "fm", "reseeded")

    def __init__(self, codec: ProsodyCodec, utterances: Sequence[Utterance], cfg: CodecTrainConfig, seed: int = 0):
        super().__init__(seed)
        self.codec = codec
        self.utts = list(utterances)
        self.cfg = cfg
        self.modules["codec"] = codec
        self.optimizers["codec"] = AdamW(list(codec.named_parameters()), cfg.lr, (cfg.beta1, cfg.beta2),
                                         weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
        self.disc_dur = self.disc_pe = None
        if cfg.adversarial:
            drng = np.random.default_rng([seed, 0xD15C])
            cc = codec.cfg.conformer()
            d = codec.cfg.d_model
            self.disc_dur = MultimodalDiscriminator(drng, 1, [d, d], cc, cfg.disc_blocks)
            self.disc_pe = MultimodalDiscriminator(drng, 2, [d, d], cc, cfg.disc_blocks)
            self.modules["disc_dur"] = self.disc_dur
            self.modules["disc_pe"] = self.disc_pe
            params = list(self.disc_dur.named_parameters("dur.")) + list(self.disc_pe.named_parameters("pe."))
            self.optimizers["disc"] = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2),
                                            weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)

    def extra_tensors(self):
        if self.codec.rvq is None:
            return {}
        return {"rvq_idle": self.codec.rvq._idle.astype(np.float64)}

    def load_extra_tensors(self, tensors):
        if self.codec.rvq is not None and "rvq_idle" in tensors:
            self.codec.rvq._idle[...] = tensors["rvq_idle"].astype(np.int64)

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        pick = sample_batch(self.rng, len(self.utts), cfg.batch)
        utts = [self.utts[i] for i in pick]
        inputs = masked_inputs(utts, self.rng, cfg.mask_prob)
        targets = [u.track for u in utts]
        out = self.codec.forward(inputs, [u.phonemes for u in utts], targets)
        tb = TrackBatch.from_tracks(targets)
        losses = prosody_losses(tb, out.decoded)
        loss = losses.combined()
        aux = out.quant.aux if out.quant is not None else Tensor(0.0)
        loss = loss + aux
        row = {"L_dur": losses.dur.item(), "L_f0": losses.f0.item(), "L_n": losses.n.item(), "aux": aux.item(),
               "adv_g": 0.0, "adv_d": 0.0, "fm": 0.0}

        codec_params = self.codec.parameters()
        if self.disc_dur is not None and self.step_count >= cfg.adv_warmup:
            g_adv, d_loss, fm = self._adversarial_terms(out, tb, [u.phonemes for u in utts])
            loss = loss + ad.scale(g_adv, cfg.adv_weight) + ad.scale(fm, cfg.fm_weight)
            row.update(adv_g=g_adv.item(), adv_d=d_loss.item(), fm=fm.item())
            disc_params = self.disc_dur.parameters() + self.disc_pe.parameters()
            self.optimizers["disc"].step(ad.backward(d_loss, disc_params))
        grads = ad.backward(loss, codec_params)
        self.optimizers["codec"].step(grads)
        reseeded = 0
        if self.codec.rvq is not None:
            self.codec.rvq.pin_zero()
            mask = None if self.codec.cfg.fixed_length else out.latent_mask
            reseeded = self.codec.rvq.update_usage(out.quant.codes, out.quant.residuals, mask,
                                                   self.codec.cfg.dead_code_steps, self.rng)
        row["loss"] = loss.item()
        row["reseeded"] = float(reseeded)
        return row

    def _adversarial_terms(self, out, tb: TrackBatch, phonemes):
        dec = out.decoded
        ids, pm = phoneme_batch(phonemes)
        with ad.no_grad():
            text = self.codec.decoder.embed_text(ids)
        conds = [(Tensor(out.style.data), out.latent_mask), (text, pm)]
        real_d = Tensor(tb.durations.astype(np.float64)[..., None])
        real_pe = Tensor(np.stack([tb.pitch, tb.energy], -1))
        fake_d = dec.durations.reshape(*dec.durations.shape, 1)
        fake_pe = ad.concat([dec.pitch.reshape(*dec.pitch.shape, 1), dec.energy.reshape(*dec.energy.shape, 1)], -1)

        d_total = None
        g_total = None
        fm_total = None
        for disc, real, fake, m in ((self.disc_dur, real_d, fake_d, tb.phoneme_valid),
                                    (self.disc_pe, real_pe, fake_pe, tb.frame_valid)):
            r = disc(real, m, conds)
            f_det = disc(Tensor(fake.data), m, conds)
            _, d_loss = lsgan_losses(r.logits, f_det.logits, r.mask, f_det.mask)
            disc.set_requires_grad(False)
            f = disc(fake, m, conds)
            with ad.no_grad():
                r_feats = disc(real, m, conds).features
            disc.set_requires_grad(True)
            g_loss, _ = lsgan_losses(r.logits.detach(), f.logits, r.mask, f.mask)
            fm = feature_matching(r_feats, f.features, f.mask)
            d_total = d_loss if d_total is None else d_total + d_loss
            g_total = g_loss if g_total is None else g_total + g_loss
            fm_total = fm if fm_total is None else fm_total + fm
        return g_total, d_total, fm_total


def clone_module(mod: Module) -> Module:
    return copy.deepcopy(mod)
