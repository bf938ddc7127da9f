"""One-step student distillation of the guided teacher sampler, plus CD and ADD baselines.

The student shares the denoiser architecture.  Its level slot carries the
normalised guidance scale and its latent input carries the initial noise, so a
single forward pass maps ``(xi, omega, prompt, text)`` straight to a latent.
"""

from __future__ import annotations

import copy
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import MultimodalDiscriminator, lsgan_losses
from .autodiff import Tensor
from .codec import LAMBDA_F0, LAMBDA_N, DecoderOutput, ProsodyCodec
from .corpus import Utterance
from .diffusion import (
    GUIDANCE_MAX,
    Conditions,
    Denoiser,
    LatentSet,
    LatentStats,
    add_noise,
    ddim_move,
    sample,
    schedule,
)
from .nn import AdamW, Module, sinusoidal_embed
from .track import ProsodyTrack
from .training import Trainer, sample_batch

CD_EMA = 0.999943
ADD_TAU = 0.2  # step 200 of a 1000-step grid
ADD_STEPS = 4


@dataclass(frozen=True)
class DistillConfig:
    count: int = 2000
    omega_min: float = 1.0
    omega_max: float = 15.0
    teacher_steps: int = 100
    eval_omega: float = 5.0
    pretrain_steps: int = 2000
    epochs: int = 10
    batch: int = 32
    lr: float = 1e-4
    lr_decay: bool = False  # simulation student: decay linearly to zero over the configured epochs
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    lambda_dur: float = 1.0
    lambda_f0: float = LAMBDA_F0
    lambda_n: float = LAMBDA_N
    cd_steps: int = 500
    cd_grid: int = 20
    cd_ema: float = CD_EMA
    add_steps: int = 500
    add_tau: float = ADD_TAU
    add_student_steps: int = ADD_STEPS
    add_disc_blocks: int = 2
    add_adv_weight: float = 0.1


@contextmanager
def frozen(*modules: Module):
    flags = [[p.requires_grad for p in m.parameters()] for m in modules]
    for m in modules:
        m.set_requires_grad(False)
    try:
        yield
    finally:
        for m, fl in zip(modules, flags):
            for p, f in zip(m.parameters(), fl):
                p.requires_grad = f


# ---------------------------------------------------------------- student maps


def student_latent(student: Denoiser, xi, omega, cond: Conditions) -> Tensor:
    """H(xi; omega, prompt, text) in standardised latent space (differentiable)."""
    return student(xi, np.asarray(omega, dtype=np.float64) / GUIDANCE_MAX, cond)


def pretrained_latent(student: Denoiser, cond: Conditions, K: int, dim: int) -> Tensor:
    """H' mode: level slot 0 and zero noise input."""
    return student(np.zeros((len(cond), K, dim)), 0.0, cond)


def student_from_pretrained(pretrained: Denoiser) -> Denoiser:
    """Copy of H' that starts out computing exactly H' for every noise input and guidance scale.

    H' only ever saw a zero noise input and level 0, so its noise projection and level
    projection weights carry nothing learned.  Zeroing them (and folding the level-0
    embedding into the bias) makes the student's initial output independent of (xi, omega);
    both inputs then become live once training moves the weights away from zero.
    """
    student = copy.deepcopy(pretrained)
    student.latent_proj.weight.data[...] = 0.0
    lp = student.level_proj
    lp.bias.data[...] = sinusoidal_embed(0.0, lp.weight.shape[0]) @ lp.weight.data + lp.bias.data
    lp.weight.data[...] = 0.0
    return student


def consistency_fn(model: Denoiser, h, tau, omega, cond: Conditions) -> Tensor:
    """f(h, tau) = alpha h - sigma F(h, tau, omega); reduces to h at tau = 0."""
    h = ad.as_tensor(h)
    a, s = schedule(np.broadcast_to(np.asarray(tau, dtype=np.float64), (h.shape[0],)))
    v = model(h, tau, cond, guidance=np.broadcast_to(omega, (h.shape[0],)))
    return ad.mul(h, Tensor(a[:, None, None])) - ad.mul(v, Tensor(s[:, None, None]))


def multistep_sample(model: Denoiser, xi: np.ndarray, omega, cond: Conditions, steps: int) -> np.ndarray:
    """Few-step DDIM with a guidance-embedded student (no separate null pass)."""
    h = xi
    g = np.broadcast_to(np.asarray(omega, dtype=np.float64), (xi.shape[0],))
    with ad.no_grad():
        for n in range(steps, 0, -1):
            v = model(h, n / steps, cond, guidance=g).data
            h = ddim_move(h, v, n / steps, (n - 1) / steps)
    return h


# ---------------------------------------------------------------- decoder-space loss


def decode_latent(codec: ProsodyCodec, stats: LatentStats, latent, cond: Conditions,
                  durations: np.ndarray | None = None) -> DecoderOutput:
    """Decode a standardised latent; ``durations`` None uses the decoder's rounded predictions."""
    h = stats.destandardize(ad.as_tensor(latent))
    mask = np.ones(h.shape[:2], bool)
    return codec.decoder(h, mask, cond.text, cond.text_mask, durations)


def decoder_l1(a: DecoderOutput, b: DecoderOutput) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head mean L1 between two decodes that share upsampling durations."""
    dur = ad.l1_loss(a.durations, Tensor(b.durations.data), a.phoneme_mask)
    f0 = ad.l1_loss(a.pitch, Tensor(b.pitch.data), a.frame_mask)
    n = ad.l1_loss(a.energy, Tensor(b.energy.data), a.frame_mask)
    return dur, f0, n


def distill_loss(codec: ProsodyCodec, stats: LatentStats, student_out: Tensor, teacher_latent: np.ndarray,
                 cond: Conditions, cfg: DistillConfig = DistillConfig(),
                 teacher_decoded: DecoderOutput | None = None) -> Tensor:
    """lambda-weighted decoder-output L1 between student and teacher latents."""
    with frozen(codec):
        if teacher_decoded is None:
            with ad.no_grad():
                teacher_decoded = decode_latent(codec, stats, teacher_latent, cond)
        pred = decode_latent(codec, stats, student_out, cond, teacher_decoded.up_durations)
        dur, f0, n = decoder_l1(pred, teacher_decoded)
    return ad.scale(dur, cfg.lambda_dur) + ad.scale(f0, cfg.lambda_f0) + ad.scale(n, cfg.lambda_n)


# ---------------------------------------------------------------- distill set


@dataclass
class DistillSet:
    utt_index: np.ndarray  # (M,) row into ``cond``
    omega: np.ndarray  # (M,)
    xi: np.ndarray  # (M, K, d)
    latent: np.ndarray  # (M, K, d) standardised teacher output
    cond: Conditions  # one row per record

    def __len__(self) -> int:
        return self.omega.size

    def subset(self, n: int) -> DistillSet:
        return DistillSet(self.utt_index[:n], self.omega[:n], self.xi[:n], self.latent[:n], self.cond.take(np.arange(n)))


def generate_distill_set(teacher: Denoiser, utts: Sequence[Utterance], count: int, seed: int,
                         cfg: DistillConfig = DistillConfig(), batch: int = 64) -> DistillSet:
    K, d = teacher.cfg.K, teacher.cfg.latent_dim
    if K == 0:
        raise ValueError("distillation needs a fixed-length latent")
    rng = np.random.default_rng([seed, 0xD157])
    idx = rng.integers(0, len(utts), count)
    omega = rng.uniform(cfg.omega_min, cfg.omega_max, count)
    xi = rng.standard_normal((count, K, d))
    cond = Conditions.from_utterances([utts[i] for i in idx])
    out = np.empty_like(xi)
    for s in range(0, count, batch):
        sl = slice(s, min(s + batch, count))
        out[sl] = sample(teacher, xi[sl], cond.take(np.arange(sl.start, sl.stop)), omega[sl], cfg.teacher_steps)
    return DistillSet(idx, omega, xi, out, cond)


_MAGIC = b"TVDS"
_FILE_HEADER = struct.Struct("<4sII")
_REC_HEADER = struct.Struct("<IdIIIII")


def save_distill_set(ds: DistillSet, path) -> None:
    """Record-framed little-endian file: header, then per record a byte length and payload."""
    p = ds.cond.prompt
    chunks = [_FILE_HEADER.pack(_MAGIC, 1, len(ds))]
    K, d = ds.xi.shape[1:]
    for i in range(len(ds)):
        N = int(ds.cond.text_mask[i].sum())
        T = int(p.frame_valid[i].sum())
        P = int(p.phoneme_valid[i].sum())
        body = b"".join([
            _REC_HEADER.pack(int(ds.utt_index[i]), float(ds.omega[i]), K, d, N, P, T),
            ds.xi[i].astype("<f8").tobytes(),
            ds.latent[i].astype("<f8").tobytes(),
            ds.cond.text[i, :N].astype("<i4").tobytes(),
            p.durations[i, :P].astype("<i4").tobytes(),
            p.pitch[i, :T].astype("<f8").tobytes(),
            p.energy[i, :T].astype("<f8").tobytes(),
        ])
        chunks.append(struct.pack("<I", len(body)) + body)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_distill_set(path) -> DistillSet:
    raw = Path(path).read_bytes()
    magic, version, count = _FILE_HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path} is not a distill-set file")
    off = _FILE_HEADER.size
    idx, omega, xis, lats, texts, prompts = [], [], [], [], [], []
    for _ in range(count):
        (size,) = struct.unpack_from("<I", raw, off)
        off += 4
        rec = memoryview(raw)[off : off + size]
        off += size
        u, w, K, d, N, P, T = _REC_HEADER.unpack_from(rec, 0)
        o = _REC_HEADER.size

        def take(dtype, n):
            nonlocal o
            arr = np.frombuffer(rec, dtype, n, o)
            o += arr.nbytes
            return arr

        idx.append(u)
        omega.append(w)
        xis.append(take("<f8", K * d).reshape(K, d))
        lats.append(take("<f8", K * d).reshape(K, d))
        texts.append(take("<i4", N).astype(np.int64))
        dur = take("<i4", P).astype(np.int64)
        prompts.append(ProsodyTrack(take("<f8", T).copy(), take("<f8", T).copy(), dur))
    return DistillSet(np.array(idx, np.int64), np.array(omega), np.stack(xis), np.stack(lats),
                      Conditions.build(prompts, texts))


# ---------------------------------------------------------------- trainers


def _adamw(model: Module, cfg: DistillConfig) -> AdamW:
    return AdamW(list(model.named_parameters()), cfg.lr, (0.0, 0.99), weight_decay=cfg.weight_decay,
                 clip_norm=cfg.clip_norm)


class PretrainTrainer(Trainer):
    """H': regress the standardised style latent from (prompt, text) with level 0 and zero noise."""

    def __init__(self, student: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0):
        super().__init__(seed)
        if data.x0.shape[1] != student.cfg.K:
            raise ValueError("pre-training needs fixed-length latents matching the student")
        self.student, self.data, self.cfg = student, data, cfg
        self.modules["student"] = student
        self.optimizers["student"] = _adamw(student, cfg)

    def train_step(self):
        pick = sample_batch(self.rng, len(self.data), self.cfg.batch)
        x0 = self.data.x0[pick]
        out = pretrained_latent(self.student, self.data.cond.take(pick), x0.shape[1], x0.shape[2])
        loss = ad.l1_loss(out, Tensor(x0))
        self.optimizers["student"].step(ad.backward(loss, self.student.parameters()))
        return {"loss": loss.item()}


def pretrain_student(student: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0,
                     log=None) -> PretrainTrainer:
    tr = PretrainTrainer(student, data, cfg, seed)
    tr.run(cfg.pretrain_steps, log)
    return tr


class StudentTrainer(Trainer):
    """Simulation-based distillation over a fixed teacher-generated set."""

    def __init__(self, student: Denoiser, dset: DistillSet, codec: ProsodyCodec, stats: LatentStats,
                 cfg: DistillConfig, seed: int = 0):
        super().__init__(seed)
        self.student, self.dset, self.codec, self.stats, self.cfg = student, dset, codec, stats, cfg
        self.modules["student"] = student
        self.optimizers["student"] = _adamw(student, cfg)
        self._order = np.zeros(0, np.int64)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.dset) // self.cfg.batch)

    def extra_tensors(self):
        return {"order": self._order.astype(np.float64)}

    def load_extra_tensors(self, tensors):
        if "order" in tensors:
            self._order = tensors["order"].astype(np.int64)

    def train_step(self):
        if self._order.size == 0:
            self._order = self.rng.permutation(len(self.dset))
        pick, self._order = self._order[: self.cfg.batch], self._order[self.cfg.batch :]
        ds = self.dset
        cond = ds.cond.take(pick)
        out = student_latent(self.student, ds.xi[pick], ds.omega[pick], cond)
        loss = distill_loss(self.codec, self.stats, out, ds.latent[pick], cond, self.cfg)
        if self.cfg.lr_decay:
            total = self.cfg.epochs * self.steps_per_epoch
            self.optimizers["student"].lr = self.cfg.lr * max(0.0, 1.0 - self.step_count / total)
        self.optimizers["student"].step(ad.backward(loss, self.student.parameters()))
        return {"loss": loss.item()}


def train_student(student: Denoiser, dset: DistillSet, codec: ProsodyCodec, stats: LatentStats,
                  cfg: DistillConfig, seed: int = 0, log=None) -> StudentTrainer:
    tr = StudentTrainer(student, dset, codec, stats, cfg, seed)
    tr.run(cfg.epochs * tr.steps_per_epoch, log)
    return tr


def ema_update(target: Module, online: Module, mu: float) -> None:
    if not 0.0 < mu < 1.0:
        raise ValueError("EMA rate must lie in (0, 1)")
    for t, o in zip(target.parameters(), online.parameters()):
        t.data[...] = mu * t.data + (1.0 - mu) * o.data


class ConsistencyTrainer(Trainer):
    """Guided latent consistency distillation with an EMA target and one teacher DDIM solver step."""

    def __init__(self, teacher: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0):
        super().__init__(seed)
        self.teacher, self.data, self.cfg = teacher, data, cfg
        self.student = copy.deepcopy(teacher)
        self.target = copy.deepcopy(teacher)
        self.target.set_requires_grad(False)
        self.modules["student"] = self.student
        self.modules["target"] = self.target
        self.optimizers["student"] = _adamw(self.student, cfg)

    def train_step(self):
        cfg = self.cfg
        pick = sample_batch(self.rng, len(self.data), cfg.batch)
        x0 = self.data.x0[pick]
        cond = self.data.cond.take(pick)
        B = len(pick)
        omega = self.rng.uniform(cfg.omega_min, cfg.omega_max, B)
        n = self.rng.integers(1, cfg.cd_grid + 1, B)
        tau, tau_prev = n / cfg.cd_grid, (n - 1) / cfg.cd_grid
        h = add_noise(x0, self.rng.standard_normal(x0.shape), tau)
        v = self.teacher.velocity(h, tau, cond, omega)
        h_prev = ddim_move(h, v, tau, tau_prev)
        with ad.no_grad():
            target = consistency_fn(self.target, h_prev, tau_prev, omega, cond).data
        pred = consistency_fn(self.student, h, tau, omega, cond)
        loss = ad.l1_loss(pred, Tensor(target))
        self.optimizers["student"].step(ad.backward(loss, self.student.parameters()))
        ema_update(self.target, self.student, cfg.cd_ema)
        return {"loss": loss.item()}


def consistency_distill(teacher: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0,
                        log=None) -> ConsistencyTrainer:
    tr = ConsistencyTrainer(teacher, data, cfg, seed)
    tr.run(cfg.cd_steps, log)
    return tr


def consistency_sample(model: Denoiser, xi: np.ndarray, omega, cond: Conditions) -> np.ndarray:
    with ad.no_grad():
        return consistency_fn(model, xi, 1.0, np.broadcast_to(omega, (xi.shape[0],)), cond).data


class AdversarialDistillTrainer(Trainer):
    """Few-step student trained on teacher x0 targets plus an LSGAN term on re-noised latents."""

    def __init__(self, teacher: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0):
        super().__init__(seed)
        self.teacher, self.data, self.cfg = teacher, data, cfg
        self.student = copy.deepcopy(teacher)
        tc = teacher.cfg
        drng = np.random.default_rng([seed, 0xADD])
        self.disc = MultimodalDiscriminator(drng, tc.latent_dim, [tc.d_model, tc.d_model], tc.conformer(),
                                            cfg.add_disc_blocks)
        self.modules["student"] = self.student
        self.modules["disc"] = self.disc
        self.optimizers["student"] = _adamw(self.student, cfg)
        self.optimizers["disc"] = _adamw(self.disc, cfg)

    def train_step(self):
        cfg = self.cfg
        pick = sample_batch(self.rng, len(self.data), cfg.batch)
        x0 = self.data.x0[pick]
        cond = self.data.cond.take(pick)
        B = len(pick)
        omega = self.rng.uniform(cfg.omega_min, cfg.omega_max, B)
        n = self.rng.integers(1, cfg.add_student_steps + 1, B)
        tau = n / cfg.add_student_steps
        h = add_noise(x0, self.rng.standard_normal(x0.shape), tau)
        fake = consistency_fn(self.student, h, tau, omega, cond)  # student x0 estimate

        a, s = schedule(cfg.add_tau)
        eps = Tensor(self.rng.standard_normal(x0.shape))
        fake_noisy = ad.scale(fake, a) + ad.scale(eps, s)
        real_noisy = Tensor(add_noise(x0, self.rng.standard_normal(x0.shape), cfg.add_tau))
        v_t = self.teacher.velocity(fake_noisy.data, cfg.add_tau, cond, omega)
        target = a * fake_noisy.data - s * v_t

        with ad.no_grad():
            feats = self.teacher.condition_features(cond)
        conds = [(Tensor(f.data), m) for f, m in feats]
        ones = np.ones(x0.shape[:2], bool)
        r = self.disc(real_noisy, ones, conds)
        f_det = self.disc(Tensor(fake_noisy.data), ones, conds)
        _, d_loss = lsgan_losses(r.logits, f_det.logits, r.mask, f_det.mask)
        self.optimizers["disc"].step(ad.backward(d_loss, self.disc.parameters()))

        with frozen(self.disc):
            f = self.disc(fake_noisy, ones, conds)
        g_loss, _ = lsgan_losses(Tensor(np.ones(f.logits.shape)), f.logits, f.mask, f.mask)
        distill = ad.mse_loss(fake, Tensor(target))
        loss = distill + ad.scale(g_loss, cfg.add_adv_weight)
        self.optimizers["student"].step(ad.backward(loss, self.student.parameters()))
        return {"loss": loss.item(), "distill": distill.item(), "adv_g": g_loss.item(), "adv_d": d_loss.item()}


def adversarial_distill(teacher: Denoiser, data: LatentSet, cfg: DistillConfig, seed: int = 0,
                        log=None) -> AdversarialDistillTrainer:
    tr = AdversarialDistillTrainer(teacher, data, cfg, seed)
    tr.run(cfg.add_steps, log)
    return tr


# ---------------------------------------------------------------- evaluation


LatentFn = Callable[[np.ndarray, float, Conditions], np.ndarray]


def one_step_fn(student: Denoiser) -> LatentFn:
    def fn(xi, omega, cond):
        with ad.no_grad():
            return student_latent(student, xi, np.full(xi.shape[0], omega), cond).data
    return fn


def pretrained_fn(student: Denoiser) -> LatentFn:
    def fn(xi, omega, cond):
        with ad.no_grad():
            return pretrained_latent(student, cond, xi.shape[1], xi.shape[2]).data
    return fn


def consistency_latent_fn(model: Denoiser) -> LatentFn:
    return lambda xi, omega, cond: consistency_sample(model, xi, omega, cond)


def add_latent_fn(model: Denoiser, steps: int = ADD_STEPS) -> LatentFn:
    return lambda xi, omega, cond: multistep_sample(model, xi, omega, cond, steps)


def teacher_fn(teacher: Denoiser, L: int = 100) -> LatentFn:
    return lambda xi, omega, cond: sample(teacher, xi, cond, omega, L)


def decoded_metrics(codec: ProsodyCodec, stats: LatentStats, teacher_latent: np.ndarray, other_latent: np.ndarray,
                    cond: Conditions) -> tuple[float, float, float]:
    """Mean decoded-duration, pitch and energy L1 between two latents (teacher durations for upsampling)."""
    with ad.no_grad():
        t = decode_latent(codec, stats, teacher_latent, cond)
        o = decode_latent(codec, stats, other_latent, cond, t.up_durations)
        dur, f0, n = decoder_l1(o, t)
    return dur.item(), f0.item(), n.item()


def eval_distill(codec: ProsodyCodec, stats: LatentStats, teacher_latent: np.ndarray, fn: LatentFn,
                 xi: np.ndarray, cond: Conditions, omega: float = 5.0) -> tuple[float, float, float]:
    return decoded_metrics(codec, stats, teacher_latent, fn(xi, omega, cond), cond)
