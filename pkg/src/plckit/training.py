"""Two-stage training: online loss simulation, adversarial optimization,
stage-1 freezing, and bit-exact checkpoint/resume.

Every random choice is derived from (seed, stage, epoch, index) through
SeedSequence, so a resumed run regenerates exactly the data stream an
uninterrupted run would have seen; no RNG state needs serializing. Stage 1
trains the concealment model (both encoder paths per step, distillation from
the look-ahead path to the causal one); stage 2 freezes it and trains only the
0-8 kHz refinement module on noisy mixtures of the stage-1 output.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .channel import GEParams, PacketTrace, apply_loss, sample_trace, sample_training_params
from .losses import (
    DiscriminatorEnsemble,
    LossWeights,
    MetricDiscriminator,
    extract_f0,
    f0_loss,
    kd_loss,
    lsgan_losses,
    mae_loss,
    metricgan_losses,
    plcpa_loss,
    si_sdr_metric,
    stage1_total,
)
from .model import BANDS, Generator, GeneratorConfig, torch_stft
from .signal import PACKET_SAMPLES, SAMPLE_RATE, AudioSignal

CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    batch_size: int = 2
    lr_init: float | None = None      # default 1e-3 (stage 1) / 1e-4 (stage 2)
    d_lr: float | None = None         # default: same as lr_init
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_l2: float = 5.0
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-6
    chunk_seconds: float = 8.0
    snr_range_db: tuple = (10.0, 20.0)  # stage 2 only
    seed: int = 0
    corpus_clips: int = 10
    val_clips: int = 2
    kd_mode: str = "summed"             # "summed" | "separate" | "off"
    lambda_kd: float = 1.0
    alpha_f0: float = 0.1
    ge_params: tuple | None = None      # fixed (p, q); None -> sampled per clip
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.kd_mode not in ("summed", "separate", "off"):
            raise ValueError("kd_mode must be summed/separate/off")

    @property
    def lr(self) -> float:
        if self.lr_init is not None:
            return self.lr_init
        return 1e-3 if self.stage == 1 else 1e-4

    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha_f0, lambda_kd=self.lambda_kd)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("betas", "snr_range_db", "ge_params"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        for key in ("betas", "snr_range_db", "ge_params"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# -- deterministic synthetic corpus ------------------------------------------


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def synth_speech_clip(seconds: float, rng: np.random.Generator) -> np.ndarray:
    """Speech-like test material: a vibrato harmonic train with a syllabic
    amplitude envelope plus low-level filtered noise, peak-normalized to 0.5."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(120.0, 260.0)
    vib_rate = rng.uniform(4.0, 6.5)
    vib_depth = rng.uniform(0.01, 0.03)
    drift = rng.uniform(-0.06, 0.06)
    inst_f0 = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t
                                             + rng.uniform(0, 2 * np.pi))
                    + drift * t / max(seconds, 1e-9))
    phase = 2 * np.pi * np.cumsum(inst_f0) / SAMPLE_RATE
    x = np.zeros(n)
    n_harm = int(rng.integers(10, 18))
    for k in range(1, n_harm + 1):
        amp = k ** -1.1 * np.exp(-k / 9.0)
        x += amp * np.cos(k * phase + rng.uniform(0, 2 * np.pi))
    syllable = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.0, 3.5) * t
                                    + rng.uniform(0, 2 * np.pi))
    x *= syllable
    noise = rng.normal(size=n)
    kernel = np.hanning(65)
    noise = np.convolve(noise, kernel / kernel.sum(), mode="same")
    x += 10 ** (-22 / 20) * noise * x.std() / max(noise.std(), 1e-12)
    return 0.5 * x / np.abs(x).max()


def synth_noise_clip(seconds: float, rng: np.random.Generator) -> np.ndarray:
    """Colored, amplitude-modulated noise for stage-2 mixtures."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    noise = rng.normal(size=n)
    width = int(rng.integers(9, 129))
    kernel = np.hanning(width + 2)[1:-1]
    noise = np.convolve(noise, kernel / kernel.sum(), mode="same")
    mod = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t
                             + rng.uniform(0, 2 * np.pi))
    noise *= mod
    return 0.3 * noise / np.abs(noise).max()


class SyntheticCorpus:
    """Deterministic clip store; clip i depends only on (seed, kind, i)."""

    def __init__(self, n_clips: int, seconds: float, seed: int, kind: str = "speech"):
        self.n_clips = n_clips
        self.seconds = seconds
        self.seed = seed
        self.kind = kind
        self._cache: dict[int, np.ndarray] = {}
        self._f0_cache: dict[int, np.ndarray] = {}

    def clip(self, i: int) -> np.ndarray:
        if i not in self._cache:
            rng = _rng(self.seed, 0xC11B, i)
            fn = synth_speech_clip if self.kind == "speech" else synth_noise_clip
            self._cache[i] = fn(self.seconds, rng)
        return self._cache[i]

    def f0(self, i: int) -> np.ndarray:
        if i not in self._f0_cache:
            self._f0_cache[i] = extract_f0(AudioSignal(self.clip(i))).values
        return self._f0_cache[i]

    def __len__(self):
        return self.n_clips


@dataclass
class TrainingExample:
    clean: np.ndarray
    lossy: np.ndarray
    trace: PacketTrace
    f0_ref: np.ndarray
    noise: np.ndarray | None = None
    snr_db: float | None = None
    mix: np.ndarray | None = None      # stage 2: stage-1 output + scaled noise


def make_example(clean: np.ndarray, f0_ref: np.ndarray, stage: int,
                 rng: np.random.Generator, cfg: TrainConfig,
                 stage1_fn=None, noise: np.ndarray | None = None) -> TrainingExample:
    """Simulate one training example.

    Stage 1: clean -> GE trace -> lossy. Stage 2 additionally runs the frozen
    stage-1 model on the lossy clip and adds noise scaled to a uniform SNR in
    snr_range_db relative to the stage-1 output.
    """
    if clean.size % PACKET_SAMPLES:
        raise TrainingError("clip length must be a whole number of packets")
    packets = clean.size // PACKET_SAMPLES
    params = (GEParams(*cfg.ge_params) if cfg.ge_params
              else sample_training_params(rng))
    trace = sample_trace(params, packets, seed=int(rng.integers(2 ** 31)))
    lossy = apply_loss(AudioSignal(clean), trace).samples
    example = TrainingExample(clean, lossy, trace, f0_ref)
    if stage == 2:
        if stage1_fn is None or noise is None:
            raise TrainingError("stage 2 needs stage1_fn and a noise clip")
        restored = stage1_fn(lossy)
        snr = float(rng.uniform(*cfg.snr_range_db))
        p_sig = float(np.mean(restored ** 2))
        p_noise = float(np.mean(noise ** 2))
        scale = np.sqrt(p_sig / (p_noise * 10 ** (snr / 10.0)))
        scaled = noise * scale
        example.noise = scaled
        example.snr_db = snr
        example.mix = restored + scaled
    return example


class PlateauScheduler:
    """Halve the lr after `patience` consecutive epochs without the monitored
    value improving by at least `threshold`. `start()` records the
    pre-training baseline so a flat validation curve halves after exactly
    `patience` epochs."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.5,
                 threshold: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best: float | None = None
        self.bad = 0

    def start(self, baseline: float):
        self.best = baseline

    def step(self, value: float) -> float:
        if self.best is None or self.best - value >= self.threshold:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad": self.bad}

    def load_state_dict(self, d: dict):
        self.lr, self.best, self.bad = d["lr"], d["best"], d["bad"]


def clip_gradients(params, max_norm: float) -> float:
    """Global L2 clip; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def _set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


# -- checkpointing ------------------------------------------------------------


def checkpoint_save(path, gen: Generator, gcfg: GeneratorConfig,
                    tcfg: TrainConfig | None = None, optimizers: dict | None = None,
                    schedulers: dict | None = None, counters: dict | None = None,
                    extra_modules: dict | None = None) -> None:
    """Versioned npz container: model/optimizer/auxiliary-module arrays plus a
    JSON metadata record (configs, counters, scheduler state, array manifest)."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in gen.state_dict().items():
        arrays[f"model::{name}"] = tensor.detach().cpu().numpy()
    for mod_name, module in (extra_modules or {}).items():
        for name, tensor in module.state_dict().items():
            arrays[f"aux::{mod_name}::{name}"] = tensor.detach().cpu().numpy()
    opt_meta = {}
    for opt_name, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        opt_meta[opt_name] = {
            "param_groups": [
                {k: v for k, v in g.items() if k != "params"}
                for g in sd["param_groups"]
            ],
            "group_params": [list(map(int, g["params"])) for g in sd["param_groups"]],
            "state_keys": {},
        }
        for idx, state in sd["state"].items():
            keys = []
            for key, value in state.items():
                arr = (value.detach().cpu().numpy() if torch.is_tensor(value)
                       else np.asarray(value))
                arrays[f"opt::{opt_name}::{idx}::{key}"] = arr
                keys.append(key)
            opt_meta[opt_name]["state_keys"][str(idx)] = keys
    meta = {
        "version": CKPT_VERSION,
        "generator_config": gcfg.to_dict(),
        "train_config": tcfg.to_dict() if tcfg else None,
        "counters": counters or {},
        "schedulers": {k: s.state_dict() for k, s in (schedulers or {}).items()},
        "optimizers": opt_meta,
        "path_tags": {n: "noncausal" if n.endswith("weight_noncausal")
                      else ("causal" if n.endswith("weight_causal") else "shared")
                      for n, _ in gen.named_parameters()},
    }
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8), **arrays)


@dataclass
class Checkpoint:
    gcfg: GeneratorConfig
    tcfg: TrainConfig | None
    model_state: dict
    aux_states: dict
    optimizer_meta: dict
    optimizer_arrays: dict
    schedulers: dict
    counters: dict

    def build_generator(self) -> Generator:
        gen = Generator(self.gcfg)
        gen.load_state_dict({k: torch.as_tensor(v)
                             for k, v in self.model_state.items()})
        return gen

    def load_optimizer(self, name: str, optimizer) -> None:
        meta = self.optimizer_meta[name]
        state = {}
        for idx_str, keys in meta["state_keys"].items():
            entry = {}
            for key in keys:
                arr = self.optimizer_arrays[(name, int(idx_str), key)]
                entry[key] = torch.as_tensor(arr)
            state[int(idx_str)] = entry
        groups = []
        for group_meta, params in zip(meta["param_groups"], meta["group_params"]):
            g = dict(group_meta)
            g["params"] = params
            groups.append(g)
        optimizer.load_state_dict({"state": state, "param_groups": groups})

    def load_aux(self, name: str, module: nn.Module) -> None:
        module.load_state_dict({k: torch.as_tensor(v)
                                for k, v in self.aux_states[name].items()})


def checkpoint_load(path) -> Checkpoint:
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    if meta.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')} != {CKPT_VERSION}")
    model_state, aux_states, opt_arrays = {}, {}, {}
    for key, arr in arrays.items():
        kind, _, rest = key.partition("::")
        if kind == "model":
            model_state[rest] = arr
        elif kind == "aux":
            mod, _, name = rest.partition("::")
            aux_states.setdefault(mod, {})[name] = arr
        elif kind == "opt":
            opt_name, idx, state_key = rest.split("::", 2)
            opt_arrays[(opt_name, int(idx), state_key)] = arr
    return Checkpoint(
        gcfg=GeneratorConfig.from_dict(meta["generator_config"]),
        tcfg=(TrainConfig.from_dict(meta["train_config"])
              if meta.get("train_config") else None),
        model_state=model_state,
        aux_states=aux_states,
        optimizer_meta=meta.get("optimizers", {}),
        optimizer_arrays=opt_arrays,
        schedulers=meta.get("schedulers", {}),
        counters=meta.get("counters", {}),
    )


# -- training loops ------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    checkpoint: str | None
    generator: Generator


def _example_for(cfg: TrainConfig, corpus: SyntheticCorpus, epoch: int, idx: int,
                 stage: int, stage1_fn=None,
                 noise_corpus: SyntheticCorpus | None = None,
                 fixed: bool = False) -> TrainingExample:
    clip_idx = idx % len(corpus)
    tag = 0xF1 if fixed else epoch
    rng = _rng(cfg.seed, stage, tag, idx)
    noise = noise_corpus.clip(clip_idx) if noise_corpus is not None else None
    return make_example(corpus.clip(clip_idx), corpus.f0(clip_idx), stage, rng,
                        cfg, stage1_fn=stage1_fn, noise=noise)


def _batched(indices: list[int], size: int):
    for i in range(0, len(indices), size):
        yield indices[i : i + size]


def _stage1_losses(gen: Generator, disc: DiscriminatorEnsemble,
                   batch: list[TrainingExample], cfg: TrainConfig):
    """Forward both paths and assemble the stage-1 generator objective plus
    the pieces needed for the discriminator step and logging."""
    weights = cfg.weights()
    clean = torch.as_tensor(np.stack([e.clean for e in batch]), dtype=torch.float32)
    lossy = torch.as_tensor(np.stack([e.lossy for e in batch]), dtype=torch.float32)
    f0_ref = torch.as_tensor(np.stack([e.f0_ref for e in batch]), dtype=torch.float32)
    ref_spec = torch_stft(clean)
    out = gen.forward_dual(lossy, stage=1)
    terms = {"plcpa": 0.0, "mae": 0.0, "f0": 0.0, "l_g": 0.0}
    fake_waves = []
    for path in ("causal", "noncausal"):
        res = out[path]
        fake_waves.append(res["wave"])
        d_fake = disc(res["wave"])
        _, l_g = lsgan_losses(torch.ones_like(d_fake), d_fake)
        terms["plcpa"] = terms["plcpa"] + plcpa_loss(res["spec"], ref_spec,
                                                     weights.plcpa_compression)
        terms["mae"] = terms["mae"] + mae_loss(res["wave"], clean)
        terms["f0"] = terms["f0"] + f0_loss(res["f0"], f0_ref)
        terms["l_g"] = terms["l_g"] + l_g
    terms = {k: v / 2.0 for k, v in terms.items()}
    kd = sum(kd_loss(c, n) for c, n in out["kd_pairs"]) / len(out["kd_pairs"])
    total = stage1_total(terms["plcpa"], terms["mae"], terms["f0"], terms["l_g"],
                         kd, weights, include_kd=(cfg.kd_mode == "summed"))
    return total, kd, terms, clean, torch.cat(fake_waves, dim=0)


def _stage1_val_loss(gen, batch, cfg: TrainConfig) -> float:
    """GAN-free validation objective: speech + alpha*f0 (+ lambda*kd)."""
    weights = cfg.weights()
    with torch.no_grad():
        total, kd, terms, _, _ = _stage1_losses(
            gen, _NullDisc(), batch, cfg)
        val = terms["plcpa"] + terms["mae"] + weights.alpha * terms["f0"]
        if cfg.kd_mode != "off":
            val = val + weights.lambda_kd * kd
    return float(val)


class _NullDisc(nn.Module):
    """Stand-in discriminator returning perfect scores (L_G contribution 0)."""

    def forward(self, wave):
        return torch.ones(wave.shape[0], 1, dtype=wave.dtype)


def train_stage1(tcfg: TrainConfig, gcfg: GeneratorConfig,
                 out_dir=None, resume=None, log=None) -> TrainResult:
    """Adversarial stage-1 training with dual-path distillation.

    Alternates one generator and one discriminator update per step, clips
    global grad norms at tcfg.grad_clip_l2, halves the lr on validation
    plateaus, checkpoints every epoch, and writes one JSON metrics line per
    epoch to metrics.jsonl when out_dir is given.
    """
    if tcfg.stage != 1:
        raise TrainingError("train_stage1 requires stage=1 config")
    if tcfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(tcfg.seed)
    corpus = SyntheticCorpus(tcfg.corpus_clips, tcfg.chunk_seconds, tcfg.seed)
    val_corpus = SyntheticCorpus(tcfg.val_clips, tcfg.chunk_seconds,
                                 tcfg.seed + 0x7A1)
    disc = DiscriminatorEnsemble(seed=tcfg.seed + 1)
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else checkpoint_load(resume)
        gen = ckpt.build_generator()
        opt_g = torch.optim.Adam(gen.parameters(), lr=tcfg.lr,
                                 betas=tcfg.betas, eps=tcfg.adam_eps)
        ckpt.load_aux("discriminator", disc)
        opt_d = torch.optim.Adam(disc.parameters(), lr=tcfg.d_lr or tcfg.lr,
                                 betas=tcfg.betas, eps=tcfg.adam_eps)
        ckpt.load_optimizer("g", opt_g)
        ckpt.load_optimizer("d", opt_d)
        sched = PlateauScheduler(tcfg.lr, tcfg.plateau_patience,
                                 tcfg.plateau_factor, tcfg.plateau_threshold)
        sched.load_state_dict(ckpt.schedulers["plateau"])
        start_epoch = int(ckpt.counters["epochs_done"])
    else:
        gen = Generator(gcfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=tcfg.lr,
                                 betas=tcfg.betas, eps=tcfg.adam_eps)
        opt_d = torch.optim.Adam(disc.parameters(), lr=tcfg.d_lr or tcfg.lr,
                                 betas=tcfg.betas, eps=tcfg.adam_eps)
        sched = PlateauScheduler(tcfg.lr, tcfg.plateau_patience,
                                 tcfg.plateau_factor, tcfg.plateau_threshold)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def val_batch():
        return [_example_for(tcfg, val_corpus, 0, i, 1, fixed=True)
                for i in range(len(val_corpus))]

    gen.eval()
    if sched.best is None:
        sched.start(_stage1_val_loss(gen, val_batch(), tcfg))

    history = []
    ckpt_path = None
    for epoch in range(start_epoch, tcfg.epochs):
        gen.train()
        disc.train()
        epoch_terms: dict[str, list[float]] = {}
        t0 = time.time()
        indices = list(range(len(corpus)))
        for step, batch_idx in enumerate(_batched(indices, tcfg.batch_size)):
            batch = [_example_for(tcfg, corpus, epoch, i, 1) for i in batch_idx]
            kd_only_step = (tcfg.kd_mode == "separate" and step % 2 == 1)
            opt_g.zero_grad()
            total, kd, terms, clean, fakes = _stage1_losses(gen, disc, batch, tcfg)
            g_loss = (tcfg.lambda_kd * kd) if kd_only_step else total
            if not torch.isfinite(g_loss):
                if out_dir is not None:
                    _save_stage1_ckpt(out_dir / "diagnostic.npz", gen, gcfg, tcfg,
                                      opt_g, opt_d, disc, sched, epoch)
                raise TrainingError(f"non-finite generator loss at epoch {epoch}")
            g_loss.backward()
            clip_gradients(gen.parameters(), tcfg.grad_clip_l2)
            opt_g.step()

            opt_d.zero_grad()
            d_real = disc(clean)
            d_fake = disc(fakes.detach())
            l_d, _ = lsgan_losses(d_real.mean(dim=1),
                                  d_fake.mean(dim=1))
            if not torch.isfinite(l_d):
                raise TrainingError(f"non-finite discriminator loss at epoch {epoch}")
            l_d.backward()
            clip_gradients(disc.parameters(), tcfg.grad_clip_l2)
            opt_d.step()

            record = {"total": float(total.detach()), "kd": float(kd.detach()),
                      "l_d": float(l_d.detach())}
            record.update({k: float(v.detach()) for k, v in terms.items()})
            for key, value in record.items():
                epoch_terms.setdefault(key, []).append(value)

        gen.eval()
        val = _stage1_val_loss(gen, val_batch(), tcfg)
        lr_now = sched.lr
        new_lr = sched.step(val)
        _set_lr(opt_g, new_lr)
        _set_lr(opt_d, new_lr if tcfg.d_lr is None else tcfg.d_lr)
        entry = {"epoch": epoch, "stage": 1, "lr": lr_now, "val_loss": val,
                 "seconds": round(time.time() - t0, 3)}
        entry.update({f"train_{k}": float(np.mean(v))
                      for k, v in epoch_terms.items()})
        history.append(entry)
        if log:
            log(entry)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            ckpt_path = out_dir / f"stage1_epoch{epoch + 1:03d}.npz"
            _save_stage1_ckpt(ckpt_path, gen, gcfg, tcfg, opt_g, opt_d, disc,
                              sched, epoch + 1)
    return TrainResult(history, str(ckpt_path) if ckpt_path else None, gen)


def _save_stage1_ckpt(path, gen, gcfg, tcfg, opt_g, opt_d, disc, sched, epochs_done):
    checkpoint_save(path, gen, gcfg, tcfg,
                    optimizers={"g": opt_g, "d": opt_d},
                    schedulers={"plateau": sched},
                    counters={"epochs_done": epochs_done},
                    extra_modules={"discriminator": disc})


def micro_config(seed: int = 0) -> GeneratorConfig:
    """Smallest structurally complete configuration; used by gradient checks."""
    return GeneratorConfig(
        channels=6, bottleneck_hidden=8, highband_conv_channels=8,
        highband_gru_hidden=8, highband_freq_kernel=12, highband_freq_stride=24,
        pp_lift=1, pp_gru_hidden=4, pp_conv_channels=2,
        tfdcm_depths=(2, 2, 1, 1), seed=seed)


def stage1_loss_grad_check(seed: int = 0, max_coords: int = 60,
                           frames: int = 4, eps: float = 1e-4):
    """Central-difference check of the complete stage-1 objective (speech +
    f0 + adversarial + distillation, dual-path forward) against autograd, in
    float64 on a micro model over a `frames`-frame clip.

    The non-causal depthwise kernels are excluded: the distillation teacher is
    detached by contract, so the training objective intentionally carries zero
    gradient there while a finite difference would see the teacher shift (the
    detach itself is audited separately).
    """
    from .numerics import grad_check

    torch.manual_seed(seed)
    rng = _rng(seed, 0xE2E)
    gen = Generator(micro_config(seed)).double()
    disc = DiscriminatorEnsemble(seed=seed + 1).double()
    gen.train()
    length = frames * 480
    clean_np = synth_speech_clip(length / SAMPLE_RATE, rng)[:length]
    trace = sample_trace(GEParams(0.3, 0.6), length // PACKET_SAMPLES,
                         seed=seed + 5)
    lossy_np = apply_loss(AudioSignal(clean_np), trace).samples
    f0_ref_np = extract_f0(AudioSignal(clean_np)).values
    clean = torch.as_tensor(clean_np, dtype=torch.float64).unsqueeze(0)
    lossy = torch.as_tensor(lossy_np, dtype=torch.float64).unsqueeze(0)
    f0_ref = torch.as_tensor(f0_ref_np, dtype=torch.float64).unsqueeze(0)
    ref_spec = torch_stft(clean)
    weights = LossWeights()

    def fn():
        out = gen.forward_dual(lossy, stage=1)
        plcpa = mae = f0v = l_g = 0.0
        for path in ("causal", "noncausal"):
            res = out[path]
            d_fake = disc(res["wave"])
            _, term = lsgan_losses(torch.ones_like(d_fake), d_fake)
            plcpa = plcpa + plcpa_loss(res["spec"], ref_spec,
                                       weights.plcpa_compression)
            mae = mae + mae_loss(res["wave"], clean)
            f0v = f0v + f0_loss(res["f0"], f0_ref)
            l_g = l_g + term
        kd = sum(kd_loss(c, n) for c, n in out["kd_pairs"]) / len(out["kd_pairs"])
        return stage1_total(plcpa / 2, mae / 2, f0v / 2, l_g / 2, kd, weights)

    tensors = {name: p for name, p in gen.named_parameters()
               if not name.endswith("weight_noncausal")}
    tensors["input_wave"] = lossy
    return grad_check(fn, tensors, eps=eps, max_coords=max_coords, seed=seed,
                      name="stage1_total")


def train_stage2(tcfg: TrainConfig, stage1_ckpt, out_dir=None, log=None) -> TrainResult:
    """Stage 2: freeze everything from stage 1 and train only the refinement
    module (plus the metric discriminator) on noisy stage-1 outputs."""
    if tcfg.stage != 2:
        raise TrainingError("train_stage2 requires stage=2 config")
    if tcfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(tcfg.seed + 2)
    ckpt = (stage1_ckpt if isinstance(stage1_ckpt, Checkpoint)
            else checkpoint_load(stage1_ckpt))
    gen = ckpt.build_generator()
    gcfg = ckpt.gcfg
    for name, param in gen.named_parameters():
        param.requires_grad = name.startswith("postproc")
    gen.eval()               # frozen trunk: eval-mode normalization
    gen.postproc.train()

    metric_d = MetricDiscriminator(seed=tcfg.seed + 3)
    opt_g = torch.optim.Adam(gen.postproc.parameters(), lr=tcfg.lr,
                             betas=tcfg.betas, eps=tcfg.adam_eps)
    opt_d = torch.optim.Adam(metric_d.parameters(), lr=tcfg.d_lr or tcfg.lr,
                             betas=tcfg.betas, eps=tcfg.adam_eps)
    sched = PlateauScheduler(tcfg.lr, tcfg.plateau_patience,
                             tcfg.plateau_factor, tcfg.plateau_threshold)
    corpus = SyntheticCorpus(tcfg.corpus_clips, tcfg.chunk_seconds, tcfg.seed)
    noise_corpus = SyntheticCorpus(tcfg.corpus_clips, tcfg.chunk_seconds,
                                   tcfg.seed + 0x403, kind="noise")
    val_corpus = SyntheticCorpus(tcfg.val_clips, tcfg.chunk_seconds,
                                 tcfg.seed + 0x7A1)
    val_noise = SyntheticCorpus(tcfg.val_clips, tcfg.chunk_seconds,
                                tcfg.seed + 0x7A2, kind="noise")
    weights = tcfg.weights()

    @torch.no_grad()
    def stage1_fn(lossy: np.ndarray) -> np.ndarray:
        wave = torch.as_tensor(lossy, dtype=torch.float32).unsqueeze(0)
        return gen.forward(wave, stage=1)["wave"][0].numpy()

    def batch_losses(batch, train_mode=True):
        clean = torch.as_tensor(np.stack([e.clean for e in batch]),
                                dtype=torch.float32)
        mix = torch.as_tensor(np.stack([e.mix for e in batch]),
                              dtype=torch.float32)
        ref_spec = torch_stft(clean)
        x, _ = gen.analyze(mix)
        post = gen.postproc(x[..., : BANDS.post_bins])
        full = torch.cat([post, x[..., BANDS.post_bins :]], dim=-1)
        spec_est, wave_est = gen.synthesize(full)
        speech = (plcpa_loss(spec_est, ref_spec, weights.plcpa_compression)
                  + mae_loss(wave_est, clean))
        return speech, spec_est, wave_est, clean, ref_spec

    def val_loss():
        gen.postproc.eval()
        batch = [_example_for(tcfg, val_corpus, 0, i, 2, stage1_fn=stage1_fn,
                              noise_corpus=val_noise, fixed=True)
                 for i in range(len(val_corpus))]
        with torch.no_grad():
            speech, *_ = batch_losses(batch, train_mode=False)
        gen.postproc.train()
        return float(speech)

    sched.start(val_loss())
    history = []
    ckpt_path = None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        epoch_terms: dict[str, list[float]] = {}
        indices = list(range(len(corpus)))
        for batch_idx in _batched(indices, tcfg.batch_size):
            batch = [_example_for(tcfg, corpus, epoch, i, 2, stage1_fn=stage1_fn,
                                  noise_corpus=noise_corpus) for i in batch_idx]
            opt_g.zero_grad()
            speech, spec_est, wave_est, clean, ref_spec = batch_losses(batch)
            d_est = metric_d(spec_est, ref_spec)
            l_gm = (d_est - 1.0).square().mean()  # metricgan_losses G term
            g_loss = speech + l_gm
            if not torch.isfinite(g_loss):
                raise TrainingError(f"non-finite stage-2 loss at epoch {epoch}")
            g_loss.backward()
            clip_gradients(gen.postproc.parameters(), tcfg.grad_clip_l2)
            opt_g.step()

            opt_d.zero_grad()
            m = torch.tensor(
                [si_sdr_metric(w, c) for w, c in
                 zip(wave_est.detach().numpy(), clean.numpy())],
                dtype=torch.float32)
            d_est2 = metric_d(spec_est.detach(), ref_spec)
            d_ref = metric_d(ref_spec, ref_spec)
            l_dm, _ = metricgan_losses(d_est2, d_ref, m)
            l_dm.backward()
            clip_gradients(metric_d.parameters(), tcfg.grad_clip_l2)
            opt_d.step()
            for key, value in {"speech": float(speech.detach()),
                               "l_gm": float(l_gm.detach()),
                               "l_dm": float(l_dm.detach())}.items():
                epoch_terms.setdefault(key, []).append(value)
        val = val_loss()
        lr_now = sched.lr
        _set_lr(opt_g, sched.step(val))
        entry = {"epoch": epoch, "stage": 2, "lr": lr_now, "val_loss": val,
                 "seconds": round(time.time() - t0, 3)}
        entry.update({f"train_{k}": float(np.mean(v))
                      for k, v in epoch_terms.items()})
        history.append(entry)
        if log:
            log(entry)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            ckpt_path = out_dir / f"stage2_epoch{epoch + 1:03d}.npz"
            checkpoint_save(ckpt_path, gen, gcfg, tcfg,
                            optimizers={"g": opt_g, "d": opt_d},
                            schedulers={"plateau": sched},
                            counters={"epochs_done": epoch + 1},
                            extra_modules={"metric_discriminator": metric_d})
    return TrainResult(history, str(ckpt_path) if ckpt_path else None, gen)
