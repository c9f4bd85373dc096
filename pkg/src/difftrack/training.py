"""Optimization: LR schedule, batch assembly, staged pretraining, main loop.

Training happens in two stages. Stage A pretrains the autoencoder and the
text-conditioned denoiser on template-style crops, after which the whole
generative branch is frozen (a --finetune-diffusion escape hatch unfreezes
it). Stage B trains the visual encoder, fusion and head on synthetic
sequences; because the generative branch is fixed, taps and text features
are cached once per sequence instead of recomputed per batch item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.optim import AdamW

from .config import Config
from .datasets import Sequence, generate_sequence
from .diffusion import DenoisingUNet, NoiseSchedule
from .encoders import image_to_tensor
from .errors import ConfigError, InputError, NumericsError
from .geometry import (BoundingBox, BoxFormat, BoxUnit, crop_region, iou,
                       map_box_to_crop)
from .head import HeadTargets, encode_targets, head_loss
from .model import TrackerModel, build_model, load_checkpoint, save_checkpoint
from .tracker import run_sequence

LOG_HEADER = "step\tlr\ttotal\tl1\tgiou\tfocal"
HELD_OUT_OFFSET = 10_000  # seed gap between the training pool and eval pool

# search-crop jitter so the head sees off-center targets
CENTER_JITTER = 0.10     # fraction of the anchor-derived crop side
SCALE_JITTER = (0.85, 1.18)


def lr_at(epoch_frac: float, cfg: Config) -> float:
    """Three-phase rate: linear warmup to the peak, a constant plateau,
    then a hard drop to the floor. Continuous at the warmup boundary."""
    if not 0.0 <= epoch_frac <= 1.0:
        raise InputError(f"epoch_frac must be in [0, 1], got {epoch_frac}")
    epochs = cfg["train.epochs"]
    warmup = cfg["train.warmup_epochs"] / epochs
    decay = cfg["train.decay_epoch"] / epochs
    if not 0 <= warmup <= decay <= 1.0:
        raise ConfigError(
            f"need warmup_epochs <= decay_epoch <= epochs, got "
            f"{cfg['train.warmup_epochs']}/{cfg['train.decay_epoch']}/{epochs}")
    peak = cfg["train.lr"]
    if epoch_frac < warmup:
        return peak * epoch_frac / warmup
    if epoch_frac < decay:
        return peak
    return cfg["train.lr_floor"]


# ---------------------------------------------------------------------------
# Data: synthetic pools and batch assembly.


def build_training_pool(cfg: Config) -> list[Sequence]:
    base = cfg["data.seed"]
    return [generate_sequence(base + i, canvas=cfg["data.canvas"],
                              n_frames=cfg["data.n_frames"],
                              n_distractors=cfg["data.n_distractors"],
                              template_clarity=cfg["data.template_clarity"])
            for i in range(cfg["train.n_sequences"])]


def held_out_sequences(cfg: Config, n: int = 10) -> list[Sequence]:
    """Evaluation pool drawn from the same generator settings as training,
    at seeds the training pool can never reach."""
    base = cfg["data.seed"] + HELD_OUT_OFFSET
    return [generate_sequence(base + i, canvas=cfg["data.canvas"],
                              n_frames=cfg["data.n_frames"],
                              n_distractors=cfg["data.n_distractors"],
                              template_clarity=cfg["data.template_clarity"])
            for i in range(n)]


@dataclass
class TrainBatch:
    template: torch.Tensor            # (B, 3, T, T)
    search: torch.Tensor              # (B, 3, S, S)
    text: torch.Tensor                # (B, L, C)
    text_mask: torch.Tensor           # (B, L)
    taps: list[torch.Tensor] | None   # per-tap (B, N_u, C_u), None off the pooled path
    targets: list[HeadTargets]


class SequenceCache:
    """Frozen per-sequence features: template crop, text tokens, taps.

    Valid only while the generative branch (and with it the text encoder)
    stays frozen; the trainer bypasses it when finetuning.
    """

    def __init__(self, model: TrackerModel, cfg: Config):
        self.model = model
        self.cfg = cfg
        self._store: dict[int, dict] = {}

    def entry(self, idx: int, seq: Sequence) -> dict:
        if idx not in self._store:
            crop, _ = crop_region(seq.frame(0), seq.boxes[0],
                                  self.cfg["image.template_factor"],
                                  self.cfg["image.template_size"])
            template = image_to_tensor(crop).unsqueeze(0)
            with torch.no_grad():
                text, mask = self.model.encode_text([seq.caption])
                taps = self.model.compute_taps(template, text, mask)
            self._store[idx] = {"template": template, "text": text,
                                "mask": mask, "taps": taps}
        return self._store[idx]


def make_search_sample(seq: Sequence, frame_idx: int, cfg: Config,
                       rng: np.random.Generator) -> tuple[torch.Tensor, HeadTargets]:
    """Crop a jittered search region around the ground truth of one frame
    and encode the box as head targets in crop coordinates."""
    gt = seq.boxes[frame_idx]
    cx, cy = gt.center
    side = cfg["image.search_factor"] * math.sqrt(gt.width * gt.height)
    jcx = cx + rng.uniform(-CENTER_JITTER, CENTER_JITTER) * side
    jcy = cy + rng.uniform(-CENTER_JITTER, CENTER_JITTER) * side
    jw = gt.width * rng.uniform(*SCALE_JITTER)
    jh = gt.height * rng.uniform(*SCALE_JITTER)
    anchor = BoundingBox(jcx, jcy, jw, jh, format=BoxFormat.CXCYWH, unit=BoxUnit.PIXEL)

    size = cfg["image.search_size"]
    crop, mapping = crop_region(seq.frame(frame_idx), anchor,
                                cfg["image.search_factor"], size)
    box = map_box_to_crop(gt, mapping).normalized(size, size)
    grid = size // cfg["encoder.patch"]
    return image_to_tensor(crop), encode_targets(box, grid)


def make_batch(model: TrackerModel, cfg: Config, pool: list[Sequence],
               rng: np.random.Generator,
               cache: SequenceCache | None = None) -> TrainBatch:
    """Draw one optimization batch from the sequence pool.

    With a cache the per-sequence template/text/tap features are reused;
    without one (finetuning) they are recomputed so gradients see the
    current generative weights. Taps are still under no_grad either way:
    the finetune path trains the denoiser with its own objective.
    """
    batch = cfg["train.batch"]
    idxs = rng.integers(len(pool), size=batch)
    searches, targets = [], []
    templates, texts, masks, taps_per_item = [], [], [], []
    for i in idxs:
        seq = pool[int(i)]
        frame_idx = int(rng.integers(len(seq)))
        search, target = make_search_sample(seq, frame_idx, cfg, rng)
        searches.append(search)
        targets.append(target)
        if cache is not None:
            entry = cache.entry(int(i), seq)
        else:
            # finetuning path: recompute with gradients attached
            crop, _ = crop_region(seq.frame(0), seq.boxes[0],
                                  cfg["image.template_factor"],
                                  cfg["image.template_size"])
            template = image_to_tensor(crop).unsqueeze(0)
            text, mask = model.encode_text([seq.caption])
            taps = model.compute_taps(template, text, mask)
            entry = {"template": template, "text": text, "mask": mask, "taps": taps}
        templates.append(entry["template"])
        texts.append(entry["text"])
        masks.append(entry["mask"])
        taps_per_item.append(entry["taps"])

    taps = None
    if taps_per_item[0] is not None:
        taps = [torch.cat([item[k] for item in taps_per_item])
                for k in range(len(taps_per_item[0]))]
    return TrainBatch(template=torch.cat(templates), search=torch.stack(searches),
                      text=torch.cat(texts), text_mask=torch.cat(masks),
                      taps=taps, targets=targets)


# ---------------------------------------------------------------------------
# Steps and loops.


def _check_finite(losses: dict[str, torch.Tensor], where: str):
    for term in ("l1", "giou", "focal", "total"):
        if not math.isfinite(float(losses[term].detach())):
            raise NumericsError(f"non-finite {term} loss {where}; aborting")


def clip_gradients(params, clip: float, where: str = "") -> float:
    """Scale gradients so the global norm is at most ``clip``.

    The norm is accumulated in double precision and the scale carries a
    hair of slack, so fp32 rounding in the multiply cannot push the
    post-clip norm back over the bound.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if not math.isfinite(total):
        raise NumericsError(f"non-finite gradient norm {where}; aborting")
    if total > clip:
        scale = clip / total * (1.0 - 1e-7)
        for g in grads:
            g.mul_(scale)
    return total


def train_step(model: TrackerModel, optimizer: AdamW, batch: TrainBatch,
               lr: float, clip: float, where: str = "") -> dict[str, float]:
    for group in optimizer.param_groups:
        group["lr"] = lr
    maps = model(batch.template, batch.search, batch.text, batch.text_mask,
                 taps=batch.taps)
    losses = head_loss(maps, batch.targets)
    _check_finite(losses, where or "in train_step")
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    clip_gradients([p for g in optimizer.param_groups for p in g["params"]],
                   clip, where=where)
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def pretraining_images(cfg: Config, pool: list[Sequence]) -> tuple[torch.Tensor, list[str]]:
    """Template-style crops (resized to the denoiser's working resolution)
    plus their captions, for both pretraining stages."""
    side = cfg["diffusion.image_size"]
    images, captions = [], []
    for seq in pool:
        for f in {0, len(seq) // 2, len(seq) - 1}:
            crop, _ = crop_region(seq.frame(f), seq.boxes[f],
                                  cfg["image.template_factor"], side)
            images.append(image_to_tensor(crop))
            captions.append(seq.caption)
    return torch.stack(images), captions


def pretrain_vae(model: TrackerModel, images: torch.Tensor, steps: int,
                 lr: float, batch: int = 8, seed: int = 0,
                 echo: Callable[[str], None] | None = None) -> list[float]:
    """Plain reconstruction pretraining for the autoencoder."""
    vae = model.core.vae
    vae.train()
    opt = AdamW(vae.parameters(), lr=lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        idx = torch.randint(len(images), (min(batch, len(images)),), generator=gen)
        x = images[idx]
        recon = vae(x, clamp=False)
        loss = torch.nn.functional.mse_loss(recon, x)
        if not math.isfinite(float(loss.detach())):
            raise NumericsError(f"non-finite reconstruction loss at pretrain step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if echo and (step % 50 == 0 or step == steps - 1):
            echo(f"vae\t{step}\t{losses[-1]:.5f}")
    vae.eval()
    return losses


def ddpm_training_loss(unet: DenoisingUNet, schedule: NoiseSchedule,
                       z0: torch.Tensor, text: torch.Tensor, text_mask: torch.Tensor,
                       t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise-prediction objective: MSE between injected and predicted noise.

    With a predictor that outputs all zeros this averages E||eps||^2, i.e.
    1.0 per element, which anchors the expected starting loss.
    """
    x_t = schedule.add_noise(z0, t, eps)
    eps_hat, _ = unet(x_t, t, text, text_mask)
    return torch.nn.functional.mse_loss(eps_hat, eps)


def pretrain_denoiser(model: TrackerModel, images: torch.Tensor, captions: list[str],
                      steps: int, lr: float, batch: int = 8, seed: int = 0,
                      echo: Callable[[str], None] | None = None) -> list[float]:
    """Train the denoiser (and the text encoder it conditions on) with the
    noise-prediction objective on frozen-autoencoder latents."""
    core, text_enc = model.core, model.text_encoder
    core.vae.eval()
    with torch.no_grad():
        z_all = core.vae.encode(images)

    core.unet.train()
    text_enc.train()
    params = list(core.unet.parameters()) + list(text_enc.parameters())
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        idx = torch.randint(len(images), (min(batch, len(images)),), generator=gen)
        # text features must come from the live encoder, so re-run on ids
        text, mask = model.encode_text([captions[int(i)] for i in idx])
        t = torch.randint(core.schedule.timesteps, (len(idx),), generator=gen)
        eps = torch.randn(z_all[idx].shape, generator=gen)
        loss = ddpm_training_loss(core.unet, core.schedule, z_all[idx], text, mask, t, eps)
        if not math.isfinite(float(loss.detach())):
            raise NumericsError(f"non-finite denoising loss at pretrain step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if echo and (step % 50 == 0 or step == steps - 1):
            echo(f"denoiser\t{step}\t{losses[-1]:.5f}")
    core.unet.eval()
    text_enc.eval()
    return losses


@dataclass
class TrainResult:
    checkpoint: Path
    generative_checkpoint: Path
    log_path: Path
    final_losses: dict[str, float]
    epochs_run: int


def _set_train_modes(model: TrackerModel, finetune: bool):
    model.train()
    if not finetune:
        # frozen submodules stay in eval so BN/dropout-free paths and the
        # cached taps remain consistent with inference
        model.core.eval()
        model.text_encoder.eval()


def train_tracker(cfg: Config, out_dir: str | Path,
                  generative_ckpt: str | Path | None = None,
                  finetune_diffusion: bool = False,
                  resume: bool = False,
                  echo: Callable[[str], None] | None = None) -> TrainResult:
    """Full two-stage training run; writes checkpoints and a step log.

    out_dir receives generative.pt, tracker.pt, resume.pt and train.log.
    With resume=True training continues from resume.pt at the saved epoch,
    keeping the LR schedule aligned.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    gen_path = Path(generative_ckpt) if generative_ckpt else out_dir / "generative.pt"
    ckpt_path = out_dir / "tracker.pt"
    resume_path = out_dir / "resume.pt"

    torch.manual_seed(cfg["train.seed"])
    model = build_model(cfg)
    pool = build_training_pool(cfg)

    start_epoch = 0
    opt_state = None
    if resume:
        _, state = load_checkpoint(resume_path, "train-state")
        model.load_state_dict(state["model"])
        opt_state = state["optimizer"]
        start_epoch = state["next_epoch"]

    if gen_path.exists():
        _, gen_state = load_checkpoint(gen_path, "generative")
        model.load_generative(gen_state)
    elif resume:
        raise ConfigError(f"resume requested but {gen_path} is missing")
    else:
        images, captions = pretraining_images(cfg, pool)
        pretrain_vae(model, images, cfg["train.pretrain_vae_steps"],
                     cfg["train.pretrain_lr"], seed=cfg["train.seed"], echo=echo)
        pretrain_denoiser(model, images, captions, cfg["train.pretrain_denoiser_steps"],
                          cfg["train.pretrain_lr"], seed=cfg["train.seed"], echo=echo)
        save_checkpoint(gen_path, "generative", cfg, model.generative_state())

    if not finetune_diffusion:
        model.freeze_generative()
    _set_train_modes(model, finetune_diffusion)

    cache = None if finetune_diffusion else SequenceCache(model, cfg)
    optimizer = AdamW(model.trainable_parameters(), lr=cfg["train.lr"],
                      weight_decay=cfg["train.weight_decay"])
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    epochs = cfg["train.epochs"]
    steps_per_epoch = cfg["train.steps_per_epoch"]
    clip = cfg["train.clip"]
    losses: dict[str, float] = {}

    mode = "a" if (resume and log_path.exists()) else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            print(LOG_HEADER, file=log)
        for epoch in range(start_epoch, epochs):
            # per-epoch seeding keeps resumed runs on the original data stream
            rng = np.random.default_rng(cfg["train.seed"] * 1009 + epoch)
            for s in range(steps_per_epoch):
                step = epoch * steps_per_epoch + s
                lr = lr_at(step / (epochs * steps_per_epoch), cfg)
                vals = train_step(model, optimizer, make_batch(model, cfg, pool, rng, cache),
                                  lr, clip, where=f"at step {step}")
                line = (f"{step}\t{lr:.6g}\t{vals['total']:.6f}\t{vals['l1']:.6f}"
                        f"\t{vals['giou']:.6f}\t{vals['focal']:.6f}")
                print(line, file=log)
                if echo:
                    echo(line)
                losses = vals
            save_checkpoint(ckpt_path, "tracker", cfg, model.state_dict())
            save_checkpoint(resume_path, "train-state", cfg,
                            {"model": model.state_dict(),
                             "optimizer": optimizer.state_dict(),
                             "next_epoch": epoch + 1})

    if not ckpt_path.exists():  # zero remaining epochs still yields a model
        save_checkpoint(ckpt_path, "tracker", cfg, model.state_dict())
    return TrainResult(checkpoint=ckpt_path, generative_checkpoint=gen_path,
                       log_path=log_path, final_losses=losses, epochs_run=epochs)


def evaluate_mean_iou(model: TrackerModel, sequences: list[Sequence],
                      hann_weight: float | None = None) -> float:
    """Mean per-sequence overlap on frames after the first (the first box
    is the given initialization, not a prediction)."""
    model.eval()
    per_seq = []
    with torch.no_grad():
        for seq in sequences:
            boxes, _ = run_sequence(model, seq, hann_weight=hann_weight)
            vals = [iou(b, gt) for b, gt in zip(boxes[1:], seq.boxes[1:])]
            per_seq.append(float(np.mean(vals)) if vals else 1.0)
    return float(np.mean(per_seq))
