"""Full tracker assembly and checkpoint container.

A TrackerModel owns the caption encoder, the joint visual encoder, the
generative branch (VAE + denoiser wrapped in a DiffusionCore), the fusion
module and the prediction head, all sized from one Config. The generative
branch and the caption encoder are pretrained and then frozen; taps are a
pure function of (template, caption, seed), which lets callers cache them
per sequence.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .diffusion import DenoisingUNet, DiffusionCore, NoiseSchedule, TinyVAE
from .encoders import PatchEncoder, TextEncoder
from .errors import ConfigError, DataError
from .fusion import FusionMode, FusionModule
from .head import CenterHead

CHECKPOINT_VERSION = 1
GENERATIVE_PREFIXES = ("core.", "text_encoder.")


class TrackerModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.mode = FusionMode.parse(cfg["fusion.mode"])

        self.text_encoder = TextEncoder(dim=cfg["text.dim"], layers=cfg["text.layers"],
                                        heads=cfg["text.heads"])
        self.backbone = PatchEncoder(dim=cfg["encoder.dim"], depth=cfg["encoder.depth"],
                                     heads=cfg["encoder.heads"], patch=cfg["encoder.patch"],
                                     ref_size=max(cfg["image.template_size"],
                                                  cfg["image.search_size"]))
        self.template_grid = self.backbone.grid_of(cfg["image.template_size"])
        self.n_template = self.template_grid ** 2
        self.grid = self.backbone.grid_of(cfg["image.search_size"])
        self.n_search = self.grid ** 2

        unet = DenoisingUNet(image_size=cfg["diffusion.image_size"],
                             base_width=cfg["diffusion.base_width"],
                             text_dim=cfg["text.dim"], heads=cfg["diffusion.heads"])
        vae = TinyVAE(base=cfg["vae.base"])
        schedule = NoiseSchedule(timesteps=cfg["diffusion.timesteps"])
        self.core = DiffusionCore(unet, vae, schedule, taps=cfg["diffusion.taps"],
                                  noise_t_frac=cfg["diffusion.noise_t_frac"],
                                  seed=cfg["diffusion.seed"])

        m_pool = cfg["fusion.m_pool"] or self.n_template
        try:
            self.fusion = FusionModule(visual_dim=cfg["encoder.dim"], text_dim=cfg["text.dim"],
                                       tap_shapes=self.core.tap_shapes(),
                                       n_template=self.n_template, n_search=self.n_search,
                                       mode=self.mode, n_decoders=cfg["fusion.n_decoders"],
                                       m_pool=m_pool, heads=cfg["fusion.heads"])
        except ValueError as e:
            raise ConfigError(str(e))

        self.head = CenterHead(dim=cfg["encoder.dim"], layers=cfg["head.layers"])

    def encode_text(self, captions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = self.text_encoder.encode_batch(captions)
        return self.text_encoder(ids)

    def compute_taps(self, template: torch.Tensor, text: torch.Tensor,
                     text_mask: torch.Tensor) -> list[torch.Tensor] | None:
        """Generative features for the template, or None for text-only modes."""
        if self.mode is not FusionMode.POOLED:
            return None
        side = self.core.unet.image_size
        if template.shape[-1] != side:
            template = F.interpolate(template, size=(side, side), mode="bilinear",
                                     align_corners=False)
        return self.core.fuse(template, text, text_mask, steps=self.cfg["diffusion.steps"])

    def forward(self, template: torch.Tensor, search: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor,
                taps: list[torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
        if taps is None:
            taps = self.compute_taps(template, text, text_mask)
        f_tp = self.backbone(template)
        f_sr = self.backbone(search)
        fused = self.fusion(f_tp, f_sr, taps, text, text_mask)
        return self.head(fused)

    # The generative branch (and the caption encoder feeding it) is trained
    # in its own stage and stays fixed afterwards, so tap caching is sound.
    def generative_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()
                if k.startswith(GENERATIVE_PREFIXES)}

    def load_generative(self, state: dict[str, torch.Tensor]):
        expected = set(self.generative_state())
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise DataError(f"generative state mismatch (missing {missing}, extra {extra})")
        self.load_state_dict(state, strict=False)

    def freeze_generative(self):
        for module in (self.core, self.text_encoder):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_model(cfg: Config) -> TrackerModel:
    try:
        return TrackerModel(cfg)
    except ValueError as e:  # dimension/head mismatches surface as config problems
        raise ConfigError(str(e))


def save_checkpoint(path: str | Path, kind: str, cfg: Config, state: dict):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items().items()},
        "state": state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_kind: str) -> tuple[Config, dict]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    except Exception as e:
        raise DataError(f"not a valid checkpoint: {path}: {e}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise DataError(f"not a valid checkpoint: {path}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload['format_version']} "
                        f"(supported: {CHECKPOINT_VERSION})")
    if payload.get("kind") != expect_kind:
        raise DataError(f"checkpoint kind {payload.get('kind')!r} does not match "
                        f"expected {expect_kind!r}")
    cfg_values = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in payload["config"].items()}
    return Config(cfg_values), payload["state"]


def load_tracker(path: str | Path) -> TrackerModel:
    cfg, state = load_checkpoint(path, "tracker")
    model = build_model(cfg)
    model.load_state_dict(state)
    model.eval()
    return model
