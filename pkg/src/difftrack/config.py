"""Flat key=value configuration with a typed, documented schema.

Every tunable in the system lives here under a dotted name. Config files
are plain text, one ``key = value`` per line, ``#`` comments allowed.
Unknown keys are hard errors: a typo should never silently fall back to a
default. The same schema drives CLI overrides and the help text, and a
test asserts the two stay in sync.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError, DataError, ParseError


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(",", " ").split())


_PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int, "float": float, "str": str, "bool": _parse_bool, "ints": _parse_ints,
}


@dataclass(frozen=True)
class ConfigKey:
    name: str
    type: str
    default: Any
    doc: str


# The full schema. Defaults are the desk-scale profile that trains on a CPU
# in minutes; configs/base.cfg scales the same keys up.
SCHEMA: dict[str, ConfigKey] = {k.name: k for k in [
    # image pipeline
    ConfigKey("image.template_size", "int", 64, "square template crop side in pixels"),
    ConfigKey("image.search_size", "int", 128, "square search crop side in pixels"),
    ConfigKey("image.template_factor", "float", 2.0, "template crop area factor around the box"),
    ConfigKey("image.search_factor", "float", 4.0, "search crop area factor around the box"),
    # visual encoder
    ConfigKey("encoder.dim", "int", 192, "visual token width"),
    ConfigKey("encoder.depth", "int", 4, "joint encoder self-attention blocks"),
    ConfigKey("encoder.heads", "int", 4, "visual attention heads"),
    ConfigKey("encoder.patch", "int", 16, "visual patch size in pixels"),
    # text encoder
    ConfigKey("text.dim", "int", 64, "caption token width"),
    ConfigKey("text.layers", "int", 2, "caption transformer layers"),
    ConfigKey("text.heads", "int", 4, "caption attention heads"),
    # generative branch
    ConfigKey("diffusion.image_size", "int", 64, "template side fed to the VAE (multiple of 64)"),
    ConfigKey("diffusion.base_width", "int", 64, "denoiser width at the finest token level"),
    ConfigKey("diffusion.heads", "int", 4, "denoiser attention heads"),
    ConfigKey("diffusion.timesteps", "int", 1000, "length of the forward noise schedule"),
    ConfigKey("diffusion.taps", "ints", (5, 6, 7), "denoiser submodules whose outputs feed fusion"),
    ConfigKey("diffusion.steps", "int", 1, "denoising iterations per fuse/inpaint, 1 to 8"),
    ConfigKey("diffusion.noise_t_frac", "float", 0.3,
              "fraction of the schedule used as the working noise level"),
    ConfigKey("diffusion.seed", "int", 0, "seed for the injected template noise"),
    ConfigKey("vae.base", "int", 32, "VAE channel multiplier"),
    # fusion
    ConfigKey("fusion.mode", "str", "pooled", "pooled | modulation | concat"),
    ConfigKey("fusion.n_decoders", "int", 3, "decoder blocks in the fusion cascade"),
    ConfigKey("fusion.m_pool", "int", 0, "pooled tokens per tap; 0 means template token count"),
    ConfigKey("fusion.heads", "int", 1, "fusion attention heads"),
    # head
    ConfigKey("head.layers", "int", 3, "conv layers per head branch"),
    ConfigKey("head.hann_weight", "float", 0.49, "window blend weight in [0, 1]"),
    # training
    ConfigKey("train.epochs", "int", 20, "total training epochs"),
    ConfigKey("train.warmup_epochs", "int", 2, "epochs of linear learning-rate warmup"),
    ConfigKey("train.decay_epoch", "int", 16, "epoch at which the rate drops to the floor"),
    ConfigKey("train.lr", "float", 4e-4, "peak learning rate"),
    ConfigKey("train.lr_floor", "float", 4e-5, "learning rate after the decay point"),
    ConfigKey("train.weight_decay", "float", 1e-4, "AdamW weight decay"),
    ConfigKey("train.clip", "float", 0.1, "global gradient-norm clip"),
    ConfigKey("train.batch", "int", 8, "samples per optimization step"),
    ConfigKey("train.steps_per_epoch", "int", 25, "optimization steps per epoch"),
    ConfigKey("train.seed", "int", 0, "master seed for training"),
    ConfigKey("train.pretrain_vae_steps", "int", 300, "autoencoder pretraining steps"),
    ConfigKey("train.pretrain_denoiser_steps", "int", 300, "denoiser pretraining steps"),
    ConfigKey("train.pretrain_lr", "float", 1e-3, "learning rate for both pretraining stages"),
    ConfigKey("train.n_sequences", "int", 16, "synthetic sequences in the training pool"),
    # synthetic data
    ConfigKey("data.canvas", "int", 256, "synthetic frame side in pixels"),
    ConfigKey("data.n_frames", "int", 24, "frames per synthetic sequence"),
    ConfigKey("data.n_distractors", "int", 3, "non-target shapes per sequence"),
    ConfigKey("data.seed", "int", 0, "seed for sequence generation"),
    ConfigKey("data.template_clarity", "float", 1.0,
              "frame-0 target saturation; below 1 the template color washes toward the background"),
    # evaluation / semantics
    ConfigKey("eval.precision_px", "float", 20.0, "center-error threshold in pixels"),
    ConfigKey("semantics.logit_scale", "float", 100.0, "similarity scale for caption scores"),
    ConfigKey("semantics.stride", "int", 20, "frame sampling stride for video scoring"),
]}


class Config:
    """Validated view over the schema plus explicit overrides."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values: dict[str, Any] = {}
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value: Any):
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key: {key!r}")
        if isinstance(value, str):
            try:
                value = _PARSERS[spec.type](value)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}")
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key: {key!r}")
        return self._values.get(key, spec.default)

    def items(self) -> dict[str, Any]:
        return {name: self[name] for name in SCHEMA}

    def overridden(self) -> dict[str, Any]:
        return dict(self._values)

    def copy_with(self, overrides: dict[str, Any]) -> "Config":
        merged = dict(self._values)
        cfg = Config(merged)
        for k, v in overrides.items():
            cfg.set(k, v)
        return cfg


def parse_config_text(text: str, path: str = "<config>") -> Config:
    cfg = Config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path=path, line=lineno)
        key, _, value = line.partition("=")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as e:
            raise ParseError(str(e), path=path, line=lineno)
    return cfg


def load_config(path: str | Path) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise DataError(f"cannot read config {p}: {e}")
    return parse_config_text(text, path=str(p))


def schema_help() -> str:
    """One line per key, used verbatim in the CLI help epilog."""
    lines = ["configuration keys (key = default): "]
    for key in SCHEMA.values():
        default = ",".join(map(str, key.default)) if key.type == "ints" else key.default
        lines.append(f"  {key.name} = {default}  ({key.type}) {key.doc}")
    return "\n".join(lines)
