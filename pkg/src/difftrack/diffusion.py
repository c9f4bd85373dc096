"""Latent diffusion branch: noise schedule, toy VAE, text-conditioned
denoising U-Net, and the core wrapper that turns a template crop plus a
caption into multi-scale generative features.

The U-Net is a transformer over latent patch tokens: 16 submodules, 7 on
the contracting path (splits 2/3/2 across three resolution levels) and 9 on
the expanding path (splits 2/3/4), each submodule being self-attention,
text cross-attention and a feed-forward with per-submodule time injection.
Intermediate submodule outputs ("taps") are what the tracker consumes; the
eps head only matters for pretraining and inpainting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import FeedForward, MultiHeadAttention, timestep_embedding
from .errors import ConfigError, ShapeError

DEFAULT_T = 1000
MAX_INPAINT_STEPS = 8


class NoiseSchedule:
    """Linear-beta forward process with cached cumulative products."""

    def __init__(self, timesteps: int = DEFAULT_T, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(alphas, dim=0)
        self.sqrt_alpha_bars = self.alpha_bars.sqrt().float()
        self.sqrt_one_minus = (1.0 - self.alpha_bars).sqrt().float()

    def _gather(self, table: torch.Tensor, t: torch.Tensor, ndim: int) -> torch.Tensor:
        out = table.to(t.device)[t].float()
        return out.view(-1, *([1] * (ndim - 1)))

    def add_noise(self, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t of shape (B,)."""
        a = self._gather(self.sqrt_alpha_bars, t, x0.ndim)
        s = self._gather(self.sqrt_one_minus, t, x0.ndim)
        return a * x0 + s * eps

    def predict_x0(self, xt: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Invert add_noise given the noise estimate."""
        a = self._gather(self.sqrt_alpha_bars, t, xt.ndim)
        s = self._gather(self.sqrt_one_minus, t, xt.ndim)
        return (xt - s * eps) / a

    def ddim_step(self, xt: torch.Tensor, t: torch.Tensor, t_prev: torch.Tensor,
                  eps: torch.Tensor) -> torch.Tensor:
        """Deterministic (eta=0) jump t -> t_prev reusing the eps estimate."""
        x0 = self.predict_x0(xt, t, eps)
        return self.add_noise(x0, t_prev, eps)


def ddim_timesteps(n_steps: int, t_start: int) -> list[int]:
    """Strided descending timesteps from t_start to 0, n_steps entries.

    n_steps=1 degenerates to a single estimate at t_start.
    """
    if not 1 <= n_steps <= MAX_INPAINT_STEPS:
        raise ConfigError(f"denoising steps must be in [1, {MAX_INPAINT_STEPS}], got {n_steps}")
    if t_start < 0:
        raise ConfigError(f"t_start must be non-negative, got {t_start}")
    if n_steps == 1:
        return [t_start]
    ts = [round(t_start * (1.0 - i / (n_steps - 1))) for i in range(n_steps)]
    # Strictly decreasing; collapse duplicates that rounding may produce.
    out = [ts[0]]
    for v in ts[1:]:
        if v < out[-1]:
            out.append(v)
    return out


class TinyVAE(nn.Module):
    """Small deterministic autoencoder, 8x spatial reduction to 4 channels.

    encode returns the latent mean directly (no sampling), so the whole
    image -> latent -> image path is a deterministic function.
    """

    LATENT_CHANNELS = 4
    FACTOR = 8

    def __init__(self, base: int = 32, in_ch: int = 3):
        super().__init__()

        def down(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                                 nn.GroupNorm(8, cout), nn.SiLU())

        def up(cin, cout):
            return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                                 nn.GroupNorm(8, cout), nn.SiLU())

        self.encoder = nn.Sequential(
            down(in_ch, base), down(base, base * 2), down(base * 2, base * 4),
            nn.Conv2d(base * 4, self.LATENT_CHANNELS, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(self.LATENT_CHANNELS, base * 4, 3, padding=1),
            nn.GroupNorm(8, base * 4), nn.SiLU(),
            up(base * 4, base * 2), up(base * 2, base),
            nn.ConvTranspose2d(base, in_ch, 4, stride=2, padding=1),
        )

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 4 or img.shape[-1] % self.FACTOR or img.shape[-2] % self.FACTOR:
            raise ShapeError(f"VAE input must be (B, C, 8k, 8k), got {tuple(img.shape)}")
        return self.encoder(img)

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        out = self.decoder(z)
        return out.clamp(0.0, 1.0) if clamp else out

    def forward(self, img: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        return self.decode(self.encode(img), clamp=clamp)


def tokens_to_grid(x: torch.Tensor, side: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, side, side)


def grid_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


class DenoiserBlock(nn.Module):
    """One U-Net submodule: time shift, self-attn, text cross-attn, FFN."""

    def __init__(self, dim: int, text_dim: int, heads: int, time_dim: int):
        super().__init__()
        self.time_proj = nn.Linear(time_dim, dim)
        self.norm_sa = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads=heads)
        self.norm_ca = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, kv_dim=text_dim, heads=heads,
                                             attn_dim=dim, v_dim=dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, t_emb, text, text_mask):
        x = x + self.time_proj(t_emb)[:, None, :]
        x = x + self.self_attn(self.norm_sa(x))
        x = x + self.cross_attn(self.norm_ca(x), context=text, key_mask=text_mask)
        return x + self.ff(self.norm_ff(x))


@dataclass(frozen=True)
class TapShape:
    grid: int
    channels: int

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


# Submodule counts per resolution level: three contracting levels then the
# mirrored expanding path. 2+3+2 + 2+3+4 = 16 submodules total.
CONTRACT_SPLIT = (2, 3, 2)
EXPAND_SPLIT = (2, 3, 4)
N_SUBMODULES = sum(CONTRACT_SPLIT) + sum(EXPAND_SPLIT)


class DenoisingUNet(nn.Module):
    """Eps-prediction transformer U-Net over 2x2-patchified latent tokens.

    Levels run at token grids G, G/2, G/4 with widths c, 2c, 4c. Submodules
    are numbered 1..16 in execution order; forward can return the token
    output of any of them.
    """

    def __init__(self, image_size: int = 512, base_width: int = 64, text_dim: int = 64,
                 heads: int = 4, latent_channels: int = TinyVAE.LATENT_CHANNELS):
        super().__init__()
        latent = image_size // TinyVAE.FACTOR
        if image_size % (TinyVAE.FACTOR * 2) or (latent // 2) % 4:
            raise ShapeError(f"image_size {image_size} must give a latent patch grid "
                             "divisible by 4 (image_size multiple of 64)")
        self.image_size = image_size
        self.grid = latent // 2
        c = base_width
        self.dims = (c, 2 * c, 4 * c)
        self.time_dim = 4 * c
        self.text_dim = text_dim

        self.patch_embed = nn.Conv2d(latent_channels, c, 2, stride=2)
        self.time_mlp = nn.Sequential(nn.Linear(c, self.time_dim), nn.SiLU(),
                                      nn.Linear(self.time_dim, self.time_dim))
        self.null_text = nn.Parameter(torch.zeros(1, 1, text_dim))
        nn.init.trunc_normal_(self.null_text, std=0.02)

        def blocks(n, dim):
            return nn.ModuleList(DenoiserBlock(dim, text_dim, heads, self.time_dim)
                                 for _ in range(n))

        d0, d1, d2 = self.dims
        self.down_blocks0 = blocks(CONTRACT_SPLIT[0], d0)
        self.downsample01 = nn.Conv2d(d0, d1, 2, stride=2)
        self.down_blocks1 = blocks(CONTRACT_SPLIT[1], d1)
        self.downsample12 = nn.Conv2d(d1, d2, 2, stride=2)
        self.down_blocks2 = blocks(CONTRACT_SPLIT[2], d2)

        self.up_blocks2 = blocks(EXPAND_SPLIT[0], d2)
        self.upsample21 = nn.ConvTranspose2d(d2, d1, 2, stride=2)
        self.skip_fuse1 = nn.Linear(2 * d1, d1)
        self.up_blocks1 = blocks(EXPAND_SPLIT[1], d1)
        self.upsample10 = nn.ConvTranspose2d(d1, d0, 2, stride=2)
        self.skip_fuse0 = nn.Linear(2 * d0, d0)
        self.up_blocks0 = blocks(EXPAND_SPLIT[2], d0)

        self.out_norm = nn.LayerNorm(d0)
        self.unpatch = nn.ConvTranspose2d(d0, latent_channels, 2, stride=2)

    def tap_shape(self, index: int) -> TapShape:
        """Token grid and width of submodule ``index`` (1-based)."""
        if not 1 <= index <= N_SUBMODULES:
            raise ConfigError(f"submodule index must be in [1, {N_SUBMODULES}], got {index}")
        g, dims = self.grid, self.dims
        bounds = [
            (CONTRACT_SPLIT[0], g, dims[0]),
            (CONTRACT_SPLIT[1], g // 2, dims[1]),
            (CONTRACT_SPLIT[2], g // 4, dims[2]),
            (EXPAND_SPLIT[0], g // 4, dims[2]),
            (EXPAND_SPLIT[1], g // 2, dims[1]),
            (EXPAND_SPLIT[2], g, dims[0]),
        ]
        i = index
        for count, grid, width in bounds:
            if i <= count:
                return TapShape(grid, width)
            i -= count
        raise AssertionError("unreachable")

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor,
                taps: tuple[int, ...] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Returns (eps_prediction, {submodule_index: token tensor})."""
        for i in taps:
            self.tap_shape(i)  # range check: config error on bad indices
        if z_t.shape[-1] != self.grid * 2:
            raise ShapeError(f"latent must be {self.grid * 2}x{self.grid * 2}, "
                             f"got {tuple(z_t.shape)}")
        b = z_t.shape[0]
        t_emb = self.time_mlp(timestep_embedding(t, self.dims[0]))
        null = self.null_text.expand(b, 1, -1)
        ctx = torch.cat([text, null], dim=1)
        ctx_mask = torch.cat([text_mask,
                              torch.ones(b, 1, dtype=torch.bool, device=text_mask.device)], dim=1)

        collected: dict[int, torch.Tensor] = {}
        idx = 0

        def run(block_list, x):
            nonlocal idx
            for blk in block_list:
                x = blk(x, t_emb, ctx, ctx_mask)
                idx += 1
                if idx in taps:
                    collected[idx] = x
            return x

        g = self.grid
        x = grid_to_tokens(self.patch_embed(z_t))
        x = run(self.down_blocks0, x)
        skip0 = x
        x = grid_to_tokens(self.downsample01(tokens_to_grid(x, g)))
        x = run(self.down_blocks1, x)
        skip1 = x
        x = grid_to_tokens(self.downsample12(tokens_to_grid(x, g // 2)))
        x = run(self.down_blocks2, x)

        x = run(self.up_blocks2, x)
        x = grid_to_tokens(self.upsample21(tokens_to_grid(x, g // 4)))
        x = self.skip_fuse1(torch.cat([x, skip1], dim=-1))
        x = run(self.up_blocks1, x)
        x = grid_to_tokens(self.upsample10(tokens_to_grid(x, g // 2)))
        x = self.skip_fuse0(torch.cat([x, skip0], dim=-1))
        x = run(self.up_blocks0, x)

        eps = self.unpatch(tokens_to_grid(self.out_norm(x), g))
        return eps, collected


class DiffusionCore(nn.Module):
    """Frozen generative branch used by the tracker.

    fuse() runs the forward process to a fixed noise level, performs a
    single denoising pass, and returns the requested submodule outputs.
    inpaint() runs a short deterministic sampling loop back to image space.
    """

    def __init__(self, unet: DenoisingUNet, vae: TinyVAE,
                 schedule: NoiseSchedule | None = None,
                 taps: tuple[int, ...] = (5, 6, 7),
                 noise_t_frac: float = 0.3, seed: int = 0):
        super().__init__()
        if not 0.0 <= noise_t_frac < 1.0:
            raise ConfigError(f"noise_t_frac must be in [0, 1), got {noise_t_frac}")
        self.unet = unet
        self.vae = vae
        self.schedule = schedule or NoiseSchedule()
        self.taps = tuple(taps)
        for i in self.taps:
            unet.tap_shape(i)  # validates range
        self.noise_t_frac = noise_t_frac
        self.seed = seed
        self.t_noise = int(round(noise_t_frac * (self.schedule.timesteps - 1)))
        self.fuse_count = 0  # instrumentation for the once-per-init protocol

    def tap_shapes(self) -> list[TapShape]:
        return [self.unet.tap_shape(i) for i in self.taps]

    def _noise_like(self, z: torch.Tensor, seed: int) -> torch.Tensor:
        gen = torch.Generator(device="cpu").manual_seed(seed)
        return torch.randn(z.shape, generator=gen, dtype=z.dtype)

    def _noised_start(self, template: torch.Tensor) -> torch.Tensor:
        z0 = self.vae.encode(template)
        t = torch.full((z0.shape[0],), self.t_noise, dtype=torch.long)
        eps = self._noise_like(z0, self.seed)
        return self.schedule.add_noise(z0, t, eps)

    def fuse(self, template: torch.Tensor, text: torch.Tensor, text_mask: torch.Tensor,
             steps: int = 1) -> list[torch.Tensor]:
        """Template crop (B,3,H,W) + text tokens -> list of tap tensors.

        Noises the template latent to the working level and denoises for
        ``steps`` iterations; the taps come from the final iteration only.
        Deterministic for fixed inputs and seed: the injected noise comes
        from a dedicated generator, not global RNG state. Inference callers
        wrap this in no_grad; it stays differentiable for finetuning.
        """
        self.fuse_count += 1
        b = template.shape[0]
        z = self._noised_start(template)
        ts = ddim_timesteps(steps, self.t_noise)
        collected: dict[int, torch.Tensor] = {}
        for i, t_now in enumerate(ts):
            t = torch.full((b,), t_now, dtype=torch.long)
            final = i + 1 == len(ts)
            eps, collected = self.unet(z, t, text, text_mask,
                                       taps=self.taps if final else ())
            if not final:
                t_prev = torch.full((b,), ts[i + 1], dtype=torch.long)
                z = self.schedule.ddim_step(z, t, t_prev, eps)
        return [collected[i] for i in self.taps]

    def inpaint(self, template: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor, steps: int = 4) -> torch.Tensor:
        """Noise the template to the working level, then denoise in
        ``steps`` deterministic strides and decode to image space."""
        b = template.shape[0]
        z = self._noised_start(template)
        ts = ddim_timesteps(steps, self.t_noise)
        for i, t_now in enumerate(ts):
            t = torch.full((b,), t_now, dtype=torch.long)
            eps, _ = self.unet(z, t, text, text_mask)
            if i + 1 < len(ts):
                t_prev = torch.full((b,), ts[i + 1], dtype=torch.long)
                z = self.schedule.ddim_step(z, t, t_prev, eps)
            else:
                z = self.schedule.predict_x0(z, t, eps)
        return self.vae.decode(z)
