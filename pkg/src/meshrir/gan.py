"""Noise-free conditional GAN: generator, discriminator, losses.

The generator maps a 14-dim scene embedding straight to a packed 4096-sample
IR (no noise input, so one embedding gives one IR). The generator objective
is L_cgan + lambda_edr * L_edr + lambda_mse * L_mse; the discriminator
maximises mean log D(real) + mean log(1 - D(fake)).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import acoustics
from .codec import CROP_LENGTH, PACKED_LENGTH
from .encoder import EMBEDDING_DIM

EPS = 1e-7
KERNEL = 41
STRIDE = 4
VARIANTS = ("full", "no-edr", "d-edr", "unprocessed")
DEFAULT_BAND_WEIGHTS = tuple(w / 21.0 for w in (6, 5, 4, 3, 2, 1))


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    gen_channels: tuple = (256, 128, 64, 32, 16)
    base_length: int = 16
    disc_channels: tuple = (32, 64, 128, 256)
    cond_channels: int = 8
    encoder_hidden: int = 32
    encoder_stages: int = 3
    keep_ratio: float = 0.6

    def __post_init__(self):
        self.gen_channels = tuple(int(c) for c in self.gen_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        n_up = len(self.gen_channels) - 1
        if self.base_length * STRIDE ** n_up != PACKED_LENGTH:
            raise ModelError(
                f"base_length {self.base_length} * {STRIDE}^{n_up} != {PACKED_LENGTH}"
            )

    def to_dict(self):
        d = asdict(self)
        d["gen_channels"] = list(self.gen_channels)
        d["disc_channels"] = list(self.disc_channels)
        return d


class Generator(nn.Module):
    """Linear projection to (C0, 16), four x4 transposed convs, conv + tanh."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        ch = cfg.gen_channels
        self.base_length = cfg.base_length
        self.project = nn.Linear(EMBEDDING_DIM, ch[0] * cfg.base_length)
        layers = []
        for a, b in zip(ch[:-1], ch[1:]):
            # (L - 1) * 4 - 2 * 19 + 41 + 1 = 4 L
            layers += [nn.ConvTranspose1d(a, b, KERNEL, stride=STRIDE, padding=19, output_padding=1),
                       nn.LeakyReLU(0.2)]
        layers += [nn.Conv1d(ch[-1], 1, KERNEL, padding=KERNEL // 2), nn.Tanh()]
        self.body = nn.Sequential(*layers)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        h = self.act(self.project(embedding))
        h = h.view(embedding.shape[0], -1, self.base_length)
        return self.body(h).squeeze(1)


class Discriminator(nn.Module):
    """Strided conv stack over the IR (or its EDR) with broadcast conditioning.

    ``in_channels`` is 1 for packed IRs (length 4096) and 6 for EDR input
    (length 3968, one channel per band). EDR input is log-compressed first.
    """

    def __init__(self, config: ModelConfig | None = None, edr_input: bool = False):
        super().__init__()
        cfg = config or ModelConfig()
        self.edr_input = edr_input
        self.in_channels = len(acoustics.BAND_CENTERS) if edr_input else 1
        self.length = CROP_LENGTH if edr_input else PACKED_LENGTH
        self.cond = nn.Linear(EMBEDDING_DIM, cfg.cond_channels)
        layers = []
        prev = self.in_channels + cfg.cond_channels
        length = self.length
        for c in cfg.disc_channels:
            layers += [nn.Conv1d(prev, c, KERNEL, stride=STRIDE, padding=KERNEL // 2), nn.LeakyReLU(0.2)]
            prev = c
            length = (length - 1) // STRIDE + 1
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev * length, 1)

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x, embedding))

    def logits(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if self.edr_input:
            if x.shape[1:] != (self.length, self.in_channels):
                raise ModelError(f"d-edr discriminator expects (B, {self.length}, 6) EDR input, "
                                 f"got {tuple(x.shape)}")
            x = torch.log10(x + 1e-8).transpose(1, 2)
        else:
            if x.shape[1:] != (self.length,):
                raise ModelError(f"discriminator expects (B, {self.length}) IR input, got {tuple(x.shape)}")
            x = x.unsqueeze(1)
        c = self.cond(embedding)[:, :, None].expand(-1, -1, x.shape[-1])
        h = self.body(torch.cat([x, c], dim=1))
        return self.head(h.flatten(1)).squeeze(1)


# ---------------------------------------------------------------------------
# differentiable EDR


_MASKS: dict = {}


def _band_mask(dtype) -> torch.Tensor:
    key = dtype
    if key not in _MASKS:
        _MASKS[key] = torch.as_tensor(acoustics.band_mask(), dtype=dtype)
    return _MASKS[key]


def band_energy(x: torch.Tensor, hop: int = acoustics.STFT_HOP) -> torch.Tensor:
    """(B, L) -> (B, frames, 6); same framing as ``acoustics.band_energy_stft``."""
    n = acoustics.STFT_SIZE
    window = torch.as_tensor(acoustics.hann(n), dtype=x.dtype)
    spec = torch.stft(x, n, hop_length=hop, window=window, center=True, pad_mode="constant",
                      return_complex=True)
    power = (spec.real ** 2 + spec.imag ** 2) * (2.0 / n)
    return power.transpose(1, 2) @ _band_mask(x.dtype)


def edr_torch(x: torch.Tensor, hop: int = acoustics.STFT_HOP) -> torch.Tensor:
    e = band_energy(x, hop)
    return torch.flip(torch.cumsum(torch.flip(e, [1]), dim=1), [1])


def edr_relief(bodies: torch.Tensor) -> torch.Tensor:
    """Sample-resolution EDR (hop 1), shape (B, 3968, 6), for the d-edr critic."""
    return edr_torch(bodies, hop=1)[:, : bodies.shape[1]]


# ---------------------------------------------------------------------------
# losses


def _clamp(p):
    return p.clamp(EPS, 1.0 - EPS) if isinstance(p, torch.Tensor) else np.clip(p, EPS, 1.0 - EPS)


def loss_cgan(d_fake):
    """mean log(1 - D(G(embedding))), probabilities clamped to [eps, 1 - eps]."""
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not isinstance(d_fake, torch.Tensor) else d_fake
    return torch.log(1.0 - _clamp(d_fake)).mean()


def loss_discriminator(d_real, d_fake):
    """mean log D(real) + mean log(1 - D(fake)); the critic maximises this."""
    d_real = d_real if isinstance(d_real, torch.Tensor) else torch.as_tensor(d_real, dtype=torch.float64)
    d_fake = d_fake if isinstance(d_fake, torch.Tensor) else torch.as_tensor(d_fake, dtype=torch.float64)
    return torch.log(_clamp(d_real)).mean() + torch.log(1.0 - _clamp(d_fake)).mean()


_LOG_EPS = float(np.log(EPS))
_LOG_1M_EPS = float(np.log1p(-EPS))


def _log_sigmoid(z):
    # log(clamp(sigmoid(z), eps, 1 - eps)) with gradient kept outside the clamp
    # range, so a saturated critic can still recover
    return torch.nn.functional.logsigmoid(z).clamp(max=_LOG_1M_EPS) \
        + torch.relu(_LOG_EPS - torch.nn.functional.logsigmoid(z)).detach()


def loss_cgan_logits(z_fake: torch.Tensor) -> torch.Tensor:
    """``loss_cgan(sigmoid(z))`` evaluated in logit space."""
    return _log_sigmoid(-z_fake).mean()


def loss_discriminator_logits(z_real: torch.Tensor, z_fake: torch.Tensor) -> torch.Tensor:
    """``loss_discriminator(sigmoid(zr), sigmoid(zf))`` evaluated in logit space."""
    return _log_sigmoid(z_real).mean() + _log_sigmoid(-z_fake).mean()


def loss_mse(generated: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    if generated.shape != truth.shape:
        raise ModelError(f"shape mismatch {tuple(generated.shape)} vs {tuple(truth.shape)}")
    return ((generated - truth) ** 2).mean()


def loss_edr(generated: torch.Tensor, truth: torch.Tensor, band_weights=DEFAULT_BAND_WEIGHTS):
    """Band-weighted mean squared EDR difference on the 3968-sample bodies.

    Weights are normalised to sum to one, so the result is a weighted mean
    over bands of the per-band mean squared error.
    """
    if generated.shape != truth.shape:
        raise ModelError(f"shape mismatch {tuple(generated.shape)} vs {tuple(truth.shape)}")
    w = torch.as_tensor(band_weights, dtype=generated.dtype)
    if w.shape != (6,) or torch.any(w <= 0):
        raise ModelError("band_weights must be 6 positive numbers")
    body_g = generated[..., :CROP_LENGTH]
    body_t = truth[..., :CROP_LENGTH]
    if body_g.ndim == 1:
        body_g, body_t = body_g[None], body_t[None]
    diff = (edr_torch(body_g) - edr_torch(body_t)) ** 2
    per_band = diff.mean(dim=(0, 1))
    return (per_band * w).sum() / w.sum()


def loss_generator(l_cgan, l_edr, l_mse, lambda_edr: float, lambda_mse: float):
    return l_cgan + lambda_edr * l_edr + lambda_mse * l_mse


# ---------------------------------------------------------------------------
# inference


def generate(embedding, generator: Generator) -> np.ndarray:
    """Packed IR(s) for one (14,) or a batch (B, 14) of embeddings."""
    for p in generator.parameters():
        if not torch.all(torch.isfinite(p)):
            raise ModelError("generator has non-finite parameters")
    emb = np.asarray(embedding, dtype=np.float64)
    single = emb.ndim == 1
    dtype = next(generator.parameters()).dtype
    x = torch.as_tensor(emb.reshape(-1, EMBEDDING_DIM), dtype=dtype)
    with torch.no_grad():
        out = generator(x).double().numpy()
    return out[0] if single else out


def discriminate(x, embedding, discriminator: Discriminator) -> np.ndarray:
    """Probability that ``x`` (packed IR or 3968x6 EDR) is real."""
    dtype = next(discriminator.parameters()).dtype
    x = torch.as_tensor(np.asarray(x), dtype=dtype)
    emb = torch.as_tensor(np.asarray(embedding), dtype=dtype)
    single = emb.ndim == 1
    if single:
        x, emb = x[None], emb[None]
    with torch.no_grad():
        out = discriminator(x, emb).double().numpy()
    return out[0] if single else out
