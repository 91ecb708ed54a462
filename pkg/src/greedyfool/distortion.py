"""Per-pixel distortion (modification visibility) maps.

A distortion map rho is an (H, W) field in the open interval (0, 1); high
values mark pixels where an edit is easy to see. Maps come either from a
generator trained against a discriminator on noise-perturbed images, or from
a local-variance heuristic.

The GAN side works on the [0, 1] value scale; public helpers taking images
on the 0-255 scale say so.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import autodiff as ad
from .nn import Discriminator, DistortionGenerator, InputSpec, Optimizer, TrainConfig, TrainingError

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-6
RHO_MARGIN = 0.01
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class GanConfig:
    delta: float = 8 / 255
    lam: float = 1e-5
    lr: float = 2e-3
    batch_size: int = 20
    epochs: int = 30
    seed: int = 0
    width: int = 16
    eta: float = SCORE_EPS

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def _broadcast_rho(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    if x.ndim == 3 and rho.shape == x.shape[1:]:
        return rho[None]
    if x.ndim == 4 and rho.ndim == 4 and rho.shape[1] == 1 and rho.shape[2:] == x.shape[2:]:
        return rho
    if x.ndim == 4 and rho.shape == x.shape[2:]:
        return rho[None, None]
    raise ValueError(f"distortion map shape {rho.shape} does not match image shape {x.shape}")


def perturb_for_training(x, rho, noise) -> np.ndarray:
    """clip(x + (1 - rho) * n) into [0, 1]; rho is shared by all channels."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x.shape:
        raise ValueError(f"noise shape {noise.shape} does not match image shape {x.shape}")
    return np.clip(x + (1.0 - _broadcast_rho(x, rho)) * noise, 0.0, 1.0)


def _clamp_scores(d, eta):
    d = np.clip(np.asarray(d, dtype=np.float64), eta, 1.0 - eta)
    assert np.all((d >= eta) & (d <= 1.0 - eta))
    return d


def discriminator_loss(d_clean, d_partial, d_global, eta: float = SCORE_EPS) -> float:
    """-(2 log D(x) + log(1 - D(x')) + log(1 - D(x''))), averaged over a batch."""
    a, b, c = (_clamp_scores(v, eta) for v in (d_clean, d_partial, d_global))
    return float(np.mean(-(2 * np.log(a) + np.log(1 - b) + np.log(1 - c))))


def generator_loss(d_partial, rho, lam: float, eta: float = SCORE_EPS) -> float:
    """-log D(x') + lam * mean(rho), averaged over a batch."""
    d = _clamp_scores(d_partial, eta)
    return float(np.mean(-np.log(d)) + lam * np.mean(rho))


def _log_score(d: ad.Tensor, eta: float) -> ad.Tensor:
    return ad.log(ad.clamp(d, eta, 1.0 - eta))


def _log_one_minus(d: ad.Tensor, eta: float) -> ad.Tensor:
    return ad.log(ad.clamp(1.0 - d, eta, 1.0 - eta))


def distortion_map(generator: DistortionGenerator, x) -> np.ndarray:
    """rho for one 0-255 image (C, H, W) -> (H, W), or a batch -> (N, H, W)."""
    x = np.asarray(x, dtype=np.float64) / 255.0
    out = generator(x)
    return np.asarray(out[0] if out.ndim == 3 else out[:, 0], dtype=np.float64)


def train_distortion_gan(images, config: GanConfig | None = None) -> DistortionGenerator:
    """Minimax training of a distortion generator against a discriminator.

    ``images`` are (N, C, H, W) on the 0-255 scale (or a LabeledImageSet).
    Each step draws fresh uniform noise n in (-delta, delta), builds the
    partially perturbed x' = clip(x + (1 - rho) n) and globally perturbed
    x'' = clip(x + n), updates D on (x, x', x'') and then G on x'.
    Per-epoch losses and mean rho are stored in ``generator.metadata``.
    """
    config = config or GanConfig()
    images = np.asarray(getattr(images, "images", images), dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a non-empty (N, C, H, W) image array")
    x_all = (images / 255.0).astype(np.float32)
    n, c, h, w = x_all.shape
    spec = InputSpec(c, h, w, 255.0)
    gen = DistortionGenerator.create(spec, width=config.width, seed=config.seed)
    disc = Discriminator.create(spec, width=config.width, seed=config.seed + 1)
    opt_cfg = TrainConfig(optimizer="adam", lr=config.lr, batch_size=config.batch_size, seed=config.seed)
    opt_g, opt_d = Optimizer(opt_cfg), Optimizer(opt_cfg)
    rng = np.random.default_rng(config.seed)
    eta, lam = config.eta, config.lam

    def mean_rho() -> float:
        return float(np.mean(np.concatenate([gen(x_all[i:i + 100]) for i in range(0, n, 100)])))

    curve = []
    init = mean_rho()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        d_total = g_total = 0.0
        for start in range(0, n, config.batch_size):
            xb = x_all[order[start:start + config.batch_size]]
            noise = rng.uniform(-config.delta, config.delta, size=xb.shape).astype(np.float32)
            rho = gen(xb)
            x_part = np.clip(xb + (1 - rho) * noise, 0, 1).astype(np.float32)
            x_glob = np.clip(xb + noise, 0, 1).astype(np.float32)

            batch = ad.Tensor(np.concatenate([xb, x_part, x_glob]), _owned=True)
            m = len(xb)
            with ad.Record() as rec:
                scores = disc.forward(batch, disc.param_tensors)
                real = _log_score(ad.take(scores, slice(0, m)), eta)
                fake = _log_one_minus(ad.take(scores, slice(m, 3 * m)), eta)
                d_loss = ad.scale(ad.reduce_sum(real) * 2.0 + ad.reduce_sum(fake), -1.0 / m)
            grads = rec.backward(d_loss)
            disc.params = opt_d.step(disc.params, {k: grads[t] for k, t in disc.param_tensors.items()})

            xt = ad.Tensor(xb, _owned=True)
            nt = ad.Tensor(noise, _owned=True)
            with ad.Record() as rec:
                rho_t = gen.forward(xt, gen.param_tensors)
                x1 = ad.clamp(xt + ad.mul(1.0 - rho_t, nt), 0.0, 1.0)
                score = disc.forward(x1, disc.param_tensors)
                g_loss = ad.scale(ad.reduce_mean(_log_score(score, eta)), -1.0)
                if lam:
                    g_loss = g_loss + ad.scale(ad.reduce_mean(rho_t), lam)
            grads = rec.backward(g_loss)
            gen.params = opt_g.step(gen.params, {k: grads[t] for k, t in gen.param_tensors.items()})

            dl, gl = float(d_loss.data), float(g_loss.data)
            if not (math.isfinite(dl) and math.isfinite(gl)):
                raise TrainingError(epoch)
            d_total += dl * m
            g_total += gl * m
        row = {"epoch": epoch + 1, "d_loss": d_total / n, "g_loss": g_total / n, "mean_rho": mean_rho()}
        curve.append(row)
        logger.info("gan epoch %d: %s", epoch + 1, row)
    gen.metadata.update({
        "gan_config": asdict(config),
        "curve": curve,
        "mean_rho_init": init,
        "mean_rho_final": curve[-1]["mean_rho"] if curve else init,
        "value_scale": 1.0,
    })
    return gen


def variance_distortion(x, margin: float = RHO_MARGIN) -> np.ndarray:
    """Distortion from 3x3 local standard deviation of luminance.

    rho = 1 - std / 127.5 (127.5 being the largest possible std on the
    0-255 scale), squashed into (margin, 1 - margin). Flat regions score
    high, textured regions low.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {x.shape}")
    lum = x[0] if x.shape[0] == 1 else np.tensordot(LUMA[: x.shape[0]] / LUMA[: x.shape[0]].sum(), x, axes=1)
    mean = uniform_filter(lum, size=3, mode="reflect")
    sq = uniform_filter(lum * lum, size=3, mode="reflect")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    rho = 1.0 - np.clip(std / 127.5, 0.0, 1.0)
    return margin + (1.0 - 2.0 * margin) * rho
