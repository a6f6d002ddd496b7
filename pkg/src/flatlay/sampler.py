"""DDIM inference: noise the canvas, denoise it with the U-Net, decode the garment slot."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch

from .codec import Codec
from .conditioning import PairLatents, TryOffPair, assemble_inference_canvas, encode_pairs, extract_garment
from .diffusion import NoiseSchedule, ddim_step, ddim_timesteps
from .errors import ConfigError, ShapeError
from .synth import write_png
from .unet import check_schedule


@dataclass
class SampleRequest:
    pair: TryOffPair
    seed: int = 0
    steps: int = 50
    eta: float = 0.0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")


def pair_seed(seed: int, pair_id: str) -> int:
    """63-bit generator seed derived from ``(seed, pair id)``."""
    digest = hashlib.blake2b(f"{int(seed)}:{pair_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def initial_noise(seed: int, pair_id: str, shape, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(pair_seed(seed, pair_id))
    return torch.randn(tuple(shape), generator=gen, dtype=dtype)


@torch.no_grad()
def denoise(
    denoiser,
    latents: PairLatents,
    z_T: torch.Tensor,
    sched: NoiseSchedule,
    steps: int = 50,
    eta: float = 0.0,
    swap_slots: bool = False,
    mask_channel: bool = True,
    generator: torch.Generator | None = None,
    trace=None,
) -> torch.Tensor:
    """Run the DDIM loop on a batch of canvases and return the clean latent canvas.

    ``denoiser(I, t)`` receives the assembled ``[B, 2c+1, 2h, w]`` canvas; only
    its noisy channels change between steps. ``trace(t, canvas)`` is called
    before every denoiser evaluation.
    """
    canvas = assemble_inference_canvas(latents, z_T, swap_slots, mask_channel)
    ts = ddim_timesteps(sched.T, steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        canvas = canvas.with_noisy(z)
        if trace is not None:
            trace(t, canvas)
        eps = denoiser(canvas.assembled, torch.full((z.shape[0],), t, dtype=torch.long))
        if eps.shape != z.shape:
            raise ShapeError(f"denoiser returned {tuple(eps.shape)}, expected {tuple(z.shape)}")
        z = ddim_step(z, eps, t, t_prev, sched, eta, generator)
    return z


def _canvas_shape(latents: PairLatents):
    b, c, h, w = latents.person.shape
    return (c, 2 * h, w)


@torch.no_grad()
def sample_batch(
    model,
    codec: Codec,
    sched: NoiseSchedule,
    pairs,
    seed: int,
    steps: int = 50,
    eta: float = 0.0,
    swap_slots: bool = False,
    mask_channel: bool = True,
    batch_size: int = 64,
) -> list[torch.Tensor]:
    """Flat-lay ``[3, H, W]`` images for ``pairs``; each pair's noise depends only on ``(seed, id)``."""
    if hasattr(model, "eval"):
        model.eval()
    check_schedule(model, sched)
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        lat = encode_pairs(chunk, codec)
        shape = _canvas_shape(lat)
        z_T = torch.stack([initial_noise(seed, p.id, shape) for p in chunk])
        gen = torch.Generator().manual_seed(pair_seed(seed, "eta:" + chunk[0].id)) if eta > 0 else None
        z0 = denoise(model, lat, z_T, sched, steps, eta, swap_slots, mask_channel, gen)
        imgs = codec.decode(extract_garment(z0, swap_slots)).clamp(0.0, 1.0)
        out.extend(imgs.unbind(0))
    return out


def sample(model, codec: Codec, sched: NoiseSchedule, request: SampleRequest, **canvas_flags) -> torch.Tensor:
    request.validate()
    return sample_batch(
        model, codec, sched, [request.pair], request.seed, request.steps, request.eta, **canvas_flags
    )[0]


def batch_sample(model, codec: Codec, sched: NoiseSchedule, pairs, seed: int, steps: int = 50, eta: float = 0.0,
                 **canvas_flags) -> dict[str, torch.Tensor]:
    """``{pair id: generated flat-lay}``; independent of the order of ``pairs``."""
    if not pairs:
        return {}
    imgs = sample_batch(model, codec, sched, list(pairs), seed, steps, eta, **canvas_flags)
    return {p.id: img for p, img in zip(pairs, imgs)}


def write_samples(samples: dict, seed: int, out_dir) -> list[Path]:
    """Write ``<id>_seed<seed>.png`` files; returns their paths in id order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for pid in sorted(samples):
        path = out / f"{pid}_seed{seed}.png"
        write_png(path, samples[pid].numpy())
        paths.append(path)
    return paths
