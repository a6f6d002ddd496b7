"""Conditioning canvas assembly.

Latents of two images are stacked along the height axis into a ``2h x w``
canvas with two slots. With the default layout slot 1 (top rows) holds the
garment and slot 2 (bottom rows) the person::

    noisy  N   = noise([enc(C)  ; enc(HC)])
    cond   X   =       [enc(HC) ; enc(HM)]
    mask   X_M =       [zeros   ; pool(M)]
    I          = channel concat [N ; X_M ; X]       -> [2c+1, 2h, w]

``swap_slots=True`` exchanges the two halves of every component.
All functions accept a single sample or a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import Codec
from .diffusion import NoiseSchedule, add_noise
from .errors import ShapeError

BACKGROUND = 1.0


@dataclass
class TryOffPair:
    """One record: person image, garment mask on the person and (optionally) the flat-lay.

    Images are float32 ``[3, H, W]`` arrays in ``[0, 1]``; the mask is ``[H, W]``.
    """

    id: str
    person: np.ndarray
    mask: np.ndarray
    garment: np.ndarray | None = None
    masked_person: np.ndarray | None = None
    category: str = ""
    body_view: str = "half"

    def __post_init__(self):
        if self.masked_person is None:
            self.masked_person = make_masked_person(self.person, self.mask)
        H, W = self.person.shape[-2:]
        for name in ("mask", "garment", "masked_person"):
            arr = getattr(self, name)
            if arr is not None and tuple(arr.shape[-2:]) != (H, W):
                raise ShapeError(f"pair {self.id}: {name} size {arr.shape[-2:]} differs from person {H}x{W}")


@dataclass
class LatentCanvas:
    noisy: torch.Tensor  # [..., c, 2h, w]
    mask: torch.Tensor  # [..., 1, 2h, w]
    cond: torch.Tensor  # [..., c, 2h, w]

    @property
    def assembled(self) -> torch.Tensor:
        return torch.cat([self.noisy, self.mask, self.cond], dim=-3)

    def with_noisy(self, noisy: torch.Tensor) -> "LatentCanvas":
        return LatentCanvas(noisy=noisy, mask=self.mask, cond=self.cond)


@dataclass
class PairLatents:
    """Encoded pieces of one pair or a batch of pairs, computed once and reused."""

    person: torch.Tensor  # enc(HC)
    masked_person: torch.Tensor  # enc(HM)
    mask: torch.Tensor  # pooled mask, [..., 1, h, w]
    garment: torch.Tensor | None = None  # enc(C)

    def __getitem__(self, idx) -> "PairLatents":
        return PairLatents(
            person=self.person[idx],
            masked_person=self.masked_person[idx],
            mask=self.mask[idx],
            garment=None if self.garment is None else self.garment[idx],
        )


def make_masked_person(person, mask, background: float = BACKGROUND):
    """``M * HC + (1 - M) * background`` for numpy arrays or tensors."""
    if tuple(person.shape[-2:]) != tuple(mask.shape[-2:]):
        raise ShapeError(f"person {tuple(person.shape)} and mask {tuple(mask.shape)} sizes differ")
    m = mask[..., None, :, :]
    return m * person + (1 - m) * background


def downsample_mask(mask, f: int):
    """Average-pool a ``[..., H, W]`` mask over non-overlapping ``f x f`` blocks."""
    H, W = mask.shape[-2:]
    if H % f or W % f:
        raise ShapeError(f"mask size {H}x{W} not divisible by {f}")
    lead = mask.shape[:-2]
    return mask.reshape(*lead, H // f, f, W // f, f).mean(axis=(-3, -1))


def _stack(top, bottom, swap):
    a, b = (bottom, top) if swap else (top, bottom)
    if isinstance(a, np.ndarray):
        return np.concatenate([a, b], axis=-2)
    return torch.cat([a, b], dim=-2)


def encode_pairs(pairs, codec: Codec, dtype=torch.float32) -> PairLatents:
    """Encode a list of pairs into batched latents (garment only if every pair has one)."""
    def batch(name):
        return torch.as_tensor(np.stack([getattr(p, name) for p in pairs]), dtype=dtype)

    person = codec.encode(batch("person"))
    masked = codec.encode(batch("masked_person"))
    mask = downsample_mask(batch("mask"), codec.factor)[:, None]
    garment = None
    if all(p.garment is not None for p in pairs):
        garment = codec.encode(batch("garment"))
    return PairLatents(person=person, masked_person=masked, mask=mask, garment=garment)


def encode_pair(pair: TryOffPair, codec: Codec, dtype=torch.float32) -> PairLatents:
    return encode_pairs([pair], codec, dtype)[0]


def clean_target(latents: PairLatents, swap_slots: bool = False) -> torch.Tensor:
    """The denoising target ``[enc(C); enc(HC)]``."""
    if latents.garment is None:
        raise ValueError("training canvas needs the garment image")
    return _stack(latents.garment, latents.person, swap_slots)


def conditioning(latents: PairLatents, swap_slots: bool = False, mask_channel: bool = True):
    """``(X_M, X)`` for the given latents; ``mask_channel=False`` zeroes ``X_M``."""
    pooled = latents.mask if mask_channel else torch.zeros_like(latents.mask)
    xm = _stack(torch.zeros_like(pooled), pooled, swap_slots)
    x = _stack(latents.person, latents.masked_person, swap_slots)
    return xm, x


def assemble_training_canvas(
    latents: PairLatents,
    eps: torch.Tensor,
    t,
    sched: NoiseSchedule,
    swap_slots: bool = False,
    mask_channel: bool = True,
) -> LatentCanvas:
    target = clean_target(latents, swap_slots)
    if eps.shape != target.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match canvas {tuple(target.shape)}")
    xm, x = conditioning(latents, swap_slots, mask_channel)
    return LatentCanvas(noisy=add_noise(target, eps, t, sched), mask=xm, cond=x)


def assemble_inference_canvas(
    latents: PairLatents,
    z_T: torch.Tensor,
    swap_slots: bool = False,
    mask_channel: bool = True,
) -> LatentCanvas:
    """Same layout as training, but both noisy slots start as ``z_T``."""
    xm, x = conditioning(latents, swap_slots, mask_channel)
    if z_T.shape != x.shape:
        raise ShapeError(f"z_T shape {tuple(z_T.shape)} does not match canvas {tuple(x.shape)}")
    return LatentCanvas(noisy=z_T, mask=xm, cond=x)


def garment_slot_rows(height: int, swap_slots: bool = False) -> slice:
    if height % 2:
        raise ShapeError(f"canvas height {height} is odd")
    h = height // 2
    return slice(h, None) if swap_slots else slice(0, h)


def extract_garment(z0_canvas, swap_slots: bool = False):
    """Garment slot of a ``[..., c, 2h, w]`` canvas."""
    rows = garment_slot_rows(z0_canvas.shape[-2], swap_slots)
    return z0_canvas[..., rows, :]
