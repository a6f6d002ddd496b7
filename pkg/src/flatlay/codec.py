"""Fixed linear patch codec used in place of a learned VAE.

Images are cut into non-overlapping ``f x f`` patches; every patch (``3 f^2``
values) is mapped to ``c`` latent channels by one matrix. Two modes exist:

``orthonormal``
    ``c == 3 f^2``; the matrix is the per-channel 2-D orthonormal DCT-II,
    so decoding is the exact inverse. Latent channels are ordered by spatial
    frequency (low first), RGB interleaved, which puts the three patch means
    (times ``f``) in channels 0..2.
``dct_lowpass``
    ``1 <= c <= 3 f^2``; the first ``c`` rows of the ``orthonormal`` basis.
    Decoding with the transpose (its pseudo-inverse) keeps only the lowest
    spatial frequencies of each patch. Used for training, where a latent
    with fewer channels than the U-Net's base width is needed.
``random_projection``
    any ``c >= 1``; a seeded Gaussian projection, decoded with its
    Moore-Penrose pseudo-inverse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

IMAGE_CHANNELS = 3
MODES = ("orthonormal", "dct_lowpass", "random_projection")


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    mode: str = "random_projection"
    seed: int = 0

    @property
    def patch_dim(self) -> int:
        return IMAGE_CHANNELS * self.downsample_factor**2

    def validate(self) -> None:
        f, c = self.downsample_factor, self.latent_channels
        if not isinstance(f, int) or f < 1:
            raise ConfigError(f"codec.downsample_factor must be a positive integer, got {f!r}")
        if not isinstance(c, int) or c < 1:
            raise ConfigError(f"codec.latent_channels must be a positive integer, got {c!r}")
        if self.mode not in MODES:
            raise ConfigError(f"codec.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "orthonormal" and c != self.patch_dim:
            raise ConfigError(
                f"codec.latent_channels: orthonormal mode needs c = 3*f^2 = {self.patch_dim}, got {c}"
            )
        if self.mode == "dct_lowpass" and c > self.patch_dim:
            raise ConfigError(f"codec.latent_channels: dct_lowpass mode needs c <= 3*f^2 = {self.patch_dim}, got {c}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def _orthonormal_patch_basis(f: int) -> np.ndarray:
    d = _dct_matrix(f)
    freqs = sorted(((u, v) for u in range(f) for v in range(f)), key=lambda uv: (uv[0] + uv[1], uv[0]))
    rows = []
    for u, v in freqs:
        basis = np.outer(d[u], d[v]).ravel()
        for ch in range(IMAGE_CHANNELS):
            row = np.zeros((IMAGE_CHANNELS, f * f))
            row[ch] = basis
            rows.append(row.ravel())
    return np.stack(rows)


class Codec:
    """Immutable patch encoder/decoder.

    ``encoder`` has shape ``[c, 3 f^2]`` and ``decoder`` ``[3 f^2, c]``; both are
    float64 numpy arrays, with patch vectors flattened as ``(channel, row, col)``.
    """

    def __init__(self, config: CodecConfig):
        config.validate()
        self.config = config
        f, c = config.downsample_factor, config.latent_channels
        if config.mode in ("orthonormal", "dct_lowpass"):
            enc = _orthonormal_patch_basis(f)[:c].copy()
            dec = enc.T.copy()
        else:
            rng = np.random.default_rng(config.seed)
            enc = rng.standard_normal((c, config.patch_dim)) / np.sqrt(config.patch_dim)
            dec = np.linalg.pinv(enc)
        enc.setflags(write=False)
        dec.setflags(write=False)
        self.encoder = enc
        self.decoder = dec
        self._torch_cache: dict = {}

    @property
    def factor(self) -> int:
        return self.config.downsample_factor

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def _weights(self, dtype: torch.dtype):
        if dtype not in self._torch_cache:
            self._torch_cache[dtype] = (
                torch.tensor(np.array(self.encoder), dtype=dtype),
                torch.tensor(np.array(self.decoder), dtype=dtype),
            )
        return self._torch_cache[dtype]

    def encode(self, image):
        """Map ``[..., 3, H, W]`` images to ``[..., c, H/f, W/f]`` latents."""
        x = _as_tensor(image)
        f = self.factor
        if x.ndim < 3 or x.shape[-3] != IMAGE_CHANNELS:
            raise ShapeError(f"expected image of shape [..., 3, H, W], got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % f or W % f:
            raise ShapeError(f"image size {H}x{W} not divisible by downsample factor {f}")
        h, w = H // f, W // f
        lead = x.shape[:-3]
        p = x.reshape(*lead, IMAGE_CHANNELS, h, f, w, f)
        n = len(lead)
        # -> [..., h, w, 3, f, f]
        p = p.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4).reshape(*lead, h, w, -1)
        enc, _ = self._weights(x.dtype)
        z = p @ enc.T
        return z.permute(*range(n), n + 2, n, n + 1).contiguous()

    def decode(self, latent):
        """Map ``[..., c, h, w]`` latents back to ``[..., 3, f h, f w]`` images."""
        z = _as_tensor(latent)
        f, c = self.factor, self.latent_channels
        if z.ndim < 3 or z.shape[-3] != c:
            raise ShapeError(f"expected latent of shape [..., {c}, h, w], got {tuple(z.shape)}")
        h, w = z.shape[-2:]
        lead = z.shape[:-3]
        n = len(lead)
        _, dec = self._weights(z.dtype)
        p = z.permute(*range(n), n + 1, n + 2, n) @ dec.T  # [..., h, w, 3 f^2]
        p = p.reshape(*lead, h, w, IMAGE_CHANNELS, f, f)
        x = p.permute(*range(n), n + 2, n, n + 3, n + 1, n + 4)
        return x.reshape(*lead, IMAGE_CHANNELS, h * f, w * f).contiguous()


def build_codec(config: CodecConfig) -> Codec:
    return Codec(config)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))
