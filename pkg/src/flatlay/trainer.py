"""Training: epsilon-prediction over conditioning canvases with selective parameter groups."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import Codec, CodecConfig, build_codec
from .conditioning import PairLatents, assemble_training_canvas, encode_pairs, garment_slot_rows
from .diffusion import NoiseSchedule, ldm_loss
from .errors import CheckpointError, ConfigError, NumericError
from .unet import ParamGroupSelector, UNetConfig, UNetModel, build_unet, check_schedule, select_trainable

log = logging.getLogger(__name__)

LOSS_REGIONS = ("full_canvas", "garment_slot")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    epochs: int = 30
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    selector: str = "transformer"
    seed: int = 0
    loss_region: str = "full_canvas"
    val_fraction: float = 0.1
    mask_channel: bool = True
    swap_slots: bool = False

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.loss_region not in LOSS_REGIONS:
            raise ConfigError(f"train.loss_region must be one of {LOSS_REGIONS}, got {self.loss_region!r}")
        try:
            ParamGroupSelector(self.selector)
        except ValueError:
            raise ConfigError(
                f"train.selector must be one of {[s.value for s in ParamGroupSelector]}, got {self.selector!r}"
            ) from None
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"train.val_fraction must be in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the first ``round(val_fraction * n)`` indices (at least one if
    ``val_fraction > 0`` and ``n > 1``) form the validation split."""
    perm = np.random.default_rng([seed, 0x5A11]).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class Trainer:
    """Owns the model, its AdamW optimizer over the selected parameters, and the RNG."""

    def __init__(
        self,
        model: UNetModel,
        codec: Codec,
        sched: NoiseSchedule,
        config: TrainConfig,
        step: int = 0,
    ):
        config.validate()
        if model.config.out_channels != codec.latent_channels:
            raise ConfigError(
                f"unet.out_channels ({model.config.out_channels}) must equal codec.latent_channels "
                f"({codec.latent_channels})"
            )
        check_schedule(model, sched)
        self.model = model
        self.codec = codec
        self.sched = sched
        self.config = config
        self.step = step
        self.generator = torch.Generator().manual_seed(config.seed)
        self.history: list[dict] = []
        self.selected = select_trainable(model, config.selector)
        for name, p in model.named_parameters():
            p.requires_grad_(name in self.selected)
        self.optimizer = torch.optim.AdamW(
            list(self.selected.values()),
            lr=config.learning_rate,
            betas=tuple(config.betas),
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
            foreach=False,
        )

    # -- loss -------------------------------------------------------------------

    def _loss(self, latents: PairLatents, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        canvas = assemble_training_canvas(
            latents, eps, t, self.sched, swap_slots=self.config.swap_slots, mask_channel=self.config.mask_channel
        )
        pred = self.model(canvas.assembled, t)
        if self.config.loss_region == "garment_slot":
            rows = garment_slot_rows(eps.shape[-2], self.config.swap_slots)
            return ldm_loss(eps[..., rows, :], pred[..., rows, :])
        return ldm_loss(eps, pred)

    def _draw(self, latents: PairLatents, generator: torch.Generator):
        b = latents.person.shape[0]
        shape = (b, latents.person.shape[1], 2 * latents.person.shape[2], latents.person.shape[3])
        t = torch.randint(0, self.sched.T, (b,), generator=generator)
        eps = torch.randn(shape, generator=generator, dtype=latents.person.dtype)
        return eps, t

    def train_step(self, batch, eps: torch.Tensor | None = None, t: torch.Tensor | None = None) -> float:
        """One AdamW update on ``batch`` (list of pairs or :class:`PairLatents`); returns the loss.

        ``eps`` and ``t`` are drawn from the trainer's generator unless both are given.
        """
        latents = batch if isinstance(batch, PairLatents) else encode_pairs(batch, self.codec)
        if latents.person.shape[0] == 0:
            raise ValueError("empty batch")
        if eps is None or t is None:
            eps, t = self._draw(latents, self.generator)
        self.model.train()
        loss = self._loss(latents, eps, t)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {loss.item()} at step {self.step} (t={t.tolist()})")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(list(self.selected.values()), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        return float(loss.item())

    @torch.no_grad()
    def evaluate(self, latents: PairLatents, seed: int, batch_size: int = 64) -> float:
        """Mean denoising loss on ``latents`` with noise and timesteps fixed by ``seed``."""
        self.model.eval()
        gen = torch.Generator().manual_seed(seed)
        eps, t = self._draw(latents, gen)
        n = latents.person.shape[0]
        total = 0.0
        for i in range(0, n, batch_size):
            sl = slice(i, min(i + batch_size, n))
            total += float(self._loss(latents[sl], eps[sl], t[sl])) * (sl.stop - sl.start)
        return total / n

    # -- persistence ------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {}
        for name, p in self.model.named_parameters():
            tensors[f"param/{name}"] = p.detach().cpu().numpy().astype("<f4")
        for name, p in self.selected.items():
            st = self.optimizer.state.get(p)
            if st:
                tensors[f"adam/exp_avg/{name}"] = st["exp_avg"].cpu().numpy().astype("<f8")
                tensors[f"adam/exp_avg_sq/{name}"] = st["exp_avg_sq"].cpu().numpy().astype("<f8")
        tensors["rng/torch"] = self.generator.get_state().numpy().astype(np.uint8)
        return tensors

    def save(self, path) -> None:
        adam_steps = {}
        for name, p in self.selected.items():
            st = self.optimizer.state.get(p)
            if st:
                adam_steps[name] = float(st["step"])
        meta = {
            "unet": self.model.config.to_dict(),
            "codec": self.codec.config.to_dict(),
            "schedule": self.sched.to_dict(),
            "train": self.config.to_dict(),
            "step": self.step,
            "adam_steps": adam_steps,
            "history": self.history,
        }
        ckpt.write_container(path, meta, self.state_tensors())

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "Trainer":
        """Restore a trainer; ``config`` overrides the stored training config (e.g. more epochs)."""
        meta, tensors = ckpt.read_container(path)
        try:
            unet_cfg = UNetConfig.from_dict(meta["unet"])
            codec = build_codec(CodecConfig.from_dict(meta["codec"]))
            sched = NoiseSchedule.from_dict(meta["schedule"])
            stored = TrainConfig.from_dict(meta["train"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: missing or malformed config block ({exc})") from exc
        model = build_unet(unet_cfg, sched)
        load_parameters(model, tensors, path)
        trainer = cls(model, codec, sched, config or stored, step=int(meta["step"]))
        trainer.history = list(meta.get("history", []))
        trainer.generator.set_state(torch.from_numpy(tensors["rng/torch"].copy()))
        for name, p in trainer.selected.items():
            key = f"adam/exp_avg/{name}"
            if key in tensors:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(meta["adam_steps"][name], dtype=torch.float32),
                    "exp_avg": torch.from_numpy(tensors[key].astype(np.float32)),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam/exp_avg_sq/{name}"].astype(np.float32)),
                }
        return trainer


def load_parameters(model: torch.nn.Module, tensors: dict[str, np.ndarray], source="checkpoint") -> None:
    params = dict(model.named_parameters())
    stored = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    if set(stored) != set(params):
        extra, missing = sorted(set(stored) - set(params)), sorted(set(params) - set(stored))
        raise CheckpointError(f"{source}: parameter names disagree with config (extra={extra[:5]}, missing={missing[:5]})")
    with torch.no_grad():
        for name, p in params.items():
            arr = stored[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{source}: {name} has shape {arr.shape}, config expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.astype(np.float32)))


def save_checkpoint(trainer: Trainer, path) -> None:
    trainer.save(path)


def load_checkpoint(path, config: TrainConfig | None = None) -> Trainer:
    return Trainer.load(path, config)


def load_model(path) -> tuple[UNetModel, Codec, NoiseSchedule, TrainConfig]:
    """Model, codec, schedule and training config from a checkpoint, for inference."""
    trainer = Trainer.load(path)
    trainer.model.eval()
    for p in trainer.model.parameters():
        p.requires_grad_(False)
    return trainer.model, trainer.codec, trainer.sched, trainer.config


@dataclass
class TrainResult:
    trainer: Trainer
    history: list = field(default_factory=list)


def train_loop(
    pairs,
    config: TrainConfig,
    unet_config: UNetConfig | None = None,
    codec_config: CodecConfig | None = None,
    sched: NoiseSchedule | None = None,
    *,
    trainer: Trainer | None = None,
    init_params: dict[str, np.ndarray] | None = None,
    checkpoint_path=None,
    progress=None,
) -> TrainResult:
    """Train on ``pairs`` for ``config.epochs`` epochs with a seeded train/validation split.

    Either build a fresh model from the given configs or continue ``trainer``
    (resumed from a checkpoint). ``init_params`` (``{"param/<name>": array}``)
    initialises a fresh model from pretrained weights, as when fine-tuning a
    subset of parameters. Returns the trainer and per-epoch rows
    ``{"epoch", "split", "loss"}``.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    if trainer is None:
        if unet_config is None or codec_config is None or sched is None:
            raise ConfigError("train_loop needs unet, codec and schedule configs when no trainer is given")
        model = build_unet(unet_config, sched)
        if init_params is not None:
            load_parameters(model, init_params, "init checkpoint")
        trainer = Trainer(model, build_codec(codec_config), sched, config)
    cfg = trainer.config
    train_idx, val_idx = split_indices(len(pairs), cfg.val_fraction, cfg.seed)
    train_lat = encode_pairs([pairs[i] for i in train_idx], trainer.codec)
    val_lat = encode_pairs([pairs[i] for i in val_idx], trainer.codec) if len(val_idx) else None
    n_train = len(train_idx)
    per_epoch = math.ceil(n_train / cfg.batch_size)
    val_seed = cfg.seed + 7919

    epoch_sum, epoch_count = 0.0, 0
    while trainer.step < cfg.epochs * per_epoch:
        epoch, pos = divmod(trainer.step, per_epoch)
        order = np.random.default_rng([cfg.seed, epoch + 1]).permutation(n_train)
        idx = torch.as_tensor(order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size])
        loss = trainer.train_step(train_lat[idx])
        epoch_sum += loss
        epoch_count += 1
        if trainer.step % per_epoch == 0:
            rows = [{"epoch": epoch + 1, "split": "train", "loss": epoch_sum / epoch_count}]
            if val_lat is not None:
                rows.append({"epoch": epoch + 1, "split": "val", "loss": trainer.evaluate(val_lat, val_seed)})
            trainer.history.extend(rows)
            log.info("epoch %d: %s", epoch + 1, ", ".join(f"{r['split']}={r['loss']:.5f}" for r in rows))
            if progress is not None:
                progress(rows)
            epoch_sum, epoch_count = 0.0, 0
            if checkpoint_path is not None:
                trainer.save(checkpoint_path)
    return TrainResult(trainer=trainer, history=list(trainer.history))


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("epoch", "split", "loss"), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({"epoch": row["epoch"], "split": row["split"], "loss": repr(float(row["loss"]))})

