"""Mask-conditioned latent diffusion that turns photos of worn garments into flat-lay images.

Desk-scale components: a fixed linear patch codec, a small denoising U-Net
without cross-attention, training with selectable parameter groups, DDIM
sampling, a synthetic paired dataset, and SSIM/FID/KID evaluation.
"""

from .codec import Codec, CodecConfig, build_codec
from .conditioning import TryOffPair, assemble_inference_canvas, assemble_training_canvas, extract_garment
from .config import RunConfig, load_config
from .diffusion import NoiseSchedule, add_noise, ddim_step, ldm_loss, make_linear_schedule
from .errors import CheckpointError, ConfigError, DatasetError, NumericError, ShapeError
from .metrics import MetricReport, fid, kid, seed_sweep, ssim
from .sampler import SampleRequest, batch_sample, sample
from .synth import GarmentSpec, SceneSpec, generate_dataset, generate_pair, load_dataset, synthesize
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train_loop
from .unet import ParamGroupSelector, UNetConfig, build_unet, count_params, select_trainable

__version__ = "0.1.0"
