import struct

import numpy as np
import pytest
import torch

from flatlay.checkpoint import MAGIC, read_container, write_container
from flatlay.codec import CodecConfig, build_codec
from flatlay.conditioning import assemble_training_canvas, encode_pairs
from flatlay.diffusion import make_linear_schedule
from flatlay.errors import CheckpointError, ConfigError, NumericError
from flatlay.gradcheck import grad_check
from flatlay.synth import synthesize
from flatlay.trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    save_checkpoint,
    split_indices,
    train_loop,
    write_loss_csv,
)
from flatlay.unet import UNetConfig, build_unet, select_trainable

CODEC = CodecConfig(4, 4, "random_projection", seed=0)
SMALL = UNetConfig(base_channels=16, channel_multipliers=[1, 2], attention_levels=[1], seed=0)


@pytest.fixture(scope="module")
def pairs():
    return synthesize(12, 3)


@pytest.fixture(scope="module")
def codec():
    return build_codec(CODEC)


def perturb_output(model, seed=0):
    torch.nn.init.normal_(model.out_conv.weight, std=0.05, generator=torch.Generator().manual_seed(seed))
    return model


def make_trainer(codec, **overrides):
    cfg = TrainConfig(**{"learning_rate": 1e-3, "batch_size": 4, "selector": "full", **overrides})
    return Trainer(perturb_output(build_unet(SMALL)), codec, make_linear_schedule(), cfg)


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_zero_learning_rate_is_a_no_op(pairs, codec):
    tr = make_trainer(codec, learning_rate=0.0)
    before = snapshot(tr.model)
    loss = tr.train_step(pairs[:4])
    assert loss > 0 and np.isfinite(loss)
    for n, p in tr.model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_transformer_selector_freezes_backbone(pairs, codec):
    tr = make_trainer(codec, selector="transformer")
    before = snapshot(tr.model)
    for _ in range(3):
        tr.train_step(pairs[:4])
    chosen = set(select_trainable(tr.model, "transformer"))
    moved = {n for n, p in tr.model.named_parameters() if not torch.equal(p, before[n])}
    assert moved and moved <= chosen


def test_overfit_one_batch(pairs, codec):
    """Fixed batch, noise and timesteps: 200 steps at lr 1e-3 remove >= 80% of the loss."""
    tr = Trainer(build_unet(UNetConfig(seed=0)), codec, make_linear_schedule(),
                 TrainConfig(learning_rate=1e-3, batch_size=4, selector="full"))
    lat = encode_pairs(pairs[:4], codec)
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(4, 4, 32, 12, generator=gen)
    t = torch.randint(0, 1000, (4,), generator=gen)
    losses = [tr.train_step(lat, eps, t) for _ in range(200)]
    assert losses[-1] <= 0.2 * losses[0]


def test_non_finite_loss_aborts(pairs, codec):
    tr = make_trainer(codec)
    with torch.no_grad():
        tr.model.conv_in.weight.fill_(float("inf"))
    with pytest.raises(NumericError, match="non-finite loss"):
        tr.train_step(pairs[:2])


def test_loss_never_negative(pairs, codec):
    tr = make_trainer(codec)
    assert all(tr.train_step(pairs[i:i + 2]) >= 0 for i in range(0, 8, 2))


class LinearStandIn(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.proj = torch.nn.Conv2d(9, 4, 1)

    def forward(self, x, t):
        return self.proj(x)


def test_grad_check_linear_stand_in():
    torch.manual_seed(0)
    report = grad_check(LinearStandIn(), torch.randn(9, 8, 6), 3, torch.randn(4, 8, 6), n_params=40)
    assert report.n_checked == 40
    assert report.max_rel_error < 1e-8


def test_grad_check_toy_unet():
    model = perturb_output(build_unet(UNetConfig(seed=2)), seed=1)
    gen = torch.Generator().manual_seed(3)
    canvas, eps = torch.randn(9, 16, 12, generator=gen), torch.randn(4, 16, 12, generator=gen)
    report = grad_check(model, canvas, 250, eps, n_params=100)
    assert report.n_checked == 100 and report.passed, report.max_rel_error
    assert sum(abs(e[2]) > 0 for e in report.entries) > 50


def test_zero_canvas_gradients_finite():
    model = perturb_output(build_unet(SMALL))
    x = torch.zeros(2, 9, 16, 12)
    model(x, torch.tensor([0, 999])).pow(2).mean().backward()
    assert all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)


# --- checkpoints -------------------------------------------------------------------


@pytest.fixture
def trained(pairs, codec):
    tr = make_trainer(codec, selector="transformer", learning_rate=1e-4)
    tr.train_step(pairs[:4])
    tr.train_step(pairs[4:8])
    return tr


def test_save_load_save_identical(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_dtypes(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    meta, tensors = read_container(tmp_path / "a.ckpt")
    assert tensors["param/conv_in.weight"].dtype == np.dtype("<f4")
    assert any(k.startswith("adam/exp_avg/") and v.dtype == np.dtype("<f8") for k, v in tensors.items())
    assert meta["step"] == 2 and meta["unet"]["base_channels"] == 16


def test_resume_reproduces_next_loss(trained, pairs, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    resumed = load_checkpoint(tmp_path / "a.ckpt")
    assert resumed.train_step(pairs[8:12]) == trained.train_step(pairs[8:12])
    for (n, a), (_, b) in zip(trained.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(a, b), n


def test_truncated_checkpoint(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    for cut in (5, 20, len(data) - 7):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_corrupt_payload(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    data = bytearray((tmp_path / "a.ckpt").read_bytes())
    data[-100] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c.ckpt")


def test_version_mismatch(tmp_path):
    write_container(tmp_path / "v.ckpt", {}, {"x": np.zeros(2, dtype="<f4")})
    data = (tmp_path / "v.ckpt").read_bytes()
    hlen = struct.unpack("<I", data[8:12])[0]
    header = data[12:12 + hlen].replace(b'"format_version":1', b'"format_version":9')
    (tmp_path / "v.ckpt").write_bytes(MAGIC + struct.pack("<I", len(header)) + header + data[12 + hlen:])
    with pytest.raises(CheckpointError, match="format_version"):
        read_container(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_container(tmp_path / "m.ckpt")


def test_shape_mismatch_vs_config(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    meta, tensors = read_container(tmp_path / "a.ckpt")
    tensors["param/conv_in.weight"] = tensors["param/conv_in.weight"][:8]
    write_container(tmp_path / "s.ckpt", meta, tensors)
    with pytest.raises(CheckpointError, match="conv_in.weight"):
        load_checkpoint(tmp_path / "s.ckpt")


# --- loop --------------------------------------------------------------------------


def run_loop(pairs, epochs, **kw):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=epochs, selector="full", seed=5, val_fraction=0.25)
    return train_loop(pairs, cfg, SMALL, CODEC, make_linear_schedule(), **kw)


def test_train_loop_deterministic(pairs):
    a, b = run_loop(pairs, 2), run_loop(pairs, 2)
    assert a.history == b.history
    assert [(r["epoch"], r["split"]) for r in a.history] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    assert all(r["loss"] >= 0 for r in a.history)


def test_interrupted_loop_resumes_identically(pairs, tmp_path):
    full = run_loop(pairs, 3)
    run_loop(pairs, 1, checkpoint_path=tmp_path / "c.ckpt")
    stored = load_checkpoint(tmp_path / "c.ckpt").config
    trainer = load_checkpoint(tmp_path / "c.ckpt", TrainConfig.from_dict({**stored.to_dict(), "epochs": 3}))
    resumed = train_loop(pairs, trainer.config, trainer=trainer)
    assert resumed.history == full.history
    for (n, a), (_, b) in zip(full.trainer.model.named_parameters(), resumed.trainer.model.named_parameters()):
        assert torch.equal(a, b), n


def test_init_params_and_empty_dataset(pairs, trained):
    init = {k: v for k, v in trained.state_tensors().items() if k.startswith("param/")}
    res = run_loop(pairs, 0, init_params=init)
    assert torch.equal(res.trainer.model.conv_in.weight, trained.model.conv_in.weight)
    with pytest.raises(ValueError):
        run_loop([], 1)


def test_loss_csv(pairs, tmp_path):
    res = run_loop(pairs, 1)
    write_loss_csv(res.history, tmp_path / "losses.csv")
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss" and len(lines) == 3
    assert float(lines[1].split(",")[2]) == res.history[0]["loss"]


def test_split_indices():
    tr, va = split_indices(100, 0.1, 0)
    assert len(va) == 10 and len(tr) == 90
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
    assert np.array_equal(split_indices(100, 0.1, 0)[1], va)
    assert not np.array_equal(split_indices(100, 0.1, 1)[1], va)
    assert len(split_indices(5, 0.0, 0)[1]) == 0


@pytest.mark.parametrize(
    "kw",
    [{"learning_rate": -1.0}, {"batch_size": 0}, {"selector": "bias"}, {"loss_region": "x"}, {"val_fraction": 1.0}],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_out_channels_must_match_codec(codec):
    with pytest.raises(ConfigError, match="out_channels"):
        Trainer(build_unet(UNetConfig(out_channels=3)), codec, make_linear_schedule(), TrainConfig())


def test_garment_slot_loss_region(pairs, codec):
    tr = make_trainer(codec, loss_region="garment_slot", learning_rate=0.0)
    lat = encode_pairs(pairs[:2], codec)
    eps = torch.randn(2, 4, 32, 12)
    t = torch.tensor([10, 900])
    pred = tr.model(assemble_training_canvas(lat, eps, t, tr.sched).assembled, t)
    expect = (eps[..., :16, :] - pred[..., :16, :]).pow(2).mean().item()
    assert tr.train_step(lat, eps, t) == pytest.approx(expect, rel=1e-6)


def test_v_model_checkpoint_round_trip(pairs, codec, tmp_path):
    sched = make_linear_schedule(beta_end=0.015)
    cfg = UNetConfig(**{**SMALL.to_dict(), "parameterization": "v"})
    tr = Trainer(perturb_output(build_unet(cfg, sched)), codec, sched, TrainConfig(learning_rate=1e-3, batch_size=4))
    tr.train_step(pairs[:4])
    save_checkpoint(tr, tmp_path / "v.ckpt")
    resumed = load_checkpoint(tmp_path / "v.ckpt")
    assert resumed.model.config.parameterization == "v"
    assert resumed.train_step(pairs[4:8]) == tr.train_step(pairs[4:8])


def test_v_model_rejects_other_schedule(codec):
    model = build_unet(UNetConfig(**{**SMALL.to_dict(), "parameterization": "v"}), make_linear_schedule())
    with pytest.raises(ConfigError, match="schedule"):
        Trainer(model, codec, make_linear_schedule(beta_end=0.03), TrainConfig())
