"""Adam, the staged training schedule, and the flat config file format.

Stage 1 trains all four scales with every loss term; stage 2 drops to the
two finest scales; stage 3 keeps those scales but disables smoothness and
occlusion regularization. Per-epoch mean losses append to train_log.csv and
a checkpoint lands at each stage boundary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import scenes
from .losses import LossTerms, LossWeights, StereoSample, total_loss
from .network import ArchConfig, ConfigError, DepthNet, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    stage_epochs: tuple = (25, 5, 5)
    seed: int = 0
    dataset_dir: str = ""
    checkpoint_dir: str = "checkpoints"
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.stage_epochs = tuple(int(e) for e in self.stage_epochs)
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            raise ConfigError(f"stage_epochs must be 3 non-negative integers, got {self.stage_epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def stage_plan(stage_epochs):
    """(epochs, active scales, term flags) per stage."""
    return [
        (stage_epochs[0], (0, 1, 2, 3), LossTerms()),
        (stage_epochs[1], (0, 1), LossTerms()),
        (stage_epochs[2], (0, 1), LossTerms(smoothness=False, occlusion=False)),
    ]


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = [p if isinstance(p, ad.Tensor) else p[1] for p in params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(t.values) for t in self.tensors]
        self.v = [np.zeros_like(t.values) for t in self.tensors]

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for t, m, v in zip(self.tensors, self.m, self.v):
            g = t.grad
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                m += (1.0 - self.beta1) * g
                v += (1.0 - self.beta2) * g * g
            t.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _stack_samples(chunk):
    if len(chunk) == 1:
        return chunk[0]
    return StereoSample(
        left=ad.Tensor(np.concatenate([s.left.values for s in chunk])),
        right=ad.Tensor(np.concatenate([s.right.values for s in chunk])),
        baseline=chunk[0].baseline,
        focal=chunk[0].focal,
    )


def _train_epoch(net, opt, samples, rng, cfg, scales, terms):
    order = rng.permutation(len(samples))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
        batch = _stack_samples(chunk)
        left_set = net.forward(batch.left)
        right_set = net.forward(batch.right)
        loss = total_loss(left_set, right_set, batch, cfg.loss, scales, terms)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        total += loss.item() * len(chunk)
    return total / len(order)


def run_schedule(cfg: TrainConfig, log=None):
    """Train per the staged schedule; returns (net, log_path)."""
    samples, _, _ = scenes.load_dataset(cfg.dataset_dir)
    if not samples:
        raise ConfigError(f"dataset at {cfg.dataset_dir} is empty")
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)

    net = DepthNet(cfg.arch, seed=cfg.seed)
    opt = Adam(net.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    log_path = os.path.join(cfg.checkpoint_dir, "train_log.csv")
    with open(log_path, "w") as f:
        f.write("epoch,stage,mean_loss\n")

    epoch = 0
    for stage_no, (epochs, active_scales, terms) in enumerate(stage_plan(cfg.stage_epochs), start=1):
        for _ in range(epochs):
            epoch += 1
            mean_loss = _train_epoch(net, opt, samples, rng, cfg, active_scales, terms)
            with open(log_path, "a") as f:
                f.write(f"{epoch},{stage_no},{mean_loss:.17g}\n")
            if log is not None:
                log(f"epoch {epoch} (stage {stage_no}): loss {mean_loss:.6f}")
        save_checkpoint(os.path.join(cfg.checkpoint_dir, f"stage{stage_no}.fdpt"), net)
    save_checkpoint(os.path.join(cfg.checkpoint_dir, "final.fdpt"), net)
    return net, log_path


# ---------------------------------------------------------------------------
# flat `key = value` config files


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_tuple(text, kind):
    return tuple(kind(part.strip()) for part in text.split(",") if part.strip())


def parse_config(path):
    """Read a TrainConfig from namespaced `key = value` lines."""
    arch = {}
    loss = {}
    train = {}
    setters = {
        "arch.levels": ("num_levels", int, arch),
        "arch.widths": ("widths", lambda s: _parse_tuple(s, int), arch),
        "arch.kernel": ("kernel_size", int, arch),
        "arch.reservation": ("reservation", float, arch),
        "arch.coordconv": ("coordconv_enabled", _parse_bool, arch),
        "arch.fusion": ("fusion_enabled", _parse_bool, arch),
        "arch.refinement": ("refinement_enabled", _parse_bool, arch),
        "arch.d_max": ("d_max", float, arch),
        "loss.alpha_ssim": ("alpha_ssim", float, loss),
        "loss.smoothness": ("smoothness", float, loss),
        "loss.lr_consistency": ("lr_consistency", float, loss),
        "loss.occlusion": ("occlusion", float, loss),
        "loss.scale_factors": ("scale_factors", lambda s: _parse_tuple(s, float), loss),
        "train.lr": ("lr", float, train),
        "train.beta1": ("beta1", float, train),
        "train.beta2": ("beta2", float, train),
        "train.eps": ("eps", float, train),
        "train.batch_size": ("batch_size", int, train),
        "train.stage_epochs": ("stage_epochs", lambda s: _parse_tuple(s, int), train),
        "train.seed": ("seed", int, train),
        "train.checkpoint_dir": ("checkpoint_dir", str, train),
        "data.dir": ("dataset_dir", str, train),
    }
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in setters:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            name, convert, bucket = setters[key]
            try:
                bucket[name] = convert(value)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return TrainConfig(arch=ArchConfig(**arch), loss=LossWeights(**loss), **train)


def default_config_text():
    """A config file with every key at its default, ready to edit."""
    return (
        "# fusiondepth training configuration\n"
        "arch.levels = 5\n"
        "arch.widths = 16, 32, 64, 128, 256\n"
        "arch.kernel = 3\n"
        "arch.reservation = 0.5\n"
        "arch.coordconv = true\n"
        "arch.fusion = true\n"
        "arch.refinement = true\n"
        "arch.d_max = 0.3\n"
        "loss.alpha_ssim = 0.85\n"
        "loss.smoothness = 0.1\n"
        "loss.lr_consistency = 1.0\n"
        "loss.occlusion = 0.01\n"
        "loss.scale_factors = 1, 0.5, 0.25, 0.125\n"
        "train.lr = 1e-4\n"
        "train.beta1 = 0.9\n"
        "train.beta2 = 0.999\n"
        "train.eps = 1e-8\n"
        "train.batch_size = 1\n"
        "train.stage_epochs = 25, 5, 5\n"
        "train.seed = 0\n"
        "train.checkpoint_dir = checkpoints\n"
        "data.dir = data\n"
    )
