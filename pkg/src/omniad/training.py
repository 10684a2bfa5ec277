"""Training loop, checkpoint format, and model (re)construction.

A checkpoint is a directory: ``manifest.txt`` holds the step counter and the
full serialized run configuration; ``tensors/`` holds one float64 portable
tensor file per parameter, per normalization buffer, and per optimizer slot,
so a reload reproduces forward outputs bitwise.
"""

import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .config import RunConfig, parse_config, serialize_config
from .errors import ConfigError, FormatError, TrainingDiverged
from .network import OmniAdModel, reconstruction_loss, stack_pyramids
from .optim import AdamW
from .tensorfile import read_tensor, write_tensor

_MANIFEST_MAGIC = "omniad-checkpoint v1"


def build_model(run_cfg):
    """Model + optimizer with initialization drawn from the run seed."""
    model = OmniAdModel(run_cfg.network_config(),
                        init_seed=np.random.default_rng([run_cfg.seed, 0]))
    optimizer = AdamW(model.parameters(), lr=run_cfg.lr, beta1=run_cfg.beta1,
                      beta2=run_cfg.beta2, eps=run_cfg.eps,
                      weight_decay=run_cfg.weight_decay)
    return model, optimizer


def train(run_cfg, corpus, nan_checkpoint_dir=None, progress=None):
    """Run the reconstruction objective for ``run_cfg.steps`` steps.

    Returns ``(model, optimizer, losses)`` with one loss value per step.
    Raises :class:`TrainingDiverged` on a non-finite loss, after writing the
    parameters that last produced a finite loss to ``nan_checkpoint_dir``.
    """
    hw = corpus.image_hw
    if hw != (run_cfg.input_h, run_cfg.input_w):
        raise ConfigError(
            f"corpus images are {hw[0]}x{hw[1]} but the configuration expects "
            f"{run_cfg.input_h}x{run_cfg.input_w}")
    model, optimizer = build_model(run_cfg)
    features = [model.extract(img) for img in corpus.train_images]
    batch_rng = np.random.default_rng([run_cfg.seed, 1])
    n_train = len(features)
    losses = []
    good_params = {name: p.data.copy() for name, p in model.store.items()}
    good_buffers = {name: b.copy() for name, b in model.buffers.items()}
    for step in range(run_cfg.steps):
        idx = batch_rng.integers(0, n_train, size=run_cfg.batch_size)
        batch = stack_pyramids([features[i] for i in idx])
        with Tape() as tape:
            recons = model.reconstruct(batch, training=True)
            loss = ad.scale(reconstruction_loss(batch, recons),
                            1.0 / run_cfg.batch_size)
        value = loss.item()
        if not np.isfinite(value):
            ckpt = None
            if nan_checkpoint_dir is not None:
                for name, p in model.store.items():
                    p.data = good_params[name]
                model.buffers.update(good_buffers)
                save_checkpoint(nan_checkpoint_dir, model, optimizer, run_cfg, step)
                ckpt = nan_checkpoint_dir
            raise TrainingDiverged(step, ckpt)
        for name, p in model.store.items():
            np.copyto(good_params[name], p.data)
        for name, b in model.buffers.items():
            np.copyto(good_buffers[name], b)
        optimizer.zero_grad()
        backward(loss, tape)
        optimizer.step()
        losses.append(value)
        if progress is not None:
            progress(step, value)
    return model, optimizer, np.asarray(losses)


def write_loss_trace(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in enumerate(losses):
            fh.write(f"{step},{value!r}\n")


def save_checkpoint(directory, model, optimizer, run_cfg, step):
    tensor_dir = os.path.join(directory, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{_MANIFEST_MAGIC}\n")
        fh.write(f"step = {step}\n")
        fh.write("[config]\n")
        fh.write(serialize_config(run_cfg))
    for name, p in model.store.items():
        write_tensor(os.path.join(tensor_dir, f"param.{name}.omni"), p.data, "f64")
    for name, arr in model.buffers.items():
        write_tensor(os.path.join(tensor_dir, f"buffer.{name}.omni"), arr, "f64")
    for name, arr in optimizer.state_arrays().items():
        write_tensor(os.path.join(tensor_dir, f"optim.{name}.omni"), arr, "f64")


def load_checkpoint(directory):
    """Rebuild (model, optimizer, run_cfg, step) from a checkpoint directory."""
    manifest_path = os.path.join(directory, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise FormatError(f"not a checkpoint directory (missing manifest.txt): {directory}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MANIFEST_MAGIC:
        raise FormatError(f"bad checkpoint manifest header in {manifest_path}")
    step = None
    config_text = []
    in_config = False
    for line in lines[1:]:
        if line.strip() == "[config]":
            in_config = True
        elif in_config:
            config_text.append(line)
        elif line.startswith("step"):
            step = int(line.partition("=")[2])
    if step is None:
        raise FormatError(f"checkpoint manifest lacks a step counter: {manifest_path}")
    run_cfg = parse_config("\n".join(config_text))
    model, optimizer = build_model(run_cfg)
    tensor_dir = os.path.join(directory, "tensors")

    def fetch(name, expected_shape=None):
        path = os.path.join(tensor_dir, f"{name}.omni")
        if not os.path.isfile(path):
            raise FormatError(f"checkpoint tensor missing: {path}")
        arr = read_tensor(path)
        if expected_shape is not None and arr.shape != expected_shape:
            raise FormatError(
                f"checkpoint tensor {name}: shape {arr.shape}, expected {expected_shape}")
        return arr

    for name, p in model.store.items():
        p.data = fetch(f"param.{name}", p.data.shape)
    for name in list(model.buffers):
        model.buffers[name] = fetch(f"buffer.{name}", model.buffers[name].shape)
    state = {"t": fetch("optim.t")}
    for name, p in model.store.items():
        state[f"m.{name}"] = fetch(f"optim.m.{name}", p.data.shape)
        state[f"v.{name}"] = fetch(f"optim.v.{name}", p.data.shape)
    optimizer.load_state_arrays(state)
    return model, optimizer, run_cfg, step
