"""Full network assembly: feature provider, fusion neck, staged decoder, loss.

The frozen feature provider turns an H x W x 3 image into a three-level
pyramid; the neck fuses the pyramid down to an H/32 x W/32 map with eight
times the base channel width; the decoder runs four stages of blocks with
spatial-doubling/channel-halving upsamplers in between and emits a
reconstruction of each pyramid level.  Training minimizes the summed,
area-normalized squared reconstruction error across the three levels.
"""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat_last, mul, reshape, scale, sub, sum_all
from .blocks import BlockConfig, OmniBlock, block_param_count
from .errors import ConfigError, DimensionError, FormatError
from .ops import (
    batch_norm2d, batch_norm2d_infer, bilinear_resize, conv2d, pointwise_conv, relu,
)
from .params import ParamStore, trunc_normal
from .tensorfile import read_tensor, write_tensor

PROVIDERS = ("synthetic-cnn", "file")


@dataclass(frozen=True)
class NetworkConfig:
    input_h: int = 256
    input_w: int = 256
    channel_base: int = 64
    depths: tuple = (3, 9, 9, 7)
    token_count: int = 64
    n_heads: int = 4
    decouple_order: str = "Q+KV"
    global_enabled: bool = True
    local_enabled: bool = True
    provider: str = "synthetic-cnn"
    provider_seed: int = 7
    feature_dir: str = ""

    def __post_init__(self):
        if self.input_h % 32 or self.input_w % 32:
            raise ConfigError(
                f"input extents must be divisible by 32, got {self.input_h}x{self.input_w}")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be four integers >= 1, got {self.depths}")
        if self.channel_base % self.n_heads:
            raise ConfigError(
                f"channel base {self.channel_base} not divisible by {self.n_heads} heads")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"unknown provider {self.provider!r}; expected one of {PROVIDERS}")
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))

    @property
    def stage_dims(self):
        c = self.channel_base
        return (8 * c, 4 * c, 2 * c, c)

    @property
    def stage_grids(self):
        h, w = self.input_h, self.input_w
        return ((h // 32, w // 32), (h // 16, w // 16), (h // 8, w // 8), (h // 4, w // 4))

    def pyramid_shapes(self):
        c = self.channel_base
        h, w = self.input_h, self.input_w
        return (
            (h // 4, w // 4, c),
            (h // 8, w // 8, 2 * c),
            (h // 16, w // 16, 4 * c),
        )

    def fused_shape(self):
        return (self.input_h // 32, self.input_w // 32, 8 * self.channel_base)


@dataclass
class FeaturePyramid:
    """Multi-resolution feature maps from the last three encoder stages."""

    level1: np.ndarray     # H/4  x W/4  x C
    level2: np.ndarray     # H/8  x W/8  x 2C
    level3: np.ndarray     # H/16 x W/16 x 4C

    def levels(self):
        return (self.level1, self.level2, self.level3)

    def validate(self, cfg, source="pyramid"):
        for arr, want in zip(self.levels(), cfg.pyramid_shapes()):
            if arr.shape != want:
                raise FormatError(
                    f"{source}: level shape mismatch: expected {want}, found {arr.shape}")
        return self


class SyntheticCnnProvider:
    """Frozen, seed-determined strided CNN honoring the pyramid shape contract.

    A stride-2 stem followed by three stride-2 stages lands the outputs at
    1/4, 1/8 and 1/16 resolution with C, 2C and 4C channels.  Weights are
    drawn once from the seed and never trained.
    """

    def __init__(self, channel_base, seed=7):
        c = channel_base
        rng = np.random.default_rng(seed)
        plan = [(3, c), (c, c), (c, 2 * c), (2 * c, 4 * c)]
        self.kernels = []
        self.biases = []
        for cin, cout in plan:
            std = np.sqrt(2.0 / (9.0 * cin))
            self.kernels.append(rng.normal(0.0, std, size=(3, 3, cin, cout)))
            # Positive biases keep post-ReLU channel vectors away from
            # exact zero, where cosine similarity degenerates.
            self.biases.append(rng.uniform(0.02, 0.1, size=cout))

    def extract(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"provider expects an H x W x 3 image, got {image.shape}")
        x = Tensor(image)
        outputs = []
        for kernel, bias in zip(self.kernels, self.biases):
            x = relu(conv2d(x, Tensor(kernel), Tensor(bias), stride=2, padding=1))
            outputs.append(x.data)
        return FeaturePyramid(outputs[1], outputs[2], outputs[3])

    def weights_hash(self):
        digest = hashlib.sha256()
        for kernel, bias in zip(self.kernels, self.biases):
            digest.update(kernel.tobytes())
            digest.update(bias.tobytes())
        return digest.hexdigest()


class FileFeatureProvider:
    """Pyramid loader backed by portable tensor files.

    Record ``r`` maps to ``<dir>/<r>.l1.omni`` etc.; shapes are validated
    against the network configuration on every read.
    """

    def __init__(self, directory, cfg):
        self.directory = directory
        self.cfg = cfg

    def extract(self, record_id):
        arrays = []
        for level in (1, 2, 3):
            path = os.path.join(self.directory, f"{record_id}.l{level}.omni")
            arrays.append(read_tensor(path))
        return FeaturePyramid(*arrays).validate(self.cfg, source=f"record {record_id}")


def extract_features(image_or_record, provider):
    return provider.extract(image_or_record)


def make_provider(cfg):
    if cfg.provider == "synthetic-cnn":
        return SyntheticCnnProvider(cfg.channel_base, seed=cfg.provider_seed)
    return FileFeatureProvider(cfg.feature_dir, cfg)


def save_pyramid(directory, record_id, pyramid):
    os.makedirs(directory, exist_ok=True)
    for level, arr in zip((1, 2, 3), pyramid.levels()):
        write_tensor(os.path.join(directory, f"{record_id}.l{level}.omni"), arr, precision="f64")


class _Cbr:
    """Conv (bias-free) + channel normalization + ReLU."""

    def __init__(self, store, buffers, rng, prefix, cin, cout, stride):
        std = np.sqrt(2.0 / (9.0 * cin))
        self.kernel = store.add(f"{prefix}.kernel", rng.normal(0.0, std, size=(3, 3, cin, cout)))
        self.gain = store.add(f"{prefix}.gain", np.ones(cout))
        self.bias = store.add(f"{prefix}.bias", np.zeros(cout))
        self.stride = stride
        self.prefix = prefix
        self.buffers = buffers
        buffers[f"{prefix}.running_mean"] = np.zeros(cout)
        buffers[f"{prefix}.running_var"] = np.ones(cout)

    def forward(self, x, training, momentum=0.1):
        y = conv2d(x, self.kernel, stride=self.stride, padding=1)
        if training:
            y, mu, var = batch_norm2d(y, self.gain, self.bias)
            rm = self.buffers[f"{self.prefix}.running_mean"]
            rv = self.buffers[f"{self.prefix}.running_var"]
            # per-sample statistics folded into the running averages in
            # batch order
            for mu_row, var_row in zip(np.atleast_2d(mu), np.atleast_2d(var)):
                rm *= 1.0 - momentum
                rm += momentum * mu_row
                rv *= 1.0 - momentum
                rv += momentum * var_row
        else:
            y = batch_norm2d_infer(
                x=y, gain=self.gain, bias=self.bias,
                running_mean=self.buffers[f"{self.prefix}.running_mean"],
                running_var=self.buffers[f"{self.prefix}.running_var"])
        return relu(y)


class FusionNeck:
    """Progressively folds the three pyramid levels into one H/32 map.

    level1 is downsampled and concatenated with level2, fused, downsampled
    again and concatenated with level3, fused, then a bottleneck doubles the
    channels while halving the spatial extents.
    """

    def __init__(self, cfg, store, buffers, rng):
        c = cfg.channel_base
        self.cbr1 = _Cbr(store, buffers, rng, "neck.cbr1", c, 2 * c, stride=2)
        self.cbr2 = _Cbr(store, buffers, rng, "neck.cbr2", 4 * c, 2 * c, stride=1)
        self.cbr3 = _Cbr(store, buffers, rng, "neck.cbr3", 2 * c, 4 * c, stride=2)
        self.cbr4 = _Cbr(store, buffers, rng, "neck.cbr4", 8 * c, 4 * c, stride=1)
        self.cbr5 = _Cbr(store, buffers, rng, "neck.cbr5", 4 * c, 8 * c, stride=2)

    def forward(self, pyramid, training=True):
        l1 = Tensor(pyramid.level1)
        l2 = Tensor(pyramid.level2)
        l3 = Tensor(pyramid.level3)
        x = self.cbr1.forward(l1, training)
        x = self.cbr2.forward(concat_last([x, l2]), training)
        x = self.cbr3.forward(x, training)
        x = self.cbr4.forward(concat_last([x, l3]), training)
        return self.cbr5.forward(x, training)

    __call__ = forward


class _StageUpsampler:
    """Doubles spatial extents bilinearly, halves channels pointwise."""

    def __init__(self, store, rng, prefix, cin):
        self.weight = store.add(f"{prefix}.w", trunc_normal(rng, (cin, cin // 2)))
        self.bias = store.add(f"{prefix}.b", np.zeros(cin // 2))
        self.cin = cin

    def forward(self, tokens, grid_hw):
        h, w = grid_hw
        batch = (tokens.data.shape[0],) if tokens.data.ndim == 3 else ()
        grid = reshape(tokens, batch + (h, w, self.cin))
        up = bilinear_resize(grid, (2 * h, 2 * w))
        projected = pointwise_conv(up, self.weight, self.bias)
        return reshape(projected, batch + (4 * h * w, self.cin // 2))


class Decoder:
    """Four block stages with inter-stage upsampling; emits three scales."""

    def __init__(self, cfg, store, rng):
        self.cfg = cfg
        dims = cfg.stage_dims
        grids = cfg.stage_grids
        self.stages = []
        self.upsamplers = []
        for s in range(4):
            block_cfg = BlockConfig(
                dim=dims[s], n_heads=cfg.n_heads, n_tokens=cfg.token_count,
                grid_h=grids[s][0], grid_w=grids[s][1],
                decouple_order=cfg.decouple_order,
                global_enabled=cfg.global_enabled, local_enabled=cfg.local_enabled)
            blocks = [OmniBlock(block_cfg, store, rng, f"decoder.s{s + 1}.b{i}")
                      for i in range(cfg.depths[s])]
            self.stages.append(blocks)
            if s < 3:
                self.upsamplers.append(
                    _StageUpsampler(store, rng, f"decoder.up{s + 1}", dims[s]))

    def forward(self, fused):
        """Map the fused H/32 x W/32 x 8C tensor to three reconstructed levels."""
        cfg = self.cfg
        grids = cfg.stage_grids
        dims = cfg.stage_dims
        batch = (fused.data.shape[0],) if fused.data.ndim == 4 else ()
        h0, w0 = grids[0]
        tokens = reshape(fused, batch + (h0 * w0, dims[0]))
        recons = []
        for s in range(4):
            for block in self.stages[s]:
                tokens = block(tokens)
            if s > 0:
                gh, gw = grids[s]
                recons.append(reshape(tokens, batch + (gh, gw, dims[s])))
            if s < 3:
                tokens = self.upsamplers[s].forward(tokens, grids[s])
        # Stage 2/3/4 outputs reconstruct level3/level2/level1 respectively.
        return recons[2], recons[1], recons[0]

    __call__ = forward


class OmniAdModel:
    """Provider + neck + decoder with a shared parameter registry."""

    def __init__(self, cfg, init_seed=0):
        self.cfg = cfg
        self.provider = make_provider(cfg)
        self.store = ParamStore()
        self.buffers = {}
        rng = np.random.default_rng(init_seed)
        self.neck = FusionNeck(cfg, self.store, self.buffers, rng)
        self.decoder = Decoder(cfg, self.store, rng)

    def extract(self, image_or_record):
        return extract_features(image_or_record, self.provider)

    def reconstruct(self, pyramid, training=True):
        fused = self.neck.forward(pyramid, training=training)
        return self.decoder.forward(fused)

    def parameters(self):
        return self.store.named()


def stack_pyramids(pyramids):
    """Stack per-image pyramids into one batched pyramid."""
    return FeaturePyramid(
        np.stack([p.level1 for p in pyramids]),
        np.stack([p.level2 for p in pyramids]),
        np.stack([p.level3 for p in pyramids]))


def reconstruction_loss(pyramid, recons):
    """Sum over scales of squared error divided by that scale's pixel count."""
    total = None
    for orig, recon in zip(pyramid.levels(), recons):
        if recon.data.shape != orig.shape:
            raise DimensionError(
                f"reconstruction shape {recon.data.shape} does not match features {orig.shape}")
        hk, wk = orig.shape[-3:-1]
        diff = sub(recon, Tensor(orig))
        term = scale(sum_all(mul(diff, diff)), 1.0 / (hk * wk))
        total = term if total is None else add(total, term)
    return total


def decoder_param_count(cfg):
    """Closed-form learnable-scalar count of the decoder."""
    total = 0
    for depth, dim in zip(cfg.depths, cfg.stage_dims):
        total += depth * block_param_count(
            dim, cfg.token_count, cfg.global_enabled, cfg.local_enabled)
    for dim in cfg.stage_dims[:3]:
        total += dim * (dim // 2) + dim // 2
    return total


def neck_param_count(cfg):
    c = cfg.channel_base
    conv = 9 * (c * 2 * c + 4 * c * 2 * c + 2 * c * 4 * c + 8 * c * 4 * c + 4 * c * 8 * c)
    affine = 2 * (2 * c + 2 * c + 4 * c + 4 * c + 8 * c)
    return conv + affine
