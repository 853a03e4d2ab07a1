"""Refocusing generator and discriminator.

The generator is a five-level encoder-decoder. Each down block is a
residual double convolution (the shortcut is channel-zero-padded to match
widths), blocks are joined by 2x2 max pooling; each up block concatenates
the matching pre-pool encoder tensor with a 2x transpose-convolution
upsampling of the deeper features, then applies a double convolution. A
final 3x3 convolution maps back to one channel. Input is the image
stacked with its normalized DPM as a 2-channel tensor.

The discriminator is six double-conv blocks (second conv stride 2) with
LeakyReLU(0.01), global average pooling, one hidden fully-connected layer
and a sigmoid score in (0, 1).

channel_scale shrinks every width by the same factor for desk-scale
runs; 1.0 is the full-size architecture.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import rng as rng_mod
from .errors import DimensionError
from .optim import ParamSet

GEN_DOWN_IN = [25, 72, 144, 288, 576]  # first conv of each down block
GEN_DOWN_OUT = [48, 96, 192, 384, 768]  # second conv / block output
GEN_UP_MID = [72, 144, 288, 576]  # first conv of each up block (level 1..4)
GEN_UP_OUT = [48, 96, 192, 384]  # second conv of each up block

DISC_MID = [48, 96, 192, 384, 768, 1536]
DISC_OUT = [96, 192, 384, 768, 1536, 3072]

LEAKY_SLOPE = 0.01
BIAS_INIT = 0.1


def _scaled(channels, scale):
    return [max(1, round(scale * c)) for c in channels]


@dataclass
class GeneratorConfig:
    channel_scale: float = 1.0
    in_channels: int = 2
    out_channels: int = 1
    levels: int = 5

    def down_in(self):
        return _scaled(GEN_DOWN_IN, self.channel_scale)

    def down_out(self):
        return _scaled(GEN_DOWN_OUT, self.channel_scale)

    def up_mid(self):
        return _scaled(GEN_UP_MID, self.channel_scale)

    def up_out(self):
        return _scaled(GEN_UP_OUT, self.channel_scale)

    def to_json(self) -> str:
        return json.dumps({"kind": "generator", **asdict(self)})


@dataclass
class DiscriminatorConfig:
    channel_scale: float = 1.0
    in_channels: int = 1
    blocks: int = 6

    def mid(self):
        return _scaled(DISC_MID, self.channel_scale)

    def out(self):
        return _scaled(DISC_OUT, self.channel_scale)

    def fc_width(self):
        return self.out()[-1]

    def to_json(self) -> str:
        return json.dumps({"kind": "discriminator", **asdict(self)})


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _xavier(gen, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape).astype(dtype)


def _add_conv(params, gen, name, in_ch, out_ch, k=3):
    w = _xavier(gen, (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.full(out_ch, BIAS_INIT, dtype=np.float32))


def _add_upconv(params, gen, name, in_ch, out_ch):
    w = _xavier(gen, (in_ch, out_ch, 2, 2), in_ch * 4, out_ch * 4)
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.full(out_ch, BIAS_INIT, dtype=np.float32))


def _add_fc(params, gen, name, in_f, out_f):
    params.add(f"{name}.w", _xavier(gen, (out_f, in_f), in_f, out_f))
    params.add(f"{name}.b", np.full(out_f, BIAS_INIT, dtype=np.float32))


def init_generator(config: GeneratorConfig, seed: int) -> ParamSet:
    """Xavier-uniform weights, all biases 0.1; bit-reproducible per seed."""
    params = ParamSet()
    gen = rng_mod.stream(seed, "init", "generator")
    k1, k2 = config.down_in(), config.down_out()
    k3, k4 = config.up_mid(), config.up_out()
    in_ch = config.in_channels
    for lvl in range(config.levels):
        _add_conv(params, gen, f"g.down{lvl + 1}.conv1", in_ch, k1[lvl])
        _add_conv(params, gen, f"g.down{lvl + 1}.conv2", k1[lvl], k2[lvl])
        in_ch = k2[lvl]
    for lvl in range(config.levels - 2, -1, -1):  # up levels 4..1
        deeper = k2[lvl + 1] if lvl == config.levels - 2 else k4[lvl + 1]
        _add_upconv(params, gen, f"g.up{lvl + 1}.upconv", deeper, deeper)
        _add_conv(params, gen, f"g.up{lvl + 1}.conv1", k2[lvl] + deeper, k3[lvl])
        _add_conv(params, gen, f"g.up{lvl + 1}.conv2", k3[lvl], k4[lvl])
    _add_conv(params, gen, "g.final", k4[0], config.out_channels)
    return params


def init_discriminator(config: DiscriminatorConfig, seed: int) -> ParamSet:
    params = ParamSet()
    gen = rng_mod.stream(seed, "init", "discriminator")
    i1, i2 = config.mid(), config.out()
    in_ch = config.in_channels
    for blk in range(config.blocks):
        _add_conv(params, gen, f"d.block{blk + 1}.conv1", in_ch, i1[blk])
        _add_conv(params, gen, f"d.block{blk + 1}.conv2", i1[blk], i2[blk])
        in_ch = i2[blk]
    width = config.fc_width()
    _add_fc(params, gen, "d.fc1", width, width)
    _add_fc(params, gen, "d.fc2", width, 1)
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def generator_forward(params: ParamSet, x, config: GeneratorConfig):
    """x: Tensor (B, 2, H, W) with H, W divisible by 16 -> Tensor (B, 1, H, W)."""
    x = ad.as_tensor(x)
    _, c, h, w = x.shape
    if c != config.in_channels:
        raise DimensionError(f"generator expects {config.in_channels} input channels, got {c}")
    if h % 16 or w % 16 or h < 32 or w < 32:
        raise DimensionError(
            f"generator input dims must be >= 32 and divisible by 16, got {h}x{w}; "
            "replicate-pad the image up to the next multiple"
        )
    k2 = config.down_out()
    skips = []
    t = x
    for lvl in range(config.levels):
        inner = ad.relu(ad.conv2d(t, params[f"g.down{lvl + 1}.conv1.w"], params[f"g.down{lvl + 1}.conv1.b"]))
        inner = ad.relu(ad.conv2d(inner, params[f"g.down{lvl + 1}.conv2.w"], params[f"g.down{lvl + 1}.conv2.b"]))
        t = ad.add(ad.pad_channels(t, k2[lvl]), inner)
        skips.append(t)
        if lvl + 1 < config.levels:
            t = ad.max_pool2x2(t)

    y = skips[-1]
    for lvl in range(config.levels - 2, -1, -1):
        y = ad.conv_transpose2x2(y, params[f"g.up{lvl + 1}.upconv.w"], params[f"g.up{lvl + 1}.upconv.b"])
        y = ad.concat_channels([skips[lvl], y])
        y = ad.relu(ad.conv2d(y, params[f"g.up{lvl + 1}.conv1.w"], params[f"g.up{lvl + 1}.conv1.b"]))
        y = ad.relu(ad.conv2d(y, params[f"g.up{lvl + 1}.conv2.w"], params[f"g.up{lvl + 1}.conv2.b"]))
    return ad.conv2d(y, params["g.final.w"], params["g.final.b"])


def discriminator_forward(params: ParamSet, x, config: DiscriminatorConfig):
    """x: Tensor (B, 1, H, W) with H, W divisible by 64 -> Tensor (B, 1) in (0, 1)."""
    x = ad.as_tensor(x)
    _, c, h, w = x.shape
    if c != config.in_channels:
        raise DimensionError(f"discriminator expects {config.in_channels} input channels, got {c}")
    if h % (1 << config.blocks) or w % (1 << config.blocks):
        raise DimensionError(
            f"discriminator input dims must be divisible by {1 << config.blocks}, got {h}x{w}"
        )
    t = x
    for blk in range(config.blocks):
        t = ad.leaky_relu(
            ad.conv2d(t, params[f"d.block{blk + 1}.conv1.w"], params[f"d.block{blk + 1}.conv1.b"]),
            LEAKY_SLOPE,
        )
        t = ad.leaky_relu(
            ad.conv2d(t, params[f"d.block{blk + 1}.conv2.w"], params[f"d.block{blk + 1}.conv2.b"], stride=2),
            LEAKY_SLOPE,
        )
    t = ad.global_avg_pool(t)
    t = ad.leaky_relu(ad.linear(t, params["d.fc1.w"], params["d.fc1.b"]), LEAKY_SLOPE)
    return ad.sigmoid(ad.linear(t, params["d.fc2.w"], params["d.fc2.b"]))


def discriminator_prepool_hw(config: DiscriminatorConfig, h: int, w: int):
    """Spatial dims entering the average pool for an HxW input."""
    return h >> config.blocks, w >> config.blocks


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------


def generator_param_count(config: GeneratorConfig) -> int:
    """Closed-form parameter tally from the layer lists alone."""

    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    k1, k2 = config.down_in(), config.down_out()
    k3, k4 = config.up_mid(), config.up_out()
    total = 0
    cin = config.in_channels
    for lvl in range(config.levels):
        total += conv(cin, k1[lvl]) + conv(k1[lvl], k2[lvl])
        cin = k2[lvl]
    for lvl in range(config.levels - 2, -1, -1):
        deeper = k2[lvl + 1] if lvl == config.levels - 2 else k4[lvl + 1]
        total += deeper * deeper * 4 + deeper  # up-convolution
        total += conv(k2[lvl] + deeper, k3[lvl]) + conv(k3[lvl], k4[lvl])
    total += conv(k4[0], config.out_channels)
    return total


def discriminator_param_count(config: DiscriminatorConfig) -> int:
    def conv(cin, cout):
        return cout * cin * 9 + cout

    i1, i2 = config.mid(), config.out()
    total = 0
    cin = config.in_channels
    for blk in range(config.blocks):
        total += conv(cin, i1[blk]) + conv(i1[blk], i2[blk])
        cin = i2[blk]
    width = config.fc_width()
    total += width * width + width
    total += width + 1
    return total


# ---------------------------------------------------------------------------
# checkpoint + config persistence
# ---------------------------------------------------------------------------


def save_model(path, params: ParamSet, config: GeneratorConfig):
    """DZCK parameters plus a JSON sidecar describing the architecture."""
    from pathlib import Path

    path = Path(path)
    checkpoint.save_params(path, params)
    path.with_suffix(".json").write_text(config.to_json() + "\n")


def load_model(path):
    """Returns (params, GeneratorConfig) for a checkpoint saved by save_model."""
    from pathlib import Path

    path = Path(path)
    params = checkpoint.load_params(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing model config sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    if meta.pop("kind", "generator") != "generator":
        raise ValueError(f"{path}: not a generator checkpoint")
    config = GeneratorConfig(**meta)
    expected = init_generator(config, seed=0)
    if expected.names() != params.names():
        raise ValueError(f"{path}: checkpoint parameters do not match config {config}")
    for name, t in expected.items():
        if t.data.shape != params[name].data.shape:
            raise ValueError(f"{path}: parameter {name!r} has shape {params[name].data.shape}, config expects {t.data.shape}")
    return params, config
