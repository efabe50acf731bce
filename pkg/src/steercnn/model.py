"""Dense steerable G-CNN architectures.

Classifier::

    input G-conv -> hidden G-conv -> [max-pool, dense block] x 4 -> G-pool
    -> 1x1 conv, ReLU -> 1x1 conv, ReLU -> 1x1 conv -> global average

Every G-conv is followed by G-batch-norm and ReLU. A dense unit concatenates
the block input with all previous unit outputs, then applies a 7x7 G-conv and
a 5x5 G-conv; the block ends with one more 5x5 G-conv over the concatenation.

The segmenter reuses the classifier trunk as encoder and decodes with
[upsample, concat skip, dense block] x 3, a last upsample + skip, one hidden
G-conv, G-pool and two 1x1 convs.

``family="plain"`` swaps steerable G-convs for unconstrained K x K kernels
with n = 1, the ordinary CNN baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .basis import DEFAULT_SIGMA, FrequencySpec, SteerableBasis, build_basis, param_count
from .gconv import BNState, GConvLayer, GroupConfig


class ConfigError(ValueError):
    pass


def scaled(base: int, width: float) -> int:
    """Round half up, minimum 1."""
    return max(1, int(math.floor(base * width + 0.5)))


@dataclass(frozen=True)
class DenseBlockConfig:
    units: int
    growth1: int = 14  # 7x7 conv output channels
    growth2: int = 6  # 5x5 conv output channels
    out_channels: int = 16
    size1: int = 7
    size2: int = 5
    final_size: int = 5


@dataclass(frozen=True)
class ModelConfig:
    n: int = 8
    family: str = "steerable"  # or "plain"
    head: str = "classifier"  # or "segmenter"
    in_channels: int = 1
    num_classes: int = 10
    num_maps: int = 2
    width: float = 0.25
    stem: int = 16
    growth1: int = 14
    growth2: int = 6
    block_out: int = 16
    head_hidden: tuple[int, ...] = (64, 32)
    block_units: tuple[int, ...] = (3, 4, 5, 6)
    decoder_units: tuple[int, ...] = (4, 3, 2)
    sigma: float = DEFAULT_SIGMA
    spec7: FrequencySpec = field(default_factory=lambda: FrequencySpec.default(7))
    spec5: FrequencySpec = field(default_factory=lambda: FrequencySpec.default(5))

    def __post_init__(self):
        if self.family not in ("steerable", "plain"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.head not in ("classifier", "segmenter"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.family == "plain" and self.n != 1:
            raise ConfigError("plain CNNs have n = 1")
        if self.n < 1:
            raise ConfigError("group order must be positive")
        if not self.block_units or any(u < 1 for u in self.block_units):
            raise ConfigError("block_units must be positive")
        if self.head == "segmenter" and len(self.decoder_units) != len(self.block_units) - 1:
            raise ConfigError("segmenter needs one decoder block per encoder block but the deepest")
        try:
            self.spec7.check_fits(7)
            self.spec5.check_fits(5)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def group(self) -> GroupConfig:
        return GroupConfig(self.n)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.block_units)

    def c(self, base: int) -> int:
        return scaled(base, self.width)

    def block(self, units: int) -> DenseBlockConfig:
        return DenseBlockConfig(units, self.c(self.growth1), self.c(self.growth2), self.c(self.block_out))

    def spec_for(self, size: int) -> FrequencySpec:
        return {7: self.spec7, 5: self.spec5}[size]


@dataclass
class Context:
    tape: ad.Tape
    train: bool
    probes: dict | None = None
    conv_calls: int = 0


class GConvUnit:
    """G-conv (steerable or plain), then G-batch-norm and optional ReLU."""

    def __init__(self, model: "Model", name: str, in_ch: int, out_ch: int, size: int,
                 input_layer: bool, relu: bool = True):
        cfg = model.cfg
        self.name = name
        self.relu = relu
        self.input_layer = input_layer
        self.layer = None
        if cfg.family == "steerable":
            basis = model.basis(size)
            self.layer = GConvLayer.random(basis, in_ch, out_ch, cfg.n, input_layer, model.rng)
            self.w = model.add_param(f"{name}.w", self.layer.weights, self.layer.mask)
            self.layer.weights = self.w.data
        else:
            std = math.sqrt(2.0 / (in_ch * size * size))
            self.w = model.add_param(f"{name}.w", model.rng.normal(0.0, std, (out_ch, in_ch, size, size)))
        self.gamma = model.add_param(f"{name}.gamma", np.ones(out_ch))
        self.beta = model.add_param(f"{name}.beta", np.zeros(out_ch))
        self.bn = model.add_bn(name, out_ch)

    def conv(self, ctx: Context, x: ad.Var) -> ad.Var:
        ctx.conv_calls += 1
        w = ctx.tape.param(self.w)
        if self.layer is None:
            if self.input_layer:
                x = ad.reshape(x, x.data.shape[:2] + (1,) + x.data.shape[2:])
            return ad.plain_g_conv(x, w)
        if self.input_layer:
            return ad.input_g_conv(x, w, self.layer)
        return ad.hidden_g_conv(x, w, self.layer)

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        y = self.conv(ctx, x)
        y = ad.g_batch_norm(y, ctx.tape.param(self.gamma), ctx.tape.param(self.beta), self.bn, ctx.train)
        if self.relu:
            y = ad.relu(y)
        if ctx.probes is not None:
            ctx.probes[self.name] = y.data
        return y


class DenseBlock:
    def __init__(self, model: "Model", name: str, in_ch: int, cfg: DenseBlockConfig):
        self.cfg = cfg
        self.units = []
        ch = in_ch
        for u in range(cfg.units):
            c1 = GConvUnit(model, f"{name}.u{u}.a", ch, cfg.growth1, cfg.size1, False)
            c2 = GConvUnit(model, f"{name}.u{u}.b", cfg.growth1, cfg.growth2, cfg.size2, False)
            self.units.append((c1, c2))
            ch += cfg.growth2
        self.concat_channels = ch
        self.final = GConvUnit(model, f"{name}.final", ch, cfg.out_channels, cfg.final_size, False)
        self.out_channels = cfg.out_channels

    def __call__(self, ctx: Context, f: ad.Var) -> ad.Var:
        feats = [f]
        for c1, c2 in self.units:
            x = feats[0] if len(feats) == 1 else ad.g_concat(feats)
            feats.append(c2(ctx, c1(ctx, x)))
        return self.final(ctx, ad.g_concat(feats))


def dense_block(ctx: Context, f: ad.Var, block: DenseBlock) -> ad.Var:
    return block(ctx, f)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Parameter] = {}
        self.bn: dict[str, BNState] = {}
        self._bases: dict[int, SteerableBasis] = {}
        c = cfg.c
        self.stem_in = GConvUnit(self, "stem.in", cfg.in_channels, c(cfg.stem), 7, True)
        self.stem_hidden = GConvUnit(self, "stem.hidden", c(cfg.stem), c(cfg.stem), 7, False)
        self.encoder = []
        ch = c(cfg.stem)
        self.skip_channels = [ch]
        for i, units in enumerate(cfg.block_units):
            blk = DenseBlock(self, f"enc{i}", ch, cfg.block(units))
            self.encoder.append(blk)
            ch = blk.out_channels
            self.skip_channels.append(ch)
        self.decoder = []
        if cfg.head == "segmenter":
            skips = self.skip_channels[:-1][::-1]  # deepest first, excluding bottleneck
            for i, units in enumerate(cfg.decoder_units):
                blk = DenseBlock(self, f"dec{i}", ch + skips[i], cfg.block(units))
                self.decoder.append(blk)
                ch = blk.out_channels
            self.seg_conv = GConvUnit(self, "dec.out", ch + skips[-1], c(cfg.block_out), 7, False)
            ch = c(cfg.block_out)
            widths = [c(h) for h in cfg.head_hidden[:1]] + [cfg.num_maps]
        else:
            widths = [c(h) for h in cfg.head_hidden] + [cfg.num_classes]
        self.head = []
        for i, w in enumerate(widths):
            std = math.sqrt(2.0 / ch)
            wp = self.add_param(f"head{i}.w", self.rng.normal(0.0, std, (w, ch, 1, 1)))
            bp = self.add_param(f"head{i}.b", np.zeros(w))
            self.head.append((wp, bp))
            ch = w

    # -- construction helpers
    def basis(self, size: int) -> SteerableBasis:
        if size not in self._bases:
            self._bases[size] = build_basis(self.cfg.spec_for(size), size, self.cfg.sigma)
        return self._bases[size]

    def add_param(self, name, data, mask=None) -> ad.Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = ad.Parameter(name, data, mask)
        self.params[name] = p
        return p

    def add_bn(self, name: str, channels: int) -> BNState:
        self.bn[name] = BNState.create(channels)
        return self.bn[name]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward
    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {shape}")
        d = self.cfg.downsample
        if shape[2] % d or shape[3] % d:
            raise ConfigError(f"input {shape[2]}x{shape[3]} not divisible by {d}")

    def forward(self, x, tape: ad.Tape | None = None, train: bool = False,
                probes: dict | None = None) -> ad.Var:
        """Logits (B, classes, 1, 1) or maps (B, num_maps, H, W).

        ``probes``, when given, is filled with the output of every G-conv unit
        (after batch norm and ReLU) keyed by layer name, plus ``"gpool"``.
        """
        tape = tape or ad.Tape(record=False)
        xv = x if isinstance(x, ad.Var) else tape.constant(x)
        self.check_input(xv.data.shape)
        ctx = Context(tape, train, probes)
        f = self.stem_hidden(ctx, self.stem_in(ctx, xv))
        skips = [f]
        for blk in self.encoder:
            f = blk(ctx, ad.max_pool2(f))
            skips.append(f)
        if self.cfg.head == "segmenter":
            for blk, skip in zip(self.decoder, skips[-2::-1]):
                f = blk(ctx, ad.g_concat([ad.bilinear_up2(f), skip]))
            f = ad.g_concat([ad.bilinear_up2(f), skips[0]])
            f = self.seg_conv(ctx, f)
        h = ad.g_pool(f)
        if probes is not None:
            probes["gpool"] = h.data
        for i, (wp, bp) in enumerate(self.head):
            h = ad.add_bias(ad.conv2d(h, tape.param(wp)), tape.param(bp))
            if i < len(self.head) - 1:
                h = ad.relu(h)
        if self.cfg.head == "classifier":
            h = ad.global_avg(h)
        self.last_conv_calls = ctx.conv_calls
        return h

    def __call__(self, x, train: bool = False) -> np.ndarray:
        out = self.forward(x, train=train).data
        return out.reshape(out.shape[0], -1) if self.cfg.head == "classifier" else out

    def conv_units(self) -> list[GConvUnit]:
        units = [self.stem_in, self.stem_hidden]
        for blk in self.encoder + self.decoder:
            for c1, c2 in blk.units:
                units += [c1, c2]
            units.append(blk.final)
        if self.cfg.head == "segmenter":
            units.append(self.seg_conv)
        return units


def calibrate_bn(model: Model, x: np.ndarray, batch_size: int = 64) -> None:
    """Set every running BN moment to its average over the batches of ``x``.

    Gives an untrained model usable eval-mode statistics.
    """
    states = list(model.bn.values())
    saved = [st.momentum for st in states]
    try:
        for i, start in enumerate(range(0, len(x), batch_size)):
            for st in states:
                st.momentum = i / (i + 1)
            model.forward(x[start:start + batch_size], train=True)
    finally:
        for st, m in zip(states, saved):
            st.momentum = m


def build_classifier(cfg: ModelConfig, seed: int = 0) -> Model:
    if cfg.head != "classifier":
        cfg = replace(cfg, head="classifier")
    return Model(cfg, seed)


def build_segmenter(cfg: ModelConfig, seed: int = 0) -> Model:
    if cfg.head != "segmenter":
        cfg = replace(cfg, head="segmenter")
    return Model(cfg, seed)


def _conv_params(cfg: ModelConfig, in_ch: int, out_ch: int, size: int, input_layer: bool) -> int:
    if cfg.family == "plain":
        filt = size * size
    else:
        filt = param_count(cfg.spec_for(size), cfg.n, hidden=not input_layer)
    return in_ch * out_ch * filt + 2 * out_ch  # + batch-norm gamma, beta


def analytic_param_count(cfg: ModelConfig) -> int:
    """Trainable parameter count from the config alone, without building the model."""
    c = cfg.c
    stem = c(cfg.stem)
    total = _conv_params(cfg, cfg.in_channels, stem, 7, True)
    total += _conv_params(cfg, stem, stem, 7, False)

    def block(ch_in, units):
        b = cfg.block(units)
        t, ch = 0, ch_in
        for _ in range(units):
            t += _conv_params(cfg, ch, b.growth1, 7, False)
            t += _conv_params(cfg, b.growth1, b.growth2, 5, False)
            ch += b.growth2
        return t + _conv_params(cfg, ch, b.out_channels, 5, False), b.out_channels

    ch, skips = stem, [stem]
    for units in cfg.block_units:
        t, ch = block(ch, units)
        total += t
        skips.append(ch)
    if cfg.head == "segmenter":
        for units, skip in zip(cfg.decoder_units, skips[-2::-1]):
            t, ch = block(ch + skip, units)
            total += t
        total += _conv_params(cfg, ch + skips[0], c(cfg.block_out), 7, False)
        ch = c(cfg.block_out)
        widths = [c(h) for h in cfg.head_hidden[:1]] + [cfg.num_maps]
    else:
        widths = [c(h) for h in cfg.head_hidden] + [cfg.num_classes]
    for w in widths:
        total += ch * w + w
        ch = w
    return total


def budget_filters(base_filters: int, n: int, k_params: int = 0, K: int = 7,
                   family: str = "steerable") -> int:
    """Filters per layer that keep a G-CNN near the parameter budget of a plain CNN.

    plain: unchanged; standard G-CNN: ``base / sqrt(n)``; steerable G-CNN:
    ``base * K^2 / (k_params * sqrt(n))``. Rounded half up, minimum 1.
    """
    if base_filters < 1 or n < 1:
        raise ValueError("base_filters and n must be positive")
    if family == "plain" or n == 1:
        return base_filters
    if family == "standard":
        return scaled(base_filters, 1.0 / math.sqrt(n))
    if family == "steerable":
        if k_params < 1:
            raise ValueError("steerable budgeting needs k_params")
        return scaled(base_filters, K * K / (k_params * math.sqrt(n)))
    raise ValueError(f"unknown family {family!r}")


def match_width(cfg: ModelConfig, target: int, lo: float = 0.01, hi: float = 4.0) -> ModelConfig:
    """The width multiplier whose parameter count is closest to ``target``."""
    best = None
    for w in np.linspace(lo, hi, 800):
        c = replace(cfg, width=float(round(w, 4)))
        diff = abs(analytic_param_count(c) - target)
        if best is None or diff < best[0]:
            best = (diff, c)
    return best[1]
