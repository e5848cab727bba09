"""Three-scale gated enhancement network.

Encoder: three gated down-sampling blocks (dual 3x3 stride-2 branches,
tanh on each, Hadamard product as the gate) take the input from full
resolution S down to S/8. The gated triplet (x_a, x_g, x_b) is preserved
at every stage; x_a and x_b form the raw skip stream while x_g, refined
by a residual refinement block at S/2 and S/4 (and at the S/8
bottleneck), continues down the main path.

Decoder: at S/4 and S/2 a fusion block concatenates the upsampled deeper
feature, the refined encoder feature, and the (x_a, x_b) skip pair,
compresses with a 1x1 conv, and refines again. A final nearest upsample
plus 3x3 conv emits a correction delta; the output is clip01(x + delta)
when the residual head is enabled.

Blocks accept an optional instrumentation object ``q`` exposing
``act(name, tensor, tape)`` and ``weight(name, tensor, tape)`` hooks so
the quantization-aware wrapper can reuse this exact forward; ``q=None``
is the plain float path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor


@dataclass
class ModelConfig:
    base_width: int = 32
    in_channels: int = 3
    out_channels: int = 3
    leaky_slope: float = 0.2
    residual_head: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels != 3 or self.out_channels != 3:
            raise ConfigError("only 3-channel RGB in/out is supported")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        c = self.base_width
        return (c, 2 * c, 4 * c)


class _ParamHolder:
    """Mixin: walk declared (name, Tensor) parameter pairs in a fixed order."""

    _param_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = ""):
        for name in self._param_names:
            yield (f"{prefix}{name}", getattr(self, name))


class _NoQuant:
    """Identity instrumentation (plain float forward)."""

    act = staticmethod(lambda name, t, tape: t)
    weight = staticmethod(lambda name, t, tape: t)


_NOQ = _NoQuant()


class GatedBlock(_ParamHolder):
    """Dual-branch stride-2 gate: x_a = tanh(conv_a(x)), x_b = tanh(conv_b(x)),
    x_g = x_a * x_b. Returns the full (x_a, x_g, x_b) triplet."""

    _param_names = ("wa", "ba", "wb", "bb")

    def __init__(self, name: str, wa, ba, wb, bb):
        self.name = name
        self.wa, self.ba, self.wb, self.bb = wa, ba, wb, bb

    def forward(self, x: Tensor, tape: Tape | None = None, q=None):
        q = q or _NOQ
        h, w = x.data.shape[2], x.data.shape[3]
        if h % 2 or w % 2:
            raise ShapeError(
                f"{self.name}: spatial dims must be even for stride-2 gating, got {h}x{w}"
            )
        za = F.conv2d(x, q.weight(f"{self.name}.conv_a", self.wa, tape), self.ba,
                      stride=2, padding=1, tape=tape)
        za = q.act(f"{self.name}.a_conv", za, tape)
        xa = q.act(f"{self.name}.a_tanh", F.tanh_map(za, tape), tape)
        zb = F.conv2d(x, q.weight(f"{self.name}.conv_b", self.wb, tape), self.bb,
                      stride=2, padding=1, tape=tape)
        zb = q.act(f"{self.name}.b_conv", zb, tape)
        xb = q.act(f"{self.name}.b_tanh", F.tanh_map(zb, tape), tape)
        xg = q.act(f"{self.name}.gate", F.hadamard(xa, xb, tape), tape)
        return xa, xg, xb


class RefineBlock(_ParamHolder):
    """Residual refinement: 3x3 conv + IN + LeakyReLU beside a 1x1 side
    conv, concatenated, squeezed back by two stacked convs, plus a 1x1
    shortcut. Channel count is preserved. The normed convs carry no
    additive bias (instance norm absorbs per-channel shifts; beta is the
    effective bias)."""

    _param_names = ("w1", "g1", "be1", "ws", "bs", "w2", "g2", "be2",
                    "w3", "b3", "wsc", "bsc")

    def __init__(self, name, slope, eps, **params):
        self.name = name
        self.slope = slope
        self.eps = eps
        for k in self._param_names:
            setattr(self, k, params[k])

    def forward(self, f: Tensor, tape: Tape | None = None, q=None):
        q = q or _NOQ
        nm = self.name
        if f.data.shape[1] != self.w1.data.shape[1]:
            raise ShapeError(
                f"{nm}: input channels {f.data.shape[1]} != block width {self.w1.data.shape[1]}"
            )
        t = F.conv2d(f, q.weight(f"{nm}.conv1", self.w1, tape), None, 1, 1, tape)
        t = F.leaky_relu(F.instance_norm(t, self.g1, self.be1, self.eps, tape), self.slope, tape)
        t = q.act(f"{nm}.island1", t, tape)
        s = q.act(f"{nm}.side",
                  F.conv2d(f, q.weight(f"{nm}.side", self.ws, tape), self.bs, 1, 0, tape), tape)
        cat = q.act(f"{nm}.concat", F.concat_channels([t, s], tape), tape)
        u = F.conv2d(cat, q.weight(f"{nm}.conv2", self.w2, tape), None, 1, 1, tape)
        u = F.leaky_relu(F.instance_norm(u, self.g2, self.be2, self.eps, tape), self.slope, tape)
        u = q.act(f"{nm}.island2", u, tape)
        v = q.act(f"{nm}.conv3",
                  F.conv2d(u, q.weight(f"{nm}.conv3", self.w3, tape), self.b3, 1, 1, tape), tape)
        sc = q.act(f"{nm}.shortcut",
                   F.conv2d(f, q.weight(f"{nm}.shortcut", self.wsc, tape), self.bsc, 1, 0, tape),
                   tape)
        return q.act(f"{nm}.out", F.add(v, sc, tape), tape)


class FuseBlock(_ParamHolder):
    """Triple-stream fusion: upsample+conv the deeper feature, concat with
    the refined encoder feature and the raw skip pair, 1x1 channel
    reduction, then refine at the stage width."""

    _param_names = ("wu", "bu", "wr", "br")

    def __init__(self, name, wu, bu, wr, br, refine: RefineBlock):
        self.name = name
        self.wu, self.bu, self.wr, self.br = wu, bu, wr, br
        self.refine = refine

    def forward(self, f_deep: Tensor, f_enc: Tensor, skip_ab: Tensor,
                tape: Tape | None = None, q=None):
        q = q or _NOQ
        nm = self.name
        eh, ew = f_enc.data.shape[2], f_enc.data.shape[3]
        if skip_ab.data.shape[2:] != (eh, ew):
            raise ShapeError(f"{nm}: skip spatial {skip_ab.data.shape[2:]} != encoder ({eh}, {ew})")
        if f_deep.data.shape[2:] != (eh // 2, ew // 2):
            raise ShapeError(
                f"{nm}: deep feature spatial {f_deep.data.shape[2:]} != half of ({eh}, {ew})"
            )
        width = self.wu.data.shape[0]
        expect = self.wr.data.shape[1]
        got = width + f_enc.data.shape[1] + skip_ab.data.shape[1]
        if got != expect:
            raise ShapeError(
                f"{nm}: concat channels {got} (up {width} + enc {f_enc.data.shape[1]} + "
                f"skip {skip_ab.data.shape[1]}) != reduce in-channels {expect}"
            )
        up = F.upsample_nearest2x(f_deep, tape)
        fu = q.act(f"{nm}.up",
                   F.conv2d(up, q.weight(f"{nm}.up", self.wu, tape), self.bu, 1, 1, tape), tape)
        cat = q.act(f"{nm}.concat", F.concat_channels([fu, f_enc, skip_ab], tape), tape)
        red = q.act(f"{nm}.reduce",
                    F.conv2d(cat, q.weight(f"{nm}.reduce", self.wr, tape), self.br, 1, 0, tape),
                    tape)
        return self.refine.forward(red, tape, q)


class Network:
    """Full three-scale network. Parameters are leaf tensors shared with the
    optimizer; forward is read-only with respect to them."""

    def __init__(self, config: ModelConfig, down1, down2, down3, enc_refine1,
                 enc_refine2, bottleneck_refine, fuse_s4, fuse_s2, head_w, head_b):
        self.config = config
        self.down1, self.down2, self.down3 = down1, down2, down3
        self.enc_refine1, self.enc_refine2 = enc_refine1, enc_refine2
        self.bottleneck_refine = bottleneck_refine
        self.fuse_s4, self.fuse_s2 = fuse_s4, fuse_s2
        self.head_w, self.head_b = head_w, head_b

    def named_parameters(self):
        blocks = [
            ("down1", self.down1), ("down2", self.down2), ("down3", self.down3),
            ("enc_refine1", self.enc_refine1), ("enc_refine2", self.enc_refine2),
            ("bottleneck_refine", self.bottleneck_refine),
        ]
        out = []
        for bname, blk in blocks:
            out.extend((f"{bname}.{n}", t) for n, t in blk.named_parameters())
        for fname, fuse in (("fuse_s4", self.fuse_s4), ("fuse_s2", self.fuse_s2)):
            out.extend((f"{fname}.{n}", t) for n, t in fuse.named_parameters())
            out.extend((f"{fname}.refine.{n}", t) for n, t in fuse.refine.named_parameters())
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def forward(self, x: Tensor, tape: Tape | None = None, q=None) -> Tensor:
        q = q or _NOQ
        n, c, h, w = x.data.shape
        if c != self.config.in_channels:
            raise ShapeError(f"network: input channels {c} != {self.config.in_channels}")
        if h % 8 or w % 8:
            raise ShapeError(
                f"network: spatial dims {h}x{w} must be multiples of 8; "
                "use pad_to_multiple(x, 8) first"
            )
        x0 = q.act("input", x, tape)
        a1, g1, b1 = self.down1.forward(x0, tape, q)
        r1 = self.enc_refine1.forward(g1, tape, q)
        a2, g2, b2 = self.down2.forward(r1, tape, q)
        r2 = self.enc_refine2.forward(g2, tape, q)
        _, g3, _ = self.down3.forward(r2, tape, q)
        bn = self.bottleneck_refine.forward(g3, tape, q)
        s4 = q.act("skip_s4", F.concat_channels([a2, b2], tape), tape)
        f4 = self.fuse_s4.forward(bn, r2, s4, tape, q)
        s2 = q.act("skip_s2", F.concat_channels([a1, b1], tape), tape)
        f2 = self.fuse_s2.forward(f4, r1, s2, tape, q)
        up = F.upsample_nearest2x(f2, tape)
        delta = F.conv2d(up, q.weight("head", self.head_w, tape), self.head_b, 1, 1, tape)
        delta = q.act("head.delta", delta, tape)
        if self.config.residual_head:
            y = F.clip01(F.add(x0, delta, tape), tape)
        else:
            y = F.clip01(delta, tape)
        return q.act("output", y, tape)


# ----------------------------------------------------------- init & counting


def _conv_shapes(config: ModelConfig):
    """(name, weight shape, bias channels or None) for every conv, in a fixed order."""
    c = config.base_width
    w1, w2, w3 = config.stage_widths
    shapes = []

    def gated(name, cin, cout):
        shapes.append((f"{name}.wa", (cout, cin, 3, 3), cout))
        shapes.append((f"{name}.wb", (cout, cin, 3, 3), cout))

    def refine(name, width):
        shapes.append((f"{name}.w1", (width, width, 3, 3), None))
        shapes.append((f"{name}.ws", (width, width, 1, 1), width))
        shapes.append((f"{name}.w2", (width, 2 * width, 3, 3), None))
        shapes.append((f"{name}.w3", (width, width, 3, 3), width))
        shapes.append((f"{name}.wsc", (width, width, 1, 1), width))

    gated("down1", config.in_channels, w1)
    gated("down2", w1, w2)
    gated("down3", w2, w3)
    refine("enc_refine1", w1)
    refine("enc_refine2", w2)
    refine("bottleneck_refine", w3)
    shapes.append(("fuse_s4.wu", (w2, w3, 3, 3), w2))
    shapes.append(("fuse_s4.wr", (w2, 4 * w2, 1, 1), w2))
    refine("fuse_s4.refine", w2)
    shapes.append(("fuse_s2.wu", (w1, w2, 3, 3), w1))
    shapes.append(("fuse_s2.wr", (w1, 4 * w1, 1, 1), w1))
    refine("fuse_s2.refine", w1)
    shapes.append(("head.w", (config.out_channels, w1, 3, 3), config.out_channels))
    return shapes


def param_count(config: ModelConfig) -> int:
    """Total learnable parameters (conv weights+biases, norm affine pairs)."""
    total = 0
    for _, wshape, bch in _conv_shapes(config):
        total += int(np.prod(wshape)) + (bch or 0)
    # two instance-norm affine pairs per refinement block, at the block width
    w1, w2, w3 = config.stage_widths
    for width in (w1, w2, w3, w2, w1):
        total += 4 * width
    return total


def init_network(config: ModelConfig, seed: int, dtype=np.float32) -> Network:
    """Seeded fan-in-scaled uniform init: W ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases zero, instance-norm gamma 1 / beta 0. Same seed, same bits."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, wshape, bch in _conv_shapes(config):
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        tensors[name] = Tensor(w, requires_grad=True)
        if bch is not None:
            prefix, leaf = name.rsplit(".", 1)
            bname = f"{prefix}.b{leaf[1:]}"
            tensors[bname] = Tensor(np.zeros((1, bch, 1, 1), dtype=dtype), requires_grad=True)

    def affine(width):
        g = Tensor(np.ones((1, width, 1, 1), dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros((1, width, 1, 1), dtype=dtype), requires_grad=True)
        return g, b

    def gated(name):
        return GatedBlock(name, tensors[f"{name}.wa"], tensors[f"{name}.ba"],
                          tensors[f"{name}.wb"], tensors[f"{name}.bb"])

    def refine(name, width):
        g1, be1 = affine(width)
        g2, be2 = affine(width)
        return RefineBlock(
            name, config.leaky_slope, config.norm_eps,
            w1=tensors[f"{name}.w1"], g1=g1, be1=be1,
            ws=tensors[f"{name}.ws"], bs=tensors[f"{name}.bs"],
            w2=tensors[f"{name}.w2"], g2=g2, be2=be2,
            w3=tensors[f"{name}.w3"], b3=tensors[f"{name}.b3"],
            wsc=tensors[f"{name}.wsc"], bsc=tensors[f"{name}.bsc"],
        )

    w1, w2, w3 = config.stage_widths
    net = Network(
        config,
        down1=gated("down1"), down2=gated("down2"), down3=gated("down3"),
        enc_refine1=refine("enc_refine1", w1),
        enc_refine2=refine("enc_refine2", w2),
        bottleneck_refine=refine("bottleneck_refine", w3),
        fuse_s4=FuseBlock("fuse_s4", tensors["fuse_s4.wu"], tensors["fuse_s4.bu"],
                          tensors["fuse_s4.wr"], tensors["fuse_s4.br"],
                          refine("fuse_s4.refine", w2)),
        fuse_s2=FuseBlock("fuse_s2", tensors["fuse_s2.wu"], tensors["fuse_s2.bu"],
                          tensors["fuse_s2.wr"], tensors["fuse_s2.br"],
                          refine("fuse_s2.refine", w1)),
        head_w=tensors["head.w"], head_b=tensors["head.b"],
    )
    return net


def clone_network(net: Network, dtype=None) -> Network:
    """Structural copy with parameter values copied (optionally cast).

    Casting float32 parameters to float64 is exact, which makes the clone
    the reference twin for gradient verification.
    """
    out = init_network(net.config, seed=0, dtype=dtype or np.float32)
    for (_, dst), (_, src) in zip(out.named_parameters(), net.named_parameters()):
        dst.data = src.data.astype(dtype, copy=True) if dtype else src.data.copy()
    return out


def pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, tuple[int, int]]:
    """Reflect-pad right/bottom to the next multiple of m.

    Returns (padded, (orig_h, orig_w)); ``crop_to`` inverts exactly.
    """
    if m < 1:
        raise ShapeError(f"pad_to_multiple: m must be >= 1, got {m}")
    n, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pad_to_multiple: image {h}x{w} too small to reflect (need >= 2)")
    ph = (-h) % m
    pw = (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    padded = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return Tensor(padded), (h, w)


def crop_to(x: Tensor, crop_record: tuple[int, int]) -> Tensor:
    h, w = crop_record
    return Tensor(x.data[:, :, :h, :w])
