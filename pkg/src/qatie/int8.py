"""Integer-only INT8 inference graph.

Everything between quantization points runs in integers: convolutions
accumulate (q_in - z_in) * q_w into 32-bit-range accumulators with
int32 biases pre-scaled to s_in * s_w, then requantize to UINT8 through
per-channel fixed-point multipliers. tanh becomes a 256-entry lookup
table; the Hadamard gate and residual adds are integer ops with their
own multipliers. The two instance-norm + LeakyReLU pairs inside each
refinement block are float islands: the accumulator is dequantized with
the exact per-channel scale, the island runs the same float32 code as
the training path, and the result is requantized at the island's output
parameters. The final residual add clamps to [0, 255] which realizes
clip01 exactly on the output lattice.

Accumulator bound: |acc| <= Ci*kh*kw * 255 * 127 plus the bias, far
inside int32 for every configuration here; numpy int64 is used as the
working type so intermediate products in the fixed-point rounding also
cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CheckpointError, ConfigError
from .functional import instance_norm_array, leaky_relu_array
from .model import ModelConfig
from .quant import (IntTensor, QuantParams, RequantMultiplier, dequantize,
                    fixedpoint_mul, quantize, round_half_away)
from .tensor import Tensor



# ------------------------------------------------------------- integer ops


def int8_conv2d(q_in: IntTensor, q_w: IntTensor, q_bias: np.ndarray,
                rq: RequantMultiplier, out_qp: QuantParams,
                stride: int = 1, padding: int = 0) -> IntTensor:
    """Integer conv + per-channel requantization to UINT8."""
    acc = _conv_acc(q_in, q_w, q_bias, stride, padding)
    q = fixedpoint_mul(acc, rq, channel_axis=1) + int(out_qp.zero_point)
    return IntTensor(np.clip(q, out_qp.qmin, out_qp.qmax).astype(np.uint8), out_qp)


def int8_conv2d_island(q_in: IntTensor, q_w: IntTensor, q_bias: np.ndarray,
                       dequant_scale: np.ndarray,
                       stride: int = 1, padding: int = 0) -> np.ndarray:
    """Integer conv dequantized to float32 for a float island."""
    acc = _conv_acc(q_in, q_w, q_bias, stride, padding)
    return (acc * dequant_scale.reshape(1, -1, 1, 1)).astype(np.float32)


def _conv_acc(q_in, q_w, q_bias, stride, padding):
    centered = q_in.values.astype(np.int64) - int(q_in.qp.zero_point)
    acc = kernels.int_conv2d_acc(centered, q_w.values, stride, padding)
    return acc + q_bias.astype(np.int64).reshape(1, -1, 1, 1)


def int8_hadamard(q_a: IntTensor, q_b: IntTensor, rq: RequantMultiplier,
                  out_qp: QuantParams) -> IntTensor:
    a = q_a.values.astype(np.int64) - int(q_a.qp.zero_point)
    b = q_b.values.astype(np.int64) - int(q_b.qp.zero_point)
    q = fixedpoint_mul(a * b, rq) + int(out_qp.zero_point)
    return IntTensor(np.clip(q, out_qp.qmin, out_qp.qmax).astype(np.uint8), out_qp)


def int8_add(q_a: IntTensor, q_b: IntTensor, out_qp: QuantParams) -> IntTensor:
    """Operands are rescaled to the shared output scale and summed, then
    requantized with a single rounding.

    The rescale runs through the same float32 lattice cast the fake-quant
    simulation uses, so the rounding decision is bit-identical to the
    simulated add->fake-quant pair; a pure fixed-point two-rounding add
    disagrees on ~1e-4 of elements, and one intermediate flip can amplify
    through downstream convolution gain past the one-step output budget.
    """
    s = dequantize(q_a) + dequantize(q_b)
    return quantize(s, out_qp)


def requantize(q: IntTensor, out_qp: QuantParams) -> IntTensor:
    """Move a tensor onto different qparams via the shared float32 lattice
    cast (same bit behavior as fake-quantizing the dequantized value)."""
    return quantize(dequantize(q), out_qp)


def int8_upsample2x(q: IntTensor) -> IntTensor:
    return IntTensor(q.values.repeat(2, axis=2).repeat(2, axis=3), q.qp)


def int8_concat(parts: list[IntTensor], out_qp: QuantParams) -> IntTensor:
    aligned = [requantize(p, out_qp).values for p in parts]
    return IntTensor(np.concatenate(aligned, axis=1), out_qp)


def build_tanh_lut(in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    """256-entry table: entry i = quantize(tanh(dequantize(i))).

    Built with the same float32 pipeline as the fake-quant simulation, so
    the table output matches the simulated tanh lattice bit-exactly.
    """
    i = np.arange(256, dtype=np.int64)
    v = ((i - int(in_qp.zero_point)) * float(in_qp.scale)).astype(np.float32)
    t = np.tanh(v)
    return quantize(t, out_qp).values.astype(np.uint8)


def tanh_lut(q_in: IntTensor, lut: np.ndarray, out_qp: QuantParams) -> IntTensor:
    return IntTensor(lut[q_in.values], out_qp)


# --------------------------------------------------------- quantized blocks


@dataclass
class QConv:
    name: str
    weight_q: np.ndarray          # int8 (Co, Ci, kh, kw)
    bias_q: np.ndarray            # int32 (Co,)
    w_qp: QuantParams             # per-channel symmetric
    in_qp: QuantParams
    stride: int
    padding: int
    out_qp: QuantParams | None = None   # requant mode
    rq: RequantMultiplier | None = None

    def run(self, q: IntTensor) -> IntTensor:
        return int8_conv2d(q, IntTensor(self.weight_q, self.w_qp), self.bias_q,
                           self.rq, self.out_qp, self.stride, self.padding)

    def run_island(self, q: IntTensor) -> np.ndarray:
        scale = float(self.in_qp.scale) * self.w_qp.scale  # (Co,) float64
        return int8_conv2d_island(q, IntTensor(self.weight_q, self.w_qp), self.bias_q,
                                  scale, self.stride, self.padding)


@dataclass
class QIsland:
    gamma: np.ndarray  # float32 (1, C, 1, 1)
    beta: np.ndarray
    eps: float
    slope: float
    out_qp: QuantParams

    def run(self, x: np.ndarray) -> IntTensor:
        y = leaky_relu_array(instance_norm_array(x, self.gamma, self.beta, self.eps),
                             self.slope)
        return quantize(y, self.out_qp)


@dataclass
class QGatedBlock:
    conv_a: QConv
    lut_a: np.ndarray
    conv_b: QConv
    lut_b: np.ndarray
    tanh_qp: QuantParams
    gate_rq: RequantMultiplier
    gate_qp: QuantParams

    def forward(self, q: IntTensor):
        xa = tanh_lut(self.conv_a.run(q), self.lut_a, self.tanh_qp)
        xb = tanh_lut(self.conv_b.run(q), self.lut_b, self.tanh_qp)
        xg = int8_hadamard(xa, xb, self.gate_rq, self.gate_qp)
        return xa, xg, xb


@dataclass
class QRefineBlock:
    conv1: QConv
    island1: QIsland
    side: QConv
    concat_qp: QuantParams
    conv2: QConv
    island2: QIsland
    conv3: QConv
    shortcut: QConv
    out_qp: QuantParams

    def forward(self, q: IntTensor) -> IntTensor:
        t = self.island1.run(self.conv1.run_island(q))
        s = self.side.run(q)
        cat = int8_concat([t, s], self.concat_qp)
        u = self.island2.run(self.conv2.run_island(cat))
        v = self.conv3.run(u)
        sc = self.shortcut.run(q)
        return int8_add(v, sc, self.out_qp)


@dataclass
class QFuseBlock:
    up: QConv
    concat_qp: QuantParams
    reduce: QConv
    refine: QRefineBlock

    def forward(self, q_deep: IntTensor, q_enc: IntTensor, q_skip: IntTensor) -> IntTensor:
        fu = self.up.run(int8_upsample2x(q_deep))
        cat = int8_concat([fu, q_enc, q_skip], self.concat_qp)
        return self.refine.forward(self.reduce.run(cat))


class Int8Network:
    """Frozen integer-only inference graph mirroring the float topology."""

    def __init__(self, config: ModelConfig, input_qp, down1, down2, down3,
                 enc_refine1, enc_refine2, bottleneck_refine,
                 skip_s4_qp, skip_s2_qp, fuse_s4, fuse_s2, head, output_qp):
        self.config = config
        self.input_qp = input_qp
        self.down1, self.down2, self.down3 = down1, down2, down3
        self.enc_refine1, self.enc_refine2 = enc_refine1, enc_refine2
        self.bottleneck_refine = bottleneck_refine
        self.skip_s4_qp = skip_s4_qp
        self.skip_s2_qp = skip_s2_qp
        self.fuse_s4, self.fuse_s2 = fuse_s4, fuse_s2
        self.head = head
        self.output_qp = output_qp

    def forward_quantized(self, x: Tensor) -> IntTensor:
        q_x = quantize(x.data, self.input_qp)
        a1, g1, b1 = self.down1.forward(q_x)
        r1 = self.enc_refine1.forward(g1)
        a2, g2, b2 = self.down2.forward(r1)
        r2 = self.enc_refine2.forward(g2)
        _, g3, _ = self.down3.forward(r2)
        bn = self.bottleneck_refine.forward(g3)
        s4 = int8_concat([a2, b2], self.skip_s4_qp)
        f4 = self.fuse_s4.forward(bn, r2, s4)
        s2 = int8_concat([a1, b1], self.skip_s2_qp)
        f2 = self.fuse_s2.forward(f4, r1, s2)
        delta = self.head.run(int8_upsample2x(f2))
        if self.config.residual_head:
            return int8_add(q_x, delta, self.output_qp)
        return requantize(delta, self.output_qp)

    def forward(self, x: Tensor, tape=None, q=None) -> Tensor:
        return Tensor(dequantize(self.forward_quantized(x)))

    # -- serialization --

    def named_convs(self):
        return [
            ("down1.conv_a", self.down1.conv_a), ("down1.conv_b", self.down1.conv_b),
            ("down2.conv_a", self.down2.conv_a), ("down2.conv_b", self.down2.conv_b),
            ("down3.conv_a", self.down3.conv_a), ("down3.conv_b", self.down3.conv_b),
        ] + [
            (f"{rname}.{local}", getattr(rblock, attr))
            for rname, rblock in self.named_refines()
            for local, attr in (("conv1", "conv1"), ("side", "side"), ("conv2", "conv2"),
                                ("conv3", "conv3"), ("shortcut", "shortcut"))
        ] + [
            ("fuse_s4.up", self.fuse_s4.up), ("fuse_s4.reduce", self.fuse_s4.reduce),
            ("fuse_s2.up", self.fuse_s2.up), ("fuse_s2.reduce", self.fuse_s2.reduce),
            ("head", self.head),
        ]

    def named_refines(self):
        return [("enc_refine1", self.enc_refine1), ("enc_refine2", self.enc_refine2),
                ("bottleneck_refine", self.bottleneck_refine),
                ("fuse_s4.refine", self.fuse_s4.refine),
                ("fuse_s2.refine", self.fuse_s2.refine)]


# ---------------------------------------------------------------- assembly

# every conv's input activation point (upsampling is transparent)
_CONV_INPUT_POINT = {
    "down1.conv_a": "input", "down1.conv_b": "input",
    "down2.conv_a": "enc_refine1.out", "down2.conv_b": "enc_refine1.out",
    "down3.conv_a": "enc_refine2.out", "down3.conv_b": "enc_refine2.out",
    "fuse_s4.up": "bottleneck_refine.out", "fuse_s4.reduce": "fuse_s4.concat",
    "fuse_s2.up": "fuse_s4.refine.out", "fuse_s2.reduce": "fuse_s2.concat",
    "head": "fuse_s2.refine.out",
}
_REFINE_INPUT_POINT = {
    "enc_refine1": "down1.gate", "enc_refine2": "down2.gate",
    "bottleneck_refine": "down3.gate",
    "fuse_s4.refine": "fuse_s4.reduce", "fuse_s2.refine": "fuse_s2.reduce",
}
for _r, _p in _REFINE_INPUT_POINT.items():
    _CONV_INPUT_POINT[f"{_r}.conv1"] = _p
    _CONV_INPUT_POINT[f"{_r}.side"] = _p
    _CONV_INPUT_POINT[f"{_r}.shortcut"] = _p
    _CONV_INPUT_POINT[f"{_r}.conv2"] = f"{_r}.concat"
    _CONV_INPUT_POINT[f"{_r}.conv3"] = f"{_r}.island2"


def conv_input_point(conv_name: str) -> str:
    return _CONV_INPUT_POINT[conv_name]


def conv_output_point(conv_name: str) -> str:
    """Activation point carrying the conv's requantized output."""
    if conv_name == "head":
        return "head.delta"
    if conv_name.endswith(".conv_a"):
        return conv_name[: -len("conv_a")] + "a_conv"
    if conv_name.endswith(".conv_b"):
        return conv_name[: -len("conv_b")] + "b_conv"
    return conv_name


class _ConvertSource:
    """Pulls quantized pieces out of a frozen QatNetwork."""

    def __init__(self, qnet):
        from .quant import qparams_per_channel_symmetric

        self.qnet = qnet
        self.net = qnet.net
        self._per_channel = qparams_per_channel_symmetric

    def qp(self, point: str) -> QuantParams:
        try:
            return self.qnet.act_qparams(point)
        except ConfigError as exc:
            raise ConfigError(f"cannot convert: {exc}") from exc

    def conv(self, name: str):
        w, b = _find_conv_params(self.net, name)
        w_qp = self._per_channel(w.data, axis=0)
        weight_q = quantize(w.data, w_qp).values
        s_in = float(self.qp(conv_input_point(name)).scale)
        bias_scale = s_in * w_qp.scale  # (Co,)
        bias = np.zeros(w.data.shape[0]) if b is None else b.data.reshape(-1)
        bias_q = round_half_away(bias.astype(np.float64) / bias_scale)
        if np.any(np.abs(bias_q) >= 2 ** 31):
            raise ConfigError(f"{name}: quantized bias exceeds int32 range")
        return weight_q, bias_q.astype(np.int32), w_qp

    def island(self, refine_name: str, idx: int):
        block = _find_refine(self.net, refine_name)
        gamma = block.g1 if idx == 1 else block.g2
        beta = block.be1 if idx == 1 else block.be2
        return gamma.data.astype(np.float32), beta.data.astype(np.float32)


class _StateSource:
    """Pulls quantized pieces out of checkpoint tables."""

    def __init__(self, tensors: dict, qparams: dict):
        self.tensors = tensors
        self.qparams = qparams

    def qp(self, point: str) -> QuantParams:
        if point not in self.qparams:
            raise CheckpointError(f"INT8 checkpoint is missing qparams for {point!r}")
        return self.qparams[point]

    def conv(self, name: str):
        try:
            return (self.tensors[f"{name}.weight_q"], self.tensors[f"{name}.bias_q"],
                    self.qparams[f"{name}.weight"])
        except KeyError as exc:
            raise CheckpointError(f"INT8 checkpoint is missing tensor for {name!r}") from exc

    def island(self, refine_name: str, idx: int):
        return (self.tensors[f"{refine_name}.in{idx}.gamma"],
                self.tensors[f"{refine_name}.in{idx}.beta"])


def _find_conv_params(net, name):
    gated = {"down1": net.down1, "down2": net.down2, "down3": net.down3}
    refines = {"enc_refine1": net.enc_refine1, "enc_refine2": net.enc_refine2,
               "bottleneck_refine": net.bottleneck_refine,
               "fuse_s4.refine": net.fuse_s4.refine, "fuse_s2.refine": net.fuse_s2.refine}
    fuses = {"fuse_s4": net.fuse_s4, "fuse_s2": net.fuse_s2}
    if name == "head":
        return net.head_w, net.head_b
    prefix, local = name.rsplit(".", 1)
    if prefix in gated:
        blk = gated[prefix]
        return (blk.wa, blk.ba) if local == "conv_a" else (blk.wb, blk.bb)
    if prefix in fuses and local in ("up", "reduce"):
        blk = fuses[prefix]
        return (blk.wu, blk.bu) if local == "up" else (blk.wr, blk.br)
    blk = refines[prefix]
    return {"conv1": (blk.w1, None), "side": (blk.ws, blk.bs),
            "conv2": (blk.w2, None), "conv3": (blk.w3, blk.b3),
            "shortcut": (blk.wsc, blk.bsc)}[local]


def _find_refine(net, name):
    return {"enc_refine1": net.enc_refine1, "enc_refine2": net.enc_refine2,
            "bottleneck_refine": net.bottleneck_refine,
            "fuse_s4.refine": net.fuse_s4.refine,
            "fuse_s2.refine": net.fuse_s2.refine}[name]


def _assemble(source, config: ModelConfig) -> Int8Network:
    def make_conv(name, stride, padding, out_point=None):
        weight_q, bias_q, w_qp = source.conv(name)
        in_qp = source.qp(conv_input_point(name))
        out_qp = rq = None
        if out_point is not None:
            out_qp = source.qp(out_point)
            m = float(in_qp.scale) * w_qp.scale / float(out_qp.scale)
            rq = RequantMultiplier.from_real(m)
        return QConv(name, weight_q, bias_q, w_qp, in_qp, stride, padding, out_qp, rq)

    def make_gated(name):
        tanh_qp = source.qp(f"{name}.a_tanh")
        gate_qp = source.qp(f"{name}.gate")
        conv_a = make_conv(f"{name}.conv_a", 2, 1, f"{name}.a_conv")
        conv_b = make_conv(f"{name}.conv_b", 2, 1, f"{name}.b_conv")
        lut_a = build_tanh_lut(conv_a.out_qp, tanh_qp)
        lut_b = build_tanh_lut(conv_b.out_qp, tanh_qp)
        gate_rq = RequantMultiplier.from_real(
            float(tanh_qp.scale) ** 2 / float(gate_qp.scale))
        return QGatedBlock(conv_a, lut_a, conv_b, lut_b, tanh_qp, gate_rq, gate_qp)

    def make_refine(name):
        g1, be1 = source.island(name, 1)
        g2, be2 = source.island(name, 2)
        return QRefineBlock(
            conv1=make_conv(f"{name}.conv1", 1, 1),
            island1=QIsland(g1, be1, config.norm_eps, config.leaky_slope,
                            source.qp(f"{name}.island1")),
            side=make_conv(f"{name}.side", 1, 0, f"{name}.side"),
            concat_qp=source.qp(f"{name}.concat"),
            conv2=make_conv(f"{name}.conv2", 1, 1),
            island2=QIsland(g2, be2, config.norm_eps, config.leaky_slope,
                            source.qp(f"{name}.island2")),
            conv3=make_conv(f"{name}.conv3", 1, 1, f"{name}.conv3"),
            shortcut=make_conv(f"{name}.shortcut", 1, 0, f"{name}.shortcut"),
            out_qp=source.qp(f"{name}.out"),
        )

    def make_fuse(name):
        return QFuseBlock(
            up=make_conv(f"{name}.up", 1, 1, f"{name}.up"),
            concat_qp=source.qp(f"{name}.concat"),
            reduce=make_conv(f"{name}.reduce", 1, 0, f"{name}.reduce"),
            refine=make_refine(f"{name}.refine"),
        )

    return Int8Network(
        config=config, input_qp=source.qp("input"),
        down1=make_gated("down1"), down2=make_gated("down2"), down3=make_gated("down3"),
        enc_refine1=make_refine("enc_refine1"), enc_refine2=make_refine("enc_refine2"),
        bottleneck_refine=make_refine("bottleneck_refine"),
        skip_s4_qp=source.qp("skip_s4"),
        skip_s2_qp=source.qp("skip_s2"),
        fuse_s4=make_fuse("fuse_s4"), fuse_s2=make_fuse("fuse_s2"),
        head=make_conv("head", 1, 1, "head.delta"),
        output_qp=source.qp("output"),
    )


def convert_int8(qnet) -> Int8Network:
    """Freeze observers and emit the integer graph. Raises with the layer
    name if any required observer never saw data."""
    if qnet.inst.wide_probe_bits:
        raise ConfigError("cannot convert while the wide-probe test mode is active")
    qnet.set_mode("frozen")
    return _assemble(_ConvertSource(qnet), qnet.config)


def int8_state(net: Int8Network):
    """Flatten to (tensors, qparams) for the checkpoint container."""
    tensors: dict[str, np.ndarray] = {}
    qparams: dict[str, QuantParams] = {}
    for name, conv in net.named_convs():
        tensors[f"{name}.weight_q"] = conv.weight_q
        tensors[f"{name}.bias_q"] = conv.bias_q
        qparams[f"{name}.weight"] = conv.w_qp
        qparams[conv_input_point(name)] = conv.in_qp
        if conv.out_qp is not None:
            qparams[conv_output_point(name)] = conv.out_qp
    for rname, rblock in net.named_refines():
        tensors[f"{rname}.in1.gamma"] = rblock.island1.gamma
        tensors[f"{rname}.in1.beta"] = rblock.island1.beta
        tensors[f"{rname}.in2.gamma"] = rblock.island2.gamma
        tensors[f"{rname}.in2.beta"] = rblock.island2.beta
        qparams[f"{rname}.island1"] = rblock.island1.out_qp
        qparams[f"{rname}.island2"] = rblock.island2.out_qp
        qparams[f"{rname}.concat"] = rblock.concat_qp
        qparams[f"{rname}.out"] = rblock.out_qp
    for d in ("down1", "down2", "down3"):
        blk = getattr(net, d)
        qparams[f"{d}.a_tanh"] = blk.tanh_qp
        qparams[f"{d}.b_tanh"] = blk.tanh_qp
        qparams[f"{d}.gate"] = blk.gate_qp
    qparams["skip_s4"] = net.skip_s4_qp
    qparams["skip_s2"] = net.skip_s2_qp
    qparams["fuse_s4.concat"] = net.fuse_s4.concat_qp
    qparams["fuse_s2.concat"] = net.fuse_s2.concat_qp
    qparams["input"] = net.input_qp
    qparams["output"] = net.output_qp
    return tensors, qparams


def int8_from_state(tensors: dict, qparams: dict, config: ModelConfig) -> Int8Network:
    return _assemble(_StateSource(tensors, qparams), config)
