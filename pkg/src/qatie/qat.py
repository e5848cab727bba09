"""Quantization-aware instrumentation of the network.

``attach_fakequant`` wraps a trained network with fake-quant hooks at a
planned set of insertion points: per-output-channel symmetric INT8 on
every conv weight, and per-tensor affine UINT8 on activations (network
input, conv outputs feeding integer ops, gating products, concats,
fusion/refine outputs, and the residual sum). tanh outputs and the final
clipped output have analytically known ranges, so they carry fixed
parameters instead of observers.

The instrumented network runs in one of four modes:

    bypass     no quantization at all; bit-identical to the plain forward
    calibrate  observers update, outputs untouched (PTQ statistics pass)
    train      observers update and fake-quant applies (QAT fine-tuning)
    frozen     fake-quant applies with frozen statistics (eval/convert)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PlanError
from .model import ModelConfig, Network
from .quant import Observer, QuantParams, fake_quant, qparams_fixed_range, \
    qparams_per_channel_symmetric
from .tensor import Tape, Tensor

MODES = ("bypass", "calibrate", "train", "frozen")

REFINE_BLOCKS = ("enc_refine1", "enc_refine2", "bottleneck_refine",
                 "fuse_s4.refine", "fuse_s2.refine")
REFINE_LOCALS = ("island1", "side", "concat", "island2", "conv3", "shortcut", "out")


def all_act_points() -> tuple[str, ...]:
    pts = ["input"]
    for d in ("down1", "down2", "down3"):
        pts += [f"{d}.a_conv", f"{d}.a_tanh", f"{d}.b_conv", f"{d}.b_tanh", f"{d}.gate"]
    for r in REFINE_BLOCKS:
        pts += [f"{r}.{loc}" for loc in REFINE_LOCALS]
    for f in ("fuse_s4", "fuse_s2"):
        pts += [f"{f}.up", f"{f}.concat", f"{f}.reduce"]
    pts += ["skip_s4", "skip_s2", "head.delta", "output"]
    return tuple(pts)


def all_weight_points() -> tuple[str, ...]:
    pts = []
    for d in ("down1", "down2", "down3"):
        pts += [f"{d}.conv_a", f"{d}.conv_b"]
    for r in REFINE_BLOCKS:
        pts += [f"{r}.conv1", f"{r}.side", f"{r}.conv2", f"{r}.conv3", f"{r}.shortcut"]
    for f in ("fuse_s4", "fuse_s2"):
        pts += [f"{f}.up", f"{f}.reduce"]
    pts.append("head")
    return tuple(pts)


FIXED_RANGES = {"output": (0.0, 1.0)}
for _d in ("down1", "down2", "down3"):
    FIXED_RANGES[f"{_d}.a_tanh"] = (-1.0, 1.0)
    FIXED_RANGES[f"{_d}.b_tanh"] = (-1.0, 1.0)


@dataclass(frozen=True)
class QatPlan:
    """Insertion points plus the observer momentum. The default plan covers
    every point the INT8 converter requires."""

    act_points: tuple[str, ...] = field(default_factory=all_act_points)
    weight_points: tuple[str, ...] = field(default_factory=all_weight_points)
    momentum: float = 0.99


def default_qat_plan(momentum: float = 0.99) -> QatPlan:
    return QatPlan(all_act_points(), all_weight_points(), momentum)


class QatInstrumentation:
    """The hook object threaded through the block forwards."""

    def __init__(self, plan: QatPlan):
        known_acts = set(all_act_points())
        known_weights = set(all_weight_points())
        for name in plan.act_points:
            if name not in known_acts:
                raise PlanError(f"plan references unknown activation point {name!r}")
        for name in plan.weight_points:
            if name not in known_weights:
                raise PlanError(f"plan references unknown conv layer {name!r}")
        self.plan = plan
        self.mode = "bypass"
        self.wide_probe_bits = 0
        self.fixed: dict[str, QuantParams] = {
            name: qparams_fixed_range(*FIXED_RANGES[name])
            for name in plan.act_points if name in FIXED_RANGES
        }
        self.observers: dict[str, Observer] = {
            name: Observer(plan.momentum)
            for name in plan.act_points if name not in FIXED_RANGES
        }
        self.weight_set = frozenset(plan.weight_points)

    def act_qparams(self, name: str) -> QuantParams:
        if name in self.fixed:
            qp = self.fixed[name]
        else:
            obs = self.observers.get(name)
            if obs is None:
                raise PlanError(f"activation point {name!r} is not instrumented")
            if not obs.initialized:
                raise ConfigError(
                    f"observer for {name!r} has no statistics; run calibration first"
                )
            qp = obs.qparams()
        if self.wide_probe_bits:
            qp = qp.widened(self.wide_probe_bits)
        return qp

    def act(self, name: str, t: Tensor, tape: Tape | None) -> Tensor:
        if self.mode == "bypass":
            return t
        fixed = name in self.fixed
        obs = self.observers.get(name)
        if not fixed and obs is None:
            return t  # point not in the plan
        if not fixed and self.mode in ("calibrate", "train"):
            obs.update(t.data)
        if self.mode == "calibrate":
            return t
        return fake_quant(t, self.act_qparams(name), tape)

    def weight(self, name: str, w: Tensor, tape: Tape | None) -> Tensor:
        if self.mode in ("bypass", "calibrate") or name not in self.weight_set:
            return w
        qp = qparams_per_channel_symmetric(w.data, axis=0)
        if self.wide_probe_bits:
            qp = qp.widened(self.wide_probe_bits)
        return fake_quant(w, qp, tape)


class QatNetwork:
    """A network plus its fake-quant instrumentation. Shares the underlying
    parameter tensors, so the optimizer trains the same leaves."""

    def __init__(self, net: Network, plan: QatPlan | None = None):
        self.net = net
        self.inst = QatInstrumentation(plan or default_qat_plan())

    @property
    def config(self) -> ModelConfig:
        return self.net.config

    @property
    def mode(self) -> str:
        return self.inst.mode

    def set_mode(self, mode: str) -> "QatNetwork":
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.inst.mode = mode
        return self

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        return self.net.forward(x, tape, q=self.inst)

    def named_parameters(self):
        return self.net.named_parameters()

    def parameters(self):
        return self.net.parameters()

    def zero_grad(self):
        self.net.zero_grad()

    # -- observer state (checkpointing) --

    def observer_states(self) -> dict[str, np.ndarray]:
        return {name: obs.state() for name, obs in sorted(self.inst.observers.items())}

    def load_observer_states(self, states: dict[str, np.ndarray]) -> None:
        for name, state in states.items():
            if name not in self.inst.observers:
                raise PlanError(f"checkpoint carries observer for unknown point {name!r}")
            self.inst.observers[name] = Observer.from_state(np.asarray(state))

    def act_qparams(self, name: str) -> QuantParams:
        return self.inst.act_qparams(name)


def attach_fakequant(net: Network, plan: QatPlan | None = None) -> QatNetwork:
    """Instrument a network for QAT/PTQ. Starts in 'bypass' mode."""
    return QatNetwork(net, plan)


def calibrate(qnet: QatNetwork, inputs, passes: int = 1) -> QatNetwork:
    """PTQ statistics collection: forward passes in calibrate mode (outputs
    untouched, observers updating), then freeze."""
    qnet.set_mode("calibrate")
    for _ in range(passes):
        for x in inputs:
            qnet.forward(x, None)
    qnet.set_mode("frozen")
    return qnet
