"""Parameter and FLOPs accounting.

FLOPs are counted by running the forward pass on the ``meta`` device with
forward hooks, so no arithmetic is executed. Convention: one multiply-accumulate
is 2 FLOPs; norms, activations, softmax, residual adds, pooling and resampling
cost 1 FLOP per output element; biases are free.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import torch
from torch import nn

from . import swin, unetr, upernet


class UnsupportedLayerError(TypeError):
    pass


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _numel(t) -> int:
    return math.prod(t.shape)


def _conv(m: nn.Conv2d, inp, out) -> int:
    kh, kw = m.kernel_size
    return 2 * kh * kw * (m.in_channels // m.groups) * _numel(out)


def _deconv(m: nn.ConvTranspose2d, inp, out) -> int:
    kh, kw = m.kernel_size
    x = inp[0]
    return 2 * kh * kw * (m.out_channels // m.groups) * _numel(x)


def _linear(m: nn.Linear, inp, out) -> int:
    return 2 * m.in_features * _numel(out)


def _elementwise(m, inp, out) -> int:
    return _numel(out)


def _free(m, inp, out) -> int:
    return 0


def _window_attention(m: swin.WindowAttention, inp, out) -> int:
    Bw, N, C = inp[0].shape
    scores = Bw * m.heads * N * N
    # QK^T and AV matmuls, then bias add, optional mask add and softmax
    matmuls = 2 * 2 * scores * (C // m.heads)
    return matmuls + scores * (3 if len(inp) > 1 and inp[1] is not None else 2)


def _vit_attention(m: unetr.Attention, inp, out) -> int:
    B, N, C = inp[0].shape
    scores = B * m.heads * N * N
    return 2 * 2 * scores * (C // m.heads) + scores


def _residual2(m, inp, out) -> int:
    # two residual additions
    return 2 * _numel(out)


def _residual1(m, inp, out) -> int:
    return _numel(out)


def _fpn(m: upernet.FPNFuse, inp, out) -> int:
    # top-down additions at every level but the coarsest
    B = out.shape[0]
    return sum(B * lvl.shape[-2] * lvl.shape[-1] for lvl in inp[0].levels[:-1]) * out.shape[1]


def _skip_add(m, inp, out) -> int:
    return _numel(inp[1])


RULES: Dict[type, Callable] = {
    nn.Conv2d: _conv,
    nn.ConvTranspose2d: _deconv,
    nn.Linear: _linear,
    nn.LayerNorm: _elementwise,
    nn.BatchNorm2d: _elementwise,
    nn.InstanceNorm2d: _elementwise,
    nn.GroupNorm: _elementwise,
    nn.ReLU: _elementwise,
    nn.LeakyReLU: _elementwise,
    nn.GELU: _elementwise,
    nn.Sigmoid: _elementwise,
    nn.AdaptiveAvgPool2d: _elementwise,
    nn.MaxPool2d: _elementwise,
    upernet.Resample: _elementwise,
    nn.Dropout: _free,
    nn.Identity: _free,
    swin.DropPath: _free,
    swin.RelativePositionBias: _free,
    swin.WindowAttention: _window_attention,
    swin.SwinBlock: _residual2,
    unetr.Attention: _vit_attention,
    unetr.TransformerLayer: _residual2,
    unetr.ResBlock: _residual1,
    upernet.InputSkip: _skip_add,
    upernet.FPNFuse: _fpn,
}


@dataclass
class LayerRow:
    name: str
    kind: str
    flops: int
    params: int


@dataclass
class ProfileReport:
    variant: str
    params: int
    flops: int
    input_shape: Tuple[int, ...]
    per_layer: List[LayerRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ProfileReport":
        d = json.loads(Path(path).read_text())
        rows = [LayerRow(**r) for r in d.pop("per_layer")]
        d["input_shape"] = tuple(d["input_shape"])
        return cls(per_layer=rows, **d)

    def table(self, top: int = 0) -> str:
        lines = [f"{self.variant}  input={'x'.join(map(str, self.input_shape))}  "
                 f"params={self.params / 1e6:.2f}M  flops={self.flops / 1e9:.2f}G"]
        rows = sorted(self.per_layer, key=lambda r: -r.flops)[:top] if top else []
        for r in rows:
            lines.append(f"  {r.name:<60s} {r.kind:<18s} {r.flops / 1e9:10.3f}G {r.params:>12,d}")
        return "\n".join(lines)


def _rule_for(m: nn.Module):
    for cls in type(m).__mro__:
        if cls in RULES:
            return RULES[cls]
    return None


def profile(model: nn.Module, input_shape: Sequence[int], variant: str = "") -> ProfileReport:
    """Count params and FLOPs for one forward pass on ``input_shape`` (C, H, W) or (B, C, H, W)."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    rows: Dict[str, LayerRow] = {}
    handles = []

    def make_hook(name, mod, rule):
        own_params = sum(p.numel() for p in mod.parameters(recurse=False))

        def hook(m, inp, out):
            row = rows.setdefault(name, LayerRow(name, type(m).__name__, 0, own_params))
            row.flops += int(rule(m, inp, out))
        return hook

    for name, mod in model.named_modules():
        rule = _rule_for(mod)
        if rule is None:
            if next(mod.children(), None) is None and not isinstance(mod, (nn.Sequential, nn.ModuleList, nn.ModuleDict)):
                raise UnsupportedLayerError(f"no FLOPs rule for layer {name or '<root>'} ({type(mod).__name__})")
            continue
        handles.append(mod.register_forward_hook(make_hook(name, mod, rule)))
    was_training = model.training
    model.eval()
    try:
        device = next(model.parameters()).device
        with torch.no_grad():
            model(torch.zeros(shape, device=device))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    per_layer = list(rows.values())
    return ProfileReport(variant, count_params(model), sum(r.flops for r in per_layer), shape[1:], per_layer)


def count_flops(model: nn.Module, input_shape: Sequence[int]) -> int:
    return profile(model, input_shape).flops


_RESAMPLERS = {
    torch.nn.functional.interpolate: "interpolate",
    torch.nn.functional.upsample: "upsample",
    torch.nn.functional.grid_sample: "grid_sample",
}


class _ResampleRecorder(torch.overrides.TorchFunctionMode):
    def __init__(self, stack: List[str], calls: List[Tuple[str, str]]):
        super().__init__()
        self.stack, self.calls = stack, calls

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func in _RESAMPLERS:
            mode = kwargs.get("mode", args[3] if len(args) > 3 else "nearest")
            if func is torch.nn.functional.grid_sample:
                mode = kwargs.get("mode", "bilinear")
            self.calls.append((self.stack[-1] if self.stack else "", str(mode)))
        return func(*args, **kwargs)


def resampling_calls(model: nn.Module, input_shape: Sequence[int], within: str = "") -> List[Tuple[str, str]]:
    """(module path, mode) for every resampling call made during one forward pass.

    With ``within`` set, only calls issued while that submodule runs are kept.
    Runs on the parameters' device, so the meta device works for large models.
    """
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    stack: List[str] = []
    calls: List[Tuple[str, str]] = []
    handles = []

    def enter(name):
        def hook(m, inp):
            stack.append(name)
        return hook

    def leave(m, inp, out):
        stack.pop()

    for name, mod in model.named_modules():
        handles.append(mod.register_forward_pre_hook(enter(name)))
        handles.append(mod.register_forward_hook(leave))
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad(), _ResampleRecorder(stack, calls):
            model(torch.zeros(shape, device=device))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    if within:
        calls = [c for c in calls if c[0] == within or c[0].startswith(within + ".")]
    return calls


def interpolation_nodes(model: nn.Module, input_shape: Sequence[int], within: str = "decoder") -> List[Tuple[str, str]]:
    """Resampling calls that blend neighbouring values (anything but nearest-neighbour)."""
    return [c for c in resampling_calls(model, input_shape, within) if c[1] != "nearest"]
