"""Tiny convolutional-architecture notation: parse, infer shapes, build.

Networks are written as tokens joined by ``->``:

    ``C(k,s,d)``    convolution, valid padding
    ``C_s(k,s,d)``  convolution, same padding (output side = ceil(in/s))
    ``T(k,s,d)``    transpose convolution, valid ((in-1)*s + k)
    ``T_s(k,s,d)``  transpose convolution, same (in*s)
    ``Resize(t)``   bilinear resize to t x t
    ``Pad(x)``      zero-pad x pixels on every spatial side
    ``Shape(a,b)``  reshape a flat vector to a x b spatial (channels inferred)
    ``Avg``         global average pool, collapses spatial dims to a vector
    ``FC(d)``       fully-connected layer on a flat vector

A string may be split into bracketed segments, e.g. ``[A -> B] -> [C -> D]``;
each segment gets its own nonlinearity (``relu6``, ``leaky_relu`` or
``none``).  Nonlinearities are applied after every parameterized layer
(conv / transpose conv / fully-connected) except the last layer of the whole
network, which always emits raw values.

Integer arguments may be separated by commas or plain whitespace; a stray
missing comma such as ``C_s(3, 1 8)`` therefore still parses, as long as the
token ends up with the right number of integers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import torch
from torch import Tensor, nn
from torch.nn import functional as F

NONLINEARITIES = ("relu6", "leaky_relu", "none")

_PARAM_KINDS = ("conv", "transpose_conv", "fully_connected")

_TOKEN_ARITY = {
    "C": 3,
    "C_s": 3,
    "T": 3,
    "T_s": 3,
    "Resize": 1,
    "Pad": 1,
    "FC": 1,
}


class ArchParseError(ValueError):
    """Malformed architecture string; message carries the token position."""


class ShapeInferenceError(ValueError):
    """A layer cannot accept its input shape; message names the layer."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str                       # conv | transpose_conv | resize | pad | avg_pool | fully_connected | reshape
    kernel: int | None = None
    stride: int | None = None
    out_channels: int | None = None
    padding_mode: str = "valid"     # valid | same
    target: tuple[int, ...] | None = None   # resize/pad/reshape/fc target
    nonlinearity: str = "relu6"

    def token(self) -> str:
        if self.kind == "conv":
            name = "C_s" if self.padding_mode == "same" else "C"
            return f"{name}({self.kernel},{self.stride},{self.out_channels})"
        if self.kind == "transpose_conv":
            name = "T_s" if self.padding_mode == "same" else "T"
            return f"{name}({self.kernel},{self.stride},{self.out_channels})"
        if self.kind == "resize":
            return f"Resize({self.target[0]})"
        if self.kind == "pad":
            return f"Pad({self.target[0]})"
        if self.kind == "reshape":
            return f"Shape({self.target[0]},{self.target[1]})"
        if self.kind == "avg_pool":
            return "Avg"
        if self.kind == "fully_connected":
            return f"FC({self.target[0]})"
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    segments: tuple[int, ...]                    # layers per bracketed segment
    input_shape: tuple[int, ...] | None = None   # (H, W, C) or (d,)
    shapes: tuple[tuple[int, ...], ...] | None = None  # output shape after each layer

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.shapes is None:
            raise ValueError("shapes not inferred yet; call infer_shapes first")
        return self.shapes[-1] if self.shapes else self.input_shape


def _split_segments(text: str) -> list[str]:
    """Split into bracketed segments; a bracket-free string is one segment."""
    text = text.strip()
    if "[" not in text and "]" not in text:
        return [text]
    segments = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch.isspace() or text.startswith("->", pos):
            pos += 2 if text.startswith("->", pos) else 1
            continue
        if ch != "[":
            raise ArchParseError(
                f"unexpected character {ch!r} at position {pos}: bracketed "
                "architectures may only contain [segments] joined by '->'"
            )
        close = text.find("]", pos)
        if close < 0:
            raise ArchParseError(f"unclosed '[' at position {pos}")
        segments.append(text[pos + 1:close])
        pos = close + 1
    return segments


def _parse_token(token: str, index: int, nonlinearity: str) -> LayerSpec:
    token = token.strip()
    if not token:
        raise ArchParseError(f"empty token at position {index}")
    match = re.fullmatch(r"([A-Za-z_]+)\s*(?:\((.*)\))?", token, flags=re.DOTALL)
    if match is None:
        raise ArchParseError(f"cannot read token {token!r} at position {index}")
    name, argtext = match.group(1), match.group(2)

    if name == "Avg":
        if argtext is not None:
            raise ArchParseError(f"Avg takes no arguments (token {index}: {token!r})")
        return LayerSpec(kind="avg_pool", nonlinearity=nonlinearity)

    if name not in _TOKEN_ARITY and name != "Shape":
        raise ArchParseError(f"unknown token {name!r} at position {index}")
    if argtext is None:
        raise ArchParseError(f"{name} requires arguments (token {index}: {token!r})")

    pieces = [p for p in re.split(r"[\s,]+", argtext.strip()) if p]
    try:
        args = [int(p) for p in pieces]
    except ValueError:
        raise ArchParseError(
            f"non-integer argument in token {index}: {token!r}"
        ) from None

    if name == "Shape":
        if len(args) == 1:
            args = [args[0], args[0]]
        if len(args) != 2:
            raise ArchParseError(f"Shape takes 1 or 2 integers (token {index}: {token!r})")
        if min(args) < 1:
            raise ArchParseError(f"Shape target must be positive (token {index}: {token!r})")
        return LayerSpec(kind="reshape", target=tuple(args), nonlinearity=nonlinearity)

    arity = _TOKEN_ARITY[name]
    if len(args) != arity:
        raise ArchParseError(
            f"{name} takes {arity} integer(s), got {len(args)} (token {index}: {token!r})"
        )

    if name in ("C", "C_s", "T", "T_s"):
        kernel, stride, depth = args
        if min(kernel, stride, depth) < 1:
            raise ArchParseError(
                f"kernel/stride/channels must be positive (token {index}: {token!r})"
            )
        return LayerSpec(
            kind="conv" if name.startswith("C") else "transpose_conv",
            kernel=kernel,
            stride=stride,
            out_channels=depth,
            padding_mode="same" if name.endswith("_s") else "valid",
            nonlinearity=nonlinearity,
        )
    if name == "Resize":
        if args[0] < 1:
            raise ArchParseError(f"Resize target must be positive (token {index}: {token!r})")
        return LayerSpec(kind="resize", target=(args[0],), nonlinearity=nonlinearity)
    if name == "Pad":
        if args[0] < 0:
            raise ArchParseError(f"Pad amount must be nonnegative (token {index}: {token!r})")
        return LayerSpec(kind="pad", target=(args[0],), nonlinearity=nonlinearity)
    if name == "FC":
        if args[0] < 1:
            raise ArchParseError(f"FC width must be positive (token {index}: {token!r})")
        return LayerSpec(kind="fully_connected", target=(args[0],), nonlinearity=nonlinearity)
    raise ArchParseError(f"unknown token {name!r} at position {index}")


def parse_architecture(text: str, nonlinearities: str | tuple[str, ...] = "relu6") -> NetworkSpec:
    """Parse an architecture string into an (unshaped) network description.

    Args:
        text: tokens joined by ``->``, optionally grouped in ``[...]``
            segments.  An empty string yields an empty (identity) network.
        nonlinearities: one name per segment, or a single name applied to
            every segment.

    Raises:
        ArchParseError: unknown token, wrong arity, bad bracketing or an
            inconsistent nonlinearity plan.
    """
    segment_texts = _split_segments(text)
    if isinstance(nonlinearities, str):
        plan = [nonlinearities] * len(segment_texts)
    else:
        plan = list(nonlinearities)
        if len(plan) == 1:
            plan = plan * len(segment_texts)
    if len(plan) != len(segment_texts):
        raise ArchParseError(
            f"nonlinearity plan has {len(plan)} entries for {len(segment_texts)} segment(s)"
        )
    for name in plan:
        if name not in NONLINEARITIES:
            raise ArchParseError(f"unknown nonlinearity {name!r}")

    layers: list[LayerSpec] = []
    segments: list[int] = []
    index = 0
    for seg_text, nonlin in zip(segment_texts, plan):
        tokens = [t for t in (s.strip() for s in seg_text.split("->")) if t]
        for token in tokens:
            layers.append(_parse_token(token, index, nonlin))
            index += 1
        segments.append(len(tokens))
    return NetworkSpec(layers=tuple(layers), segments=tuple(segments))


def unparse(spec: NetworkSpec) -> str:
    """Render a NetworkSpec back to its string form (round-trips with parse)."""
    parts = []
    start = 0
    multi = len(spec.segments) > 1
    for count in spec.segments:
        body = " -> ".join(layer.token() for layer in spec.layers[start:start + count])
        parts.append(f"[{body}]" if multi else body)
        start += count
    return " -> ".join(parts)


def _conv_side(side: int, kernel: int, stride: int, padding_mode: str) -> int:
    if padding_mode == "same":
        return math.ceil(side / stride)
    return (side - kernel) // stride + 1


def _transpose_side(side: int, kernel: int, stride: int, padding_mode: str) -> int:
    if padding_mode == "same":
        return side * stride
    return (side - 1) * stride + kernel


def infer_shapes(spec: NetworkSpec, input_shape: tuple[int, ...]) -> NetworkSpec:
    """Propagate shapes layer by layer.

    ``input_shape`` is ``(H, W, C)`` for spatial input or ``(d,)`` for a flat
    vector.  Raises ShapeInferenceError naming the first offending layer if
    any intermediate dimension collapses to zero or a layer cannot accept
    its input kind.
    """
    if any(v < 1 for v in input_shape):
        raise ShapeInferenceError(f"input shape must be positive, got {input_shape}")
    shape: tuple[int, ...] = tuple(input_shape)
    shapes: list[tuple[int, ...]] = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.token()})"
        spatial = len(shape) == 3
        if layer.kind in ("conv", "transpose_conv"):
            if not spatial:
                raise ShapeInferenceError(f"{where}: needs spatial input, got vector {shape}")
            h, w, _ = shape
            fn = _conv_side if layer.kind == "conv" else _transpose_side
            nh = fn(h, layer.kernel, layer.stride, layer.padding_mode)
            nw = fn(w, layer.kernel, layer.stride, layer.padding_mode)
            if nh < 1 or nw < 1:
                raise ShapeInferenceError(f"{where}: output side {nh}x{nw} is not positive")
            shape = (nh, nw, layer.out_channels)
        elif layer.kind == "resize":
            if not spatial:
                raise ShapeInferenceError(f"{where}: needs spatial input, got vector {shape}")
            shape = (layer.target[0], layer.target[0], shape[2])
        elif layer.kind == "pad":
            if not spatial:
                raise ShapeInferenceError(f"{where}: needs spatial input, got vector {shape}")
            shape = (shape[0] + 2 * layer.target[0], shape[1] + 2 * layer.target[0], shape[2])
        elif layer.kind == "avg_pool":
            if not spatial:
                raise ShapeInferenceError(f"{where}: needs spatial input, got vector {shape}")
            shape = (shape[2],)
        elif layer.kind == "fully_connected":
            if spatial:
                raise ShapeInferenceError(f"{where}: needs a flat vector, got {shape}")
            shape = (layer.target[0],)
        elif layer.kind == "reshape":
            if spatial:
                raise ShapeInferenceError(f"{where}: needs a flat vector, got {shape}")
            a, b = layer.target
            if shape[0] % (a * b) != 0:
                raise ShapeInferenceError(
                    f"{where}: vector of {shape[0]} cannot reshape to {a}x{b}"
                )
            shape = (a, b, shape[0] // (a * b))
        else:
            raise ShapeInferenceError(f"{where}: unknown kind {layer.kind!r}")
        shapes.append(shape)
    return replace(spec, input_shape=tuple(input_shape), shapes=tuple(shapes))


class _SameConv2d(nn.Module):
    """Convolution with ceil(in/s) output sides (asymmetric zero padding)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride, padding=0)

    def _pad(self, side: int) -> tuple[int, int]:
        out = math.ceil(side / self.stride)
        total = max((out - 1) * self.stride + self.kernel - side, 0)
        return total // 2, total - total // 2

    def forward(self, x: Tensor) -> Tensor:
        top, bottom = self._pad(x.shape[-2])
        left, right = self._pad(x.shape[-1])
        return self.conv(F.pad(x, (left, right, top, bottom)))


def _same_transpose(in_channels: int, out_channels: int, kernel: int, stride: int) -> nn.ConvTranspose2d:
    # choose padding/output_padding so the output side is exactly in*stride
    pad = max(math.ceil((kernel - stride) / 2), 0)
    out_pad = 2 * pad - (kernel - stride)
    if not 0 <= out_pad < max(stride, 1):
        raise ShapeInferenceError(
            f"same-padding transpose conv unsupported for kernel={kernel}, stride={stride}"
        )
    return nn.ConvTranspose2d(in_channels, out_channels, kernel, stride,
                              padding=pad, output_padding=out_pad)


class _Resize(nn.Module):
    def __init__(self, target: int):
        super().__init__()
        self.target = target

    def forward(self, x: Tensor) -> Tensor:
        return F.interpolate(x, size=(self.target, self.target),
                             mode="bilinear", align_corners=False)


class _Pad(nn.Module):
    def __init__(self, amount: int):
        super().__init__()
        self.amount = amount

    def forward(self, x: Tensor) -> Tensor:
        a = self.amount
        return F.pad(x, (a, a, a, a))


class _GlobalAvg(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.mean(dim=(-2, -1))


class _Reshape(nn.Module):
    def __init__(self, a: int, b: int, channels: int):
        super().__init__()
        self.a, self.b, self.channels = a, b, channels

    def forward(self, x: Tensor) -> Tensor:
        return x.view(x.shape[0], self.channels, self.a, self.b)


_ACTIVATIONS = {
    "relu6": F.relu6,
    "leaky_relu": F.leaky_relu,
}


class LayeredNetwork(nn.Module):
    """Sequential network built from a shape-inferred NetworkSpec.

    Forward accepts ``(N, C, H, W)`` for spatial input specs or ``(N, d)``
    for vector input specs.  The last layer's output is never passed through
    a nonlinearity.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.shapes is None:
            raise ValueError("build requires an inferred spec; call infer_shapes first")
        self.spec = spec
        modules: list[nn.Module] = []
        in_shape = spec.input_shape
        for layer in spec.layers:
            if layer.kind == "conv":
                in_ch = in_shape[2]
                if layer.padding_mode == "same":
                    modules.append(_SameConv2d(in_ch, layer.out_channels, layer.kernel, layer.stride))
                else:
                    modules.append(nn.Conv2d(in_ch, layer.out_channels, layer.kernel, layer.stride))
            elif layer.kind == "transpose_conv":
                in_ch = in_shape[2]
                if layer.padding_mode == "same":
                    modules.append(_same_transpose(in_ch, layer.out_channels, layer.kernel, layer.stride))
                else:
                    modules.append(nn.ConvTranspose2d(in_ch, layer.out_channels, layer.kernel, layer.stride))
            elif layer.kind == "resize":
                modules.append(_Resize(layer.target[0]))
            elif layer.kind == "pad":
                modules.append(_Pad(layer.target[0]))
            elif layer.kind == "avg_pool":
                modules.append(_GlobalAvg())
            elif layer.kind == "fully_connected":
                modules.append(nn.Linear(in_shape[0], layer.target[0]))
            elif layer.kind == "reshape":
                a, b = layer.target
                modules.append(_Reshape(a, b, in_shape[0] // (a * b)))
            else:
                raise ValueError(f"unknown kind {layer.kind!r}")
            in_shape = spec.shapes[len(modules) - 1]
        self.ops = nn.ModuleList(modules)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.spec.output_shape

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.ops) - 1
        for i, (op, layer) in enumerate(zip(self.ops, self.spec.layers)):
            x = op(x)
            if i != last and layer.kind in _PARAM_KINDS and layer.nonlinearity != "none":
                x = _ACTIVATIONS[layer.nonlinearity](x)
        return x


# uniform bound sqrt(6/fan_in) keeps activation variance roughly constant
# through rectified layers; smaller gains starve deep stacks of signal
_INIT_GAIN = math.sqrt(6.0)


def init_linear_(module: nn.Linear, generator: torch.Generator) -> None:
    """Fan-in-scaled uniform weight init with zero bias, seed-deterministic."""
    bound = _INIT_GAIN / math.sqrt(module.in_features)
    with torch.no_grad():
        module.weight.uniform_(-bound, bound, generator=generator)
        if module.bias is not None:
            module.bias.zero_()


def _init_conv_(module: nn.Module, generator: torch.Generator) -> None:
    weight, bias = module.weight, module.bias
    if isinstance(module, nn.ConvTranspose2d):
        fan_in = weight.shape[0] * weight.shape[2] * weight.shape[3]
    else:
        fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
    bound = _INIT_GAIN / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.zero_()


def initialize_network(net: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize every parameterized submodule in declaration order."""
    for module in net.modules():
        if isinstance(module, nn.Linear):
            init_linear_(module, generator)
        elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            _init_conv_(module, generator)


def build_network(
    spec: NetworkSpec,
    generator: torch.Generator | int,
    dtype: torch.dtype = torch.float32,
) -> LayeredNetwork:
    """Instantiate a differentiable network from an inferred spec.

    Parameters are drawn from a fan-in-scaled uniform distribution using the
    supplied generator (or an integer seed), so two builds from the same seed
    are bitwise identical.
    """
    if isinstance(generator, int):
        seed = generator
        generator = torch.Generator()
        generator.manual_seed(seed)
    net = LayeredNetwork(spec)
    initialize_network(net, generator)
    return net.to(dtype)
