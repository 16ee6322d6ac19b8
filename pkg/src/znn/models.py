"""The five 1D CNN architectures and the prediction ensemble.

All models map a (batch, 5, 3000) window batch to two softmax probabilities
(non-arousal, arousal):

* ``m1`` - plain residual stack: five identity-shortcut blocks of two
  k=25 convolutions, one dense head.
* ``m2`` - fractal network: five blocks expanded three columns deep via
  f_{c+1} = mean(f_c o f_c, conv), mean joins, dropout regularization.
* ``m3`` - bottleneck residual network: eight 1-25-1 bottleneck blocks at
  widths 16/64 with a projection shortcut in the first block.
* ``m4`` - gated causal stack: nine dilated causal conv blocks (dilations
  1..256) with separate filter/gate convolutions, residual and skip sums.
* ``m5`` - like m4 but the dilated convolutions use same padding and one
  shared convolution feeds both the tanh and sigmoid branches.

Builders cap kernel sizes at half the input length and truncate dilation
schedules to fit, which preserves each topology at miniature input sizes
(used for fast float64 gradient verification).
"""

from __future__ import annotations

import numpy as np

from .graph import INPUT, ModelGraph
from .layers import (Add, BatchNorm1d, Conv1d, Dense, Dropout, Flatten, Gated,
                     Relu, Softmax, avgpool, maxpool)
from .rng import Rng

MODEL_KINDS = ("m1", "m2", "m3", "m4", "m5")

MODEL_LABELS = {
    "m1": "residual",
    "m2": "fractal",
    "m3": "bottleneck-residual",
    "m4": "gated-causal-dilated",
    "m5": "gated-same-dilated",
}

INPUT_CHANNELS = 5
INPUT_LENGTH = 3000
N_CLASSES = 2

WAVE_DILATIONS = tuple(2 ** i for i in range(9))


def build_model(kind: str, rng: Rng, input_channels: int = INPUT_CHANNELS,
                input_length: int = INPUT_LENGTH, dtype=np.float32) -> ModelGraph:
    """Construct and initialize one of the five model graphs."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
    g = ModelGraph(kind, input_channels, input_length, dtype)
    builder = {"m1": _build_m1, "m2": _build_m2, "m3": _build_m3,
               "m4": _build_m4, "m5": _build_m5}[kind]
    builder(g, input_channels, input_length)
    g.init_params(rng)
    return g


def _cap(kernel: int, input_length: int) -> int:
    return min(kernel, max(1, input_length // 2))


def _head(g: ModelGraph, channels: int, length: int, hidden: tuple[int, ...]) -> None:
    g.add("head.flatten", Flatten())
    features = channels * length
    for i, width in enumerate(hidden):
        g.add(f"head.dense{i + 1}", Dense(features, width, "tanh"))
        features = width
    g.add("head.out", Dense(features, N_CLASSES, "none"))
    g.add("head.softmax", Softmax())


def _build_m1(g: ModelGraph, channels: int, length: int) -> None:
    k1, k2 = _cap(51, length), _cap(25, length)
    conv_a = Conv1d(channels, 16, k1, "valid")
    g.add("a.conv", conv_a)
    length = conv_a.output_length(length)
    g.add("a.bn", BatchNorm1d(16))
    g.add("a.relu", Relu())
    g.add("a.pool", maxpool(2))
    length //= 2
    prev = "a.pool"
    for i in range(5):
        g.add(f"res{i}.conv1", Conv1d(16, 16, k2, "same"), [prev])
        g.add(f"res{i}.relu", Relu())
        g.add(f"res{i}.conv2", Conv1d(16, 16, k2, "same"))
        prev = g.add(f"res{i}.add", Add(), [f"res{i}.conv2", prev])
    g.add("head.pool", maxpool(2), [prev])
    length //= 2
    _head(g, 16, length, (150,))


def _fractal_unit(g: ModelGraph, name: str, cin: int, cout: int, kernel: int,
                  rate: float, prev: str) -> str:
    g.add(f"{name}.conv", Conv1d(cin, cout, kernel, "same"), [prev])
    g.add(f"{name}.bn", BatchNorm1d(cout))
    g.add(f"{name}.relu", Relu())
    return g.add(f"{name}.drop", Dropout(rate))


def _fractal_expand(g: ModelGraph, name: str, columns: int, cin: int, cout: int,
                    kernel: int, rate: float, prev: str) -> str:
    """f_1 = conv unit; f_{c+1} = mean(f_c o f_c, conv unit)."""
    if columns == 1:
        return _fractal_unit(g, name, cin, cout, kernel, rate, prev)
    mid = _fractal_expand(g, f"{name}.d1", columns - 1, cin, cout, kernel, rate, prev)
    deep = _fractal_expand(g, f"{name}.d2", columns - 1, cout, cout, kernel, rate, mid)
    wide = _fractal_unit(g, f"{name}.c", cin, cout, kernel, rate, prev)
    return g.add(f"{name}.join", Add(scale=0.5), [deep, wide])


def _build_m2(g: ModelGraph, channels: int, length: int) -> None:
    prev = INPUT
    cin = channels
    for b, cout in enumerate((8, 10, 12, 14, 16)):
        kernel = _cap(51 if b == 0 else 25, g.input_length)
        top = _fractal_expand(g, f"frac{b}", 3, cin, cout, kernel, 0.2, prev)
        prev = g.add(f"frac{b}.pool", maxpool(2), [top])
        length //= 2
        cin = cout
    _head(g, 16, length, (500, 150))


def _build_m3(g: ModelGraph, channels: int, length: int) -> None:
    k1, k2 = _cap(51, length), _cap(25, length)
    g.add("a.conv", Conv1d(channels, 16, k1, "same"))
    g.add("a.bn", BatchNorm1d(16))
    g.add("a.relu", Relu())
    g.add("a.pool", maxpool(3))
    length //= 3
    prev = "a.pool"
    for i in range(8):
        cin = 16 if i == 0 else 64
        g.add(f"b{i}.conv1", Conv1d(cin, 16, 1, "same"), [prev])
        g.add(f"b{i}.bn1", BatchNorm1d(16))
        g.add(f"b{i}.relu1", Relu())
        g.add(f"b{i}.conv2", Conv1d(16, 16, k2, "same"))
        g.add(f"b{i}.bn2", BatchNorm1d(16))
        g.add(f"b{i}.relu2", Relu())
        g.add(f"b{i}.conv3", Conv1d(16, 64, 1, "same"))
        g.add(f"b{i}.bn3", BatchNorm1d(64))
        if i == 0:
            g.add(f"b{i}.proj", Conv1d(16, 64, 1, "same"), [prev])
            g.add(f"b{i}.proj_bn", BatchNorm1d(64))
            shortcut = f"b{i}.proj_bn"
        else:
            shortcut = prev
        g.add(f"b{i}.add", Add(), [f"b{i}.bn3", shortcut])
        prev = g.add(f"b{i}.relu", Relu())
    g.add("head.pool", maxpool(2), [prev])
    length //= 2
    g.add("head.drop", Dropout(0.5))
    _head(g, 64, length, (500, 500))


def _wave_trunk(g: ModelGraph, channels: int, length: int) -> tuple[str, int]:
    """Shared m4/m5 front: causal k=51 conv then halving max pool."""
    g.add("a.conv", Conv1d(channels, 16, _cap(51, length), "causal"))
    g.add("a.pool", maxpool(2))
    return "a.pool", length // 2


def _wave_head(g: ModelGraph, skips: list[str], length: int) -> None:
    g.add("skip.sum", Add(), skips)
    g.add("skip.relu", Relu())
    g.add("head.conv", Conv1d(16, 16, 1, "same"))
    g.add("head.pool", avgpool(2))
    length //= 2
    g.add("head.drop", Dropout(0.5))
    g.add("head.flatten", Flatten())
    g.add("head.dense1", Dense(16 * length, 500, "tanh"))
    g.add("head.dense2", Dense(500, 250, "tanh"))
    g.add("head.out", Dense(250, N_CLASSES, "none"))
    g.add("head.softmax", Softmax())


def _wave_dilations(length: int) -> list[int]:
    # k=2 dilated conv needs d*(k-1)+1 <= length
    return [d for d in WAVE_DILATIONS if d + 1 <= length]


def _build_m4(g: ModelGraph, channels: int, length: int) -> None:
    prev, length = _wave_trunk(g, channels, length)
    skips = []
    for i, d in enumerate(_wave_dilations(length)):
        g.add(f"wave{i}.filter_conv", Conv1d(16, 16, 2, "causal", dilation=d), [prev])
        g.add(f"wave{i}.filter_bn", BatchNorm1d(16))
        g.add(f"wave{i}.gate_conv", Conv1d(16, 16, 2, "causal", dilation=d), [prev])
        g.add(f"wave{i}.gate_bn", BatchNorm1d(16))
        g.add(f"wave{i}.gated", Gated(), [f"wave{i}.filter_bn", f"wave{i}.gate_bn"])
        g.add(f"wave{i}.proj", Conv1d(16, 16, 1, "same"))
        skips.append(f"wave{i}.proj")
        prev = g.add(f"wave{i}.add", Add(), [f"wave{i}.proj", prev])
    _wave_head(g, skips, length)


def _build_m5(g: ModelGraph, channels: int, length: int) -> None:
    prev, length = _wave_trunk(g, channels, length)
    skips = []
    for i, d in enumerate(_wave_dilations(length)):
        g.add(f"wave{i}.conv", Conv1d(16, 16, 2, "same", dilation=d), [prev])
        g.add(f"wave{i}.bn", BatchNorm1d(16))
        g.add(f"wave{i}.gated", Gated(), [f"wave{i}.bn", f"wave{i}.bn"])
        g.add(f"wave{i}.proj", Conv1d(16, 16, 1, "same"))
        skips.append(f"wave{i}.proj")
        prev = g.add(f"wave{i}.add", Add(), [f"wave{i}.proj", prev])
    _wave_head(g, skips, length)


def pre_flatten_node(graph: ModelGraph) -> str:
    """Name of the last feature node before flattening (the whole graph's
    last node when there is no flatten)."""
    for node in graph.nodes:
        if node.layer.kind == "flatten":
            return node.inputs[0]
    return graph.nodes[-1].name


def receptive_field(graph: ModelGraph) -> int:
    """Analytic receptive field, in input samples, of the last pre-flatten
    feature, composing kernel/dilation/stride/pool contributions."""
    rf = {INPUT: 1}
    jump = {INPUT: 1}
    target = pre_flatten_node(graph)
    for node in graph.nodes:
        r = max(rf[src] for src in node.inputs)
        j = max(jump[src] for src in node.inputs)
        cfg = node.layer.config
        if node.layer.kind == "conv1d":
            eff = cfg["dilation"] * (cfg["kernel_size"] - 1) + 1
            r += (eff - 1) * j
            j *= cfg["stride"]
        elif node.layer.kind in ("maxpool", "avgpool"):
            r += (cfg["size"] - 1) * j
            j *= cfg["size"]
        rf[node.name] = r
        jump[node.name] = j
        if node.name == target:
            return r
    raise ValueError(f"node {target!r} not reached")


def ensemble_predict(graphs: list[ModelGraph], batch: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the member probability outputs (float64, so the
    mean of identical members reproduces a single member exactly)."""
    if len(graphs) < 1:
        raise ValueError("ensemble needs at least one model")
    total = graphs[0].forward(batch, "eval").astype(np.float64)
    for g in graphs[1:]:
        total += g.forward(batch, "eval").astype(np.float64)
    return total / len(graphs)
