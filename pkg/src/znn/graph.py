"""Model graphs: DAGs of layer nodes with reverse-mode backpropagation.

A `ModelGraph` owns an ordered list of named nodes.  Each node consumes the
outputs of earlier nodes (or the graph input, named ``"input"``), which is
enough to express shortcut additions, accumulated skip connections and
multi-input gating.  Nodes are stored in topological order by construction.

Eval-mode forward is pure given frozen parameters.  Train-mode forward and
backward mutate per-node caches, gradients and batchnorm buffers, so a graph
instance must be driven by one trainer at a time; independent instances can
run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Layer
from .rng import Rng

INPUT = "input"


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list[str]


class ModelGraph:
    def __init__(self, kind: str, input_channels: int | None, input_length: int | None,
                 dtype=np.float32):
        self.kind = kind
        self.input_channels = input_channels
        self.input_length = input_length
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._index: dict[str, int] = {}
        self._cache: dict[str, np.ndarray] = {}

    # -- construction -----------------------------------------------------

    def add(self, name: str, layer: Layer, inputs: list[str] | None = None) -> str:
        """Append a node; `inputs` defaults to the previously added node."""
        if name in self._index or name == INPUT:
            raise ValueError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = [self.nodes[-1].name] if self.nodes else [INPUT]
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise ValueError(f"node {name!r} references unknown input {src!r}")
        self._index[name] = len(self.nodes)
        self.nodes.append(Node(name, layer, list(inputs)))
        return name

    def init_params(self, rng: Rng) -> None:
        """Initialize all node parameters in graph order (deterministic per seed)."""
        for node in self.nodes:
            node.layer.init_params(rng, self.dtype)

    def node(self, name: str) -> Node:
        return self.nodes[self._index[name]]

    def output_name(self) -> str:
        return self.nodes[-1].name

    def logits_node(self) -> str:
        """Name of the node feeding the final softmax."""
        last = self.nodes[-1]
        if last.layer.kind != "softmax":
            raise ValueError(f"graph does not end in softmax (last node is {last.layer.kind})")
        return last.inputs[0]

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", rng: Rng | None = None,
                check_finite: bool = False) -> np.ndarray:
        if x.ndim != 3:
            raise ValueError(f"expected (batch, channels, length) input, got shape {x.shape}")
        if self.input_channels is not None and x.shape[1] != self.input_channels:
            raise ValueError(f"expected {self.input_channels} channels, got {x.shape[1]}")
        if self.input_length is not None and x.shape[2] != self.input_length:
            raise ValueError(f"expected input length {self.input_length}, got {x.shape[2]}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        self._cache = {INPUT: x}
        for node in self.nodes:
            ins = [self._cache[src] for src in node.inputs]
            out = node.layer.forward(ins, mode=mode, rng=rng)
            if check_finite and not np.isfinite(out).all():
                raise FloatingPointError(f"non-finite values in output of node {node.name!r}")
            self._cache[node.name] = out
        return self._cache[self.nodes[-1].name]

    def output_of(self, name: str) -> np.ndarray:
        """Cached output of a node from the most recent forward pass."""
        return self._cache[name]

    def backward(self, grad: np.ndarray, start: str | None = None) -> np.ndarray | None:
        """Backpropagate from `start` (default: last node) seeded with `grad`.

        Fills every layer's parameter gradients along the way and returns the
        gradient with respect to the graph input.
        """
        start = start or self.nodes[-1].name
        start_idx = self._index[start]
        acc: dict[str, np.ndarray] = {start: grad}
        for node in reversed(self.nodes[: start_idx + 1]):
            g = acc.pop(node.name, None)
            if g is None:
                continue
            gins = node.layer.backward(g)
            for src, gi in zip(node.inputs, gins):
                if src in acc:
                    acc[src] = acc[src] + gi
                else:
                    acc[src] = gi
        return acc.get(INPUT)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        for node in self.nodes:
            for key, arr in node.layer.params.items():
                yield f"{node.name}.{key}", arr

    def gradients(self):
        for node in self.nodes:
            for key in node.layer.params:
                yield f"{node.name}.{key}", node.layer.grads.get(key)

    def buffers(self):
        for node in self.nodes:
            for key, arr in node.layer.buffers.items():
                yield f"{node.name}.{key}", arr

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and buffers, keyed by qualified name."""
        out = {name: arr.copy() for name, arr in self.parameters()}
        out.update({name: arr.copy() for name, arr in self.buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        slots = {}
        for node in self.nodes:
            for key in node.layer.params:
                slots[f"{node.name}.{key}"] = (node.layer.params, key)
            for key in node.layer.buffers:
                slots[f"{node.name}.{key}"] = (node.layer.buffers, key)
        missing = set(slots) - set(state)
        extra = set(state) - set(slots)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            holder, key = slots[name]
            if holder[key].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: have {holder[key].shape}, got {arr.shape}")
            holder[key] = np.array(arr, dtype=self.dtype)

    def n_params(self) -> int:
        return sum(node.layer.n_params() for node in self.nodes)

    def set_dtype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for node in self.nodes:
            node.layer.astype(self.dtype)

    # -- structure ----------------------------------------------------------

    def subgraph(self, stop: str, start_after: str | None = None) -> "ModelGraph":
        """Slice of the graph from after `start_after` (default: the input)
        through `stop` inclusive, rewired so the cut point becomes the input.

        Every node in the slice may only consume the cut point or other nodes
        inside the slice.
        """
        lo = 0 if start_after is None else self._index[start_after] + 1
        hi = self._index[stop] + 1
        cut = INPUT if start_after is None else start_after
        sub = ModelGraph(f"{self.kind}[{cut}:{stop}]", None, None, self.dtype)
        inside = set()
        for node in self.nodes[lo:hi]:
            inputs = []
            for src in node.inputs:
                if src == cut:
                    inputs.append(INPUT)
                elif src in inside:
                    inputs.append(src)
                else:
                    raise ValueError(f"node {node.name!r} depends on {src!r} outside the slice")
            sub.add(node.name, node.layer, inputs)
            inside.add(node.name)
        return sub

    def summary(self) -> str:
        lines = [f"model {self.kind}  input ({self.input_channels} x {self.input_length})  "
                 f"params {self.n_params()}"]
        for node in self.nodes:
            lines.append(f"  {node.name:<28} {node.layer.describe():<60} "
                         f"<- {', '.join(node.inputs):<40} params {node.layer.n_params()}")
        return "\n".join(lines)
