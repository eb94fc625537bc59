"""Dense float64 MLP with explicit reverse- and forward-mode passes, Adam, and
the binary parameter checkpoint format.

Weights follow the ``y = W x + b`` convention, so a layer's ``W`` has shape
``(fan_out, fan_in)``. Batched inputs are rows: ``Y = X W^T + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

Layout = tuple[tuple[str, tuple[int, ...]], ...]

CHECKPOINT_MAGIC = b"COPG"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or cotangent does not match the network's dimensions."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient carries NaN or inf."""

    def __init__(self, segment: str):
        super().__init__(f"non-finite gradient in segment {segment!r}; update rejected")
        self.segment = segment


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 storage plus an ordered, immutable segment layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError("parameter values must be a flat array")
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        if values.size != expected:
            raise ShapeError(f"layout describes {expected} values, got {values.size}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def flatten(cls, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, Mapping) else segments
        names, arrays = [], []
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            names.append((name, arr.shape))
            arrays.append(arr.ravel())
        values = np.concatenate(arrays) if arrays else np.zeros(0)
        return cls(values, tuple(names))

    def unflatten(self) -> dict[str, np.ndarray]:
        """Views (not copies) into ``values``, keyed by segment name."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def segment_slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=np.float64), self.layout)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None


def _layer_layout(layer_sizes: Sequence[int]) -> Layout:
    layout = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        layout.append((f"W{i}", (fan_out, fan_in)))
        layout.append((f"b{i}", (fan_out,)))
    return tuple(layout)


@dataclass(frozen=True)
class Mlp:
    """tanh hidden layers, identity output."""

    layer_sizes: tuple[int, ...]
    params: ParameterVector

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        if self.params.layout != _layer_layout(sizes):
            raise ShapeError("parameter layout does not match layer sizes")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator,
             output_scale: float = 1.0) -> "Mlp":
        """Uniform(+-1/sqrt(fan_in)) init; the last layer is multiplied by ``output_scale``."""
        sizes = tuple(int(s) for s in layer_sizes)
        segments = []
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == n_layers - 1:
                W, b = W * output_scale, b * output_scale
            segments += [(f"W{i}", W), (f"b{i}", b)]
        return cls(sizes, ParameterVector.flatten(segments))

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "Mlp":
        layout = _layer_layout(tuple(layer_sizes))
        n = sum(int(np.prod(s)) for _, s in layout)
        return cls(tuple(layer_sizes), ParameterVector(np.zeros(n), layout))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def with_params(self, params: ParameterVector | np.ndarray) -> "Mlp":
        if not isinstance(params, ParameterVector):
            params = self.params.with_values(params)
        return Mlp(self.layer_sizes, params)

    def _weights(self):
        p = self.params.unflatten()
        return [(p[f"W{i}"], p[f"b{i}"]) for i in range(self.n_layers)]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.layer_sizes[0],) or x.ndim > 2:
            raise ShapeError(f"expected input of width {self.layer_sizes[0]}, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray):
        """Return ``(output, activations)``; ``activations[i]`` is the input to layer i."""
        x = self._check_input(x)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        acts = [h]
        weights = self._weights()
        for i, (W, b) in enumerate(weights):
            z = h @ W.T
            z += b
            h = np.tanh(z, out=z) if i < len(weights) - 1 else z
            acts.append(h)
        out = acts[-1][0] if squeeze else acts[-1]
        return out, acts

    def backward(self, x: np.ndarray, output_grad: np.ndarray, cache=None) -> ParameterVector:
        """Gradient of ``sum(output * output_grad)`` with respect to the parameters.

        For a batch input the per-row contributions are summed.
        """
        if cache is None:
            _, cache = self.forward_cached(x)
        g = np.asarray(output_grad, dtype=np.float64)
        g = np.atleast_2d(g)
        if g.shape != cache[-1].shape:
            raise ShapeError(f"output_grad shape {np.shape(output_grad)} does not match output")
        weights = self._weights()
        grads: list = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                h = cache[i + 1]
                g = g * (1.0 - h * h)
            grads[2 * i] = g.T @ cache[i]
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ weights[i][0]
        return ParameterVector(np.concatenate([a.ravel() for a in grads]), self.params.layout)

    def jvp(self, x: np.ndarray, tangent: ParameterVector | np.ndarray, cache=None) -> np.ndarray:
        """Forward-mode directional derivative of the output along a parameter tangent."""
        if cache is None:
            _, cache = self.forward_cached(x)
        if isinstance(tangent, ParameterVector):
            tangent = tangent.values
        t = self.params.with_values(tangent).unflatten()
        weights = self._weights()
        dh = np.zeros_like(cache[0])
        for i, (W, _) in enumerate(weights):
            dz = dh @ W.T + cache[i] @ t[f"W{i}"].T + t[f"b{i}"]
            dh = dz * (1.0 - cache[i + 1] * cache[i + 1]) if i < self.n_layers - 1 else dz
        return dh[0] if np.ndim(x) == 1 else dh


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8

    @classmethod
    def fresh(cls, n: int | ParameterVector, learning_rate: float = 3e-4, **kw) -> "AdamState":
        n = len(n) if isinstance(n, ParameterVector) else int(n)
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.learning_rate, self.beta1, self.beta2, self.eps_stability)


def adam_step(state: AdamState, params: ParameterVector, grad: ParameterVector):
    """One bias-corrected Adam descent step. Returns ``(new_params, new_state)``; inputs are untouched."""
    if grad.layout != params.layout or state.first_moment.size != params.values.size:
        raise ShapeError("gradient / moment layout does not match parameters")
    bad = ~np.isfinite(grad.values)
    if bad.any():
        first_bad = int(np.flatnonzero(bad)[0])
        for name, sl in grad.segment_slices().items():
            if sl.start <= first_bad < sl.stop:
                raise NonFiniteGradientError(name)
    t = state.step_count + 1
    g = grad.values
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stability)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.eps_stability)
    return params.with_values(new_values), new_state


# -- checkpoint file -------------------------------------------------------

def save_checkpoint(path: str | Path, segments: Mapping[str, np.ndarray]) -> None:
    """Little-endian: magic, u32 version, u32 count, then (u16 name len, name,
    u8 rank, u32 dims..., f64 values) per segment."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(segments))
    for name, arr in segments.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def mlp_segments(net: Mlp, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in net.params.unflatten().items()}


def mlp_from_segments(segments: Mapping[str, np.ndarray], prefix: str) -> Mlp:
    n_layers = 0
    while f"{prefix}W{n_layers}" in segments:
        n_layers += 1
    if n_layers == 0:
        raise KeyError(f"no layers with prefix {prefix!r} in checkpoint")
    sizes = [segments[f"{prefix}W0"].shape[1]]
    for i in range(n_layers):
        sizes.append(segments[f"{prefix}W{i}"].shape[0])
    pv = ParameterVector.flatten([(f"{k}{i}", segments[f"{prefix}{k}{i}"])
                                  for i in range(n_layers) for k in ("W", "b")])
    return Mlp(tuple(sizes), pv)
