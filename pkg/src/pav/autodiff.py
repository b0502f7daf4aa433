"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation appends a closure to a :class:`Tape`; calling
:func:`backward` replays the closures in reverse and accumulates gradients into
the :class:`ParamTensor` buffers that were watched during the forward pass.
Ops work on whole batches, so a tape holds tens of records, not one per scalar.
"""
from __future__ import annotations

import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidStateError, NonFiniteGradientError

_param_ids = itertools.count()


class ParamTensor:
    """A learnable array with its gradient buffer and optimizer group."""

    def __init__(self, name: str, values: np.ndarray, group: str = "default"):
        self.name = name
        self.values = np.ascontiguousarray(values)
        self.grad = np.zeros_like(self.values)
        self.group = group
        self.id = next(_param_ids)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape}, group={self.group!r})"


class Var:
    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value, tape: "Tape", requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    def __init__(self):
        self._records: list[tuple[Callable, Var]] = []
        self._leaves: dict[int, tuple[ParamTensor, Var]] = {}
        self._done = False

    def __len__(self):
        return len(self._records)

    def param(self, p: ParamTensor) -> Var:
        """Leaf bound to ``p``; the same leaf is reused if ``p`` is watched twice."""
        if p.id not in self._leaves:
            self._leaves[p.id] = (p, Var(p.values, self, requires_grad=True))
        return self._leaves[p.id][1]

    def constant(self, x) -> Var:
        return Var(np.asarray(x), self)

    def input(self, x) -> Var:
        """Non-parameter leaf whose gradient is kept after backward."""
        return Var(np.asarray(x), self, requires_grad=True)

    def record(self, value, inputs: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
        out = Var(value, self)
        if any(v.requires_grad for v in inputs):
            out.requires_grad = True
            self._records.append((backward, out))
        return out

    def backward(self, outputs: Var | Sequence[Var], upstream=None) -> None:
        if self._done:
            raise InvalidStateError("tape was already differentiated")
        if isinstance(outputs, Var):
            outputs = [outputs]
            upstream = [upstream]
        elif upstream is None:
            upstream = [None] * len(outputs)
        if not self._records and not any(o.requires_grad for o in outputs):
            raise InvalidStateError("backward called before any differentiable forward pass")
        for out, g in zip(outputs, upstream):
            if g is None:
                g = np.ones_like(out.value)
            out.accumulate(np.asarray(g, dtype=out.value.dtype))
        for fn, out in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)
        for p, leaf in self._leaves.values():
            if leaf.grad is not None:
                p.grad += leaf.grad
        self._done = True
        self.release()

    def release(self) -> None:
        """Drop recorded closures so activations are freed without waiting for the cycle collector."""
        self._records.clear()
        self._leaves.clear()


def backward(tape: Tape, outputs, upstream=None) -> None:
    """Accumulate d(outputs . upstream)/d(param) into every watched parameter."""
    tape.backward(outputs, upstream)


# -- elementary ops -----------------------------------------------------------

def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    if x.shape[-1] != w.shape[0]:
        raise InvalidInputError(f"input width {x.shape[-1]} does not match layer width {w.shape[0]}")
    y = x.value @ w.value
    if b is not None:
        y = y + b.value
    inputs = [x, w] + ([b] if b is not None else [])

    def back(g):
        x.accumulate(g @ w.value.T)
        w.accumulate(x.value.T @ g)
        if b is not None:
            b.accumulate(g.sum(axis=0))

    return x.tape.record(y, inputs, back)


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0).astype(x.value.dtype), [x],
                         lambda g: x.accumulate(g * mask))


def sigmoid(x: Var) -> Var:
    y = _sigmoid(x.value)
    return x.tape.record(y, [x], lambda g: x.accumulate(g * y * (1 - y)))


def softplus(x: Var) -> Var:
    y = np.logaddexp(0, x.value).astype(x.value.dtype)
    return x.tape.record(y, [x], lambda g: x.accumulate(g * _sigmoid(x.value)))


def add(a: Var, b: Var) -> Var:
    def back(g):
        a.accumulate(g)
        b.accumulate(g)

    return a.tape.record(a.value + b.value, [a, b], back)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    values = [p.value for p in parts]
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            p.accumulate(gp)

    return parts[0].tape.record(np.concatenate(values, axis=axis), parts, back)


def reshape(x: Var, shape) -> Var:
    return x.tape.record(x.value.reshape(shape), [x], lambda g: x.accumulate(g.reshape(x.shape)))


def columns(x: Var, start: int, stop: int) -> Var:
    """Slice ``x[..., start:stop]``."""
    def back(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        x.accumulate(full)

    return x.tape.record(x.value[..., start:stop], [x], back)


def _sigmoid(x):
    # split by sign so large magnitudes never overflow exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus, "identity": lambda x: x}


# -- MLP ----------------------------------------------------------------------

class Mlp:
    """Dense network; weights are stored (fan_in, fan_out) and applied as x @ W + b."""

    def __init__(self, name: str, widths: Sequence[int], hidden: str = "relu", output: str = "identity",
                 rng: np.random.Generator | None = None, dtype=np.float32, group: str | None = None):
        if len(widths) < 2:
            raise InvalidInputError("an MLP needs at least input and output widths")
        if hidden not in ACTIVATIONS or output not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {hidden!r} / {output!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.widths = list(widths)
        self.hidden = hidden
        self.output = output
        self.layers: list[tuple[ParamTensor, ParamTensor]] = []
        for k, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-bound, bound, size=(fi, fo)).astype(dtype)
            b = np.zeros(fo, dtype=dtype)
            self.layers.append((ParamTensor(f"{name}.{k}.weight", w, group or name),
                                ParamTensor(f"{name}.{k}.bias", b, group or name)))

    @property
    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x: Var) -> Var:
        if x.shape[-1] != self.widths[0]:
            raise InvalidInputError(f"{self.name}: expected input width {self.widths[0]}, got {x.shape[-1]}")
        tape = x.tape
        h = x
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = linear(h, tape.param(w), tape.param(b))
            h = ACTIVATIONS[self.output if k == last else self.hidden](h)
        return h


def mlp_forward(mlp: Mlp, inputs, tape: Tape | None = None) -> tuple[Var, Tape]:
    """Run ``mlp`` on a batch; returns the output node and the tape that recorded it."""
    tape = tape if tape is not None else Tape()
    x = inputs if isinstance(inputs, Var) else tape.constant(np.asarray(inputs))
    return mlp(x), tape


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with one learning rate per parameter group."""

    def __init__(self, params: Iterable[ParamTensor], lr: float | dict[str, float] = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InvalidInputError("parameter names must be unique")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def rate(self, p: ParamTensor) -> float:
        if isinstance(self.lr, dict):
            return self.lr.get(p.group, self.lr.get("default", 0.0))
        return self.lr

    def step(self) -> None:
        for p in self.params:
            bad = ~np.isfinite(p.grad)
            if bad.any():
                raise NonFiniteGradientError(p.name, tuple(int(i) for i in np.argwhere(bad)[0]))
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.rate(p) / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.values -= update.astype(p.values.dtype)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params: Sequence[ParamTensor], state: Adam) -> None:
    """Apply one update of ``state`` to ``params`` (which must be the ones it tracks)."""
    if [p.id for p in params] != [p.id for p in state.params]:
        raise InvalidInputError("params do not match the optimizer state")
    state.step()


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"PAVCKPT1"
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def save_checkpoint(path, params: Sequence[ParamTensor], adam: Adam | None = None) -> None:
    entries = [(p.name, p.values) for p in params]
    if adam is not None:
        for p in adam.params:
            entries.append((f"{p.name}.m", adam.m[p.name]))
            entries.append((f"{p.name}.v", adam.v[p.name]))
        entries.append(("adam.t", np.array(adam.t, dtype=np.float32)))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in entries:
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(_TAGS[arr.dtype].encode("ascii"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise InvalidInputError(f"{path} is not a checkpoint")
    out = {}
    pos = len(MAGIC)
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        tag = data[pos:pos + 3].decode("ascii")
        pos += 3
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dtype = np.dtype(_DTYPES[tag])
        size = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += size
    return out


def restore(params: Sequence[ParamTensor], stored: dict[str, np.ndarray], adam: Adam | None = None) -> None:
    """Copy checkpoint contents into live parameters (and optimizer state)."""
    for p in params:
        if p.name not in stored:
            raise InvalidInputError(f"checkpoint lacks parameter {p.name}")
        if stored[p.name].shape != p.shape:
            raise InvalidInputError(f"{p.name}: shape {stored[p.name].shape} != {p.shape}")
        p.values[...] = stored[p.name]
    if adam is not None and "adam.t" in stored:
        adam.t = int(stored["adam.t"])
        for p in adam.params:
            adam.m[p.name][...] = stored[f"{p.name}.m"]
            adam.v[p.name][...] = stored[f"{p.name}.v"]
