"""Reverse-mode differentiation over the kernels in :mod:`mlfn.tensor`.

The engine is a flat dynamic tape: every op wrapper runs the forward kernel
immediately, records what the paired backward kernel will need, and returns a
fresh :class:`Variable`. ``backward`` then walks the records in exact reverse
execution order. Gradients accumulate into ``Variable.grad`` until the owner
zeroes them, so fan-out (using one Variable in several places) sums
contributions and repeated backward passes stack.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DeterminismError

_ids = itertools.count()


class Variable:
    """A tensor tracked by the tape.

    ``grad`` is lazily materialized as zeros of the value's shape; it is
    additive across uses and across backward passes.
    """

    __slots__ = ("value", "requires_grad", "name", "node_id", "_grad")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or f"node{self.node_id}"
        return f"Variable({tag}, shape={self.value.shape}, dtype={self.value.dtype})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Variable
    backward_fn: Callable
    ctx: dict


class Tape:
    """Ordered record of executed kernels for one forward pass."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, op: str, inputs: tuple, output: Variable,
               backward_fn: Callable, ctx: dict) -> None:
        self.records.append(TapeRecord(op, inputs, output, backward_fn, ctx))

    def __len__(self):
        return len(self.records)

    def fingerprint(self) -> str:
        """Hash of op names and output values, for determinism tests."""
        h = hashlib.blake2b(digest_size=16)
        for rec in self.records:
            h.update(rec.op.encode())
            val = np.ascontiguousarray(rec.output.value)
            h.update(str(val.shape).encode())
            h.update(val.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# op wrappers


def mode4(tape: Tape, m: Variable, s: Variable) -> Variable:
    ctx = {}
    out = Variable(T.mode4_product(m.value, s.value, ctx=ctx))
    tape.record("mode4", (m, s), out, T.mode4_product_backward, ctx)
    return out


def conv2d(tape: Tape, x: Variable, w: Variable, b: Variable,
           spec: T.ConvSpec) -> Variable:
    ctx = {}
    out = Variable(T.conv2d(x.value, w.value, b.value, spec, ctx=ctx))
    tape.record("conv2d", (x, w, b), out, T.conv2d_backward, ctx)
    return out


def global_avg_pool(tape: Tape, x: Variable) -> Variable:
    ctx = {}
    out = Variable(T.global_avg_pool(x.value, ctx=ctx))
    tape.record("gap", (x,), out, T.global_avg_pool_backward, ctx)
    return out


def batch_norm(tape: Tape, x: Variable, gamma: Variable, beta: Variable,
               state: T.RunningStats, *, training: bool,
               momentum: float = T.BN_MOMENTUM) -> Variable:
    ctx = {}
    out = Variable(T.batch_norm(x.value, gamma.value, beta.value, state,
                                training=training, momentum=momentum, ctx=ctx))
    tape.record("batch_norm", (x, gamma, beta), out, T.batch_norm_backward, ctx)
    return out


def linear(tape: Tape, x: Variable, w: Variable, b: Variable) -> Variable:
    ctx = {}
    out = Variable(T.linear(x.value, w.value, b.value, ctx=ctx))
    tape.record("linear", (x, w, b), out, T.linear_backward, ctx)
    return out


def activation(tape: Tape, x: Variable, kind: str) -> Variable:
    ctx = {}
    out = Variable(T.activation(x.value, kind, ctx=ctx))
    tape.record(kind, (x,), out, T.activation_backward, ctx)
    return out


def concat(tape: Tape, parts: list[Variable]) -> Variable:
    ctx = {}
    out = Variable(T.concat([p.value for p in parts], ctx=ctx))
    tape.record("concat", tuple(parts), out, T.concat_backward, ctx)
    return out


def stack_last(tape: Tape, parts: list[Variable]) -> Variable:
    ctx = {}
    out = Variable(T.stack_last([p.value for p in parts], ctx=ctx))
    tape.record("stack_last", tuple(parts), out, T.stack_last_backward, ctx)
    return out


def add(tape: Tape, a: Variable, b: Variable) -> Variable:
    ctx = {}
    out = Variable(T.add(a.value, b.value, ctx=ctx))
    tape.record("add", (a, b), out, T.add_backward, ctx)
    return out


def scale(tape: Tape, x: Variable, c: float) -> Variable:
    ctx = {}
    out = Variable(T.scale(x.value, c, ctx=ctx))
    tape.record("scale", (x,), out, T.scale_backward, ctx)
    return out


def sum_all(tape: Tape, x: Variable) -> Variable:
    ctx = {}
    out = Variable(T.sum_all(x.value, ctx=ctx))
    tape.record("sum_all", (x,), out, T.sum_all_backward, ctx)
    return out


def dot_all(tape: Tape, a: Variable, b: Variable) -> Variable:
    ctx = {}
    out = Variable(T.dot_all(a.value, b.value, ctx=ctx))
    tape.record("dot_all", (a, b), out, T.dot_all_backward, ctx)
    return out


def softmax_cross_entropy(tape: Tape, logits: Variable,
                          labels: np.ndarray) -> Variable:
    ctx = {}
    out = Variable(T.softmax_cross_entropy(logits.value, labels, ctx=ctx))
    tape.record("softmax_ce", (logits,), out, T.softmax_cross_entropy_backward, ctx)
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Variable) -> None:
    """Accumulate d(loss)/d(value) into every requires_grad Variable.

    The loss must be a scalar produced by an op on this tape. Variables the
    loss does not depend on are left untouched.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    if not any(rec.output.node_id == loss.node_id for rec in tape.records):
        raise ContractError("loss was not produced by an op on this tape")

    flows: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.value)
    }
    for rec in reversed(tape.records):
        grad_out = flows.get(rec.output.node_id)
        if grad_out is None:
            continue
        grads = rec.backward_fn(rec.ctx, grad_out)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(rec.inputs):
            raise ContractError(
                f"op {rec.op} returned {len(grads)} grads for {len(rec.inputs)} inputs")
        for inp, g in zip(rec.inputs, grads):
            if inp is None or g is None:
                continue
            prev = flows.get(inp.node_id)
            flows[inp.node_id] = g if prev is None else prev + g
            if inp.requires_grad:
                inp.grad[...] += g


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f: Callable[[Tape, Variable], Variable], v: Variable,
                      step: float = 1e-4, *, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Compare backward gradients of ``f`` w.r.t. ``v`` against central
    differences and return the maximum relative error over the coordinates
    checked.

    ``f(tape, v)`` must build a scalar loss on the given tape and be
    deterministic; a second forward pass that disagrees bit-for-bit with the
    first raises :class:`DeterminismError`. ``v`` must hold float64 data.
    When ``max_coords`` is given and smaller than the number of entries, a
    seeded without-replacement sample of coordinates is checked instead of
    all of them. Relative error uses a unit floor in the denominator:
    ``|a - n| / max(|a|, |n|, 1)``. ``v.grad`` is zeroed before and after.
    """
    if step <= 0.0:
        raise ContractError(f"step must be positive, got {step}")
    if v.value.dtype != np.float64:
        raise ContractError("finite-difference checks run at 64-bit only; "
                            f"variable holds {v.value.dtype}")

    v.zero_grad()
    tape = Tape()
    loss = f(tape, v)
    if loss.value.size != 1:
        raise ContractError("f must produce a scalar loss")
    backward(tape, loss)
    analytic = np.array(v.grad, dtype=np.float64, copy=True).reshape(-1)
    v.zero_grad()

    replay = f(Tape(), v)
    if not np.array_equal(np.asarray(loss.value), np.asarray(replay.value)):
        raise DeterminismError(
            "two forward passes of f disagree; finite differences need a "
            "deterministic function")

    flat = v.value.reshape(-1)
    size = flat.size
    if max_coords is None or max_coords >= size:
        coords = np.arange(size)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(
            size, size=max_coords, replace=False))

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = float(np.asarray(f(Tape(), v).value))
        flat[i] = orig - step
        down = float(np.asarray(f(Tape(), v).value))
        flat[i] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        worst = max(worst, rel)
    return worst
