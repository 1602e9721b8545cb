"""Toy-scale numeric executor: actually runs training graphs on small dense
arrays, asserting device-residency discipline at every read. This is the
oracle proving that swap and recompute rewrites preserve computed values
exactly (same arithmetic, same order, bit-identical results).

Toy op semantics (flat float64 arrays):
  conv / matmul / upsample  size-mapping elementwise affine
  activation                max(0, x)
  norm                      x - mean(x)
  pool                      block mean (window = n_in / n_out)
  concat                    concatenation in input order
  loss                      sum of squares over its input
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .graph import GraphError, element_count
from .training import TrainingGraph, cross_phase_tensors

AFFINE_KINDS = ("conv", "matmul", "upsample", "source", "sink", "recompute")
MAX_ELEMENTS = 10_000
KINK_TOL = 1e-6


class UseAfterSwapError(GraphError):
    def __init__(self, tensor_id: str, node_id: str, where: str):
        super().__init__(f"use-after-swap: node {node_id!r} read tensor {tensor_id!r} "
                         f"which is {where}, not device-resident")
        self.tensor_id = tensor_id


def _node_params(node_id: str) -> tuple[float, float]:
    """Deterministic per-op affine coefficients, stable across runs/seeds."""
    h = zlib.crc32(node_id.encode())
    a = 0.7 + 0.6 * ((h & 0xFFFF) / 0xFFFF)
    b = -0.5 + ((h >> 16) / 0xFFFF)
    return a, b


def _base_node_id(node_id: str) -> str:
    """Recompute clones reuse the original op's coefficients."""
    return node_id.split("@rc")[0]


def _input_values(g, seed: int, overrides=None):
    values = {}
    for n in g.nodes:
        if n.phase == "forward" and not n.inputs and n.outputs:
            tid = n.outputs[0]
            if overrides and tid in overrides:
                values[tid] = np.asarray(overrides[tid], dtype=np.float64).copy()
            else:
                rng = np.random.default_rng((seed, zlib.crc32(n.id.encode())))
                values[tid] = rng.standard_normal(element_count(g.tensor(tid)))
    return values


def _affine_forward(x: np.ndarray, n_out: int, a: float, b: float) -> np.ndarray:
    n_in = x.size
    if n_in >= n_out:
        reps = -(-n_in // n_out)
        padded = np.zeros(reps * n_out)
        padded[:n_in] = x
        return a * padded.reshape(reps, n_out).sum(axis=0) + b
    reps = -(-n_out // n_in)
    return a * np.tile(x, reps)[:n_out] + b


def _affine_backward(dy: np.ndarray, n_in: int, a: float) -> np.ndarray:
    n_out = dy.size
    if n_in >= n_out:
        reps = -(-n_in // n_out)
        return (a * np.tile(dy, reps)[:n_in]).copy()
    reps = -(-n_out // n_in)
    padded = np.zeros(reps * n_in)
    padded[:n_out] = dy
    return a * padded.reshape(reps, n_in).sum(axis=0)


class _Tape:
    """Device/host tensor state with residency discipline."""

    def __init__(self):
        self.device: dict[str, np.ndarray] = {}
        self.host: dict[str, np.ndarray] = {}
        self.freed: set[str] = set()

    def read(self, tensor_id: str, node_id: str) -> np.ndarray:
        if tensor_id in self.device:
            return self.device[tensor_id]
        where = "host-resident" if tensor_id in self.host else "freed"
        raise UseAfterSwapError(tensor_id, node_id, where)

    def write(self, tensor_id: str, value: np.ndarray) -> None:
        self.device[tensor_id] = value

    def swap_out(self, tensor_id: str, node_id: str) -> None:
        if tensor_id not in self.device:
            raise UseAfterSwapError(tensor_id, node_id, "already gone")
        self.host[tensor_id] = self.device.pop(tensor_id)

    def swap_in(self, src_id: str, dst_id: str, node_id: str) -> None:
        if src_id not in self.host:
            raise UseAfterSwapError(src_id, node_id, "missing from host buffer")
        self.device[dst_id] = self.host[src_id].copy()

    def free(self, tensor_id: str) -> None:
        self.device.pop(tensor_id, None)
        self.freed.add(tensor_id)


def _execution_order(tg: TrainingGraph) -> list[str]:
    """Serial compute order with io nodes spliced at their anchor positions:
    a swap_out after the last forward consumer of its tensor, a swap_in right
    after its trigger node."""
    g = tg.graph
    anchored: dict[int, list[tuple[int, str]]] = {}
    for n in g.nodes:
        if n.kind == "swap_out":
            t = g.tensor(n.inputs[0])
            pos = tg.position(t.producer)
            for c in g.consumers(n.inputs[0]):
                if g.has_node(c) and g.node(c).phase == "forward" and c in tg._positions:
                    pos = max(pos, tg.position(c))
            anchored.setdefault(pos, []).append((0, n.id))
        elif n.kind == "swap_in":
            triggers = [a for a, b in g.control_edges
                        if b == n.id and g.node(a).kind != "swap_out"]
            if not triggers:
                raise GraphError(f"swap_in {n.id!r} has no trigger control edge")
            pos = max(tg.position(t) for t in triggers)
            anchored.setdefault(pos, []).append((1, n.id))
    order = []
    for pos, nid in enumerate(tg.serial_order):
        order.append(nid)
        for _, io_id in sorted(anchored.get(pos, [])):
            order.append(io_id)
    return order


def _check_sizes(g) -> None:
    for t in g.tensors:
        n = element_count(t)
        if n > MAX_ELEMENTS:
            raise GraphError(f"tensor {t.id!r} has {n} elements; the numeric "
                             f"executor is capped at {MAX_ELEMENTS}")


def run_numeric(tg: TrainingGraph, plan=None, seed: int = 0,
                inputs=None) -> tuple[float, dict[str, np.ndarray]]:
    """Execute the graph on toy tensors; returns (loss, per-input gradients).

    Gradient keys are the output tensors of the graph's input nodes. Any
    read of a swapped-out or freed tensor raises UseAfterSwapError.
    """
    g = tg.graph
    _check_sizes(g)
    tape = _Tape()
    for tid, val in _input_values(g, seed, inputs).items():
        tape.write(tid, val)

    loss_node = next((n for n in g.nodes if n.kind == "loss"), None)
    loss_inputs = set(loss_node.inputs) if loss_node else set()
    recompute_free: set[str] = set()
    if plan is not None and getattr(plan, "mode", "none") == "recompute":
        kept = set(plan.checkpoints)
        input_tensors = {n.outputs[0] for n in g.nodes
                         if n.phase == "forward" and not n.inputs and n.outputs}
        recompute_free = set(cross_phase_tensors(tg)) - kept - input_tensors

    loss_value = 0.0
    grads: dict[str, np.ndarray] = {}

    for nid in _execution_order(tg):
        n = g.node(nid)
        kind = n.kind
        if kind == "swap_out":
            tape.swap_out(n.inputs[0], nid)
            continue
        if kind == "swap_in":
            dst = n.outputs[0]
            src = dst[:-len("@in")] if dst.endswith("@in") else dst
            tape.swap_in(src, dst, nid)
            continue
        if kind == "loss":
            total = 0.0
            for tid in n.inputs:
                x = tape.read(tid, nid)
                total += float(np.dot(x, x))
            loss_value = total
            for tid in sorted(recompute_free):
                tape.free(tid)
            continue
        if kind == "grad":
            _run_grad(tg, n, tape, grads, loss_inputs)
            continue
        # Forward compute (or a recompute clone of one).
        if not n.inputs:
            continue  # input node; value already on the tape
        xs = [tape.read(tid, nid) for tid in n.inputs]
        out_id = n.outputs[0]
        n_out = element_count(g.tensor(out_id))
        base = _base_node_id(nid)
        if kind in AFFINE_KINDS:
            a, b = _node_params(base)
            y = _affine_forward(xs[0], n_out, a, b)
        elif kind == "activation":
            y = np.maximum(xs[0], 0.0)
        elif kind == "norm":
            y = xs[0] - xs[0].mean()
        elif kind == "pool":
            k = xs[0].size // n_out
            y = xs[0][:k * n_out].reshape(n_out, k).mean(axis=1)
        elif kind == "concat":
            y = np.concatenate(xs)
        else:
            raise GraphError(f"no toy semantic for node kind {kind!r}")
        tape.write(out_id, y)

    for n in g.nodes:
        if n.phase == "forward" and not n.inputs and n.outputs:
            gid = f"grad/{n.id}:0"
            if g.has_tensor(gid):
                grads[n.outputs[0]] = tape.read(gid, "<result>")
    return loss_value, grads


def _run_grad(tg: TrainingGraph, n, tape: _Tape, grads, loss_inputs) -> None:
    g = tg.graph
    fid = tg.grad_of.get(n.id)
    if fid is None:
        raise GraphError(f"grad node {n.id!r} has no forward counterpart recorded")
    f = g.node(fid)
    reuse_id = None
    incoming = None
    for tid in n.inputs:
        producer = g.node(g.tensor(tid).producer)
        if producer.kind == "grad":
            contrib = tape.read(tid, n.id)
            incoming = contrib.copy() if incoming is None else incoming + contrib
        else:
            reuse_id = tid
    if reuse_id is None:
        raise GraphError(f"grad node {n.id!r} lacks its reuse-edge input")
    reuse_val = tape.read(reuse_id, n.id)
    if incoming is None:
        incoming = np.zeros_like(reuse_val)
    if f.outputs and f.outputs[0] in loss_inputs:
        incoming = incoming + 2.0 * reuse_val

    kind = f.kind
    if not f.inputs:
        tape.write(n.outputs[0], incoming)
        return
    out_sizes = [element_count(g.tensor(t)) for t in n.outputs]
    if kind in AFFINE_KINDS:
        a, _ = _node_params(f.id)
        tape.write(n.outputs[0], _affine_backward(incoming, out_sizes[0], a))
    elif kind == "activation":
        tape.write(n.outputs[0], incoming * (reuse_val > 0.0))
    elif kind == "norm":
        tape.write(n.outputs[0], incoming - incoming.mean())
    elif kind == "pool":
        k = out_sizes[0] // incoming.size
        tape.write(n.outputs[0], np.repeat(incoming / k, k)[:out_sizes[0]])
    elif kind == "concat":
        offset = 0
        for out_id, size in zip(n.outputs, out_sizes):
            tape.write(out_id, incoming[offset:offset + size].copy())
            offset += size
    else:
        raise GraphError(f"no toy gradient for node kind {kind!r}")


def _forward_loss(tg: TrainingGraph, inputs) -> float:
    """Forward-only evaluation of the loss, used by the finite-difference check."""
    g = tg.graph
    tape = _Tape()
    for tid, val in _input_values(g, 0, inputs).items():
        tape.write(tid, val)
    loss_value = 0.0
    for nid in tg.serial_order:
        n = g.node(nid)
        if n.phase != "forward":
            break
        if n.kind == "loss":
            for tid in n.inputs:
                x = tape.read(tid, nid)
                loss_value += float(np.dot(x, x))
            continue
        if not n.inputs:
            continue
        xs = [tape.read(tid, nid) for tid in n.inputs]
        out_id = n.outputs[0]
        n_out = element_count(g.tensor(out_id))
        if n.kind in AFFINE_KINDS:
            a, b = _node_params(n.id)
            y = _affine_forward(xs[0], n_out, a, b)
        elif n.kind == "activation":
            y = np.maximum(xs[0], 0.0)
        elif n.kind == "norm":
            y = xs[0] - xs[0].mean()
        elif n.kind == "pool":
            k = xs[0].size // n_out
            y = xs[0][:k * n_out].reshape(n_out, k).mean(axis=1)
        elif n.kind == "concat":
            y = np.concatenate(xs)
        else:
            raise GraphError(f"no toy semantic for node kind {n.kind!r}")
        tape.write(out_id, y)
    return loss_value


@dataclass
class GradCheckReport:
    max_rel_error: float
    seed_used: int
    resampled: bool


def _kink_distance(tg: TrainingGraph, inputs) -> float:
    """Smallest |activation input| reached during a forward pass."""
    g = tg.graph
    tape = _Tape()
    for tid, val in _input_values(g, 0, inputs).items():
        tape.write(tid, val)
    closest = float("inf")
    for nid in tg.serial_order:
        n = g.node(nid)
        if n.phase != "forward" or n.kind == "loss":
            if n.kind == "loss":
                continue
            break
        if not n.inputs:
            continue
        xs = [tape.read(tid, nid) for tid in n.inputs]
        if n.kind == "activation":
            closest = min(closest, float(np.abs(xs[0]).min()))
        out_id = n.outputs[0]
        n_out = element_count(g.tensor(out_id))
        if n.kind in AFFINE_KINDS:
            a, b = _node_params(n.id)
            y = _affine_forward(xs[0], n_out, a, b)
        elif n.kind == "activation":
            y = np.maximum(xs[0], 0.0)
        elif n.kind == "norm":
            y = xs[0] - xs[0].mean()
        elif n.kind == "pool":
            k = xs[0].size // n_out
            y = xs[0][:k * n_out].reshape(n_out, k).mean(axis=1)
        else:
            y = np.concatenate(xs)
        tape.write(out_id, y)
    return closest


def grad_check(tg: TrainingGraph, seed: int = 0, eps: float = 1e-5,
               inputs=None) -> GradCheckReport:
    """Max relative error between analytic gradients and central differences.

    Sample points that land an activation input on its kink are resampled
    (reported via ``resampled``/``seed_used``).
    """
    if eps <= 0:
        raise GraphError("eps must be positive")
    g = tg.graph
    _check_sizes(g)

    seed_used = seed
    resampled = False
    point = dict(_input_values(g, seed, inputs))
    for _ in range(16):
        if _kink_distance(tg, point) > max(KINK_TOL, 2 * eps):
            break
        resampled = True
        seed_used += 101
        point = dict(_input_values(g, seed_used, None))
    _, analytic = run_numeric(tg, None, seed_used, inputs=point)

    worst = 0.0
    for tid, garr in sorted(analytic.items()):
        base = point[tid]
        for j in range(base.size):
            bumped = dict(point)
            plus = base.copy(); plus[j] += eps
            minus = base.copy(); minus[j] -= eps
            bumped[tid] = plus
            lp = _forward_loss(tg, bumped)
            bumped[tid] = minus
            lm = _forward_loss(tg, bumped)
            numeric = (lp - lm) / (2 * eps)
            denom = max(abs(garr[j]), abs(numeric), 1e-12)
            worst = max(worst, abs(garr[j] - numeric) / denom)
    if not np.isfinite(worst):
        raise GraphError("gradient check produced non-finite values")
    return GradCheckReport(max_rel_error=worst, seed_used=seed_used, resampled=resampled)


def equivalence_check(tg: TrainingGraph, variants, seeds) -> list[dict]:
    """Run baseline and each (label, rewritten graph, plan) variant per seed;
    deviation is the max abs difference over the loss and all gradients.
    Use-after-swap failures surface in the row's ``error`` field."""
    rows = []
    baselines = {s: run_numeric(tg, None, s) for s in seeds}
    for label, var_tg, plan in variants:
        worst = 0.0
        error = ""
        for s in seeds:
            base_loss, base_grads = baselines[s]
            try:
                loss, grads = run_numeric(var_tg, plan, s)
            except GraphError as exc:
                error = str(exc)
                worst = float("inf")
                break
            worst = max(worst, abs(loss - base_loss))
            for tid, arr in base_grads.items():
                if tid not in grads:
                    error = f"missing gradient for {tid!r}"
                    worst = float("inf")
                    break
                worst = max(worst, float(np.max(np.abs(arr - grads[tid]))) if arr.size else 0.0)
            if error:
                break
        rows.append({"label": label, "deviation": worst, "error": error})
    return rows
