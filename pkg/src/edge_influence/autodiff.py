"""A small differentiation engine over the fixed operator family of the GCN pipeline.

Programs are recorded once with :class:`ProgramBuilder` and evaluated many
times. Every operator carries a forward rule, a reverse (VJP) rule and a
forward (JVP) rule. Nonlinear operators additionally carry ``vjp_tangent``,
the directional derivative of their VJP rule with respect to their inputs,
which gives Hessian-vector products by forward-over-reverse.

All arithmetic is float64. Reductions use numpy/scipy kernels with a fixed
evaluation order, so repeated evaluations are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp


class ProgramError(ValueError):
    pass


class UnboundSlotError(ProgramError):
    pass


class ShapeMismatchError(ProgramError):
    pass


class Node:
    __slots__ = ("op", "inputs", "attrs", "name", "shape", "differentiable")

    def __init__(self, op, inputs=(), attrs=None, name=None, shape=None,
                 differentiable=True):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.shape = shape
        self.differentiable = differentiable

    @property
    def is_slot(self) -> bool:
        return self.op is None

    def __repr__(self):
        kind = "slot" if self.is_slot else self.op.__name__
        return f"Node({kind}, name={self.name!r})"


# ---------------------------------------------------------------------------
# operator rules
#
# Each op is a class of static methods:
#   forward(ins, attrs) -> out
#   vjp(g, ins, out, attrs) -> tuple of input cotangents (None = no flow)
#   jvp(dins, ins, out, attrs) -> output tangent; dins entries may be None
#   vjp_tangent(g, dins, ins, out, dout, attrs) -> d/dt of vjp(g, ins(t))
# Linear ops have zero vjp_tangent and omit it.


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _sum_to_2d(x, k):
    return x.reshape(-1, k)


class Op:
    linear = False

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        return tuple(None for _ in ins)


class MatMul(Op):
    """x (..., n, k) @ w (k, m)."""

    @staticmethod
    def forward(ins, attrs):
        x, w = ins
        return x @ w

    @staticmethod
    def vjp(g, ins, out, attrs):
        x, w = ins
        gx = g @ w.T
        gw = _sum_to_2d(x, x.shape[-1]).T @ _sum_to_2d(g, g.shape[-1])
        return gx, gw

    @staticmethod
    def jvp(dins, ins, out, attrs):
        x, w = ins
        dx, dw = dins
        res = None
        if dx is not None:
            res = dx @ w
        if dw is not None:
            res = _add(res, x @ dw)
        return res

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        x, w = ins
        dx, dw = dins
        dgx = g @ dw.T if dw is not None else None
        dgw = (_sum_to_2d(dx, dx.shape[-1]).T @ _sum_to_2d(g, g.shape[-1])
               if dx is not None else None)
        return dgx, dgw


class AddBias(Op):
    """x (..., m) + b (m)."""

    linear = True

    @staticmethod
    def forward(ins, attrs):
        return ins[0] + ins[1]

    @staticmethod
    def vjp(g, ins, out, attrs):
        return g, _sum_to_2d(g, g.shape[-1]).sum(axis=0)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        dx, db = dins
        return _add(dx, db)


class Add(Op):
    linear = True

    @staticmethod
    def forward(ins, attrs):
        return ins[0] + ins[1]

    @staticmethod
    def vjp(g, ins, out, attrs):
        return g, g

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return _add(dins[0], dins[1])


class Sub(Op):
    linear = True

    @staticmethod
    def forward(ins, attrs):
        return ins[0] - ins[1]

    @staticmethod
    def vjp(g, ins, out, attrs):
        return g, -g

    @staticmethod
    def jvp(dins, ins, out, attrs):
        da, db = dins
        if db is None:
            return da
        return -db if da is None else da - db


class Scale(Op):
    linear = True

    @staticmethod
    def forward(ins, attrs):
        return attrs["c"] * ins[0]

    @staticmethod
    def vjp(g, ins, out, attrs):
        return (attrs["c"] * g,)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return attrs["c"] * dins[0]


class Sum(Op):
    linear = True

    @staticmethod
    def forward(ins, attrs):
        return np.float64(ins[0].sum())

    @staticmethod
    def vjp(g, ins, out, attrs):
        return (np.full(ins[0].shape, g, dtype=np.float64),)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return np.float64(dins[0].sum())


class Relu(Op):
    # second derivative is zero almost everywhere; vjp_tangent stays the default

    @staticmethod
    def forward(ins, attrs):
        return np.maximum(ins[0], 0.0)

    @staticmethod
    def vjp(g, ins, out, attrs):
        return (g * (ins[0] > 0),)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return dins[0] * (ins[0] > 0)


class LogSoftmax(Op):
    """Row-wise log-softmax over the last axis."""

    @staticmethod
    def forward(ins, attrs):
        x = ins[0]
        z = x - x.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    @staticmethod
    def vjp(g, ins, out, attrs):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        p = np.exp(out)
        dx = dins[0]
        return dx - (p * dx).sum(axis=-1, keepdims=True)

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        p = np.exp(out)
        dp = p * dout
        return (-dp * g.sum(axis=-1, keepdims=True),)


class NllLoss(Op):
    """-reduce_v logp[v, y_v] over the node index set `idx`; reduction mean or sum."""

    linear = True

    @staticmethod
    def _coef(attrs):
        n = len(attrs["idx"])
        return 1.0 / n if attrs["reduction"] == "mean" else 1.0

    @staticmethod
    def forward(ins, attrs):
        logp = ins[0]
        picked = logp[attrs["idx"], attrs["targets"]]
        return np.float64(-picked.sum() * NllLoss._coef(attrs))

    @staticmethod
    def vjp(g, ins, out, attrs):
        gx = np.zeros_like(ins[0])
        gx[attrs["idx"], attrs["targets"]] = -g * NllLoss._coef(attrs)
        return (gx,)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        picked = dins[0][attrs["idx"], attrs["targets"]]
        return np.float64(-picked.sum() * NllLoss._coef(attrs))


class RowSqNorm(Op):
    @staticmethod
    def forward(ins, attrs):
        x = ins[0]
        return (x * x).sum(axis=-1)

    @staticmethod
    def vjp(g, ins, out, attrs):
        return (2.0 * ins[0] * g[..., None],)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return 2.0 * (ins[0] * dins[0]).sum(axis=-1)

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        return (2.0 * dins[0] * g[..., None],)


class RowNorm(Op):
    """Euclidean norm over the last axis; the derivative at zero is taken as 0."""

    @staticmethod
    def forward(ins, attrs):
        x = ins[0]
        return np.sqrt((x * x).sum(axis=-1))

    @staticmethod
    def _inv(out):
        inv = np.zeros_like(out)
        np.divide(1.0, out, out=inv, where=out > 0)
        return inv

    @staticmethod
    def vjp(g, ins, out, attrs):
        return (ins[0] * (g * RowNorm._inv(out))[..., None],)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return (ins[0] * dins[0]).sum(axis=-1) * RowNorm._inv(out)

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        x, dx = ins[0], dins[0]
        inv = RowNorm._inv(out)
        return ((g * inv)[..., None] * dx - (g * inv * inv * dout)[..., None] * x,)


class GatherRows(Op):
    """x[..., idx, :] along the node axis."""

    linear = True

    @staticmethod
    def forward(ins, attrs):
        return ins[0][..., attrs["idx"], :]

    @staticmethod
    def vjp(g, ins, out, attrs):
        gx = np.zeros_like(ins[0])
        np.add.at(gx, (Ellipsis, attrs["idx"], slice(None)), g)
        return (gx,)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return dins[0][..., attrs["idx"], :]


class BatchDiag(Op):
    """From x (B, n, C) pick row nodes[b] of batch b -> (B, C)."""

    linear = True

    @staticmethod
    def forward(ins, attrs):
        nodes = attrs["nodes"]
        return ins[0][np.arange(len(nodes)), nodes]

    @staticmethod
    def vjp(g, ins, out, attrs):
        nodes = attrs["nodes"]
        gx = np.zeros_like(ins[0])
        gx[np.arange(len(nodes)), nodes] = g
        return (gx,)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        nodes = attrs["nodes"]
        return dins[0][np.arange(len(nodes)), nodes]


class MaskFeatures(Op):
    """Stack copies of X (n, d) with rows zeroed by keep (B, n) -> (B, n, d)."""

    linear = True

    @staticmethod
    def forward(ins, attrs):
        return ins[0][None, :, :] * attrs["keep"][:, :, None]

    @staticmethod
    def vjp(g, ins, out, attrs):
        return ((g * attrs["keep"][:, :, None]).sum(axis=0),)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        return dins[0][None, :, :] * attrs["keep"][:, :, None]


class WeightedSum(Op):
    """sum_k w_k x_k for 1-D w and x."""

    @staticmethod
    def forward(ins, attrs):
        w, x = ins
        return np.float64(np.dot(w, x))

    @staticmethod
    def vjp(g, ins, out, attrs):
        w, x = ins
        return g * x, g * w

    @staticmethod
    def jvp(dins, ins, out, attrs):
        w, x = ins
        dw, dx = dins
        res = None
        if dw is not None:
            res = np.float64(np.dot(dw, x))
        if dx is not None:
            res = _add(res, np.float64(np.dot(w, dx)))
        return res

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        dw, dx = dins
        return (g * dx if dx is not None else None,
                g * dw if dw is not None else None)


DENSE_LIMIT = 2048


class SparsePattern:
    """Sparsity pattern of D^-1/2 (A + I) D^-1/2: off-diagonal entries then self-loops.

    Graphs with at most DENSE_LIMIT nodes are propagated with dense kernels.
    """

    def __init__(self, num_nodes: int, rows, cols):
        n = int(num_nodes)
        self.num_nodes = n
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.num_offdiag = len(self.rows)
        diag = np.arange(n, dtype=np.int64)
        self.full_rows = np.concatenate([self.rows, diag])
        self.full_cols = np.concatenate([self.cols, diag])
        self.dense = n <= DENSE_LIMIT
        self.perm = np.lexsort((self.full_cols, self.full_rows))
        self.indices = self.full_cols[self.perm]
        self.indptr = np.concatenate(
            [[0], np.cumsum(np.bincount(self.full_rows, minlength=n))]).astype(np.int64)
        self._last = (None, None)

    @classmethod
    def from_adjacency(cls, adjacency) -> "SparsePattern":
        return cls(adjacency.num_nodes, adjacency.rows, adjacency.cols)

    def matrix(self, vals):
        last_vals, last_mat = self._last
        if last_vals is vals:
            return last_mat
        n = self.num_nodes
        if self.dense:
            mat = np.zeros((n, n))
            mat[self.full_rows, self.full_cols] = vals
        else:
            mat = sp.csr_matrix((vals[self.perm], self.indices, self.indptr), shape=(n, n))
        self._last = (vals, mat)
        return mat

    def entry_products(self, g, h) -> np.ndarray:
        """sum over batch and channels of g[..., r_k, :] * h[..., c_k, :] per entry k."""
        if self.dense:
            n = self.num_nodes
            if g.ndim == 2:
                outer = g @ h.T
            else:
                outer = (g.transpose(1, 0, 2).reshape(n, -1)
                         @ h.transpose(1, 0, 2).reshape(n, -1).T)
            return outer[self.full_rows, self.full_cols]
        prod = (g[..., self.full_rows, :] * h[..., self.full_cols, :]).sum(axis=-1)
        return prod.reshape(-1, prod.shape[-1]).sum(axis=0) if prod.ndim > 1 else prod


def _spmm(mat, h):
    if h.ndim == 2 or isinstance(mat, np.ndarray):
        return mat @ h
    b, n, c = h.shape
    flat = h.transpose(1, 0, 2).reshape(n, b * c)
    return (mat @ flat).reshape(n, b, c).transpose(1, 0, 2)


class GcnNorm(Op):
    """Entry weights w (m,) -> normalized values over the pattern (m + n,).

    values[k] = w_k / sqrt(d_r d_c) for off-diagonal entries and 1 / d_i on the
    diagonal, with d_i = 1 + sum_{k: r_k = i} w_k.
    """

    @staticmethod
    def _degree_scale(w, pattern):
        deg = 1.0 + np.bincount(pattern.rows, weights=w, minlength=pattern.num_nodes)
        return deg, 1.0 / np.sqrt(deg)

    @staticmethod
    def forward(ins, attrs):
        w = ins[0]
        pat = attrs["pattern"]
        deg, s = GcnNorm._degree_scale(w, pat)
        return np.concatenate([w * s[pat.rows] * s[pat.cols], s * s])

    @staticmethod
    def vjp(g, ins, out, attrs):
        w = ins[0]
        pat = attrs["pattern"]
        n, m = pat.num_nodes, pat.num_offdiag
        deg, s = GcnNorm._degree_scale(w, pat)
        g_off, g_diag = g[:m], g[m:]
        gw = g_off * s[pat.rows] * s[pat.cols]
        t = g_off * w
        gs = (np.bincount(pat.rows, weights=t * s[pat.cols], minlength=n)
              + np.bincount(pat.cols, weights=t * s[pat.rows], minlength=n)
              + 2.0 * g_diag * s)
        gdeg = gs * (-0.5) * s / deg
        return (gw + gdeg[pat.rows],)

    @staticmethod
    def jvp(dins, ins, out, attrs):
        w, dw = ins[0], dins[0]
        pat = attrs["pattern"]
        deg, s = GcnNorm._degree_scale(w, pat)
        ddeg = np.bincount(pat.rows, weights=dw, minlength=pat.num_nodes)
        ds = -0.5 * s / deg * ddeg
        r, c = pat.rows, pat.cols
        d_off = dw * s[r] * s[c] + w * ds[r] * s[c] + w * s[r] * ds[c]
        return np.concatenate([d_off, 2.0 * s * ds])

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        if dins[0] is None:
            return (None,)
        raise NotImplementedError("second-order adjacency derivatives are not supported")


class Propagate(Op):
    """Sparse-weighted propagation: values over the pattern applied to H (..., n, c)."""

    @staticmethod
    def forward(ins, attrs):
        vals, h = ins
        return _spmm(attrs["pattern"].matrix(vals), h)

    @staticmethod
    def vjp(g, ins, out, attrs):
        vals, h = ins
        pat = attrs["pattern"]
        gh = _spmm(pat.matrix(vals).T, g)
        return pat.entry_products(g, h), gh

    @staticmethod
    def jvp(dins, ins, out, attrs):
        vals, h = ins
        dvals, dh = dins
        pat = attrs["pattern"]
        res = None
        if dvals is not None:
            res = _spmm(pat.matrix(dvals), h)
        if dh is not None:
            res = _add(res, _spmm(pat.matrix(vals), dh))
        return res

    @staticmethod
    def vjp_tangent(g, dins, ins, out, dout, attrs):
        vals, h = ins
        dvals, dh = dins
        pat = attrs["pattern"]
        dgvals = pat.entry_products(g, dh) if dh is not None else None
        dgh = _spmm(pat.matrix(dvals).T, g) if dvals is not None else None
        return dgvals, dgh


# ---------------------------------------------------------------------------
# program construction


class ProgramBuilder:
    def __init__(self):
        self.slots: dict[str, Node] = {}

    def slot(self, name: str, shape, differentiable: bool = True) -> Node:
        if name in self.slots:
            raise ProgramError(f"duplicate slot {name!r}")
        node = Node(None, name=name, shape=tuple(shape), differentiable=differentiable)
        self.slots[name] = node
        return node

    def build(self, outputs: Mapping[str, Node]) -> "Program":
        return Program(self.slots, dict(outputs))


def _apply(op, *inputs, **attrs) -> Node:
    return Node(op, inputs, attrs)


def matmul(x, w):
    return _apply(MatMul, x, w)


def add_bias(x, b):
    return _apply(AddBias, x, b)


def add(a, b):
    return _apply(Add, a, b)


def sub(a, b):
    return _apply(Sub, a, b)


def scale(x, c: float):
    return _apply(Scale, x, c=float(c))


def total(x):
    return _apply(Sum, x)


def relu(x):
    return _apply(Relu, x)


def log_softmax(x):
    return _apply(LogSoftmax, x)


def nll_loss(logp, idx, targets, reduction="mean"):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ProgramError("loss mask selects no nodes")
    if reduction not in ("mean", "sum"):
        raise ProgramError(f"unknown reduction {reduction!r}")
    return _apply(NllLoss, logp, idx=idx, targets=np.asarray(targets, dtype=np.int64)[idx],
                  reduction=reduction)


def row_sqnorm(x):
    return _apply(RowSqNorm, x)


def row_norm(x):
    return _apply(RowNorm, x)


def gather_rows(x, idx):
    return _apply(GatherRows, x, idx=np.asarray(idx, dtype=np.int64))


def batch_diag(x, nodes):
    return _apply(BatchDiag, x, nodes=np.asarray(nodes, dtype=np.int64))


def mask_features(x, keep):
    return _apply(MaskFeatures, x, keep=np.asarray(keep, dtype=np.float64))


def weighted_sum(w, x):
    return _apply(WeightedSum, w, x)


def gcn_norm(weights, pattern: SparsePattern):
    return _apply(GcnNorm, weights, pattern=pattern)


def propagate(values, h, pattern: SparsePattern):
    return _apply(Propagate, values, h, pattern=pattern)


class Program:
    """An immutable recorded computation. Evaluation state lives in the caller."""

    def __init__(self, slots: Mapping[str, Node], outputs: Mapping[str, Node]):
        self.slots = dict(slots)
        self.outputs = dict(outputs)
        order: list[Node] = []
        seen: set[int] = set()
        for out in self.outputs.values():
            stack = [(out, False)]
            while stack:
                node, expanded = stack.pop()
                if id(node) in seen:
                    continue
                if expanded or not node.inputs:
                    seen.add(id(node))
                    order.append(node)
                    continue
                stack.append((node, True))
                for child in reversed(node.inputs):
                    if id(child) not in seen:
                        stack.append((child, False))
        for s in self.slots.values():
            if id(s) not in seen:
                seen.add(id(s))
                order.insert(0, s)
        self.order = order
        self.index = {id(node): i for i, node in enumerate(order)}
        self.input_ids = [tuple(self.index[id(c)] for c in node.inputs) for node in order]
        self.output_ids = {k: self.index[id(n)] for k, n in self.outputs.items()}
        self.slot_ids = {k: self.index[id(n)] for k, n in self.slots.items()}
        for node in order:
            if node.is_slot and self.slots.get(node.name) is not node:
                raise ProgramError(f"slot {node.name!r} not registered with the builder")

    @property
    def differentiable_slots(self) -> list[str]:
        return [k for k, s in self.slots.items() if s.differentiable]

    def _bind(self, inputs: Mapping[str, np.ndarray]) -> list:
        values = [None] * len(self.order)
        for name, node in self.slots.items():
            if name not in inputs:
                raise UnboundSlotError(f"slot {name!r} is unbound")
            val = np.asarray(inputs[name], dtype=np.float64)
            if node.shape is not None and val.shape != node.shape:
                raise ShapeMismatchError(
                    f"slot {name!r} expects shape {node.shape}, got {val.shape}")
            values[self.slot_ids[name]] = val
        return values

    def _forward(self, inputs) -> list:
        values = self._bind(inputs)
        for i, node in enumerate(self.order):
            if not node.is_slot:
                values[i] = node.op.forward([values[c] for c in self.input_ids[i]],
                                            node.attrs)
        return values

    def _depends_on(self, names) -> list[bool]:
        marks = [False] * len(self.order)
        for i, node in enumerate(self.order):
            if node.is_slot:
                marks[i] = node.name in names
            else:
                marks[i] = any(marks[c] for c in self.input_ids[i])
        return marks

    def _check_tangents(self, tangents):
        out = {}
        for name, t in tangents.items():
            if name not in self.slots:
                raise UnboundSlotError(f"unknown slot {name!r}")
            t = np.asarray(t, dtype=np.float64)
            shape = self.slots[name].shape
            if shape is not None and t.shape != shape:
                raise ShapeMismatchError(
                    f"tangent for {name!r} has shape {t.shape}, expected {shape}")
            out[name] = t
        return out


@dataclass
class Linearization:
    """Forward values of a program at fixed inputs, reusable for many VJPs/JVPs."""

    program: Program
    values: list

    @property
    def outputs(self) -> dict:
        return {k: self.values[i] for k, i in self.program.output_ids.items()}

    def _seed_cotangents(self, cotangents):
        prog = self.program
        cot = [None] * len(prog.order)
        for name, g in cotangents.items():
            if name not in prog.outputs:
                raise ProgramError(f"unknown output {name!r}")
            i = prog.output_ids[name]
            g = np.asarray(g, dtype=np.float64)
            expected = np.shape(self.values[i])
            if g.shape != expected:
                raise ShapeMismatchError(
                    f"cotangent for {name!r} has shape {g.shape}, expected {expected}")
            cot[i] = _add(cot[i], g)
        return cot

    def _slot_result(self, acc, wrt):
        prog = self.program
        res = {}
        for name in wrt:
            i = prog.slot_ids[name]
            res[name] = acc[i] if acc[i] is not None else np.zeros(np.shape(self.values[i]))
        return res

    def vjp(self, cotangents: Mapping[str, np.ndarray], wrt=None) -> dict:
        prog = self.program
        wrt = list(wrt) if wrt is not None else prog.differentiable_slots
        needed = prog._depends_on(set(wrt))
        cot = self._seed_cotangents(cotangents)
        vals = self.values
        for i in range(len(prog.order) - 1, -1, -1):
            node = prog.order[i]
            g = cot[i]
            if node.is_slot or g is None or not needed[i]:
                continue
            ids = prog.input_ids[i]
            grads = node.op.vjp(g, [vals[c] for c in ids], vals[i], node.attrs)
            for c, gc in zip(ids, grads):
                if gc is not None and needed[c]:
                    cot[c] = _add(cot[c], gc)
        return self._slot_result(cot, wrt)

    def jvp(self, tangents: Mapping[str, np.ndarray]) -> dict:
        tan = self._tangents(tangents)
        res = {}
        for k, i in self.program.output_ids.items():
            res[k] = tan[i] if tan[i] is not None else np.zeros(np.shape(self.values[i]))
        return res

    def _tangents(self, tangents) -> list:
        prog = self.program
        tangents = prog._check_tangents(tangents)
        vals = self.values
        tan = [None] * len(prog.order)
        for i, node in enumerate(prog.order):
            if node.is_slot:
                tan[i] = tangents.get(node.name)
                continue
            ids = prog.input_ids[i]
            dins = [tan[c] for c in ids]
            if all(d is None for d in dins):
                continue
            if node.op.linear and any(d is None for d in dins):
                dins = [d if d is not None else np.zeros(np.shape(vals[c]))
                        for d, c in zip(dins, ids)]
            tan[i] = node.op.jvp(dins, [vals[c] for c in ids], vals[i], node.attrs)
        return tan

    def hvp(self, tangents: Mapping[str, np.ndarray],
            cotangents: Mapping[str, np.ndarray], wrt=None) -> dict:
        """Directional derivative of vjp(cotangents) along `tangents` (forward-over-reverse)."""
        prog = self.program
        wrt = list(wrt) if wrt is not None else prog.differentiable_slots
        needed = prog._depends_on(set(wrt))
        tan = self._tangents(tangents)
        cot = self._seed_cotangents(cotangents)
        dcot = [None] * len(prog.order)
        vals = self.values
        for i in range(len(prog.order) - 1, -1, -1):
            node = prog.order[i]
            g = cot[i]
            if node.is_slot or g is None or not needed[i]:
                continue
            ids = prog.input_ids[i]
            ins = [vals[c] for c in ids]
            grads = node.op.vjp(g, ins, vals[i], node.attrs)
            dg = dcot[i]
            dgrads = (node.op.vjp(dg, ins, vals[i], node.attrs) if dg is not None
                      else (None,) * len(ins))
            dins = [tan[c] for c in ids]
            if not node.op.linear and any(d is not None for d in dins):
                curv = node.op.vjp_tangent(g, dins, ins, vals[i], tan[i], node.attrs)
                dgrads = tuple(_add(a, b) for a, b in zip(dgrads, curv))
            for c, gc, dgc in zip(ids, grads, dgrads):
                if needed[c]:
                    if gc is not None:
                        cot[c] = _add(cot[c], gc)
                    if dgc is not None:
                        dcot[c] = _add(dcot[c], dgc)
        return self._slot_result(dcot, wrt)


def linearize(program: Program, inputs: Mapping[str, np.ndarray]) -> Linearization:
    return Linearization(program, program._forward(inputs))


def evaluate(program: Program, inputs: Mapping[str, np.ndarray]) -> dict:
    return linearize(program, inputs).outputs


def value_and_vjp(program: Program, inputs, cotangents, wrt=None):
    lin = linearize(program, inputs)
    return lin.outputs, lin.vjp(cotangents, wrt)


def vjp(program: Program, inputs, cotangents, wrt=None) -> dict:
    return linearize(program, inputs).vjp(cotangents, wrt)


def jvp(program: Program, inputs, tangents) -> dict:
    return linearize(program, inputs).jvp(tangents)


def hvp(program: Program, inputs, tangents, cotangents, wrt=None) -> dict:
    return linearize(program, inputs).hvp(tangents, cotangents, wrt)


def finite_difference_gradient(program: Program, inputs, slot: str, step: float = 1e-5,
                               output: str | None = None,
                               coords: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar output with respect to one slot.

    `coords` restricts the estimate to a subset of flat indices (others are 0).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if output is None:
        if len(program.outputs) != 1:
            raise ProgramError("program has several outputs; name one")
        output = next(iter(program.outputs))
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if np.ndim(evaluate(program, base)[output]) != 0:
        raise ProgramError(f"output {output!r} is not scalar")
    x = base[slot]
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate(program, base)[output]
        flat[i] = orig - step
        fm = evaluate(program, base)[output]
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# flat parameter vectors


class Layout:
    """Block layout of a flat vector: ordered (name, shape) pairs."""

    def __init__(self, blocks):
        self.blocks = [(name, tuple(shape)) for name, shape in blocks]
        sizes = [int(np.prod(s)) for _, s in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.blocks]

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for (name, shape), lo, hi in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeMismatchError(f"block {name!r}: expected {shape}, got {a.shape}")
            out[lo:hi] = a.reshape(-1)
        return out

    def unflatten(self, vec) -> dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeMismatchError(f"vector of length {vec.size} does not match "
                                     f"layout of size {self.size}")
        return {name: vec[lo:hi].reshape(shape)
                for (name, shape), lo, hi in zip(self.blocks, self.offsets[:-1],
                                                 self.offsets[1:])}

    def __eq__(self, other):
        return isinstance(other, Layout) and self.blocks == other.blocks

    def __hash__(self):
        return hash(tuple(self.blocks))
