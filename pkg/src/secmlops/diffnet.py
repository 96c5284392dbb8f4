"""Minimal reverse-mode autodiff over dense float64 arrays.

Operator coverage is exactly what the detector needs: 3x3 same-padding
convolution, channelwise affine (a 1x1 conv / dense layer), relu, sigmoid,
non-overlapping average pooling, elementwise add/mul, full-mean reduction,
and two losses (binary cross-entropy on logits, masked L1).  There is no
general broadcasting and no other op.

Ops record onto an explicit Tape.  `Tape.backward(loss)` replays the tape
once in reverse and returns gradients for every leaf, inputs included:
attacks differentiate with respect to pixels through exactly the same
machinery training uses for weights.  Everything is float64; any op that
produces a NaN or Inf raises immediately rather than letting it propagate.

Ops accept plain numpy arrays (or Python floats) in place of tensors;
those are treated as constants and receive no gradient.  At least one
argument of every op must be a live Tensor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canon import sha256_hex
from .errors import (ChecksumMismatch, LossNotScalar, MissingGradient,
                     NonFiniteValues, ShapeMismatch)

Array = np.ndarray


def _f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(a: Array, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteValues(f"non-finite values in {what}")


class Tensor:
    """A handle to one node of a Tape: immutable data plus a node id."""

    __slots__ = ("tape", "node_id", "data")

    def __init__(self, tape: "Tape", node_id: int, data: Array):
        self.tape = tape
        self.node_id = node_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(node={self.node_id}, shape={self.shape})"


class Grads:
    """Gradient lookup returned by Tape.backward, keyed by leaf tensor."""

    def __init__(self, by_id: dict[int, Array]):
        self._by_id = by_id

    def __getitem__(self, t: Tensor) -> Array:
        return self._by_id[t.node_id]

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._by_id


class Tape:
    """Append-only op record; append order is a topological order.

    Each recorded node stores the parent node ids and a closure that maps
    the node's output gradient to per-parent gradient contributions.
    backward() visits every node at most once, so gradient accumulation
    order is fixed and runs are bit-reproducible.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list = []
        self._leaf_shapes: dict[int, tuple[int, ...]] = {}

    def leaf(self, data) -> Tensor:
        a = _f64(data).copy()
        _check_finite(a, "leaf")
        nid = len(self._parents)
        self._parents.append(())
        self._backward.append(None)
        self._leaf_shapes[nid] = a.shape
        return Tensor(self, nid, a)

    def _record(self, data: Array, parents: tuple[int, ...], backward_fn) -> Tensor:
        _check_finite(data, "op output")
        nid = len(self._parents)
        self._parents.append(parents)
        self._backward.append(backward_fn)
        return Tensor(self, nid, data)

    def backward(self, loss: Tensor) -> Grads:
        """Gradients of a scalar loss for every leaf of this tape.

        Leaves that do not influence the loss get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.data.shape != ():
            raise LossNotScalar(f"loss has shape {loss.data.shape}, expected scalar")
        grads: dict[int, Array] = {loss.node_id: np.ones((), dtype=np.float64)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None or self._backward[nid] is None:
                continue
            for pid, pg in zip(self._parents[nid], self._backward[nid](g)):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        out: dict[int, Array] = {}
        for nid, shape in self._leaf_shapes.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros(shape, dtype=np.float64)  # leaf unused by loss
            out[nid] = g
        return Grads(out)


def _split(x) -> tuple[Array, Tensor | None]:
    if isinstance(x, Tensor):
        return x.data, x
    return _f64(x), None


def _require_tape(*parts: Tensor | None) -> Tape:
    tapes = {p.tape for p in parts if p is not None}
    if not tapes:
        raise ValueError("at least one operand must be a Tensor")
    if len(tapes) > 1:
        raise ValueError("operands belong to different tapes")
    return tapes.pop()


def _pair_ids(*parts: Tensor | None) -> tuple[int, ...]:
    return tuple(p.node_id for p in parts if p is not None)


def _bw(parts: tuple[Tensor | None, ...], grads_fn):
    """Wrap per-operand gradient functions, skipping constants."""
    live = [i for i, p in enumerate(parts) if p is not None]

    def run(g: Array):
        all_grads = grads_fn(g)
        return [all_grads[i] for i in live]

    return run


def add(a, b) -> Tensor:
    """Elementwise sum; same shapes, or either side a scalar."""
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.shape != bd.shape and ad.shape != () and bd.shape != ():
        raise ShapeMismatch(f"add: {ad.shape} vs {bd.shape}")
    tape = _require_tape(at, bt)
    out = ad + bd

    def grads(g):
        ga = g.sum() if ad.shape == () and out.shape != () else g
        gb = g.sum() if bd.shape == () and out.shape != () else g
        return [ga, gb]

    return tape._record(out, _pair_ids(at, bt), _bw((at, bt), grads))


def mul(a, b) -> Tensor:
    """Elementwise product; same shapes, or either side a scalar."""
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.shape != bd.shape and ad.shape != () and bd.shape != ():
        raise ShapeMismatch(f"mul: {ad.shape} vs {bd.shape}")
    tape = _require_tape(at, bt)
    out = ad * bd

    def grads(g):
        ga = g * bd
        gb = g * ad
        if ad.shape == () and out.shape != ():
            ga = ga.sum()
        if bd.shape == () and out.shape != ():
            gb = gb.sum()
        return [ga, gb]

    return tape._record(out, _pair_ids(at, bt), _bw((at, bt), grads))


def relu(x: Tensor) -> Tensor:
    xd, xt = _split(x)
    tape = _require_tape(xt)
    mask = xd > 0.0
    return tape._record(np.where(mask, xd, 0.0), _pair_ids(xt),
                        _bw((xt,), lambda g: [g * mask]))


def sigmoid(x: Tensor) -> Tensor:
    xd, xt = _split(x)
    tape = _require_tape(xt)
    s = _sigmoid(xd)
    return tape._record(s, _pair_ids(xt),
                        _bw((xt,), lambda g: [g * s * (1.0 - s)]))


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mean(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    xd, xt = _split(x)
    tape = _require_tape(xt)
    n = xd.size

    def grads(g):
        return [np.full(xd.shape, float(g) / n)]

    return tape._record(np.asarray(xd.mean()), _pair_ids(xt), _bw((xt,), grads))


def affine(w, x, b=None) -> Tensor:
    """y = w @ x (+ b) over the channel axis of x.

    w has shape (out, in); x is (in,), (in, H, W) or batched (B, in, H, W);
    b, if given, is (out,) and broadcasts over the other axes.
    """
    wd, wt = _split(w)
    xd, xt = _split(x)
    caxis = 1 if xd.ndim == 4 else 0
    if wd.ndim != 2 or xd.ndim < 1 or wd.shape[1] != xd.shape[caxis]:
        raise ShapeMismatch(f"affine: w {wd.shape} vs x {xd.shape}")
    parts: list[Tensor | None] = [wt, xt]
    bd = None
    if b is not None:
        bd, btens = _split(b)
        if bd.shape != (wd.shape[0],):
            raise ShapeMismatch(f"affine: b {bd.shape} vs out {wd.shape[0]}")
        parts.append(btens)
    tape = _require_tape(*parts)
    if xd.ndim == 4:
        out = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)
        if bd is not None:
            out = out + bd[None, :, None, None]

        def grads(g):
            gw = (np.einsum("bohw,bchw->oc", g, xd, optimize=True)
                  if wt is not None else None)
            gx = (np.einsum("oc,bohw->bchw", wd, g, optimize=True)
                  if xt is not None else None)
            return [gw, gx, g.sum(axis=(0, 2, 3))]
    else:
        out = np.tensordot(wd, xd, axes=([1], [0]))
        if bd is not None:
            out = out + bd.reshape((-1,) + (1,) * (out.ndim - 1))
        rest = tuple(range(1, out.ndim))

        def grads(g):
            gw = np.tensordot(g, xd, axes=(rest, rest))
            gx = np.tensordot(wd, g, axes=([0], [0]))
            gb = g.sum(axis=rest) if rest else g
            return [gw, gx, gb]

    return tape._record(out, _pair_ids(*parts), _bw(tuple(parts), grads))


def conv3x3(x, w, b=None) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution keeping spatial size.

    x is (C, H, W) or batched (B, C, H, W), w is (O, C, 3, 3), optional b
    is (O,).
    """
    xd, xt = _split(x)
    wd, wt = _split(w)
    if xd.ndim not in (3, 4) or wd.shape[1:] != (xd.shape[-3], 3, 3):
        raise ShapeMismatch(f"conv3x3: x {xd.shape} vs w {wd.shape}")
    parts: list[Tensor | None] = [xt, wt]
    bd = None
    if b is not None:
        bd, btens = _split(b)
        if bd.shape != (wd.shape[0],):
            raise ShapeMismatch(f"conv3x3: b {bd.shape} vs out {wd.shape[0]}")
        parts.append(btens)
    tape = _require_tape(*parts)
    squeeze = xd.ndim == 3
    xb = xd[None] if squeeze else xd
    n, c, hh, ww = xb.shape
    o = wd.shape[0]
    # lower to one GEMM over the im2col matrix; the transposed conv in the
    # backward pass becomes a second GEMM plus nine shifted accumulations
    win = _windows3x3(xb)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * hh * ww, c * 9)
    out = (cols @ wd.reshape(o, -1).T).reshape(n, hh, ww, o).transpose(0, 3, 1, 2)
    if bd is not None:
        out = out + bd[None, :, None, None]
    if squeeze:
        out = out[0]

    def grads(g):
        # constants get None (skipped); attacks leave the weights out of the
        # graph and training leaves the pixels out, so each path pays only
        # for the gradients it consumes
        gb = g[None] if squeeze else g
        gflat = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(o, c, 3, 3) if wt is not None else None
        gx = None
        if xt is not None:
            colsg = (gflat @ wd.reshape(o, -1)).reshape(n, hh, ww, c, 3, 3)
            acc = np.zeros((n, hh + 2, ww + 2, c))
            for a in range(3):
                for b_ in range(3):
                    acc[:, a:a + hh, b_:b_ + ww, :] += colsg[:, :, :, :, a, b_]
            gx = acc[:, 1:hh + 1, 1:ww + 1, :].transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        gbias = gb.sum(axis=(0, 2, 3))
        return [gx, gw, gbias]

    return tape._record(out, _pair_ids(*parts), _bw(tuple(parts), grads))


def _windows3x3(x: Array) -> Array:
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    return np.lib.stride_tricks.sliding_window_view(np.pad(x, pad), (3, 3),
                                                    axis=(-2, -1))


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """k-by-k average pooling of a (C, H, W) tensor at the given stride.

    A leading batch axis is allowed.  H and W must be divisible by the
    stride (which defaults to k, the non-overlapping case).  When k exceeds
    the stride the windows overlap; the input is zero-padded by (k-stride)/2
    so the output grid stays H/stride by W/stride, anchored like the
    non-overlapping grid.  Average (rather than strided subsampling) keeps
    every input pixel on the gradient path, which the pixel-space attacks
    rely on.
    """
    xd, xt = _split(x)
    tape = _require_tape(xt)
    s = k if stride is None else stride
    if xd.ndim not in (3, 4):
        raise ShapeMismatch(f"avg_pool2d: expected (C,H,W), got {xd.shape}")
    h, w = xd.shape[-2:]
    if h % s or w % s:
        raise ShapeMismatch(f"avg_pool2d: {h}x{w} not divisible by stride {s}")
    if k < s or (k - s) % 2:
        raise ShapeMismatch(f"avg_pool2d: window {k} must be stride + 2*pad")
    if k == s:
        out = xd.reshape(xd.shape[:-2] + (h // s, k, w // s, k)).mean(axis=(-3, -1))

        def grads(g):
            gx = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
            return [gx]
    else:
        p = (k - s) // 2
        pad = [(0, 0)] * (xd.ndim - 2) + [(p, p), (p, p)]
        win = np.lib.stride_tricks.sliding_window_view(
            np.pad(xd, pad), (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]
        out = win.mean(axis=(-2, -1))

        def grads(g):
            ge = np.repeat(np.repeat(g, s, axis=-2), s, axis=-1) / (k * k)
            acc = np.zeros(xd.shape[:-2] + (h + 2 * p, w + 2 * p))
            for a in range(0, k, s):
                for b in range(0, k, s):
                    acc[..., a:a + h, b:b + w] += ge
            return [acc[..., p:p + h, p:p + w]]

    return tape._record(out, _pair_ids(xt), _bw((xt,), grads))


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy between logits and {0,1} targets.

    targets and mask are constants.  With a mask, the mean runs over cells
    with mask != 0 only; a zero-mask input yields loss 0.
    """
    zd, zt = _split(logits)
    tape = _require_tape(zt)
    t = _f64(targets)
    if t.shape != zd.shape:
        raise ShapeMismatch(f"bce: targets {t.shape} vs logits {zd.shape}")
    m = np.ones_like(zd) if mask is None else _f64(mask)
    if m.shape != zd.shape:
        raise ShapeMismatch(f"bce: mask {m.shape} vs logits {zd.shape}")
    count = float(np.count_nonzero(m))
    if count == 0.0:
        return tape._record(np.asarray(0.0), _pair_ids(zt),
                            _bw((zt,), lambda g: [np.zeros_like(zd)]))
    # stable: max(z,0) - z*t + log(1+exp(-|z|))
    per = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    loss = np.asarray(float((per * (m != 0)).sum()) / count)
    sig = _sigmoid(zd)

    def grads(g):
        return [float(g) * (sig - t) * (m != 0) / count]

    return tape._record(loss, _pair_ids(zt), _bw((zt,), grads))


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error; target and mask are constants.

    The subgradient at exactly zero error is taken as 0.  A zero mask
    yields loss 0 (used when a batch has no positive cells).
    """
    pd, pt = _split(pred)
    tape = _require_tape(pt)
    t = _f64(target)
    if t.shape != pd.shape:
        raise ShapeMismatch(f"l1: target {t.shape} vs pred {pd.shape}")
    m = np.ones_like(pd) if mask is None else _f64(mask)
    if m.shape != pd.shape:
        raise ShapeMismatch(f"l1: mask {m.shape} vs pred {pd.shape}")
    sel = m != 0
    count = float(np.count_nonzero(sel))
    if count == 0.0:
        return tape._record(np.asarray(0.0), _pair_ids(pt),
                            _bw((pt,), lambda g: [np.zeros_like(pd)]))
    diff = pd - t
    loss = np.asarray(float(np.abs(diff[sel]).sum()) / count)

    def grads(g):
        return [float(g) * np.sign(diff) * sel / count]

    return tape._record(loss, _pair_ids(pt), _bw((pt,), grads))


# ---------------------------------------------------------------------------
# parameter sets and checkpoints


@dataclass
class ParamSet:
    """Named float64 parameter arrays plus an update-step counter.

    Treated as immutable: sgd_step returns a fresh ParamSet and never
    mutates arrays in place.
    """

    tensors: dict[str, Array] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.step)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (self.step == other.step
                and self.names() == other.names()
                and all(np.array_equal(self.tensors[k], other.tensors[k])
                        for k in self.tensors))

    def blob(self) -> bytes:
        """Concatenated row-major little-endian float64 bytes, name-sorted."""
        return b"".join(np.ascontiguousarray(self.tensors[k], dtype="<f8").tobytes()
                        for k in self.names())

    def digest(self) -> str:
        return sha256_hex(self.blob())


def sgd_step(params: ParamSet, grads: dict[str, Array], lr: float) -> ParamSet:
    """One plain SGD update: w <- w - lr * g for every named parameter."""
    new = {}
    for name, w in params.tensors.items():
        if name not in grads:
            raise MissingGradient(name)
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"sgd: grad {g.shape} vs param {w.shape} for {name}")
        new[name] = w - lr * g
        _check_finite(new[name], f"updated param {name}")
    return ParamSet(new, params.step + 1)


_MANIFEST = "manifest.json"
_BLOB = "params.bin"


def save_params(params: ParamSet, directory: str | Path) -> None:
    """Write manifest.json (names, shapes, digest, step) plus params.bin."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = params.blob()
    manifest = {
        "format": 1,
        "step": params.step,
        "names": params.names(),
        "shapes": {k: list(params.tensors[k].shape) for k in params.names()},
        "sha256": sha256_hex(blob),
    }
    (d / _MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (d / _BLOB).write_bytes(blob)


def load_params(directory: str | Path) -> ParamSet:
    d = Path(directory)
    manifest = json.loads((d / _MANIFEST).read_text())
    blob = (d / _BLOB).read_bytes()
    if sha256_hex(blob) != manifest["sha256"]:
        raise ChecksumMismatch(f"parameter blob digest mismatch in {d}")
    tensors: dict[str, Array] = {}
    offset = 0
    for name in manifest["names"]:
        shape = tuple(manifest["shapes"][name])
        n = int(np.prod(shape)) if shape else 1
        raw = blob[offset:offset + 8 * n]
        if len(raw) != 8 * n:
            raise ChecksumMismatch(f"parameter blob truncated at {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(blob):
        raise ChecksumMismatch("parameter blob has trailing bytes")
    return ParamSet(tensors, int(manifest["step"]))
