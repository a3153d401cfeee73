"""Compute kernels: sliding-window convolution and direct/Strassen matmul.

All kernels are pure functions of their inputs.  Thread parallelism splits
work into chunks whose per-chunk arithmetic is independent of the chunking,
so results are bitwise identical for any worker count.
"""

from __future__ import annotations

import concurrent.futures
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .tensor import LANES, Layout, Tensor, channel_blocks, zeros

_pool_lock = threading.Lock()
_pools: dict[int, concurrent.futures.ThreadPoolExecutor] = {}


def _run_chunks(tasks, threads: int) -> None:
    """Run independent tasks, optionally on a shared worker pool."""
    if threads <= 1 or len(tasks) <= 1:
        for task in tasks:
            task()
        return
    with _pool_lock:
        pool = _pools.get(threads)
        if pool is None:
            pool = concurrent.futures.ThreadPoolExecutor(max_workers=threads)
            _pools[threads] = pool
    futures = [pool.submit(task) for task in tasks]
    for fut in futures:
        fut.result()


@dataclass(frozen=True)
class MatDims:
    """Dimensions of a product [n, k] x [k, m] -> [n, m]."""

    n: int
    k: int
    m: int

    def __post_init__(self):
        if self.n < 0 or self.k < 0 or self.m < 0:
            raise ShapeMismatchError(f"negative matrix dims {self}")


@dataclass(frozen=True)
class ConvParams:
    """Convolution geometry; kernel/stride/pad are (height, width) pairs."""

    kh: int
    kw: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    in_c: int = 1
    out_c: int = 1
    group: int = 1
    relu: bool = False

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise ShapeMismatchError("kernel size must be >= 1")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ShapeMismatchError("stride must be >= 1")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeMismatchError("pad must be >= 0")
        if self.group < 1 or self.in_c % self.group or self.out_c % self.group:
            raise ShapeMismatchError(
                f"group={self.group} does not divide channels "
                f"({self.in_c}, {self.out_c})"
            )

    @classmethod
    def square(cls, k: int, stride: int = 1, pad: int = 0, in_c: int = 1,
               out_c: int = 1, group: int = 1, relu: bool = False) -> "ConvParams":
        return cls(k, k, stride, stride, pad, pad, in_c, out_c, group, relu)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kh) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kw) // self.stride_w + 1
        return max(oh, 0), max(ow, 0)


def matmul_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain product in float32 with fixed summation order over k."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a.astype(np.float32, copy=False),
                     b.astype(np.float32, copy=False))


def strassen_should_recurse(d: MatDims) -> bool:
    """True when one Strassen split saves more multiplies than it adds.

    Saved multiplies: m*n*k - 7*(m/2)(n/2)(k/2).  Extra additions: 4 of
    [m/2, k/2], 4 of [n/2, k/2], 7 of [m/2, n/2].  Odd extents are padded
    to the next even size before halving, matching what the split does.
    """
    if min(d.n, d.k, d.m) == 0:
        return False
    n2, k2, m2 = (d.n + 1) // 2, (d.k + 1) // 2, (d.m + 1) // 2
    saved = (2 * n2) * (2 * k2) * (2 * m2) - 7 * n2 * k2 * m2
    added = 4 * m2 * k2 + 4 * n2 * k2 + 7 * m2 * n2
    return saved > added


def strassen_recursion_depth(d: MatDims) -> int:
    """Number of split levels the cutoff rule allows, iterated on halves."""
    depth = 0
    n, k, m = d.n, d.k, d.m
    while strassen_should_recurse(MatDims(n, k, m)):
        n, k, m = (n + 1) // 2, (k + 1) // 2, (m + 1) // 2
        depth += 1
    return depth


def _strassen_level_dims(d: MatDims) -> list[tuple[int, int, int]]:
    dims = [(d.n, d.k, d.m)]
    for _ in range(strassen_recursion_depth(d)):
        n, k, m = dims[-1]
        dims.append(((n + 1) // 2, (k + 1) // 2, (m + 1) // 2))
    return dims


def strassen_scratch_elems(d: MatDims) -> int:
    """float32 elements of working memory matmul_strassen needs for d."""
    dims = _strassen_level_dims(d)
    total = 0
    for lvl in range(1, len(dims)):
        n, k, m = dims[lvl]
        total += 7 ** lvl * (n * k + k * m + n * m)
    return total


class Arena:
    """Bump allocator carving float32 views out of one flat buffer."""

    def __init__(self, buf: np.ndarray | None):
        self.buf = buf
        self.offset = 0

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        if self.buf is None:
            return np.empty(shape, dtype=np.float32)
        view = self.buf[self.offset:self.offset + count]
        if view.size < count:
            raise ShapeMismatchError(
                f"scratch arena exhausted: need {count}, have {view.size}"
            )
        self.offset += count
        return view.reshape(shape)


def _quad(stack: np.ndarray, qi: int, qj: int, r1: int, c1: int,
          out: np.ndarray) -> np.ndarray:
    """Zero-padded quadrant (qi, qj) of every matrix in the stack."""
    rows, cols = stack.shape[1], stack.shape[2]
    rs, cs = qi * r1, qj * c1
    re, ce = min(rows, rs + r1), min(cols, cs + c1)
    if re - rs == r1 and ce - cs == c1:
        return stack[:, rs:re, cs:ce]
    out[:] = 0.0
    out[:, :re - rs, :ce - cs] = stack[:, rs:re, cs:ce]
    return out


def matmul_strassen(a: np.ndarray, b: np.ndarray,
                    scratch: np.ndarray | None = None) -> np.ndarray:
    """Strassen product; recurses exactly while the cutoff rule holds.

    The 7-product recursion tree is evaluated level-synchronously: each
    level expands a stack of operand pairs (odd extents zero-padded to
    even), the leaf level multiplies the whole stack at once, and the
    combine sweep folds product stacks back up.  Leaves use matmul_direct.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot multiply {a.shape} by {b.shape}")
    dims = _strassen_level_dims(MatDims(a.shape[0], a.shape[1], b.shape[1]))
    depth = len(dims) - 1
    if depth == 0:
        return matmul_direct(a, b)

    a = a.astype(np.float32, copy=False)
    b = b.astype(np.float32, copy=False)
    arena = Arena(scratch)
    stacks_a = [a[None]]
    stacks_b = [b[None]]
    prods = [None]
    for lvl in range(1, depth + 1):
        n, k, m = dims[lvl]
        count = 7 ** lvl
        stacks_a.append(arena.take((count, n, k)))
        stacks_b.append(arena.take((count, k, m)))
        prods.append(arena.take((count, n, m)))

    # down sweep: expand operand combinations level by level
    for lvl in range(depth):
        n1, k1, m1 = dims[lvl + 1]
        cur_a, cur_b = stacks_a[lvl], stacks_b[lvl]
        nxt_a, nxt_b = stacks_a[lvl + 1], stacks_b[lvl + 1]
        batch = cur_a.shape[0]
        qa = np.empty((batch, n1, k1), dtype=np.float32)
        qb = np.empty((batch, n1, k1), dtype=np.float32)
        qc = np.empty((batch, k1, m1), dtype=np.float32)
        qd = np.empty((batch, k1, m1), dtype=np.float32)

        def quad_a(i, j, buf):
            return _quad(cur_a, i, j, n1, k1, buf)

        def quad_b(i, j, buf):
            return _quad(cur_b, i, j, k1, m1, buf)

        def seg(stack, idx):
            return stack[idx * batch:(idx + 1) * batch]

        np.add(quad_a(0, 0, qa), quad_a(1, 1, qb), out=seg(nxt_a, 0))
        np.add(quad_a(1, 0, qa), quad_a(1, 1, qb), out=seg(nxt_a, 1))
        seg(nxt_a, 2)[:] = quad_a(0, 0, qa)
        seg(nxt_a, 3)[:] = quad_a(1, 1, qa)
        np.add(quad_a(0, 0, qa), quad_a(0, 1, qb), out=seg(nxt_a, 4))
        np.subtract(quad_a(1, 0, qa), quad_a(0, 0, qb), out=seg(nxt_a, 5))
        np.subtract(quad_a(0, 1, qa), quad_a(1, 1, qb), out=seg(nxt_a, 6))

        np.add(quad_b(0, 0, qc), quad_b(1, 1, qd), out=seg(nxt_b, 0))
        seg(nxt_b, 1)[:] = quad_b(0, 0, qc)
        np.subtract(quad_b(0, 1, qc), quad_b(1, 1, qd), out=seg(nxt_b, 2))
        np.subtract(quad_b(1, 0, qc), quad_b(0, 0, qd), out=seg(nxt_b, 3))
        seg(nxt_b, 4)[:] = quad_b(1, 1, qc)
        np.add(quad_b(0, 0, qc), quad_b(0, 1, qd), out=seg(nxt_b, 5))
        np.add(quad_b(1, 0, qc), quad_b(1, 1, qd), out=seg(nxt_b, 6))

    # leaf products for the whole deepest stack at once
    np.matmul(stacks_a[depth], stacks_b[depth], out=prods[depth])

    # up sweep: fold 7 child products into each parent product
    for lvl in range(depth, 0, -1):
        n1, k1, m1 = dims[lvl]
        n0, _, m0 = dims[lvl - 1]
        child = prods[lvl]
        batch = child.shape[0] // 7
        m1_, m2_, m3_, m4_, m5_, m6_, m7_ = (
            child[i * batch:(i + 1) * batch] for i in range(7)
        )
        if lvl > 1:
            parent = prods[lvl - 1]
        else:
            parent = np.empty((1, n0, m0), dtype=np.float32)
        tl = m1_ + m4_ - m5_ + m7_
        tr = m3_ + m5_
        bl = m2_ + m4_
        br = m1_ - m2_ + m3_ + m6_
        parent[:, :n1, :m1] = tl[:, :, :]
        parent[:, :n1, m1:] = tr[:, :, :m0 - m1]
        parent[:, n1:, :m1] = bl[:, :n0 - n1, :]
        parent[:, n1:, m1:] = br[:, :n0 - n1, :m0 - m1]
    return np.ascontiguousarray(parent[0])


def _pack_weight_columns(w: np.ndarray, out_c: int, in_c: int) -> np.ndarray:
    """[out_c, in_c, kh, kw] -> [kh*kw, ceil(in_c/4)*4, ceil(out_c/4)*4]."""
    kh, kw = w.shape[2], w.shape[3]
    ibm, obm = channel_blocks(in_c), channel_blocks(out_c)
    packed = np.zeros((kh * kw, ibm * LANES, obm * LANES), dtype=np.float32)
    packed[:, :in_c, :out_c] = (
        w.astype(np.float32).transpose(2, 3, 1, 0).reshape(kh * kw, in_c, out_c)
    )
    return packed


def _padded_bias(bias: np.ndarray | None, out_c: int) -> np.ndarray | None:
    if bias is None:
        return None
    full = np.zeros(channel_blocks(out_c) * LANES, dtype=np.float32)
    full[:out_c] = bias.astype(np.float32).reshape(-1)
    return full


def conv_sliding(x: Tensor, w: np.ndarray, p: ConvParams, threads: int = 1,
                 bias: np.ndarray | None = None) -> Tensor:
    """Sliding-window convolution over NC4HW4 input.

    y[o, i, j] = sum_c sum_{u,v} w[o, c, u, v] * x[c, i*s+u-pad, j*s+v-pad]
    with out-of-bounds input reads as zero, then bias and optional ReLU.
    Output pixels iterate outermost and 4-channel lanes innermost.
    """
    if x.layout is not Layout.NC4HW4:
        raise ShapeMismatchError("conv_sliding expects NC4HW4 input")
    n, c, h, wd = x.shape
    if c != p.in_c:
        raise ShapeMismatchError(f"input channels {c} != params in_c {p.in_c}")
    if w.shape != (p.out_c, p.in_c // p.group, p.kh, p.kw):
        raise ShapeMismatchError(
            f"weight shape {w.shape} != "
            f"{(p.out_c, p.in_c // p.group, p.kh, p.kw)}"
        )
    oh, ow = p.out_size(h, wd)
    y = zeros((n, p.out_c, oh, ow), Layout.NC4HW4)
    if y.data.size == 0:
        return y
    if x.data.size == 0:
        # zero input channels: output is bias (then ReLU) everywhere
        bias_full = _padded_bias(bias, p.out_c)
        if bias_full is not None:
            y.data += bias_full.reshape(1, -1, 1, 1, LANES)[:, : y.data.shape[1]]
        if p.relu:
            np.maximum(y.data, 0.0, out=y.data)
        return y

    if p.group == 1:
        _conv_dense(x, w, p, threads, bias, y, oh, ow)
    elif p.group == p.in_c and p.group == p.out_c:
        _conv_depthwise(x, w, p, threads, bias, y, oh, ow)
    else:
        _conv_grouped(x, w, p, threads, bias, y, oh, ow)
    return y


def _conv_dense(x: Tensor, w: np.ndarray, p: ConvParams, threads: int,
                bias: np.ndarray | None, y: Tensor, oh: int, ow: int) -> None:
    n, _, h, wd = x.shape
    ibm = x.data.shape[1]
    cpad = ibm * LANES
    hp, wp = h + 2 * p.pad_h, wd + 2 * p.pad_w
    xp = np.zeros((n, hp, wp, cpad), dtype=np.float32)
    xp[:, p.pad_h:p.pad_h + h, p.pad_w:p.pad_w + wd] = (
        x.data.transpose(0, 2, 3, 1, 4).reshape(n, h, wd, cpad)
    )
    m = n * oh * ow
    windows = []
    for u in range(p.kh):
        for v in range(p.kw):
            win = xp[:, u:u + p.stride_h * oh:p.stride_h,
                     v:v + p.stride_w * ow:p.stride_w, :]
            windows.append(np.ascontiguousarray(win).reshape(m, cpad))
    wmat = _pack_weight_columns(w, p.out_c, p.in_c)
    bias_full = _padded_bias(bias, p.out_c)
    obm = y.data.shape[1]

    def block_task(ob):
        def run():
            acc = windows[0] @ wmat[0, :, ob * LANES:(ob + 1) * LANES]
            for idx in range(1, len(windows)):
                acc += windows[idx] @ wmat[idx, :, ob * LANES:(ob + 1) * LANES]
            if bias_full is not None:
                acc += bias_full[ob * LANES:(ob + 1) * LANES]
            if p.relu:
                np.maximum(acc, 0.0, out=acc)
            y.data[:, ob] = acc.reshape(n, oh, ow, LANES)
        return run

    _run_chunks([block_task(ob) for ob in range(obm)], threads)


def _conv_depthwise(x: Tensor, w: np.ndarray, p: ConvParams, threads: int,
                    bias: np.ndarray | None, y: Tensor, oh: int,
                    ow: int) -> None:
    n, c, h, wd = x.shape
    ibm = x.data.shape[1]
    hp, wp = h + 2 * p.pad_h, wd + 2 * p.pad_w
    xp = np.zeros((n, ibm, hp, wp, LANES), dtype=np.float32)
    xp[:, :, p.pad_h:p.pad_h + h, p.pad_w:p.pad_w + wd] = x.data
    wlanes = np.zeros((ibm, p.kh, p.kw, LANES), dtype=np.float32)
    flat = w.astype(np.float32).reshape(c, p.kh, p.kw)
    for ch in range(c):
        wlanes[ch // LANES, :, :, ch % LANES] = flat[ch]
    bias_full = _padded_bias(bias, p.out_c)

    def block_task(blk):
        def run():
            acc = np.zeros((n, oh, ow, LANES), dtype=np.float32)
            for u in range(p.kh):
                for v in range(p.kw):
                    win = xp[:, blk, u:u + p.stride_h * oh:p.stride_h,
                             v:v + p.stride_w * ow:p.stride_w, :]
                    acc += win * wlanes[blk, u, v]
            if bias_full is not None:
                acc += bias_full[blk * LANES:(blk + 1) * LANES]
            if p.relu:
                np.maximum(acc, 0.0, out=acc)
            y.data[:, blk] = acc
        return run

    _run_chunks([block_task(blk) for blk in range(ibm)], threads)


def _conv_grouped(x: Tensor, w: np.ndarray, p: ConvParams, threads: int,
                  bias: np.ndarray | None, y: Tensor, oh: int,
                  ow: int) -> None:
    # uncommon path: run each group densely over NCHW channel slices
    from .tensor import pack_nc4hw4, unpack_nc4hw4, from_nchw

    n, c, h, wd = x.shape
    icg, ocg = p.in_c // p.group, p.out_c // p.group
    x_nchw = unpack_nc4hw4(x)
    out = np.zeros((n, p.out_c, oh, ow), dtype=np.float32)
    sub_p = ConvParams(p.kh, p.kw, p.stride_h, p.stride_w, p.pad_h, p.pad_w,
                       icg, ocg, 1, False)
    for g in range(p.group):
        xg = pack_nc4hw4(from_nchw(x_nchw.data[:, g * icg:(g + 1) * icg]))
        yg = conv_sliding(xg, w[g * ocg:(g + 1) * ocg], sub_p, threads)
        out[:, g * ocg:(g + 1) * ocg] = unpack_nc4hw4(yg).data
    if bias is not None:
        out += bias.astype(np.float32).reshape(1, p.out_c, 1, 1)
    if p.relu:
        np.maximum(out, 0.0, out=out)
    y.data[:] = pack_nc4hw4(from_nchw(out)).data
