"""Runtime-generated Winograd convolution of arbitrary tile/kernel size.

The transform triple (A, B, G) for an n x n output tile and k x k kernel is
built on demand from polynomial interpolation over the points
{0, f, -f, 2f, -2f, ...} plus the point at infinity, in exact rational
arithmetic, then rounded once to float.  Convention: G and A hold plain
point-power evaluations, the interpolation inverse lands in B, and each
column of B is scaled integral with the factor folded back into the
matching row of G.  For (n=2, k=3, f=1) this reproduces the classical
matrices up to per-row sign.

The convolution pipeline is: tile the output, transform input patches
(Bt X B), reduce over channels as one batched matrix multiplication in the
lane-packed layout, transform back (At Y A), and scatter tiles.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeMismatchError, UnsupportedSizeError
from .kernels import LANES, ConvParams, _padded_bias, _run_chunks
from .tensor import Layout, Tensor, channel_blocks, zeros

MAX_ALPHA = 10  # accuracy guard: larger transforms are routed to sliding window
TILE_CANDIDATES = (1, 2, 4, 6)
DEFAULT_SPACING = 0.5


@dataclass(frozen=True)
class WinogradTransform:
    """Transform triple for n x n output tiles of a k x k kernel.

    A: (alpha, n) output transform, B: (alpha, alpha) input transform,
    G: (alpha, k) kernel transform, with alpha = n + k - 1.  Satisfies
    At [(G w Gt) o (Bt x B)] A == valid convolution of x by w.
    """

    n: int
    k: int
    alpha: int
    f: float
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray


@dataclass(frozen=True)
class TileSchedule:
    """Output tiling of one convolution: T tiles are batched per step."""

    n_hat: int
    T: int
    tiles: tuple[tuple[int, int, int], ...]  # (image, tile row, tile col)


_cache_lock = threading.Lock()
_transform_cache: dict[tuple[int, int, str], WinogradTransform] = {}


def _interpolation_points(count: int, f: Fraction) -> list[Fraction]:
    pts = [Fraction(0)]
    i = 1
    while len(pts) < count:
        pts.append(i * f)
        if len(pts) < count:
            pts.append(-i * f)
        i += 1
    return pts[:count]


def _invert_rational(m: list[list[Fraction]]) -> list[list[Fraction]]:
    n = len(m)
    aug = [row[:] + [Fraction(int(i == j)) for j in range(n)]
           for i, row in enumerate(m)]
    for col in range(n):
        piv = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[piv] = aug[piv], aug[col]
        scale = Fraction(1) / aug[col][col]
        aug[col] = [v * scale for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                factor = aug[r][col]
                aug[r] = [a - factor * b for a, b in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def generate_transforms(n: int, k: int, f: float = DEFAULT_SPACING) -> WinogradTransform:
    """Build (A, B, G) for an n-tile, k-kernel convolution, memoized on (n, k, f)."""
    if n < 1 or k < 1:
        raise UnsupportedSizeError(f"tile {n} and kernel {k} must be >= 1")
    if not f > 0:
        raise UnsupportedSizeError(f"point spacing f={f} must be positive")
    alpha = n + k - 1
    if alpha > MAX_ALPHA:
        raise UnsupportedSizeError(
            f"n={n}, k={k} needs alpha={alpha} > {MAX_ALPHA} interpolation points"
        )
    key = (n, k, repr(float(f)))
    with _cache_lock:
        hit = _transform_cache.get(key)
    if hit is not None:
        return hit

    if alpha == 1:
        one = np.ones((1, 1), dtype=np.float64)
        t = WinogradTransform(n, k, 1, float(f), one, one.copy(), one.copy())
    else:
        fr = Fraction(repr(float(f)))
        pts = _interpolation_points(alpha - 1, fr)

        def power_rows(width: int) -> list[list[Fraction]]:
            rows = [[p ** j for j in range(width)] for p in pts]
            rows.append([Fraction(int(j == width - 1)) for j in range(width)])
            return rows

        a_rows = power_rows(n)
        g_rows = power_rows(k)
        b_cols = _invert_rational(power_rows(alpha))
        # scale each column of B integral; fold the factor into G's row
        for r in range(alpha):
            q = 1
            for i in range(alpha):
                q = math.lcm(q, b_cols[i][r].denominator)
            if q != 1:
                for i in range(alpha):
                    b_cols[i][r] *= q
                g_rows[r] = [g / q for g in g_rows[r]]

        def to_float(rows) -> np.ndarray:
            return np.array([[float(v) for v in row] for row in rows],
                            dtype=np.float64)

        t = WinogradTransform(n, k, alpha, float(f), to_float(a_rows),
                              to_float(b_cols), to_float(g_rows))
    with _cache_lock:
        _transform_cache.setdefault(key, t)
    return t


def tile_arithmetic_cost(n: int, k: int, in_c: int, out_c: int) -> int:
    """Multiply count of one n x n output tile at the given channel widths."""
    alpha = n + k - 1
    return (2 * in_c * alpha ** 3
            + in_c * out_c * alpha ** 2
            + n * alpha * (2 * n + k - 1))


def choose_tile(k: int, in_c: int, out_c: int, out_w: int, out_h: int) -> int:
    """Output tile size minimizing per-pixel cost; ties go to the smaller tile.

    The raw tile cost grows with n, so candidates are compared per output
    element (cost / n^2); minimizing the raw cost would always pick n = 1
    and disable the fast path entirely.
    """
    if k <= 1:
        raise ShapeMismatchError("choose_tile applies to kernels with k > 1")
    best_n, best_cost = 1, None
    for n in TILE_CANDIDATES:
        if n + k - 1 > MAX_ALPHA:
            continue
        per_pixel = Fraction(tile_arithmetic_cost(n, k, in_c, out_c), n * n)
        if best_cost is None or per_pixel < best_cost:
            best_n, best_cost = n, per_pixel
    return best_n


def make_tile_schedule(n_hat: int, batch: int, out_h: int, out_w: int) -> TileSchedule:
    """Enumerate output tiles; T = floor(out_w*out_h / n_hat^2) per batch."""
    tiles_h = -(-out_h // n_hat)
    tiles_w = -(-out_w // n_hat)
    coords = tuple(
        (img, th, tw)
        for img in range(batch)
        for th in range(tiles_h)
        for tw in range(tiles_w)
    )
    return TileSchedule(n_hat=n_hat, T=(out_w * out_h) // (n_hat * n_hat),
                        tiles=coords)


def winograd_supported(p: ConvParams) -> bool:
    """Square kernel, stride 1, ungrouped, 2 <= k, and the smallest tile fits."""
    return (p.kh == p.kw and p.kh >= 2 and p.stride_h == 1 and p.stride_w == 1
            and p.group == 1 and p.kh + 2 - 1 <= MAX_ALPHA)


def weight_transform(w: np.ndarray, t: WinogradTransform) -> np.ndarray:
    """G w Gt per channel pair, packed as [alpha^2, o_c blocks, i_c blocks, 4, 4]."""
    out_c, in_c = w.shape[0], w.shape[1]
    if w.shape[2] != t.k or w.shape[3] != t.k:
        raise ShapeMismatchError(f"weight spatial {w.shape[2:]} != kernel {t.k}")
    g = t.G.astype(np.float32)
    u = np.einsum("ar,ocrs,bs->ocab", g, w.astype(np.float32), g,
                  optimize=True)  # [out_c, in_c, alpha, alpha]
    obm, ibm = channel_blocks(out_c), channel_blocks(in_c)
    packed = np.zeros((t.alpha * t.alpha, obm, ibm, LANES, LANES),
                      dtype=np.float32)
    flat = u.transpose(2, 3, 0, 1).reshape(t.alpha * t.alpha, out_c, in_c)
    for ob in range(obm):
        o0, o1 = ob * LANES, min((ob + 1) * LANES, out_c)
        for ib in range(ibm):
            i0, i1 = ib * LANES, min((ib + 1) * LANES, in_c)
            packed[:, ob, ib, :o1 - o0, :i1 - i0] = flat[:, o0:o1, i0:i1]
    return packed


class WeightCache:
    """Pre-transformed kernel store with hit/recompute instrumentation."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}
        self.hits = 0
        self.recomputes = 0
        self._lock = threading.Lock()

    def put(self, key: str, value: np.ndarray) -> None:
        with self._lock:
            self._store[key] = value

    def get(self, key: str, compute=None) -> np.ndarray:
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
        if compute is None:
            raise KeyError(key)
        value = compute()
        with self._lock:
            self.recomputes += 1
            self._store[key] = value
        return value

    def reset_counters(self) -> None:
        with self._lock:
            self.hits = 0
            self.recomputes = 0


def conv_winograd(x: Tensor, w: np.ndarray, p: ConvParams,
                  t: WinogradTransform, threads: int = 1,
                  bias: np.ndarray | None = None,
                  transformed: np.ndarray | None = None) -> Tensor:
    """Blocked Winograd convolution over NC4HW4 input.

    ``transformed`` may carry a cached weight_transform result; otherwise the
    kernel transform runs inline.  Tiles are processed in batches of T from
    the tile schedule; every tile writes a disjoint output region and the
    batch partition is fixed by the schedule alone, so results are bitwise
    independent of thread count.  Changing the partition itself re-blocks
    the channel reduction inside the BLAS call and may flip last-ulp bits;
    outputs then agree to float32 tolerance rather than bitwise.
    """
    if x.layout is not Layout.NC4HW4:
        raise ShapeMismatchError("conv_winograd expects NC4HW4 input")
    if p.kh != t.k or p.kw != t.k:
        raise ShapeMismatchError(f"params kernel {(p.kh, p.kw)} != transform k {t.k}")
    if not winograd_supported(p):
        raise ShapeMismatchError("convolution not eligible for the winograd path")
    n_img, c, h, wd = x.shape
    if c != p.in_c:
        raise ShapeMismatchError(f"input channels {c} != params in_c {p.in_c}")
    oh, ow = p.out_size(h, wd)
    y = zeros((n_img, p.out_c, oh, ow), Layout.NC4HW4)
    if y.data.size == 0:
        return y
    if x.data.size == 0:
        bias_full = _padded_bias(bias, p.out_c)
        if bias_full is not None:
            y.data += bias_full.reshape(1, -1, 1, 1, LANES)
        if p.relu:
            np.maximum(y.data, 0.0, out=y.data)
        return y

    nh = t.n
    alpha = t.alpha
    sched = make_tile_schedule(nh, n_img, oh, ow)
    tiles_h = -(-oh // nh)
    tiles_w = -(-ow // nh)
    if transformed is None:
        transformed = weight_transform(w, t)
    obm, ibm = transformed.shape[1], transformed.shape[2]
    umat = np.ascontiguousarray(
        transformed.transpose(0, 1, 3, 2, 4).reshape(alpha * alpha,
                                                     obm * LANES, ibm * LANES)
    )
    bt = np.ascontiguousarray(t.B.T.astype(np.float32))
    bmat = t.B.astype(np.float32)
    at = np.ascontiguousarray(t.A.T.astype(np.float32))
    amat = t.A.astype(np.float32)

    # pad input so every alpha x alpha patch is in bounds
    hp = (tiles_h - 1) * nh + alpha
    wp = (tiles_w - 1) * nh + alpha
    xp = np.zeros((n_img, ibm, hp, wp, LANES), dtype=np.float32)
    xp[:, :, p.pad_h:p.pad_h + h, p.pad_w:p.pad_w + wd] = x.data
    # all patches: [n, ibm, tiles_h, tiles_w, lanes, alpha, alpha]
    patches = np.lib.stride_tricks.sliding_window_view(
        xp, (alpha, alpha), axis=(2, 3)
    )[:, :, ::nh, ::nh]

    ybuf = np.zeros((n_img, tiles_h * nh, tiles_w * nh, obm * LANES),
                    dtype=np.float32)
    batch_sz = max(sched.T, 1)
    batches = [sched.tiles[i:i + batch_sz]
               for i in range(0, len(sched.tiles), batch_sz)]

    def batch_task(batch):
        def run():
            bt_n = len(batch)
            block = np.empty((bt_n, ibm * LANES, alpha, alpha), dtype=np.float32)
            for idx, (img, th, tw) in enumerate(batch):
                # axes (block, lane, alpha, alpha): lane-major channel order
                block[idx] = patches[img, :, th, tw].reshape(
                    ibm * LANES, alpha, alpha
                )
            v = bt @ block @ bmat  # [bt_n, C, alpha, alpha]
            v = np.ascontiguousarray(
                v.transpose(2, 3, 1, 0).reshape(alpha * alpha, ibm * LANES, bt_n)
            )
            m = np.matmul(umat, v)  # [alpha^2, out lanes, bt_n]
            m = np.ascontiguousarray(
                m.reshape(alpha, alpha, obm * LANES, bt_n).transpose(3, 2, 0, 1)
            )
            out_tiles = at @ m @ amat  # [bt_n, out lanes, nh, nh]
            for idx, (img, th, tw) in enumerate(batch):
                ybuf[img, th * nh:(th + 1) * nh, tw * nh:(tw + 1) * nh, :] = (
                    out_tiles[idx].transpose(1, 2, 0)
                )
        return run

    _run_chunks([batch_task(b) for b in batches], threads)

    cropped = ybuf[:, :oh, :ow, :]
    bias_full = _padded_bias(bias, p.out_c)
    if bias_full is not None:
        cropped = cropped + bias_full
    if p.relu:
        cropped = np.maximum(cropped, 0.0)
    y.data[:] = cropped.reshape(n_img, oh, ow, obm, LANES).transpose(0, 3, 1, 2, 4)
    # pad output lanes stay zero even after bias
    if p.out_c % LANES:
        y.data[:, -1, :, :, p.out_c % LANES:] = 0.0
    return y
