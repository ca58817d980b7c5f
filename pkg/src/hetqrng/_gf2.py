"""GF(2) Toeplitz matrix-vector products on packed 64-bit words.

With ``T[j, i] = seed[i - j + n - 1]`` (seed length ``L = m + n - 1``) the
product ``y = T x`` is a slice of a polynomial product over GF(2): with the
reversed seed ``R[t] = seed[L - 1 - t]`` and ``X(z) = sum x_i z^i``,
``y_j`` is coefficient ``m - 1 + j`` of ``R(z) X(z)``. Bits are packed
LSB-first, so word ``w`` holds coefficients ``64w .. 64w + 63`` and the
product is a sum of 64x64 carry-less multiplies.
"""

from __future__ import annotations

import numba as nb
import numpy as np
from llvmlite import binding as llvm
from llvmlite import ir
from numba import types
from numba.core import cgutils
from numba.core.extending import intrinsic


def _host_has_pclmul() -> bool:
    try:
        feats = llvm.get_host_cpu_features()
    except Exception:
        return False
    return bool(feats.get("pclmul", False))


HAVE_PCLMUL = _host_has_pclmul()


@intrinsic
def _clmul_hw(typingctx, a, b):
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i64 = ir.IntType(64)
        i32 = ir.IntType(32)
        vty = ir.VectorType(i64, 2)
        zero = ir.Constant(i64, 0)
        va = builder.insert_element(ir.Constant(vty, None), args[0], ir.Constant(i32, 0))
        va = builder.insert_element(va, zero, ir.Constant(i32, 1))
        vb = builder.insert_element(ir.Constant(vty, None), args[1], ir.Constant(i32, 0))
        vb = builder.insert_element(vb, zero, ir.Constant(i32, 1))
        fnty = ir.FunctionType(vty, [vty, vty, ir.IntType(8)])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.x86.pclmulqdq")
        r = builder.call(fn, [va, vb, ir.Constant(ir.IntType(8), 0)])
        lo = builder.extract_element(r, ir.Constant(i32, 0))
        hi = builder.extract_element(r, ir.Constant(i32, 1))
        return context.make_tuple(builder, signature.return_type, [lo, hi])

    return sig, codegen


@nb.njit(inline="always")
def _clmul_sw(a, b):
    lo = np.uint64(0)
    hi = np.uint64(0)
    one = np.uint64(1)
    for i in range(64):
        if (b >> np.uint64(i)) & one:
            lo ^= a << np.uint64(i)
            if i:
                hi ^= a >> np.uint64(64 - i)
    return lo, hi


def _make_kernel(clmul):
    @nb.njit(boundscheck=False, nogil=True)
    def kernel(rw, xw, m, n, out):
        nblk, nxw = xw.shape
        t0 = (m - 1) >> 6
        t1 = (m - 1 + n - 1) >> 6
        s = (m - 1) & 63
        nout = (n + 63) >> 6
        nrw = rw.shape[0]
        z = np.uint64(0)
        tail = n & 63
        mask = (np.uint64(1) << np.uint64(tail)) - np.uint64(1) if tail else ~z
        prod = np.zeros(t1 - t0 + 3, dtype=np.uint64)
        for bl in range(nblk):
            x = xw[bl]
            # high halves of word t0 - 1 carry into the first needed word
            carry = z
            if t0 > 0:
                tp = t0 - 1
                for b in range(max(0, tp - nrw + 1), min(nxw, tp + 1)):
                    carry ^= clmul(rw[tp - b], x[b])[1]
            # word t of R*X: low halves of pairs a+b=t, high halves of a+b=t-1
            for t in range(t0, t1 + 2):
                c0 = carry
                c1 = z
                n0 = z
                n1 = z
                blo = max(0, t - nrw + 1)
                bhi = min(nxw, t + 1)
                b = blo
                while b + 1 < bhi:
                    lo, hi = clmul(rw[t - b], x[b])
                    lo2, hi2 = clmul(rw[t - b - 1], x[b + 1])
                    c0 ^= lo
                    n0 ^= hi
                    c1 ^= lo2
                    n1 ^= hi2
                    b += 2
                if b < bhi:
                    lo, hi = clmul(rw[t - b], x[b])
                    c0 ^= lo
                    n0 ^= hi
                prod[t - t0] = c0 ^ c1
                carry = n0 ^ n1
            prod[t1 - t0 + 2] = carry
            for k in range(nout):
                if s == 0:
                    w = prod[k]
                else:
                    w = (prod[k] >> np.uint64(s)) | (prod[k + 1] << np.uint64(64 - s))
                out[bl, k] = w
            out[bl, nout - 1] &= mask
        return out

    return kernel


_kernel_sw = _make_kernel(_clmul_sw)
_kernel_hw = _make_kernel(_clmul_hw) if HAVE_PCLMUL else None


def words_for(bits: int) -> int:
    return (bits + 63) >> 6


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 array (last axis) LSB-first into uint64 words, zero padded."""
    bits = np.asarray(bits, dtype=np.uint8)
    nbits = bits.shape[-1]
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = words_for(nbits) * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate([packed, np.zeros(packed.shape[:-1] + (pad,), np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view(np.uint64)


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits` for the first ``nbits`` bits."""
    w = np.ascontiguousarray(words, dtype=np.uint64)
    return np.unpackbits(w.view(np.uint8), axis=-1, bitorder="little")[..., :nbits]


def prepare_seed(seed_bits: np.ndarray) -> np.ndarray:
    """Reversed seed packed into words, with one spare zero word."""
    r = np.asarray(seed_bits, dtype=np.uint8)[::-1]
    w = pack_bits(r)
    return np.concatenate([w, np.zeros(1, np.uint64)])


def toeplitz_multiply(rw: np.ndarray, xw: np.ndarray, m: int, n: int,
                      software: bool = False) -> np.ndarray:
    """``T x`` for each row of packed inputs ``xw`` (shape ``(blocks, words_for(m))``).

    Input bits at positions ``>= m`` must be zero.
    """
    xw = np.ascontiguousarray(xw, dtype=np.uint64)
    if xw.ndim != 2 or xw.shape[1] != words_for(m):
        raise ValueError(f"expected packed input of shape (blocks, {words_for(m)})")
    out = np.empty((xw.shape[0], words_for(n)), dtype=np.uint64)
    if xw.shape[0] == 0:
        return out
    kernel = _kernel_sw if (software or _kernel_hw is None) else _kernel_hw
    return kernel(rw, xw, m, n, out)


def toeplitz_matrix(seed_bits: np.ndarray, n: int, m: int) -> np.ndarray:
    """Dense ``n x m`` 0/1 matrix with ``T[j, i] = seed[i - j + n - 1]``."""
    seed = np.asarray(seed_bits, dtype=np.uint8)
    if seed.size != m + n - 1:
        raise ValueError("seed length must be m + n - 1")
    j = np.arange(n)[:, None]
    i = np.arange(m)[None, :]
    return seed[i - j + n - 1]


def naive_multiply(seed_bits: np.ndarray, x_bits: np.ndarray, n: int, m: int) -> np.ndarray:
    """Reference dense product over GF(2), one block of 0/1 input bits."""
    t = toeplitz_matrix(seed_bits, n, m).astype(np.int64)
    return ((t @ np.asarray(x_bits, dtype=np.int64)) & 1).astype(np.uint8)
