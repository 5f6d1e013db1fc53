"""Hot numeric kernels: 2-D convolution forward and backward passes.

Two interchangeable implementations live here. The numba one JIT-compiles
plain loop nests; the numpy one lowers to im2col + BLAS. Selection happens
once at import time from the COATTSEG_BACKEND environment variable:

    COATTSEG_BACKEND=numba   require numba, fail if it is missing
    COATTSEG_BACKEND=numpy   force the pure-numpy path
    (unset)                  use numba when importable, else numpy

All kernels operate on already-padded inputs so that padding policy stays
in one place (the tensor layer). Both paths are sequential and
deterministic: repeated calls on identical inputs give identical bits.

Layouts: x is (H, W, Cin), kernels are (kh, kw, Cin, Cout), gradients
match the array they correspond to.
"""

import os

import numpy as np

from .errors import UsageError

_ENV_FLAG = "COATTSEG_BACKEND"


def _pick_backend() -> str:
    requested = os.environ.get(_ENV_FLAG, "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise UsageError(
            f"{_ENV_FLAG} must be 'numba' or 'numpy', got {requested!r}"
        )
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise UsageError(
                f"{_ENV_FLAG}=numba but numba is not installed"
            ) from None
        return "numpy"
    return "numba"


BACKEND = _pick_backend()


# ---------------------------------------------------------------------------
# numpy implementations (im2col + BLAS)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    hp, wp, cin = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((ho, wo, kh, kw, cin), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj, :] = xp[
                di : di + ho * stride : stride,
                dj : dj + wo * stride : stride,
                :,
            ]
    return cols


def conv2d_forward_numpy(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, cin, cout = k.shape
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[:2]
    out = cols.reshape(ho * wo, kh * kw * cin) @ k.reshape(kh * kw * cin, cout)
    return out.reshape(ho, wo, cout)


def conv2d_grad_kernel_numpy(
    g: np.ndarray, xp: np.ndarray, k_shape: tuple, stride: int
) -> np.ndarray:
    kh, kw, cin, cout = k_shape
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = g.shape[:2]
    dk = cols.reshape(ho * wo, kh * kw * cin).T @ g.reshape(ho * wo, cout)
    return dk.reshape(kh, kw, cin, cout)


def conv2d_grad_input_numpy(
    g: np.ndarray, k: np.ndarray, xp_shape: tuple, stride: int
) -> np.ndarray:
    kh, kw, cin, cout = k.shape
    ho, wo = g.shape[:2]
    dcols = g.reshape(ho * wo, cout) @ k.reshape(kh * kw * cin, cout).T
    dcols = dcols.reshape(ho, wo, kh, kw, cin)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for di in range(kh):
        for dj in range(kw):
            dxp[
                di : di + ho * stride : stride,
                dj : dj + wo * stride : stride,
                :,
            ] += dcols[:, :, di, dj, :]
    return dxp


# ---------------------------------------------------------------------------
# numba implementations (loop nests)
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _conv2d_forward_nb(xp, k, stride, out):
        ho, wo, cout = out.shape
        kh, kw, cin, _ = k.shape
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(cin):
                                acc += xp[i * stride + di, j * stride + dj, ci] * k[di, dj, ci, co]
                    out[i, j, co] = acc

    @njit(cache=True)
    def _conv2d_grad_kernel_nb(g, xp, stride, dk):
        kh, kw, cin, cout = dk.shape
        ho, wo, _ = g.shape
        for di in range(kh):
            for dj in range(kw):
                for ci in range(cin):
                    for co in range(cout):
                        acc = 0.0
                        for i in range(ho):
                            for j in range(wo):
                                acc += xp[i * stride + di, j * stride + dj, ci] * g[i, j, co]
                        dk[di, dj, ci, co] = acc

    @njit(cache=True)
    def _conv2d_grad_input_nb(g, k, stride, dxp):
        kh, kw, cin, cout = k.shape
        ho, wo, _ = g.shape
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc = 0.0
                            for co in range(cout):
                                acc += g[i, j, co] * k[di, dj, ci, co]
                            dxp[i * stride + di, j * stride + dj, ci] += acc

    def conv2d_forward_numba(xp, k, stride):
        kh, kw, _, cout = k.shape
        ho = (xp.shape[0] - kh) // stride + 1
        wo = (xp.shape[1] - kw) // stride + 1
        out = np.empty((ho, wo, cout), dtype=np.float64)
        _conv2d_forward_nb(xp, k, stride, out)
        return out

    def conv2d_grad_kernel_numba(g, xp, k_shape, stride):
        dk = np.empty(k_shape, dtype=np.float64)
        _conv2d_grad_kernel_nb(g, xp, stride, dk)
        return dk

    def conv2d_grad_input_numba(g, k, xp_shape, stride):
        dxp = np.zeros(xp_shape, dtype=np.float64)
        _conv2d_grad_input_nb(g, k, stride, dxp)
        return dxp

    conv2d_forward = conv2d_forward_numba
    conv2d_grad_kernel = conv2d_grad_kernel_numba
    conv2d_grad_input = conv2d_grad_input_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_grad_kernel = conv2d_grad_kernel_numpy
    conv2d_grad_input = conv2d_grad_input_numpy
