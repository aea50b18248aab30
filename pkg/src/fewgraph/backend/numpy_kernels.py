"""Vectorised numpy implementations of the hot kernels.

These are the always-available fallback for the compiled extension. The 3x3
convolution is expressed as nine shifted slice products so the heavy lifting
stays inside BLAS-backed tensordot calls; max pooling reshapes each 2x2
window onto a trailing axis, which makes the row-major first-maximum tie rule
a plain argmax.
"""

import numpy as np


def _pad1(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    out[:, :, 1 : h + 1, 1 : w + 1] = x
    return out


def conv3x3_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    f = k.shape[0]
    xp = _pad1(x)
    out = np.zeros((b, f, h, w), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            # (f,c) x (b,c,h,w) -> (f,b,h,w)
            t = np.tensordot(k[:, :, di, dj], xp[:, :, di : di + h, dj : dj + w], axes=(1, 1))
            out += t.transpose(1, 0, 2, 3)
    return out


def conv3x3_grad_input(gout: np.ndarray, k: np.ndarray) -> np.ndarray:
    b, f, h, w = gout.shape
    c = k.shape[1]
    gxp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            t = np.tensordot(k[:, :, di, dj], gout, axes=(0, 1))  # (c,b,h,w)
            gxp[:, :, di : di + h, dj : dj + w] += t.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gxp[:, :, 1 : h + 1, 1 : w + 1])


def conv3x3_grad_kernel(gout: np.ndarray, x: np.ndarray) -> np.ndarray:
    b, f, h, w = gout.shape
    c = x.shape[1]
    xp = _pad1(x)
    gk = np.zeros((f, c, 3, 3), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            # sum over b,h,w of gout[b,f,:,:] * xp[b,c,:,:]
            gk[:, :, di, dj] = np.tensordot(
                gout, xp[:, :, di : di + h, dj : dj + w], axes=([0, 2, 3], [0, 2, 3])
            )
    return gk


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    arg = win.argmax(axis=-1).astype(np.uint8)  # first max wins: row-major window order
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(gout: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c, h2, w2 = gout.shape
    gwin = np.zeros((b, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(gwin, arg[..., None].astype(np.intp), gout[..., None], axis=-1)
    gx = np.zeros((b, c, h, w), dtype=np.float64)
    gx[:, :, : 2 * h2, : 2 * w2] = (
        gwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    )
    return gx
