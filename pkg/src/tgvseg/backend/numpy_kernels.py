"""Pure-numpy convolution kernels (im2col-equivalent).

Operates on already-padded inputs; padding and cropping live in the caller so
both backends share one contract:

    conv_forward_padded(xp, w, b)      -> out
    conv_backward_padded(xp, w, gout)  -> (dxp, dw, db)

xp: (n, c_in, hp, wp), w: (c_out, c_in, k, k), b: (c_out,),
out/gout: (n, c_out, hp-k+1, wp-k+1). All float64, C-contiguous.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_forward_padded(xp: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = w.shape[2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n,c,oh,ow,k,k)
    out = np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_backward_padded(xp: np.ndarray, w: np.ndarray, gout: np.ndarray):
    k = w.shape[2]
    db = gout.sum(axis=(0, 2, 3))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.einsum("nchwij,nohw->ocij", windows, gout, optimize=True)
    # Full correlation of the output gradient with the flipped kernel gives
    # the input gradient (stride 1 only, which is all the engine uses).
    gp = np.pad(gout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gwin = sliding_window_view(gp, (k, k), axis=(2, 3))  # (n,o,hp,wp,k,k)
    wflip = w[:, :, ::-1, ::-1]
    dxp = np.einsum("nohwij,ocij->nchw", gwin, wflip, optimize=True)
    return np.ascontiguousarray(dxp), np.ascontiguousarray(dw), db
