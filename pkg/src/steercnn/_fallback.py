"""Pure-numpy versions of the compiled kernels, same signatures and results."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, out):
    """(B, C, Hp, Wp) -> (C*kh*kw, B*Ho*Wo)."""
    B, C, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
    out.reshape(C, kh, kw, B, Ho, Wo)[...] = win.transpose(1, 4, 5, 0, 2, 3)


def col2im(cols, kh, kw, out):
    B, C, Hp, Wp = out.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    c6 = cols.reshape(C, kh, kw, B, Ho, Wo).transpose(3, 0, 1, 2, 4, 5)
    for a in range(kh):
        for d in range(kw):
            out[:, :, a:a + Ho, d:d + Wo] += c6[:, :, a, d]


def max_pool2_forward(x, out, arg):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg[...] = np.argmax(win, axis=-1)
    out[...] = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]


def max_pool2_backward(dout, arg, dx):
    B, C, Ho, Wo = dout.shape
    onehot = np.arange(4) == arg[..., None].astype(np.intp)
    contrib = onehot * dout[..., None]
    dx += contrib.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(dx.shape)
