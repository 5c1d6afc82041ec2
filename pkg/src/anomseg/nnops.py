"""Spatial neural-net ops on the autodiff engine: conv2d, its transpose,
and bilinear upsampling.

Convolution uses the cross-correlation convention (no kernel flip). Inputs
may be (C, H, W) or batched (B, C, H, W); results keep the input's rank.
The transposed convolution is the exact adjoint of conv2d for matched
geometry: <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, node


def _as_batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W) input, got {x.shape}")


def _zero_pad(xb: np.ndarray, pad: int) -> np.ndarray:
    b, c, h, w = xb.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=xb.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = xb
    return out


def _im2col(xb: np.ndarray, k: int, stride: int, pad: int):
    """(B,C,H,W) -> columns (B*Ho*Wo, C*k*k) plus output extents."""
    b, c, h, w = xb.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1 and pad == 0:
        return xb.transpose(0, 2, 3, 1).reshape(b * h * w, c), ho, wo
    if stride == k and pad == 0:
        # non-overlapping patches: a pure reshape, no windowing machinery
        cols = (xb.reshape(b, c, ho, k, wo, k).transpose(0, 2, 4, 1, 3, 5)
                .reshape(b * ho * wo, c * k * k))
        return cols, ho, wo
    if pad:
        xb = _zero_pad(xb, pad)
    win = np.lib.stride_tricks.sliding_window_view(xb, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,k,k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int):
    """Adjoint of _im2col: scatter-add columns back to (B,C,H,W)."""
    b, c, h, w = xshape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += cols6[:, :, :, :, i, j]
    if pad:
        out = out[:, :, pad:h + pad, pad:w + pad]
    return np.ascontiguousarray(out)


def _conv_forward(xb, wd, stride, pad):
    cout, cin, k, _ = wd.shape
    b = xb.shape[0]
    cols, ho, wo = _im2col(xb, k, stride, pad)
    out = cols @ wd.reshape(cout, cin * k * k).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)), cols, ho, wo


def _conv_dx(gout, wd, xshape, stride, pad, ho, wo):
    b = gout.shape[0]
    cout, cin, k, _ = wd.shape
    if stride == k and pad == 0:
        # non-overlapping patches scatter back as a pure reshape
        gcols = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout) @ wd.reshape(cout, cin * k * k)
        g6 = gcols.reshape(b, ho, wo, cin, k, k).transpose(0, 3, 1, 4, 2, 5)
        return np.ascontiguousarray(g6.reshape(xshape))
    if stride == 1 and pad <= k - 1:
        # scatter == correlation with the flipped kernel, one GEMM
        wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_forward(gout, wflip, 1, k - 1 - pad)[0]
    gcols = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout) @ wd.reshape(cout, cin * k * k)
    return _col2im(gcols, xshape, k, stride, pad, ho, wo)


def _conv_dw(gout, cols, wshape):
    cout = wshape[0]
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (g2.T @ cols).reshape(wshape)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlate x (C,H,W)|(B,C,H,W) with w (Cout,Cin,k,k); optional
    per-output-channel bias is fused in."""
    xb, squeeze = _as_batched(x)
    if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise ShapeError(f"expected square (Cout,Cin,k,k) kernel, got {w.shape}")
    k = w.shape[-1]
    if k % 2 == 0 and k != stride:
        raise ShapeError(f"even kernel size {k} only supported when kernel == stride (patching)")
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {xb.shape[1]} != kernel Cin {w.shape[1]}")
    h, wdt = xb.shape[2], xb.shape[3]
    if (h + 2 * pad - k) % stride or (wdt + 2 * pad - k) % stride:
        raise ShapeError(
            f"conv2d geometry not integral: input {h}x{wdt}, k={k}, stride={stride}, pad={pad}")
    if h + 2 * pad < k or wdt + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{wdt + 2 * pad}")

    data, cols, ho, wo = _conv_forward(xb, w.data, stride, pad)
    if bias is not None:
        data += bias.data.reshape(1, -1, 1, 1)
    xshape = xb.shape
    wd = w.data
    need_x, need_w = x.requires_grad, w.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward_rule(g):
        gb = g[None] if squeeze else g
        gx = _conv_dx(gb, wd, xshape, stride, pad, ho, wo) if need_x else None
        gw = _conv_dw(gb, cols, wd.shape) if need_w else None
        if gx is not None and squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gw
        gbias = gb.sum(axis=(0, 2, 3)) if need_b else None
        return gx, gw, gbias

    parents = (x, w) if bias is None else (x, w, bias)
    return node(data[0] if squeeze else data, parents, backward_rule)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Adjoint of conv2d. x (Co,H,W)|(B,Co,H,W), w (Co,Ci,k,k) -> Ci maps.

    Output extent is (H-1)*stride - 2*pad + k per spatial dim.
    """
    xb, squeeze = _as_batched(x)
    if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise ShapeError(f"expected square (Co,Ci,k,k) kernel, got {w.shape}")
    if xb.shape[1] != w.shape[0]:
        raise ShapeError(f"input channels {xb.shape[1]} != kernel Co {w.shape[0]}")
    k = w.shape[-1]
    b, co, h, wdt = xb.shape
    hout = (h - 1) * stride - 2 * pad + k
    wout = (wdt - 1) * stride - 2 * pad + k
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"conv_transpose2d geometry invalid: output {hout}x{wout}")
    ci = w.shape[1]
    wd = w.data

    data = _conv_dx(xb, wd, (b, ci, hout, wout), stride, pad, h, wdt)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    xshape = xb.shape
    need_x, need_w = x.requires_grad, w.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward_rule(g):
        gb = g[None] if squeeze else g
        gx = None
        gw = None
        if need_x or need_w:
            # transpose of transpose is the forward gather
            fwd, cols, _, _ = _conv_forward(gb, wd, stride, pad)
            if need_x:
                gx = fwd[0] if squeeze else fwd
            if need_w:
                gw = _conv_dw(xb, cols, wd.shape)
        if bias is None:
            return gx, gw
        gbias = gb.sum(axis=(0, 2, 3)) if need_b else None
        return gx, gw, gbias

    parents = (x, w) if bias is None else (x, w, bias)
    return node(data[0] if squeeze else data, parents, backward_rule)


def _interp_coords(n_in: int, n_out: int):
    """align_corners=False source indices/weights for 1-D linear resize."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    whi = pos - lo
    return lo, hi, 1.0 - whi, whi


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the trailing two axes with bilinear interpolation
    (align_corners=false convention)."""
    xd = x.data
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample needs >=2 dims, got {x.shape}")
    h, w = xd.shape[-2], xd.shape[-1]
    r0, r1, wr0, wr1 = _interp_coords(h, out_h)
    c0, c1, wc0, wc1 = _interp_coords(w, out_w)
    wr0 = wr0.astype(xd.dtype)[..., :, None]
    wr1 = wr1.astype(xd.dtype)[..., :, None]
    wc0 = wc0.astype(xd.dtype)[None, :]
    wc1 = wc1.astype(xd.dtype)[None, :]

    def gather(ri, ci):
        return xd[..., ri[:, None], ci[None, :]]

    data = (gather(r0, c0) * (wr0 * wc0) + gather(r0, c1) * (wr0 * wc1)
            + gather(r1, c0) * (wr1 * wc0) + gather(r1, c1) * (wr1 * wc1))
    in_shape = xd.shape

    def backward_rule(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        lead = gx.reshape(-1, h, w)
        gl = g.reshape(-1, out_h, out_w)
        for ri, ci, wgt in ((r0, c0, wr0 * wc0), (r0, c1, wr0 * wc1),
                            (r1, c0, wr1 * wc0), (r1, c1, wr1 * wc1)):
            np.add.at(lead, (slice(None), ri[:, None], ci[None, :]), gl * wgt)
        return (gx,)

    return node(data, (x,), backward_rule)
