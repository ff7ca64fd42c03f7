"""Differentiable structured ops: convolution, pooling, upsampling, batch
norm and the segmentation loss.

Forward paths are vectorized numpy (gather + BLAS matmul); the matching
scalar-loop oracles live in the test suite and stay independent of this
file. Convolution uses cross-correlation semantics (no kernel flip).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, Tape, ShapeError, check_finite


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                     "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    def out_extent(self, in_extent: int, kernel: int) -> int:
        return (in_extent + 2 * self.padding - self.dilation * (kernel - 1) - 1) // self.stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec,
           tape: Tape | None = None) -> Tensor:
    """Direct 2-d cross-correlation with stride, zero padding and dilation.

    x: [N, Cin, H, W]; weight: [Cout, Cin, kh, kw]; bias: [Cout] or None.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [N,C,H,W], got {x.shape}")
    n, cin, h, w = x.shape
    if cin != spec.in_channels:
        raise ShapeError(f"conv2d: input channel dim is {cin}, spec.in_channels is "
                         f"{spec.in_channels} (dim 1 mismatch)")
    wshape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weight.shape != wshape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {wshape}")
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv2d: bias must be [{spec.out_channels}], got "
                             f"{None if bias is None else bias.shape}")
    elif bias is not None:
        raise ShapeError("conv2d: bias given but spec.has_bias is False")

    hout = spec.out_extent(h, spec.kernel_h)
    wout = spec.out_extent(w, spec.kernel_w)
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: non-positive output extent {hout}x{wout} for input "
                         f"{h}x{w} with {spec}")

    p, s, d = spec.padding, spec.stride, spec.dilation
    kh, kw = spec.kernel_h, spec.kernel_w
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    # Gather patches: rows[a, i] = a*d + i*s over kernel tap a and output row i.
    rows = np.arange(kh)[:, None] * d + np.arange(hout)[None, :] * s
    cols = np.arange(kw)[:, None] * d + np.arange(wout)[None, :] * s
    patches = xp[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    # patches: [N, Cin, kh, kw, Hout, Wout] -> columns for one big matmul.
    cols2 = patches.reshape(n, cin * kh * kw, hout * wout)
    w2 = weight.data.reshape(spec.out_channels, cin * kh * kw)
    out_data = np.matmul(w2, cols2).reshape(n, spec.out_channels, hout, wout)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    out = Tensor(check_finite(out_data, "conv2d"),
                 requires_grad=(x.requires_grad or weight.requires_grad
                                or (bias is not None and bias.requires_grad)))

    if tape is not None and out.requires_grad:
        inputs = (x, weight) if bias is None else (x, weight, bias)
        hp, wp = h + 2 * p, w + 2 * p

        def bwd(g):
            g2 = g.reshape(n, spec.out_channels, hout * wout)
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            gcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, hout, wout)
            gxp = np.zeros((n, cin, hp, wp))
            for a in range(kh):
                ra = a * d
                for b in range(kw):
                    cb = b * d
                    gxp[:, :, ra:ra + s * hout:s, cb:cb + s * wout:s] += gcols[:, :, a, b]
            gx = gxp[:, :, p:hp - p, p:wp - p] if p else gxp
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        tape.record("conv2d", inputs, out, bwd)
    return out


def pool2d(x: Tensor, mode: str, kernel: int, stride: int, padding: int = 0,
           tape: Tape | None = None) -> Tensor:
    """Windowed max or mean pooling.

    mode "max" pads with -inf (padding only supported for max; the stem's
    3x3/stride-2 pool needs it to keep the stride contract). Max backward
    routes the gradient to the argmax, ties broken by first index in raster
    order; mean backward spreads uniformly.
    """
    if mode not in ("max", "ave"):
        raise ShapeError(f"pool2d: mode must be 'max' or 'ave', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d: input must be 4-d, got {x.shape}")
    if padding and mode == "ave":
        raise ShapeError("pool2d: padding is only supported for max pooling")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kernel or wp < kernel:
        raise ShapeError(f"pool2d: kernel {kernel} larger than spatial extent {hp}x{wp}")

    if padding:
        xp = np.full((n, c, hp, wp), -np.inf)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    hout = (hp - kernel) // stride + 1
    wout = (wp - kernel) // stride + 1
    rows = np.arange(kernel)[:, None] + np.arange(hout)[None, :] * stride
    cols = np.arange(kernel)[:, None] + np.arange(wout)[None, :] * stride
    patches = xp[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    flat = patches.reshape(n, c, kernel * kernel, hout, wout)

    if mode == "max":
        am = flat.argmax(axis=2)  # first max in raster order
        out_data = np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0]
    else:
        out_data = flat.mean(axis=2)
    out = Tensor(check_finite(out_data, "pool2d"), requires_grad=x.requires_grad)

    if tape is not None and out.requires_grad:
        if mode == "max":
            def bwd(g):
                gxp = np.zeros((n, c, hp, wp))
                a, b = np.divmod(am, kernel)
                ni = np.arange(n)[:, None, None, None]
                ci = np.arange(c)[None, :, None, None]
                ri = a + np.arange(hout)[None, None, :, None] * stride
                cj = b + np.arange(wout)[None, None, None, :] * stride
                np.add.at(gxp, (ni, ci, ri, cj), g)
                return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)
        else:
            def bwd(g):
                gs = g / (kernel * kernel)
                gxp = np.zeros((n, c, hp, wp))
                for a in range(kernel):
                    for b in range(kernel):
                        gxp[:, :, a:a + stride * hout:stride, b:b + stride * wout:stride] += gs
                return (gxp,)
        tape.record(f"pool2d_{mode}", (x,), out, bwd)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(check_finite(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool"),
                 requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        area = h * w
        tape.record("global_avg_pool", (x,), out,
                    lambda g: (np.broadcast_to(g / area, (n, c, h, w)).copy(),))
    return out


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-d interpolation matrix for half-pixel-center bilinear
    resampling with edge clamping: src = (dst + 0.5) * n_in/n_out - 0.5."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1.0 - f
    m[np.arange(n_out), i1] += f
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int, tape: Tape | None = None) -> Tensor:
    """Bilinear upsampling with half-pixel centers; backward is the exact
    transpose scatter. Downsampling requests are rejected (use pool2d)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input "
                         f"{h}x{w}; downsampling is pool2d's job")
    mh = interp_matrix(out_h, h)
    mw = interp_matrix(out_w, w)
    out = Tensor(check_finite(np.matmul(np.matmul(mh, x.data), mw.T), "bilinear_upsample"),
                 requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record("bilinear_upsample", (x,), out,
                    lambda g: (np.matmul(np.matmul(mh.T, g), mw),))
    return out


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place via an exponential moving average
    (running variance stored unbiased, the frameworks' convention). Eval
    mode normalizes by the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: input must be 4-d, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm2d: {name} shape {t.shape} != ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm2d: running stats must be ({c},)")
    if eps <= 0:
        raise ShapeError(f"batch_norm2d: eps must be > 0, got {eps}")

    n, _, h, w = x.shape
    m = n * h * w
    if training:
        if m == 1:
            raise ShapeError("batch_norm2d: N*H*W == 1 in train mode, variance undefined")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(check_finite(out_data, "batch_norm2d"),
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)

    if tape is not None and out.requires_grad:
        if training:
            def bwd(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dxhat = g * gamma.data[None, :, None, None]
                gx = (dxhat
                      - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
                gx *= inv_std[None, :, None, None]
                return gx, dgamma, dbeta
        else:
            def bwd(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                gx = g * (gamma.data * inv_std)[None, :, None, None]
                return gx, dgamma, dbeta
        tape.record("batch_norm2d", (x, gamma, beta), out, bwd)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255,
                  tape: Tape | None = None) -> Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels.

    logits: [N, K, H, W]; labels: integer [N, H, W] with values in [0, K)
    or equal to ignore_index. Log-softmax uses max subtraction so huge
    logits cannot overflow.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: logits must be 4-d, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match "
                         f"logits {logits.shape}")
    k = logits.shape[1]
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("cross_entropy: every pixel is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ShapeError(f"cross_entropy: label {int(labels[bad][0])} outside [0,{k}) "
                         "and not the ignore index")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_prob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = Tensor(check_finite(np.float64(loss), "cross_entropy"),
                 requires_grad=logits.requires_grad)

    if tape is not None and out.requires_grad:
        def bwd(g):
            prob = np.exp(log_prob)
            onehot = np.zeros_like(prob)
            np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
            gx = (prob - onehot) * valid[:, None] / count
            return (gx * g,)
        tape.record("cross_entropy", (logits,), out, bwd)
    return out


def softmax_probs(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Stable softmax on raw arrays (inference-side helper, no grads)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
