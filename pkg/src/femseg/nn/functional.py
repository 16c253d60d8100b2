"""Stateless forward/backward kernels for 5-D activations ``(N, C, D, H, W)``.

Convolutions are 3x3x3 with padding 1 and are lowered to matrix products via
im2col. Stride-1 convolutions (the bulk of the work) build the column buffer
in cache-sized blocks; strided and transposed convolutions run at the coarser
resolution and use a whole-array buffer. Nothing is cached between forward
and backward: column buffers are rebuilt from the saved input.
"""

from __future__ import annotations

import numpy as np

from ..errors import OddDimension, ShapeMismatch

K = 3
PAD = 1


def conv_out_size(n: int, stride: int) -> int:
    return (n + 2 * PAD - K) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    n, c, d, h, w = x.shape
    do, ho, wo = (conv_out_size(s, stride) for s in (d, h, w))
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((c, K, K, K, n, do, ho, wo), dtype=x.dtype)
    xp_t = xp.transpose(1, 0, 2, 3, 4)
    for kd in range(K):
        for kh in range(K):
            for kw in range(K):
                cols[:, kd, kh, kw] = xp_t[
                    :, :,
                    kd:kd + stride * (do - 1) + 1:stride,
                    kh:kh + stride * (ho - 1) + 1:stride,
                    kw:kw + stride * (wo - 1) + 1:stride,
                ]
    return cols.reshape(c * K ** 3, n * do * ho * wo), (do, ho, wo)


def _col2im(cols: np.ndarray, in_shape, stride: int) -> np.ndarray:
    n, c, d, h, w = in_shape
    do, ho, wo = (conv_out_size(s, stride) for s in (d, h, w))
    cols = cols.reshape(c, K, K, K, n, do, ho, wo)
    gp = np.zeros((c, n, d + 2 * PAD, h + 2 * PAD, w + 2 * PAD), dtype=cols.dtype)
    for kd in range(K):
        for kh in range(K):
            for kw in range(K):
                gp[
                    :, :,
                    kd:kd + stride * (do - 1) + 1:stride,
                    kh:kh + stride * (ho - 1) + 1:stride,
                    kw:kw + stride * (wo - 1) + 1:stride,
                ] += cols[:, kd, kh, kw]
    return gp[:, :, PAD:PAD + d, PAD:PAD + h, PAD:PAD + w].transpose(1, 0, 2, 3, 4)


def _check_conv(x, weight, stride):
    if x.ndim != 5:
        raise ShapeMismatch(f"expected (N, C, D, H, W) input, got {x.shape}")
    if weight.shape[2:] != (K, K, K):
        raise ShapeMismatch(f"kernel must be 3x3x3, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    if stride == 2 and any(s % 2 for s in x.shape[2:]):
        raise OddDimension(f"stride-2 convolution needs even spatial dims, got {x.shape[2:]}")


def _tap_offsets(hp: int, wp: int) -> list[int]:
    return [kd * hp * wp + kh * wp + kw for kd in range(K) for kh in range(K) for kw in range(K)]


def _chunk_len(channels: int) -> int:
    # keep one column block near 512 KiB so it stays cache resident
    return int(min(4096, max(256, (1 << 17) // (channels * K ** 3))))


def _flat_padded(x4: np.ndarray) -> np.ndarray:
    # one extra trailing slice so every tap offset stays in range
    c = x4.shape[0]
    return np.pad(x4, ((0, 0), (PAD, PAD + 1), (PAD, PAD), (PAD, PAD))).reshape(c, -1)


def _conv_s1(x4: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Stride-1 convolution of one sample ``(C, D, H, W)``; ``w2`` is (Cout, C*27).

    In the flattened padded grid every kernel tap is a constant offset, so the
    column buffer can be assembled block by block from contiguous slices.
    Outputs are computed on the padded in-plane lattice and cropped.
    """
    c, d, h, w = x4.shape
    hp, wp = h + 2 * PAD, w + 2 * PAD
    xp = _flat_padded(x4)
    offsets = _tap_offsets(hp, wp)
    q_total = d * hp * wp
    cout = w2.shape[0]
    out = np.empty((cout, q_total), dtype=x4.dtype)
    ch = _chunk_len(c)
    cols = np.empty((c, K ** 3, ch), dtype=x4.dtype)
    flat_cols = cols.reshape(c * K ** 3, ch)
    for q0 in range(0, q_total, ch):
        n = min(ch, q_total - q0)
        for k, off in enumerate(offsets):
            cols[:, k, :n] = xp[:, q0 + off:q0 + off + n]
        np.matmul(w2, flat_cols[:, :n], out=out[:, q0:q0 + n])
    return out.reshape(cout, d, hp, wp)[:, :, :h, :w]


def _conv_s1_weight_grad(x4: np.ndarray, g4: np.ndarray) -> np.ndarray:
    """Weight gradient (Cout, C*27) of :func:`_conv_s1` for one sample."""
    c, d, h, w = x4.shape
    cout = g4.shape[0]
    hp, wp = h + 2 * PAD, w + 2 * PAD
    xp = _flat_padded(x4)
    offsets = _tap_offsets(hp, wp)
    q_total = d * hp * wp
    gfull = np.zeros((cout, d, hp, wp), dtype=g4.dtype)
    gfull[:, :, :h, :w] = g4
    gfull = gfull.reshape(cout, q_total)
    acc = np.zeros((cout, c * K ** 3), dtype=x4.dtype)
    ch = _chunk_len(c)
    cols = np.empty((c, K ** 3, ch), dtype=x4.dtype)
    flat_cols = cols.reshape(c * K ** 3, ch)
    for q0 in range(0, q_total, ch):
        n = min(ch, q_total - q0)
        for k, off in enumerate(offsets):
            cols[:, k, :n] = xp[:, q0 + off:q0 + off + n]
        acc += gfull[:, q0:q0 + n] @ flat_cols[:, :n].T
    return acc


def _flip_kernel(weight: np.ndarray) -> np.ndarray:
    # kernel of the adjoint stride-1 convolution: swap in/out, reverse taps
    return np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


def conv3d_forward(x, weight, bias=None, stride: int = 1):
    """Cross-correlation of ``x`` with ``weight`` of shape (Cout, Cin, 3, 3, 3).

    Padding is 1 on every side, so stride 1 preserves the spatial dims and
    stride 2 halves them.
    """
    _check_conv(x, weight, stride)
    n = x.shape[0]
    cout = weight.shape[0]
    w2 = weight.reshape(cout, -1)
    if stride == 1:
        out = np.stack([_conv_s1(x[i], w2) for i in range(n)])
        if bias is not None:
            out += bias[None, :, None, None, None]
        return out
    cols, (do, ho, wo) = _im2col(x, stride)
    out = w2 @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(cout, n, do, ho, wo).transpose(1, 0, 2, 3, 4)


def conv3d_backward(grad_out, x, weight, stride: int = 1):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv3d_forward`."""
    _check_conv(x, weight, stride)
    n = x.shape[0]
    cout = weight.shape[0]
    expected = (n, cout) + tuple(conv_out_size(s, stride) for s in x.shape[2:])
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape}, expected {expected}")
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    if stride == 1:
        flipped = _flip_kernel(weight).reshape(weight.shape[1], -1)
        grad_x = np.stack([_conv_s1(grad_out[i], flipped) for i in range(n)])
        grad_w = sum(_conv_s1_weight_grad(x[i], grad_out[i]) for i in range(n))
        return grad_x, grad_w.reshape(weight.shape), grad_b
    g = grad_out.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
    cols, _ = _im2col(x, stride)
    grad_w = (g @ cols.T).reshape(weight.shape)
    del cols
    grad_cols = weight.reshape(cout, -1).T @ g
    grad_x = _col2im(grad_cols, x.shape, stride)
    return grad_x, grad_w, grad_b


def conv_transpose3d_forward(x, weight, bias=None, stride: int = 2):
    """Adjoint of a padded 3x3x3 convolution with the given stride.

    ``weight`` has shape (Cin, Cout, 3, 3, 3): it is the kernel of the forward
    convolution that would map a Cout-channel grid of the output size back to
    ``x``. With stride 2 the spatial dims double.
    """
    if x.ndim != 5 or weight.shape[0] != x.shape[1] or weight.shape[2:] != (K, K, K):
        raise ShapeMismatch(f"input {x.shape} incompatible with kernel {weight.shape}")
    n, cin, d, h, w = x.shape
    cout = weight.shape[1]
    out_shape = (n, cout, d * stride, h * stride, w * stride)
    xf = x.transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    y = _col2im(weight.reshape(cin, -1).T @ xf, out_shape, stride)
    if bias is not None:
        y += bias[None, :, None, None, None]
    return y


def conv_transpose3d_backward(grad_out, x, weight, stride: int = 2):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv_transpose3d_forward`."""
    n, cin = x.shape[:2]
    cout = weight.shape[1]
    expected = (n, cout) + tuple(s * stride for s in x.shape[2:])
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape}, expected {expected}")
    grad_x = conv3d_forward(grad_out, weight, None, stride)
    cols, _ = _im2col(grad_out, stride)
    xf = x.transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    grad_w = (xf @ cols.T).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_w, grad_b


def batchnorm_train_forward(x, gamma, beta, eps):
    """Normalize each channel over batch and spatial axes.

    Returns ``(y, cache, batch_mean, batch_var)``; the variance is the biased
    (population) estimate.
    """
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes)
    centered = x - mean[None, :, None, None, None]
    var = np.mean(centered * centered, axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None, None].astype(x.dtype)
    y = xhat * gamma[None, :, None, None, None] + beta[None, :, None, None, None]
    return y, (xhat, inv_std), mean, var


def batchnorm_train_backward(grad_out, cache, gamma):
    xhat, inv_std = cache
    axes = (0, 2, 3, 4)
    grad_gamma = np.sum(grad_out * xhat, axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma[None, :, None, None, None]
    m = xhat.size // xhat.shape[1]
    mean_dxhat = dxhat.sum(axis=axes) / m
    mean_dxhat_xhat = np.sum(dxhat * xhat, axis=axes) / m
    grad_x = (
        dxhat
        - mean_dxhat[None, :, None, None, None]
        - xhat * mean_dxhat_xhat[None, :, None, None, None]
    ) * inv_std[None, :, None, None, None].astype(grad_out.dtype)
    return grad_x, grad_gamma, grad_beta


def batchnorm_infer_forward(x, gamma, beta, running_mean, running_var, eps):
    scale = (gamma / np.sqrt(running_var + eps)).astype(x.dtype)
    shift = (beta - running_mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None, None] + shift[None, :, None, None, None], scale


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def softmax(logits, axis: int = 1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, onehot, axis: int = 1, clamp: float = 1e-12):
    """Mean categorical cross-entropy over voxels and its gradient w.r.t. ``logits``.

    ``N`` is the number of voxels, i.e. ``logits.size / C``. Probabilities are
    clamped to ``[clamp, 1]`` before the log. The returned gradient is the
    analytic ``(p - y) / N``.
    """
    if logits.shape != onehot.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {onehot.shape}")
    p = softmax(logits, axis=axis)
    n_vox = logits.size // logits.shape[axis]
    logp = np.log(np.clip(p, clamp, 1.0))
    loss = -float(np.sum(onehot * logp, dtype=np.float64)) / n_vox
    grad = (p - onehot) / np.asarray(n_vox, dtype=logits.dtype)
    return loss, grad
