"""Layer primitives with hand-written backward passes.

Activations are NHWC arrays. Convolution kernels use the (out, in/groups,
kh, kw) layout. Every ``*_forward`` returns ``(out, cache)`` and the
matching ``*_backward`` takes ``(dout, cache)``.
"""

import numpy as np


def _out_size(size, k, stride):
    pad = (k - 1) // 2
    return (size + 2 * pad - k) // stride + 1


def _pad_hw(x, k):
    pad = (k - 1) // 2
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


# depthwise kernels walk the batch in slabs of about this many elements so the
# accumulator stays in cache across the k*k taps
_SLAB_ELEMS = 1 << 17


def _slabs(n, per_sample):
    step = max(1, _SLAB_ELEMS // max(per_sample, 1))
    return [slice(s, s + step) for s in range(0, n, step)]


def _window(xp, i, j, ho, wo, stride):
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def conv_forward(x, w, stride=1):
    """Dense k x k convolution, 'same'-style zero padding of (k-1)//2."""
    n, h, wd, cin = x.shape
    cout, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride), _out_size(wd, k, stride)
    xp = _pad_hw(x, k)
    cols = np.stack([_window(xp, i, j, ho, wo, stride) for i in range(k) for j in range(k)],
                    axis=-1)  # (n, ho, wo, cin, k*k)
    wmat = w.reshape(cout, cin * k * k).T
    out = cols.reshape(n, ho, wo, cin * k * k) @ wmat
    return out, (x.shape, cols, w, stride)


def conv_backward(dout, cache):
    x_shape, cols, w, stride = cache
    n, h, wd, cin = x_shape
    cout, _, k, _ = w.shape
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, cin * k * k).T @ d2).T.reshape(w.shape)
    dcols = (d2 @ w.reshape(cout, cin * k * k)).reshape(n, ho, wo, cin, k * k)
    pad = (k - 1) // 2
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, ho, wo, stride)[...] += dcols[..., i * k + j]
    return dxp[:, pad:pad + h, pad:pad + wd, :], dw


def pointwise_forward(x, w):
    out = x @ w[:, :, 0, 0].T
    return out, (x, w)


def pointwise_backward(dout, cache):
    x, w = cache
    cout, cin = w.shape[:2]
    dw = (dout.reshape(-1, cout).T @ x.reshape(-1, cin)).reshape(w.shape)
    dx = dout @ w[:, :, 0, 0]
    return dx, dw


def _phases(xp, stride):
    """Split a padded input into stride*stride contiguous sub-sampled planes.

    A strided tap window then becomes a plain slice of one plane, which keeps
    the innermost loop over whole rows rather than single pixels.
    """
    if stride == 1:
        return {(0, 0): xp}
    return {(a, b): np.ascontiguousarray(xp[:, a::stride, b::stride])
            for a in range(stride) for b in range(stride)}


def _tap(phases, i, j, ho, wo, stride):
    plane = phases[(i % stride, j % stride)]
    r, q = i // stride, j // stride
    return plane[:, r:r + ho, q:q + wo]


def channel_sum(x):
    """Sum over every axis but the last, for a C-contiguous array."""
    c = x.shape[-1]
    rows = x.reshape(-1, x.shape[-2] * c) if x.ndim > 2 else x
    return rows.sum(axis=0).reshape(-1, c).sum(axis=0)


def depthwise_forward(x, w, stride=1):
    n, h, wd, c = x.shape
    k = w.shape[-1]
    ho, wo = _out_size(h, k, stride), _out_size(wd, k, stride)
    xp = _pad_hw(x, k)
    phases = _phases(xp, stride)
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    for sl in _slabs(n, ho * wo * c):
        o = out[sl]
        ps = {key: plane[sl] for key, plane in phases.items()}
        tmp = np.empty_like(o)
        np.multiply(_tap(ps, 0, 0, ho, wo, stride), w[:, 0, 0, 0], out=o)
        for i in range(k):
            for j in range(k):
                if i or j:
                    np.multiply(_tap(ps, i, j, ho, wo, stride), w[:, 0, i, j], out=tmp)
                    o += tmp
    return out, (phases, xp.shape, x.shape, w, stride)


def depthwise_backward(dout, cache):
    phases, xp_shape, x_shape, w, stride = cache
    n, h, wd, c = x_shape
    k = w.shape[-1]
    ho, wo = dout.shape[1:3]
    pad = (k - 1) // 2
    dphases = {key: np.zeros_like(plane) for key, plane in phases.items()}
    # per-slab partial sums, added up in a fixed order at the end
    parts = []
    for sl in _slabs(n, ho * wo * c):
        d = dout[sl]
        ps = {key: plane[sl] for key, plane in phases.items()}
        dps = {key: plane[sl] for key, plane in dphases.items()}
        tmp = np.empty_like(d)
        part = np.empty((k, k, c), dtype=np.float64)
        for i in range(k):
            for j in range(k):
                np.multiply(_tap(ps, i, j, ho, wo, stride), d, out=tmp)
                part[i, j] = channel_sum(tmp)
                np.multiply(d, w[:, 0, i, j], out=tmp)
                _tap(dps, i, j, ho, wo, stride)[...] += tmp
        parts.append(part)
    dw = np.sum(parts, axis=0).transpose(2, 0, 1)[:, None].astype(w.dtype)
    if stride == 1:
        dxp = dphases[(0, 0)]
    else:
        dxp = np.empty(xp_shape, dtype=dout.dtype)
        for (a, b), plane in dphases.items():
            dxp[:, a::stride, b::stride] = plane
    return dxp[:, pad:pad + h, pad:pad + wd, :], dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      eps=1e-5, momentum=0.1):
    """Per-channel batch norm; in train mode the running stats are updated in place."""
    if not train:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma * inv_std).astype(x.dtype)
        shift = (beta - running_mean * gamma * inv_std).astype(x.dtype)
        return x * scale + shift, None
    count = x.shape[0] * x.shape[1] * x.shape[2]
    mean = channel_sum(x) / count
    xc = x - mean.astype(x.dtype)
    var = channel_sum(np.square(xc)) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    unbiased = var * count / max(count - 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased
    out = xc * (gamma * inv_std).astype(x.dtype)
    out += beta.astype(x.dtype)
    return out, (xc, inv_std, gamma)


def batchnorm_backward(dout, cache):
    # xhat = xc * inv_std is never materialized; its terms are folded into
    # per-channel constants
    xc, inv_std, gamma = cache
    count = xc.shape[0] * xc.shape[1] * xc.shape[2]
    dbeta = channel_sum(dout)
    dgamma = channel_sum(dout * xc) * inv_std
    scale = gamma * inv_std
    dx = dout * scale.astype(dout.dtype)
    dx -= (scale * dbeta / count).astype(dout.dtype)
    dx -= xc * (scale * dgamma * inv_std / count).astype(dout.dtype)
    return dx, dgamma, dbeta


def relu6_forward(x):
    return np.clip(x, 0.0, 6.0), x


def relu6_backward(dout, x):
    return dout * ((x > 0.0) & (x < 6.0))


def mean_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def mean_pool_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to((dout / (h * w))[:, None, None, :], x_shape).copy()


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
