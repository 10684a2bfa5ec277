"""Neural-network operations built on the taped tensor core.

Spatial tensors use height x width x channels layout; token matrices are
tokens x dim.  Every operation also accepts one leading batch axis
(batch x height x width x channels, batch x tokens x dim) and treats each
batch element independently, so a batched forward equals the stacked
per-image forwards.  All arithmetic stays in 64-bit precision and adjoints
are recorded on the active tape.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .autodiff import Tensor, accumulate, matmul, tape_for
from .errors import ConfigError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    tape = tape_for(x)
    if tape is not None:
        mask = x.data > 0.0
        def backward_fn(g):
            accumulate(x, g * mask, own=True)
        tape.record(out, backward_fn)
    return out


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)
    tape = tape_for(x)
    if tape is not None:
        def backward_fn(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            accumulate(x, g * (cdf + x.data * pdf), own=True)
        tape.record(out, backward_fn)
    return out


def softmax_rows(x):
    """Row-wise softmax over the trailing axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)
    tape = tape_for(x)
    if tape is not None:
        def backward_fn(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            accumulate(x, out_data * (g - inner), own=True)
        tape.record(out, backward_fn)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-token normalization over the trailing axis with learnable affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    tape = tape_for(x, gain, bias)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        def backward_fn(g):
            if gain.requires_grad:
                accumulate(gain, (g * xhat).sum(axis=lead), own=True)
            if bias.requires_grad:
                accumulate(bias, g.sum(axis=lead), own=True)
            if x.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                accumulate(x, inv * (gx - m1 - xhat * m2), own=True)
        tape.record(out, backward_fn)
    return out


def _spatial_axes(x):
    if x.data.ndim == 3:
        return (0, 1)
    if x.data.ndim == 4:
        return (1, 2)
    raise DimensionError(f"expected h x w x C with optional batch axis, got {x.data.shape}")


def batch_norm2d(x, gain, bias, eps=1e-5):
    """Channel normalization of a spatial map using its own statistics.

    Statistics are per sample: a batched input uses each element's own
    spatial mean/variance.  Returns ``(out, mean, var)`` with the statistics
    shaped ``(..., C)``; the caller owns the running-average update.
    """
    axes = _spatial_axes(x)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    tape = tape_for(x, gain, bias)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        def backward_fn(g):
            if gain.requires_grad:
                accumulate(gain, (g * xhat).sum(axis=lead), own=True)
            if bias.requires_grad:
                accumulate(bias, g.sum(axis=lead), own=True)
            if x.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=axes, keepdims=True)
                m2 = (gx * xhat).mean(axis=axes, keepdims=True)
                accumulate(x, inv * (gx - m1 - xhat * m2), own=True)
        tape.record(out, backward_fn)
    stat_shape = (-1, x.data.shape[-1]) if x.data.ndim == 4 else (x.data.shape[-1],)
    return out, mu.reshape(stat_shape), var.reshape(stat_shape)


def batch_norm2d_infer(x, gain, bias, running_mean, running_var, eps=1e-5):
    """Channel normalization with frozen statistics (inference path)."""
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = Tensor(xhat * gain.data + bias.data)
    tape = tape_for(x, gain, bias)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        def backward_fn(g):
            if gain.requires_grad:
                accumulate(gain, (g * xhat).sum(axis=lead), own=True)
            if bias.requires_grad:
                accumulate(bias, g.sum(axis=lead), own=True)
            if x.requires_grad:
                accumulate(x, g * (gain.data * inv), own=True)
        tape.record(out, backward_fn)
    return out


def depthwise_conv2d(x, kernel):
    """Per-channel k x k convolution, stride 1, zero padding preserving extents.

    ``x`` is h x w x C (optionally with a leading batch axis), ``kernel`` is
    k x k x C; channel c of the output sees only channel c of the input.
    Accumulation runs in fixed row-major kernel order so results are
    bit-reproducible.
    """
    k = kernel.data.shape[0]
    if kernel.data.ndim != 3 or kernel.data.shape[1] != k:
        raise DimensionError(f"depthwise_conv2d: kernel must be k x k x C, got {kernel.data.shape}")
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel extent must be odd, got {k}")
    if x.data.shape[-1] != kernel.data.shape[2]:
        raise DimensionError(
            f"depthwise_conv2d: channel extents differ: {x.data.shape} vs {kernel.data.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"depthwise_conv2d: bad input shape {x.data.shape}")
    x4 = x.data if batched else x.data[None]
    b, h, w, c = x4.shape
    p = (k - 1) // 2
    pad = np.zeros((b, h + 2 * p, w + 2 * p, c))
    pad[:, p:p + h, p:p + w] = x4
    out_data = np.zeros((b, h, w, c))
    for di in range(k):
        for dj in range(k):
            out_data += pad[:, di:di + h, dj:dj + w] * kernel.data[di, dj]
    out = Tensor(out_data if batched else out_data[0])
    tape = tape_for(x, kernel)
    if tape is not None:
        def backward_fn(g):
            g4 = g if batched else g[None]
            if kernel.requires_grad:
                # windows: B x k x k x C x h x w view over the padded input
                windows = sliding_window_view(pad, (h, w), axis=(1, 2))
                dk = np.einsum("bijchw,bhwc->ijc", windows, g4)
                accumulate(kernel, dk, own=True)
            if x.requires_grad:
                gpad = np.zeros_like(pad)
                for di in range(k):
                    for dj in range(k):
                        gpad[:, di:di + h, dj:dj + w] += g4 * kernel.data[di, dj]
                dx = gpad[:, p:p + h, p:p + w]
                accumulate(x, np.ascontiguousarray(dx if batched else dx[0]), own=True)
        tape.record(out, backward_fn)
    return out


def pointwise_conv(x, weight, bias=None):
    """1x1 convolution: an independent linear map at every spatial position."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise DimensionError(
            f"pointwise_conv: channel extents differ: {x.data.shape} vs {weight.data.shape}")
    out_data = np.tensordot(x.data, weight.data, axes=([-1], [0]))
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape = tape_for(*inputs)
    if tape is not None:
        lead = tuple(range(x.data.ndim - 1))
        cin = weight.data.shape[0]
        def backward_fn(g):
            if x.requires_grad:
                accumulate(x, np.tensordot(g, weight.data.T, axes=([-1], [0])), own=True)
            if weight.requires_grad:
                xf = x.data.reshape(-1, cin)
                gf = g.reshape(-1, g.shape[-1])
                accumulate(weight, xf.T @ gf, own=True)
            if bias is not None and bias.requires_grad:
                accumulate(bias, g.sum(axis=lead), own=True)
        tape.record(out, backward_fn)
    return out


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Dense 2-D convolution via im2col; kernel is k x k x Cin x Cout."""
    k = kernel.data.shape[0]
    if kernel.data.ndim != 4 or kernel.data.shape[1] != k:
        raise DimensionError(f"conv2d: kernel must be k x k x Cin x Cout, got {kernel.data.shape}")
    if x.data.shape[-1] != kernel.data.shape[2]:
        raise DimensionError(f"conv2d: channel extents differ: {x.data.shape} vs {kernel.data.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"conv2d: bad input shape {x.data.shape}")
    x4 = x.data if batched else x.data[None]
    b, h, w, cin = x4.shape
    cout = kernel.data.shape[3]
    if padding:
        pad = np.zeros((b, h + 2 * padding, w + 2 * padding, cin))
        pad[:, padding:padding + h, padding:padding + w] = x4
    else:
        pad = x4
    ph, pw = pad.shape[1:3]
    oh = (ph - k) // stride + 1
    ow = (pw - k) // stride + 1
    win = sliding_window_view(pad, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow, k * k * cin)
    kflat = kernel.data.reshape(k * k * cin, cout)
    out_data = patches @ kflat
    if bias is not None:
        out_data = out_data + bias.data
    out_data = out_data.reshape(b, oh, ow, cout)
    out = Tensor(out_data if batched else out_data[0])
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    tape = tape_for(*inputs)
    if tape is not None:
        def backward_fn(g):
            gf = g.reshape(b * oh * ow, cout)
            if kernel.requires_grad:
                accumulate(kernel, (patches.T @ gf).reshape(kernel.data.shape), own=True)
            if bias is not None and bias.requires_grad:
                accumulate(bias, gf.sum(axis=0), own=True)
            if x.requires_grad:
                gk = (gf @ kflat.T).reshape(b, oh, ow, k, k, cin)
                gpad = np.zeros((b, ph, pw, cin))
                for ki in range(k):
                    for kj in range(k):
                        gpad[:, ki:ki + oh * stride:stride,
                             kj:kj + ow * stride:stride] += gk[:, :, :, ki, kj]
                if padding:
                    gpad = gpad[:, padding:padding + h, padding:padding + w]
                dx = gpad if batched else gpad[0]
                accumulate(x, np.ascontiguousarray(dx), own=True)
        tape.record(out, backward_fn)
    return out


_INTERP_CACHE = {}


def _interp_matrix(n_out, n_in):
    """Row-stochastic bilinear interpolation matrix, half-pixel-center grid."""
    cached = _INTERP_CACHE.get((n_out, n_in))
    if cached is not None:
        return cached
    r = np.zeros((n_out, n_in))
    if n_in == 1:
        r[:, 0] = 1.0
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        f = np.floor(src)
        t = src - f
        i0 = np.clip(f, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(f + 1, 0, n_in - 1).astype(np.int64)
        rows = np.arange(n_out)
        np.add.at(r, (rows, i0), 1.0 - t)
        np.add.at(r, (rows, i1), t)
    r.setflags(write=False)
    _INTERP_CACHE[(n_out, n_in)] = r
    return r


def _resize_data(arr, rh, rw):
    # arr: B x h x w x C -> B x h2 x w2 x C
    t1 = np.tensordot(rh, arr, axes=(1, 1))          # h2 x B x w x C
    t2 = np.tensordot(rw, t1, axes=(1, 2))           # w2 x h2 x B x C
    return np.ascontiguousarray(t2.transpose(2, 1, 0, 3))


def bilinear_resize(x, out_hw):
    """Separable bilinear resize of a spatial map (half-pixel centers).

    Returns the input tensor unchanged when the target equals the source
    extents, so the identity case is exact.
    """
    h2, w2 = int(out_hw[0]), int(out_hw[1])
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"bilinear_resize: target extents must be positive, got {(h2, w2)}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize: bad input shape {x.data.shape}")
    x4 = x.data if batched else x.data[None]
    h, w = x4.shape[1:3]
    if (h2, w2) == (h, w):
        return x
    rh = _interp_matrix(h2, h)
    rw = _interp_matrix(w2, w)
    out_data = _resize_data(x4, rh, rw)
    out = Tensor(out_data if batched else out_data[0])
    tape = tape_for(x)
    if tape is not None:
        def backward_fn(g):
            g4 = g if batched else g[None]
            dx = _resize_data(g4, rh.T, rw.T)
            accumulate(x, dx if batched else dx[0], own=True)
        tape.record(out, backward_fn)
    return out


def resize_array(arr, out_hw):
    """Plain-numpy bilinear resize for inference-side maps (no tape)."""
    h2, w2 = int(out_hw[0]), int(out_hw[1])
    h, w = arr.shape[:2]
    if (h2, w2) == (h, w):
        return arr
    squeeze = arr.ndim == 2
    data = arr[:, :, None] if squeeze else arr
    out = _resize_data(data[None], _interp_matrix(h2, h), _interp_matrix(w2, w))[0]
    return out[:, :, 0] if squeeze else out


def _split_heads(arr, n_heads, dh):
    # ... x n x (H*dh) -> B? x H x n x dh with a leading axis added if absent
    if arr.ndim == 2:
        n = arr.shape[0]
        return arr.reshape(n, n_heads, dh).transpose(1, 0, 2)[None]
    b, n = arr.shape[:2]
    return arr.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)


def _merge_heads(arr, batched):
    # B x H x n x dh -> (B x) n x (H*dh)
    b, nh, n, dh = arr.shape
    merged = np.ascontiguousarray(arr.transpose(0, 2, 1, 3)).reshape(b, n, nh * dh)
    return merged if batched else merged[0]


def attention_heads(q, k, v, n_heads):
    """Scaled dot-product attention over column-partitioned heads.

    Inputs are already projected token matrices (Nq x D queries against
    Ns x D keys/values); either side may carry a leading batch axis, and an
    unbatched side broadcasts against a batched one.  The score and
    weighted-sum stages cost 2 * Nq * Ns * D multiply-adds per batch element.
    """
    d = q.data.shape[-1]
    if k.data.shape != v.data.shape or k.data.shape[-1] != d:
        raise DimensionError(
            f"attention_heads: operand shapes inconsistent: "
            f"{q.data.shape}, {k.data.shape}, {v.data.shape}")
    if d % n_heads != 0:
        raise ConfigError(f"attention_heads: dim {d} not divisible by {n_heads} heads")
    q_batched = q.data.ndim == 3
    kv_batched = k.data.ndim == 3
    batched = q_batched or kv_batched
    dh = d // n_heads
    inv_scale = 1.0 / np.sqrt(dh)
    qh = _split_heads(q.data, n_heads, dh)   # Bq x H x Nq x Dh
    kh = _split_heads(k.data, n_heads, dh)
    vh = _split_heads(v.data, n_heads, dh)
    attn = (qh * inv_scale) @ kh.transpose(0, 1, 3, 2)
    attn -= attn.max(axis=-1, keepdims=True)
    np.exp(attn, out=attn)
    attn /= attn.sum(axis=-1, keepdims=True)          # B x H x Nq x Ns
    out = Tensor(_merge_heads(attn @ vh, batched))
    tape = tape_for(q, k, v)
    if tape is not None:
        def backward_fn(g):
            gh = _split_heads(g, n_heads, dh)
            if v.requires_grad:
                dv = attn.transpose(0, 1, 3, 2) @ gh
                if not kv_batched and dv.shape[0] > 1:
                    dv = dv.sum(axis=0, keepdims=True)
                accumulate(v, _merge_heads(dv, kv_batched), own=True)
            if q.requires_grad or k.requires_grad:
                da = gh @ vh.transpose(0, 1, 3, 2)
                ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
                if q.requires_grad:
                    dq = (ds @ kh) * inv_scale
                    if not q_batched and dq.shape[0] > 1:
                        dq = dq.sum(axis=0, keepdims=True)
                    accumulate(q, _merge_heads(dq, q_batched), own=True)
                if k.requires_grad:
                    dk = (ds.transpose(0, 1, 3, 2) @ qh) * inv_scale
                    if not kv_batched and dk.shape[0] > 1:
                        dk = dk.sum(axis=0, keepdims=True)
                    accumulate(k, _merge_heads(dk, kv_batched), own=True)
        tape.record(out, backward_fn)
    return out


class MhaWeights:
    """Projection matrices of one multi-head attention module.

    ``wq``, ``wk``, ``wv`` stack the per-head D x Dh projections column-wise
    into D x D matrices; ``wo`` maps the concatenated heads back to D.
    """

    __slots__ = ("wq", "wk", "wv", "wo")

    def __init__(self, wq, wk, wv, wo):
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo]


def multi_head_attention(q, k, v, weights, n_heads):
    """Multi-head attention with per-head projections and output projection."""
    if q.data.shape[-1] % n_heads != 0:
        raise ConfigError(
            f"multi_head_attention: dim {q.data.shape[-1]} not divisible by {n_heads} heads")
    qp = matmul(q, weights.wq)
    kp = matmul(k, weights.wk)
    vp = matmul(v, weights.wv)
    mixed = attention_heads(qp, kp, vp, n_heads)
    return matmul(mixed, weights.wo)
