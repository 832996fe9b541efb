"""Small differentiable segmentation models with hand-written gradients.

Two reference architectures, both fully convolutional with "same"
zero padding and a per-pixel softmax head:

* flat (default): conv k*k (in->hidden) + ReLU, conv k*k (hidden->hidden)
  + ReLU, conv 1x1 (hidden->classes), softmax.
* encoder_decoder: one-level variant with 2x average-pool down,
  nearest-neighbour up, and skip concatenation before a fuse conv.

Parameters live in one flat float64 vector so a committee of models is
just a 2-D array.  Gradients of the Dice log-likelihood are computed
analytically; batch normalization is deliberately absent so repeated
evaluation is bit-deterministic.

Array conventions: images are ``[B, C_in, H, W]``, class probabilities
``[B, C, H, W]`` (softmax over axis 1), masks ``[B, H, W]`` integer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .errors import ConfigError, NumericalError, ShapeError

DICE_EPS = 1e-7


@dataclass(frozen=True)
class Architecture:
    """Descriptor from which the parameter layout is fully determined."""

    num_classes: int = 3
    in_channels: int = 1
    hidden_channels: int = 8
    kernel_size: int = 3
    encoder_decoder: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Per-layer (out_channels, in_channels, kernel) in parameter order."""
        h, k = self.hidden_channels, self.kernel_size
        if self.encoder_decoder:
            return [
                (h, self.in_channels, k),  # encoder conv
                (h, h, k),                 # bottleneck conv (pooled grid)
                (h, 2 * h, k),             # fuse conv after skip concat
                (self.num_classes, h, 1),  # class head
            ]
        return [
            (h, self.in_channels, k),
            (h, h, k),
            (self.num_classes, h, 1),
        ]

    def param_count(self) -> int:
        return sum(co * ci * k * k + co for co, ci, k in self.layer_shapes())


@dataclass
class SegModel:
    """Flat parameter vector plus the architecture giving it meaning."""

    params: np.ndarray  # [P] float64
    arch: Architecture

    def __post_init__(self) -> None:
        expected = self.arch.param_count()
        if self.params.shape != (expected,):
            raise ShapeError(
                f"params has shape {self.params.shape}, architecture needs ({expected},)"
            )


def model_init(arch: Architecture, seed: int) -> SegModel:
    """Deterministic init: each layer uniform in [-s, s], s = sqrt(1/fan_in)."""
    arch.validate()
    gen = rng.stream(seed, rng.MODEL_INIT)
    parts = []
    for cout, cin, k in arch.layer_shapes():
        s = np.sqrt(1.0 / (cin * k * k))
        parts.append(gen.uniform(-s, s, size=cout * cin * k * k))
        parts.append(gen.uniform(-s, s, size=cout))
    return SegModel(params=np.concatenate(parts), arch=arch)


# --------------------------------------------------------------------- #
# Layer primitives
# --------------------------------------------------------------------- #


def _split_params(params: np.ndarray, arch: Architecture):
    """Yield (weight [co,ci,k,k], bias [co]) per layer."""
    out = []
    i = 0
    for cout, cin, k in arch.layer_shapes():
        n = cout * cin * k * k
        out.append((params[i : i + n].reshape(cout, cin, k, k), params[i + n : i + n + cout]))
        i += n + cout
    return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> [B*H*W, C*k*k] patches under same zero padding."""
    b, c, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, C, H, W, k, k]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    b, c, h, w = x_shape
    if k == 1:
        return dcols.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    p = k // 2
    d = dcols.reshape(b, h, w, c, k, k)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + h, kj : kj + w] += d[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + w]


def _conv_forward(x, weight, bias):
    b, _, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col(x, weight.shape[2])
    y = cols @ weight.reshape(cout, -1).T + bias
    return y.reshape(b, h, w, cout).transpose(0, 3, 1, 2), cols


def _conv_backward(dy, cols, weight, x_shape, need_dx=True):
    b, _, h, w = x_shape
    cout, cin, k, _ = weight.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
    dw = (cols.T @ dy_mat).T.reshape(weight.shape)
    db = dy_mat.sum(axis=0)
    dx = _col2im(dy_mat @ weight.reshape(cout, cin * k * k), x_shape, k) if need_dx else None
    return dw, db, dx


def _avgpool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(dy):
    b, c, h2, w2 = dy.shape
    return dy.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def _softmax_channels(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------- #
# Forward / backward through the whole network
# --------------------------------------------------------------------- #


def _check_batch(arch: Architecture, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(
            f"expected batch [B, {arch.in_channels}, H, W], got shape {x.shape}"
        )
    h, w = x.shape[2], x.shape[3]
    if h < arch.kernel_size or w < arch.kernel_size:
        raise ShapeError(f"spatial dims {h}x{w} smaller than kernel {arch.kernel_size}")
    if arch.encoder_decoder and (h % 2 or w % 2):
        raise ShapeError("encoder_decoder variant needs even spatial dims")
    if not np.all(np.isfinite(x)):
        raise NumericalError("batch contains non-finite values")
    return x


def _forward_cache(params: np.ndarray, arch: Architecture, x: np.ndarray):
    layers = _split_params(params, arch)
    cache: dict = {"x_shape": x.shape}
    if arch.encoder_decoder:
        (we, be), (wm, bm), (wf, bf), (wh, bh) = layers
        z1, cols1 = _conv_forward(x, we, be)
        a1 = np.maximum(z1, 0.0)
        p1 = _avgpool2(a1)
        z2, cols2 = _conv_forward(p1, wm, bm)
        a2 = np.maximum(z2, 0.0)
        u2 = _upsample2(a2)
        c2 = np.concatenate([a1, u2], axis=1)
        z3, cols3 = _conv_forward(c2, wf, bf)
        a3 = np.maximum(z3, 0.0)
        z4, cols4 = _conv_forward(a3, wh, bh)
        probs = _softmax_channels(z4)
        cache.update(
            layers=layers, cols=(cols1, cols2, cols3, cols4),
            pre=(z1, z2, z3), shapes=(p1.shape, c2.shape, a3.shape), probs=probs,
        )
        return probs, cache
    (w1, b1), (w2, b2), (w3, b3) = layers
    z1, cols1 = _conv_forward(x, w1, b1)
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv_forward(a1, w2, b2)
    a2 = np.maximum(z2, 0.0)
    z3, cols3 = _conv_forward(a2, w3, b3)
    probs = _softmax_channels(z3)
    cache.update(layers=layers, cols=(cols1, cols2, cols3), pre=(z1, z2), probs=probs)
    return probs, cache


def _backward_from_cache(cache: dict, arch: Architecture, dprobs: np.ndarray) -> np.ndarray:
    probs = cache["probs"]
    # softmax adjoint: dz = p * (g - sum_c g_c p_c)
    dz_head = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    grads = []
    if arch.encoder_decoder:
        (we, _), (wm, _), (wf, _), (wh, _) = cache["layers"]
        cols1, cols2, cols3, cols4 = cache["cols"]
        z1, z2, z3 = cache["pre"]
        p1_shape, c2_shape, a3_shape = cache["shapes"]
        hid = arch.hidden_channels
        dwh, dbh, da3 = _conv_backward(dz_head, cols4, wh, a3_shape)
        dz3 = da3 * (z3 > 0)
        dwf, dbf, dc2 = _conv_backward(dz3, cols3, wf, c2_shape)
        da1 = dc2[:, :hid]
        da2 = _upsample2_backward(dc2[:, hid:])
        dz2 = da2 * (z2 > 0)
        dwm, dbm, dp1 = _conv_backward(dz2, cols2, wm, p1_shape)
        da1 = da1 + _avgpool2_backward(dp1)
        dz1 = da1 * (z1 > 0)
        dwe, dbe, _ = _conv_backward(dz1, cols1, we, cache["x_shape"], need_dx=False)
        grads = [dwe, dbe, dwm, dbm, dwf, dbf, dwh, dbh]
    else:
        (w1, _), (w2, _), (w3, _) = cache["layers"]
        cols1, cols2, cols3 = cache["cols"]
        z1, z2 = cache["pre"]
        dw3, db3, da2 = _conv_backward(dz_head, cols3, w3, z2.shape)
        dz2 = da2 * (z2 > 0)
        dw2, db2, da1 = _conv_backward(dz2, cols2, w2, z1.shape)
        dz1 = da1 * (z1 > 0)
        dw1, db1, _ = _conv_backward(dz1, cols1, w1, cache["x_shape"], need_dx=False)
        grads = [dw1, db1, dw2, db2, dw3, db3]
    return np.concatenate([g.ravel() for g in grads])


def forward(model: SegModel, batch: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities [B, C, H, W]; sums to 1 over axis 1."""
    x = _check_batch(model.arch, batch)
    probs, _ = _forward_cache(model.params, model.arch, x)
    return probs


def forward_particles(particles: np.ndarray, arch: Architecture, batch: np.ndarray) -> np.ndarray:
    """Stack forward passes of a committee: [M, B, C, H, W]."""
    x = _check_batch(arch, batch)
    return np.stack([_forward_cache(p, arch, x)[0] for p in particles])


# --------------------------------------------------------------------- #
# Dice machinery
# --------------------------------------------------------------------- #


def dice_loss(y: np.ndarray, yhat: np.ndarray, eps: float = DICE_EPS) -> float:
    """Soft Dice loss in [0, 1]: 0 on perfect overlap, ~1 on disjoint supports.

    ``eps`` is added to numerator and denominator, so two empty masks
    score a loss of 0 instead of 0/0.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"mask shape {y.shape} != prediction shape {yhat.shape}")
    num = 2.0 * (y * yhat).sum() + eps
    den = (y * y).sum() + (yhat * yhat).sum() + eps
    return float(1.0 - num / den)


def mask_to_onehot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """[B, H, W] integer labels -> [B, C, H, W] float64 one-hot planes."""
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ShapeError(f"expected mask [B, H, W], got shape {m.shape}")
    return (m[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def _foreground_weights(arch: Architecture, include_background: bool) -> np.ndarray:
    w = np.ones(arch.num_classes)
    if not include_background:
        w[0] = 0.0
    return w


def _loglik_terms(probs, onehot, fg, eps):
    """Per-(sample, class) soft Dice coefficient + eps; log-sum is the objective."""
    num = 2.0 * (onehot * probs).sum(axis=(2, 3)) + eps  # [B, C]
    den = (onehot * onehot).sum(axis=(2, 3)) + (probs * probs).sum(axis=(2, 3)) + eps
    s = num / den + eps
    return num, den, s, float((np.log(s) * fg).sum())


def dice_log_likelihood(
    model: SegModel,
    images: np.ndarray,
    masks: np.ndarray,
    *,
    include_background: bool = False,
    eps: float = DICE_EPS,
) -> float:
    """Sum over samples and scored classes of log(1 - dice_loss + eps).

    Larger is better; the value is finite for any input thanks to the
    eps smoothing, including all-empty masks.
    """
    x = _check_batch(model.arch, images)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    probs, _ = _forward_cache(model.params, model.arch, x)
    onehot = mask_to_onehot(masks, model.arch.num_classes)
    fg = _foreground_weights(model.arch, include_background)
    _, _, _, value = _loglik_terms(probs, onehot, fg, eps)
    return value


def loglik_and_gradient(
    model: SegModel,
    images: np.ndarray,
    masks: np.ndarray,
    *,
    include_background: bool = False,
    eps: float = DICE_EPS,
) -> tuple[float, np.ndarray]:
    """Dice log-likelihood and its analytic gradient w.r.t. the flat params."""
    x = _check_batch(model.arch, images)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    probs, cache = _forward_cache(model.params, model.arch, x)
    onehot = mask_to_onehot(masks, model.arch.num_classes)
    fg = _foreground_weights(model.arch, include_background)
    num, den, s, value = _loglik_terms(probs, onehot, fg, eps)
    # d log(s)/d p = (2 y den - 2 p num) / den^2 / s, zeroed outside scored classes
    scale = (fg[None, :] / (den * den * s))[:, :, None, None]
    dprobs = scale * (2.0 * onehot * den[:, :, None, None] - 2.0 * probs * num[:, :, None, None])
    grad = _backward_from_cache(cache, model.arch, dprobs)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    return value, grad


def backward(
    model: SegModel,
    images: np.ndarray,
    masks: np.ndarray,
    *,
    include_background: bool = False,
    eps: float = DICE_EPS,
) -> np.ndarray:
    """Gradient of ``dice_log_likelihood`` (summed over the batch)."""
    return loglik_and_gradient(
        model, images, masks, include_background=include_background, eps=eps
    )[1]
