"""Small NHWC tensor kernels with hand-written backward passes.

Every activation is a rank-4 ``numpy`` array laid out as
``(batch, height, width, channels)`` in C order, so the flat offset of
``(n, i, j, c)`` is ``((n * H + i) * W + j) * C + c``.  Only the layers the
detector needs are provided: SAME-padded stride-1 convolution, ReLU, 2x2
max pooling, addition, dense layers and softmax, plus the SGDM update.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Tensor4 = np.ndarray


def flat_offset(dims: tuple[int, int, int, int], index: tuple[int, int, int, int]) -> int:
    return int(np.ravel_multi_index(index, dims))


def unflat_offset(dims: tuple[int, int, int, int], offset: int) -> tuple[int, int, int, int]:
    return tuple(int(v) for v in np.unravel_index(offset, dims))


def _check_rank4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, H, W, C), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution

def im2col(x: Tensor4, kh: int, kw: int) -> np.ndarray:
    """Gather SAME-padded windows into ``(N, H, W, kh*kw*C)`` patches.

    Patch order is (row offset, column offset, channel), which matches a
    kernel stored as ``(kh, kw, C_in, C_out)``.
    """
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return x
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return np.concatenate(
        [xp[:, i:i + h, j:j + w, :] for i in range(kh) for j in range(kw)], axis=-1
    )


def _check_conv(x: Tensor4, weight: np.ndarray, bias: np.ndarray) -> None:
    _check_rank4(x)
    if weight.ndim != 4:
        raise DimensionError(f"kernel must be (kh, kw, in, out), got {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("SAME padding needs odd kernel sizes")
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")


def conv2d_forward(x: Tensor4, weight: np.ndarray, bias: np.ndarray,
                   cols: np.ndarray | None = None) -> Tensor4:
    """SAME-padded, stride-1 convolution (cross-correlation) plus bias."""
    _check_conv(x, weight, bias)
    kh, kw, cin, cout = weight.shape
    n, h, w, _ = x.shape
    if cols is None:
        cols = im2col(x, kh, kw)
    out = cols.reshape(-1, kh * kw * cin) @ weight.reshape(-1, cout)
    out += bias
    return out.reshape(n, h, w, cout)


def conv2d_backward(x: Tensor4, weight: np.ndarray, grad_out: Tensor4,
                    cols: np.ndarray | None = None):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d_forward`."""
    kh, kw, cin, cout = weight.shape
    _check_conv(x, weight, np.zeros(cout, dtype=weight.dtype))
    n, h, w, _ = x.shape
    if grad_out.shape != (n, h, w, cout):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output {(n, h, w, cout)}")
    if cols is None:
        cols = im2col(x, kh, kw)
    g2 = grad_out.reshape(-1, cout)
    grad_w = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(weight.shape)
    grad_b = g2.sum(axis=0)
    gcols = (g2 @ weight.reshape(-1, cout).T).reshape(n, h, w, kh * kw, cin)
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return gcols[..., 0, :], grad_w, grad_b
    gxp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=grad_out.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w, :] += gcols[..., k, :]
            k += 1
    return gxp[:, ph:ph + h, pw:pw + w, :], grad_w, grad_b


# --------------------------------------------------------------------------
# pointwise and pooling

def relu(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(x: Tensor4, grad_out: Tensor4) -> Tensor4:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2(x: Tensor4) -> tuple[Tensor4, np.ndarray]:
    """2x2 / stride-2 max pooling.

    Returns the pooled tensor and, per output element, the position (0..3,
    row-major within the window) that won.  Ties go to the first position.
    """
    _check_rank4(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(argmax: np.ndarray, grad_out: Tensor4) -> Tensor4:
    if argmax.shape != grad_out.shape:
        raise DimensionError(f"argmax map {argmax.shape} != grad_out {grad_out.shape}")
    n, h2, w2, c = grad_out.shape
    routed = (np.arange(4) == argmax[..., None]) * grad_out[..., None]
    routed = routed.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return routed.reshape(n, 2 * h2, 2 * w2, c).astype(grad_out.dtype, copy=False)


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_out: Tensor4) -> tuple[Tensor4, Tensor4]:
    return grad_out, grad_out


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# initialisation and optimisation

def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class SGDM:
    """Classic momentum: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    ``step`` updates the parameter arrays and velocity buffers in place.
    """

    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            elif v.shape != p.shape:
                raise DimensionError(f"velocity for {name} has shape {v.shape}, param {p.shape}")
            v *= self.momentum
            v += g
            p -= (self.learning_rate * v).astype(p.dtype, copy=False)


def sgdm_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: SGDM) -> None:
    state.step(params, grads)


# --------------------------------------------------------------------------
# gradient verification

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


LossFn = Callable[[dict[str, np.ndarray]], "tuple[float, dict[str, np.ndarray]]"]


def finite_diff_check(fragment: LossFn, inputs: Mapping[str, np.ndarray],
                      epsilon: float | Sequence[float] = 1e-6, max_entries: int | None = None,
                      rng: np.random.Generator | None = None,
                      loss_only: Callable[[dict[str, np.ndarray]], float] | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``fragment(arrays)`` must return ``(scalar_loss, grads)`` where ``grads``
    has an entry per array in ``inputs``; ``loss_only``, when given, is used
    for the perturbed evaluations instead.  When ``max_entries`` is given, at
    most that many coordinates per array are probed (chosen with ``rng``).

    ``epsilon`` may be a sequence of step sizes.  Each coordinate then
    counts the best agreement over the steps: too small a step drowns tiny
    gradients in round-off, too large a one can straddle a ReLU or max-pool
    kink, but a wrong gradient disagrees at every step.

    Returns the worst relative error over every probed coordinate.
    """
    steps = [float(e) for e in np.atleast_1d(epsilon)]
    if not steps or not all(e > 0 for e in steps):
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    loss, grads = fragment(arrays)
    if np.ndim(loss) != 0:
        raise ContractError(f"fragment must return a scalar loss, got shape {np.shape(loss)}")
    evaluate = loss_only if loss_only is not None else (lambda a: fragment(a)[0])
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        if g.size != flat.size:
            raise DimensionError(f"gradient for {name} has {g.size} entries, expected {flat.size}")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            best = np.inf
            for eps in steps:
                flat[i] = orig + eps
                lp = float(evaluate(arrays))
                flat[i] = orig - eps
                lm = float(evaluate(arrays))
                flat[i] = orig
                best = min(best, float(relative_error(g[i], (lp - lm) / (2 * eps))))
            worst = max(worst, best)
    return worst
