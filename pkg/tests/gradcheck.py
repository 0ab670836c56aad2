"""Central finite differences against tape gradients, in float64."""

from __future__ import annotations

import numpy as np

from hrdecoder import tensor as T

EPS = 1e-3


def numeric_grad(f, arrays: list[np.ndarray], index: int, eps: float = EPS, coords=None) -> np.ndarray:
    """d f / d arrays[index] by central differences; ``coords`` limits the flat entries probed."""
    x = arrays[index]
    grad = np.zeros(x.size)
    probe = range(x.size) if coords is None else coords
    for i in probe:
        args = [a.copy() for a in arrays]
        flat = args[index].reshape(-1)
        flat[i] = x.flat[i] + eps
        up = f(*args)
        flat[i] = x.flat[i] - eps
        down = f(*args)
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check(build, arrays: list[np.ndarray], eps: float = EPS, coords=None) -> float:
    """Worst relative error over all inputs of a scalar-valued ``build(*tensors)``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        return float(build(*[T.Tensor(a, dtype=np.float64) for a in arrs]).item())

    leaves = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with T.Tape() as tape:
        loss = build(*leaves)
    grads = tape.backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros(leaf.shape))
        if coords is not None:
            idx = coords(arrays[i].size)
            num = numeric_grad(value, arrays, i, eps, idx).reshape(-1)[idx]
            worst = max(worst, rel_error(analytic.reshape(-1)[idx], num))
        else:
            worst = max(worst, rel_error(analytic, numeric_grad(value, arrays, i, eps)))
    return worst


def projected(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Scalar ``sum(out * weights)`` so every output entry gets a distinct cotangent."""
    return T.tsum(T.mul(out, T.Tensor(weights, dtype=out.dtype)))


def op_cases(rng):
    """One random instance builder per differentiable op: ``() -> (arrays, scalar build)``."""
    def shape(rank=None):
        rank = rank or int(rng.integers(1, 5))
        return tuple(int(d) for d in rng.integers(1, 9, size=rank))

    def unary(fn, positive=False):
        s = shape()
        x = rng.normal(size=s)
        if positive:
            x = np.abs(x) + 0.5
        r = rng.normal(size=s)
        return [x], lambda x: projected(fn(x), r)

    def binary(fn, positive_b=False):
        s = shape()
        a, b = rng.normal(size=s), rng.normal(size=s)
        if positive_b:
            b = np.abs(b) + 0.5
        r = rng.normal(size=s)
        return [a, b], lambda a, b: projected(fn(a, b), r)

    def conv():
        n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = (int(v) for v in rng.integers(k, 8, size=2))
        x, wt, b = rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
        oh, ow = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        r = rng.normal(size=(n, cout, oh, ow))
        return [x, wt, b], lambda x, wt, b: projected(T.conv2d(x, wt, b, stride, pad), r)

    def resize():
        s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), *(int(v) for v in rng.integers(1, 8, size=2)))
        oh, ow = (int(v) for v in rng.integers(1, 9, size=2))
        r = rng.normal(size=(*s[:2], oh, ow))
        return [rng.normal(size=s)], lambda x: projected(T.bilinear_resize(x, oh, ow), r)

    def crop():
        h, w = (int(v) for v in rng.integers(2, 8, size=2))
        r0, c0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        r1, c1 = int(rng.integers(r0 + 1, h + 1)), int(rng.integers(c0 + 1, w + 1))
        r = rng.normal(size=(1, 2, r1 - r0, c1 - c0))
        return [rng.normal(size=(1, 2, h, w))], lambda x: projected(T.crop(x, r0, r1, c0, c1), r)

    def paste():
        h, w = (int(v) for v in rng.integers(1, 5, size=2))
        r0, c0 = (int(v) for v in rng.integers(0, 4, size=2))
        oh, ow = h + r0 + int(rng.integers(0, 3)), w + c0 + int(rng.integers(0, 3))
        r = rng.normal(size=(1, 1, oh, ow))
        return [rng.normal(size=(1, 1, h, w))], lambda x: projected(T.paste(x, r0, c0, oh, ow), r)

    def reduce():
        s = shape(int(rng.integers(2, 5)))
        axis = int(rng.integers(0, len(s)))
        r = rng.normal(size=s[:axis] + s[axis + 1:])
        return [rng.normal(size=s)], lambda x: projected(T.tsum(x, axis), r)

    def mean():
        s = shape()
        r = rng.normal(size=s)
        return [rng.normal(size=s)], lambda x: T.mean(T.mul(x, T.Tensor(r, dtype=x.dtype)))

    c = float(rng.normal())
    return {
        "add": lambda: binary(T.add),
        "sub": lambda: binary(T.sub),
        "mul": lambda: binary(T.mul),
        "div": lambda: binary(T.div, positive_b=True),
        "scale": lambda: unary(lambda x: T.scale(x, c)),
        "add_scalar": lambda: unary(lambda x: T.add_scalar(x, c)),
        "sigmoid": lambda: unary(T.sigmoid),
        "silu": lambda: unary(T.silu),
        "sum_axis": reduce,
        "mean": mean,
        "conv2d": conv,
        "bilinear_resize": resize,
        "crop": crop,
        "paste": paste,
    }
