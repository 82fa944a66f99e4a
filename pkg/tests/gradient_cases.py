"""Random instances for finite-difference checks of every differentiable op.

Each case builder takes a seeded generator and returns ``(build, inputs)``
for :func:`evolving_boxes.gradcheck.check_op`. Inputs are drawn away from
kinks (ReLU at 0, pooling ties, the smooth-L1 joint) by more than the
finite-difference step.
"""
from __future__ import annotations

import numpy as np

from evolving_boxes import autodiff as ad

INSTANCES = 20


def away_from(rng, shape, points=(0.0,), margin=1e-2, scale=1.0):
    x = rng.standard_normal(shape) * scale
    for p in points:
        for sign in (1, -1):
            near = np.abs(x - sign * p) < margin
            x = np.where(near, sign * p + np.sign(x - sign * p + 1e-12) * margin * 2, x)
    return x


def distinct(rng, shape, spacing=0.01):
    """Values with pairwise gaps of ``spacing`` in random order (no ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def conv2d_case(rng):
    c, o = rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7), rng.integers(3, 7)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    if h + 2 * pad < k or w + 2 * pad < k:
        pad = k
    x = rng.standard_normal((c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    return (lambda x, w_, b_: ad.conv2d(x, w_, b_, stride, pad)), [x, wt, b]


def maxpool2_case(rng):
    c, h, w = rng.integers(1, 4), 2 * rng.integers(1, 4), 2 * rng.integers(1, 4)
    return ad.maxpool2, [distinct(rng, (c, h, w))]


def pad_to_even_case(rng):
    shape = (rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6))
    return ad.pad_to_even, [rng.standard_normal(shape)]


def relu_case(rng):
    return ad.relu, [away_from(rng, (rng.integers(1, 4), rng.integers(1, 6), 3))]


def linear_case(rng):
    n, m = rng.integers(1, 8), rng.integers(1, 6)
    batch = rng.integers(0, 4)
    x = rng.standard_normal((n,) if batch == 0 else (batch, n))
    return ad.linear, [x, rng.standard_normal((m, n)), rng.standard_normal(m)]


def batchnorm_train_case(rng):
    c = rng.integers(1, 4)
    x = rng.standard_normal((c, rng.integers(2, 5), rng.integers(2, 5))) * 2 + 0.5
    state = ad.BatchNormState(c)

    def build(x, g, b):
        return ad.batchnorm(x, g, b, state, train=True, update_stats=False)

    return build, [x, rng.standard_normal(c), rng.standard_normal(c)]


def batchnorm_infer_case(rng):
    c = rng.integers(1, 4)
    state = ad.BatchNormState(c)
    state.running_mean = rng.standard_normal(c).astype(np.float32)
    state.running_var = (rng.random(c) + 0.5).astype(np.float32)

    def build(x, g, b):
        return ad.batchnorm(x, g, b, state, train=False)

    x = rng.standard_normal((c, 3, 4))
    return build, [x, rng.standard_normal(c), rng.standard_normal(c)]


def resample_case(rng):
    c, h, w = rng.integers(1, 3), rng.integers(1, 7), rng.integers(1, 7)
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    return (lambda x: ad.resample_bilinear(x, oh, ow)), [rng.standard_normal((c, h, w))]


def concat_channels_case(rng):
    h, w = rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    xs = [rng.standard_normal((rng.integers(1, 3), h, w)) for _ in range(k)]
    return (lambda *ns: ad.concat_channels(list(ns))), xs


def concat_features_case(rng):
    rows = rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    xs = [rng.standard_normal((rows, rng.integers(1, 5))) for _ in range(k)]
    return (lambda *ns: ad.concat_features(list(ns))), xs


def roi_maxpool_case(rng):
    c, h, w = rng.integers(1, 3), rng.integers(3, 9), rng.integers(3, 9)
    stride = float(rng.choice([1.0, 2.0, 4.0]))
    r = int(rng.integers(1, 4))
    boxes = np.stack([rng.uniform(-2, w * stride + 2, r), rng.uniform(-2, h * stride + 2, r),
                      rng.uniform(1, w * stride, r), rng.uniform(1, h * stride, r)], axis=1)
    out = int(rng.integers(1, 5))
    return (lambda f: ad.roi_maxpool(f, boxes, stride, out, out)), [distinct(rng, (c, h, w))]


def logistic_case(rng):
    return ad.logistic, [rng.standard_normal(rng.integers(1, 10)) * 3]


def reshape_case(rng):
    return (lambda x: ad.reshape(x, (-1,))), [rng.standard_normal((2, 3, rng.integers(1, 4)))]


def gather_rows_case(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, rng.integers(1, 8))   # repeats exercise accumulation
    return (lambda x: ad.gather_rows(x, idx)), [rng.standard_normal((n, 3))]


def column_slice_case(rng):
    cols = int(rng.integers(2, 7))
    a = int(rng.integers(0, cols - 1))
    b = int(rng.integers(a + 1, cols + 1))
    return (lambda x: ad.column_slice(x, a, b)), [rng.standard_normal((3, cols))]


def add_case(rng):
    shape = (rng.integers(1, 4), rng.integers(1, 4))
    return ad.add, [rng.standard_normal(shape), rng.standard_normal(shape)]


def scale_case(rng):
    shape = (rng.integers(1, 4), rng.integers(1, 4))
    f = rng.standard_normal(shape)
    return (lambda x: ad.scale(x, f)), [rng.standard_normal(shape)]


def subtract_constant_case(rng):
    shape = (rng.integers(1, 4), 4)
    t = rng.standard_normal(shape)
    return (lambda x: ad.subtract_constant(x, t)), [rng.standard_normal(shape)]


def total_case(rng):
    return ad.total, [rng.standard_normal((rng.integers(1, 4), rng.integers(1, 4)))]


def smooth_l1_case(rng):
    return ad.smooth_l1, [away_from(rng, (rng.integers(1, 5), 4), points=(1.0,), scale=2.0)]


def binary_log_loss_case(rng):
    n = int(rng.integers(1, 10))
    positive = rng.random(n) < 0.5
    return (lambda z: ad.binary_log_loss(z, positive)), [rng.standard_normal(n) * 4]


CASES = {
    "conv2d": conv2d_case,
    "maxpool2": maxpool2_case,
    "pad_to_even": pad_to_even_case,
    "relu": relu_case,
    "linear": linear_case,
    "batchnorm_train": batchnorm_train_case,
    "batchnorm_infer": batchnorm_infer_case,
    "resample_bilinear": resample_case,
    "concat_channels": concat_channels_case,
    "concat_features": concat_features_case,
    "roi_maxpool": roi_maxpool_case,
    "logistic": logistic_case,
    "reshape": reshape_case,
    "gather_rows": gather_rows_case,
    "column_slice": column_slice_case,
    "add": add_case,
    "scale": scale_case,
    "subtract_constant": subtract_constant_case,
    "total": total_case,
    "smooth_l1": smooth_l1_case,
    "binary_log_loss": binary_log_loss_case,
}


def worst_errors(name: str, instances: int = INSTANCES, seed: int = 0) -> list[float]:
    """Worst relative error over all inputs, one entry per random instance."""
    from evolving_boxes.gradcheck import check_op

    out = []
    for k in range(instances):
        rng = np.random.default_rng([seed, k, sum(map(ord, name))])
        build, inputs = CASES[name](rng)
        out.append(max(check_op(build, inputs, step=1e-3, seed=k)))
    return out
