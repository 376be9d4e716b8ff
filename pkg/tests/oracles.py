"""Independent reference implementations and fixtures shared by the test modules."""
import math

import numpy as np

from nmrmos import nn
from nmrmos.model import ModelConfig, QualityNet
from nmrmos.nn import grad_check, parameter
from nmrmos.train import mtl_loss

KINK_MARGIN = 1e-3


def f64(x, name=None):
    return parameter(np.asarray(x, dtype=np.float64), name=name, dtype=np.float64)


def away_from_kinks(rng, shape, scale=1.0):
    x = rng.normal(size=shape) * scale
    x[np.abs(x) < KINK_MARGIN] = 0.5
    return x


def layer_cases(rng):
    """(name, fn, params) triples for every differentiable layer type."""
    cases = []
    x = f64(away_from_kinks(rng, (2, 3, 17)), "x")
    w = f64(rng.normal(size=(4, 3, 4)), "w")
    b = f64(rng.normal(size=4), "b")
    proj = rng.normal(size=(2, 4, 7))
    cases.append(("conv1d", lambda: (nn.conv1d(x, w, b, 2) * proj).sum(), [x, w, b]))

    xl = f64(rng.normal(size=(3, 5)), "x")
    wl = f64(rng.normal(size=(5, 4)), "w")
    bl = f64(rng.normal(size=4), "b")
    projl = rng.normal(size=(3, 4))
    cases.append(("linear", lambda: (nn.linear(xl, wl, bl) * projl).sum(), [xl, wl, bl]))

    xr = f64(away_from_kinks(rng, (4, 6)), "x")
    pr = rng.normal(size=(4, 6))
    cases.append(("relu", lambda: (nn.relu(xr) * pr).sum(), [xr]))

    xs = f64(rng.normal(size=(3, 5)), "x")
    ps = rng.normal(size=(3, 5))
    cases.append(("softmax", lambda: (nn.softmax(xs, axis=1) * ps).sum(), [xs]))
    cases.append(("softmax_axis0", lambda: (nn.softmax(xs, axis=0) * ps).sum(), [xs]))

    xg = f64(rng.normal(size=(5,)), "x")
    pg = rng.normal(size=5)
    cases.append(("sigmoid", lambda: (nn.sigmoid(xg) * pg).sum(), [xg]))

    a, c = f64(rng.normal(size=(2, 3)), "a"), f64(rng.normal(size=(2, 4)), "c")
    pc = rng.normal(size=(2, 7))
    cases.append(("concat", lambda: (nn.concat([a, c], axis=1) * pc).sum(), [a, c]))

    xm = f64(rng.normal(size=(3, 4)), "x")
    cases.append(("mean", lambda: nn.mean(xm * xm), [xm]))

    pred = f64(rng.normal(size=6), "pred")
    target = pred.data + np.where(rng.random(6) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, 6)
    cases.append(("l1_loss", lambda: nn.l1_loss(pred, target), [pred]))

    logits = f64(rng.normal(size=(4, 3)), "logits")
    onehot = np.eye(3)[rng.integers(0, 3, 4)]
    cases.append(("cross_entropy", lambda: nn.cross_entropy(logits, onehot), [logits]))

    pl = f64(rng.uniform(0.1, 0.9, size=(3, 2)), "p")
    cases.append(("log", lambda: (nn.log(pl, floor=1e-12) * onehot[:3, :2]).sum(), [pl]))
    return cases



# ---------------------------------------------------------------------------
# reduced pair model (2 conv layers, 8 channels) for finite-difference checks

REDUCED = ModelConfig(conv_channels=(8, 8), kernel_sizes=(4, 4), strides=(2, 2), head_hidden=8,
                      excerpt_samples=64)


def _preactivations(model, x):
    """Smallest |pre-ReLU| value anywhere in the pair network, and the r outputs."""
    p = model.params
    smallest = np.inf
    with nn.no_grad():
        h = model._as_batch(x)
        for i, s in enumerate(model.config.strides):
            pre = nn.conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], s, channels_last=True)
            smallest = min(smallest, float(np.min(np.abs(pre.data))))
            h = nn.relu(pre)
        z = model.downsample(h)
        n = x.shape[0] // 2
        cat = nn.concat([z[:n], z[n:]], axis=-1)
        for head in ("pref", "rel"):
            pre = nn.linear(cat, p[f"{head}.hidden.weight"], p[f"{head}.hidden.bias"])
            smallest = min(smallest, float(np.min(np.abs(pre.data))))
    return smallest


def reduced_pair_case(seed, batch=2, lambda_q=1.0):
    """(loss_fn, params) for the reduced model in float64, with inputs drawn away from ReLU kinks."""
    rng = np.random.default_rng(seed)
    model = QualityNet(ModelConfig(**{**REDUCED.to_dict(), "seed": seed})).astype(np.float64)
    for p in model.params.values():  # non-zero biases so every path is exercised
        if p.data.ndim == 1:
            p.data[:] = rng.normal(scale=0.1, size=p.data.shape)
    for _ in range(100):
        xi = rng.normal(size=(batch, REDUCED.excerpt_samples))
        xj = rng.normal(size=(batch, REDUCED.excerpt_samples))
        if _preactivations(model, np.concatenate([xi, xj])) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw inputs away from ReLU kinks")
    y = np.eye(2)[rng.integers(0, 2, batch)]
    with nn.no_grad():
        r = model.pair_forward(xi, xj).r.data
    # keep |r - s| away from the L1 kink
    s = np.where(r > 2.0, r - rng.uniform(0.2, 1.0, batch), r + rng.uniform(0.2, 1.0, batch))

    def loss_fn():
        return mtl_loss(model.pair_forward(xi, xj), y, s, lambda_q)

    return loss_fn, list(model.params.values())


def reduced_pair_report(seed, tolerance=1e-4):
    fn, params = reduced_pair_case(seed)
    return grad_check(fn, params, tolerance=tolerance)


# ---------------------------------------------------------------------------
# brute-force metrics: direct formulas in plain Python


def brute_mse(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def brute_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def brute_ranks(values):
    """Explicit ranking: each value's rank is 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(v < u for v in values) + (sum(v == u for v in values) - 1) / 2 for u in values]


def brute_spearman(a, b):
    return brute_pearson(brute_ranks(a), brute_ranks(b))


def rank_difference_spearman(a, b):
    """1 - 6 sum d^2 / (n (n^2 - 1)); valid without ties."""
    n = len(a)
    d2 = sum((x - y) ** 2 for x, y in zip(brute_ranks(a), brute_ranks(b)))
    return 1 - 6 * d2 / (n * (n * n - 1))


def brute_mp(embeddings, labels, k):
    """Precision@k by explicit per-query sorting on cosine similarity."""
    x = [np.asarray(e, dtype=np.float64) for e in embeddings]
    total = 0.0
    for q in range(len(x)):
        sims = []
        for i in range(len(x)):
            if i == q:
                continue
            nq, ni = np.linalg.norm(x[q]), np.linalg.norm(x[i])
            sim = float(x[q] @ x[i] / (nq * ni)) if nq > 0 and ni > 0 else 0.0
            sims.append((-sim, i))
        top = [i for _, i in sorted(sims)[:k]]
        total += sum(labels[i] == labels[q] for i in top) / k
    return total / len(x)
