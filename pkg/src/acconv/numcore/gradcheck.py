"""Central finite-difference verification of analytic gradients.

The error measure is the scaled relative error
``|a - fd| / max(1, |a|, |fd|)`` per coordinate; the unit floor keeps
coordinates whose true gradient is ~0 from turning FD round-off into
spurious failures while still flagging any real sign/scale bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cells, conv
from . import tensor as T
from .tensor import Tensor, backward, no_grad


def numeric_grad(f, x: Tensor, h=1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar-valued f with respect to x.data.

    `coords` limits evaluation to a list of flat indices (None = all);
    unevaluated coordinates are returned as NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idxs = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            fp = float(f().data.reshape(()))
            flat[i] = keep - h
            fm = float(f().data.reshape(()))
            flat[i] = keep
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.data.shape)


def scaled_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    mask = ~np.isnan(fd)
    if not mask.any():
        return 0.0
    a, b = analytic[mask], fd[mask]
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def gradcheck(f, wrt, h=1e-5, max_coords=None, rng=None) -> float:
    """Worst scaled relative error of d f() / d t over tensors in `wrt`.

    f must rebuild its graph on every call. With `max_coords`, a seeded
    random subset of coordinates per tensor is checked instead of all.
    """
    for t in wrt:
        t.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(
                t.data.size, size=max_coords, replace=False)
        fd = numeric_grad(f, t, h=h, coords=coords)
        worst = max(worst, scaled_rel_err(analytic, fd))
    return worst


@dataclass
class CheckResult:
    name: str
    max_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.threshold


def primitive_suite(seed=0, threshold=1e-6) -> list[CheckResult]:
    """FD-check every primitive on small seeded inputs."""
    rng = np.random.default_rng(seed)

    def rand(*shape, positive=False, margin=0.0):
        d = rng.uniform(0.2, 1.5, shape) if positive else rng.standard_normal(shape)
        if margin:  # keep relu/maxpool inputs away from their kinks
            d = np.where(np.abs(d) < margin, margin, d)
        return Tensor(d, requires_grad=True)

    checks = []

    def run(name, f, wrt, threshold=threshold):
        checks.append(CheckResult(name, gradcheck(f, wrt), threshold))

    a, b = rand(3, 4), rand(3, 4)
    run("add", lambda: (a + b).sum(), [a, b])
    run("sub", lambda: (a - b).sum(), [a, b])
    run("mul", lambda: (a * b * b).sum(), [a, b])
    dnum, dden = rand(3, 4), rand(3, 4, positive=True)
    run("div", lambda: (dnum / dden).sum(), [dnum, dden])
    bc1, bc2 = rand(3, 4), rand(4)
    run("broadcast_add", lambda: (bc1 + bc2).sum(), [bc1, bc2])
    x = rand(3, 4)
    run("neg", lambda: (-x).sum(), [x])
    run("exp", lambda: T.exp(x).sum(), [x])
    run("tanh", lambda: T.tanh(x).sum(), [x])
    run("sigmoid", lambda: T.sigmoid(x).sum(), [x])
    run("square", lambda: T.square(x).sum(), [x])
    xr = rand(3, 4, margin=0.05)
    run("relu", lambda: T.relu(xr).sum(), [xr])
    xp = rand(3, 4, positive=True)
    run("sqrt", lambda: T.sqrt(xp).sum(), [xp])
    run("log", lambda: T.log(xp).sum(), [xp])
    m1, m2 = rand(3, 5), rand(5, 2)
    run("matmul", lambda: T.matmul(m1, m2).sum(), [m1, m2])
    bm1, bm2 = rand(2, 3, 4), rand(2, 4, 2)
    run("bmm", lambda: T.bmm(bm1, bm2).sum(), [bm1, bm2])
    r = rand(2, 6)
    run("reshape", lambda: T.square(T.reshape(r, (3, 4))).sum(), [r])
    run("transpose", lambda: T.square(T.transpose(r)).sum(), [r])
    c1, c2 = rand(2, 3), rand(2, 2)
    run("concat", lambda: T.square(T.concat([c1, c2], axis=1)).sum(), [c1, c2])
    run("narrow", lambda: T.square(T.narrow(c1, 1, 1, 2)).sum(), [c1])
    s = rand(3, 4)
    run("sum_axis", lambda: T.square(T.tsum(s, axis=0)).sum(), [s])
    run("mean", lambda: T.square(T.tmean(s, axis=1)).sum(), [s])
    sm = rand(3, 5)
    run("softmax", lambda: T.square(T.softmax(sm, axis=1)).sum(), [sm])
    emb = rand(6, 3)
    ids = np.array([0, 2, 2, 5])
    run("embedding", lambda: T.square(T.embedding(emb, ids)).sum(), [emb])

    xc = rand(7, 2)
    kc = rand(3, 2, 4)
    run("conv1d_same", lambda: T.square(conv.conv1d(xc, kc)).sum(), [xc, kc])
    run("conv1d_valid",
        lambda: T.square(conv.conv1d(xc, kc, stride=2, padding="valid")).sum(),
        [xc, kc])
    xi = rand(6, 8, 2)
    ki = rand(3, 3, 2, 3)
    run("conv2d_same",
        lambda: T.square(conv.conv2d(xi, ki, stride=(1, 2))).sum(), [xi, ki])
    run("conv2d_stride32",
        lambda: T.square(conv.conv2d(xi, ki, stride=(3, 2))).sum(), [xi, ki])
    xm = rand(2, 6, 3, margin=0.05)
    run("maxpool1d_w2", lambda: T.square(conv.maxpool1d_w2(xm)).sum(), [xm])

    gru_rng = np.random.default_rng(seed + 1)
    gp = cells.GruParams.create(3, 4, gru_rng)
    gx, gh = rand(2, 3), rand(2, 4)
    gwrt = [gx, gh, gp.w_gates, gp.b_gates, gp.w_cand, gp.b_cand]
    run("gru_cell", lambda: T.square(cells.gru_cell(gx, gh, gp)).sum(), gwrt)
    lp = cells.LstmParams.create(3, 4, gru_rng)
    lx, lh, lc = rand(2, 3), rand(2, 4), rand(2, 4)
    lwrt = [lx, lh, lc, lp.w, lp.b]

    def lstm_loss():
        h2, c2 = cells.lstm_cell(lx, lh, lc, lp)
        return (T.square(h2) + T.square(c2)).sum()

    run("lstm_cell", lstm_loss, lwrt)

    # a deep composition exercising accumulation through reuse
    da, db = rand(4, 4), rand(4, 4)

    def deep():
        y = T.tanh(T.matmul(da, db))
        z = T.sigmoid(T.matmul(y, db)) + y
        return T.square(z).sum()

    run("deep_composition", deep, [da, db], threshold=1e-4)
    return checks
