"""Tour of the tensor engine: tape autodiff, finite differences, TNSR files.

Run:  python demos/01_autodiff_and_gradcheck.py
"""

from pathlib import Path

import numpy as np

import acconv.numcore as nc
from acconv.numcore import Tensor

OUT = Path(__file__).parent / "out" / "01_autodiff"
OUT.mkdir(parents=True, exist_ok=True)

# --- reverse mode in three lines of user code ------------------------------
x = Tensor(3.0, requires_grad=True)
y = nc.square(x) + 2.0 * x
nc.backward(y)
print(f"d/dx (x^2 + 2x) at x=3: {x.grad}  (expect 8)")

# a tensor used twice accumulates gradient once per use
w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
nc.backward(nc.tsum(w + w))
print(f"d/dw sum(w + w): {w.grad}  (expect [2, 2])")

# --- everything is checked against central finite differences --------------
rng = np.random.default_rng(0)
a = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
b = Tensor(rng.standard_normal((6, 3)), requires_grad=True)


def loss():
    return nc.tsum(nc.square(nc.tanh(nc.matmul(a, b))))


err = nc.gradcheck(loss, [a, b])
print(f"tanh(matmul) vs finite differences: worst scaled error {err:.2e}")

# the packaged suite sweeps every primitive
rows = nc.primitive_suite(seed=0)
worst = max(rows, key=lambda r: r.max_err)
print(f"primitive suite: {len(rows)} components, worst {worst.name} "
      f"at {worst.max_err:.2e}")
assert all(r.passed for r in rows)

# --- TNSR serialization -----------------------------------------------------
arr = rng.standard_normal((5, 7))
nc.write_tensor(OUT / "example.tnsr", arr)
back = nc.read_tensor(OUT / "example.tnsr")
print(f"TNSR round trip exact: {np.array_equal(arr, back)}")

nc.write_bundle(OUT / "bundle.tnsr", {"layer.w": arr, "layer.b": np.zeros(7)})
names = list(nc.read_bundle(OUT / "bundle.tnsr"))
print(f"bundle entries: {names}")
