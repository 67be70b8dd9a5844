"""Tour of the autodiff core: a hand-checked gradient, then a spatial
transformer that starts as the identity and learns to undo a shift.

    python3 demos/01_gradients_and_transformers.py
"""
import numpy as np

from irisnet import nn, ops
from irisnet.stn import IDENTITY_THETA, STModuleConfig, SpatialTransformer, affine_grid, bilinear_sample
from irisnet.tensor import Tensor, no_grad

rng = np.random.default_rng(0)

# %% conv -> relu -> pool -> linear, and one central difference by hand
x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
conv = nn.Conv2d(1, 2, 3, 1, 1, rng=rng)
fc = nn.Linear(2 * 4 * 4, 1, rng=rng)


def forward():
    h = ops.relu(conv(Tensor(x)))
    h, _ = ops.maxpool2d(h, 2)
    return ops.sum(fc(ops.flatten(h)))


loss = forward()
loss.backward()
w = conv.weight.data
eps = 1e-3
w[0, 0, 1, 1] += eps
with no_grad():
    up = float(forward().data)
w[0, 0, 1, 1] -= 2 * eps
with no_grad():
    down = float(forward().data)
w[0, 0, 1, 1] += eps
print(f"dL/dw autodiff {conv.weight.grad[0, 0, 1, 1]:+.5f}  finite diff {(up - down) / (2 * eps):+.5f}")

# %% identity theta reproduces the input; a translation moves it
img = np.zeros((1, 1, 16, 16), np.float32)
img[0, 0, 6:10, 6:10] = 1.0
same = bilinear_sample(Tensor(img), affine_grid(IDENTITY_THETA[None], 16, 16)).data
print("identity max error", float(np.abs(same - img).max()))
shift = np.array([[1, 0, 0.25, 0, 1, 0]], np.float32)  # reads ~2 px to the right, so content moves left
moved = bilinear_sample(Tensor(img), affine_grid(shift, 16, 16)).data
print("square centre column before/after:", np.argwhere(img[0, 0].max(0)).mean(),
      np.argwhere(moved[0, 0].max(0) > 0.5).mean())

# %% a fresh ST module learns to undo that shift
st = SpatialTransformer(STModuleConfig.default(1, (16, 16), width=4), rng)
opt = nn.SGD(st.parameters(), lr=0.05)
for step in range(201):
    out = st(Tensor(moved))
    diff = ops.sub(out, Tensor(img))
    loss = ops.mean(ops.square(diff))
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  mse {float(loss.data):.5f}  theta {np.round(st.theta(Tensor(moved)).data[0], 3)}")
