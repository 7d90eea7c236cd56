import numpy as np

from ossir.gradcheck import check_gradients, random_projection_loss
from ossir.tensor import Tensor

TOL = 1e-5
H = 1e-4


def leaf(rng, *shape, name=None, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True, name=name)


def assert_grads(fn, inputs, tol=TOL, h=H, seed=0):
    """Finite-difference check of ``sum(fn(*inputs) * R)`` for a fixed random R."""
    errs = check_gradients(lambda: random_projection_loss(fn(*inputs), seed), inputs, h)
    bad = {k: v for k, v in errs.items() if not v < tol}
    assert not bad, f"gradient mismatch: {bad}"
    return errs


def rescale_for_gradcheck(module, rng):
    """Redraw weight matrices at unit fan-in gain so every branch carries signal.

    At the default 0.02 init the gated scan branches are so quiet that their
    parameter gradients sit below f64 finite-difference resolution. The dt
    bias is lifted too so step sizes are O(1) and the recurrence matters, and
    other biases get a small positive offset so pooled channel summaries
    neither cancel nor saturate the channel gate.
    """
    for name, p in module.named_parameters():
        if name.endswith("dt_bias"):
            p.data = rng.uniform(-0.5, 0.5, p.shape)
        elif name.endswith("bias"):
            p.data = rng.uniform(0.0, 0.5, p.shape)
        elif p.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:]))
            p.data = rng.standard_normal(p.shape) / np.sqrt(fan_in)


def conv_oracle(x, w, b, stride, pad):
    B, Cin, Hh, Ww = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (Hh + 2 * pad - k) // stride + 1
    Wo = (Ww + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    s = b[o] if b is not None else 0.0
                    for c in range(Cin):
                        for p in range(k):
                            for q in range(k):
                                s += xp[n, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[n, o, i, j] = s
    return out
