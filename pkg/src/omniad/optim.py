"""AdamW optimizer with decoupled weight decay."""

import numpy as np

from .errors import DimensionError


class AdamW:
    """Adam with decoupled weight decay.

    The decay step ``p -= lr * wd * p`` is applied separately from the
    moment-based update; moments are bias-corrected.  Parameters whose grad
    slot is ``None`` are skipped entirely (they did not participate in the
    last backward pass), while an explicit zero gradient still applies decay.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        # params: ordered mapping name -> Tensor
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"adamw: gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flat name -> array view of the whole optimizer state, for checkpoints."""
        out = {"t": np.array(float(self.t))}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        for name, p in self.params.items():
            for prefix, store in (("m", self.m), ("v", self.v)):
                arr = arrays[f"{prefix}.{name}"]
                if arr.shape != p.data.shape:
                    raise DimensionError(
                        f"adamw: state {prefix}.{name} has shape {arr.shape}, expected {p.data.shape}")
                store[name] = arr.astype(np.float64, copy=True)
