"""Named parameter registry and seed-reproducible initializers."""

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) clipped to two standard deviations."""
    return rng.normal(0.0, std, size=shape).clip(-2.0 * std, 2.0 * std)


class ParamStore:
    """Ordered name -> Tensor registry for all learnable state of a model."""

    def __init__(self):
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def named(self):
        return dict(self._params)

    def total_size(self):
        return sum(p.data.size for p in self._params.values())
