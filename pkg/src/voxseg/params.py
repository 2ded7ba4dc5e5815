"""Named parameter store with per-name deterministic initialization.

Each parameter is seeded from (global seed, crc32(name)), so a parameter
shared between two model variants gets identical initial values no matter
which other components are toggled on.
"""

import zlib

import numpy as np

from .autodiff import Tensor


class ConfigurationError(ValueError):
    pass


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    def __init__(self, seed=0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params = {}

    def param(self, name, shape, init="zeros", fan_in=None):
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        shape = tuple(shape)
        if init == "he_uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            data = he_uniform(rng, shape, fan_in)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigurationError(f"unknown init: {init}")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def count(self):
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigurationError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, data in state.items():
            t = self._params[name]
            if t.data.shape != data.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: {t.data.shape} vs {data.shape}")
            t.data = np.ascontiguousarray(data, dtype=t.data.dtype)
