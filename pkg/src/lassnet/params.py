"""Named parameter storage shared by the networks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff.init import kaiming_uniform


class ParamStore:
    """Hierarchically named trainable tensors plus non-trainable buffers."""

    def __init__(self, rng=None, dtype=np.float32):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype
        self.params = {}
        self.buffers = {}

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def add(self, name, array):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name, array):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(array, dtype=self.dtype).copy()
        return self.buffers[name]

    def linear(self, prefix, n_in, n_out):
        self.add(f"{prefix}/weight", kaiming_uniform(self.rng, (n_in, n_out), n_in, self.dtype))
        self.add(f"{prefix}/bias", np.zeros(n_out))

    def conv(self, prefix, c_in, c_out, k, bias=True):
        self.add(f"{prefix}/weight", kaiming_uniform(self.rng, (c_out, c_in, k, k), c_in * k * k, self.dtype))
        if bias:
            self.add(f"{prefix}/bias", np.zeros(c_out))

    def conv_transpose(self, prefix, c_in, c_out, k, bias=True):
        self.add(f"{prefix}/weight", kaiming_uniform(self.rng, (c_in, c_out, k, k), c_in * k * k, self.dtype))
        if bias:
            self.add(f"{prefix}/bias", np.zeros(c_out))

    def batch_norm(self, prefix, channels):
        self.add(f"{prefix}/gamma", np.ones(channels))
        self.add(f"{prefix}/beta", np.zeros(channels))
        self.add_buffer(f"{prefix}/running_mean", np.zeros(channels))
        self.add_buffer(f"{prefix}/running_var", np.ones(channels))

    def layer_norm(self, prefix, dim):
        self.add(f"{prefix}/gamma", np.ones(dim))
        self.add(f"{prefix}/beta", np.zeros(dim))

    def astype(self, dtype):
        """Cast every parameter and buffer in place (e.g. float64 for gradchecks)."""
        self.dtype = dtype
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def tensors(self):
        """All named arrays, parameters then buffers, in creation order."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out
