"""Stateless layer objects and a sequential runner.

Parameters live outside the layers in a flat ``name -> array`` dict (so the
optimizer and checkpoint code can treat them uniformly); batch-norm running
statistics live in a second dict of *buffers*.  ``forward`` returns the
output and an opaque cache; ``backward`` consumes the cache and returns the
input gradient plus a dict of parameter gradients.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .rng import fan_in_uniform


class Layer:
    name = ""

    def init(self, params, buffers, rng):
        pass

    def forward(self, params, buffers, x, mode, update_stats):
        raise NotImplementedError

    def backward(self, params, cache, grad, need_input=True):
        raise NotImplementedError


class Conv3d(Layer):
    def __init__(self, name, spec: F.ConvSpec):
        self.name, self.spec = name, spec

    def init(self, params, buffers, rng):
        fan_in = self.spec.in_channels * int(np.prod(self.spec.kernel))
        params[f"{self.name}/w"] = fan_in_uniform(rng, self.spec.weight_shape, fan_in)
        params[f"{self.name}/b"] = fan_in_uniform(rng, (self.spec.out_channels,), fan_in)

    def forward(self, params, buffers, x, mode, update_stats):
        y = F.conv3d_forward(x, self.spec, params[f"{self.name}/w"], params[f"{self.name}/b"])
        return y, x

    def backward(self, params, x, grad, need_input=True):
        gx, gw, gb = F.conv3d_backward(x, self.spec, params[f"{self.name}/w"], grad,
                                       need_input=need_input)
        return gx, {f"{self.name}/w": gw, f"{self.name}/b": gb}


class Deconv3d(Layer):
    def __init__(self, name, spec: F.ConvSpec):
        self.name, self.spec = name, spec

    def init(self, params, buffers, rng):
        # each output voxel receives exactly in_channels taps when kernel == stride
        fan_in = self.spec.in_channels * int(np.prod(self.spec.kernel)) // self.spec.stride ** 3
        params[f"{self.name}/w"] = fan_in_uniform(rng, self.spec.transposed_weight_shape, fan_in)
        params[f"{self.name}/b"] = fan_in_uniform(rng, (self.spec.out_channels,), fan_in)

    def forward(self, params, buffers, x, mode, update_stats):
        y = F.deconv3d_forward(x, self.spec, params[f"{self.name}/w"], params[f"{self.name}/b"])
        return y, x

    def backward(self, params, x, grad, need_input=True):
        gx, gw, gb = F.deconv3d_backward(x, self.spec, params[f"{self.name}/w"], grad)
        return gx, {f"{self.name}/w": gw, f"{self.name}/b": gb}


class BatchNorm(Layer):
    def __init__(self, name, channels, momentum=0.9, epsilon=1e-5):
        self.name, self.channels = name, channels
        self.momentum, self.epsilon = momentum, epsilon

    def init(self, params, buffers, rng):
        params[f"{self.name}/gamma"] = np.ones(self.channels)
        params[f"{self.name}/beta"] = np.zeros(self.channels)
        buffers[f"{self.name}/running_mean"] = np.zeros(self.channels)
        buffers[f"{self.name}/running_var"] = np.ones(self.channels)

    def _state(self, params, buffers):
        return F.BatchNormState(params[f"{self.name}/gamma"], params[f"{self.name}/beta"],
                                buffers[f"{self.name}/running_mean"],
                                buffers[f"{self.name}/running_var"], self.momentum, self.epsilon)

    def forward(self, params, buffers, x, mode, update_stats):
        state = self._state(params, buffers)
        y, cache = F.batchnorm_forward(x, state, mode, update_stats)
        if mode == "train" and update_stats:
            buffers[f"{self.name}/running_mean"] = state.running_mean
            buffers[f"{self.name}/running_var"] = state.running_var
        return y, (cache, state)

    def backward(self, params, cache, grad, need_input=True):
        bn_cache, state = cache
        gx, gg, gb = F.batchnorm_backward(grad, state, bn_cache)
        return gx, {f"{self.name}/gamma": gg, f"{self.name}/beta": gb}


class ReLU(Layer):
    def forward(self, params, buffers, x, mode, update_stats):
        return F.relu(x), x

    def backward(self, params, x, grad, need_input=True):
        return F.relu_backward(x, grad), {}


class Sigmoid(Layer):
    def forward(self, params, buffers, x, mode, update_stats):
        y = F.sigmoid(x)
        return y, y

    def backward(self, params, y, grad, need_input=True):
        return F.sigmoid_backward(y, grad), {}


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, params, buffers, x, mode, update_stats):
        return x.reshape(self.shape), x.shape

    def backward(self, params, in_shape, grad, need_input=True):
        return grad.reshape(in_shape), {}


class Linear(Layer):
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def init(self, params, buffers, rng):
        params[f"{self.name}/w"] = fan_in_uniform(rng, (self.n_out, self.n_in), self.n_in)
        params[f"{self.name}/b"] = fan_in_uniform(rng, (self.n_out,), self.n_in)

    def forward(self, params, buffers, x, mode, update_stats):
        return F.linear(x, params[f"{self.name}/w"], params[f"{self.name}/b"]), x

    def backward(self, params, x, grad, need_input=True):
        gx, gw, gb = F.linear_backward(x, params[f"{self.name}/w"], grad)
        return gx, {f"{self.name}/w": gw, f"{self.name}/b": gb}


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, params, buffers, rng):
        for layer in self.layers:
            layer.init(params, buffers, rng)

    def forward(self, params, buffers, x, mode="train", update_stats=True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, buffers, x, mode, update_stats)
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, grad, need_input=True):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            first = i == 0
            grad, g = self.layers[i].backward(params, caches[i], grad,
                                              need_input=need_input or not first)
            grads.update(g)
        return grad, grads


class Standardize(Layer):
    """Fixed affine ``(x - mean) / scale`` with statistics held in buffers."""

    def __init__(self, name, features):
        self.name, self.features = name, features

    def init(self, params, buffers, rng):
        buffers[f"{self.name}/mean"] = np.zeros(self.features)
        buffers[f"{self.name}/scale"] = np.ones(self.features)

    def forward(self, params, buffers, x, mode, update_stats):
        scale = buffers[f"{self.name}/scale"]
        return (x - buffers[f"{self.name}/mean"]) / scale, scale

    def backward(self, params, scale, grad, need_input=True):
        return grad / scale, {}
