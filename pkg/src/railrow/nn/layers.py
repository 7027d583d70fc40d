import numpy as np

from . import ops


def kaiming(rng, shape, fan_in, dtype=np.float32):
    w = rng.standard_normal(shape, dtype=np.float32)
    w *= np.float32(np.sqrt(2.0 / fan_in))
    return w.astype(dtype, copy=False)


class Layer:
    """A stateful forward/backward unit whose parameters live in a ParamStore."""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def param_names(self):
        return ()


class Conv2d(Layer):
    def __init__(self, store, name, c_in, c_out, kernel=3, stride=1, pad=0, rng=None):
        self.store, self.name = store, name
        self.c_in, self.c_out, self.kernel, self.stride, self.pad = c_in, c_out, kernel, stride, pad
        self.w_name, self.b_name = f"{name}.weight", f"{name}.bias"
        if self.w_name not in store:
            rng = rng if rng is not None else np.random.default_rng(0)
            store.add(self.w_name, kaiming(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
            store.add(self.b_name, np.zeros(c_out))
        self._cache = None

    def forward(self, x):
        out, self._cache = ops.conv2d_forward(x, self.store[self.w_name], self.store[self.b_name],
                                              self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = ops.conv2d_backward(dout, self._cache)
        self.store.accumulate(self.w_name, dw)
        self.store.accumulate(self.b_name, db)
        return dx

    def param_names(self):
        return (self.w_name, self.b_name)

    def output_shape(self, shape):
        c, h, w = shape
        return (self.c_out,
                ops.conv_output_size(h, self.kernel, self.stride, self.pad),
                ops.conv_output_size(w, self.kernel, self.stride, self.pad))


class Linear(Layer):
    def __init__(self, store, name, d_in, d_out, rng=None):
        self.store, self.name, self.d_in, self.d_out = store, name, d_in, d_out
        self.w_name, self.b_name = f"{name}.weight", f"{name}.bias"
        if self.w_name not in store:
            rng = rng if rng is not None else np.random.default_rng(0)
            store.add(self.w_name, kaiming(rng, (d_in, d_out), d_in))
            store.add(self.b_name, np.zeros(d_out))
        self._cache = None

    def forward(self, x):
        out, self._cache = ops.linear_forward(x, self.store[self.w_name], self.store[self.b_name])
        return out

    def backward(self, dout):
        dx, dw, db = ops.linear_backward(dout, self._cache)
        self.store.accumulate(self.w_name, dw)
        self.store.accumulate(self.b_name, db)
        return dx

    def param_names(self):
        return (self.w_name, self.b_name)

    def output_shape(self, shape):
        return (self.d_out,)


class ReLU(Layer):
    def forward(self, x):
        out, self._mask = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._mask)

    def output_shape(self, shape):
        return shape


class Flatten(Layer):
    def forward(self, x):
        out, self._shape = ops.flatten_forward(x)
        return out

    def backward(self, dout):
        return ops.flatten_backward(dout, self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        out, self._shape = ops.reshape_forward(x, self.shape)
        return out

    def backward(self, dout):
        return ops.reshape_backward(dout, self._shape)

    def output_shape(self, shape):
        return self.shape


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def param_names(self):
        return tuple(n for layer in self.layers for n in layer.param_names())

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape
