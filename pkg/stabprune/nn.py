# -*- coding: utf-8 -*-
"""
    Minimal tensor and neural-network engine.

    Tensors wrap 32-bit numpy arrays. Operations executed while a ``Tape`` is
    active are recorded and ``Tape.gradient`` replays them in reverse to
    produce one gradient per requested parameter. Layers accept plain numpy
    arrays as well; that path never touches a tape and is what planning and
    rollouts use.
"""
import struct
import threading
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stabprune.errors import CheckpointError, GradientError, NonFiniteError, ShapeError

DTYPE = np.float32

_local = threading.local()


class Tensor:
    __slots__ = ('data', 'requires_grad', 'name')

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return 'Tensor(%s, shape=%s)' % (self.name or '', self.shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Records operations for reverse-mode differentiation."""

    def __init__(self):
        self.records = []
        self._produced = set()

    def __enter__(self):
        stack = getattr(_local, 'tapes', None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, output, inputs, backward):
        self.records.append((output, inputs, backward))
        self._produced.add(id(output))

    def gradient(self, loss, params):
        """Return ``{name: ndarray}`` with d(loss)/d(param) for each named param."""
        if not self.records:
            raise GradientError('gradient requested before any forward pass was recorded.')
        if loss.size != 1:
            raise ShapeError('loss must be a scalar, got shape %s.' % (loss.shape,))
        grads = {}
        if id(loss) in self._produced:
            grads[id(loss)] = np.ones_like(loss.data)
            for output, inputs, backward in reversed(self.records):
                g = grads.pop(id(output), None)
                if g is None:
                    continue
                for tensor, tensor_grad in zip(inputs, backward(g)):
                    if tensor_grad is None or not isinstance(tensor, Tensor) or not tensor.requires_grad:
                        continue
                    if id(tensor) in grads:
                        grads[id(tensor)] = grads[id(tensor)] + tensor_grad
                    else:
                        grads[id(tensor)] = tensor_grad
        result = OrderedDict()
        for name, param in params.items():
            g = grads.get(id(param))
            result[name] = np.zeros_like(param.data) if g is None else g.astype(param.data.dtype, copy=False)
        return result


def active_tape():
    stack = getattr(_local, 'tapes', None)
    return stack[-1] if stack else None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _emit(data, inputs, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ops

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x):
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def minimum(a, b):
    take_a = a.data <= b.data
    return _emit(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def elu(x):
    if not isinstance(x, Tensor):
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg)
    return _emit(out, (x,), lambda g: (np.where(x.data > 0, g, g * (neg + 1.0)),))


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def identity(x):
    return x


ACTIVATIONS = {'relu': relu, 'elu': elu, 'tanh': tanh, 'identity': identity}


# reductions and reshaping

def sum(x, axis=None):
    out = np.sum(x.data, axis=axis)
    if axis is None:
        return _emit(np.asarray(out, dtype=x.data.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))
    return _emit(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return x.reshape(shape)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=-1):
    if not any(isinstance(t, Tensor) for t in tensors):
        return np.concatenate(tensors, axis=axis)
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, index, axis=-1):
    """Select entries of ``x`` along ``axis``; gradients scatter back."""
    if not isinstance(x, Tensor):
        return np.take(x, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)
    return _emit(np.take(x.data, index, axis=axis), (x,), backward)


# layer kernels

def _dense_array(x, w, b):
    return x @ w.T + b


def _conv_windows(x, k, stride):
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_array(x, w, b, stride):
    k = w.shape[2]
    windows = _conv_windows(x, k, stride)
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def dense(x, weight, bias):
    out = _dense_array(x.data, weight.data, bias.data)

    def backward(g):
        grad_x = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return grad_x, g2.T @ x2, g2.sum(axis=0)
    return _emit(out, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride=1):
    k = weight.shape[2]
    windows = _conv_windows(x.data, k, stride)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]
    out_h, out_w = out.shape[2], out.shape[3]

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        grad_x = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_x[:, :, i:i + stride * (out_h - 1) + 1:stride,
                       j:j + stride * (out_w - 1) + 1:stride] += contrib
        return grad_x, grad_w, grad_b
    return _emit(out, (x, weight, bias), backward)


class Layer:
    kind = None

    def __init__(self, weight, bias, activation='identity'):
        if activation not in ACTIVATIONS:
            raise ShapeError('unknown activation %r.' % activation)
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)
        self.weight.requires_grad = self.bias.requires_grad = True
        self.activation = activation

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def param_count(self):
        return self.weight.size + self.bias.size

    def parameters(self):
        return [('weight', self.weight), ('bias', self.bias)]

    def copy(self, weight=None, bias=None):
        """Independent layer of the same kind, optionally with replacement arrays."""
        weight = self.weight.data.copy() if weight is None else np.ascontiguousarray(weight)
        bias = self.bias.data.copy() if bias is None else np.ascontiguousarray(bias)
        if self.kind == 'conv2d':
            return Conv2d(weight, bias, self.activation, self.stride)
        return Dense(weight, bias, self.activation)

    def __call__(self, x):
        return forward(self, x)


class Dense(Layer):
    kind = 'dense'

    def check_input(self, shape):
        if len(shape) < 1 or shape[-1] != self.in_features:
            raise ShapeError('dense layer expects input [..., %d], got %s (weight %s).'
                             % (self.in_features, tuple(shape), self.weight.shape))

    def output_shape(self, shape):
        return tuple(shape[:-1]) + (self.out_features,)

    def flops(self, input_shape=None):
        return 2 * self.in_features * self.out_features


class Conv2d(Layer):
    kind = 'conv2d'

    def __init__(self, weight, bias, activation='identity', stride=1):
        super().__init__(weight, bias, activation)
        if self.weight.data.ndim != 4 or self.weight.shape[2] != self.weight.shape[3] or self.weight.shape[2] < 1:
            raise ShapeError('conv2d weight must be [out, in, k, k] with k >= 1, got %s.' % (self.weight.shape,))
        self.stride = stride

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def spatial_out(self, h, w):
        k, s = self.kernel_size, self.stride
        return (h - k) // s + 1, (w - k) // s + 1

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_features or \
                shape[2] < self.kernel_size or shape[3] < self.kernel_size:
            raise ShapeError('conv2d layer expects input [N, %d, H>=%d, W>=%d], got %s (weight %s).'
                             % (self.in_features, self.kernel_size, self.kernel_size,
                                tuple(shape), self.weight.shape))

    def output_shape(self, shape):
        h, w = self.spatial_out(shape[2], shape[3])
        return (shape[0], self.out_features, h, w)

    def flops(self, input_shape):
        h, w = self.spatial_out(input_shape[-2], input_shape[-1])
        return 2 * self.kernel_size ** 2 * self.in_features * self.out_features * h * w


def forward(layer, x):
    """Apply ``layer`` to ``x`` (a Tensor on the tape path, an ndarray otherwise)."""
    traced = isinstance(x, Tensor)
    layer.check_input(x.shape)
    act = ACTIVATIONS[layer.activation]
    if layer.kind == 'conv2d':
        if traced:
            return act(conv2d(x, layer.weight, layer.bias, layer.stride))
        return act(_conv_array(x, layer.weight.data, layer.bias.data, layer.stride))
    if traced:
        return act(dense(x, layer.weight, layer.bias))
    return act(_dense_array(x, layer.weight.data, layer.bias.data))


def init_dense(in_features, out_features, rng, activation='identity', zero=False):
    bound = 1.0 / np.sqrt(in_features)
    if zero:
        w = np.zeros((out_features, in_features), dtype=DTYPE)
        b = np.zeros(out_features, dtype=DTYPE)
    else:
        w = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(DTYPE)
        b = rng.uniform(-bound, bound, size=out_features).astype(DTYPE)
    return Dense(w, b, activation)


def init_conv(in_channels, out_channels, kernel_size, rng, activation='identity', stride=1):
    bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)).astype(DTYPE)
    b = rng.uniform(-bound, bound, size=out_channels).astype(DTYPE)
    return Conv2d(w, b, activation, stride)


# optimizer

class AdamState:

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def optimizer_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
    """Apply one Adam update in place; ``state`` advances by one step."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError('gradient for unknown tensor %r.' % name)
        if g.shape != params[name].shape:
            raise ShapeError('gradient for %r has shape %s, tensor has %s.' % (name, g.shape, params[name].shape))
        if not np.all(np.isfinite(g)):
            raise NonFiniteError('non-finite gradient for tensor %r; step rejected.' % name, name=name)
    if clip_norm:
        total = np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()]))
        if total > clip_norm:
            scale = clip_norm / (total + 1e-6)
            grads = {name: g * scale for name, g in grads.items()}
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        param = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)
    return params, state


class Adam:

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def step(self, grads):
        optimizer_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.clip_norm)


# checkpoints

MAGIC = b'NNCP'
VERSION = 1


def _named_arrays(tensors):
    if hasattr(tensors, 'named_tensors'):
        tensors = tensors.named_tensors()
    for name, value in tensors.items():
        yield name, value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(tensors, path):
    """Write a model (anything with ``named_tensors()``) or a name->array mapping."""
    entries = list(_named_arrays(tensors))
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError('duplicate tensor names in checkpoint.')
    chunks = [MAGIC, struct.pack('<II', VERSION, len(entries))]
    for name, array in entries:
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack('<%dI' % array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    with open(path, 'wb') as f:
        f.write(b''.join(chunks))


class _Reader:

    def __init__(self, buffer):
        self.buffer = buffer
        self.pos = 0
        self.entry = None

    def read(self, size, what):
        if self.pos + size > len(self.buffer):
            where = ' in entry %r' % self.entry if self.entry else ''
            raise CheckpointError('checkpoint truncated reading %s%s at byte %d.' % (what, where, self.pos),
                                  position=self.pos, entry=self.entry)
        chunk = self.buffer[self.pos:self.pos + size]
        self.pos += size
        return chunk


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: float32 ndarray}`` mapping."""
    with open(path, 'rb') as f:
        reader = _Reader(f.read())
    if reader.read(4, 'magic') != MAGIC:
        raise CheckpointError('bad checkpoint magic at byte 0.', position=0)
    version, count = struct.unpack('<II', reader.read(8, 'header'))
    if version != VERSION:
        raise CheckpointError('unsupported checkpoint version %d at byte 4.' % version, position=4)
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack('<H', reader.read(2, 'name length'))
        name = reader.read(name_len, 'name').decode('utf-8')
        if name in tensors:
            raise CheckpointError('duplicate tensor %r at byte %d.' % (name, reader.pos),
                                  position=reader.pos, entry=name)
        reader.entry = name
        (rank,) = struct.unpack('<B', reader.read(1, 'rank'))
        dims = struct.unpack('<%dI' % rank, reader.read(4 * rank, 'dims'))
        payload = reader.read(4 * int(np.prod(dims, dtype=np.int64)), 'payload')
        tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(dims).astype(DTYPE)
        reader.entry = None
    return tensors


# gradient checking

def gradcheck(fn, params, h=1e-3):
    """Compare tape gradients with central differences, in float64.

    ``fn`` rebuilds the scalar loss from ``params`` (name->Tensor). Returns
    ``{name: relative error}`` where the error is the largest absolute
    difference scaled by the largest gradient magnitude of that tensor.
    """
    originals = {name: p.data for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
        with Tape() as tape:
            loss = fn()
        analytic = tape.gradient(loss, params)
        errors = {}
        for name, p in params.items():
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                up = fn().item()
                flat[i] = saved - h
                down = fn().item()
                flat[i] = saved
                numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
            scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic[name])), 1e-8)
            errors[name] = float(np.max(np.abs(numeric - analytic[name])) / scale)
        return errors
    finally:
        for name, p in params.items():
            p.data = originals[name]
