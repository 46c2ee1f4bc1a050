"""Layers and sequence encoders built on :mod:`quaddyn.autodiff`.

Sequence tensors are laid out (batch, time, features), oldest row first.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Minimal parameter container.

    Parameters are requires-grad ``Tensor`` attributes, buffers are plain
    ndarray attributes; both are discovered recursively in attribute order.
    """

    training = True

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out["buffer:" + name] = buf.copy()
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {"buffer:" + k for k in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"load {name}", p.shape, arr.shape)
            p.data = arr.copy()
        for name, buf in buffers.items():
            buf[...] = state["buffer:" + name]

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def begin_unroll(self):
        """Forget batch statistics cached by a previous unroll."""
        for m in self.modules():
            if isinstance(m, BatchNorm1d):
                m.frozen_stats = None


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, (n_in, n_out), n_in, n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class BatchNorm1d(Module):
    """Per-channel batch norm over (batch, time).

    During training the first call after :meth:`Module.begin_unroll`
    computes batch statistics; later calls in the same unroll reuse them
    (gradients still flow back into the first step).
    """

    def __init__(self, channels, momentum=0.1, eps=ad.BN_EPS):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.frozen_stats = None

    def __call__(self, x):
        y, stats = ad.batch_norm_1d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            momentum=self.momentum,
            eps=self.eps,
            stats=self.frozen_stats if self.training else None,
        )
        if self.training:
            self.frozen_stats = stats
        return y


class MLP(Module):
    """Linear layers with LeakyReLU between them (and after the last
    hidden layer when ``out`` is None)."""

    def __init__(self, n_in, sizes, rng, out=None, out_bias=None):
        self.layers = []
        prev = n_in
        for size in sizes:
            self.layers.append(Linear(prev, size, rng))
            prev = size
        self.out = None
        if out is not None:
            # zero output layer: an untrained model predicts "no change"
            self.out = Linear(prev, out, rng, zero=True)
            if out_bias is not None:
                self.out.bias.data = np.asarray(out_bias, dtype=float).copy()
            prev = out
        self.n_out = prev

    def __call__(self, x):
        for layer in self.layers:
            x = ad.leaky_relu(layer(x))
        if self.out is not None:
            x = self.out(x)
        return x


class MLPEncoder(Module):
    def __init__(self, n_features, history, sizes, rng):
        self.history = history
        self.mlp = MLP(n_features * history, sizes, rng)
        self.n_out = self.mlp.n_out

    def __call__(self, seq):
        b, h, f = seq.shape
        return self.mlp(ad.reshape(seq, (b, h * f)))


class LSTMLayer(Module):
    """Single-bias LSTM layer, gate order (input, forget, cell, output)."""

    def __init__(self, n_in, hidden, rng):
        self.hidden = hidden
        self.w_x = Tensor(glorot(rng, (n_in, 4 * hidden), n_in, hidden), requires_grad=True)
        self.w_h = Tensor(glorot(rng, (hidden, 4 * hidden), hidden, hidden), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * hidden), requires_grad=True)

    def __call__(self, seq):
        n = self.hidden
        pre = ad.add_bias(ad.matmul(seq, self.w_x), self.bias)
        h = c = None
        outs = []
        for t in range(seq.shape[1]):
            gates = pre[:, t, :]
            if h is not None:
                gates = gates + ad.matmul(h, self.w_h)
            i = ad.sigmoid(gates[:, 0:n])
            f = ad.sigmoid(gates[:, n:2 * n])
            g = ad.tanh(gates[:, 2 * n:3 * n])
            o = ad.sigmoid(gates[:, 3 * n:4 * n])
            c = i * g if c is None else f * c + i * g
            h = o * ad.tanh(c)
            outs.append(h)
        return outs


class GRULayer(Module):
    """Single-bias GRU layer: r, z gates and candidate n with
    ``n = tanh(x W_n + r * (h U_n) + b_n)``, ``h' = (1 - z) n + z h``."""

    def __init__(self, n_in, hidden, rng):
        self.hidden = hidden
        self.w_x = Tensor(glorot(rng, (n_in, 3 * hidden), n_in, hidden), requires_grad=True)
        self.w_h = Tensor(glorot(rng, (hidden, 3 * hidden), hidden, hidden), requires_grad=True)
        self.bias = Tensor(np.zeros(3 * hidden), requires_grad=True)

    def __call__(self, seq):
        n = self.hidden
        pre = ad.add_bias(ad.matmul(seq, self.w_x), self.bias)
        h = None
        outs = []
        for t in range(seq.shape[1]):
            xt = pre[:, t, :]
            if h is None:
                # h = 0: the reset gate has nothing to act on
                z = ad.sigmoid(xt[:, n:2 * n])
                cand = ad.tanh(xt[:, 2 * n:3 * n])
                h = cand - z * cand
            else:
                hu = ad.matmul(h, self.w_h)
                r = ad.sigmoid(xt[:, 0:n] + hu[:, 0:n])
                z = ad.sigmoid(xt[:, n:2 * n] + hu[:, n:2 * n])
                cand = ad.tanh(xt[:, 2 * n:3 * n] + r * hu[:, 2 * n:3 * n])
                h = cand + z * (h - cand)
            outs.append(h)
        return outs


class RecurrentEncoder(Module):
    """Stacked LSTM/GRU; the embedding is the top layer's last hidden state."""

    def __init__(self, cell, n_features, sizes, rng):
        self.layers = []
        prev = n_features
        for size in sizes:
            self.layers.append(cell(prev, size, rng))
            prev = size
        self.n_out = prev

    def __call__(self, seq):
        b = seq.shape[0]
        for idx, layer in enumerate(self.layers):
            outs = layer(seq)
            if idx + 1 < len(self.layers):
                seq = ad.concat([ad.reshape(h, (b, 1, h.shape[1])) for h in outs], axis=1)
        return outs[-1]


class TemporalBlock(Module):
    """Two causal dilated convolutions, each followed by batch norm and
    LeakyReLU, plus a residual (1x1 projection when widths differ)."""

    def __init__(self, n_in, n_out, kernel, dilation, rng):
        self.kernel = kernel
        self.dilation = dilation
        self.conv1 = Tensor(
            glorot(rng, (kernel, n_in, n_out), kernel * n_in, kernel * n_out),
            requires_grad=True,
        )
        self.bn1 = BatchNorm1d(n_out)
        self.conv2 = Tensor(
            glorot(rng, (kernel, n_out, n_out), kernel * n_out, kernel * n_out),
            requires_grad=True,
        )
        self.bn2 = BatchNorm1d(n_out)
        self.downsample = Linear(n_in, n_out, rng) if n_in != n_out else None

    def __call__(self, x):
        y = ad.leaky_relu(self.bn1(ad.causal_dilated_conv1d(x, self.conv1, self.dilation)))
        y = ad.leaky_relu(self.bn2(ad.causal_dilated_conv1d(y, self.conv2, self.dilation)))
        res = x if self.downsample is None else self.downsample(x)
        return ad.leaky_relu(y + res)


def tcn_schedule(history, n_layers, kernel, dilation_base):
    """Per-layer (kernel, dilation) for a TCN over ``history`` samples.

    Layer ``k`` uses dilation ``base**k``.  Taps that could only ever read
    left padding are dropped, which keeps ``dilation * (kernel - 1)`` below
    the sequence length without changing what the layer computes.
    """
    schedule = []
    for k in range(n_layers):
        d = dilation_base**k
        kk = kernel
        while kk > 1 and d * (kk - 1) >= history:
            kk -= 1
        schedule.append((kk, d))
    return schedule


def receptive_field(schedule, convs_per_block=2):
    return 1 + convs_per_block * sum(d * (k - 1) for k, d in schedule)


class TCNEncoder(Module):
    def __init__(self, n_features, history, sizes, kernel, dilation_base, rng):
        self.schedule = tcn_schedule(history, len(sizes), kernel, dilation_base)
        rf = receptive_field(self.schedule)
        if rf < history:
            raise ValueError(
                f"TCN receptive field {rf} does not cover history {history}; "
                "add layers or raise kernel/dilation base"
            )
        self.blocks = []
        prev = n_features
        for size, (k, d) in zip(sizes, self.schedule):
            self.blocks.append(TemporalBlock(prev, size, k, d, rng))
            prev = size
        self.n_out = prev

    def features(self, seq):
        """Full (batch, time, channels) output of the last block."""
        for block in self.blocks:
            seq = block(seq)
        return seq

    def __call__(self, seq):
        out = self.features(seq)
        return out[:, -1, :]
