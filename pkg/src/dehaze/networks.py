"""The five convolutional networks, with hand-written backward passes.

Each network caches what it needs during ``forward`` and accumulates parameter
gradients into ``self.grads`` during ``backward`` (call ``zero_grad`` between
steps). Parameter names are ``<layer>/<role>``; checkpoints prefix them with
the network name.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    BatchNorm,
    ConvLayer,
    ShapeError,
    activation_backward,
    activation_forward,
    batch_norm_backward,
    batch_norm_forward,
    check_nchw,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    split_channels,
)


class Network:
    name = "net"

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.convs: dict[str, ConvLayer] = {}
        self.norms: dict[str, BatchNorm] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.mode = "train"
        self._cache: dict[str, tuple] = {}

    def _add_conv(self, name, cin, cout, k, stride=1):
        self.convs[name] = ConvLayer.zeros(cin, cout, k, stride, self.dtype)

    def _add_norm(self, name, channels):
        self.norms[name] = BatchNorm.create(channels, self.dtype)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, conv in self.convs.items():
            out[f"{name}/kernel"] = conv.kernel
            out[f"{name}/bias"] = conv.bias
        for name, bn in self.norms.items():
            out[f"{name}/gamma"] = bn.gamma
            out[f"{name}/beta"] = bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.norms.items():
            out[f"{name}/running_mean"] = bn.running_mean
            out[f"{name}/running_var"] = bn.running_var
        return out

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def _acc(self, key, g):
        if key in self.grads:
            self.grads[key] += g
        else:
            self.grads[key] = g.copy()

    def _input(self, x):
        check_nchw(x)
        return np.asarray(x, dtype=self.dtype)

    # conv -> (batch norm) -> activation, with cached intermediates
    def _unit(self, name, x, act, norm=None, slope=0.2):
        z = conv2d_forward(x, self.convs[name])
        bn_cache = None
        if norm is not None:
            z, bn_cache = batch_norm_forward(z, self.norms[norm], self.mode)
        self._cache[name] = (x, z, bn_cache)
        return activation_forward(z, act, slope)

    def _unit_back(self, name, g, act, norm=None, slope=0.2):
        x, z, bn_cache = self._cache[name]
        g = activation_backward(z, act, g, slope)
        if norm is not None:
            g, gg, gb = batch_norm_backward(bn_cache, g)
            self._acc(f"{norm}/gamma", gg)
            self._acc(f"{norm}/beta", gb)
        gx, gk, gb = conv2d_backward(x, self.convs[name], g)
        self._acc(f"{name}/kernel", gk)
        self._acc(f"{name}/bias", gb)
        return gx


class CoarseNet(Network):
    """Four convolutions (16/16/16/1 filters, 11/9/7/5 wide), sigmoid output."""

    name = "coarse"
    spec = [(3, 16, 11), (16, 16, 9), (16, 16, 7), (16, 1, 5)]

    def __init__(self, dtype=np.float32):
        super().__init__(dtype)
        for i, (cin, cout, k) in enumerate(self.spec, 1):
            self._add_conv(f"conv{i}", cin, cout, k)

    def forward(self, hazy):
        x = self._input(hazy)
        if x.shape[1] != 3:
            raise ShapeError(f"coarse network expects 3 channels, got {x.shape[1]}", "channels")
        for i in (1, 2, 3):
            x = self._unit(f"conv{i}", x, "relu")
        return self._unit("conv4", x, "sigmoid")

    def backward(self, grad_out):
        g = self._unit_back("conv4", grad_out, "sigmoid")
        for i in (3, 2, 1):
            g = self._unit_back(f"conv{i}", g, "relu")
        return g


class FineNet(Network):
    """Fine-scale transmission network; layer 2 also sees the coarse map."""

    name = "fine"
    spec = [(3, 16, 7), (17, 16, 5), (16, 16, 3), (16, 1, 1)]

    def __init__(self, dtype=np.float32):
        super().__init__(dtype)
        for i, (cin, cout, k) in enumerate(self.spec, 1):
            self._add_conv(f"conv{i}", cin, cout, k)

    def forward(self, hazy, coarse_t):
        x = self._input(hazy)
        coarse_t = self._input(coarse_t)
        if coarse_t.shape[1] != 1:
            raise ShapeError("coarse transmission must have 1 channel", "channels")
        h = self._unit("conv1", x, "relu")
        h = concat_channels(h, coarse_t)
        h = self._unit("conv2", h, "relu")
        h = self._unit("conv3", h, "relu")
        return self._unit("conv4", h, "sigmoid")

    def backward(self, grad_out):
        """Returns (grad wrt hazy, grad wrt coarse_t)."""
        g = self._unit_back("conv4", grad_out, "sigmoid")
        g = self._unit_back("conv3", g, "relu")
        g = self._unit_back("conv2", g, "relu")
        g_h, g_coarse = split_channels(g, 16)
        g_x = self._unit_back("conv1", np.ascontiguousarray(g_h), "relu")
        return g_x, np.ascontiguousarray(g_coarse)


class HazeRemovalNet(Network):
    """Residual predictor: blocks of 3x3 convs whose input is stacked onto
    their output, then a linear 3-channel head. No batch normalization."""

    name = "haze"

    def __init__(self, in_channels=4, width=32, blocks=3, layers_per_block=3, dtype=np.float32):
        super().__init__(dtype)
        self.in_channels = in_channels
        self.blocks = blocks
        self.layers_per_block = layers_per_block
        c = in_channels
        self.block_inputs = []
        for b in range(1, blocks + 1):
            self.block_inputs.append(c)
            cin = c
            for j in range(1, layers_per_block + 1):
                self._add_conv(f"block{b}_conv{j}", cin, width, 3)
                cin = width
            c = width + c
        self._add_conv("out", c, 3, 3)

    def forward(self, hazy, transmission=None):
        """Returns (residual, dehazed = residual + hazy)."""
        hazy = self._input(hazy)
        if hazy.shape[1] != 3:
            raise ShapeError(f"haze removal expects a 3-channel image, got {hazy.shape[1]}", "channels")
        if self.in_channels == 4:
            if transmission is None:
                raise ValueError("this network needs a transmission map")
            x = concat_channels(hazy, self._input(transmission))
        else:
            x = hazy
        for b in range(1, self.blocks + 1):
            h = x
            for j in range(1, self.layers_per_block + 1):
                h = self._unit(f"block{b}_conv{j}", h, "relu")
            x = concat_channels(h, x)
        residual = self._unit("out", x, "identity")
        return residual, residual + hazy

    def backward(self, grad_residual, grad_dehazed=None):
        """Returns (grad wrt hazy, grad wrt transmission or None)."""
        g = self._unit_back("out", grad_residual, "identity")
        for b in range(self.blocks, 0, -1):
            width = self.convs[f"block{b}_conv{self.layers_per_block}"].out_channels
            g_h, g_skip = split_channels(g, width)
            g_h = np.ascontiguousarray(g_h)
            for j in range(self.layers_per_block, 0, -1):
                g_h = self._unit_back(f"block{b}_conv{j}", g_h, "relu")
            g = g_h + g_skip
        if grad_dehazed is not None:
            g = g.copy()
            g[:, :3] += grad_dehazed
        if self.in_channels == 4:
            return np.ascontiguousarray(g[:, :3]), np.ascontiguousarray(g[:, 3:])
        return g, None


class GeneratorNet(Network):
    """Refinement generator: conv-BN-ReLU stack with symmetric additive skips
    and a scaled tanh output in [0, 1]."""

    name = "generator"

    def __init__(self, depth=10, width=32, skips=4, dtype=np.float32):
        super().__init__(dtype)
        if skips >= depth / 2:
            raise ValueError("skips must pair layers strictly below the middle of the stack")
        self.depth = depth
        self.skips = skips
        for i in range(1, depth + 1):
            cin = 3 if i == 1 else width
            cout = 3 if i == depth else width
            self._add_conv(f"conv{i}", cin, cout, 3)
            if i < depth:
                self._add_norm(f"bn{i}", width)
        # layer L-i receives the output of layer i on top of its usual input
        self.skip_into = {depth - i: i for i in range(1, skips + 1)}

    def forward(self, image):
        x = self._input(image)
        if x.shape[1] != 3:
            raise ShapeError(f"generator expects 3 channels, got {x.shape[1]}", "channels")
        outs = {0: x}
        h = x
        for i in range(1, self.depth):
            if i in self.skip_into:
                h = h + outs[self.skip_into[i]]
            h = self._unit(f"conv{i}", h, "relu", norm=f"bn{i}")
            outs[i] = h
        if self.depth in self.skip_into:
            h = h + outs[self.skip_into[self.depth]]
        return self._unit(f"conv{self.depth}", h, "scaled_tanh")

    def backward(self, grad_out):
        g = self._unit_back(f"conv{self.depth}", grad_out, "scaled_tanh")
        # pending[i] collects gradient flowing into the output of layer i via skips
        pending: dict[int, np.ndarray] = {}
        if self.depth in self.skip_into:
            pending[self.skip_into[self.depth]] = g
        for i in range(self.depth - 1, 0, -1):
            if i in pending:
                g = g + pending.pop(i)
            g = self._unit_back(f"conv{i}", g, "relu", norm=f"bn{i}")
            if i in self.skip_into:
                pending[self.skip_into[i]] = g
        return g


class DiscriminatorNet(Network):
    """Four stride-2 convs with leaky ReLU (BN on 2-4), global average pool,
    1x1 conv and sigmoid: one probability per image."""

    name = "discriminator"
    widths = (32, 64, 128, 256)
    slope = 0.2

    def __init__(self, dtype=np.float32):
        super().__init__(dtype)
        cin = 3
        for i, cout in enumerate(self.widths, 1):
            self._add_conv(f"conv{i}", cin, cout, 3, stride=2)
            if i > 1:
                self._add_norm(f"bn{i}", cout)
            cin = cout
        self._add_conv("head", cin, 1, 1)

    @property
    def factor(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, image):
        x = self._input(image)
        if x.shape[1] != 3:
            raise ShapeError(f"discriminator expects 3 channels, got {x.shape[1]}", "channels")
        h, w = x.shape[2:]
        f = self.factor
        if h % f or w % f:
            raise ShapeError(
                f"discriminator input {h}x{w} must have height and width divisible by {f} "
                f"(e.g. {h - h % f or f}x{w - w % f or f})",
                "height" if h % f else "width",
            )
        for i in range(1, len(self.widths) + 1):
            x = self._unit(f"conv{i}", x, "leaky_relu", norm=f"bn{i}" if i > 1 else None, slope=self.slope)
        self._pool_shape = x.shape
        pooled = x.mean(axis=(2, 3), keepdims=True)
        return self._unit("head", pooled, "sigmoid").reshape(-1)

    def backward(self, grad_out):
        g = self._unit_back("head", np.asarray(grad_out, self.dtype).reshape(-1, 1, 1, 1), "sigmoid")
        n, c, h, w = self._pool_shape
        g = np.broadcast_to(g / (h * w), self._pool_shape).astype(self.dtype)
        for i in range(len(self.widths), 0, -1):
            g = self._unit_back(f"conv{i}", g, "leaky_relu", norm=f"bn{i}" if i > 1 else None, slope=self.slope)
        return g


def init_weights(net: Network, rng: np.random.Generator, zero_output: bool = False) -> Network:
    """He-normal kernels keyed to fan-in, zero biases, unit BN scale.

    ``zero_output`` zeroes the last convolution so the network starts at a
    neutral output (residual 0, sigmoid 0.5, ...).
    """
    names = list(net.convs)
    for name in names:
        conv = net.convs[name]
        fan_in = conv.in_channels * conv.size**2
        conv.kernel[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=conv.kernel.shape)
        conv.bias[...] = 0
    if zero_output:
        net.convs[names[-1]].kernel[...] = 0
    for bn in net.norms.values():
        bn.gamma[...] = 1
        bn.beta[...] = 0
        bn.running_mean[...] = 0
        bn.running_var[...] = 1
    return net
