"""Fully convolutional multi-type anomaly detector.

The network maps an image batch (N, c, h, w) to a raw map ``phi`` of shape
(N, M, u, v) where M is the number of anomaly types and u = h / 2^stages,
v = w / 2^stages. A pseudo-Huber transform ``sqrt(phi^2 + 1) - 1`` turns the
raw map into non-negative per-type heatmaps; bilinear upsampling back to the
input resolution gives the per-pixel explanation. Per-type image scores are
the spatial means of the low-resolution heatmaps (see :mod:`mtfcdd.loss`),
so upsampling affects only the explanation, never the score.

Architecture: a small trainable backbone of ``backbone_stages`` blocks
[3x3 conv + batch norm + ReLU + 2x2 max pool] with 32 * 2^stage filters,
followed by a head of ``head_blocks`` blocks [3x3 conv + batch norm + ReLU]
and a final 1x1 convolution with M output channels. The 1x1 layer carries no
bias by default so that all-zero features map to exactly zero anomaly
response; head 3x3 convolutions never carry biases because batch norm
follows them directly.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor, assert_finite
from .errors import ConfigError


@dataclass
class ModelConfig:
    num_types: int = 3
    input_size: tuple = (64, 64, 3)  # (h, w, c)
    backbone_stages: int = 3
    head_blocks: int = 2
    head_filters: int = 128
    head_bias: bool = False
    seed: int = 0

    def validate(self):
        h, w, c = self.input_size
        if self.num_types < 1:
            raise ConfigError("num_types must be >= 1")
        if self.backbone_stages not in (2, 3, 4):
            raise ConfigError("backbone_stages must be 2, 3 or 4")
        if self.head_blocks not in (1, 2, 3):
            raise ConfigError("head_blocks must be 1, 2 or 3")
        if self.head_filters < 1:
            raise ConfigError("head_filters must be >= 1")
        div = 2 ** self.backbone_stages
        if h % div or w % div:
            raise ConfigError(
                f"input size {h}x{w} not divisible by 2^{self.backbone_stages} = {div}"
            )
        if min(h, w) // div < 1 or c < 1:
            raise ConfigError(f"input size {self.input_size} too small")

    @property
    def heatmap_size(self):
        h, w, _ = self.input_size
        div = 2 ** self.backbone_stages
        return (h // div, w // div)

    def to_dict(self):
        d = self.__dict__.copy()
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class NetworkOutput:
    """Raw map, per-type heatmaps and (optionally) their upsampled version."""

    phi: Tensor  # (N, M, u, v)
    heatmaps: Tensor  # (N, M, u, v), >= 0, zero exactly where phi is zero
    upsampled: Tensor | None = None  # (N, M, h, w)


class ConvLayer:
    def __init__(self, name, c_in, c_out, kernel, rng, bias=False):
        self.name = name
        self.kernel = kernel
        self.padding = kernel // 2
        fan_in = c_in * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * std
        self.weight = Parameter(f"{name}.weight", w.astype(np.float32))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=np.float32)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNormLayer:
    def __init__(self, name, c):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(c, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(c, dtype=np.float32))
        self.state = BatchNormState(c)

    def __call__(self, x, train):
        return ad.batch_norm(x, self.gamma, self.beta, self.state, "train" if train else "eval")

    def parameters(self):
        return [self.gamma, self.beta]


class MultiTypeFCDD:
    """Backbone + convolutional head emitting one heatmap per anomaly type."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        h, w, c = config.input_size

        self.backbone = []
        c_in = c
        for stage in range(config.backbone_stages):
            c_out = 32 * 2 ** stage
            name = f"backbone{stage + 1}"
            self.backbone.append(
                (ConvLayer(f"{name}.conv", c_in, c_out, 3, rng), BatchNormLayer(f"{name}.bn", c_out))
            )
            c_in = c_out

        self.head = []
        for block in range(config.head_blocks):
            name = f"head{block + 1}"
            self.head.append(
                (ConvLayer(f"{name}.conv", c_in, config.head_filters, 3, rng),
                 BatchNormLayer(f"{name}.bn", config.head_filters))
            )
            c_in = config.head_filters

        self.output = ConvLayer("output", c_in, config.num_types, 1, rng, bias=config.head_bias)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        params = []
        for conv, bn in self.backbone + self.head:
            params += conv.parameters() + bn.parameters()
        params += self.output.parameters()
        return params

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def bn_states(self):
        states = {}
        for _, bn in self.backbone + self.head:
            states[bn.name] = bn.state
        return states

    # -- forward ------------------------------------------------------------

    def forward(self, batch, train=False, upsample=False) -> NetworkOutput:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        h, w, c = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ConfigError(
                f"input batch shape {x.shape} does not match configured size ({c}, {h}, {w})"
            )
        for conv, bn in self.backbone:
            x = conv(x)
            assert_finite(x.data, conv.name)
            x = bn(x, train)
            assert_finite(x.data, bn.name)
            x = ad.relu(x)
            x = ad.max_pool2(x)
        for conv, bn in self.head:
            x = conv(x)
            assert_finite(x.data, conv.name)
            x = bn(x, train)
            assert_finite(x.data, bn.name)
            x = ad.relu(x)
        phi = self.output(x)
        assert_finite(phi.data, self.output.name)
        heatmaps = ad.pseudo_huber(phi)
        out = NetworkOutput(phi=phi, heatmaps=heatmaps)
        if upsample:
            out = self.upsample_output(out)
        return out

    def upsample_output(self, output: NetworkOutput, target_h=None, target_w=None) -> NetworkOutput:
        h, w, _ = self.config.input_size
        if target_h is None:
            target_h = h
        if target_w is None:
            target_w = w
        if (target_h, target_w) != (h, w):
            raise ConfigError(
                f"upsample target {target_h}x{target_w} does not match configured input {h}x{w}"
            )
        output.upsampled = ad.bilinear_upsample(output.heatmaps, target_h, target_w)
        return output


ParameterCount = namedtuple("ParameterCount", ["total", "trainable", "frozen"])


def parameter_count(model_or_params) -> ParameterCount:
    """Count parameter values, split by trainable/frozen.

    Batch-norm running statistics are buffers, not parameters, and are not
    counted.
    """
    params = model_or_params.parameters() if hasattr(model_or_params, "parameters") else model_or_params
    total = trainable = 0
    for p in params:
        n = int(np.prod(p.shape))
        total += n
        if p.trainable:
            trainable += n
    return ParameterCount(total=total, trainable=trainable, frozen=total - trainable)


def build_model(config: ModelConfig) -> MultiTypeFCDD:
    """Validate the config and build the deterministically-initialized model."""
    return MultiTypeFCDD(config)
