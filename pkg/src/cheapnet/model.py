"""Realise an :class:`~cheapnet.graph.ArchDescriptor` as trainable modules."""
from typing import NamedTuple

import numpy as np

from .graph import BOTTLENECK_EXPANSION, ArchError
from .layers import BatchNorm, Linear, Module, avgpool2, gap, make_conv
from .tensor import Tensor, add, concat_channels, pad_channels, relu, subsample


class Output(NamedTuple):
    logits: Tensor
    features: Tensor  # last conv-stage output Z^L, before any head normalisation
    stage_maps: list  # output of each residual / dense stage, for attention transfer


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, conv, stride, rng, dtype):
        self.conv = make_conv(conv.kind, c_in, c_out, conv.k, stride, rng, conv.groups, dtype)
        self.bn = BatchNorm(c_out, dtype)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    """Post-activation residual block: conv-BN-ReLU-conv-BN + shortcut, ReLU."""

    def __init__(self, c_in, c_out, conv, stride, shortcut, rng, dtype):
        self.conv1 = make_conv(conv.kind, c_in, c_out, conv.k, stride, rng, conv.groups, dtype)
        self.bn1 = BatchNorm(c_out, dtype)
        self.conv2 = make_conv(conv.kind, c_out, c_out, conv.k, 1, rng, conv.groups, dtype)
        self.bn2 = BatchNorm(c_out, dtype)
        self.stride = stride
        self.pad = None
        self.shortcut = None
        if c_in != c_out or stride != 1:
            if shortcut == "conv":
                self.shortcut = make_conv("standard", c_in, c_out, 1, stride, rng, dtype=dtype)
                self.shortcut_bn = BatchNorm(c_out, dtype)
            else:
                extra = c_out - c_in
                self.pad = (extra // 2, extra - extra // 2)

    def _short(self, x):
        if self.shortcut is not None:
            return self.shortcut_bn(self.shortcut(x))
        x = subsample(x, self.stride)
        if self.pad is not None and sum(self.pad):
            x = pad_channels(x, *self.pad)
        return x

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return relu(add(y, self._short(x)))


class PreActBlock(Module):
    """Pre-activation (wide) residual block: BN-ReLU-conv-BN-ReLU-conv + shortcut."""

    def __init__(self, c_in, c_out, conv, stride, shortcut, rng, dtype):
        self.bn1 = BatchNorm(c_in, dtype)
        self.conv1 = make_conv(conv.kind, c_in, c_out, conv.k, stride, rng, conv.groups, dtype)
        self.bn2 = BatchNorm(c_out, dtype)
        self.conv2 = make_conv(conv.kind, c_out, c_out, conv.k, 1, rng, conv.groups, dtype)
        self.stride = stride
        self.shortcut = None
        self.pad = None
        if c_in != c_out or stride != 1:
            if shortcut == "conv":
                self.shortcut = make_conv("standard", c_in, c_out, 1, stride, rng, dtype=dtype)
            else:
                extra = c_out - c_in
                self.pad = (extra // 2, extra - extra // 2)

    def forward(self, x):
        a = relu(self.bn1(x))
        y = self.conv2(relu(self.bn2(self.conv1(a))))
        if self.shortcut is not None:
            short = self.shortcut(a)
        else:
            short = subsample(x, self.stride)
            if self.pad is not None and sum(self.pad):
                short = pad_channels(short, *self.pad)
        return add(y, short)


class Bottleneck(Module):
    def __init__(self, c_in, c_out, conv, stride, shortcut, rng, dtype):
        mid = c_out // BOTTLENECK_EXPANSION
        self.conv1 = make_conv("standard", c_in, mid, 1, 1, rng, dtype=dtype)
        self.bn1 = BatchNorm(mid, dtype)
        self.conv2 = make_conv(conv.kind, mid, mid, conv.k, stride, rng, conv.groups, dtype)
        self.bn2 = BatchNorm(mid, dtype)
        self.conv3 = make_conv("standard", mid, c_out, 1, 1, rng, dtype=dtype)
        self.bn3 = BatchNorm(c_out, dtype)
        self.stride = stride
        self.shortcut = None
        self.pad = None
        if c_in != c_out or stride != 1:
            if shortcut == "conv":
                self.shortcut = make_conv("standard", c_in, c_out, 1, stride, rng, dtype=dtype)
                self.shortcut_bn = BatchNorm(c_out, dtype)
            else:
                extra = c_out - c_in
                self.pad = (extra // 2, extra - extra // 2)

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        if self.shortcut is not None:
            short = self.shortcut_bn(self.shortcut(x))
        else:
            short = subsample(x, self.stride)
            if self.pad is not None and sum(self.pad):
                short = pad_channels(short, *self.pad)
        return relu(add(y, short))


class DenseLayer(Module):
    def __init__(self, c_in, growth, conv, rng, dtype):
        self.bn = BatchNorm(c_in, dtype)
        self.conv = make_conv(conv.kind, c_in, growth, conv.k, 1, rng, conv.groups, dtype)

    def forward(self, x):
        return concat_channels([x, self.conv(relu(self.bn(x)))])


class Transition(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        self.bn = BatchNorm(c_in, dtype)
        self.conv = make_conv("standard", c_in, c_out, 1, 1, rng, dtype=dtype)
        self.pool = stride == 2

    def forward(self, x):
        y = self.conv(relu(self.bn(x)))
        return avgpool2(y) if self.pool else y


class Sequence(Module):
    def __init__(self, items):
        self.items = list(items)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


class ClassifierHead(Module):
    """Optional BN-ReLU, then global average pooling and a linear classifier."""

    def __init__(self, channels, classes, norm, rng, dtype):
        self.bn = BatchNorm(channels, dtype) if norm else None
        self.fc = Linear(channels, classes, rng, dtype)

    def forward(self, z):
        if self.bn is not None:
            z = relu(self.bn(z))
        return self.fc(gap(z))


_RESIDUAL = {"basic": BasicBlock, "preact": PreActBlock, "bottleneck": Bottleneck}


class Network(Module):
    def __init__(self, arch, rng, dtype=np.float32):
        if arch.head is None:
            raise ArchError("descriptor has no classifier head; it can be analysed but not instantiated", "head")
        self.arch = arch
        self.stages = []
        self.tap = []  # whether the stage output feeds attention transfer
        c = arch.input.channels
        for st in arch.stages:
            blocks = []
            if st.block == "conv":
                for b in range(st.repeat):
                    blocks.append(ConvBNReLU(c if b == 0 else st.channels, st.channels, st.conv,
                                             st.stride if b == 0 else 1, rng, dtype))
                c = st.channels
            elif st.block in _RESIDUAL:
                cls = _RESIDUAL[st.block]
                for b in range(st.repeat):
                    blocks.append(cls(c, st.channels, st.conv, st.stride if b == 0 else 1, st.shortcut, rng, dtype))
                    c = st.channels
            elif st.block == "dense":
                for _ in range(st.repeat):
                    blocks.append(DenseLayer(c, st.channels, st.conv, rng, dtype))
                    c += st.channels
            else:
                blocks.append(Transition(c, st.channels, st.stride, rng, dtype))
                c = st.channels
            self.stages.append(Sequence(blocks))
            self.tap.append(st.block in _RESIDUAL or st.block == "dense")
        self.feature_channels = c
        self.head = ClassifierHead(c, arch.head.classes, arch.head.norm, rng, dtype)
        self.dtype = dtype

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        maps = []
        for stage, tap in zip(self.stages, self.tap):
            x = stage(x)
            if tap:
                maps.append(x)
        return Output(self.head(x), x, maps)


def instantiate(arch, seed=0, dtype=np.float32):
    """Build a network with deterministic fan-in-scaled Gaussian initialisation."""
    return Network(arch, np.random.default_rng(seed), dtype)


class TeacherHead(Module):
    """Online teacher on top of m student branches.

    Concatenates the branches' last feature maps along channels, then BN,
    ReLU, global average pooling and a fresh linear classifier.
    """

    def __init__(self, branch_channels, branches, classes, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        width = branch_channels * branches
        self.branches = branches
        self.bn = BatchNorm(width, dtype)
        self.fc = Linear(width, classes, rng, dtype)

    def forward(self, features):
        if len(features) != self.branches:
            raise ValueError(f"teacher expects {self.branches} feature maps, got {len(features)}")
        return self.fc(gap(relu(self.bn(concat_channels(features)))))
