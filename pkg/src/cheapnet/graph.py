"""Declarative network descriptions and the cheap-convolution rewrite.

An architecture file is JSON::

    {"name": "resnet8",
     "input": {"channels": 3, "height": 32, "width": 32},
     "stages": [{"block": "conv",  "channels": 16, "conv": {"kind": "standard", "k": 3, "groups": 1},
                 "stride": 1, "repeat": 1},
                {"block": "basic", "channels": 32, "conv": {...}, "stride": 2, "repeat": 1,
                 "shortcut": "pad"}],
     "head": {"classes": 10}}

``channels`` is the stage's output width, except for ``dense`` stages where it
is the growth rate.  ``input`` and ``in_channels`` are optional; when present
``in_channels`` must agree with the previous stage's output.  A ``null`` head
describes a bare backbone that can be costed but not instantiated.
"""
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

from .layers import CHEAP_KINDS

BLOCKS = ("conv", "basic", "preact", "bottleneck", "dense", "transition")
RESIDUAL_BLOCKS = ("basic", "preact", "bottleneck")
CONV_CHOICES = ("standard",) + CHEAP_KINDS
SHORTCUTS = ("pad", "conv")
BOTTLENECK_EXPANSION = 4


class ArchError(ValueError):
    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ConvChoice:
    kind: str = "standard"
    k: int = 3
    groups: int = 1


@dataclass(frozen=True)
class Stage:
    block: str
    channels: int
    conv: ConvChoice = field(default_factory=ConvChoice)
    stride: int = 1
    repeat: int = 1
    shortcut: str = None
    in_channels: int = None

    def out_channels(self, c_in):
        if self.block == "dense":
            return c_in + self.repeat * self.channels
        return self.channels


@dataclass(frozen=True)
class Head:
    classes: int
    norm: bool = False


@dataclass(frozen=True)
class InputShape:
    channels: int = 3
    height: int = 32
    width: int = 32


@dataclass(frozen=True)
class ArchDescriptor:
    name: str
    stages: tuple
    head: Head
    input: InputShape = field(default_factory=InputShape)

    @property
    def entries(self):
        return self.stages if self.head is None else self.stages + (self.head,)

    @property
    def feature_channels(self):
        c = self.input.channels
        for st in self.stages:
            c = st.out_channels(c)
        return c


@dataclass(frozen=True)
class Site:
    """One parameterised layer found by :func:`layer_sites`."""

    id: str
    op: str  # "conv", "bn" or "fc"
    c_in: int
    c_out: int
    in_hw: tuple
    out_hw: tuple
    kind: str = "standard"
    k: int = 1
    groups: int = 1
    stride: int = 1


# -- parsing ---------------------------------------------------------------
def _int(obj, key, path, default=None, minimum=1):
    if key not in obj:
        if default is None:
            raise ArchError(f"missing field {key!r}", path)
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ArchError(f"field {key!r} must be an integer, got {val!r}", f"{path}.{key}")
    if val < minimum:
        raise ArchError(f"field {key!r} must be >= {minimum}, got {val}", f"{path}.{key}")
    return val


def _conv_from(obj, path):
    if obj is None:
        return ConvChoice()
    if not isinstance(obj, dict):
        raise ArchError("conv must be an object", path)
    kind = obj.get("kind", "standard")
    if kind not in CONV_CHOICES:
        raise ArchError(f"unknown conv kind {kind!r} (expected one of {CONV_CHOICES})", f"{path}.kind")
    k = _int(obj, "k", path, default=3)
    if k % 2 == 0:
        raise ArchError(f"kernel size must be odd, got {k}", f"{path}.k")
    groups = _int(obj, "groups", path, default=1)
    if kind != "group" and groups != 1:
        raise ArchError(f"groups={groups} only allowed with kind 'group'", f"{path}.groups")
    if kind == "group" and groups < 2:
        raise ArchError("group conv needs groups >= 2", f"{path}.groups")
    unknown = set(obj) - {"kind", "k", "groups"}
    if unknown:
        raise ArchError(f"unknown conv fields {sorted(unknown)}", path)
    return ConvChoice(kind, k, groups)


def from_dict(doc):
    """Build and validate a descriptor from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ArchError("architecture document must be a JSON object")
    name = doc.get("name", "unnamed")
    if not isinstance(name, str):
        raise ArchError("name must be a string", "name")
    inp = doc.get("input", {})
    if not isinstance(inp, dict):
        raise ArchError("input must be an object", "input")
    input_shape = InputShape(_int(inp, "channels", "input", 3), _int(inp, "height", "input", 32),
                             _int(inp, "width", "input", 32))
    stages_doc = doc.get("stages")
    if not isinstance(stages_doc, list):
        raise ArchError("missing or non-list field 'stages'", "stages")
    head_doc = doc.get("head")
    if head_doc is not None and not isinstance(head_doc, dict):
        raise ArchError("head must be an object or null", "head")

    stages = []
    c = input_shape.channels
    for i, sd in enumerate(stages_doc):
        path = f"stages[{i}]"
        if not isinstance(sd, dict):
            raise ArchError("stage must be an object", path)
        block = sd.get("block")
        if block not in BLOCKS:
            raise ArchError(f"unknown block type {block!r} (expected one of {BLOCKS})", f"{path}.block")
        unknown = set(sd) - {"block", "channels", "conv", "stride", "repeat", "shortcut", "in_channels"}
        if unknown:
            raise ArchError(f"unknown stage fields {sorted(unknown)}", path)
        channels = _int(sd, "channels", path)
        conv = _conv_from(sd.get("conv"), f"{path}.conv")
        stride = _int(sd, "stride", path, default=1)
        repeat = _int(sd, "repeat", path, default=1)
        if "in_channels" in sd:
            declared = _int(sd, "in_channels", path)
            if declared != c:
                raise ArchError(f"channel mismatch: stage declares in_channels={declared} but receives {c}",
                                f"{path}.in_channels")
        shortcut = sd.get("shortcut")
        if block in RESIDUAL_BLOCKS:
            shortcut = shortcut or "conv"
            if shortcut not in SHORTCUTS:
                raise ArchError(f"unknown shortcut {shortcut!r} (expected one of {SHORTCUTS})", f"{path}.shortcut")
            if shortcut == "pad" and channels < c:
                raise ArchError(f"pad shortcut cannot shrink {c} -> {channels} channels", f"{path}.shortcut")
            if block == "bottleneck" and channels % BOTTLENECK_EXPANSION:
                raise ArchError(f"bottleneck width {channels} not divisible by {BOTTLENECK_EXPANSION}",
                                f"{path}.channels")
        elif shortcut is not None:
            raise ArchError(f"shortcut not allowed on {block!r} stages", f"{path}.shortcut")
        if block == "dense" and stride != 1:
            raise ArchError("dense stages cannot be strided; use a transition", f"{path}.stride")
        if block == "transition":
            if conv.k != 1 or conv.kind != "standard":
                raise ArchError("transition conv must be a standard 1x1", f"{path}.conv")
            if stride not in (1, 2) or repeat != 1:
                raise ArchError("transition takes stride 1 or 2 and repeat 1", path)
        st = Stage(block, channels, conv, stride, repeat, shortcut, c)
        stages.append(st)
        c = st.out_channels(c)

    head = None
    if head_doc is not None:  # a null head describes a bare backbone (cost analysis only)
        classes = _int(head_doc, "classes", "head")
        norm = head_doc.get("norm")
        if norm is None:
            norm = _default_norm(stages)
        elif not isinstance(norm, bool):
            raise ArchError("head.norm must be a boolean", "head.norm")
        head = Head(classes, norm)
    arch = ArchDescriptor(name, tuple(stages), head, input_shape)
    check_groups(arch)
    return arch


def _default_norm(stages):
    return bool(stages) and stages[-1].block in ("preact", "dense", "transition")


def parse_arch(text):
    """Parse an architecture document; errors name the line or field at fault."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(doc)


def to_dict(arch):
    stages = []
    for st in arch.stages:
        d = {"block": st.block, "in_channels": st.in_channels, "channels": st.channels,
             "conv": asdict(st.conv), "stride": st.stride, "repeat": st.repeat}
        if st.block in RESIDUAL_BLOCKS:
            d["shortcut"] = st.shortcut
        stages.append(d)
    head = None if arch.head is None else asdict(arch.head)
    return {"name": arch.name, "input": asdict(arch.input), "stages": stages, "head": head}


def serialize(arch):
    return json.dumps(to_dict(arch), indent=2) + "\n"


def load_arch(path_or_preset):
    """Load an architecture from a file path, or a shipped preset by name."""
    from pathlib import Path

    p = Path(path_or_preset)
    if p.is_file():
        return parse_arch(p.read_text())
    if path_or_preset in PRESETS:
        return preset(path_or_preset)
    raise ArchError(f"no architecture file or preset named {path_or_preset!r}")


# -- structural walk --------------------------------------------------------
def _conv_out(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def layer_sites(arch):
    """Yield every conv / BN / FC layer in forward order with its shapes."""
    c, h, w = arch.input.channels, arch.input.height, arch.input.width
    for si, st in enumerate(arch.stages):
        k, kind, g = st.conv.k, st.conv.kind, st.conv.groups
        for b in range(st.repeat):
            pre = f"s{si}.b{b}"
            s = st.stride if b == 0 else 1
            ho, wo = _conv_out(h, w, s)
            if st.block == "conv":
                yield Site(f"{pre}.conv", "conv", c, st.channels, (h, w), (ho, wo), kind, k, g, s)
                yield Site(f"{pre}.bn", "bn", st.channels, st.channels, (ho, wo), (ho, wo))
                c, h, w = st.channels, ho, wo
            elif st.block == "basic":
                out = st.channels
                yield Site(f"{pre}.conv1", "conv", c, out, (h, w), (ho, wo), kind, k, g, s)
                yield Site(f"{pre}.bn1", "bn", out, out, (ho, wo), (ho, wo))
                yield Site(f"{pre}.conv2", "conv", out, out, (ho, wo), (ho, wo), kind, k, g, 1)
                yield Site(f"{pre}.bn2", "bn", out, out, (ho, wo), (ho, wo))
                if (c != out or s != 1) and st.shortcut == "conv":
                    yield Site(f"{pre}.shortcut", "conv", c, out, (h, w), (ho, wo), "standard", 1, 1, s)
                    yield Site(f"{pre}.shortcut_bn", "bn", out, out, (ho, wo), (ho, wo))
                c, h, w = out, ho, wo
            elif st.block == "preact":
                out = st.channels
                yield Site(f"{pre}.bn1", "bn", c, c, (h, w), (h, w))
                yield Site(f"{pre}.conv1", "conv", c, out, (h, w), (ho, wo), kind, k, g, s)
                yield Site(f"{pre}.bn2", "bn", out, out, (ho, wo), (ho, wo))
                yield Site(f"{pre}.conv2", "conv", out, out, (ho, wo), (ho, wo), kind, k, g, 1)
                if (c != out or s != 1) and st.shortcut == "conv":
                    yield Site(f"{pre}.shortcut", "conv", c, out, (h, w), (ho, wo), "standard", 1, 1, s)
                c, h, w = out, ho, wo
            elif st.block == "bottleneck":
                out = st.channels
                mid = out // BOTTLENECK_EXPANSION
                yield Site(f"{pre}.conv1", "conv", c, mid, (h, w), (h, w), "standard", 1, 1, 1)
                yield Site(f"{pre}.bn1", "bn", mid, mid, (h, w), (h, w))
                yield Site(f"{pre}.conv2", "conv", mid, mid, (h, w), (ho, wo), kind, k, g, s)
                yield Site(f"{pre}.bn2", "bn", mid, mid, (ho, wo), (ho, wo))
                yield Site(f"{pre}.conv3", "conv", mid, out, (ho, wo), (ho, wo), "standard", 1, 1, 1)
                yield Site(f"{pre}.bn3", "bn", out, out, (ho, wo), (ho, wo))
                if (c != out or s != 1) and st.shortcut == "conv":
                    yield Site(f"{pre}.shortcut", "conv", c, out, (h, w), (ho, wo), "standard", 1, 1, s)
                    yield Site(f"{pre}.shortcut_bn", "bn", out, out, (ho, wo), (ho, wo))
                c, h, w = out, ho, wo
            elif st.block == "dense":
                yield Site(f"{pre}.bn", "bn", c, c, (h, w), (h, w))
                yield Site(f"{pre}.conv", "conv", c, st.channels, (h, w), (h, w), kind, k, g, 1)
                c += st.channels
            elif st.block == "transition":
                yield Site(f"{pre}.bn", "bn", c, c, (h, w), (h, w))
                yield Site(f"{pre}.conv", "conv", c, st.channels, (h, w), (h, w), "standard", 1, 1, 1)
                c = st.channels
                if st.stride == 2:
                    h, w = h // 2, w // 2
    if arch.head is None:
        return
    if arch.head.norm:
        yield Site("head.bn", "bn", c, c, (h, w), (h, w))
    yield Site("head.fc", "fc", c, arch.head.classes, (1, 1), (1, 1))


def check_groups(arch):
    """Raise if a group conv's group count does not divide the channels it sees."""
    bad = [f"{s.id} (C_in={s.c_in})" for s in layer_sites(arch)
           if s.op == "conv" and s.kind == "group" and s.k > 1 and s.c_in % s.groups]
    if bad:
        g = next(st.conv.groups for st in arch.stages if st.conv.kind == "group")
        raise ArchError(f"groups={g} does not divide the input channels of: " + ", ".join(bad))


# -- rewriting -----------------------------------------------------------
def substitute_conv(arch, target_kind, groups=None, keep_stem=True):
    """Replace every standard K x K conv (K > 1) with ``target_kind`` + pointwise.

    1x1 convs, shortcuts, transitions and the head are untouched; with
    ``keep_stem`` the leading input conv stage stays standard too.
    """
    if target_kind not in CHEAP_KINDS:
        raise ValueError(f"target kind must be one of {CHEAP_KINDS}, got {target_kind!r}")
    if (target_kind == "group") != (groups is not None):
        raise ValueError("groups is required for kind 'group' and only for it")
    choice = ConvChoice(target_kind, 0, groups or 1)
    stages, changed = [], False
    for i, st in enumerate(arch.stages):
        stem = keep_stem and i == 0 and st.block == "conv"
        if not stem and st.conv.kind == "standard" and st.conv.k > 1 and st.block != "transition":
            st = replace(st, conv=replace(choice, k=st.conv.k))
            changed = True
        stages.append(st)
    if not changed:
        return arch
    suffix = f"group{groups}" if target_kind == "group" else target_kind
    out = replace(arch, name=f"{arch.name}-{suffix}", stages=tuple(stages))
    check_groups(out)
    return out


# -- presets ---------------------------------------------------------------
def _conv(k=3):
    return ConvChoice("standard", k, 1)


def _finish(name, stages, classes, norm, input_shape):
    doc = {"name": name, "input": asdict(input_shape),
           "stages": [{k: v for k, v in asdict(s).items() if v is not None} for s in stages],
           "head": {"classes": classes, "norm": norm}}
    return from_dict(doc)


def resnet(depth, classes=10, width=16, shortcut="pad", input_shape=InputShape()):
    """CIFAR ResNet of depth 6n+2 with basic blocks at widths w, 2w, 4w."""
    if (depth - 2) % 6:
        raise ValueError(f"ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    stages = [Stage("conv", width, _conv())]
    for i, mult in enumerate((1, 2, 4)):
        stages.append(Stage("basic", width * mult, _conv(), 1 if i == 0 else 2, n, shortcut))
    return _finish(f"resnet{depth}", stages, classes, False, input_shape)


def wrn(depth, widen=1, classes=10, input_shape=InputShape()):
    """Pre-activation wide ResNet of depth 6n+4."""
    if (depth - 4) % 6:
        raise ValueError(f"WRN depth must be 6n+4, got {depth}")
    n = (depth - 4) // 6
    stages = [Stage("conv", 16, _conv())]
    for i, base in enumerate((16, 32, 64)):
        stages.append(Stage("preact", base * widen, _conv(), 1 if i == 0 else 2, n, "conv"))
    return _finish(f"wrn{depth}_{widen}", stages, classes, True, input_shape)


def densenet(depth, growth, classes=10, input_shape=InputShape()):
    """DenseNet without bottlenecks or compression: three dense blocks of (depth-4)/3 layers."""
    if (depth - 4) % 3:
        raise ValueError(f"DenseNet depth must be 3L+4, got {depth}")
    layers = (depth - 4) // 3
    c = 2 * growth
    stages = [Stage("conv", c, _conv())]
    for i in range(3):
        stages.append(Stage("dense", growth, _conv(), 1, layers))
        c += layers * growth
        if i < 2:
            stages.append(Stage("transition", c, _conv(1), 2, 1))
    return _finish(f"densenet{depth}_{growth}", stages, classes, True, input_shape)


PRESETS = {
    "resnet56": lambda: resnet(56),
    "resnet20": lambda: resnet(20),
    "resnet14": lambda: resnet(14),
    "resnet8": lambda: resnet(8),
    "wrn40_1": lambda: wrn(40, 1),
    "wrn10_1": lambda: wrn(10, 1),
    "densenet40_12": lambda: densenet(40, 12),
    "densenet_tiny": lambda: densenet(10, 6),
}


def preset(name):
    """Load a shipped preset file by name."""
    if name not in PRESETS:
        raise ArchError(f"unknown preset {name!r} (have {sorted(PRESETS)})")
    text = resources.files("cheapnet.presets").joinpath(f"{name}.json").read_text()
    return parse_arch(text)


def with_input(arch, channels, height, width):
    return replace(arch, input=InputShape(channels, height, width))


def with_classes(arch, classes):
    head = Head(classes, _default_norm(arch.stages)) if arch.head is None else replace(arch.head, classes=classes)
    return replace(arch, head=head)
