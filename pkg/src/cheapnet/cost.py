"""Parameter and FLOP accounting.

Conventions (fixed, reported alongside every report):

* one multiply-accumulate counts as one FLOP;
* convolutions and the classifier are charged; BN, ReLU, pooling, residual
  additions and shifts are free;
* parameters include BN scale/shift and the classifier bias;
* a strided cheap replacement runs its spatial stage and pointwise conv at the
  input resolution and then subsamples, so both stages are charged at the
  input resolution.
"""
from dataclasses import asdict, dataclass, field

from .graph import layer_sites
from .layers import CHEAP_KINDS, ConvSpec

CONVENTIONS = ("flops = multiply-accumulates of conv and fc layers; bn/relu/pool/add/shift free; "
               "params include bn scale+shift and fc bias; strided cheap pairs charged at input resolution")


@dataclass(frozen=True)
class LayerCost:
    params: int
    flops: int
    layer: str = ""
    kind: str = ""

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError(f"negative cost in {self}")

    def __add__(self, other):
        return LayerCost(self.params + other.params, self.flops + other.flops, self.layer, self.kind)


@dataclass
class CostReport:
    name: str
    layers: list = field(default_factory=list)
    reference: str = None
    cr: float = None
    sr: float = None

    @property
    def params(self):
        return sum(l.params for l in self.layers)

    @property
    def flops(self):
        return sum(l.flops for l in self.layers)

    @property
    def totals(self):
        return LayerCost(self.params, self.flops, self.name, "network")

    def compare_to(self, ref):
        """Attach CR/SR against ``ref``; both stay ``None`` when this network is empty."""
        self.reference = ref.name
        try:
            self.cr, self.sr = rate(ref.totals, self.totals)
        except ZeroDivisionError:
            self.cr = self.sr = None
        return self

    def to_dict(self):
        return {
            "name": self.name,
            "conventions": CONVENTIONS,
            "layers": [asdict(l) for l in self.layers],
            "totals": {"params": self.params, "flops": self.flops},
            "compare": None if self.reference is None else
            {"reference": self.reference, "cr": self.cr, "sr": self.sr},
        }

    def table(self, per_layer=False):
        lines = []
        if per_layer:
            lines.append(f"{'layer':<28}{'kind':<12}{'params':>12}{'flops':>16}")
            for l in self.layers:
                lines.append(f"{l.layer:<28}{l.kind:<12}{l.params:>12,}{l.flops:>16,}")
        lines.append(f"{self.name}: {self.params / 1e6:.4f}M params, {self.flops / 1e6:.2f}M FLOPs")
        if self.cr is not None:
            lines.append(f"vs {self.reference}: CR {self.cr:.2f}x, SR {self.sr:.2f}x")
        return "\n".join(lines)


def layer_cost(spec, out_h, out_w):
    """Cost of one conv layer (or cheap pair) producing an ``out_h`` x ``out_w`` map.

    ``group``, ``depthwise`` and ``shift`` specs denote the cheap spatial stage
    *plus* the pointwise conv mapping ``in_channels`` to ``out_channels``.
    """
    if not isinstance(spec, ConvSpec):
        raise TypeError(f"expected ConvSpec, got {type(spec).__name__}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    c_in, c_out, k = spec.in_channels, spec.out_channels, spec.kernel_size
    if spec.kind == "standard":
        params = c_out * c_in * k * k
    elif spec.kind == "pointwise":
        params = c_out * c_in
    elif spec.kind == "group":
        if c_in % spec.groups:
            raise ValueError(f"groups={spec.groups} does not divide {c_in}")
        params = c_in * c_in * k * k // spec.groups + c_in * c_out
    elif spec.kind == "depthwise":
        params = c_in * k * k + c_in * c_out
    else:  # shift: the spatial stage is free
        params = c_in * c_out
    return LayerCost(params, params * out_h * out_w, kind=spec.kind)


def rate(ref, cheap):
    """Compression and speedup of ``cheap`` relative to ``ref`` as (CR, SR)."""
    if cheap.params <= 0 or cheap.flops <= 0:
        raise ZeroDivisionError("cheap network has zero params or FLOPs; rate undefined")
    return ref.params / cheap.params, ref.flops / cheap.flops


def _site_cost(site):
    if site.op == "bn":
        return LayerCost(2 * site.c_out, 0, site.id, "bn")
    if site.op == "fc":
        return LayerCost(site.c_in * site.c_out + site.c_out, site.c_in * site.c_out, site.id, "fc")
    if site.kind in CHEAP_KINDS and site.k > 1:
        groups = site.groups if site.kind == "group" else 1
        spec = ConvSpec(site.kind, site.k, site.c_in, site.c_out, groups=groups)
        cost = layer_cost(spec, *site.in_hw)
    else:
        kind = "pointwise" if site.k == 1 else "standard"
        spec = ConvSpec(kind, site.k, site.c_in, site.c_out, stride=site.stride)
        cost = layer_cost(spec, *site.out_hw)
    return LayerCost(cost.params, cost.flops, site.id, cost.kind)


def network_cost(arch, reference=None):
    """Per-layer and total cost of a descriptor, optionally with CR/SR against ``reference``."""
    report = CostReport(arch.name, [_site_cost(s) for s in layer_sites(arch)])
    if reference is not None:
        report.compare_to(network_cost(reference))
    return report


def empty_report(name="empty"):
    return CostReport(name, [])
