"""Network builders: PiDiNet (edge detection) and Bi-PiDiNet (classification).

Also hosts the block-configuration grammar used to choose the convolution
kind of each of the 16 PiDiNet blocks::

    TOKEN  := C | A | R | V
    GROUP  := '[' TOKEN+ ']' 'x' INT | TOKEN
    CONFIG := GROUP ('-' GROUP)*
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .nn import (BatchNorm2d, BConv2d, Conv2d, GlobalAvgPool, HybridConv2d, Identity, Linear, Module,
                 PdcConv2d, Pool2x2, PReLU, ReLU, ReplicaPool, Sequential, replica_factors)

NUM_BLOCKS = 16
TOKENS = "CARV"


class ConfigError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


def parse_config(s: str, total: int = NUM_BLOCKS) -> list[str]:
    """Expand a block-configuration string such as ``"[CARV]x4"`` into a list of kinds."""
    kinds: list[str] = []
    i, n = 0, len(s)
    while True:
        if i >= n:
            raise ConfigError("expected a block kind or '['", i)
        ch = s[i]
        if ch == "[":
            j = i + 1
            group = []
            while j < n and s[j] in TOKENS:
                group.append(s[j])
                j += 1
            if j >= n or s[j] != "]":
                raise ConfigError(f"unknown token {s[j]!r} in group" if j < n else "unterminated group", j)
            if not group:
                raise ConfigError("empty group", j)
            j += 1
            if j >= n or s[j] not in "x×":
                raise ConfigError("expected 'x' after group", j)
            m = re.compile(r"\d+").match(s, j + 1)
            if m is None:
                raise ConfigError("expected repeat count", j + 1)
            count = int(m.group())
            if count < 1:
                raise ConfigError("repeat count must be positive", j + 1)
            kinds.extend(group * count)
            i = m.end()
        elif ch in TOKENS:
            kinds.append(ch)
            i += 1
        else:
            raise ConfigError(f"unknown token {ch!r}", i)
        if i == n:
            break
        if s[i] != "-":
            raise ConfigError(f"expected '-' between groups, got {s[i]!r}", i)
        i += 1
    if len(kinds) != total:
        raise ConfigError(f"configuration expands to {len(kinds)} blocks, need {total}", n)
    return kinds


def render_config(kinds) -> str:
    """Canonical string for a kind list; ``parse_config(render_config(k)) == k``."""
    kinds = list(kinds)
    n = len(kinds)
    for p in range(1, n):
        if n % p == 0 and kinds == kinds[:p] * (n // p):
            return f"[{''.join(kinds[:p])}]x{n // p}"
    parts, i = [], 0
    while i < n:
        j = i
        while j < n and kinds[j] == kinds[i]:
            j += 1
        parts.append(kinds[i] if j - i == 1 else f"[{kinds[i]}]x{j - i}")
        i = j
    return "-".join(parts)


@dataclass
class NetworkSpec:
    """Declarative description of a PiDiNet (task ``edge``) or Bi-PiDiNet (task ``classify``)."""

    task: str = "edge"
    block_kinds: list = field(default_factory=lambda: parse_config("[CARV]x4"))
    base_channels: int = 60
    with_csam: bool = True
    with_cdcm: bool = True
    cdcm_mid_channels: int = 0  # 0 -> 2*C//5
    stem_stride: int = 1
    reparam: bool = False
    # classification
    xi: float = 0.2
    bipdc_kind: str = "C"
    in_channels: int = 3
    stem_channels: int = 32
    stage_widths: list = field(default_factory=lambda: [32, 64, 128])
    stage_layers: list = field(default_factory=lambda: [2, 2, 2])
    num_classes: int = 10
    tau: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def mid_channels(self) -> int:
        return self.cdcm_mid_channels or max(1, 2 * self.base_channels // 5)

    def validate(self) -> None:
        if self.task not in ("edge", "classify"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "edge":
            if len(self.block_kinds) != NUM_BLOCKS or any(k not in TOKENS for k in self.block_kinds):
                raise ValueError(f"edge networks need {NUM_BLOCKS} block kinds from {TOKENS}")
            if self.base_channels < 1:
                raise ValueError("base_channels must be positive")
            if self.with_cdcm and not 0 < self.mid_channels < self.base_channels:
                raise ValueError(f"CDCM needs 0 < M < C, got M={self.mid_channels}, C={self.base_channels}")
        else:
            if not 0 <= self.xi <= 1:
                raise ValueError(f"xi must lie in [0, 1], got {self.xi}")
            if len(self.stage_widths) != len(self.stage_layers) or not self.stage_widths:
                raise ValueError("stage_widths and stage_layers must be non-empty and of equal length")
            if any(n < 1 for n in self.stage_layers):
                raise ValueError("each stage needs at least one layer")
            prev = self.stem_channels
            for wdt in self.stage_widths:
                if wdt < prev:
                    raise ValueError(f"stage widths must be non-decreasing, got {prev} -> {wdt}")
                m, n = replica_factors(prev, wdt)
                if prev % n:
                    raise ValueError(f"channels {prev} not divisible by ReplicaPool N={n}")
                prev = wdt

    def to_string(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "block_kinds":
                v = render_config(v)
            elif isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            out.append(f"{f.name}={v}")
        return ";".join(out)

    @classmethod
    def from_string(cls, s: str) -> "NetworkSpec":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for item in filter(None, s.split(";")):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown spec key {key!r}")
            kw[key] = _coerce(key, val.strip(), types[key])
        return cls(**kw)


def _coerce(key, val, typ):
    if key == "block_kinds":
        return parse_config(val)
    if key in ("stage_widths", "stage_layers"):
        return [int(v) for v in val.split(",") if v]
    if typ == "bool":
        return val.lower() in ("1", "true", "yes", "on")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val


# --- PiDiNet ---------------------------------------------------------------

def make_conv3(kind: str, cin: int, cout: int, stride=1, groups=1, reparam=False, rng=None) -> Module:
    """3x3 vanilla conv or PDC of the given kind (RPDC becomes 5x5 when re-parameterized)."""
    if kind == "V":
        return Conv2d(cin, cout, 3, stride, 1, groups=groups, rng=rng)
    layer = PdcConv2d(cin, cout, kind, stride, groups=groups, rng=rng)
    return layer.reparameterized() if reparam else layer


class PdcBlock(Module):
    """Residual block: [maxpool] -> depthwise PDC -> ReLU -> pointwise conv, plus shortcut.

    A downsampling block pools first and uses a 1x1 projection shortcut.
    """

    def __init__(self, kind, cin, cout, downsample=False, reparam=False, rng=None):
        super().__init__()
        self.downsample = downsample
        self.pool = Pool2x2("max") if downsample else Identity()
        self.dw = make_conv3(kind, cin, cin, groups=cin, reparam=reparam, rng=rng)
        self.relu = ReLU()
        self.pw = Conv2d(cin, cout, 1, rng=rng)
        self.shortcut = Conv2d(cin, cout, 1, bias=True, rng=rng) if downsample else Identity()
        if not downsample and cin != cout:
            raise ValueError("non-downsampling PDC blocks keep the channel count")

    def forward(self, x):
        x = self.pool(x)
        return self.pw(self.relu(self.dw(x))) + self.shortcut(x)

    def cost(self, shape, report):
        shape = self.pool.cost(shape, report)
        out = self.pw.cost(self.dw.cost(shape, report), report)
        self.shortcut.cost(shape, report)
        return out


class CDCM(Module):
    """1x1 reduction to M channels, ReLU, then four summed dilated 3x3 convs (rates 5, 7, 9, 11)."""

    RATES = (5, 7, 9, 11)

    def __init__(self, cin, mid, rng=None):
        super().__init__()
        if not 0 < mid < cin:
            raise ValueError(f"CDCM needs 0 < M < C, got M={mid}, C={cin}")
        self.reduce = Conv2d(cin, mid, 1, rng=rng)
        self.relu = ReLU()
        self.branches = Sequential(*[Conv2d(mid, mid, 3, 1, r, dilation=r, rng=rng) for r in self.RATES])

    def forward(self, x):
        y = self.relu(self.reduce(x))
        return ag.total(b(y) for b in self.branches)

    def cost(self, shape, report):
        shape = self.reduce.cost(shape, report)
        for b in self.branches:
            out = b.cost(shape, report)
        return out


class CSAM(Module):
    """Spatial attention: ``x * sigmoid(conv3x3(relu(conv1x1(x))))`` with a one-channel map."""

    def __init__(self, c, rng=None):
        super().__init__()
        hidden = max(1, c // 4)
        self.conv1 = Conv2d(c, hidden, 1, bias=True, rng=rng)
        self.relu = ReLU()
        self.conv2 = Conv2d(hidden, 1, 3, 1, 1, rng=rng)

    def attention(self, x):
        return ag.sigmoid(self.conv2(self.relu(self.conv1(x))))

    def forward(self, x):
        return x * self.attention(x)

    def cost(self, shape, report):
        self.conv2.cost(self.conv1.cost(shape, report), report)
        return shape


class SideHead(Module):
    def __init__(self, cin, spec: NetworkSpec, rng=None):
        super().__init__()
        c = cin
        self.cdcm = CDCM(cin, spec.mid_channels, rng=rng) if spec.with_cdcm else Identity()
        if spec.with_cdcm:
            c = spec.mid_channels
        self.csam = CSAM(c, rng=rng) if spec.with_csam else Identity()
        self.reduce = Conv2d(c, 1, 1, bias=True, rng=rng)

    def forward(self, x):
        return self.reduce(self.csam(self.cdcm(x)))

    def cost(self, shape, report):
        return self.reduce.cost(self.csam.cost(self.cdcm.cost(shape, report), report), report)


class PiDiNet(Module):
    """Four-stage PDC backbone with per-stage side heads and a fused output.

    ``forward`` returns five edge-probability maps at input resolution: the
    four side outputs followed by the fused map.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        if spec.task != "edge":
            raise ValueError("PiDiNet needs an edge-task NetworkSpec")
        self.spec = spec
        rng = np.random.default_rng(seed)
        kinds, c, rp = spec.block_kinds, spec.base_channels, spec.reparam
        widths = [c, 2 * c, 4 * c, 4 * c]
        self.stem = make_conv3(kinds[0], 3, c, stride=spec.stem_stride, reparam=rp, rng=rng)
        stages, idx, cin = [], 1, c
        for s, width in enumerate(widths):
            blocks = []
            for b in range(3 if s == 0 else 4):
                blocks.append(PdcBlock(kinds[idx], cin, width, downsample=(s > 0 and b == 0), reparam=rp, rng=rng))
                idx += 1
                cin = width
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.heads = Sequential(*[SideHead(w, spec, rng=rng) for w in widths])
        self.fuse = Conv2d(4, 1, 1, bias=True, rng=rng)
        self.fuse.weight.data[...] = 0.25

    def features(self, x: ag.Var) -> list[ag.Var]:
        """Output of each backbone stage."""
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        x = ag.constant(x)
        h, w = x.shape[2:]
        logits = [ag.upsample(head(f), h, w) for head, f in zip(self.heads, self.features(x))]
        fused = self.fuse(ag.concat(logits, axis=1))
        return [ag.sigmoid(v) for v in logits] + [ag.sigmoid(fused)]

    def reparameterized(self) -> "PiDiNet":
        """Copy of this network with every PDC layer rewritten as a plain convolution."""
        spec = NetworkSpec.from_string(self.spec.to_string())
        spec.reparam = True
        net = PiDiNet(spec)
        state = {}
        for name, mod in _named_modules(self):
            if isinstance(mod, PdcConv2d):
                state[name + ".weight"] = mod.reparameterized().weight.data
        own = self.state_dict()
        own.update(state)
        net.load_state_dict(own)
        return net

    def cost(self, shape, report):
        n, _, h, w = shape
        s = self.stem.cost(shape, report)
        for stage, head in zip(self.stages, self.heads):
            s = stage.cost(s, report)
            head.cost(s, report)
        self.fuse.cost((n, 4, h, w), report)
        return [(n, 1, h, w)] * 5


def _named_modules(mod: Module, prefix=""):
    yield prefix.rstrip("."), mod
    for name, child in mod._modules.items():
        yield from _named_modules(child, f"{prefix}{name}.")


def build_pidinet(spec: NetworkSpec, seed: int = 0) -> PiDiNet:
    return PiDiNet(spec, seed)


# --- Bi-PiDiNet --------------------------------------------------------------

class BinaryLayer(Module):
    """Hybrid binary conv with its own shortcut (identity, or ReplicaPool when reducing)."""

    def __init__(self, cin, cout, stride, spec: NetworkSpec, rng=None):
        super().__init__()
        self.conv = HybridConv2d(cin, cout, spec.xi, spec.bipdc_kind, stride, spec.tau, rng=rng)
        if stride == 2:
            self.shortcut = ReplicaPool(*replica_factors(cin, cout), out_channels=cout)
        elif cin == cout:
            self.shortcut = Identity()
        else:
            raise ValueError(f"stride-1 binary layer cannot change width {cin} -> {cout}")

    def forward(self, x):
        return self.conv(x) + self.shortcut(x)

    def cost(self, shape, report):
        out = self.conv.cost(shape, report)
        self.shortcut.cost(shape, report)
        return out


class BiPiDiNet(Module):
    """Binary classifier: full-precision 3x3 stem + BN, stages of hybrid binary layers,
    global average pooling and a full-precision linear classifier."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        if spec.task != "classify":
            raise ValueError("BiPiDiNet needs a classify-task NetworkSpec")
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.stem = Sequential(Conv2d(spec.in_channels, spec.stem_channels, 3, spec.stem_stride, 1, rng=rng),
                               BatchNorm2d(spec.stem_channels))
        stages, cin = [], spec.stem_channels
        for i, (width, n) in enumerate(zip(spec.stage_widths, spec.stage_layers)):
            reduce = i > 0 or width != cin
            layers = []
            for j in range(n):
                layers.append(BinaryLayer(cin, width, 2 if (j == 0 and reduce) else 1, spec, rng=rng))
                cin = width
            stages.append(Sequential(*layers))
        self.stages = Sequential(*stages)
        self.pool = GlobalAvgPool()
        self.classifier = Linear(cin, spec.num_classes, classifier=True, rng=rng)

    def features(self, x):
        feats = []
        h = self.stem(ag.constant(x))
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        return self.classifier(self.pool(self.features(x)[-1]))

    def cost(self, shape, report):
        s = self.stages.cost(self.stem.cost(shape, report), report)
        return self.classifier.cost(self.pool.cost(s, report), report)


def build_bipidinet(spec: NetworkSpec, seed: int = 0) -> BiPiDiNet:
    return BiPiDiNet(spec, seed)


def resnet18_bipidinet_spec(num_classes: int = 1000) -> NetworkSpec:
    """ImageNet-sized Bi-PiDiNet: widened ResNet-18 layout (128, 192, 384, 768)."""
    return NetworkSpec(task="classify", stem_channels=64, stem_stride=2, stage_widths=[128, 192, 384, 768],
                       stage_layers=[4, 4, 4, 4], num_classes=num_classes, xi=0.2)


# --- reference ResNet-18 variants (cost accounting baselines) --------------------

class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.body = Sequential(Conv2d(cin, cout, 3, stride, 1, rng=rng), BatchNorm2d(cout), ReLU(),
                               Conv2d(cout, cout, 3, 1, 1, rng=rng), BatchNorm2d(cout))
        self.shortcut = Identity()
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(Conv2d(cin, cout, 1, stride, 0, rng=rng), BatchNorm2d(cout))
        self.relu = ReLU()

    def forward(self, x):
        return self.relu(self.body(x) + self.shortcut(x))

    def cost(self, shape, report):
        out = self.body.cost(shape, report)
        self.shortcut.cost(shape, report)
        return out


class BiRealLayer(Module):
    """Binary 3x3 conv + BN with a per-conv shortcut (avgpool + 1x1 conv + BN when reducing)."""

    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.body = Sequential(BConv2d(cin, cout, 3, stride, 1, rng=rng), BatchNorm2d(cout))
        self.shortcut = Identity()
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(Pool2x2("avg"), Conv2d(cin, cout, 1, rng=rng), BatchNorm2d(cout))

    def forward(self, x):
        return self.body(x) + self.shortcut(x)

    def cost(self, shape, report):
        out = self.body.cost(shape, report)
        self.shortcut.cost(shape, report)
        return out


class ResNet18(Module):
    """ResNet-18 (full precision) or its Bi-Real binary counterpart.

    The 3x3/2 stem max-pool is replaced by a 2x2/2 max-pool, which yields the
    same feature sizes for even inputs and has no cost under this accounting.
    """

    def __init__(self, binary=False, num_classes=1000, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.stem = Sequential(Conv2d(3, 64, 7, 2, 3, rng=rng), BatchNorm2d(64), ReLU(), Pool2x2("max"))
        layers, cin = [], 64
        for i, width in enumerate((64, 128, 256, 512)):
            stride = 1 if i == 0 else 2
            if binary:
                for j in range(4):
                    layers.append(BiRealLayer(cin, width, stride if j == 0 else 1, rng))
                    cin = width
            else:
                for j in range(2):
                    layers.append(BasicBlock(cin, width, stride if j == 0 else 1, rng))
                    cin = width
        self.layers = Sequential(*layers)
        self.pool = GlobalAvgPool()
        self.fc = Linear(512, num_classes, classifier=True, rng=rng)

    def forward(self, x):
        return self.fc(self.pool(self.layers(self.stem(ag.constant(x)))))

    def cost(self, shape, report):
        return self.fc.cost(self.pool.cost(self.layers.cost(self.stem.cost(shape, report), report), report), report)
