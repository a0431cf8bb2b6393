"""Line-oriented DSL describing embedder layer graphs.

Grammar (one item per line, ``#`` starts a comment)::

    name <identifier>
    branch <name>
    <index> <kind> [f1=<ctx>] [f2=<ctx>] [f3=<ctx>] [size=<n>] [inner=<n>] [from=<i,j,...>] [stages=<a,b,...>]
    share <branchA> <branchB> <layer>
    concat_pool <branch> <layer>
    tap <branch> <layer>
    classes <branch> <n>

Contexts use frame-offset notation: ``t-2:t+2`` (range), ``t-4,t,t+4`` (list), ``t``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .errors import NetSpecParseError

KINDS = ("tdnn", "dense", "ftdnn", "resnet_block_stack", "pooling", "embedding_tap", "output_softmax")
FRAME_KINDS = ("tdnn", "dense", "ftdnn", "resnet_block_stack")
RESNET34_STAGES = (3, 4, 6, 3)


@dataclass(frozen=True)
class ContextSpec:
    offsets: tuple[int, ...]

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        if not offs:
            raise ValueError("context must contain at least one offset")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ValueError(f"context offsets must be strictly increasing: {offs}")
        object.__setattr__(self, "offsets", offs)

    @property
    def left(self) -> int:
        return -self.offsets[0]

    @property
    def right(self) -> int:
        return self.offsets[-1]

    def __len__(self):
        return len(self.offsets)

    def is_identity(self) -> bool:
        return self.offsets == (0,)


IDENTITY = ContextSpec((0,))

_TERM = re.compile(r"\s*t\s*(?:([+-])\s*(\d+))?\s*")


def _term(text: str, pos: int) -> tuple[int, int]:
    m = _TERM.match(text, pos)
    if not m or m.end() == pos:
        raise NetSpecParseError(f"malformed context term in {text!r}", column=pos)
    off = 0
    if m.group(1):
        off = int(m.group(2)) * (1 if m.group(1) == "+" else -1)
    return off, m.end()


def parse_context(text: str) -> ContextSpec:
    """Parse ``t-2:t+2``, ``t-4,t,t+4`` or ``t`` into a ContextSpec."""
    if not text or not text.strip():
        raise NetSpecParseError("empty context", column=0)
    first, pos = _term(text, 0)
    if pos < len(text) and text[pos] == ":":
        last, pos = _term(text, pos + 1)
        if pos != len(text):
            raise NetSpecParseError(f"trailing characters in context {text!r}", column=pos)
        if last < first:
            raise NetSpecParseError(f"decreasing range in context {text!r}", column=0)
        return ContextSpec(tuple(range(first, last + 1)))
    offsets = [first]
    while pos < len(text):
        if text[pos] != ",":
            raise NetSpecParseError(f"expected ',' or ':' in context {text!r}", column=pos)
        off, pos = _term(text, pos + 1)
        if off in offsets:
            raise NetSpecParseError(f"duplicate offset {off} in context {text!r}", column=pos)
        if off < offsets[-1]:
            raise NetSpecParseError(f"offsets not increasing in context {text!r}", column=pos)
        offsets.append(off)
    return ContextSpec(tuple(offsets))


def _fmt_offset(o: int) -> str:
    return "t" if o == 0 else f"t{o:+d}"


def render_context(ctx: ContextSpec) -> str:
    offs = ctx.offsets
    if len(offs) >= 3 and offs[-1] - offs[0] == len(offs) - 1:
        return f"{_fmt_offset(offs[0])}:{_fmt_offset(offs[-1])}"
    return ",".join(_fmt_offset(o) for o in offs)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    contexts: tuple[ContextSpec, ...] = ()
    skip_inputs: tuple[int, ...] = ()
    size: int | None = None
    inner_size: int | None = None
    stages: tuple[int, ...] | None = None

    @property
    def is_frame_kind(self) -> bool:
        return self.kind in FRAME_KINDS

    def context(self, factor: int = 0) -> ContextSpec:
        return self.contexts[factor] if factor < len(self.contexts) else IDENTITY

    def context_extent(self) -> tuple[int, int]:
        """(left, right) frames consumed by this layer alone."""
        if self.kind == "resnet_block_stack":
            convs = 1 + 2 * sum(self.stages or RESNET34_STAGES)
            return convs, convs
        return sum(c.left for c in self.contexts), sum(c.right for c in self.contexts)


@dataclass(frozen=True)
class NetSpec:
    name: str
    branches: tuple[tuple[str, tuple[LayerSpec, ...]], ...]
    shared: tuple[tuple[str, str, int], ...] = ()
    concat_pool: tuple[str, int] | None = None
    tap: tuple[str, int] | None = None
    classes: tuple[tuple[str, int], ...] = ()

    def branch(self, name: str) -> tuple[LayerSpec, ...]:
        for bname, layers in self.branches:
            if bname == name:
                return layers
        raise KeyError(f"no branch {name!r} in netspec {self.name!r}")

    @property
    def branch_names(self) -> list[str]:
        return [b for b, _ in self.branches]

    def layer(self, branch: str, index: int) -> LayerSpec:
        for layer in self.branch(branch):
            if layer.index == index:
                return layer
        raise KeyError(f"no layer {index} in branch {branch!r}")

    def num_classes(self, branch: str) -> int | None:
        return dict(self.classes).get(branch)

    def with_classes(self, branch: str, n: int) -> "NetSpec":
        cls = dict(self.classes)
        cls[branch] = int(n)
        return replace(self, classes=tuple(sorted(cls.items())))

    def shared_with(self, branch: str) -> dict[int, str]:
        """Layer index -> owning branch, for layers this branch borrows."""
        out = {}
        for a, b, idx in self.shared:
            if b == branch:
                out[idx] = a
        return out

    def is_frame_level(self, branch: str, index: int) -> bool:
        """Layers before pooling (or every hidden layer of a pooling-free branch)."""
        pool = self.pooling_layer(branch)
        layer = self.layer(branch, index)
        if layer.kind in ("pooling", "embedding_tap", "output_softmax"):
            return False
        return pool is None or index < pool.index

    def pooling_layer(self, branch: str) -> LayerSpec | None:
        pools = [layer for layer in self.branch(branch) if layer.kind == "pooling"]
        return pools[0] if pools else None

    @property
    def tap_layer(self) -> LayerSpec:
        return self.layer(*self.tap)

    @property
    def embedding_dim(self) -> int:
        return self.tap_layer.size


def _int_list(text: str, line_no: int, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise NetSpecParseError(f"bad integer list for {key}: {text!r}", line=line_no) from None


def _parse_layer(tokens: list[str], line_no: int) -> LayerSpec:
    try:
        index = int(tokens[0])
    except ValueError:
        raise NetSpecParseError(f"unknown directive {tokens[0]!r}", line=line_no, column=1) from None
    if len(tokens) < 2 or tokens[1] not in KINDS:
        kind = tokens[1] if len(tokens) > 1 else ""
        raise NetSpecParseError(f"unknown layer kind {kind!r}", line=line_no)
    kind = tokens[1]
    ctx: dict[int, ContextSpec] = {}
    attrs: dict = {}
    for tok in tokens[2:]:
        if "=" not in tok:
            raise NetSpecParseError(f"expected key=value, got {tok!r}", line=line_no)
        key, val = tok.split("=", 1)
        if key in ("f1", "f2", "f3"):
            try:
                ctx[int(key[1])] = parse_context(val)
            except NetSpecParseError as exc:
                raise NetSpecParseError(str(exc), line=line_no) from None
        elif key == "size":
            attrs["size"] = int(val)
        elif key == "inner":
            attrs["inner_size"] = int(val)
        elif key == "from":
            attrs["skip_inputs"] = _int_list(val, line_no, key)
        elif key == "stages":
            attrs["stages"] = _int_list(val, line_no, key)
        else:
            raise NetSpecParseError(f"unknown layer attribute {key!r}", line=line_no)
    if ctx and sorted(ctx) != list(range(1, len(ctx) + 1)):
        raise NetSpecParseError("context factors must be f1[,f2[,f3]] without gaps", line=line_no)
    for s in attrs.get("skip_inputs", ()):
        if s >= index:
            raise NetSpecParseError(f"layer {index} references layer {s} which is not earlier", line=line_no)
    return LayerSpec(index=index, kind=kind, contexts=tuple(ctx[k] for k in sorted(ctx)), **attrs)


def parse_netspec(text: str) -> NetSpec:
    name = None
    branches: list[tuple[str, list[LayerSpec]]] = []
    shared, classes = [], {}
    concat_pool = tap = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "name":
            name = tokens[1]
        elif head == "branch":
            if any(b == tokens[1] for b, _ in branches):
                raise NetSpecParseError(f"duplicate branch {tokens[1]!r}", line=line_no)
            branches.append((tokens[1], []))
        elif head == "share":
            shared.append((tokens[1], tokens[2], int(tokens[3])))
        elif head == "concat_pool":
            if concat_pool is not None:
                raise NetSpecParseError("duplicate concat_pool directive", line=line_no)
            concat_pool = (tokens[1], int(tokens[2]))
        elif head == "tap":
            if tap is not None:
                raise NetSpecParseError("duplicate tap directive", line=line_no)
            tap = (tokens[1], int(tokens[2]))
        elif head == "classes":
            classes[tokens[1]] = int(tokens[2])
        else:
            if not branches:
                raise NetSpecParseError("layer line before any branch header", line=line_no)
            layer = _parse_layer(tokens, line_no)
            layers = branches[-1][1]
            expected = len(layers) + 1
            if layer.index != expected:
                raise NetSpecParseError(f"expected layer index {expected}, got {layer.index}", line=line_no)
            layers.append(layer)
    if name is None:
        raise NetSpecParseError("missing 'name' line")
    if tap is None:
        raise NetSpecParseError("missing 'tap' directive")
    known = {b for b, _ in branches}
    for ref in [tap[0]] + ([concat_pool[0]] if concat_pool else []) + [s[0] for s in shared] + [s[1] for s in shared] + list(classes):
        if ref not in known:
            raise NetSpecParseError(f"reference to unknown branch {ref!r}")
    return NetSpec(
        name=name,
        branches=tuple((b, tuple(ls)) for b, ls in branches),
        shared=tuple(shared),
        concat_pool=concat_pool,
        tap=tap,
        classes=tuple(sorted(classes.items())),
    )


def render_layer(layer: LayerSpec) -> str:
    parts = [str(layer.index), layer.kind]
    parts += [f"f{i + 1}={render_context(c)}" for i, c in enumerate(layer.contexts)]
    if layer.size is not None:
        parts.append(f"size={layer.size}")
    if layer.inner_size is not None:
        parts.append(f"inner={layer.inner_size}")
    if layer.skip_inputs:
        parts.append("from=" + ",".join(map(str, layer.skip_inputs)))
    if layer.stages is not None:
        parts.append("stages=" + ",".join(map(str, layer.stages)))
    return " ".join(parts)


def render_netspec(n: NetSpec) -> str:
    lines = [f"name {n.name}"]
    for bname, layers in n.branches:
        lines.append(f"branch {bname}")
        lines.extend(render_layer(layer) for layer in layers)
    lines += [f"share {a} {b} {i}" for a, b, i in n.shared]
    if n.concat_pool:
        lines.append(f"concat_pool {n.concat_pool[0]} {n.concat_pool[1]}")
    if n.tap:
        lines.append(f"tap {n.tap[0]} {n.tap[1]}")
    lines += [f"classes {b} {c}" for b, c in n.classes]
    return "\n".join(lines) + "\n"


# -- validation ---------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "valid" if self.ok else "\n".join(self.violations)


def frame_output_size(n: NetSpec, branch: str, index: int) -> int | None:
    layer = n.layer(branch, index)
    return layer.size


def pooling_input_size(n: NetSpec, branch: str) -> int | None:
    layers = n.branch(branch)
    pool = n.pooling_layer(branch)
    if pool is None or pool.index < 2:
        return None
    size = layers[pool.index - 2].size
    if size is None:
        return None
    if n.concat_pool:
        src = n.layer(*n.concat_pool)
        size += src.size or 0
    return size


def validate(n: NetSpec) -> ValidationReport:
    rep = ValidationReport()
    v = rep.violations
    for bname, layers in n.branches:
        seen_pool = None
        for pos, layer in enumerate(layers):
            where = f"{bname}:{layer.index}"
            if layer.index != pos + 1:
                v.append(f"{where}: layer indices must be consecutive from 1")
            if (layer.inner_size is not None) != (layer.kind == "ftdnn"):
                v.append(f"{where}: inner size must be present iff kind is ftdnn")
            if layer.kind == "ftdnn" and len(layer.contexts) not in (2, 3):
                v.append(f"{where}: ftdnn needs two or three context factors")
            if layer.kind != "ftdnn" and any(not c.is_identity() for c in layer.contexts[1:]):
                v.append(f"{where}: only ftdnn layers may have non-trivial extra context factors")
            if layer.kind == "resnet_block_stack" and pos != 0:
                v.append(f"{where}: resnet_block_stack must consume the input features")
            if layer.kind in ("pooling", "embedding_tap", "output_softmax") and layer.contexts:
                v.append(f"{where}: {layer.kind} takes no frame context")
            if layer.kind not in ("output_softmax",) and (layer.size is None or layer.size < 1):
                v.append(f"{where}: missing or non-positive size")
            if layer.kind == "output_softmax" and pos != len(layers) - 1:
                v.append(f"{where}: output_softmax must be the last layer of its branch")
            for s in layer.skip_inputs:
                if not 1 <= s < layer.index:
                    v.append(f"{where}: skip input {s} is not a strictly earlier layer")
                    continue
                if not (n.is_frame_level(bname, s) and n.is_frame_level(bname, layer.index)):
                    v.append(f"{where}: skip concatenation from {s} mixes frame- and segment-level shapes")
            if seen_pool is not None and (layer.is_frame_kind and layer.kind != "dense" or any(not c.is_identity() for c in layer.contexts)):
                v.append(f"{where}: frame-level layer after pooling")
            if layer.kind == "pooling":
                if seen_pool is not None:
                    v.append(f"{where}: pooling appears more than once in branch")
                seen_pool = layer.index
                expected = pooling_input_size(n, bname)
                if expected is not None and layer.size != 2 * expected:
                    v.append(f"{where}: pooling output {layer.size} != 2 x frame size {expected}")
            if seen_pool is None and layer.kind in ("embedding_tap",):
                v.append(f"{where}: embedding tap before pooling")

    if n.tap is not None:
        tb, ti = n.tap
        try:
            tap_layer = n.layer(tb, ti)
        except KeyError:
            v.append(f"tap {tb}:{ti} does not exist")
        else:
            if tap_layer.kind != "embedding_tap":
                v.append(f"tap {tb}:{ti} is not an embedding_tap layer")
            if n.pooling_layer(tb) is None:
                v.append(f"tap branch {tb} has no pooling layer")
            out = [layer for layer in n.branch(tb) if layer.kind == "output_softmax"]
            if out and out[0].index <= ti:
                v.append(f"tap {tb}:{ti} does not precede the output layer")
    else:
        v.append("missing tap")

    for a, b, idx in n.shared:
        try:
            la, lb = n.layer(a, idx), n.layer(b, idx)
        except KeyError:
            v.append(f"share {a} {b} {idx}: layer missing")
            continue
        if la != lb:
            v.append(f"share {a} {b} {idx}: layer specs differ ({render_layer(la)} vs {render_layer(lb)})")
        for lower in range(1, idx):
            if (a, b, lower) not in n.shared:
                v.append(f"share {a} {b} {idx}: shared layers must form a prefix (layer {lower} not shared)")
        if not n.is_frame_level(a, idx):
            v.append(f"share {a} {b} {idx}: only frame-level layers can be shared")

    if n.concat_pool is not None:
        cb, ci = n.concat_pool
        try:
            src = n.layer(cb, ci)
        except KeyError:
            v.append(f"concat_pool {cb}:{ci} does not exist")
        else:
            if not n.is_frame_level(cb, ci):
                v.append(f"concat_pool {cb}:{ci} is not a frame-level layer")
            if n.pooling_layer(cb) is not None:
                v.append(f"concat_pool branch {cb} must not have its own pooling")
    return rep


# -- receptive field -----------------------------------------------------------


def receptive_field(n: NetSpec, branch: str) -> tuple[int, int]:
    """Frames of left/right context consumed by the branch's frame-level stack."""
    layers = n.branch(branch)
    rf: dict[int, tuple[int, int]] = {0: (0, 0)}
    best = (0, 0)
    for layer in layers:
        if not n.is_frame_level(branch, layer.index):
            break
        sources = [layer.index - 1, *layer.skip_inputs]
        left = max(rf[s][0] for s in sources)
        right = max(rf[s][1] for s in sources)
        dl, dr = layer.context_extent()
        rf[layer.index] = (left + dl, right + dr)
        best = rf[layer.index]
    return best


# -- width scaling -------------------------------------------------------------


def scale_width(n: NetSpec, factor: float, minimum: int = 2) -> NetSpec:
    """Shrink (or grow) every hidden size by `factor`; pooling sizes follow."""

    def sc(x):
        return None if x is None else max(minimum, int(round(x * factor)))

    branches = []
    for bname, layers in n.branches:
        new = []
        for layer in layers:
            if layer.kind == "output_softmax":
                new.append(layer)
            elif layer.kind == "resnet_block_stack":
                new.append(replace(layer, size=max(8 * minimum, int(round(layer.size * factor / 8)) * 8)))
            else:
                new.append(replace(layer, size=sc(layer.size), inner_size=sc(layer.inner_size)))
        branches.append((bname, tuple(new)))
    scaled = replace(n, branches=tuple(branches))
    for bname, layers in scaled.branches:
        pool = scaled.pooling_layer(bname)
        if pool is not None:
            size = 2 * pooling_input_size(scaled, bname)
            fixed = tuple(replace(layer, size=size) if layer.index == pool.index else layer for layer in layers)
            scaled = replace(scaled, branches=tuple((b, fixed if b == bname else ls) for b, ls in scaled.branches))
    return scaled


# -- builtins --------------------------------------------------------------------

_BUILTIN_TEXT = {
    "etdnn": """
name etdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense f1=t size=512
3 tdnn f1=t-2,t,t+2 size=512
4 dense f1=t size=512
5 tdnn f1=t-3:t+3 size=512
6 dense f1=t size=512
7 tdnn f1=t-4,t,t+4 size=512
8 dense f1=t size=512
9 dense f1=t size=512
10 dense f1=t size=1500
11 pooling size=3000
12 embedding_tap size=512
13 dense size=512
14 output_softmax
tap xvector 12
""",
    "ftdnn": """
name ftdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 ftdnn f1=t-2,t f2=t,t+2 size=1024 inner=256
3 ftdnn f1=t f2=t size=1024 inner=256
4 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
5 ftdnn f1=t f2=t size=1024 inner=256 from=3
6 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
7 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256 from=2,4
8 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
9 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256 from=4,6,8
10 dense f1=t f2=t size=2048
11 pooling size=4096
12 embedding_tap size=1024
13 dense size=1024
14 output_softmax
tap xvector 12
""",
    "eftdnn": """
name eftdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense size=512
3 ftdnn f1=t-3,t-1 f2=t-1,t+1 f3=t+1,t+3 size=1024 inner=256
4 dense size=1024
5 ftdnn f1=t f2=t f3=t size=1024 inner=256
6 dense size=1024
7 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
8 dense size=1024
9 ftdnn f1=t f2=t f3=t size=1024 inner=256 from=5
10 dense size=1024
11 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
12 dense size=1024
13 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256 from=3,7
14 dense size=1024
15 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
16 dense size=1024
17 ftdnn f1=t f2=t f3=t size=1024 inner=256 from=7,11,15
18 dense f1=t size=2048
19 dense f1=t size=2048
20 dense f1=t size=2048
21 pooling size=4096
22 embedding_tap size=1024
23 dense size=1024
24 output_softmax
tap xvector 22
""",
    "resnet": """
name resnet
branch xvector
1 resnet_block_stack size=512 stages=3,4,6,3
2 dense f1=t size=512
3 dense f1=t size=1000
4 pooling size=2000
5 embedding_tap size=512
6 dense size=512
7 output_softmax
tap xvector 5
""",
}

_MULTITASK_XVECTOR = """
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense f1=t size=512
3 tdnn f1=t-2,t,t+2 size=512
4 dense f1=t size=512
5 tdnn f1=t-3,t,t+3 size=512
6 dense f1=t size=512
7 tdnn f1=t-4,t,t+4 size=512
8 dense f1=t size=512
9 dense f1=t size=512
10 dense f1=t size={last}
11 pooling size={pool}
12 embedding_tap size=512
13 dense size=512
14 output_softmax
branch asr
1 tdnn f1=t-2:t+2 size=512
2 tdnn f1=t-2,t,t+2 size=512
3 tdnn f1=t-3,t,t+3 size=512
4 dense f1=t size=512
5 dense f1=t size=512
6 dense f1=t size=512
7 dense f1=t size=512
8 output_softmax
"""

_BUILTIN_TEXT["multitask"] = (
    "name multitask\n"
    + _MULTITASK_XVECTOR.format(last=1500, pool=3000)
    + "share xvector asr 1\ntap xvector 12\nclasses asr 3800\n"
)

_BUILTIN_TEXT["cvector"] = (
    "name cvector\n"
    + _MULTITASK_XVECTOR.format(last=1500, pool=2 * (1500 + 128))
    + """branch bottleneck
1 tdnn f1=t-2:t+2 size=650
2 tdnn f1=t-1:t+1 size=650
3 tdnn f1=t-1:t+1 size=650
4 tdnn f1=t-3,t,t+3 size=650
5 tdnn f1=t-6,t-3,t size=128
share xvector asr 1
concat_pool bottleneck 5
tap xvector 12
classes asr 3800
"""
)

BUILTIN_NAMES = ("etdnn", "ftdnn", "eftdnn", "resnet", "multitask", "cvector")


def builtin(name: str) -> NetSpec:
    if name not in _BUILTIN_TEXT:
        raise KeyError(f"unknown builtin architecture {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    return parse_netspec(_BUILTIN_TEXT[name])
