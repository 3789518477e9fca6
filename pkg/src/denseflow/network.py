"""Fully-convolutional DenseNet that maps a frame pair to a flow pyramid.

The network is described by a flat *structural plan*: an ordered list of
stages, each naming the earlier stages it reads.  ``Network.forward`` is an
interpreter over that plan, so the plan printed by ``denseflow plan`` is the
network that runs.

Layout of the default configuration on a 64x64 pair::

    stem 3x3 conv (6 -> 16)
    4 x [dense block (k0 -> k0 + L*k) -> transition down (1x1 conv, 2x2 max pool)]
    bottleneck dense block                         -> flow head, level 0 (4x4)
    4 x [transition up: deconv features, deconv flow (values x2)
         concat(upsampled features, skip, upsampled flow)
         dense block without its input (-> L*k)   -> flow head, level u]

so the pyramid comes out at 4, 8, 16, 32 and 64 pixels.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    affine_concat,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    maxpool2d,
    mul,
    normalize2d,
)
from .config import ConfigError, build_dataclass, format_value, parse_text


@dataclass(frozen=True)
class NetworkConfig:
    growth_rate: int = 12
    num_blocks_down: int = 4
    num_blocks_up: int = 4
    layers_per_block: int = 4
    initial_channels: int = 16
    dropout_rate: float = 0.2
    lrelu_slope: float = 0.1
    input_channels: int = 6
    flow_levels: int = 5

    def __post_init__(self):
        self.validate()

    @classmethod
    def deeper(cls, **overrides):
        """Five dense blocks per side, ten layers each."""
        base = dict(num_blocks_down=5, num_blocks_up=5, layers_per_block=10, flow_levels=6)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        for name in ("growth_rate", "num_blocks_down", "num_blocks_up", "layers_per_block",
                     "initial_channels", "input_channels", "flow_levels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.input_channels % 2:
            raise ConfigError("input_channels must be even (two stacked frames)")
        if self.num_blocks_up > self.num_blocks_down:
            raise ConfigError(
                f"num_blocks_up ({self.num_blocks_up}) exceeds num_blocks_down "
                f"({self.num_blocks_down}); no skip connection would exist"
            )
        if self.flow_levels != self.num_blocks_up + 1:
            raise ConfigError(
                f"flow_levels must equal num_blocks_up + 1 = {self.num_blocks_up + 1}, "
                f"got {self.flow_levels}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.lrelu_slope < 1.0:
            raise ConfigError(f"lrelu_slope must lie in [0, 1), got {self.lrelu_slope}")

    @property
    def size_divisor(self):
        """Input height and width must be multiples of this."""
        return 2 ** self.num_blocks_down

    def to_text(self):
        """Canonical ``field = value`` listing; its hash is the config digest."""
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, mapping):
        return build_dataclass(cls, mapping, "net")

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_text(text))

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Stage:
    name: str
    op: str
    reads: tuple
    in_channels: int
    out_channels: int
    # spatial downsampling factor relative to the network input
    scale: int

    def describe(self):
        return (f"{self.name:<26} {self.op:<16} {self.in_channels:>5} -> {self.out_channels:<5} "
                f"1/{self.scale}")


# ops that own parameters, and the parameter shapes they need
def _stage_params(stage, cfg):
    cin, cout = stage.in_channels, stage.out_channels
    if stage.op in ("conv3x3", "flow_head"):
        return {"conv.weight": (cout, cin, 3, 3), "conv.bias": (cout,)}
    if stage.op == "composite":
        return {
            "bn.gamma": (cin,),
            "bn.beta": (cin,),
            "conv.weight": (cout, cin, 3, 3),
            "conv.bias": (cout,),
        }
    if stage.op == "transition_down":
        return {"conv.weight": (cout, cin, 1, 1), "conv.bias": (cout,)}
    if stage.op in ("deconv_features", "deconv_flow"):
        return {"deconv.weight": (cin, cout, 3, 3), "deconv.bias": (cout,)}
    return {}


def _dense_block(stages, prefix, source, in_ch, cfg, keep_input, scale):
    k, n_layers = cfg.growth_rate, cfg.layers_per_block
    layer_names = []
    for layer in range(1, n_layers + 1):
        name = f"{prefix}.layer{layer}"
        reads = (source, *layer_names)
        stages.append(Stage(name, "composite", reads, in_ch + (layer - 1) * k, k, scale))
        layer_names.append(name)
    reads = (source, *layer_names) if keep_input else tuple(layer_names)
    out_ch = in_ch + n_layers * k if keep_input else n_layers * k
    stages.append(Stage(prefix, "concat", reads, sum_channels(stages, reads), out_ch, scale))
    return prefix, out_ch


def sum_channels(stages, names):
    by_name = {s.name: s for s in stages}
    return sum(by_name[n].out_channels for n in names)


def build_plan(cfg: NetworkConfig):
    """Ordered stage list for ``cfg``."""
    stages = [Stage("input", "input", (), 0, cfg.input_channels, 1)]
    stages.append(Stage("stem", "conv3x3", ("input",), cfg.input_channels, cfg.initial_channels, 1))
    cur, ch, scale = "stem", cfg.initial_channels, 1
    skips = []
    for b in range(1, cfg.num_blocks_down + 1):
        cur, ch = _dense_block(stages, f"down.block{b}", cur, ch, cfg, True, scale)
        skips.append((cur, ch))
        scale *= 2
        stages.append(Stage(f"down.td{b}", "transition_down", (cur,), ch, ch, scale))
        cur = f"down.td{b}"
    cur, ch = _dense_block(stages, "bottleneck", cur, ch, cfg, True, scale)
    stages.append(Stage("head0", "flow_head", (cur,), ch, 2, scale))
    flow = "head0"
    for u in range(1, cfg.num_blocks_up + 1):
        skip, skip_ch = skips[-u]
        scale //= 2
        # upsampled features take the width of the skip they are joined with
        stages.append(Stage(f"up.tu{u}.features", "deconv_features", (cur,), ch, skip_ch, scale))
        stages.append(Stage(f"up.tu{u}.flow", "deconv_flow", (flow,), 2, 2, scale))
        reads = (f"up.tu{u}.features", skip, f"up.tu{u}.flow")
        stages.append(Stage(f"up.concat{u}", "concat", reads, skip_ch * 2 + 2, skip_ch * 2 + 2, scale))
        cur, ch = _dense_block(stages, f"up.block{u}", f"up.concat{u}", skip_ch * 2 + 2, cfg, False, scale)
        stages.append(Stage(f"head{u}", "flow_head", (cur,), ch, 2, scale))
        flow = f"head{u}"
    return stages


def norm_groups(plan):
    """Stages whose outputs are batch-normalized, in plan order.

    A composite layer normalizes the concatenation of everything it reads.
    Batch statistics are per channel, so normalizing the concatenation equals
    concatenating the normalized parts; concat stages are therefore expanded
    into their parts and each part is normalized once per forward pass.
    """
    by_name = {s.name: s for s in plan}

    def expand(name):
        st = by_name[name]
        if st.op == "concat":
            return [g for r in st.reads for g in expand(r)]
        return [name]

    groups = {}
    for st in plan:
        if st.op == "composite":
            for r in st.reads:
                for g in expand(r):
                    groups[g] = by_name[g].out_channels
    return {name: groups[name] for name in by_name if name in groups}, expand


def plan_text(cfg: NetworkConfig):
    lines = [s.describe() for s in build_plan(cfg)]
    return "\n".join(lines) + "\n"


def _init_param(stage, key, shape, rng, dtype):
    if key.endswith("bias") or key == "bn.beta" or stage.op == "flow_head":
        return np.zeros(shape, dtype=dtype)
    if key == "bn.gamma":
        return np.ones(shape, dtype=dtype)
    # conv weights (out, in, kh, kw); deconv weights (in, out, kh, kw)
    fan_in = shape[1] * shape[2] * shape[3] if key == "conv.weight" else shape[0] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Network:
    """Parameters, batch-norm running statistics and the plan they belong to."""

    def __init__(self, config: NetworkConfig, plan, params, bn_states):
        self.config = config
        self.plan = plan
        self.params = params
        # running statistics keyed by the stage whose output they describe
        self.bn_states = bn_states
        self._by_name = {s.name: s for s in plan}
        self._expand = norm_groups(plan)[1]
        # concat stages read only by composite layers are never materialized
        self._materialize = {r for s in plan if s.op != "composite" for r in s.reads}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype)
                  for k, v in self.params.items()}
        states = {k: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype))
                  for k, s in self.bn_states.items()}
        return Network(self.config, self.plan, params, states)

    def copy(self):
        return self.astype(self.dtype)

    def buffers(self):
        """Named non-trainable arrays (batch-norm running statistics)."""
        out = {}
        for name, st in self.bn_states.items():
            out[f"{name}.norm.running_mean"] = st.running_mean
            out[f"{name}.norm.running_var"] = st.running_var
        return out

    def check_input(self, shape):
        if len(shape) != 4:
            raise ValueError(f"expected NCHW frames, got shape {shape}")
        n, c, h, w = shape
        div = self.config.size_divisor
        if c * 2 != self.config.input_channels:
            raise ValueError(
                f"each frame needs {self.config.input_channels // 2} channels, got {c}"
            )
        if h % div or w % div:
            raise ValueError(f"frame extent {h}x{w} must be divisible by {div}")

    def forward(self, frame1, frame2, training=False, rng=None):
        """Flow pyramid for a batch of frame pairs, coarsest level first.

        Each level is an (N, 2, h, w) tensor holding (u, v) in pixels of its
        own grid.  Train mode uses batch statistics and dropout drawn from
        ``rng``.
        """
        f1 = frame1 if isinstance(frame1, Tensor) else Tensor(frame1, dtype=self.dtype)
        f2 = frame2 if isinstance(frame2, Tensor) else Tensor(frame2, dtype=self.dtype)
        if f1.shape != f2.shape:
            raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
        self.check_input(f1.shape)
        if training and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        cfg = self.config
        p = self.params
        outputs = {}
        normalized = {}

        def norm(name):
            if name not in normalized:
                normalized[name] = normalize2d(outputs[name], self.bn_states[name], training=training)
            return normalized[name]

        for st in self.plan:
            op = st.op
            if op == "input":
                outputs[st.name] = concat([f1, f2])
                continue
            ins = [] if op == "composite" else [outputs[r] for r in st.reads]
            pre = st.name + "."
            if op == "conv3x3" or op == "flow_head":
                y = conv2d(ins[0], p[pre + "conv.weight"], p[pre + "conv.bias"], 1, 1)
            elif op == "composite":
                parts = [norm(g) for r in st.reads for g in self._expand(r)]
                x = affine_concat(parts, p[pre + "bn.gamma"], p[pre + "bn.beta"], cfg.lrelu_slope)
                x = conv2d(x, p[pre + "conv.weight"], p[pre + "conv.bias"], 1, 1)
                y = dropout(x, cfg.dropout_rate, training, rng)
            elif op == "concat":
                if st.name not in self._materialize:
                    continue
                y = concat(ins)
            elif op == "transition_down":
                x = ins[0]
                if x.shape[2] % 2 or x.shape[3] % 2:
                    raise ValueError(f"{st.name}: odd extent {x.shape[2]}x{x.shape[3]}")
                y = maxpool2d(conv2d(x, p[pre + "conv.weight"], p[pre + "conv.bias"], 1, 0))
            elif op == "deconv_features":
                y = conv_transpose2d(ins[0], p[pre + "deconv.weight"], p[pre + "deconv.bias"], 2, 1, 1)
            elif op == "deconv_flow":
                y = conv_transpose2d(ins[0], p[pre + "deconv.weight"], p[pre + "deconv.bias"], 2, 1, 1)
                # displacements are measured in pixels of their own grid
                y = mul(y, 2.0)
            else:
                raise ValueError(f"unknown stage op {op!r}")
            outputs[st.name] = y
        return [outputs[f"head{lvl}"] for lvl in range(cfg.flow_levels)]

    __call__ = forward


def build(config: NetworkConfig, rng=None, dtype=np.float32):
    """Instantiate parameters for ``config``; a pure function of (config, rng state)."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(0 if rng is None else int(rng))
    plan = build_plan(config)
    params = {}
    bn_states = {}
    for st in plan:
        for key, shape in _stage_params(st, config).items():
            name = f"{st.name}.{key}"
            params[name] = Tensor(_init_param(st, key, shape, rng, dtype), requires_grad=True,
                                  dtype=dtype, name=name)
    for name, channels in norm_groups(plan)[0].items():
        bn_states[name] = BatchNormState.fresh(channels, dtype)
    return Network(config, plan, params, bn_states)


def param_count(net: Network):
    return net.param_count()


def layer_count(cfg: NetworkConfig):
    """Weighted layers: stem, composite layers, transition convs, deconvs, heads."""
    counted = ("conv3x3", "composite", "transition_down", "deconv_features", "deconv_flow", "flow_head")
    return sum(1 for s in build_plan(cfg) if s.op in counted)
