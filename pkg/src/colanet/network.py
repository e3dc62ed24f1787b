"""Network assembly: feature-extraction modules, collaborative attention
blocks and the full restoration model with its residual output and loss.

The model is a head conv, a cascade of blocks (each a feature extractor
followed by the dual-branch fusion module) and a tail conv whose output is
added back onto the input.  Two feature-extractor variants exist: ``basic``
stacks conv-BN-relu blocks, ``enhanced`` stacks residual conv pairs.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionTrace,
    ChannelAttentionParams,
    FusionParams,
    LocalAttentionParams,
    NonlocalParams,
    fuse_branches,
    heat_map,
    local_attention_submodule,
    nonlocal_attention,
)
from .degrade import Rng
from .errors import ConfigError, FormatError, ShapeError
from .patches import PatchGeometry
from .tensor import (
    ParamTensor,
    Tensor,
    activate,
    add,
    batch_norm,
    conv2d,
    mean_all,
    mul,
    no_grad,
    sub,
)

_INIT_STREAM = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``fem_depth`` and ``local_bottleneck`` of 0 mean "derive the default":
    depth 6 for the basic extractor, 5 for the enhanced one, and a branch-B
    bottleneck of channels // 4.
    """

    variant: str = "basic"
    num_cab: int = 4
    channels: int = 64
    in_channels: int = 1
    fem_depth: int = 0
    patch_h: int = 7
    patch_w: int = 7
    patch_stride: int = 4
    ca_reduction: int = 4
    local_bottleneck: int = 0
    attn_scale_by_dim: bool = False
    local_ca_shared: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if self.variant not in ("basic", "enhanced"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.num_cab < 1 or self.channels < 1:
            raise ConfigError("num_cab and channels must be positive")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if self.fem_depth < 0:
            raise ConfigError("fem_depth must be non-negative")
        if min(self.patch_h, self.patch_w, self.patch_stride) < 1:
            raise ConfigError("patch geometry entries must be positive")
        if self.channels % self.ca_reduction != 0:
            raise ConfigError("ca_reduction must divide channels")
        return self

    @property
    def depth(self):
        if self.fem_depth:
            return self.fem_depth
        return 6 if self.variant == "basic" else 5

    @property
    def bottleneck(self):
        return self.local_bottleneck or max(1, self.channels // 4)


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, ftype):
    text = text.strip()
    if ftype is bool or ftype == "bool":
        if text not in ("true", "false"):
            raise FormatError(f"expected true/false, got {text!r}")
        return text == "true"
    if ftype is int or ftype == "int":
        return int(text)
    if ftype is float or ftype == "float":
        return float(text)
    return text


def model_config_to_text(config):
    """Serialize a ModelConfig as sorted ``model.key=value`` lines."""
    lines = [f"model.{name}={_format_value(getattr(config, name))}"
             for name in sorted(_CONFIG_FIELDS)]
    return "\n".join(lines) + "\n"


def model_config_from_text(text):
    """Parse ``model.key=value`` lines back into a ModelConfig."""
    cfg = ModelConfig()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key.startswith("model."):
            raise FormatError(f"unknown config key {key!r}")
        name = key[len("model."):]
        if name not in _CONFIG_FIELDS:
            raise FormatError(f"unknown config key {key!r}")
        setattr(cfg, name, _parse_value(value, _CONFIG_FIELDS[name]))
    return cfg.validate()


class ModelWeights:
    """Named parameter store plus non-trainable buffers (BN running stats)."""

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def add(self, name, array):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = ParamTensor(name, Tensor(np.asarray(array, dtype=np.float32)))
        self.params[name] = p
        return p

    def add_buffer(self, name, array):
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(array, dtype=np.float32)
        return self.buffers[name]

    def __getitem__(self, name):
        return self.params[name]

    def tensor(self, name):
        return self.params[name].value

    def param_list(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.value.grad = None


def _conv_init(rng, cout, cin, k):
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    w = rng.normals(cout * cin * k * k).reshape(cout, cin, k, k) * std
    return w.astype(np.float32)


def _linear_init(rng, dout, din):
    std = np.sqrt(2.0 / din)
    return (rng.normals(dout * din).reshape(dout, din) * std).astype(np.float32)


def build_weights(config, seed=0):
    """Construct and initialize the full parameter namespace for a config.

    Conv/linear weights draw from a fan-in-scaled Gaussian
    (std = sqrt(2 / fan_in)); biases start at zero, BN at gamma=1 / beta=0.
    """
    config.validate()
    rng = Rng(seed, _INIT_STREAM)
    w = ModelWeights()
    c = config.channels

    def conv(name, cout, cin, k):
        w.add(f"{name}.weight", _conv_init(rng, cout, cin, k))
        w.add(f"{name}.bias", np.zeros(cout))

    def fc(name, dout, din):
        w.add(f"{name}.weight", _linear_init(rng, dout, din))
        w.add(f"{name}.bias", np.zeros(dout))

    conv("head", c, config.in_channels, 3)
    for i in range(config.num_cab):
        base = f"cab{i}"
        for j in range(config.depth):
            blk = f"{base}.fem.b{j}"
            if config.variant == "basic":
                conv(f"{blk}.conv", c, c, 3)
                w.add(f"{blk}.bn.gamma", np.ones(c))
                w.add(f"{blk}.bn.beta", np.zeros(c))
                w.add_buffer(f"{blk}.bn.running_mean", np.zeros(c))
                w.add_buffer(f"{blk}.bn.running_var", np.ones(c))
            else:
                conv(f"{blk}.conv1", c, c, 3)
                conv(f"{blk}.conv2", c, c, 3)
        for emb in ("theta", "phi", "g"):
            conv(f"{base}.nl.{emb}", c, c, 1)
        conv(f"{base}.local.a", c, c, 3)
        conv(f"{base}.local.b1", config.bottleneck, c, 3)
        conv(f"{base}.local.b2", c, config.bottleneck, 3)
        hidden = c // config.ca_reduction
        gates = ("ca_a",) if config.local_ca_shared else ("ca_a", "ca_b")
        for gate in gates:
            fc(f"{base}.local.{gate}.fc1", hidden, c)
            fc(f"{base}.local.{gate}.fc2", c, hidden)
        fc(f"{base}.fuse.fc1", c, c)
        fc(f"{base}.fuse.fc2", c, c)
    conv("tail", config.in_channels, c, 3)
    return w


# ---------------------------------------------------------------------------
# parameter views
# ---------------------------------------------------------------------------

def _fem_blocks(weights, cab, config):
    blocks = []
    for j in range(config.depth):
        blk = f"cab{cab}.fem.b{j}"
        if config.variant == "basic":
            blocks.append((weights.tensor(f"{blk}.conv.weight"),
                           weights.tensor(f"{blk}.conv.bias"),
                           weights.tensor(f"{blk}.bn.gamma"),
                           weights.tensor(f"{blk}.bn.beta"),
                           weights.buffers[f"{blk}.bn.running_mean"],
                           weights.buffers[f"{blk}.bn.running_var"]))
        else:
            blocks.append((weights.tensor(f"{blk}.conv1.weight"),
                           weights.tensor(f"{blk}.conv1.bias"),
                           weights.tensor(f"{blk}.conv2.weight"),
                           weights.tensor(f"{blk}.conv2.bias")))
    return blocks


def _ca_params(weights, prefix):
    return ChannelAttentionParams(
        fc1_w=weights.tensor(f"{prefix}.fc1.weight"),
        fc1_b=weights.tensor(f"{prefix}.fc1.bias"),
        fc2_w=weights.tensor(f"{prefix}.fc2.weight"),
        fc2_b=weights.tensor(f"{prefix}.fc2.bias"))


def cab_params(weights, cab, config):
    """Structured view of one block's parameters."""
    base = f"cab{cab}"
    nl = NonlocalParams(
        theta_w=weights.tensor(f"{base}.nl.theta.weight"),
        theta_b=weights.tensor(f"{base}.nl.theta.bias"),
        phi_w=weights.tensor(f"{base}.nl.phi.weight"),
        phi_b=weights.tensor(f"{base}.nl.phi.bias"),
        g_w=weights.tensor(f"{base}.nl.g.weight"),
        g_b=weights.tensor(f"{base}.nl.g.bias"))
    ca_a = _ca_params(weights, f"{base}.local.ca_a")
    ca_b = ca_a if config.local_ca_shared else _ca_params(
        weights, f"{base}.local.ca_b")
    local = LocalAttentionParams(
        a_w=weights.tensor(f"{base}.local.a.weight"),
        a_b=weights.tensor(f"{base}.local.a.bias"),
        b1_w=weights.tensor(f"{base}.local.b1.weight"),
        b1_b=weights.tensor(f"{base}.local.b1.bias"),
        b2_w=weights.tensor(f"{base}.local.b2.weight"),
        b2_b=weights.tensor(f"{base}.local.b2.bias"),
        ca_a=ca_a,
        ca_b=ca_b)
    fuse = FusionParams(
        fc1_w=weights.tensor(f"{base}.fuse.fc1.weight"),
        fc1_b=weights.tensor(f"{base}.fuse.fc1.bias"),
        fc2_w=weights.tensor(f"{base}.fuse.fc2.weight"),
        fc2_b=weights.tensor(f"{base}.fuse.fc2.bias"))
    return _fem_blocks(weights, cab, config), nl, local, fuse


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def fem_basic(x, blocks, mode="infer", eps=1e-5, momentum=0.1):
    """Sequential conv -> batch norm -> relu blocks, shape preserving."""
    out = x
    for cw, cb, gamma, beta, rm, rv in blocks:
        out = conv2d(out, cw, cb, pad=1)
        out = batch_norm(out, gamma, beta, rm, rv, mode=mode,
                         eps=eps, momentum=momentum)
        out = activate(out, "relu")
    return out


def fem_enhanced(x, blocks):
    """Residual conv pairs: out = in + conv(relu(conv(in)))."""
    out = x
    for w1, b1, w2, b2 in blocks:
        branch = conv2d(activate(conv2d(out, w1, b1, pad=1), "relu"),
                        w2, b2, pad=1)
        out = add(out, branch)
    return out


def cab_forward(x, params, config, mode="infer"):
    """One collaborative block: feature extraction, both attention branches
    in parallel, and the adaptive fusion.  Returns (output, trace)."""
    blocks, nl, local, fuse = params
    if config.variant == "basic":
        feat = fem_basic(x, blocks, mode=mode, eps=config.bn_eps,
                         momentum=config.bn_momentum)
    else:
        feat = fem_enhanced(x, blocks)
    n, c, h, w = feat.shape
    geometry = PatchGeometry(c, h, w, config.patch_h, config.patch_w,
                             config.patch_stride)
    f_nl, trace = nonlocal_attention(feat, nl, geometry,
                                     scale_by_dim=config.attn_scale_by_dim)
    f_l = local_attention_submodule(feat, local)
    out, (w_nl, w_l) = fuse_branches(f_nl, f_l, fuse)
    trace.fusion_w_nl = w_nl.data.copy()
    trace.fusion_w_l = w_l.data.copy()
    trace.heat_values = [heat_map(trace.fusion_w_nl[b], trace.fusion_w_l[b])
                         for b in range(n)]
    return out, trace


def cola_forward(i_lq, weights, config, mode="infer"):
    """Full model: head conv, block cascade, tail conv, global residual.

    Returns (reconstruction, traces); the reconstruction equals the input
    plus the tail output, so zero tail weights give the identity map.
    """
    x = i_lq if isinstance(i_lq, Tensor) else Tensor(i_lq)
    if x.data.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"expected N x {config.in_channels} x H x W input, got {x.shape}")
    if x.shape[2] < config.patch_h or x.shape[3] < config.patch_w:
        raise ShapeError("input smaller than the attention patch size")
    feat = conv2d(x, weights.tensor("head.weight"),
                  weights.tensor("head.bias"), pad=1)
    traces = []
    for i in range(config.num_cab):
        feat, trace = cab_forward(feat, cab_params(weights, i, config),
                                  config, mode=mode)
        trace.cab_index = i
        traces.append(trace)
    residual = conv2d(feat, weights.tensor("tail.weight"),
                      weights.tensor("tail.bias"), pad=1)
    return add(x, residual), traces


def l2_loss(pred, target):
    """Mean squared difference over all elements, as a scalar tensor."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction {pred.shape} and target {target.shape} differ")
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


def param_census(weights):
    """Exact count of learnable scalars, total plus per-component breakdown."""
    breakdown = {}
    for name, p in weights.params.items():
        group = name.split(".", 1)[0]
        breakdown[group] = breakdown.get(group, 0) + int(p.value.data.size)
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# tiled inference
# ---------------------------------------------------------------------------

@dataclass
class TileResult:
    """Output and traces of one tile evaluation at offset (row, col)."""

    row: int
    col: int
    height: int
    width: int
    traces: list


def _tile_starts(extent, tile, step):
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, step))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)
    return starts


def run_tiled(image, weights, config, tile=64, overlap=16, mode="infer",
              want_traces=False):
    """Run the model over overlapping tiles and average the overlaps.

    ``image`` is a (C, H, W) or (H, W) array on the network's input scale.
    Bounds the quadratic attention cost on large inputs.  Returns the
    restored array (same shape) and a list of TileResult when requested.
    """
    arr = np.asarray(image, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    if overlap >= tile:
        raise ConfigError("overlap must be smaller than the tile size")
    th = min(tile, h)
    tw = min(tile, w)
    step_h = max(1, th - overlap)
    step_w = max(1, tw - overlap)
    acc = np.zeros_like(arr, dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    results = []
    with no_grad():
        for r in _tile_starts(h, th, step_h):
            for col in _tile_starts(w, tw, step_w):
                patch = arr[:, r:r + th, col:col + tw]
                out, traces = cola_forward(patch[None], weights, config,
                                           mode=mode)
                acc[:, r:r + th, col:col + tw] += out.data[0]
                cnt[r:r + th, col:col + tw] += 1.0
                if want_traces:
                    results.append(TileResult(r, col, th, tw, traces))
    restored = (acc / cnt[None]).astype(np.float32)
    return (restored[0] if squeeze else restored), results
