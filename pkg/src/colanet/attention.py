"""The three submodules of the dual-branch fusion block.

``nonlocal_attention`` matches flattened feature patches against each other
(dot product + softmax) and rebuilds the map from the weighted patch sums.
``local_attention_submodule`` runs two conv branches with different receptive
fields, gates each through channel attention and sums them.
``fuse_branches`` blends the two branch outputs with per-channel softmax
weights derived from a pooled descriptor, and ``heat_map`` condenses those
weights into the local-vs-non-local preference fraction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .patches import PatchGeometry, PatchSet, fold, unfold
from .tensor import (
    Tensor,
    activate,
    add,
    concat0,
    conv2d,
    crop_br,
    global_avg_pool,
    linear,
    matmul,
    pad_reflect,
    scalar_mul,
    scale_channels,
    softmax,
    stack,
    take0,
    take_item,
    transpose2d,
)


@dataclass
class NonlocalParams:
    """1x1 embedding convolutions for query, key and value."""

    theta_w: Tensor
    theta_b: Tensor
    phi_w: Tensor
    phi_b: Tensor
    g_w: Tensor
    g_b: Tensor


@dataclass
class ChannelAttentionParams:
    """Squeeze/excite affine maps C -> C/r -> C."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class LocalAttentionParams:
    """Two conv branches (one 3x3 conv vs two) plus their channel gates."""

    a_w: Tensor
    a_b: Tensor
    b1_w: Tensor
    b1_b: Tensor
    b2_w: Tensor
    b2_b: Tensor
    ca_a: ChannelAttentionParams = None
    ca_b: ChannelAttentionParams = None


@dataclass
class FusionParams:
    """Two independent fully-connected maps C -> C producing branch logits."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class AttentionTrace:
    """Diagnostics captured during one block evaluation.

    ``distance_matrix`` holds the post-softmax patch similarity matrix per
    batch item (B, N, N); every row is a probability vector.  The fusion
    weights are per-channel (B, C) and sum to 1 across the two branches.
    """

    distance_matrix: np.ndarray
    fusion_w_nl: np.ndarray = None
    fusion_w_l: np.ndarray = None
    cab_index: int = -1
    heat_values: list = field(default_factory=list)


def _pad_amount(extent, patch, stride):
    if extent < patch:
        raise ShapeError("image smaller than patch size")
    rem = (extent - patch) % stride
    return 0 if rem == 0 else stride - rem


def _check_embed(w, b, channels, name):
    if w.shape != (channels, channels, 1, 1):
        raise ConfigError(
            f"{name} embedding must be a channel-preserving 1x1 conv, "
            f"got weight shape {tuple(w.shape)}")
    if b.shape != (channels,):
        raise ShapeError(f"{name} embedding bias has wrong length")


def nonlocal_attention(x, params, geometry, scale_by_dim=False):
    """Patch-matching self-attention over a batched feature map.

    Query/key/value come from three 1x1 convolutions; each map is cut into
    sliding 3-D patches, flattened, and the row-softmax of Q K^T weights the
    value patches, which are folded back with averaging.  When the stride
    does not tile the map exactly, the bottom/right borders are
    reflect-padded to the next valid size and cropped back afterwards.
    Returns the output map (same shape as the input) and an AttentionTrace.
    """
    n, c, h, w = x.shape
    if (geometry.channels, geometry.height, geometry.width) != (c, h, w):
        raise ShapeError(
            f"geometry {geometry} incompatible with input {x.shape}")
    _check_embed(params.theta_w, params.theta_b, c, "theta")
    _check_embed(params.phi_w, params.phi_b, c, "phi")
    _check_embed(params.g_w, params.g_b, c, "g")

    q = conv2d(x, params.theta_w, params.theta_b, pad=0)
    k = conv2d(x, params.phi_w, params.phi_b, pad=0)
    v = conv2d(x, params.g_w, params.g_b, pad=0)

    pb = _pad_amount(h, geometry.patch_h, geometry.stride)
    pr = _pad_amount(w, geometry.patch_w, geometry.stride)
    padded = PatchGeometry(c, h + pb, w + pr, geometry.patch_h,
                           geometry.patch_w, geometry.stride)

    outs = []
    mats = []
    for i in range(n):
        qp = unfold(pad_reflect(take_item(q, i), pb, pr), padded)
        kp = unfold(pad_reflect(take_item(k, i), pb, pr), padded)
        vp = unfold(pad_reflect(take_item(v, i), pb, pr), padded)
        logits = matmul(qp.patches, transpose2d(kp.patches))
        if scale_by_dim:
            logits = scalar_mul(logits, 1.0 / math.sqrt(padded.row_len))
        m = softmax(logits, axis=1)
        updated = matmul(m, vp.patches)
        outs.append(crop_br(fold(PatchSet(padded, updated)), h, w))
        mats.append(m.data.copy())
    out = outs[0] if n == 1 else concat0(outs)
    return out, AttentionTrace(distance_matrix=np.stack(mats, axis=0))


def channel_attention(x, params, reduction):
    """Scale each channel by a squeeze/excite gate in (0, 1)."""
    c = x.shape[1]
    if c % reduction != 0:
        raise ConfigError(
            f"reduction {reduction} does not divide {c} channels")
    hidden = c // reduction
    if params.fc1_w.shape != (hidden, c) or params.fc2_w.shape != (c, hidden):
        raise ShapeError("channel_attention parameter shapes do not match "
                         f"C={c}, r={reduction}")
    pooled = global_avg_pool(x)
    gate = activate(linear(pooled, params.fc1_w, params.fc1_b), "relu")
    gate = activate(linear(gate, params.fc2_w, params.fc2_b), "sigmoid")
    return scale_channels(x, gate)


def local_attention_submodule(x, params):
    """Two conv branches with different receptive fields, gated and summed.

    Branch A is one 3x3 conv + relu; branch B stacks two 3x3 convs with a
    relu between (effective 5x5 field).  Channel attention is applied to
    each branch before the elementwise sum.
    """
    c = x.shape[1]
    branch_a = activate(conv2d(x, params.a_w, params.a_b, pad=1), "relu")
    mid = activate(conv2d(x, params.b1_w, params.b1_b, pad=1), "relu")
    branch_b = conv2d(mid, params.b2_w, params.b2_b, pad=1)
    r_a = c // params.ca_a.fc1_w.shape[0]
    r_b = c // params.ca_b.fc1_w.shape[0]
    return add(channel_attention(branch_a, params.ca_a, r_a),
               channel_attention(branch_b, params.ca_b, r_b))


def fuse_branches(f_nl, f_l, params):
    """Blend the two branch maps with learned per-channel softmax weights.

    A global pooled descriptor of the branch sum feeds two independent
    fully-connected layers; their logits are softmaxed across the branch
    pair, giving weights that sum to 1 per channel.  Returns the fused map
    and the (w_nl, w_l) weight tensors of shape (N, C).
    """
    if f_nl.shape != f_l.shape:
        raise ShapeError(
            f"branch shapes differ: {f_nl.shape} vs {f_l.shape}")
    pooled = global_avg_pool(add(f_nl, f_l))
    logits_nl = linear(pooled, params.fc1_w, params.fc1_b)
    logits_l = linear(pooled, params.fc2_w, params.fc2_b)
    weights = softmax(stack([logits_nl, logits_l]), axis=0)
    w_nl = take0(weights, 0)
    w_l = take0(weights, 1)
    fused = add(scale_channels(f_nl, w_nl), scale_channels(f_l, w_l))
    return fused, (w_nl, w_l)


def heat_map(w_nl, w_l):
    """Fraction of channels preferring the local branch (ties count local)."""
    a = w_nl.data if isinstance(w_nl, Tensor) else np.asarray(w_nl)
    b = w_l.data if isinstance(w_l, Tensor) else np.asarray(w_l)
    a = a.reshape(-1)
    b = b.reshape(-1)
    if a.shape != b.shape:
        raise ShapeError("weight vectors must have equal length")
    return float(np.mean(b >= a))
