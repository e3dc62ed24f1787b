"""Shared fixture machinery for gradient tests.

Finite differences through relu graphs are only trustworthy when no
pre-activation sits within the probe radius of the kink at 0.  The helpers
here shift per-channel biases (front to back, re-evaluating as they go) so
every relu input in a one-block basic model clears a stated margin.
"""

import numpy as np

import colanet.tensor as T
from colanet.tensor import Tensor, no_grad


def best_offset(values, margin, span=2.5, steps=201):
    """Shift that maximizes the distance of ``values`` from 0."""
    candidates = np.linspace(-span, span, steps)
    gaps = [np.abs(values + off).min() for off in candidates]
    best = int(np.argmax(gaps))
    if gaps[best] < margin:
        raise AssertionError(
            f"cannot clear relu kinks (best gap {gaps[best]:.3f}); "
            "pick a different fixture seed")
    return float(candidates[best])


def clear_relu_kinks(weights, config, x, margin=0.1):
    """Adjust biases of a 1-block basic model so relu inputs avoid 0.

    Walks the graph in evaluation order: each feature-extractor block's BN
    beta, then the local branch conv biases, then the channel-gate hidden
    biases.  Later layers are re-evaluated after each adjustment, so the
    guarantee holds for the final parameter values.
    """
    assert config.variant == "basic" and config.num_cab == 1
    xt = Tensor(np.asarray(x, dtype=np.float32))
    c = config.channels

    def shift_channelwise(pre, bias_tensor):
        for ch in range(pre.shape[1]):
            bias_tensor.data[ch] += np.float32(
                best_offset(pre[:, ch].ravel(), margin))

    with no_grad():
        feat = T.conv2d(xt, weights.tensor("head.weight"),
                        weights.tensor("head.bias"), pad=1)
        for j in range(config.depth):
            blk = f"cab0.fem.b{j}"

            def bn_out():
                conv = T.conv2d(feat, weights.tensor(f"{blk}.conv.weight"),
                                weights.tensor(f"{blk}.conv.bias"), pad=1)
                return T.batch_norm(
                    conv, weights.tensor(f"{blk}.bn.gamma"),
                    weights.tensor(f"{blk}.bn.beta"),
                    weights.buffers[f"{blk}.bn.running_mean"].copy(),
                    weights.buffers[f"{blk}.bn.running_var"].copy(),
                    mode="train", eps=config.bn_eps,
                    momentum=config.bn_momentum)

            shift_channelwise(bn_out().data, weights.tensor(f"{blk}.bn.beta"))
            feat = T.activate(bn_out(), "relu")

        def conv_pre(wname, bname, inp):
            return T.conv2d(inp, weights.tensor(wname),
                            weights.tensor(bname), pad=1)

        shift_channelwise(conv_pre("cab0.local.a.weight",
                                   "cab0.local.a.bias", feat).data,
                          weights.tensor("cab0.local.a.bias"))
        shift_channelwise(conv_pre("cab0.local.b1.weight",
                                   "cab0.local.b1.bias", feat).data,
                          weights.tensor("cab0.local.b1.bias"))

        branch_a = T.activate(conv_pre("cab0.local.a.weight",
                                       "cab0.local.a.bias", feat), "relu")
        mid = T.activate(conv_pre("cab0.local.b1.weight",
                                  "cab0.local.b1.bias", feat), "relu")
        branch_b = conv_pre("cab0.local.b2.weight", "cab0.local.b2.bias", mid)
        for gate, branch in (("ca_a", branch_a), ("ca_b", branch_b)):
            fc1_w = weights.tensor(f"cab0.local.{gate}.fc1.weight")
            fc1_b = weights.tensor(f"cab0.local.{gate}.fc1.bias")
            hidden = T.linear(T.global_avg_pool(branch), fc1_w, fc1_b).data
            shift_channelwise(hidden[:, :, None], fc1_b)
    return weights
