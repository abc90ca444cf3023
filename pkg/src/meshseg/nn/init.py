"""Weight initializers for convolution stacks."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

SCHEMES = ("xavier", "identity")


def xavier_bound(in_channels, out_channels, k):
    vol = k ** 3
    return float(np.sqrt(6.0 / (in_channels * vol + out_channels * vol)))


def xavier_uniform(conv, rng):
    out_c, in_c, k = conv.out_channels, conv.in_channels, conv.kernel_size
    bound = xavier_bound(in_c, out_c, k)
    w = conv.weight.data
    w[...] = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
    conv.bias.data[...] = 0


def identity_kernel(conv):
    """Center tap of channel pair (i, i) set to 1.

    Square layers become the identity. Layers widening the channel count
    embed the inputs in the first output channels. Layers narrowing the
    channel count have no identity reading and are zeroed.
    """
    out_c, in_c, k = conv.out_channels, conv.in_channels, conv.kernel_size
    w = conv.weight.data
    w[...] = 0
    conv.bias.data[...] = 0
    if out_c < in_c:
        log.info("identity init undefined for %d -> %d channels; using zeros", in_c, out_c)
        return
    c = k // 2
    for i in range(in_c):
        w[i, i, c, c, c] = 1


def init_weights(model, scheme="xavier", rng=None):
    """(Re)initialize every conv layer of ``model``; biases are zeroed.

    ``model`` is anything exposing ``.layers`` whose items carry a ``conv``
    attribute (:class:`~meshseg.meshnet.Model` in practice).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {SCHEMES}")
    if scheme == "xavier" and rng is None:
        raise ValueError("xavier initialization needs an rng")
    for layer in model.layers:
        if scheme == "xavier":
            xavier_uniform(layer.conv, rng)
        else:
            identity_kernel(layer.conv)
    return model
