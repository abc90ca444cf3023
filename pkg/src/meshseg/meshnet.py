"""MeshNet: a stack of size-preserving dilated 3D convolutions.

The default configuration is the 8-layer atlas model: 71 feature maps,
dilations 1, 1, 1, 2, 4, 8, 1 on 3^3 kernels, and a 1^3 classifier producing
50 class maps on 38^3 subvolumes.
"""

from __future__ import annotations

import copy
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import (
    BatchNormParams,
    ConvParams,
    Tensor,
    batchnorm,
    conv3d_dilated,
    dropout3d,
    init_weights,
    logsoftmax,
    relu,
)

DEFAULT_DILATIONS = (1, 1, 1, 2, 4, 8, 1, 1)
DEFAULT_PARAMETER_COUNT = 825567
FORMAT_MAGIC = "MESHSEG-WEIGHTS"
FORMAT_VERSION = 1


class SpecError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kernel: int = 3
    dilation: int = 1
    padding: int = 1
    bn: bool = True
    relu: bool = True
    dropout: float | None = None
    preserve_size: bool = True


@dataclass(frozen=True)
class ModelSpec:
    modalities: int = 1
    channels: int = 71
    classes: int = 50
    layers: tuple = ()
    subvolume_side: int = 38
    bn_position: str = "before"  # batch norm before or after the ReLU
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @classmethod
    def default(cls, modalities=1, channels=71, classes=50, dropout=None,
                dilations=DEFAULT_DILATIONS, subvolume_side=38, literal_table=False, **kw):
        """Atlas MeshNet; ``dropout`` (0.125 or 0.25 in practice) goes on the 7th layer.

        ``literal_table=True`` gives the classifier a 3^3 kernel with no padding,
        so outputs shrink by 2 voxels per axis.
        """
        *hidden, last = dilations
        layers = [LayerSpec(3, d, d) for d in hidden]
        if dropout is not None and len(layers) >= 7:
            layers[6] = replace(layers[6], dropout=dropout)
        k_last = 3 if literal_table else 1
        layers.append(LayerSpec(k_last, last, 0, bn=False, relu=False, preserve_size=not literal_table))
        return cls(modalities, channels, classes, tuple(layers), subvolume_side, **kw)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))

    def layer_channels(self):
        """(in, out) channel pairs per layer."""
        n = len(self.layers)
        return [
            (self.modalities if i == 0 else self.channels, self.classes if i == n - 1 else self.channels)
            for i in range(n)
        ]

    def validate(self):
        if self.modalities < 1 or self.channels < 1 or self.classes < 1:
            raise SpecError("modalities, channels and classes must be positive")
        if not self.layers:
            raise SpecError("spec has no layers")
        if self.bn_position not in ("before", "after"):
            raise SpecError(f"bn_position must be 'before' or 'after', got {self.bn_position!r}")
        for i, l in enumerate(self.layers, 1):
            if l.kernel < 1 or l.kernel % 2 == 0:
                raise SpecError(f"layer {i}: kernel size must be odd, got {l.kernel}")
            if l.dilation < 1 or l.padding < 0:
                raise SpecError(f"layer {i}: dilation must be >= 1 and padding >= 0")
            if l.preserve_size and l.padding != l.dilation * (l.kernel - 1) // 2:
                raise SpecError(
                    f"layer {i}: padding {l.padding} does not preserve size "
                    f"(expected dilation * (k - 1) / 2 = {l.dilation * (l.kernel - 1) // 2})")
            if l.dropout is not None and not 0 <= l.dropout < 1:
                raise SpecError(f"layer {i}: dropout must lie in [0, 1)")
        if self.output_side(self.subvolume_side) < 1:
            raise SpecError("subvolume side too small for this stack")
        return self

    def output_side(self, n):
        for l in self.layers:
            n = n + 2 * l.padding - l.dilation * (l.kernel - 1)
        return n

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "layers": tuple(LayerSpec(**l) for l in d["layers"])})


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    conv: ConvParams
    bn: BatchNormParams | None = None

    def parameters(self):
        return self.conv.parameters() + (self.bn.parameters() if self.bn else [])


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    layers: list
    training: bool = False
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def copy(self):
        return copy.deepcopy(self)

    def state_arrays(self):
        """Named arrays in serialization order (parameters and running stats)."""
        out = []
        for i, layer in enumerate(self.layers, 1):
            out += [(f"layer{i}.weight", layer.conv.weight.data), (f"layer{i}.bias", layer.conv.bias.data)]
            if layer.bn is not None:
                out += [
                    (f"layer{i}.bn_gamma", layer.bn.gamma.data),
                    (f"layer{i}.bn_beta", layer.bn.beta.data),
                    (f"layer{i}.bn_running_mean", layer.bn.running_mean),
                    (f"layer{i}.bn_running_var", layer.bn.running_var),
                ]
        return out

    def forward(self, x, rng=None, grad=None):
        """Logits for a (batch, modalities, x, y, z) input.

        Uses ``self.training`` to pick batch-norm and dropout behaviour.
        Parameters join the autodiff graph only when ``grad`` is true
        (defaults to ``self.training``).
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 5 or x.shape[1] != self.spec.modalities:
            raise ValueError(
                f"expected input (batch, {self.spec.modalities}, x, y, z), got shape {x.shape}")
        grad = self.training if grad is None else grad
        mode = "train" if self.training else "infer"
        before = self.spec.bn_position == "before"
        for layer in self.layers:
            conv = layer.conv if grad else ConvParams(
                Tensor(layer.conv.weight.data), Tensor(layer.conv.bias.data),
                layer.conv.dilation, layer.conv.padding)
            bn = layer.bn
            if bn is not None and not grad:
                bn = replace(bn, gamma=Tensor(bn.gamma.data), beta=Tensor(bn.beta.data))
            x = conv3d_dilated(x, conv)
            if bn is not None and before:
                x = batchnorm(x, bn, mode)
            if layer.spec.relu:
                x = relu(x)
            if bn is not None and not before:
                x = batchnorm(x, bn, mode)
            if layer.spec.dropout:
                x = dropout3d(x, layer.spec.dropout, mode, rng)
        return x

    __call__ = forward

    def logprobs(self, x, rng=None, grad=None):
        return logsoftmax(self.forward(x, rng, grad), axis=1)

    def predict(self, x, batch_size=8):
        """Per-voxel argmax class for a batch of patches, inference mode, no graph."""
        x = np.asarray(x, dtype=self.dtype)
        was = self.training
        self.training = False
        try:
            out = [
                self.forward(x[i:i + batch_size], grad=False).data.argmax(axis=1)
                for i in range(0, x.shape[0], batch_size)
            ]
        finally:
            self.training = was
        return np.concatenate(out, axis=0)


def build_meshnet(spec, init="xavier", rng=None, dtype=np.float32):
    """Materialize ``spec``; weights drawn by ``init`` (``"xavier"`` or ``"identity"``)."""
    spec.validate()
    dtype = np.dtype(dtype)
    layers = []
    for lspec, (cin, cout) in zip(spec.layers, spec.layer_channels()):
        conv = ConvParams.zeros(cin, cout, lspec.kernel, lspec.dilation, lspec.padding, dtype=dtype)
        bn = BatchNormParams.neutral(cout, spec.bn_eps, spec.bn_momentum, dtype) if lspec.bn else None
        layers.append(Layer(lspec, conv, bn))
    model = Model(spec, layers, dtype=dtype)
    init_weights(model, init, rng)
    return model


def count_parameters(model_or_spec):
    """Kernel weights + biases + batch-norm gamma/beta; running statistics excluded."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    total = 0
    for l, (cin, cout) in zip(spec.layers, spec.layer_channels()):
        total += cin * cout * l.kernel ** 3 + cout
        if l.bn:
            total += 2 * cout
    return total


def count_model_arrays(model):
    """Parameter count taken from the materialized arrays rather than the spec."""
    return int(sum(p.data.size for p in model.parameters()))


def receptive_field(spec):
    spec = spec.spec if isinstance(spec, Model) else spec
    return 1 + sum(l.dilation * (l.kernel - 1) for l in spec.layers)


# -- weight files --------------------------------------------------------------

def save_model(model, path):
    """Write ``model`` as a text header followed by little-endian float32 blobs.

    Header lines: magic, ``format_version``, ``byte_order``, ``dtype``, the
    JSON spec, one ``section`` line per array (name, offset into the blob
    area, byte length, CRC-32), then ``end_header``.
    """
    blobs, sections, offset = [], [], 0
    for name, arr in model.state_arrays():
        b = np.asarray(arr, dtype="<f4").tobytes()
        sections.append(f"section: {name} {offset} {len(b)} {zlib.crc32(b):08x}")
        blobs.append(b)
        offset += len(b)
    header = "\n".join([
        FORMAT_MAGIC,
        f"format_version: {FORMAT_VERSION}",
        "byte_order: little",
        "dtype: float32",
        f"spec: {json.dumps(model.spec.to_dict(), sort_keys=True)}",
        *sections,
        "end_header",
    ]) + "\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def _parse_header(buf):
    end = buf.find(b"end_header\n")
    if not buf.startswith(FORMAT_MAGIC.encode() + b"\n") or end < 0:
        raise WeightFileError("not a MeshNet weight file (bad magic or missing end_header)")
    lines = buf[:end].decode("ascii").splitlines()[1:]
    fields, sections = {}, []
    for line in lines:
        key, _, value = line.partition(": ")
        if key == "section":
            name, off, size, crc = value.split()
            sections.append((name, int(off), int(size), int(crc, 16)))
        else:
            fields[key] = value
    return fields, sections, end + len(b"end_header\n")


def load_model(path, dtype=np.float32):
    buf = Path(path).read_bytes()
    fields, sections, start = _parse_header(buf)
    version = int(fields.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    if fields.get("byte_order") != "little" or fields.get("dtype") != "float32":
        raise WeightFileError("only little-endian float32 weight files are supported")
    spec = ModelSpec.from_dict(json.loads(fields["spec"]))
    model = build_meshnet(spec, init="identity", dtype=dtype)
    arrays = dict(model.state_arrays())
    if [s[0] for s in sections] != list(arrays):
        raise WeightFileError("section list does not match the spec's layer layout")
    for name, off, size, crc in sections:
        target = arrays[name]
        lo = start + off
        blob = buf[lo:lo + size]
        if len(blob) != size or size != target.size * 4:
            raise WeightFileError(f"section {name}: truncated or mis-sized blob ({len(blob)} of {size} bytes)")
        if zlib.crc32(blob) != crc:
            raise WeightFileError(f"section {name}: checksum mismatch")
        target[...] = np.frombuffer(blob, dtype="<f4").reshape(target.shape)
    return model


# -- batch-norm folding --------------------------------------------------------

def fold_batchnorm(model):
    """Absorb inference-mode batch norm into the preceding convolution.

    Returns a new BN-free model computing the same function.
    """
    if model.training:
        raise ValueError("fold_batchnorm needs a model in inference mode")
    if model.spec.bn_position != "before" and any(l.bn for l in model.layers):
        raise ValueError("batch norm after the activation cannot be folded into the convolution")
    layers = []
    for layer in model.layers:
        conv = layer.conv
        w = conv.weight.data.astype(np.float64)
        b = conv.bias.data.astype(np.float64)
        if layer.bn is not None:
            bn = layer.bn
            scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
            w = w * scale[:, None, None, None, None]
            b = (b - bn.running_mean) * scale + bn.beta.data
        new_conv = ConvParams(
            Tensor(w.astype(model.dtype), requires_grad=True),
            Tensor(b.astype(model.dtype), requires_grad=True),
            conv.dilation, conv.padding)
        layers.append(Layer(replace(layer.spec, bn=False), new_conv, None))
    spec = replace(model.spec, layers=tuple(l.spec for l in layers))
    return Model(spec, layers, training=False, dtype=model.dtype)
