"""The three stage networks: layer graphs, forward passes, and weight-store
(de)serialization.

Architectures (all convolutions valid, all pools ceil-mode):

* pnet (fully convolutional, input >= 12x12):
  conv 3x3x10 s1 -> prelu -> pool 2x2 s2 -> conv 3x3x16 -> prelu ->
  conv 3x3x32 -> prelu -> heads: conv 1x1x2 (softmax) / 1x1x4 / 1x1x10
* rnet (input 24x24):
  conv 3x3x28 -> prelu -> pool 3x3 s2 -> conv 3x3x48 -> prelu -> pool 3x3 s2 ->
  conv 2x2x64 -> prelu -> fc 128 -> prelu -> heads: fc 2 (softmax) / 4 / 10
* onet (input 48x48):
  conv 3x3x32 -> prelu -> pool 3x3 s2 -> conv 3x3x64 -> prelu -> pool 3x3 s2 ->
  conv 3x3x64 -> prelu -> pool 2x2 s2 -> conv 2x2x128 -> prelu -> fc 256 ->
  prelu -> heads: fc 2 (softmax) / 4 / 10

Parameters are named "<stage>.<layer>.<weight|bias|slopes>" (for example
"pnet.conv1.weight") so weight files are interchangeable across builds.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ops

WEIGHTS_MAGIC = b"MTW1"

HEAD_CHANNELS = (2, 4, 10)  # face classification, box regression, landmarks


class WeightStoreError(Exception):
    """Base class for weight-store load/validation failures."""


class BadMagicError(WeightStoreError):
    pass


class TruncatedFileError(WeightStoreError):
    pass


class DuplicateParameterError(WeightStoreError):
    pass


class MissingParameterError(WeightStoreError):
    pass


class UnexpectedParameterError(WeightStoreError):
    pass


class WeightShapeError(WeightStoreError):
    pass


@dataclass(frozen=True)
class Conv:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class PRelu:
    name: str
    channels: int


@dataclass(frozen=True)
class Pool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class NetworkSpec:
    stage: str
    input_size: int  # exact for rnet/onet; minimum extent for the fully convolutional pnet
    fully_convolutional: bool
    trunk: tuple
    heads: tuple  # (classification, box regression, landmarks)


@dataclass
class StageOutput:
    """Network outputs: softmaxed face probability plus regression heads.

    pnet emits maps (N,1,m,n)/(N,4,m,n)/(N,10,m,n); rnet/onet emit per-sample
    vectors (N,)/(N,4)/(N,10).
    """

    face_prob: np.ndarray
    box_offsets: np.ndarray
    landmark_offsets: np.ndarray


def build_pnet():
    trunk = (
        Conv("conv1", 3, 10, 3),
        PRelu("prelu1", 10),
        Pool(2, 2),
        Conv("conv2", 10, 16, 3),
        PRelu("prelu2", 16),
        Conv("conv3", 16, 32, 3),
        PRelu("prelu3", 32),
    )
    heads = (
        Conv("conv4_1", 32, 2, 1),
        Conv("conv4_2", 32, 4, 1),
        Conv("conv4_3", 32, 10, 1),
    )
    return NetworkSpec("pnet", 12, True, trunk, heads)


def build_rnet():
    trunk = (
        Conv("conv1", 3, 28, 3),
        PRelu("prelu1", 28),
        Pool(3, 2),
        Conv("conv2", 28, 48, 3),
        PRelu("prelu2", 48),
        Pool(3, 2),
        Conv("conv3", 48, 64, 2),
        PRelu("prelu3", 64),
        Flatten(),
        Dense("fc1", 576, 128),
        PRelu("prelu4", 128),
    )
    heads = (
        Dense("fc2_1", 128, 2),
        Dense("fc2_2", 128, 4),
        Dense("fc2_3", 128, 10),
    )
    return NetworkSpec("rnet", 24, False, trunk, heads)


def build_onet():
    trunk = (
        Conv("conv1", 3, 32, 3),
        PRelu("prelu1", 32),
        Pool(3, 2),
        Conv("conv2", 32, 64, 3),
        PRelu("prelu2", 64),
        Pool(3, 2),
        Conv("conv3", 64, 64, 3),
        PRelu("prelu3", 64),
        Pool(2, 2),
        Conv("conv4", 64, 128, 2),
        PRelu("prelu4", 128),
        Flatten(),
        Dense("fc1", 1152, 256),
        PRelu("prelu5", 256),
    )
    heads = (
        Dense("fc2_1", 256, 2),
        Dense("fc2_2", 256, 4),
        Dense("fc2_3", 256, 10),
    )
    return NetworkSpec("onet", 48, False, trunk, heads)


def parameter_shapes(spec):
    """Expected parameter name -> shape for a network spec."""
    shapes = {}
    for layer in spec.trunk + spec.heads:
        if isinstance(layer, Conv):
            shapes[f"{spec.stage}.{layer.name}.weight"] = (
                layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            shapes[f"{spec.stage}.{layer.name}.bias"] = (layer.out_channels,)
        elif isinstance(layer, PRelu):
            shapes[f"{spec.stage}.{layer.name}.slopes"] = (layer.channels,)
        elif isinstance(layer, Dense):
            shapes[f"{spec.stage}.{layer.name}.weight"] = (layer.out_features, layer.in_features)
            shapes[f"{spec.stage}.{layer.name}.bias"] = (layer.out_features,)
    return shapes


def validate_store(store, spec, allow_other_stages=True):
    """Check that `store` carries exactly the parameters `spec` demands.

    Parameters belonging to other stages are tolerated when
    `allow_other_stages` (so one file can hold the whole cascade).
    """
    expected = parameter_shapes(spec)
    for name, shape in expected.items():
        if name not in store:
            raise MissingParameterError(f"missing parameter {name!r}")
        got = tuple(store[name].shape)
        if got != shape:
            raise WeightShapeError(
                f"parameter {name!r} has shape {got}, expected {shape}")
    prefix = spec.stage + "."
    for name in store:
        if name not in expected:
            if allow_other_stages and not name.startswith(prefix):
                continue
            raise UnexpectedParameterError(f"unexpected parameter {name!r}")


def _layer_forward(layer, store, stage, x, caches=None):
    if isinstance(layer, Conv):
        w = store[f"{stage}.{layer.name}.weight"]
        b = store[f"{stage}.{layer.name}.bias"]
        if caches is not None:
            out, cols = ops.conv2d_with_cols(x, w, b, layer.stride)
            caches.append(("conv", layer, (x.shape, cols)))
        else:
            out = ops.conv2d(x, w, b, layer.stride)
    elif isinstance(layer, PRelu):
        s = store[f"{stage}.{layer.name}.slopes"]
        out = ops.prelu(x, s)
        if caches is not None:
            caches.append(("prelu", layer, x))
    elif isinstance(layer, Pool):
        out, argmax = ops.max_pool(x, layer.kernel, layer.stride, ceil_mode=True)
        if caches is not None:
            caches.append(("pool", layer, (x.shape, argmax)))
    elif isinstance(layer, Flatten):
        out = x.reshape(x.shape[0], -1)
        if caches is not None:
            caches.append(("flatten", layer, x.shape))
    elif isinstance(layer, Dense):
        w = store[f"{stage}.{layer.name}.weight"]
        b = store[f"{stage}.{layer.name}.bias"]
        out = ops.fully_connected(x, w, b)
        if caches is not None:
            caches.append(("dense", layer, x))
    else:
        raise TypeError(f"unknown layer {layer!r}")
    return out


def _layer_backward(entry, store, stage, d_out, grads):
    kind, layer, cache = entry
    if kind == "conv":
        w = store[f"{stage}.{layer.name}.weight"]
        in_shape, cols = cache
        g = ops.conv2d_backward_cols(in_shape, cols, w, layer.stride, d_out)
        grads[f"{stage}.{layer.name}.weight"] = (
            grads.get(f"{stage}.{layer.name}.weight", 0) + g.d_weights)
        grads[f"{stage}.{layer.name}.bias"] = (
            grads.get(f"{stage}.{layer.name}.bias", 0) + g.d_bias)
        return g.d_input
    if kind == "prelu":
        s = store[f"{stage}.{layer.name}.slopes"]
        g = ops.prelu_backward(cache, s, d_out)
        grads[f"{stage}.{layer.name}.slopes"] = (
            grads.get(f"{stage}.{layer.name}.slopes", 0) + g.d_weights)
        return g.d_input
    if kind == "pool":
        in_shape, argmax = cache
        return ops.max_pool_backward(in_shape, argmax, d_out).d_input
    if kind == "flatten":
        return d_out.reshape(cache)
    if kind == "dense":
        w = store[f"{stage}.{layer.name}.weight"]
        g = ops.fully_connected_backward(cache, w, d_out)
        grads[f"{stage}.{layer.name}.weight"] = (
            grads.get(f"{stage}.{layer.name}.weight", 0) + g.d_weights)
        grads[f"{stage}.{layer.name}.bias"] = (
            grads.get(f"{stage}.{layer.name}.bias", 0) + g.d_bias)
        return g.d_input
    raise TypeError(f"unknown cache entry {kind!r}")


def _check_input(spec, x):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ops.ShapeError(
            f"{spec.stage} input must be (N, 3, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if spec.fully_convolutional:
        if h < spec.input_size or w < spec.input_size:
            raise ops.ShapeError(
                f"{spec.stage} input must be at least "
                f"{spec.input_size}x{spec.input_size}, got {h}x{w}")
    elif (h, w) != (spec.input_size, spec.input_size):
        raise ops.ShapeError(
            f"{spec.stage} input must be exactly "
            f"{spec.input_size}x{spec.input_size}, got {h}x{w}")


def forward(spec, store, x):
    """Run a stage network; returns a StageOutput with softmaxed face
    probabilities. Pure: identical inputs and weights give identical outputs."""
    _check_input(spec, x)
    validate_store(store, spec)
    cls, box, lmk = forward_heads(spec, store, x)
    probs = ops.softmax_channels(cls)
    if spec.fully_convolutional:
        return StageOutput(probs[:, 1:2], box, lmk)
    return StageOutput(probs[:, 1], box, lmk)


def forward_heads(spec, store, x, caches=None, head_caches=None):
    """Forward returning the raw (unsoftmaxed) head outputs.

    With `caches`/`head_caches` lists supplied, records per-layer state for
    `backward_heads`; training flattens pnet's 1x1 head maps to (N, C).
    """
    h = x
    for layer in spec.trunk:
        h = _layer_forward(layer, store, spec.stage, h, caches)
    outs = []
    for head in spec.heads:
        hc = [] if head_caches is not None else None
        out = _layer_forward(head, store, spec.stage, h, hc)
        if head_caches is not None:
            head_caches.append(hc)
        outs.append(out)
    return tuple(outs)


def backward_heads(spec, store, caches, head_caches, d_heads):
    """Backpropagate head gradients through the network.

    Returns a dict of parameter-name -> gradient covering every parameter of
    the stage.
    """
    grads = {}
    d_trunk = None
    for head, hc, d_h in zip(spec.heads, head_caches, d_heads):
        d = d_h
        for entry in reversed(hc):
            d = _layer_backward(entry, store, spec.stage, d, grads)
        d_trunk = d if d_trunk is None else d_trunk + d
    d = d_trunk
    for entry in reversed(caches):
        d = _layer_backward(entry, store, spec.stage, d, grads)
    return grads, d


def pnet_map_extent(size):
    """Spatial extent of pnet's output maps for an input extent."""
    e = size - 2                                  # conv1 3x3
    e = ops.pool_output_extent(e, 2, 2, True)     # pool 2x2 s2 ceil
    e = e - 2                                     # conv2 3x3
    e = e - 2                                     # conv3 3x3
    return e


def save_weights(store, path):
    """Serialize a weight store; format is bit-exact and little-endian."""
    for name, arr in store.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} contains non-finite values")
    blob = bytearray(WEIGHTS_MAGIC)
    blob += struct.pack("<I", len(store))
    for name, arr in store.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    from .fileutil import atomic_write_bytes
    atomic_write_bytes(path, bytes(blob))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"weight file truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_weights(path):
    """Parse a weight file written by save_weights."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    (count,) = struct.unpack("<I", r.take(4))
    store = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n_vals = 1
        for e in shape:
            n_vals *= e
        arr = np.frombuffer(r.take(4 * n_vals), dtype="<f4").reshape(shape)
        if name in store:
            raise DuplicateParameterError(f"duplicate parameter {name!r}")
        store[name] = arr.copy()
    return store


def merge_stores(stores):
    """Merge stage stores into one; duplicate names must not conflict."""
    merged = {}
    for store in stores:
        for name, arr in store.items():
            if name in merged and not np.array_equal(merged[name], arr):
                raise DuplicateParameterError(
                    f"conflicting values for parameter {name!r}")
            merged[name] = arr
    return merged
