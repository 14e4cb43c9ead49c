"""Lowering of a pruned structure to grouped convolutions, parameter/FLOP
accounting, and the binary checkpoint format.

A compiled conv layer stores, per surviving group, its filters (original
indices, ascending), the positions of the input channels it gathers (into the
compiled input, which has only surviving channels) and a dense weight block of
shape (len(filters), len(gather), Kh, Kw). Output channels are the groups'
filters concatenated in group order. Batchnorm layers are sliced to the same
channel order and linear layers have their columns permuted accordingly.

Checkpoint layout (little-endian)::

    magic b"DSPC" | u32 version | u32 flags | u64 body length
    body: u32 n_meta, (u32 len, utf8 key, u32 len, utf8 value)*   sorted keys
          u32 n_layers, layer records
    layer record: u8 tag, u8 n_extents, u32 extents[n], payload

Flag bit 0 marks a pruned (compiled) model; a cleared bit is a dense
checkpoint, which loads back as a :class:`Model`.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadMagicError, CheckpointError, StructuralError, TruncatedPayloadError, VersionMismatchError
from .model import (
    BatchNormSpec,
    ConvLayerSpec,
    Counts,
    LinearSpec,
    MaxPoolSpec,
    Model,
    NetworkSpec,
    ReLUSpec,
    count_dense_params_flops,
)
from .pruning import GroupStructure, LayerStructure, PrunedStructure
from .tensor import Tensor

MAGIC = b"DSPC"
VERSION = 1
FLAG_COMPILED = 1
_HEADER = struct.Struct("<4sIIQ")

TAG_CONV, TAG_BN, TAG_RELU, TAG_POOL, TAG_LINEAR = 1, 2, 3, 4, 5


@dataclass
class CompiledConv:
    name: str
    out_channels: int  # of the dense layer
    in_channels: int  # of the dense layer
    kernel: tuple[int, int]
    stride: int
    padding: int
    has_bias: bool
    grouped: bool
    in_hw: tuple[int, int]
    filters: list[list[int]]  # per group, original filter ids
    gather: list[list[int]]  # per group, positions into the compiled input
    in_ids: list[int]  # original id of each compiled input channel

    @property
    def out_ids(self) -> list[int]:
        return [k for f in self.filters for k in f]

    def out_hw(self) -> tuple[int, int]:
        kh, kw = self.kernel
        h = (self.in_hw[0] + 2 * self.padding - kh) // self.stride + 1
        w = (self.in_hw[1] + 2 * self.padding - kw) // self.stride + 1
        return h, w


@dataclass
class CompiledBN:
    name: str
    channels: int  # of the dense layer
    ids: list[int]


@dataclass
class CompiledReLU:
    pass


@dataclass
class CompiledPool:
    kernel: int
    stride: int


@dataclass
class CompiledLinear:
    name: str
    in_features: int  # of the dense layer
    out_features: int
    has_bias: bool
    block: int  # flattened features per input channel
    in_channels: int  # of the dense layer, in channel units
    in_ids: list[int]

    @property
    def compiled_in(self) -> int:
        return len(self.in_ids) * self.block


def _counts(layers) -> Counts:
    params = macs = 0
    for layer in layers:
        if isinstance(layer, CompiledConv):
            kh, kw = layer.kernel
            ho, wo = layer.out_hw()
            w = sum(len(f) * len(g) for f, g in zip(layer.filters, layer.gather)) * kh * kw
            params += w + (len(layer.out_ids) if layer.has_bias else 0)
            macs += w * ho * wo
        elif isinstance(layer, CompiledLinear):
            w = layer.compiled_in * layer.out_features
            params += w + (layer.out_features if layer.has_bias else 0)
            macs += w
    return Counts(params, 2 * macs, macs)


class CompiledModel:
    """Executable grouped-convolution network.

    Exposes ``params``, ``forward``, ``state`` and ``load_state`` like
    :class:`Model`, so the same training loop fine-tunes it.
    """

    def __init__(self, layers, params, buffers, input_shape, num_classes, dense: Counts, metadata=None):
        self.layers = layers
        self.params: dict[str, Tensor] = params
        self.buffers: dict[str, np.ndarray] = buffers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dense = dense
        self.metadata: dict[str, str] = dict(metadata or {})

    def forward(self, x, mode: str = "eval", update_stats: bool = True) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = T.as_tensor(x)
        p, train = self.params, mode == "train"
        for layer in self.layers:
            if isinstance(layer, CompiledConv):
                n = layer.name
                ws = [p[f"{n}.g{g}.weight"] for g in range(len(layer.filters))]
                bs = [p[f"{n}.g{g}.bias"] for g in range(len(layer.filters))] if layer.has_bias else None
                x = T.grouped_conv2d(x, ws, layer.gather, layer.stride, layer.padding, bs)
            elif isinstance(layer, CompiledBN):
                n = layer.name
                x = T.batchnorm2d(
                    x, p[f"{n}.gamma"], p[f"{n}.beta"],
                    self.buffers[f"{n}.running_mean"], self.buffers[f"{n}.running_var"],
                    training=train, update_stats=update_stats,
                )
            elif isinstance(layer, CompiledReLU):
                x = T.relu(x)
            elif isinstance(layer, CompiledPool):
                x = T.maxpool2d(x, layer.kernel, layer.stride)
            else:
                if x.ndim != 2:
                    x = T.reshape(x, (x.shape[0], -1))
                x = T.linear(x, p[f"{layer.name}.weight"], p.get(f"{layer.name}.bias"))
        return x

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float64)

    def copy(self) -> "CompiledModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return CompiledModel(self.layers, params, buffers, self.input_shape, self.num_classes, self.dense, self.metadata)

    def counts(self) -> Counts:
        return _counts(self.layers)

    def structure(self) -> PrunedStructure:
        """The PrunedStructure this model realizes (gathers as original channel ids)."""
        out = {}
        for layer in self.layers:
            if isinstance(layer, CompiledConv):
                groups = [
                    GroupStructure(list(f), [layer.in_ids[m] for m in g]) for f, g in zip(layer.filters, layer.gather)
                ]
                out[layer.name] = LayerStructure("conv", layer.in_channels, layer.out_channels, groups)
            elif isinstance(layer, CompiledLinear):
                groups = [GroupStructure(list(range(layer.out_features)), list(layer.in_ids))]
                out[layer.name] = LayerStructure("linear", layer.in_channels, layer.out_features, groups)
        return PrunedStructure(out)


@dataclass(frozen=True)
class Reduction:
    params: int
    flops: int
    macs: int
    dense_params: int
    dense_flops: int
    params_reduction: float  # percent, two decimals
    flops_reduction: float

    def as_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "macs": self.macs,
            "dense_params": self.dense_params,
            "dense_flops": self.dense_flops,
            "params_reduction_pct": self.params_reduction,
            "flops_reduction_pct": self.flops_reduction,
        }


def count_pruned_params_flops(model: CompiledModel) -> Reduction:
    c, d = model.counts(), model.dense
    return Reduction(
        c.params, c.flops, c.macs, d.params, d.flops,
        round(100.0 * (1 - c.params / d.params), 2),
        round(100.0 * (1 - c.flops / d.flops), 2),
    )


def identity_structure(spec: NetworkSpec) -> PrunedStructure:
    layers = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayerSpec):
            g = GroupStructure(list(range(layer.out_channels)), list(range(layer.in_channels)))
            layers[spec.name(i)] = LayerStructure("conv", layer.in_channels, layer.out_channels, [g])
        elif isinstance(layer, LinearSpec):
            shp = spec.input_shape_of(i)
            c_in = shp[0] if len(shp) == 3 else layer.in_features
            g = GroupStructure(list(range(layer.out_features)), list(range(c_in)))
            layers[spec.name(i)] = LayerStructure("linear", c_in, layer.out_features, [g])
    return PrunedStructure(layers)


def compile_model(model: Model, structure: PrunedStructure | None = None, metadata: dict | None = None) -> CompiledModel:
    """Lower ``model`` under ``structure`` (identity when omitted)."""
    spec = model.spec
    structure = identity_structure(spec) if structure is None else structure
    src = model.state()
    layers, params, buffers = [], {}, {}
    ids = list(range(spec.input_shape[0]))  # original ids of the channels currently flowing
    for i, layer in enumerate(spec.layers):
        name = spec.name(i)
        if isinstance(layer, ConvLayerSpec):
            ls = structure.layers.get(name)
            if ls is None:
                raise StructuralError(f"{name}: missing from structure")
            if ls.in_channels != layer.in_channels or ls.out_channels != layer.out_channels:
                raise StructuralError(f"{name}: structure shape does not match the network")
            pos = {c: j for j, c in enumerate(ids)}
            filters, gathers = [], []
            seen: set[int] = set()
            for p, g in enumerate(ls.groups):
                if not g.filters:
                    continue
                if not g.gather:
                    raise StructuralError(f"{name} group {p}: filters without input channels")
                if any(k < 0 or k >= layer.out_channels for k in g.filters) or seen & set(g.filters):
                    raise StructuralError(f"{name} group {p}: invalid or repeated filter index")
                missing = [m for m in g.gather if m not in pos]
                if missing:
                    raise StructuralError(f"{name} group {p}: gathers channels {missing} not produced upstream")
                seen |= set(g.filters)
                f = sorted(g.filters)
                gi = sorted(g.gather)
                q = len(filters)
                w = src[f"{name}.weight"][np.ix_(f, gi)]
                params[f"{name}.g{q}.weight"] = Tensor(w.copy(), requires_grad=True)
                if layer.has_bias:
                    params[f"{name}.g{q}.bias"] = Tensor(src[f"{name}.bias"][f].copy(), requires_grad=True)
                filters.append(f)
                gathers.append([pos[m] for m in gi])
            if not filters:
                raise StructuralError(f"{name}: no surviving groups")
            shp = spec.input_shape_of(i)
            cl = CompiledConv(
                name, layer.out_channels, layer.in_channels, tuple(layer.kernel), layer.stride, layer.padding,
                layer.has_bias, layer.grouped, (shp[1], shp[2]), filters, gathers, list(ids),
            )
            layers.append(cl)
            ids = cl.out_ids
        elif isinstance(layer, BatchNormSpec):
            for key in ("gamma", "beta"):
                params[f"{name}.{key}"] = Tensor(src[f"{name}.{key}"][ids].copy(), requires_grad=True)
            for key in ("running_mean", "running_var"):
                buffers[f"{name}.{key}"] = src[f"{name}.{key}"][ids].copy()
            layers.append(CompiledBN(name, layer.channels, list(ids)))
        elif isinstance(layer, ReLUSpec):
            layers.append(CompiledReLU())
        elif isinstance(layer, MaxPoolSpec):
            layers.append(CompiledPool(layer.kernel, layer.stride))
        elif isinstance(layer, LinearSpec):
            ls = structure.layers.get(name)
            shp = spec.input_shape_of(i)
            block = spec.channel_block(i)
            c_in = shp[0] if len(shp) == 3 else layer.in_features
            if ls is not None:
                if len(ls.groups) != 1 or ls.groups[0].filters != list(range(layer.out_features)):
                    raise StructuralError(f"{name}: linear layers support a single group keeping every output")
                want = set(ls.groups[0].gather)
                missing = want - set(ids)
                if missing:
                    raise StructuralError(f"{name} group 0: gathers channels {sorted(missing)} not produced upstream")
                if want != set(ids):
                    raise StructuralError(f"{name}: reads {sorted(want)} but upstream produces {sorted(ids)}")
            cols = np.concatenate([np.arange(c * block, (c + 1) * block) for c in ids])
            params[f"{name}.weight"] = Tensor(src[f"{name}.weight"][:, cols].copy(), requires_grad=True)
            if layer.has_bias:
                params[f"{name}.bias"] = Tensor(src[f"{name}.bias"].copy(), requires_grad=True)
            layers.append(CompiledLinear(name, layer.in_features, layer.out_features, layer.has_bias, block, c_in, list(ids)))
            ids = list(range(layer.out_features))
    meta = dict(metadata or {})
    out = CompiledModel(layers, params, buffers, spec.input_shape, spec.num_classes, count_dense_params_flops(spec), meta)
    _stamp_counts(out)
    return out


def _stamp_counts(model: CompiledModel) -> None:
    r = count_pruned_params_flops(model)
    for k, v in r.as_dict().items():
        model.metadata[k] = f"{v:.2f}" if isinstance(v, float) else str(v)
    model.metadata["input_shape"] = ",".join(str(s) for s in model.input_shape)
    model.metadata["num_classes"] = str(model.num_classes)


def network_spec(model: CompiledModel) -> NetworkSpec:
    """The dense NetworkSpec the compiled model was lowered from."""
    layers = []
    for l in model.layers:
        if isinstance(l, CompiledConv):
            layers.append(ConvLayerSpec(l.out_channels, l.in_channels, l.kernel, l.stride, l.padding, l.has_bias, l.grouped))
        elif isinstance(l, CompiledBN):
            layers.append(BatchNormSpec(l.channels))
        elif isinstance(l, CompiledReLU):
            layers.append(ReLUSpec())
        elif isinstance(l, CompiledPool):
            layers.append(MaxPoolSpec(l.kernel, l.stride))
        else:
            layers.append(LinearSpec(l.in_features, l.out_features, l.has_bias))
    return NetworkSpec(tuple(layers), model.num_classes, model.input_shape)


def decompile(model: CompiledModel) -> Model:
    """Scatter a compiled model back into dense weights (pruned entries zero)."""
    spec = network_spec(model)
    dense = Model.init(spec, np.random.default_rng(0))
    state = dense.state()
    for k in state:
        if k.endswith(("weight", "bias", "beta", "running_mean")):
            state[k] = np.zeros_like(state[k])
        else:
            state[k] = np.ones_like(state[k])
    src = model.state()
    for l in model.layers:
        if isinstance(l, CompiledConv):
            for q, (f, g) in enumerate(zip(l.filters, l.gather)):
                state[f"{l.name}.weight"][np.ix_(f, [l.in_ids[m] for m in g])] = src[f"{l.name}.g{q}.weight"]
                if l.has_bias:
                    state[f"{l.name}.bias"][f] = src[f"{l.name}.g{q}.bias"]
        elif isinstance(l, CompiledBN):
            for key in ("gamma", "beta", "running_mean", "running_var"):
                state[f"{l.name}.{key}"][l.ids] = src[f"{l.name}.{key}"]
        elif isinstance(l, CompiledLinear):
            cols = np.concatenate([np.arange(c * l.block, (c + 1) * l.block) for c in l.in_ids])
            state[f"{l.name}.weight"][:, cols] = src[f"{l.name}.weight"]
            if l.has_bias:
                state[f"{l.name}.bias"] = src[f"{l.name}.bias"]
    dense.load_state(state)
    dense.metadata = dict(model.metadata)
    return dense


# -- serialization -------------------------------------------------------------


def _u32s(buf: io.BytesIO, values) -> None:
    values = list(values)
    buf.write(struct.pack(f"<I{len(values)}I", len(values), *values))


def _f64(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)) + raw)


def _layer_record(buf: io.BytesIO, tag: int, extents) -> None:
    buf.write(struct.pack(f"<BB{len(extents)}I", tag, len(extents), *extents))


def to_bytes(model, metadata: dict | None = None) -> bytes:
    """Serialize a :class:`Model` (dense checkpoint) or :class:`CompiledModel`."""
    flags = FLAG_COMPILED if isinstance(model, CompiledModel) else 0
    if isinstance(model, Model):
        model = compile_model(model, metadata=getattr(model, "metadata", None))
    meta = dict(model.metadata)
    meta.update({k: str(v) for k, v in (metadata or {}).items()})
    state = model.state()
    body = io.BytesIO()
    body.write(struct.pack("<I", len(meta)))
    for k in sorted(meta):
        _str(body, k)
        _str(body, meta[k])
    body.write(struct.pack("<I", len(model.layers)))
    for l in model.layers:
        if isinstance(l, CompiledConv):
            kh, kw = l.kernel
            ext = [l.out_channels, l.in_channels, kh, kw, l.stride, l.padding, int(l.has_bias), int(l.grouped), *l.in_hw]
            _layer_record(body, TAG_CONV, ext)
            _u32s(body, l.in_ids)
            body.write(struct.pack("<H", len(l.filters)))
            for q, (f, g) in enumerate(zip(l.filters, l.gather)):
                _u32s(body, f)
                _u32s(body, g)
                _f64(body, state[f"{l.name}.g{q}.weight"])
                if l.has_bias:
                    _f64(body, state[f"{l.name}.g{q}.bias"])
        elif isinstance(l, CompiledBN):
            _layer_record(body, TAG_BN, [l.channels])
            _u32s(body, l.ids)
            for key in ("gamma", "beta", "running_mean", "running_var"):
                _f64(body, state[f"{l.name}.{key}"])
        elif isinstance(l, CompiledReLU):
            _layer_record(body, TAG_RELU, [])
        elif isinstance(l, CompiledPool):
            _layer_record(body, TAG_POOL, [l.kernel, l.stride])
        else:
            _layer_record(body, TAG_LINEAR, [l.in_features, l.out_features, int(l.has_bias), l.block, l.in_channels])
            _u32s(body, l.in_ids)
            _f64(body, state[f"{l.name}.weight"])
            if l.has_bias:
                _f64(body, state[f"{l.name}.bias"])
    payload = body.getvalue()
    return _HEADER.pack(MAGIC, VERSION, flags, len(payload)) + payload


def save(model, path: str, metadata: dict | None = None) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    data = to_bytes(model, metadata)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".dspc")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedPayloadError(f"payload ends at byte {len(self.raw)}, needed {self.off + n}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u32s(self) -> list[int]:
        (n,) = self.unpack("I")
        return list(self.unpack(f"{n}I")) if n else []

    def f64(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def text(self) -> str:
        (n,) = self.unpack("I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"metadata is not valid UTF-8: {exc}") from exc


def from_bytes(raw: bytes):
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, flags, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    body = raw[_HEADER.size :]
    if len(body) < length:
        raise TruncatedPayloadError(f"body has {len(body)} bytes, header promises {length}")
    if len(body) > length:
        raise CheckpointError(f"{len(body) - length} trailing bytes after payload")
    r = _Reader(body)
    (n_meta,) = r.unpack("I")
    meta = {}
    for _ in range(n_meta):
        k = r.text()
        meta[k] = r.text()
    try:
        input_shape = tuple(int(s) for s in meta["input_shape"].split(","))
        num_classes = int(meta["num_classes"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"metadata lacks a valid input shape / class count: {exc}") from exc
    (n_layers,) = r.unpack("I")
    layers, params, buffers = [], {}, {}
    for i in range(n_layers):
        tag, n_ext = r.unpack("BB")
        ext = r.unpack(f"{n_ext}I") if n_ext else ()
        if tag == TAG_CONV:
            c_out, c_in, kh, kw, stride, padding, has_bias, grouped, h, w = ext
            name = f"conv{i}"
            in_ids = r.u32s()
            (n_groups,) = r.unpack("H")
            filters, gathers = [], []
            for q in range(n_groups):
                f, g = r.u32s(), r.u32s()
                params[f"{name}.g{q}.weight"] = Tensor(r.f64((len(f), len(g), kh, kw)), requires_grad=True)
                if has_bias:
                    params[f"{name}.g{q}.bias"] = Tensor(r.f64((len(f),)), requires_grad=True)
                filters.append(f)
                gathers.append(g)
            layers.append(
                CompiledConv(name, c_out, c_in, (kh, kw), stride, padding, bool(has_bias), bool(grouped), (h, w), filters, gathers, in_ids)
            )
        elif tag == TAG_BN:
            name = f"bn{i}"
            ids = r.u32s()
            for key in ("gamma", "beta"):
                params[f"{name}.{key}"] = Tensor(r.f64((len(ids),)), requires_grad=True)
            for key in ("running_mean", "running_var"):
                buffers[f"{name}.{key}"] = r.f64((len(ids),))
            layers.append(CompiledBN(name, ext[0], ids))
        elif tag == TAG_RELU:
            layers.append(CompiledReLU())
        elif tag == TAG_POOL:
            layers.append(CompiledPool(*ext))
        elif tag == TAG_LINEAR:
            fin, fout, has_bias, block, c_in = ext
            name = f"linear{i}"
            in_ids = r.u32s()
            params[f"{name}.weight"] = Tensor(r.f64((fout, len(in_ids) * block)), requires_grad=True)
            if has_bias:
                params[f"{name}.bias"] = Tensor(r.f64((fout,)), requires_grad=True)
            layers.append(CompiledLinear(name, fin, fout, bool(has_bias), block, c_in, in_ids))
        else:
            raise CheckpointError(f"layer {i}: unknown type tag {tag}")
    if r.off != len(body):
        raise CheckpointError("layer table does not span the payload")
    stub = CompiledModel(layers, params, buffers, input_shape, num_classes, Counts(0, 0, 0))
    try:
        stub.dense = count_dense_params_flops(network_spec(stub))
    except Exception as exc:
        raise CheckpointError(f"layer table does not form a valid network: {exc}") from exc
    stub.metadata = meta
    _verify_counts(stub)
    if flags & FLAG_COMPILED:
        return stub
    return decompile(stub)


def _verify_counts(model: CompiledModel) -> None:
    r = count_pruned_params_flops(model).as_dict()
    for k, v in r.items():
        expect = f"{v:.2f}" if isinstance(v, float) else str(v)
        if model.metadata.get(k) != expect:
            raise CheckpointError(f"stored {k}={model.metadata.get(k)!r} disagrees with recount {expect}")


def load(path: str):
    """Read a checkpoint: a :class:`Model` for dense files, else a :class:`CompiledModel`."""
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
