"""Tiny-PPG architecture: four depthwise-separable blocks, a dilated
pyramid over the deepest features, and an upsampling segmentation head,
plus the training-only projection head used by the contrastive loss.

Shape chain for the default config (channels, length):
(1, 1920) -> (32, 960) -> (64, 480) -> (128, 240) -> (512, 240)
-> pyramid (4, 240) -> (4, 1920) -> (1, 1920) sigmoid.
"""

import copy
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ParseError, ShapeError, StateError
from .nn import BatchNorm1d, Conv1d, DepthwiseConv1d, MaxPool1d, ReLU, Sigmoid, UpsampleNearest

MAGIC = b"TPML"
VERSION = 1


@dataclass
class ModelConfig:
    dsc_specs: tuple = ((32, 80), (64, 40), (128, 20), (512, 7))
    aspp_rates: tuple = (4, 8, 12, 16)
    aspp_kernel: int = 3
    head_upsample_factor: int = 8
    final_conv_kernel: int = 3
    projection_hidden: int = 128
    projection_dim: int = 64
    normalize_embeddings: bool = True
    input_length: int = 1920
    standard_conv: bool = False   # ablation: plain convs instead of depthwise separable
    use_aspp: bool = True         # ablation: bypass the dilated pyramid
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if len(self.dsc_specs) != 4:
            raise ConfigError(f"expected exactly 4 block specs, got {len(self.dsc_specs)}")
        for ch, k in self.dsc_specs:
            if ch < 1 or k < 1:
                raise ConfigError(f"bad block spec ({ch}, {k})")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError(f"bad dilation rates {self.aspp_rates}")
        if self.aspp_kernel < 1 or self.final_conv_kernel < 1:
            raise ConfigError("kernel sizes must be positive")
        n_pools = 3
        if self.input_length % (2 ** n_pools) != 0 or self.input_length < 2 ** n_pools:
            raise ConfigError(f"input length {self.input_length} not divisible by {2 ** n_pools}")
        if self.head_upsample_factor != 2 ** n_pools:
            raise ConfigError(f"upsample factor must be {2 ** n_pools} to restore the input length")
        if self.projection_hidden < 1 or self.projection_dim < 1:
            raise ConfigError("projection sizes must be positive")

    def to_dict(self):
        d = asdict(self)
        d["dsc_specs"] = [list(s) for s in self.dsc_specs]
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dsc_specs"] = tuple(tuple(s) for s in d["dsc_specs"])
        d["aspp_rates"] = tuple(d["aspp_rates"])
        return cls(**d)


class DSCBlock:
    """Depthwise + pointwise conv, batch norm, then maxpool/ReLU.

    The final block of the stack carries no pool. `mask`, when set, is a
    per-output-channel 0/1 vector applied after the norm; it freezes the
    corresponding channels at exactly zero in both forward and backward.
    """

    def __init__(self, in_channels, out_channels, kernel_size, pooled,
                 standard=False, rng=None, dtype=np.float32,
                 bn_eps=1e-5, bn_momentum=0.1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.pooled = pooled
        self.standard = standard
        if standard:
            self.conv = Conv1d(in_channels, out_channels, kernel_size, rng=rng, dtype=dtype)
            self.dw = None
            self.pw = None
        else:
            self.conv = None
            self.dw = DepthwiseConv1d(in_channels, kernel_size, rng=rng, dtype=dtype)
            self.pw = Conv1d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm1d(out_channels, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.pool = MaxPool1d() if pooled else None
        self.relu = ReLU()
        self.mask = None

    def forward(self, x, training=False):
        if self.standard:
            h = self.conv.forward(x, training)
        else:
            h = self.dw.forward(x, training)
            h = self.pw.forward(h, training)
        h = self.bn.forward(h, training)
        if self.mask is not None:
            h = h * self.mask[None, :, None]
        if self.pool is not None:
            h = self.pool.forward(h, training)
        return self.relu.forward(h, training)

    def backward(self, gy):
        g = self.relu.backward(gy)
        if self.pool is not None:
            g = self.pool.backward(g)
        if self.mask is not None:
            g = g * self.mask[None, :, None]
        g = self.bn.backward(g)
        if self.standard:
            return self.conv.backward(g)
        g = self.pw.backward(g)
        return self.dw.backward(g)

    def conv_layers(self):
        return [self.conv] if self.standard else [self.dw, self.pw]

    def params(self):
        out = []
        for layer in self.conv_layers():
            out.extend(layer.params())
        out.extend(self.bn.params())
        return out


class ProjectionHead:
    """Two pointwise convs mapping deep features to per-point embeddings.

    conv -> BN -> ReLU -> conv -> nearest upsample -> optional L2
    normalization. Pointwise convs commute with nearest upsampling, so
    upsampling last is exactly equivalent to upsampling first and an
    8x compute saving.
    """

    def __init__(self, in_channels, hidden, dim, factor, normalize,
                 rng=None, dtype=np.float32, bn_eps=1e-5, bn_momentum=0.1):
        self.conv1 = Conv1d(in_channels, hidden, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm1d(hidden, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.relu = ReLU()
        self.conv2 = Conv1d(hidden, dim, 1, rng=rng, dtype=dtype)
        self.up = UpsampleNearest(factor)
        self.normalize = normalize
        self._cache = None

    def forward(self, feat, training=False):
        h = self.conv1.forward(feat, training)
        h = self.bn.forward(h, training)
        h = self.relu.forward(h, training)
        h = self.conv2.forward(h, training)
        h = self.up.forward(h, training)
        if not self.normalize:
            self._cache = None
            return h
        norms = np.sqrt((h * h).sum(axis=1, keepdims=True))
        norms = np.maximum(norms, np.asarray(1e-12, dtype=h.dtype))
        e = h / norms
        self._cache = (e, norms)
        return e

    def backward(self, ge):
        if self._cache is not None:
            e, norms = self._cache
            ge = (ge - e * (ge * e).sum(axis=1, keepdims=True)) / norms
        g = self.up.backward(ge)
        g = self.conv2.backward(g)
        g = self.relu.backward(g)
        g = self.bn.backward(g)
        return self.conv1.backward(g)

    def params(self):
        return self.conv1.params() + self.bn.params() + self.conv2.params()


class TinyPPG:
    """The assembled network. Use `build_model` to construct one."""

    def __init__(self, config: ModelConfig, blocks, aspp, final_conv, head, metadata=None):
        self.config = config
        self.blocks = blocks
        self.aspp = aspp
        self.up = UpsampleNearest(config.head_upsample_factor)
        self.final_conv = final_conv
        self.out_act = Sigmoid()
        self.head = head
        self.metadata = dict(metadata or {})
        self._feat = None

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 2:
            raise ShapeError(f"expected a (batch, length) input, got shape {x.shape}")
        if x.shape[1] != self.config.input_length:
            raise ShapeError(f"expected input length {self.config.input_length}, got {x.shape[1]}")
        return x

    def forward(self, x, training=False):
        """Segment a batch. x: (N, L) -> probabilities (N, L), all in (0, 1)."""
        x = self._check_input(x)
        h = x[:, None, :]
        for block in self.blocks:
            h = block.forward(h, training)
        self._feat = h
        if self.config.use_aspp:
            branch_outs = [branch.forward(h, training) for branch in self.aspp]
            h = np.concatenate(branch_outs, axis=1)
        h = self.up.forward(h, training)
        h = self.final_conv.forward(h, training)
        probs = self.out_act.forward(h, training)
        return probs[:, 0, :]

    def forward_with_embeddings(self, x, training=False):
        """Masks plus per-sample-point embeddings (N, L, embed_dim)."""
        if self.head is None:
            raise StateError("projection head is not attached to this model")
        probs = self.forward(x, training)
        emb = self.head.forward(self._feat, training)
        return probs, emb.transpose(0, 2, 1)

    def backward(self, gprobs, gembeddings=None):
        """Backprop dL/dprobs (N, L) and optional dL/dembeddings (N, L, D)."""
        g = self.out_act.backward(gprobs[:, None, :])
        g = self.final_conv.backward(g)
        g = self.up.backward(g)
        if self.config.use_aspp:
            gfeat = None
            for i, branch in enumerate(self.aspp):
                gb = branch.backward(np.ascontiguousarray(g[:, i:i + 1, :]))
                if gfeat is None:
                    gfeat = gb
                else:
                    gfeat += gb
        else:
            gfeat = g
        if gembeddings is not None:
            if self.head is None:
                raise StateError("embedding gradients supplied but no projection head attached")
            gfeat = gfeat + self.head.backward(np.ascontiguousarray(gembeddings.transpose(0, 2, 1)))
        for block in reversed(self.blocks):
            gfeat = block.backward(gfeat)
        return gfeat

    # -- parameter access --------------------------------------------------

    def params(self):
        out = []
        for block in self.blocks:
            out.extend(block.params())
        for branch in self.aspp:
            out.extend(branch.params())
        out.extend(self.final_conv.params())
        if self.head is not None:
            out.extend(self.head.params())
        return out

    def zero_grads(self):
        for _, _, grad in self.params():
            grad[...] = 0

    def block_bns(self):
        """The prunable batch-norm layers, one per block."""
        return [block.bn for block in self.blocks]

    def has_mask(self):
        return any(block.mask is not None for block in self.blocks)

    def without_head(self):
        """A deep copy with the projection head removed."""
        clone = copy.deepcopy(self)
        clone.head = None
        clone._feat = None
        return clone


def build_model(config: ModelConfig, seed: int, with_head: bool = True) -> TinyPPG:
    """Deterministically initialize a model from a config and seed.

    Weights are uniform in +/- sqrt(1 / (in_channels * kernel_size)),
    biases zero, BN gamma one. The backbone draws before the head, so the
    backbone is bit-identical whether or not the head is attached.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    blocks = []
    in_ch = 1
    n_blocks = len(config.dsc_specs)
    for i, (out_ch, k) in enumerate(config.dsc_specs):
        pooled = i < n_blocks - 1
        blocks.append(DSCBlock(in_ch, out_ch, k, pooled, standard=config.standard_conv,
                               rng=rng, bn_eps=config.bn_eps, bn_momentum=config.bn_momentum))
        in_ch = out_ch
    aspp = []
    if config.use_aspp:
        for rate in config.aspp_rates:
            aspp.append(Conv1d(in_ch, 1, config.aspp_kernel, dilation=rate, rng=rng))
        final_in = len(config.aspp_rates)
    else:
        final_in = in_ch
    final_conv = Conv1d(final_in, 1, config.final_conv_kernel, rng=rng)
    head = None
    if with_head:
        head = ProjectionHead(in_ch, config.projection_hidden, config.projection_dim,
                              config.head_upsample_factor, config.normalize_embeddings,
                              rng=rng, bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
    return TinyPPG(config, blocks, aspp, final_conv, head, metadata={"seed": int(seed)})


def count_parameters(model: TinyPPG) -> int:
    """Trainable floats: conv weights and biases plus BN gamma/beta.

    Running statistics and the projection head are excluded. On a
    compacted model this reflects only the surviving channels.
    """
    total = 0
    for block in model.blocks:
        for layer in block.conv_layers():
            total += layer.w.size + layer.b.size
        total += block.bn.gamma.size + block.bn.beta.size
    for branch in model.aspp:
        total += branch.w.size + branch.b.size
    total += model.final_conv.w.size + model.final_conv.b.size
    return int(total)


# -- serialization (TPML v1) ------------------------------------------------

_TAG_BLOCK = 1
_TAG_CONV = 2
_TAG_BN = 3
_TAG_MASK = 4


class _Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b):
        self.parts.append(b)

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f32s(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise ParseError(f"truncated while reading {what}", offset=self.off)
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, count, what):
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()

    def done(self):
        if self.off != len(self.data):
            raise ParseError("trailing data after model payload", offset=self.off)


def _write_conv(w, layer):
    w.u8(_TAG_CONV)
    w.u32(layer.in_channels)
    w.u32(layer.out_channels)
    w.u32(layer.kernel_size)
    w.u32(layer.dilation)
    w.f32s(layer.w)
    w.f32s(layer.b)


def _read_conv(r):
    in_ch = r.u32("conv in_channels")
    out_ch = r.u32("conv out_channels")
    k = r.u32("conv kernel")
    dil = r.u32("conv dilation")
    layer = Conv1d(in_ch, out_ch, k, dilation=dil)
    layer.w = r.f32s(out_ch * in_ch * k, "conv weights").reshape(out_ch, in_ch, k)
    layer.b = r.f32s(out_ch, "conv bias")
    layer.gw = np.zeros_like(layer.w)
    layer.gb = np.zeros_like(layer.b)
    return layer


def _write_bn_payload(w, bn):
    w.f32s(bn.gamma)
    w.f32s(bn.beta)
    w.f32s(bn.running_mean)
    w.f32s(bn.running_var)


def _read_bn_payload(r, bn, channels):
    bn.gamma = r.f32s(channels, "bn gamma")
    bn.beta = r.f32s(channels, "bn beta")
    bn.running_mean = r.f32s(channels, "bn running mean")
    bn.running_var = r.f32s(channels, "bn running var")
    bn.ggamma = np.zeros_like(bn.gamma)
    bn.gbeta = np.zeros_like(bn.beta)


def save_model(model: TinyPPG, path):
    """Write the TPML v1 binary model file."""
    w = _Writer()
    w.raw(MAGIC)
    w.u16(VERSION)
    header = {
        "config": model.config.to_dict(),
        "has_head": model.head is not None,
        "metadata": model.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    w.u32(len(blob))
    w.raw(blob)
    w.u8(1 if model.has_mask() else 0)
    for block in model.blocks:
        w.u8(_TAG_BLOCK)
        w.u32(block.in_channels)
        w.u32(block.out_channels)
        w.u32(block.kernel_size)
        w.u8(1 if block.pooled else 0)
        w.u8(1 if block.standard else 0)
        if block.standard:
            w.f32s(block.conv.w)
            w.f32s(block.conv.b)
        else:
            w.f32s(block.dw.w)
            w.f32s(block.dw.b)
            w.f32s(block.pw.w)
            w.f32s(block.pw.b)
        _write_bn_payload(w, block.bn)
    for branch in model.aspp:
        _write_conv(w, branch)
    _write_conv(w, model.final_conv)
    if model.head is not None:
        _write_conv(w, model.head.conv1)
        w.u8(_TAG_BN)
        w.u32(model.head.bn.channels)
        _write_bn_payload(w, model.head.bn)
        _write_conv(w, model.head.conv2)
    if model.has_mask():
        w.u8(_TAG_MASK)
        for block in model.blocks:
            mask = block.mask
            if mask is None:
                mask = np.ones(block.out_channels, dtype=np.float32)
            bits = np.packbits(mask.astype(bool), bitorder="little")
            w.u32(block.out_channels)
            w.raw(bits.tobytes())
    with open(path, "wb") as f:
        f.write(w.getvalue())


def _expect_tag(r, expected, what):
    tag = r.u8(f"{what} tag")
    if tag != expected:
        raise ParseError(f"expected {what} tag {expected}, found {tag}", offset=r.off - 1)


def load_model(path) -> TinyPPG:
    """Read a TPML v1 file back into a model; exact float32 round trip."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic, not a TPML model file", offset=0)
    version = r.u16("version")
    if version != VERSION:
        raise ParseError(f"unsupported TPML version {version}", offset=4)
    blob_len = r.u32("header length")
    try:
        header = json.loads(r.take(blob_len, "header json").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"invalid header json: {exc}", offset=r.off - blob_len) from None
    config = ModelConfig.from_dict(header["config"])
    config.validate()
    has_mask = r.u8("mask flag")
    blocks = []
    for spec_idx, (out_ch, k) in enumerate(config.dsc_specs):
        _expect_tag(r, _TAG_BLOCK, "block")
        in_ch = r.u32("block in_channels")
        out_read = r.u32("block out_channels")
        k_read = r.u32("block kernel")
        pooled = bool(r.u8("block pool flag"))
        standard = bool(r.u8("block standard flag"))
        if out_read != out_ch or k_read != k:
            raise ParseError(f"block {spec_idx} header disagrees with config "
                             f"({out_read},{k_read}) vs ({out_ch},{k})", offset=r.off)
        block = DSCBlock(in_ch, out_ch, k, pooled, standard=standard,
                         bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        if standard:
            block.conv.w = r.f32s(out_ch * in_ch * k, "block conv weights").reshape(out_ch, in_ch, k)
            block.conv.b = r.f32s(out_ch, "block conv bias")
            block.conv.gw = np.zeros_like(block.conv.w)
            block.conv.gb = np.zeros_like(block.conv.b)
        else:
            block.dw.w = r.f32s(in_ch * k, "block depthwise weights").reshape(in_ch, k)
            block.dw.b = r.f32s(in_ch, "block depthwise bias")
            block.dw.gw = np.zeros_like(block.dw.w)
            block.dw.gb = np.zeros_like(block.dw.b)
            block.pw.w = r.f32s(out_ch * in_ch, "block pointwise weights").reshape(out_ch, in_ch, 1)
            block.pw.b = r.f32s(out_ch, "block pointwise bias")
            block.pw.gw = np.zeros_like(block.pw.w)
            block.pw.gb = np.zeros_like(block.pw.b)
        _read_bn_payload(r, block.bn, out_ch)
        blocks.append(block)
    aspp = []
    if config.use_aspp:
        for _ in config.aspp_rates:
            _expect_tag(r, _TAG_CONV, "pyramid branch")
            aspp.append(_read_conv(r))
    _expect_tag(r, _TAG_CONV, "final conv")
    final_conv = _read_conv(r)
    head = None
    if header.get("has_head"):
        _expect_tag(r, _TAG_CONV, "head conv1")
        conv1 = _read_conv(r)
        _expect_tag(r, _TAG_BN, "head bn")
        hch = r.u32("head bn channels")
        bn = BatchNorm1d(hch, eps=config.bn_eps, momentum=config.bn_momentum)
        _read_bn_payload(r, bn, hch)
        _expect_tag(r, _TAG_CONV, "head conv2")
        conv2 = _read_conv(r)
        head = ProjectionHead(conv1.in_channels, config.projection_hidden, config.projection_dim,
                              config.head_upsample_factor, config.normalize_embeddings,
                              bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        head.conv1 = conv1
        head.bn = bn
        head.conv2 = conv2
    model = TinyPPG(config, blocks, aspp, final_conv, head, metadata=header.get("metadata", {}))
    if has_mask:
        _expect_tag(r, _TAG_MASK, "mask")
        for block in model.blocks:
            n = r.u32("mask length")
            if n != block.out_channels:
                raise ParseError(f"mask length {n} does not match {block.out_channels} channels",
                                 offset=r.off - 4)
            nbytes = (n + 7) // 8
            bits = np.frombuffer(r.take(nbytes, "mask bits"), dtype=np.uint8)
            block.mask = np.unpackbits(bits, bitorder="little", count=n).astype(np.float32)
    r.done()
    return model
