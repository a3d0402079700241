"""The unary and pairwise branches, built from the layer primitives.

Both branches share the first encoder blocks.  The unary branch is a
small encoder/decoder: each encoder block is conv+relu+maxpool with
memorized indices, each decoder block unpools with those indices and
convolves (relu on all but the final conv, which emits class scores).
The pairwise branch continues from the shared features with extra conv
blocks, upsamples back to image resolution bilinearly, and turns
neighboring-pixel feature pairs into non-negative affinities via 1x2 /
2x1 edge convolutions followed by softplus.

Parameters live in a flat name -> array dict; the architecture object
owns the shapes and the shared/unary/pairwise partition.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import FormatError, InvalidArgumentError

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    widths: tuple = (8, 16, 32)
    n_classes: int = 3
    shared_blocks: int = 2
    pairwise_widths: tuple = (16, 16)
    kernel: int = 3

    @property
    def depth(self):
        return len(self.widths)

    @property
    def downsample(self):
        return 2 ** self.depth

    def param_shapes(self):
        """Ordered name -> shape mapping for every trainable block."""
        k = self.kernel
        shapes = {}
        cin = self.in_channels
        for i, width in enumerate(self.widths, start=1):
            shapes[f"c{i}.w"] = (width, cin, k, k)
            shapes[f"c{i}.b"] = (width,)
            cin = width
        for i in range(self.depth, 0, -1):
            cout = self.widths[i - 2] if i >= 2 else self.n_classes
            shapes[f"d{i}.w"] = (cout, self.widths[i - 1], k, k)
            shapes[f"d{i}.b"] = (cout,)
        cin = self.widths[self.shared_blocks - 1]
        for i, width in enumerate(self.pairwise_widths, start=1):
            shapes[f"p{i}.w"] = (width, cin, k, k)
            shapes[f"p{i}.b"] = (width,)
            cin = width
        shapes["eh.w"] = (1, cin, 1, 2)
        shapes["eh.b"] = (1,)
        shapes["ev.w"] = (1, cin, 2, 1)
        shapes["ev.b"] = (1,)
        return shapes

    def partition(self):
        """(shared, unary-only, pairwise-only) parameter-name tuples."""
        shared, unary, pairwise = [], [], []
        for name in self.param_shapes():
            block = name.split(".")[0]
            if block.startswith("c") and int(block[1:]) <= self.shared_blocks:
                shared.append(name)
            elif block.startswith(("c", "d")):
                unary.append(name)
            else:
                pairwise.append(name)
        return tuple(shared), tuple(unary), tuple(pairwise)

    def check_image(self, image):
        if image.shape[0] % self.downsample or image.shape[1] % self.downsample:
            raise InvalidArgumentError(
                f"spatial dims {image.shape[:2]} must be divisible by {self.downsample}"
            )
        if image.shape[2] != self.in_channels:
            raise InvalidArgumentError(
                f"expected {self.in_channels} input channels, got {image.shape[2]}"
            )


def init_params(arch: Architecture, seed):
    """Fan-in/fan-out scaled uniform init (biases zero), fixed by seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            cout, cin, kh, kw = shape
            limit = np.sqrt(6.0 / (cin * kh * kw + cout * kh * kw))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _shared_encoder(image, params, arch):
    """Run the shared encoder blocks; returns (features, cache)."""
    x = image
    cache = []
    for i in range(1, arch.shared_blocks + 1):
        pre = layers.conv2d(x, params[f"c{i}.w"], params[f"c{i}.b"], padding=arch.kernel // 2)
        act = layers.relu(pre)
        pooled, idx = layers.maxpool2x2(act)
        cache.append({"x": x, "pre": pre, "idx": idx, "act_shape": act.shape})
        x = pooled
    return x, cache


def _shared_encoder_backward(dout, cache, params, arch):
    grads = {}
    d = dout
    for i in range(arch.shared_blocks, 0, -1):
        blk = cache[i - 1]
        d = layers.maxpool2x2_backward(d, blk["idx"], blk["act_shape"])
        d = layers.relu_backward(d, blk["pre"])
        d, dw, db = layers.conv2d_backward(
            d, blk["x"], params[f"c{i}.w"], padding=arch.kernel // 2
        )
        grads[f"c{i}.w"] = dw
        grads[f"c{i}.b"] = db
    return grads


def unary_forward(image, params, arch: Architecture):
    """Full encoder/decoder pass; returns (Z, cache) with Z at image resolution."""
    arch.check_image(image)
    pad = arch.kernel // 2
    x, shared_cache = _shared_encoder(image, params, arch)
    enc_cache = []
    for i in range(arch.shared_blocks + 1, arch.depth + 1):
        pre = layers.conv2d(x, params[f"c{i}.w"], params[f"c{i}.b"], padding=pad)
        act = layers.relu(pre)
        pooled, idx = layers.maxpool2x2(act)
        enc_cache.append({"x": x, "pre": pre, "idx": idx, "act_shape": act.shape})
        x = pooled
    pool_indices = [blk["idx"] for blk in shared_cache] + [
        blk["idx"] for blk in enc_cache
    ]
    act_shapes = [blk["act_shape"] for blk in shared_cache] + [
        blk["act_shape"] for blk in enc_cache
    ]
    dec_cache = []
    for i in range(arch.depth, 0, -1):
        up = layers.unpool2x2(x, pool_indices[i - 1], act_shapes[i - 1])
        pre = layers.conv2d(up, params[f"d{i}.w"], params[f"d{i}.b"], padding=pad)
        x = layers.relu(pre) if i > 1 else pre  # final conv stays linear
        dec_cache.append({"up": up, "pre": pre, "idx": pool_indices[i - 1]})
    cache = {"shared": shared_cache, "enc": enc_cache, "dec": dec_cache}
    return x, cache


def unary_backward(dz, cache, params, arch: Architecture):
    """Backward through the unary branch; returns grads for unary+shared params."""
    pad = arch.kernel // 2
    grads = {}
    d = dz
    for pos, i in enumerate(range(1, arch.depth + 1)):
        blk = cache["dec"][arch.depth - 1 - pos]
        if i > 1:
            d = layers.relu_backward(d, blk["pre"])
        d, dw, db = layers.conv2d_backward(d, blk["up"], params[f"d{i}.w"], padding=pad)
        grads[f"d{i}.w"] = dw
        grads[f"d{i}.b"] = db
        d = layers.unpool2x2_backward(d, blk["idx"])
    for i in range(arch.depth, arch.shared_blocks, -1):
        blk = cache["enc"][i - arch.shared_blocks - 1]
        d = layers.maxpool2x2_backward(d, blk["idx"], blk["act_shape"])
        d = layers.relu_backward(d, blk["pre"])
        d, dw, db = layers.conv2d_backward(d, blk["x"], params[f"c{i}.w"], padding=pad)
        grads[f"c{i}.w"] = dw
        grads[f"c{i}.b"] = db
    grads.update(_shared_encoder_backward(d, cache["shared"], params, arch))
    return grads


def pairwise_forward(image, params, arch: Architecture):
    """Pixel-affinity pass; returns (wp_h, wp_v, cache).

    wp_h[y, x] >= 0 relates pixels (y,x) and (y,x+1); wp_v[y, x] relates
    (y,x) and (y+1,x).  Softplus keeps both maps non-negative so the CRF
    system stays positive definite.
    """
    arch.check_image(image)
    pad = arch.kernel // 2
    x, shared_cache = _shared_encoder(image, params, arch)
    p_cache = []
    for i in range(1, len(arch.pairwise_widths) + 1):
        pre = layers.conv2d(x, params[f"p{i}.w"], params[f"p{i}.b"], padding=pad)
        p_cache.append({"x": x, "pre": pre})
        x = layers.relu(pre)
    factor = 2 ** arch.shared_blocks
    feat = layers.bilinear_upsample(x, factor)
    pre_h = layers.conv2d(feat, params["eh.w"], params["eh.b"])
    pre_v = layers.conv2d(feat, params["ev.w"], params["ev.b"])
    wp_h = layers.softplus(pre_h[:, :, 0])
    wp_v = layers.softplus(pre_v[:, :, 0])
    cache = {
        "shared": shared_cache,
        "p": p_cache,
        "low_shape": x.shape,
        "feat": feat,
        "pre_h": pre_h,
        "pre_v": pre_v,
        "factor": factor,
    }
    return wp_h, wp_v, cache


def pairwise_backward(dwp_h, dwp_v, cache, params, arch: Architecture):
    """Backward through the pairwise branch; returns grads for pairwise+shared params."""
    pad = arch.kernel // 2
    grads = {}
    dpre_h = layers.softplus_backward(dwp_h, cache["pre_h"][:, :, 0])[:, :, None]
    dpre_v = layers.softplus_backward(dwp_v, cache["pre_v"][:, :, 0])[:, :, None]
    dfeat_h, dw, db = layers.conv2d_backward(dpre_h, cache["feat"], params["eh.w"])
    grads["eh.w"] = dw
    grads["eh.b"] = db
    dfeat_v, dw, db = layers.conv2d_backward(dpre_v, cache["feat"], params["ev.w"])
    grads["ev.w"] = dw
    grads["ev.b"] = db
    d = layers.bilinear_upsample_backward(
        dfeat_h + dfeat_v, cache["factor"], cache["low_shape"]
    )
    for i in range(len(arch.pairwise_widths), 0, -1):
        blk = cache["p"][i - 1]
        d = layers.relu_backward(d, blk["pre"])
        d, dw, db = layers.conv2d_backward(d, blk["x"], params[f"p{i}.w"], padding=pad)
        grads[f"p{i}.w"] = dw
        grads[f"p{i}.b"] = db
    grads.update(_shared_encoder_backward(d, cache["shared"], params, arch))
    return grads


def save_checkpoint(params, path):
    """Binary checkpoint: magic, version, layer count, then per layer
    name length+bytes, shape rank+dims, float64 values (little-endian)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name, value in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path, arch: Architecture):
    """Read a checkpoint and validate every shape against the architecture."""
    expected = arch.param_shapes()
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset, count):
        if offset + count > len(blob):
            raise FormatError("truncated checkpoint", path=path, byte_offset=len(blob))
        return blob[offset : offset + count]

    if need(0, 4) != _CKPT_MAGIC:
        raise FormatError("bad magic", path=path, byte_offset=0)
    version, count = struct.unpack("<II", need(4, 8))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, byte_offset=4)
    params = {}
    pos = 12
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        name = need(pos, name_len).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        shape = struct.unpack(f"<{rank}I", need(pos, 4 * rank))
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(need(pos, 8 * size), dtype="<f8").reshape(shape)
        pos += 8 * size
        if name not in expected:
            raise FormatError(f"unknown layer '{name}'", path=path)
        if tuple(shape) != expected[name]:
            raise FormatError(
                f"layer '{name}': checkpoint shape {tuple(shape)} vs "
                f"architecture shape {expected[name]}",
                path=path,
            )
        params[name] = value.astype(np.float64)
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"missing layers: {sorted(missing)}", path=path)
    return params
