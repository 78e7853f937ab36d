"""Frozen convolutional feature extractor and region pooling.

The extractor is a three-conv pipeline (7x7/s2 -> ReLU -> LRN -> 3x3
max-pool/s2 -> 5x5/s2 -> ReLU -> LRN -> 3x3 dilated-by-3 -> ReLU) whose
composed stride is 8.  Dropping the second pool while dilating the last
conv keeps its receptive field identical to the pooled variant, so the
map stays dense without changing what each cell sees.  Features are
computed once per frame over the whole image; every candidate box is
then pooled from the shared map with bilinear RoI alignment.

Weights load from the CWB container: magic "CWB1", a little-endian u32
header length, a UTF-8 JSON array of {name, dtype, shape, offset,
nbytes} entries (offsets relative to the header end), then raw
little-endian float32 blobs, row-major, unpadded.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .sampling import BBox

CWB_MAGIC = b"CWB1"

# Expected layer shapes for full pretrained weights.
FULL_SHAPES = {
    "conv1.kernel": (96, 3, 7, 7),
    "conv1.bias": (96,),
    "conv2.kernel": (256, 96, 5, 5),
    "conv2.bias": (256,),
    "conv3.kernel": (512, 256, 3, 3),
    "conv3.bias": (512,),
}

# Per-channel RGB means subtracted before the first conv.
CHANNEL_MEANS = (123.68, 116.78, 103.94)

TARGET_SIDE = 107
ROI_OUT_SIZE = 7

# (kernel, stride, dilation) per spatial layer, in forward order.
LAYER_GEOMETRY = (
    ("conv1", 7, 2, 1),
    ("pool1", 3, 2, 1),
    ("conv2", 5, 2, 1),
    ("conv3", 3, 1, 3),
)

LRN_PARAMS = dict(size=5, k=2.0, alpha=1e-4, beta=0.75)


class CwbError(Exception):
    """Base error for CWB container problems."""


class CwbMagicError(CwbError):
    pass


class CwbTruncatedError(CwbError):
    pass


class CwbShapeError(CwbError):
    pass


class RoiOutsideError(ValueError):
    """The requested region has no overlap with the feature map."""


@dataclass
class BackboneWeights:
    conv1_kernel: np.ndarray
    conv1_bias: np.ndarray
    conv2_kernel: np.ndarray
    conv2_bias: np.ndarray
    conv3_kernel: np.ndarray
    conv3_bias: np.ndarray

    def __post_init__(self):
        for name, kernel, bias, ksize in (
                ("conv1", self.conv1_kernel, self.conv1_bias, 7),
                ("conv2", self.conv2_kernel, self.conv2_bias, 5),
                ("conv3", self.conv3_kernel, self.conv3_bias, 3)):
            if kernel.ndim != 4 or kernel.shape[2:] != (ksize, ksize):
                raise CwbShapeError(
                    f"{name} kernel must be Cx?x{ksize}x{ksize}, "
                    f"got {kernel.shape}")
            if bias.shape != (kernel.shape[0],):
                raise CwbShapeError(f"{name} bias shape {bias.shape} does not "
                                    f"match Cout={kernel.shape[0]}")
        if self.conv1_kernel.shape[1] != 3:
            raise CwbShapeError("conv1 must take 3 input channels")
        if self.conv2_kernel.shape[1] != self.conv1_kernel.shape[0]:
            raise CwbShapeError("conv2 Cin does not match conv1 Cout")
        if self.conv3_kernel.shape[1] != self.conv2_kernel.shape[0]:
            raise CwbShapeError("conv3 Cin does not match conv2 Cout")
        for arr in (self.conv1_kernel, self.conv1_bias, self.conv2_kernel,
                    self.conv2_bias, self.conv3_kernel, self.conv3_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("backbone weights contain non-finite values")

    @property
    def channels(self) -> int:
        """Number of output feature channels."""
        return self.conv3_kernel.shape[0]

    def as_dict(self):
        return {
            "conv1.kernel": self.conv1_kernel, "conv1.bias": self.conv1_bias,
            "conv2.kernel": self.conv2_kernel, "conv2.bias": self.conv2_bias,
            "conv3.kernel": self.conv3_kernel, "conv3.bias": self.conv3_bias,
        }


# ---------------------------------------------------------------------------
# CWB container
# ---------------------------------------------------------------------------

def save_cwb(path, arrays: dict) -> None:
    """Write named float32 arrays as a CWB file (bit-exact round trip)."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blob = arr.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "dtype": "f32",
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CWB_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_cwb_arrays(path) -> dict:
    """Parse a CWB file into {name: float32 array} with full validation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CWB_MAGIC:
        raise CwbMagicError(f"{path}: not a CWB file (bad magic)")
    header_len = struct.unpack("<I", data[4:8])[0]
    if 8 + header_len > len(data):
        raise CwbTruncatedError(f"{path}: header length {header_len} exceeds "
                                f"file size {len(data)}")
    try:
        entries = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CwbError(f"{path}: malformed header ({exc})") from exc
    base = 8 + header_len
    arrays = {}
    for entry in entries:
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise CwbError(f"{path}: entry {name!r} has unsupported dtype "
                           f"{entry.get('dtype')!r}")
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CwbTruncatedError(
                f"{path}: blob {name!r} extends to byte {end} beyond file "
                f"size {len(data)}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != entry["nbytes"]:
            raise CwbShapeError(f"{path}: blob {name!r} holds "
                                f"{entry['nbytes']} bytes but shape {shape} "
                                f"needs {count * 4}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float32, copy=True)
    return arrays


def load_cwb(path) -> BackboneWeights:
    """Load full pretrained backbone weights, validating exact shapes."""
    arrays = read_cwb_arrays(path)
    for name, shape in FULL_SHAPES.items():
        if name not in arrays:
            raise CwbShapeError(f"{path}: missing entry {name!r}")
        if arrays[name].shape != shape:
            raise CwbShapeError(
                f"{path}: {name.split('.')[0]} has shape "
                f"{arrays[name].shape}, expected {shape}")
        if not np.all(np.isfinite(arrays[name])):
            raise ValueError(f"{path}: {name!r} contains non-finite values")
    return BackboneWeights(
        conv1_kernel=arrays["conv1.kernel"], conv1_bias=arrays["conv1.bias"],
        conv2_kernel=arrays["conv2.kernel"], conv2_bias=arrays["conv2.bias"],
        conv3_kernel=arrays["conv3.kernel"], conv3_bias=arrays["conv3.bias"])


def make_toy_backbone(seed, channels=(32, 64, 128)) -> BackboneWeights:
    """Seeded random backbone with the same layer shapes at reduced width."""
    rng = np.random.default_rng(seed)
    c1, c2, c3 = channels

    def he(cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        return (rng.normal(0.0, std, size=(cout, cin, k, k))
                .astype(np.float32))

    return BackboneWeights(
        conv1_kernel=he(c1, 3, 7), conv1_bias=np.zeros(c1, np.float32),
        conv2_kernel=he(c2, c1, 5), conv2_bias=np.zeros(c2, np.float32),
        conv3_kernel=he(c3, c2, 3), conv3_bias=np.zeros(c3, np.float32))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def chain_geometry(chain=LAYER_GEOMETRY):
    """Composite (stride, center offset, receptive field) of a layer chain."""
    stride = 1
    offset = 0.0
    rf = 1
    for _, kernel, layer_stride, dilation in chain:
        eff = dilation * (kernel - 1) + 1
        offset += stride * (eff - 1) / 2.0
        rf += (eff - 1) * stride
        stride *= layer_stride
    return stride, offset, rf


FEATURE_STRIDE, FEATURE_OFFSET, RECEPTIVE_FIELD = chain_geometry()


def min_input_extent(chain=LAYER_GEOMETRY):
    """Smallest input side that still yields one output cell."""
    need = 1
    for _, kernel, stride, dilation in reversed(chain):
        eff = dilation * (kernel - 1) + 1
        need = stride * (need - 1) + eff
    return need


MIN_INPUT_EXTENT = min_input_extent()


@dataclass
class FeatureMap:
    """Shared per-frame feature tensor plus its pixel-space geometry."""
    tensor: np.ndarray  # 1 x C x h x w
    stride: int = FEATURE_STRIDE
    offset: float = FEATURE_OFFSET

    def to_feature_coords(self, value):
        return (np.asarray(value, dtype=np.float64) - self.offset) / self.stride


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(image, scale: float) -> np.ndarray:
    """Bilinear resize of an HxWxC image by a uniform scale factor."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    oh = max(1, int(round(h * scale)))
    ow = max(1, int(round(w * scale)))
    if oh == h and ow == w and abs(scale - 1.0) < 1e-12:
        return image.copy()
    # Align pixel centers: output center (i + .5)/oh maps into input space.
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    img = image if image.ndim == 3 else image[:, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if image.ndim == 3 else out[:, :, 0]


def preprocess_frame(image, target_box: BBox, target_side: int = TARGET_SIDE):
    """Rescale the frame so the target's geometric-mean side is `target_side`.

    Returns the resized float32 image and the original->preprocessed scale.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if not (target_box.w > 0 and target_box.h > 0):
        raise ValueError(f"degenerate target box {target_box}")
    if (target_box.x < 0 or target_box.y < 0
            or target_box.x + target_box.w > w
            or target_box.y + target_box.h > h):
        raise ValueError(f"target box {target_box} outside {w}x{h} frame")
    scale = target_side / float(np.sqrt(target_box.w * target_box.h))
    return resize_bilinear(image, scale), scale


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def extract_features(image, weights: BackboneWeights) -> FeatureMap:
    """Run the shared conv pipeline over a preprocessed HxWx3 image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise nn.ShapeMismatchError(f"expected HxWx3 image, got {image.shape}")
    x = image - np.asarray(CHANNEL_MEANS, dtype=np.float32)
    # Undersized frames are edge-padded bottom/right, which leaves the
    # feature geometry (anchored at the top-left corner) untouched.
    pad_h = max(0, MIN_INPUT_EXTENT - x.shape[0])
    pad_w = max(0, MIN_INPUT_EXTENT - x.shape[1])
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    x = x.transpose(2, 0, 1)[None]

    x = nn.conv2d(x, weights.conv1_kernel, weights.conv1_bias, stride=2)
    x = nn.relu(x)
    x = nn.lrn(x, **LRN_PARAMS)
    x = nn.maxpool2d(x, 3, 2)
    x = nn.conv2d(x, weights.conv2_kernel, weights.conv2_bias, stride=2)
    x = nn.relu(x)
    x = nn.lrn(x, **LRN_PARAMS)
    x = nn.conv2d(x, weights.conv3_kernel, weights.conv3_bias,
                  stride=1, dilation=3)
    x = nn.relu(x)
    return FeatureMap(tensor=x)


# ---------------------------------------------------------------------------
# RoI alignment
# ---------------------------------------------------------------------------

def _roi_sample_grid(fm: FeatureMap, box: BBox, out_size):
    """Continuous feature-space sample coordinates for each output bin."""
    fx0, fy0 = fm.to_feature_coords([box.x, box.y])
    fw = box.w / fm.stride
    fh = box.h / fm.stride
    h, w = fm.tensor.shape[2], fm.tensor.shape[3]
    if fx0 + fw <= -1 or fx0 >= w or fy0 + fh <= -1 or fy0 >= h:
        raise RoiOutsideError(f"roi {box} maps outside the {h}x{w} feature map")
    bin_w = fw / out_size
    bin_h = fh / out_size
    sx = int(min(4, max(1, np.ceil(bin_w))))
    sy = int(min(4, max(1, np.ceil(bin_h))))
    # Sample (i + .5)/s inside each bin; bins share one uniform grid.
    gx = fx0 + (np.arange(out_size * sx) + 0.5) * (bin_w / sx)
    gy = fy0 + (np.arange(out_size * sy) + 0.5) * (bin_h / sy)
    return gx, gy, sx, sy


def _bilinear_corners(coords, limit):
    c = np.clip(coords, 0.0, limit - 1.0)
    lo = np.floor(c).astype(np.int64)
    lo = np.minimum(lo, limit - 2) if limit > 1 else lo
    frac = c - lo
    return lo, lo + 1 if limit > 1 else lo, frac


def _interp_pool_matrix(coords, limit, out_size, per_bin, dtype):
    """out_size x limit matrix fusing bilinear sampling with bin averaging.

    Row b holds the axis weights whose dot product with a feature line
    equals the mean of that bin's bilinear samples, so pooling one roi
    collapses to W_y @ map @ W_x^T per channel.
    """
    lo, hi, frac = _bilinear_corners(coords, limit)
    weights = np.zeros((len(coords), limit))
    rows = np.arange(len(coords))
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    pooled = weights.reshape(out_size, per_bin, limit).mean(axis=1)
    return pooled.astype(dtype, copy=False)


def _pool_one(rowmajor_map, c, h, w, wy, wx, out_size):
    rows = (wy @ rowmajor_map).reshape(out_size * c, w)
    return (rows @ wx.T).reshape(out_size, c, out_size)


def roi_align(fm: FeatureMap, box: BBox, out_size: int = ROI_OUT_SIZE):
    """Average adaptively-many bilinear samples per bin -> C x out x out."""
    return roi_align_batch(fm, [box], out_size)[0]


def roi_align_batch(fm: FeatureMap, boxes, out_size: int = ROI_OUT_SIZE):
    """roi_align over many boxes sharing one feature map."""
    t = fm.tensor[0]
    c, h, w = t.shape
    # h x (C*w) layout lets each roi pool with two plain matmuls.
    flat = np.ascontiguousarray(t.transpose(1, 0, 2)).reshape(h, c * w)
    out = np.empty((len(boxes), c, out_size, out_size), dtype=t.dtype)
    for i, box in enumerate(boxes):
        gx, gy, sx, sy = _roi_sample_grid(fm, box, out_size)
        wy = _interp_pool_matrix(gy, h, out_size, sy, t.dtype)
        wx = _interp_pool_matrix(gx, w, out_size, sx, t.dtype)
        pooled = _pool_one(flat, c, h, w, wy, wx, out_size)
        out[i] = pooled.transpose(1, 0, 2)
    return out


def roi_align_backward(fm: FeatureMap, box: BBox, grad_out,
                       out_size: int = ROI_OUT_SIZE) -> np.ndarray:
    """Route bin gradients back through the separable pooling matrices."""
    gx, gy, sx, sy = _roi_sample_grid(fm, box, out_size)
    _, _, h, w = fm.tensor.shape
    grad_out = np.asarray(grad_out)
    wy = _interp_pool_matrix(gy, h, out_size, sy, grad_out.dtype)
    wx = _interp_pool_matrix(gx, w, out_size, sx, grad_out.dtype)
    # forward: out[c] = wy @ t[c] @ wx^T  =>  grad t[c] = wy^T @ g[c] @ wx
    rows = np.tensordot(wy.T, grad_out, axes=(1, 1))   # h x C x out
    grad = np.tensordot(rows, wx, axes=(2, 0))         # h x C x w
    return np.ascontiguousarray(np.moveaxis(grad, 0, 1))
