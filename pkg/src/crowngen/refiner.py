"""Coarse-to-fine refinement: pluggable coarse prediction, tooth-position
prompt fusion, feature gathering, and the offset/normal heads with their
training update.

The full volumetric backbone is behind the CoarsePredictor contract; two
implementations ship here. OracleCoarsePredictor perturbs the ground
truth morphologically (a controllable stand-in so the refinement stage
can be exercised and measured), and TrainableCoarsePredictor is a small
two-layer 3x3x3 convolutional network trained with the voxel BCE loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    EmptyVolume,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownLabel,
)
from .losses import (
    bce_loss,
    build_cmpl_weights,
    cmpl_correspondences,
    cmpl_frozen,
    normals_mse_frozen,
    total_loss,
)
from .meshops import estimate_curvature
from .voxelgrid import GridSpec, PointCloud, VoxelVolume, devoxelize, threshold_logits

N_TOOTH_CLASSES = 32
EMBED_DIM = 128
DEFAULT_CHANNELS = 16
DEFAULT_HIDDEN = 64
ORACLE_LOGIT_SCALE = 5.0

_TOOTH_TYPES = {1: "incisor", 2: "incisor", 3: "canine", 4: "premolar",
                5: "premolar", 6: "molar", 7: "molar", 8: "molar"}


@dataclass(frozen=True)
class FdiLabel:
    """Tooth position in the two-digit FDI numbering (permanent dentition)."""

    quadrant: int
    position: int

    def __post_init__(self):
        if not (1 <= self.quadrant <= 4 and 1 <= self.position <= 8):
            raise UnknownLabel(f"FDI {self.quadrant}{self.position} outside permanent dentition")

    @property
    def class_index(self) -> int:
        return (self.quadrant - 1) * 8 + (self.position - 1)

    @property
    def code(self) -> str:
        return f"{self.quadrant}{self.position}"

    @property
    def tooth_type(self) -> str:
        return _TOOTH_TYPES[self.position]

    @classmethod
    def from_code(cls, code: str | int) -> "FdiLabel":
        text = str(code)
        if len(text) != 2 or not text.isdigit():
            raise UnknownLabel(f"FDI code must be two digits, got {code!r}")
        return cls(int(text[0]), int(text[1]))

    @classmethod
    def from_class_index(cls, index: int) -> "FdiLabel":
        if not 0 <= index < N_TOOTH_CLASSES:
            raise UnknownLabel(f"class index {index} outside 0..31")
        return cls(index // 8 + 1, index % 8 + 1)


@dataclass(frozen=True)
class FeatureVolume:
    """Dense C x D x H x W feature grid aligned with an occupancy grid."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1:] != tuple(self.spec.dims):
            raise ValueError(f"data must be (C, D, H, W) matching dims, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel_means(self) -> np.ndarray:
        return self.data.mean(axis=(1, 2, 3))


def gather_features(f: FeatureVolume, crown: VoxelVolume) -> np.ndarray:
    """One feature row per occupied voxel, in devoxelize (lexicographic) order."""
    if tuple(f.spec.dims) != tuple(crown.spec.dims):
        raise ShapeMismatch(f"feature dims {f.spec.dims} != crown dims {crown.spec.dims}")
    if crown.kind != "occupancy":
        raise ValueError("gather_features requires an occupancy mask volume")
    idx = crown.occupied_indices()
    if idx.shape[0] == 0:
        raise EmptyVolume("crown mask selects no voxels")
    return f.data[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.copy()


# ---------------------------------------------------------------------------
# Parameters and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class RefinerParams:
    """All trainable tensors, flat by name.

    tp.embedding (32 x 128), tp.eca_kernel (3,), tp.proj_w / tp.proj_b,
    the two head MLPs mlp1.* (offsets) and mlp2.* (normals), and, when the
    trainable coarse predictor is used, coarse.conv{1,2}_{w,b}.
    """

    channels: int = DEFAULT_CHANNELS
    hidden: int = DEFAULT_HIDDEN
    embed_dim: int = EMBED_DIM
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, channels: int = DEFAULT_CHANNELS, hidden: int = DEFAULT_HIDDEN,
                   embed_dim: int = EMBED_DIM, seed: int = 0,
                   with_coarse: bool = False) -> "RefinerParams":
        rng = np.random.default_rng(seed)
        c, h, d = channels, hidden, embed_dim
        t: dict[str, np.ndarray] = {}
        t["tp.embedding"] = rng.normal(0.0, 0.1, (N_TOOTH_CLASSES, d))
        t["tp.eca_kernel"] = np.zeros(3)
        # identity-preserving start: gate sigmoid(0) = 0.5 cancels against 2*I
        proj = np.zeros((c, c + d))
        proj[:, :c] = 2.0 * np.eye(c)
        t["tp.proj_w"] = proj
        t["tp.proj_b"] = np.zeros(c)
        for name, zero_last in (("mlp1", True), ("mlp2", False)):
            t[f"{name}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(c), (h, c))
            t[f"{name}.b1"] = np.zeros(h)
            t[f"{name}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(h), (h, h))
            t[f"{name}.b2"] = np.zeros(h)
            if zero_last:
                t[f"{name}.w3"] = np.zeros((3, h))
            else:
                t[f"{name}.w3"] = rng.normal(0.0, 1.0 / np.sqrt(h), (3, h))
            t[f"{name}.b3"] = np.zeros(3)
        if with_coarse:
            t["coarse.conv1_w"] = rng.normal(0.0, 1.0 / np.sqrt(27.0), (c, 1, 3, 3, 3))
            t["coarse.conv1_b"] = np.zeros(c)
            t["coarse.conv2_w"] = rng.normal(0.0, 1.0 / np.sqrt(27.0 * c), (1, c, 3, 3, 3))
            t["coarse.conv2_b"] = np.zeros(1)
        return cls(channels=c, hidden=h, embed_dim=d, tensors=t)

    def copy(self) -> "RefinerParams":
        return RefinerParams(self.channels, self.hidden, self.embed_dim,
                             {k: v.copy() for k, v in self.tensors.items()})


_CKPT_MAGIC = b"CGCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: RefinerParams, metadata: dict | None = None):
    """Versioned binary container: named f32 tensors plus JSON metadata."""
    meta = dict(metadata or {})
    meta.setdefault("channels", params.channels)
    meta.setdefault("hidden", params.hidden)
    meta.setdefault("embed_dim", params.embed_dim)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        names = sorted(params.tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = params.tensors[name]
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[RefinerParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4", count=size)
            tensors[name] = data.astype(np.float64).reshape(shape)
    params = RefinerParams(
        channels=int(meta.get("channels", DEFAULT_CHANNELS)),
        hidden=int(meta.get("hidden", DEFAULT_HIDDEN)),
        embed_dim=int(meta.get("embed_dim", EMBED_DIM)),
        tensors=tensors,
    )
    return params, meta


# ---------------------------------------------------------------------------
# Coarse predictors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleNoise:
    """Morphological perturbation of the ground-truth crown volume.

    flip_band is the radius (in voxels) of the band around the true
    surface inside which voxels may flip; backbone errors concentrate
    near the surface, so flips stay local to it.
    """

    dilate_r: int = 0
    erode_r: int = 0
    flip_prob: float = 0.0
    flip_band: int = 2


def _shifted(arr: np.ndarray, offset: tuple[int, int, int]) -> np.ndarray:
    """Zero-filled shift of a 3-D array (no wrap-around)."""
    out = np.zeros_like(arr)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, off in enumerate(offset):
        n = arr.shape[ax]
        if off >= 0:
            src[ax] = slice(0, n - off)
            dst[ax] = slice(off, n)
        else:
            src[ax] = slice(-off, n)
            dst[ax] = slice(0, n + off)
    out[tuple(dst)] = arr[tuple(src)]
    return out


_FEATURE_OFFSETS = [
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    (2, 0, 0), (-2, 0, 0), (0, 2, 0), (0, -2, 0), (0, 0, 2), (0, 0, -2),
]


def occupancy_descriptors(occ: np.ndarray, spec: GridSpec) -> FeatureVolume:
    """16-channel local occupancy descriptor volume.

    Channels: the occupancy itself, the six unit and six two-voxel axis
    shifts, 3^3 and 5^3 box means, and a constant bias channel.
    """
    occ = occ.astype(np.float64)
    chans = [occ]
    chans += [_shifted(occ, off) for off in _FEATURE_OFFSETS]
    chans.append(ndimage.uniform_filter(occ, size=3, mode="constant", cval=0.0))
    chans.append(ndimage.uniform_filter(occ, size=5, mode="constant", cval=0.0))
    chans.append(np.ones_like(occ))
    return FeatureVolume(spec, np.stack(chans, axis=0))


class OracleCoarsePredictor:
    """Coarse predictor that perturbs the known ground truth.

    Flip noise is applied inside a two-voxel band around the ground-truth
    surface, where backbone errors would concentrate. The prediction is
    reproducible from the seed.
    """

    def __init__(self, gt: VoxelVolume, noise: OracleNoise = OracleNoise(),
                 seed: int = 0, logit_scale: float = ORACLE_LOGIT_SCALE):
        if gt.kind != "occupancy":
            raise ValueError("oracle predictor needs an occupancy ground truth")
        self.gt = gt
        self.noise = noise
        self.seed = int(seed)
        self.logit_scale = float(logit_scale)

    def predict(self, v_ios: VoxelVolume, label: FdiLabel) -> tuple[VoxelVolume, FeatureVolume]:
        del v_ios, label  # the oracle consults the ground truth instead
        occ = self.gt.data.astype(bool)
        struct_el = ndimage.generate_binary_structure(3, 1)
        if self.noise.dilate_r > 0:
            occ = ndimage.binary_dilation(occ, struct_el, iterations=self.noise.dilate_r)
        if self.noise.erode_r > 0:
            occ = ndimage.binary_erosion(occ, struct_el, iterations=self.noise.erode_r)
        if self.noise.flip_prob > 0.0:
            rng = np.random.default_rng(self.seed)
            band = ndimage.binary_dilation(self.gt.data.astype(bool), struct_el,
                                           iterations=self.noise.flip_band)
            flips = band & (rng.random(occ.shape) < self.noise.flip_prob)
            occ = occ ^ flips
        logits = np.where(occ, self.logit_scale, -self.logit_scale)
        vol = VoxelVolume(self.gt.spec, logits, kind="logits")
        return vol, occupancy_descriptors(occ, self.gt.spec)


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 3x3x3 convolution: x (Cin, D, H, W) -> (Cout, D, H, W)."""
    cin, D, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((weight.shape[0], D, H, W))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                out += np.einsum(
                    "oi,ixyz->oxyz", weight[:, :, a, b, c],
                    xp[:, a:a + D, b:b + H, c:c + W],
                )
    return out + bias[:, None, None, None]


def _conv3x3_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray):
    """Gradients of _conv3x3 w.r.t. input, weight, and bias."""
    cin, D, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    up = np.pad(upstream, ((0, 0), (1, 1), (1, 1), (1, 1)))
    d_x = np.zeros_like(x)
    d_w = np.zeros_like(weight)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                d_w[:, :, a, b, c] = np.einsum(
                    "oxyz,ixyz->oi", upstream, xp[:, a:a + D, b:b + H, c:c + W]
                )
                d_x += np.einsum(
                    "oi,oxyz->ixyz", weight[:, :, a, b, c],
                    up[:, 2 - a:2 - a + D, 2 - b:2 - b + H, 2 - c:2 - c + W],
                )
    d_b = upstream.sum(axis=(1, 2, 3))
    return d_x, d_w, d_b


class TrainableCoarsePredictor:
    """Two 3x3x3 convolution layers over the occupancy grid.

    tanh(conv1) produces the feature volume; conv2 maps it to one logit
    channel, mirroring the feature-then-logit split of the full backbone.
    """

    def __init__(self, params: RefinerParams):
        if "coarse.conv1_w" not in params.tensors:
            raise ValueError("params lack coarse predictor tensors; initialize(with_coarse=True)")
        self.params = params

    def forward_cached(self, v_ios: VoxelVolume) -> dict:
        t = self.params.tensors
        x = v_ios.data[None, :, :, :]
        a1 = _conv3x3(x, t["coarse.conv1_w"], t["coarse.conv1_b"])
        h = np.tanh(a1)
        logits = _conv3x3(h, t["coarse.conv2_w"], t["coarse.conv2_b"])[0]
        return {"x": x, "h": h, "logits": logits, "spec": v_ios.spec}

    def backward(self, cache: dict, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        t = self.params.tensors
        d_h, d_w2, d_b2 = _conv3x3_backward(cache["h"], t["coarse.conv2_w"],
                                            d_logits[None, :, :, :])
        d_a1 = d_h * (1.0 - cache["h"] ** 2)
        _, d_w1, d_b1 = _conv3x3_backward(cache["x"], t["coarse.conv1_w"], d_a1)
        return {"coarse.conv1_w": d_w1, "coarse.conv1_b": d_b1,
                "coarse.conv2_w": d_w2, "coarse.conv2_b": d_b2}

    def predict(self, v_ios: VoxelVolume, label: FdiLabel) -> tuple[VoxelVolume, FeatureVolume]:
        del label  # position context enters through the prompt fusion instead
        cache = self.forward_cached(v_ios)
        logits = VoxelVolume(v_ios.spec, cache["logits"], kind="logits")
        return logits, FeatureVolume(v_ios.spec, cache["h"])


# ---------------------------------------------------------------------------
# Tooth-position prompt fusion
# ---------------------------------------------------------------------------

def _eca_conv(gap: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Kernel-3 1-D convolution across the channel axis, zero padded."""
    padded = np.concatenate([[0.0], gap, [0.0]])
    return kernel[0] * padded[:-2] + kernel[1] * padded[1:-1] + kernel[2] * padded[2:]


def _eca_conv_backward(d_z: np.ndarray, gap: np.ndarray, kernel: np.ndarray):
    padded = np.concatenate([[0.0], gap, [0.0]])
    d_kernel = np.array([
        np.dot(d_z, padded[:-2]),
        np.dot(d_z, padded[1:-1]),
        np.dot(d_z, padded[2:]),
    ])
    zp = np.concatenate([[0.0], d_z, [0.0]])
    d_gap = kernel[0] * zp[2:] + kernel[1] * zp[1:-1] + kernel[2] * zp[:-2]
    return d_kernel, d_gap


def _check_label(params: RefinerParams, label: FdiLabel):
    table = params.tensors["tp.embedding"]
    if label.class_index >= table.shape[0]:
        raise UnknownLabel(f"class index {label.class_index} not covered by embedding table")


def fuse_tp_prompt(bottleneck: FeatureVolume, label: FdiLabel,
                   params: RefinerParams) -> FeatureVolume:
    """Inject the tooth-position embedding into a feature volume.

    The embedding is broadcast spatially and concatenated along channels,
    a kernel-3 channel-attention gate (global average pool, 1-D conv,
    sigmoid) rescales all channels, and a linear projection returns to the
    original channel count.
    """
    _check_label(params, label)
    t = params.tensors
    emb = t["tp.embedding"][label.class_index]
    c = bottleneck.channels
    gap = np.concatenate([bottleneck.channel_means(), emb])
    gate = 1.0 / (1.0 + np.exp(-_eca_conv(gap, t["tp.eca_kernel"])))
    scaled_feat = bottleneck.data * gate[:c, None, None, None]
    scaled_emb = (gate[c:] * emb)
    out = np.einsum("oc,cxyz->oxyz", t["tp.proj_w"][:, :c], scaled_feat)
    out += (t["tp.proj_w"][:, c:] @ scaled_emb)[:, None, None, None]
    out += t["tp.proj_b"][:, None, None, None]
    return FeatureVolume(bottleneck.spec, out)


def fuse_tp_prompt_gathered(e_base: np.ndarray, channel_means: np.ndarray,
                            label: FdiLabel, params: RefinerParams,
                            want_cache: bool = False):
    """fuse_tp_prompt restricted to gathered rows.

    Equivalent to gathering after fuse_tp_prompt: the attention gate is
    computed from the full-volume channel means, then applied per row.
    """
    _check_label(params, label)
    t = params.tensors
    emb = t["tp.embedding"][label.class_index]
    c = e_base.shape[1]
    gap = np.concatenate([np.asarray(channel_means, dtype=np.float64), emb])
    z = _eca_conv(gap, t["tp.eca_kernel"])
    gate = 1.0 / (1.0 + np.exp(-z))
    x = np.concatenate([e_base, np.broadcast_to(emb, (e_base.shape[0], emb.size))], axis=1)
    x_gated = x * gate
    out = x_gated @ t["tp.proj_w"].T + t["tp.proj_b"]
    if not want_cache:
        return out
    cache = {"x": x, "gate": gate, "gap": gap, "z": z, "c": c,
             "label": label, "emb": emb}
    return out, cache


def fuse_tp_prompt_backward(upstream: np.ndarray, cache: dict,
                            params: RefinerParams) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the gathered fusion w.r.t. its parameters and e_base.

    The volume channel means are treated as constants (they detach from
    the feature path, like the curvature weights elsewhere).
    """
    t = params.tensors
    x, gate, gap, c = cache["x"], cache["gate"], cache["gap"], cache["c"]
    x_gated = x * gate
    d_proj_w = upstream.T @ x_gated
    d_proj_b = upstream.sum(axis=0)
    d_x_gated = upstream @ t["tp.proj_w"]
    d_gate = np.einsum("nc,nc->c", d_x_gated, x)
    d_x = d_x_gated * gate
    d_z = d_gate * gate * (1.0 - gate)
    d_kernel, d_gap = _eca_conv_backward(d_z, gap, t["tp.eca_kernel"])
    d_emb = d_x[:, c:].sum(axis=0) + d_gap[c:]
    d_embedding = np.zeros_like(t["tp.embedding"])
    d_embedding[cache["label"].class_index] = d_emb
    grads = {
        "tp.embedding": d_embedding,
        "tp.eca_kernel": d_kernel,
        "tp.proj_w": d_proj_w,
        "tp.proj_b": d_proj_b,
    }
    return grads, d_x[:, :c]


# ---------------------------------------------------------------------------
# Offset / normal heads
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-12


def _mlp_forward(e: np.ndarray, t: dict, prefix: str):
    a1 = e @ t[f"{prefix}.w1"].T + t[f"{prefix}.b1"]
    h1 = np.tanh(a1)
    a2 = h1 @ t[f"{prefix}.w2"].T + t[f"{prefix}.b2"]
    h2 = np.tanh(a2)
    out = h2 @ t[f"{prefix}.w3"].T + t[f"{prefix}.b3"]
    return out, {"e": e, "h1": h1, "h2": h2}


def _mlp_backward(upstream: np.ndarray, cache: dict, t: dict, prefix: str):
    grads = {}
    grads[f"{prefix}.w3"] = upstream.T @ cache["h2"]
    grads[f"{prefix}.b3"] = upstream.sum(axis=0)
    d_h2 = upstream @ t[f"{prefix}.w3"]
    d_a2 = d_h2 * (1.0 - cache["h2"] ** 2)
    grads[f"{prefix}.w2"] = d_a2.T @ cache["h1"]
    grads[f"{prefix}.b2"] = d_a2.sum(axis=0)
    d_h1 = d_a2 @ t[f"{prefix}.w2"]
    d_a1 = d_h1 * (1.0 - cache["h1"] ** 2)
    grads[f"{prefix}.w1"] = d_a1.T @ cache["e"]
    grads[f"{prefix}.b1"] = d_a1.sum(axis=0)
    d_e = d_a1 @ t[f"{prefix}.w1"]
    return grads, d_e


def refine_with_cache(p_coarse: np.ndarray, e: np.ndarray,
                      params: RefinerParams) -> tuple[PointCloud, dict]:
    p_coarse = np.asarray(p_coarse, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if p_coarse.shape[0] != e.shape[0]:
        raise ShapeMismatch(f"{p_coarse.shape[0]} coarse points vs {e.shape[0]} embeddings")
    if e.shape[1] != params.channels:
        raise ShapeMismatch(f"embeddings have {e.shape[1]} channels, params expect {params.channels}")
    t = params.tensors
    offsets, cache1 = _mlp_forward(e, t, "mlp1")
    raw_n, cache2 = _mlp_forward(e, t, "mlp2")
    lengths = np.linalg.norm(raw_n, axis=1)
    safe = lengths >= _NORM_EPS
    unit = np.where(safe[:, None], raw_n / np.maximum(lengths, _NORM_EPS)[:, None],
                    np.array([0.0, 0.0, 1.0]))
    cloud = PointCloud(p_coarse + offsets, unit)
    cache = {"mlp1": cache1, "mlp2": cache2, "raw_n": raw_n,
             "lengths": lengths, "safe": safe, "unit": unit}
    return cloud, cache


def refine(p_coarse: np.ndarray, e: np.ndarray, params: RefinerParams) -> PointCloud:
    """Refined crown: coarse points plus predicted offsets, with predicted
    unit normals. Output size equals input size for any N."""
    cloud, _ = refine_with_cache(p_coarse, e, params)
    return cloud


def refine_backward(d_points: np.ndarray, d_normals: np.ndarray, cache: dict,
                    params: RefinerParams) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients w.r.t. head parameters and the input embeddings."""
    t = params.tensors
    grads1, d_e1 = _mlp_backward(np.asarray(d_points, dtype=np.float64), cache["mlp1"], t, "mlp1")
    # unit normalization: d_raw = (d_n - n (n . d_n)) / |raw|
    d_n = np.asarray(d_normals, dtype=np.float64)
    unit, lengths, safe = cache["unit"], cache["lengths"], cache["safe"]
    proj = np.einsum("ij,ij->i", unit, d_n)
    d_raw = np.where(safe[:, None],
                     (d_n - unit * proj[:, None]) / np.maximum(lengths, _NORM_EPS)[:, None],
                     0.0)
    grads2, d_e2 = _mlp_backward(d_raw, cache["mlp2"], t, "mlp2")
    grads = {**grads1, **grads2}
    return grads, d_e1 + d_e2


# ---------------------------------------------------------------------------
# AdamW and the training step
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def update(self, params: RefinerParams, grads: dict[str, np.ndarray],
               names: list[str]):
        for name in names:
            if name not in grads:
                continue
            g = grads[name]
            p = params.tensors[name]
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(p), np.zeros_like(p))
                self.steps[name] = 0
            m, v = self.moments[name]
            self.steps[name] += 1
            t = self.steps[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


@dataclass
class TrainingCase:
    """Precomputed per-case tensors consumed by train_step."""

    p_coarse: np.ndarray
    e_base: np.ndarray
    feature_means: np.ndarray
    label: FdiLabel
    gt_points: np.ndarray
    gt_normals: np.ndarray
    gt_margin: np.ndarray
    kappa_gt: np.ndarray
    bce_value: float = 0.0
    v_ios: VoxelVolume | None = None
    v_gt: VoxelVolume | None = None
    case_id: str = ""


@dataclass
class TrainSettings:
    """Knobs of the refinement training loop."""

    loss_mode: str = "cmpl"  # cmpl | cpl | chamfer
    use_tp_prompt: bool = True
    curvature_k: int = 16
    kappa_max: float = 3.0
    nn_method: str = "auto"
    predictor: str = "oracle"  # oracle | trainable


def _stage_param_names(params: RefinerParams, stage: int, settings: TrainSettings) -> list[str]:
    names = []
    if stage >= 1:
        names += [n for n in params.tensors if n.startswith("coarse.")]
    if stage == 2:
        names += [n for n in params.tensors if n.startswith(("mlp1.", "mlp2."))]
        if settings.use_tp_prompt:
            names += [n for n in params.tensors if n.startswith("tp.")]
    return sorted(names)


def _case_kappa_pred(points: np.ndarray, settings: TrainSettings) -> np.ndarray:
    n = points.shape[0]
    k = min(settings.curvature_k, n - 1)
    if k < 5:
        return np.zeros(n)
    field = estimate_curvature(PointCloud(points), k=k, kappa_max=settings.kappa_max)
    return field.kappa


def evaluate_case_losses(case: TrainingCase, params: RefinerParams, stage: int,
                         settings: TrainSettings, want_grads: bool = True):
    """Stage-2 losses (and parameter gradients) for one case.

    Nearest-neighbor correspondences, curvature weights, and margin
    indicators are recomputed from the current prediction, then held
    fixed while differentiating.
    """
    gt_cloud = PointCloud(case.gt_points, case.gt_normals)
    if settings.use_tp_prompt:
        e, fuse_cache = fuse_tp_prompt_gathered(
            case.e_base, case.feature_means, case.label, params, want_cache=True)
    else:
        e, fuse_cache = case.e_base, None
    pred, cache = refine_with_cache(case.p_coarse, e, params)

    # one NN pass per direction serves the margin indicator, the loss
    # correspondences, and the normal-supervision matches
    i_pg, i_gp = cmpl_correspondences(pred, gt_cloud, settings.nn_method)
    kappa_pred = _case_kappa_pred(pred.points, settings)
    pred_margin = np.asarray(case.gt_margin, dtype=bool)[i_pg]
    weights = build_cmpl_weights(kappa_pred, case.kappa_gt, pred_margin, case.gt_margin,
                                 mode=settings.loss_mode, kappa_max=settings.kappa_max)
    cmpl_value, d_pos = cmpl_frozen(pred, gt_cloud, weights, i_pg, i_gp)
    normals_value, d_norm = normals_mse_frozen(pred.normals, case.gt_normals[i_pg])

    losses = {"bce": case.bce_value, "cmpl": cmpl_value, "normals": normals_value}
    losses["total"] = total_loss(case.bce_value, cmpl_value, normals_value, stage)
    if not want_grads:
        return losses, pred, None
    grads, d_e = refine_backward(d_pos, d_norm, cache, params)
    if settings.use_tp_prompt:
        fuse_grads, _ = fuse_tp_prompt_backward(d_e, fuse_cache, params)
        for name, g in fuse_grads.items():
            grads[name] = g
    return losses, pred, grads


def train_step(batch: list[TrainingCase], params: RefinerParams, opt: AdamWState,
               stage: int, settings: TrainSettings) -> dict[str, float]:
    """One AdamW update over a batch; returns the mean loss terms.

    Stage 1 trains only the coarse path (its BCE loss); stage 2 also
    trains the heads, the embedding table, and the attention parameters.
    A non-finite loss term aborts the step before any update.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if not batch:
        raise ValueError("batch must not be empty")
    accum: dict[str, np.ndarray] = {}
    sums = {"bce": 0.0, "cmpl": 0.0, "normals": 0.0}
    scale = 1.0 / len(batch)

    trainable_coarse = settings.predictor == "trainable"
    for case in batch:
        if trainable_coarse:
            if case.v_ios is None or case.v_gt is None:
                raise ValueError("trainable predictor needs v_ios and v_gt on each case")
            predictor = TrainableCoarsePredictor(params)
            cache = predictor.forward_cached(case.v_ios)
            logits = VoxelVolume(case.v_ios.spec, cache["logits"], kind="logits")
            bce_value, bce_grad = bce_loss(logits, case.v_gt)
            case.bce_value = bce_value
            conv_grads = predictor.backward(cache, bce_grad)
            for name, g in conv_grads.items():
                accum[name] = accum.get(name, 0.0) + scale * g
            if stage == 2:
                # refresh the coarse cloud and features from the current
                # conv parameters; the refinement losses treat them as
                # constants when differentiating (like the curvature weights)
                crown = threshold_logits(logits)
                feat = FeatureVolume(case.v_ios.spec, cache["h"])
                case.p_coarse = devoxelize(crown).points
                case.e_base = gather_features(feat, crown)
                case.feature_means = feat.channel_means()
        sums["bce"] += case.bce_value

        if stage == 2:
            losses, _, grads = evaluate_case_losses(case, params, stage, settings)
            sums["cmpl"] += losses["cmpl"]
            sums["normals"] += losses["normals"]
            for name, g in grads.items():
                accum[name] = accum.get(name, 0.0) + scale * g

    means = {k: v * scale for k, v in sums.items()}
    means["total"] = total_loss(means["bce"], means["cmpl"], means["normals"], stage)
    for term in ("bce", "cmpl", "normals", "total"):
        if not np.isfinite(means[term]):
            raise NonFiniteLoss(term, means[term])

    opt.update(params, accum, _stage_param_names(params, stage, settings))
    return means
