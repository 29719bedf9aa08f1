"""Trainable MLP head on top of the frozen encoders.

Three shared fully connected layers (ReLU between them) project both image
and text features; a final affine classifier maps the last projection to
one logit per in-distribution class plus one per distinct peer label. Only
image features are ever classified; peer logits exist as extra rejection
capacity and receive no cross-entropy supervision.

Parameters are held as float32 (the storage precision); all math upcasts
to float64.

Checkpoint layout:

    bytes 0..7   magic ``ODPCCK01``
    u32 LE       manifest byte length
    manifest     UTF-8 JSON (shapes, dims, seed, epoch, class counts)
    blob         float32 LE parameters, concatenated in manifest tensor order
    u32 LE       CRC32 over manifest bytes + blob
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import persist
from .encoders import EmbeddingMatrix
from .errors import CorruptFileError, FormatError, InvalidArgumentError, ShapeError

CK_MAGIC = b"ODPCCK01"
CK_VERSION = 1

N_SHARED_LAYERS = 3


@dataclass
class MlpHead:
    weights: list[np.ndarray]      # N_SHARED_LAYERS of (dim, dim), applied as x @ W.T
    biases: list[np.ndarray]       # N_SHARED_LAYERS of (dim,)
    clf_weight: np.ndarray         # (num_outputs, dim)
    clf_bias: np.ndarray           # (num_outputs,)
    num_id_classes: int
    num_peer_outputs: int
    seed: int
    epoch: int = 0

    @property
    def feature_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def num_outputs(self) -> int:
        return int(self.clf_weight.shape[0])

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Named parameters in canonical (checkpoint) order."""
        items: list[tuple[str, np.ndarray]] = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            items.append((f"fc{i}.weight", w))
            items.append((f"fc{i}.bias", b))
        items.append(("classifier.weight", self.clf_weight))
        items.append(("classifier.bias", self.clf_bias))
        return items


@dataclass
class ForwardActivations:
    per_layer: list[np.ndarray]    # post-ReLU outputs of the shared layers, (batch, dim) each
    logits: np.ndarray             # (batch, num_outputs)
    probabilities: np.ndarray      # softmax rows, (batch, num_outputs)
    pre_activations: list[np.ndarray] = field(repr=False, default_factory=list)


def init_head(
    num_id_classes: int,
    num_peer_outputs: int,
    seed: int,
    feature_dim: int = 512,
    hidden_dims: tuple[int, ...] | None = None,
) -> MlpHead:
    """Initialize a head: weights uniform in +-1/sqrt(fan_in), biases zero.

    hidden_dims defaults to (feature_dim,) * 3; exactly three shared layers
    are supported.
    """
    if num_id_classes < 2:
        raise InvalidArgumentError(f"need at least 2 ID classes, got {num_id_classes}")
    if num_peer_outputs < 0:
        raise InvalidArgumentError(f"num_peer_outputs must be >= 0, got {num_peer_outputs}")
    dims = tuple(hidden_dims) if hidden_dims is not None else (feature_dim,) * N_SHARED_LAYERS
    if len(dims) != N_SHARED_LAYERS:
        raise InvalidArgumentError(f"exactly {N_SHARED_LAYERS} hidden dims required, got {dims}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    weights, biases = [], []
    fan_in = feature_dim
    for dim in dims:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(dim, fan_in)).astype(np.float32)
        weights.append(w)
        biases.append(np.zeros(dim, dtype=np.float32))
        fan_in = dim
    num_outputs = num_id_classes + num_peer_outputs
    bound = 1.0 / np.sqrt(fan_in)
    clf_w = rng.uniform(-bound, bound, size=(num_outputs, fan_in)).astype(np.float32)
    clf_b = np.zeros(num_outputs, dtype=np.float32)
    return MlpHead(
        weights=weights,
        biases=biases,
        clf_weight=clf_w,
        clf_bias=clf_b,
        num_id_classes=num_id_classes,
        num_peer_outputs=num_peer_outputs,
        seed=seed,
    )


def _as_batch(features: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    values = features.values if isinstance(features, EmbeddingMatrix) else features
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {arr.shape}")
    return arr


def forward_with_cache(
    head: MlpHead, features: EmbeddingMatrix | np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Forward pass keeping what backprop needs.

    Returns (hs, zs, logits) where hs[0] is the input and hs[l] the
    post-ReLU output of layer l, zs[l-1] its pre-activation.
    """
    x = _as_batch(features)
    if x.shape[1] != head.feature_dim:
        raise ShapeError(
            f"feature dim {x.shape[1]} does not match head dim {head.feature_dim}"
        )
    hs = [x]
    zs = []
    for w, b in zip(head.weights, head.biases):
        z = hs[-1] @ w.T.astype(np.float64) + b.astype(np.float64)
        zs.append(z)
        hs.append(np.maximum(z, 0.0))
    logits = hs[-1] @ head.clf_weight.T.astype(np.float64) + head.clf_bias.astype(np.float64)
    return hs, zs, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.shape[0] == 0:
        return np.zeros_like(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(head: MlpHead, features: EmbeddingMatrix | np.ndarray) -> ForwardActivations:
    """Run features through the shared layers and the classifier.

    Image and text features go through the same three layers; the caller
    decides which logits (image ones) feed the cross-entropy.
    """
    hs, zs, logits = forward_with_cache(head, features)
    return ForwardActivations(
        per_layer=hs[1:],
        logits=logits,
        probabilities=softmax(logits),
        pre_activations=zs,
    )


def save_checkpoint(head: MlpHead, path: str | Path) -> None:
    """Write all parameters plus metadata; atomic, lossless for float32."""
    tensors = []
    blob_parts = []
    for name, arr in head.param_items():
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        tensors.append({"name": name, "shape": list(arr32.shape)})
        blob_parts.append(arr32.tobytes())
    manifest = {
        "version": CK_VERSION,
        "feature_dim": head.feature_dim,
        "hidden_dims": [int(w.shape[0]) for w in head.weights],
        "num_id_classes": head.num_id_classes,
        "num_peer_outputs": head.num_peer_outputs,
        "seed": head.seed,
        "epoch": head.epoch,
        "tensors": tensors,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(blob_parts)
    crc = zlib.crc32(manifest_bytes + blob) & 0xFFFFFFFF
    data = CK_MAGIC + struct.pack("<I", len(manifest_bytes)) + manifest_bytes + blob + struct.pack("<I", crc)
    persist.atomic_write_bytes(path, data)


def load_checkpoint(path: str | Path) -> MlpHead:
    """Read a checkpoint back; validates magic, manifest, sizes, and CRC."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CK_MAGIC) + 8:
        raise FormatError(f"{path}: file too short for a checkpoint")
    if data[: len(CK_MAGIC)] != CK_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:8]!r}")
    off = len(CK_MAGIC)
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest_bytes = data[off : off + mlen]
    if len(manifest_bytes) != mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    off += mlen
    if manifest.get("version") != CK_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    tensors = manifest.get("tensors")
    if not isinstance(tensors, list):
        raise FormatError(f"{path}: manifest lacks tensor list")
    sizes = [int(np.prod(t["shape"])) for t in tensors]
    blob_len = 4 * sum(sizes)
    blob = data[off : off + blob_len]
    if len(blob) != blob_len or len(data) != off + blob_len + 4:
        raise FormatError(
            f"{path}: parameter blob size mismatch (manifest wants {blob_len} bytes)"
        )
    (crc_stored,) = struct.unpack_from("<I", data, off + blob_len)
    if (zlib.crc32(manifest_bytes + blob) & 0xFFFFFFFF) != crc_stored:
        raise CorruptFileError(f"{path}: checkpoint CRC mismatch")

    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for t, size in zip(tensors, sizes):
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=cursor * 4)
        arrays[t["name"]] = arr.reshape(t["shape"]).copy()
        cursor += size

    expected = [f"fc{i}.{kind}" for i in range(1, N_SHARED_LAYERS + 1) for kind in ("weight", "bias")]
    expected += ["classifier.weight", "classifier.bias"]
    if sorted(arrays) != sorted(expected):
        raise FormatError(f"{path}: unexpected tensor set {sorted(arrays)}")
    head = MlpHead(
        weights=[arrays[f"fc{i}.weight"] for i in range(1, N_SHARED_LAYERS + 1)],
        biases=[arrays[f"fc{i}.bias"] for i in range(1, N_SHARED_LAYERS + 1)],
        clf_weight=arrays["classifier.weight"],
        clf_bias=arrays["classifier.bias"],
        num_id_classes=int(manifest["num_id_classes"]),
        num_peer_outputs=int(manifest["num_peer_outputs"]),
        seed=int(manifest["seed"]),
        epoch=int(manifest["epoch"]),
    )
    if head.num_outputs != head.num_id_classes + head.num_peer_outputs:
        raise FormatError(f"{path}: classifier rows disagree with class counts")
    return head
