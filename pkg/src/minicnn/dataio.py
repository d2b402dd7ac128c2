"""Datasets and the three on-disk formats: IDX, binary PPM and checkpoints.

Every reader validates header fields against the actual byte count before
allocating anything, and reports problems as :class:`FormatError` subclasses
carrying the byte offset where parsing stopped. Byte layouts are described
in FORMATS.md.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CorruptFileError,
    HashMismatchError,
    ShapeError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from .params import ParamStore

# -- datasets ----------------------------------------------------------------------


@dataclass
class Dataset:
    """Image batch ``(N, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.class_names)

    def select_classes(self, classes, relabel: bool = True) -> "Dataset":
        """Keep only ``classes``; with ``relabel`` they become 0..len(classes)-1 in the given order."""
        classes = list(classes)
        keep = np.flatnonzero(np.isin(self.labels, classes))
        labels = self.labels[keep]
        names = self.class_names
        if relabel:
            lookup = {c: i for i, c in enumerate(classes)}
            labels = np.array([lookup[int(c)] for c in labels], dtype=np.int64)
            names = tuple(self.class_names[c] for c in classes) if self.class_names else ()
            return Dataset(self.images[keep], labels, len(classes), names)
        return Dataset(self.images[keep], labels, self.num_classes, names)

    def per_class(self, n: int, rng=None) -> "Dataset":
        """The first ``n`` samples of each class (a seeded random ``n`` if ``rng`` is given)."""
        picks = []
        for c in np.unique(self.labels):
            members = np.flatnonzero(self.labels == c)
            if len(members) < n:
                raise ShapeError(f"class {c} has only {len(members)} samples, {n} requested")
            if rng is not None:
                members = members[np.sort(rng.permutation(len(members))[:n])]
            picks.append(members[:n])
        return self.subset(np.sort(np.concatenate(picks)))

    def to_rgb(self) -> "Dataset":
        """Replicate a single channel three times (no-op for 3-channel data)."""
        if self.images.shape[1] == 3:
            return self
        if self.images.shape[1] != 1:
            raise ShapeError(f"cannot convert {self.images.shape[1]} channels to RGB")
        return Dataset(np.repeat(self.images, 3, axis=1), self.labels, self.num_classes, self.class_names)


def load_dataset(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 4 or labels.ndim != 1:
        raise ShapeError(f"{images_path} must hold images and {labels_path} labels")
    return Dataset(images, labels)


def save_dataset(dataset: Dataset, images_path, labels_path):
    if dataset.images.shape[1] != 1:
        raise ShapeError("IDX stores single-channel images only")
    save_idx(images_path, dataset.images)
    save_idx(labels_path, dataset.labels.astype(np.uint8))


# -- IDX ---------------------------------------------------------------------------

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
_IDX_RANK = {IDX_LABELS: 1, IDX_IMAGES: 3}


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def read_idx(path) -> np.ndarray:
    """Raw uint8 contents of an IDX file: ``(N,)`` labels or ``(N, H, W)`` images."""
    data = _read_bytes(path)
    return parse_idx(data, str(path))


def parse_idx(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 4:
        raise TruncatedFileError(f"{source}: {len(data)} bytes, need 4 for the magic number at offset 0")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in _IDX_RANK:
        raise BadMagicError(
            f"{source}: magic 0x{magic:08x} at offset 0, expected "
            f"0x{IDX_LABELS:08x} (labels) or 0x{IDX_IMAGES:08x} (images)"
        )
    rank = _IDX_RANK[magic]
    header = 4 + 4 * rank
    if len(data) < header:
        raise TruncatedFileError(
            f"{source}: header ends at offset {len(data)}, expected {rank} dims through offset {header}"
        )
    dims = struct.unpack_from(f">{rank}I", data, 4)
    expected = math.prod(dims)
    actual = len(data) - header
    if actual < expected:
        raise TruncatedFileError(
            f"{source}: dims {dims} need {expected} payload bytes from offset {header}, file ends at offset {len(data)}"
        )
    if actual > expected:
        raise CorruptFileError(
            f"{source}: dims {dims} need {expected} payload bytes but {actual - expected} extra bytes follow offset {header + expected}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(dims).copy()


def encode_idx(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"IDX payload must be uint8, got {arr.dtype}")
    if arr.ndim == 1:
        magic = IDX_LABELS
    elif arr.ndim == 3:
        magic = IDX_IMAGES
    else:
        raise ShapeError(f"IDX arrays must be rank 1 or 3, got shape {arr.shape}")
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + np.ascontiguousarray(arr).tobytes()


def write_idx(path, array):
    Path(path).write_bytes(encode_idx(array))


def to_uint8(x) -> np.ndarray:
    """Map [0, 1] reals to bytes by round(255 x); exact inverse of ``/255`` on multiples of 1/255."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.nanmin(x) < 0 or np.nanmax(x) > 1 or np.isnan(x).any()):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.rint(x * 255.0).astype(np.uint8)


def load_idx(path) -> np.ndarray:
    """Images as ``(N, 1, H, W)`` float64 scaled by 1/255; labels as int64 ``(N,)``."""
    raw = read_idx(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    return (raw.astype(np.float64) / 255.0)[:, None, :, :]


def save_idx(path, data):
    """Inverse of :func:`load_idx`.

    Integer arrays are written as-is (rank 1 or 3); float images
    ``(N, 1, H, W)`` or ``(N, H, W)`` in [0, 1] are quantized by :func:`to_uint8`.
    """
    arr = np.asarray(data)
    if np.issubdtype(arr.dtype, np.floating):
        if arr.ndim == 4:
            if arr.shape[1] != 1:
                raise ShapeError(f"IDX images must have one channel, got {arr.shape}")
            arr = arr[:, 0]
        arr = to_uint8(arr)
    elif arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer IDX values must fit in a byte")
        arr = arr.astype(np.uint8)
    write_idx(path, arr)


# -- PPM ---------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int, source: str):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    that ends the header.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{source}: header ends at offset {pos} after {len(tokens)} of {count} fields")
        tokens.append((data[start:pos], start))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise TruncatedFileError(f"{source}: missing whitespace after header at offset {pos}")
    return tokens, pos + 1


def parse_ppm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 2:
        raise TruncatedFileError(f"{source}: {len(data)} bytes, need 2 for the magic at offset 0")
    magic = data[:2]
    if magic == b"P3":
        raise UnsupportedFormatError(f"{source}: ASCII PPM (P3) is not supported, only binary P6")
    if magic != b"P6":
        raise BadMagicError(f"{source}: magic {magic!r} at offset 0, expected b'P6'")
    tokens, offset = _ppm_tokens(data[2:], 3, source)
    offset += 2
    values = []
    for tok, at in tokens:
        if not tok.isdigit():
            raise CorruptFileError(f"{source}: header field {tok!r} at offset {at + 2} is not a number")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise UnsupportedFormatError(f"{source}: maxval {maxval} unsupported, only 255")
    if width < 1 or height < 1:
        raise CorruptFileError(f"{source}: image size {width}x{height} is empty")
    expected = 3 * width * height
    actual = len(data) - offset
    if actual < expected:
        raise TruncatedFileError(
            f"{source}: {width}x{height} needs {expected} pixel bytes from offset {offset}, file ends at offset {len(data)}"
        )
    if actual > expected:
        raise CorruptFileError(f"{source}: {actual - expected} extra bytes after offset {offset + expected}")
    raw = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset).reshape(height, width, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_ppm(path) -> np.ndarray:
    """A binary PPM as a ``(3, H, W)`` float64 array in [0, 1]."""
    return parse_ppm(_read_bytes(path), str(path))


def encode_ppm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"PPM images must be (3, H, W) or (H, W), got {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + to_uint8(img).transpose(1, 2, 0).tobytes()


def save_ppm(path, img):
    """Write ``img`` with the canonical header ``P6\\n<w> <h>\\n255\\n``."""
    Path(path).write_bytes(encode_ppm(img))


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"CNNB"
CKPT_VERSION = 1
TAG_TENSOR = b"TENS"
TAG_SVM = b"SVM1"
VELOCITY_PREFIX = "@velocity/"
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
MAX_RANK = 8


@dataclass
class Checkpoint:
    params: ParamStore
    spec_hash: bytes
    svm: object | None = None
    version: int = CKPT_VERSION
    extra: dict = field(default_factory=dict)


class _Reader:
    def __init__(self, data: bytes, source: str, end: int | None = None, start: int = 0):
        self.data = data
        self.pos = start
        self.end = len(data) if end is None else end
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedFileError(
                f"{self.source}: {what} needs {n} bytes at offset {self.pos}, only {self.end - self.pos} remain"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]

    def f64(self, count, what) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _tensor_section(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f8")
    head = _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return head + arr.tobytes()


def _read_tensor(r: _Reader):
    name_len = r.u32("tensor name length")
    name = r.take(name_len, "tensor name")
    try:
        name = name.decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptFileError(f"{r.source}: tensor name at offset {r.pos - name_len} is not UTF-8") from None
    rank = r.u32("tensor rank")
    if rank > MAX_RANK:
        raise CorruptFileError(f"{r.source}: tensor {name!r} rank {rank} at offset {r.pos - 4} exceeds {MAX_RANK}")
    dims = tuple(r.u32("tensor dims") for _ in range(rank))
    count = math.prod(dims)
    return name, r.f64(count, f"tensor {name!r} data").reshape(dims)


def _svm_payload(model) -> bytes:
    kernel = model.kernel.kind.encode("ascii")
    parts = [
        _U32.pack(len(kernel)), kernel,
        struct.pack("<ddd", model.kernel.gamma, model.C, model.bias),
    ]
    arrays = [("sv", model.support_vectors), ("coef", model.dual_coef)]
    if model.scaler is not None:
        arrays += [("min", model.scaler.mins), ("max", model.scaler.maxs)]
    parts.append(_U32.pack(len(arrays)))
    parts += [_tensor_section(n, a) for n, a in arrays]
    return b"".join(parts)


def _read_svm(r: _Reader):
    from .svm import KernelDesc, Scaler, SvmModel

    kind = r.take(r.u32("kernel name length"), "kernel name").decode("ascii", "replace")
    gamma, C, bias = struct.unpack("<ddd", r.take(24, "svm scalars"))
    count = r.u32("svm array count")
    if count > 4:
        raise CorruptFileError(f"{r.source}: svm section lists {count} arrays at offset {r.pos - 4}")
    arrays = dict(_read_tensor(r) for _ in range(count))
    try:
        kernel = KernelDesc(kind, gamma)
        scaler = Scaler(arrays["min"], arrays["max"]) if "min" in arrays else None
        return SvmModel(arrays["sv"], arrays["coef"], bias, kernel, C, scaler)
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"{r.source}: malformed svm section: {exc}") from None


def encode_checkpoint(params: ParamStore, spec_hash: bytes, svm=None) -> bytes:
    if len(spec_hash) != 32:
        raise ValueError("spec hash must be 32 bytes (sha256)")
    sections = [(TAG_TENSOR, _tensor_section(n, a)) for n, a in params.tensors.items()]
    sections += [(TAG_TENSOR, _tensor_section(VELOCITY_PREFIX + n, a)) for n, a in params.velocity.items()]
    if svm is not None:
        sections.append((TAG_SVM, _svm_payload(svm)))
    out = [CKPT_MAGIC, _U32.pack(CKPT_VERSION), spec_hash, _U32.pack(len(sections))]
    for tag, payload in sections:
        out += [tag, _U64.pack(len(payload)), payload]
    return b"".join(out)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{source}: magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
    version = r.u32("format version")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this build reads {CKPT_VERSION}")
    spec_hash = r.take(32, "spec hash")
    n_sections = r.u32("section count")
    params = ParamStore(spec_hash=spec_hash)
    svm = None
    for _ in range(n_sections):
        tag = r.take(4, "section tag")
        length = r.u64("section length")
        start = r.pos
        if length > r.end - start:
            raise CorruptFileError(
                f"{source}: section {tag!r} at offset {start - 12} claims {length} bytes, only {r.end - start} remain"
            )
        sub = _Reader(data, source, end=start + length, start=start)
        if tag == TAG_TENSOR:
            name, value = _read_tensor(sub)
            if name.startswith(VELOCITY_PREFIX):
                params.velocity[name[len(VELOCITY_PREFIX):]] = value
            else:
                params.tensors[name] = value
        elif tag == TAG_SVM:
            svm = _read_svm(sub)
        else:
            raise CorruptFileError(f"{source}: unknown section tag {tag!r} at offset {start - 12}")
        if sub.pos != sub.end:
            raise CorruptFileError(
                f"{source}: section {tag!r} at offset {start - 12} has {sub.end - sub.pos} unparsed bytes"
            )
        r.pos = sub.end
    if r.pos != len(data):
        raise CorruptFileError(f"{source}: {len(data) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(params, spec_hash, svm, version)


def save_checkpoint(path, params: ParamStore, spec_hash: bytes | None = None, svm=None):
    spec_hash = spec_hash if spec_hash is not None else params.spec_hash
    if spec_hash is None:
        raise ValueError("checkpoint needs a spec hash")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, spec_hash, svm))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: bytes | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; refuse it if its spec hash differs from ``expected_hash`` unless ``force``."""
    ckpt = decode_checkpoint(_read_bytes(path), str(path))
    if expected_hash is not None and ckpt.spec_hash != expected_hash and not force:
        raise HashMismatchError(
            f"{path}: saved for spec {ckpt.spec_hash.hex()[:16]}..., "
            f"current spec is {expected_hash.hex()[:16]}...; pass --force to load anyway"
        )
    return ckpt
