"""Bit-exact persistence for bundles, checkpoints, and domain prompts.

Every artifact is a directory holding a JSON manifest plus raw binary
payloads: little-endian IEEE-754, row-major. Bundles store float32;
checkpoints and prompts store float64 (flagged via ``dtype`` in the
manifest) because they sit on the training/adaptation path where
round-trip identity must survive further numeric work.

Writes stage into a sibling ``.tmp`` directory and rename into place, so
a crash never leaves a half-written artifact at the target path. Reads
are concurrent-safe; writers assume exclusive access to the path.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MissingBlobError,
    MissingFileError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
    VersionError,
)

BUNDLE_VERSION = 1
CHECKPOINT_VERSION = 1
PROMPT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


# ---------------------------------------------------------------------------
# low-level helpers


def dump_json(obj) -> str:
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dump_json(obj))
    os.replace(tmp, path)


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    return json.loads(path.read_text())


@contextmanager
def staged_dir(path):
    """Build an artifact in a temp directory, then move it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        shutil.rmtree(path)
    os.rename(tmp, path)


def _require_dir(path, kind: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"missing {kind} directory: {path}")
    return path


def _check_version(manifest: dict, expected: int, kind: str) -> None:
    got = manifest.get("version")
    if got != expected:
        raise VersionError(f"unknown {kind} version {got!r} (supported: {expected})")


def _check_layout(manifest: dict, kind: str) -> None:
    layout = manifest.get("layout", "row-major")
    if layout != "row-major":
        raise ValidationError(f"{kind} layout must be 'row-major', got {layout!r}")


def write_array(path: Path, a: np.ndarray, dtype: str) -> None:
    a = np.asarray(a)
    if dtype != "i64" and not np.all(np.isfinite(a)):
        raise NonFiniteError(f"refusing to write non-finite values to {path}")
    payload = np.ascontiguousarray(a).astype(_DTYPES[dtype]).tobytes(order="C")
    path.write_bytes(payload)


def read_array(path: Path, shape, dtype: str, what: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    raw = path.read_bytes()
    np_dtype = np.dtype(_DTYPES[dtype])
    if len(raw) % np_dtype.itemsize:
        raise ShapeMismatchError(
            f"{what}: file size {len(raw)} is not a multiple of {np_dtype.itemsize}")
    flat = np.frombuffer(raw, dtype=np_dtype)
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if flat.size != expected:
        raise ShapeMismatchError(
            f"{what}: manifest shape {list(shape)} needs {expected} values, "
            f"file holds {flat.size}")
    if dtype == "i64":
        return flat.astype(np.int64).reshape(shape)
    a = flat.astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return a


# ---------------------------------------------------------------------------
# embedding bundles


@dataclass
class EmbeddingBundle:
    """A (P, C, d) stack of text embeddings: P templates over C classes."""

    templates: list
    classes: list
    dim: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        p, c, d = len(self.templates), len(self.classes), int(self.dim)
        if p < 1:
            raise ValidationError("bundle needs at least one template")
        if c < 1:
            raise ValidationError("bundle needs at least one class")
        if self.data.shape != (p, c, d):
            raise ShapeMismatchError(
                f"bundle data: expected shape {(p, c, d)}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("bundle data contains non-finite values")

    @property
    def num_templates(self) -> int:
        return len(self.templates)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def save_bundle(bundle: EmbeddingBundle, path) -> None:
    p, c, d = bundle.data.shape
    manifest = {
        "version": BUNDLE_VERSION,
        "dim": d,
        "classes": list(bundle.classes),
        "templates": list(bundle.templates),
        "dtype": "f32",
        "layout": "row-major",
        "shape": [p, c, d],
        "data": "embeddings.bin",
    }
    with staged_dir(path) as tmp:
        write_array(tmp / "embeddings.bin", bundle.data, "f32")
        (tmp / "manifest.json").write_text(dump_json(manifest))


def load_bundle(path) -> EmbeddingBundle:
    path = _require_dir(path, "bundle")
    manifest = read_json(path / "manifest.json")
    _check_version(manifest, BUNDLE_VERSION, "bundle")
    _check_layout(manifest, "bundle")
    dtype = manifest.get("dtype", "f32")
    if dtype not in _DTYPES:
        raise ValidationError(f"bundle dtype must be f32 or f64, got {dtype!r}")
    shape = manifest["shape"]
    if len(shape) != 3:
        raise ShapeMismatchError(f"bundle shape must be [P,C,d], got {shape}")
    templates = manifest["templates"]
    classes = manifest["classes"]
    if shape[0] != len(templates) or shape[1] != len(classes):
        raise ShapeMismatchError(
            f"bundle shape {shape} disagrees with {len(templates)} templates "
            f"and {len(classes)} classes")
    if shape[2] != manifest["dim"]:
        raise ShapeMismatchError(
            f"bundle dim {manifest['dim']} disagrees with shape {shape}")
    data = read_array(path / manifest["data"], shape, dtype, "bundle data")
    return EmbeddingBundle(templates=templates, classes=classes,
                           dim=manifest["dim"], data=data)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Named float64 parameter blobs plus the config they were trained with."""

    blobs: dict
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        clean = {}
        for name, value in self.blobs.items():
            a = np.asarray(value, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"checkpoint blob {name!r} is not finite")
            clean[name] = a
        self.blobs = clean


def _blob_filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = {
        "version": ckpt.version,
        "dtype": "f64",
        "layout": "row-major",
        "config": ckpt.config,
        "blobs": {
            name: {"shape": list(a.shape), "file": _blob_filename(name)}
            for name, a in sorted(ckpt.blobs.items())
        },
    }
    with staged_dir(path) as tmp:
        for name, a in ckpt.blobs.items():
            write_array(tmp / _blob_filename(name), a, "f64")
        (tmp / "manifest.json").write_text(dump_json(manifest))


def load_checkpoint(path) -> Checkpoint:
    path = _require_dir(path, "checkpoint")
    manifest = read_json(path / "manifest.json")
    _check_version(manifest, CHECKPOINT_VERSION, "checkpoint")
    _check_layout(manifest, "checkpoint")
    blobs = {}
    for name, entry in manifest["blobs"].items():
        blob_path = path / entry["file"]
        if not blob_path.is_file():
            raise MissingBlobError(f"checkpoint blob {name!r} missing: {blob_path}")
        blobs[name] = read_array(blob_path, entry["shape"], "f64",
                                  f"checkpoint blob {name!r}")
    return Checkpoint(blobs=blobs, config=manifest.get("config", {}),
                      version=manifest["version"])


def checkpoint_hash(path) -> str:
    """sha256 over the manifest and every blob, in manifest order."""
    path = _require_dir(path, "checkpoint")
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise MissingFileError(f"missing file: {manifest_path}")
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    manifest = json.loads(manifest_path.read_text())
    for name in sorted(manifest.get("blobs", {})):
        blob_path = path / manifest["blobs"][name]["file"]
        if not blob_path.is_file():
            raise MissingBlobError(f"checkpoint blob {name!r} missing: {blob_path}")
        h.update(blob_path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# domain prompts


def save_prompt(prompt: np.ndarray, path, source_checkpoint: str = "") -> None:
    """Persist an (L+1) x d prompt with its provenance sidecar."""
    prompt = np.asarray(prompt, dtype=np.float64)
    if prompt.ndim != 2:
        raise ShapeMismatchError(
            f"prompt must be 2-D (L+1, d), got shape {prompt.shape}")
    if not np.all(np.isfinite(prompt)):
        raise NonFiniteError("prompt contains non-finite values")
    sidecar = {
        "version": PROMPT_VERSION,
        "cache_size": prompt.shape[0] - 1,
        "dim": prompt.shape[1],
        "dtype": "f64",
        "layout": "row-major",
        "source_checkpoint": source_checkpoint,
        "data": "prompt.bin",
    }
    with staged_dir(path) as tmp:
        write_array(tmp / "prompt.bin", prompt, "f64")
        (tmp / "prompt.json").write_text(dump_json(sidecar))


def load_prompt(path):
    """Return (prompt array, sidecar dict)."""
    path = _require_dir(path, "prompt")
    sidecar = read_json(path / "prompt.json")
    _check_version(sidecar, PROMPT_VERSION, "prompt")
    _check_layout(sidecar, "prompt")
    shape = (sidecar["cache_size"] + 1, sidecar["dim"])
    prompt = read_array(path / sidecar["data"], shape, "f64", "prompt data")
    return prompt, sidecar
