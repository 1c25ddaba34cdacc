"""Model manifests on disk.

Layout of a model directory::

    manifest.json          UTF-8 JSON document (see docs/manifest.md)
    blobs/<layer>.<name>   little-endian tensors referenced by relative path

Integer blobs (``.i32``) are int32 ``ndim``, int32 dims, int32 payload.
Real blobs (``.f64``) share the header and carry float64 payload.  Every
blob reference holds a sha256 of the file; step sizes are decimal strings
with 17 significant digits so that they round-trip exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..cyclic import CyclicSpec
from ..errors import ChecksumError, ManifestVersionError, SchemeMismatchError
from ..fxp import FixedTensor, QuantScheme, decode_int_blob, encode_int_blob
from .model import MANIFEST_VERSION, LayerSpec, ModelManifest

FORMAT = "wrapnet-manifest"
MANIFEST_NAME = "manifest.json"


def fmt_real(x: float) -> str:
    return format(float(x), ".17g")


def encode_real_blob(values) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    header = struct.pack(f"<i{values.ndim}i", values.ndim, *values.shape)
    return header + values.astype("<f8").tobytes()


def decode_real_blob(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise ChecksumError("real blob too short")
    (ndim,) = struct.unpack_from("<i", blob, 0)
    shape = struct.unpack_from(f"<{ndim}i", blob, 4)
    body = blob[4 * (1 + ndim):]
    count = int(np.prod(shape, dtype=np.int64))
    if len(body) != 8 * count:
        raise ChecksumError(f"expected {count} float64 values, found {len(body) / 8:g}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def scheme_to_dict(s: QuantScheme | None):
    if s is None:
        return None
    return {"step_size": fmt_real(s.step_size), "bits": s.bits, "signed": s.signed, "kind": s.kind}


def scheme_from_dict(d) -> QuantScheme | None:
    if d is None:
        return None
    return QuantScheme(float(d["step_size"]), int(d["bits"]), bool(d["signed"]), d["kind"])


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_blob(root: Path, rel: str, data: bytes) -> dict:
    (root / rel).parent.mkdir(parents=True, exist_ok=True)
    (root / rel).write_bytes(data)
    return {"path": rel, "sha256": _sha(data)}


def _read_blob(root: Path, ref: dict) -> bytes:
    path = root / ref["path"]
    data = path.read_bytes()
    if _sha(data) != ref["sha256"]:
        raise ChecksumError(f"checksum mismatch for {ref['path']}")
    return data


def save_model(model: ModelManifest, path) -> Path:
    """Write ``model`` into directory ``path``; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers:
        stem = f"blobs/{layer.name}"
        entry = {
            "name": layer.name, "op": layer.op, "full_precision": layer.full_precision,
            "relu": layer.relu, "stride": layer.stride, "pad": layer.pad,
            "carry_mode": layer.carry_mode,
            "input_scheme": scheme_to_dict(layer.input_scheme),
            "output_scheme": scheme_to_dict(layer.output_scheme),
            "cyclic": layer.cyclic.to_dict() if layer.cyclic is not None else None,
            "gamma": _write_blob(root, f"{stem}.gamma.f64", encode_real_blob(layer.gamma)),
            "beta": _write_blob(root, f"{stem}.beta.f64", encode_real_blob(layer.beta)),
            "carry_mean": (None if layer.carry_mean is None else
                           _write_blob(root, f"{stem}.carry_mean.f64", encode_real_blob(layer.carry_mean))),
        }
        if layer.full_precision:
            entry["weights"] = _write_blob(root, f"{stem}.weights.f64", encode_real_blob(layer.weights))
            entry["weight_scheme"] = None
        else:
            entry["weights"] = _write_blob(root, f"{stem}.weights.i32", encode_int_blob(layer.weights.values))
            entry["weight_scheme"] = scheme_to_dict(layer.weights.scheme)
        layers.append(entry)
    doc = {"format": FORMAT, "version": model.version, "acc_bits": model.acc_bits,
           "metadata": model.metadata, "layers": layers}
    out = root / MANIFEST_NAME
    out.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return out


def load_model(path) -> ModelManifest:
    """Read a model directory (or its manifest file), verifying checksums and schemes."""
    p = Path(path)
    manifest = p / MANIFEST_NAME if p.is_dir() else p
    root = manifest.parent
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ManifestVersionError(f"not a {FORMAT} document")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"manifest version {doc.get('version')} is not supported (expected {MANIFEST_VERSION})")
    layers = []
    for e in doc["layers"]:
        if e["full_precision"]:
            weights = decode_real_blob(_read_blob(root, e["weights"]))
        else:
            shape, vals = decode_int_blob(_read_blob(root, e["weights"]))
            weights = FixedTensor(vals.reshape(shape), scheme_from_dict(e["weight_scheme"]))
        cm = e.get("carry_mean")
        layers.append(LayerSpec(
            name=e["name"], op=e["op"], weights=weights,
            gamma=decode_real_blob(_read_blob(root, e["gamma"])),
            beta=decode_real_blob(_read_blob(root, e["beta"])),
            input_scheme=scheme_from_dict(e["input_scheme"]),
            output_scheme=scheme_from_dict(e["output_scheme"]),
            cyclic=CyclicSpec.from_dict(e["cyclic"]) if e["cyclic"] is not None else None,
            relu=bool(e["relu"]), full_precision=bool(e["full_precision"]),
            stride=int(e.get("stride", 1)), pad=int(e.get("pad", 0)),
            carry_mode=e.get("carry_mode", "none"),
            carry_mean=None if cm is None else decode_real_blob(_read_blob(root, cm)),
        ))
    try:
        return ModelManifest(tuple(layers), int(doc["acc_bits"]), dict(doc.get("metadata", {})),
                             int(doc["version"]))
    except SchemeMismatchError as exc:
        raise SchemeMismatchError(f"{manifest}: {exc}") from None


def save_tensor(values, path):
    """Integer arrays go to an int32 blob, anything else to a float64 blob."""
    values = np.asarray(values)
    data = encode_int_blob(values) if values.dtype.kind in "iu" else encode_real_blob(values)
    Path(path).write_bytes(data)


def load_tensor(path) -> np.ndarray:
    """Read a blob written by :func:`save_tensor`; ``.i32`` suffix selects integers."""
    p = Path(path)
    data = p.read_bytes()
    if p.suffix == ".i32":
        shape, vals = decode_int_blob(data)
        return vals.reshape(shape)
    return decode_real_blob(data)
