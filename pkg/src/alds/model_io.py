"""Manifest + blob serialisation of networks, compressed networks and spectra.

A stored object is two sibling files: ``<stem>.json``, a UTF-8 JSON manifest,
and ``<stem>.bin``, a blob of little-endian floats. Every tensor entry in the
manifest records ``offset``/``length`` (in elements) into the blob and the
CRC32 of its bytes; the manifest also carries the CRC32 of the whole blob.
Weights are stored as 32-bit floats in row-major ``(f, c, k1, k2)`` order;
spectrum caches use 64-bit floats.

Manifest layout of a model (``format`` ``"alds-model"``)::

    {"format": "alds-model", "format_version": 1, "dtype": "<f4",
     "blob": "toy.bin", "blob_bytes": 1920, "blob_crc32": 123,
     "layers": [{"name": "conv1", "kind": "conv", "shape": [20, 6, 2, 2],
                 "stride": [1, 1], "padding": [0, 0], "output_pixels": 4,
                 "input_size": [3, 3], "offset": 0, "length": 480,
                 "crc32": 456}]}

A compressed network (``"alds-compressed"``) adds per layer ``compressed``,
``k``, ``j``, ``scheme``, ``partition`` and a ``tensors`` list holding the
``k`` factors ``V0 .. V{k-1}`` (``j x d_i``) and the stacked ``U``
(``f_eff x k*j``), or a single ``W`` for a layer kept dense. The plan and the
compression report are embedded under ``"plan"`` and ``"report"``.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from alds.allocator import CompressionPlan
from alds.decompose import (
    ChannelPartition,
    FactorPair,
    SubspaceDecomposition,
    decompose_layer,
)
from alds.error_model import LayerSpectrum, SpectrumCache
from alds.model import Layer, LayerMeta, NetworkModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_FORMAT = "alds-model"
COMPRESSED_FORMAT = "alds-compressed"
SPECTRUM_FORMAT = "alds-spectrum"


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the data."""


def dumps(obj) -> str:
    """Canonical JSON text used for every manifest and report."""
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return path, path.with_suffix(".bin")


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _BlobWriter:
    def __init__(self, dtype: str):
        self.dtype = np.dtype(dtype)
        self.chunks = []
        self.offset = 0

    def add(self, array) -> dict:
        data = np.ascontiguousarray(np.asarray(array, dtype=self.dtype)).tobytes()
        entry = {"offset": self.offset, "length": int(np.size(array)), "crc32": _crc(data)}
        self.chunks.append(data)
        self.offset += int(np.size(array))
        return entry

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


def _write(path, manifest: dict, writer: _BlobWriter):
    manifest_path, blob_path = _paths(path)
    blob = writer.bytes()
    manifest = {
        "format": manifest.pop("format"),
        "format_version": FORMAT_VERSION,
        "dtype": writer.dtype.str,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "blob_crc32": _crc(blob),
        **manifest,
    }
    _atomic_write(blob_path, blob)
    _atomic_write(manifest_path, dumps(manifest).encode("utf-8"))
    return manifest_path


def _read(path, expected_format: str):
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{manifest_path}: not a valid JSON manifest ({exc})") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    fmt = manifest.get("format")
    if fmt != expected_format:
        raise FormatError(f"{manifest_path}: expected format {expected_format!r}, found {fmt!r}")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})"
        )
    for key in ("blob", "blob_bytes", "blob_crc32", "dtype"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(
            f"{manifest['blob']}: truncated or oversized blob "
            f"({len(blob)} bytes, manifest says {manifest['blob_bytes']})"
        )
    return manifest, blob, np.dtype(manifest["dtype"])


def _tensor(blob: bytes, dtype: np.dtype, entry: dict, shape, owner: str) -> np.ndarray:
    try:
        start = entry["offset"] * dtype.itemsize
        stop = start + entry["length"] * dtype.itemsize
        crc = entry["crc32"]
    except KeyError as exc:
        raise FormatError(f"{owner}: tensor entry lacks {exc}") from None
    if stop > len(blob):
        raise FormatError(f"{owner}: tensor extends past the end of the blob")
    chunk = blob[start:stop]
    if _crc(chunk) != crc:
        raise ChecksumError(f"checksum mismatch in layer {owner!r}")
    if int(np.prod(shape)) != entry["length"]:
        raise FormatError(f"{owner}: shape {tuple(shape)} does not match length {entry['length']}")
    return np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(np.float64)


def _check_blob(manifest, blob):
    if _crc(blob) != manifest["blob_crc32"]:
        raise ChecksumError(f"checksum mismatch for blob {manifest['blob']!r}")


def _meta_to_dict(meta: LayerMeta) -> dict:
    return {
        "name": meta.name,
        "kind": meta.kind,
        "shape": list(meta.shape),
        "stride": list(meta.stride),
        "padding": list(meta.padding),
        "output_pixels": meta.output_pixels,
        "input_size": list(meta.input_size) if meta.input_size is not None else None,
    }


def _meta_from_dict(d: dict, source) -> LayerMeta:
    try:
        name = d["name"]
        if d.get("output_pixels") is None:
            logger.warning("%s: layer %r has no output_pixels; FLOP reporting disabled",
                           source, name)
        return LayerMeta(
            name=name,
            kind=d.get("kind", "conv"),
            shape=tuple(int(s) for s in d["shape"]),
            stride=tuple(int(s) for s in d.get("stride", (1, 1))),
            padding=tuple(int(s) for s in d.get("padding", (0, 0))),
            output_pixels=d.get("output_pixels"),
            input_size=tuple(d["input_size"]) if d.get("input_size") is not None else None,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{source}: malformed layer entry ({exc})") from exc
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def _unique_names(entries, source):
    names = [e.get("name") for e in entries]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise FormatError(f"{source}: duplicate layer names {dupes}")


# --------------------------------------------------------------------------
# uncompressed networks


def save_model(model: NetworkModel, path) -> Path:
    writer = _BlobWriter("<f4")
    layers = []
    for layer in model.layers:
        entry = _meta_to_dict(layer.meta)
        entry.update(writer.add(layer.weights))
        layers.append(entry)
    return _write(path, {"format": MODEL_FORMAT, "layers": layers}, writer)


def load_model(path) -> NetworkModel:
    manifest, blob, dtype = _read(path, MODEL_FORMAT)
    entries = manifest.get("layers", [])
    _unique_names(entries, path)
    layers = []
    for entry in entries:
        meta = _meta_from_dict(entry, path)
        weights = _tensor(blob, dtype, entry, meta.shape, meta.name)
        layers.append(Layer(meta, weights))
    _check_blob(manifest, blob)
    return NetworkModel(layers)


# --------------------------------------------------------------------------
# compressed networks


@dataclass
class CompressedModel:
    metas: list[LayerMeta]
    layers: dict = field(default_factory=dict)
    plan: CompressionPlan | None = None
    report: dict | None = None

    @property
    def num_params(self) -> int:
        """Parameter count recounted from the stored tensors."""
        total = 0
        for value in self.layers.values():
            if isinstance(value, SubspaceDecomposition):
                total += value.num_params
            else:
                total += int(value.size)
        return total


def decompose_by_plan(model: NetworkModel, plan: CompressionPlan) -> dict:
    """Factorise every layer as the plan dictates (dense layers map to their weights)."""
    out = {}
    for layer in model.layers:
        a = plan.layer(layer.name)
        if a.compressed:
            out[layer.name] = decompose_layer(layer.weights, a.k, a.j, a.scheme)
        else:
            out[layer.name] = layer.weights
    return out


def save_compressed(model: NetworkModel, plan: CompressionPlan, decompositions, path,
                    report: dict | None = None) -> Path:
    if [a.name for a in plan.layers] != model.names:
        raise ValueError("plan layers do not match the model")
    writer = _BlobWriter("<f4")
    layers = []
    for layer in model.layers:
        entry = _meta_to_dict(layer.meta)
        d = decompositions[layer.name]
        if isinstance(d, SubspaceDecomposition):
            entry.update({
                "compressed": True,
                "k": d.k,
                "j": d.rank,
                "scheme": d.scheme,
                "partition": [list(r) for r in d.partition.ranges],
            })
            tensors = []
            for i, pair in enumerate(d.factors):
                tensors.append({"role": f"V{i}", "shape": list(pair.V.shape), **writer.add(pair.V)})
            u = np.hstack([p.U for p in d.factors])
            tensors.append({"role": "U", "shape": list(u.shape), **writer.add(u)})
        else:
            entry["compressed"] = False
            tensors = [{"role": "W", "shape": list(layer.meta.shape), **writer.add(d)}]
        entry["tensors"] = tensors
        layers.append(entry)
    manifest = {
        "format": COMPRESSED_FORMAT,
        "layers": layers,
        "plan": plan.to_dict(),
        "report": report,
    }
    return _write(path, manifest, writer)


def load_compressed(path) -> CompressedModel:
    manifest, blob, dtype = _read(path, COMPRESSED_FORMAT)
    entries = manifest.get("layers", [])
    _unique_names(entries, path)
    result = CompressedModel(metas=[])
    for entry in entries:
        meta = _meta_from_dict(entry, path)
        result.metas.append(meta)
        tensors = {t["role"]: t for t in entry.get("tensors", [])}
        try:
            if entry.get("compressed"):
                k, j, scheme = int(entry["k"]), int(entry["j"]), int(entry["scheme"])
                part = ChannelPartition(k, tuple(tuple(r) for r in entry["partition"]))
                u = _tensor(blob, dtype, tensors["U"], tensors["U"]["shape"], meta.name)
                factors = []
                for i in range(k):
                    t = tensors[f"V{i}"]
                    v = _tensor(blob, dtype, t, t["shape"], meta.name)
                    factors.append(FactorPair(u[:, i * j:(i + 1) * j], v))
                result.layers[meta.name] = SubspaceDecomposition(
                    part, scheme, j, tuple(factors), meta.shape
                )
            else:
                t = tensors["W"]
                result.layers[meta.name] = _tensor(blob, dtype, t, meta.shape, meta.name)
        except KeyError as exc:
            raise FormatError(f"{path}: layer {meta.name!r} lacks {exc}") from None
    _check_blob(manifest, blob)
    if manifest.get("plan") is not None:
        result.plan = CompressionPlan.from_dict(manifest["plan"])
    result.report = manifest.get("report")
    return result


# --------------------------------------------------------------------------
# spectrum cache sidecar


def save_spectrum_cache(cache: SpectrumCache, path) -> Path:
    writer = _BlobWriter("<f8")
    entries = []
    for (name, k, scheme), spec in cache.entries.items():
        blocks = [writer.add(v) for v in spec.values]
        entries.append({
            "layer": name, "k": k, "scheme": scheme,
            "alpha1": spec.alpha1, "jmax": spec.jmax, "blocks": blocks,
        })
    manifest = {
        "format": SPECTRUM_FORMAT,
        "k_grid": list(cache.k_grid),
        "schemes": list(cache.schemes),
        "shapes": {name: list(shape) for name, shape in cache.shapes.items()},
        "zero_layers": sorted(cache.zero_layers),
        "entries": entries,
    }
    return _write(path, manifest, writer)


def load_spectrum_cache(path) -> SpectrumCache:
    manifest, blob, dtype = _read(path, SPECTRUM_FORMAT)
    cache = SpectrumCache(
        shapes={n: tuple(s) for n, s in manifest["shapes"].items()},
        k_grid=tuple(manifest["k_grid"]),
        schemes=tuple(manifest["schemes"]),
        zero_layers=frozenset(manifest["zero_layers"]),
    )
    for e in manifest["entries"]:
        owner = f"{e['layer']}/k={e['k']}/scheme={e['scheme']}"
        values = tuple(_tensor(blob, dtype, b, (b["length"],), owner) for b in e["blocks"])
        cache.entries[(e["layer"], e["k"], e["scheme"])] = LayerSpectrum(
            e["k"], e["scheme"], values, e["alpha1"], e["jmax"]
        )
    _check_blob(manifest, blob)
    return cache
