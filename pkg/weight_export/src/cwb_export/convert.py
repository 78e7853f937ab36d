"""Extract the three transferred conv layers from a MAT archive.

The manifest maps archive entries to the conv1/conv2/conv3 slots and
pins the expected output shapes, so nothing about a particular public
release is hard-coded.  Archive kernels are stored Kh x Kw x Cin x Cout
(the MAT convention); the reorder to Cout x Cin x Kh x Kw happens here,
once, and the consumer never sees foreign layouts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import scipy.io

from .cwb import CwbFormatError, read_cwb, write_cwb

LAYER_SLOTS = ("conv1", "conv2", "conv3")


class ExportError(Exception):
    pass


@dataclass
class LayerMapping:
    kernel: str          # archive path of the Kh x Kw x Cin x Cout kernel
    bias: str            # archive path of the bias vector
    shape: tuple         # expected Cout x Cin x Kh x Kw after reorder


@dataclass
class ExportManifest:
    layers: dict  # slot -> LayerMapping

    def __post_init__(self):
        if set(self.layers) != set(LAYER_SLOTS):
            raise ExportError(
                f"manifest must map exactly {LAYER_SLOTS}, "
                f"got {sorted(self.layers)}")

    @classmethod
    def from_json(cls, path) -> "ExportManifest":
        with open(path) as fh:
            raw = json.load(fh)
        if "layers" not in raw:
            raise ExportError(f"{path}: manifest needs a 'layers' object")
        layers = {}
        for slot, entry in raw["layers"].items():
            missing = {"kernel", "bias", "shape"} - set(entry)
            if missing:
                raise ExportError(
                    f"{path}: layer {slot!r} missing {sorted(missing)}")
            layers[slot] = LayerMapping(kernel=entry["kernel"],
                                        bias=entry["bias"],
                                        shape=tuple(entry["shape"]))
        return cls(layers=layers)


def _resolve(node, path: str):
    """Walk a loaded MAT object along 'name/3/field' style paths."""
    current = node
    for part in path.split("/"):
        if isinstance(current, dict):
            if part not in current:
                raise ExportError(f"archive has no entry {part!r} "
                                  f"(while resolving {path!r})")
            current = current[part]
        elif part.lstrip("-").isdigit():
            try:
                current = current[int(part)]
            except (IndexError, TypeError) as exc:
                raise ExportError(f"cannot index {part!r} while resolving "
                                  f"{path!r}: {exc}") from exc
        else:
            if not hasattr(current, part):
                raise ExportError(f"archive node has no field {part!r} "
                                  f"(while resolving {path!r})")
            current = getattr(current, part)
    return np.asarray(current)


def _load_archive(path) -> dict:
    try:
        return scipy.io.loadmat(path, struct_as_record=False, squeeze_me=True)
    except (OSError, ValueError, NotImplementedError) as exc:
        raise ExportError(f"cannot read MAT archive {path}: {exc}") from exc


def _reorder_kernel(raw: np.ndarray, slot: str) -> np.ndarray:
    if raw.ndim != 4:
        raise ExportError(f"{slot}: kernel has {raw.ndim} dims, expected 4")
    # Kh x Kw x Cin x Cout -> Cout x Cin x Kh x Kw
    return np.ascontiguousarray(raw.transpose(3, 2, 0, 1).astype(np.float32))


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def export(source, manifest: ExportManifest, out_path) -> dict:
    """Convert the mapped layers and write a CWB file; returns a summary."""
    archive = _load_archive(source)
    arrays = {}
    for slot in LAYER_SLOTS:
        mapping = manifest.layers[slot]
        kernel = _reorder_kernel(_resolve(archive, mapping.kernel), slot)
        bias = np.asarray(_resolve(archive, mapping.bias),
                          dtype=np.float32).reshape(-1)
        if kernel.shape != tuple(mapping.shape):
            raise ExportError(
                f"{slot}: kernel shape {kernel.shape} does not match "
                f"manifest {tuple(mapping.shape)}")
        if bias.shape != (kernel.shape[0],):
            raise ExportError(
                f"{slot}: bias length {bias.shape[0]} does not match "
                f"Cout {kernel.shape[0]}")
        if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(bias))):
            raise ExportError(f"{slot}: non-finite values in archive")
        arrays[f"{slot}.kernel"] = kernel
        arrays[f"{slot}.bias"] = bias
    write_cwb(out_path, arrays)
    return {
        "layers": {slot: list(manifest.layers[slot].shape)
                   for slot in LAYER_SLOTS},
        "sha256": sha256_of(out_path),
        "out": str(out_path),
    }


def verify(cwb_path, manifest: ExportManifest,
           expected_sha256: str | None = None) -> list:
    """Shape/finiteness/hash checks; returns (name, ok, detail) tuples."""
    checks = []
    try:
        arrays = read_cwb(cwb_path)
        checks.append(("container", True, "parsed"))
    except CwbFormatError as exc:
        return [("container", False, str(exc))]
    for slot in LAYER_SLOTS:
        mapping = manifest.layers[slot]
        kname, bname = f"{slot}.kernel", f"{slot}.bias"
        if kname not in arrays or bname not in arrays:
            checks.append((f"{slot}.present", False, "missing entries"))
            continue
        checks.append((f"{slot}.present", True, "found"))
        ok = arrays[kname].shape == tuple(mapping.shape)
        checks.append((f"{slot}.shape", ok,
                       f"{arrays[kname].shape} vs {tuple(mapping.shape)}"))
        finite = bool(np.all(np.isfinite(arrays[kname]))
                      and np.all(np.isfinite(arrays[bname])))
        checks.append((f"{slot}.finite", finite,
                       "all finite" if finite else "non-finite values"))
    if expected_sha256 is not None:
        actual = sha256_of(cwb_path)
        checks.append(("sha256", actual == expected_sha256,
                       f"{actual[:12]}.. vs {expected_sha256[:12]}.."))
    return checks
