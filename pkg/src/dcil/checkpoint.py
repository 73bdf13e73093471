"""Checkpoint files: an ``.npz`` map from parameter id to tensor.

Reserved keys start with ``__``: ``__format__`` (version string),
``__spec__`` (layer spec as JSON), ``__meta__`` (JSON: input shape, epoch,
config text, run rows). Masks are stored bit-packed under
``<layer>.mask.bits`` with their shape under ``<layer>.mask.shape``;
optimizer momentum buffers under ``opt/<param id>``.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .model import PATHS, DualPathNetwork, P, build, spec_from_dicts

FORMAT = "dcil-checkpoint-v1"
EXPORT_FORMAT = "dcil-export-v1"


def _pack_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.packbits(mask.astype(bool).ravel()), np.array(mask.shape, dtype=np.int64)


def _unpack_mask(bits: np.ndarray, shape: np.ndarray) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(bits, count=n).astype(bool).reshape(tuple(shape))


def _write(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def _read(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as e:
        raise DataFormatError(f"{path}: not a readable checkpoint ({e})") from None


def _net_arrays(net: DualPathNetwork, paths) -> dict[str, np.ndarray]:
    arrays = net.state_dict(paths)
    for key, m in net.masks():
        arrays[f"{key}.bits"], arrays[f"{key}.shape"] = _pack_mask(m)
    arrays["__spec__"] = np.array(json.dumps([s.to_dict() for s in net.spec]))
    return arrays


def save_checkpoint(path, net: DualPathNetwork, opt_buffers: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = _net_arrays(net, PATHS)
    for k, v in (opt_buffers or {}).items():
        arrays[f"opt/{k}"] = v
    arrays["__format__"] = np.array(FORMAT)
    arrays["__meta__"] = np.array(json.dumps({"input_shape": list(net.input_shape),
                                              "dtype": net.dtype.name, **(meta or {})}))
    _write(path, arrays)


def _restore(arrays: dict[str, np.ndarray], expected_format: str, paths):
    fmt = str(arrays.get("__format__", ""))
    if fmt != expected_format:
        raise DataFormatError(f"checkpoint format {fmt!r}, expected {expected_format!r}")
    try:
        spec = spec_from_dicts(json.loads(str(arrays["__spec__"])))
        meta = json.loads(str(arrays["__meta__"]))
        net = build(spec, tuple(meta["input_shape"]), seed=0, dtype=np.dtype(meta["dtype"]))
        net.load_state_dict(arrays, paths)
        net.set_masks([_unpack_mask(arrays[f"{k}.bits"], arrays[f"{k}.shape"]) for k, _ in net.masks()])
    except (KeyError, ValueError, TypeError) as e:
        raise DataFormatError(f"checkpoint is incomplete or inconsistent: {e}") from None
    return net, meta


def load_checkpoint(path):
    """Returns ``(net, opt_buffers, meta)``."""
    arrays = _read(path)
    net, meta = _restore(arrays, FORMAT, PATHS)
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return net, opt, meta


def export_pnet(net: DualPathNetwork, path, meta: dict | None = None) -> None:
    """Write the deployable P path: masked weights materialized, S-path state dropped."""
    arrays = _net_arrays(net, (P,))
    for l in net.prunable:
        arrays[l.weight_id] = l.weight * l.mask
    arrays["__format__"] = np.array(EXPORT_FORMAT)
    arrays["__meta__"] = np.array(json.dumps({"input_shape": list(net.input_shape),
                                              "dtype": net.dtype.name, **(meta or {})}))
    _write(path, arrays)


def load_export(path):
    """Load an exported P-path model; only the P path is meaningful afterwards."""
    return _restore(_read(path), EXPORT_FORMAT, (P,))
