"""Versioned, byte-stable model archive.

Layout: a ZIP file (stored, no compression) whose members all carry a fixed
timestamp, written in a fixed order.

``meta.json``
    ``format`` (``"mgtwr-model"``), ``format_version``, library version,
    kernel spec, gamma, covariate names, bandwidth table, grid, fit summary.
``coords.npy``, ``times.npy``, ``beta.npy``, ``bandwidths.npy``
    Little-endian float64 arrays in NumPy ``.npy`` format.

Readers accept any archive with the same major ``format_version``.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import SchemaError
from .kernels import KernelSpec
from .prediction import PredictionModel

FORMAT = "mgtwr-model"
FORMAT_VERSION = "1.0"
_EPOCH = (1980, 1, 1, 0, 0, 0)
_ARRAYS = ("coords", "times", "beta", "bandwidths")


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def dumps_json(obj) -> str:
    """Canonical JSON (sorted keys, infinities as strings)."""
    return json.dumps(_encode_inf(obj), sort_keys=True, indent=1, default=_json_default)


def _encode_inf(obj):
    if isinstance(obj, float) and np.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _encode_inf(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_inf(v) for v in obj]
    return obj


def _decode_inf(obj):
    if obj == "inf":
        return float("inf")
    if obj == "-inf":
        return float("-inf")
    if isinstance(obj, dict):
        return {k: _decode_inf(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_inf(v) for v in obj]
    return obj


def save_model(path, model: PredictionModel, extra: dict | None = None) -> None:
    """Write ``model`` (plus optional JSON-able ``extra`` metadata) to ``path``."""
    from . import __version__

    meta = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "spec": model.spec.to_dict(),
        "gamma": float(model.gamma),
        "names": list(model.names) if model.names is not None else None,
        "extra": extra or {},
    }
    members = [("meta.json", dumps_json(meta).encode("utf-8"))]
    members += [(f"{name}.npy", _npy_bytes(getattr(model, name))) for name in _ARRAYS]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            info.create_system = 3
            zf.writestr(info, data)


def load_model(path):
    """Read an archive; returns ``(PredictionModel, meta)``."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = _decode_inf(json.loads(zf.read("meta.json").decode("utf-8")))
            arrays = {name: np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False) for name in _ARRAYS}
    except (KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise SchemaError(f"not a valid model archive: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise SchemaError("not a model archive")
    major = str(meta.get("format_version", "")).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported archive version {meta.get('format_version')!r}")
    model = PredictionModel(arrays["coords"], arrays["times"], arrays["beta"], arrays["bandwidths"],
                            KernelSpec.from_dict(meta["spec"]), meta["gamma"], meta["names"])
    return model, meta
