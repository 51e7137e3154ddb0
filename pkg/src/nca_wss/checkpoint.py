"""Checkpoint container.

A checkpoint is an uncompressed zip archive with fixed timestamps (so equal
contents give equal bytes):

* ``meta.json``: ``{"format": "nca-wss-checkpoint", "version": 1,
  "config": {...TrainConfig...}, "metadata": {...}, "arrays": {name: shape}}``
* ``params/<field>.npy``: one ``.npy`` (float64, little-endian) per
  :class:`~nca_wss.model.NcaParams` field
* ``adam/m/<field>.npy``, ``adam/v/<field>.npy``: optional optimiser moments;
  the optimiser step counter lives in ``metadata["adam_step"]``
"""

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .model import NcaParams
from .optim import AdamState

FORMAT = "nca-wss-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: NcaParams
    config: TrainConfig
    metadata: dict = field(default_factory=dict)
    adam: AdamState | None = None


def _npy_bytes(array):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _write(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, params, config, metadata=None, adam=None):
    metadata = dict(metadata or {})
    arrays = {f"params/{k}": v for k, v in params.as_dict().items()}
    if adam is not None:
        metadata["adam_step"] = adam.step
        arrays.update({f"adam/m/{k}": v for k, v in adam.m.as_dict().items()})
        arrays.update({f"adam/v/{k}": v for k, v in adam.v.as_dict().items()})
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": config.to_dict(),
        "metadata": metadata,
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for name, array in arrays.items():
            _write(zf, f"{name}.npy", _npy_bytes(array))
    return path


def load_checkpoint(path):
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path} is not an NCA checkpoint (bad container format)") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise ValueError(f"{path} is not an NCA checkpoint (no meta.json)") from None
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path} is not an NCA checkpoint (format {meta.get('format')!r})")
        if meta.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for name, shape in meta["arrays"].items():
            array = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
            if list(array.shape) != shape:
                raise ValueError(f"{name}: stored shape {array.shape} disagrees with header {shape}")
            arrays[name] = array
    params = NcaParams.from_dict({k: arrays[f"params/{k}"] for k in NcaParams.names()})
    adam = None
    if "adam/m/kernels" in arrays:
        adam = AdamState(
            step=int(meta["metadata"]["adam_step"]),
            m=NcaParams.from_dict({k: arrays[f"adam/m/{k}"] for k in NcaParams.names()}),
            v=NcaParams.from_dict({k: arrays[f"adam/v/{k}"] for k in NcaParams.names()}),
        )
    return Checkpoint(params, TrainConfig.from_dict(meta["config"]), meta["metadata"], adam)
