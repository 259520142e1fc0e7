"""File formats and configuration: model files, manifests, descriptor
archives, run configs and image ingestion.

Model file (magic "QDM1", little-endian throughout):

    bytes 0..3   magic
    bytes 4..7   uint32 format version (currently 1)
    bytes 8..15  uint64 header length
    header       canonical JSON: network config, ordered array manifest
                 [[name, shape], ...], training metadata
    payload      the arrays' float64 data, concatenated in manifest order

The JSON is dumped with sorted keys and fixed separators, so
save -> load -> save is byte-identical.

Descriptor archive: a plain concatenation of QDT1 tensors, one per
descriptor, shaped (1, dim, 1, 1); a sidecar index file (`<path>.idx`,
CSV `sample_id,byte_offset`) maps sample ids to their tensor's offset.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, fields

import numpy as np
from PIL import Image

from . import imageops, tensor
from .evaluate import Record
from .network import BRANCH_ORDER, DirectionalModel, NetworkConfig, full_config, toy_config
from .training import TrainConfig

log = logging.getLogger("dirfeat")

MODEL_MAGIC = b"QDM1"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- model file


def _config_to_dict(config: NetworkConfig) -> dict:
    return {
        "profile": config.profile,
        "input_size": config.input_size,
        "stem_channels": config.stem_channels,
        "unit_channels": list(config.unit_channels),
        "unit_slopes": list(config.unit_slopes),
        "stem_slope": config.stem_slope,
        "in_channels": config.in_channels,
        "sn_window": config.sn_window,
        "branches": config.branches,
        "n_classes": config.n_classes,
        "normalize_descriptor": config.normalize_descriptor,
    }


def _config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    d["unit_channels"] = tuple(d["unit_channels"])
    d["unit_slopes"] = tuple(d["unit_slopes"])
    return NetworkConfig(**d)


def save_model(model: DirectionalModel, path, meta=None) -> None:
    arrays = []
    manifest = []
    for b, net in model.branches.items():
        for name, arr in net.named_state():
            manifest.append([f"{b}:{name}", list(arr.shape)])
            arrays.append(arr)
    header = {
        "config": _config_to_dict(model.config),
        "arrays": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.asarray(arr, dtype="<f8").tobytes(order="C"))


def load_model(path):
    """Returns (DirectionalModel, meta dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {MODEL_VERSION}")
    (header_len,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16 : 16 + header_len].decode())
    config = _config_from_dict(header["config"])
    model = DirectionalModel.empty(config)
    state = {
        f"{b}:{name}": arr for b, net in model.branches.items() for name, arr in net.named_state()
    }
    off = 16 + header_len
    for name, shape in header["arrays"]:
        if name not in state:
            raise ModelFormatError(f"{path}: unknown array {name!r}")
        arr = state[name]
        if list(arr.shape) != list(shape):
            raise ModelFormatError(f"{path}: array {name!r} has shape {shape}, expected {list(arr.shape)}")
        end = off + arr.size * 8
        if end > len(buf):
            raise ModelFormatError(f"{path}: truncated payload at {name!r}")
        arr[...] = np.frombuffer(buf, dtype="<f8", count=arr.size, offset=off).reshape(arr.shape)
        off = end
    if off != len(buf):
        raise ModelFormatError(f"{path}: trailing bytes after payload")
    return model, header["meta"]


# ----------------------------------------------------------------- manifests


def read_manifest(path):
    """CSV with one record per line: sample_id,image_path,vehicle_id,camera_id,role."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [p.strip() for p in line.split(",")]
                if len(parts) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 comma-separated fields")
                records.append(Record(*parts))
    except OSError as err:
        raise DataError(f"cannot read manifest {path}: {err}") from None
    seen = set()
    for r in records:
        if r.sample_id in seen:
            raise DataError(f"{path}: duplicate sample_id {r.sample_id!r}")
        seen.add(r.sample_id)
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.sample_id},{r.image_path},{r.vehicle_id},{r.camera_id},{r.role}\n")


# ---------------------------------------------------------- descriptor files


def write_descriptors(path, named_descriptors) -> None:
    """named_descriptors: iterable of (sample_id, 1-D vector)."""
    index = []
    with open(path, "wb") as fh:
        for sid, vec in named_descriptors:
            index.append((sid, fh.tell()))
            vec = np.asarray(vec, dtype=np.float64)
            fh.write(tensor.tensor_bytes(vec.reshape(1, vec.size, 1, 1)))
    with open(str(path) + ".idx", "w", encoding="utf-8") as fh:
        for sid, off in index:
            fh.write(f"{sid},{off}\n")


def read_descriptors(path) -> dict:
    """Returns {sample_id: vector}; needs the sidecar `<path>.idx`."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
        with open(str(path) + ".idx", "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as err:
        raise DataError(f"cannot read descriptors {path}: {err}") from None
    out = {}
    for ln in lines:
        sid, off = ln.rsplit(",", 1)
        t, _ = tensor.tensor_from_bytes(buf, int(off))
        out[sid] = t.ravel()
    return out


# -------------------------------------------------------------------- images


def load_image(path, target_size: int) -> np.ndarray:
    """Decode PNG (or a QDT1 raw tensor) to (1, target, target, 3) in [0, 1].

    PNG pixels are scaled by 1/255; QDT1 payloads are taken as-is.  Either
    way the image is bilinearly resized when it is not already at the
    target size.
    """
    path = str(path)
    if path.endswith(".qdt"):
        t = tensor.read_tensor(path)
        if t.shape[0] != 1 or t.shape[3] != 3:
            raise DataError(f"{path}: expected a (1, h, w, 3) tensor, got {t.shape}")
        img = t[0]
    else:
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as err:
            raise DataError(f"cannot decode image {path}: {err}") from None
    if img.shape[:2] != (target_size, target_size):
        img = imageops.resize(img, target_size, target_size)
    return img[None, :, :, :]


def save_image(path, img: np.ndarray) -> None:
    """Write an (h, w, 3) float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ------------------------------------------------------------------- configs

_REQUIRED = object()

# key -> (parser, default); _REQUIRED keys must be present in the file
_CONFIG_SCHEMA = {
    "manifest": (str, _REQUIRED),
    "model_out": (str, _REQUIRED),
    "trace_out": (str, ""),
    "profile": (str, "toy"),
    "input_size": (int, 32),
    "seed_channels": (int, 8),
    "branches": (str, BRANCH_ORDER),
    "steps": (int, 500),
    "batch_size": (int, 128),
    "alpha": (float, 0.005),
    "momentum": (float, 0.9),
    "lr_initial": (float, 0.01),
    "lr_min": (float, 0.001),
    "lr_decay_factor": (float, 0.1),
    "convergence_window": (int, 200),
    "rotation_deg": (float, 3.0),
    "mirror_prob": (float, 0.5),
    "init_std": (float, 0.01),
    "seed": (int, 0),
    "normalize_descriptor": (lambda s: s.lower() in ("1", "true", "yes"), False),
}


@dataclass
class RunConfig:
    """Everything a training run needs, parsed from a `key = value` file."""

    manifest: str
    model_out: str
    trace_out: str
    profile: str
    input_size: int
    seed_channels: int
    branches: str
    steps: int
    batch_size: int
    alpha: float
    momentum: float
    lr_initial: float
    lr_min: float
    lr_decay_factor: float
    convergence_window: int
    rotation_deg: float
    mirror_prob: float
    init_std: float
    seed: int
    normalize_descriptor: bool
    config_hash: str = ""

    def network_config(self) -> NetworkConfig:
        if self.profile == "full":
            return full_config(branches=self.branches, normalize_descriptor=self.normalize_descriptor)
        if self.profile == "toy":
            return toy_config(
                seed_channels=self.seed_channels,
                input_size=self.input_size,
                branches=self.branches,
            )
        raise ConfigError(f"unknown profile {self.profile!r}")

    def train_config(self) -> TrainConfig:
        kwargs = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        try:
            return TrainConfig(**kwargs).validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None


def parse_config(path) -> RunConfig:
    """Line-oriented `key = value`; unknown keys are an error, missing keys
    fall back to their defaults with a logged notice."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    values = {}
    for key, (parse, default) in _CONFIG_SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as err:
                raise ConfigError(f"{path}: bad value for {key!r}: {err}") from None
        elif default is _REQUIRED:
            raise ConfigError(f"{path}: missing required key {key!r}")
        else:
            log.info("config %s: using default %s = %r", path, key, default)
            values[key] = default
    text = "".join(lines)
    values["config_hash"] = hashlib.sha256(text.encode()).hexdigest()[:16]
    return RunConfig(**values)
