"""Datasets, checkpoints, exports and config files.

Dataset layout::

    <dir>/cameras.json
    <dir>/images/<name>.png

``cameras.json``::

    {
      "version": 1,
      "scene_box": {"min": [x, y, z], "max": [x, y, z]},     # optional
      "views": [
        {"image": "images/000.png", "split": "train",
         "fx": ..., "fy": ..., "cx": ..., "cy": ..., "width": W, "height": H,
         "world_to_camera": [[r00, r01, r02, t0], [r10, ...], [r20, ...]]},
        ...
      ]
    }

``world_to_camera`` is row-major [R | t] with x_c = R x_w + t; the camera
looks down -z with +y up. Images are 8-bit RGB PNG.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SGSCKPT\\0"
    8       4     format version (uint32)
    12      8     header length H (uint64)
    20      8     payload length P (uint64)
    28      32    SHA-256 of header || payload
    60      H     UTF-8 JSON header (sorted keys)
    60+H    P     raw little-endian float64 arrays, back to back

The header records phase ("deterministic" or "bayesian"), iteration,
seed, sh_degree, the training config, and for each array its name,
shape, byte offset into the payload and byte length.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError
from .metrics import LossWeights, SparsificationCurve
from .scene import Camera, Scene
from .trainer import DEFAULT_BAYES_LR, DEFAULT_LR, TrainConfig
from .variational import POSTERIOR_NAMES, PosteriorParams, PriorParams, VariationalScene

DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"SGSCKPT\0"
CHECKPOINT_VERSION = 1
PHASES = ("deterministic", "bayesian")
SPLITS = ("train", "test")
_FIXED = struct.Struct("<8sIQQ32s")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset directory."""


class CheckpointError(ValueError):
    """Checkpoint could not be read."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


# --- images ----------------------------------------------------------------

def to_uint8(array) -> np.ndarray:
    """Linear [0, 1] to 8-bit with round-half-up; out-of-range values saturate."""
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ContractError("image contains non-finite values")
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """8-bit PNG as float64 RGB in [0, 1], (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def export_image(array, path) -> None:
    """Write an (H, W, 3) or (H, W) image in [0, 1] as 8-bit PNG."""
    a = to_uint8(array)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ContractError(f"expected (H, W) or (H, W, 3) image, got {a.shape}")
    Image.fromarray(a, mode="L" if a.ndim == 2 else "RGB").save(path, format="PNG")


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".max.txt")


def export_uncertainty(umap, path) -> float:
    """Grayscale PNG normalized by the map maximum; the raw maximum goes to a sidecar file."""
    u = np.asarray(umap, dtype=np.float64)
    if u.ndim != 2:
        raise ContractError("uncertainty map must be 2-D")
    if not np.all(np.isfinite(u)) or np.any(u < 0):
        raise ContractError("uncertainty map must be finite and non-negative")
    peak = float(u.max())
    export_image(u / peak if peak > 0 else np.zeros_like(u), path)
    sidecar_path(path).write_text(repr(peak) + "\n")
    return peak


def export_curve(curve: SparsificationCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "retained_error"])
        for f, e in zip(curve.fractions, curve.retained_error):
            w.writerow([f"{f:.9g}", f"{e:.9g}"])


def load_curve(path) -> SparsificationCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["fraction", "retained_error"]:
        raise ContractError(f"{path}: expected header fraction,retained_error")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return SparsificationCurve(data[:, 0].copy(), data[:, 1].copy())


# --- datasets ----------------------------------------------------------------

@dataclass
class View:
    image_path: str  # relative to the dataset root
    camera: Camera
    split: str
    image: np.ndarray = field(repr=False, default=None)


@dataclass
class DatasetManifest:
    views: list
    root: Optional[Path] = None
    box: Optional[tuple] = None

    @property
    def train(self) -> list:
        return [v for v in self.views if v.split == "train"]

    @property
    def test(self) -> list:
        return [v for v in self.views if v.split == "test"]

    def train_views(self) -> list:
        return [(v.camera, v.image) for v in self.train]

    def scene_box(self) -> tuple:
        """Recorded scene box, or one centered where the optical axes meet."""
        if self.box is not None:
            return self.box
        cams = [v.camera for v in self.views]
        centers = np.stack([c.center for c in cams])
        dirs = np.stack([c.rotation[2] * -1.0 for c in cams])  # world-space viewing directions
        a = np.zeros((3, 3))
        b = np.zeros(3)
        for o, d in zip(centers, dirs):
            p = np.eye(3) - np.outer(d, d)
            a += p
            b += p @ o
        focus = np.linalg.lstsq(a, b, rcond=None)[0]
        half = 0.25 * float(np.mean(np.linalg.norm(centers - focus, axis=1)))
        return focus - half, focus + half


def _camera_json(c: Camera) -> dict:
    return {
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
        "world_to_camera": c.world_to_camera.tolist(),
    }


def _parse_view(entry, i: int, path: Path) -> View:
    try:
        cam = Camera.from_matrix(entry["fx"], entry["fy"], entry["cx"], entry["cy"],
                                 entry["width"], entry["height"], entry["world_to_camera"])
        split = entry.get("split", "train")
        image = entry["image"]
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetError(f"{path}: view {i}: invalid camera entry ({err})") from err
    if split not in SPLITS:
        raise DatasetError(f"{path}: view {i}: split must be one of {SPLITS}, got {split!r}")
    return View(str(image), cam, split)


def load_dataset(directory) -> DatasetManifest:
    """Parse ``cameras.json`` and decode every referenced image."""
    root = Path(directory)
    path = root / "cameras.json"
    if not path.is_file():
        raise DatasetError(f"{path}: file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(doc, dict) or not isinstance(doc.get("views"), list):
        raise DatasetError(f"{path}: expected an object with a 'views' list")
    if doc.get("version", DATASET_VERSION) != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {doc.get('version')}")
    if not (root / "images").is_dir():
        raise DatasetError(f"{root / 'images'}: images folder not found")
    views = [_parse_view(e, i, path) for i, e in enumerate(doc["views"])]
    if not views:
        raise DatasetError(f"{path}: no views")
    missing = [v.image_path for v in views if not (root / v.image_path).is_file()]
    if missing:
        raise DatasetError(f"{root}: missing image files: {', '.join(missing)}")
    for v in views:
        try:
            v.image = read_image(root / v.image_path)
        except OSError as err:
            raise DatasetError(f"{root / v.image_path}: cannot decode image ({err})") from err
        h, w = v.image.shape[:2]
        if (w, h) != (v.camera.width, v.camera.height):
            raise DatasetError(f"{root / v.image_path}: image is {w}x{h} but camera is "
                               f"{v.camera.width}x{v.camera.height}")
    box = None
    if "scene_box" in doc:
        try:
            box = (np.asarray(doc["scene_box"]["min"], float), np.asarray(doc["scene_box"]["max"], float))
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"{path}: invalid scene_box ({err})") from err
    return DatasetManifest(views, root, box)


def save_dataset(manifest: DatasetManifest, directory) -> None:
    """Write ``cameras.json`` and 8-bit PNGs for every view."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc = {"version": DATASET_VERSION, "views": []}
    if manifest.box is not None:
        doc["scene_box"] = {"min": np.asarray(manifest.box[0]).tolist(), "max": np.asarray(manifest.box[1]).tolist()}
    for v in manifest.views:
        if v.image is None:
            raise ContractError(f"view {v.image_path} has no image data")
        export_image(v.image, root / v.image_path)
        doc["views"].append({"image": v.image_path, "split": v.split, **_camera_json(v.camera)})
    (root / "cameras.json").write_text(json.dumps(doc, indent=2) + "\n")


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Union[Scene, VariationalScene]
    phase: str = "deterministic"
    config: Optional[TrainConfig] = None
    iteration: int = 0
    seed: int = 0
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ContractError(f"phase must be one of {PHASES}")


_SCENE_ARRAYS = ("means", "log_scales", "rotations", "opacity_logits", "sh")
_PRIOR_ARRAYS = ("mu", "gamma", "logit_alpha", "pi", "c", "xi")


def _model_arrays(model) -> tuple[str, dict]:
    if isinstance(model, VariationalScene):
        arrays = {f"posterior.{n}": getattr(model.posterior, n) for n in POSTERIOR_NAMES}
        arrays.update({f"prior.{n}": getattr(model.prior, n) for n in _PRIOR_ARRAYS})
        arrays["log_scales"] = model.log_scales
        arrays["rotations"] = model.rotations
        return "variational", arrays
    if isinstance(model, Scene):
        return "scene", {n: getattr(model, n) for n in _SCENE_ARRAYS}
    raise ContractError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    kind, arrays = _model_arrays(ckpt.model)
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": kind, "phase": ckpt.phase, "iteration": int(ckpt.iteration), "seed": int(ckpt.seed),
        "sh_degree": int(ckpt.model.sh_degree), "arrays": entries,
        "config": None if ckpt.config is None else ckpt.config.to_dict(),
    }
    if kind == "variational":
        header["prior_frozen"] = bool(ckpt.model.prior.frozen)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(hbytes + payload).digest()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_FIXED.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes), len(payload), digest))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _FIXED.size:
        raise ChecksumError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    magic, version, hlen, plen, digest = _FIXED.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version} is not supported "
                           f"(this build reads version {CHECKPOINT_VERSION})")
    body = data[_FIXED.size:]
    if len(body) != hlen + plen or hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupt)")
    header = json.loads(body[:hlen].decode("utf-8"))
    payload = body[hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    deg = header["sh_degree"]
    if header["kind"] == "variational":
        posterior = PosteriorParams(**{n: arrays[f"posterior.{n}"] for n in POSTERIOR_NAMES})
        prior = PriorParams(**{n: arrays[f"prior.{n}"] for n in _PRIOR_ARRAYS}, frozen=header["prior_frozen"])
        model = VariationalScene(posterior, prior, arrays["log_scales"], arrays["rotations"], deg)
    else:
        model = Scene(**{n: arrays[n] for n in _SCENE_ARRAYS}, sh_degree=deg)
    config = None if header["config"] is None else TrainConfig.from_dict(header["config"])
    return Checkpoint(model, header["phase"], config, header["iteration"], header["seed"], version)


# --- config files --------------------------------------------------------------

def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(value)
    return float(value)


def load_config(path) -> TrainConfig:
    """Read an INI-style config with [train], [weights], [lr] and [bayes_lr] sections.

    Every key is optional; missing ones keep the `TrainConfig` defaults.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigurationError(f"{path}: {err}") from err
    base = TrainConfig()
    unknown_sections = set(parser.sections()) - {"train", "weights", "lr", "bayes_lr"}
    if unknown_sections:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown_sections)}")
    kw = {}
    scalar = {f.name: getattr(base, f.name) for f in fields(base) if f.name not in ("weights", "lr", "bayes_lr")}
    try:
        for key, value in parser.items("train") if parser.has_section("train") else []:
            if key not in scalar:
                raise ConfigurationError(f"{path}: unknown key [train] {key}")
            kw[key] = _coerce(value, scalar[key])
        w = {f.name: getattr(base.weights, f.name) for f in fields(base.weights)}
        for key, value in parser.items("weights") if parser.has_section("weights") else []:
            if key not in w:
                raise ConfigurationError(f"{path}: unknown key [weights] {key}")
            w[key] = float(value)
        tables = {"lr": dict(DEFAULT_LR), "bayes_lr": dict(DEFAULT_BAYES_LR)}
        for section, table in tables.items():
            for key, value in parser.items(section) if parser.has_section(section) else []:
                if key not in table:
                    raise ConfigurationError(f"{path}: unknown key [{section}] {key}")
                table[key] = float(value)
    except ValueError as err:
        if isinstance(err, ConfigurationError):
            raise
        raise ConfigurationError(f"{path}: {err}") from err
    return TrainConfig(**kw, weights=LossWeights(**w), **tables)


def save_config(config: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    d = config.to_dict()
    parser["train"] = {k: repr(v) if isinstance(v, float) else str(v)
                       for k, v in d.items() if k not in ("weights", "lr", "bayes_lr")}
    for section in ("weights", "lr", "bayes_lr"):
        parser[section] = {k: repr(float(v)) for k, v in d[section].items()}
    with open(path, "w") as fh:
        parser.write(fh)
