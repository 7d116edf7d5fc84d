"""Image corpora and neural recordings.

Images are exposed as ``[count, channels, k, k]`` float32 arrays in ``[0, 1]``.
Large corpora (STL-10 unlabeled is 2.7 GB of bytes) stay uint8 and memory
mapped; :meth:`ImageSet.get` decodes only the rows that are asked for.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

REGIONS = ("V1", "V2", "V4", "IT")

STL10_SIZE = 96
STL10_RECORD_BYTES = 3 * STL10_SIZE * STL10_SIZE
STL10_CLASSES = (
    "airplane", "bird", "car", "cat", "deer",
    "dog", "horse", "monkey", "ship", "truck",
)
_STL10_FILES = {
    "train": ("train_X.bin", "train_y.bin"),
    "test": ("test_X.bin", "test_y.bin"),
    "unlabeled": ("unlabeled_X.bin", None),
}

MANIFEST_NAME = "manifest.json"
RESPONSES_NAME = "responses.bin"
STIMULI_DIR = "stimuli"
CONTAINER_VERSION = 1


class DataError(Exception):
    """Raised for missing, corrupt or inconsistent data files."""


def _readonly(a: np.ndarray) -> np.ndarray:
    if isinstance(a, np.ndarray) and a.flags.writeable:
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageSet:
    """A batch of square RGB images with optional integer labels.

    ``data`` is either float in ``[0, 1]`` or uint8 (implicitly scaled by
    1/255). Use :meth:`get` or :attr:`images` to obtain float32 pixels.
    """

    data: np.ndarray
    labels: Optional[np.ndarray] = None
    class_names: Optional[list] = None
    name: str = "images"

    def __post_init__(self):
        d = self.data
        if d.ndim != 4:
            raise ValueError(f"images must be [count, c, k, k], got shape {d.shape}")
        if d.shape[2] != d.shape[3]:
            raise ValueError(f"images must be square, got {d.shape[2]}x{d.shape[3]}")
        if d.dtype != np.uint8:
            if not np.issubdtype(d.dtype, np.floating):
                raise ValueError(f"unsupported pixel dtype {d.dtype}")
            if d.size and (np.nanmin(d) < 0.0 or np.nanmax(d) > 1.0):
                raise ValueError("float pixels must lie in [0, 1]")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (d.shape[0],):
                raise ValueError(
                    f"labels length {labels.shape} does not match image count {d.shape[0]}"
                )
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            if self.class_names is not None and labels.size and labels.max() >= len(self.class_names):
                raise ValueError("label out of range for class_names")
            object.__setattr__(self, "labels", _readonly(labels.astype(np.int64, copy=False)))
        _readonly(d)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> Optional[int]:
        if self.class_names is not None:
            return len(self.class_names)
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1

    def get(self, indices) -> np.ndarray:
        """Decode the selected images to a fresh, writable float32 array in [0, 1]."""
        rows = np.asarray(self.data[indices])
        if rows.dtype == np.uint8:
            return rows.astype(np.float32) / np.float32(255.0)
        return rows.astype(np.float32, copy=True)

    @property
    def images(self) -> np.ndarray:
        return self.get(slice(None))

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices)
        labels = None if self.labels is None else self.labels[idx]
        return ImageSet(np.ascontiguousarray(self.data[idx]), labels, self.class_names, self.name)


@dataclass(frozen=True)
class NeuralRecording:
    """Responses ``[n_stimuli, n_neurons, n_repetitions]`` for one cortical region."""

    responses: np.ndarray
    region: str
    stimuli: Optional[ImageSet] = None
    neuron_ids: Optional[list] = None
    readout: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        r = self.responses
        if r.ndim != 3:
            raise DataError(f"responses must be [stimuli, neurons, repetitions], got {r.shape}")
        if self.region not in REGIONS:
            raise DataError(f"unknown region {self.region!r}; expected one of {REGIONS}")
        if r.shape[2] < 2:
            raise DataError(
                f"need at least 2 repetitions per stimulus for a split-half ceiling, got {r.shape[2]}"
            )
        if not np.all(np.isfinite(r)):
            raise DataError("responses contain NaN or infinite entries")
        if self.stimuli is not None and len(self.stimuli) != r.shape[0]:
            raise DataError(
                f"{len(self.stimuli)} stimulus images for {r.shape[0]} response rows"
            )
        ids = self.neuron_ids
        if ids is None:
            ids = [f"{self.region}_{i:04d}" for i in range(r.shape[1])]
        elif len(ids) != r.shape[1]:
            raise DataError(f"{len(ids)} neuron ids for {r.shape[1]} neurons")
        object.__setattr__(self, "neuron_ids", list(ids))
        _readonly(r)

    @property
    def n_stimuli(self) -> int:
        return self.responses.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.responses.shape[1]

    @property
    def n_repetitions(self) -> int:
        return self.responses.shape[2]

    def mean_responses(self) -> np.ndarray:
        return self.responses.mean(axis=2)


# --------------------------------------------------------------------------
# STL-10


def _stl10_root(path: Path) -> Path:
    if (path / "stl10_binary").is_dir():
        return path / "stl10_binary"
    return path


def load_stl10(path, split: str = "train") -> ImageSet:
    """Load one STL-10 split from the official binary distribution.

    Each record is 27,648 bytes: R, G and B planes of 96x96 pixels, every plane
    stored column-major. Labels on disk are 1-based and are shifted to 0-based.
    The pixel file is memory mapped, not read.
    """
    if split not in _STL10_FILES:
        raise ValueError(f"split must be one of {sorted(_STL10_FILES)}, got {split!r}")
    root = _stl10_root(Path(path))
    x_name, y_name = _STL10_FILES[split]
    x_path = root / x_name
    if not x_path.is_file():
        raise DataError(f"missing STL-10 image file {x_path}")
    n_bytes = x_path.stat().st_size
    if n_bytes == 0 or n_bytes % STL10_RECORD_BYTES:
        raise DataError(
            f"{x_path} is corrupt: {n_bytes} bytes is not a multiple of {STL10_RECORD_BYTES}"
        )
    count = n_bytes // STL10_RECORD_BYTES
    raw = np.memmap(x_path, dtype=np.uint8, mode="r",
                    shape=(count, 3, STL10_SIZE, STL10_SIZE))
    # planes are column-major on disk: [c][col][row] -> [c][row][col]
    data = raw.transpose(0, 1, 3, 2)

    labels = None
    if y_name is not None:
        y_path = root / y_name
        if not y_path.is_file():
            raise DataError(f"missing STL-10 label file {y_path} for split {split!r}")
        y = np.fromfile(y_path, dtype=np.uint8)
        if y.shape[0] != count:
            raise DataError(f"{y_path} has {y.shape[0]} labels for {count} images")
        if y.min() < 1 or y.max() > len(STL10_CLASSES):
            raise DataError(f"{y_path} has labels outside 1..{len(STL10_CLASSES)}")
        labels = y.astype(np.int64) - 1

    names_file = root / "class_names.txt"
    class_names = list(STL10_CLASSES)
    if names_file.is_file():
        listed = [ln.strip() for ln in names_file.read_text().splitlines() if ln.strip()]
        if listed:
            class_names = listed
    return ImageSet(data, labels, class_names, name=f"stl10/{split}")


def write_stl10_split(path, split: str, images: np.ndarray, labels=None) -> None:
    """Write uint8 ``[count, 3, 96, 96]`` images (and 0-based labels) in STL-10 layout."""
    x_name, y_name = _STL10_FILES[split]
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.uint8)
    np.ascontiguousarray(images.transpose(0, 1, 3, 2)).tofile(root / x_name)
    if y_name is not None and labels is not None:
        (np.asarray(labels) + 1).astype(np.uint8).tofile(root / y_name)


# --------------------------------------------------------------------------
# image directories


_IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"}


def _read_image(path: Path, size: Optional[int]) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)


def load_image_dir(path, size: Optional[int] = None) -> ImageSet:
    """Load a directory of lossless images.

    With class subdirectories, labels follow sorted subdirectory names;
    otherwise the set is unlabeled. Files are read in sorted order. ``size``
    resizes every image to ``size x size``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"image directory {root} does not exist")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    files, labels = [], []
    if subdirs:
        for label, sub in enumerate(subdirs):
            for f in sorted(sub.iterdir()):
                if f.suffix.lower() in _IMAGE_SUFFIXES:
                    files.append(f)
                    labels.append(label)
        class_names = [d.name for d in subdirs]
    else:
        files = sorted(f for f in root.iterdir() if f.suffix.lower() in _IMAGE_SUFFIXES)
        class_names = None
    if not files:
        raise DataError(f"no images found under {root}")
    arrays = [_read_image(f, size) for f in files]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"images under {root} have mixed sizes {sorted(shapes)}; pass size=")
    data = np.stack(arrays)
    return ImageSet(data, np.array(labels) if subdirs else None, class_names, name=str(root))


def _save_png(path: Path, image_chw: np.ndarray) -> None:
    from PIL import Image

    arr = image_chw
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)


# --------------------------------------------------------------------------
# neural container


def save_neural_recording(recording: NeuralRecording, path) -> Path:
    """Write ``manifest.json`` + ``responses.bin`` (+ ``stimuli/`` PNGs)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n_s, n_n, n_r = recording.responses.shape
    stimulus_files = []
    if recording.stimuli is not None:
        (root / STIMULI_DIR).mkdir(exist_ok=True)
        raw = recording.stimuli.data
        for i in range(n_s):
            name = f"{i:06d}.png"
            img = raw[i] if raw.dtype == np.uint8 else recording.stimuli.get(i)
            _save_png(root / STIMULI_DIR / name, img)
            stimulus_files.append(name)
    manifest = {
        "version": CONTAINER_VERSION,
        "region": recording.region,
        "n_stimuli": n_s,
        "n_neurons": n_n,
        "n_repetitions": n_r,
        "dtype": "float32",
        "byte_order": "little-endian",
        "neuron_ids": list(recording.neuron_ids),
        "stimuli": stimulus_files,
    }
    np.ascontiguousarray(recording.responses, dtype="<f4").tofile(root / RESPONSES_NAME)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return root


def load_neural_recording(path, drop_nan_neurons: bool = False) -> NeuralRecording:
    """Load a recording container written by :func:`save_neural_recording`.

    NaN responses are rejected unless ``drop_nan_neurons`` is set, in which
    case every neuron with any NaN entry is removed.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"missing {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path} is not valid JSON: {exc}") from exc
    for key in ("region", "n_stimuli", "n_neurons", "n_repetitions"):
        if key not in manifest:
            raise DataError(f"{manifest_path} lacks field {key!r}")
    if manifest.get("dtype", "float32") != "float32":
        raise DataError(f"unsupported dtype {manifest['dtype']!r}")
    if manifest.get("byte_order", "little-endian") != "little-endian":
        raise DataError(f"unsupported byte order {manifest['byte_order']!r}")
    shape = (int(manifest["n_stimuli"]), int(manifest["n_neurons"]), int(manifest["n_repetitions"]))
    if shape[2] < 2:
        raise DataError(f"n_repetitions={shape[2]}; the noise ceiling needs at least 2")

    bin_path = root / RESPONSES_NAME
    if not bin_path.is_file():
        raise DataError(f"missing {bin_path}")
    expected = int(np.prod(shape)) * 4
    actual = bin_path.stat().st_size
    if actual != expected:
        raise DataError(
            f"{bin_path} holds {actual} bytes but manifest shape {shape} needs {expected}"
        )
    responses = np.fromfile(bin_path, dtype="<f4").reshape(shape).astype(np.float32)

    neuron_ids = manifest.get("neuron_ids") or None
    bad = ~np.isfinite(responses).all(axis=(0, 2))
    if bad.any():
        if not drop_nan_neurons:
            raise DataError(
                f"{int(bad.sum())} neurons have NaN/inf responses; pass drop_nan_neurons=True to drop them"
            )
        responses = responses[:, ~bad]
        if neuron_ids is not None:
            neuron_ids = [n for n, b in zip(neuron_ids, bad) if not b]

    stimuli = None
    files = manifest.get("stimuli") or []
    if files:
        if len(files) != shape[0]:
            raise DataError(f"manifest lists {len(files)} stimuli for {shape[0]} response rows")
        missing = [f for f in files if not (root / STIMULI_DIR / f).is_file()]
        if missing:
            raise DataError(f"missing stimulus files, e.g. {missing[0]}")
        data = np.stack([_read_image(root / STIMULI_DIR / f, None) for f in files])
        stimuli = ImageSet(data, name=f"{root.name}/stimuli")
    return NeuralRecording(responses, manifest["region"], stimuli, neuron_ids)


# --------------------------------------------------------------------------
# synthetic corpora


def _class_mask(kind: int, yy, xx, cy, cx, radius, angle):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = np.hypot(dx, dy)
    kind = kind % 8
    if kind == 0:  # disk
        return r <= radius
    if kind == 1:  # square
        return (np.abs(u) <= radius * 0.8) & (np.abs(v) <= radius * 0.8)
    if kind == 2:  # upward triangle
        h = radius * 1.1
        return (dy <= h * 0.6) & (dy >= -h) & (np.abs(dx) <= (dy + h) * 0.6)
    if kind == 3:  # plus sign
        w = radius * 0.3
        return ((np.abs(u) <= w) & (np.abs(v) <= radius)) | ((np.abs(v) <= w) & (np.abs(u) <= radius))
    if kind == 4:  # ring
        return (r <= radius) & (r >= radius * 0.55)
    if kind == 5:  # horizontal bar pair
        return (np.abs(dx) <= radius) & ((np.abs(dy - radius * 0.45) <= radius * 0.22) |
                                         (np.abs(dy + radius * 0.45) <= radius * 0.22))
    if kind == 6:  # diamond
        return np.abs(u) + np.abs(v) <= radius
    return (np.abs(u) <= radius) & (np.abs(v) <= radius * 0.35)  # slab


def synth_image_set(seed: int, count: int, n_classes: int, k: int, name: str = "synthetic") -> ImageSet:
    """Procedural labelled images, a pure function of the arguments.

    Every class has its own shape and stripe texture drawn near the image
    centre over a colour-gradient background that is brighter towards the top.
    Class definitions depend only on ``n_classes``, so sets drawn with
    different seeds share classes and can serve as train and test splits.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if k < 16 or k % 2:
        raise ValueError(f"k must be even and >= 16 (quadrants need an even size), got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, count, n_classes, k]))
    labels = np.arange(count) % n_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:k, 0:k].astype(np.float32) + 0.5
    out = np.empty((count, 3, k, k), dtype=np.float32)
    class_rng = np.random.default_rng(np.random.SeedSequence([7919, n_classes]))
    stripe_freq = class_rng.uniform(0.15, 0.6, size=n_classes)
    stripe_angle = class_rng.uniform(0, np.pi, size=n_classes)
    for i in range(count):
        y = labels[i]
        top = rng.uniform(0.55, 1.0, size=3)
        bottom = rng.uniform(0.0, 0.45, size=3)
        tilt = rng.uniform(-0.25, 0.25)
        ramp = np.clip(yy / k + tilt * (xx / k - 0.5), 0.0, 1.0)
        bg = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp
        bg = bg + rng.normal(0.0, 0.04, size=(3, k, k))
        cy, cx = k / 2 + rng.uniform(-k / 10, k / 10, size=2)
        radius = k * rng.uniform(0.25, 0.36)
        angle = rng.uniform(-0.3, 0.3)
        mask = _class_mask(int(y), yy, xx, cy, cx, radius, angle)
        phase = rng.uniform(0, 2 * np.pi)
        a = stripe_angle[y]
        stripes = 0.5 + 0.5 * np.sin(stripe_freq[y] * (np.cos(a) * xx + np.sin(a) * yy) + phase)
        fg_color = rng.uniform(0.2, 1.0, size=3)
        fg = fg_color[:, None, None] * (0.55 + 0.45 * stripes[None])
        out[i] = np.clip(np.where(mask[None], fg, bg), 0.0, 1.0)
    names = [f"class_{c}" for c in range(n_classes)]
    return ImageSet(out, labels.astype(np.int64), names, name=f"{name}/{seed}")


def synth_neural_recording(
    activations,
    n_neurons: int,
    noise_sd: float,
    n_repetitions: int,
    seed: int,
    region: str = "V1",
    stimuli: Optional[ImageSet] = None,
) -> NeuralRecording:
    """Synthetic neurons: fixed random linear readouts plus Gaussian trial noise.

    Each readout is scaled so that the neuron's noiseless response has unit
    variance across stimuli, which makes ``noise_sd`` a noise-to-signal ratio.
    The readout matrix ``[n_features, n_neurons]`` is kept on the recording.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    if n_repetitions < 2:
        raise ValueError("n_repetitions must be >= 2")
    if n_neurons < 1:
        raise ValueError("n_neurons must be >= 1")
    values = getattr(activations, "values", activations)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("activations must be a [stimuli, features] matrix")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_neurons, n_repetitions]))
    weights = rng.standard_normal((x.shape[1], n_neurons))
    signal = (x - x.mean(axis=0)) @ weights
    sd = signal.std(axis=0)
    sd[sd == 0] = 1.0
    weights = weights / sd
    signal = signal / sd
    noise = rng.standard_normal((x.shape[0], n_neurons, n_repetitions)) * noise_sd
    responses = (signal[:, :, None] + noise).astype(np.float32)
    return NeuralRecording(responses, region, stimuli, readout=weights)


def data_root() -> Optional[Path]:
    """Default data directory from ``DUALVVS_DATA``, if set."""
    root = os.environ.get("DUALVVS_DATA")
    return Path(root) if root else None


def resolve_data_path(path, root: Optional[Path] = None) -> Path:
    p = Path(os.path.expanduser(str(path)))
    if not p.is_absolute():
        base = root if root is not None else data_root()
        if base is not None:
            p = base / p
    return p


def as_imageset(images: np.ndarray | Sequence, labels=None) -> ImageSet:
    return ImageSet(np.asarray(images, dtype=np.float32), labels)
