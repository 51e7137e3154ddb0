"""Dataset manifests, PNG loading, and the synthetic blob generator.

Manifest layout (CSV, UTF-8)::

    # dataset: raabin
    # classes: basophil,eosinophil,lymphocyte,monocyte,neutrophil
    id,image,label,mask
    img001,images/img001.png,2,masks/img001.png
    img002,images/img002.png,,masks/img002.png

The two ``#`` lines are optional. ``label`` and ``mask`` may be empty
(training-only or mask-only samples). Relative paths resolve against the
manifest's directory.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.transform import resize

log = logging.getLogger(__name__)

COLUMNS = ("id", "image", "label", "mask")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    image: str
    label: int | None = None
    mask: str | None = None


@dataclass
class SampleManifest:
    entries: list
    dataset_id: str = "dataset"
    class_names: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    @property
    def num_classes(self):
        if self.class_names:
            return len(self.class_names)
        labels = [e.label for e in self.entries if e.label is not None]
        return max(labels) + 1 if labels else 0

    @property
    def has_labels(self):
        return bool(self.entries) and all(e.label is not None for e in self.entries)

    @property
    def has_masks(self):
        return any(e.mask is not None for e in self.entries)

    def labelled(self):
        return [e for e in self.entries if e.label is not None]

    def subset(self, indices):
        return SampleManifest([self.entries[i] for i in indices], self.dataset_id, list(self.class_names), self.root)


def _parse_header_comment(line, meta):
    key, _, value = line.lstrip("#").partition(":")
    key = key.strip().lower()
    if key == "dataset":
        meta["dataset_id"] = value.strip()
    elif key == "classes":
        meta["class_names"] = [c.strip() for c in value.split(",") if c.strip()]


def load_manifest(path, check_files=True):
    """Parse and validate a manifest CSV."""
    path = Path(path)
    meta = {"dataset_id": path.stem, "class_names": []}
    body = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            _parse_header_comment(line, meta)
        else:
            body.append(line)
    reader = csv.reader(io.StringIO("\n".join(body)))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: missing header row") from None
    header = [h.strip() for h in header]
    if header[:2] != ["id", "image"] or any(c not in COLUMNS for c in header):
        raise ManifestError(f"{path}: header must be id,image[,label][,mask], got {','.join(header)}")

    entries, seen, problems = [], {}, []
    for rowno, row in enumerate(reader, start=2):
        if not any(cell.strip() for cell in row):
            continue
        values = dict(zip(header, (c.strip() for c in row)))
        sample_id = values.get("id", "")
        if not sample_id:
            problems.append(f"row {rowno}: empty id")
            continue
        if sample_id in seen:
            problems.append(f"row {rowno}: duplicate id {sample_id!r} (first at row {seen[sample_id]})")
            continue
        seen[sample_id] = rowno
        label = values.get("label") or None
        if label is not None:
            try:
                label = int(label)
            except ValueError:
                problems.append(f"row {rowno}: label {label!r} is not an integer")
                continue
            if label < 0 or (meta["class_names"] and label >= len(meta["class_names"])):
                problems.append(f"row {rowno}: label {label} outside the class table")
        entries.append(Sample(sample_id, values["image"], label, values.get("mask") or None))

    manifest = SampleManifest(entries, meta["dataset_id"], meta["class_names"], path.parent)
    if check_files:
        rows = list(seen.values())
        for rowno, entry in zip(rows, entries):
            for col in ("image", "mask"):
                ref = getattr(entry, col)
                if ref is not None and not manifest.resolve(ref).exists():
                    problems.append(f"row {rowno}: {col} file not found: {ref}")
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return manifest


def save_manifest(manifest, path):
    path = Path(path)
    buf = io.StringIO()
    buf.write(f"# dataset: {manifest.dataset_id}\n")
    if manifest.class_names:
        buf.write(f"# classes: {','.join(manifest.class_names)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for e in manifest.entries:
        writer.writerow([e.id, e.image, "" if e.label is None else e.label, e.mask or ""])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _target_shape(target_size):
    if target_size is None:
        return None
    if np.isscalar(target_size):
        return (int(target_size), int(target_size))
    return tuple(int(s) for s in target_size)


def load_image(path, target_size=None):
    """Load an 8-bit PNG as float64 (H, W, 3) in [0, 1], bilinearly resized."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    shape = _target_shape(target_size)
    if shape is not None and rgb.shape[:2] != shape:
        rgb = resize(rgb, shape + (3,), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb


def load_mask(path, target_size=None):
    """Load a single-channel mask PNG as bool (foreground = value >= 128), nearest resize."""
    try:
        with Image.open(path) as img:
            mask = np.asarray(img.convert("L")) >= 128
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    shape = _target_shape(target_size)
    if shape is not None and mask.shape != shape:
        mask = resize(mask, shape, order=0, mode="edge", anti_aliasing=False, preserve_range=True).astype(bool)
    return mask


def save_mask(mask, path):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image(image, path):
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_arrays(manifest, image_size, need_labels=True):
    """Stack every image (and label) of ``manifest`` into arrays."""
    entries = manifest.labelled() if need_labels else manifest.entries
    images = np.stack([load_image(manifest.resolve(e.image), image_size) for e in entries])
    labels = np.array([e.label for e in entries]) if need_labels else None
    return images, labels, [e.id for e in entries]


# --------------------------------------------------------------------------
# synthetic blobs


@dataclass(frozen=True)
class SynthSpec:
    num_samples: int = 100
    image_size: int = 64
    num_classes: int = 2
    radius_min: float = 12.0
    radius_max: float = 20.0
    frequencies: tuple = (0.1, 0.3)  # texture cycles per pixel, one per class
    texture_amplitude: float = 0.2
    cell_colors: tuple = ((0.70, 0.22, 0.45), (0.22, 0.32, 0.75))  # RGB per class
    noise: float = 0.03
    brightness: float = 0.0  # additive offset (domain shift)
    hue_degrees: float = 0.0  # rotation about the grey axis (domain shift)
    dataset_id: str = "synth"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.num_samples >= 1, "num_samples must be >= 1"),
            (self.image_size >= 8, "image_size must be >= 8"),
            (self.num_classes >= 1, "num_classes must be >= 1"),
            (self.radius_min > 0, "radius_min must be positive"),
            (self.radius_max > 0, "radius_max must be positive"),
            (self.radius_min <= self.radius_max, "radius_min must be <= radius_max"),
            (self.radius_max < self.image_size / 2 - 2, "radius_max must be < image_size / 2 - 2"),
            (self.noise >= 0, "noise must be >= 0"),
            (len(self.frequencies) >= self.num_classes, "frequencies needs one entry per class"),
            (len(self.cell_colors) >= self.num_classes, "cell_colors needs one RGB triple per class"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)


BACKGROUND_RGB = np.array([0.87, 0.76, 0.80])


def hue_rotation(degrees):
    """RGB rotation about the (1, 1, 1) axis."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
            [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
            [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
        ]
    )


def disk_mask(size, center, radius):
    ii, jj = np.mgrid[0:size, 0:size]
    return (ii - center[0]) ** 2 + (jj - center[1]) ** 2 <= radius**2


def render_blob(spec, label, center, radius, rng):
    """One synthetic cell image and its mask."""
    size = spec.image_size
    mask = disk_mask(size, center, radius)
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * spec.frequencies[label] * (ii * np.cos(angle) + jj * np.sin(angle)) + phase)
    texture = 1.0 + spec.texture_amplitude * wave
    image = np.broadcast_to(BACKGROUND_RGB, (size, size, 3)).copy()
    image[mask] = np.asarray(spec.cell_colors[label]) * texture[mask][:, None]
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, image.shape)
    if spec.hue_degrees:
        image = image @ hue_rotation(spec.hue_degrees).T
    image = np.clip(image + spec.brightness, 0.0, 1.0)
    return image, mask


def generate_synth(spec, out_dir):
    """Write images/, masks/, manifest.csv and synth_meta.json into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries, meta = [], []
    for i in range(spec.num_samples):
        label = i % spec.num_classes
        radius = rng.uniform(spec.radius_min, spec.radius_max) if spec.radius_max > spec.radius_min else spec.radius_min
        lo, hi = radius + 2.0, spec.image_size - radius - 3.0
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        image, mask = render_blob(spec, label, center, radius, rng)
        sample_id = f"{spec.dataset_id}_{i:04d}"
        save_image(image, out_dir / "images" / f"{sample_id}.png")
        save_mask(mask, out_dir / "masks" / f"{sample_id}.png")
        entries.append(Sample(sample_id, f"images/{sample_id}.png", label, f"masks/{sample_id}.png"))
        meta.append({"id": sample_id, "label": label, "center": list(center), "radius": float(radius)})
    class_names = [f"freq_{f:g}" for f in spec.frequencies[: spec.num_classes]]
    manifest = SampleManifest(entries, spec.dataset_id, class_names, out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    spec_dict = asdict(spec)
    spec_dict["frequencies"] = list(spec.frequencies)
    spec_dict["cell_colors"] = [list(c) for c in spec.cell_colors]
    (out_dir / "synth_meta.json").write_text(json.dumps({"spec": spec_dict, "samples": meta}, indent=1) + "\n")
    log.info("wrote %d synthetic samples to %s", spec.num_samples, out_dir)
    return manifest
