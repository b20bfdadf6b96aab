"""Procedural two-modality segmentation scenes.

Each scene holds four structures on a background: a round vessel, an
atrium-like ellipse, a ventricle-like ellipse and a thin myocardium-like
annulus wrapped around the ventricle. Geometry is drawn independently of
the modality, so one geometry rendered through two intensity transforms
gives two images with the identical mask.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from protoalign.errors import ConfigError, GenerationError, LabelLeakageError
from protoalign.tensor import ntsr

CLASS_NAMES = ("background", "vessel", "atrium", "ventricle", "myocardium")
DOMAINS = ("source", "target")
SPLITS = ("train", "test")

# (domain, split) -> number of label files read; the trainer's leakage guard audits this.
LABEL_READS: Counter = Counter()


def thread_count() -> int:
    env = os.environ.get("PROTOALIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("PROTOALIGN_THREADS", f"not an integer: {env!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class SceneSpec:
    """Geometry ranges in pixels; centres are given as fractions of the image size."""

    size: int = 64
    n_classes: int = 5
    vessel_center: tuple = (0.28, 0.30)
    vessel_radius: tuple = (3.5, 5.5)
    atrium_center: tuple = (0.30, 0.70)
    atrium_axes: tuple = (5.0, 9.0)
    ventricle_center: tuple = (0.68, 0.45)
    ventricle_axes: tuple = (6.0, 9.5)
    myo_thickness: tuple = (1.5, 2.5)
    jitter: float = 0.07
    gap: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.n_classes != len(CLASS_NAMES):
            raise ConfigError("n_classes", f"scenes always contain {len(CLASS_NAMES)} classes")
        if self.size < 16:
            raise ConfigError("size", "images must be at least 16 pixels wide")
        for name in ("vessel_radius", "atrium_axes", "ventricle_axes", "myo_thickness"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ConfigError(name, f"invalid range ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class ModalityTransform:
    """How a label map becomes an image in one modality.

    ``intensities`` are per-class base grey levels, background first.
    ``invert`` reverses the brightness ranking of the foreground structures
    (the brightest takes the darkest level and so on) while the background
    keeps its level, so structures swap contrast but air stays dark.
    """

    intensities: tuple = (0.15, 0.85, 0.70, 0.55, 0.35)
    invert: bool = False
    bias_amplitude: float = 0.1
    noise_sigma: float = 0.04
    blur_sigma: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        if self.bias_amplitude < 0 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("transform", "amplitudes must be nonnegative")

    @classmethod
    def source_default(cls) -> "ModalityTransform":
        return cls()

    @classmethod
    def target_default(cls) -> "ModalityTransform":
        return cls(invert=True, bias_amplitude=0.3, noise_sigma=0.08)

    def levels(self) -> np.ndarray:
        v = np.asarray(self.intensities, dtype=np.float64)
        if not self.invert:
            return v
        fg = v[1:]
        order = np.argsort(fg, kind="stable")
        out = v.copy()
        out[1 + order] = fg[order[::-1]]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensities"] = list(self.intensities)
        return d


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def sample_geometry(spec: SceneSpec, seed: int, index: int, max_tries: int = 200) -> np.ndarray:
    """Integer label map (size, size) for scene ``index`` of stream ``seed``."""
    if spec.myo_thickness[0] < 1.0:
        raise GenerationError("myocardium annulus thinner than one pixel")
    rng = _stream(seed, index, 0)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(max_tries):
        def centre(frac):
            return (n * (frac[0] + rng.uniform(-spec.jitter, spec.jitter)),
                    n * (frac[1] + rng.uniform(-spec.jitter, spec.jitter)))

        vy, vx = centre(spec.vessel_center)
        vessel = _ellipse(yy, xx, vy, vx, *([rng.uniform(*spec.vessel_radius)] * 2), 0.0)
        ay, ax = centre(spec.atrium_center)
        atrium = _ellipse(yy, xx, ay, ax, rng.uniform(*spec.atrium_axes),
                          rng.uniform(*spec.atrium_axes), rng.uniform(0, np.pi))
        ly, lx = centre(spec.ventricle_center)
        r1, r2 = rng.uniform(*spec.ventricle_axes), rng.uniform(*spec.ventricle_axes)
        theta = rng.uniform(0, np.pi)
        t = rng.uniform(*spec.myo_thickness)
        ventricle = _ellipse(yy, xx, ly, lx, r1, r2, theta)
        outer = _ellipse(yy, xx, ly, lx, r1 + t, r2 + t, theta)
        myo = outer & ~ventricle

        masks = [vessel, atrium, outer]
        grown = [ndimage.binary_dilation(m, iterations=int(np.ceil(spec.gap))) if spec.gap > 0 else m
                 for m in masks]
        overlap = any((grown[i] & masks[j]).any() for i in range(3) for j in range(3) if i != j)
        inside = all(m[0, :].sum() + m[-1, :].sum() + m[:, 0].sum() + m[:, -1].sum() == 0 for m in masks)
        if overlap or not inside or not myo.any() or not ventricle.any():
            continue
        labels = np.zeros((n, n), dtype=np.uint8)
        labels[vessel] = 1
        labels[atrium] = 2
        labels[ventricle] = 3
        labels[myo] = 4
        return labels
    raise GenerationError(f"could not place non-overlapping structures in {max_tries} tries")


def _bias_field(rng, n):
    yy, xx = np.mgrid[-1:1:complex(0, n), -1:1:complex(0, n)]
    a, b, c, d = rng.uniform(-1, 1, size=4)
    field = a * xx + b * yy + c * xx * yy + d * (xx ** 2 - yy ** 2)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def render(labels: np.ndarray, transform: ModalityTransform, rng: np.random.Generator) -> np.ndarray:
    """Grey-level image (size, size) of a label map under ``transform``."""
    img = transform.levels()[labels]
    if transform.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, transform.blur_sigma, mode="nearest")
    if transform.bias_amplitude > 0:
        img = img * (1.0 + transform.bias_amplitude * _bias_field(rng, labels.shape[0]))
    if transform.noise_sigma > 0:
        img = img + rng.normal(0.0, transform.noise_sigma, size=img.shape)
    return img


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return (labels[..., None] == np.arange(n_classes)).astype(np.uint8)


@dataclass
class Dataset:
    images: np.ndarray     # (n, H, W, 1) float64
    labels: np.ndarray     # (n, H, W, N_c) uint8 one-hot
    manifest: dict = field(default_factory=dict)


def class_frequencies(labels: np.ndarray) -> list[float]:
    counts = labels.reshape(-1, labels.shape[-1]).sum(axis=0).astype(np.float64)
    return list(counts / counts.sum())


def generate(spec: SceneSpec, transform: ModalityTransform, n: int, seed: int,
             split: str = "train", threads: int | None = None) -> Dataset:
    """``n`` scenes; sample ``i`` depends only on ``(seed, i)``, never on thread count."""
    if n < 1:
        raise ConfigError("n", "need at least one sample")

    def one(i):
        lab = sample_geometry(spec, seed, i)
        img = render(lab, transform, _stream(seed, i, 1))
        return img, lab

    workers = threads or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    images = np.stack([r[0] for r in results])[..., None]
    labels = one_hot(np.stack([r[1] for r in results]), spec.n_classes)
    manifest = {
        "split": split,
        "count": n,
        "seed": seed,
        "files": [[f"img_{i:05d}.ntsr", f"lbl_{i:05d}.ntsr"] for i in range(n)],
        "class_frequencies": class_frequencies(labels),
        "class_names": list(CLASS_NAMES),
    }
    return Dataset(images, labels, manifest)


def split_seed(seed: int, domain: str, split: str) -> int:
    """Independent per-(domain, split) seed derived from the master seed."""
    ss = np.random.SeedSequence([seed, DOMAINS.index(domain), SPLITS.index(split)])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class SynthConfig:
    scene: SceneSpec = SceneSpec()
    source: ModalityTransform = ModalityTransform.source_default()
    target: ModalityTransform = ModalityTransform.target_default()
    n_train: int = 160
    n_test: int = 40
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {"scene", "source", "target", "n_train", "n_test", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        try:
            return cls(
                scene=SceneSpec(**d.get("scene", {})),
                source=ModalityTransform(**d.get("source", ModalityTransform.source_default().to_dict())),
                target=ModalityTransform(**d.get("target", ModalityTransform.target_default().to_dict())),
                n_train=int(d.get("n_train", cls.n_train)),
                n_test=int(d.get("n_test", cls.n_test)),
                seed=int(d.get("seed", cls.seed)),
            )
        except TypeError as exc:
            raise ConfigError("spec", str(exc)) from None

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "source": self.source.to_dict(),
                "target": self.target.to_dict(), "n_train": self.n_train,
                "n_test": self.n_test, "seed": self.seed}


def write_split(ds: Dataset, root, domain: str, split: str) -> Path:
    out = Path(root) / domain / split
    out.mkdir(parents=True, exist_ok=True)
    for i in range(ds.images.shape[0]):
        ntsr.save(out / f"img_{i:05d}.ntsr", ds.images[i])
        ntsr.save(out / f"lbl_{i:05d}.ntsr", ds.labels[i])
    manifest = dict(ds.manifest, domain=domain)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def synthesize(root, cfg: SynthConfig, threads: int | None = None) -> list[Path]:
    """Write train/test splits of both domains under ``root``."""
    written = []
    for domain, transform in (("source", cfg.source), ("target", cfg.target)):
        for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
            ds = generate(cfg.scene, transform, n, split_seed(cfg.seed, domain, split), split, threads)
            written.append(write_split(ds, root, domain, split))
    (Path(root) / "synth.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return written


def _manifest(root, domain, split) -> dict:
    path = Path(root) / domain / split / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset split at {path.parent}")
    return json.loads(path.read_text())


def read_images(root, domain: str, split: str) -> np.ndarray:
    m = _manifest(root, domain, split)
    base = Path(root) / domain / split
    return np.stack([ntsr.load(base / img) for img, _ in m["files"]])


def read_labels(root, domain: str, split: str) -> np.ndarray:
    m = _manifest(root, domain, split)
    base = Path(root) / domain / split
    LABEL_READS[(domain, split)] += 1
    return np.stack([ntsr.load(base / lbl) for _, lbl in m["files"]])


class SplitReader:
    """Lazy access to one split; label access can be forbidden."""

    def __init__(self, root, domain: str, split: str, allow_labels: bool = True):
        self.root, self.domain, self.split = Path(root), domain, split
        self.allow_labels = allow_labels
        self._images = None
        self._labels = None

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = read_images(self.root, self.domain, self.split)
        return self._images

    @property
    def labels(self) -> np.ndarray:
        if not self.allow_labels:
            raise LabelLeakageError(f"labels of {self.domain}/{self.split} are off limits in this run")
        if self._labels is None:
            self._labels = read_labels(self.root, self.domain, self.split)
        return self._labels


def directory_checksum(root) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
