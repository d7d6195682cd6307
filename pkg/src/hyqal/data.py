"""Datasets, PGM I/O, patient-level splits and the synthetic stenosis generator."""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .seeding import rng_for

log = logging.getLogger(__name__)

SPLITS = ("train_unlabeled", "train_labeled", "validation", "test")
_NAME_RE = re.compile(r"^(?P<patient>[^_]+)_(?P<sample>[^_]+)_(?P<label>[^_.]+)\.pgm$")


@dataclass
class Sample:
    image: np.ndarray
    label: Optional[int]
    patient_id: str
    sample_id: str


@dataclass
class Dataset:
    samples: list
    height: int
    width: int

    def __post_init__(self):
        for s in self.samples:
            if s.image.shape != (self.height, self.width):
                raise DataError(f"sample {s.sample_id} has shape {s.image.shape}, expected {(self.height, self.width)}")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return [s.sample_id for s in self.samples]

    @property
    def patients(self):
        return sorted({s.patient_id for s in self.samples})

    def images(self):
        if not self.samples:
            return np.zeros((0, self.height, self.width))
        return np.stack([s.image for s in self.samples])

    def labels(self):
        if any(s.label is None for s in self.samples):
            raise DataError("dataset contains unlabeled samples")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, ids):
        index = {s.sample_id: s for s in self.samples}
        missing = [i for i in ids if i not in index]
        if missing:
            raise DataError(f"{len(missing)} sample id(s) not in dataset, e.g. {missing[0]}")
        return Dataset([index[i] for i in ids], self.height, self.width)

    def strip_labels(self):
        """Copy with every label removed; what the pretraining path receives."""
        return Dataset([replace(s, label=None) for s in self.samples], self.height, self.width)


# -- synthetic generator -------------------------------------------------
@dataclass
class SyntheticConfig:
    count: int = 880
    height: int = 64
    width: int = 64
    patients: int = 44
    stenosis_fraction: float = 0.5
    noise: float = 0.03
    seed: int = 1234

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("data.count must be >= 1")
        if self.patients < 4:
            raise ConfigError("data.patients must be >= 4")
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"synthetic images must be at least 32x32, got {self.height}x{self.width}")
        if not 0.0 <= self.stenosis_fraction <= 1.0:
            raise ConfigError("data.stenosis_fraction must be in [0, 1]")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")


def _spread(total, weights):
    """Integer allocation of ``total`` proportional to ``weights`` (largest remainder, ties by index)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() == 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    rem = int(total - base.sum())
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def _width_profile(t, base, wobble, stenosis):
    w = base * (1.0 + wobble[0] * np.sin(2 * np.pi * wobble[1] * t + wobble[2]))
    if stenosis is not None:
        centre, length, depth = stenosis
        # flat-bottomed narrowing with cosine shoulders, a quarter of the length each
        d = np.abs(t - centre)
        core = length / 4
        shoulder = length / 4
        bump = np.where(d <= core, 1.0, 0.0)
        ramp = (d > core) & (d < core + shoulder)
        bump = np.where(ramp, 0.5 * (1 + np.cos(np.pi * (d - core) / shoulder)), bump)
        w = w * (1.0 - depth * bump)
    return w


STENOSIS_DEPTH = (0.4, 0.7)


def render_vessel(height, width, rng, background, thickness, contrast, noise, stenosis=False):
    """One image: a dark smooth curve on a bright noisy background, values quantised to k/255."""
    size = max(height, width)
    centre = np.array([(height - 1) / 2, (width - 1) / 2])
    phi = rng.uniform(0, np.pi)
    direction = np.array([np.cos(phi), np.sin(phi)])
    normal = np.array([-direction[1], direction[0]])
    shift = rng.uniform(-0.15, 0.15) * size
    span = 1.4 * size
    amp = rng.uniform(0.04, 0.12) * size
    freq = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0, 2 * np.pi)
    wobble = (rng.uniform(0.0, 0.1), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi))
    centre_t = rng.uniform(0.35, 0.65)
    # stenosis length is a fraction of the in-frame length (~ size), i.e. / 1.4 in t units
    length = rng.uniform(0.10, 0.20) / 1.4
    depth = rng.uniform(*STENOSIS_DEPTH)
    grad = rng.normal(0, 0.03, size=2)
    pixel_noise = rng.normal(0, noise, size=(height, width))

    t = np.linspace(0.0, 1.0, 240)
    pts = (centre + shift * normal)[None] + ((t - 0.5) * span)[:, None] * direction[None] \
        + (amp * np.sin(2 * np.pi * freq * t + phase))[:, None] * normal[None]
    sigma = _width_profile(t, thickness, wobble, (centre_t, length, depth) if stenosis else None)
    # projected absorption scales with the lumen diameter, so a narrowing also fades
    fade = sigma / _width_profile(t, thickness, wobble, None)

    yy, xx = np.mgrid[0:height, 0:width]
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    dist, nearest = cKDTree(pts).query(grid)
    dist2 = dist ** 2
    dark = contrast * (fade[nearest] * np.exp(-dist2 / (2 * sigma[nearest] ** 2))).reshape(height, width)

    ramp = grad[0] * (yy - centre[0]) / size + grad[1] * (xx - centre[1]) / size
    img = background + ramp - dark + pixel_noise
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def generate_synthetic(cfg: SyntheticConfig, seed=None) -> Dataset:
    """Deterministic vessel/stenosis dataset; ``seed`` overrides ``cfg.seed``."""
    seed = cfg.seed if seed is None else seed
    rng = rng_for(seed, "synthetic", "layout")
    counts = _spread(cfg.count, np.ones(cfg.patients))
    positives = round(cfg.stenosis_fraction * cfg.count)
    pos_per_patient = _spread(positives, counts)

    samples = []
    index = 0
    for p in range(cfg.patients):
        pid = f"P{p:03d}"
        prng = rng_for(seed, "synthetic", "patient", p)
        background = prng.uniform(0.55, 0.8)
        thickness = prng.uniform(1.6, 2.6)
        contrast = prng.uniform(0.3, 0.45)
        labels = np.zeros(counts[p], dtype=np.int64)
        labels[:pos_per_patient[p]] = 1
        rng.shuffle(labels)
        for lab in labels:
            srng = rng_for(seed, "synthetic", "sample", index)
            img = render_vessel(cfg.height, cfg.width, srng, background, thickness, contrast, cfg.noise,
                                stenosis=bool(lab))
            samples.append(Sample(img, int(lab), pid, f"S{index:05d}"))
            index += 1
    return Dataset(samples, cfg.height, cfg.width)


# -- patient-level splitting ---------------------------------------------
@dataclass
class SplitManifest:
    train_unlabeled: list
    train_labeled: list
    validation: list
    test: list
    seed: int
    ratios: list
    patients: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self):
        return {"seed": self.seed, "ratios": list(self.ratios), "patients": self.patients,
                **{name: list(self.split(name)) for name in SPLITS}}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**{name: list(d[name]) for name in SPLITS}, seed=d["seed"],
                       ratios=list(d["ratios"]), patients=d.get("patients", {}))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed split manifest: {exc}") from None

    def validate(self, dataset: Dataset):
        """Check sample and patient disjointness against ``dataset``; raises DataError."""
        owner = {s.sample_id: s.patient_id for s in dataset.samples}
        seen_ids, seen_patients = {}, {}
        for name in SPLITS:
            for sid in self.split(name):
                if sid not in owner:
                    raise DataError(f"manifest sample {sid} not in dataset")
                if sid in seen_ids:
                    raise DataError(f"sample {sid} in both {seen_ids[sid]} and {name}")
                seen_ids[sid] = name
                pid = owner[sid]
                if seen_patients.setdefault(pid, name) != name:
                    raise DataError(f"patient {pid} in both {seen_patients[pid]} and {name}")


def _normalise_ratios(ratios):
    if isinstance(ratios, dict):
        unknown = set(ratios) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown split name(s) {sorted(unknown)}")
        vals = [float(ratios.get(n, 0.0)) for n in SPLITS]
    else:
        vals = [float(r) for r in ratios]
        if len(vals) == 3:
            # (train, validation, test) without a labeled training subset
            vals = [vals[0], 0.0, vals[1], vals[2]]
        elif len(vals) != 4:
            raise ConfigError(f"ratios must have 3 or 4 entries, got {len(vals)}")
    if any(v < 0 for v in vals) or sum(vals) <= 0:
        raise ConfigError(f"ratios must be non-negative with a positive sum, got {vals}")
    total = sum(vals)
    return [v / total for v in vals]


DEFAULT_RATIOS = (30, 5, 3, 6)


def split_by_patient(dataset: Dataset, ratios=DEFAULT_RATIOS, seed=0, max_labeled_ratio=0.2) -> SplitManifest:
    """Partition patients (not samples) into the four splits.

    ``ratios`` are patient fractions for (train_unlabeled, train_labeled,
    validation, test), or (train, validation, test), or a mapping by split
    name; they are normalised to sum to one.
    """
    fractions = _normalise_ratios(ratios)
    patients = dataset.patients
    if len(patients) < 4:
        raise DataError(f"need at least 4 distinct patients to split, got {len(patients)}")
    counts = _spread(len(patients), fractions)
    starved = [SPLITS[i] for i, f in enumerate(fractions) if f > 0 and counts[i] == 0]
    if starved:
        raise DataError(f"{len(patients)} patients cannot fill split(s) {', '.join(starved)}")
    order = list(patients)
    rng_for(seed, "split").shuffle(order)
    assign, start = {}, 0
    for name, n in zip(SPLITS, counts):
        for pid in order[start:start + n]:
            assign[pid] = name
        start += n
    buckets = {name: [] for name in SPLITS}
    for s in dataset.samples:
        buckets[assign[s.patient_id]].append(s.sample_id)
    if buckets["train_labeled"] and len(buckets["train_labeled"]) > max_labeled_ratio * len(buckets["train_unlabeled"]):
        raise ConfigError(
            f"labeled split ({len(buckets['train_labeled'])}) exceeds {max_labeled_ratio} x unlabeled "
            f"({len(buckets['train_unlabeled'])})")
    per_split = {name: sorted(p for p, n in assign.items() if n == name) for name in SPLITS}
    return SplitManifest(**buckets, seed=seed, ratios=fractions, patients=per_split)


# -- PGM -----------------------------------------------------------------
def _header_tokens(buf, filename, count):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise DataError("truncated PGM header", filename, pos)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    return tokens, pos


def parse_pgm(buf: bytes, filename="<bytes>"):
    """Decode a P2 or P5 PGM; returns ``(image in [0,1], maxval)``."""
    magic = _header_tokens(buf, filename, 1)[0][0][0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"not a PGM (magic {magic[:2]!r})", filename, 0)
    tokens, pos = _header_tokens(buf, filename, 4)
    values = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise DataError(f"bad header field {tok[:16]!r}", filename, off)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DataError("image dimensions must be positive", filename, tokens[1][1])
    if not 1 <= maxval <= 65535:
        raise DataError(f"maxval {maxval} out of range", filename, tokens[3][1])
    npix = width * height
    if magic == b"P5":
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise DataError("missing whitespace after maxval", filename, pos)
        pos += 1
        nbytes = 2 if maxval > 255 else 1
        need = npix * nbytes
        if len(buf) - pos < need:
            raise DataError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", filename, len(buf))
        raw = np.frombuffer(buf, dtype=">u2" if nbytes == 2 else np.uint8, count=npix, offset=pos)
        pix = raw.astype(np.int64)
    else:
        body = buf[pos:]
        fields = body.split()
        if len(fields) < npix:
            raise DataError(f"raster truncated: need {npix} samples, have {len(fields)}", filename, len(buf))
        try:
            pix = np.array([int(f) for f in fields[:npix]], dtype=np.int64)
        except ValueError:
            bad = next(f for f in fields[:npix] if not f.isdigit())
            raise DataError(f"non-numeric sample {bad[:16]!r}", filename, pos + body.find(bad)) from None
    if pix.max(initial=0) > maxval:
        raise DataError(f"sample exceeds maxval {maxval}", filename, pos)
    return pix.reshape(height, width) / maxval, maxval


def read_pgm(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", str(path)) from None
    return parse_pgm(buf, path.name)


def encode_pgm(image, maxval=255, binary=True, comment=None) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"PGM images must be 2-D, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise DataError("PGM pixel values must lie in [0, 1]")
    pix = np.round(img * maxval).astype(np.int64)
    h, w = img.shape
    header = ("P5" if binary else "P2") + "\n"
    if comment:
        header += "".join(f"# {line}\n" for line in str(comment).splitlines())
    header += f"{w} {h}\n{maxval}\n"
    if binary:
        body = pix.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    else:
        body = ("\n".join(" ".join(str(v) for v in row) for row in pix) + "\n").encode()
    return header.encode() + body


def write_pgm(path, image, maxval=255, binary=True, comment=None):
    Path(path).write_bytes(encode_pgm(image, maxval, binary, comment))


def sample_filename(sample: Sample):
    label = "u" if sample.label is None else str(sample.label)
    return f"{sample.patient_id}_{sample.sample_id}_{label}.pgm"


def save_image_dir(dataset: Dataset, path, comment=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_pgm(path / sample_filename(s), s.image, comment=comment)


def load_image_dir(path) -> Dataset:
    """Load ``<patient>_<sample>_<0|1|u>.pgm`` files, sorted by filename."""
    path = Path(path)
    if not path.is_dir():
        raise DataError("not a directory", str(path))
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
    if not names:
        raise DataError("no .pgm files found", str(path))
    samples, seen = [], set()
    for name in names:
        m = _NAME_RE.match(name)
        if not m:
            raise DataError("filename must be <patient>_<sample>_<label|u>.pgm", name)
        token = m["label"]
        if token not in ("0", "1", "u"):
            raise DataError(f"unknown label token {token!r}", name)
        if m["sample"] in seen:
            raise DataError(f"duplicate sample id {m['sample']!r}", name)
        seen.add(m["sample"])
        img, _ = read_pgm(path / name)
        samples.append(Sample(img, None if token == "u" else int(token), m["patient"], m["sample"]))
    h, w = samples[0].image.shape
    for s, name in zip(samples, names):
        if s.image.shape != (h, w):
            raise DataError(f"image size {s.image.shape} differs from {(h, w)}", name)
    return Dataset(samples, h, w)


def save_manifest(manifest: SplitManifest, path, extra=None):
    d = manifest.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> SplitManifest:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc.strerror}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON ({exc.msg})", str(path), exc.pos) from None
    return SplitManifest.from_dict(d)


def class_balance(dataset: Dataset):
    labels = dataset.labels()
    return int((labels == 0).sum()), int((labels == 1).sum())


def linear_probe_auc(train: Dataset, test: Dataset, l2=10.0):
    """AUC of a ridge-regularised least-squares probe on raw pixels (task-difficulty check)."""
    from .evaluation import roc_auc

    xtr = train.images().reshape(len(train), -1)
    xte = test.images().reshape(len(test), -1)
    mu = xtr.mean(axis=0)
    xtr, xte = xtr - mu, xte - mu
    y = train.labels() * 2.0 - 1.0
    # dual form: n_train << n_pixels
    w = xtr.T @ np.linalg.solve(xtr @ xtr.T + l2 * np.eye(len(xtr)), y)
    auc, _ = roc_auc(test.labels(), xte @ w)
    return auc

