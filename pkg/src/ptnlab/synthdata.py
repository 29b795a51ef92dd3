"""Synthetic multi-site, multi-reader phantom datasets.

Each case has a true parenchyma fraction ``p``.  Four views are rendered
per case, distorted by the tone curve of the site that acquired them, and
graded by a reader whose thresholds may be biased against the gold reader.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

GRADES = "abcd"
SPLITS = ("D_r", "D_s", "val", "test")
BASE_THRESHOLDS = (0.25, 0.50, 0.75)
FAT_LEVEL = 0.35
DENSE_LEVEL = 0.75
NOISE_SD = 0.02
EXPOSURE_JITTER = 0.4
MANIFEST_FIELDS = ["case_id", "view_id", "image_path", "site_id", "reader_id", "grade",
                   "gold_grade", "split", "window_u", "window_v", "density"]


@dataclass
class Phantom:
    image: np.ndarray
    density: float
    site_id: int
    case_id: int
    view_id: int
    mask: np.ndarray
    parenchyma: np.ndarray

    def measured_fraction(self):
        return float(self.parenchyma[self.mask].mean()) if self.mask.any() else 0.0


@dataclass(frozen=True)
class SiteModel:
    site_id: int
    gamma: float
    gain: float
    offset: float

    def __post_init__(self):
        if self.gamma <= 0 or self.gain <= 0:
            raise ValueError(f"site {self.site_id}: gamma and gain must be positive")

    @property
    def window(self):
        """Nominal window (u, v): the image of the [0, 1] tissue range under the tone curve."""
        return self.offset, self.offset + self.gain


@dataclass(frozen=True)
class ReaderModel:
    reader_id: int
    offsets: tuple = (0.0, 0.0, 0.0)
    noise: float = 0.0
    gold: bool = False

    def __post_init__(self):
        th = self.thresholds
        if not (th[0] < th[1] < th[2]):
            raise ValueError(f"reader {self.reader_id}: shifted thresholds must increase, got {th}")

    @property
    def thresholds(self):
        return tuple(b + o for b, o in zip(BASE_THRESHOLDS, self.offsets))


@dataclass
class SplitCounts:
    D_r: int = 360
    D_s: int = 60
    val: int = 80
    test: int = 100

    def as_dict(self):
        return {"D_r": self.D_r, "D_s": self.D_s, "val": self.val, "test": self.test}


@dataclass
class ManifestRecord:
    case_id: int
    view_id: int
    image_path: str
    site_id: int
    reader_id: int
    grade: str
    gold_grade: str
    split: str
    window_u: float
    window_v: float
    density: float


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def cases(self, name):
        return sorted({r.case_id for r in self.records if r.split == name})

    def validate(self):
        ds = {r.case_id for r in self.records if r.split == "D_s"}
        dr = {r.case_id for r in self.records if r.split == "D_r"}
        if ds & dr:
            raise ValueError("D_s and D_r share cases")
        for r in self.records:
            if r.split in ("D_s", "val") and not r.gold_grade:
                raise ValueError(f"case {r.case_id} in {r.split} has no gold grade")
            if not (self.root / r.image_path).exists():
                raise FileNotFoundError(self.root / r.image_path)


def default_sites():
    return [SiteModel(0, 0.55, 0.80, 0.15), SiteModel(1, 1.0, 1.0, 0.0), SiteModel(2, 1.8, 0.90, 0.05)]


def default_readers():
    """One gold reader and three readers who call density higher than gold does."""
    return [
        ReaderModel(0, (0.0, 0.0, 0.0), 0.0, gold=True),
        ReaderModel(1, (-0.07, -0.06, -0.04), 0.03),
        ReaderModel(2, (-0.04, -0.08, -0.05), 0.03),
        ReaderModel(3, (-0.10, -0.04, -0.02), 0.03),
    ]


# ---------------------------------------------------------------------------
# rendering


def _breast_mask(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cy = size * rng.uniform(0.45, 0.55)
    ry = size * rng.uniform(0.38, 0.46)
    rx = size * rng.uniform(0.68, 0.80)
    return ((yy - cy) / ry) ** 2 + (xx / rx) ** 2 <= 1.0


def generate_phantom(p, seed, size=64, site_id=0, case_id=0, view_id=1):
    """Render one view with parenchyma covering fraction ``p`` of the breast mask."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"density fraction must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    mask = _breast_mask(size, rng)
    field_ = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    n_mask = int(mask.sum())
    n_dense = int(round(p * n_mask))
    parenchyma = np.zeros_like(mask)
    if n_dense:
        inside = np.flatnonzero(mask)
        order = np.argsort(-field_.ravel()[inside], kind="stable")
        parenchyma.ravel()[inside[order[:n_dense]]] = True
    image = np.where(parenchyma, DENSE_LEVEL, FAT_LEVEL)
    image = image + NOISE_SD * rng.standard_normal((size, size))
    image = np.where(mask, np.clip(image, 0.02, 1.0), 0.0)
    return Phantom(image, float(p), site_id, case_id, view_id, mask, parenchyma)


def apply_site(x, site: SiteModel):
    """Tone curve ``gain * x**gamma + offset`` inside the breast; background stays zero."""
    x = np.asarray(x, dtype=float)
    out = site.gain * np.power(np.clip(x, 0.0, None), site.gamma) + site.offset
    return np.where(x > 0, out, 0.0)


def assign_grade(p, reader: ReaderModel, seed=None):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"density fraction must be in [0, 1], got {p}")
    noisy = p
    if reader.noise > 0:
        noisy = p + reader.noise * np.random.default_rng(seed).standard_normal()
    return GRADES[int(np.searchsorted(reader.thresholds, noisy, side="right"))]


def grade_index(grade):
    return GRADES.index(grade)


def sample_density(rng):
    """Mixture leaning to the middle of the range, like clinical cohorts skewed to grades b/c."""
    if rng.uniform() < 0.75:
        return float(rng.beta(3.0, 2.6))
    return float(rng.uniform())


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(path, image):
    """16-bit binary PGM; intensities in [0, 1] are scaled to 0..65535."""
    arr = np.round(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return arr.astype(float) / maxval


# ---------------------------------------------------------------------------
# dataset assembly


def jitter_site(site: SiteModel, rng, jitter):
    """Per-acquisition exposure variation around a site's nominal tone curve."""
    if jitter <= 0:
        return site
    return SiteModel(site.site_id, site.gamma * float(np.exp(0.5 * jitter * rng.standard_normal())),
                     site.gain * float(np.exp(jitter * rng.standard_normal())),
                     site.offset + 0.3 * jitter * float(rng.standard_normal()))


def build_dataset(out_dir, counts: SplitCounts | dict | None = None, sites=None, readers=None,
                  seed=0, size=64, exposure_jitter=EXPOSURE_JITTER, site_windows=False):
    """Render every split to ``out_dir`` and write ``manifest.csv``; returns the manifest.

    Each view is acquired with its site's tone curve perturbed by
    ``exposure_jitter``.  The manifest window is the global (0, 1) by
    default; with ``site_windows`` it is the site's nominal window, which
    only partly undoes the distortion.
    """
    counts = SplitCounts(**counts) if isinstance(counts, dict) else (counts or SplitCounts())
    sites = sites or default_sites()
    readers = readers or default_readers()
    per_split = counts.as_dict()
    for name, n in per_split.items():
        if n < 1:
            raise ValueError(f"split {name} needs at least one case, got {n}")
    gold = [r for r in readers if r.gold]
    if not gold:
        raise ValueError("at least one gold reader is required")
    if not sites:
        raise ValueError("at least one site is required")
    gold = gold[0]
    others = [r for r in readers if not r.gold] or [gold]

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=out_dir)
    case_id = 0
    for split in SPLITS:
        for _ in range(per_split[split]):
            rng = np.random.default_rng([seed, case_id, 1])
            p = sample_density(rng)
            site = sites[int(rng.integers(len(sites)))]
            gold_grade = assign_grade(p, gold, [seed, case_id, 2])
            if split == "D_r":
                reader = others[int(rng.integers(len(others)))]
                grade = assign_grade(p, reader, [seed, case_id, 3])
                recorded_gold = ""
            else:
                reader, grade, recorded_gold = gold, gold_grade, gold_grade
            u, v = site.window if site_windows else (0.0, 1.0)
            for view in range(1, 5):
                ph = generate_phantom(p, [seed, case_id, 10 + view], size, site.site_id, case_id, view)
                acq = jitter_site(site, np.random.default_rng([seed, case_id, 20 + view]), exposure_jitter)
                rel = f"images/case{case_id:05d}_v{view}.pgm"
                stored = np.where(ph.mask, np.clip(apply_site(ph.image, acq), 0.005, 1.0), 0.0)
                write_pgm(out_dir / rel, stored)
                manifest.records.append(ManifestRecord(
                    case_id, view, rel, site.site_id, reader.reader_id, grade, recorded_gold,
                    split, u, v, p))
            case_id += 1
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.case_id, r.view_id, r.image_path, r.site_id, r.reader_id, r.grade,
                        r.gold_grade, r.split, repr(r.window_u), repr(r.window_v), repr(r.density)])


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ManifestRecord(
                int(row["case_id"]), int(row["view_id"]), row["image_path"], int(row["site_id"]),
                int(row["reader_id"]), row["grade"], row["gold_grade"], row["split"],
                float(row["window_u"]), float(row["window_v"]),
                float(row["density"]) if row.get("density") else math.nan))
    return DatasetManifest(records, path.parent)


@dataclass
class SplitData:
    """Arrays for one split, one row per view."""

    images: np.ndarray
    windows: np.ndarray
    labels: np.ndarray
    gold: np.ndarray
    case_ids: np.ndarray
    view_ids: np.ndarray
    site_ids: np.ndarray
    density: np.ndarray

    def __len__(self):
        return len(self.images)

    def subset(self, index):
        return SplitData(*(getattr(self, f)[index] for f in self.__dataclass_fields__))


def one_hot(indices, n=4):
    out = np.zeros((len(indices), n))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def load_split(manifest: DatasetManifest, splits) -> SplitData:
    """Load the views of one or more splits.  ``gold`` is -1 where no gold grade exists."""
    splits = (splits,) if isinstance(splits, str) else tuple(splits)
    recs = [r for r in manifest.records if r.split in splits]
    if not recs:
        raise ValueError(f"no records for split(s) {splits}")
    return SplitData(
        images=np.stack([read_pgm(manifest.root / r.image_path) for r in recs]),
        windows=np.array([[r.window_u, r.window_v] for r in recs]),
        labels=one_hot([grade_index(r.grade) for r in recs]),
        gold=np.array([grade_index(r.gold_grade) if r.gold_grade else -1 for r in recs]),
        case_ids=np.array([r.case_id for r in recs]),
        view_ids=np.array([r.view_id for r in recs]),
        site_ids=np.array([r.site_id for r in recs]),
        density=np.array([r.density for r in recs]),
    )


def disagreement_rate(manifest: DatasetManifest, readers=None):
    """Fraction of D_r cases whose recorded grade differs from the gold reader's grade."""
    readers = readers or default_readers()
    gold = next(r for r in readers if r.gold)
    seen = {}
    for r in manifest.split("D_r"):
        seen[r.case_id] = r.grade != assign_grade(r.density, gold)
    return sum(seen.values()) / len(seen) if seen else 0.0


def summary_table(manifest: DatasetManifest):
    """Per-split case counts by grade, like a dataset-configuration table."""
    lines = [f"{'split':<6} " + " ".join(f"{g:>5}" for g in GRADES) + f" {'total':>6}"]
    for split in SPLITS:
        grades = {}
        for r in manifest.split(split):
            grades[r.case_id] = r.grade
        row = [sum(1 for g in grades.values() if g == gg) for gg in GRADES]
        lines.append(f"{split:<6} " + " ".join(f"{c:>5}" for c in row) + f" {sum(row):>6}")
    return "\n".join(lines)
