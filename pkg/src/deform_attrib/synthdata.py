"""Synthetic two-class corpus with known ground-truth deformations.

Each subject has an anatomy: a textured elliptical "body" and a brighter
inner "organ". The diseased appearance is the healthy anatomy warped by a
smooth field that shrinks the organ radially and lifts a patch of the
body's lower boundary. Noise is added after warping.

Training subjects contribute a single image (class 0 from healthy subjects,
class 1 from diseased ones). Validation and test subjects contribute a
registered (baseline, diseased) pair with the ground-truth difference
``baseline - diseased`` and an evaluation mask.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore
from .warp import apply_deformation

MANIFEST_COLUMNS = ("subject_id", "class", "split", "image_path", "pair_id", "mask_path", "dx_path")
SPLITS = ("train", "val", "test")


class SpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    size: int = 64
    ndim: int = 2
    n_train_healthy: int = 400
    n_train_diseased: int = 200
    n_val_pairs: int = 60
    n_test_pairs: int = 120
    organ_radius: tuple = (10.0, 12.0)
    shrink: tuple = (0.72, 0.82)
    bump_amplitude: tuple = (2.0, 3.5)
    bump_width: float = 6.0
    body_intensity: tuple = (0.35, 0.45)
    organ_intensity: tuple = (0.8, 0.95)
    texture_amplitude: float = 0.03
    noise_std: float = 0.02
    mask_border: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("organ_radius", "shrink", "bump_amplitude", "body_intensity", "organ_intensity"):
            value = getattr(self, name)
            if isinstance(value, (int, float)):
                value = (float(value), float(value))
            lo, hi = (float(v) for v in value)
            if lo > hi:
                raise SpecError(f"{name}: lower bound {lo} above upper bound {hi}")
            setattr(self, name, (lo, hi))
        self.validate()

    def validate(self) -> None:
        if self.ndim not in (2, 3):
            raise SpecError("ndim must be 2 or 3")
        if self.size < 16:
            raise SpecError("size must be at least 16")
        lo, hi = self.shrink
        if lo <= 0 or hi > 1:
            raise SpecError("shrink factors must lie in (0, 1]")
        # largest organ displacement must stay under half the organ radius
        if self.organ_radius[1] * (1 / lo - 1) >= 0.5 * self.organ_radius[0]:
            raise SpecError(
                f"shrink {lo} displaces the organ edge by more than half its radius"
            )
        if self.bump_amplitude[1] >= self.bump_width:
            raise SpecError("bump amplitude must stay below its width")
        if self.bump_amplitude[0] < 0 or self.noise_std < 0 or self.texture_amplitude < 0:
            raise SpecError("amplitudes and noise must be non-negative")
        if not 0 <= self.mask_border < self.size // 2 - 1:
            raise SpecError("mask_border leaves fewer than 2 pixels")
        if self.organ_radius[1] > self.size * 0.25:
            raise SpecError("organ too large for the image")

    @property
    def shape(self) -> tuple:
        return (self.size,) * self.ndim


@dataclass
class Anatomy:
    body_center: np.ndarray
    body_radii: np.ndarray
    body_intensity: float
    organ_center: np.ndarray
    organ_radius: float
    organ_intensity: float
    texture: list  # (wave vector, phase, amplitude)


@dataclass
class Subject:
    baseline: np.ndarray
    diseased: np.ndarray
    dx: np.ndarray
    mask: np.ndarray
    field: np.ndarray
    noise: np.ndarray


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _grid(shape):
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))


def sample_anatomy(spec: SyntheticSpec, rng: np.random.Generator) -> Anatomy:
    nd, n = spec.ndim, spec.size
    centre = np.full(nd, (n - 1) / 2)
    body_center = centre + rng.uniform(-2, 2, nd)
    body_radii = n * rng.uniform(0.36, 0.42, nd)
    organ_center = centre + rng.uniform(-3, 3, nd)
    organ_center[0] -= n * 0.08  # organ sits above the lower boundary
    texture = []
    for _ in range(3):
        k = rng.normal(0, 1, nd)
        k = k / np.linalg.norm(k) * rng.uniform(0.15, 0.4)
        texture.append((k, rng.uniform(0, 2 * np.pi), spec.texture_amplitude * rng.uniform(0.5, 1)))
    return Anatomy(
        body_center=body_center,
        body_radii=body_radii,
        body_intensity=rng.uniform(*spec.body_intensity),
        organ_center=organ_center,
        organ_radius=rng.uniform(*spec.organ_radius),
        organ_intensity=rng.uniform(*spec.organ_intensity),
        texture=texture,
    )


def render_anatomy(spec: SyntheticSpec, anat: Anatomy) -> np.ndarray:
    """Noise-free image of an anatomy; edges are softened over about one pixel."""
    p = _grid(spec.shape)
    shape_b = (-1,) + (1,) * spec.ndim
    rb = np.sqrt((((p - anat.body_center.reshape(shape_b)) / anat.body_radii.reshape(shape_b)) ** 2).sum(0))
    body = _smoothstep((1 - rb) * anat.body_radii.min() / 1.5 + 0.5)
    tex = sum(a * np.sin(np.tensordot(k, p, axes=1) + ph) for k, ph, a in anat.texture)
    ro = np.sqrt(((p - anat.organ_center.reshape(shape_b)) ** 2).sum(0))
    organ = _smoothstep((anat.organ_radius - ro) / 1.5 + 0.5)
    img = body * (anat.body_intensity + tex) + organ * (anat.organ_intensity - anat.body_intensity)
    return img


def disease_field(spec: SyntheticSpec, anat: Anatomy, rng: np.random.Generator,
                  shrink: float | None = None) -> np.ndarray:
    """Displacement field (pixel units, component axis first) turning healthy into diseased.

    Organ: sampling outward from its centre by ``(1/shrink - 1)`` of the
    radius makes it appear smaller; the factor fades to zero between one
    and two organ radii. Boundary: a Gaussian patch around the lowest point
    of the body samples from further down, which raises the lower edge.
    """
    nd = spec.ndim
    p = _grid(spec.shape)
    shape_b = (-1,) + (1,) * nd
    s = rng.uniform(*spec.shrink) if shrink is None else shrink
    k = 1.0 / s - 1.0
    rel = p - anat.organ_center.reshape(shape_b)
    r = np.sqrt((rel ** 2).sum(0))
    window = 1 - _smoothstep((r - anat.organ_radius) / anat.organ_radius)
    field = k * rel * window

    amp = rng.uniform(*spec.bump_amplitude)
    bump_at = anat.body_center.copy()
    bump_at[0] += anat.body_radii[0]  # lowest point of the body along axis 0
    bump_at[1:] += rng.uniform(-0.4, 0.4, nd - 1) * anat.body_radii[1:]
    d2 = ((p - bump_at.reshape(shape_b)) ** 2).sum(0)
    field[0] += amp * np.exp(-d2 / (2 * spec.bump_width ** 2))
    return field


def generate_subject(spec: SyntheticSpec, rng: np.random.Generator) -> Subject:
    """Baseline and diseased images of one subject, aligned by construction.

    ``diseased = warp(baseline, field) + noise`` is exact in float32, so the
    stored field and noise regenerate the stored diseased image bit for bit.
    """
    anat = sample_anatomy(spec, rng)
    field = disease_field(spec, anat, rng).astype(np.float32)
    baseline = (render_anatomy(spec, anat) + rng.normal(0, spec.noise_std, spec.shape)).astype(np.float32)
    noise = rng.normal(0, spec.noise_std, spec.shape).astype(np.float32)
    diseased = apply_deformation(baseline, field) + noise
    return Subject(
        baseline=baseline,
        diseased=diseased,
        dx=baseline - diseased,
        mask=make_mask(spec),
        field=field,
        noise=noise,
    )


def make_mask(spec: SyntheticSpec) -> np.ndarray:
    mask = np.zeros(spec.shape, dtype=bool)
    b = spec.mask_border
    mask[tuple(slice(b, spec.size - b) for _ in range(spec.ndim))] = True
    return mask


def subject_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


# -- corpus on disk ---------------------------------------------------------

def write_pgm(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """8-bit binary PGM preview of a 2-D array (middle slice for 3-D)."""
    if image.ndim == 3:
        image = image[image.shape[0] // 2]
    scaled = np.clip((image - lo) / (hi - lo), 0, 1)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def spec_to_config(spec: SyntheticSpec) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}


def generate_corpus(spec: SyntheticSpec, out_dir) -> list[dict]:
    """Write images, masks, ground-truth differences and ``manifest.csv``.

    Returns the manifest rows. Output is byte-identical for equal specs.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "dx", "fields", "previews"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []

    def put(name, array):
        diffcore.save_tensor(out / name, array.astype(np.float32))
        return name

    mask_name = put("masks/mask.dft", make_mask(spec))

    for i in range(spec.n_train_healthy):
        rng = subject_rng(spec.seed, "train", i)
        sid = f"train{i:04d}"
        img = render_anatomy(spec, sample_anatomy(spec, rng)) + rng.normal(0, spec.noise_std, spec.shape)
        rows.append(dict(subject_id=sid, **{"class": 0}, split="train",
                         image_path=put(f"images/{sid}_c0.dft", img), pair_id="",
                         mask_path=mask_name, dx_path=""))
    for j in range(spec.n_train_diseased):
        i = spec.n_train_healthy + j
        rng = subject_rng(spec.seed, "train", i)
        sid = f"train{i:04d}"
        subj = generate_subject(spec, rng)
        rows.append(dict(subject_id=sid, **{"class": 1}, split="train",
                         image_path=put(f"images/{sid}_c1.dft", subj.diseased), pair_id="",
                         mask_path=mask_name, dx_path=""))
    for split, count in (("val", spec.n_val_pairs), ("test", spec.n_test_pairs)):
        for i in range(count):
            rng = subject_rng(spec.seed, split, i)
            sid = f"{split}{i:04d}"
            subj = generate_subject(spec, rng)
            pair = f"{sid}_p0"
            dx_name = put(f"dx/{pair}.dft", subj.dx)
            put(f"fields/{pair}.dft", subj.field)
            for cls, img in ((0, subj.baseline), (1, subj.diseased)):
                rows.append(dict(subject_id=sid, **{"class": cls}, split=split,
                                 image_path=put(f"images/{sid}_c{cls}.dft", img), pair_id=pair,
                                 mask_path=mask_name, dx_path=dx_name))
            if i < 8:
                write_pgm(out / "previews" / f"{sid}_c0.pgm", subj.baseline)
                write_pgm(out / "previews" / f"{sid}_c1.pgm", subj.diseased)

    write_manifest(out / "manifest.csv", rows)
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty manifest")
    missing = set(MANIFEST_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    for row in rows:
        row["class"] = int(row["class"])
    return rows


def validate_manifest(rows) -> None:
    """Check pairing and split rules; raises ``ValueError`` on violation."""
    split_of = {}
    pairs: dict[str, list] = {}
    for row in rows:
        sid = row["subject_id"]
        if split_of.setdefault(sid, row["split"]) != row["split"]:
            raise ValueError(f"subject {sid} appears in more than one split")
        if row["split"] == "train" and row["pair_id"]:
            raise ValueError(f"training row for {sid} carries a pair id")
        if row["pair_id"]:
            pairs.setdefault(row["pair_id"], []).append(row)
    for pid, members in pairs.items():
        classes = sorted(r["class"] for r in members)
        subjects = {r["subject_id"] for r in members}
        if classes != [0, 1] or len(subjects) != 1:
            raise ValueError(f"pair {pid} must hold one class-0 and one class-1 image of one subject")


@dataclass
class Corpus:
    """In-memory view of a corpus directory."""

    root: Path
    rows: list
    train0: np.ndarray
    train1: np.ndarray
    val: list
    test: list

    @classmethod
    def load(cls, root) -> "Corpus":
        from .evaluation import PairedSample

        root = Path(root)
        rows = read_manifest(root / "manifest.csv")
        validate_manifest(rows)
        load = lambda name: diffcore.load_tensor(root / name)  # noqa: E731
        train0 = [load(r["image_path"]) for r in rows if r["split"] == "train" and r["class"] == 0]
        train1 = [load(r["image_path"]) for r in rows if r["split"] == "train" and r["class"] == 1]
        splits = {"val": [], "test": []}
        for r in rows:
            if r["split"] in splits and r["class"] == 1:
                splits[r["split"]].append(PairedSample(
                    x1=load(r["image_path"]),
                    dx_true=load(r["dx_path"]),
                    mask=load(r["mask_path"]).astype(bool),
                    subject_id=r["subject_id"],
                    pair_id=r["pair_id"],
                ))
        return cls(
            root=root, rows=rows,
            train0=np.stack(train0) if train0 else np.zeros((0,)),
            train1=np.stack(train1) if train1 else np.zeros((0,)),
            val=splits["val"], test=splits["test"],
        )


def spec_field_names() -> list[str]:
    return [f.name for f in fields(SyntheticSpec)]
