"""Synthetic two-modality identity dataset plus PK batch sampling.

Each identity is a procedural figure (head/torso/legs rectangles and an
ellipse) with fixed body proportions, clothing albedos and a small logo
patch. Colour renders keep the full RGB albedo; infrared renders collapse
each albedo to a fixed luminance combination times a per-identity
emissivity factor, replicated across channels. Hue is therefore a colour-
only cue by construction: distinct albedos with equal luminance are nearly
indistinguishable in the infrared rendering.

The retrieval protocol is single-shot: all infrared images of held-out
identities are probes; the gallery holds exactly one colour image per
held-out identity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .rng import derive_rng

IMAGE_HW = (96, 48)
IR_WEIGHTS = np.array([0.299, 0.587, 0.114])
NOISE_SIGMA = 0.02
BACKGROUND = 0.12
N_COLOUR_CAMERAS = 3
N_IR_CAMERAS = 2

SPLITS = ("train", "query", "gallery", "test")


def luminance(rgb: np.ndarray) -> float:
    """Fixed weighted sum mapping an albedo to its infrared intensity."""
    return float(IR_WEIGHTS @ np.asarray(rgb, dtype=np.float64))


@dataclass
class SyntheticIdentity:
    identity: int
    latent: dict


@dataclass
class Sample:
    image: np.ndarray          # (3, 96, 48) in [0, 1]
    identity: int
    modality: int              # 0 colour, 1 infrared
    camera: int


def sample_latent(rng: np.random.Generator) -> dict:
    """Draw one identity's geometry and appearance attributes."""
    shirt = rng.uniform(0.08, 0.95, size=3)
    # The logo must contrast with the shirt in luminance so it survives the
    # infrared collapse (a cross-modal signature, not a hue-only one).
    while True:
        logo = rng.uniform(0.08, 0.95, size=3)
        if abs(luminance(logo) - luminance(shirt)) >= 0.15:
            break
    return {
        "head_cx": rng.uniform(0.44, 0.56),
        "head_cy": rng.uniform(0.10, 0.16),
        "head_rx": rng.uniform(0.07, 0.13),
        "head_ry": rng.uniform(0.06, 0.11),
        "shoulder": rng.uniform(0.26, 0.46),
        "torso_bot": rng.uniform(0.50, 0.62),
        "leg_width": rng.uniform(0.09, 0.17),
        "leg_gap": rng.uniform(0.02, 0.10),
        "leg_bot": rng.uniform(0.88, 0.97),
        "skin": rng.uniform(0.6, 1.1) * np.array([0.72, 0.55, 0.42]),
        "shirt": shirt,
        "pants": rng.uniform(0.08, 0.95, size=3),
        "logo": logo,
        "logo_u": rng.uniform(0.20, 0.80),
        "logo_v": rng.uniform(0.15, 0.70),
        "logo_w": rng.uniform(0.12, 0.30),
        "logo_h": rng.uniform(0.10, 0.25),
        "emissivity": 1.0 + rng.uniform(-0.06, 0.06),
    }


def _paint_rect(img, albedo, y0, y1, x0, x1):
    h, w = img.shape[1:]
    y0, y1 = max(0, y0), min(h, y1)
    x0, x1 = max(0, x0), min(w, x1)
    if y0 < y1 and x0 < x1:
        img[:, y0:y1, x0:x1] = albedo[:, None, None]


def render(
    latent: dict,
    modality: int,
    brightness: float,
    rng: np.random.Generator,
    red_channel_fake_ir: bool = False,
) -> np.ndarray:
    """Rasterize one sample: regions, camera brightness, jitter, noise."""
    h, w = IMAGE_HW
    dx = int(rng.integers(-2, 3))
    dy = int(rng.integers(-2, 3))

    def colour_of(albedo) -> np.ndarray:
        albedo = np.asarray(albedo, dtype=np.float64)
        if modality == 0 or red_channel_fake_ir:
            return albedo
        return np.full(3, luminance(albedo) * latent["emissivity"])

    img = np.full((3, h, w), colour_of(np.full(3, BACKGROUND))[:, None, None] * 1.0)
    # Torso.
    cx = latent["head_cx"] * w + dx
    torso_top = int((latent["head_cy"] + latent["head_ry"] * 0.6) * h) + dy
    torso_bot = int(latent["torso_bot"] * h) + dy
    half = latent["shoulder"] * w / 2
    _paint_rect(img, colour_of(latent["shirt"]), torso_top, torso_bot,
                int(cx - half), int(cx + half))
    # Legs.
    leg_bot = int(latent["leg_bot"] * h) + dy
    lw = int(latent["leg_width"] * w)
    gap = int(latent["leg_gap"] * w)
    _paint_rect(img, colour_of(latent["pants"]), torso_bot, leg_bot,
                int(cx - gap / 2 - lw), int(cx - gap / 2))
    _paint_rect(img, colour_of(latent["pants"]), torso_bot, leg_bot,
                int(cx + gap / 2), int(cx + gap / 2 + lw))
    # Head ellipse.
    ys, xs = np.mgrid[0:h, 0:w]
    hcx, hcy = latent["head_cx"] * w + dx, latent["head_cy"] * h + dy
    rx, ry = latent["head_rx"] * w, latent["head_ry"] * h
    mask = ((ys - hcy) / ry) ** 2 + ((xs - hcx) / rx) ** 2 <= 1.0
    img[:, mask] = colour_of(latent["skin"])[:, None]
    # Logo patch on the torso.
    tb_h = torso_bot - torso_top
    tb_w = 2 * half
    ly0 = torso_top + int(latent["logo_v"] * tb_h)
    lx0 = int(cx - half + latent["logo_u"] * tb_w * 0.8)
    _paint_rect(img, colour_of(latent["logo"]),
                ly0, ly0 + max(2, int(latent["logo_h"] * tb_h)),
                lx0, lx0 + max(2, int(latent["logo_w"] * tb_w)))

    if red_channel_fake_ir and modality == 1:
        img = np.repeat(img[0:1], 3, axis=0)
    img = img * brightness + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# -- dataset -------------------------------------------------------------------


@dataclass
class Dataset:
    seed: int
    num_identities: int
    per_id_per_modality: int
    test_identities: int
    samples: list[Sample] = field(default_factory=list)
    split_of: list[str] = field(default_factory=list)
    channel_means: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}; use one of {SPLITS}")
        return [s for s, sp in zip(self.samples, self.split_of) if sp == name]

    @property
    def train(self) -> list[Sample]:
        return self.split("train")

    @property
    def query(self) -> list[Sample]:
        return self.split("query")

    @property
    def gallery(self) -> list[Sample]:
        return self.split("gallery")

    @property
    def test_pool(self) -> list[Sample]:
        """Held-out colour images not selected for the single-shot gallery."""
        return self.split("test")

    def train_identities(self) -> list[int]:
        return sorted({s.identity for s in self.train})

    def export_dir(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, (sample, split) in enumerate(zip(self.samples, self.split_of)):
            fname = f"img_{i:05d}.npy"
            np.save(path / fname, sample.image)
            rows.append((fname, sample.identity, sample.modality, sample.camera, split))
        with open(path / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "identity", "modality", "camera", "split"])
            writer.writerows(rows)
        meta = {
            "seed": self.seed,
            "num_identities": self.num_identities,
            "per_id_per_modality": self.per_id_per_modality,
            "test_identities": self.test_identities,
            "channel_means": list(self.channel_means),
        }
        (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def import_dir(cls, path) -> "Dataset":
        path = Path(path)
        if not (path / "manifest.csv").exists():
            raise ConfigError(f"{path}: no manifest.csv; not a dataset directory")
        meta = json.loads((path / "meta.json").read_text())
        ds = cls(
            seed=meta["seed"],
            num_identities=meta["num_identities"],
            per_id_per_modality=meta["per_id_per_modality"],
            test_identities=meta["test_identities"],
            channel_means=np.array(meta["channel_means"]),
        )
        with open(path / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                ds.samples.append(Sample(
                    image=np.load(path / row["filename"]),
                    identity=int(row["identity"]),
                    modality=int(row["modality"]),
                    camera=int(row["camera"]),
                ))
                ds.split_of.append(row["split"])
        return ds


def generate_dataset(
    num_identities: int,
    per_id_per_modality: int,
    seed: int,
    test_identities: int | None = None,
    red_channel_identities: int = 0,
) -> Dataset:
    """Render the full corpus and assign disjoint train/test identity sets.

    Camera brightness factors are fixed per camera; every render consumes
    an independent per-(id, modality, index) stream, so generation is
    reproducible regardless of call order.
    """
    if num_identities < 4:
        raise ConfigError(f"need at least 4 identities, got {num_identities}")
    if per_id_per_modality < 2:
        raise ConfigError(f"need at least 2 images per id per modality, got {per_id_per_modality}")
    if test_identities is None:
        test_identities = max(1, num_identities // 4)
    if not 1 <= test_identities <= num_identities - 2:
        raise ConfigError(
            f"test_identities={test_identities} must leave >= 2 training identities"
        )

    cam_rng = derive_rng(seed, 7)
    cam_brightness = cam_rng.uniform(0.9, 1.1, size=N_COLOUR_CAMERAS + N_IR_CAMERAS)

    ds = Dataset(seed=seed, num_identities=num_identities,
                 per_id_per_modality=per_id_per_modality,
                 test_identities=test_identities)
    n_train = num_identities - test_identities
    total_ids = num_identities + red_channel_identities

    for identity in range(total_ids):
        latent = sample_latent(derive_rng(seed, 1000 + identity))
        fake_ir = identity >= num_identities
        if fake_ir:
            split_c = split_i = "train"
        elif identity < n_train:
            split_c = split_i = "train"
        else:
            split_c, split_i = "test", "query"
        for modality, split in ((0, split_c), (1, split_i)):
            for k in range(per_id_per_modality):
                camera = k % N_COLOUR_CAMERAS if modality == 0 else N_COLOUR_CAMERAS + k % N_IR_CAMERAS
                img = render(
                    latent, modality, cam_brightness[camera],
                    derive_rng(seed, identity, modality, k),
                    red_channel_fake_ir=fake_ir,
                )
                this_split = split
                # Single-shot gallery: the first colour image of each test id.
                if split == "test" and k == 0:
                    this_split = "gallery"
                ds.samples.append(Sample(img, identity, modality, camera))
                ds.split_of.append(this_split)

    train_imgs = np.stack([s.image for s in ds.train])
    ds.channel_means = train_imgs.mean(axis=(0, 2, 3))
    return ds


# -- augmentation ----------------------------------------------------------------


def augment(
    image: np.ndarray,
    flip_p: float,
    erase_p: float,
    rng: np.random.Generator,
    fill: np.ndarray | None = None,
) -> np.ndarray:
    """Random horizontal flip and random erasing (train-time only).

    The erased region is a proper sub-rectangle whose area fraction lies in
    [0.02, 0.2] with aspect ratio in [0.3, 3.3], filled with the dataset
    channel means.
    """
    out = image
    if rng.random() < flip_p:
        out = out[:, :, ::-1].copy()
    if rng.random() < erase_p:
        out = out if out is not image else out.copy()
        h, w = out.shape[1:]
        fill_vals = np.full(3, 0.5) if fill is None else np.asarray(fill)
        for _ in range(100):
            frac = rng.uniform(0.02, 0.2)
            aspect = rng.uniform(0.3, 3.3)
            area = frac * h * w
            eh = int(round(np.sqrt(area * aspect)))
            ew = int(round(np.sqrt(area / aspect)))
            if not (0 < eh < h and 0 < ew < w):
                continue
            if not 0.02 <= (eh * ew) / (h * w) <= 0.2:
                continue
            y0 = int(rng.integers(0, h - eh + 1))
            x0 = int(rng.integers(0, w - ew + 1))
            out[:, y0 : y0 + eh, x0 : x0 + ew] = fill_vals[:, None, None]
            break
    return out


# -- PK batch sampling --------------------------------------------------------------


@dataclass(frozen=True)
class PKBatchSpec:
    p_identities: int = 8
    k_samples: int = 4      # per identity, split half colour / half infrared
    flip_p: float = 0.5
    erase_p: float = 0.2

    def __post_init__(self):
        if self.p_identities < 2:
            raise ConfigError(f"need >= 2 identities per batch, got {self.p_identities}")
        if self.k_samples < 2 or self.k_samples % 2:
            raise ConfigError(f"k_samples must be even and >= 2, got {self.k_samples}")

    @property
    def batch_size(self) -> int:
        return self.p_identities * self.k_samples


class PKLoader:
    """Draws PK batches from the train split: P identities, K samples each,
    half per modality, identities without replacement within a batch."""

    def __init__(self, dataset: Dataset, spec: PKBatchSpec, augment_images: bool = True):
        self.spec = spec
        self.augment_images = augment_images
        self.fill = dataset.channel_means
        by_id: dict[int, dict[int, list[np.ndarray]]] = {}
        for s in dataset.train:
            by_id.setdefault(s.identity, {0: [], 1: []})[s.modality].append(s.image)
        need = spec.k_samples // 2
        eligible = {
            i: mods for i, mods in by_id.items()
            if len(mods[0]) >= need and len(mods[1]) >= need
        }
        if len(eligible) < spec.p_identities:
            raise ConfigError(
                f"PK spec infeasible: {len(eligible)} identities have >= {need} "
                f"images per modality, batch needs {spec.p_identities}"
            )
        self.ids = sorted(eligible)
        self.by_id = {i: eligible[i] for i in self.ids}
        self.class_of = {identity: idx for idx, identity in enumerate(sorted(by_id))}

    @property
    def num_classes(self) -> int:
        return len(self.class_of)

    def batches_per_epoch(self) -> int:
        total = sum(len(m[0]) + len(m[1]) for m in self.by_id.values())
        return max(1, total // self.spec.batch_size)

    def next_batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (images, class_labels, modalities), grouped by identity."""
        spec = self.spec
        need = spec.k_samples // 2
        chosen = rng.choice(self.ids, size=spec.p_identities, replace=False)
        images, labels, modalities = [], [], []
        for identity in chosen:
            for modality in (0, 1):
                pool = self.by_id[identity][modality]
                picks = rng.choice(len(pool), size=need, replace=False)
                for pi in picks:
                    img = pool[pi]
                    if self.augment_images:
                        img = augment(img, spec.flip_p, spec.erase_p, rng, self.fill)
                    images.append(img)
                    labels.append(self.class_of[identity])
                    modalities.append(modality)
        return np.stack(images), np.array(labels), np.array(modalities)
