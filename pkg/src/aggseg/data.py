"""Tile datasets: directory layout, subset selection, class priors and a synthetic generator.

Directory layout::

    root/labelled/images/<pipe>_<tile>.png    8-bit RGB
    root/labelled/masks/<pipe>_<tile>.png     8-bit grayscale, 255 = aggregate, 0 = suspension
    root/unlabelled/images/<pipe>_<tile>.png
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigurationError, DatasetError, GenerationError, InputError
from .losses import SIGMA_FLOOR, ClassPrior

logger = logging.getLogger(__name__)


class LabelledTile(NamedTuple):
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = aggregate
    pipe_id: str
    name: str = ""


class UnlabelledTile(NamedTuple):
    image: np.ndarray
    pipe_id: str
    name: str = ""


@dataclass
class DatasetSplit:
    labelled: List[LabelledTile]
    unlabelled: List[UnlabelledTile]
    tile_size: int
    held_out: List[LabelledTile] = field(default_factory=list)

    def __post_init__(self):
        for t in list(self.labelled) + list(self.held_out):
            if t.image.shape[:2] != (self.tile_size, self.tile_size) or t.mask.shape != t.image.shape[:2]:
                raise DatasetError(f"tile {t.name or t.pipe_id} does not match tile size {self.tile_size}")
            if not t.pipe_id:
                raise DatasetError(f"tile {t.name} has an empty pipe id")
        for t in self.unlabelled:
            if t.image.shape[:2] != (self.tile_size, self.tile_size):
                raise DatasetError(f"tile {t.name or t.pipe_id} does not match tile size {self.tile_size}")

    @property
    def pipes(self):
        return sorted({t.pipe_id for t in self.labelled})

    def labelled_arrays(self):
        x = np.stack([t.image for t in self.labelled]) if self.labelled else None
        y = np.stack([t.mask for t in self.labelled]) if self.labelled else None
        return x, y

    def unlabelled_array(self):
        return np.stack([t.image for t in self.unlabelled]) if self.unlabelled else None

    def held_out_arrays(self):
        if not self.held_out:
            return None, None
        return np.stack([t.image for t in self.held_out]), np.stack([t.mask for t in self.held_out])


def split_name(stem: str) -> Tuple[str, str]:
    if "_" not in stem:
        raise DatasetError(f"file name {stem!r} does not follow <pipe>_<tile>.png")
    pipe, tile = stem.rsplit("_", 1)
    if not pipe:
        raise DatasetError(f"file name {stem!r} has an empty pipe id")
    return pipe, tile


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "1") else im)
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 255}:
        bad = sorted(set(values.tolist()) - {0, 255})
        raise DatasetError(f"mask {path} holds non-binary values {bad[:5]}")
    return (arr == 255).astype(np.uint8)


def write_image(path, image):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_dataset(root) -> DatasetSplit:
    root = Path(root)
    img_dir = root / "labelled" / "images"
    mask_dir = root / "labelled" / "masks"
    unl_dir = root / "unlabelled" / "images"
    for d in (img_dir, mask_dir, unl_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
    labelled, unlabelled = [], []
    for path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / path.name
        if not mask_path.exists():
            raise DatasetError(f"no mask for labelled image {path.name}")
        pipe, _ = split_name(path.stem)
        labelled.append(LabelledTile(read_image(path), read_mask(mask_path), pipe, path.stem))
    for path in sorted(unl_dir.glob("*.png")):
        pipe, _ = split_name(path.stem)
        unlabelled.append(UnlabelledTile(read_image(path), pipe, path.stem))
    tiles = [t.image for t in labelled] + [t.image for t in unlabelled]
    if not tiles:
        raise DatasetError(f"no tiles found under {root}")
    sizes = {im.shape[:2] for im in tiles}
    if len(sizes) != 1 or tiles[0].shape[0] != tiles[0].shape[1]:
        raise DatasetError(f"tiles must be square and share one size, found {sorted(sizes)}")
    return DatasetSplit(labelled, unlabelled, tiles[0].shape[0])


def select_training_subset(split: DatasetSplit, k: int, seed: int = 0) -> DatasetSplit:
    """Draw ``k`` labelled tiles per pipe for training; the rest become the held-out set."""
    if k < 1:
        raise InputError("k must be >= 1")
    by_pipe = {}
    for t in split.labelled:
        by_pipe.setdefault(t.pipe_id, []).append(t)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for pipe in sorted(by_pipe):
        tiles = sorted(by_pipe[pipe], key=lambda t: t.name)
        if k > len(tiles):
            raise InputError(f"pipe {pipe!r} has {len(tiles)} labelled tiles, cannot take {k}")
        chosen = set(rng.choice(len(tiles), size=k, replace=False).tolist())
        for i, t in enumerate(tiles):
            (train if i in chosen else held).append(t)
    return DatasetSplit(train, list(split.unlabelled), split.tile_size, held)


def class_proportions(mask) -> Tuple[float, float]:
    """Hard (aggregate, suspension) pixel proportions of one mask."""
    mask = np.asarray(mask)
    agg = float(np.count_nonzero(mask)) / mask.size
    return agg, 1.0 - agg


def compute_class_prior(masks, sigma_floor: float = SIGMA_FLOOR) -> ClassPrior:
    """Mean and population standard deviation of per-image class proportions."""
    masks = list(masks)
    if not masks:
        raise InputError("need at least one mask to compute a class prior")
    props = np.array([class_proportions(m) for m in masks])
    mu = props.mean(axis=0)
    sigma = props.std(axis=0)
    return ClassPrior.from_moments(mu / mu.sum(), sigma, sigma_floor)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Hard labels from an aggregate score map; ties go to aggregate."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold {threshold} outside [0, 1]")
    if hasattr(pred, "detach"):
        pred = pred.detach().cpu().numpy()
    return (np.asarray(pred) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic particle images


@dataclass
class SynthConfig:
    tile_size: int = 128
    num_labelled: int = 8
    num_unlabelled: int = 16
    target_minority_fraction: float = 0.36
    particle_diameter_range: Tuple[float, float] = (6.0, 36.0)
    texture_noise_level: float = 0.08
    tiles_per_pipe: int = 4
    seed: int = 0
    max_retries: int = 5

    def __post_init__(self):
        self.particle_diameter_range = tuple(float(v) for v in self.particle_diameter_range)
        if not 0.0 < self.target_minority_fraction < 1.0:
            raise ConfigurationError("target_minority_fraction", "must lie in (0, 1)")
        lo, hi = self.particle_diameter_range
        if not 0 < lo <= hi:
            raise ConfigurationError("particle_diameter_range", f"{self.particle_diameter_range} is not a positive range")
        if self.tile_size < 16:
            raise ConfigurationError("tile_size", "must be >= 16")
        if self.num_labelled < 0 or self.num_unlabelled < 0:
            raise ConfigurationError("num_labelled", "tile counts must be >= 0")
        if self.tiles_per_pipe < 1:
            raise ConfigurationError("tiles_per_pipe", "must be >= 1")
        if self.texture_noise_level < 0:
            raise ConfigurationError("texture_noise_level", "must be >= 0")


def _smooth_noise(rng, size, sigma):
    n = rng.standard_normal((size, size))
    n = ndimage.gaussian_filter(n, sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _ellipse_support(size, cy, cx, a, b, theta):
    """Boolean mask of an ellipse plus the bounding box it was drawn in."""
    r = int(np.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(size, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(size, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return None, None
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return (u * u + v * v) <= 1.0, (slice(y0, y1), slice(x0, x1))


def _place_particles(rng, size, target, diam_range, max_attempts=4000):
    """Non-overlapping ellipses until the aggregate fraction reaches ``target``."""
    mask = np.zeros((size, size), dtype=bool)
    blocked = np.zeros((size, size), dtype=bool)  # mask dilated by a 1 px gap
    labels = np.zeros((size, size), dtype=np.int32)
    lo, hi = np.log(diam_range[0]), np.log(diam_range[1])
    goal = target * size * size
    count = 0
    attempts = 0
    while mask.sum() < goal and attempts < max_attempts:
        attempts += 1
        # log-uniform diameters, biased toward large ones early so the packing fills up
        shrink = min(1.0, attempts / 400.0)
        d = float(np.exp(rng.uniform(lo, hi - (hi - lo) * 0.5 * shrink)))
        a = d / 2.0
        b = a * rng.uniform(0.55, 1.0)
        cy, cx = rng.uniform(0, size, size=2)
        support, box = _ellipse_support(size, cy, cx, a, b, rng.uniform(0, np.pi))
        if support is None or not support.any() or (blocked[box] & support).any():
            continue
        count += 1
        mask[box] |= support
        labels[box][support] = count
        blocked = ndimage.binary_dilation(mask, iterations=1)
    return mask, labels, count


def render_tile(rng, size, target, diam_range, noise_level, palette):
    """Render one tile; returns (image float32 (H, W, 3), mask uint8 (H, W))."""
    mask, labels, count = _place_particles(rng, size, target, diam_range)
    paste = np.asarray(palette["suspension"], dtype=np.float64)
    texture = 0.6 * _smooth_noise(rng, size, 3.0) + 0.4 * _smooth_noise(rng, size, 1.0)
    image = np.empty((size, size, 3))
    image[:] = paste
    image += noise_level * texture[..., None]
    grain = _smooth_noise(rng, size, 1.0)
    for k in range(1, count + 1):
        sel = labels == k
        # stones are mostly grey; contrast to the paste varies, some are barely visible
        contrast = rng.choice([-1.0, 1.0]) * rng.uniform(*palette["contrast"])
        tint = rng.normal(0.0, 0.02, size=3)
        image[sel] = paste + contrast + tint + noise_level * 1.3 * grain[sel][:, None]
    edge = mask & ~ndimage.binary_erosion(mask, iterations=1)
    image[edge] -= palette["rim"]
    image += rng.normal(0.0, noise_level * 0.5, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def _pipe_palette(rng):
    paste = 0.5 + rng.uniform(-0.08, 0.08)
    warm = rng.uniform(0.0, 0.04)
    return {"suspension": np.array([paste + warm, paste, paste - warm]),
            "contrast": (0.03, 0.25), "rim": rng.uniform(0.0, 0.06)}


def _generate_tiles(config: SynthConfig, attempt: int):
    seq = np.random.SeedSequence([config.seed, attempt])
    n_lab, n_unl = config.num_labelled, config.num_unlabelled
    n_lab_pipes = -(-n_lab // config.tiles_per_pipe) if n_lab else 0
    n_unl_pipes = -(-n_unl // config.tiles_per_pipe) if n_unl else 0
    pipe_seqs = seq.spawn(n_lab_pipes + n_unl_pipes)
    out = []
    for kind, n, offset, prefix in (("labelled", n_lab, 0, "p"), ("unlabelled", n_unl, n_lab_pipes, "u")):
        for i in range(n):
            p, t = divmod(i, config.tiles_per_pipe)
            pipe_seq = pipe_seqs[offset + p]
            state = [int(v) for v in pipe_seq.generate_state(2)]
            palette = _pipe_palette(np.random.default_rng(state + [0]))
            tile_rng = np.random.default_rng(state + [t + 1])
            target = float(np.clip(config.target_minority_fraction + tile_rng.uniform(-0.08, 0.08), 0.02, 0.6))
            image, mask = render_tile(tile_rng, config.tile_size, target, config.particle_diameter_range,
                                      config.texture_noise_level, palette)
            out.append((kind, f"{prefix}{p:02d}", f"t{t:02d}", quantize(image), mask))
    return out


def generate_synthetic(config: SynthConfig, root=None) -> DatasetSplit:
    """Render a seeded dataset; when ``root`` is given also write it in the tile layout."""
    for attempt in range(config.max_retries):
        tiles = _generate_tiles(config, attempt)
        agg = sum(int(m.sum()) for *_, m in tiles)
        total = sum(m.size for *_, m in tiles)
        fraction = agg / total if total else config.target_minority_fraction
        if abs(fraction - config.target_minority_fraction) <= 0.05:
            break
        logger.info("synthetic attempt %d: aggregate fraction %.3f off target", attempt, fraction)
    else:
        raise GenerationError(
            f"could not reach aggregate fraction {config.target_minority_fraction} "
            f"with diameters {config.particle_diameter_range} on {config.tile_size} px tiles")
    labelled, unlabelled = [], []
    for kind, pipe, tile, image, mask in tiles:
        name = f"{pipe}_{tile}"
        if kind == "labelled":
            labelled.append(LabelledTile(image, mask, pipe, name))
        else:
            unlabelled.append(UnlabelledTile(image, pipe, name))
    split = DatasetSplit(labelled, unlabelled, config.tile_size)
    if root is not None:
        write_dataset(split, root)
    return split


def write_dataset(split: DatasetSplit, root):
    root = Path(root)
    dirs = [root / "labelled" / "images", root / "labelled" / "masks", root / "unlabelled" / "images"]
    for d in dirs:
        d.mkdir(parents=True, exist_ok=True)
    for t in list(split.labelled) + list(split.held_out):
        write_image(dirs[0] / f"{t.name}.png", t.image)
        write_mask(dirs[1] / f"{t.name}.png", t.mask)
    for t in split.unlabelled:
        write_image(dirs[2] / f"{t.name}.png", t.image)


def quantize(image):
    """Round-trip an image through 8 bits, as writing a PNG would."""
    return (np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8) / 255.0).astype(np.float32)
