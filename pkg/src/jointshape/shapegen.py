"""Synthetic binary organ masks and the mask preprocessing used for training.

Masks are 3D boolean numpy arrays indexed ``[x, y, z]``.  Normal shapes are
bump-deformed superellipsoids; abnormal shapes add one localized lesion
deformation on the surface.  Everything is a pure function of its
configuration and integer seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nn.rng import make_rng

NORMAL, ABNORMAL = 0, 1
ROTATION_ANGLES = (-10.0, 0.0, 10.0)
MASK_MAGIC = b"PDM1"
MASK_VERSION = 1

_SIX = ndimage.generate_binary_structure(3, 1)


class MaskError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of the phantom family.

    Radii are fractions of ``grid_size`` so the same ranges work at any
    resolution.  Bumps displace the surface radially by a fraction of the
    local radius; the lesion is a sphere of radius
    ``effect_size * lesion_radius * grid_size`` centred on the surface.
    """

    grid_size: int = 48
    radii_range: tuple = ((0.18, 0.25), (0.15, 0.23), (0.125, 0.19))
    exponent_range: tuple = (1.7, 2.6)
    bumps: int = 5
    bump_amplitude: tuple = (-0.18, 0.18)
    bump_width: float = 0.45
    effect_size: float = 1.0
    lesion_radius: tuple = (0.075, 0.115)
    abnormal_mode: str = "bulge"

    def __post_init__(self):
        if self.grid_size < 8:
            raise ValueError("grid_size must be at least 8")
        if len(self.radii_range) != 3 or any(lo <= 0 or hi < lo for lo, hi in self.radii_range):
            raise ValueError(f"bad radii_range {self.radii_range}")
        if self.effect_size < 0:
            raise ValueError("effect_size must be >= 0")
        if self.abnormal_mode not in ("bulge", "dent", "mixed"):
            raise ValueError(f"abnormal_mode must be bulge, dent or mixed, got {self.abnormal_mode!r}")
        reach = max(hi for _, hi in self.radii_range) * (1 + max(0.0, self.bump_amplitude[1]))
        reach = (reach + self.effect_size * self.lesion_radius[1]) * self.grid_size
        if reach > (self.grid_size - 1) / 2 - 2:
            raise ValueError(
                f"phantom reach {reach:.1f} voxels leaves < 2 voxels of margin in a "
                f"{self.grid_size}^3 grid")


@dataclass
class CaseRecord:
    case_id: str
    label: int
    grid: np.ndarray
    seed: int
    corruption_dsc: float | None = None

    def __post_init__(self):
        if self.label not in (NORMAL, ABNORMAL):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class FoldAssignment:
    fold_count: int
    assignment: dict = field(default_factory=dict)

    def fold_of(self, case_id: str) -> int:
        return self.assignment[case_id]

    def members(self, fold: int) -> list[str]:
        return sorted(cid for cid, f in self.assignment.items() if f == fold)


def _centered_coords(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) - (n - 1) / 2.0


def _random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _is_connected(grid: np.ndarray) -> bool:
    _, count = ndimage.label(grid, structure=_SIX)
    return count == 1


def _draw_phantom(cfg: PhantomConfig, label: int, base_rng, lesion_rng) -> np.ndarray:
    n = cfg.grid_size
    radii = n * np.array([base_rng.uniform(lo, hi) for lo, hi in cfg.radii_range])
    expo = base_rng.uniform(*cfg.exponent_range)
    centers = _random_unit(base_rng, cfg.bumps)
    amps = base_rng.uniform(*cfg.bump_amplitude, size=cfg.bumps)

    c = _centered_coords(cfg.grid_size)
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    norm = np.linalg.norm(pts, axis=-1)
    unit = pts / np.maximum(norm, 1e-12)[..., None]
    level = np.sum(np.abs(pts / radii) ** expo, axis=-1) ** (1.0 / expo)
    # bump field is a function of direction only, so it scales the radial profile
    cos = unit @ centers.T
    swell = np.sum(amps * np.exp(-(1.0 - cos) / cfg.bump_width ** 2), axis=-1)
    swell = 1.0 + np.clip(swell, cfg.bump_amplitude[0], cfg.bump_amplitude[1])
    grid = level <= swell

    if label == ABNORMAL and cfg.effect_size > 0:
        direction = _random_unit(lesion_rng)
        mode = cfg.abnormal_mode
        if mode == "mixed":
            mode = "bulge" if lesion_rng.random() < 0.5 else "dent"
        radius = n * cfg.effect_size * lesion_rng.uniform(*cfg.lesion_radius)
        # surface point along the direction: outermost foreground sample on the ray
        ts = np.arange(0.0, cfg.grid_size / 2.0, 0.25)
        ray = np.rint(direction * ts[:, None] + (cfg.grid_size - 1) / 2.0).astype(int)
        ray = ray[np.all((ray >= 0) & (ray < cfg.grid_size), axis=1)]
        inside = grid[ray[:, 0], ray[:, 1], ray[:, 2]]
        t_surf = ts[:len(ray)][inside].max() if inside.any() else 0.0
        center = direction * t_surf
        ball = np.sum((pts - center) ** 2, axis=-1) <= radius ** 2
        grid = grid | ball if mode == "bulge" else grid & ~ball
    return grid


def generate_phantom(cfg: PhantomConfig, label: int, seed: int, case_id: str | None = None,
                     max_attempts: int = 10) -> CaseRecord:
    """Draw one labeled phantom.

    The base shape depends only on ``seed`` (not on ``label``), so with
    ``effect_size == 0`` a normal and an abnormal phantom of the same seed are
    identical.  Empty or disconnected draws are retried on perturbed
    sub-streams.
    """
    for attempt in range(max_attempts):
        base_rng = make_rng(seed, 0, attempt)
        lesion_rng = make_rng(seed, 1, attempt)
        grid = _draw_phantom(cfg, label, base_rng, lesion_rng)
        if grid.any() and _is_connected(grid):
            cid = case_id if case_id is not None else f"{'AN'[label == NORMAL]}{seed}"
            return CaseRecord(cid, label, grid, seed)
    raise GenerationError(
        f"phantom (label={label}, seed={seed}) empty or disconnected after {max_attempts} attempts")


def generate_dataset(cfg: PhantomConfig, n_normal: int, n_abnormal: int, seed: int) -> list[CaseRecord]:
    cases = []
    for label, count, prefix in ((NORMAL, n_normal, "N"), (ABNORMAL, n_abnormal, "A")):
        seeds = make_rng(seed, 100 + label).integers(0, 2 ** 62, size=count)
        cases += [generate_phantom(cfg, label, int(s), f"{prefix}{i:04d}")
                  for i, s in enumerate(seeds)]
    return cases


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z (i.e. ``Rz @ Ry @ Rx``)."""
    ax, ay, az = (math.radians(a) for a in angles_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_mask(grid: np.ndarray, angles_deg) -> np.ndarray:
    """Rotate about the grid centre with nearest-neighbour inverse mapping.

    Samples falling outside the grid are background.
    """
    if not grid.any():
        raise MaskError("empty mask")
    if all(a == 0 for a in angles_deg):
        return grid.copy()
    shape = np.array(grid.shape)
    center = (shape - 1) / 2.0
    idx = np.indices(grid.shape).reshape(3, -1).T.astype(np.float64) - center
    src = np.rint(idx @ rotation_matrix(angles_deg) + center).astype(np.int64)
    ok = np.all((src >= 0) & (src < shape), axis=1)
    out = np.zeros(grid.size, dtype=bool)
    out[ok] = grid[src[ok, 0], src[ok, 1], src[ok, 2]]
    return out.reshape(grid.shape)


def bounding_box(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not grid.any():
        raise MaskError("empty mask")
    nz = np.nonzero(grid)
    return np.array([a.min() for a in nz]), np.array([a.max() for a in nz])


def crop_and_rescale(grid: np.ndarray, target: int) -> np.ndarray:
    """Resample the foreground's bounding box onto a ``target``^3 grid (nearest neighbour)."""
    lo, hi = bounding_box(grid)
    extent = hi - lo + 1
    i = np.arange(target)
    picks = [lo[a] + ((2 * i + 1) * extent[a]) // (2 * target) for a in range(3)]
    return grid[np.ix_(*picks)]


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient ``2|A&B| / (|A|+|B|)``; 1.0 when both are empty."""
    if a.shape != b.shape:
        raise MaskError(f"dimension mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _six_neighbours(mask):
    """Whether any / all of each voxel's six face neighbours are foreground (outside is background)."""
    p = np.pad(mask, 1)
    shifted = [p[:-2, 1:-1, 1:-1], p[2:, 1:-1, 1:-1], p[1:-1, :-2, 1:-1],
               p[1:-1, 2:, 1:-1], p[1:-1, 1:-1, :-2], p[1:-1, 1:-1, 2:]]
    any_fg, all_fg = shifted[0].copy(), shifted[0].copy()
    for q in shifted[1:]:
        any_fg |= q
        all_fg &= q
    return any_fg, all_fg


def corrupt_mask(grid: np.ndarray, target_dsc: float, seed: int, tolerance: float = 0.02,
                 patch_radius: tuple = (0.03, 0.08)) -> np.ndarray:
    """Simulate an imperfect segmentation by flipping boundary voxels in local patches.

    Each step picks a random boundary voxel of the current mask that still
    agrees with the original and flips the boundary voxels of the same kind
    (inner foreground or outer background) within a random radius of it, a
    local under- or over-segmentation.  ``patch_radius`` is a range of
    fractions of the largest grid dimension.  Steps repeat until the Dice
    against the original drops to ``target_dsc``; the last patch is trimmed
    to its nearest voxels so the target is not overshot.  Flips are confined
    to the foreground bounding box grown by 15% of the grid size.
    """
    if not 0.0 < target_dsc < 1.0:
        raise ValueError(f"target_dsc must lie in (0, 1), got {target_dsc}")
    if not grid.any():
        raise MaskError("empty mask")
    rng = make_rng(seed, 7)
    original = grid.astype(bool)
    a_size = int(original.sum())
    scale = max(grid.shape)
    # flips stay within the bounding box grown by a margin of 15% of the grid
    pad = math.ceil(0.15 * scale) + 1
    box = tuple(slice(max(0, int(idx.min()) - pad), min(n, int(idx.max()) + 1 + pad))
                for idx, n in zip(np.nonzero(original), grid.shape))
    orig = original[box]
    cur = orig.copy()
    inter, b_size = a_size, a_size
    score = 1.0
    while score > target_dsc:
        any_fg, all_fg = _six_neighbours(cur)
        inner = cur & ~all_fg & orig
        outer = any_fg & ~cur & ~orig
        cand = np.flatnonzero(inner | outer)
        if cand.size == 0:
            raise GenerationError(f"cannot reach DSC {target_dsc}: no flippable voxels left")
        center = cand[rng.integers(cand.size)]
        removing = bool(cur.flat[center])
        same = np.flatnonzero(inner if removing else outer)
        d2 = np.sum((np.column_stack(np.unravel_index(same, cur.shape))
                     - np.array(np.unravel_index(center, cur.shape))) ** 2, axis=1)
        radius = rng.uniform(*patch_radius) * scale
        patch = same[d2 <= radius * radius]
        patch = patch[np.argsort(d2[d2 <= radius * radius], kind="stable")]
        total = a_size + b_size
        if removing:
            # removals shrink both |A&B| and |B|: k >= (2I - t(A+B)) / (2 - t)
            need = math.ceil((2 * inter - target_dsc * total) / (2 - target_dsc))
            k = min(patch.size, max(1, need), b_size - 1)
            if k < 1:
                raise GenerationError(f"cannot reach DSC {target_dsc} without emptying the mask")
            inter -= k
            b_size -= k
        else:
            # additions grow |B| only: k >= 2I / t - (A+B)
            need = math.ceil(2 * inter / target_dsc - total)
            k = min(patch.size, max(1, need))
            b_size += k
        cur.flat[patch[:k]] = not removing
        score = 2.0 * inter / (a_size + b_size)
    if score < target_dsc - tolerance:
        raise GenerationError(f"overshot DSC target {target_dsc}: reached {score:.4f}")
    out = np.zeros_like(original)
    out[box] = cur
    return out


def split_folds(cases, fold_count: int, seed: int) -> FoldAssignment:
    """Stratified random partition; invariant to the order of ``cases``."""
    if fold_count < 2:
        raise ValueError("fold_count must be >= 2")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    fa = FoldAssignment(fold_count)
    for label in (NORMAL, ABNORMAL):
        members = sorted(c.case_id for c in cases if c.label == label)
        if len(members) < fold_count:
            raise ValueError(f"class {label} has {len(members)} cases, fewer than {fold_count} folds")
        order = make_rng(seed, 200 + label).permutation(len(members))
        for pos, i in enumerate(order):
            fa.assignment[members[i]] = pos % fold_count
    return fa


def encode_mask(grid: np.ndarray) -> bytes:
    dims = grid.shape
    head = MASK_MAGIC + struct.pack("<H3I", MASK_VERSION, *dims)
    return head + np.packbits(grid.astype(bool).reshape(-1)).tobytes()


def decode_mask(data: bytes) -> np.ndarray:
    if data[:4] != MASK_MAGIC:
        raise MaskError("not a mask file (bad magic)")
    version, *dims = struct.unpack_from("<H3I", data, 4)
    if version != MASK_VERSION:
        raise MaskError(f"unsupported mask version {version}")
    n = dims[0] * dims[1] * dims[2]
    payload = np.frombuffer(data, np.uint8, offset=18)
    if payload.size != (n + 7) // 8:
        raise MaskError(f"payload has {payload.size} bytes, expected {(n + 7) // 8}")
    return np.unpackbits(payload, count=n).astype(bool).reshape(dims)


def write_dataset(cases, directory) -> Path:
    """Write one ``.pdm`` file per case plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["# case_id,label,relative_path,seed"]
    for c in cases:
        rel = f"masks/{c.case_id}.pdm"
        (directory / rel).write_bytes(encode_mask(c.grid))
        lines.append(f"{c.case_id},{c.label},{rel},{c.seed}")
    manifest = directory / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(directory) -> list[CaseRecord]:
    directory = Path(directory)
    manifest = directory / "manifest.csv" if directory.is_dir() else directory
    root = manifest.parent
    cases, seen = [], set()
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MaskError(f"{manifest}:{lineno}: expected 4 fields, got {len(parts)}")
        cid, label, rel, seed = parts
        if cid in seen:
            raise MaskError(f"{manifest}:{lineno}: duplicate case id {cid}")
        seen.add(cid)
        grid = decode_mask((root / rel).read_bytes())
        cases.append(CaseRecord(cid, int(label), grid, int(seed)))
    return cases
