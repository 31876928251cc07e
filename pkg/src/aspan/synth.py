"""Procedural image pairs with exact dense ground-truth flow.

A pair is a textured grayscale image A, a homography-warped and
photometrically jittered copy B (optionally with pasted occluder
rectangles), the exact dense flows in both directions and visibility
masks. Pixels are invisible when their counterpart falls outside the
other frame or under an occluder. Everything derives deterministically
from (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import GenConfig
from .tensor_io import FormatError, load_tensor, save_tensor

TIER_PARAMS = {
    # rotation (rad), scale range, translation (fraction of extent), perspective
    "easy": (0.10, (0.95, 1.06), 0.06, 0.0002),
    "medium": (0.26, (0.85, 1.18), 0.18, 0.0008),
    "hard": (0.50, (0.70, 1.40), 0.28, 0.0020),
}


@dataclass
class SynthPair:
    image_a: np.ndarray      # H x W x 1 in [0, 1]
    image_b: np.ndarray
    flow_ab: np.ndarray      # H x W x 2 target pixel coords (x, y)
    flow_ba: np.ndarray
    vis_a: np.ndarray        # H x W bool
    vis_b: np.ndarray
    homography: np.ndarray   # 3 x 3 mapping A pixel (x, y, 1) -> B
    seed: int

    @property
    def extent(self) -> tuple[int, int]:
        return self.image_a.shape[0], self.image_a.shape[1]


@dataclass
class DatasetManifest:
    n_pairs: int
    extent: tuple[int, int]
    tier: str
    max_occluders: int
    seed: int
    pairs: list

    def to_dict(self) -> dict:
        return {"version": 1, "n_pairs": self.n_pairs, "extent": list(self.extent),
                "tier": self.tier, "max_occluders": self.max_occluders,
                "seed": self.seed, "pairs": self.pairs}


def _resize_np(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy align-corners bilinear resize for texture synthesis."""
    h, w = grid.shape
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return ((1 - ty) * (1 - tx) * grid[np.ix_(y0, x0)]
            + (1 - ty) * tx * grid[np.ix_(y0, x1)]
            + ty * (1 - tx) * grid[np.ix_(y1, x0)]
            + ty * tx * grid[np.ix_(y1, x1)])


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Multi-octave value noise plus random shapes, normalized to [0, 1].

    The octave decay is gentle so cells keep enough high-frequency
    detail to be told apart at feature-grid resolution.
    """
    img = np.zeros((h, w))
    amplitude = 1.0
    cells = 4
    while cells <= max(h, w):
        noise = rng.random((min(cells, h), min(cells, w)))
        img += amplitude * _resize_np(noise, h, w)
        amplitude *= 0.7
        cells *= 2
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(3, 8)):
        kind = rng.integers(0, 2)
        level = rng.uniform(-0.8, 0.8)
        if kind == 0:
            y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
            ry, rx = rng.uniform(h * 0.05, h * 0.3), rng.uniform(w * 0.05, w * 0.3)
            mask = ((yy - y0) / ry) ** 2 + ((xx - x0) / rx) ** 2 <= 1.0
        else:
            y0, y1 = np.sort(rng.uniform(0, h, 2))
            x0, x1 = np.sort(rng.uniform(0, w, 2))
            mask = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
        img[mask] += level
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def _random_homography(rng: np.random.Generator, h: int, w: int,
                       tier: str) -> np.ndarray:
    max_rot, scale_range, max_trans, max_persp = TIER_PARAMS[tier]
    theta = rng.uniform(-max_rot, max_rot)
    scale = rng.uniform(*scale_range)
    tx = rng.uniform(-max_trans, max_trans) * w
    ty = rng.uniform(-max_trans, max_trans) * h
    px = rng.uniform(-max_persp, max_persp)
    py = rng.uniform(-max_persp, max_persp)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    affine = np.array([
        [scale * np.cos(theta), -scale * np.sin(theta), tx],
        [scale * np.sin(theta), scale * np.cos(theta), ty],
        [px, py, 1.0],
    ])
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=float)
    from_center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=float)
    return from_center @ affine @ to_center


def apply_homography(hom: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Map (..., 2) pixel coordinates (x, y) through a homography."""
    shape = xy.shape
    pts = xy.reshape(-1, 2)
    ones = np.ones((pts.shape[0], 1))
    mapped = (hom @ np.concatenate([pts, ones], axis=1).T).T
    return (mapped[:, :2] / mapped[:, 2:3]).reshape(shape)


def _dense_flow(hom: np.ndarray, h: int, w: int) -> np.ndarray:
    xx, yy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return apply_homography(hom, np.stack([xx, yy], axis=-1))


def _sample_border(img: np.ndarray, coords_xy: np.ndarray,
                   fill: np.ndarray) -> np.ndarray:
    """Bilinear sample with out-of-frame positions replaced by fill texture."""
    h, w = img.shape
    x = coords_xy[..., 0]
    y = coords_xy[..., 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(yc).astype(int), 0, h - 2)
    tx = xc - x0
    ty = yc - y0
    out = ((1 - ty) * (1 - tx) * img[y0, x0] + (1 - ty) * tx * img[y0, x0 + 1]
           + ty * (1 - tx) * img[y0 + 1, x0] + ty * tx * img[y0 + 1, x0 + 1])
    return np.where(inside, out, fill)


def _inside_frame(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    return ((coords[..., 0] >= 0) & (coords[..., 0] <= w - 1)
            & (coords[..., 1] >= 0) & (coords[..., 1] <= h - 1))


def _occluded_at(occ_mask: np.ndarray, coords: np.ndarray) -> np.ndarray:
    h, w = occ_mask.shape
    cx = np.clip(np.round(coords[..., 0]).astype(int), 0, w - 1)
    cy = np.clip(np.round(coords[..., 1]).astype(int), 0, h - 1)
    return occ_mask[cy, cx]


def _assemble_pair(rng: np.random.Generator, seed: int, extent: tuple[int, int],
                   hom: np.ndarray, max_occluders: int) -> SynthPair:
    h, w = extent
    image_a = _texture(rng, h, w)
    inv = np.linalg.inv(hom)
    flow_ab = _dense_flow(hom, h, w)
    flow_ba = _dense_flow(inv, h, w)

    fill = _texture(rng, h, w)
    image_b = _sample_border(image_a, flow_ba, fill)
    gain = rng.uniform(0.85, 1.15)
    offset = rng.uniform(-0.08, 0.08)
    noise = rng.normal(0.0, rng.uniform(0.0, 0.02), size=(h, w))
    image_b = np.clip(gain * image_b + offset + noise, 0.0, 1.0)

    occ_mask = np.zeros((h, w), bool)
    n_occ = rng.integers(0, max_occluders + 1) if max_occluders > 0 else 0
    for _ in range(n_occ):
        oh = int(rng.uniform(0.1, 0.3) * h)
        ow = int(rng.uniform(0.1, 0.3) * w)
        r0 = int(rng.uniform(0, h - oh))
        c0 = int(rng.uniform(0, w - ow))
        occ_mask[r0:r0 + oh, c0:c0 + ow] = True
        image_b[r0:r0 + oh, c0:c0 + ow] = _texture(rng, oh, ow)

    vis_a = _inside_frame(flow_ab, h, w) & ~_occluded_at(occ_mask, flow_ab)
    vis_b = _inside_frame(flow_ba, h, w) & ~occ_mask

    return SynthPair(image_a[..., None], image_b[..., None], flow_ab, flow_ba,
                     vis_a, vis_b, hom, seed)


def gen_pair(seed: int, extent: tuple[int, int], tier: str = "medium",
             max_occluders: int = 1) -> SynthPair:
    h, w = extent
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError(f"extent must be divisible by 8, got {extent}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    hom = _random_homography(rng, h, w, tier)
    while abs(np.linalg.det(hom)) < 1e-6:
        hom = _random_homography(rng, h, w, tier)
    return _assemble_pair(rng, seed, extent, hom, max_occluders)


def pair_from_homography(seed: int, extent: tuple[int, int], hom: np.ndarray,
                         max_occluders: int = 0) -> SynthPair:
    """Pair with a caller-chosen warp (diagnostics and controlled tests)."""
    if abs(np.linalg.det(hom)) < 1e-6:
        raise ValueError("degenerate homography")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    return _assemble_pair(rng, seed, extent, np.asarray(hom, dtype=float),
                          max_occluders)


def rescale_pair(pair: SynthPair, factor: float) -> SynthPair:
    """The same scene rendered at a different resolution.

    Images are bilinearly resized; the homography is conjugated by the
    scale change so flows and visibility stay exact at the new extent.
    """
    h, w = pair.extent
    nh, nw = int(round(h * factor)), int(round(w * factor))
    if nh % 8 or nw % 8:
        raise ValueError(f"rescaled extent {nh} x {nw} must be divisible by 8")
    sx, sy = (nw - 1) / (w - 1), (nh - 1) / (h - 1)
    scale = np.diag([sx, sy, 1.0])
    hom = scale @ pair.homography @ np.linalg.inv(scale)
    inv = np.linalg.inv(hom)
    image_a = _resize_np(pair.image_a[..., 0], nh, nw)[..., None]
    image_b = _resize_np(pair.image_b[..., 0], nh, nw)[..., None]
    flow_ab = _dense_flow(hom, nh, nw)
    flow_ba = _dense_flow(inv, nh, nw)
    occ_small = _inside_frame(pair.flow_ba, h, w) & ~pair.vis_b
    occ = _resize_np(occ_small.astype(float), nh, nw) > 0.5
    vis_a = _inside_frame(flow_ab, nh, nw) & ~_occluded_at(occ, flow_ab)
    vis_b = _inside_frame(flow_ba, nh, nw) & ~occ
    return SynthPair(image_a, image_b, flow_ab, flow_ba, vis_a, vis_b,
                     hom, pair.seed)


def gt_coarse_matches(pair: SynthPair, stride: int = 8) -> list[tuple[int, int]]:
    """Mutually consistent cell-level matches from the exact warp.

    An A cell maps to the B cell nearest its warped center; the pair is
    kept when the reverse assignment of that B cell returns to the A cell
    and both centers are visible.
    """
    from .backbone import cell_center_px
    h, w = pair.extent
    hc, wc = h // stride, w // stride
    inv = np.linalg.inv(pair.homography)

    def center_xy(r, c):
        return np.array([cell_center_px(float(c), stride),
                         cell_center_px(float(r), stride)])

    def visible(mask, xy):
        x, y = int(round(xy[0])), int(round(xy[1]))
        if not (0 <= x < w and 0 <= y < h):
            return False
        return bool(mask[y, x])

    def nearest_cell(xy):
        col = int(round((xy[0] - (stride - 1) / 2.0) / stride))
        row = int(round((xy[1] - (stride - 1) / 2.0) / stride))
        return row, col

    matches = []
    for ra in range(hc):
        for ca in range(wc):
            a_xy = center_xy(ra, ca)
            if not visible(pair.vis_a, a_xy):
                continue
            b_xy = apply_homography(pair.homography, a_xy)
            rb, cb = nearest_cell(b_xy)
            if not (0 <= rb < hc and 0 <= cb < wc):
                continue
            back_xy = apply_homography(inv, center_xy(rb, cb))
            if not visible(pair.vis_b, center_xy(rb, cb)):
                continue
            if nearest_cell(back_xy) != (ra, ca):
                continue
            matches.append((ra * wc + ca, rb * wc + cb))
    return matches


def cell_supervision(pair: SynthPair, stride: int = 8):
    """Ground-truth flow targets and visibility at feature-cell centers.

    Returns (gt_a, mask_a, gt_b, mask_b): per-cell target pixel
    coordinates (x, y) in the other image, evaluated exactly from the
    warp at each cell's center, and boolean supervision masks.
    """
    from .backbone import cell_center_px
    h, w = pair.extent
    hc, wc = h // stride, w // stride
    cols, rows = np.meshgrid(np.arange(wc, dtype=float), np.arange(hc, dtype=float))
    centers = np.stack([cell_center_px(cols, stride),
                        cell_center_px(rows, stride)], axis=-1)
    inv = np.linalg.inv(pair.homography)

    def one_direction(hom, vis):
        gt = apply_homography(hom, centers)
        cx = np.clip(np.round(centers[..., 0]).astype(int), 0, w - 1)
        cy = np.clip(np.round(centers[..., 1]).astype(int), 0, h - 1)
        return gt, vis[cy, cx]

    gt_a, mask_a = one_direction(pair.homography, pair.vis_a)
    gt_b, mask_b = one_direction(inv, pair.vis_b)
    return gt_a, mask_a, gt_b, mask_b


PAIR_FILES = ("image_a", "image_b", "flow_ab", "flow_ba", "vis_a", "vis_b")


def write_dataset(directory: str | Path, config: GenConfig,
                  threads: int = 1) -> DatasetManifest:
    """Generate and persist a dataset; output is identical for any thread
    count (pairs are independently seeded and written in order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seeds = [int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0])
             for k in range(config.n_pairs)]

    def make(pair_seed):
        return gen_pair(pair_seed, config.extent, config.tier, config.max_occluders)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            generated = list(pool.map(make, seeds))
    else:
        generated = [make(s) for s in seeds]

    entries = []
    for k, (pair_seed, pair) in enumerate(zip(seeds, generated)):
        name = f"pair_{k}"
        pair_dir = directory / name
        pair_dir.mkdir(exist_ok=True)
        arrays = {"image_a": pair.image_a, "image_b": pair.image_b,
                  "flow_ab": pair.flow_ab, "flow_ba": pair.flow_ba,
                  "vis_a": pair.vis_a.astype(np.float64),
                  "vis_b": pair.vis_b.astype(np.float64)}
        for key in PAIR_FILES:
            save_tensor(pair_dir / f"{key}.aspt", arrays[key])
        entries.append({"name": name, "seed": pair_seed,
                        "homography": pair.homography.tolist()})
    manifest = DatasetManifest(config.n_pairs, config.extent, config.tier,
                               config.max_occluders, config.seed, entries)
    (directory / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(directory: str | Path) -> tuple[DatasetManifest, list[SynthPair]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    raw = json.loads(manifest_path.read_text())
    if raw.get("version") != 1:
        raise FormatError(f"{directory}: unsupported dataset version")
    pairs = []
    for entry in raw["pairs"]:
        pair_dir = directory / entry["name"]
        arrays = {key: load_tensor(pair_dir / f"{key}.aspt") for key in PAIR_FILES}
        pairs.append(SynthPair(
            arrays["image_a"], arrays["image_b"], arrays["flow_ab"],
            arrays["flow_ba"], arrays["vis_a"].astype(bool),
            arrays["vis_b"].astype(bool),
            np.array(entry["homography"]), entry["seed"]))
    manifest = DatasetManifest(raw["n_pairs"], tuple(raw["extent"]), raw["tier"],
                               raw["max_occluders"], raw["seed"], raw["pairs"])
    return manifest, pairs
