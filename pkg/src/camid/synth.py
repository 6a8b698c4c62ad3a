"""Synthetic scenes and camera acquisition pipelines for desk-scale datasets.

Each simulated camera model mosaics a linear RGB scene through a Bayer
pattern, demosaics it with its own kernel, applies a colour matrix and a
gamma curve, adds sensor noise and quantises to 8 bits.  Instances of one
model share every parameter except the noise stream.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import write_ppm

CFA_LAYOUTS = ("RGGB", "GRBG", "GBRG", "BGGR")
KERNELS = ("nearest", "bilinear", "smooth-hue")
_CHANNEL = {"R": 0, "G": 1, "B": 2}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class CameraProfile:
    name: str
    cfa: str = "RGGB"
    kernel: str = "bilinear"
    color_matrix: list = field(default_factory=lambda: np.eye(3).tolist())
    gamma: float = 2.2
    noise_std: float = 1.0
    quant_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.cfa not in CFA_LAYOUTS:
            raise ValueError(f"unknown CFA layout {self.cfa!r}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown demosaic kernel {self.kernel!r}")
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("colour matrix must be 3x3")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > 0.2):
            raise ValueError("colour matrix rows must sum to 1 +/- 0.2")
        if not 1.8 <= self.gamma <= 2.6:
            raise ValueError("gamma must lie in [1.8, 2.6]")
        if not 0 <= self.noise_std <= 3:
            raise ValueError("noise std must lie in [0, 3]")
        if not 1 <= self.quant_step <= 4:
            raise ValueError("quantisation step must lie in [1, 4]")

    def describe(self) -> str:
        rows = "\n".join("  " + " ".join(f"{v:+.4f}" for v in row) for row in self.color_matrix)
        return (f"model: {self.name}\ncfa: {self.cfa}\ndemosaic: {self.kernel}\n"
                f"gamma: {self.gamma:.4f}\nnoise_std: {self.noise_std:.4f}\n"
                f"quant_step: {self.quant_step}\nseed: {self.seed}\ncolor_matrix:\n{rows}\n")


def profiles_distinct(profiles) -> bool:
    keys = [(p.kernel, p.cfa) for p in profiles]
    return len(set(keys)) == len(keys)


def draw_profiles(m: int, seed: int, prefix: str = "cam", exclude=()) -> list[CameraProfile]:
    """``m`` profiles with pairwise distinct (kernel, CFA phase) combinations."""
    combos = [c for c in itertools.product(KERNELS, CFA_LAYOUTS) if c not in set(exclude)]
    if m > len(combos):
        raise ValueError(f"cannot draw {m} distinct profiles: only {len(combos)} kernel/CFA combinations left")
    if m < 1:
        raise ValueError("need at least one profile")
    rng = np.random.default_rng(derive_seed("profiles", seed))
    # round-robin over kernels so small sets still mix kernel types
    order = rng.permutation(len(combos))
    by_kernel = {k: [combos[i] for i in order if combos[i][0] == k] for k in KERNELS}
    kernels = [KERNELS[i] for i in rng.permutation(len(KERNELS))]
    picked = []
    while len(picked) < m:
        for k in kernels:
            if by_kernel[k] and len(picked) < m:
                picked.append(by_kernel[k].pop(0))
    profiles = []
    for i, (kernel, cfa) in enumerate(picked):
        matrix = rng.uniform(-0.12, 0.12, size=(3, 3))
        np.fill_diagonal(matrix, 0.0)
        # diagonal absorbs the off-diagonal mass; row sums land in 1 +/- 0.08
        matrix[np.diag_indices(3)] = 1.0 - matrix.sum(axis=1) + rng.uniform(-0.08, 0.08, size=3)
        profiles.append(CameraProfile(
            name=f"{prefix}{i:02d}", cfa=cfa, kernel=kernel,
            color_matrix=np.round(matrix, 6).tolist(),
            gamma=round(float(rng.uniform(1.8, 2.6)), 6),
            noise_std=round(float(rng.uniform(0.5, 3.0)), 6),
            quant_step=int(rng.integers(1, 5)),
            seed=derive_seed("profile", seed, i)))
    return profiles


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SceneSpec:
    height: int = 384
    width: int = 384
    seed: int = 0
    mix: tuple = (1.0, 1.0, 1.0, 1.0)  # gradients, texture, edges, flat regions

    def __post_init__(self):
        for d in (self.height, self.width):
            if d < 128 or d % 64:
                raise ValueError(f"scene dimensions must be >= 128 and multiples of 64, got {self.height}x{self.width}")


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Procedural linear-light RGB image with values inside [0.08, 0.84]."""
    rng = np.random.default_rng(derive_seed("scene", spec.seed))
    h, w = spec.height, spec.width
    g_mix, t_mix, e_mix, f_mix = spec.mix
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    base = rng.uniform(0.25, 0.6, size=3)
    for c in range(3):
        gx, gy = rng.uniform(-0.3, 0.3, size=2)
        img[..., c] = base[c] + g_mix * (gx * (xx - 0.5) + gy * (yy - 0.5))
    blobs = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(h / 8, w / 8, 0), mode="wrap")
    img += g_mix * 0.15 * blobs / (blobs.std() + 1e-12)
    # piecewise-constant shapes: flat regions with sharp borders
    n_shapes = int(rng.integers(6, 14))
    for _ in range(n_shapes):
        color = rng.uniform(0.05, 0.85, size=3)
        alpha = rng.uniform(0.5, 1.0) * min(1.0, max(e_mix, f_mix))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 16, h / 4), rng.uniform(w / 16, w / 4)
        if rng.random() < 0.5:
            mask = (np.abs(yy * max(h, w) - cy) < ry) & (np.abs(xx * max(h, w) - cx) < rx)
        else:
            mask = ((yy * max(h, w) - cy) / ry) ** 2 + ((xx * max(h, w) - cx) / rx) ** 2 < 1
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    for sigma, amp in ((0.8, 0.06), (2.0, 0.08)):
        tex = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(sigma, sigma, 0), mode="wrap")
        lum = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="wrap")
        img += t_mix * amp * (0.5 * tex / tex.std() + lum[..., None] / lum.std())
    lo, hi = np.percentile(img, [0.5, 99.5])
    img = np.clip((img - lo) / (hi - lo + 1e-12), 0.0, 1.0)
    # muted chroma and a raised floor keep colour-matrix undershoot off the 8-bit rails
    lum = img.mean(axis=2, keepdims=True)
    img = lum + 0.6 * (img - lum)
    return 0.08 + 0.76 * img


# ---------------------------------------------------------------- acquisition

def cfa_masks(layout: str, h: int, w: int) -> np.ndarray:
    """Boolean H x W x 3 array marking which channel each sensor site records."""
    masks = np.zeros((h, w, 3), dtype=bool)
    for idx, ch in enumerate(layout):
        dy, dx = divmod(idx, 2)
        masks[dy::2, dx::2, _CHANNEL[ch]] = True
    return masks


def mosaic(scene, layout: str) -> np.ndarray:
    scene = np.asarray(scene)
    masks = cfa_masks(layout, *scene.shape[:2])
    return (scene * masks).sum(axis=2)


_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0


def _bilinear(cfa, masks):
    out = np.empty(masks.shape)
    for c in range(3):
        kern = _G_KERNEL if c == 1 else _RB_KERNEL
        out[..., c] = ndimage.convolve(cfa * masks[..., c], kern, mode="mirror")
    return out


def _nearest(cfa, layout):
    h, w = cfa.shape
    out = np.empty((h, w, 3))
    ys, xs = np.arange(h), np.arange(w)
    for c, ch in enumerate("RGB"):
        sites = [divmod(i, 2) for i, s in enumerate(layout) if s == ch]
        if len(sites) == 1:
            dy, dx = sites[0]
            plane = cfa[(ys // 2 * 2 + dy)[:, None], (xs // 2 * 2 + dx)[None, :]]
        else:
            # green: take the sample on the same row of the 2x2 cell
            col_of_row = {dy: dx for dy, dx in sites}
            dxs = np.array([col_of_row[y % 2] for y in ys])
            plane = cfa[ys[:, None], (xs // 2 * 2)[None, :] + dxs[:, None]]
        out[..., c] = plane
    return out


def _edge_green(cfa, masks):
    # at red/blue sites interpolate green along the flatter direction
    pad = np.pad(cfa, 1, mode="reflect")
    left, right = pad[1:-1, :-2], pad[1:-1, 2:]
    up, down = pad[:-2, 1:-1], pad[2:, 1:-1]
    dh, dv = np.abs(left - right), np.abs(up - down)
    est = np.where(dh < dv, (left + right) / 2, np.where(dv < dh, (up + down) / 2, (left + right + up + down) / 4))
    return np.where(masks[..., 1], cfa, est)


def _smooth_hue(cfa, masks):
    green = _edge_green(cfa, masks)
    out = np.empty(masks.shape)
    out[..., 1] = green
    for c in (0, 2):
        ratio = np.where(masks[..., c], cfa / np.maximum(green, 1e-4), 0.0)
        out[..., c] = green * ndimage.convolve(ratio, _RB_KERNEL, mode="mirror")
    return out


def demosaic(cfa, layout: str, kernel: str) -> np.ndarray:
    cfa = np.asarray(cfa, dtype=np.float64)
    masks = cfa_masks(layout, *cfa.shape)
    if kernel == "bilinear":
        return _bilinear(cfa, masks)
    if kernel == "nearest":
        return _nearest(cfa, layout)
    if kernel == "smooth-hue":
        return _smooth_hue(cfa, masks)
    raise ValueError(f"unknown demosaic kernel {kernel!r}")


def acquire(scene, profile: CameraProfile, shot_seed: int) -> np.ndarray:
    """Run a linear scene through the profile's pipeline to an 8-bit RGB image."""
    scene = np.asarray(scene, dtype=np.float64)
    rgb = demosaic(mosaic(scene, profile.cfa), profile.cfa, profile.kernel)
    rgb = rgb @ np.asarray(profile.color_matrix).T
    rgb = np.clip(rgb, 0.0, 1.0) ** (1.0 / profile.gamma) * 255.0
    if profile.noise_std > 0:
        rng = np.random.default_rng(shot_seed)
        rgb = rgb + rng.normal(0.0, profile.noise_std, size=rgb.shape)
    step = profile.quant_step
    rgb = np.round(rgb / step) * step
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- datasets

def _shot_scene(base: np.ndarray, spec: SceneSpec, seed: int, scene: int, shot: int) -> np.ndarray:
    # viewpoint jitter and exposure change between shots of one scene
    rng = np.random.default_rng(derive_seed("shot", seed, scene, shot))
    margin_y = base.shape[0] - spec.height
    margin_x = base.shape[1] - spec.width
    oy, ox = int(rng.integers(0, margin_y + 1)), int(rng.integers(0, margin_x + 1))
    gain = rng.uniform(0.92, 1.0) if shot else 1.0
    return base[oy:oy + spec.height, ox:ox + spec.width] * gain


@lru_cache(maxsize=4)
def _scene_content(spec: SceneSpec, seed: int, scene: int) -> np.ndarray:
    big = SceneSpec(spec.height + 64, spec.width + 64, derive_seed("content", seed, scene), spec.mix)
    return render_scene(big)


def _render_job(args):
    spec, profile, shot_seed, seed, scene, shot, path = args
    img = acquire(_shot_scene(_scene_content(spec, seed, scene), spec, seed, scene, shot), profile, shot_seed)
    write_ppm(path, img)
    return path


def make_dataset(num_models: int, instances: int, scenes: int, shots: int, out_dir, seed: int = 0,
                 size: tuple[int, int] = (384, 384), prefix: str = "cam", exclude=(), workers: int = 1):
    """Render and acquire a labelled dataset; returns the written manifest.

    Every camera instance photographs every scene ``shots`` times.  Images
    go to ``out_dir/images`` as PPM, profile sidecars to
    ``out_dir/profiles``, and the manifest to ``out_dir/manifest.csv``.
    """
    from .pipeline import Manifest, ImageRecord

    if num_models < 2 or instances < 2 or scenes < 4 or shots < 1:
        raise ValueError("need >= 2 models, >= 2 instances per model, >= 4 scenes and >= 1 shot")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "profiles").mkdir(exist_ok=True)
    profiles = draw_profiles(num_models, seed, prefix=prefix, exclude=exclude)
    spec = SceneSpec(*size)
    for p in profiles:
        (out / "profiles" / f"{p.name}.txt").write_text(p.describe())
    (out / "profiles" / "profiles.json").write_text(json.dumps([asdict(p) for p in profiles], indent=1))

    jobs, records = [], []
    for scene in range(scenes):
        for shot in range(shots):
            for p in profiles:
                for inst in range(instances):
                    name = f"{p.name}_i{inst}_s{scene:02d}_k{shot}.ppm"
                    shot_seed = derive_seed("noise", p.seed, inst, scene, shot)
                    jobs.append((spec, p, shot_seed, seed, scene, shot, str(out / "images" / name)))
                    records.append(ImageRecord(f"images/{name}", p.name, f"{p.name}-{inst}", f"scene{scene:02d}"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            list(ex.map(_render_job, jobs))
    else:
        for job in jobs:
            _render_job(job)
    manifest = Manifest(records, [p.name for p in profiles], root=out)
    manifest.write(out / "manifest.csv")
    return manifest


def load_profiles(path) -> list[CameraProfile]:
    return [CameraProfile(**d) for d in json.loads(Path(path).read_text())]


def make_splice(left: CameraProfile, right: CameraProfile, size: tuple[int, int] = (384, 384),
                seed: int = 0) -> np.ndarray:
    """One scene acquired by two profiles; left half from ``left``, right half from ``right``.

    The seam sits on a 64-pixel boundary so every grid block belongs to one camera.
    """
    spec = SceneSpec(size[0], size[1], derive_seed("splice", seed))
    scene = render_scene(spec)
    a = acquire(scene, left, derive_seed("splice-noise", seed, left.name))
    b = acquire(scene, right, derive_seed("splice-noise", seed, right.name))
    half = (size[1] // 2) // 64 * 64
    out = a.copy()
    out[:, half:] = b[:, half:]
    return out
