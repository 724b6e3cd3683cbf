"""Procedural clean images and synthetic weather degradations (rain, raindrops, haze, snow).

Images are float64 ``(H, W, 3)`` arrays in [0, 1]. Every random draw comes from
a generator seeded by the caller, so outputs are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from wxrestore.config import DEGRADATION_KINDS, DataConfig
from wxrestore.errors import SpecError

MAX_DENSITY = 10.0
SNOW_COLOR = np.array([0.94, 0.96, 1.0])


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "mixed"
    density: float = 1.0
    intensity: float = 0.8
    angle_deg: float = 10.0
    atmospheric_light: float = 0.8
    transmission_t: float = 0.7
    seed: int = 0

    def validate(self) -> "DegradationSpec":
        if self.kind not in DEGRADATION_KINDS:
            raise SpecError(f"unknown degradation kind {self.kind!r}")
        if self.density < 0:
            raise SpecError(f"density must be >= 0, got {self.density}")
        if not 0 <= self.intensity <= 1:
            raise SpecError(f"intensity must lie in [0, 1], got {self.intensity}")
        if not 0 <= self.atmospheric_light <= 1:
            raise SpecError(f"atmospheric_light must lie in [0, 1], got {self.atmospheric_light}")
        if not 0 < self.transmission_t <= 1:
            raise SpecError(f"transmission_t must lie in (0, 1], got {self.transmission_t}")
        return self

    def describe(self) -> str:
        return (f"kind={self.kind} density={self.density!r} intensity={self.intensity!r} "
                f"angle_deg={self.angle_deg!r} A={self.atmospheric_light!r} "
                f"t={self.transmission_t!r} seed={self.seed}")


@dataclass
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def smooth_noise(shape: tuple[int, int], seed, cells: int = 4) -> np.ndarray:
    """Value noise in [0, 1]: a coarse random lattice upsampled with cubic splines."""
    h, w = shape
    grid = _rng(seed).random((cells + 1, cells + 1))
    field = ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=3, mode="nearest")
    field = field[:h, :w]
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)


def add_haze(img: np.ndarray, A: float, t, seed=None, uneven: bool = False) -> np.ndarray:
    """Atmospheric scattering ``img * t + A * (1 - t)``.

    ``t`` is a scalar or an ``(H, W)`` map. With ``uneven`` the scalar ``t`` is
    modulated by seeded smooth noise to mimic patchy haze.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise SpecError("transmission t must lie in (0, 1]")
    if uneven:
        mod = 0.7 + 0.6 * smooth_noise(img.shape[:2], seed)
        t = np.clip(t * mod, 1e-3, 1.0)
    if t.ndim == 2:
        t = t[..., None]
    return np.clip(img * t + A * (1.0 - t), 0.0, 1.0)


def rain_layer(shape: tuple[int, int], spec: DegradationSpec, seed) -> np.ndarray:
    """Streak intensity layer ``(H, W)`` in [0, 1]."""
    h, w = shape
    rng = _rng(seed)
    density = min(spec.density, MAX_DENSITY)
    count = int(round(density * h * w / 1000 * 8))
    layer = np.zeros((h + 2, w + 2))
    if count == 0:
        return layer[1:-1, 1:-1]
    span = max(h, w)
    for _ in range(count):
        angle = np.deg2rad(spec.angle_deg + rng.normal(0.0, 3.0))
        length = rng.uniform(0.08, 0.3) * span
        width = rng.choice([1, 1, 2])
        bright = spec.intensity * rng.uniform(0.4, 0.9)
        y0, x0 = rng.uniform(-0.1 * h, 1.1 * h), rng.uniform(-0.1 * w, 1.1 * w)
        s = np.linspace(0.0, length, int(length * 2) + 2)
        ys = y0 + s * np.cos(angle)
        xs = x0 + s * np.sin(angle)
        for off in range(width):
            _splat(layer, ys + 1, xs + 1 + off, bright)
    layer = np.minimum(layer[1:-1, 1:-1], 1.0)
    # soften the rasterized segments
    return np.clip(ndimage.gaussian_filter(layer, 0.6), 0.0, 1.0)


def _splat(layer, ys, xs, value):
    h, w = layer.shape
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (1, 0, fy * (1 - fx)),
                       (0, 1, (1 - fy) * fx), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.maximum.at(layer, (yy[ok], xx[ok]), value * wt[ok])


def add_rain_streaks(img: np.ndarray, spec: DegradationSpec, seed) -> np.ndarray:
    if spec.density == 0:
        return img.copy()
    layer = rain_layer(img.shape[:2], spec, seed)[..., None]
    return np.clip(1.0 - (1.0 - img) * (1.0 - layer), 0.0, 1.0)


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    ry: float
    rx: float


def raindrop_layout(shape: tuple[int, int], spec: DegradationSpec, seed) -> list[Blob]:
    """Non-touching elliptical drops; the count is a Poisson draw from the density."""
    h, w = shape
    rng = _rng(seed)
    density = min(spec.density, MAX_DENSITY)
    lam = density * h * w / 512
    count = min(max(1, int(rng.poisson(lam))), max(1, h * w // 300)) if lam > 0 else 0
    rmax = max(2.0, min(h, w) / 9)
    blobs: list[Blob] = []
    while len(blobs) < count:
        for _ in range(200):
            ry = rng.uniform(1.5, rmax)
            rx = ry * rng.uniform(0.7, 1.1)
            cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            # 3 px gap so no two masks touch under 8-connectivity
            if all(np.hypot(cy - b.cy, cx - b.cx) > max(ry, rx) + max(b.ry, b.rx) + 3
                   for b in blobs):
                blobs.append(Blob(cy, cx, ry, rx))
                break
        else:
            if rmax <= 1.5:
                break  # image is full
            rmax = max(1.5, rmax * 0.7)
    return blobs


def blob_mask(shape: tuple[int, int], blobs: list[Blob]) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for b in blobs:
        mask |= ((yy - b.cy) / b.ry) ** 2 + ((xx - b.cx) / b.rx) ** 2 <= 1.0
    return mask


def add_raindrops(img: np.ndarray, spec: DegradationSpec, seed) -> np.ndarray:
    """Refracting drops: each blob shows a blurred, inverted, shifted view of its surroundings."""
    if spec.density == 0:
        return img.copy()
    h, w = img.shape[:2]
    blobs = raindrop_layout((h, w), spec, seed)
    out = img.copy()
    if not blobs:
        return out
    blurred = np.stack([ndimage.gaussian_filter(img[..., c], 1.2) for c in range(3)], -1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for b in blobs:
        inside = ((yy - b.cy) / b.ry) ** 2 + ((xx - b.cx) / b.rx) ** 2 <= 1.0
        ys, xs = yy[inside], xx[inside]
        # inverted lens: sample a region ~2.5x larger, mirrored about the centre, shifted up
        src_y = b.cy - 2.5 * (ys - b.cy) - 1.5 * b.ry
        src_x = b.cx - 2.5 * (xs - b.cx)
        for c in range(3):
            vals = ndimage.map_coordinates(blurred[..., c], [src_y, src_x], order=1,
                                           mode="mirror")
            out[inside, c] = np.clip(vals * (0.9 + 0.2 * spec.intensity) + 0.04, 0.0, 1.0)
    return out


def snow_layers(shape: tuple[int, int], spec: DegradationSpec, seed):
    """Return ``(translucent_alpha, opaque_mask)`` for a snow overlay."""
    h, w = shape
    rng = _rng(seed)
    density = min(spec.density, MAX_DENSITY)
    n_small = int(round(density * h * w / 60))
    n_big = int(round(density * h * w / 800))
    point = np.zeros((h, w))
    if n_small:
        ys, xs = rng.integers(0, h, n_small), rng.integers(0, w, n_small)
        np.maximum.at(point, (ys, xs), rng.uniform(0.6, 1.0, n_small))
    translucent = ndimage.gaussian_filter(point, 0.7)
    if translucent.max() > 0:
        translucent = translucent / translucent.max()
    translucent = np.clip(translucent * spec.intensity * 0.5 * 2.0, 0.0, spec.intensity * 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    opaque = np.zeros((h, w), dtype=bool)
    for _ in range(n_big):
        cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0.8, 2.0)
        opaque |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return translucent, opaque


def add_snow(img: np.ndarray, spec: DegradationSpec, seed) -> np.ndarray:
    if spec.density == 0:
        return img.copy()
    alpha, opaque = snow_layers(img.shape[:2], spec, seed)
    layer = alpha[..., None] * SNOW_COLOR
    out = np.clip(1.0 - (1.0 - img) * (1.0 - layer), 0.0, 1.0)
    out[opaque] = SNOW_COLOR
    return out


def _haze_from_spec(img, spec: DegradationSpec, seed):
    if spec.density == 0:
        return img.copy()
    strength = min(spec.density, 1.0)
    t = 1.0 - strength * (1.0 - spec.transmission_t)
    return add_haze(img, spec.atmospheric_light, t, seed=seed, uneven=True)


def apply_degradation(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Degrade ``img`` per ``spec``; ``mixed`` stacks haze, rain and drops or snow."""
    spec.validate()
    if spec.density == 0:
        return img.copy()
    ss = np.random.SeedSequence(spec.seed)
    s_haze, s_rain, s_extra, s_pick = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    if spec.kind == "haze":
        return _haze_from_spec(img, spec, s_haze)
    if spec.kind == "rain_streak":
        return add_rain_streaks(img, spec, s_rain)
    if spec.kind == "raindrop":
        return add_raindrops(img, spec, s_extra)
    if spec.kind == "snow":
        return add_snow(img, spec, s_extra)
    out = _haze_from_spec(img, spec, s_haze)
    out = add_rain_streaks(out, spec, s_rain)
    if _rng(s_pick).random() < 0.5:
        return add_raindrops(out, spec, s_extra)
    return add_snow(out, replace(spec, density=spec.density * 0.5), s_extra)


# ---------------------------------------------------------------- clean images


def procedural_image(size: int, seed) -> np.ndarray:
    """Gradient background with filled shapes and stripe texture."""
    rng = _rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * yy + np.sin(ang) * xx)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.05, 0.7, 3), rng.uniform(0.05, 0.7, 3)
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.0, 0.85, 3)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        shape = rng.integers(0, 3)
        if shape == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif shape == 1:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.4, 1.5))
        else:
            mask = (yy - cy) + np.abs(xx - cx) <= r
            mask &= yy >= cy - r
        if rng.random() < 0.4:
            freq = rng.uniform(8, 24)
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)))
            fill = color * (0.75 + 0.25 * stripes[..., None])
        else:
            fill = np.broadcast_to(color, img.shape)
        img = np.where(mask[..., None], fill, img)
    img = img + rng.normal(0.0, 0.015, img.shape)
    img = np.stack([ndimage.gaussian_filter(img[..., c], 0.6) for c in range(3)], -1)
    return np.clip(img, 0.0, 1.0)


def specs_from_config(cfg: DataConfig) -> list[DegradationSpec]:
    return [DegradationSpec(kind=k, density=cfg.density, intensity=cfg.intensity,
                            angle_deg=cfg.angle_deg, atmospheric_light=cfg.atmospheric_light,
                            transmission_t=cfg.transmission).validate()
            for k in cfg.kinds]


def _jitter(spec: DegradationSpec, rng: np.random.Generator) -> DegradationSpec:
    return replace(
        spec,
        density=spec.density * rng.uniform(0.6, 1.4),
        intensity=float(np.clip(spec.intensity * rng.uniform(0.8, 1.2), 0.0, 1.0)),
        angle_deg=spec.angle_deg + rng.uniform(-20.0, 20.0),
        atmospheric_light=float(np.clip(spec.atmospheric_light + rng.uniform(-0.1, 0.1), 0, 1)),
        transmission_t=float(np.clip(spec.transmission_t * rng.uniform(0.8, 1.25), 0.05, 1.0)),
    )


def generate_sample(k: int, specs: list[DegradationSpec], size: int, seed: int,
                    jitter: bool = True) -> PairedSample:
    """Sample ``k`` of a dataset; depends only on ``(seed, k)`` and the arguments."""
    if not specs:
        raise SpecError("at least one degradation spec is required")
    rng = _rng([seed, k])
    clean = procedural_image(size, int(rng.integers(2**63)))
    spec = specs[k % len(specs)]
    if jitter:
        spec = _jitter(spec, rng)
    spec = replace(spec, seed=int(rng.integers(2**63))).validate()
    return PairedSample(clean=clean, degraded=apply_degradation(clean, spec), spec=spec)


def synth_dataset(n: int, specs: list[DegradationSpec], size: int = 64, seed: int = 0,
                  jitter: bool = True, start: int = 0) -> list[PairedSample]:
    if n < 1:
        raise SpecError("n must be >= 1")
    if not specs:
        raise SpecError("at least one degradation spec is required")
    return [generate_sample(k, specs, size, seed, jitter) for k in range(start, start + n)]
