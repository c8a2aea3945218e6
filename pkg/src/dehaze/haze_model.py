"""Haze formation, procedural RGB-D scenes and paired dataset synthesis."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

A_RANGE = (0.7, 1.0)
BETA_RANGE = (0.6, 1.6)
T_MIN = 0.05
SATURATION_RANGE = (0.3, 1.0)
VALUE_RANGE = (0.25, 1.0)


@dataclass(frozen=True)
class HazeParams:
    A: float
    beta: float


@dataclass
class Scene:
    clear: np.ndarray  # (1, 3, H, W) in [0, 1]
    depth: np.ndarray  # (1, 1, H, W), non-negative


@dataclass
class Sample:
    hazy: np.ndarray
    clear: np.ndarray
    transmission: np.ndarray
    params: HazeParams
    depth: np.ndarray | None = None
    scene_id: int = 0
    sample_id: int = 0


def transmission_from_depth(depth: np.ndarray, beta: float) -> np.ndarray:
    """t = exp(-beta * d)."""
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite and non-negative")
    return np.exp(-beta * depth)


def synthesize_hazy(clear: np.ndarray, transmission: np.ndarray, A: float) -> np.ndarray:
    """I = J*t + A*(1 - t), with t broadcast across colour channels."""
    if not 0 < A <= 1:
        raise ValueError(f"A must lie in (0, 1], got {A}")
    t = np.asarray(transmission)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("transmission must lie in (0, 1]")
    if t.shape[-2:] != clear.shape[-2:]:
        raise ValueError(f"transmission {t.shape} does not match image {clear.shape}")
    return clear * t + A * (1 - t)


def analytic_dehaze(hazy: np.ndarray, transmission: np.ndarray, A: float, t_min: float = T_MIN) -> np.ndarray:
    """Invert the scattering model given the true transmission and airlight."""
    t = np.maximum(transmission, t_min)
    return np.clip((hazy - A * (1 - t)) / t, 0.0, 1.0)


def sample_haze_params(rng: np.random.Generator) -> HazeParams:
    A = rng.uniform(*A_RANGE)
    beta = rng.uniform(*BETA_RANGE)
    return HazeParams(float(A), float(beta))


def _smoothstep_ramp(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1)
    proj -= proj.min()
    return proj / max(proj.max(), 1e-12)


def random_color(rng: np.random.Generator) -> np.ndarray:
    """Saturated colour drawn in HSV, so most pixels have one dark channel."""
    hue, sat, val = rng.random(), rng.uniform(*SATURATION_RANGE), rng.uniform(*VALUE_RANGE)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def generate_scene(rng: np.random.Generator, height: int, width: int, num_regions: int | None = None) -> Scene:
    """Random coloured rectangles and gradients over a sloped depth field.

    Each rectangle carries its own depth plane; a smooth global ramp is added
    to everything and the result is rescaled so depth spans [0, 1].
    """
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w]
    base = random_color(rng)
    tint = rng.uniform(-0.3, 0.3, size=3)
    ramp = _smoothstep_ramp(h, w, rng)
    image = np.clip(base[:, None, None] + tint[:, None, None] * ramp[None], 0, 1)
    depth = 0.6 + 0.4 * ramp

    if num_regions is None:
        num_regions = int(rng.integers(3, 9))
    for _ in range(num_regions):
        rh = int(rng.integers(max(2, h // 8), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 8), max(3, w // 2) + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        sl = (slice(top, top + rh), slice(left, left + rw))
        color = random_color(rng)
        if rng.random() < 0.5:
            # horizontal or vertical colour gradient inside the rectangle
            other = random_color(rng)
            u = (xx[sl] - left) / max(rw - 1, 1) if rng.random() < 0.5 else (yy[sl] - top) / max(rh - 1, 1)
            patch = color[:, None, None] * (1 - u)[None] + other[:, None, None] * u[None]
        else:
            patch = np.broadcast_to(color[:, None, None], (3, rh, rw))
        image[:, sl[0], sl[1]] = patch
        near = rng.uniform(0.0, 0.8)
        gy, gx = rng.uniform(-0.2, 0.2, size=2)
        plane = near + gy * (yy[sl] - top) / max(h, 1) + gx * (xx[sl] - left) / max(w, 1)
        depth[sl] = plane

    depth = depth + 0.3 * ramp
    depth -= depth.min()
    depth /= max(depth.max(), 1e-12)
    return Scene(image[None].astype(np.float64), depth[None, None].astype(np.float64))


def make_sample(scene: Scene, params: HazeParams, scene_id: int = 0, sample_id: int = 0) -> Sample:
    t = transmission_from_depth(scene.depth, params.beta)
    hazy = synthesize_hazy(scene.clear, t, params.A)
    return Sample(hazy, scene.clear, t, params, scene.depth, scene_id, sample_id)


def scene_samples(scene: Scene, scene_seed: int, samples_per_scene: int, scene_id: int) -> list[Sample]:
    rng = np.random.default_rng([scene_seed, 1])
    return [make_sample(scene, sample_haze_params(rng), scene_id, k) for k in range(samples_per_scene)]


def build_dataset(
    seed: int,
    num_scenes: int,
    samples_per_scene: int,
    height: int,
    width: int,
    val_scenes: int = 0,
    scenes: list[Scene] | None = None,
) -> tuple[list[Sample], list[Sample]]:
    """Synthesize train and validation samples.

    Scene ``i`` is generated from seed ``seed + i`` (train scenes first, then
    validation scenes), so each scene is independent of generation order.
    ``scenes`` replaces procedural generation with supplied RGB-D scenes; the
    first ``num_scenes`` go to training and the next ``val_scenes`` to
    validation.
    """
    total = num_scenes + val_scenes
    if scenes is not None and len(scenes) < total:
        raise ValueError(f"need {total} scenes, got {len(scenes)}")
    out: list[Sample] = []
    for i in range(total):
        scene_seed = seed + i
        if scenes is None:
            scene = generate_scene(np.random.default_rng([scene_seed, 0]), height, width)
        else:
            scene = scenes[i]
        out.extend(scene_samples(scene, scene_seed, samples_per_scene, i))
    split = num_scenes * samples_per_scene
    return out[:split], out[split:]


def vivid(image: np.ndarray, saturation: float = 1.4, contrast: float = 1.2) -> np.ndarray:
    """Saturation and contrast boost used to fake a high-quality photo domain."""
    gray = image.mean(axis=1, keepdims=True)
    out = gray + saturation * (image - gray)
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip(mean + contrast * (out - mean), 0, 1)
