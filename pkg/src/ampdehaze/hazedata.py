"""Image I/O, synthetic haze, toy unpaired datasets and batch sampling.

Dataset layout on disk::

    <root>/hazy/scene_XXXX.png   hazy renders
    <root>/clear/clear_XXXX.png  clear images of *other* scenes (unpaired)
    <root>/gt/scene_XXXX.png     haze-free sources of the hazy renders
    <root>/manifest.json

``gt/`` is evaluation-only pairing metadata; training never reads it.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(Exception):
    pass


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class TruncatedImageError(ImageError):
    pass


# ---------------------------------------------------------------- image I/O

def _read_ppm(path, data):
    # binary P6 with maxval 255; header tokens may be separated by comments
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedImageError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise UnsupportedFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1
    need = w * h * 3
    body = data[pos:pos + need]
    if len(body) < need:
        raise TruncatedImageError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).copy()


def load_image(path):
    """Read an 8-bit RGB image as a ``(H, W, 3)`` uint8 array (PNG or binary PPM)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ImageNotFoundError(f"{path}: not found") from None
    if data[:2] == b"P6":
        return _read_ppm(path, data)
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        raise UnsupportedFormatError(f"{path}: unsupported image format")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise UnsupportedFormatError(f"{path}: unsupported PNG mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        # the signature matched, so an undecodable stream is a cut-off file
        raise TruncatedImageError(f"{path}: truncated or corrupt PNG ({exc})") from None


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text):
    def write(tmp):
        Path(tmp).write_text(text, encoding="utf-8")
    _atomic_write(path, write)


def save_image(image, path):
    """Write uint8 ``(H, W, 3)`` pixels; the format follows the suffix (.png or .ppm)."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3) pixels, got {image.dtype} {image.shape}")
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        h, w = image.shape[:2]

        def write(tmp):
            with open(tmp, "wb") as fh:
                fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
                fh.write(np.ascontiguousarray(image).tobytes())
    elif suffix == ".png":
        def write(tmp):
            Image.fromarray(image, "RGB").save(tmp, format="PNG")
    else:
        raise UnsupportedFormatError(f"{path}: unsupported image format")
    _atomic_write(path, write)


def to_tensor(image):
    """uint8 ``(H, W, 3)`` -> float32 ``(3, H, W)`` in [0, 1]."""
    return (np.asarray(image, np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_rgb8(tensor):
    """float ``(3, H, W)`` -> uint8 ``(H, W, 3)``, rounding half up."""
    t = np.clip(np.asarray(tensor, np.float64), 0.0, 1.0)
    return np.floor(t * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0).copy()


def load_tensor(path):
    return to_tensor(load_image(path))


# ---------------------------------------------------------------- haze model

@dataclass
class SceneSpec:
    clear: np.ndarray           # (3, H, W) in [0, 1]
    depth: np.ndarray           # (H, W), >= 0
    airlight: tuple             # RGB in [0, 1]
    beta: float                 # scattering coefficient per unit depth

    def transmission(self):
        return np.exp(-self.beta * self.depth)


def synthesize_haze(spec):
    """Atmospheric scattering model ``I = J t + A (1 - t)`` with ``t = exp(-beta d)``."""
    if spec.beta < 0:
        raise ValueError(f"beta must be >= 0, got {spec.beta}")
    if np.any(np.asarray(spec.depth) < 0):
        raise ValueError("depth must be non-negative")
    j = np.asarray(spec.clear)
    a = np.asarray(spec.airlight, dtype=j.dtype).reshape(-1, 1, 1)
    t = spec.transmission().astype(j.dtype)[None]
    return np.clip(j * t + a * (1 - t), 0.0, 1.0)


# ---------------------------------------------------------------- toy scenes

def _smooth_field(rng, size, n_waves=3):
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.3, 2.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _saturated_color(rng):
    c = rng.uniform(0.35, 1.0, 3)
    c[rng.integers(3)] = rng.uniform(0.0, 0.08)
    return c


def toy_clear_image(rng, size):
    """Procedural clear scene: colour gradient, saturated shapes and a stripe texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = _saturated_color(rng), _saturated_color(rng)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + 0.5 * (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)) * 1.4, 0, 1)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 7)):
        col = _saturated_color(rng)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[:, mask] = col[:, None]
    freq = rng.uniform(4, 12)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)))
    img = img * (0.8 + 0.2 * stripes)[None]
    # keep scenes below the airlight range so haze only ever brightens them
    return (0.02 + 0.7 * np.clip(img, 0, 1)).astype(np.float32)


def toy_scene(rng, size):
    clear = toy_clear_image(rng, size)
    depth = 0.5 + 1.5 * _smooth_field(rng, size)
    base = rng.uniform(0.8, 0.92)
    airlight = tuple(float(np.clip(base + rng.uniform(-0.03, 0.03), 0.75, 0.95)) for _ in range(3))
    beta = float(rng.uniform(0.4, 1.2))
    return SceneSpec(clear, depth.astype(np.float32), airlight, beta)


@dataclass
class DatasetIndex:
    hazy_paths: list
    clear_paths: list
    seed: int = 0
    gt_paths: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_root(cls, root, seed=0):
        root = Path(root)
        hazy = sorted(str(p) for p in (root / "hazy").glob("*.png"))
        clear = sorted(str(p) for p in (root / "clear").glob("*.png"))
        gt = sorted(str(p) for p in (root / "gt").glob("*.png"))
        return cls(hazy, clear, seed, gt)

    def tensor(self, path):
        if path not in self._cache:
            self._cache[path] = load_tensor(path)
        return self._cache[path]


def make_toy_dataset(root, seed, n_scenes, size):
    """Render ``n_scenes`` hazy scenes plus ``n_scenes`` clear images of disjoint scenes."""
    if n_scenes < 2:
        raise ValueError("n_scenes must be >= 2")
    root = Path(root)
    try:
        for sub in ("hazy", "clear", "gt"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PermissionError(f"{root}: cannot create dataset directories ({exc})") from None
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        spec = toy_scene(rng, size)
        name = f"scene_{i:04d}.png"
        save_image(to_rgb8(synthesize_haze(spec)), root / "hazy" / name)
        save_image(to_rgb8(spec.clear), root / "gt" / name)
        scenes.append({"name": name, "airlight": [round(a, 6) for a in spec.airlight],
                       "beta": round(spec.beta, 6)})
    for i in range(n_scenes):
        save_image(to_rgb8(toy_clear_image(rng, size)), root / "clear" / f"clear_{i:04d}.png")
    manifest = {"seed": seed, "n_scenes": n_scenes, "size": size, "scenes": scenes}
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"

    def write(tmp):
        Path(tmp).write_text(text)
    _atomic_write(root / "manifest.json", write)
    return DatasetIndex.from_root(root, seed)


# ---------------------------------------------------------------- sampling

def _crop_flip(img, patch, rng):
    _, h, w = img.shape
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    out = img[:, y:y + patch, x:x + patch]
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out), hflip, vflip


def sample_unpaired_batch(index, batch, patch, rng_state, hazy_ids=None):
    """Independent random crops from the hazy and clear pools.

    ``rng_state`` is a numpy bit-generator state dict; the advanced state is
    returned so the caller owns all randomness.  ``hazy_ids`` pins which hazy
    images are used (epoch iteration); clear images are always drawn at random.
    """
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = rng_state
    for path in index.hazy_paths + index.clear_paths:
        _, h, w = index.tensor(path).shape
        if patch > min(h, w):
            raise ValueError(f"patch {patch} larger than image {path} ({h}x{w})")
    if hazy_ids is None:
        hazy_ids = rng.integers(0, len(index.hazy_paths), batch)
    hazy = np.stack([_crop_flip(index.tensor(index.hazy_paths[i]), patch, rng)[0] for i in hazy_ids])
    clear_ids = rng.integers(0, len(index.clear_paths), len(hazy_ids))
    clear = np.stack([_crop_flip(index.tensor(index.clear_paths[i]), patch, rng)[0] for i in clear_ids])
    return hazy, clear, rng.bit_generator.state
