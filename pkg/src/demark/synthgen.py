"""Synthetic watermarked-image generation.

Random character strings are rasterized, rotated and alpha-matted onto
background images::

    corrupted = alpha * watermark + (1 - alpha) * original

Each emitted sample is a quad (corrupted, original, mask, alpha) stored as
lossless 8-bit PNGs next to a ``manifest.json``.  Alpha values are kept on
the 1/255 grid from the start, so a serialized sample decodes to exactly the
alpha that produced it and ``mask == (alpha > 0)`` survives the round trip.
"""

from __future__ import annotations

import json
import logging
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import ConfigError, DegenerateSpecError, InputError, ShapeError, ValidationError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LAYOUT_DIRS = ("corrupted", "original", "mask", "alpha")

# font_id -> font source; id 0 is the font bundled with Pillow itself
FONTS = (
    None,
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSansMono.ttf",
)

_PAD = 2


@lru_cache(maxsize=256)
def load_font(font_id: int, size: int) -> ImageFont.FreeTypeFont:
    if not 0 <= font_id < len(FONTS):
        raise ConfigError(f"unknown font_id {font_id}; valid ids are 0..{len(FONTS) - 1}")
    if size < 1:
        raise ConfigError(f"font size must be >= 1, got {size}")
    name = FONTS[font_id]
    if name is None:
        return ImageFont.load_default(size)
    try:
        return ImageFont.truetype(name, size)
    except OSError as exc:
        raise ConfigError(f"font {name!r} (font_id {font_id}) is not installed") from exc


@dataclass(frozen=True)
class WatermarkSpec:
    text: str
    font_id: int = 0
    font_size_px: int = 24
    rotation_deg: float = 0.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    opacity_range: tuple[float, float] = (0.3, 1.0)
    position: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if len(self.text) < 1:
            raise DegenerateSpecError("watermark text must have at least one character")
        lo, hi = self.opacity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError(f"opacity_range must satisfy 0 <= lo <= hi <= 1, got {self.opacity_range}")
        if len(self.color) != 3 or not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValidationError(f"color must be an RGB triple in [0, 1], got {self.color}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkSpec":
        return cls(
            text=d["text"],
            font_id=int(d["font_id"]),
            font_size_px=int(d["font_size_px"]),
            rotation_deg=float(d["rotation_deg"]),
            color=tuple(float(c) for c in d["color"]),
            opacity_range=tuple(float(o) for o in d["opacity_range"]),
            position=tuple(int(p) for p in d["position"]),
        )


@dataclass(frozen=True)
class GeneratorConfig:
    """Sampling distribution for watermark specs and output resolution."""

    image_hw: tuple[int, int] = (512, 512)
    opacity_range: tuple[float, float] = (0.3, 1.0)
    text_length: tuple[int, int] = (4, 12)
    alphabet: str = string.ascii_letters + string.digits
    fonts: tuple[int, ...] = tuple(range(len(FONTS)))
    # font size as a fraction of the shorter image side
    font_size_frac: tuple[float, float] = (0.06, 0.2)
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    min_font_size_px: int = 8

    def __post_init__(self):
        h, w = self.image_hw
        if h < 1 or w < 1:
            raise ConfigError(f"image_hw must be positive, got {self.image_hw}")
        lo, hi = self.opacity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"opacity_range must satisfy 0 <= lo <= hi <= 1, got {self.opacity_range}")
        if not 1 <= self.text_length[0] <= self.text_length[1]:
            raise ConfigError(f"text_length must satisfy 1 <= lo <= hi, got {self.text_length}")
        if not self.alphabet:
            raise ConfigError("alphabet is empty")
        if not self.fonts:
            raise ConfigError("no fonts configured")
        for f in self.fonts:
            if not 0 <= f < len(FONTS):
                raise ConfigError(f"unknown font_id {f}")
        if not 0.0 < self.font_size_frac[0] <= self.font_size_frac[1]:
            raise ConfigError(f"bad font_size_frac {self.font_size_frac}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("image_hw", "opacity_range", "text_length", "fonts", "font_size_frac", "rotation_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class WatermarkSample:
    """One training quad, all arrays float64 in channel-first layout."""

    corrupted: np.ndarray  # (3, H, W)
    original: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W) in {0, 1}
    alpha: np.ndarray  # (1, H, W) in [0, 1]
    spec: WatermarkSpec
    seed: int
    metadata: dict = field(default_factory=dict)

    def watermark_image(self) -> np.ndarray:
        return _color_plane(self.spec.color, self.original.shape[1:])


def _color_plane(color, hw) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=np.float64)[:, None, None], (3, *hw)).copy()


def glyph_coverage(text: str, font_id: int, font_size_px: int, rotation_deg: float = 0.0) -> np.ndarray:
    """Anti-aliased coverage (uint8) of the rendered string, cropped to its tight box."""
    font = load_font(font_id, font_size_px)
    left, top, right, bottom = font.getbbox(text)
    if right <= left or bottom <= top:
        raise DegenerateSpecError(f"text {text!r} renders to an empty bounding box")
    canvas = Image.new("L", (right - left + 2 * _PAD, bottom - top + 2 * _PAD), 0)
    ImageDraw.Draw(canvas).text((_PAD - left, _PAD - top), text, fill=255, font=font)
    if rotation_deg:
        canvas = canvas.rotate(rotation_deg, resample=Image.BILINEAR, expand=True)
    box = canvas.getbbox()
    if box is None:
        raise DegenerateSpecError(f"text {text!r} renders no visible pixels")
    return np.asarray(canvas.crop(box), dtype=np.uint8)


def render_watermark(spec: WatermarkSpec, canvas_hw: tuple[int, int], rng_seed: int):
    """Rasterize ``spec`` onto an (H, W) canvas.

    Returns ``(watermark_image, alpha)`` with shapes (3, H, W) and (1, H, W).
    The opacity is drawn uniformly from ``spec.opacity_range`` using
    ``rng_seed``; alpha is nonzero exactly where the glyph has coverage
    (unless the opacity is zero).
    """
    h, w = canvas_hw
    cov = glyph_coverage(spec.text, spec.font_id, spec.font_size_px, spec.rotation_deg)
    gh, gw = cov.shape
    x, y = spec.position
    if x < 0 or y < 0 or x + gw > w or y + gh > h:
        raise ValidationError(
            f"glyph box {gw}x{gh} at {spec.position} does not fit a {w}x{h} canvas"
        )
    lo, hi = spec.opacity_range
    opacity = np.random.default_rng(rng_seed).uniform(lo, hi)
    # ceil keeps every covered pixel strictly positive after quantization
    level = np.minimum(np.ceil(cov.astype(np.float64) * opacity), 255.0)
    alpha = np.zeros((1, h, w), dtype=np.float64)
    alpha[0, y:y + gh, x:x + gw] = level / 255.0
    return _color_plane(spec.color, (h, w)), alpha


def _check_unit_range(name, x):
    lo, hi = float(x.min()), float(x.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1], got range [{lo}, {hi}]")


def composite(original, watermark_image, alpha):
    """Alpha-matte ``watermark_image`` over ``original``.

    Works on numpy arrays or torch tensors; shapes must broadcast.
    """
    try:
        np.broadcast_shapes(tuple(original.shape), tuple(watermark_image.shape), tuple(alpha.shape))
    except ValueError as exc:
        raise ShapeError(
            f"shapes do not broadcast: original {tuple(original.shape)}, "
            f"watermark {tuple(watermark_image.shape)}, alpha {tuple(alpha.shape)}"
        ) from exc
    for name, x in (("original", original), ("watermark_image", watermark_image), ("alpha", alpha)):
        _check_unit_range(name, x)
    return alpha * watermark_image + (1 - alpha) * original


def sample_spec(rng: np.random.Generator, config: GeneratorConfig) -> WatermarkSpec:
    """Draw a random spec that fits ``config.image_hw``."""
    h, w = config.image_hw
    n = int(rng.integers(config.text_length[0], config.text_length[1] + 1))
    text = "".join(rng.choice(list(config.alphabet), size=n))
    font_id = int(config.fonts[int(rng.integers(len(config.fonts)))])
    size = max(config.min_font_size_px, int(round(rng.uniform(*config.font_size_frac) * min(h, w))))
    rotation = float(rng.uniform(*config.rotation_range))
    color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
    while True:
        cov = glyph_coverage(text, font_id, size, rotation)
        gh, gw = cov.shape
        if gh <= h and gw <= w:
            break
        if size > config.min_font_size_px:
            size = max(config.min_font_size_px, int(size * 0.85))
        elif len(text) > 1:
            text = text[:-1]
        else:
            raise DegenerateSpecError(f"no glyph fits a {w}x{h} canvas")
    x = int(rng.integers(0, w - gw + 1))
    y = int(rng.integers(0, h - gh + 1))
    return WatermarkSpec(
        text=text,
        font_id=font_id,
        font_size_px=size,
        rotation_deg=rotation,
        color=color,
        opacity_range=config.opacity_range,
        position=(x, y),
    )


def fit_background(img: Image.Image, hw: tuple[int, int]) -> np.ndarray:
    """Center-crop to the target aspect ratio, resize, return (3, H, W) float64."""
    h, w = hw
    img = img.convert("RGB")
    iw, ih = img.size
    scale = min(iw / w, ih / h)
    cw, ch = max(1, round(w * scale)), max(1, round(h * scale))
    left, top = (iw - cw) // 2, (ih - ch) // 2
    img = img.crop((left, top, left + cw, top + ch))
    if img.size != (w, h):
        img = img.resize((w, h), resample=Image.BICUBIC)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def child_seed(seed: int, index: int) -> int:
    """Per-sample seed, independent of generation order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_sample(background: np.ndarray, config: GeneratorConfig, seed: int) -> WatermarkSample:
    rng = np.random.default_rng(seed)
    spec = sample_spec(rng, config)
    watermark, alpha = render_watermark(spec, config.image_hw, int(rng.integers(2**32)))
    corrupted = composite(background, watermark, alpha)
    return WatermarkSample(
        corrupted=corrupted,
        original=background,
        mask=(alpha > 0).astype(np.float64),
        alpha=alpha,
        spec=spec,
        seed=seed,
    )


def list_backgrounds(background_dir) -> list[Path]:
    """Decodable images in ``background_dir`` (sorted); undecodable files are skipped."""
    root = Path(background_dir)
    if not root.is_dir():
        raise InputError(f"background directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.is_file())
    good = []
    for p in files:
        try:
            with Image.open(p) as im:
                im.verify()
            good.append(p)
        except Exception as exc:  # PIL raises a wide range of types here
            log.warning("skipping undecodable background %s: %s", p.name, exc)
    if not good:
        raise InputError(f"no decodable background images in {root}")
    return good


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _save_png(path: Path, chw: np.ndarray):
    arr = _to_u8(chw)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def sample_files(index: int) -> dict[str, str]:
    return {d: f"{d}/{index:06d}.png" for d in LAYOUT_DIRS}


def write_sample(out_dir, index: int, sample: WatermarkSample) -> dict[str, str]:
    out_dir = Path(out_dir)
    files = sample_files(index)
    for d in LAYOUT_DIRS:
        (out_dir / d).mkdir(parents=True, exist_ok=True)
    _save_png(out_dir / files["corrupted"], sample.corrupted)
    _save_png(out_dir / files["original"], sample.original)
    _save_png(out_dir / files["mask"], sample.mask)
    _save_png(out_dir / files["alpha"], sample.alpha)
    return files


def generate_dataset(background_dir, out_dir, count: int, seed: int, config: GeneratorConfig | None = None,
                     workers: int = 1) -> dict:
    """Write ``count`` samples plus ``manifest.json`` to ``out_dir``.

    Output bytes depend only on (backgrounds, config, seed); ``workers`` does
    not change them.
    """
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    config = config or GeneratorConfig()
    backgrounds = list_backgrounds(background_dir)
    out_dir = Path(out_dir)
    for d in LAYOUT_DIRS:
        (out_dir / d).mkdir(parents=True, exist_ok=True)

    def make(index):
        s = child_seed(seed, index)
        bg_path = backgrounds[int(np.random.default_rng(s).integers(len(backgrounds)))]
        with Image.open(bg_path) as im:
            bg = fit_background(im, config.image_hw)
        sample = generate_sample(bg, config, s)
        files = write_sample(out_dir, index, sample)
        return {"index": index, "seed": s, "background": bg_path.name,
                "spec": sample.spec.to_dict(), "files": files}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(make, range(count)))
    else:
        entries = [make(i) for i in range(count)]

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "count": count,
        "config": asdict(config),
        "samples": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.is_file():
        raise InputError(f"{path} not found")
    return json.loads(path.read_text())


def load_sample(dataset_dir, entry: dict) -> WatermarkSample:
    root = Path(dataset_dir)
    missing = [f for f in entry["files"].values() if not (root / f).is_file()]
    if missing:
        raise InputError(f"missing files for sample {entry['index']}: {', '.join(missing)}")
    arrays = {k: _read_png(root / f) for k, f in entry["files"].items()}
    return WatermarkSample(
        corrupted=arrays["corrupted"],
        original=arrays["original"],
        mask=(arrays["mask"] > 0.5).astype(np.float64),
        alpha=arrays["alpha"],
        spec=WatermarkSpec.from_dict(entry["spec"]),
        seed=int(entry["seed"]),
        metadata={"index": entry["index"], "background": entry.get("background")},
    )


def make_backgrounds(out_dir, count: int, hw: tuple[int, int] = (128, 128), seed: int = 0) -> list[Path]:
    """Write smooth random RGB images, a stand-in corpus when no photos are at hand."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = hw
    paths = []
    for i in range(count):
        coarse = rng.uniform(0, 255, size=(int(rng.integers(2, 9)), int(rng.integers(2, 9)), 3))
        img = Image.fromarray(coarse.astype(np.uint8), "RGB").resize((w, h), resample=Image.BICUBIC)
        detail = rng.normal(0, 6, size=(h, w, 3))
        arr = np.clip(np.asarray(img, dtype=np.float64) + detail, 0, 255).astype(np.uint8)
        p = out_dir / f"bg_{i:04d}.png"
        Image.fromarray(arr, "RGB").save(p, format="PNG")
        paths.append(p)
    return paths
