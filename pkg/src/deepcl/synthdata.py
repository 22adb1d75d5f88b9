"""Synthetic bi-temporal scenes with exact change masks and pseudo-changes.

A scene is a smooth random background with non-overlapping axis-aligned
rectangles. The second epoch adds or removes some rectangles (real change,
recorded in the mask) and then receives an illumination shift, a small
misregistration and sensor noise (pseudo-change, never in the mask).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import IntegrityError, from_bytes, to_bytes

Rect = tuple[int, int, int, int]  # top, left, height, width


@dataclass
class SceneConfig:
    size: int = 64
    n_objects: tuple[int, int] = (4, 10)
    object_size: tuple[int, int] = (6, 16)
    p_change: float = 0.3
    gain: tuple[float, float] = (0.8, 1.2)
    bias: tuple[float, float] = (-0.1, 0.1)
    shift_px: tuple[int, ...] = (0, 1, 2)
    noise_sigma: float = 0.02

    def __post_init__(self):
        self.n_objects = tuple(self.n_objects)
        self.object_size = tuple(self.object_size)
        self.gain = tuple(self.gain)
        self.bias = tuple(self.bias)
        self.shift_px = tuple(self.shift_px)
        if not 0 <= self.p_change <= 1:
            raise ValueError(f"p_change must be in [0, 1], got {self.p_change}")
        if self.n_objects[0] < 0 or self.n_objects[0] > self.n_objects[1]:
            raise ValueError(f"bad n_objects range {self.n_objects}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def pseudo_only(cls, **kw) -> "SceneConfig":
        """No real change; every pseudo-change source active."""
        kw.setdefault("shift_px", (1, 2))
        return cls(p_change=0.0, **kw)


@dataclass
class ChangeSample:
    img_t1: np.ndarray  # [3,H,W] float32 in [0,1]
    img_t2: np.ndarray
    mask: np.ndarray  # [1,H,W] uint8
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, ChangeSample)
                and np.array_equal(self.img_t1, other.img_t1)
                and np.array_equal(self.img_t2, other.img_t2)
                and np.array_equal(self.mask, other.mask))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # coarse 4x4 grid of colours, bilinearly enlarged
    coarse = rng.uniform(0.15, 0.45, size=(3, 4, 4))
    src = np.clip((np.arange(size) + 0.5) * 4 / size - 0.5, 0, 3)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, 3)
    w = src - i0
    rows = coarse[:, i0] * (1 - w)[None, :, None] + coarse[:, i1] * w[None, :, None]
    return rows[:, :, i0] * (1 - w) + rows[:, :, i1] * w


def _place(rng, size: int, lo: int, hi: int, taken: list[Rect], tries: int = 50) -> Rect | None:
    for _ in range(tries):
        h, w = rng.integers(lo, hi + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        r = (int(top), int(left), int(h), int(w))
        # keep one pixel of background between objects
        if all(r[0] + r[2] + 1 <= t or t + th + 1 <= r[0] or r[1] + r[3] + 1 <= l
               or l + tw + 1 <= r[1] for t, l, th, tw in taken):
            return r
    return None


def _paint(img: np.ndarray, r: Rect, colour: np.ndarray) -> None:
    t, l, h, w = r
    img[:, t:t + h, l:l + w] = colour[:, None, None]


def translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Move content by (dy, dx) pixels, replicating edge pixels into the gap."""
    H, W = img.shape[-2:]
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return img[..., rows[:, None], cols[None, :]]


def inject_pseudo_change(img: np.ndarray, gain: float, bias: float,
                         shift_px: int | tuple[int, int], noise_sigma: float,
                         seed: int | np.random.Generator | None = None) -> np.ndarray:
    """clamp(gain * translate(img) + bias + N(0, sigma^2), 0, 1).

    An integer ``shift_px`` moves content down and right by that many pixels;
    a ``(dy, dx)`` pair gives the direction explicitly.
    """
    dy, dx = (shift_px, shift_px) if np.isscalar(shift_px) else shift_px
    out = gain * translate(np.asarray(img, dtype=np.float64), int(dy), int(dx)) + bias
    if noise_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> ChangeSample:
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    S = cfg.size
    bg = _background(rng, S)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    objects: list[Rect] = []
    colours = []
    for _ in range(n):
        r = _place(rng, S, *cfg.object_size, objects)
        if r is None:
            break
        objects.append(r)
        colours.append(rng.uniform(0.5, 1.0, size=3) * rng.choice([1.0, 0.3], p=[0.7, 0.3]))

    t1 = bg.copy()
    for r, c in zip(objects, colours):
        _paint(t1, r, c)
    t2 = bg.copy()
    mask = np.zeros((1, S, S), dtype=np.uint8)
    # each object changes with p_change: either it disappears or a new one appears
    kept, removed, added = [], [], []
    taken = list(objects)
    for r, c in zip(objects, colours):
        if rng.random() >= cfg.p_change:
            kept.append((r, c))
        elif rng.random() < 0.5:
            removed.append(r)
        else:
            kept.append((r, c))
            new = _place(rng, S, *cfg.object_size, taken)
            if new is not None:
                taken.append(new)
                added.append((new, rng.uniform(0.5, 1.0, size=3)))
    for r, c in kept + added:
        _paint(t2, r, c)
    for t, l, h, w in removed + [r for r, _ in added]:
        mask[0, t:t + h, l:l + w] = 1

    gain = float(rng.uniform(*cfg.gain))
    bias = float(rng.uniform(*cfg.bias))
    shift = int(rng.choice(cfg.shift_px))
    direction = [(1, 0), (-1, 0), (0, 1), (0, -1)][int(rng.integers(4))]
    noise_seed = int(rng.integers(2**63))
    t2 = inject_pseudo_change(t2, gain, bias, (direction[0] * shift, direction[1] * shift),
                              cfg.noise_sigma, noise_seed)
    meta = {
        "seed": int(seed), "gain": gain, "bias": bias, "shift_px": shift,
        "shift_dir": list(direction), "noise_sigma": cfg.noise_sigma,
        "n_objects": len(objects), "n_added": len(added), "n_removed": len(removed),
        "removed": [list(r) for r in removed], "added": [list(r) for r, _ in added],
    }
    return ChangeSample(np.clip(t1, 0, 1).astype(np.float32), t2.astype(np.float32), mask, meta)


def generate_dataset(n: int, base_seed: int, cfg: SceneConfig | None = None) -> list[ChangeSample]:
    return [generate_scene(base_seed + i, cfg) for i in range(n)]


# ---------------------------------------------------------------------------
# persistence: manifest.json + sample_%06d.dclt (three DCLT records each)


def _sample_bytes(s: ChangeSample) -> bytes:
    return to_bytes(s.img_t1) + to_bytes(s.img_t2) + to_bytes(s.mask.astype(np.float32))


def write_dataset(samples: list[ChangeSample], out_dir: str | Path,
                  cfg: SceneConfig | None = None, base_seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = []
    for i, s in enumerate(samples):
        blob = _sample_bytes(s)
        (out / f"sample_{i:06d}.dclt").write_bytes(blob)
        digests.append(hashlib.sha256(blob).hexdigest())
    size = int(samples[0].img_t1.shape[-1]) if samples else 0
    manifest = {
        "format": "deepcl-dataset/1",
        "count": len(samples),
        "size": size,
        "base_seed": base_seed,
        "seeds": [s.meta.get("seed") for s in samples],
        "config": asdict(cfg) if cfg is not None else None,
        "meta": [s.meta for s in samples],
        "sha256": digests,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    return json.loads(path.read_text())


def read_dataset(data_dir: str | Path) -> list[ChangeSample]:
    d = Path(data_dir)
    manifest = read_manifest(d)
    files = sorted(d.glob("sample_*.dclt"))
    if len(files) != manifest["count"]:
        raise IntegrityError(f"{d}: manifest count {manifest['count']} but {len(files)} sample files")
    samples = []
    for i in range(manifest["count"]):
        path = d / f"sample_{i:06d}.dclt"
        if not path.exists():
            raise FileNotFoundError(f"missing sample file: {path}")
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["sha256"][i]:
            raise IntegrityError(f"sample {i}: checksum mismatch ({path})")
        try:
            t1, pos = from_bytes(blob)
            t2, pos = from_bytes(blob, pos)
            m, pos = from_bytes(blob, pos)
        except IntegrityError as exc:
            raise IntegrityError(f"sample {i}: {exc}") from exc
        if pos != len(blob):
            raise IntegrityError(f"sample {i}: {len(blob) - pos} trailing bytes")
        meta = manifest["meta"][i] if manifest.get("meta") else {}
        samples.append(ChangeSample(t1, t2, m.astype(np.uint8), meta))
    return samples


def regenerate_dataset(data_dir: str | Path) -> list[ChangeSample]:
    """Rebuild a generated dataset from its manifest's seeds and config."""
    manifest = read_manifest(data_dir)
    if manifest.get("config") is None:
        raise ValueError(f"{data_dir}: dataset was not generated (no config in manifest)")
    cfg = SceneConfig(**manifest["config"])
    return [generate_scene(s, cfg) for s in manifest["seeds"]]


def load_image_pairs(data_dir: str | Path) -> list[ChangeSample]:
    """Read ``<id>_A.png``, ``<id>_B.png``, ``<id>_label.png`` triplets."""
    from PIL import Image

    d = Path(data_dir)
    ids = sorted(p.name[:-len("_A.png")] for p in d.glob("*_A.png"))
    missing = [i for i in ids if not (d / f"{i}_B.png").exists() or not (d / f"{i}_label.png").exists()]
    if missing:
        raise FileNotFoundError(f"incomplete triplets in {d} for ids: {', '.join(missing)}")
    samples = []
    for i in ids:
        a = np.asarray(Image.open(d / f"{i}_A.png").convert("RGB"), dtype=np.float32) / 255.0
        b = np.asarray(Image.open(d / f"{i}_B.png").convert("RGB"), dtype=np.float32) / 255.0
        lab = np.asarray(Image.open(d / f"{i}_label.png").convert("L"))
        if not (a.shape == b.shape and a.shape[:2] == lab.shape):
            raise ValueError(f"{i}: size mismatch A {a.shape[:2]}, B {b.shape[:2]}, label {lab.shape}")
        samples.append(ChangeSample(a.transpose(2, 0, 1).copy(), b.transpose(2, 0, 1).copy(),
                                    (lab >= 128).astype(np.uint8)[None], {"id": i}))
    return samples
