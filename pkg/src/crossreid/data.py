"""Domain datasets: records, real-dataset loaders, manifests and the synthetic world."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

JUNK = -1
UNLABELLED = -2

DOMAIN_TAGS = ("S", "T", "ST", "TT")
SPLIT_DIRS = {"train": "bounding_box_train", "gallery": "bounding_box_test", "query": "query"}
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}
MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("filename", "person_id", "camera_id", "domain_tag", "style_camera", "source_record")

_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)(\D[^/]*)?\.([A-Za-z0-9]+)$")


class RecordNameError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    image_ref: str
    person_id: int
    camera_id: int
    domain_tag: str = "S"
    source_record: ImageRecord | None = field(default=None, repr=False)
    style_camera: int | None = None

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        if self.camera_id < 1:
            raise ValueError(f"camera ids start at 1, got {self.camera_id}")
        if self.person_id < UNLABELLED:
            raise ValueError(f"invalid person id {self.person_id}")
        generated = self.domain_tag in ("ST", "TT")
        if generated != (self.style_camera is not None):
            raise ValueError("style_camera is set exactly for ST/TT records")
        if self.domain_tag == "ST" and self.source_record is not None:
            if self.person_id != self.source_record.person_id:
                raise ValueError("ST record must keep its source identity")
        if self.domain_tag == "TT":
            if self.person_id != UNLABELLED or self.source_record is None:
                raise ValueError("TT records are unlabelled and point at their origin")

    @property
    def is_junk(self) -> bool:
        return self.person_id == JUNK

    @property
    def is_labelled(self) -> bool:
        return self.person_id >= 0


def parse_record_name(filename: str) -> tuple[int, int]:
    """Parse ``<pid>_c<cam><suffix>.<ext>`` into ``(person_id, camera_id)``.

    A pid of -1 is returned as ``JUNK``.
    """
    name = Path(filename).name
    m = _NAME_RE.match(name)
    if m is None:
        raise RecordNameError(f"malformed record name: {filename!r}")
    pid, cam = int(m.group(1)), int(m.group(2))
    if cam < 1:
        raise RecordNameError(f"camera id must be positive in {filename!r}")
    if pid < -1:
        raise RecordNameError(f"negative person id other than -1 in {filename!r}")
    return (JUNK if pid == -1 else pid), cam


def render_record_name(person_id: int, camera_id: int, seq: int = 0, ext: str = "png") -> str:
    pid = "-1" if person_id == JUNK else f"{person_id:04d}"
    return f"{pid}_c{camera_id}s1_{seq:06d}_00.{ext}"


class DomainDataset:
    """Ordered, immutable collection of image records.

    Pixels come either from an in-memory array aligned with ``records``
    (``N x H x W x 3`` in [-1, 1]) or are decoded lazily from ``root``.
    """

    def __init__(self, records: Iterable[ImageRecord], pixels: np.ndarray | None = None,
                 root: str | Path | None = None, image_size: tuple[int, int] | None = None,
                 name: str = ""):
        self.records: tuple[ImageRecord, ...] = tuple(records)
        if pixels is not None:
            pixels = np.asarray(pixels, dtype=np.float32)
            if pixels.shape[0] != len(self.records) or pixels.ndim != 4 or pixels.shape[-1] != 3:
                raise ValueError(f"pixel array {pixels.shape} does not match {len(self.records)} records")
            pixels.setflags(write=False)
            image_size = image_size or pixels.shape[1:3]
        self.pixels = pixels
        self.root = Path(root) if root is not None else None
        self.image_size = tuple(image_size) if image_size is not None else None
        self.name = name
        self._ref_index: dict[str, int] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ImageRecord:
        return self.records[i]

    def __repr__(self) -> str:
        n, p, m, _ = dataset_stats(self)
        return f"DomainDataset({self.name!r}, N={n}, P={p}, M={m})"

    @property
    def n_images(self) -> int:
        return len(self.records)

    @property
    def identities(self) -> list[int]:
        return sorted({r.person_id for r in self.records if r.person_id >= 0})

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    @property
    def cameras(self) -> list[int]:
        return sorted({r.camera_id for r in self.records})

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def per_camera_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(r.camera_id for r in self.records).items()))

    @property
    def has_pixels(self) -> bool:
        return self.pixels is not None or self.root is not None

    def index_of(self, image_ref: str) -> int:
        if self._ref_index is None:
            self._ref_index = {r.image_ref: i for i, r in enumerate(self.records)}
        return self._ref_index[image_ref]

    def images(self, indices: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
        """Return ``len(indices) x H x W x 3`` float32 pixels in [-1, 1]."""
        if indices is None:
            indices = range(len(self.records))
        indices = np.asarray(indices, dtype=np.int64)
        if self.pixels is not None:
            return self.pixels[indices]
        if self.root is None:
            raise ValueError(f"dataset {self.name!r} carries no pixel data")
        return np.stack([decode_image(self.root / self.records[i].image_ref, self.image_size)
                         for i in indices]) if len(indices) else np.zeros((0, 0, 0, 3), np.float32)

    def unlabelled(self) -> DomainDataset:
        """Copy with every non-junk label replaced by ``UNLABELLED``."""
        recs = [ImageRecord(r.image_ref, r.person_id if r.is_junk else UNLABELLED, r.camera_id,
                            r.domain_tag, r.source_record, r.style_camera)
                for r in self.records]
        return DomainDataset(recs, self.pixels, self.root, self.image_size, self.name)

    def preloaded(self) -> DomainDataset:
        """Copy with every image decoded into memory."""
        if self.pixels is not None:
            return self
        ds = DomainDataset(self.records, self.images(), None, self.image_size, self.name)
        ds.root = self.root
        return ds

    def select(self, indices: Sequence[int]) -> DomainDataset:
        recs = [self.records[i] for i in indices]
        pixels = self.pixels[np.asarray(indices, dtype=np.int64)] if self.pixels is not None else None
        return DomainDataset(recs, pixels, self.root, self.image_size, self.name)


def dataset_stats(ds: DomainDataset) -> tuple[int, int, int, dict[int, int]]:
    """``(N, P, M, per_camera_counts)``; junk and unlabelled records do not count towards P."""
    return ds.n_images, ds.n_identities, ds.n_cameras, ds.per_camera_counts


def decode_image(path: str | Path, image_size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size[1], image_size[0]):
            im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 127.5 - 1.0


def encode_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_domain(root_dir: str | Path, split: str = "train", labelled: bool = True,
                domain_tag: str = "S", image_size: tuple[int, int] | None = None) -> DomainDataset:
    """Load one split of a Market-1501 / DukeMTMC-reID style directory.

    Pixels are decoded lazily. Junk images (pid -1) are kept and flagged.
    """
    root = Path(root_dir)
    if split not in SPLIT_DIRS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_DIRS)}")
    split_dir = root / SPLIT_DIRS[split]
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing split directory {split_dir}")
    files = sorted(p for p in split_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not files:
        raise ValueError(f"no images under {split_dir}")
    seen: set[str] = set()
    records = []
    for p in files:
        if p.name in seen:
            raise ValueError(f"duplicate filename {p.name} under {split_dir}")
        seen.add(p.name)
        pid, cam = parse_record_name(p.name)
        if not labelled and pid != JUNK:
            pid = UNLABELLED
        records.append(ImageRecord(p.name, pid, cam, domain_tag))
    return DomainDataset(records, root=split_dir, image_size=image_size, name=f"{root.name}/{split}")


# --- manifests ---------------------------------------------------------------

def write_manifest(ds: DomainDataset, path: str | Path) -> None:
    lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
    for r in ds.records:
        lines.append("\t".join([
            r.image_ref, str(r.person_id), str(r.camera_id), r.domain_tag,
            "" if r.style_camera is None else str(r.style_camera),
            "" if r.source_record is None else r.source_record.image_ref,
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path, origin: DomainDataset | None = None,
                  image_size: tuple[int, int] | None = None, name: str = "") -> DomainDataset:
    """Read a manifest; ``origin`` resolves the source_record column of ST/TT rows."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        fname, pid, cam, tag, style, src = cols
        source = None
        if src:
            if origin is None:
                raise ValueError(f"{path}:{lineno}: source_record needs the originating dataset")
            source = origin.records[origin.index_of(src)]
        records.append(ImageRecord(fname, int(pid), int(cam), tag, source, int(style) if style else None))
    return DomainDataset(records, root=path.parent, image_size=image_size, name=name or path.parent.name)


def materialize(ds: DomainDataset, out_dir: str | Path) -> Path:
    """Write every image of ``ds`` plus its manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(ds.records):
        encode_image(ds.images([i])[0], out_dir / r.image_ref)
    write_manifest(ds, out_dir / MANIFEST_NAME)
    return out_dir / MANIFEST_NAME


# --- synthetic world ---------------------------------------------------------

@dataclass(frozen=True)
class CameraStyle:
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if len(self.gain) != 3 or any(g <= 0 for g in self.gain):
            raise ValueError("gain must be three positive numbers")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")

    def apply(self, img: np.ndarray, rng: np.random.Generator | None = None, clamp: bool = True) -> np.ndarray:
        out = img * np.asarray(self.gain, dtype=np.float64) + self.offset
        if self.noise > 0 and rng is not None:
            out = out + rng.normal(0.0, self.noise, size=img.shape)
        return np.clip(out, -1.0, 1.0) if clamp else out


def default_styles(m_source: int, m_target: int) -> tuple[CameraStyle, ...]:
    """Mild, near-neutral source cameras; strongly colour-cast target cameras."""
    src = []
    for c in range(m_source):
        t = 2 * np.pi * c / max(m_source, 1)
        gain = tuple(round(1.0 + 0.12 * np.cos(t + k * 2.1), 4) for k in range(3))
        src.append(CameraStyle(gain, round(0.05 * np.sin(t), 4), 0.03))
    casts = [(1.5, 0.6, 0.5), (0.5, 1.4, 0.7), (0.6, 0.7, 1.6), (1.3, 1.3, 0.45),
             (0.45, 1.2, 1.3), (1.4, 0.5, 1.3), (0.8, 0.8, 0.8), (1.6, 1.0, 0.6)]
    offs = [0.15, -0.2, 0.05, -0.1, 0.2, -0.05, -0.25, 0.1]
    tgt = []
    for c in range(m_target):
        k = c % len(casts)
        bump = 0.07 * (c // len(casts))
        tgt.append(CameraStyle(tuple(g + bump for g in casts[k]), offs[k], 0.05))
    return tuple(src + tgt)


@dataclass(frozen=True)
class SyntheticWorldSpec:
    n_source_ids: int = 10
    n_target_ids: int = 10
    m_source_cams: int = 3
    m_target_cams: int = 4
    images_per_id_per_cam: int = 2
    image_size: tuple[int, int] = (64, 32)
    style_params: tuple[CameraStyle, ...] | None = None
    seed: int = 0
    n_test_ids: int = 0

    def __post_init__(self):
        for f in ("n_source_ids", "n_target_ids", "m_source_cams", "m_target_cams", "images_per_id_per_cam"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image_size {self.image_size} too small to render (need >= 16x16)")
        styles = self.styles
        if len(styles) != self.m_source_cams + self.m_target_cams:
            raise ValueError("need one style per source and target camera")
        if len(set(styles)) != len(styles):
            raise ValueError("camera styles must be pairwise distinct")

    @property
    def styles(self) -> tuple[CameraStyle, ...]:
        return self.style_params or default_styles(self.m_source_cams, self.m_target_cams)

    @property
    def source_styles(self) -> tuple[CameraStyle, ...]:
        return self.styles[: self.m_source_cams]

    @property
    def target_styles(self) -> tuple[CameraStyle, ...]:
        return self.styles[self.m_source_cams:]


# source and target identities are drawn from different appearance families
_SOURCE_FAMILY = dict(stripe="horizontal", hue_lo=0.0, hue_hi=1.0)
_TARGET_FAMILY = dict(stripe="vertical", hue_lo=0.0, hue_hi=1.0)


@dataclass(frozen=True)
class IdentityLook:
    upper: tuple[float, float, float]
    lower: tuple[float, float, float]
    accent: tuple[float, float, float]
    stripe: str
    period: int
    width: float
    bag_side: int


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    import colorsys
    return np.asarray(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 2.0 - 1.0


def identity_look(rng: np.random.Generator, family: dict) -> IdentityLook:
    def colour():
        return tuple(_hsv_to_rgb(rng.uniform(family["hue_lo"], family["hue_hi"]),
                                 rng.uniform(0.4, 0.9), rng.uniform(0.35, 0.85)).round(6))
    return IdentityLook(colour(), colour(), colour(), family["stripe"], int(rng.integers(2, 7)),
                        float(rng.uniform(0.45, 0.7)), int(rng.integers(-1, 2)))


def render_identity(look: IdentityLook, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Style-free render of one person in [-1, 1]; ``rng`` drives pose and background jitter."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bg = rng.uniform(-0.6, 0.0, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=3)
    img = bg + tilt * (yy / h - 0.5)[..., None]
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    top = rng.uniform(0.02, 0.08) * h
    half = look.width * w / 2
    head_r = 0.09 * h
    head_c = (top + head_r, cx)
    head = (yy - head_c[0]) ** 2 + ((xx - head_c[1]) * 1.4) ** 2 <= head_r ** 2
    img[head] = (0.55, 0.25, 0.05)
    torso_top, waist, feet = top + 2 * head_r, top + 0.52 * h, h - rng.uniform(0.02, 0.06) * h
    body = (np.abs(xx - cx) <= half)
    torso = body & (yy >= torso_top) & (yy < waist)
    legs = (np.abs(xx - cx) <= half * 0.85) & (yy >= waist) & (yy < feet)
    phase = rng.integers(0, look.period)
    coord = yy if look.stripe == "horizontal" else xx
    stripes = ((coord.astype(int) + phase) // look.period) % 2 == 0
    img[torso] = look.upper
    img[torso & stripes] = look.accent
    img[legs] = look.lower
    if look.bag_side:
        bx = cx + look.bag_side * (half + 0.08 * w)
        bag = (np.abs(xx - bx) <= 0.09 * w) & (np.abs(yy - (torso_top + waist) / 2) <= 0.08 * h)
        img[bag] = look.accent
    return np.clip(img, -1.0, 1.0)


def _render_domain(spec: SyntheticWorldSpec, tag: str, pid_offset: int, n_ids: int, family: dict,
                   styles: Sequence[CameraStyle], stream: int, split: str = "") -> DomainDataset:
    records, pixels = [], []
    for j in range(n_ids):
        pid = pid_offset + j
        look = identity_look(np.random.default_rng([spec.seed, stream, pid]), family)
        for c, style in enumerate(styles, start=1):
            for k in range(spec.images_per_id_per_cam):
                rng = np.random.default_rng([spec.seed, stream, pid, c, k])
                base = render_identity(look, spec.image_size, rng)
                pixels.append(style.apply(base, rng).astype(np.float32))
                seq = (c - 1) * spec.images_per_id_per_cam + k
                records.append(ImageRecord(render_record_name(pid, c, seq), pid, c, tag))
    return DomainDataset(records, np.stack(pixels), image_size=spec.image_size, name=f"synthetic-{tag}{split}")


def synthesize_world(spec: SyntheticWorldSpec) -> tuple[DomainDataset, DomainDataset]:
    """Deterministic labelled source and (ground-truth labelled) target training sets."""
    src = _render_domain(spec, "S", 0, spec.n_source_ids, _SOURCE_FAMILY, spec.source_styles, 1)
    tgt = _render_domain(spec, "T", spec.n_source_ids, spec.n_target_ids, _TARGET_FAMILY,
                         spec.target_styles, 2)
    return src, tgt


def synthesize_target_test(spec: SyntheticWorldSpec, n_query_per_id: int = 1) -> tuple[DomainDataset, DomainDataset]:
    """Query/gallery split of fresh target identities, disjoint from every training identity.

    For each identity and camera the first ``n_query_per_id`` renders go to the query set.
    """
    if spec.n_test_ids <= 0:
        raise ValueError("spec.n_test_ids must be positive to build a test split")
    offset = spec.n_source_ids + spec.n_target_ids
    full = _render_domain(spec, "T", offset, spec.n_test_ids, _TARGET_FAMILY, spec.target_styles, 3, "-test")
    per = spec.images_per_id_per_cam
    q_idx = [i for i in range(len(full)) if (i % per) < n_query_per_id]
    g_idx = [i for i in range(len(full)) if (i % per) >= n_query_per_id]
    query, gallery = full.select(q_idx), full.select(g_idx)
    query.name, gallery.name = "synthetic-query", "synthetic-gallery"
    return query, gallery
