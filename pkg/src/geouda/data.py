"""Dataset contract, synthetic geo-tagged data generator, and patch transforms.

On-disk layout of a dataset root:

    <root>/dataset_info.txt            generator echo, domain coordinate boxes
    <root>/<domain>/img/<patch_id>.bin 5-band image, float32, (H, W, B)
    <root>/<domain>/msk/<patch_id>.bin label map, uint8, (H, W) - source only
    <root>/<domain>/meta/<patch_id>.txt key = value metadata record
    <root>/eval_labels/<domain>/<patch_id>.bin held-out target labels

Target-domain label maps live only under eval_labels/, which the training
loop never touches; `load_eval_label` is the single accessor and is meant for
evaluation code.

Arrays are stored as flat binary tensors behind a small versioned header so
round-trips are bit exact and no image codec is involved. Pixel (row, col)
maps to geography with column index increasing with easting and row index
increasing as northing decreases; both crop operations use this convention
when they recompute centroid metadata.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoding import DEFAULT_ORIGIN_LAT_M, DEFAULT_ORIGIN_LON_M

# Ground sample distance: ground meters covered by one pixel.
GSD_M = 0.2

_MAGIC = b"GEOP"
_FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.uint8, 2: np.int32, 3: np.float64}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}

_META_KEYS = (
    "patch_id",
    "domain",
    "zone",
    "month",
    "hour",
    "centroid_lon_m",
    "centroid_lat_m",
    "altitude_m",
    "camera",
)

_ZONES = ("UA", "UN", "UF", "NA", "NF", "AF")


def write_array(path: str | Path, arr: np.ndarray):
    """Store an array as header + raw little-endian C-order bytes."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = struct.pack("<4sHBB", _MAGIC, _FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    """Read an array written by `write_array`."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValueError(f"{path}: truncated header")
        magic, version, code, ndim = struct.unpack("<4sHBB", head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a patch array file")
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = fh.read()
    arr = np.frombuffer(data, dtype=_DTYPE_CODES[code])
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match header shape {shape}")
    return arr.reshape(shape).copy()


@dataclass
class PatchMeta:
    """Per-patch metadata record."""

    patch_id: str
    domain: str
    zone: str
    month: int
    hour: int
    centroid_lon_m: float
    centroid_lat_m: float
    altitude_m: float
    camera: str

    def __post_init__(self):
        # normalize numpy scalars so repr() stays plainly parseable
        self.month = int(self.month)
        self.hour = int(self.hour)
        self.centroid_lon_m = float(self.centroid_lon_m)
        self.centroid_lat_m = float(self.centroid_lat_m)
        self.altitude_m = float(self.altitude_m)
        if not 1 <= self.month <= 12:
            raise ValueError(f"{self.patch_id}: month {self.month} out of range")
        if not 0 <= self.hour <= 23:
            raise ValueError(f"{self.patch_id}: hour {self.hour} out of range")
        if not (np.isfinite(self.centroid_lon_m) and np.isfinite(self.centroid_lat_m)):
            raise ValueError(f"{self.patch_id}: centroid must be finite")


@dataclass
class Patch:
    """One sample: image (H, W, B), optional label map (H, W), metadata."""

    image: np.ndarray
    label: np.ndarray | None
    meta: PatchMeta


def write_meta(path: str | Path, meta: PatchMeta):
    lines = []
    for key in _META_KEYS:
        value = getattr(meta, key)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path: str | Path) -> PatchMeta:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " = " not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split(" = ", 1)
        if key not in _META_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown metadata key {key!r}")
        values[key] = value
    missing = [k for k in _META_KEYS if k not in values]
    if missing:
        raise ValueError(f"{path}: missing metadata keys {missing}")
    return PatchMeta(
        patch_id=values["patch_id"],
        domain=values["domain"],
        zone=values["zone"],
        month=int(values["month"]),
        hour=int(values["hour"]),
        centroid_lon_m=float(values["centroid_lon_m"]),
        centroid_lat_m=float(values["centroid_lat_m"]),
        altitude_m=float(values["altitude_m"]),
        camera=values["camera"],
    )


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic geo-tagged dataset.

    Classes form horizontal stripes of equal widths in a fixed cyclic order;
    the pattern is rolled by the patch centroid's latitude position inside
    the domain box, so the roll phase encodes latitude and is readable only
    by recognizing which stripe belongs to which class. One stripe slot is
    shared by a twin pair: the two classes have the same reflectance palette,
    and which twin fills the slot depends on the patch's half of the box
    (north or south). Segmenting the twins therefore requires the patch's
    latitude, whose only image cue is the stripe phase. The last class
    appears as a few discs and rectangles at random positions and is the
    rare class. Each domain draws centroids from its own coordinate box and
    applies its own radiometric shift: a per-band additive offset plus a
    random mixing of the four reflectance bands, the kind of calibration
    difference that leaves within-domain appearance coherent but moves every
    class's colors somewhere new.
    """

    num_source_domains: int = 3
    num_target_domains: int = 1
    patches_per_domain: int = 24
    image_size: int = 64
    num_classes: int = 6
    class_fractions: tuple[float, ...] | None = None
    radiometric_shift: float = 0.25
    band_mixing: float = 0.5
    pixel_noise: float = 0.05
    position_gain: float = 0.0
    seasonal_gain: float = 0.05
    box_size_m: float = 60.0
    box_spacing_m: float = 80.0
    origin_lon_m: float = DEFAULT_ORIGIN_LON_M
    origin_lat_m: float = DEFAULT_ORIGIN_LAT_M
    seed: int = 0

    def __post_init__(self):
        if self.num_source_domains <= 0 or self.num_target_domains <= 0:
            raise ValueError("need at least one source and one target domain")
        if self.num_source_domains > 80 or self.num_target_domains > 10:
            raise ValueError("domain counts exceed the naming scheme")
        if self.patches_per_domain <= 0 or self.image_size <= 0:
            raise ValueError("patches_per_domain and image_size must be positive")
        if self.num_classes < 5:
            raise ValueError(
                "need at least five classes (two plain stripes, the twin pair, the rare class)"
            )
        if self.class_fractions is not None:
            fr = tuple(float(f) for f in self.class_fractions)
            if len(fr) != self.num_classes or any(f <= 0 for f in fr):
                raise ValueError("class_fractions must be positive, one per class")
            total = sum(fr)
            object.__setattr__(self, "class_fractions", tuple(f / total for f in fr))

    def fractions(self) -> np.ndarray:
        """Expected per-class pixel fractions.

        Classes 0..C-4 are the plain stripes, C-3 and C-2 the twin pair
        (splitting one stripe slot evenly), C-1 the rare shapes class.
        """
        if self.class_fractions is not None:
            fr = np.array(self.class_fractions)
            slot = (fr[-3] + fr[-2]) / 2.0
            return np.concatenate([fr[:-3], [slot, slot], fr[-1:]])
        rare = 0.06
        slots = np.full(self.num_classes - 2, (1.0 - rare) / (self.num_classes - 2))
        return np.concatenate([slots[:-1], [slots[-1] / 2.0, slots[-1] / 2.0], [rare]])

    def domain_names(self) -> tuple[list[str], list[str]]:
        sources = [f"D{i + 1:02d}" for i in range(self.num_source_domains)]
        targets = [f"D{90 + i:02d}" for i in range(self.num_target_domains)]
        return sources, targets

    def domain_box(self, global_index: int) -> tuple[float, float, float, float]:
        """(lon_min, lat_min, lon_max, lat_max) of one domain's centroid box."""
        lon0 = self.origin_lon_m + global_index * self.box_spacing_m
        lat0 = self.origin_lat_m
        return (lon0, lat0, lon0 + self.box_size_m, lat0 + self.box_size_m)


def _stripe_rows(fractions: np.ndarray, size: int) -> np.ndarray:
    """Allocate rows to classes by largest remainder, preserving fractions."""
    ideal = fractions * size
    base = np.floor(ideal).astype(int)
    short = size - base.sum()
    order = np.argsort(-(ideal - base))
    base[order[:short]] += 1
    return np.repeat(np.arange(len(fractions)), base)


def _class_colors(num_classes: int) -> np.ndarray:
    """Well-separated base reflectances, (num_classes, 4) radiometric bands.

    The twin classes share one row: nothing in a pixel's reflectance
    distinguishes them.
    """
    rng = np.random.default_rng(20240)  # fixed palette, independent of cfg seed
    looks = np.empty((num_classes - 1, 4))
    levels = np.linspace(0.25, 0.75, num_classes - 1)
    for b in range(4):
        looks[:, b] = rng.permutation(levels)
    colors = np.empty((num_classes, 4))
    colors[: num_classes - 3] = looks[: num_classes - 3]  # plain stripes
    colors[num_classes - 3] = looks[num_classes - 3]  # twin pair shares a look
    colors[num_classes - 2] = looks[num_classes - 3]
    colors[num_classes - 1] = looks[num_classes - 2]  # rare class
    return colors


def _sample_surface(
    coarse: np.ndarray,
    extent: tuple[float, float, float, float],
    lon: float,
    lat: float,
    size: int,
) -> np.ndarray:
    """Sample a domain's elevation surface at one patch footprint.

    `coarse` is an (n, n) control grid spanning `extent` (lon_min, lat_min,
    lon_max, lat_max); rows run north to south like image rows do.
    """
    n = coarse.shape[0]
    half = (size - 1) / 2.0
    lon_px = lon + (np.arange(size) - half) * GSD_M
    lat_px = lat - (np.arange(size) - half) * GSD_M
    sx = (lon_px - extent[0]) / (extent[2] - extent[0]) * (n - 1)
    sy = (extent[3] - lat_px) / (extent[3] - extent[1]) * (n - 1)
    sx = np.clip(sx, 0.0, n - 1.0)
    sy = np.clip(sy, 0.0, n - 1.0)
    x0 = np.minimum(np.floor(sx).astype(int), n - 2)
    y0 = np.minimum(np.floor(sy).astype(int), n - 2)
    wx = sx - x0
    wy = (sy - y0)[:, None]
    out = coarse[y0][:, x0] * (1 - wy) * (1 - wx)
    out += coarse[y0][:, x0 + 1] * (1 - wy) * wx
    out += coarse[y0 + 1][:, x0] * wy * (1 - wx)
    out += coarse[y0 + 1][:, x0 + 1] * wy * wx
    return out


def _render_patch(
    cfg: SyntheticConfig,
    rng: np.random.Generator,
    box: tuple[float, float, float, float],
    domain_offset: np.ndarray,
    mixing: np.ndarray,
    surface: np.ndarray,
    surface_extent: tuple[float, float, float, float],
    north_side: bool,
) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    """One patch: image (H, W, 5), label (H, W), centroid, month."""
    size = cfg.image_size
    fractions = cfg.fractions()
    rare = cfg.num_classes - 1
    twin_slot = cfg.num_classes - 3  # slot index within the stripe cycle

    # the north/south half is stratified by the caller; draw within the half
    u_n = rng.uniform(0.0, 1.0)
    v_n = (0.5 if north_side else 0.0) + rng.uniform(0.0, 0.5)
    lon = box[0] + u_n * (box[2] - box[0])
    lat = box[1] + v_n * (box[3] - box[1])

    # stripes rolled by the latitude position: the roll phase is the image's
    # only carrier of where the patch sits inside its box (slot widths are
    # equal under the default fractions, so geometry alone cannot reveal it)
    slot_fractions = np.concatenate(
        [fractions[:twin_slot], [fractions[twin_slot] + fractions[twin_slot + 1]]]
    )
    slot_fractions = slot_fractions / slot_fractions.sum()
    label = np.tile(_stripe_rows(slot_fractions, size)[:, None], (1, size))
    label = np.roll(label, int(v_n * size) % size, axis=0)
    # the twin slot resolves by the patch's half of the box
    twin_class = cfg.num_classes - 3 if north_side else cfg.num_classes - 2
    label = np.where(label == twin_slot, twin_class, label)

    # the rare class: a few discs and rectangles, sized to its pixel budget
    yy, xx = np.mgrid[0:size, 0:size]
    budget = fractions[rare] * size * size / 3.0
    for _ in range(3):
        area = budget * rng.uniform(0.7, 1.3)
        if rng.integers(0, 2) == 0:
            r = math.sqrt(area / math.pi)
            lo, hi = int(math.ceil(r)), size - int(math.ceil(r))
            cy, cx = rng.integers(lo, max(hi, lo + 1), size=2)
            label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rare
        else:
            h = int(round(math.sqrt(area) * rng.uniform(0.6, 1.6)))
            h = min(max(h, 2), size)
            w = min(max(int(round(area / h)), 2), size)
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            label[top : top + h, left : left + w] = rare

    month = int(rng.integers(1, 13))
    colors = _class_colors(cfg.num_classes)
    image = np.empty((size, size, 5), dtype=np.float64)
    image[:, :, :4] = colors[label]
    # optional position cue: patch-wide brightness offsets from the in-box
    # coordinates (off by default; the layout already carries the geography)
    image[:, :, 0] += cfg.position_gain * (u_n - 0.5)
    image[:, :, 1] += cfg.position_gain * (v_n - 0.5)
    image[:, :, 1] += cfg.seasonal_gain * np.sin(2.0 * np.pi * (month - 1) / 12.0)
    # the domain's radiometric shift: band mixing then additive offsets
    image[:, :, :4] = image[:, :, :4] @ mixing.T + domain_offset[None, None, :]
    image[:, :, :4] += rng.normal(0.0, cfg.pixel_noise, size=(size, size, 4))
    # elevation band: a window of the domain's surface, input-only. The window
    # is drawn independently of the centroid so terrain identifies the domain
    # without leaking the patch position.
    elon = box[0] + rng.uniform(0.0, 1.0) * (box[2] - box[0])
    elat = box[1] + rng.uniform(0.0, 1.0) * (box[3] - box[1])
    image[:, :, 4] = 0.2 + 0.5 * _sample_surface(surface, surface_extent, elon, elat, size)

    return image.astype(np.float32), label.astype(np.uint8), lon, lat, month


def generate_synthetic(cfg: SyntheticConfig, root: str | Path):
    """Write a complete synthetic dataset tree under `root`.

    Source domains carry msk/ label maps; target-domain labels go to
    eval_labels/ only. Regeneration with the same config is byte identical.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sources, targets = cfg.domain_names()
    all_domains = sources + targets

    info = [
        "dataset = geouda-synthetic",
        f"seed = {cfg.seed}",
        f"image_size = {cfg.image_size}",
        f"num_classes = {cfg.num_classes}",
        f"bands = 5",
        f"class_fractions = {','.join(repr(float(f)) for f in cfg.fractions())}",
        f"twin_classes = {cfg.num_classes - 3},{cfg.num_classes - 2} (north,south half of box)",
        f"rare_class = {cfg.num_classes - 1} (discs and rectangles)",
        f"radiometric_shift = {repr(cfg.radiometric_shift)}",
        f"band_mixing = {repr(cfg.band_mixing)}",
        f"gsd_m = {repr(GSD_M)}",
    ]

    for g, domain in enumerate(all_domains):
        is_source = g < len(sources)
        box = cfg.domain_box(g)
        info.append(
            f"box_{domain} = {box[0]!r},{box[1]!r},{box[2]!r},{box[3]!r} "
            f"({'source' if is_source else 'target'})"
        )
        dom_rng = np.random.default_rng([cfg.seed, 10_000 + g])
        # every domain gets a substantial shift: magnitude in [shift/2, shift]
        # per band, random sign, so no domain is accidentally "easy"
        offset = (
            cfg.radiometric_shift
            * dom_rng.uniform(0.5, 1.0, size=4)
            * dom_rng.choice([-1.0, 1.0], size=4)
        )
        mixing = np.eye(4) + cfg.band_mixing * dom_rng.uniform(-1.0, 1.0, size=(4, 4))
        camera = ("CAM-A", "CAM-B")[int(dom_rng.integers(0, 2))]
        # the domain's elevation surface spans its box plus a patch footprint
        margin = cfg.image_size * GSD_M / 2.0 + GSD_M
        surface_extent = (box[0] - margin, box[1] - margin, box[2] + margin, box[3] + margin)
        cells = max(int(round((surface_extent[2] - surface_extent[0]) / 2.0)), 4)
        surface = dom_rng.uniform(0.0, 1.0, (cells + 1, cells + 1))

        ddir = root / domain
        (ddir / "img").mkdir(parents=True, exist_ok=True)
        (ddir / "meta").mkdir(exist_ok=True)
        if is_source:
            (ddir / "msk").mkdir(exist_ok=True)
        else:
            (root / "eval_labels" / domain).mkdir(parents=True, exist_ok=True)

        for idx in range(cfg.patches_per_domain):
            rng = np.random.default_rng([cfg.seed, g, idx])
            # alternate box halves so both twins appear equally per domain
            image, label, lon, lat, month = _render_patch(
                cfg, rng, box, offset, mixing, surface, surface_extent,
                north_side=idx % 2 == 0,
            )
            pid = f"{domain}_{idx:04d}"
            meta = PatchMeta(
                patch_id=pid,
                domain=domain,
                zone=str(rng.choice(_ZONES)),
                month=month,
                hour=int(rng.integers(6, 19)),
                centroid_lon_m=lon,
                centroid_lat_m=lat,
                altitude_m=float(150.0 + 500.0 * (lat - box[1]) / cfg.box_size_m),
                camera=camera,
            )
            write_array(ddir / "img" / f"{pid}.bin", image)
            write_meta(ddir / "meta" / f"{pid}.txt", meta)
            if is_source:
                write_array(ddir / "msk" / f"{pid}.bin", label)
            else:
                write_array(root / "eval_labels" / domain / f"{pid}.bin", label)

    (root / "dataset_info.txt").write_text("\n".join(info) + "\n")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


class GeoDataset:
    """Deterministic view over a dataset root.

    Domains with a msk/ directory are sources (labels available to training);
    the rest are targets whose labels, if any, sit under eval_labels/ and are
    not reachable from here.
    """

    def __init__(
        self,
        root: str | Path,
        expected_bands: int | None = None,
        num_classes: int | None = None,
        merge_labels_above: int | None = None,
    ):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")
        self.expected_bands = expected_bands
        self.num_classes = num_classes
        self.merge_labels_above = merge_labels_above

        self.source_domains: list[str] = []
        self.target_domains: list[str] = []
        manifest: list[tuple[str, str]] = []
        for ddir in sorted(self.root.iterdir()):
            if not ddir.is_dir() or ddir.name == "eval_labels":
                continue
            img_dir = ddir / "img"
            if not img_dir.is_dir():
                continue
            domain = ddir.name
            if (ddir / "msk").is_dir():
                self.source_domains.append(domain)
            else:
                self.target_domains.append(domain)
            for img_path in img_dir.glob("*.bin"):
                pid = img_path.stem
                if not (ddir / "meta" / f"{pid}.txt").is_file():
                    raise FileNotFoundError(
                        f"patch {pid}: image present but metadata missing"
                    )
                manifest.append((domain, pid))
        self.manifest = sorted(manifest, key=lambda item: item[1])

    def __len__(self) -> int:
        return len(self.manifest)

    def patch_ids(self, domains: Sequence[str] | None = None) -> list[tuple[str, str]]:
        if domains is None:
            return list(self.manifest)
        wanted = set(domains)
        return [item for item in self.manifest if item[0] in wanted]

    def load(self, domain: str, patch_id: str) -> Patch:
        ddir = self.root / domain
        image = read_array(ddir / "img" / f"{patch_id}.bin")
        if image.ndim != 3:
            raise ValueError(f"patch {patch_id}: image must be (H, W, B)")
        if self.expected_bands is not None and image.shape[2] != self.expected_bands:
            raise ValueError(
                f"patch {patch_id}: expected {self.expected_bands} bands, "
                f"found {image.shape[2]}"
            )
        if not np.isfinite(image).all():
            raise ValueError(f"patch {patch_id}: image has non-finite values")
        meta = read_meta(ddir / "meta" / f"{patch_id}.txt")
        label = None
        msk_path = ddir / "msk" / f"{patch_id}.bin"
        if msk_path.is_file():
            label = read_array(msk_path)
            if label.shape != image.shape[:2]:
                raise ValueError(f"patch {patch_id}: label/image shape mismatch")
            if self.merge_labels_above is not None:
                label = np.minimum(label, self.merge_labels_above).astype(label.dtype)
            if self.num_classes is not None and label.max(initial=0) > self.num_classes:
                raise ValueError(
                    f"patch {patch_id}: label value {int(label.max())} out of range "
                    f"for {self.num_classes} classes"
                )
        return Patch(image=image, label=label, meta=meta)

    def iter_patches(self, domains: Sequence[str] | None = None) -> Iterator[Patch]:
        for domain, pid in self.patch_ids(domains):
            yield self.load(domain, pid)


def load_dataset(
    root: str | Path,
    expected_bands: int | None = None,
    num_classes: int | None = None,
    merge_labels_above: int | None = None,
) -> GeoDataset:
    """Open a dataset root; see `GeoDataset`."""
    return GeoDataset(root, expected_bands, num_classes, merge_labels_above)


def load_eval_label(
    root: str | Path,
    domain: str,
    patch_id: str,
    labels_dir: str | Path | None = None,
) -> np.ndarray:
    """Read one held-out target label map. Evaluation-only accessor.

    Labels live under `<root>/eval_labels/` by default; `labels_dir` points at
    an alternative directory with the same `<domain>/<patch_id>.bin` layout.
    """
    base = Path(labels_dir) if labels_dir is not None else Path(root) / "eval_labels"
    path = base / domain / f"{patch_id}.bin"
    if not path.is_file():
        raise FileNotFoundError(f"no held-out label for {domain}/{patch_id}")
    return read_array(path)


# ---------------------------------------------------------------------------
# Patch transforms
# ---------------------------------------------------------------------------


def _shift_centroid(meta: PatchMeta, d_row: float, d_col: float) -> PatchMeta:
    """Move the centroid by a pixel offset: +col is east, +row is south."""
    return replace(
        meta,
        centroid_lon_m=meta.centroid_lon_m + d_col * GSD_M,
        centroid_lat_m=meta.centroid_lat_m - d_row * GSD_M,
    )


def crop_at(patch: Patch, top: int, left: int, size: int) -> Patch:
    """Aligned image/label crop with the centroid recomputed for the window."""
    h, w = patch.image.shape[:2]
    if size <= 0 or top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(f"crop ({top}, {left}, {size}) outside a {h}x{w} patch")
    image = patch.image[top : top + size, left : left + size].copy()
    label = None
    if patch.label is not None:
        label = patch.label[top : top + size, left : left + size].copy()
    d_row = top + size / 2.0 - h / 2.0
    d_col = left + size / 2.0 - w / 2.0
    return Patch(image=image, label=label, meta=_shift_centroid(patch.meta, d_row, d_col))


def random_crop(patch: Patch, size: int, rng: np.random.Generator) -> Patch:
    """Uniformly placed square crop; identity when size equals the patch."""
    h, w = patch.image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds patch size {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop_at(patch, top, left, size)


def four_crop(patch: Patch) -> list[Patch]:
    """Four non-overlapping quadrants tiling the patch exactly.

    Order: top-left, top-right, bottom-left, bottom-right. Quadrant centroids
    form a symmetric 2x2 grid around the patch centroid.
    """
    h, w = patch.image.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"four_crop needs even dimensions, got {h}x{w}")
    if h != w:
        raise ValueError(f"four_crop needs a square patch, got {h}x{w}")
    half = h // 2
    return [
        crop_at(patch, 0, 0, half),
        crop_at(patch, 0, half, half),
        crop_at(patch, half, 0, half),
        crop_at(patch, half, half, half),
    ]


def reassemble_quadrants(quadrants: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of `four_crop` for per-quadrant outputs (label or image grids)."""
    if len(quadrants) != 4:
        raise ValueError(f"expected 4 quadrants, got {len(quadrants)}")
    top = np.concatenate([quadrants[0], quadrants[1]], axis=1)
    bottom = np.concatenate([quadrants[2], quadrants[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def augment(patch: Patch, rng: np.random.Generator) -> Patch:
    """Random flips and 90-degree rotations, identical on image and label.

    Geometric only; metadata is returned unchanged. Draw order: horizontal
    flip, vertical flip, rotation count.
    """
    hflip = bool(rng.integers(0, 2))
    vflip = bool(rng.integers(0, 2))
    k = int(rng.integers(0, 4))

    def apply(arr: np.ndarray) -> np.ndarray:
        out = arr
        if hflip:
            out = np.flip(out, axis=1)
        if vflip:
            out = np.flip(out, axis=0)
        if k:
            out = np.rot90(out, k, axes=(0, 1))
        return np.ascontiguousarray(out)

    label = apply(patch.label) if patch.label is not None else None
    return Patch(image=apply(patch.image), label=label, meta=patch.meta)
