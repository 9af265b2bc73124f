"""Synthetic person-like re-identification benchmark.

Identities are defined by a small table of discrete appearance factors
(clothing color palette, clothing texture, body layout, carried-object
flag).  Each identity is rendered under two camera views that disagree
in brightness, contrast, background level, spatial alignment, and noise,
while the factor values themselves never change.  Because the generating
factors are known exactly, downstream probes can measure how much of
each factor a learned representation retains.

Images are 32x16 RGB, channel-first, float32 in [0, 1].  Everything is
driven by `numpy.random.SeedSequence` so a given seed reproduces the
dataset bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ContractError

IMAGE_HW = (32, 16)

# (top clothing color, bottom clothing color) per palette index.  The
# tops are far apart in RGB so a nearest-mean-color rule survives the
# view nuisances; the bottoms are muted on purpose.
COLOR_PALETTES = (
    ((0.85, 0.10, 0.10), (0.20, 0.20, 0.30)),
    ((0.10, 0.20, 0.85), (0.25, 0.20, 0.20)),
    ((0.10, 0.75, 0.15), (0.20, 0.28, 0.20)),
    ((0.80, 0.15, 0.80), (0.30, 0.30, 0.20)),
)

TEXTURE_NAMES = ("stripes", "checks", "solid")

# Row where the torso region ends for each layout value.
LAYOUT_BOUNDARIES = (18, 14)

_SKIN = (0.88, 0.74, 0.62)
_BAG = (0.42, 0.29, 0.16)

# Seed-stream tags, so the identity split, the renderer, and any future
# consumer never collide on the same SeedSequence.
_STREAM_SPLIT = 7
_STREAM_RENDER = 11
_STREAM_PROBE_VIEW = 13


@dataclass(frozen=True)
class FactorLevel:
    """One discrete appearance factor: a name plus its value count."""

    name: str
    cardinality: int


@dataclass(frozen=True)
class FactorSpec:
    """Ordered factor table; identity k enumerates the product space."""

    levels: tuple[FactorLevel, ...]

    @staticmethod
    def default() -> "FactorSpec":
        return FactorSpec(levels=(
            FactorLevel("color", len(COLOR_PALETTES)),
            FactorLevel("texture", len(TEXTURE_NAMES)),
            FactorLevel("layout", len(LAYOUT_BOUNDARIES)),
            FactorLevel("carry", 2),
        ))

    @property
    def capacity(self) -> int:
        cap = 1
        for lvl in self.levels:
            cap *= lvl.cardinality
        return cap

    def id_to_attrs(self, identity: int) -> tuple[int, ...]:
        """Map an identity index to its factor value tuple (C order,
        last factor fastest)."""
        if not 0 <= identity < self.capacity:
            raise ContractError(
                f"identity {identity} outside capacity {self.capacity}")
        cards = tuple(lvl.cardinality for lvl in self.levels)
        return tuple(int(v) for v in np.unravel_index(identity, cards))


@dataclass
class ToyReIDDataset:
    """Rendered benchmark: images plus identity, view, and factor labels.

    `attrs` has one row per identity (indexed by the identity value), so
    every image of an identity shares the same factor vector by
    construction.  `train_ids` and `test_ids` partition the identities.
    """

    images: np.ndarray
    ids: np.ndarray
    views: np.ndarray
    attrs: np.ndarray
    attr_names: tuple[str, ...]
    train_ids: np.ndarray
    test_ids: np.ndarray

    def indices_for(self, ids: np.ndarray) -> np.ndarray:
        return np.where(np.isin(self.ids, ids))[0]

    def train_indices(self) -> np.ndarray:
        return self.indices_for(self.train_ids)

    def test_indices(self) -> np.ndarray:
        return self.indices_for(self.test_ids)


@dataclass
class ImageSet:
    """A view into a dataset: images with labels plus source indices."""

    images: np.ndarray
    ids: np.ndarray
    views: np.ndarray
    indices: np.ndarray


def _take(dataset: ToyReIDDataset, indices: np.ndarray) -> ImageSet:
    return ImageSet(images=dataset.images[indices], ids=dataset.ids[indices],
                    views=dataset.views[indices], indices=indices)


def _render_base(attrs: tuple[int, ...], background: float) -> np.ndarray:
    color, texture, layout, carry = attrs
    h, w = IMAGE_HW
    img = np.full((3, h, w), background, dtype=np.float64)

    img[:, 2:6, 5:11] = np.asarray(_SKIN)[:, None, None]

    boundary = LAYOUT_BOUNDARIES[layout]
    top, bottom = COLOR_PALETTES[color]

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if texture == 0:
        pattern = np.where(rows % 4 < 2, 1.0, 0.55) + 0.0 * cols
    elif texture == 1:
        pattern = np.where((rows // 2 + cols // 2) % 2 == 0, 1.0, 0.55)
    else:
        pattern = np.ones((h, w))

    torso = np.zeros((h, w), dtype=bool)
    torso[6:boundary, 2:14] = True
    for ch in range(3):
        img[ch][torso] = top[ch] * pattern[torso]

    legs = np.zeros((h, w), dtype=bool)
    legs[boundary:29, 3:7] = True
    legs[boundary:29, 9:13] = True
    for ch in range(3):
        img[ch][legs] = bottom[ch]

    if carry:
        img[:, 16:22, 0:3] = np.asarray(_BAG)[:, None, None]
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return img
    h, w = img.shape[1:]
    padded = np.pad(img, ((0, 0), (2, 2), (2, 2)), mode="edge")
    return padded[:, 2 - dy:2 - dy + h, 2 - dx:2 - dx + w]


def _render_image(attrs: tuple[int, ...], view: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Render one image of an identity under one view's nuisance model.

    View 0 is the mild camera (small brightness wobble, light noise);
    view 1 adds contrast and background changes, spatial jitter, and
    heavier noise.  None of the nuisances depends on the factor values.
    """
    if view == 0:
        background = rng.uniform(0.88, 0.98)
        brightness = rng.uniform(-0.05, 0.05)
        contrast = 1.0
        dy = dx = 0
        sigma = 0.02
    else:
        background = rng.uniform(0.72, 1.0)
        brightness = rng.uniform(-0.12, 0.12)
        contrast = rng.uniform(0.85, 1.15)
        dy = int(rng.integers(-2, 3))
        dx = int(rng.integers(-2, 3))
        sigma = rng.uniform(0.02, 0.05)

    img = _render_base(attrs, background)
    img = (img - 0.5) * contrast + 0.5 + brightness
    img = _shift(img, dy, dx)
    img = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: FactorSpec | None = None, n_ids: int = 48,
                     imgs_per_id_per_view: int = 4, seed: int = 0,
                     train_fraction: float = 2 / 3) -> ToyReIDDataset:
    """Render a full benchmark: `n_ids` identities, two views each.

    Identities take the first `n_ids` slots of the factor product
    space.  The train/test identity partition is a seeded permutation,
    so both halves mix factor values.  Same arguments, same bits.
    """
    if spec is None:
        spec = FactorSpec.default()
    if n_ids < 1:
        raise ContractError("n_ids must be positive")
    if n_ids > spec.capacity:
        raise CapacityError(
            f"requested {n_ids} identities but the factor space only has "
            f"{spec.capacity} combinations")
    if imgs_per_id_per_view < 1:
        raise ContractError("imgs_per_id_per_view must be positive")
    if not 0.0 < train_fraction < 1.0:
        raise ContractError("train_fraction must lie strictly in (0, 1)")

    attrs = np.array([spec.id_to_attrs(i) for i in range(n_ids)],
                     dtype=np.int64)

    images = []
    ids = []
    views = []
    for identity in range(n_ids):
        factor_values = tuple(int(v) for v in attrs[identity])
        for view in (0, 1):
            for idx in range(imgs_per_id_per_view):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [seed, _STREAM_RENDER, identity, view, idx]))
                images.append(_render_image(factor_values, view, rng))
                ids.append(identity)
                views.append(view)

    split_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_SPLIT]))
    perm = split_rng.permutation(n_ids)
    n_train = n_ids * 2 // 3 if train_fraction == 2 / 3 \
        else int(n_ids * train_fraction)
    if n_train < 1 or n_train >= n_ids:
        raise ContractError(
            f"train_fraction {train_fraction} leaves an empty split "
            f"for {n_ids} identities")
    train_ids = np.sort(perm[:n_train])
    test_ids = np.sort(perm[n_train:])

    return ToyReIDDataset(
        images=np.stack(images).astype(np.float32),
        ids=np.asarray(ids, dtype=np.int64),
        views=np.asarray(views, dtype=np.int64),
        attrs=attrs,
        attr_names=tuple(lvl.name for lvl in spec.levels),
        train_ids=train_ids.astype(np.int64),
        test_ids=test_ids.astype(np.int64),
    )


def split_gallery_probe(dataset: ToyReIDDataset,
                        seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Build a cross-view evaluation pair over the test identities.

    The seed picks which view supplies the probe images; the other view
    becomes the gallery.  Every probe identity is guaranteed at least
    one gallery image, otherwise the dataset is rejected.
    """
    present = np.unique(dataset.views)
    if len(present) < 2:
        raise ContractError(
            "gallery/probe split needs at least two views, dataset has "
            f"{len(present)}")
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_PROBE_VIEW]))
    probe_view = int(present[rng.integers(len(present))])
    gallery_views = [int(v) for v in present if v != probe_view]

    test_mask = np.isin(dataset.ids, dataset.test_ids)
    probe_mask = test_mask & (dataset.views == probe_view)
    gallery_mask = test_mask & np.isin(dataset.views, gallery_views)

    probe_ids = set(np.unique(dataset.ids[probe_mask]))
    gallery_ids = set(np.unique(dataset.ids[gallery_mask]))
    missing = sorted(set(dataset.test_ids) - probe_ids) \
        + sorted(probe_ids - gallery_ids)
    if missing:
        raise ContractError(
            f"identities {missing} lack cross-view coverage")

    return (_take(dataset, np.where(gallery_mask)[0]),
            _take(dataset, np.where(probe_mask)[0]))


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as a binary P6 file."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    payload = quantized.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise ContractError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back into a (3, H, W) float32 image."""
    buf = Path(path).read_bytes()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise ContractError(f"not a binary PPM file: magic {magic!r}")
    fields = []
    for _ in range(3):
        token, pos = _next_token(buf, pos)
        if not token.isdigit():
            raise ContractError(f"bad PPM header field {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"unsupported PPM maxval {maxval}")
    pos += 1
    data = buf[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ContractError("PPM pixel payload is truncated")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def export_ppm_dir(dataset: ToyReIDDataset, dirpath) -> None:
    """Write every image as `{id}_{view}_{idx}.ppm` plus a manifest.

    `idx` counts images within each (identity, view) pair in dataset
    order.  The manifest carries the labels and one `attr_*` column per
    factor; it is the authoritative record on re-ingestion.
    """
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[tuple[int, int], int] = {}
    rows = []
    for row in range(len(dataset.ids)):
        identity = int(dataset.ids[row])
        view = int(dataset.views[row])
        idx = counters.get((identity, view), 0)
        counters[(identity, view)] = idx + 1
        name = f"{identity}_{view}_{idx}.ppm"
        write_ppm(out / name, dataset.images[row])
        rows.append([name, identity, view]
                    + [int(v) for v in dataset.attrs[identity]])

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "id", "view"]
                        + [f"attr_{n}" for n in dataset.attr_names])
        writer.writerows(rows)


def load_ppm_dir(dirpath) -> ToyReIDDataset:
    """Ingest a directory written by `export_ppm_dir`.

    Identity values are remapped to a dense 0..n-1 range (sorted order)
    and the first two thirds of the sorted identities become the train
    split.  Attribute rows must agree across all images of an identity.
    """
    root = Path(dirpath)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ContractError(f"no manifest.csv under {root}")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[:3] != ["file", "id", "view"]:
            raise ContractError(f"unexpected manifest columns {header}")
        attr_cols = header[3:]
        if any(not c.startswith("attr_") for c in attr_cols):
            raise ContractError(f"unexpected manifest columns {header}")
        records = list(reader)
    if not records:
        raise ContractError("manifest.csv lists no images")

    raw_ids = [int(r["id"]) for r in records]
    uniq = sorted(set(raw_ids))
    remap = {orig: dense for dense, orig in enumerate(uniq)}

    images = []
    ids = []
    views = []
    attrs = np.zeros((len(uniq), len(attr_cols)), dtype=np.int64)
    seen = np.zeros(len(uniq), dtype=bool)
    for record in records:
        dense = remap[int(record["id"])]
        row = [int(record[c]) for c in attr_cols]
        if seen[dense]:
            if list(attrs[dense]) != row:
                raise ContractError(
                    f"identity {record['id']} has conflicting attribute "
                    f"rows in the manifest")
        else:
            attrs[dense] = row
            seen[dense] = True
        images.append(read_ppm(root / record["file"]))
        ids.append(dense)
        views.append(int(record["view"]))

    n_train = len(uniq) * 2 // 3
    dense_ids = np.arange(len(uniq), dtype=np.int64)
    return ToyReIDDataset(
        images=np.stack(images),
        ids=np.asarray(ids, dtype=np.int64),
        views=np.asarray(views, dtype=np.int64),
        attrs=attrs,
        attr_names=tuple(c[len("attr_"):] for c in attr_cols),
        train_ids=dense_ids[:n_train],
        test_ids=dense_ids[n_train:],
    )
