"""Episode sampling, dataset ingestion, and the synthetic Gaussian generator.

An episode is one classification task: a handful of labeled images over K
classes, optionally some unlabeled images, and a single query image whose
class (reported as a slot in 1..K) is the prediction target. Class identity
inside an episode is positional: the k-th drawn class becomes slot k, so a
model can never memorize global class ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MODES = ("fewshot", "semi", "active")


class SamplingError(RuntimeError):
    """A split cannot satisfy the requested episode protocol."""


class IngestionError(RuntimeError):
    pass


class ProtocolError(ValueError):
    """Episode protocol arguments are inconsistent."""


@dataclass
class ClassDistribution:
    mean: np.ndarray
    cov_scale: float


@dataclass
class Episode:
    labeled: list[tuple[np.ndarray, int]]  # (image, slot label in 1..K)
    unlabeled: list[np.ndarray]
    query: np.ndarray
    answer: int  # slot label in 1..K
    way: int
    shots: int
    # ground truth for the unlabeled images, revealed one node at a time by
    # the active-query mechanism; never read in plain semi-supervised mode
    unlabeled_labels: list[int] | None = None


@dataclass
class DatasetSplit:
    """Immutable class-indexed image store; images are float64 (c, h, w)."""

    name: str
    class_names: tuple[str, ...]
    class_images: tuple[np.ndarray, ...]  # per class: (n_i, c, h, w)
    distributions: tuple[ClassDistribution, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.class_names) != len(self.class_images):
            raise IngestionError("class name/image store length mismatch")
        for arr in self.class_images:
            arr.setflags(write=False)

    @property
    def class_count(self) -> int:
        return len(self.class_images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.class_images[0].shape[1:]


def sample_episode(
    split: DatasetSplit,
    K: int,
    q: int,
    r_per_class: int,
    mode: str,
    rng: np.random.Generator,
) -> Episode:
    """Draw one K-way q-shot episode with r_per_class unlabeled images per class.

    The extra query image is drawn uniformly over the K classes and never
    reuses a support or unlabeled image.
    """
    if mode not in MODES:
        raise ProtocolError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode == "fewshot" and r_per_class != 0:
        raise ProtocolError("fewshot mode requires r_per_class = 0")
    if mode in ("semi", "active") and r_per_class < 1:
        raise ProtocolError(f"{mode} mode requires r_per_class >= 1")
    if K < 2 or q < 1:
        raise ProtocolError(f"need K >= 2 and q >= 1, got K={K}, q={q}")
    if split.class_count < K:
        raise SamplingError(
            f"split {split.name!r} has {split.class_count} classes, episode needs {K}"
        )

    classes = rng.choice(split.class_count, size=K, replace=False)
    need = q + r_per_class + 1
    labeled: list[tuple[np.ndarray, int]] = []
    unlabeled: list[np.ndarray] = []
    unlabeled_labels: list[int] = []
    used: list[np.ndarray] = []
    for slot, cls in enumerate(classes, start=1):
        imgs = split.class_images[cls]
        if imgs.shape[0] < need:
            raise SamplingError(
                f"class {split.class_names[cls]!r} has {imgs.shape[0]} images, "
                f"episode needs {need}"
            )
        idx = rng.choice(imgs.shape[0], size=q + r_per_class, replace=False)
        used.append(idx)
        labeled.extend((imgs[i], slot) for i in idx[:q])
        unlabeled.extend(imgs[i] for i in idx[q:])
        unlabeled_labels.extend([slot] * r_per_class)

    query_slot = int(rng.integers(K)) + 1
    cls = classes[query_slot - 1]
    free = np.setdiff1d(np.arange(split.class_images[cls].shape[0]), used[query_slot - 1])
    query = split.class_images[cls][int(rng.choice(free))]
    return Episode(labeled, unlabeled, query, query_slot, K, q, unlabeled_labels or None)


def sample_probe_episode(
    split: DatasetSplit, K: int, r: int, rng: np.random.Generator
) -> tuple[Episode, int]:
    """Construct an episode where exactly one unlabeled image is informative.

    Two of the K slots get no labeled support: the query's slot and a decoy.
    The unlabeled set holds one image from the query's class (the informative
    node) and r - 1 distractors drawn from the covered slots. Labeling the
    informative node decides the query between the two uncovered slots;
    labeling anything else leaves them symmetric. Returns the episode and the
    informative image's index within the unlabeled list.
    """
    if K < 3:
        raise ProtocolError("probe episodes need K >= 3 (two uncovered slots)")
    if r < 2:
        raise ProtocolError("probe episodes need r >= 2 (one informative + distractors)")
    if split.class_count < K:
        raise SamplingError(
            f"split {split.name!r} has {split.class_count} classes, probe needs {K}"
        )

    classes = rng.choice(split.class_count, size=K, replace=False)
    query_slot = int(rng.integers(K)) + 1
    others = [s for s in range(1, K + 1) if s != query_slot]
    decoy_slot = others[int(rng.integers(K - 1))]
    covered = [s for s in range(1, K + 1) if s not in (query_slot, decoy_slot)]

    picks: dict[int, np.ndarray] = {}

    def draw(slot: int) -> np.ndarray:
        cls = classes[slot - 1]
        imgs = split.class_images[cls]
        taken = picks.setdefault(slot, np.empty(0, dtype=int))
        free = np.setdiff1d(np.arange(imgs.shape[0]), taken)
        if free.size == 0:
            raise SamplingError(f"class {split.class_names[cls]!r} exhausted in probe")
        i = int(rng.choice(free))
        picks[slot] = np.append(taken, i)
        return imgs[i]

    labeled = [(draw(slot), slot) for slot in covered]
    distractor_slots = [covered[int(rng.integers(len(covered)))] for _ in range(r - 1)]
    unlabeled = [draw(slot) for slot in distractor_slots]
    informative_index = int(rng.integers(r))
    unlabeled.insert(informative_index, draw(query_slot))
    unlabeled_labels = distractor_slots[:]
    unlabeled_labels.insert(informative_index, query_slot)
    query = draw(query_slot)
    episode = Episode(labeled, unlabeled, query, query_slot, K, 1, unlabeled_labels)
    return episode, informative_index


def augment_rotations(split: DatasetSplit) -> DatasetSplit:
    """Expand every class into 4 classes, one per 90-degree rotation."""
    c, h, w = split.image_shape
    if h != w:
        raise IngestionError(f"rotation augmentation needs square images, got {h}x{w}")
    names: list[str] = []
    stores: list[np.ndarray] = []
    for name, imgs in zip(split.class_names, split.class_images):
        for k in range(4):
            names.append(f"{name}@rot{90 * k:03d}")
            stores.append(np.rot90(imgs, k, axes=(-2, -1)).copy() if k else imgs)
    return DatasetSplit(split.name, tuple(names), tuple(stores))


def synth_dataset(
    n_classes: int,
    dim: int,
    sep: float,
    rng: np.random.Generator,
    n_per_class: int = 40,
    name: str = "train",
) -> DatasetSplit:
    """Gaussian clusters in image layout: unit covariance, min mean distance = sep."""
    if n_classes < 2:
        raise ProtocolError(f"need at least 2 classes, got {n_classes}")
    if sep <= 0:
        raise ProtocolError(f"sep must be positive, got {sep}")
    side = int(np.sqrt(dim))
    if side * side != dim:
        raise ProtocolError(f"dim must be a perfect square for image layout, got {dim}")

    means = rng.normal(size=(n_classes, dim))
    diff = means[:, None, :] - means[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    min_dist = d[np.triu_indices(n_classes, 1)].min()
    if min_dist < sep:  # enforce the lower bound, never shrink natural spread
        means *= sep / min_dist

    names, stores, dists = [], [], []
    for i in range(n_classes):
        stores.append(rng.normal(means[i], 1.0, (n_per_class, dim)).reshape(-1, 1, side, side))
        names.append(f"{name}/synth{i:04d}")
        dists.append(ClassDistribution(means[i].copy(), 1.0))
    return DatasetSplit(name, tuple(names), tuple(stores), tuple(dists))


def _leaf_image_dirs(root) -> list:
    """Directories under root that directly contain image files, sorted by path."""
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}
    leaves = []
    for d in sorted(p for p in root.rglob("*") if p.is_dir()):
        if any(f.suffix.lower() in exts for f in d.iterdir() if f.is_file()):
            leaves.append(d)
    return leaves


def _load_class_dir(d, size: int, channels: int, bad: list[str]) -> np.ndarray | None:
    from PIL import Image

    exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}
    imgs = []
    for f in sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in exts):
        try:
            with Image.open(f) as im:
                im = im.convert("L" if channels == 1 else "RGB")
                im = im.resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except OSError:
            bad.append(str(f))
            continue
        if channels == 1:
            arr = 1.0 - arr  # bright strokes on dark ground
            imgs.append(arr[None])
        else:
            imgs.append(arr.transpose(2, 0, 1))
    return np.stack(imgs) if imgs else None


def _ingest_images(root_dir: str, size: int, channels: int) -> dict[str, DatasetSplit]:
    from pathlib import Path

    root = Path(root_dir)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root_dir!r} is not a directory")
    split_dirs = [root / s for s in ("train", "val", "test") if (root / s).is_dir()]
    flat = not split_dirs

    def build(split_root, split_name: str) -> DatasetSplit:
        leaves = _leaf_image_dirs(split_root)
        if not leaves:
            raise IngestionError(f"no image class directories under {split_root}")
        bad: list[str] = []
        names, stores = [], []
        for d in leaves:
            arr = _load_class_dir(d, size, channels, bad)
            if arr is not None:
                names.append(str(d.relative_to(split_root)))
                stores.append(arr)
        if bad:
            raise IngestionError("unreadable image files: " + ", ".join(bad))
        return DatasetSplit(split_name, tuple(names), tuple(stores))

    if flat:
        whole = build(root, "all")
        n = whole.class_count
        if n < 2:
            raise IngestionError(f"found {n} classes under {root_dir!r}, need at least 2")
        n_train = 1200 if n == 1623 else max(1, min(n - 1, round(n * 1200 / 1623)))
        return {
            "train": DatasetSplit(
                "train", whole.class_names[:n_train], whole.class_images[:n_train]
            ),
            "test": DatasetSplit(
                "test", whole.class_names[n_train:], whole.class_images[n_train:]
            ),
        }
    return {d.name: build(d, d.name) for d in split_dirs}


def ingest_omniglot(root_dir: str) -> tuple[DatasetSplit, DatasetSplit]:
    """Load Omniglot-style characters: grayscale, 28x28, inverted to [0, 1].

    Accepts either `root/<split>/<class>/<images>` or a flat class layout,
    which is split 1200/423 over sorted class names. Character classes may be
    nested (alphabet/character); any directory directly holding images is a
    class.
    """
    splits = _ingest_images(root_dir, size=28, channels=1)
    if "test" not in splits:
        raise IngestionError(f"no test split found under {root_dir!r}")
    return splits["train"], splits["test"]


def ingest_miniimagenet(root_dir: str) -> dict[str, DatasetSplit]:
    """Load an 84x84 RGB split-per-directory dataset (train/val/test)."""
    splits = _ingest_images(root_dir, size=84, channels=3)
    if "train" not in splits:
        raise IngestionError(f"no train split found under {root_dir!r}")
    return splits


_CACHE_MAGIC = b"FGDS"
_CACHE_VERSION = 1


def save_cache(path: str, splits: list[DatasetSplit]) -> None:
    """Binary ingestion cache: header (magic, version, class count, image
    shape), then per-class blobs grouped by split. Little-endian throughout."""
    shape = splits[0].image_shape
    total = sum(s.class_count for s in splits)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<HHI", _CACHE_VERSION, len(splits), total))
        fh.write(struct.pack("<I3Q", len(shape), *shape))
        for split in splits:
            if split.image_shape != shape:
                raise IngestionError("all cached splits must share one image shape")
            nb = split.name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", split.class_count))
            for cname, imgs in zip(split.class_names, split.class_images):
                cb = cname.encode("utf-8")
                fh.write(struct.pack("<I", len(cb)) + cb)
                fh.write(struct.pack("<I", imgs.shape[0]))
                fh.write(np.asarray(imgs, dtype="<f8").tobytes())


def load_cache(path: str) -> list[DatasetSplit]:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise IngestionError(f"truncated dataset cache {path!r}")
        piece = blob[off : off + n]
        off += n
        return piece

    if take(4) != _CACHE_MAGIC:
        raise IngestionError(f"{path!r} is not a dataset cache")
    version, n_splits, _total = struct.unpack("<HHI", take(8))
    if version != _CACHE_VERSION:
        raise IngestionError(f"unsupported cache version {version}")
    rank, *shape = struct.unpack("<I3Q", take(4 + 24))
    shape = tuple(int(x) for x in shape[:rank])
    per_image = int(np.prod(shape))

    splits = []
    for _ in range(n_splits):
        (nlen,) = struct.unpack("<I", take(4))
        sname = take(nlen).decode("utf-8")
        (n_classes,) = struct.unpack("<I", take(4))
        names, stores = [], []
        for _ in range(n_classes):
            (clen,) = struct.unpack("<I", take(4))
            names.append(take(clen).decode("utf-8"))
            (count,) = struct.unpack("<I", take(4))
            data = np.frombuffer(take(8 * count * per_image), dtype="<f8")
            stores.append(data.reshape(count, *shape).astype(np.float64))
        splits.append(DatasetSplit(sname, tuple(names), tuple(stores)))
    return splits
