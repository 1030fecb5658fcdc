"""Dataset loading, client partitioning, and data-level poisoning.

Images travel as float64 arrays in [0, 1] with integer labels. Files
use the IDX format (big-endian magic + dimension header, uint8
payload), so official MNIST-family files load directly; a synthetic
generator emits class-structured images through the same format for
desk-scale runs without a downloaded corpus.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class MalformedHeaderError(ValueError):
    pass


class TruncatedPayloadError(ValueError):
    pass


class CountMismatchError(ValueError):
    pass


class EmptyShardError(ValueError):
    """A client received zero examples; retry with a different seed."""


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX image file into a (count, rows, cols) uint8 array."""
    if len(data) < 16:
        raise MalformedHeaderError("image header needs 16 bytes")
    magic, count, rows, cols = struct.unpack(">iiii", data[:16])
    if magic != IMAGE_MAGIC:
        raise MalformedHeaderError(f"bad image magic 0x{magic:08x}")
    expected = count * rows * cols
    payload = data[16:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(count, rows, cols)


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode an IDX label file into a (count,) uint8 array."""
    if len(data) < 8:
        raise MalformedHeaderError("label header needs 8 bytes")
    magic, count = struct.unpack(">ii", data[:8])
    if magic != LABEL_MAGIC:
        raise MalformedHeaderError(f"bad label magic 0x{magic:08x}")
    payload = data[8:]
    if len(payload) < count:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} labels, header promises {count}"
        )
    return np.frombuffer(payload[:count], dtype=np.uint8)


def parse_idx(image_bytes: bytes, label_bytes: bytes):
    """Decode a matched image/label IDX pair.

    Images come back as float64 in [0, 1] (uint8 / 255), labels as
    int64. Raises CountMismatchError when the two files disagree.
    """
    images = parse_idx_images(image_bytes)
    labels = parse_idx_labels(label_bytes)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx_images(images: np.ndarray) -> bytes:
    """Encode a (count, rows, cols) array of [0,1] floats or uint8 pixels."""
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">iiii", IMAGE_MAGIC, count, rows, cols) + images.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    return struct.pack(">ii", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def load_idx_files(image_path, label_path):
    with open(image_path, "rb") as f:
        image_bytes = f.read()
    with open(label_path, "rb") as f:
        label_bytes = f.read()
    return parse_idx(image_bytes, label_bytes)


@dataclass
class PartitionSpec:
    """How to split the training set across clients."""

    mode: str = "iid"  # iid | dirichlet | label_shard
    n_clients: int = 20
    seed: int = 0
    alpha: float = 0.5  # dirichlet concentration
    shards_per_client: int = 2  # label_shard mode

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet", "label_shard"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def partition(labels: np.ndarray, spec: PartitionSpec):
    """Assign example indices to clients; a disjoint exact cover.

    Returns a list of index arrays, one per client. Raises
    EmptyShardError when a client would end up with no data.
    """
    n = len(labels)
    if spec.n_clients > n:
        raise EmptyShardError(f"{spec.n_clients} clients but only {n} examples")
    rng = stream(spec.seed, "partition")

    if spec.mode == "iid":
        order = rng.permutation(n)
        shards = np.array_split(order, spec.n_clients)
    elif spec.mode == "dirichlet":
        shards = _dirichlet_partition(labels, spec, rng)
    else:
        shards = _label_shard_partition(labels, spec, rng)

    shards = [np.sort(s) for s in shards]
    if any(len(s) == 0 for s in shards):
        raise EmptyShardError("a client received zero examples; reseed the partition")
    return shards


def _dirichlet_partition(labels, spec, rng):
    classes = np.unique(labels)
    # row c of proportions: client mix for one class, drawn Dir(alpha)
    shards = [[] for _ in range(spec.n_clients)]
    for c in classes:
        idx = np.where(labels == c)[0]
        rng.shuffle(idx)
        weights = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
        cuts = (np.cumsum(weights) * len(idx)).astype(np.int64)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].append(part)
    return [np.concatenate(parts) if parts else np.array([], dtype=np.int64)
            for parts in shards]


def _label_shard_partition(labels, spec, rng):
    n_shards = spec.n_clients * spec.shards_per_client
    order = np.argsort(labels, kind="stable")
    blocks = np.array_split(order, n_shards)
    assignment = rng.permutation(n_shards)
    shards = []
    for client in range(spec.n_clients):
        mine = assignment[client * spec.shards_per_client:(client + 1) * spec.shards_per_client]
        shards.append(np.concatenate([blocks[b] for b in mine]))
    return shards


@dataclass
class TriggerSpec:
    """A rectangular backdoor trigger and its poisoning policy."""

    row: int = 0
    col: int = 0
    height: int = 4
    width: int = 4
    pixel_value: float = 1.0
    target_label: int = 7
    n_local: int = 4
    poison_rate: float = 0.5

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("trigger rectangle must be nonempty")
        if not 0.0 <= self.pixel_value <= 1.0:
            raise ValueError("pixel_value must lie in [0, 1]")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in (0, 1]")
        if self.n_local < 1:
            raise ValueError("n_local must be >= 1")

    def local_strips(self):
        """Split the rectangle into n_local horizontal strips whose
        union is exactly the global trigger."""
        edges = np.linspace(0, self.height, self.n_local + 1).astype(int)
        strips = []
        for k in range(self.n_local):
            strips.append((self.row + edges[k], self.col,
                           max(edges[k + 1] - edges[k], 0), self.width))
        return strips


def inject_trigger(image: np.ndarray, label: int, trig: TriggerSpec,
                   local_index: int = None):
    """Stamp the trigger (or one local strip of it) and retarget the label.

    ``local_index`` selects a strip for the distributed variant; None
    applies the full rectangle.
    """
    h, w = image.shape
    if not (0 <= trig.row and trig.row + trig.height <= h
            and 0 <= trig.col and trig.col + trig.width <= w):
        raise ValueError("trigger rectangle exceeds image bounds")
    if local_index is None:
        r, c, th, tw = trig.row, trig.col, trig.height, trig.width
    else:
        strips = trig.local_strips()
        if not 0 <= local_index < len(strips):
            raise IndexError(f"local trigger index {local_index} out of range")
        r, c, th, tw = strips[local_index]
    out = image.copy()
    out[r:r + th, c:c + tw] = trig.pixel_value
    return out, trig.target_label


def poison_shard(images: np.ndarray, labels: np.ndarray, trig: TriggerSpec,
                 seed: int, local_index: int = None):
    """Apply the trigger to the first ceil(rate * n) examples under a
    seeded shuffle; the rest pass through untouched."""
    n = len(labels)
    n_poison = int(np.ceil(trig.poison_rate * n))
    order = stream(seed, "poison-selection").permutation(n)
    chosen = order[:n_poison]
    out_images = images.copy()
    out_labels = labels.copy()
    for i in chosen:
        out_images[i], out_labels[i] = inject_trigger(images[i], labels[i], trig,
                                                      local_index)
    return out_images, out_labels, np.sort(chosen)


def uniform_flip(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Mirror every label: y -> num_classes - 1 - y."""
    return (num_classes - 1) - labels


def class_bias(labels: np.ndarray, target: int, rate: float, seed: int) -> np.ndarray:
    """Relabel a fraction of the non-target examples to the target class.

    Selection is the first ceil(rate * count) non-target examples under
    a seeded shuffle; examples already labeled target never change.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    out = labels.copy()
    candidates = np.where(labels != target)[0]
    n_flip = int(np.ceil(rate * len(candidates)))
    order = stream(seed, "class-bias").permutation(len(candidates))
    out[candidates[order[:n_flip]]] = target
    return out


@dataclass
class SyntheticSpec:
    """Shape of the generated desk-scale image corpus."""

    n_train: int = 10000
    n_test: int = 2000
    image_size: int = 14
    num_classes: int = 10
    noise: float = 0.25
    margin: int = 4  # quiet border carrying no class signal
    seed: int = 1234
    template_smoothing: int = field(default=2, repr=False)


def make_synthetic_dataset(spec: SyntheticSpec):
    """Class-templated noisy images standing in for a downsampled
    MNIST-family corpus.

    Each class gets a smooth random template confined to the image
    center -- like handwritten-digit data, the border carries noise but
    no class signal. An example is its template plus pixel noise and a
    brightness jitter, clipped to [0, 1]. Separable enough for a small
    classifier to pass 80% accuracy, noisy enough that it takes many
    rounds.
    """
    rng = stream(spec.seed, "synthetic-templates")
    size = spec.image_size
    m = spec.margin
    interior = np.zeros((size, size))
    interior[m:size - m, m:size - m] = 1.0
    templates = []
    for _ in range(spec.num_classes):
        t = rng.normal(size=(size, size))
        for _ in range(spec.template_smoothing):
            t = _box_blur(t)
        t = (t - t.min()) / (t.max() - t.min() + 1e-12)
        templates.append((0.15 + 0.8 * t) * interior)
    templates = np.array(templates)

    def draw(count, label_rng, pix_rng):
        labels = label_rng.integers(spec.num_classes, size=count)
        images = templates[labels]
        images = images * pix_rng.uniform(0.7, 1.3, size=(count, 1, 1))
        images = images + pix_rng.normal(scale=spec.noise, size=images.shape) * interior
        return np.clip(images, 0.0, 1.0), labels.astype(np.int64)

    train = draw(spec.n_train, stream(spec.seed, "synthetic-train-labels"),
                 stream(spec.seed, "synthetic-train-pixels"))
    test = draw(spec.n_test, stream(spec.seed, "synthetic-test-labels"),
                stream(spec.seed, "synthetic-test-pixels"))
    return train, test


def _box_blur(a: np.ndarray) -> np.ndarray:
    padded = np.pad(a, 1, mode="edge")
    out = np.zeros_like(a)
    for dr in range(3):
        for dc in range(3):
            out += padded[dr:dr + a.shape[0], dc:dc + a.shape[1]]
    return out / 9.0


def write_synthetic_idx(out_dir, spec: SyntheticSpec):
    """Materialize the synthetic corpus as four IDX files; returns paths."""
    import os

    (train_x, train_y), (test_x, test_y) = make_synthetic_dataset(spec)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, (x, y) in {"train": (train_x, train_y), "test": (test_x, test_y)}.items():
        img_path = os.path.join(out_dir, f"{name}-images-idx3-ubyte")
        lab_path = os.path.join(out_dir, f"{name}-labels-idx1-ubyte")
        with open(img_path, "wb") as f:
            f.write(write_idx_images(x))
        with open(lab_path, "wb") as f:
            f.write(write_idx_labels(y))
        paths[name] = (img_path, lab_path)
    return paths
