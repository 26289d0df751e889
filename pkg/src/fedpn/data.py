"""Synthetic datasets, heterogeneous client partitions, label noise and splits."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

__all__ = [
    "LabeledDataset",
    "ClientPartition",
    "SplitSpec",
    "gen_toy_three_clusters",
    "gen_blobs",
    "blob_centers",
    "partition_heterogeneous",
    "inject_label_noise",
    "split",
    "save_dataset",
    "load_dataset",
]

TOY_CENTERS = ((-1.0, 0.0), (0.0, 0.0), (1.0, 0.0))
PARTITION_BALANCE_TOL = 0.1
MAX_PARTITION_ATTEMPTS = 200


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ContractError("inputs must be N x d with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def classes(self):
        return np.unique(self.labels)

    def class_proportions(self):
        counts = np.bincount(self.labels, minlength=self.num_classes).astype(np.float64)
        return counts / counts.sum()


@dataclass(frozen=True)
class ClientPartition:
    indices: tuple
    class_sets: tuple

    @property
    def num_clients(self):
        return len(self.indices)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    validation: float = 0.3
    calibration_share: float = 0.4

    def __post_init__(self):
        for name in ("train", "validation", "calibration_share"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ContractError(f"split fraction {name} must lie in (0, 1)")
        if abs(self.train + self.validation - 1.0) > 1e-12:
            raise ContractError("train and validation fractions must sum to 1")


def _rng(seed):
    return np.random.default_rng(seed)


def gen_toy_three_clusters(n_per_cluster, num_classes, seed, centers=TOY_CENTERS, std=0.1):
    """Three isotropic 2D Gaussians: left all class 0, right all class 1,
    middle labelled uniformly over every class."""
    if n_per_cluster <= 0:
        raise ContractError("n_per_cluster must be positive")
    if num_classes < 2:
        raise ContractError("toy data needs at least two classes")
    rng = _rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    xs, ys = [], []
    for i, fixed in enumerate((0, None, 1)):
        xs.append(centers[i] + std * rng.standard_normal((n_per_cluster, 2)))
        if fixed is None:
            ys.append(rng.integers(0, num_classes, size=n_per_cluster))
        else:
            ys.append(np.full(n_per_cluster, fixed))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys).astype(np.int64), num_classes)


def blob_centers(num_classes, dim, separation, offset=0.0):
    """Class centres evenly spaced on a circle of radius ``separation`` in the
    first two coordinates; ``offset`` rotates the circle."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes + offset
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1] = separation * np.sin(angles)
    return centers


def gen_blobs(num_classes, n_per_class, dim, separation, seed, std=1.0, centers=None):
    if num_classes < 2:
        raise ContractError("blobs need at least two classes")
    if dim < 2 or n_per_class < 1:
        raise ContractError("blobs need dim >= 2 and at least one sample per class")
    if separation < 0 or std <= 0:
        raise ContractError("separation must be >= 0 and std > 0")
    rng = _rng(seed)
    if centers is None:
        centers = blob_centers(num_classes, dim, separation)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = centers[labels] + std * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order].astype(np.int64), num_classes)


def partition_heterogeneous(ds, num_clients, classes_per_client=(2, 3), seed=0):
    """Give each client a random class subset of size within the range.

    Classes are dealt round-robin from a stream of random permutations, so
    the first ``K`` slots cover every class.  Each class is then split among
    its holders with shares chosen by matrix scaling so that client totals
    come out (approximately) equal.
    """
    k = ds.num_classes
    lo, hi = min(classes_per_client), max(classes_per_client)
    if num_clients < 1:
        raise ContractError("need at least one client")
    if lo < 1 or hi > k:
        raise ContractError(f"classes per client must lie in [1, {k}]")
    if num_clients * hi < k:
        raise ContractError("not enough clients to cover every class")
    rng = _rng(seed)
    counts = np.bincount(ds.labels, minlength=k).astype(np.float64)
    best = None
    # redraw class sets until a near-equal allocation exists
    for _ in range(MAX_PARTITION_ATTEMPTS):
        class_sets = _draw_class_sets(rng, num_clients, k, lo, hi)
        share = _balanced_shares(class_sets, counts, num_clients)
        totals = share.sum(axis=1)
        dev = np.max(np.abs(totals / totals.mean() - 1.0))
        if best is None or dev < best[0]:
            best = (dev, class_sets, share)
        if dev <= PARTITION_BALANCE_TOL:
            break
    _, class_sets, share = best
    per_client = [[] for _ in range(num_clients)]
    for c in range(k):
        holders = [i for i in range(num_clients) if c in class_sets[i]]
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        cuts = np.round(np.cumsum(share[holders, c])[:-1]).astype(int)
        for holder, chunk in zip(holders, np.split(idx, cuts)):
            per_client[holder].extend(chunk.tolist())
    return ClientPartition(
        tuple(np.sort(np.asarray(p, dtype=np.intp)) for p in per_client),
        tuple(frozenset(int(c) for c in s) for s in class_sets),
    )


def _draw_class_sets(rng, num_clients, k, lo, hi):
    sizes = rng.integers(lo, hi + 1, size=num_clients)
    for i in np.argsort(sizes, kind="stable"):
        while sizes[i] < hi and sizes.sum() < k:
            sizes[i] += 1
    slots = [i for rnd in range(hi) for i in range(num_clients) if sizes[i] > rnd]
    class_sets = [[] for _ in range(num_clients)]
    stream = []
    for client in slots:
        pos = 0
        while True:
            if pos >= len(stream):
                stream.extend(rng.permutation(k).tolist())
            if stream[pos] not in class_sets[client]:
                class_sets[client].append(stream.pop(pos))
                break
            pos += 1
    return class_sets


def _balanced_shares(class_sets, counts, num_clients, iters=500):
    # Sinkhorn scaling on the client x class support: columns sum to the class
    # counts, rows towards the common per-client total
    support = np.zeros((num_clients, len(counts)))
    for i, cs in enumerate(class_sets):
        support[i, list(cs)] = 1.0
    share = support * counts / np.maximum(support.sum(axis=0), 1.0)
    target = counts.sum() / num_clients
    for _ in range(iters):
        share *= (target / np.maximum(share.sum(axis=1), 1e-300))[:, None]
        share *= counts / np.maximum(share.sum(axis=0), 1e-300)
    return share


def inject_label_noise(ds, noisy_classes, seed):
    """Resample labels of samples in ``noisy_classes`` uniformly over that set."""
    noisy = np.array(sorted(set(int(c) for c in noisy_classes)), dtype=np.int64)
    if noisy.size == 0:
        return ds
    if noisy.min() < 0 or noisy.max() >= ds.num_classes:
        raise ContractError("noisy classes must be valid class indices")
    rng = _rng(seed)
    labels = ds.labels.copy()
    mask = np.isin(labels, noisy)
    labels[mask] = noisy[rng.integers(0, noisy.size, size=int(mask.sum()))]
    return LabeledDataset(ds.inputs, labels, ds.num_classes)


def split(ds, spec, seed):
    """Split into (train, evaluation, calibration).

    The validation part is cut 40/60 into calibration and held-out
    evaluation, and calibration keeps only classes present in train.
    """
    rng = _rng(seed)
    n = len(ds)
    order = rng.permutation(n)
    n_train = int(round(spec.train * n))
    train_idx, val_idx = order[:n_train], order[n_train:]
    n_cal = int(round(spec.calibration_share * len(val_idx)))
    cal_idx, eval_idx = val_idx[:n_cal], val_idx[n_cal:]
    train_classes = np.unique(ds.labels[train_idx])
    cal_idx = cal_idx[np.isin(ds.labels[cal_idx], train_classes)]
    if len(train_idx) == 0 or len(eval_idx) == 0 or len(cal_idx) == 0:
        raise ContractError("split produced an empty part")
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(eval_idx)), ds.subset(np.sort(cal_idx))


def save_dataset(ds, path):
    """Columnar text: a ``d,K,N`` header then ``features...,label`` rows."""
    with open(path, "x") as fh:
        fh.write(f"{ds.dim},{ds.num_classes},{len(ds)}\n")
        for row, label in zip(ds.inputs, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_dataset(path):
    with open(path) as fh:
        d, k, n = (int(v) for v in fh.readline().split(","))
        body = np.loadtxt(fh, delimiter=",", ndmin=2) if n else np.zeros((0, d + 1))
    if body.shape != (n, d + 1):
        raise ContractError(f"{path}: expected {n} rows of {d + 1} columns")
    return LabeledDataset(body[:, :d].copy(), body[:, d].astype(np.int64), k)
