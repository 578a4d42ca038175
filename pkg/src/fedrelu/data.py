"""Datasets of unit-norm, pairwise-separated inputs and their client partitions.

Two sources: a synthetic generator (rejection sampling on the unit sphere
with a certified minimum pairwise distance, linear-teacher targets) and an
IDX-format loader for MNIST-like corpora. Partitioners split a dataset into
disjoint per-client shards, either uniformly (iid) or by label groups
(label_shards, the classic few-classes-per-client heterogeneous split).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, gaussian_matrix


class PackingInfeasibleError(RuntimeError):
    """Rejection sampling hit the attempt cap before placing all points."""

    def __init__(self, accepted: int, requested: int, attempts: int):
        self.accepted = accepted
        super().__init__(
            f"placed only {accepted}/{requested} points after {attempts} attempts; "
            f"the requested separation is likely infeasible"
        )


class IdxFormatError(ValueError):
    """Base for malformed IDX input."""


class WrongMagicError(IdxFormatError):
    pass


class TruncatedIdxError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    """Raised when a requested partition cannot be formed."""


@dataclass
class Dataset:
    """Immutable labeled examples with unit-norm inputs.

    `phi` is a certified minimum pairwise input distance: positive only when
    guaranteed by construction (or measured and stamped by the caller), 0 for
    uncertified data.
    """

    xs: np.ndarray  # (n, d)
    ys: np.ndarray  # (n, o)
    labels: np.ndarray | None  # (n,) int class ids, or None
    phi: float = 0.0

    def __post_init__(self) -> None:
        self.xs.setflags(write=False)
        self.ys.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    @property
    def o(self) -> int:
        return self.ys.shape[1]


@dataclass
class Shard:
    """A client's view of a dataset, materialized once for cheap reuse."""

    client_id: int
    indices: np.ndarray
    xs: np.ndarray = field(init=False)
    ys: np.ndarray = field(init=False)
    labels: np.ndarray | None = field(init=False)

    def __init__(self, dataset: Dataset, indices: np.ndarray, client_id: int):
        self.client_id = client_id
        self.indices = np.asarray(indices, dtype=np.int64)
        self.xs = dataset.xs[self.indices]
        self.ys = dataset.ys[self.indices]
        self.labels = None if dataset.labels is None else dataset.labels[self.indices]
        for a in (self.indices, self.xs, self.ys):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass
class Partition:
    """K disjoint shards covering a dataset exactly."""

    dataset: Dataset
    shards: list[Shard]
    scheme: str

    def __post_init__(self) -> None:
        seen = np.concatenate([s.indices for s in self.shards])
        if len(np.unique(seen)) != len(seen):
            raise PartitionError("shards overlap")
        if len(seen) != len(self.dataset):
            raise PartitionError(
                f"shards cover {len(seen)} of {len(self.dataset)} examples"
            )

    @property
    def K(self) -> int:
        return len(self.shards)

    def max_shard_size(self) -> int:
        return max(len(s) for s in self.shards)


def gen_separable(
    n: int, d: int, phi: float, rng: RngStream, o: int = 1
) -> Dataset:
    """n unit vectors in R^d with pairwise distances >= phi, teacher targets.

    Candidates are sampled uniformly on the sphere and rejected whenever they
    come within `phi` of an already-accepted point; at most 1000*n candidates
    are tried. Targets are y = T x for a fixed Gaussian teacher T (o x d)
    drawn first from the same stream, and the class id is the argmax
    coordinate of y, which gives label-based partitioners something
    meaningful to group by.
    """
    if not 0.0 <= phi < 2.0:
        raise ValueError(f"phi must be in [0, 2), got {phi}")
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    teacher = gaussian_matrix(o, d, 1.0, rng)
    accepted = np.empty((n, d))
    count = 0
    attempts = 0
    cap = 1000 * n
    while count < n:
        if attempts >= cap:
            raise PackingInfeasibleError(count, n, attempts)
        attempts += 1
        v = rng.standard_normals(d)
        nv = math.sqrt(float(np.sum(v * v)))
        if nv == 0.0:
            continue
        x = v / nv
        if count > 0 and phi > 0.0:
            dists = np.sqrt(np.sum((accepted[:count] - x) ** 2, axis=1))
            if float(dists.min()) < phi:
                continue
        accepted[count] = x
        count += 1
    ys = accepted @ teacher.T
    labels = np.argmax(ys, axis=1).astype(np.int64)
    return Dataset(accepted, ys, labels, phi=phi)


def min_pairwise_distance(ds: Dataset, block: int = 512) -> float:
    """Exact minimum over all pairs ||x_i - x_j||, O(n^2) blocked."""
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 examples")
    xs = ds.xs
    sq = np.sum(xs * xs, axis=1)
    best = math.inf
    for start in range(0, n, block):
        stop = min(start + block, n)
        # squared distances of rows [start:stop) against all later rows
        cross = xs[start:stop] @ xs.T
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * cross
        for i in range(start, stop):
            if i + 1 < n:
                row = d2[i - start, i + 1 :]
                m = float(row.min())
                if m < best:
                    best = m
    return math.sqrt(max(best, 0.0))


def partition_iid(ds: Dataset, K: int, rng: RngStream) -> Partition:
    """Random permutation split into K shards whose sizes differ by <= 1."""
    n = len(ds)
    if K < 1:
        raise PartitionError(f"K must be >= 1, got {K}")
    if K > n:
        raise PartitionError(f"K={K} exceeds dataset size {n}")
    perm = rng.permutation(n)
    base, extra = divmod(n, K)
    shards = []
    offset = 0
    for i in range(K):
        size = base + (1 if i < extra else 0)
        idx = np.sort(perm[offset : offset + size])
        shards.append(Shard(ds, idx, i))
        offset += size
    return Partition(ds, shards, "iid")


def _chunk_quotas(group_sizes: list[int], n_chunks: int) -> list[int]:
    """Apportion n_chunks across label groups, proportional with remainders,
    every group getting at least one chunk and none more than its size."""
    total = sum(group_sizes)
    raw = [g * n_chunks / total for g in group_sizes]
    quotas = [max(1, min(int(r), g)) for r, g in zip(raw, group_sizes)]
    # largest-remainder touch-up until the quota sum matches exactly
    while sum(quotas) != n_chunks:
        if sum(quotas) < n_chunks:
            candidates = [
                (raw[i] - quotas[i], i)
                for i in range(len(quotas))
                if quotas[i] < group_sizes[i]
            ]
            if not candidates:
                raise PartitionError("not enough examples to form the requested chunks")
            quotas[max(candidates)[1]] += 1
        else:
            candidates = [(raw[i] - quotas[i], i) for i in range(len(quotas)) if quotas[i] > 1]
            if not candidates:
                raise PartitionError("cannot shrink chunk quotas further")
            quotas[min(candidates)[1]] -= 1
    return quotas


def partition_label_shards(
    ds: Dataset, K: int, classes_per_client: int, rng: RngStream
) -> Partition:
    """Heterogeneous split: deal label-pure chunks, classes_per_client each.

    Examples are grouped by label, each group is cut into label-pure chunks
    (chunk counts proportional to group sizes, K*classes_per_client chunks in
    total), and the shuffled chunks are dealt round-robin. Every client ends
    up with exactly classes_per_client chunks and therefore at most
    classes_per_client distinct labels.
    """
    if ds.labels is None:
        raise PartitionError("dataset has no labels; label_shards needs class ids")
    if K < 1 or classes_per_client < 1:
        raise PartitionError("K and classes_per_client must be >= 1")
    n = len(ds)
    n_chunks = K * classes_per_client
    uniq = np.unique(ds.labels)
    if n_chunks > n:
        raise PartitionError(
            f"K*classes_per_client = {n_chunks} exceeds chunkable size {n}"
        )
    if len(uniq) > n_chunks:
        raise PartitionError(
            f"{len(uniq)} labels cannot be covered by {n_chunks} label-pure chunks; "
            f"increase K or classes_per_client"
        )
    groups = [np.flatnonzero(ds.labels == lab) for lab in uniq]
    quotas = _chunk_quotas([len(g) for g in groups], n_chunks)
    # chunks listed label-major and dealt round-robin: which examples land in
    # which chunk is randomized inside each label group, while the label
    # structure of the deal stays fixed (so classes_per_client = num_classes
    # recovers full label support on every client)
    chunks: list[np.ndarray] = []
    for group, quota in zip(groups, quotas):
        shuffled = group[rng.permutation(len(group))]
        chunks.extend(np.array_split(shuffled, quota))
    assignments: list[list[np.ndarray]] = [[] for _ in range(K)]
    for pos, chunk in enumerate(chunks):
        assignments[pos % K].append(chunk)
    shards = [
        Shard(ds, np.sort(np.concatenate(parts)), i)
        for i, parts in enumerate(assignments)
    ]
    return Partition(ds, shards, "label_shards")


_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


def _read_header(raw: bytes, expected_magic: int, n_dims: int, path: str) -> tuple[list[int], int]:
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise TruncatedIdxError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    magic = struct.unpack(">I", raw[0:4])[0]
    if magic != expected_magic:
        raise WrongMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = list(struct.unpack(f">{n_dims}I", raw[4:need]))
    return dims, need


def load_idx(images_path: str, labels_path: str, keep_degenerate: bool = False) -> Dataset:
    """Parse a big-endian IDX image/label pair into a unit-norm Dataset.

    Pixels are scaled to [0,1], flattened and L2-normalized; targets are
    one-hot label vectors. By default, images whose pixel vector is all-zero
    (which cannot sit on the unit sphere) and exact duplicates of an earlier
    image are dropped, so the minimum pairwise distance of the result is
    measurable; pass keep_degenerate=True to retain everything as parsed
    (zero images stay zero vectors and the unit-norm guarantee is waived).
    """
    with open(images_path, "rb") as fh:
        raw_img = fh.read()
    with open(labels_path, "rb") as fh:
        raw_lab = fh.read()

    (n_img, h, w), off = _read_header(raw_img, _IMAGE_MAGIC, 3, images_path)
    payload = n_img * h * w
    if len(raw_img) < off + payload:
        raise TruncatedIdxError(
            f"{images_path}: expected {payload} pixel bytes, found {len(raw_img) - off}"
        )
    (n_lab,), off_l = _read_header(raw_lab, _LABEL_MAGIC, 1, labels_path)
    if len(raw_lab) < off_l + n_lab:
        raise TruncatedIdxError(
            f"{labels_path}: expected {n_lab} label bytes, found {len(raw_lab) - off_l}"
        )
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")

    pixels = np.frombuffer(raw_img, dtype=np.uint8, count=payload, offset=off)
    labels = np.frombuffer(raw_lab, dtype=np.uint8, count=n_lab, offset=off_l).astype(np.int64)
    xs = pixels.reshape(n_img, h * w).astype(np.float64) / 255.0
    norms = np.sqrt(np.sum(xs * xs, axis=1))

    if keep_degenerate:
        safe = np.where(norms == 0.0, 1.0, norms)
        xs = xs / safe[:, None]
        kept = np.arange(n_img)
    else:
        # duplicates are judged after normalization: distinct raw intensities
        # can land on the same sphere point and would zero out min distance
        seen: set[bytes] = set()
        kept_list = []
        normalized = np.zeros_like(xs)
        for i in range(n_img):
            if norms[i] == 0.0:
                continue
            row = xs[i] / norms[i]
            key = row.tobytes()
            if key in seen:
                continue
            seen.add(key)
            normalized[i] = row
            kept_list.append(i)
        kept = np.array(kept_list, dtype=np.int64)
        if kept.size == 0:
            raise IdxFormatError(f"{images_path}: no usable (nonzero, distinct) images")
        xs = normalized[kept]
        labels = labels[kept]

    n_classes = int(labels.max()) + 1 if labels.size else 1
    ys = np.zeros((len(kept), n_classes))
    ys[np.arange(len(kept)), labels] = 1.0
    return Dataset(np.ascontiguousarray(xs), ys, labels, phi=0.0)
