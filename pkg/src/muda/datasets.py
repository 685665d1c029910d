"""Domain datasets, synthetic shift generators, and file ingestion.

Generators are pure functions of their arguments and seed. Target labels
are carried for evaluation only; the trainer never feeds them to a loss.

Dataset dump format (``.mds``), little-endian:
    bytes 0..3  magic b"MDS1"
    uint32 N, uint32 D, uint32 K, uint8 has_labels,
    uint16 len(domain_id), domain_id utf-8 bytes,
    N*D float64 inputs (row-major), then N int64 labels if has_labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError, ValidationError
from .layers import FLOAT


@dataclass
class DomainDataset:
    """A sample collection tagged with the domain it was drawn from."""

    inputs: np.ndarray            # (N, D) float64
    labels: np.ndarray | None     # (N,) int64 in [0, K), or None
    domain_id: str
    k: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=FLOAT)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValidationError(f"inputs must be a non-empty (N, D) array, got {self.inputs.shape}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("inputs contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValidationError(
                    f"labels shape {self.labels.shape} does not match N={self.inputs.shape[0]}"
                )
            if self.labels.min() < 0 or self.labels.max() >= self.k:
                raise ValidationError(f"labels outside [0, {self.k})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def without_labels(self) -> "DomainDataset":
        return DomainDataset(self.inputs, None, self.domain_id, self.k)


def rotate_points(points: np.ndarray, degrees: float, center=(0.0, 0.0)) -> np.ndarray:
    """Rotate 2-D points counter-clockwise about ``center``."""
    theta = np.deg2rad(degrees)
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]], dtype=FLOAT
    )
    center = np.asarray(center, dtype=FLOAT)
    return (np.asarray(points, dtype=FLOAT) - center) @ rot.T + center


def make_two_moons(
    n: int, noise_std: float = 0.1, rotation_deg: float = 0.0, seed: int = 0
) -> DomainDataset:
    """Two interleaving half-circle classes, optionally rotated.

    The upper moon runs along the unit circle's top arc; the lower moon
    is its offset mirror. Gaussian noise with ``noise_std`` is added,
    then the whole configuration is rotated about its centroid so a
    rotated domain stays interleaved with the original.
    """
    if n < 2 or n % 2 != 0:
        raise ValidationError(f"n must be an even integer >= 2, got {n}")
    half = n // 2
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    points = np.vstack([upper, lower])
    points = points + rng.normal(0.0, noise_std, size=points.shape)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    if rotation_deg != 0.0:
        points = rotate_points(points, rotation_deg, center=points.mean(axis=0))
    return DomainDataset(points, labels, f"moons_rot{rotation_deg:g}", k=2)


def make_shifted_blobs(
    n: int, k: int, shift_vector, seed: int = 0, *, cluster_std: float = 0.5
) -> tuple[DomainDataset, DomainDataset]:
    """K Gaussian clusters plus a copy translated by ``shift_vector``.

    The target reuses the source draws, so target cluster means differ
    from the source means by exactly the shift. Cluster centers sit on a
    circle of radius 3 in the first two dimensions (on a line if D=1).
    """
    if k < 2:
        raise ValidationError(f"need at least 2 clusters, got {k}")
    shift = np.asarray(shift_vector, dtype=FLOAT).reshape(-1)
    d = shift.shape[0]
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, d), dtype=FLOAT)
    angles = 2.0 * np.pi * np.arange(k) / k
    if d == 1:
        centers[:, 0] = 3.0 * np.arange(k)
    else:
        centers[:, 0] = 3.0 * np.cos(angles)
        centers[:, 1] = 3.0 * np.sin(angles)
    labels = np.arange(n, dtype=np.int64) % k
    points = centers[labels] + rng.normal(0.0, cluster_std, size=(n, d))
    source = DomainDataset(points, labels, "blobs", k=k)
    target = DomainDataset(points + shift, labels.copy(), "blobs_shifted", k=k)
    return source, target


def split(ds: DomainDataset, fractions, seed: int = 0) -> list[DomainDataset]:
    """Disjoint, exhaustive, seed-reproducible shuffled split."""
    fractions = np.asarray(fractions, dtype=FLOAT)
    if not np.isclose(fractions.sum(), 1.0):
        raise ValidationError(f"fractions must sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n)
    bounds = np.round(np.cumsum(fractions) * ds.n).astype(int)
    bounds[-1] = ds.n
    parts = []
    start = 0
    for i, stop in enumerate(bounds):
        idx = order[start:stop]
        if idx.size == 0:
            raise ValidationError(f"split part {i} is empty")
        parts.append(
            DomainDataset(
                ds.inputs[idx],
                ds.labels[idx] if ds.is_labeled else None,
                ds.domain_id,
                ds.k,
            )
        )
        start = stop
    return parts


def source_combine(datasets: list[DomainDataset]) -> DomainDataset:
    """Concatenate several labeled source domains into one pool."""
    if not datasets:
        raise ValidationError("source_combine needs at least one dataset")
    first = datasets[0]
    for ds in datasets:
        if not ds.is_labeled:
            raise ValidationError(f"domain {ds.domain_id!r} is unlabeled")
        if ds.k != first.k:
            raise ValidationError(
                f"class count mismatch: {first.domain_id!r} has K={first.k}, "
                f"{ds.domain_id!r} has K={ds.k}"
            )
        if ds.dim != first.dim:
            raise ValidationError(
                f"dimension mismatch: {first.domain_id!r} has D={first.dim}, "
                f"{ds.domain_id!r} has D={ds.dim}"
            )
    if len(datasets) == 1:
        return first
    return DomainDataset(
        np.vstack([ds.inputs for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        "+".join(ds.domain_id for ds in datasets),
        first.k,
    )


def standardize(
    ds: DomainDataset, stats: tuple[np.ndarray, np.ndarray] | None = None
) -> tuple[DomainDataset, tuple[np.ndarray, np.ndarray]]:
    """Shift/scale inputs to zero mean, unit variance per dimension.

    When ``stats`` is omitted they are computed from ``ds`` and returned
    so the same transform can be reused on another domain. Dimensions
    with zero spread pass through unscaled.
    """
    if stats is None:
        mean = ds.inputs.mean(axis=0)
        std = ds.inputs.std(axis=0)
    else:
        mean, std = (np.asarray(s, dtype=FLOAT) for s in stats)
    safe_std = np.where(std > 0.0, std, 1.0)
    out = DomainDataset((ds.inputs - mean) / safe_std, ds.labels, ds.domain_id, ds.k)
    return out, (mean, std)


# --- IDX ingestion ---------------------------------------------------------

_IDX_DTYPES = {0x08: ("u1", 1), 0x0D: (">f4", 4)}


def read_idx(path) -> np.ndarray:
    """Parse an IDX binary file into a float64 array.

    Supports unsigned-byte (0x08) and big-endian float32 (0x0D)
    payloads; byte payloads are rescaled to [0, 1].
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError("file too short for an IDX magic header", offset=len(blob))
    if blob[0] != 0 or blob[1] != 0:
        offset = 0 if blob[0] != 0 else 1
        raise IdxFormatError(f"bad magic byte 0x{blob[offset]:02x}", offset=offset)
    dtype_code = blob[2]
    if dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(f"unsupported dtype code 0x{dtype_code:02x}", offset=2)
    ndims = blob[3]
    header_end = 4 + 4 * ndims
    if len(blob) < header_end:
        raise IdxFormatError(
            f"truncated dimension header: need {header_end} bytes, have {len(blob)}",
            offset=len(blob),
        )
    dims = struct.unpack(f">{ndims}I", blob[4:header_end])
    np_dtype, item_size = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims)) if dims else 1
    expected = header_end + count * item_size
    if len(blob) < expected:
        raise IdxFormatError(
            f"truncated payload: need {expected} bytes, have {len(blob)}",
            offset=len(blob),
        )
    if len(blob) > expected:
        raise IdxFormatError(
            f"trailing bytes after payload: expected {expected} bytes, have {len(blob)}",
            offset=expected,
        )
    values = np.frombuffer(blob, dtype=np_dtype, offset=header_end).reshape(dims)
    out = values.astype(FLOAT)
    if dtype_code == 0x08:
        out /= 255.0
    return out


def write_idx(path, array: np.ndarray, dtype_code: int = 0x08) -> None:
    """Write an array as an IDX file (inverse of ``read_idx``).

    For byte files, values in [0, 1] are rescaled to 0..255; reading a
    byte file and writing it back reproduces it byte-for-byte.
    """
    if dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(f"unsupported dtype code 0x{dtype_code:02x}", offset=2)
    array = np.asarray(array)
    header = bytes([0, 0, dtype_code, array.ndim]) + struct.pack(
        f">{array.ndim}I", *array.shape
    )
    if dtype_code == 0x08:
        payload = np.rint(np.clip(array, 0.0, 1.0) * 255.0).astype("u1").tobytes()
    else:
        payload = array.astype(">f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


# --- dataset dumps ---------------------------------------------------------

DATASET_MAGIC = b"MDS1"


def save_dataset(ds: DomainDataset, path) -> None:
    domain = ds.domain_id.encode("utf-8")
    header = DATASET_MAGIC + struct.pack(
        "<IIIBH", ds.n, ds.dim, ds.k, 1 if ds.is_labeled else 0, len(domain)
    ) + domain
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        if ds.is_labeled:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path) -> DomainDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValidationError(f"not a dataset dump: {path}")
    n, d, k, has_labels, id_len = struct.unpack("<IIIBH", blob[4:19])
    domain_id = blob[19:19 + id_len].decode("utf-8")
    offset = 19 + id_len
    inputs = np.frombuffer(blob, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i8", count=n, offset=offset + n * d * 8)
    return DomainDataset(inputs.astype(FLOAT), labels, domain_id, k)
