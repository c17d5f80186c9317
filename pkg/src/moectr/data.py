"""Datasets, CSV serialization, splits, and a synthetic multi-domain generator.

On-disk format is a UTF-8 CSV with header ``user_id,item_id,domain_id,label``
plus optional trailing context columns; all values are non-negative integers
and labels are 0/1.  In memory a ``Dataset`` keeps the id columns, labels,
and domains as flat numpy arrays in file order.

The generator plants a latent structure that domain-specific adapters can
actually exploit: users and items carry hidden cluster memberships, and each
domain scores a (user cluster, item cluster) pair through its own table.
At divergence 0 every domain shares one table, so a single global model is
Bayes-optimal; at divergence 1 each domain's table is an independent random
draw.  Labels come from thresholding logistic-noised scores at the quantile
matching the target positive rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .models import FeatureSchema

__all__ = [
    "Batch",
    "Dataset",
    "SyntheticSpec",
    "load_csv",
    "write_csv",
    "split_dataset",
    "domain_proportions",
    "generate_synthetic",
    "write_synthetic",
    "rule_agreement",
    "batch_iter",
    "domain_batches",
]

BASE_COLUMNS = ("user_id", "item_id", "domain_id", "label")


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray      # (n, n_fields) int64
    labels: np.ndarray   # (n,) float64
    domains: np.ndarray  # (n,) int64


class Dataset:
    """Rows of (feature ids, label, domain) under a fixed schema."""

    def __init__(self, schema: FeatureSchema, ids: np.ndarray,
                 labels: np.ndarray, domains: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        domains = np.asarray(domains, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != len(schema.fields):
            raise ValueError(
                f"ids must be (n, {len(schema.fields)}), got {ids.shape}")
        n = ids.shape[0]
        if n == 0:
            raise ValueError("dataset has no rows")
        if labels.shape != (n,) or domains.shape != (n,):
            raise ValueError("ids, labels and domains must have matching length")
        for f, (fname, card) in enumerate(schema.fields):
            col = ids[:, f]
            if col.min() < 0 or col.max() >= card:
                raise ValueError(f"field {fname!r} has ids outside [0, {card})")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if domains.min() < 0 or domains.max() >= schema.n_domains:
            raise ValueError(
                f"domain ids must lie in [0, {schema.n_domains})")
        self.schema = schema
        self.ids = ids
        self.labels = labels
        self.domains = domains

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.schema, self.ids[idx], self.labels[idx], self.domains[idx])

    def rows_of_domain(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def domain_counts(self) -> np.ndarray:
        return np.bincount(self.domains, minlength=self.schema.n_domains)

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.ids[idx], self.labels[idx].astype(np.float64),
                     self.domains[idx])


def _context_fields(schema: FeatureSchema) -> list[str]:
    extra = [n for n, _ in schema.fields[2:]]
    return extra


def write_csv(ds: Dataset, path) -> None:
    """Serialize a dataset; the same dataset always yields identical bytes."""
    header = list(BASE_COLUMNS) + _context_fields(ds.schema)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(ds)):
            row = [int(ds.ids[r, 0]), int(ds.ids[r, 1]),
                   int(ds.domains[r]), int(ds.labels[r])]
            row += [int(v) for v in ds.ids[r, 2:]]
            w.writerow(row)


def load_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    """Parse a dataset CSV; malformed rows are reported with line numbers.

    Without a schema, field cardinalities and the domain count are inferred
    as max id + 1.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:4] != list(BASE_COLUMNS):
            raise ValueError(
                f"{path}: header must start with {','.join(BASE_COLUMNS)}")
        ctx_names = header[4:]
        n_cols = len(header)
        users, items, domains, labels = [], [], [], []
        ctx = [[] for _ in ctx_names]
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise ValueError(
                    f"{path}:{line_no}: expected {n_cols} columns, got {len(row)}")
            try:
                vals = [int(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{line_no}: non-integer value in row")
            if any(v < 0 for v in vals):
                raise ValueError(f"{path}:{line_no}: negative value in row")
            if vals[3] not in (0, 1):
                raise ValueError(f"{path}:{line_no}: label must be 0 or 1, got {vals[3]}")
            users.append(vals[0])
            items.append(vals[1])
            domains.append(vals[2])
            labels.append(vals[3])
            for c in range(len(ctx_names)):
                ctx[c].append(vals[4 + c])
    if not users:
        raise ValueError(f"{path}: no data rows")
    cols = [np.asarray(users), np.asarray(items)] + [np.asarray(c) for c in ctx]
    if schema is None:
        fields = [("user_id", int(cols[0].max()) + 1), ("item_id", int(cols[1].max()) + 1)]
        fields += [(name, int(c.max()) + 1) for name, c in zip(ctx_names, cols[2:])]
        schema = FeatureSchema(tuple(fields), n_domains=int(max(domains)) + 1)
    else:
        expected = ["user_id", "item_id"] + list(schema.field_names[2:])
        if list(schema.field_names) != expected[:2] + ctx_names:
            raise ValueError(
                f"{path}: columns {ctx_names} do not match schema fields "
                f"{schema.field_names[2:]}")
        if max(domains) >= schema.n_domains:
            bad = max(domains)
            raise ValueError(
                f"{path}: domain id {bad} outside schema range [0, {schema.n_domains})")
    return Dataset(schema, np.column_stack(cols), np.asarray(labels), np.asarray(domains))


def domain_proportions(ds: Dataset) -> np.ndarray:
    """Row share of each domain; sums to 1."""
    counts = ds.domain_counts()
    return counts / counts.sum()


def _allocate(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder split of n rows; no split starves if n allows."""
    raw = [n * r for r in ratios]
    sizes = [int(np.floor(v)) for v in raw]
    rem = sorted(range(len(ratios)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[rem[i % len(ratios)]] += 1
    # Guarantee presence in every split once the cell is big enough.
    if n >= len(ratios):
        for i, s in enumerate(sizes):
            if s == 0:
                donor = int(np.argmax(sizes))
                sizes[donor] -= 1
                sizes[i] += 1
    return sizes


def split_dataset(ds: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic stratified split over (domain, label) cells.

    Each cell is shuffled with its own stream and divided by largest
    remainder, so per-domain label rates carry over to every split and a
    domain with at least three rows per cell appears in all three.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    parts: list[list[np.ndarray]] = [[], [], []]
    for d in range(ds.schema.n_domains):
        for lab in (0, 1):
            cell = np.flatnonzero((ds.domains == d) & (ds.labels == lab))
            if cell.size == 0:
                continue
            rng = np.random.default_rng([seed, d, lab])
            cell = cell[rng.permutation(cell.size)]
            sizes = _allocate(cell.size, ratios)
            off = 0
            for s, size in enumerate(sizes):
                parts[s].append(cell[off : off + size])
                off += size
    out = []
    for chunks in parts:
        if not chunks or sum(c.size for c in chunks) == 0:
            raise ValueError("split produced an empty part; dataset too small")
        idx = np.sort(np.concatenate(chunks))
        out.append(ds.subset(idx))
    return tuple(out)


def batch_iter(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
               epoch: int = 0):
    """Yield batches covering every row exactly once.

    Order is the row order when ``shuffle`` is off, otherwise a permutation
    determined by (seed, epoch).  The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield ds.batch(order[start : start + batch_size])


def domain_batches(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
                   balanced: bool = False) -> list[tuple[int, np.ndarray]]:
    """Single-domain batches for one epoch, in a deterministic shuffled order.

    Proportional sampling chunks each domain's shuffled rows once per epoch;
    balanced sampling gives every domain as many batches as the largest one,
    re-cycling smaller domains' rows.
    """
    per_domain: list[tuple[int, np.ndarray]] = []
    rng = np.random.default_rng([seed, epoch])
    counts = ds.domain_counts()
    max_rows = int(counts.max())
    for d in range(ds.schema.n_domains):
        rows = ds.rows_of_domain(d)
        if rows.size == 0:
            continue
        perm = rows[rng.permutation(rows.size)]
        if balanced and rows.size < max_rows:
            reps = int(np.ceil(max_rows / rows.size))
            tiled = [perm]
            for _ in range(reps - 1):
                tiled.append(rows[rng.permutation(rows.size)])
            perm = np.concatenate(tiled)[:max_rows]
        for start in range(0, perm.size, batch_size):
            per_domain.append((d, perm[start : start + batch_size]))
    order = rng.permutation(len(per_domain))
    return [per_domain[i] for i in order]


# ---- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the clustered multi-domain generator."""

    n_domains: int = 4
    n_users: int = 1000
    n_items: int = 500
    rows_per_domain: int = 5000
    positive_rate: float = 0.5
    divergence: float = 0.5
    seed: int = 0
    n_user_clusters: int = 4
    n_item_clusters: int = 4
    noise_scale: float = 0.15

    def __post_init__(self):
        if self.n_domains < 1 or self.n_users < 1 or self.n_items < 1:
            raise ValueError("domain, user and item counts must be positive")
        if self.rows_per_domain < 1:
            raise ValueError("rows_per_domain must be positive")
        if self.rows_per_domain > self.n_users * self.n_items:
            raise ValueError(
                f"rows_per_domain {self.rows_per_domain} exceeds the "
                f"{self.n_users * self.n_items} available user-item pairs")
        if not (0.0 < self.positive_rate < 1.0):
            raise ValueError("positive_rate must lie strictly between 0 and 1")
        if not (0.0 <= self.divergence <= 1.0):
            raise ValueError("divergence must lie in [0, 1]")
        if self.n_user_clusters < 1 or self.n_item_clusters < 1:
            raise ValueError("cluster counts must be positive")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")


def _latents(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.seed, 101])
    user_cluster = rng.integers(0, spec.n_user_clusters, size=spec.n_users)
    item_cluster = rng.integers(0, spec.n_item_clusters, size=spec.n_items)
    shared = rng.random((spec.n_user_clusters, spec.n_item_clusters))
    tables = []
    for d in range(spec.n_domains):
        own = np.random.default_rng([spec.seed, 211, d]).random(shared.shape)
        tables.append((1.0 - spec.divergence) * shared + spec.divergence * own)
    return user_cluster, item_cluster, tables


def _sample_pairs(spec: SyntheticSpec, domain: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct (user, item) pairs for one domain, deterministic by seed."""
    grid = spec.n_users * spec.n_items
    rng = np.random.default_rng([spec.seed, 307, domain])
    seen: set[int] = set()
    codes: list[int] = []
    while len(codes) < spec.rows_per_domain:
        draw = rng.integers(0, grid, size=2 * (spec.rows_per_domain - len(codes)) + 16)
        for c in draw:
            if c not in seen:
                seen.add(int(c))
                codes.append(int(c))
                if len(codes) == spec.rows_per_domain:
                    break
    arr = np.asarray(codes, dtype=np.int64)
    return arr // spec.n_items, arr % spec.n_items


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a multi-domain dataset; identical spec, identical rows."""
    user_cluster, item_cluster, tables = _latents(spec)
    all_users, all_items, all_domains, all_labels = [], [], [], []
    for d in range(spec.n_domains):
        users, items = _sample_pairs(spec, d)
        scores = tables[d][user_cluster[users], item_cluster[items]]
        noise_rng = np.random.default_rng([spec.seed, 401, d])
        noisy = scores + noise_rng.logistic(0.0, spec.noise_scale, size=scores.shape)
        # Threshold at the empirical quantile so the positive rate lands on
        # target regardless of the table's value range.
        tau = np.quantile(noisy, 1.0 - spec.positive_rate)
        labels = (noisy > tau).astype(np.int64)
        all_users.append(users)
        all_items.append(items)
        all_domains.append(np.full(users.shape, d, dtype=np.int64))
        all_labels.append(labels)
    schema = FeatureSchema(
        fields=(("user_id", spec.n_users), ("item_id", spec.n_items)),
        n_domains=spec.n_domains,
    )
    ids = np.column_stack([np.concatenate(all_users), np.concatenate(all_items)])
    return Dataset(schema, ids, np.concatenate(all_labels), np.concatenate(all_domains))


def write_synthetic(spec: SyntheticSpec, csv_path) -> Dataset:
    """Generate, write the CSV, and drop a sidecar recording the settings."""
    ds = generate_synthetic(spec)
    write_csv(ds, csv_path)
    sidecar = f"{csv_path}.spec.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ds


def rule_agreement(spec: SyntheticSpec) -> float:
    """Mean pairwise agreement of the domains' noise-free labeling rules.

    Evaluated over every (user cluster, item cluster) combination weighted
    by its population, with each domain thresholding its own table at the
    quantile matching the target positive rate.
    """
    user_cluster, item_cluster, tables = _latents(spec)
    u_w = np.bincount(user_cluster, minlength=spec.n_user_clusters).astype(float)
    i_w = np.bincount(item_cluster, minlength=spec.n_item_clusters).astype(float)
    w = np.outer(u_w, i_w)
    w /= w.sum()
    rules = []
    for tab in tables:
        order = np.argsort(tab, axis=None)
        flat_w = w.reshape(-1)[order]
        cum = np.cumsum(flat_w)
        # Smallest threshold whose upper tail mass is the positive rate.
        cut = np.searchsorted(cum, 1.0 - spec.positive_rate)
        tau = tab.reshape(-1)[order][min(cut, tab.size - 1)]
        rules.append(tab > tau)
    if spec.n_domains == 1:
        return 1.0
    agree = []
    for a in range(spec.n_domains):
        for b in range(a + 1, spec.n_domains):
            agree.append(((rules[a] == rules[b]) * w).sum())
    return float(np.mean(agree))
