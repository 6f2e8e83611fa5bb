"""Dataset ingestion: on-disk format, k-NN graphs, splits, synthetic graphs.

Directory layout (all text, UTF-8, LF):
    meta.json     {"name", "num_nodes", "num_features", "num_classes", "multilabel"}
    features.csv  N lines of D comma-separated floats
    labels.csv    N lines; one class id, or C comma-separated 0/1 if multilabel
    edges.tsv     one "u<TAB>v" pair per line, 0-based
    splits.json   {"train": [...], "valid": [...], "test": [...]}
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tensor import DenseTensor

log = logging.getLogger(__name__)

_SNR = 1.0  # class-mean separation scale of synth_graph


@dataclass
class GraphDataset:
    x: DenseTensor
    y: np.ndarray
    edges: np.ndarray
    splits: dict[str, np.ndarray]
    name: str = "unnamed"
    n_classes: int = 0
    multilabel: bool = False
    directed: bool = False  # the pipeline treats graphs as undirected
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    def validate(self) -> "GraphDataset":
        n = self.num_nodes
        seen: set[int] = set()
        for split_name in ("train", "valid", "test"):
            if split_name not in self.splits:
                raise DataError(f"missing split {split_name!r}")
            idx = self.splits[split_name]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"split {split_name!r} has node index out of [0,{n})")
            as_set = set(int(i) for i in idx)
            if len(as_set) != idx.size:
                raise DataError(f"split {split_name!r} contains duplicates")
            if seen & as_set:
                raise DataError(f"split {split_name!r} overlaps another split")
            seen |= as_set
        if self.multilabel:
            if self.y.ndim != 2 or self.y.shape != (n, self.n_classes):
                raise DataError(f"multilabel labels must be [N,{self.n_classes}]")
            if not np.isin(self.y, (0, 1)).all():
                raise DataError("multilabel labels must be 0/1")
        else:
            if self.y.ndim != 1 or self.y.shape[0] != n:
                raise DataError("labels must be one class id per node")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise DataError(f"class id out of range [0,{self.n_classes})")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise DataError(f"edge endpoint out of range [0,{n})")
        return self


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    return path


def _parse_matrix(path: str, n_rows: int, n_cols: int, delimiter: str) -> np.ndarray:
    """Parse a numeric text matrix; on failure, name the offending line."""
    try:
        arr = np.loadtxt(path, delimiter=delimiter, dtype=np.float64, ndmin=2)
    except ValueError:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.strip().split(delimiter) if line.strip() else []
                if len(parts) != n_cols:
                    raise DataError(
                        f"{path} line {lineno}: expected {n_cols} values, got {len(parts)}"
                    ) from None
                for p in parts:
                    try:
                        float(p)
                    except ValueError:
                        raise DataError(f"{path} line {lineno}: bad number {p!r}") from None
        raise DataError(f"{path}: malformed numeric data") from None
    if n_rows >= 0 and arr.shape[0] != n_rows:
        raise DataError(f"{path}: expected {n_rows} lines, found {arr.shape[0]}")
    if arr.shape[1] != n_cols:
        bad = int(np.argmax([row.size != n_cols for row in arr])) + 1 if arr.ndim == 1 else 1
        raise DataError(f"{path} line {bad}: expected {n_cols} values, got {arr.shape[1]}")
    return arr


def load_dataset(directory: str) -> GraphDataset:
    meta_path = _require(os.path.join(directory, "meta.json"))
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("name", "num_nodes", "num_features", "num_classes", "multilabel"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing key {key!r}")
    n = int(meta["num_nodes"])
    d = int(meta["num_features"])
    c = int(meta["num_classes"])
    multilabel = bool(meta["multilabel"])

    feat_path = _require(os.path.join(directory, "features.csv"))
    x = _parse_matrix(feat_path, n, d, ",").astype(np.float32)

    label_path = _require(os.path.join(directory, "labels.csv"))
    if multilabel:
        y = _parse_matrix(label_path, n, c, ",")
        if not np.isin(y, (0.0, 1.0)).all():
            bad = int(np.argmax(~np.isin(y, (0.0, 1.0)).all(axis=1))) + 1
            raise DataError(f"{label_path} line {bad}: multilabel entries must be 0/1")
        y = y.astype(np.float32)
    else:
        y = _parse_matrix(label_path, n, 1, ",")[:, 0]
        if not np.equal(np.mod(y, 1), 0).all():
            bad = int(np.argmax(np.mod(y, 1) != 0)) + 1
            raise DataError(f"{label_path} line {bad}: class id must be an integer")
        y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= c):
            bad = int(np.argmax((y < 0) | (y >= c))) + 1
            raise DataError(f"{label_path} line {bad}: class id out of range [0,{c})")

    edge_path = _require(os.path.join(directory, "edges.tsv"))
    if os.path.getsize(edge_path) == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        try:
            edges = np.loadtxt(edge_path, delimiter="\t", dtype=np.int64, ndmin=2)
        except ValueError:
            with open(edge_path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    parts = line.strip().split("\t") if line.strip() else []
                    if len(parts) != 2 or not all(p.lstrip("-").isdigit() for p in parts):
                        raise DataError(
                            f"{edge_path} line {lineno}: expected 'u<TAB>v'"
                        ) from None
            raise DataError(f"{edge_path}: malformed edge list") from None
        if edges.shape[1] != 2:
            raise DataError(f"{edge_path}: expected two columns")
        bad_mask = (edges < 0) | (edges >= n)
        if bad_mask.any():
            bad = int(np.argmax(bad_mask.any(axis=1))) + 1
            raise DataError(f"{edge_path} line {bad}: node index out of range [0,{n})")

    split_path = _require(os.path.join(directory, "splits.json"))
    try:
        with open(split_path, "r", encoding="utf-8") as fh:
            raw_splits = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{split_path}: invalid JSON ({exc})") from exc
    splits = {}
    for split_name in ("train", "valid", "test"):
        if split_name not in raw_splits:
            raise DataError(f"{split_path}: missing split {split_name!r}")
        splits[split_name] = np.asarray(raw_splits[split_name], dtype=np.int64)

    ds = GraphDataset(
        x=DenseTensor(x),
        y=y,
        edges=edges,
        splits=splits,
        name=str(meta["name"]),
        n_classes=c,
        multilabel=multilabel,
        meta=meta,
    )
    return ds.validate()


def save_dataset(ds: GraphDataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {
        "name": ds.name,
        "num_nodes": ds.num_nodes,
        "num_features": ds.num_features,
        "num_classes": ds.n_classes,
        "multilabel": ds.multilabel,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(directory, "features.csv"), "w", encoding="utf-8", newline="\n") as fh:
        for row in ds.x.data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(os.path.join(directory, "labels.csv"), "w", encoding="utf-8", newline="\n") as fh:
        if ds.multilabel:
            for row in ds.y:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
        else:
            for v in ds.y:
                fh.write(f"{int(v)}\n")
    write_edges(os.path.join(directory, "edges.tsv"), ds.edges)
    with open(os.path.join(directory, "splits.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({k: [int(i) for i in v] for k, v in ds.splits.items()}, fh)
        fh.write("\n")


def write_edges(path: str, edges: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in np.asarray(edges).reshape(-1, 2):
            fh.write(f"{int(u)}\t{int(v)}\n")


# ---------------------------------------------------------------------------
# graph construction


def knn_graph(x: DenseTensor | np.ndarray, k: int, metric: str = "cosine") -> list[tuple[int, int]]:
    """Undirected k-nearest-neighbor edges from feature rows.

    Each node selects its k nearest neighbors (self excluded, ties broken
    by lower node index); the union of directed selections is returned as
    canonical (u < v) pairs. Zero-norm rows under cosine fall back to
    euclidean distances for their own selection.
    """
    arr = x.data if isinstance(x, DenseTensor) else np.asarray(x, dtype=np.float32)
    n = arr.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"metric must be cosine or euclidean, got {metric!r}")
    x64 = arr.astype(np.float64)
    sq = (x64 * x64).sum(axis=1)
    # distance rows computed in node blocks to bound the [block, N] buffer
    if metric == "cosine":
        norms = np.sqrt(sq)
        zero_rows = norms == 0.0
        safe = np.where(zero_rows, 1.0, norms)
        xn = x64 / safe[:, None]
        if zero_rows.any():
            log.warning(
                "knn_graph: %d zero-norm rows fall back to euclidean: %s",
                int(zero_rows.sum()),
                np.nonzero(zero_rows)[0][:16].tolist(),
            )
    pairs: set[tuple[int, int]] = set()
    block = max(1, (1 << 22) // max(n, 1))
    ar = np.arange(n)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        if metric == "euclidean":
            dist = sq[lo:hi, None] + sq[None, :] - 2.0 * (x64[lo:hi] @ x64.T)
        else:
            dist = 1.0 - (xn[lo:hi] @ xn.T)
            if zero_rows.any():
                local = np.nonzero(zero_rows[lo:hi])[0]
                if local.size:
                    rows = x64[lo + local]
                    dist[local] = sq[lo + local, None] + sq[None, :] - 2.0 * (rows @ x64.T)
        dist[ar[lo:hi] - lo, ar[lo:hi]] = np.inf  # exclude self
        order = np.lexsort((np.broadcast_to(ar, dist.shape), dist), axis=1)
        for i in range(hi - lo):
            u = lo + i
            for j in order[i, :k]:
                v = int(j)
                pairs.add((u, v) if u < v else (v, u))
    return sorted(pairs)


def load_features_csv(path: str) -> np.ndarray:
    """Parse a bare features.csv (no meta required)."""
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().strip()
        width = len(first.split(",")) if first else 0
        return _parse_matrix(path, -1, width, ",").astype(np.float32)
    return arr.astype(np.float32)


def build_edges_file(features_path: str, k: int, metric: str, out_dir: str) -> int:
    """k-NN edges from a feature file, written as edges.tsv in out_dir."""
    x = load_features_csv(features_path)
    if k >= x.shape[0]:
        raise ConfigError(f"k={k} must be smaller than the node count {x.shape[0]}")
    if not os.path.isdir(out_dir):
        raise DataError(f"output dataset directory does not exist: {out_dir}")
    edges = knn_graph(x, k, metric)
    write_edges(os.path.join(out_dir, "edges.tsv"), np.asarray(edges, dtype=np.int64))
    return len(edges)


def random_split(
    n: int, fractions: tuple[float, float, float] = (0.5, 0.25, 0.25), seed: int = 0
) -> dict[str, np.ndarray]:
    """Seeded shuffle then contiguous cut: floor train, floor valid, rest test."""
    if n < 4:
        raise ValueError("need at least 4 nodes to split")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * fractions[0]))
    n_valid = int(np.floor(n * fractions[1]))
    return {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train : n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid :]),
    }


def synth_graph(
    n: int,
    avg_degree: float,
    d_in: int,
    classes: int,
    homophily: float,
    seed: int = 0,
) -> GraphDataset:
    """Planted-partition graph with Gaussian class-mean features.

    Nodes receive uniform random classes; each of round(n*avg_degree/2)
    undirected edges is intra-class with probability `homophily`. Features
    are x_i = mu[y_i] + noise with unit noise and class-mean scale fixed
    by the generator's signal-to-noise constant.
    """
    if n < classes or classes < 2:
        raise ValueError("need n >= classes >= 2")
    if not 0.0 <= homophily <= 1.0:
        raise ValueError("homophily must be in [0,1]")
    if avg_degree < 0:
        raise ValueError("avg_degree must be nonnegative")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n).astype(np.int64)
    by_class = [np.nonzero(y == c)[0] for c in range(classes)]
    target = int(round(n * avg_degree / 2.0))
    edge_set: set[tuple[int, int]] = set()
    attempts = 0
    max_attempts = 50 * max(target, 1) + 1000
    while len(edge_set) < target and attempts < max_attempts:
        attempts += 1
        u = int(rng.integers(0, n))
        if rng.random() < homophily:
            pool = by_class[y[u]]
            if pool.size < 2:
                continue
            v = int(pool[rng.integers(0, pool.size)])
        else:
            v = int(rng.integers(0, n))
            if y[v] == y[u]:
                continue
        if u == v:
            continue
        edge_set.add((u, v) if u < v else (v, u))
    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)
    # class means scaled so E||mu_a - mu_b||^2 = 2 * SNR^2 against unit noise
    mu = rng.normal(0.0, _SNR / np.sqrt(d_in), size=(classes, d_in))
    x = (mu[y] + rng.normal(0.0, 1.0, size=(n, d_in))).astype(np.float32)
    ds = GraphDataset(
        x=DenseTensor(x),
        y=y,
        edges=edges,
        splits=random_split(n, seed=seed),
        name=f"synth-n{n}-c{classes}",
        n_classes=classes,
        multilabel=False,
    )
    return ds.validate()
