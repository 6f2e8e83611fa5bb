"""Training engine: losses, Adam, early stopping, full- and mini-batch modes."""

from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np

from .data import GraphDataset
from .errors import ConfigError, NonFiniteError
from .gnn import CsrGraph, normalize_adjacency
from .model import SpikeGraphTransformer, forward, model_backward, streaming_logits
from .neuron import LifParams
from .tensor import DenseTensor

HISTORY_HEADER = "epoch,train_loss,valid_metric,test_metric,epoch_ms"


@dataclass
class TrainConfig:
    lr: float = 1e-2
    max_epochs: int = 1000
    patience: int = 30
    batch_size: int | None = None
    seed: int = 0
    loss: str = "nll"
    metric: str = "accuracy"
    t_steps: int = 2
    n_blocks: int = 1
    n_gnn_layers: int = 1
    alpha: float = 0.5
    dim: int = 64
    heads: int = 0
    dropout: float = 0.0
    fusion: str = "add"
    u_th: float = 1.0
    v_reset: float = 0.0
    beta: float = 0.5
    surrogate_width: float = 1.0
    eval_chunk: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.loss not in ("nll", "bce"):
            raise ConfigError(f"loss must be nll or bce, got {self.loss!r}")
        if self.metric not in ("accuracy", "rocauc"):
            raise ConfigError(f"metric must be accuracy or rocauc, got {self.metric!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0,1]")
        if self.fusion not in ("add", "concat"):
            raise ConfigError(f"fusion must be add or concat, got {self.fusion!r}")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def build_model(self, d_in: int, n_classes: int) -> SpikeGraphTransformer:
        return SpikeGraphTransformer(
            d_in=d_in,
            d=self.dim,
            n_classes=n_classes,
            t_steps=self.t_steps,
            n_blocks=self.n_blocks,
            n_gnn_layers=self.n_gnn_layers,
            alpha=self.alpha,
            fusion=self.fusion,
            heads=self.heads if self.heads > 0 else None,
            dropout=self.dropout,
            lif=LifParams(self.u_th, self.v_reset, self.beta, self.surrogate_width),
            seed=self.seed,
        )


_BOOLS = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _coerce(name: str, text: str, kind) -> object:
    text = text.strip()
    if name == "batch_size" and text.lower() in ("none", ""):
        return None
    try:
        if kind == "int | None" or kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if kind is bool or kind == "bool":
            return _BOOLS[text.lower()]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text


def parse_config(path: str | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Flat `key = value` file with # comments; overrides win over the file."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values: dict[str, object] = {}

    def absorb(key: str, raw: str, where: str) -> None:
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r} ({where})")
        values[key] = _coerce(key, raw, kinds[key])

    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path} line {lineno}: expected key = value")
            key, raw = stripped.split("=", 1)
            absorb(key, raw, f"{path} line {lineno}")
    for key, raw in (overrides or {}).items():
        absorb(key, str(raw), "override")
    return TrainConfig(**values).validate()


# ---------------------------------------------------------------------------
# losses and metrics


def nll_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log softmax probability of the true class."""
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0,{c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(np.float32)


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean elementwise binary cross-entropy with logits (multi-label capable)."""
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    z = logits.astype(np.float64)
    t = targets.astype(np.float64)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {z.shape}")
    # log(1 + exp(-|z|)) + max(z, 0) - t*z, numerically stable
    loss = float((np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - t * z).mean())
    sig = 1.0 / (1.0 + np.exp(-z))
    return loss, ((sig - t) / z.size).astype(np.float32)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _auc_binary(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-sum AUC with average ranks for ties; None if single-class."""
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1.0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = (rank_pos + rank_pos + (j - i)) / 2.0
        ranks[order[i : j + 1]] = avg
        rank_pos += j - i + 1
        i = j + 1
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary or multi-label AUC; multi-label averages per-task AUC over
    tasks that contain both classes, erroring if none do."""
    if labels.ndim == 1:
        auc = _auc_binary(scores if scores.ndim == 1 else scores[:, -1], labels)
        if auc is None:
            raise ValueError("single-class labels admit no ROC-AUC")
        return auc
    aucs = []
    for task in range(labels.shape[1]):
        auc = _auc_binary(scores[:, task], labels[:, task])
        if auc is not None:
            aucs.append(auc)
    if not aucs:
        raise ValueError("all tasks single-class; ROC-AUC undefined")
    return float(np.mean(aucs))


def _metric_value(metric: str, logits: np.ndarray, y: np.ndarray, idx: np.ndarray) -> float:
    if idx.size == 0:
        raise ValueError("empty split")
    if metric == "accuracy":
        return accuracy(logits[idx], y[idx])
    if metric == "rocauc":
        return roc_auc(logits[idx], y[idx])
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params, state: AdamState, lr: float) -> None:
    """Textbook Adam with bias correction, in place over (name, value, grad)."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, value, grad in params:
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient in {name}; aborting epoch")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(value)
        m[...] = b1 * m + (1.0 - b1) * grad
        v[...] = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / c1
        v_hat = v / c2
        value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loops


def _prepare_targets(ds: GraphDataset, loss_kind: str) -> np.ndarray:
    if loss_kind == "bce" and ds.y.ndim == 1:
        return ds.y.reshape(-1, 1).astype(np.float32)
    return ds.y


def loss_and_grad(
    model: SpikeGraphTransformer,
    x: DenseTensor,
    y: np.ndarray,
    batch_idx: np.ndarray,
    loss_kind: str,
    graph: CsrGraph | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """One training forward/backward; gradients accumulate in the model."""
    if batch_idx.size == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    cache: dict = {}
    logits = forward(model, x, graph, training=True, rng=rng, cache=cache)
    arr = logits.data
    if loss_kind == "nll":
        loss, dbatch = nll_loss(arr[batch_idx], y[batch_idx])
    elif loss_kind == "bce":
        loss, dbatch = bce_loss(arr[batch_idx], y[batch_idx])
    else:
        raise ConfigError(f"unknown loss {loss_kind!r}")
    dlogits = np.zeros_like(arr)
    dlogits[batch_idx] = dbatch
    model_backward(model, dlogits, cache)
    return loss


def _inference_logits(
    model: SpikeGraphTransformer, x: DenseTensor, graph: CsrGraph | None, chunk: int = 0
) -> np.ndarray:
    if chunk and chunk < x.shape[0]:
        return streaming_logits(model, x, graph, chunk).data
    return forward(model, x, graph, training=False).data


def evaluate(
    model: SpikeGraphTransformer,
    dataset: GraphDataset,
    split: str,
    metric: str = "accuracy",
    chunk: int = 0,
) -> float:
    """Metric of the model on one split (accuracy or rocauc)."""
    idx = dataset.splits[split]
    graph = None
    if model.alpha > 0.0:
        graph = normalize_adjacency(dataset.edges, dataset.num_nodes)
    logits = _inference_logits(model, dataset.x, graph, chunk)
    return _metric_value(metric, logits, dataset.y, idx)


def _snapshot(model: SpikeGraphTransformer) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value in model.named_state()}


def _restore(model: SpikeGraphTransformer, snap: dict[str, np.ndarray]) -> None:
    for name, value in model.named_state():
        value[...] = snap[name]


def train_full(
    model: SpikeGraphTransformer, dataset: GraphDataset, cfg: TrainConfig
) -> tuple[SpikeGraphTransformer, list[dict]]:
    """Full-batch training with early stopping on the validation metric.

    Returns the model restored to its best-validation state and the
    per-epoch history.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    y = _prepare_targets(dataset, cfg.loss)
    train_idx = dataset.splits["train"]
    valid_idx = dataset.splits["valid"]
    test_idx = dataset.splits["test"]
    graph = normalize_adjacency(dataset.edges, dataset.num_nodes) if model.alpha > 0.0 else None
    adam = AdamState()
    history: list[dict] = []
    best_metric = -np.inf
    best_epoch = 0
    best_state = _snapshot(model)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        loss = loss_and_grad(model, dataset.x, y, train_idx, cfg.loss, graph, rng)
        adam_step(model.named_parameters(), adam, cfg.lr)
        logits = _inference_logits(model, dataset.x, graph, cfg.eval_chunk)
        valid_metric = _metric_value(cfg.metric, logits, dataset.y, valid_idx)
        test_metric = _metric_value(cfg.metric, logits, dataset.y, test_idx)
        epoch_ms = (time.perf_counter() - t0) * 1e3
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss,
                "valid_metric": valid_metric,
                "test_metric": test_metric,
                "epoch_ms": epoch_ms,
            }
        )
        if valid_metric > best_metric:
            best_metric = valid_metric
            best_epoch = epoch
            best_state = _snapshot(model)
        elif epoch - best_epoch >= cfg.patience:
            break
    _restore(model, best_state)
    return model, history


def induced_subgraph(edges: np.ndarray, nodes: np.ndarray, n: int) -> np.ndarray:
    """Edges with both endpoints in `nodes`, relabeled to local indices."""
    local = np.full(n, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size, dtype=np.int64)
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    u = local[edges[:, 0]]
    v = local[edges[:, 1]]
    keep = (u >= 0) & (v >= 0)
    return np.stack([u[keep], v[keep]], axis=1)


def batch_partition(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle of [0,n) cut into consecutive batches."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_minibatch(
    model: SpikeGraphTransformer, dataset: GraphDataset, cfg: TrainConfig
) -> tuple[SpikeGraphTransformer, list[dict]]:
    """Node-sampled mini-batch training for graphs too large for full batch.

    Each batch induces its own subgraph for the GNN branch and restricts
    attention to within-batch interactions; validation and test run
    full-graph in streaming inference mode.
    """
    cfg.validate()
    if cfg.batch_size is None:
        raise ConfigError("train_minibatch needs batch_size")
    rng = np.random.default_rng(cfg.seed)
    y = _prepare_targets(dataset, cfg.loss)
    n = dataset.num_nodes
    in_train = np.zeros(n, dtype=bool)
    in_train[dataset.splits["train"]] = True
    graph_full = normalize_adjacency(dataset.edges, n) if model.alpha > 0.0 else None
    adam = AdamState()
    history: list[dict] = []
    best_metric = -np.inf
    best_epoch = 0
    best_state = _snapshot(model)
    chunk = cfg.eval_chunk or cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batch in batch_partition(n, cfg.batch_size, rng):
            batch_train = np.nonzero(in_train[batch])[0]
            if batch_train.size == 0:
                continue
            xb = DenseTensor(dataset.x.data[batch])
            gb = None
            if model.alpha > 0.0:
                sub_edges = induced_subgraph(dataset.edges, batch, n)
                gb = normalize_adjacency(sub_edges, batch.size)
            loss = loss_and_grad(model, xb, y[batch], batch_train, cfg.loss, gb, rng)
            adam_step(model.named_parameters(), adam, cfg.lr)
            losses.append(loss)
        logits = _inference_logits(model, dataset.x, graph_full, chunk)
        valid_metric = _metric_value(cfg.metric, logits, dataset.y, dataset.splits["valid"])
        test_metric = _metric_value(cfg.metric, logits, dataset.y, dataset.splits["test"])
        epoch_ms = (time.perf_counter() - t0) * 1e3
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "valid_metric": valid_metric,
                "test_metric": test_metric,
                "epoch_ms": epoch_ms,
            }
        )
        if valid_metric > best_metric:
            best_metric = valid_metric
            best_epoch = epoch
            best_state = _snapshot(model)
        elif epoch - best_epoch >= cfg.patience:
            break
    _restore(model, best_state)
    return model, history


def write_history(path: str, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['train_loss']!r},{row['valid_metric']!r},"
                f"{row['test_metric']!r},{row['epoch_ms']:.3f}\n"
            )
