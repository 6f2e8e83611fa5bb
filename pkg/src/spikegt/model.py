"""Dual-branch model: spiking attention encoder fused with a sparse GCN.

The encoder input is the feature matrix projected and batch-normalized,
repeated T times into [T, N, D]. Each block adds its attention output to
the carried membrane potential, fires, then does the same with a spiking
MLP; residuals live in the potential domain, spikes are what flows between
blocks. The spike output is rate-decoded (mean over T), convexly combined
with the GCN branch by the graph weight alpha, and classified linearly.
"""

from __future__ import annotations

import json

import numpy as np

from . import _kernels
from .counters import OpCounters
from .errors import ConfigError, ShapeError
from .gnn import CsrGraph, GcnLayer, gcn_backward, gcn_forward
from .neuron import LifParams, lif_backward, lif_forward, repeat_time
from .sga import SgaLayer, _expand_heads, project_branch, sga_backward, sga_forward
from .tensor import (
    BatchNormLayer,
    DenseTensor,
    LinearLayer,
    SpikeTensor,
    batchnorm_backward,
    batchnorm_forward,
    linear_apply,
    linear_backward,
    pack_bits,
    spike_linear,
    unpack_bits,
)

CHECKPOINT_MAGIC = "spikegt-checkpoint-v1"


class EncoderBlock:
    """Attention plus spiking MLP, both with membrane-potential residuals."""

    def __init__(
        self,
        sga: SgaLayer,
        mlp_lin1: LinearLayer,
        mlp_bn1: BatchNormLayer,
        mlp_lin2: LinearLayer,
        mlp_bn2: BatchNormLayer,
        lif: LifParams,
    ):
        d = sga.d
        if mlp_lin1.weight.shape[0] != d or mlp_lin2.weight.shape[1] != d:
            raise ShapeError("MLP must map D back to D")
        self.sga = sga
        self.mlp_lin1, self.mlp_bn1 = mlp_lin1, mlp_bn1
        self.mlp_lin2, self.mlp_bn2 = mlp_lin2, mlp_bn2
        self.lif_mid = lif
        self.lif_mlp = lif
        self.lif_out = lif

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, heads: int | None, lif: LifParams) -> "EncoderBlock":
        return cls(
            SgaLayer.create(d, rng, heads=heads, lif=lif),
            LinearLayer.glorot(d, d, rng, bias=False),
            BatchNormLayer(d),
            LinearLayer.glorot(d, d, rng, bias=False),
            BatchNormLayer(d),
            lif,
        )


class SpikeGraphTransformer:
    def __init__(
        self,
        d_in: int,
        d: int,
        n_classes: int,
        t_steps: int = 2,
        n_blocks: int = 1,
        n_gnn_layers: int = 1,
        alpha: float = 0.5,
        fusion: str = "add",
        heads: int | None = None,
        dropout: float = 0.0,
        lif: LifParams | None = None,
        seed: int = 0,
    ):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("alpha must be in [0,1]")
        if fusion not in ("add", "concat"):
            raise ConfigError(f"fusion must be add or concat, got {fusion!r}")
        if t_steps < 1:
            raise ConfigError("t_steps must be >= 1")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError("dropout must be in [0,1)")
        lif = lif or LifParams()
        rng = np.random.default_rng(seed)
        self.d_in, self.d, self.n_classes = d_in, d, n_classes
        self.t_steps = t_steps
        self.alpha = float(alpha)
        self.fusion = fusion
        self.heads = d if heads is None else int(heads)
        self.dropout = float(dropout)
        self.lif = lif
        self.seed = int(seed)
        self.in_proj = LinearLayer.glorot(d_in, d, rng, bias=False)
        self.in_bn = BatchNormLayer(d)
        self.blocks = [EncoderBlock.create(d, rng, self.heads, lif) for _ in range(n_blocks)]
        self.gnn: list[GcnLayer] = []
        for i in range(n_gnn_layers):
            self.gnn.append(
                GcnLayer.create(d_in if i == 0 else d, d, rng, activation=True, dropout_rate=dropout)
            )
        d_fuse = 2 * d if fusion == "concat" else d
        self.classifier = LinearLayer.glorot(d_fuse, n_classes, rng, bias=True)

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self):
        """Yields (name, value, grad) for every trainable array, stable order."""
        yield "in_proj.weight", self.in_proj.weight, self.in_proj.gw
        yield "in_bn.gamma", self.in_bn.gamma, self.in_bn.ggamma
        yield "in_bn.beta", self.in_bn.beta, self.in_bn.gbeta
        for i, blk in enumerate(self.blocks):
            yield from blk.sga.parameters(prefix=f"blocks.{i}.sga")
            yield f"blocks.{i}.mlp_lin1.weight", blk.mlp_lin1.weight, blk.mlp_lin1.gw
            yield f"blocks.{i}.mlp_bn1.gamma", blk.mlp_bn1.gamma, blk.mlp_bn1.ggamma
            yield f"blocks.{i}.mlp_bn1.beta", blk.mlp_bn1.beta, blk.mlp_bn1.gbeta
            yield f"blocks.{i}.mlp_lin2.weight", blk.mlp_lin2.weight, blk.mlp_lin2.gw
            yield f"blocks.{i}.mlp_bn2.gamma", blk.mlp_bn2.gamma, blk.mlp_bn2.ggamma
            yield f"blocks.{i}.mlp_bn2.beta", blk.mlp_bn2.beta, blk.mlp_bn2.gbeta
        for i, layer in enumerate(self.gnn):
            yield f"gnn.{i}.weight", layer.linear.weight, layer.linear.gw
            yield f"gnn.{i}.bias", layer.linear.bias, layer.linear.gb
        yield "classifier.weight", self.classifier.weight, self.classifier.gw
        yield "classifier.bias", self.classifier.bias, self.classifier.gb

    def _bn_layers(self):
        yield "in_bn", self.in_bn
        for i, blk in enumerate(self.blocks):
            yield f"blocks.{i}.sga.bn_q", blk.sga.bn_q
            yield f"blocks.{i}.sga.bn_k", blk.sga.bn_k
            yield f"blocks.{i}.sga.bn_v", blk.sga.bn_v
            yield f"blocks.{i}.mlp_bn1", blk.mlp_bn1
            yield f"blocks.{i}.mlp_bn2", blk.mlp_bn2

    def named_state(self):
        """Trainable parameters plus batch-norm running statistics."""
        for name, value, _ in self.named_parameters():
            yield name, value
        for name, bn in self._bn_layers():
            yield f"{name}.running_mean", bn.running_mean
            yield f"{name}.running_var", bn.running_var

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad[...] = 0.0

    def config(self) -> dict:
        return {
            "d_in": self.d_in,
            "d": self.d,
            "n_classes": self.n_classes,
            "t_steps": self.t_steps,
            "n_blocks": len(self.blocks),
            "n_gnn_layers": len(self.gnn),
            "alpha": self.alpha,
            "fusion": self.fusion,
            "heads": self.heads,
            "dropout": self.dropout,
            "lif": {
                "u_th": self.lif.u_th,
                "v_reset": self.lif.v_reset,
                "beta": self.lif.beta,
                "surrogate_width": self.lif.surrogate_width,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "SpikeGraphTransformer":
        lif_cfg = cfg.get("lif", {})
        return cls(
            d_in=cfg["d_in"],
            d=cfg["d"],
            n_classes=cfg["n_classes"],
            t_steps=cfg["t_steps"],
            n_blocks=cfg["n_blocks"],
            n_gnn_layers=cfg["n_gnn_layers"],
            alpha=cfg["alpha"],
            fusion=cfg["fusion"],
            heads=cfg["heads"],
            dropout=cfg["dropout"],
            lif=LifParams(**lif_cfg) if lif_cfg else None,
            seed=cfg.get("seed", 0),
        )


# ---------------------------------------------------------------------------
# forward pieces


def encode(
    model: SpikeGraphTransformer,
    x: DenseTensor,
    training: bool = False,
    relaxed: bool = False,
    cache: dict | None = None,
    counters: OpCounters | None = None,
):
    """Run the spiking encoder; returns the final spike tensor [T, N, D]."""
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeError(f"encode expects [N, {model.d_in}], got {x.shape}")
    want = cache is not None
    in_bn_cache: dict | None = {} if cache is not None else None
    pre = linear_apply(x.data, model.in_proj, counters)
    pre_bn = batchnorm_forward(
        DenseTensor(pre, check=False), model.in_bn, training=training, cache=in_bn_cache
    )
    u0 = repeat_time(pre_bn, model.t_steps)
    s, s_trace = lif_forward(u0, model.lif, relaxed=relaxed, want_trace=want)
    u_prev = u0.data
    block_caches: list[dict] = []
    for blk in model.blocks:
        sga_cache: dict | None = {} if cache is not None else None
        a, _stats = sga_forward(
            s, blk.sga, training=training, relaxed=relaxed, cache=sga_cache, counters=counters
        )
        # residuals live in the potential domain; the fresh attention buffer
        # can take the addition in place
        u_p = a.unpack() if isinstance(a, SpikeTensor) else a.data
        u_p += u_prev
        s_mid, mid_trace = lif_forward(
            DenseTensor(u_p, check=False), blk.lif_mid, relaxed=relaxed, want_trace=want
        )
        if relaxed:
            m1 = DenseTensor(linear_apply(s_mid.data, blk.mlp_lin1, counters), check=False)
        else:
            m1 = spike_linear(s_mid, blk.mlp_lin1, counters)
        bn1_cache: dict | None = {} if cache is not None else None
        m1_bn = batchnorm_forward(m1, blk.mlp_bn1, training=training, cache=bn1_cache)
        s_mlp, mlp_trace = lif_forward(m1_bn, blk.lif_mlp, relaxed=relaxed, want_trace=want)
        if relaxed:
            m2 = DenseTensor(linear_apply(s_mlp.data, blk.mlp_lin2, counters), check=False)
        else:
            m2 = spike_linear(s_mlp, blk.mlp_lin2, counters)
        bn2_cache: dict | None = {} if cache is not None else None
        m2_bn = batchnorm_forward(m2, blk.mlp_bn2, training=training, cache=bn2_cache)
        u_l = m2_bn.data
        u_l += u_p
        s_l, out_trace = lif_forward(
            DenseTensor(u_l, check=False), blk.lif_out, relaxed=relaxed, want_trace=want
        )
        if cache is not None:
            block_caches.append(
                {
                    "sga": sga_cache,
                    "mid_trace": mid_trace,
                    "s_mid_float": s_mid.data if relaxed else s_mid.unpack(),
                    "bn1": bn1_cache,
                    "mlp_trace": mlp_trace,
                    "s_mlp_float": s_mlp.data if relaxed else s_mlp.unpack(),
                    "bn2": bn2_cache,
                    "out_trace": out_trace,
                }
            )
        s, u_prev = s_l, u_l
    if cache is not None:
        cache["in_bn"] = in_bn_cache
        cache["x"] = x.data
        cache["s0_trace"] = s_trace
        cache["blocks"] = block_caches
        cache["relaxed"] = relaxed
    return s


def encode_backward(
    model: SpikeGraphTransformer,
    grad_s: np.ndarray,
    cache: dict,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Reverse of encode; accumulates gradients, returns dLoss/dX."""
    relaxed = cache["relaxed"]
    gs = grad_s
    gu = np.zeros_like(grad_s)
    for blk, bc in zip(reversed(model.blocks), reversed(cache["blocks"])):
        du_l = lif_backward(gs, bc["out_trace"], blk.lif_out, relaxed=relaxed) + gu
        dpre2 = batchnorm_backward(du_l, blk.mlp_bn2, bc["bn2"])
        ds_mlp = linear_backward(dpre2, bc["s_mlp_float"], blk.mlp_lin2, counters)
        dm1 = lif_backward(ds_mlp, bc["mlp_trace"], blk.lif_mlp, relaxed=relaxed)
        dpre1 = batchnorm_backward(dm1, blk.mlp_bn1, bc["bn1"])
        ds_mid = linear_backward(dpre1, bc["s_mid_float"], blk.mlp_lin1, counters)
        du_p = du_l + lif_backward(ds_mid, bc["mid_trace"], blk.lif_mid, relaxed=relaxed)
        gu = du_p
        gs = sga_backward(du_p, bc["sga"], blk.sga, counters)
    du0 = lif_backward(gs, cache["s0_trace"], model.lif, relaxed=relaxed) + gu
    dpre_bn = du0.sum(axis=0)
    dpre = batchnorm_backward(dpre_bn, model.in_bn, cache["in_bn"])
    return linear_backward(dpre, cache["x"], model.in_proj, counters)


def fuse(s, g: DenseTensor | None, alpha: float, mode: str = "add") -> DenseTensor:
    """Rate-decode the spike branch over T and combine with the GNN branch.

    add:    Z = (1-alpha) * mean_T(s) + alpha * g
    concat: Z = [(1-alpha) * mean_T(s) || alpha * g]
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must be in [0,1]")
    s_f = s.unpack() if isinstance(s, SpikeTensor) else s.data
    if s_f.ndim != 3:
        raise ShapeError("fuse expects spikes of shape [T, N, D]")
    s_mean = s_f.mean(axis=0)
    if g is None:
        g_arr = np.zeros_like(s_mean)
    else:
        if g.ndim != 2 or g.shape[0] != s_mean.shape[0]:
            raise ShapeError(f"branch node counts differ: {s_mean.shape} vs {g.shape}")
        g_arr = g.data
    one_minus = np.float32(1.0 - alpha)
    a = np.float32(alpha)
    if mode == "add":
        if g_arr.shape != s_mean.shape:
            raise ShapeError("add fusion needs both branches of equal width")
        return DenseTensor(one_minus * s_mean + a * g_arr)
    if mode == "concat":
        return DenseTensor(np.concatenate([one_minus * s_mean, a * g_arr], axis=1))
    raise ConfigError(f"fusion must be add or concat, got {mode!r}")


def classify(model: SpikeGraphTransformer, z: DenseTensor, counters: OpCounters | None = None) -> DenseTensor:
    """Linear logits; softmax/sigmoid is the loss layer's business."""
    if z.shape[-1] != model.classifier.weight.shape[0]:
        raise ShapeError(
            f"classifier expects width {model.classifier.weight.shape[0]}, got {z.shape[-1]}"
        )
    return DenseTensor(linear_apply(z.data, model.classifier, counters))


def forward(
    model: SpikeGraphTransformer,
    x: DenseTensor,
    graph: CsrGraph | None = None,
    training: bool = False,
    relaxed: bool = False,
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
    counters: OpCounters | None = None,
) -> DenseTensor:
    """Full dual-branch forward pass returning [N, C] logits."""
    if model.alpha > 0.0 and graph is None:
        raise ConfigError("alpha > 0 requires a graph")
    s = encode(model, x, training=training, relaxed=relaxed, cache=cache, counters=counters)
    g = None
    if graph is not None:
        gnn_cache: list | None = [] if cache is not None else None
        g = gcn_forward(
            graph, x, model.gnn, training=training, rng=rng, cache=gnn_cache, counters=counters
        )
        if cache is not None:
            cache["gnn"] = gnn_cache
    z = fuse(s, g, model.alpha, model.fusion)
    z_arr = z.data
    if training and model.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - model.dropout
        mask = (rng.random(z_arr.shape) < keep).astype(np.float32) / np.float32(keep)
        z_arr = z_arr * mask
        if cache is not None:
            cache["drop_mask"] = mask
    if cache is not None:
        cache["s_out"] = s
        cache["z_in"] = z_arr
        cache["graph"] = graph
    return classify(model, DenseTensor(z_arr, check=False), counters)


def model_backward(
    model: SpikeGraphTransformer,
    dlogits: np.ndarray,
    cache: dict,
    counters: OpCounters | None = None,
) -> None:
    """Backward through classifier, fusion, and both branches."""
    dz = linear_backward(np.asarray(dlogits), cache["z_in"], model.classifier, counters)
    if "drop_mask" in cache:
        dz = dz * cache["drop_mask"]
    s = cache["s_out"]
    t_steps, n, d = s.shape
    one_minus = np.float32(1.0 - model.alpha)
    a = np.float32(model.alpha)
    if model.fusion == "add":
        ds_mean = one_minus * dz
        dg = a * dz
    else:
        ds_mean = one_minus * dz[:, :d]
        dg = a * dz[:, d:]
    ds = np.ascontiguousarray(np.broadcast_to(ds_mean / np.float32(t_steps), (t_steps, n, d)))
    if cache.get("graph") is not None:
        gcn_backward(dg, cache["graph"], model.gnn, cache["gnn"], counters)
    encode_backward(model, ds, cache, counters)


# ---------------------------------------------------------------------------
# streaming inference


def _encode_chunk(model: SpikeGraphTransformer, x_arr: np.ndarray, masks: list[np.ndarray]):
    """Inference encode of one node chunk through len(masks) blocks.

    Every per-node computation is exact; the attention masks (the only
    cross-node coupling) are supplied precomputed.
    """
    pre = linear_apply(x_arr, model.in_proj)
    pre_bn = batchnorm_forward(DenseTensor(pre, check=False), model.in_bn, training=False)
    u0 = repeat_time(pre_bn, model.t_steps)
    s, _ = lif_forward(u0, model.lif, want_trace=False)
    u_prev = u0.data
    for blk, mask_words in zip(model.blocks, masks):
        s_in, _ = lif_forward(s.to_dense(), blk.sga.lif_in, want_trace=False)
        q = project_branch(s_in, blk.sga.lin_q, blk.sga.bn_q, blk.sga.lif_q)
        u_p = unpack_bits(np.bitwise_and(q.words, mask_words), model.d)
        u_p += u_prev
        s_mid, _ = lif_forward(DenseTensor(u_p, check=False), blk.lif_mid, want_trace=False)
        m1_bn = batchnorm_forward(
            spike_linear(s_mid, blk.mlp_lin1), blk.mlp_bn1, training=False
        )
        s_mlp, _ = lif_forward(m1_bn, blk.lif_mlp, want_trace=False)
        m2_bn = batchnorm_forward(
            spike_linear(s_mlp, blk.mlp_lin2), blk.mlp_bn2, training=False
        )
        u_l = m2_bn.data
        u_l += u_p
        s, _ = lif_forward(DenseTensor(u_l, check=False), blk.lif_out, want_trace=False)
        u_prev = u_l
    return s


def streaming_logits(
    model: SpikeGraphTransformer,
    x: DenseTensor,
    graph: CsrGraph | None = None,
    chunk_size: int = 4096,
) -> DenseTensor:
    """Full-graph inference in node chunks, bit-identical to forward().

    Runs one pass per encoder block that accumulates the global K-AND-V
    channel counts over chunks and thresholds them into that block's mask,
    then a final chunked pass that produces logits. Peak dense state is
    O(chunk * T * D) plus the masks.
    """
    if model.alpha > 0.0 and graph is None:
        raise ConfigError("alpha > 0 requires a graph")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n = x.shape[0]
    d = model.d
    t_steps = model.t_steps
    spans = [(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]
    masks: list[np.ndarray] = []
    for blk in model.blocks:
        c_total = np.zeros((t_steps, d), dtype=np.int64)
        for lo, hi in spans:
            s_prev = _encode_chunk(model, x.data[lo:hi], masks)
            s_in, _ = lif_forward(s_prev.to_dense(), blk.sga.lif_in, want_trace=False)
            k = project_branch(s_in, blk.sga.lin_k, blk.sga.bn_k, blk.sga.lif_k)
            v = project_branch(s_in, blk.sga.lin_v, blk.sga.bn_v, blk.sga.lif_v)
            c_total += _kernels.and_colwise_popcount(k.words, v.words, d)
        h = blk.sga.heads
        c_head = c_total.reshape(t_steps, h, d // h).sum(axis=-1) if h != d else c_total
        m, _ = lif_forward(
            DenseTensor(c_head.astype(np.float32)[:, None, :], check=False),
            blk.sga.lif_attn,
            want_trace=False,
        )
        masks.append(pack_bits(_expand_heads(m.unpack(), h, d)))
    g = None
    if graph is not None:
        g = gcn_forward(graph, x, model.gnn, training=False)
    logits = np.empty((n, model.n_classes), dtype=np.float32)
    for lo, hi in spans:
        s_chunk = _encode_chunk(model, x.data[lo:hi], masks)
        g_chunk = DenseTensor(g.data[lo:hi], check=False) if g is not None else None
        z = fuse(s_chunk, g_chunk, model.alpha, model.fusion)
        logits[lo:hi] = linear_apply(z.data, model.classifier)
    return DenseTensor(logits)


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(model: SpikeGraphTransformer, path: str) -> None:
    """Single file: one-line JSON header, then float32 LE payload per tensor."""
    entries = []
    offset = 0
    arrays = []
    for name, value in model.named_state():
        arr = np.ascontiguousarray(value, dtype=np.float32)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes
    header = {"format": CHECKPOINT_MAGIC, "arch": model.config(), "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for arr in arrays:
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path: str) -> SpikeGraphTransformer:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a checkpoint file: {path}")
    model = SpikeGraphTransformer.from_config(header["arch"])
    state = dict(model.named_state())
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in state:
            raise ConfigError(f"checkpoint tensor {name!r} has no destination")
        target = state[name]
        shape = tuple(entry["shape"])
        if tuple(target.shape) != shape:
            raise ConfigError(f"tensor {name!r} shape {shape} does not match model {target.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        target[...] = flat.reshape(shape)
    return model
