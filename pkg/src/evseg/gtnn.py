"""Graph transformer segmentation network.

Layout: input MLP, three encoder units (transition down + point transformer
block), a global branch that squeezes the deepest graph to one node, three
decoder units (transition up + point transformer block) that retrace the
encoder stages through skip connections, and a per-node classification head
ending in a two-way softmax.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NormStats, Tensor
from .graph import EventGraph, InsufficientNodesError, farthest_point_sampling, knn_indices, knn_self

MAGIC = b"GTNN"
FORMAT_VERSION = 1


class ModelSizeError(InsufficientNodesError):
    """Graph too small for the down-sampling pyramid."""


class CorruptCheckpointError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class GtnnConfig:
    encoder_dims: tuple[int, ...] = (32, 64, 128)
    down_rates: tuple[int, ...] = (1, 4, 4)
    k: int = 16
    global_dim: int = 128
    head_dims: tuple[int, ...] = (64,)
    in_dim: int = 3
    seed: int = 0
    global_source: str = "encoder"  # deepest encoder output feeds the global branch
    # Hidden head layers are linear -> ReLU by default. With head_norm=1 they gain a feature norm, whose
    # per-graph statistics in training act as a per-window output threshold that running statistics
    # cannot reproduce at inference.
    head_norm: int = 0

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.down_rates = tuple(int(r) for r in self.down_rates)
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if len(self.encoder_dims) != 3 or len(self.down_rates) != 3:
            raise ValueError("exactly three encoder stages are supported")
        if self.down_rates[0] != 1 or min(self.down_rates) < 1:
            raise ValueError(f"down_rates must start at 1 and be >= 1, got {self.down_rates}")
        self.head_norm = int(self.head_norm)
        if self.head_norm not in (0, 1):
            raise ValueError(f"head_norm must be 0 or 1, got {self.head_norm}")
        if self.global_source != "encoder":
            raise ValueError("global_source must be 'encoder'")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GtnnConfig":
        kw: dict = {}
        known = {f.name: f for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in known:
                raise ValueError(f"unknown model config line {line!r}")
            if key in ("encoder_dims", "down_rates", "head_dims"):
                kw[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif key == "global_source":
                kw[key] = val
            else:
                kw[key] = int(val)
        return cls(**kw)

    def min_nodes(self) -> int:
        """Smallest N whose deepest stage still has two nodes."""
        total = 1
        for r in self.down_rates:
            total *= r
        return total + 1


# ---------------------------------------------------------------------------
# pyramid: the parameter-free graph structure of every stage


@dataclass(eq=False)
class Pyramid:
    sizes: list[int]
    positions: list[np.ndarray]
    neighbors: list[np.ndarray]
    select: list[np.ndarray | None]  # stage s nodes as indices into stage s-1 (None = identity)
    pool: list[np.ndarray | None]  # (n_s, k) pooling windows into stage s-1
    up_index: list[np.ndarray] = field(default_factory=list)  # up_index[s]: stage s-1 rows -> stage s nodes
    up_weight: list[np.ndarray] = field(default_factory=list)


def _interpolation(fine: np.ndarray, coarse: np.ndarray, select: np.ndarray | None):
    """Inverse-squared-distance weights over the 3 nearest coarse nodes."""
    if select is None:
        n = fine.shape[0]
        return np.arange(n)[:, None], np.ones((n, 1))
    kk = min(3, coarse.shape[0])
    idx = knn_indices(fine, coarse, kk)
    d2 = ((fine[:, None, :] - coarse[idx]) ** 2).sum(-1)
    w = np.zeros_like(d2)
    exact = d2[:, 0] == 0.0
    w[exact, 0] = 1.0
    w[~exact] = 1.0 / d2[~exact]
    w /= w.sum(axis=1, keepdims=True)
    # a fine node that was itself kept maps onto its own coarse copy
    idx[select] = np.arange(len(select))[:, None]
    w[select] = 0.0
    w[select, 0] = 1.0
    return idx, w


def build_pyramid(graph: EventGraph, config: GtnnConfig) -> Pyramid:
    n = len(graph)
    if n < config.min_nodes():
        raise ModelSizeError(
            f"graph has {n} nodes; rates {config.down_rates} need at least {config.min_nodes()}"
        )
    pos = [np.asarray(graph.positions)]
    nbrs = [np.asarray(graph.neighbors)]
    select: list[np.ndarray | None] = [None]
    pool: list[np.ndarray | None] = [None]
    sizes = [n]
    for rate in config.down_rates[1:]:
        prev = pos[-1]
        if rate == 1:
            sel = None
            cur = prev
            pl = None
        else:
            m = math.ceil(len(prev) / rate)
            sel = farthest_point_sampling(prev, m)
            cur = prev[sel]
            pl = knn_indices(cur, prev, min(config.k, len(prev)))
        sizes.append(len(cur))
        pos.append(cur)
        select.append(sel)
        pool.append(pl)
        nbrs.append(nbrs[-1] if sel is None else knn_self(cur, min(config.k, len(cur) - 1)))
    pyr = Pyramid(sizes, pos, nbrs, select, pool)
    pyr.up_index.append(None)
    pyr.up_weight.append(None)
    for s in range(1, len(sizes)):
        idx, w = _interpolation(pos[s - 1], pos[s], select[s])
        pyr.up_index.append(idx)
        pyr.up_weight.append(w)
    return pyr


# ---------------------------------------------------------------------------
# model


class GtnnModel:
    """Parameters and running statistics of the segmentation network."""

    def __init__(self, config: GtnnConfig | None = None):
        self.config = config or GtnnConfig()
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, NormStats] = {}
        self.training = False
        self._rng = np.random.default_rng(self.config.seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------

    def _linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[f"{name}.w"] = Tensor(self._rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    def _norm(self, name: str, width: int) -> None:
        self.params[f"{name}.scale"] = Tensor(np.ones(width), True, f"{name}.scale")
        self.params[f"{name}.shift"] = Tensor(np.zeros(width), True, f"{name}.shift")
        self.norms[name] = NormStats.fresh(width)

    def _pt_block(self, name: str, d: int) -> None:
        for part in ("pre", "phi", "psi", "alpha", "gamma1", "gamma2", "delta2", "post"):
            self._linear(f"{name}.{part}", d, d)
        self._linear(f"{name}.delta1", 3, d)

    def _build(self) -> None:
        c = self.config
        d = c.encoder_dims
        self._linear("input.lin", c.in_dim, d[0])
        self._norm("input.norm", d[0])
        prev = d[0]
        for s in range(3):
            self._linear(f"enc{s}.td.lin", prev, d[s])
            self._norm(f"enc{s}.td.norm", d[s])
            self._pt_block(f"enc{s}.pt", d[s])
            prev = d[s]
        self._linear("global.mlp1", d[2], c.global_dim)
        self._linear("global.mlp2", c.global_dim, c.global_dim)
        for u, (d_in, d_out, d_skip) in enumerate(self.decoder_widths()):
            self._linear(f"dec{u}.tu.lin", d_in, d_out)
            self._norm(f"dec{u}.tu.norm", d_out)
            self._linear(f"dec{u}.tu.proj", d_out + d_skip, d_out)
            self._pt_block(f"dec{u}.pt", d_out)
        width = d[0] + c.global_dim
        for h, hd in enumerate(c.head_dims):
            self._linear(f"head.lin{h}", width, hd)
            if c.head_norm:
                self._norm(f"head.norm{h}", hd)
            width = hd
        self._linear("head.out", width, 2)

    def decoder_widths(self) -> list[tuple[int, int, int]]:
        """(coarse width, output width, skip width) per decoder unit."""
        d = self.config.encoder_dims
        return [(d[2], d[1], d[1]), (d[1], d[0], d[0]), (d[0], d[0], d[0])]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.params.values()))

    def quantized(self) -> "GtnnModel":
        """Copy with every parameter and statistic rounded through float32."""
        twin = GtnnModel(self.config)
        for k, p in self.params.items():
            twin.params[k].data = p.data.astype(np.float32).astype(np.float64)
        for k, st in self.norms.items():
            twin.norms[k] = NormStats(
                st.mean.astype(np.float32).astype(np.float64),
                st.var.astype(np.float32).astype(np.float64),
                st.momentum,
            )
        return twin

    # -- layer helpers ----------------------------------------------------

    def lin(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def norm(self, name: str, x: Tensor) -> Tensor:
        return ad.graph_feature_norm(
            x,
            self.params[f"{name}.scale"],
            self.params[f"{name}.shift"],
            self.norms[name],
            training=self.training,
        )

    def lin_norm_relu(self, name: str, x: Tensor) -> Tensor:
        return ad.relu(self.norm(f"{name}.norm", self.lin(f"{name}.lin", x)))


# ---------------------------------------------------------------------------
# layers


@functools.lru_cache(maxsize=64)
def _self_index(n: int, k: int) -> np.ndarray:
    idx = np.repeat(np.arange(n)[:, None], k, axis=1)
    idx.flags.writeable = False
    return idx


def point_transformer_layer(
    model: GtnnModel, name: str, x: Tensor, positions: np.ndarray, neighbors: np.ndarray
) -> Tensor:
    """Residual vector self-attention block over each node's neighbors."""
    n, k = neighbors.shape
    if x.shape[0] != n:
        raise ad.ShapeError(f"{name}: {x.shape[0]} feature rows for {n} nodes")
    h = model.lin(f"{name}.pre", x)
    q = model.lin(f"{name}.phi", h)
    key = model.lin(f"{name}.psi", h)
    val = model.lin(f"{name}.alpha", h)
    rel = Tensor(positions[:, None, :] - positions[neighbors])
    delta = model.lin(f"{name}.delta2", ad.relu(model.lin(f"{name}.delta1", rel)))
    q_i = ad.gather_rows(q, _self_index(n, k))
    k_j = ad.gather_rows(key, neighbors)
    logits = model.lin(f"{name}.gamma2", ad.relu(model.lin(f"{name}.gamma1", ad.add(ad.subtract(q_i, k_j), delta))))
    attn = ad.softmax_rows(logits, axis=1)
    v_j = ad.add(ad.gather_rows(val, neighbors), delta)
    y = ad.reduce_sum(ad.hadamard(attn, v_j), axis=1)
    return ad.add(x, model.lin(f"{name}.post", y))


def transition_down(model: GtnnModel, name: str, x: Tensor, pool: np.ndarray | None) -> Tensor:
    """Per-node linear/norm/ReLU, then max pooling onto the kept nodes."""
    h = model.lin_norm_relu(name, x)
    return h if pool is None else ad.neighborhood_max_pool(h, pool)


def interpolate(x: Tensor, index: np.ndarray, weight: np.ndarray) -> Tensor:
    gathered = ad.gather_rows(x, index)  # (n_fine, m, F)
    w = Tensor(np.repeat(weight[:, :, None], x.shape[1], axis=2))
    return ad.reduce_sum(ad.hadamard(gathered, w), axis=1)


def transition_up(
    model: GtnnModel, name: str, coarse: Tensor, skip: Tensor, index: np.ndarray, weight: np.ndarray
) -> Tensor:
    """Lift coarse features onto the fine nodes and fuse them with the skip features."""
    h = model.lin_norm_relu(name, coarse)
    up = interpolate(h, index, weight)
    return model.lin(f"{name}.proj", ad.concat_features([up, skip]))


def global_aggregate(model: GtnnModel, deepest: Tensor) -> Tensor:
    """Squeeze the deepest graph to one node and return its ``(1, F_g)`` feature."""
    p = deepest.shape[0]
    # FPS with m=1 keeps the earliest node; its neighborhood at this size is every node
    one = ad.neighborhood_max_pool(deepest, np.arange(p)[None, :])
    h = ad.relu(model.lin("global.mlp2", ad.relu(model.lin("global.mlp1", one))))
    return ad.global_avg_pool(h)


@dataclass
class ForwardTrace:
    """Per-stage node counts seen during a forward pass."""

    encoder_sizes: list[int]
    decoder_sizes: list[int]


def model_forward(
    model: GtnnModel,
    graph: EventGraph,
    pyramid: Pyramid | None = None,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Return ``(N, 2)`` (background, foreground) probabilities for each node."""
    cfg = model.config
    if graph.features.shape[1] != cfg.in_dim:
        raise ad.ShapeError(f"graph has {graph.features.shape[1]} input features, model expects {cfg.in_dim}")
    if pyramid is None:
        pyramid = build_pyramid(graph, cfg)
    n = len(graph)

    x0 = model.lin_norm_relu("input", Tensor(graph.features))
    skips = []
    x = x0
    for s in range(3):
        x = transition_down(model, f"enc{s}.td", x, pyramid.pool[s])
        x = point_transformer_layer(model, f"enc{s}.pt", x, pyramid.positions[s], pyramid.neighbors[s])
        skips.append(x)
    g = global_aggregate(model, skips[2])

    # (coarse stage, fine stage, skip) per decoder unit
    plan = [(2, 1, skips[1]), (1, 0, skips[0]), (0, 0, x0)]
    dec_sizes = []
    for u, (cs, fs, skip) in enumerate(plan):
        if cs == fs:
            idx, w = np.arange(pyramid.sizes[fs])[:, None], np.ones((pyramid.sizes[fs], 1))
        else:
            idx, w = pyramid.up_index[cs], pyramid.up_weight[cs]
        x = transition_up(model, f"dec{u}.tu", x, skip, idx, w)
        x = point_transformer_layer(model, f"dec{u}.pt", x, pyramid.positions[fs], pyramid.neighbors[fs])
        dec_sizes.append(x.shape[0])

    h = ad.concat_features([x, ad.gather_rows(g, np.zeros(n, dtype=np.intp))])
    for i in range(len(cfg.head_dims)):
        h = model.lin(f"head.lin{i}", h)
        if cfg.head_norm:
            h = model.norm(f"head.norm{i}", h)
        h = ad.relu(h)
    probs = ad.softmax_rows(model.lin("head.out", h))
    if trace is not None:
        trace.encoder_sizes = [s.shape[0] for s in skips]
        trace.decoder_sizes = dec_sizes
    return probs


def predict_labels(probs) -> np.ndarray:
    """Argmax over (background, foreground); exact ties go to background."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (p[:, 1] > p[:, 0]).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoints


def _entries(model: GtnnModel) -> list[tuple[str, np.ndarray]]:
    out = [(f"param {k}", p.data) for k, p in model.params.items()]
    for k, st in model.norms.items():
        out.append((f"stat {k}.mean", st.mean))
        out.append((f"stat {k}.var", st.var))
    return out


def save_checkpoint(model: GtnnModel, path: str | Path) -> None:
    entries = _entries(model)
    header = ["[config]", model.config.to_text().rstrip("\n"), "[tensors]"]
    header += [f"{name} {'x'.join(str(d) for d in arr.shape)}" for name, arr in entries]
    head = ("\n".join(header) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in entries)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(body)


def _parse_header(text: str) -> tuple[GtnnConfig, list[tuple[str, tuple[int, ...]]]]:
    if "[config]\n" not in text or "[tensors]\n" not in text:
        raise CorruptCheckpointError("checkpoint header lacks [config]/[tensors] sections")
    cfg_text, _, tens_text = text.partition("[config]\n")[2].partition("[tensors]\n")
    try:
        config = GtnnConfig.from_text(cfg_text)
    except ValueError as exc:
        raise CorruptCheckpointError(f"bad config in checkpoint: {exc}") from None
    shapes = []
    for line in tens_text.splitlines():
        if not line.strip():
            continue
        name, _, shape = line.rpartition(" ")
        shapes.append((name, tuple(int(d) for d in shape.split("x"))))
    return config, shapes


def load_checkpoint(path: str | Path, model: GtnnModel | None = None) -> GtnnModel:
    """Read a checkpoint into ``model`` (or a new model built from its config)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a GTNN checkpoint")
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + head_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        config, shapes = _parse_header(raw[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError, IndexError) as exc:
        if isinstance(exc, CorruptCheckpointError):
            raise
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(raw) != 12 + head_len + 4 * total:
        raise CorruptCheckpointError(
            f"{path}: expected {12 + head_len + 4 * total} bytes, found {len(raw)}"
        )
    if model is None:
        model = GtnnModel(config)
    expected = [(name, arr.shape) for name, arr in _entries(model)]
    if expected != shapes:
        raise ConfigMismatchError(f"{path}: tensor layout does not match the target model")
    flat = np.frombuffer(raw, dtype="<f4", offset=12 + head_len).astype(np.float64)
    pos = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        arr = flat[pos : pos + size].reshape(shape).copy()
        pos += size
        kind, key = name.split(" ", 1)
        if kind == "param":
            model.params[key].data = arr
        else:
            base, stat = key.rsplit(".", 1)
            setattr(model.norms[base], stat, arr)
    return model


def save_config(config: GtnnConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_text(), encoding="utf-8")


def load_config(path: str | Path) -> GtnnConfig:
    return GtnnConfig.from_text(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "ConfigMismatchError",
    "CorruptCheckpointError",
    "ForwardTrace",
    "GtnnConfig",
    "GtnnModel",
    "ModelSizeError",
    "Pyramid",
    "build_pyramid",
    "global_aggregate",
    "load_checkpoint",
    "load_config",
    "model_forward",
    "point_transformer_layer",
    "predict_labels",
    "save_checkpoint",
    "save_config",
    "transition_down",
    "transition_up",
]
