"""Multi-head bidirectional LSTM acoustic model.

A stack of BLSTM layers reads a T x F feature matrix and S independent
linear + softmax output heads emit per-stream senone posteriors. Each head is
an estimate of one talker's senone posterior sequence; training decides which
head tracks which talker, the model itself is symmetric in its heads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ValueNode

# Fused gate layout along the 4H axis of every LSTM weight matrix.
GATE_ORDER = ("input", "forget", "candidate", "output")

CHECKPOINT_MAGIC = b"PITM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Model dimensions. Defaults are desk-scale (CPU-trainable in minutes)."""

    feat_dim: int = 40
    hidden_dim: int = 64
    num_layers: int = 2
    num_streams: int = 2
    num_senones: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("feat_dim", "hidden_dim", "num_layers", "num_streams"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.num_senones < 2:
            raise ValueError("ModelConfig.num_senones must be >= 2 (senone 0 is silence)")


@dataclass
class FeatureSequence:
    """T x F matrix of (log filter bank) features for one utterance."""

    frames: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"FeatureSequence needs a T x F matrix with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"FeatureSequence {self.utterance_id!r} contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PosteriorStreams:
    """Per-stream senone posteriors, with the pre-softmax logits kept alongside.

    ``streams[s]`` is a plain T x K probability matrix; ``logits[s]`` is the
    corresponding graph node, so a loss built on the logits can backpropagate
    into the network. Posterior-only instances (logits=None) are enough for
    decoding and for loss-value computation.
    """

    streams: list[np.ndarray]
    logits: list[ValueNode] | None = None

    @classmethod
    def from_probabilities(cls, streams) -> "PosteriorStreams":
        return cls(streams=[np.asarray(s, dtype=np.float64) for s in streams], logits=None)

    @classmethod
    def from_logit_nodes(cls, nodes: list[ValueNode]) -> "PosteriorStreams":
        return cls(streams=[softmax_rows(n.data) for n in nodes], logits=list(nodes))

    @property
    def num_streams(self) -> int:
        return len(self.streams)

    @property
    def num_frames(self) -> int:
        return self.streams[0].shape[0]


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax through a max shift; every row sums to 1."""
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LstmParams:
    """One direction of one layer: fused input/recurrent weights and bias.

    w_x is d x 4H, w_h is H x 4H, b is 1 x 4H, gates ordered as GATE_ORDER.
    """

    w_x: ValueNode
    w_h: ValueNode
    b: ValueNode


@dataclass
class BlstmLayerParams:
    fwd: LstmParams
    bwd: LstmParams


@dataclass
class OutputHead:
    w: ValueNode  # 2H x K
    b: ValueNode  # 1 x K


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[BlstmLayerParams] = field(default_factory=list)
    heads: list[OutputHead] = field(default_factory=list)

    def named_params(self) -> list[tuple[str, ValueNode]]:
        """All parameters in declaration order (the checkpoint order)."""
        out = []
        for i, layer in enumerate(self.layers):
            for tag, p in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                out.append((f"layer{i}.{tag}.w_x", p.w_x))
                out.append((f"layer{i}.{tag}.w_h", p.w_h))
                out.append((f"layer{i}.{tag}.b", p.b))
        for s, head in enumerate(self.heads):
            out.append((f"head{s}.w", head.w))
            out.append((f"head{s}.b", head.b))
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for _, p in self.named_params()])

    def flatten_grads(self) -> np.ndarray:
        return np.concatenate([p.grad.reshape(-1) for _, p in self.named_params()])

    def load_vector(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        offset = 0
        for name, p in self.named_params():
            n = p.data.size
            if offset + n > theta.size:
                raise ValueError("load_vector: parameter vector too short")
            p.data[...] = theta[offset:offset + n].reshape(p.data.shape)
            offset += n
        if offset != theta.size:
            raise ValueError(f"load_vector: expected {offset} values, got {theta.size}")


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initialization: weights ~ U(-0.05, 0.05), biases 0, forget bias 1."""
    rng = np.random.default_rng(config.seed)
    h = config.hidden_dim

    def weight(rows, cols):
        return ad.leaf(rng.uniform(-0.05, 0.05, size=(rows, cols)), requires_grad=True)

    def lstm_direction(in_dim):
        b = np.zeros((1, 4 * h))
        b[0, h:2 * h] = 1.0  # forget gate
        return LstmParams(w_x=weight(in_dim, 4 * h), w_h=weight(h, 4 * h),
                          b=ad.leaf(b, requires_grad=True))

    layers = []
    in_dim = config.feat_dim
    for _ in range(config.num_layers):
        layers.append(BlstmLayerParams(fwd=lstm_direction(in_dim), bwd=lstm_direction(in_dim)))
        in_dim = 2 * h

    heads = [OutputHead(w=weight(2 * h, config.num_senones),
                        b=ad.leaf(np.zeros((1, config.num_senones)), requires_grad=True))
             for _ in range(config.num_streams)]
    return ModelParams(config=config, layers=layers, heads=heads)


def _cell_from_preactivation(z: ValueNode, c_prev: ValueNode, hidden: int):
    """Gate math shared by the step API and the layer loop.

    z is the 1 x 4H pre-activation x_t w_x + h_prev w_h + b.
    """
    i = ad.sigmoid(ad.slice_cols(z, 0, hidden))
    f = ad.sigmoid(ad.slice_cols(z, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_cols(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_cols(z, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_cell_step(x_t: ValueNode, h_prev: ValueNode, c_prev: ValueNode,
                   params: LstmParams):
    """One LSTM step (input/forget/output gates, tanh candidate, no peepholes).

    Returns (h_t, c_t), both 1 x H.
    """
    hidden = params.w_h.data.shape[0]
    z = ad.add(ad.add_rowvec(ad.matmul(x_t, params.w_x), params.b),
               ad.matmul(h_prev, params.w_h))
    return _cell_from_preactivation(z, c_prev, hidden)


def lstm_scan(pre: ValueNode, w_h: ValueNode, reverse: bool = False) -> ValueNode:
    """Whole-direction LSTM recurrence as one fused graph node.

    pre is the hoisted input projection x w_x + b (T x 4H, time order), w_h
    the recurrent weights. Runs the same cell math as lstm_cell_step from a
    zero initial state and returns the T x H hidden sequence in time order;
    the backward closure is the matching hand-unrolled BPTT loop. Fusing the
    scan keeps graphs at a handful of nodes per layer instead of ~15 per
    frame, which is what makes full-utterance training fast enough.
    """
    hidden = w_h.data.shape[0]
    t_total, width = pre.data.shape
    if width != 4 * hidden:
        raise ValueError(f"lstm_scan: preactivation width {width} != 4*hidden ({4 * hidden})")
    z_all = pre.data
    wh = w_h.data
    order = range(t_total - 1, -1, -1) if reverse else range(t_total)

    gate_i = np.empty((t_total, hidden))
    gate_f = np.empty((t_total, hidden))
    gate_g = np.empty((t_total, hidden))
    gate_o = np.empty((t_total, hidden))
    c_prev_all = np.empty((t_total, hidden))
    h_prev_all = np.empty((t_total, hidden))
    tanh_c = np.empty((t_total, hidden))
    h_out = np.empty((t_total, hidden))

    h = np.zeros(hidden)
    c = np.zeros(hidden)
    for t in order:
        z = z_all[t] + h @ wh
        i = 1.0 / (1.0 + np.exp(-z[:hidden]))
        f = 1.0 / (1.0 + np.exp(-z[hidden:2 * hidden]))
        g = np.tanh(z[2 * hidden:3 * hidden])
        o = 1.0 / (1.0 + np.exp(-z[3 * hidden:]))
        gate_i[t], gate_f[t], gate_g[t], gate_o[t] = i, f, g, o
        c_prev_all[t] = c
        h_prev_all[t] = h
        c = f * c + i * g
        tanh_c[t] = np.tanh(c)
        h = o * tanh_c[t]
        h_out[t] = h

    def bwd(gout):
        dz_all = np.empty((t_total, 4 * hidden))
        dh = np.zeros(hidden)
        dc = np.zeros(hidden)
        for t in reversed(order):
            i, f, g, o = gate_i[t], gate_f[t], gate_g[t], gate_o[t]
            tc = tanh_c[t]
            dh_t = gout[t] + dh
            d_o = dh_t * tc
            d_ct = dh_t * o * (1.0 - tc * tc) + dc
            dz = dz_all[t]
            dz[:hidden] = d_ct * g * (i * (1.0 - i))
            dz[hidden:2 * hidden] = d_ct * c_prev_all[t] * (f * (1.0 - f))
            dz[2 * hidden:3 * hidden] = d_ct * i * (1.0 - g * g)
            dz[3 * hidden:] = d_o * (o * (1.0 - o))
            dc = d_ct * f
            dh = dz @ wh.T
        if pre.grad is not None:
            pre.grad += dz_all
        if w_h.grad is not None:
            w_h.grad += h_prev_all.T @ dz_all

    return ad.record_op(h_out, "lstm_scan", (pre, w_h), bwd)


def _run_direction(x: ValueNode, params: LstmParams, reverse: bool) -> ValueNode:
    pre = ad.add_rowvec(ad.matmul(x, params.w_x), params.b)  # T x 4H
    return lstm_scan(pre, params.w_h, reverse=reverse)


def blstm_layer(x: ValueNode, layer: BlstmLayerParams) -> ValueNode:
    """Forward and backward passes over the sequence, outputs column-stacked.

    Both directions start from zero state at their respective ends; the output
    is T x 2H with the forward half in the first H columns.
    """
    return ad.concat_cols(_run_direction(x, layer.fwd, reverse=False),
                          _run_direction(x, layer.bwd, reverse=True))


def forward(params: ModelParams, features: FeatureSequence) -> PosteriorStreams:
    """Run the full stack on one utterance.

    Inside a Graph the returned logits are differentiable; otherwise this is a
    plain evaluation pass.
    """
    cfg = params.config
    if features.frames.shape[1] != cfg.feat_dim:
        raise ValueError(f"feature dim {features.frames.shape[1]} does not match "
                         f"model feat_dim {cfg.feat_dim} (utterance {features.utterance_id!r})")
    h = ad.leaf(features.frames)
    for layer in params.layers:
        h = blstm_layer(h, layer)
    logits = [ad.add_rowvec(ad.matmul(h, head.w), head.b) for head in params.heads]
    return PosteriorStreams.from_logit_nodes(logits)


# ---------------------------------------------------------------------------
# checkpoint container

_HEADER = struct.Struct("<4sI5IQ")  # magic, version, F, H, N, S, K, seed


def save_checkpoint(params: ModelParams, path):
    """Write the versioned binary checkpoint (header + float64 matrices)."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.feat_dim,
                              cfg.hidden_dim, cfg.num_layers, cfg.num_streams,
                              cfg.num_senones, cfg.seed & 0xFFFFFFFFFFFFFFFF))
        for _, p in params.named_params():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"checkpoint {path}: truncated header")
        magic, version, f, h, n, s, k, seed = _HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint {path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint {path}: unsupported version {version}")
        config = ModelConfig(feat_dim=f, hidden_dim=h, num_layers=n,
                             num_streams=s, num_senones=k, seed=seed)
        params = init_params(config)
        for name, p in params.named_params():
            raw = fh.read(p.data.size * 8)
            if len(raw) != p.data.size * 8:
                raise ValueError(f"checkpoint {path}: truncated at {name}")
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape)
        if fh.read(1):
            raise ValueError(f"checkpoint {path}: trailing bytes")
    return params
