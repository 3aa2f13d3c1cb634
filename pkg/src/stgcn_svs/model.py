"""STGCN architecture for post-fault voltage stability classification.

Data layout: the batched pipeline keeps activations as (n_bus, batch, time,
features) so the Chebyshev multiply, the temporal convolution and the feature
normalization all operate on contiguous reshapes without transposes.

Three physical channels (voltage magnitude, active injection, reactive
injection) run through separate parameter towers.  Each block chains graph
convolution + GLU, temporal convolution + GLU, feature layer-norm and
dropout; block outputs are summed (fusion), reduced to one score per bus
(node layer) and pooled into class probabilities by a learned 2-way soft
assignment (system layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionMismatch, ShapeMismatch, StgcnError, TopologyMismatch
from .graph import ChebFilterBank, Topology, build_cheb_bank, build_laplacian

STABLE, UNSTABLE = 0, 1
LABEL_NAMES = ("stable", "unstable")
CHANNELS = ("v", "p", "q")
# weighted channel sum in the node layer applies (psi_1, psi_2, psi_3) to
# (active, reactive, voltage) respectively
PSI_ORDER = ("p", "q", "v")
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_buses: int
    window_len: int
    cheb_order: int = 2
    num_blocks: int = 5
    hidden: int = 8
    kernel_t: int = 3
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.cheb_order < 1:
            raise StgcnError("cheb_order must be >= 1")
        if self.num_blocks < 1:
            raise StgcnError("num_blocks must be >= 1")
        if self.hidden < 1:
            raise StgcnError("hidden must be >= 1")
        if self.kernel_t < 1 or self.kernel_t % 2 == 0:
            raise StgcnError("kernel_t must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise StgcnError("dropout_rate must be in [0, 1)")
        if self.window_len < 2:
            raise StgcnError("window_len must be >= 2 (single snapshots rejected)")
        if self.num_buses < 1:
            raise StgcnError("num_buses must be >= 1")

    def to_dict(self):
        return {
            "num_buses": self.num_buses,
            "window_len": self.window_len,
            "cheb_order": self.cheb_order,
            "num_blocks": self.num_blocks,
            "hidden": self.hidden,
            "kernel_t": self.kernel_t,
            "dropout_rate": self.dropout_rate,
        }


@dataclass(frozen=True)
class NormStats:
    """Per-channel training-set normalization (order: v, p, q)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls):
        return cls(mean=np.zeros(3), std=np.ones(3))

    @classmethod
    def from_panel(cls, x):
        """x: (samples, 3, N, n) raw channel panel."""
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)


@dataclass
class SvsSample:
    """One post-fault case: V/P/Q time series (N x n) plus stability label."""

    V: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    label: int

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if not (self.V.shape == self.P.shape == self.Q.shape) or self.V.ndim != 2:
            raise ShapeMismatch("V, P, Q must share shape (N, n)")
        if self.V.shape[0] < 2:
            raise StgcnError("a sample needs at least two snapshots (N >= 2)")
        for name, arr in (("V", self.V), ("P", self.P), ("Q", self.Q)):
            if not np.isfinite(arr).all():
                raise StgcnError(f"non-finite values in channel {name}")
        if self.label not in (STABLE, UNSTABLE):
            raise StgcnError(f"label must be 0 (stable) or 1 (unstable), got {self.label}")

    @property
    def window_len(self):
        return self.V.shape[0]

    @property
    def num_buses(self):
        return self.V.shape[1]

    def panel(self):
        """(3, N, n) channel stack in (v, p, q) order."""
        return np.stack([self.V, self.P, self.Q])


@dataclass(frozen=True)
class AssessmentResult:
    probs: np.ndarray           # (2,) stable/unstable probabilities
    predicted: str              # "stable" or "unstable"
    influence: np.ndarray       # (n,) signed per-bus weights
    node_repr: np.ndarray       # (n,) nonnegative node scores


class ModelParams:
    """All learnable tensors, addressable by dotted name."""

    def __init__(self, config: ModelConfig, params):
        self.config = config
        self._params = dict(params)

    @staticmethod
    def _tensor_specs(config: ModelConfig):
        """Yield (name, shape, kind) for every learnable tensor, in creation order."""
        h, k, kt = config.hidden, config.cheb_order, config.kernel_t
        for j in range(1, config.num_blocks + 1):
            c_in = 1 if j == 1 else h
            for ch in CHANNELS:
                prefix = f"block{j}.{ch}"
                yield f"{prefix}.theta", (k + 1, c_in, 2 * h), "glorot"
                yield f"{prefix}.tkernel", (kt, h, 2 * h), "glorot"
                # uniform init here too: a constant scale would zero the
                # node layer's hidden-axis mean exactly (a starting saddle)
                yield f"{prefix}.norm_scale", (h,), "glorot"
                yield f"{prefix}.norm_shift", (h,), "glorot"
        yield "node.psi", (3,), "third"
        yield "system.assign", (2, config.num_buses), "zeros"

    @classmethod
    def init(cls, config: ModelConfig, rng):
        params = {}
        for name, shape, kind in cls._tensor_specs(config):
            if kind == "glorot":
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(6.0 / (fan_in + shape[-1]))
                data = rng.uniform(-bound, bound, size=shape)
            elif kind == "ones":
                data = np.ones(shape)
            elif kind == "third":
                data = np.full(shape, 1.0 / 3.0)
            else:
                data = np.zeros(shape)
            params[name] = Parameter(data, name)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig):
        return cls(config, {
            name: Parameter(np.zeros(shape), name)
            for name, shape, _ in cls._tensor_specs(config)
        })

    @classmethod
    def from_values(cls, config: ModelConfig, values):
        params = cls.zeros(config)
        params.load_values(values)
        return params

    @staticmethod
    def expected_count(config: ModelConfig):
        h, k, kt = config.hidden, config.cheb_order, config.kernel_t
        total = 0
        for j in range(1, config.num_blocks + 1):
            c_in = 1 if j == 1 else h
            total += 3 * ((k + 1) * c_in * 2 * h + kt * h * 2 * h + 2 * h)
        return total + 3 + 2 * config.num_buses

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def count(self):
        return sum(p.data.size for p in self)

    def block(self, j, ch):
        pre = f"block{j}.{ch}"
        return (
            self._params[f"{pre}.theta"],
            self._params[f"{pre}.tkernel"],
            self._params[f"{pre}.norm_scale"],
            self._params[f"{pre}.norm_shift"],
        )

    @property
    def psi(self):
        return self._params["node.psi"]

    @property
    def assign(self):
        return self._params["system.assign"]

    def zero_grads(self):
        ad.zero_grads(self)

    def copy_values(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_values(self, values):
        for name, p in self._params.items():
            arr = np.ascontiguousarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionMismatch(f"parameter {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr


@dataclass(frozen=True)
class StackedBank:
    """Chebyshev matrices T_1..T_K stacked vertically for one multiply per
    conv; T_0 = I is left implicit (the input itself is the zeroth response).

    Small graphs are densified: the bank type stays sparse, this compute
    operator is an implementation detail.
    """

    matrix: object = field(repr=False)
    order: int = 0
    n: int = 0


def prepare_bank(bank: ChebFilterBank, densify_below=512) -> StackedBank:
    tail = bank.matrices[1:]
    if tail:
        stacked = sparse.vstack(tail, format="csr")
        mat = stacked.toarray() if bank.n <= densify_below else stacked
    else:
        mat = np.zeros((0, bank.n))
    return StackedBank(matrix=mat, order=bank.order, n=bank.n)


def bank_for(topology: Topology, cheb_order: int) -> StackedBank:
    return prepare_bank(build_cheb_bank(build_laplacian(topology), cheb_order))


def influence_weights(assign) -> np.ndarray:
    """Signed per-bus weights: stable-column minus unstable-column of softmax(Sb)^T."""
    sb = assign.data if isinstance(assign, Tensor) else np.asarray(assign, dtype=np.float64)
    z = sb - sb.max(axis=0, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=0, keepdims=True)
    return a[0] - a[1]


# ---------------------------------------------------------------------------
# batched cores; activations are (n, B, N, C)
# ---------------------------------------------------------------------------

def _graph_conv_core(x: Tensor, bank: StackedBank, theta: Tensor, pre_activation=False):
    n = x.data.shape[0]
    korder = theta.data.shape[0] - 1
    if bank.order != korder:
        raise ShapeMismatch(f"theta is for K={korder} but bank has K={bank.order}")
    if bank.n != n:
        raise TopologyMismatch(f"bank built for n={bank.n}, data has n={n}")
    if pre_activation:
        return ad.cheb_conv(x, bank.matrix, theta)
    return ad.cheb_conv_glu(x, bank.matrix, theta)


def _temporal_conv_core(x: Tensor, kernel: Tensor, pre_activation=False):
    n, b, t, h = x.data.shape
    if kernel.data.shape[1] != h:
        raise ShapeMismatch(f"kernel expects H={kernel.data.shape[1]}, data has {h}")
    xr = ad.reshape(x, (n * b, t, h))
    if pre_activation:
        z = ad.conv1d_same(xr, kernel)
        return ad.reshape(z, (n, b, t, kernel.data.shape[2]))
    z = ad.conv1d_glu(xr, kernel)
    return ad.reshape(z, (n, b, t, kernel.data.shape[2] // 2))


def _st_block_core(inputs, bank, block_params, dropout_rate, training, rng):
    out = {}
    for ch in CHANNELS:
        theta, tkernel, scale, shift = block_params[ch]
        g = _graph_conv_core(inputs[ch], bank, theta)
        tcv = _temporal_conv_core(g, tkernel)
        out[ch] = ad.layer_norm_dropout(tcv, LAYER_NORM_EPS, scale, shift,
                                        dropout_rate, training, rng)
    return out


def _node_layer_core(channel_means, psi: Tensor):
    """Per-channel mean scores (n, B) -> nonnegative node scores (n, B)."""
    terms = []
    for idx, ch in enumerate(PSI_ORDER):
        w = ad.slice_tensor(psi, (slice(idx, idx + 1),))    # (1,) broadcasts
        terms.append(ad.elementwise_mul(channel_means[ch], w))
    s = ad.add(ad.add(terms[0], terms[1]), terms[2])
    normed = ad.layer_norm(s, axis=0, eps=LAYER_NORM_EPS)   # across buses
    return ad.abs_forward(normed)


def _channel_means(fused):
    return {ch: ad.mean_over_axis(fused[ch], (2, 3)) for ch in CHANNELS}


def _system_layer_core(snode: Tensor, assign: Tensor):
    """snode: (n, B) -> logits (B, 2); assignment softmax is over the 2 classes."""
    a = ad.softmax(assign, axis=0)
    logits = ad.matmul(ad.transpose(snode, (1, 0)), ad.transpose(a, (1, 0)))
    return logits


def forward_batch(
    x,
    labels,
    bank: StackedBank,
    params: ModelParams,
    stats: NormStats,
    training=False,
    rng=None,
    want_features=False,
):
    """Full pipeline over a batch.

    x: (B, 3, N, n) raw channel panel in (v, p, q) order; labels: (B,) ints or
    None for inference.  Returns a dict with probs/node/influence arrays and,
    when labels are given, the scalar loss Tensor (back-prop entry point).
    """
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected panel (B, 3, N, n), got {x.shape}")
    if x.shape[2] != cfg.window_len or x.shape[3] != cfg.num_buses:
        raise DimensionMismatch(
            f"panel (N={x.shape[2]}, n={x.shape[3]}) does not match "
            f"config (N={cfg.window_len}, n={cfg.num_buses})"
        )
    if training and cfg.dropout_rate > 0 and rng is None:
        raise StgcnError("training forward with dropout needs an rng")
    b = x.shape[0]
    n, t = cfg.num_buses, cfg.window_len

    current = {}
    for c_idx, ch in enumerate(CHANNELS):
        raw = (x[:, c_idx] - stats.mean[c_idx]) / stats.std[c_idx]    # (B, N, n)
        arr = np.ascontiguousarray(raw.transpose(2, 0, 1))[..., None]  # (n, B, N, 1)
        current[ch] = ad.tensor(arr)

    # block fusion is a sum, and the node layer starts with a mean over time
    # and hidden axes, so summing the (small) per-block means is the same
    # quantity without materializing the fused tensors; the explicit fused
    # tensors are only built when a caller wants to inspect them
    fused = None
    means = None
    blocks = [] if want_features else None
    for j in range(1, cfg.num_blocks + 1):
        bp = {ch: params.block(j, ch) for ch in CHANNELS}
        current = _st_block_core(current, bank, bp, cfg.dropout_rate, training, rng)
        if want_features:
            blocks.append(current)
            fused = dict(current) if fused is None else {
                ch: ad.add(fused[ch], current[ch]) for ch in CHANNELS}
        else:
            block_means = _channel_means(current)
            means = block_means if means is None else {
                ch: ad.add(means[ch], block_means[ch]) for ch in CHANNELS}

    if want_features:
        means = _channel_means(fused)
    snode = _node_layer_core(means, params.psi)
    logits = _system_layer_core(snode, params.assign)
    probs = ad.softmax(logits, axis=1)

    out = {
        "logits": logits,
        "probs": probs.data,
        "node": snode.data.T.copy(),                    # (B, n)
        "influence": influence_weights(params.assign),  # (n,)
        # prediction rule: stable wins ties at exactly 0.5/0.5
        "predicted": np.where(probs.data[:, 0] >= probs.data[:, 1], STABLE, UNSTABLE),
    }
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (b,):
            raise ShapeMismatch(f"labels shape {labels.shape} != ({b},)")
        out["loss"] = ad.mean_over_axis(ad.cross_entropy_with_logits(logits, labels), 0)
    if want_features:
        out["fused"] = fused
        out["blocks"] = blocks
    return out


# ---------------------------------------------------------------------------
# single-sample operation surface (thin wrappers over the batched cores)
# ---------------------------------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, Tensor) else ad.tensor(np.asarray(x, dtype=np.float64))


def _to_core_layout(x):
    """(N, n, C) -> (n, 1, N, C)"""
    t = _as_tensor(x)
    if t.data.ndim != 3:
        raise ShapeMismatch(f"expected (N, n, C), got {t.data.shape}")
    tlen, n, c = t.data.shape
    return ad.reshape(ad.transpose(t, (1, 0, 2)), (n, 1, tlen, c))


def _from_core_layout(t):
    """(n, 1, N, C) -> (N, n, C)"""
    n, _, tlen, c = t.data.shape
    return ad.transpose(ad.reshape(t, (n, tlen, c)), (1, 0, 2))


def graph_conv(x, bank, theta, pre_activation=False):
    """Chebyshev graph convolution of a (N, n, C_in) series; GLU unless pre_activation."""
    stacked = prepare_bank(bank) if isinstance(bank, ChebFilterBank) else bank
    out = _graph_conv_core(_to_core_layout(x), stacked, _as_tensor(theta), pre_activation)
    return _from_core_layout(out)


def temporal_conv(x, kernel, pre_activation=False):
    """Same-padded time convolution of a (N, n, H) series; GLU unless pre_activation."""
    out = _temporal_conv_core(_to_core_layout(x), _as_tensor(kernel), pre_activation)
    return _from_core_layout(out)


def st_block(inputs, bank, block_params, dropout_rate, training=False, rng=None):
    """One block over per-channel dict of (N, n, C) inputs; returns same keying."""
    stacked = prepare_bank(bank) if isinstance(bank, ChebFilterBank) else bank
    core_in = {ch: _to_core_layout(inputs[ch]) for ch in CHANNELS}
    bp = {ch: tuple(_as_tensor(p) for p in block_params[ch]) for ch in CHANNELS}
    out = _st_block_core(core_in, stacked, bp, dropout_rate, training, rng)
    return {ch: _from_core_layout(out[ch]) for ch in CHANNELS}


def fuse_blocks(block_outputs):
    """Elementwise sum of per-channel block outputs (list of dicts)."""
    if not block_outputs:
        raise StgcnError("fuse_blocks needs at least one block output")
    fused = {ch: _as_tensor(block_outputs[0][ch]) for ch in CHANNELS}
    for blk in block_outputs[1:]:
        for ch in CHANNELS:
            fused[ch] = ad.add(fused[ch], _as_tensor(blk[ch]))
    return fused


def node_layer(v_fused, p_fused, q_fused, psi):
    """Fused (N, n, H) channels -> nonnegative per-bus scores (n,)."""
    fused = {
        "v": _to_core_layout(v_fused),
        "p": _to_core_layout(p_fused),
        "q": _to_core_layout(q_fused),
    }
    out = _node_layer_core(_channel_means(fused), _as_tensor(psi))
    return ad.reshape(out, (out.data.shape[0],))


def system_layer(snode, assign) -> AssessmentResult:
    """Per-bus scores (n,) + assignment (2, n) -> probabilities and influence."""
    sn = _as_tensor(snode)
    asg = _as_tensor(assign)
    if sn.data.ndim != 1 or asg.data.shape != (2, sn.data.shape[0]):
        raise ShapeMismatch(f"snode {sn.data.shape} vs assign {asg.data.shape}")
    logits = _system_layer_core(ad.reshape(sn, (sn.data.shape[0], 1)), asg)
    probs = ad.softmax(logits, axis=1).data[0]
    predicted = LABEL_NAMES[STABLE if probs[0] >= probs[1] else UNSTABLE]
    return AssessmentResult(
        probs=probs,
        predicted=predicted,
        influence=influence_weights(asg),
        node_repr=sn.data.copy(),
    )


def forward(sample: SvsSample, topology: Topology, params: ModelParams,
            stats: NormStats = None, training=False, rng=None, bank: StackedBank = None):
    """Single-case pipeline; returns (AssessmentResult, loss Tensor)."""
    cfg = params.config
    if topology.n != cfg.num_buses:
        raise TopologyMismatch(f"topology n={topology.n} vs config n={cfg.num_buses}")
    if sample.num_buses != cfg.num_buses or sample.window_len != cfg.window_len:
        raise DimensionMismatch(
            f"sample (N={sample.window_len}, n={sample.num_buses}) vs config "
            f"(N={cfg.window_len}, n={cfg.num_buses})"
        )
    if bank is None:
        bank = bank_for(topology, cfg.cheb_order)
    stats = stats or NormStats.identity()
    out = forward_batch(
        sample.panel()[None, ...], np.array([sample.label]), bank, params, stats,
        training=training, rng=rng,
    )
    result = AssessmentResult(
        probs=out["probs"][0],
        predicted=LABEL_NAMES[int(out["predicted"][0])],
        influence=out["influence"],
        node_repr=out["node"][0],
    )
    return result, out["loss"]
