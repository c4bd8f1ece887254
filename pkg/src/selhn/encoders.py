"""Feature-set encoders with hand-written forward/backward passes.

Three architectures over pre-extracted per-item feature sets (a set of
D-dimensional vectors per image or sentence):

* ``fc``    linear projection D -> d, pool over the set, L2 normalize
* ``mlp``   fc, then a bottleneck block BN -> FC(d -> d/2) -> BN -> FC(d/2 -> d),
            pool, normalize
* ``rmlp``  like ``mlp`` but the block's output is added back onto the fc
            output (residual) before pooling

The bottleneck has no nonlinearity between its linear layers by default; an
optional ReLU can be switched on via ``activation="relu"``. Pooling over each
item's vectors is mean (default) or max. Gradients are exact and computed by
a tape-based manual backward; there is no autodiff anywhere.

Batch-norm statistics in train mode are taken over all feature vectors of the
batch (every item's vectors stacked); eval mode uses the running statistics
and mutates nothing, so eval forward is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass
import struct

import numpy as np

from .errors import ConfigError, DataFormatError
from .numerics import NormalizeTape, l2_normalize_rows, l2_normalize_vjp

KINDS = ("fc", "mlp", "rmlp")
POOLINGS = ("mean", "max")
ACTIVATIONS = ("none", "relu")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"HNSC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderArch:
    kind: str
    input_dim: int
    embed_dim: int
    pooling: str = "mean"
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.embed_dim < 1:
            raise ConfigError("input_dim and embed_dim must be >= 1")
        if self.kind in ("mlp", "rmlp") and self.embed_dim % 2 != 0:
            raise ConfigError(
                f"embed_dim must be even for {self.kind} (hidden layer is "
                f"embed_dim/2), got {self.embed_dim}")

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim // 2

    @property
    def has_mlp(self) -> bool:
        return self.kind in ("mlp", "rmlp")


# (name, is_trainable); shapes are functions of the arch. This order is the
# checkpoint serialization order.
_FC_TENSORS = (("fc_w", True), ("fc_b", True))
_MLP_TENSORS = (
    ("bn1_gamma", True), ("bn1_beta", True), ("bn1_mean", False), ("bn1_var", False),
    ("lin1_w", True), ("lin1_b", True),
    ("bn2_gamma", True), ("bn2_beta", True), ("bn2_mean", False), ("bn2_var", False),
    ("lin2_w", True), ("lin2_b", True),
)


def _tensor_shapes(arch: EncoderArch) -> dict[str, tuple[int, ...]]:
    d, h = arch.embed_dim, arch.hidden_dim
    shapes = {"fc_w": (arch.input_dim, d), "fc_b": (d,)}
    if arch.has_mlp:
        shapes.update({
            "bn1_gamma": (d,), "bn1_beta": (d,), "bn1_mean": (d,), "bn1_var": (d,),
            "lin1_w": (d, h), "lin1_b": (h,),
            "bn2_gamma": (h,), "bn2_beta": (h,), "bn2_mean": (h,), "bn2_var": (h,),
            "lin2_w": (h, d), "lin2_b": (d,),
        })
    return shapes


def _tensor_order(arch: EncoderArch):
    order = list(_FC_TENSORS)
    if arch.has_mlp:
        order += list(_MLP_TENSORS)
    return order


@dataclass
class EncoderState:
    """Parameters (and batch-norm running buffers) of one encoder."""

    arch: EncoderArch
    tensors: dict[str, np.ndarray]
    mode: str = "train"

    def __getattr__(self, name):
        tensors = self.__dict__.get("tensors")
        if tensors is not None and name in tensors:
            return tensors[name]
        raise AttributeError(name)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in declaration order (running stats excluded)."""
        return [(n, self.tensors[n]) for n, trainable in _tensor_order(self.arch)
                if trainable]

    def copy(self) -> "EncoderState":
        return EncoderState(self.arch,
                            {n: a.copy() for n, a in self.tensors.items()},
                            self.mode)


def init_params(arch: EncoderArch, seed: int) -> EncoderState:
    """Fresh state: linear weights uniform in +-1/sqrt(fan_in), biases zero,
    batch-norm scale 1 / shift 0, running stats (0, 1). Deterministic per seed."""
    rng = np.random.default_rng(seed)
    shapes = _tensor_shapes(arch)
    tensors: dict[str, np.ndarray] = {}
    for name, _ in _tensor_order(arch):
        shape = shapes[name]
        if name.endswith("_w"):
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("_gamma") or name.endswith("_var"):
            tensors[name] = np.ones(shape)
        else:  # biases, bn shift, running means
            tensors[name] = np.zeros(shape)
    return EncoderState(arch, tensors)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str, eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM):
    """Batch normalization over rows.

    Train mode normalizes with the batch mean and biased batch variance and
    updates the running buffers in place (running_var gets the unbiased
    estimate). Eval mode uses the running buffers and mutates nothing.
    Constant columns are harmless: the eps floor keeps the scale finite.
    """
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise ValueError(
                f"batch-norm needs >= 2 rows in train mode, got {n}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1.0))
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    y = gamma * xhat + beta
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mode": mode, "n": n}
    return y, cache


def batchnorm_backward(d_y: np.ndarray, cache: dict):
    """Exact backward of batchnorm_forward.

    In train mode the gradient flows through the batch mean and variance:
    d_x = inv_std * (d_xhat - mean(d_xhat) - xhat * mean(d_xhat * xhat)).
    In eval mode the statistics are constants, so d_x = d_y * gamma * inv_std.
    """
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    d_gamma = np.sum(d_y * xhat, axis=0)
    d_beta = np.sum(d_y, axis=0)
    d_xhat = d_y * gamma
    if cache["mode"] == "train":
        d_x = inv_std * (d_xhat
                         - d_xhat.mean(axis=0)
                         - xhat * (d_xhat * xhat).mean(axis=0))
    else:
        d_x = d_xhat * inv_std
    return d_x, d_gamma, d_beta


@dataclass
class ForwardTape:
    """Cached forward state; valid for exactly one backward pass."""

    x: np.ndarray                       # stacked input features
    counts: np.ndarray                  # vectors per item
    offsets: np.ndarray                 # row offsets per item
    h0: np.ndarray                      # fc output
    mlp_cache: dict | None
    pooled_rows: np.ndarray             # pre-normalization pooled embeddings
    max_winners: np.ndarray | None      # (B, d) winner row index, max pooling
    norm_tape: NormalizeTape
    consumed: bool = False


def _mlp_forward(state: EncoderState, x: np.ndarray):
    arch = state.arch
    a1, bn1 = batchnorm_forward(x, state.bn1_gamma, state.bn1_beta,
                                state.bn1_mean, state.bn1_var, state.mode)
    l1 = a1 @ state.lin1_w + state.lin1_b
    a2, bn2 = batchnorm_forward(l1, state.bn2_gamma, state.bn2_beta,
                                state.bn2_mean, state.bn2_var, state.mode)
    if arch.activation == "relu":
        a2_post = np.maximum(a2, 0.0)
    else:
        a2_post = a2
    out = a2_post @ state.lin2_w + state.lin2_b
    cache = {"bn1": bn1, "a1": a1, "bn2": bn2, "a2": a2, "a2_post": a2_post}
    return out, cache


def _mlp_backward(state: EncoderState, cache: dict, d_out: np.ndarray,
                  grads: dict[str, np.ndarray]) -> np.ndarray:
    grads["lin2_w"] += cache["a2_post"].T @ d_out
    grads["lin2_b"] += d_out.sum(axis=0)
    d_a2_post = d_out @ state.lin2_w.T
    if state.arch.activation == "relu":
        d_a2 = d_a2_post * (cache["a2"] > 0.0)
    else:
        d_a2 = d_a2_post
    d_l1, d_g2, d_b2 = batchnorm_backward(d_a2, cache["bn2"])
    grads["bn2_gamma"] += d_g2
    grads["bn2_beta"] += d_b2
    grads["lin1_w"] += cache["a1"].T @ d_l1
    grads["lin1_b"] += d_l1.sum(axis=0)
    d_a1 = d_l1 @ state.lin1_w.T
    d_x, d_g1, d_b1 = batchnorm_backward(d_a1, cache["bn1"])
    grads["bn1_gamma"] += d_g1
    grads["bn1_beta"] += d_b1
    return d_x


def encoder_forward(state: EncoderState,
                    feature_sets: list[np.ndarray]) -> tuple[np.ndarray, ForwardTape]:
    """Encode a batch of feature sets into unit-norm embeddings.

    Each feature set is an (M_i, D) array; the result is (B, embed_dim) with
    unit rows plus the tape needed for one backward pass.
    """
    arch = state.arch
    if not feature_sets:
        raise ValueError("empty batch")
    counts = np.array([f.shape[0] for f in feature_sets], dtype=np.int64)
    if counts.min() < 1:
        raise ValueError("every item needs at least one feature vector")
    x = np.vstack([np.asarray(f, dtype=np.float64) for f in feature_sets])
    if x.shape[1] != arch.input_dim:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match arch input_dim "
            f"{arch.input_dim}")
    offsets = np.concatenate([[0], np.cumsum(counts)])

    h0 = x @ state.fc_w + state.fc_b
    mlp_cache = None
    if arch.kind == "fc":
        z = h0
    elif arch.kind == "mlp":
        z, mlp_cache = _mlp_forward(state, h0)
    else:  # rmlp
        m, mlp_cache = _mlp_forward(state, h0)
        z = h0 + m

    b = len(feature_sets)
    max_winners = None
    if arch.pooling == "mean":
        pooled = np.add.reduceat(z, offsets[:-1], axis=0) / counts[:, None]
    else:
        pooled = np.empty((b, arch.embed_dim))
        max_winners = np.empty((b, arch.embed_dim), dtype=np.int64)
        for i in range(b):
            seg = z[offsets[i]:offsets[i + 1]]
            idx = np.argmax(seg, axis=0)
            max_winners[i] = offsets[i] + idx
            pooled[i] = seg[idx, np.arange(arch.embed_dim)]

    emb, norm_tape = l2_normalize_rows(pooled)
    tape = ForwardTape(x=x, counts=counts, offsets=offsets, h0=h0,
                       mlp_cache=mlp_cache, pooled_rows=pooled,
                       max_winners=max_winners, norm_tape=norm_tape)
    return emb, tape


def zero_grads(state: EncoderState) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in state.param_items()}


def encoder_backward(state: EncoderState, tape: ForwardTape,
                     d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for the forward pass recorded on the tape."""
    if tape.consumed:
        raise RuntimeError("tape already consumed; rerun encoder_forward")
    tape.consumed = True
    arch = state.arch
    if d_embeddings.shape != tape.norm_tape.normalized.shape:
        raise ValueError(
            f"d_embeddings shape {d_embeddings.shape} does not match forward "
            f"output {tape.norm_tape.normalized.shape}")

    grads = zero_grads(state)
    d_pooled = l2_normalize_vjp(d_embeddings, tape.norm_tape)

    d_z = np.zeros_like(tape.h0)
    if arch.pooling == "mean":
        d_z = np.repeat(d_pooled / tape.counts[:, None], tape.counts, axis=0)
    else:
        cols = np.arange(arch.embed_dim)
        for i in range(len(tape.counts)):
            np.add.at(d_z, (tape.max_winners[i], cols), d_pooled[i])

    if arch.kind == "fc":
        d_h0 = d_z
    elif arch.kind == "mlp":
        d_h0 = _mlp_backward(state, tape.mlp_cache, d_z, grads)
    else:  # rmlp: residual add sums the two paths
        d_h0 = d_z + _mlp_backward(state, tape.mlp_cache, d_z, grads)

    grads["fc_w"] += tape.x.T @ d_h0
    grads["fc_b"] += d_h0.sum(axis=0)
    return grads


# --- checkpoint I/O -------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "HNSC" | version u32 | encoder count u32
#   per encoder:
#     kind u8 (0 fc, 1 mlp, 2 rmlp) | pooling u8 (0 mean, 1 max)
#     | activation u8 (0 none, 1 relu) | input_dim u32 | embed_dim u32
#     | every tensor in declaration order as little-endian float64,
#       running statistics included

def save_checkpoint(path, states: list[EncoderState]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(states)))
        for st in states:
            arch = st.arch
            fh.write(struct.pack("<BBBII", KINDS.index(arch.kind),
                                 POOLINGS.index(arch.pooling),
                                 ACTIVATIONS.index(arch.activation),
                                 arch.input_dim, arch.embed_dim))
            for name, _ in _tensor_order(arch):
                fh.write(st.tensors[name].astype("<f8").tobytes())


def load_checkpoint(path) -> list[EncoderState]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {blob[:4]!r}", byte_offset=0)
    off = 4
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}",
                              byte_offset=4)
    states = []
    for k in range(count):
        try:
            kind_i, pool_i, act_i, input_dim, embed_dim = struct.unpack_from(
                "<BBBII", blob, off)
        except struct.error:
            raise DataFormatError("truncated checkpoint header",
                                  byte_offset=off, item_index=k) from None
        off += 11
        arch = EncoderArch(KINDS[kind_i], input_dim, embed_dim,
                           POOLINGS[pool_i], ACTIVATIONS[act_i])
        shapes = _tensor_shapes(arch)
        tensors = {}
        for name, _ in _tensor_order(arch):
            size = int(np.prod(shapes[name])) * 8
            if off + size > len(blob):
                raise DataFormatError("truncated checkpoint tensor data",
                                      byte_offset=off, item_index=k)
            flat = np.frombuffer(blob, dtype="<f8",
                                 count=int(np.prod(shapes[name])), offset=off)
            tensors[name] = flat.reshape(shapes[name]).astype(np.float64)
            off += size
        states.append(EncoderState(arch, tensors, mode="eval"))
    if off != len(blob):
        raise DataFormatError("trailing bytes after last encoder",
                              byte_offset=off)
    return states
