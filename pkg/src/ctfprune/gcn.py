"""Multi-head graph convolutional classifier with mask-parametrized layers.

For one sample with node signal ``U`` (s features x n nodes) the block computes

    Z = relu(sum_k A_k @ U.T @ W_k)          (n x C)

and the classifier maps ``flatten(Z)`` (row-major, node-major) through a dense
layer to class logits.  The K adjacency heads are stored stacked as one
(K*n) x n tensor and the K filter banks as one (K*s) x C tensor, so

    [A_1 U^T | ... | A_K U^T] @ [W_1; ...; W_K] == sum_k A_k U^T W_k

and each head's filter bank is a row span of the stacked tensor.  With K > 1
the filters are also split into K column groups, which makes the diagonal
blocks (head k rows x filter group k columns) the channels.
"""

import io
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError, FormatError, InputError
from .mask_param import ChannelLayout, LatentLayer, ctf_mask, effective_weights

LAYER_NAMES = ("adjacency", "conv", "dense")
MODE_FIELD = {"fine": "fine", "coarse": "coarse", "ctf": "composed"}
MODES = ("none", "fine", "coarse", "ctf")


@dataclass(frozen=True)
class GcnConfig:
    nodes: int = 6
    features: int = 24
    heads: int = 1
    filters: int = 8
    classes: int = 2
    activation: str = "relu"
    attention_softmax: bool = False
    block_rows: int = 4
    block_cols: int = 4
    prune_adjacency: bool = True
    prune_conv: bool = True
    prune_dense: bool = True

    def __post_init__(self):
        for name in ("nodes", "features", "heads", "filters", "classes", "block_rows", "block_cols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    def layouts(self):
        n, s, K, C = self.nodes, self.features, self.heads, self.filters
        adjacency = ChannelLayout(K * n, n, tuple((k * n, (k + 1) * n) for k in range(K)),
                                  ChannelLayout.grid(n, n, 1, self.block_cols).col_spans)
        if K > 1:
            conv = ChannelLayout.headed(K, s, C)
        else:
            conv = ChannelLayout.grid(s, C, self.block_rows, self.block_cols)
        dense = ChannelLayout.grid(n * C, self.classes, self.block_rows, self.block_cols)
        return {"adjacency": adjacency, "conv": conv, "dense": dense}

    def prunable(self):
        return {"adjacency": self.prune_adjacency, "conv": self.prune_conv, "dense": self.prune_dense}


ACTIVATIONS = {"relu": tc.relu, "identity": lambda t: t, "tanh": tc.tanh}


def multihead_aggregate(adjacency, X, heads):
    """Rows ``b*n + i``, cols ``k*s + f``: sum_j A_k[i, j] X_b[j, f].

    ``adjacency`` is (K*n) x n, ``X`` is (B*n) x s with sample b's U^T in rows
    b*n .. b*n + n - 1.
    """
    Kn, n = adjacency.shape
    if Kn != heads * n or X.shape[0] % n:
        raise DimensionError(f"aggregate: adjacency {adjacency.shape} with {heads} heads vs signal {X.shape}")
    B, s = X.shape[0] // n, X.shape[1]
    A3 = adjacency.data.reshape(heads, n, n)
    X3 = X.data.reshape(B, n, s)
    out = np.matmul(A3[None], X3[:, None])  # B, K, n, s
    data = out.transpose(0, 2, 1, 3).reshape(B * n, heads * s)

    def back(g):
        G = g.reshape(B, n, heads, s).transpose(0, 2, 1, 3)
        dA = np.einsum("bkif,bjf->kij", G, X3).reshape(Kn, n) if adjacency.requires_grad else None
        dX = np.einsum("kij,bkif->bjf", A3, G).reshape(B * n, s) if X.requires_grad else None
        return dA, dX

    return tc.record("multihead_aggregate", data, (adjacency, X), back)


class GcnModel:
    """Adjacency heads, filter banks and a dense classifier, each a LatentLayer."""

    def __init__(self, config, rng=None, layers=None):
        self.config = config
        layouts = config.layouts()
        if layers is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            layers = {name: LatentLayer.glorot(layouts[name], rng) for name in LAYER_NAMES}
        for name in LAYER_NAMES:
            if layers[name].layout != layouts[name]:
                raise DimensionError(f"{name} layout does not match the configuration")
        self.layers = layers

    @property
    def heads(self):
        n = self.config.nodes
        A = self.layers["adjacency"].latent.data
        return [A[k * n:(k + 1) * n] for k in range(self.config.heads)]

    @property
    def conv_filters(self):
        s = self.config.features
        W = self.layers["conv"].latent.data
        return [W[k * s:(k + 1) * s] for k in range(self.config.heads)]

    def parameters(self):
        return [self.layers[name].latent for name in LAYER_NAMES]

    def set_sigma(self, sigma):
        for layer in self.layers.values():
            layer.set_sigma(sigma)

    @property
    def sigma(self):
        return self.layers["conv"].sigma

    def masks(self, aggregate="saturating", power=4, eps=1e-3):
        """MaskTriple for every prunable layer."""
        prunable = self.config.prunable()
        return {name: ctf_mask(self.layers[name], aggregate, power, eps)
                for name in LAYER_NAMES if prunable[name]}

    def effective(self, mode="none", masks=None):
        """Weights seen by the forward pass under ``mode``."""
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        out = {}
        for name in LAYER_NAMES:
            layer = self.layers[name]
            if mode == "none" or masks is None or name not in masks:
                out[name] = layer.latent
            else:
                out[name] = effective_weights(layer, masks[name], MODE_FIELD[mode])
        return out


def _signal_matrix(batch, config):
    """Stack a batch of s x n node signals into the (B*n) x s matrix of U^T blocks."""
    U = np.asarray(batch, dtype=np.float64)
    if U.ndim == 2:
        U = U[None]
    if U.ndim != 3 or U.shape[0] == 0:
        raise InputError("batch must be a non-empty sequence of s x n signals")
    if U.shape[1:] != (config.features, config.nodes):
        raise DimensionError(f"signals are {U.shape[1:]}, model expects {(config.features, config.nodes)}")
    return tc.Tensor(U.transpose(0, 2, 1).reshape(-1, config.features))


def _block(config, weights, X):
    A = weights["adjacency"]
    if config.attention_softmax:
        A = tc.row_softmax(A)
    R = multihead_aggregate(A, X, config.heads)
    return ACTIVATIONS[config.activation](tc.matmul(R, weights["conv"]))


def gcn_block(model, U, weights=None):
    """f(sum_k A_k U^T W_k) for one s x n signal; returns n x C."""
    weights = weights or model.effective()
    return _block(model.config, weights, _signal_matrix(U, model.config))


def model_forward(model, batch, weights=None):
    """Logits (B x classes) for a batch of s x n signals."""
    cfg = model.config
    weights = weights or model.effective()
    X = _signal_matrix(batch, cfg)
    B = X.shape[0] // cfg.nodes
    Z = _block(cfg, weights, X)
    return tc.matmul(tc.reshape(Z, B, cfg.nodes * cfg.filters), weights["dense"])


def predict(logits):
    """Row-wise argmax; ties go to the lowest class index."""
    values = logits.data if isinstance(logits, tc.Tensor) else np.asarray(logits)
    return np.argmax(values, axis=1)


def count_params(model):
    prunable = model.config.prunable()
    sizes = {name: model.layers[name].latent.data.size for name in LAYER_NAMES}
    return {"total": sum(sizes.values()), "prunable": sum(v for k, v in sizes.items() if prunable[k])}


def budget_target(prunable, rate):
    """Surviving-entry budget for a pruning rate."""
    if not 0 <= rate < 1:
        raise ConfigError(f"pruning rate must lie in [0, 1), got {rate}")
    return int(round((1.0 - rate) * prunable))


# checkpoint: "key=value" manifest lines, a "payload" line, then per tensor
# an 8-byte little-endian byte count followed by raw little-endian float64.

_MAGIC = "ctfprune-checkpoint 1"


def save_checkpoint(path, model, epoch=0, extra=None):
    lines = [_MAGIC]
    for f in fields(GcnConfig):
        lines.append(f"config.{f.name}={getattr(model.config, f.name)}")
    lines.append(f"sigma={model.sigma!r}")
    lines.append(f"epoch={int(epoch)}")
    for key, value in (extra or {}).items():
        lines.append(f"extra.{key}={value}")
    for name in LAYER_NAMES:
        rows, cols = model.layers[name].latent.shape
        lines.append(f"tensor={name} {rows} {cols}")
    lines.append("payload")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in LAYER_NAMES:
            raw = model.layers[name].latent.data.astype("<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _parse_value(text, kind):
    if kind is bool:
        if text not in ("True", "False"):
            raise ValueError(text)
        return text == "True"
    return kind(text)


def load_checkpoint(path):
    """Returns (model, info) where info holds sigma, epoch and any extras."""
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    header = buf.readline().decode("ascii", "replace").strip()
    if header != _MAGIC:
        raise FormatError(f"{path}: not a ctfprune checkpoint")
    kinds = {f.name: f.type for f in fields(GcnConfig)}
    kinds = {k: {"int": int, "str": str, "bool": bool}.get(v, v) if isinstance(v, str) else v
             for k, v in kinds.items()}
    cfg, info, shapes = {}, {"extra": {}}, []
    try:
        while True:
            line = buf.readline()
            if not line:
                raise FormatError(f"{path}: manifest has no payload marker")
            line = line.decode("ascii").rstrip("\n")
            if line == "payload":
                break
            key, value = line.split("=", 1)
            if key.startswith("config."):
                name = key[len("config."):]
                cfg[name] = _parse_value(value, kinds[name])
            elif key == "sigma":
                info["sigma"] = float(value)
            elif key == "epoch":
                info["epoch"] = int(value)
            elif key.startswith("extra."):
                info["extra"][key[len("extra."):]] = value
            elif key == "tensor":
                name, rows, cols = value.split()
                shapes.append((name, int(rows), int(cols)))
        config = GcnConfig(**cfg)
        arrays = {}
        for name, rows, cols in shapes:
            (size,) = struct.unpack("<Q", buf.read(8))
            raw = buf.read(size)
            if size != rows * cols * 8 or len(raw) != size:
                raise FormatError(f"{path}: payload for {name} is truncated or mis-sized")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    except (ValueError, KeyError, struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from None
    if set(arrays) != set(LAYER_NAMES):
        raise FormatError(f"{path}: expected tensors {LAYER_NAMES}, found {sorted(arrays)}")
    layouts = config.layouts()
    sigma = info.get("sigma", 1.0)
    layers = {name: LatentLayer(tc.Tensor(arrays[name], requires_grad=True), layouts[name], sigma)
              for name in LAYER_NAMES}
    return GcnModel(config, layers=layers), info


def config_dict(config):
    return asdict(config)
