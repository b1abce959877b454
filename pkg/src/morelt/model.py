"""Low-rank decomposed MLP: W = W_general + B @ A for every weight matrix.

The general weights (plus biases) form theta_g, the (B, A) pairs form
theta_t. A model can be evaluated with both (``Full``), with theta_g only
(``GeneralOnly``), or after fusing B @ A into the general weight
(``Merged``).
"""

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .rng import SeededRng

CHECKPOINT_VERSION = 1


class ForwardMode(enum.Enum):
    FULL = "full"
    GENERAL_ONLY = "general_only"
    MERGED = "merged"


def round_half_up(x):
    return int(math.floor(x + 0.5))


def rank_for(m, k, rank_fraction):
    """Absolute rank for an m x k layer from a fractional setting."""
    return max(1, round_half_up(rank_fraction * min(m, k)))


@dataclass
class DecomposedLinear:
    """One layer: y = x @ (W_general + B A)^T + bias^T."""

    w_general: T.Parameter
    bias: T.Parameter
    b_low: T.Parameter | None = None
    a_low: T.Parameter | None = None

    def __post_init__(self):
        m, k = self.w_general.shape
        if self.bias.shape != (m, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.w_general.shape}")
        if (self.b_low is None) != (self.a_low is None):
            raise ConfigError("b_low and a_low must be given together")
        if self.b_low is not None:
            r = self.b_low.shape[1]
            if self.b_low.shape[0] != m or self.a_low.shape != (r, k):
                raise ShapeError(
                    f"low-rank factors {self.b_low.shape} x {self.a_low.shape} do not compose to {(m, k)}"
                )
            if not 0 < r < min(m, k):
                raise ConfigError(f"rank {r} violates 0 < r < min(m, k) = {min(m, k)}")

    @property
    def out_features(self):
        return self.w_general.shape[0]

    @property
    def in_features(self):
        return self.w_general.shape[1]

    @property
    def rank(self):
        return 0 if self.b_low is None else self.b_low.shape[1]

    @property
    def decomposed(self):
        return self.b_low is not None

    def effective_weight(self):
        """W_general + B A as plain values."""
        w = self.w_general.value
        if self.decomposed:
            w = w + T.matmul_values(self.b_low.value, self.a_low.value)
        return w

    def weight(self, mode):
        if mode is ForwardMode.FULL and self.decomposed:
            return self.w_general + T.matmul(self.b_low, self.a_low)
        return self.w_general

    def __call__(self, x, mode):
        return T.add_row(T.matmul(x, T.transpose(self.weight(mode))), self.bias)


@dataclass
class MlpModel:
    layers: list
    merged: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_features != prev.out_features:
                raise ShapeError(f"layer widths do not compose: {prev.out_features} -> {nxt.in_features}")

    @property
    def dims(self):
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def decomposed_mask(self):
        return [layer.decomposed for layer in self.layers]

    @property
    def ranks(self):
        return [layer.rank for layer in self.layers]

    def general_parameters(self):
        out = []
        for layer in self.layers:
            out += [layer.w_general, layer.bias]
        return out

    def tail_parameters(self):
        out = []
        for layer in self.layers:
            if layer.decomposed:
                out += [layer.b_low, layer.a_low]
        return out

    def parameters(self):
        out = []
        for layer in self.layers:
            out += [layer.w_general, layer.bias]
            if layer.decomposed:
                out += [layer.b_low, layer.a_low]
        return out

    def num_parameters(self):
        return sum(p.value.size for p in self.parameters())

    def copy(self):
        layers = []
        for layer in self.layers:
            layers.append(
                DecomposedLinear(
                    T.Parameter(layer.w_general.value.copy(), layer.w_general.name),
                    T.Parameter(layer.bias.value.copy(), layer.bias.name),
                    None if layer.b_low is None else T.Parameter(layer.b_low.value.copy(), layer.b_low.name),
                    None if layer.a_low is None else T.Parameter(layer.a_low.value.copy(), layer.a_low.name),
                )
            )
        return MlpModel(layers, merged=self.merged, meta=dict(self.meta))


def plain_parameter_count(dims):
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def _kaiming_uniform(rng, rows, fan_in, a=0.0):
    # He-uniform with leaky-relu slope ``a``; a = sqrt(5) gives bound 1/sqrt(fan_in)
    bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform_range(-bound, bound, (rows, fan_in))


def init_model(dims, rank_fraction=0.1, seed=0, decomposed_mask=None):
    """Build a decomposed MLP with relu between layers.

    B starts at zero, so the low-rank path is an exact no-op until trained.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer sizes {dims}")
    n_layers = len(dims) - 1
    if decomposed_mask is None:
        decomposed_mask = [True] * n_layers
    if len(decomposed_mask) != n_layers:
        raise ConfigError(f"decomposed_mask has {len(decomposed_mask)} entries for {n_layers} layers")
    if any(decomposed_mask) and not 0.0 < rank_fraction <= 1.0:
        raise ConfigError(f"rank_fraction must lie in (0, 1], got {rank_fraction}")
    rng = SeededRng(seed)
    layers = []
    for i in range(n_layers):
        k, m = dims[i], dims[i + 1]
        lrng = rng.child(i)
        w = T.Parameter(_kaiming_uniform(lrng, m, k), f"w_general.{i}")
        bias = T.Parameter(np.zeros((m, 1)), f"bias.{i}")
        b_low = a_low = None
        if decomposed_mask[i]:
            r = rank_for(m, k, rank_fraction)
            if r >= min(m, k):
                raise ConfigError(
                    f"layer {i} ({m}x{k}): rank_fraction {rank_fraction} gives r={r} >= min(m, k)={min(m, k)}"
                )
            a_low = T.Parameter(_kaiming_uniform(lrng, r, k, a=math.sqrt(5.0)), f"a_low.{i}")
            b_low = T.Parameter(np.zeros((m, r)), f"b_low.{i}")
        layers.append(DecomposedLinear(w, bias, b_low, a_low))
    return MlpModel(layers)


def forward(model, x, mode=ForwardMode.FULL):
    """Raw logits (no softmax / sigmoid) for a batch of rows."""
    if mode is ForwardMode.MERGED and not model.merged:
        raise ConfigError("Merged forward requires a model produced by merge()")
    if mode is not ForwardMode.MERGED and model.merged:
        mode = ForwardMode.GENERAL_ONLY
    h = T.tensor(x)
    if h.shape[1] != model.layers[0].in_features:
        raise ShapeError(f"input width {h.shape[1]} does not match first layer ({model.layers[0].in_features})")
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = layer(h, mode)
        if i < last:
            h = T.relu(h)
    return h


def logits(model, x, mode=ForwardMode.FULL):
    """Forward pass as a plain array, without recording gradients."""
    with T.no_grad():
        return forward(model, x, mode).value


def merge(model):
    """Fuse every (B, A) pair into its general weight."""
    if model.merged:
        return model.copy()
    layers = [
        DecomposedLinear(
            T.Parameter(layer.effective_weight(), f"weight.{i}"),
            T.Parameter(layer.bias.value.copy(), f"bias.{i}"),
        )
        for i, layer in enumerate(model.layers)
    ]
    return MlpModel(layers, merged=True, meta=dict(model.meta))


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(model):
    layers = []
    for layer in model.layers:
        entry = {"w_general": layer.w_general.value.tolist(), "bias": layer.bias.value.tolist()}
        if layer.decomposed:
            entry["b_low"] = layer.b_low.value.tolist()
            entry["a_low"] = layer.a_low.value.tolist()
        layers.append(entry)
    return {
        "version": CHECKPOINT_VERSION,
        "merged": model.merged,
        "dims": model.dims,
        "rank_per_layer": model.ranks,
        "meta": model.meta,
        "layers": layers,
    }


def from_checkpoint(obj):
    try:
        if obj.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {obj.get('version')!r}")
        layers = []
        for i, (entry, r) in enumerate(zip(obj["layers"], obj["rank_per_layer"])):
            b_low = a_low = None
            if r:
                b_low = T.Parameter(np.array(entry["b_low"], dtype=np.float64), f"b_low.{i}")
                a_low = T.Parameter(np.array(entry["a_low"], dtype=np.float64), f"a_low.{i}")
            layers.append(
                DecomposedLinear(
                    T.Parameter(np.array(entry["w_general"], dtype=np.float64), f"w_general.{i}"),
                    T.Parameter(np.array(entry["bias"], dtype=np.float64), f"bias.{i}"),
                    b_low,
                    a_low,
                )
            )
        model = MlpModel(layers, merged=bool(obj.get("merged", False)), meta=dict(obj.get("meta", {})))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed checkpoint: {exc}") from exc
    if model.dims != list(obj["dims"]):
        raise DataError(f"checkpoint dims {obj['dims']} disagree with stored layers {model.dims}")
    return model


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(to_checkpoint(model), f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return from_checkpoint(obj)
