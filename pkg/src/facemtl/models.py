"""Parameter-sharing topologies and the multi-head forward pass.

Three wirings over the same three-conv encoder:

* hierarchical - shared encoder; age branch reads the encoder through two
  dense layers; gender branch adds a conv before its two dense layers; the
  ethnicity branch taps the gender branch's conv features through its own
  conv + two dense layers.
* hard - shared encoder, one two-dense head per task.
* soft - three full encoder copies (one per task), tied together during
  training by a weight-distance penalty.

The optional non-local attention block sits immediately after the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .layers import Conv2dParams, DenseParams, NonLocalParams, conv2d, dense, maxpool2d, non_local
from .tensor import ShapeError, Tensor, relu, reshape, sigmoid, softmax

__all__ = [
    "SHARING_KINDS",
    "ModelSpec",
    "ParamStore",
    "PredictionTriple",
    "ParameterBudgetError",
    "build_model",
    "forward",
    "param_count",
    "encoder_param_count",
    "PARAM_BUDGET",
]

SHARING_KINDS = ("hard", "soft", "hierarchical")
TASKS = ("age", "gender", "ethnicity")
NUM_ETHNICITIES = 5

# Encoder (+ non-local block when enabled) must stay a ~0.3M-parameter model.
PARAM_BUDGET = (250_000, 350_000)


class ParameterBudgetError(ValueError):
    """Encoder parameter count falls outside the accepted budget."""


@dataclass(frozen=True)
class ModelSpec:
    """Declarative topology: sharing kind, encoder widths, head width."""

    sharing: str = "hierarchical"
    use_non_local: bool = True
    encoder_channels: tuple[int, int, int] = (48, 96, 192)
    head_hidden: int = 128
    input_hw: int = 48

    def __post_init__(self):
        if self.sharing not in SHARING_KINDS:
            raise ValueError(f"sharing must be one of {SHARING_KINDS}, got {self.sharing!r}")
        channels = tuple(int(c) for c in self.encoder_channels)
        object.__setattr__(self, "encoder_channels", channels)
        if len(channels) != 3 or any(c < 1 for c in channels):
            raise ValueError("encoder is exactly three conv layers with positive widths")
        if self.use_non_local and channels[2] % 2 != 0:
            raise ValueError("non-local attention requires an even final encoder width")
        if self.head_hidden < 1:
            raise ValueError("head_hidden must be >= 1")
        if self.input_hw != 48:
            raise ValueError(f"input resolution is fixed at 48, got {self.input_hw}")

    @property
    def feature_hw(self) -> int:
        # three stride-2 max pools: 48 -> 24 -> 12 -> 6
        return self.input_hw // 8

    @property
    def flat_features(self) -> int:
        return self.encoder_channels[2] * self.feature_hw ** 2

    def to_dict(self) -> dict:
        return {
            "sharing": self.sharing,
            "use_non_local": self.use_non_local,
            "encoder_channels": list(self.encoder_channels),
            "head_hidden": self.head_hidden,
            "input_hw": self.input_hw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            sharing=d["sharing"],
            use_non_local=bool(d["use_non_local"]),
            encoder_channels=tuple(d["encoder_channels"]),
            head_hidden=int(d["head_hidden"]),
            input_hw=int(d["input_hw"]),
        )


class ParamStore:
    """Named, ordered set of trainable tensors.

    Names are path-like (``encoder/conv1/weights``); insertion order is the
    deterministic iteration order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def subtree(self, prefix: str) -> dict[str, Tensor]:
        sep = prefix if prefix.endswith("/") or not prefix else prefix + "/"
        return {n: t for n, t in self._params.items() if n.startswith(sep)}

    def param_count(self, prefix: str = "") -> int:
        if not prefix:
            return sum(t.size for t in self._params.values())
        sub = self.subtree(prefix)
        if not sub:
            raise KeyError(f"unknown parameter prefix {prefix!r}")
        return sum(t.size for t in sub.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out


def param_count(params: ParamStore, subtree: str = "") -> int:
    """Total element count of all parameters under a path prefix."""
    return params.param_count(subtree)


@dataclass
class PredictionTriple:
    """Per-sample model outputs: linear age (years), P(female), and the
    5-way ethnicity distribution (rows sum to 1)."""

    age: Tensor               # (N,)
    gender_prob: Tensor       # (N,)
    ethnicity_probs: Tensor   # (N, 5)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _add_conv(store, rng, prefix, in_ch, out_ch):
    store.add(f"{prefix}/weights", _uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9))
    store.add(f"{prefix}/bias", np.zeros(out_ch, dtype=np.float32))


def _add_dense(store, rng, prefix, in_dim, out_dim, zero=False):
    if zero:
        store.add(f"{prefix}/weights", np.zeros((out_dim, in_dim), dtype=np.float32))
    else:
        store.add(f"{prefix}/weights", _uniform(rng, (out_dim, in_dim), in_dim))
    store.add(f"{prefix}/bias", np.zeros(out_dim, dtype=np.float32))


def _add_encoder(store, rng, prefix, channels):
    c1, c2, c3 = channels
    _add_conv(store, rng, f"{prefix}/conv1", 3, c1)
    _add_conv(store, rng, f"{prefix}/conv2", c1, c2)
    _add_conv(store, rng, f"{prefix}/conv3", c2, c3)


def _add_non_local(store, rng, prefix, in_ch):
    embed = in_ch // 2
    for name in ("theta", "phi", "g"):
        store.add(f"{prefix}/{name}", _uniform(rng, (embed, in_ch), in_ch))
    # zero output projection: the block starts as the identity
    store.add(f"{prefix}/w_z", np.zeros((in_ch, embed), dtype=np.float32))


def _add_two_dense_head(store, rng, prefix, in_dim, hidden, out_dim):
    _add_dense(store, rng, f"{prefix}/dense1", in_dim, hidden)
    # zero final layer: fresh heads emit zero logits (gender 0.5, uniform ethnicity)
    _add_dense(store, rng, f"{prefix}/dense2", hidden, out_dim, zero=True)


def build_model(spec: ModelSpec, seed: int, enforce_budget: bool = True) -> ParamStore:
    """Create all trainable parameters for ``spec``, deterministically from
    ``seed``.

    Weights use fan-in-scaled uniform init; biases, non-local output
    projections, and every head's final dense layer start at zero. Raises
    :class:`ParameterBudgetError` when the encoder (+ non-local block, when
    enabled) leaves the accepted parameter budget.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ch = spec.encoder_channels
    flat = spec.flat_features
    hidden = spec.head_hidden

    if spec.sharing == "soft":
        for task in TASKS:
            _add_encoder(store, rng, f"encoder_{task}", ch)
            if spec.use_non_local:
                _add_non_local(store, rng, f"non_local_{task}", ch[2])
    else:
        _add_encoder(store, rng, "encoder", ch)
        if spec.use_non_local:
            _add_non_local(store, rng, "non_local", ch[2])

    if spec.sharing == "hierarchical":
        _add_two_dense_head(store, rng, "age", flat, hidden, 1)
        _add_conv(store, rng, "gender/conv", ch[2], ch[2])
        _add_two_dense_head(store, rng, "gender", flat, hidden, 1)
        _add_conv(store, rng, "ethnicity/conv", ch[2], ch[2])
        _add_two_dense_head(store, rng, "ethnicity", flat, hidden, NUM_ETHNICITIES)
    elif spec.sharing == "hard":
        _add_two_dense_head(store, rng, "age", flat, hidden, 1)
        _add_two_dense_head(store, rng, "gender", flat, hidden, 1)
        _add_two_dense_head(store, rng, "ethnicity", flat, hidden, NUM_ETHNICITIES)
    else:  # soft
        _add_two_dense_head(store, rng, "age", flat, hidden, 1)
        _add_conv(store, rng, "gender/conv", ch[2], ch[2])
        _add_two_dense_head(store, rng, "gender", flat, hidden, 1)
        _add_conv(store, rng, "ethnicity/conv", ch[2], ch[2])
        _add_two_dense_head(store, rng, "ethnicity", flat, hidden, NUM_ETHNICITIES)

    if enforce_budget:
        count = encoder_param_count(store, spec)
        lo, hi = PARAM_BUDGET
        # The lower bound pins the flagship encoder+attention configuration;
        # without the block only the lightweight upper bound applies.
        if count > hi or (spec.use_non_local and count < lo):
            raise ParameterBudgetError(
                f"encoder parameter count {count} outside budget [{lo}, {hi}]"
            )
    return store


def encoder_param_count(params: ParamStore, spec: ModelSpec) -> int:
    """Parameters of one encoder pipeline: the three convs plus the
    non-local block when enabled (one per-task copy for soft sharing)."""
    if spec.sharing == "soft":
        count = params.param_count("encoder_age")
        if spec.use_non_local:
            count += params.param_count("non_local_age")
    else:
        count = params.param_count("encoder")
        if spec.use_non_local:
            count += params.param_count("non_local")
    return count


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _conv_params(store, prefix, stride=1, padding=1) -> Conv2dParams:
    return Conv2dParams(store[f"{prefix}/weights"], store[f"{prefix}/bias"], stride, padding)


def _dense_params(store, prefix) -> DenseParams:
    return DenseParams(store[f"{prefix}/weights"], store[f"{prefix}/bias"])


def _non_local_params(store, prefix) -> NonLocalParams:
    return NonLocalParams(store[f"{prefix}/theta"], store[f"{prefix}/phi"],
                          store[f"{prefix}/g"], store[f"{prefix}/w_z"])


def _run_encoder(params, spec, x, prefix, nl_prefix):
    h = x
    for i in (1, 2, 3):
        h = maxpool2d(relu(conv2d(h, _conv_params(params, f"{prefix}/conv{i}"))), 2)
    if spec.use_non_local:
        h = non_local(h, _non_local_params(params, nl_prefix))
    return h


def _two_dense(params, prefix, flat):
    hidden = relu(dense(flat, _dense_params(params, f"{prefix}/dense1")))
    return dense(hidden, _dense_params(params, f"{prefix}/dense2"))


def forward(
    params: ParamStore,
    spec: ModelSpec,
    batch: Tensor | np.ndarray,
    capture: dict | None = None,
) -> PredictionTriple:
    """Run the multi-head forward pass on a normalized N x 3 x 48 x 48 batch.

    When ``capture`` is a dict it receives the post-encoder feature tensor
    (``features``; main-task pipeline for soft sharing) and the raw head
    outputs (``age_out``, ``gender_logit``, ``ethnicity_logits``) for
    explainability tooling.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    hw = spec.input_hw
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != hw or x.shape[3] != hw:
        raise ShapeError(f"expected batch of shape (N, 3, {hw}, {hw}), got {x.shape}")
    lo, hi = float(x.data.min(initial=0.0)), float(x.data.max(initial=0.0))
    if lo < 0.0 or hi > 1.0 + 1e-6:
        raise ValueError(f"batch must be normalized to [0, 1], got range [{lo}, {hi}]")
    n = x.shape[0]

    if spec.sharing == "soft":
        feats = {
            task: _run_encoder(params, spec, x, f"encoder_{task}", f"non_local_{task}")
            for task in TASKS
        }
        age_out = _two_dense(params, "age", reshape(feats["age"], n, spec.flat_features))
        gconv = relu(conv2d(feats["gender"], _conv_params(params, "gender/conv")))
        gender_logit = _two_dense(params, "gender", reshape(gconv, n, spec.flat_features))
        econv = relu(conv2d(feats["ethnicity"], _conv_params(params, "ethnicity/conv")))
        eth_logits = _two_dense(params, "ethnicity", reshape(econv, n, spec.flat_features))
        features = feats["ethnicity"]
    else:
        features = _run_encoder(params, spec, x, "encoder", "non_local")
        flat = reshape(features, n, spec.flat_features)
        age_out = _two_dense(params, "age", flat)
        if spec.sharing == "hierarchical":
            gconv = relu(conv2d(features, _conv_params(params, "gender/conv")))
            gender_logit = _two_dense(params, "gender", reshape(gconv, n, spec.flat_features))
            # main task consumes the second auxiliary task's conv features
            econv = relu(conv2d(gconv, _conv_params(params, "ethnicity/conv")))
            eth_logits = _two_dense(params, "ethnicity", reshape(econv, n, spec.flat_features))
        else:  # hard
            gender_logit = _two_dense(params, "gender", flat)
            eth_logits = _two_dense(params, "ethnicity", flat)

    age = reshape(age_out, n)
    gender_logit = reshape(gender_logit, n)
    if capture is not None:
        capture["features"] = features
        capture["age_out"] = age
        capture["gender_logit"] = gender_logit
        capture["ethnicity_logits"] = eth_logits
    return PredictionTriple(
        age=age,
        gender_prob=sigmoid(gender_logit),
        ethnicity_probs=softmax(eth_logits, axis=-1),
    )
