"""Network composition: feature extractor + classifier stacks.

A ``Network`` is two ordered layer lists with disjoint parameter sets:
the feature extractor produces latent features, the classifier maps them
to softmax scores. The split is what allows the alternating updates in
the trainer to scope each step to one side.

Checkpoints are JSON with hex-float encoded arrays, so a save/load round
trip is bit-exact for doubles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .layers import FLOAT, BatchNorm, Dense, Dropout, Layer, Parameter, ReLU, Softmax

CHECKPOINT_FORMAT = "muda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkSpec:
    """Declarative layer composition.

    Layer descriptors are dicts with a ``kind`` key:
      {"kind": "dense", "out": int}      (optional "bias": bool, default true)
      {"kind": "relu"}
      {"kind": "batchnorm"}              (optional momentum/eps)
      {"kind": "dropout", "rate": float}
      {"kind": "softmax"}
    Dense input widths are chained automatically from ``input_dim``.
    """

    input_dim: int
    num_classes: int
    feature_layers: list[dict] = field(default_factory=list)
    classifier_layers: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.classifier_layers:
            raise ConfigError("classifier_layers must not be empty")
        if self.classifier_layers[-1].get("kind") != "softmax":
            raise ConfigError("classifier_layers must end with a softmax layer")
        dim = self.input_dim
        for desc in self.feature_layers + self.classifier_layers:
            dim = _chain_dim(desc, dim)
        if dim != self.num_classes:
            raise ConfigError(
                f"layer stack ends with width {dim}, expected num_classes={self.num_classes}"
            )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "feature_layers": self.feature_layers,
            "classifier_layers": self.classifier_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=d["input_dim"],
            num_classes=d["num_classes"],
            feature_layers=list(d["feature_layers"]),
            classifier_layers=list(d["classifier_layers"]),
        )


def _chain_dim(desc: dict, dim: int) -> int:
    kind = desc.get("kind")
    if kind == "dense":
        out = desc.get("out")
        if not isinstance(out, int) or out < 1:
            raise ConfigError(f"dense descriptor needs a positive 'out', got {desc}")
        return out
    if kind in ("relu", "batchnorm", "softmax"):
        return dim
    if kind == "dropout":
        rate = desc.get("rate", 0.0)
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        return dim
    raise ConfigError(f"unknown layer kind {kind!r}")


class Network:
    """A feature extractor F and classifier C over shared conventions."""

    def __init__(self, feature: list[Layer], classifier: list[Layer], spec: NetworkSpec):
        self.feature = feature
        self.classifier = classifier
        self.spec = spec
        ids_f = {id(p) for p in self._scope_params(feature)}
        ids_c = {id(p) for p in self._scope_params(classifier)}
        if ids_f & ids_c:
            raise ConfigError("feature and classifier parameter sets must be disjoint")

    @staticmethod
    def _scope_params(layers: list[Layer]) -> list[Parameter]:
        return [p for layer in layers for p in layer.params()]

    def layers(self) -> list[Layer]:
        return self.feature + self.classifier

    def parameters(self, scope: str = "all") -> list[Parameter]:
        if scope == "F":
            return self._scope_params(self.feature)
        if scope == "C":
            return self._scope_params(self.classifier)
        if scope == "all":
            return self._scope_params(self.feature) + self._scope_params(self.classifier)
        raise ConfigError(f"unknown parameter scope {scope!r}")

    def dropout_layers(self, scope: str = "all") -> list[Dropout]:
        if scope == "F":
            layers = self.feature
        elif scope == "C":
            layers = self.classifier
        else:
            layers = self.layers()
        return [l for l in layers if isinstance(l, Dropout)]

    def set_dropout_rates(self, rate_f: float | None, rate_c: float | None) -> None:
        """Override dropout rates per scope; None keeps configured rates."""
        if rate_f is not None:
            for l in self.dropout_layers("F"):
                l.set_rate(rate_f)
        if rate_c is not None:
            for l in self.dropout_layers("C"):
                l.set_rate(rate_c)

    def forward(
        self,
        x: np.ndarray,
        *,
        mode: str = "eval",
        dropout_active: bool = False,
        rng=None,
        update_stats: bool | None = None,
        bn_batch_stats: bool | None = None,
    ) -> np.ndarray:
        """Run the full stack, returning softmax scores.

        ``mode`` "train" stores backward caches; "eval" stores nothing
        (a later backward is a state error). Batch-norm layers normalize
        with batch statistics when ``bn_batch_stats`` (default: true in
        train mode, necessarily false in eval mode) and update their
        running statistics when ``update_stats`` (default: true in train
        mode). Active dropout layers draw fresh masks from ``rng``.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=FLOAT)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"input shape {x.shape} incompatible with input_dim {self.spec.input_dim}"
            )
        training = mode == "train"
        if update_stats is None:
            update_stats = training
        if bn_batch_stats is None:
            bn_batch_stats = training
        out = x
        for layer in self.layers():
            layer.training = training
            if isinstance(layer, BatchNorm):
                layer.update_running = update_stats
                layer.use_batch_stats = bn_batch_stats
            if isinstance(layer, Dropout):
                layer.active = dropout_active
                out = layer.forward(out, rng)
            else:
                out = layer.forward(out)
        return out

    def backward(self, grad: np.ndarray, *, fused_softmax: bool = False, scope: str = "all") -> np.ndarray:
        """Propagate a gradient from the output back to the input.

        With ``fused_softmax`` the gradient is taken with respect to the
        pre-softmax logits (the softmax layer is skipped); otherwise it
        is with respect to the softmax scores. ``scope`` "C" stops after
        the classifier layers, returning the gradient at the feature
        boundary.
        """
        stack = self.layers()
        if fused_softmax:
            if not isinstance(stack[-1], Softmax):
                raise ConfigError("fused_softmax backward requires a trailing softmax layer")
            stack = stack[:-1]
        if scope == "C":
            stack = stack[len(self.feature):]
        for layer in reversed(stack):
            grad = layer.backward(grad)
        return grad

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Argmax class labels; ties resolve to the lowest class index."""
        scores = self.forward(x, mode="eval", dropout_active=False)
        return np.argmax(scores, axis=1)

    def take_caches(self) -> list:
        return [layer.take_cache() for layer in self.layers()]

    def restore_caches(self, caches: list) -> None:
        for layer, cache in zip(self.layers(), caches):
            layer.restore_cache(cache)

    def clone_stateless(self) -> "Network":
        """Clone sharing parameters, for concurrent read-only passes."""
        return Network(
            [l.clone_stateless() for l in self.feature],
            [l.clone_stateless() for l in self.classifier],
            self.spec,
        )

    def batchnorm_layers(self) -> list[BatchNorm]:
        return [l for l in self.layers() if isinstance(l, BatchNorm)]


def _he_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Instantiate layers with seed-reproducible initialization.

    Hidden dense layers use He-uniform (they feed ReLUs); the final
    dense layer uses Xavier-uniform.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    dense_positions = [
        i for i, d in enumerate(spec.feature_layers + spec.classifier_layers)
        if d["kind"] == "dense"
    ]
    last_dense = dense_positions[-1] if dense_positions else -1

    def build_stack(descs: list[dict], dim: int, offset: int, prefix: str):
        layers: list[Layer] = []
        for j, desc in enumerate(descs):
            kind = desc["kind"]
            name = f"{prefix}{j}"
            if kind == "dense":
                out = desc["out"]
                init = _xavier_uniform if offset + j == last_dense else _he_uniform
                bias = np.zeros(out) if desc.get("bias", True) else None
                layers.append(
                    Dense(dim, out, weight=init(rng, dim, out), bias=bias, name=name)
                )
                dim = out
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "batchnorm":
                layers.append(
                    BatchNorm(
                        dim,
                        momentum=desc.get("momentum", 0.9),
                        eps=desc.get("eps", 1e-5),
                        name=name,
                    )
                )
            elif kind == "dropout":
                layers.append(Dropout(desc["rate"]))
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        return layers, dim

    f_layers, dim = build_stack(spec.feature_layers, spec.input_dim, 0, "F.")
    c_layers, _ = build_stack(
        spec.classifier_layers, dim, len(spec.feature_layers), "C."
    )
    return Network(f_layers, c_layers, spec)


def toy_network_spec() -> NetworkSpec:
    """The 2-D binary benchmark network: five dense layers, width 15.

    Batch norm follows each of the first three dense layers, dropout at
    rate 0.5 follows the fourth, and the final dense + softmax forms the
    classifier. The feature/classifier boundary sits after the dropout
    layer so the stochastic sampling noise lands on the features.
    """
    return NetworkSpec(
        input_dim=2,
        num_classes=2,
        feature_layers=[
            {"kind": "dense", "out": 15, "bias": False},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "dense", "out": 15, "bias": False},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "dense", "out": 15, "bias": False},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "dense", "out": 15},
            {"kind": "relu"},
            {"kind": "dropout", "rate": 0.5},
        ],
        classifier_layers=[
            {"kind": "dense", "out": 2},
            {"kind": "softmax"},
        ],
    )


def build_toy_network(seed: int = 0) -> Network:
    return build_network(toy_network_spec(), seed=seed)


def _array_to_hex(arr: np.ndarray) -> list:
    return [float(v).hex() for v in arr.reshape(-1)]


def _array_from_hex(data: list, shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in data], dtype=FLOAT).reshape(shape)


def _encode_state(value):
    """Recursively hex-encode numpy arrays inside an optimizer state."""
    if isinstance(value, np.ndarray):
        return {"__array__": True, "shape": list(value.shape), "data": _array_to_hex(value)}
    if isinstance(value, dict):
        return {k: _encode_state(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_encode_state(v) for v in value]
    return value


def _decode_state(value):
    if isinstance(value, dict):
        if value.get("__array__"):
            return _array_from_hex(value["data"], tuple(value["shape"]))
        return {k: _decode_state(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode_state(v) for v in value]
    return value


def save_checkpoint(net: Network, path, *, optimizer_states: dict | None = None) -> None:
    """Write a bit-exact JSON checkpoint (hex-float array encoding)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "parameters": {
            p.name: {"shape": list(p.value.shape), "data": _array_to_hex(p.value)}
            for p in net.parameters("all")
        },
        "batchnorm": [
            {
                "running_mean": _array_to_hex(bn.running_mean),
                "running_var": _array_to_hex(bn.running_var),
            }
            for bn in net.batchnorm_layers()
        ],
    }
    if optimizer_states is not None:
        doc["optimizers"] = _encode_state(optimizer_states)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[Network, dict | None]:
    """Rebuild a network from a checkpoint; returns (net, optimizer_states)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"not a network checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('version')}")
    net = build_network(NetworkSpec.from_dict(doc["spec"]), seed=0)
    params = {p.name: p for p in net.parameters("all")}
    stored = doc["parameters"]
    if set(params) != set(stored):
        raise ValidationError("checkpoint parameter names do not match the spec")
    for name, entry in stored.items():
        params[name].value[...] = _array_from_hex(entry["data"], tuple(entry["shape"]))
    for bn, entry in zip(net.batchnorm_layers(), doc.get("batchnorm", [])):
        bn.running_mean = _array_from_hex(entry["running_mean"], bn.running_mean.shape)
        bn.running_var = _array_from_hex(entry["running_var"], bn.running_var.shape)
    optimizers = doc.get("optimizers")
    return net, _decode_state(optimizers) if optimizers is not None else None
