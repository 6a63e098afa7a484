"""Hybrid probabilistic model: linear main-effects head plus a fully
connected MLP whose nodes carry learnable concrete-dropout gates.

Every node (the input features included) owns one dropout probability,
parameterized as a clamped sigmoid of a logit.  A MaskSample fixes one
realization of all gates and therefore one weight draw from the variational
posterior: relaxed (concrete) gates are the training-time device, hard
Bernoulli gates are used for prediction and detection.  The final output
node is never gated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Activation, RngStream, Standardizer, act_eval

P_CLAMP = 1e-6  # keep probabilities inside [P_CLAMP, 1 - P_CLAMP]


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise ValueError("layer widths must be >= 1")
        Activation(self.activation)  # validates the kind


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def clamp_probability(p):
    return np.clip(p, P_CLAMP, 1.0 - P_CLAMP)


@dataclass
class ConcreteDropoutMLP:
    """MLP with variational weight means and per-node dropout logits.

    `gate_logits[l]` holds one logit per input node of layer l (so l = 0
    covers the raw features), parameterizing that node's drop probability.
    Gates multiply node outputs; the final output node is never gated.
    """

    layers: list  # list[LayerSpec]
    weights: list  # weights[l]: (in_width, out_width) of layer l
    biases: list
    gate_logits: list  # gate_logits[l]: (layers[l].in_width,)
    temperature: float = 0.1
    lengthscale: float = 1e-4

    def __post_init__(self):
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer must use the identity activation")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_width != self.layers[i - 1].out_width:
                raise ValueError("layer widths do not chain")
        if self.layers[-1].out_width != 1:
            raise ValueError("regression output must have width 1")
        for l, spec in enumerate(self.layers):
            if self.weights[l].shape != (spec.in_width, spec.out_width):
                raise ValueError(f"weight shape mismatch at layer {l}")
            if self.biases[l].shape != (spec.out_width,):
                raise ValueError(f"bias shape mismatch at layer {l}")
            if self.gate_logits[l].shape != (spec.in_width,):
                raise ValueError(f"gate logit shape mismatch at layer {l}")
        if not (0.0 < self.temperature <= 1.0):
            raise ValueError("temperature must lie in (0, 1]")
        if self.lengthscale <= 0.0:
            raise ValueError("prior length-scale must be positive")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    def keep_probabilities(self) -> list:
        """Clamped keep probability 1 - p per node, one array per gated layer."""
        return [1.0 - clamp_probability(_sigmoid(lg)) for lg in self.gate_logits]

    def drop_probabilities(self) -> list:
        return [clamp_probability(_sigmoid(lg)) for lg in self.gate_logits]

    def activations(self) -> list:
        return [Activation(spec.activation) for spec in self.layers]

    def copy(self) -> "ConcreteDropoutMLP":
        return ConcreteDropoutMLP(
            layers=list(self.layers),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            gate_logits=[g.copy() for g in self.gate_logits],
            temperature=self.temperature,
            lengthscale=self.lengthscale)

    @classmethod
    def create(cls, in_width: int, hidden, rng: RngStream, activation: str = "tanh",
               temperature: float = 0.1, lengthscale: float = 1e-4,
               init_drop_probability: float = 0.1,
               input_drop_probability: float | None = None) -> "ConcreteDropoutMLP":
        """Fresh net with N(0, 1/fan_in) weights and uniform initial drop rate.

        The input features' gates can start at a different (typically much
        lower) drop rate than the hidden nodes: an input draw of zero wipes
        every interaction through that feature, so detection-time spread is
        dominated by the input rates.
        """
        widths = [in_width] + list(hidden) + [1]
        specs = []
        for i in range(len(widths) - 1):
            act = activation if i < len(widths) - 2 else "identity"
            specs.append(LayerSpec(widths[i], widths[i + 1], act))
        gen = rng.generator()
        weights, biases, logits = [], [], []
        if input_drop_probability is None:
            input_drop_probability = init_drop_probability
        for l, spec in enumerate(specs):
            scale = 1.0 / np.sqrt(spec.in_width)
            weights.append(gen.normal(0.0, scale, size=(spec.in_width, spec.out_width)))
            biases.append(np.zeros(spec.out_width))
            p0 = input_drop_probability if l == 0 else init_drop_probability
            logits.append(np.full(spec.in_width,
                                  float(_logit(clamp_probability(p0)))))
        return cls(layers=specs, weights=weights, biases=biases,
                   gate_logits=logits, temperature=temperature,
                   lengthscale=lengthscale)


@dataclass
class MaskSample:
    """One realized set of per-node gates: a single weight draw from the posterior.

    Relaxed masks keep the uniform noise that generated them so the gates can
    be re-derived as a differentiable function of the dropout logits.
    """

    gates: list  # gates[l]: (layers[l].in_width,) floats
    mode: str = "hard"  # "relaxed" | "hard"
    uniforms: list | None = None

    def __post_init__(self):
        if self.mode not in ("relaxed", "hard"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == "relaxed" and self.uniforms is None:
            raise ValueError("relaxed masks must carry their uniform draws")


def relaxed_gates(net: ConcreteDropoutMLP, uniforms: list) -> list:
    """Concrete relaxation z = sigmoid((logit(1-p) + logit(u)) / t) per node."""
    t = net.temperature
    out = []
    for p, u in zip(net.drop_probabilities(), uniforms):
        out.append(_sigmoid((_logit(1.0 - p) + _logit(u)) / t))
    return out


def sample_mask(net: ConcreteDropoutMLP, rng: RngStream, mode: str = "hard") -> MaskSample:
    """Draw one mask; `relaxed` for training gradients, `hard` for detection."""
    gen = rng.generator()
    # open-interval uniforms keep logits finite and relaxed gates strictly inside (0,1)
    uniforms = [np.clip(gen.uniform(size=spec.in_width), 1e-12, 1.0 - 1e-12)
                for spec in net.layers]
    if mode == "relaxed":
        return MaskSample(gates=relaxed_gates(net, uniforms), mode="relaxed",
                          uniforms=uniforms)
    if mode == "hard":
        gates = [(u > p).astype(float)
                 for p, u in zip(net.drop_probabilities(), uniforms)]
        return MaskSample(gates=gates, mode="hard")
    raise ValueError(f"unknown mask mode {mode!r}")


def mean_gates(net: ConcreteDropoutMLP) -> list:
    """Expected gate values (keep probabilities); deterministic stand-in mask."""
    return [kp.copy() for kp in net.keep_probabilities()]


def ones_gates(net: ConcreteDropoutMLP) -> list:
    return [np.ones(spec.in_width) for spec in net.layers]


def mlp_forward(net: ConcreteDropoutMLP, x: np.ndarray, gates: list) -> np.ndarray:
    """Masked interaction-head output for a batch, shape (N,)."""
    acts = net.activations()
    a = x * gates[0]
    for l in range(net.depth):
        s = a @ net.weights[l] + net.biases[l]
        h = act_eval(acts[l], s)[0]
        a = h * gates[l + 1] if l + 1 < net.depth else h
    return a[:, 0]


@dataclass
class HybridModel:
    """Prediction = beta . x + intercept + masked MLP output.

    The linear head carries the main effects and is never masked; the MLP is
    free to model whatever the linear head cannot, which after training is
    the interaction structure.  Standardizers are attached once the model is
    trained so effects can be reported on the raw data scale.
    """

    beta: np.ndarray
    intercept: float
    net: ConcreteDropoutMLP
    obs_logvar: float = 0.0
    x_standardizer: Standardizer | None = None
    y_standardizer: Standardizer | None = None
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (self.net.in_width,):
            raise ValueError("beta dimension must equal feature count")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.net.in_width)]

    @property
    def n_features(self) -> int:
        return self.net.in_width

    def copy(self) -> "HybridModel":
        return HybridModel(beta=self.beta.copy(), intercept=self.intercept,
                           net=self.net.copy(), obs_logvar=self.obs_logvar,
                           x_standardizer=self.x_standardizer,
                           y_standardizer=self.y_standardizer,
                           feature_names=list(self.feature_names))

    @classmethod
    def create(cls, n_features: int, hidden, rng: RngStream, activation: str = "tanh",
               temperature: float = 0.1, lengthscale: float = 1e-4,
               init_drop_probability: float = 0.1,
               input_drop_probability: float | None = None,
               feature_names=None) -> "HybridModel":
        net = ConcreteDropoutMLP.create(n_features, hidden, rng, activation,
                                        temperature, lengthscale,
                                        init_drop_probability,
                                        input_drop_probability)
        return cls(beta=np.zeros(n_features), intercept=0.0, net=net,
                   feature_names=list(feature_names) if feature_names else [])


def forward(model: HybridModel, x: np.ndarray, mask: MaskSample) -> float | np.ndarray:
    """Deterministic prediction at `x` under one fixed mask.

    Accepts a single point (1-D) or a batch (2-D); the main-effect head is
    applied to the unmasked input.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != model.n_features:
        raise ValueError(f"input has {x2.shape[1]} features, model expects "
                         f"{model.n_features}")
    for l, g in enumerate(mask.gates):
        if g.shape != (model.net.layers[l].in_width,):
            raise ValueError(f"mask shape mismatch at layer {l}")
    pred = x2 @ model.beta + model.intercept + mlp_forward(model.net, x2, mask.gates)
    return float(pred[0]) if single else pred


def bernoulli_entropy(p):
    p = np.asarray(p, dtype=float)
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))


def kl_regularizer(net: ConcreteDropoutMLP) -> float:
    """Variational KL of the gated weights against the Gaussian prior.

    Per gated node: lengthscale^2 * (1-p)/2 * ||outgoing weights||^2 minus the
    Bernoulli entropy of the gate.  The caller scales the total by 1/N when
    folding it into a per-example loss.
    """
    total = 0.0
    ls2 = net.lengthscale ** 2
    for l, p in enumerate(net.drop_probabilities()):
        row_sq = np.sum(net.weights[l] ** 2, axis=1)  # outgoing weights per node
        total += float(np.sum(0.5 * ls2 * (1.0 - p) * row_sq))
        total -= float(np.sum(bernoulli_entropy(p)))
    return total


def predictive_distribution(model: HybridModel, x: np.ndarray, n_samples: int,
                            rng: RngStream):
    """Monte Carlo predictive mean and variance over hard-mask draws.

    Variance is the between-sample spread (ddof=1) plus the observation
    noise; x may be a point or a batch.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    preds = np.empty((n_samples, x2.shape[0]))
    for k in range(n_samples):
        mask = sample_mask(model.net, rng.substream(k), mode="hard")
        preds[k] = forward(model, x2, mask)
    mean = preds.mean(axis=0)
    var = preds.var(axis=0, ddof=1) + float(np.exp(model.obs_logvar))
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


CHECKPOINT_FORMAT = "hessix-model/1"


def model_to_dict(model: HybridModel, config_digest: str = "", seed: int | None = None,
                  tool_version: str = "") -> dict:
    net = model.net
    return {
        "format": CHECKPOINT_FORMAT,
        "tool_version": tool_version,
        "config_digest": config_digest,
        "seed": seed,
        "layers": [{"in": s.in_width, "out": s.out_width, "activation": s.activation}
                   for s in net.layers],
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "gate_logits": [g.tolist() for g in net.gate_logits],
        "temperature": net.temperature,
        "lengthscale": net.lengthscale,
        "beta": model.beta.tolist(),
        "intercept": model.intercept,
        "obs_logvar": model.obs_logvar,
        "feature_names": list(model.feature_names),
        "standardizer": {
            "x": model.x_standardizer.to_dict() if model.x_standardizer else None,
            "y": model.y_standardizer.to_dict() if model.y_standardizer else None,
        },
    }


def model_from_dict(doc: dict) -> HybridModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}; "
                         f"expected {CHECKPOINT_FORMAT!r}")
    specs = [LayerSpec(d["in"], d["out"], d["activation"]) for d in doc["layers"]]
    net = ConcreteDropoutMLP(
        layers=specs,
        weights=[np.asarray(w, dtype=float) for w in doc["weights"]],
        biases=[np.asarray(b, dtype=float) for b in doc["biases"]],
        gate_logits=[np.asarray(g, dtype=float) for g in doc["gate_logits"]],
        temperature=float(doc["temperature"]),
        lengthscale=float(doc["lengthscale"]))
    std = doc.get("standardizer") or {}
    return HybridModel(
        beta=np.asarray(doc["beta"], dtype=float),
        intercept=float(doc["intercept"]),
        net=net,
        obs_logvar=float(doc["obs_logvar"]),
        x_standardizer=Standardizer.from_dict(std["x"]) if std.get("x") else None,
        y_standardizer=Standardizer.from_dict(std["y"]) if std.get("y") else None,
        feature_names=list(doc.get("feature_names", [])))


def save_checkpoint(model: HybridModel, path, config_digest: str = "",
                    seed: int | None = None, tool_version: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = model_to_dict(model, config_digest, seed, tool_version)
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> HybridModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(doc)
