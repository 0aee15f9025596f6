"""App-selection network: featurization, attention scoring, uncertainty gating, metrics.

Each request carries 2..8 candidate apps, each described by a 16-wide feature
vector. The network projects candidates to ``d_model``, lets them attend to
each other, and emits a sigmoid score per candidate plus a pooled confidence.
Actions follow from two thresholds: low confidence asks the user to clarify,
a small top-two score margin asks them to pick from a ranked list.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from appsel_pfl import kernels
from appsel_pfl.kernels.layout import TOP_LAYER, param_shapes
from appsel_pfl.nn import ModelParams, Tape, Tensor
from appsel_pfl.nn import tape as T

N_FEATURES = 16
D_MODEL = 32
N_HEADS = 2
N_MAX = 8
CONFIDENCE_WEIGHT = 0.1
FEATURE_VERSION = 1

FEATURE_NAMES = ("recency", "frequency", "affinity", "popularity") + tuple(
    f"reserved{i}" for i in range(12))

FREEZE_POLICIES = ("none", "top_layer_only", "all_but_input")


class IneligibleRecordError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class CandidateCountError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateFeatures:
    app_id: str
    values: np.ndarray


@dataclass(frozen=True)
class PredictionOutput:
    scores: np.ndarray
    epistemic_confidence: float
    aleatoric_margin: float


@dataclass(frozen=True)
class Thresholds:
    tau_epistemic: float = 0.5
    tau_aleatoric: float = 0.01

    def __post_init__(self):
        for name in ("tau_epistemic", "tau_aleatoric"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class DirectExecute:
    index: int


@dataclass(frozen=True)
class Disambiguate:
    ranking: tuple[int, ...]


@dataclass(frozen=True)
class Clarify:
    pass


ActionDecision = DirectExecute | Disambiguate | Clarify


# -- parameters -------------------------------------------------------------

def init_params(seed: int, n_features: int = N_FEATURES, d_model: int = D_MODEL,
                n_heads: int = N_HEADS, gain: float = 1.0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(n_features, d_model, n_heads):
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) > 1 else 1
        limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(tensors)


def zero_params(n_features: int = N_FEATURES, d_model: int = D_MODEL,
                n_heads: int = N_HEADS) -> ModelParams:
    return ModelParams({n: np.zeros(s) for n, s in param_shapes(n_features, d_model, n_heads)})


def model_dims(params: ModelParams) -> tuple[int, int, int]:
    n_features, d_model = params.layout["input.weight"][1]
    n_heads = sum(1 for n in params.names if n.endswith(".query"))
    return n_features, d_model, n_heads


def frozen_names(params: ModelParams, policy: str) -> frozenset[str]:
    if policy == "none":
        return frozenset()
    if policy == "top_layer_only":
        return frozenset(n for n in params.names if n not in TOP_LAYER)
    if policy == "all_but_input":
        return frozenset(("input.weight", "input.bias"))
    raise ValueError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")


def apply_freeze(params: ModelParams, policy: str) -> ModelParams:
    return params.with_frozen(frozen_names(params, policy))


# -- featurization ----------------------------------------------------------

_RAW_FIELDS = ("app_id", "uses", "last_used", "affinity", "popularity")


def prepare_features(record: Mapping) -> list[CandidateFeatures]:
    """Turn a raw on-device record into one feature vector per candidate.

    ``record`` holds ``history_length`` and a ``candidates`` list of mappings
    with ``app_id``, ``uses`` (times chosen in the history window),
    ``last_used`` (steps since last use, or None), ``affinity`` and
    ``popularity``. Optional ``signals`` fill the reserved slots.
    """
    try:
        cands = record["candidates"]
        history = int(record["history_length"])
    except KeyError as exc:
        raise SchemaError(f"record is missing field {exc.args[0]!r}") from None
    if len(cands) < 2:
        raise IneligibleRecordError(f"record has {len(cands)} candidate(s); need at least 2")
    if len(cands) > N_MAX:
        raise IneligibleRecordError(f"record has {len(cands)} candidates; at most {N_MAX}")
    if history < 1:
        raise SchemaError("history_length must be positive")

    out = []
    for i, c in enumerate(cands):
        missing = [f for f in _RAW_FIELDS if f not in c]
        if missing:
            raise SchemaError(f"candidate {i} is missing {missing}")
        v = np.zeros(N_FEATURES)
        last = c["last_used"]
        v[0] = 0.0 if last is None else 1.0 / (1.0 + float(last))
        v[1] = float(c["uses"]) / history
        v[2] = float(c["affinity"])
        v[3] = float(c["popularity"])
        signals = c.get("signals", ())
        v[4:4 + len(signals)] = signals
        v = np.clip(v, 0.0, 1.0)
        if not np.all(np.isfinite(v)):
            raise SchemaError(f"candidate {i} has non-finite features")
        out.append(CandidateFeatures(str(c["app_id"]), v))
    return out


def feature_matrix(features: Sequence[CandidateFeatures] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = np.asarray(features, dtype=np.float64)
    else:
        X = np.stack([f.values for f in features]).astype(np.float64)
    if X.ndim != 2 or not 2 <= X.shape[0] <= N_MAX:
        raise CandidateCountError(f"need 2..{N_MAX} candidates, got {X.shape[0] if X.ndim else 0}")
    return X


# -- forward on the tape ----------------------------------------------------

def _graph(p: Mapping[str, Tensor], X: np.ndarray, n_heads: int):
    n = X.shape[0]
    d_model = p["input.bias"].shape[0]
    dh = d_model // n_heads
    h0 = T.relu(T.add_bias(T.matmul(X, p["input.weight"]), p["input.bias"]))
    heads = []
    for h in range(n_heads):
        q = T.matmul(h0, p[f"attn.head{h}.query"])
        k = T.matmul(h0, p[f"attn.head{h}.key"])
        v = T.matmul(h0, p[f"attn.head{h}.value"])
        att = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh)))
        heads.append(T.matmul(att, v))
    mixed = T.add_bias(T.matmul(T.concat(heads, axis=1), p["attn.out.weight"]),
                       p["attn.out.bias"])
    h1 = T.add(h0, mixed)
    logits = T.add_bias(T.matmul(h1, T.reshape(p["score.weight"], (d_model, 1))),
                        p["score.bias"])
    scores = T.sigmoid(logits)
    pooled = T.matmul(np.full((1, n), 1.0 / n), h1)
    conf = T.sigmoid(T.add_bias(
        T.matmul(pooled, T.reshape(p["epistemic.weight"], (d_model, 1))),
        p["epistemic.bias"]))
    return scores, conf


def _margin(scores: np.ndarray) -> float:
    top = np.sort(scores)[::-1]
    return float(top[0] - top[1])


def forward(params: ModelParams, features) -> PredictionOutput:
    X = feature_matrix(features)
    _, _, n_heads = model_dims(params)
    consts = {name: Tensor(params[name]) for name in params.names}
    scores, conf = _graph(consts, X, n_heads)
    s = scores.data[:, 0].copy()
    return PredictionOutput(s, float(conf.data[0, 0]), _margin(s))


def loss(params: ModelParams, batch, confidence_weight: float = CONFIDENCE_WEIGHT,
         tape: Tape | None = None):
    """Mean over records of one-hot score MSE plus the confidence term.

    ``batch`` is a sequence of (features, label index). With ``tape`` given,
    parameters are watched on it and the returned scalar can be differentiated.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, _, n_heads = model_dims(params)
    if tape is None:
        p = {name: Tensor(params[name]) for name in params.names}
    else:
        p = {name: tape.watch(params[name], name) for name in params.names}
    total = None
    for features, label in batch:
        X = feature_matrix(features)
        if not 0 <= label < X.shape[0]:
            raise IndexError(f"label {label} out of range for {X.shape[0]} candidates")
        scores, conf = _graph(p, X, n_heads)
        target = np.zeros((X.shape[0], 1))
        target[label, 0] = 1.0
        term = T.mse_loss(scores, target)
        if confidence_weight:
            term = T.add(term, T.scale(T.mse_loss(conf, np.ones((1, 1))), confidence_weight))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(batch))


def loss_and_grads(params: ModelParams, batch, confidence_weight: float = CONFIDENCE_WEIGHT):
    tape = Tape()
    out = loss(params, batch, confidence_weight, tape=tape)
    return float(out.data), tape.backward(out)


# -- actions and metrics ----------------------------------------------------

def select_action(output: PredictionOutput, thresholds: Thresholds) -> ActionDecision:
    if output.epistemic_confidence < thresholds.tau_epistemic:
        return Clarify()
    if output.aleatoric_margin < thresholds.tau_aleatoric:
        ranking = np.argsort(-np.asarray(output.scores), kind="stable")
        return Disambiguate(tuple(int(i) for i in ranking))
    return DirectExecute(int(np.argmax(output.scores)))


@dataclass
class Batch:
    """Padded feature tensor for many records: X (R, N, F), ncand (R,), labels (R,)."""
    X: np.ndarray
    ncand: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> Batch:
        return Batch(self.X[idx], self.ncand[idx], self.labels[idx])

    @classmethod
    def from_pairs(cls, pairs, n_features: int = N_FEATURES) -> Batch:
        mats = [feature_matrix(f) for f, _ in pairs]
        X = np.zeros((len(mats), N_MAX, n_features))
        for i, m in enumerate(mats):
            X[i, :m.shape[0]] = m
        ncand = np.array([m.shape[0] for m in mats], dtype=np.int32)
        labels = np.array([lab for _, lab in pairs], dtype=np.int64)
        return cls(X, ncand, labels)


def predict_batch(params: ModelParams, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Scores with padded slots set to -inf, and confidences."""
    F, D, H = model_dims(params)
    scores, conf = kernels.predict(params.flat, batch.X, batch.ncand, F, D, H)
    pad = np.arange(scores.shape[1])[None, :] >= batch.ncand[:, None]
    return np.where(pad, -np.inf, scores), conf


def batch_loss_grad(params: ModelParams, batch: Batch,
                    confidence_weight: float = CONFIDENCE_WEIGHT) -> tuple[float, np.ndarray]:
    F, D, H = model_dims(params)
    return kernels.loss_grad(params.flat, batch.X, batch.ncand, batch.labels, F, D, H,
                             confidence_weight)


def _decide(scores: np.ndarray, conf: np.ndarray, thresholds: Thresholds):
    """Vectorized select_action: codes 0 direct, 1 disambiguate, 2 clarify."""
    top2 = -np.sort(-scores, axis=1)[:, :2]
    margin = top2[:, 0] - top2[:, 1]
    code = np.where(conf < thresholds.tau_epistemic, 2,
                    np.where(margin < thresholds.tau_aleatoric, 1, 0))
    return code, np.argmax(scores, axis=1)


def _require(batch: Batch):
    if len(batch) == 0:
        raise ValueError("dataset is empty")


def offline_accuracy(params: ModelParams, batch: Batch) -> float:
    _require(batch)
    scores, _ = predict_batch(params, batch)
    return float(np.mean(np.argmax(scores, axis=1) == batch.labels))


def online_metrics(params: ModelParams, thresholds: Thresholds,
                   batch: Batch) -> tuple[float, float]:
    """(CDER, disambiguation rate), both over all records."""
    _require(batch)
    scores, conf = predict_batch(params, batch)
    return metrics_from_outputs(scores, conf, batch.labels, thresholds)[1:]


def metrics_from_outputs(scores, conf, labels, thresholds: Thresholds):
    """(accuracy, CDER, disambiguation rate) from precomputed outputs."""
    code, top = _decide(scores, conf, thresholds)
    correct = top == labels
    acc = float(np.mean(correct))
    cder = float(np.mean((code == 0) & correct))
    disamb = float(np.mean(code == 1))
    return acc, cder, disamb


def match_disambiguation_rate(params: ModelParams, batch: Batch, target_rate: float,
                              tau_epistemic: float = Thresholds().tau_epistemic) -> Thresholds:
    """Thresholds whose disambiguation rate on ``batch`` is as close to ``target_rate`` as
    the data allow, keeping ``tau_epistemic`` fixed.

    Used to compare two models at the same operating point.
    """
    _require(batch)
    if not 0.0 <= target_rate <= 1.0:
        raise ValueError("target_rate must lie in [0, 1]")
    scores, conf = predict_batch(params, batch)
    top2 = -np.sort(-scores, axis=1)[:, :2]
    margins = np.sort((top2[:, 0] - top2[:, 1])[conf >= tau_epistemic])
    k = min(int(round(target_rate * len(batch))), margins.size)
    # margin < tau counts exactly the k smallest margins when they are distinct
    tau = 1.0 if k == margins.size else float(margins[k])
    return Thresholds(tau_epistemic, min(1.0, tau))


def evaluate(params: ModelParams, batch: Batch, thresholds: Thresholds,
             confidence_weight: float = CONFIDENCE_WEIGHT) -> dict[str, float]:
    _require(batch)
    scores, conf = predict_batch(params, batch)
    acc, cder, disamb = metrics_from_outputs(scores, conf, batch.labels, thresholds)
    s = np.where(np.isfinite(scores), scores, 0.0)
    onehot = np.zeros_like(s)
    onehot[np.arange(len(batch)), batch.labels] = 1.0
    pad = ~np.isfinite(scores)
    sq = np.where(pad, 0.0, (s - onehot) ** 2).sum(axis=1) / batch.ncand
    val_loss = float(np.mean(sq + confidence_weight * (conf - 1.0) ** 2))
    return {"loss": val_loss, "accuracy": acc, "cder": cder, "disambiguation_rate": disamb}
