"""Light and temperature discriminators: architectures, training, scoring.

Both networks are 2-class softmax classifiers; the probability of the
"match" class (index 1) is used as a likelihood score for a candidate
position.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .dataset import Dataset
from .errors import InputError, NumericalError
from .io_utils import atomic_write
from .nn import BatchNorm, Conv1D, Dense, Dropout, Flatten, MaxPool, NetworkSpec, ReLU, Softmax
from .reshape import N_SAMPLES, N_TEMP, NormalizedLightCurve, TempPairVector
from .synth import child_rng

log = logging.getLogger(__name__)

DROPOUT_P = 0.25
TEMP_SHIFT, TEMP_SCALE = 15.0, 10.0  # fixed affine input scaling for temperatures
SCORE_CHUNK = 2048


def light_spec(channels=(8, 16, 32), dense=(128, 32), kernel=5, stride=2,
               length=N_SAMPLES) -> NetworkSpec:
    layers = []
    for ch in channels:
        layers += [Conv1D(ch, kernel, stride), BatchNorm(), ReLU(), MaxPool(2)]
    layers += [Flatten(), Dense(dense[0]), Dropout(DROPOUT_P), ReLU(), Dense(dense[1]), ReLU(),
               Dense(2), Softmax()]
    return NetworkSpec((1, length), tuple(layers))


def temp_spec(dense=(64, 16)) -> NetworkSpec:
    return NetworkSpec((2 * N_TEMP,), (Dense(dense[0]), Dropout(DROPOUT_P), ReLU(),
                                       Dense(dense[1]), ReLU(), Dense(2), Softmax()))


LIGHT_SPEC = light_spec()
TEMP_SPEC = temp_spec()
_SPECS = {"light": LIGHT_SPEC, "temp": TEMP_SPEC}


def prepare_inputs(kind: str, X: np.ndarray, spec: NetworkSpec | None = None) -> np.ndarray:
    """Raw dataset rows -> network input batch."""
    X = np.asarray(X, dtype=np.float64)
    if kind == "light":
        return X.reshape(X.shape[0], 1, -1)
    if kind == "temp":
        return (X - TEMP_SHIFT) / TEMP_SCALE
    raise InputError(f"unknown discriminator kind {kind!r}")


@dataclass
class Discriminator:
    kind: str
    spec: NetworkSpec
    params: nn.NetworkParams

    def __post_init__(self):
        nn.check_params(self.spec, self.params)
        if self.params.training:
            raise InputError("discriminator params must be finalised (inference mode)")

    def score(self, X) -> np.ndarray:
        """Match-class probability for each raw row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], SCORE_CHUNK):
            probs, _ = nn.forward(self.spec, self.params,
                                  prepare_inputs(self.kind, X[s:s + SCORE_CHUNK], self.spec))
            out[s:s + SCORE_CHUNK] = probs[:, 1]
        return out

    def to_bytes(self) -> bytes:
        return nn.save_params(self.params, self.spec)

    def save(self, path: Path) -> None:
        atomic_write(Path(path), self.to_bytes())


def discriminator_from_bytes(blob: bytes, kind: str | None = None) -> Discriminator:
    """Load a model file; without ``kind`` the spec hash decides light vs temp."""
    kinds = [kind] if kind else list(_SPECS)
    errors = []
    for k in kinds:
        try:
            return Discriminator(k, _SPECS[k], nn.load_params(blob, _SPECS[k]))
        except InputError as exc:
            errors.append(str(exc))
    raise InputError("model file matches no discriminator: " + "; ".join(errors))


def load_discriminator(path: Path, kind: str | None = None) -> Discriminator:
    return discriminator_from_bytes(Path(path).read_bytes(), kind)


def score_light(model: Discriminator, curve: NormalizedLightCurve) -> float:
    if model.kind != "light":
        raise InputError("score_light needs a light discriminator")
    return float(model.score(curve.values)[0])


def score_temp(model: Discriminator, pair: TempPairVector) -> float:
    if model.kind != "temp":
        raise InputError("score_temp needs a temperature discriminator")
    return float(model.score(pair.vector)[0])


# -- training -------------------------------------------------------------------------------

def balanced_accuracy(scores, labels) -> float:
    labels = np.asarray(labels)
    pred = np.asarray(scores) >= 0.5
    tpr = np.mean(pred[labels == 1]) if np.any(labels == 1) else np.nan
    tnr = np.mean(~pred[labels == 0]) if np.any(labels == 0) else np.nan
    return float(np.nanmean([tpr, tnr]))


def validation_split(ds: Dataset, fraction: float, seed: int):
    """Row indices (train, validation); validation takes whole sensors."""
    n = len(ds)
    rng = child_rng(seed, "validation")
    ids = ds.provenance.get("sensor_id")
    if ids is None:
        rows = rng.permutation(n)
        k = max(1, int(round(fraction * n)))
        return np.sort(rows[k:]), np.sort(rows[:k])
    ids = np.asarray(ids)
    uniq = np.unique(ids)
    if uniq.size < 2:
        raise InputError("validation split by sensor needs at least two sensors")
    order = rng.permutation(uniq)
    counts = np.array([np.sum(ids == u) for u in order])
    k = max(1, int(np.argmin(np.abs(np.cumsum(counts) - fraction * n))) + 1)
    k = min(k, uniq.size - 1)
    val = np.isin(ids, order[:k])
    return np.flatnonzero(~val), np.flatnonzero(val)


class TrainingDiverged(NumericalError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def train(kind: str, ds: Dataset, epochs: int = 10, batch_size: int = 64, lr: float = 1e-3,
          seed: int = 0, spec: NetworkSpec | None = None, val_fraction: float = 0.1,
          progress=None):
    """Train a discriminator with class-balanced batches and Adam.

    Returns (Discriminator in inference mode, report dict).  A non-finite
    loss aborts with TrainingDiverged carrying the last good parameters.
    """
    spec = spec or _SPECS.get(kind)
    if spec is None:
        raise InputError(f"unknown discriminator kind {kind!r}")
    if epochs < 1 or batch_size < 2 or not lr > 0:
        raise InputError("epochs >= 1, batch_size >= 2 and lr > 0 required")
    if ds.counts[0] == 0 or ds.counts[1] == 0:
        raise InputError("training data must contain both classes")
    if not np.all(np.isfinite(ds.X)):
        raise InputError("training data contains non-finite values")
    X = prepare_inputs(kind, ds.X, spec)
    if X.shape[1:] != spec.input_shape:
        raise InputError(f"dataset rows {X.shape[1:]} do not fit network input {spec.input_shape}")
    tr, va = validation_split(ds, val_fraction, seed)
    y = ds.y
    if np.unique(y[tr]).size < 2:
        raise InputError("training slice lost a class after the validation split")
    rng = child_rng(seed, f"train:{kind}")
    params = nn.init_params(spec, rng)
    state = nn.adam_init(params)
    history = []
    for epoch in range(1, epochs + 1):
        batches = nn.weighted_batch_sampler(y[tr], batch_size, rng)
        losses = []
        for b in batches:
            rows = tr[b]
            good = params.copy()
            probs, cache = nn.forward(spec, params, X[rows], training=True, rng=rng)
            loss = nn.cross_entropy(probs, y[rows])
            if not np.isfinite(loss):
                good.training = False
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", checkpoint=good)
            grads = nn.backward(spec, params, cache, y[rows])
            params, state = nn.adam_step(params, grads, state, lr)
            losses.append(loss)
        final = params.copy()
        final.training = False
        model = Discriminator(kind, spec, final)
        bacc = balanced_accuracy(model.score(ds.X[va]), y[va]) if va.size else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_balanced_accuracy": bacc})
        log.info("%s epoch %d loss %.4f val bacc %.4f", kind, epoch, history[-1]["loss"], bacc)
        if progress:
            progress(history[-1])
    report = {
        "kind": kind, "epochs": epochs, "batch_size": batch_size, "lr": lr, "seed": seed,
        "n_train": int(tr.size), "n_val": int(va.size), "param_count": final.count(),
        "spec_hash": spec.hash().hex(), "history": history,
    }
    return model, report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
