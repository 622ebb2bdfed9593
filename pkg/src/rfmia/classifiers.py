"""Target classifier C (provider side), surrogate C-hat (adversary side), confusion reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rfmia import nn
from rfmia.signal import ADVERSARY, PROVIDER, FeatureView, InvalidInputError

HIDDEN = (100, 100, 100)


@dataclass
class TargetClassifier:
    model: nn.MlpModel
    training_ids: np.ndarray
    observer: str = PROVIDER

    def scores(self, X) -> np.ndarray:
        return nn.predict_scores(self.model, X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=-1)


@dataclass
class SurrogateClassifier:
    model: nn.MlpModel
    label_source: str = "observed access decisions"
    observer: str = ADVERSARY

    def scores(self, X) -> np.ndarray:
        return nn.predict_scores(self.model, X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=-1)


@dataclass
class ConfusionMatrix:
    """Row-normalised confusion matrix; rows are the true classes that occur."""

    matrix: np.ndarray
    row_labels: list
    col_labels: list
    accuracy: float
    support: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "row_labels": list(self.row_labels),
                "col_labels": list(self.col_labels), "accuracy": self.accuracy,
                "support": list(self.support)}

    @classmethod
    def from_dict(cls, d) -> "ConfusionMatrix":
        return cls(np.array(d["matrix"], dtype=float), d["row_labels"], d["col_labels"],
                   float(d["accuracy"]), d.get("support", []))

    def rate(self, true_label, pred_label) -> float:
        return float(self.matrix[self.row_labels.index(true_label),
                                 self.col_labels.index(pred_label)])


def confusion(y_true, y_pred, labels=None) -> ConfusionMatrix:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise InvalidInputError("cannot evaluate on an empty sample set")
    if labels is None:
        labels = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    labels = list(labels)
    col = {c: j for j, c in enumerate(labels)}
    rows = [c for c in labels if np.any(y_true == c)]
    counts = np.zeros((len(rows), len(labels)))
    for i, c in enumerate(rows):
        for p in y_pred[y_true == c]:
            counts[i, col[p]] += 1
    support = counts.sum(axis=1)
    return ConfusionMatrix(counts / support[:, None], rows, labels,
                           float(np.mean(y_true == y_pred)), support.astype(int).tolist())


def _layer_spec(n_features, n_classes):
    return nn.LayerSpec(n_features, HIDDEN, n_classes)


def _fit(X, y, n_classes, cfg):
    model = nn.init(_layer_spec(X.shape[1], n_classes), cfg.seed)
    model.fit_input_scaling(X)
    nn.train(model, X, y, cfg)
    return model


def train_target(view: FeatureView, n_classes: int, cfg: nn.TrainConfig) -> TargetClassifier:
    """Train C on provider-side features of its training split."""
    if view.observer != PROVIDER:
        raise InvalidInputError("the target classifier is trained on provider-side features")
    if view.y.min() < 0 or view.y.max() >= n_classes:
        raise InvalidInputError(f"labels outside the {n_classes}-class label space")
    return TargetClassifier(_fit(view.X, view.y, n_classes, cfg), view.ids.copy())


def train_surrogate(view: FeatureView, observed_labels, n_classes: int,
                    cfg: nn.TrainConfig) -> SurrogateClassifier:
    """Train C-hat on what the adversary hears plus the provider decisions it overheard."""
    if view.observer != ADVERSARY:
        raise InvalidInputError("the surrogate only ever sees adversary-side features")
    y = np.asarray(observed_labels, dtype=int)
    if len(y) != len(view):
        raise InvalidInputError("one observed label per transmission required")
    return SurrogateClassifier(_fit(view.X, y, n_classes, cfg))


def evaluate(classifier, view: FeatureView, labels=None) -> ConfusionMatrix:
    if view.observer != classifier.observer:
        raise InvalidInputError(
            f"classifier reads {classifier.observer} features, got {view.observer}")
    if labels is None:
        labels = list(range(classifier.model.spec.output_dim))
    return confusion(view.y, classifier.predict(view.X), labels)


def paired_agreement(target: TargetClassifier, surrogate: SurrogateClassifier,
                     provider_view: FeatureView, adversary_view: FeatureView) -> float:
    """Fraction of transmissions on which C and C-hat output the same class."""
    if not np.array_equal(provider_view.ids, adversary_view.ids):
        raise InvalidInputError("views must cover the same transmissions in the same order")
    return float(np.mean(target.predict(provider_view.X) == surrogate.predict(adversary_view.X)))
