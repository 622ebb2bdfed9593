"""Black-box membership inference.

Two input layouts:

* label-based: adversary-side features with the one-hot class the adversary
  attributes to the transmission (from its surrogate classifier);
* score-based: the target's score vector sorted in descending order.

The inference network is a 2-class softmax model whose class-1 probability is
the membership score.  Fitting it with class-balanced cross-entropy is the
same as maximising the balanced log-likelihood gain below: on balanced pools
``-gain == 0.5 * (CE_members + CE_nonmembers)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from rfmia import nn
from rfmia.classifiers import ConfusionMatrix, confusion
from rfmia.signal import InvalidInputError, perturb_matrix

log = logging.getLogger(__name__)

LABEL_BASED = "label-based"
SCORE_BASED = "score-based"
MODES = (LABEL_BASED, SCORE_BASED)

HIDDEN = (64, 64)
THRESHOLD = 0.5
LOG_CLAMP = 1e-12

NONMEMBER_LABEL = 0
MEMBER_LABEL = 1


def encode_label_input(features, labels, n_classes: int) -> np.ndarray:
    """Append the one-hot attributed class to each feature row."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    return np.hstack([X, onehot])


def encode_score_input(scores) -> np.ndarray:
    """Sort each score vector in descending order."""
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    return -np.sort(-S, axis=1)


@dataclass
class MiaModel:
    mode: str
    model: nn.MlpModel
    n_classes: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown MIA mode {self.mode!r}")

    def encode(self, x, label=None) -> np.ndarray:
        if self.mode == SCORE_BASED:
            return encode_score_input(x)
        if label is None:
            raise InvalidInputError("label-based MIA needs the attributed class")
        return encode_label_input(x, label, self.n_classes)

    def scores(self, encoded) -> np.ndarray:
        """Membership score m(.) for already-encoded inputs."""
        encoded = np.atleast_2d(encoded)
        if self.mode == SCORE_BASED:
            # layout contract: always sorted
            encoded = encode_score_input(encoded)
        return nn.predict_scores(self.model, encoded)[:, MEMBER_LABEL]


@dataclass(frozen=True)
class MiaVerdict:
    membership_score: float

    @property
    def decision(self) -> bool:
        return self.membership_score >= THRESHOLD


@dataclass
class MembershipSets:
    """Encoded MIA inputs for the representative member / non-member pools."""

    members: np.ndarray
    nonmembers: np.ndarray
    member_ids: np.ndarray = None
    nonmember_ids: np.ndarray = None
    named: dict = field(default_factory=dict)

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        self.nonmembers = np.atleast_2d(np.asarray(self.nonmembers, dtype=float))
        if self.member_ids is not None and self.nonmember_ids is not None:
            if set(np.asarray(self.member_ids).tolist()) & set(np.asarray(self.nonmember_ids).tolist()):
                raise InvalidInputError("member and non-member pools overlap")

    def stacked(self):
        X = np.vstack([self.members, self.nonmembers])
        y = np.concatenate([np.full(len(self.members), MEMBER_LABEL),
                            np.full(len(self.nonmembers), NONMEMBER_LABEL)])
        return X, y


def empirical_gain(m, sets: MembershipSets) -> float:
    """Balanced log-likelihood gain of a membership scorer; always <= 0.

    ``m`` is a :class:`MiaModel` or any callable mapping encoded inputs to
    membership scores.
    """
    if len(sets.members) == 0 or len(sets.nonmembers) == 0:
        raise InvalidInputError("both pools must be non-empty")
    score = m.scores if isinstance(m, MiaModel) else m
    pm = np.clip(np.asarray(score(sets.members), dtype=float), LOG_CLAMP, 1 - LOG_CLAMP)
    pn = np.clip(np.asarray(score(sets.nonmembers), dtype=float), LOG_CLAMP, 1 - LOG_CLAMP)
    return 0.5 * float(np.mean(np.log(pm))) + 0.5 * float(np.mean(np.log1p(-pn)))


def default_train_config(seed: int = 0) -> nn.TrainConfig:
    return nn.TrainConfig(epochs=200, batch_size=32, learning_rate=1e-3, seed=seed)


def train_mia(sets: MembershipSets, mode: str, cfg: nn.TrainConfig | None = None,
              n_classes: int = 0, hidden=HIDDEN) -> MiaModel:
    """Fit m(.) by class-balanced cross-entropy on the two pools."""
    if mode not in MODES:
        raise InvalidInputError(f"unknown MIA mode {mode!r}")
    cfg = cfg or default_train_config()
    n_m, n_n = len(sets.members), len(sets.nonmembers)
    if n_m == 0 or n_n == 0:
        raise InvalidInputError("both pools must be non-empty")
    X, y = sets.stacked()
    if mode == SCORE_BASED:
        X = encode_score_input(X)
    weights = None
    if n_m != n_n:
        warnings.warn(f"unbalanced MIA pools ({n_m} vs {n_n}); reweighting the loss",
                      stacklevel=2)
        weights = np.where(y == MEMBER_LABEL, 0.5 / n_m, 0.5 / n_n)
    model = nn.init(nn.LayerSpec(X.shape[1], tuple(hidden), 2), cfg.seed)
    model.fit_input_scaling(X)
    nn.train(model, X, y, cfg, sample_weight=weights)
    return MiaModel(mode, model, n_classes)


def infer(m: MiaModel, sample_input) -> MiaVerdict:
    """Verdict for one encoded input (score inputs are re-sorted first)."""
    return MiaVerdict(float(m.scores(np.atleast_2d(sample_input))[0]))


def decisions(m: MiaModel, encoded) -> np.ndarray:
    return (m.scores(encoded) >= THRESHOLD).astype(int)


def evaluate_mia(m, sets: MembershipSets) -> ConfusionMatrix:
    """Member/non-member confusion; row and column 0 are non-members."""
    X, y = sets.stacked()
    score = m.scores if isinstance(m, MiaModel) else m
    pred = (np.asarray(score(X)) >= THRESHOLD).astype(int)
    return confusion(y, pred, [NONMEMBER_LABEL, MEMBER_LABEL])


def noisy_variation_eval(m: MiaModel, features, labels, membership, ranges,
                         levels=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                         per_level_count: int = 10, aggregates=("average", "maximum"),
                         rng: np.random.Generator | None = None) -> list:
    """Score each original together with random variations at each level.

    For every level > 0, ``per_level_count`` variants of each original are
    drawn (their relative-change vector has the level as its norm), scored,
    and the scores are combined by mean or max into one membership decision
    for the original.  Level 0 scores the original alone.  Every aggregate
    reuses the same variants.

    Returns rows ``{"level", "aggregate", "nonmember_acc", "member_acc"}``.
    """
    if m.mode != LABEL_BASED:
        raise InvalidInputError("noisy variations are defined for the label-based MIA")
    rng = rng or np.random.default_rng(0)
    X = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=int)
    is_member = np.asarray(membership, dtype=bool)
    rows = []
    for level in levels:
        if level == 0:
            per_sample = m.scores(m.encode(X, labels))[:, None]
        else:
            V = perturb_matrix(X, level, ranges, per_level_count, rng)
            flat = V.reshape(-1, X.shape[1])
            enc = m.encode(flat, np.repeat(labels, per_level_count))
            per_sample = m.scores(enc).reshape(len(X), per_level_count)
        for agg in aggregates:
            combined = per_sample.mean(axis=1) if agg == "average" else per_sample.max(axis=1)
            said_member = combined >= THRESHOLD
            rows.append({
                "level": float(level),
                "aggregate": agg,
                "nonmember_acc": float(np.mean(~said_member[~is_member])),
                "member_acc": float(np.mean(said_member[is_member])),
            })
    return rows
