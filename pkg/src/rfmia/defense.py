"""Provider-side score perturbation against membership inference.

The defender trains its own score-based MIA (the shadow MIA) and, for every
score vector it is about to release, searches for a nearby vector on which
the shadow MIA is undecided (membership score ~0.5) while the top class is
unchanged.  The search runs over log-scores ``z`` with ``softmax(z)`` as the
released vector, so non-negativity and sum-to-one hold at every iterate; the
top-class constraint becomes the hinge penalty ``lam * hinge_loss(z)``.
Afterwards the non-top positions are shuffled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rfmia import nn
from rfmia.mia import MEMBER_LABEL, SCORE_BASED, MembershipSets, MiaModel, train_mia
from rfmia.signal import InvalidInputError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 10.0
    step_size: float = 0.05
    max_iters: int = 500
    stop_tol: float = 0.01
    lambda_sweep: tuple = (10.0, 1.0, 100.0)
    max_halvings: int = 20

    def __post_init__(self):
        if self.lam <= 0 or any(l <= 0 for l in self.lambda_sweep):
            raise ValueError("lambda must be positive")
        if self.step_size <= 0 or self.max_iters < 0 or self.stop_tol < 0:
            raise ValueError("invalid solver settings")

    @property
    def lambdas(self) -> tuple:
        # configured lam first, then the remaining sweep in order
        return (self.lam,) + tuple(l for l in self.lambda_sweep if l != self.lam)


@dataclass
class ShadowMia:
    mia: MiaModel

    def __post_init__(self):
        if self.mia.mode != SCORE_BASED:
            raise InvalidInputError("the shadow MIA reads sorted score vectors")

    @property
    def model(self) -> nn.MlpModel:
        return self.mia.model

    def scores(self, score_vectors) -> np.ndarray:
        return self.mia.scores(score_vectors)


@dataclass
class DefenseResult:
    defended_scores: np.ndarray
    perturbation: np.ndarray
    shadow_score: float
    shadow_score_before: float
    loss_L: float
    iterations: int
    converged: bool
    origin_argmax: int
    lam: float = float("nan")


def train_shadow(member_scores, nonmember_scores, cfg: nn.TrainConfig | None = None) -> ShadowMia:
    """Fit the defender's score-based MIA on C's outputs for its own member set
    and for a set of known non-members."""
    sets = MembershipSets(member_scores, nonmember_scores)
    return ShadowMia(train_mia(sets, SCORE_BASED, cfg))


def hinge_loss(z, c_star) -> np.ndarray | float:
    """``max(max_{c != c*} z_c - z_{c*}, 0)``; ties count as preserved."""
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    if Z.shape[1] < 2:
        raise InvalidInputError("need at least two classes")
    c = np.broadcast_to(np.asarray(c_star, dtype=int), (len(Z),))
    rows = np.arange(len(Z))
    others = Z.copy()
    others[rows, c] = -np.inf
    L = np.maximum(others.max(axis=1) - Z[rows, c], 0.0)
    return float(L[0]) if np.ndim(z) == 1 else L


def _hinge_grad(Z, c):
    rows = np.arange(len(Z))
    others = Z.copy()
    others[rows, c] = -np.inf
    rival = np.argmax(others, axis=1)  # first index on ties
    G = np.zeros_like(Z)
    active = others[rows, rival] > Z[rows, c]
    G[rows[active], rival[active]] = 1.0
    G[rows[active], c[active]] = -1.0
    return G


def _pool_near_ties(gz, Z, reach):
    """Average the gradient over runs of log-scores closer than one step.

    The shadow reads sorted scores, so it is symmetric in tied entries and not
    differentiable there; a single permutation's gradient pulls tied entries
    apart and the line search stalls.  The pooled gradient moves each run as a
    block, which is the symmetric choice at a tie.
    """
    order = np.argsort(-Z, axis=1, kind="stable")
    rows = np.arange(len(Z))[:, None]
    zs = Z[rows, order]
    gs = gz[rows, order]
    out = gs.copy()
    # run id per sorted position: a new run starts where the gap exceeds reach
    starts = np.concatenate([np.ones((len(Z), 1), dtype=bool),
                             (zs[:, :-1] - zs[:, 1:]) >= reach], axis=1)
    run_id = np.cumsum(starts, axis=1)
    for i in np.flatnonzero(~starts.all(axis=1)):
        ids = run_id[i]
        sums = np.bincount(ids, weights=gs[i])
        counts = np.bincount(ids)
        out[i] = sums[ids] / counts[ids]
    pooled = np.empty_like(gz)
    pooled[rows, order] = out
    return pooled


def _respect_active_tie(direction, Z, c, reach):
    """Drop the part of a feasible point's step that would let the strongest
    rival overtake c* within one full step; the search then slides along the
    tie instead of bouncing off the hinge penalty."""
    rows = np.arange(len(Z))
    others = Z.copy()
    others[rows, c] = -np.inf
    rival = np.argmax(others, axis=1)
    gap = Z[rows, c] - Z[rows, rival]
    # moving by -direction changes the gap by -(dir_c - dir_rival)
    closing = direction[rows, c] - direction[rows, rival]
    near = (gap >= 0) & (closing > 0) & (gap < reach * closing)
    if np.any(near):
        direction = direction.copy()
        a = np.zeros_like(direction)
        a[rows, c], a[rows, rival] = 1.0, -1.0
        direction[near] -= (closing[near] / 2.0)[:, None] * a[near]
        norm = np.linalg.norm(direction[near], axis=1, keepdims=True)
        direction[near] /= np.where(norm > 0, norm, 1.0)
    return direction


def _shadow_eval(shadow: ShadowMia, S):
    """m-hat and its logit on sorted scores, plus the logit's gradient w.r.t.
    the *unsorted* scores (the sort permutation is routed back)."""
    perm = np.argsort(-S, axis=1, kind="stable")
    rows = np.arange(len(S))[:, None]
    sorted_s = S[rows, perm]
    m = nn.predict_scores(shadow.model, sorted_s)[:, MEMBER_LABEL]
    readout = nn.Readout("logit", MEMBER_LABEL)
    d = nn.readout_value(shadow.model, sorted_s, readout)
    g_sorted = nn.input_gradient(shadow.model, sorted_s, readout)
    g = np.empty_like(g_sorted)
    g[rows, perm] = g_sorted
    return m, d, g


def _objective(shadow, Z, c, lam):
    S = nn.softmax(Z)
    m, d, g_s = _shadow_eval(shadow, S)
    f = np.abs(m - 0.5) + lam * hinge_loss(Z, c)
    return f, m, d, S, g_s


def _solve(shadow, S0, c, lam, cfg: SolverConfig, trace: list | None = None):
    """Backtracking descent for one lambda over a batch of score vectors.

    |m - 0.5| and |logit m| share their minimisers, and the latter keeps a
    usable gradient where the shadow's output saturates, so the search
    direction follows ``|logit m| + lam * L``.  A step is accepted when the
    objective ``|m - 0.5| + lam * L`` decreases, or stays equal (saturated in
    floating point) while ``|logit m|`` decreases; the objective therefore
    never increases.  ``trace``, when given, receives the objective of every
    row after each iteration.
    """
    Z = np.log(np.maximum(S0, LOG_FLOOR))
    n = len(Z)
    f, m, d, S, g_s = _objective(shadow, Z, c, lam)
    iters = np.zeros(n, dtype=int)
    done = (np.abs(m - 0.5) <= cfg.stop_tol) & (hinge_loss(Z, c) == 0)
    stuck = np.zeros(n, dtype=bool)
    for _ in range(cfg.max_iters):
        act = np.flatnonzero(~done & ~stuck)
        if not len(act):
            break
        Sa = S[act]
        # chain rule through softmax: dz = s * (g - <g, s>)
        gz = Sa * (g_s[act] - (g_s[act] * Sa).sum(axis=1, keepdims=True))
        gz = _pool_near_ties(gz, Z[act], cfg.step_size)
        grad = np.sign(d[act])[:, None] * gz + lam * _hinge_grad(Z[act], c[act])
        norm = np.linalg.norm(grad, axis=1)
        flat = norm == 0
        stuck[act[flat]] = True
        act, grad, norm = act[~flat], grad[~flat], norm[~flat]
        direction = grad / norm[:, None]
        direction = _respect_active_tie(direction, Z[act], c[act], cfg.step_size)
        step = np.full(len(act), cfg.step_size)
        pending = np.ones(len(act), dtype=bool)
        for _h in range(cfg.max_halvings + 1):
            idx = np.flatnonzero(pending)
            if not len(idx):
                break
            rows = act[idx]
            Zc = Z[rows] - step[idx, None] * direction[idx]
            fc, mc, dc, Sc, gc = _objective(shadow, Zc, c[rows], lam)
            ok = (fc < f[rows]) | ((fc <= f[rows]) & (np.abs(dc) < np.abs(d[rows])))
            acc = rows[ok]
            Z[acc], f[acc], m[acc], d[acc] = Zc[ok], fc[ok], mc[ok], dc[ok]
            S[acc], g_s[acc] = Sc[ok], gc[ok]
            iters[acc] += 1
            pending[idx[ok]] = False
            step[idx[~ok]] *= 0.5
        stuck[act[pending]] = True
        done = (np.abs(m - 0.5) <= cfg.stop_tol) & (hinge_loss(Z, c) == 0)
        if trace is not None:
            trace.append(f.copy())
    return Z, S, m, hinge_loss(Z, c), iters, done


def perturb_scores_batch(S, shadow: ShadowMia, cfg: SolverConfig = SolverConfig()):
    """Solve for every row of ``S``; returns a dict of per-row arrays.

    Rows that never reach ``|m - 0.5| <= stop_tol`` with zero hinge loss under
    any lambda are flagged unconverged and release their best iterate: zero
    hinge loss first, then smallest ``|m - 0.5|``, never worse than the input.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not shadow.model.trained:
        raise InvalidInputError("shadow MIA is untrained")
    if np.any(S < 0) or not np.allclose(S.sum(axis=1), 1.0, atol=1e-9):
        raise InvalidInputError("score vectors must lie on the simplex")
    n = len(S)
    c = np.argmax(S, axis=1)
    m0 = shadow.scores(S)
    out = {
        "defended": S.copy(), "shadow_before": m0, "shadow_after": m0.copy(),
        "loss": np.zeros(n), "iterations": np.zeros(n, dtype=int),
        "converged": np.zeros(n, dtype=bool), "origin_argmax": c,
        "lam": np.full(n, np.nan),
    }
    # ranking of the best unconverged iterate so far: (hinge loss > 0, |m - 0.5|)
    best = np.stack([np.zeros(n), np.abs(m0 - 0.5)], axis=1)
    todo = np.arange(n)
    for lam in cfg.lambdas:
        if not len(todo):
            break
        Z, Sd, m, L, iters, done = _solve(shadow, S[todo], c[todo], lam, cfg)
        out["iterations"][todo] += iters
        key = np.stack([(L > 0).astype(float), np.abs(m - 0.5)], axis=1)
        prev = best[todo]
        better = ~done & (np.argmax(Sd, axis=1) == c[todo]) & (
            (key[:, 0] < prev[:, 0]) | ((key[:, 0] == prev[:, 0]) & (key[:, 1] < prev[:, 1])))
        rows = todo[better]
        best[rows] = key[better]
        out["defended"][rows] = Sd[better]
        out["shadow_after"][rows] = m[better]
        out["loss"][rows] = L[better]
        out["lam"][rows] = lam
        # rows that needed no step keep their exact input (softmax(log s) can
        # differ from s in the last bit)
        moved = done & (iters > 0)
        hit = todo[done]
        out["defended"][todo[moved]] = Sd[moved]
        out["shadow_after"][hit] = m[done]
        out["loss"][hit] = L[done]
        out["converged"][hit] = True
        out["lam"][hit] = lam
        todo = todo[~done]
    return out


def perturb_scores(s, shadow: ShadowMia, cfg: SolverConfig = SolverConfig()) -> DefenseResult:
    s = np.asarray(s, dtype=float)
    r = perturb_scores_batch(s[None, :], shadow, cfg)
    d = r["defended"][0]
    return DefenseResult(d, d - s, float(r["shadow_after"][0]), float(r["shadow_before"][0]),
                         float(r["loss"][0]), int(r["iterations"][0]), bool(r["converged"][0]),
                         int(r["origin_argmax"][0]), float(r["lam"][0]))


def shuffle_nonmax(defended, c_star: int, rng: np.random.Generator) -> np.ndarray:
    """Permute every position except ``c_star``."""
    v = np.asarray(defended, dtype=float)
    others = np.array([k for k in range(len(v)) if k != c_star], dtype=int)
    out = v.copy()
    out[others] = v[rng.permutation(others)]
    return out


@dataclass
class DefenseReport:
    n_samples: int
    converged: int
    argmax_violations: int
    convergence_rate: float
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "converged": self.converged,
                "argmax_violations": self.argmax_violations,
                "convergence_rate": self.convergence_rate, "per_sample": self.per_sample}


def defend_scores(S, shadow: ShadowMia, cfg: SolverConfig, rng: np.random.Generator):
    """Perturb, then shuffle, a batch of raw score vectors.

    Returns ``(released_scores, report)``.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    r = perturb_scores_batch(S, shadow, cfg)
    released = np.stack([shuffle_nonmax(d, c, rng) for d, c in zip(r["defended"], r["origin_argmax"])])
    c = r["origin_argmax"]
    rows = np.arange(len(S))
    # ties at the top count as preserved
    kept = released[rows, c] >= released.max(axis=1)
    violations = int(np.sum(r["converged"] & ~kept))
    per_sample = [
        {"original_argmax": int(c[i]), "defended_argmax": int(np.argmax(released[i])),
         "shadow_before": float(r["shadow_before"][i]), "shadow_after": float(r["shadow_after"][i]),
         "loss": float(r["loss"][i]), "iterations": int(r["iterations"][i]),
         "converged": bool(r["converged"][i])}
        for i in range(len(S))
    ]
    n_conv = int(r["converged"].sum())
    report = DefenseReport(len(S), n_conv, violations, n_conv / len(S), per_sample)
    return released, report


def defend_pipeline(classifier, X, shadow: ShadowMia, cfg: SolverConfig,
                    rng: np.random.Generator):
    """Score provider-side features with C and release defended scores."""
    return defend_scores(classifier.scores(X), shadow, cfg, rng)
