"""Experiment recipes: synthesis, training, attack, defense and reports.

Every stage writes its artifacts under the run directory and a JSON stage
report under ``reports/``; the final ``report.json`` merges them.  Stages
load their inputs from disk when they are not already in memory, so the
CLI subcommands can be run one at a time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from rfmia import classifiers, defense, mia, nn, signal
from rfmia.rng import stage_seed, stream

log = logging.getLogger(__name__)

EXPERIMENTS = ("setting1-strong", "setting1-weak", "setting1-noisy",
               "setting2-mia", "setting2-defense")

SCENARIO_OF = {
    "setting1-strong": "setting1-strong",
    "setting1-weak": "setting1-weak",
    "setting1-noisy": "setting1-strong",
    "setting2-mia": "setting2",
    "setting2-defense": "setting2",
}

# training defaults per network role; "setting1"/"setting2" keys pick the recipe
TRAIN_DEFAULTS = {
    "target": {"setting1": dict(epochs=30, weight_decay=1e-2),
               "setting2": dict(epochs=100, weight_decay=1e-2)},
    "surrogate": {"setting1": dict(epochs=100, weight_decay=1e-2)},
    "mia": {"setting1": dict(epochs=30), "setting2": dict(epochs=200)},
    "shadow": {"setting2": dict(epochs=200)},
}

NOISY_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
OUT_ENV = "RFMIA_OUT"
WALL_CLOCK = "wall_clock"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    # sections: scenario, target, surrogate, mia, shadow, solver, noisy
    overrides: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"choose from {', '.join(EXPERIMENTS)}")
        if self.seed is None:
            raise ValueError("a seed is required")
        self.seed = int(self.seed)
        unknown = set(self.overrides) - {"scenario", "target", "surrogate", "mia",
                                         "shadow", "solver", "noisy"}
        if unknown:
            raise ValueError(f"unknown override sections: {sorted(unknown)}")

    @property
    def setting(self) -> int:
        return 1 if self.experiment.startswith("setting1") else 2

    def scenario(self) -> signal.ScenarioConfig:
        return signal.scenario_config(SCENARIO_OF[self.experiment],
                                      **self.overrides.get("scenario", {}))

    def train_config(self, role: str) -> nn.TrainConfig:
        params = dict(TRAIN_DEFAULTS[role][f"setting{self.setting}"])
        params.update(self.overrides.get(role, {}))
        params.setdefault("seed", stage_seed(self.seed, f"train:{role}") % 2**32)
        return nn.TrainConfig(**params)

    def solver_config(self) -> defense.SolverConfig:
        params = dict(self.overrides.get("solver", {}))
        if "lambda_sweep" in params:
            params["lambda_sweep"] = tuple(params["lambda_sweep"])
        return defense.SolverConfig(**params)

    def noisy_settings(self) -> dict:
        d = {"levels": list(NOISY_LEVELS), "per_level_count": 10}
        d.update(self.overrides.get("noisy", {}))
        return d

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "overrides": self.overrides}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUT_ENV, "runs"))
        return root / f"{self.experiment}-seed{self.seed}"

    @classmethod
    def from_file(cls, path, **kw) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in kw.items() if v is not None})
        return cls(d["experiment"], d.get("seed", 0), d.get("overrides", {}),
                   d.get("output_dir"))


# --------------------------------------------------------------------------
# disk helpers


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


class Run:
    """State of one experiment run: config, directory and cached artifacts."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.dir = config.run_dir()
        self.timings: dict = {}
        self._dataset = None
        self._models: dict = {}

    # paths
    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def stage_report_path(self, stage: str) -> Path:
        return self.path("reports", f"{stage}.json")

    def write_stage(self, stage: str, payload: dict) -> None:
        write_atomic(self.stage_report_path(stage), dump_json(payload))

    def read_stage(self, stage: str) -> dict:
        return _read_json(self.stage_report_path(stage))

    def has_stage(self, stage: str) -> bool:
        return self.stage_report_path(stage).exists()

    # artifacts
    @property
    def dataset(self) -> signal.Dataset:
        if self._dataset is None:
            csv = self.path("dataset.csv")
            if not csv.exists():
                raise MissingArtifactError(f"missing artifact: {csv} (run synth first)")
            scen = signal.scenario_config(_read_json(self.path("scenario.json")))
            self._dataset = signal.read_csv(csv, scen, self.config.seed)
        return self._dataset

    def save_model(self, name: str, model: nn.MlpModel, meta: dict | None = None) -> None:
        d = nn.to_dict(model)
        if meta:
            d["meta"] = meta
        write_atomic(self.path("models", f"{name}.json"), json.dumps(d))
        self._models[name] = model

    def model(self, name: str) -> nn.MlpModel:
        if name not in self._models:
            path = self.path("models", f"{name}.json")
            if not path.exists():
                raise MissingArtifactError(f"missing artifact: {path}")
            self._models[name] = nn.load(path)
        return self._models[name]

    def rng(self, stage: str) -> np.random.Generator:
        return stream(self.config.seed, stage)

    def stage(self, name: str, fn):
        t0 = time.perf_counter()
        try:
            out = fn(self)
        except (MissingArtifactError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = round(time.perf_counter() - t0, 3)
        return out


# --------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> dict:
    cfg = run.config.scenario()
    ds = signal.synth_scenario(cfg, run.config.seed)
    run.dir.mkdir(parents=True, exist_ok=True)
    write_atomic(run.path("dataset.csv"), ds.to_csv())
    write_atomic(run.path("scenario.json"), dump_json(cfg.to_dict()))
    run._dataset = ds
    counts = {}
    for o in ds.observations:
        for s in o.splits:
            counts[s] = counts.get(s, 0) + 1
    payload = {"scenario": cfg.name, "n_observations": len(ds),
               "split_sizes": dict(sorted(counts.items())),
               "snr_db": {str(k): v for k, v in sorted(ds.snr_map.items())}}
    run.write_stage("synth", payload)
    return payload


def _splits(run: Run):
    return ("target_train", "target_test") if run.config.setting == 1 else ("A", "B")


def stage_train_target(run: Run) -> dict:
    ds = run.dataset
    train_split, test_split = _splits(run)
    k = ds.config.n_classes
    tgt = classifiers.train_target(ds.view(train_split, signal.PROVIDER), k,
                                   run.config.train_config("target"))
    run.save_model("target", tgt.model, {"training_split": train_split})
    cm = classifiers.evaluate(tgt, ds.view(test_split, signal.PROVIDER))
    payload = {"train_split": train_split, "test_split": test_split,
               "accuracy": cm.accuracy, "confusion": cm.to_dict()}
    run.write_stage("target", payload)
    return payload


def _target(run: Run) -> classifiers.TargetClassifier:
    train_split = _splits(run)[0]
    ids = run.dataset.view(train_split, signal.PROVIDER).ids
    return classifiers.TargetClassifier(run.model("target"), ids)


def _surrogate(run: Run) -> classifiers.SurrogateClassifier:
    return classifiers.SurrogateClassifier(run.model("surrogate"))


def stage_train_surrogate(run: Run) -> dict:
    if run.config.setting != 1:
        raise ValueError("the surrogate classifier belongs to the setting-1 recipes")
    ds = run.dataset
    tgt = _target(run)
    prov = ds.view("surrogate_train", signal.PROVIDER)
    adv = ds.view("surrogate_train", signal.ADVERSARY)
    # the adversary only learns C's decisions, never the true labels
    observed = tgt.predict(prov.X)
    sur = classifiers.train_surrogate(adv, observed, ds.config.n_classes,
                                      run.config.train_config("surrogate"))
    run.save_model("surrogate", sur.model, {"label_source": sur.label_source})
    test_adv = ds.view("surrogate_test", signal.ADVERSARY)
    test_prov = ds.view("surrogate_test", signal.PROVIDER)
    cm = classifiers.evaluate(sur, test_adv)
    agreement = classifiers.paired_agreement(tgt, sur, test_prov, test_adv)
    payload = {"accuracy": cm.accuracy, "confusion": cm.to_dict(),
               "paired_agreement": agreement,
               "observed_label_accuracy": float(np.mean(observed == prov.y))}
    run.write_stage("surrogate", payload)
    return payload


def _mia_report(m, sets: mia.MembershipSets) -> dict:
    cm = mia.evaluate_mia(m, sets)
    return {"accuracy": cm.accuracy, "confusion": cm.to_dict(),
            "empirical_gain": mia.empirical_gain(m, sets)}


def _setting1_pools(run: Run):
    ds = run.dataset
    sur = _surrogate(run)
    mv = ds.view("mia_member", signal.ADVERSARY)
    nv = ds.view("mia_nonmember", signal.ADVERSARY)
    k = ds.config.n_classes
    lm, ln = sur.predict(mv.X), sur.predict(nv.X)
    sets = mia.MembershipSets(mia.encode_label_input(mv.X, lm, k),
                              mia.encode_label_input(nv.X, ln, k), mv.ids, nv.ids)
    return mv, nv, lm, ln, sets


def _setting1_attack(run: Run) -> dict:
    k = run.dataset.config.n_classes
    mv, nv, lm, ln, sets = _setting1_pools(run)
    m = mia.train_mia(sets, mia.LABEL_BASED, run.config.train_config("mia"), n_classes=k)
    run.save_model("mia", m.model, {"mode": m.mode, "n_classes": k})
    # the representative pools are the only labelled membership data in this
    # setting, so the attack is scored on them
    payload = {"mode": m.mode, "evaluated_on": "training pools", **_mia_report(m, sets)}
    if run.config.experiment == "setting1-noisy":
        noisy = run.config.noisy_settings()
        X = np.vstack([mv.X, nv.X])
        labels = np.concatenate([lm, ln])
        membership = np.r_[np.ones(len(mv)), np.zeros(len(nv))].astype(bool)
        ranges = signal.feature_ranges(X)
        rows = mia.noisy_variation_eval(m, X, labels, membership, ranges,
                                        levels=tuple(noisy["levels"]),
                                        per_level_count=noisy["per_level_count"],
                                        rng=run.rng("noisy"))
        tables = {}
        for agg in ("average", "maximum"):
            sel = [r for r in rows if r["aggregate"] == agg]
            tables[agg] = sel
            lines = ["level,aggregate,nonmember_acc,member_acc"]
            lines += [f"{float(r['level'])!r},{agg},{float(r['nonmember_acc'])!r},"
                      f"{float(r['member_acc'])!r}" for r in sel]
            write_atomic(run.path(f"noisy_{agg}.csv"), "\n".join(lines) + "\n")
        payload["noisy"] = tables
    run.write_stage("attack", payload)
    return payload


def _setting2_scores(run: Run) -> dict:
    ds = run.dataset
    tgt = _target(run)
    out = {}
    for split in ("A", "B", "C_nm", "D_nm"):
        v = ds.view(split, signal.PROVIDER)
        out[split] = (v.ids, tgt.scores(v.X))
    a1 = set(ds.view("A1", signal.PROVIDER).ids.tolist())
    d1 = set(ds.view("D1", signal.PROVIDER).ids.tolist())
    out["in_A1"] = np.array([i in a1 for i in out["A"][0]])
    out["in_D1"] = np.array([i in d1 for i in out["D_nm"][0]])
    return out


def _setting2_attack(run: Run) -> dict:
    sc = _setting2_scores(run)
    (ida, SA), (idd, SD), (idc, SC) = sc["A"], sc["D_nm"], sc["C_nm"]
    ina1, ind1 = sc["in_A1"], sc["in_D1"]
    k = run.dataset.config.n_classes
    # adversary: overheard scores of A1 + D1, tested on the rest of A and D
    train = mia.MembershipSets(SA[ina1], SD[ind1], ida[ina1], idd[ind1])
    test = mia.MembershipSets(SA[~ina1], SD[~ind1], ida[~ina1], idd[~ind1])
    adv = mia.train_mia(train, mia.SCORE_BASED, run.config.train_config("mia"), n_classes=k)
    run.save_model("mia", adv.model, {"mode": adv.mode, "n_classes": k})
    # provider: shadow MIA trained on A and C, tested on A and D
    shadow = defense.train_shadow(SA, SC, run.config.train_config("shadow"))
    run.save_model("shadow", shadow.model, {"mode": mia.SCORE_BASED, "n_classes": k})
    shadow_test = mia.MembershipSets(SA, SD, ida, idd)
    payload = {"mia": {"evaluated_on": "A-A1 + D-D1", **_mia_report(adv, test)},
               "shadow": {"evaluated_on": "A + D", **_mia_report(shadow.mia, shadow_test)}}
    run.write_stage("attack", payload)
    return payload


def stage_attack(run: Run) -> dict:
    return _setting1_attack(run) if run.config.setting == 1 else _setting2_attack(run)


def stage_defend(run: Run) -> dict:
    if run.config.setting != 2:
        raise ValueError("the defense recipe runs on setting 2")
    sc = _setting2_scores(run)
    (ida, SA), (idd, SD) = sc["A"], sc["D_nm"]
    ina1, ind1 = sc["in_A1"], sc["in_D1"]
    k = run.dataset.config.n_classes
    shadow = defense.ShadowMia(mia.MiaModel(mia.SCORE_BASED, run.model("shadow"), k))
    adv = mia.MiaModel(mia.SCORE_BASED, run.model("mia"), k)
    raw = np.vstack([SA, SD])
    released, rep = defense.defend_scores(raw, shadow, run.config.solver_config(),
                                          run.rng("defense:shuffle"))
    RA, RD = released[:len(SA)], released[len(SA):]
    conv = np.array([p["converged"] for p in rep.per_sample])
    same = np.argmax(released, axis=1) == np.argmax(raw, axis=1)
    ids = np.concatenate([ida, idd]).tolist()
    per_sample = [dict(p, observation_id=int(i)) for p, i in zip(rep.per_sample, ids)]
    write_atomic(run.path("defense_samples.json"), dump_json(per_sample))
    rows = (",".join(format(v, ".17g") for v in row) for row in released)
    write_atomic(run.path("defended_scores.csv"), "\n".join(rows) + "\n")
    shadow_before = mia.MembershipSets(SA, SD)
    adv_before = mia.MembershipSets(SA[~ina1], SD[~ind1])
    shadow_after = mia.MembershipSets(RA, RD)
    adv_after = mia.MembershipSets(RA[~ina1], RD[~ind1])
    payload = {
        "n_samples": rep.n_samples,
        "convergence_rate": rep.convergence_rate,
        "argmax_violations": rep.argmax_violations,
        "argmax_preserved_converged": float(np.mean(same[conv])) if conv.any() else 1.0,
        "argmax_preserved_all": float(np.mean(same)),
        "shadow_before": _mia_report(shadow.mia, shadow_before),
        "shadow_after": _mia_report(shadow.mia, shadow_after),
        "mia_before": _mia_report(adv, adv_before),
        "mia_after": _mia_report(adv, adv_after),
    }
    run.write_stage("defend", payload)
    return payload


STAGES = {
    "synth": stage_synth,
    "train-target": stage_train_target,
    "train-surrogate": stage_train_surrogate,
    "attack": stage_attack,
    "defend": stage_defend,
}

PIPELINES = {
    "setting1-strong": ("synth", "train-target", "train-surrogate", "attack"),
    "setting1-weak": ("synth", "train-target", "train-surrogate", "attack"),
    "setting1-noisy": ("synth", "train-target", "train-surrogate", "attack"),
    "setting2-mia": ("synth", "train-target", "attack"),
    "setting2-defense": ("synth", "train-target", "attack", "defend"),
}

STAGE_REPORT = {"synth": "synth", "train-target": "target", "train-surrogate": "surrogate",
                "attack": "attack", "defend": "defend"}


def run_stage(config: ExperimentConfig, stage: str, run: Run | None = None) -> dict:
    run = run or Run(config)
    if stage not in PIPELINES[config.experiment]:
        raise ValueError(f"stage {stage!r} is not part of {config.experiment}")
    out = run.stage(stage, STAGES[stage])
    _write_config(run)
    return out


def _write_config(run: Run) -> None:
    write_atomic(run.path("config.json"), dump_json(run.config.to_dict()))


def assemble_report(run: Run) -> dict:
    cfg = run.config
    report = {"experiment": cfg.experiment, "seed": cfg.seed,
              "config_digest": cfg.digest(), "stages": {}}
    for stage in PIPELINES[cfg.experiment]:
        name = STAGE_REPORT[stage]
        report["stages"][name] = run.read_stage(name)
    report["metrics"] = headline_metrics(report)
    return report


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute the whole recipe and write ``report.json`` (plus timings)."""
    run = Run(config)
    run.dir.mkdir(parents=True, exist_ok=True)
    _write_config(run)
    for stage in PIPELINES[config.experiment]:
        log.info("%s: %s", config.experiment, stage)
        run.stage(stage, STAGES[stage])
    report = assemble_report(run)
    write_atomic(run.path("report.json"), dump_json(report))
    write_atomic(run.path("timing.json"), dump_json({WALL_CLOCK: run.timings}))
    return report


def headline_metrics(report: dict) -> dict:
    """The handful of numbers the acceptance thresholds read."""
    st = report["stages"]
    m = {"target_accuracy": st["target"]["accuracy"]}
    if "surrogate" in st:
        m["surrogate_accuracy"] = st["surrogate"]["accuracy"]
        m["paired_agreement"] = st["surrogate"]["paired_agreement"]
    att = st.get("attack", {})
    if "mia" in att:
        m["mia_accuracy"] = att["mia"]["accuracy"]
        m["shadow_accuracy"] = att["shadow"]["accuracy"]
    elif "accuracy" in att:
        m["mia_accuracy"] = att["accuracy"]
    if "defend" in st:
        d = st["defend"]
        m.update({
            "shadow_accuracy_defended": d["shadow_after"]["accuracy"],
            "mia_accuracy_defended": d["mia_after"]["accuracy"],
            "convergence_rate": d["convergence_rate"],
            "argmax_preserved_converged": d["argmax_preserved_converged"],
        })
    return m


def load_report(run_dir) -> dict:
    return _read_json(Path(run_dir) / "report.json")


# --------------------------------------------------------------------------
# acceptance thresholds that a single run can check


def check_run(report: dict) -> list:
    """``[(criterion, passed, detail)]`` for the thresholds one run can decide."""
    exp = report["experiment"]
    m = report["metrics"]
    out = []

    def add(name, ok, detail):
        out.append((name, bool(ok), detail))

    if exp.startswith("setting1"):
        add("target accuracy >= 0.95", m["target_accuracy"] >= 0.95, m["target_accuracy"])
        add("surrogate accuracy >= 0.95", m["surrogate_accuracy"] >= 0.95, m["surrogate_accuracy"])
        add("paired agreement >= 0.95", m["paired_agreement"] >= 0.95, m["paired_agreement"])
    else:
        add("target accuracy in [0.85, 1]", 0.85 <= m["target_accuracy"] <= 1.0,
            m["target_accuracy"])
    if exp == "setting1-strong":
        add("MIA accuracy in [0.78, 0.95]", 0.78 <= m["mia_accuracy"] <= 0.95, m["mia_accuracy"])
    if exp == "setting1-noisy":
        for name, ok, detail in noisy_trend_checks(report["stages"]["attack"]["noisy"]):
            add(name, ok, detail)
    if exp == "setting2-mia":
        add("MIA accuracy >= 0.90", m["mia_accuracy"] >= 0.90, m["mia_accuracy"])
        add("shadow accuracy >= 0.90", m["shadow_accuracy"] >= 0.90, m["shadow_accuracy"])
    if exp == "setting2-defense":
        add("defended MIA accuracy <= 0.60", m["mia_accuracy_defended"] <= 0.60,
            m["mia_accuracy_defended"])
        add("defended shadow accuracy <= 0.75", m["shadow_accuracy_defended"] <= 0.75,
            m["shadow_accuracy_defended"])
        add("argmax preserved on converged samples", m["argmax_preserved_converged"] == 1.0,
            m["argmax_preserved_converged"])
        add("convergence rate >= 0.95", m["convergence_rate"] >= 0.95, m["convergence_rate"])
    return out


def noisy_trend_checks(tables: dict) -> list:
    mx = {r["level"]: r for r in tables["maximum"]}
    av = {r["level"]: r for r in tables["average"]}
    high = [lv for lv in mx if lv >= 0.1 - 1e-12]
    a = [mx[lv]["member_acc"] for lv in sorted(high)]
    base = av[0.0]["member_acc"]
    c = [av[lv]["member_acc"] for lv in sorted(av) if lv >= 0.3 - 1e-12]
    return [
        ("max aggregation: member accuracy 1.0 at every level >= 0.1",
         all(v == 1.0 for v in a), a),
        ("max aggregation: non-member accuracy at 0.9 below 0.1",
         mx[0.9]["nonmember_acc"] < mx[0.1]["nonmember_acc"],
         (mx[0.1]["nonmember_acc"], mx[0.9]["nonmember_acc"])),
        ("average aggregation: member accuracy at levels >= 0.3 below level 0",
         all(v < base for v in c), {"level0": base, "levels>=0.3": c}),
    ]


# --------------------------------------------------------------------------
# multi-seed


def run_seeds(config: ExperimentConfig, n: int) -> dict:
    """Repeat over master seeds ``seed .. seed+n-1``; mean and sample std."""
    if n < 1:
        raise ValueError("--seeds needs a positive count")
    base = config.run_dir()
    per_seed = {}
    for i in range(n):
        s = config.seed + i
        c = replace(config, seed=s, output_dir=str(base / f"seed{s}"))
        per_seed[s] = run_experiment(c)["metrics"]
    keys = sorted(set().union(*per_seed.values()))
    summary = {}
    for k in keys:
        vals = np.array([m[k] for m in per_seed.values() if k in m], dtype=float)
        summary[k] = {"mean": float(vals.mean()),
                      "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                      "values": vals.tolist()}
    out = {"experiment": config.experiment, "seeds": list(per_seed), "summary": summary}
    write_atomic(base / "summary.json", dump_json(out))
    return out
