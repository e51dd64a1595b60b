"""Config-driven experiment pipeline: generate, train, calibrate, adapt, evaluate.

Every stage is deterministic given the config and seed. Stage failures are
wrapped in :class:`StageError` so callers can report which stage broke.
"""
from __future__ import annotations

import csv
import itertools
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adaptation import LEARNERS, AdaptedClassifier, adapt
from .calibration import DEFAULT_BINS, DEFAULT_GRID, CalibrationReport
from .envs import bayes_oracle, gen_ac, gen_cedd, load_mnist_idx, make_cmnist, noise_for_correlation
from .envs.base import write_csv
from .envs.cmnist import LABEL_NOISE, save_container
from .envs.mnist import expected_files_message, find_mnist
from .errors import ConfigError, SfbError
from .training import SfbModel, TrainConfig, cross_entropy_risk, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("ERM", "IRM", "SFB-no-adapt", "SFB", "PL-naive", "GT-adapt", "Oracle")
SYNTHETIC = {"AC": gen_ac, "CEDD": gen_cedd}


class StageError(SfbError):
    def __init__(self, stage: str, seed, cause: BaseException):
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.seed = seed


# --------------------------------------------------------------------------- config

@dataclass
class DatasetSpec:
    tag: str = "AC"
    train: list = field(default_factory=lambda: [0.95, 0.7])  # beta (synthetic) or color noise (CMNIST)
    validation: float | None = 0.6
    test: float = 0.1
    n_train: int = 10_000
    n_validation: int = 2_000
    n_test: int = 5_000
    label_noise: float = LABEL_NOISE
    data_dir: str | None = None

    def validate(self):
        if self.tag not in ("AC", "CEDD", "CMNIST"):
            raise ConfigError("dataset.tag", f"unknown dataset {self.tag!r}")
        if len(self.train) < 2:
            raise ConfigError("dataset.train", "need at least two training environments")
        for v in [*self.train, self.test] + ([] if self.validation is None else [self.validation]):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("dataset", f"environment parameter {v} outside [0, 1]")
        if self.tag != "CMNIST" and self.validation is None:
            raise ConfigError("dataset.validation", "synthetic runs select on a validation domain")


@dataclass
class GridSpec:
    lambda_S: list = field(default_factory=lambda: [1000.0])
    lambda_C: list = field(default_factory=lambda: [1.0])
    restarts: int = 1
    select_by: str = "stable_nll"  # or "adapted_accuracy"

    def validate(self):
        if not self.lambda_S or not self.lambda_C:
            raise ConfigError("grid", "lambda_S and lambda_C need at least one value")
        if self.restarts < 1:
            raise ConfigError("grid.restarts", "must be at least 1")
        if self.select_by not in ("stable_nll", "adapted_accuracy"):
            raise ConfigError("grid.select_by", "must be 'stable_nll' or 'adapted_accuracy'")


@dataclass
class BaselineSpec:
    erm_steps: int | None = None
    irm_lambda_S: list = field(default_factory=lambda: [1000.0])

    def validate(self):
        if not self.irm_lambda_S:
            raise ConfigError("baselines.irm_lambda_S", "need at least one value")


@dataclass
class CalibrationSpec:
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    bins: int = DEFAULT_BINS
    fit_on: str = "validation"  # or "train"

    def validate(self):
        if 1.0 not in self.grid or min(self.grid) <= 0:
            raise ConfigError("calibration.grid", "must be positive and contain 1")
        if self.fit_on not in ("validation", "train"):
            raise ConfigError("calibration.fit_on", "must be 'validation' or 'train'")


@dataclass
class AdaptationSpec:
    learner: str = "logistic"
    lr: float = 0.05
    steps: list = field(default_factory=lambda: [300])
    l2: float = 0.0
    rounds: int = 1
    select_on: str = "validation"  # domains used to pick the step count

    def validate(self):
        if self.learner not in LEARNERS:
            raise ConfigError("adaptation.learner", f"unknown learner {self.learner!r}")
        if not self.steps or min(self.steps) < 1:
            raise ConfigError("adaptation.steps", "need positive step counts")
        if self.rounds < 1:
            raise ConfigError("adaptation.rounds", "must be at least 1")
        if self.select_on not in ("validation", "train"):
            raise ConfigError("adaptation.select_on", "must be 'validation' or 'train'")

    def make(self, steps=None):
        if self.learner == "tabular":
            return LEARNERS["tabular"]()
        return LEARNERS["logistic"](lr=self.lr, steps=steps or self.steps[0], l2=self.l2)


@dataclass
class SweepSpec:
    values: list = field(default_factory=list)  # betas (synthetic) or color-label correlations (CMNIST)

    def validate(self):
        pass


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    train: TrainConfig
    grid: GridSpec = field(default_factory=GridSpec)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    adaptation: AdaptationSpec = field(default_factory=AdaptationSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


SECTIONS = {"dataset": DatasetSpec, "grid": GridSpec, "baselines": BaselineSpec,
            "calibration": CalibrationSpec, "adaptation": AdaptationSpec, "sweep": SweepSpec}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a table")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown option")
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from exc
    obj.validate()
    return obj


def parse_config(data: dict, name: str = "experiment") -> ExperimentConfig:
    allowed = {"name", "seeds", "output", "train", *SECTIONS}
    for key in data:
        if key not in allowed:
            raise ConfigError(key, "unknown section")
    if "dataset" not in data:
        raise ConfigError("dataset", "missing section")
    try:
        tc = TrainConfig.from_dict(dict(data.get("train", {})))
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    parts = {k: _section(cls, data[k], k) for k, cls in SECTIONS.items() if k in data}
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "need a positive count or a nonempty list of non-negative integers")
    return ExperimentConfig(data.get("name", name), train=tc, seeds=list(seeds),
                            output=data.get("output", "runs"), **parts)


def bundled_config_path(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.toml"


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file; a bare name like ``ac`` selects a bundled config."""
    p = Path(path)
    if not p.exists() and bundled_config_path(str(path)).exists():
        p = bundled_config_path(str(path))
    try:
        with open(p, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError("config", f"no such file {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{p}: {exc}") from exc
    return parse_config(data, p.stem)


# --------------------------------------------------------------------------- data

@dataclass
class Splits:
    train: list
    validation: object  # EnvDataset used for model selection
    test: object
    tag: str
    train_validation: list = field(default_factory=list)  # held-out training-domain samples


_MNIST_CACHE: dict = {}


def _mnist(split: str, directory):
    key = (split, str(directory))
    if key not in _MNIST_CACHE:
        found = find_mnist(split, directory)
        if found is None:
            raise FileNotFoundError(expected_files_message(directory))
        _MNIST_CACHE[key] = load_mnist_idx(*found)
    return _MNIST_CACHE[key]


def generate(cfg: ExperimentConfig, seed: int) -> Splits:
    ds = cfg.dataset
    if ds.tag in SYNTHETIC:
        gen = SYNTHETIC[ds.tag]
        tr = [gen(b, ds.n_train, seed=[seed, i], env_id=f"train{i}") for i, b in enumerate(ds.train)]
        va = gen(ds.validation, ds.n_validation, seed=[seed, 100], env_id="validation")
        te = gen(ds.test, ds.n_test, seed=[seed, 101], env_id="test")
        return Splits(tr, va, te, ds.tag)
    # every domain is built from MNIST train (fit and validation parts); tests come from t10k
    images, digits = _mnist("train", ds.data_dir)
    ids = [f"train{i}" for i in range(len(ds.train))] + ["validation"]
    envs = make_cmnist(images, digits, [*ds.train, ds.test], ds.label_noise, seed=seed, env_ids=ids)
    tr, tv = [], []
    for env in envs[:-1]:
        cut = len(env) - ds.n_validation
        idx = np.arange(len(env))
        tr.append(env.subset(idx[:cut]))
        tv.append(env.subset(idx[cut:], f"{env.env_id}-validation"))
    va = envs[-1].subset(np.arange(min(ds.n_validation, len(envs[-1]))))
    t_images, t_digits = _mnist("t10k", ds.data_dir)
    te = make_cmnist(t_images, t_digits, [ds.test], ds.label_noise, seed=[seed, 101], env_ids=["test"])[0]
    return Splits(tr, va, te, ds.tag, tv)


def sweep_domain(cfg: ExperimentConfig, value: float, seed: int, k: int):
    ds = cfg.dataset
    if ds.tag in SYNTHETIC:
        return SYNTHETIC[ds.tag](value, ds.n_test, seed=[seed, 200 + k], env_id=f"sweep{k}")
    images, digits = _mnist("t10k", ds.data_dir)
    return make_cmnist(images, digits, [noise_for_correlation(value)], ds.label_noise,
                       seed=[seed, 200 + k], env_ids=[f"sweep{k}"])[0]


def save_splits(splits: Splits, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sets = [*splits.train, *splits.train_validation, splits.validation, splits.test]
    if splits.tag == "CMNIST":
        save_container(directory / "data.npz", sets)
    else:
        write_csv(sets, directory / "data.csv")


# --------------------------------------------------------------------------- train + calibrate

def _accuracy(probs, y) -> float:
    probs = np.asarray(probs)
    pred = (probs > 0.5).astype(int) if probs.ndim == 1 else probs.argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def _calibration_set(cfg, splits):
    if cfg.calibration.fit_on == "validation":
        return splits.validation.x, splits.validation.y
    held = splits.train_validation or splits.train
    return np.concatenate([d.x for d in held]), np.concatenate([d.y for d in held])


def calibrate(model: SfbModel, cfg: ExperimentConfig, splits: Splits) -> CalibrationReport:
    x, y = _calibration_set(cfg, splits)
    report = CalibrationReport.build(model.stable_logits(x), y, cfg.calibration.grid, cfg.calibration.bins)
    model.temperature = report.temperature
    return report


def unstable_features(model: SfbModel):
    return lambda x: model.features(x)[1]


def adapt_model(model: SfbModel, cfg: ExperimentConfig, x, steps=None, bias_correction=True):
    learner = cfg.adaptation.make(steps)
    return adapt(model.stable_proba, learner, x, model.features(x)[1], rounds=cfg.adaptation.rounds,
                 bias_correction=bias_correction, on_uninformative="fallback", stable_ref="sfb.json")


def _selection_score(model, cfg, splits) -> float:
    va = splits.validation
    if cfg.grid.select_by == "stable_nll":
        return cross_entropy_risk(model.stable_proba(va.x), va.y)
    steps, _ = select_adaptation_steps(model, cfg, splits)
    res = adapt_model(model, cfg, va.x, steps)
    return -_accuracy(res.classifier.predict_proba(va.x, model.features(va.x)[1]), va.y)


@dataclass
class Trained:
    sfb: SfbModel
    erm: SfbModel
    irm: SfbModel
    calibration: CalibrationReport
    grid: list
    selected: dict


def _final_joint_risk(log):
    return float(np.mean([v for k, v in log[-1].items() if k.startswith("joint_risk")]))


def train_stage(cfg: ExperimentConfig, splits: Splits, seed: int) -> Trained:
    """Grid over (lambda_S, lambda_C, restart); keep the lowest selection score."""
    table, best = [], None
    for lam_s, lam_c, r in itertools.product(cfg.grid.lambda_S, cfg.grid.lambda_C, range(cfg.grid.restarts)):
        tc = replace(cfg.train, lambda_S=float(lam_s), lambda_C=float(lam_c), seed=seed * 1000 + r)
        log: list = []
        model = train(splits.train, tc, log)
        report = calibrate(model, cfg, splits)
        score = _selection_score(model, cfg, splits)
        row = {"lambda_S": float(lam_s), "lambda_C": float(lam_c), "restart": r, "score": score,
               "joint_risk": _final_joint_risk(log), "temperature": report.temperature}
        table.append(row)
        if best is None or score < best[0]:
            best = (score, model, report, row)

    base = replace(cfg.train, lambda_C=0.0, joint=False, seed=seed * 1000)
    erm = train(splits.train, replace(base, lambda_S=0.0, steps=cfg.baselines.erm_steps or base.steps,
                                      pretrain_steps=0))
    calibrate(erm, cfg, splits)
    irm_best = None
    for lam in cfg.baselines.irm_lambda_S:
        irm = train(splits.train, replace(base, lambda_S=float(lam)))
        calibrate(irm, cfg, splits)
        score = cross_entropy_risk(irm.stable_proba(splits.validation.x), splits.validation.y)
        if irm_best is None or score < irm_best[0]:
            irm_best = (score, irm)
    return Trained(best[1], erm, irm_best[1], best[2], table, best[3])


def save_trained(trained: Trained, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trained.sfb.save(directory / "sfb.json")
    trained.erm.save(directory / "erm.json")
    trained.irm.save(directory / "irm.json")
    (directory / "calibration.json").write_text(trained.calibration.to_json())
    (directory / "selection.json").write_text(json.dumps({"selected": trained.selected, "grid": trained.grid},
                                                         indent=2))


def load_trained(directory) -> Trained:
    directory = Path(directory)
    sel = json.loads((directory / "selection.json").read_text())
    return Trained(SfbModel.load(directory / "sfb.json"), SfbModel.load(directory / "erm.json"),
                   SfbModel.load(directory / "irm.json"),
                   CalibrationReport.from_json((directory / "calibration.json").read_text()),
                   sel["grid"], sel["selected"])


# --------------------------------------------------------------------------- adapt

@dataclass
class Adapted:
    classifier: AdaptedClassifier
    steps: int
    step_scores: dict
    rounds: list
    fallback: bool


def select_adaptation_steps(model, cfg, splits):
    """Pick the learner step count by adapted accuracy on labeled non-test domains."""
    candidates = list(cfg.adaptation.steps)
    if len(candidates) == 1 or cfg.adaptation.learner == "tabular":
        return candidates[0], {}
    if cfg.adaptation.select_on == "validation":
        domains = [splits.validation]
    else:
        domains = splits.train_validation or splits.train
    scores = {}
    for steps in candidates:
        accs = []
        for d in domains:
            res = adapt_model(model, cfg, d.x, steps)
            accs.append(_accuracy(res.classifier.predict_proba(d.x, model.features(d.x)[1]), d.y))
        scores[steps] = float(np.mean(accs))
    best = max(candidates, key=lambda s: (scores[s], -s))
    return best, scores


def _round_diagnostics(result):
    out = []
    for r in result.rounds:
        r = dict(r)
        conf = np.asarray(r["confusion"])
        if conf.shape == (2, 2):
            r["eps0"], r["eps1"] = float(conf[0, 0]), float(conf[1, 1])
        out.append(r)
    return out


def adapt_stage(cfg: ExperimentConfig, model: SfbModel, splits: Splits) -> Adapted:
    steps, scores = select_adaptation_steps(model, cfg, splits)
    res = adapt_model(model, cfg, splits.test.x, steps)
    return Adapted(res.classifier, steps, scores, _round_diagnostics(res), res.fallback)


# --------------------------------------------------------------------------- evaluate

def gt_adapted(model: SfbModel, cfg: ExperimentConfig, domain, steps) -> AdaptedClassifier:
    """Unstable learner fit on true test labels; no bias correction needed."""
    learner = cfg.adaptation.make(steps)
    y = np.asarray(domain.y)
    targets = y.astype(np.float64) if model.binary else np.eye(model.n_classes)[y]
    learner.fit(model.features(domain.x)[1], targets)
    prior = float(np.mean(y)) if model.binary else targets.mean(axis=0)
    return AdaptedClassifier(model.stable_proba, learner, None, prior, bias_correction=False)


def evaluate_methods(cfg: ExperimentConfig, trained: Trained, adapted: Adapted, domain) -> tuple:
    """Accuracy of every method on ``domain`` plus diagnostics for the naive variant."""
    m = trained.sfb
    phi = m.features(domain.x)[1]
    acc = {
        "ERM": _accuracy(trained.erm.stable_proba(domain.x), domain.y),
        "IRM": _accuracy(trained.irm.stable_proba(domain.x), domain.y),
        "SFB-no-adapt": _accuracy(m.stable_proba(domain.x), domain.y),
        "SFB": _accuracy(adapted.classifier.predict_proba(domain.x, phi), domain.y),
    }
    naive = adapt_model(m, cfg, domain.x, adapted.steps, bias_correction=False)
    acc["PL-naive"] = _accuracy(naive.classifier.predict_proba(domain.x, phi), domain.y)
    acc["GT-adapt"] = _accuracy(gt_adapted(m, cfg, domain, adapted.steps).predict_proba(domain.x, phi),
                                domain.y)
    if domain.tag in SYNTHETIC:
        oracle = bayes_oracle(domain.tag, domain.beta)
        acc["Oracle"] = _accuracy(oracle.posterior(domain.x[:, 0], domain.x[:, 1]), domain.y)
    return acc, {"pl_naive_rounds": _round_diagnostics(naive)}


def evaluate_stage(cfg: ExperimentConfig, trained: Trained, adapted: Adapted, splits: Splits, seed: int):
    acc, extra = evaluate_methods(cfg, trained, adapted, splits.test)
    diag = {
        "seed": seed,
        "dataset": cfg.dataset.tag,
        "selected": trained.selected,
        "grid": trained.grid,
        "calibration": asdict(trained.calibration),
        "temperature": trained.calibration.temperature,
        "adaptation": {"steps": adapted.steps, "step_scores": {str(k): v for k, v in adapted.step_scores.items()},
                       "fallback": adapted.fallback, "rounds": adapted.rounds, **extra},
        "accuracy": acc,
    }
    if cfg.dataset.tag in SYNTHETIC:
        diag["oracle_bayes_accuracy"] = bayes_oracle(cfg.dataset.tag, cfg.dataset.test).bayes_accuracy
    if cfg.dataset.tag == "CMNIST":
        diag["selection_protocol"] = "labeled test-domain validation split"
    return acc, diag


# --------------------------------------------------------------------------- orchestration

def _stage(name, seed, fn, *args):
    try:
        return fn(*args)
    except (KeyboardInterrupt, ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, seed, exc) from exc


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None):
    splits = _stage("generate", seed, generate, cfg, seed)
    trained = _stage("train", seed, train_stage, cfg, splits, seed)
    adapted = _stage("adapt", seed, adapt_stage, cfg, trained.sfb, splits)
    acc, diag = _stage("evaluate", seed, evaluate_stage, cfg, trained, adapted, splits, seed)
    if out is not None:
        seed_dir = Path(out) / "models" / f"seed{seed}"
        save_trained(trained, seed_dir)
        (seed_dir / "adapted.json").write_text(adapted.classifier.to_json())
        write_json(Path(out) / "diagnostics" / f"seed{seed}.json", diag)
        (Path(out) / "calibration").mkdir(parents=True, exist_ok=True)
        (Path(out) / "calibration" / f"seed{seed}.json").write_text(trained.calibration.to_json())
    return acc, diag


def run(cfg: ExperimentConfig, out, seeds=None, progress=None) -> list:
    """Full pipeline for every seed; writes per-seed rows, results.csv and report.txt."""
    from .report import aggregate, write_report, write_results

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds if seeds is not None else cfg.seeds:
        acc, _ = run_seed(cfg, seed, out)
        rows += [{"seed": seed, "method": k, "dataset": cfg.dataset.tag, "accuracy": v} for k, v in acc.items()]
        if progress:
            progress(seed, acc)
    write_per_seed(rows, out / "per_seed.csv")
    results = aggregate(rows)
    write_results(results, out / "results.csv")
    write_report(results, out / "report.txt")
    return results


def sweep(cfg: ExperimentConfig, out, seeds=None, plot: bool = False):
    """Evaluate each seed's trained and adapted model on every sweep domain."""
    values = list(cfg.sweep.values)
    if not values:
        raise ConfigError("sweep.values", "no sweep values configured")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    per = {}
    for seed in seeds if seeds is not None else cfg.seeds:
        splits = _stage("generate", seed, generate, cfg, seed)
        trained = _stage("train", seed, train_stage, cfg, splits, seed)
        steps, _ = select_adaptation_steps(trained.sfb, cfg, splits)
        for k, v in enumerate(values):
            domain = _stage("generate", seed, sweep_domain, cfg, v, seed, k)
            res = _stage("adapt", seed, adapt_model, trained.sfb, cfg, domain.x, steps)
            adapted = Adapted(res.classifier, steps, {}, [], res.fallback)
            acc, _ = _stage("evaluate", seed, evaluate_methods, cfg, trained, adapted, domain)
            for method, a in acc.items():
                per.setdefault(method, {}).setdefault(v, []).append(a)
    matrix = {m: {v: float(np.mean(per[m][v])) for v in values} for m in METHODS if m in per}
    axis = "correlation" if cfg.dataset.tag == "CMNIST" else "beta"
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", *[f"{axis}={v:g}" for v in values]])
        for m, row in matrix.items():
            w.writerow([m, *[f"{row[v]:.6f}" for v in values]])
    if plot:
        plot_sweep(matrix, values, axis, out / "sweep.png")
    return matrix


def plot_sweep(matrix, values, axis, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for m, row in matrix.items():
        ax.plot(values, [100 * row[v] for v in values], marker="o", label=m)
    ax.set_xlabel(axis)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_per_seed(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seed", "method", "dataset", "accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": repr(float(r["accuracy"]))})


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
