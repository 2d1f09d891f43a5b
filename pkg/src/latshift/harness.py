"""Experiment configuration, single runs, and sweep execution.

A sweep is the Cartesian product of settings x methods x seeds. The data
seed is derived from the setting alone, so every method and initialization
sees the same generated data and comparisons are paired. Results land in
results.csv (one row per run) and summary.json (mean and standard error per
setting/method).
"""

import csv
import json
import time
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .nn import ConfigError
from .model import (ModelDims, TrainHyper, AnnealSchedule, train_source,
                    save_checkpoint, checkpoint_hash)
from .adapt import (fit_target_prior, predict_target, source_predict,
                    append_adapted_prior)
from .datagen import (gen_app_a, gen_app_b, GenParamsA, GenParamsB,
                      PI_SOURCE_A, PI_TARGET_A, PI_SOURCE_B, PI_TARGET_B)
from .baselines import (ErmHyper, train_erm, erm_predict, bayes_oracle_app_a,
                        bayes_oracle_app_b, accuracy)

KNOWN_METHODS = ("rpm", "erm_source", "erm_target", "oracle")

RESULT_COLUMNS = ("generator", "setting", "method", "seed", "target_accuracy",
                  "source_accuracy", "recovered_q", "wall_time_seconds",
                  "checkpoint_hash", "failed")


@dataclass
class ExperimentConfig:
    generator: str = "app_a"
    settings: list = field(default_factory=lambda: [2, 10, 20])
    n_source: int = 70000
    n_target: int = 70000
    pi_source: list = None
    pi_target: list = None
    methods: list = field(default_factory=lambda: list(KNOWN_METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 1234
    rpm_hyper: dict = field(default_factory=dict)
    erm_hyper: dict = field(default_factory=dict)
    out: str = "results"

    def __post_init__(self):
        if self.generator not in ("app_a", "app_b"):
            raise ConfigError(f"unknown generator {self.generator}")
        if not self.settings:
            raise ConfigError("settings grid is empty")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown method {m}")
        if self.pi_source is None:
            self.pi_source = (PI_SOURCE_A if self.generator == "app_a"
                              else PI_SOURCE_B).tolist()
        if self.pi_target is None:
            self.pi_target = (PI_TARGET_A if self.generator == "app_a"
                              else PI_TARGET_B).tolist()
        for pi in (self.pi_source, self.pi_target):
            if abs(sum(pi) - 1.0) > 1e-9:
                raise ConfigError(f"pi {pi} not on the simplex")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def default_rpm_hyper(generator, seed, overrides=None):
    """Desk-scale training settings; epochs are held fixed across dataset
    sizes so larger datasets receive proportionally more optimizer steps."""
    if generator == "app_a":
        h = TrainHyper(epochs=150, batch_size=1000, lr_recognition=1e-3,
                       lr_generative=1e-3, lr_prior=1e-3,
                       anneal=AnnealSchedule(5.0, 1.0, 30), seed=seed)
    else:
        h = TrainHyper(epochs=400, batch_size=2000, lr_recognition=1e-3,
                       lr_generative=1e-3, lr_prior=1e-3,
                       anneal=AnnealSchedule(5.0, 1.0, 100), seed=seed)
    for k, v in (overrides or {}).items():
        if k == "anneal_epochs":
            h.anneal.anneal_epochs = int(v)
        else:
            setattr(h, k, v)
    return h


def default_erm_hyper(generator, seed, overrides=None):
    if generator == "app_a":
        h = ErmHyper(epochs=150, batch_size=128, lr=0.01, seed=seed)
    else:
        h = ErmHyper(epochs=80, batch_size=2000, lr=1e-3,
                     optimizer="adam", seed=seed)
    for k, v in (overrides or {}).items():
        setattr(h, k, v)
    return h


def _setting_data_seed(base, generator, setting):
    key = f"{base}:{generator}:{setting}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "big")


def make_datasets(config, setting):
    """Source and target batches for one setting; shared across methods."""
    ds = _setting_data_seed(config.data_seed, config.generator, setting)
    if config.generator == "app_a":
        src = gen_app_a(config.n_source, setting, config.pi_source, ds)
        tgt = gen_app_a(config.n_target, setting, config.pi_target, ds + 1)
    else:
        src = gen_app_b(int(setting), config.pi_source, ds)
        tgt = gen_app_b(int(setting), config.pi_target, ds + 1)
    return src, tgt.to_target()


def _model_dims(config, setting, src):
    if config.generator == "app_a":
        return ModelDims(k_u=2, k_c=2, k_y=2, d_x=setting, d_w=1, k_w=2)
    return ModelDims(k_u=3, k_c=3, k_y=2, d_x=src.x.shape[1],
                     d_w=src.w.shape[1])


def run_single(config, setting, method, seed, out_dir=None, datasets=None):
    """One (setting, method, seed) evaluation; returns a result dict."""
    t0 = time.perf_counter()
    src, tgt = datasets if datasets is not None else make_datasets(config, setting)
    row = {"generator": config.generator, "setting": setting, "method": method,
           "seed": seed, "recovered_q": None, "checkpoint_hash": None,
           "failed": False}
    try:
        if method == "rpm":
            dims = _model_dims(config, setting, src)
            hyper = default_rpm_hyper(config.generator, seed, config.rpm_hyper)
            model, mix, _ = train_source(src, dims, hyper)
            qprior, trace = fit_target_prior(model, mix, tgt.x)
            row["target_accuracy"] = accuracy(
                predict_target(model, mix, qprior, tgt.x), tgt.y_true)
            row["source_accuracy"] = accuracy(
                source_predict(model, mix, src.x), src.y)
            row["recovered_q"] = qprior.q.tolist()
            if out_dir is not None:
                ck = Path(out_dir) / f"rpm_{config.generator}_{setting}_{seed}.json"
                save_checkpoint(ck, model, mix, hyper, seed)
                append_adapted_prior(ck, qprior, trace)
                row["checkpoint_hash"] = checkpoint_hash(ck)
        elif method in ("erm_source", "erm_target"):
            hyper = default_erm_hyper(config.generator, seed, config.erm_hyper)
            if method == "erm_source":
                clf = train_erm(src.x, src.y, hyper)
            else:
                clf = train_erm(tgt.x, tgt.y_true, hyper)   # oracle upper bound
            row["target_accuracy"] = accuracy(erm_predict(clf, tgt.x), tgt.y_true)
            row["source_accuracy"] = accuracy(erm_predict(clf, src.x), src.y)
        elif method == "oracle":
            if config.generator == "app_a":
                gp = GenParamsA(d_x=setting, pi=np.asarray(config.pi_source))
                pred_t = bayes_oracle_app_a(gp, config.pi_target, tgt.x)
                pred_s = bayes_oracle_app_a(gp, config.pi_source, src.x)
            else:
                gp = GenParamsB(pi=np.asarray(config.pi_source))
                pred_t = bayes_oracle_app_b(gp, config.pi_target, tgt.x)
                pred_s = bayes_oracle_app_b(gp, config.pi_source, src.x)
            row["target_accuracy"] = accuracy(pred_t, tgt.y_true)
            row["source_accuracy"] = accuracy(pred_s, src.y)
        else:
            raise ConfigError(f"unknown method {method}")
    except Exception as exc:   # failure isolation: record, keep sweeping
        row.update({"failed": True, "target_accuracy": float("nan"),
                    "source_accuracy": float("nan"), "error": str(exc)})
    row["wall_time_seconds"] = time.perf_counter() - t0
    return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "|".join(repr(float(x)) for x in v)
    return str(v)


def _row_key(row):
    return (str(row["setting"]), row["method"], str(row["seed"]))


def _read_existing(path):
    done = {}
    if path.exists():
        with open(path) as fh:
            for row in csv.DictReader(fh):
                row["failed"] = row["failed"] == "True"
                done[(row["setting"], row["method"], row["seed"])] = row
    return done


def _job(args):
    config_dict, setting, method, seed, out_dir = args
    return run_single(ExperimentConfig(**config_dict), setting, method, seed,
                      out_dir)


def run_sweep(config, out_dir=None, jobs=1, emit_plot_data=False):
    """Execute the full grid; idempotent over an existing output directory.

    Returns (rows, any_failed). Rows are ordered by (setting, method, seed).
    """
    out_dir = Path(out_dir if out_dir is not None else config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.csv"
    done = _read_existing(results_path)

    grid = [(s, m, k) for s in config.settings
            for m in sorted(config.methods) for k in sorted(config.seeds)]
    pending = [(s, m, k) for (s, m, k) in grid
               if (str(s), m, str(k)) not in done]

    cfg_dict = asdict(config)
    if jobs > 1 and pending:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            fresh = list(ex.map(_job, [(cfg_dict, s, m, k, str(out_dir))
                                       for (s, m, k) in pending]))
    else:
        fresh = []
        cache = {}
        for (s, m, k) in pending:
            if s not in cache:
                cache = {s: make_datasets(config, s)}   # keep one setting live
            fresh.append(run_single(config, s, m, k, out_dir,
                                    datasets=cache[s]))
    for row in fresh:
        done[_row_key(row)] = row

    rows = [done[(str(s), m, str(k))] for (s, m, k) in grid]
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in RESULT_COLUMNS])

    summary = summarize(rows)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    if emit_plot_data:
        emit_plot_files(summary, out_dir)
    any_failed = any(r["failed"] for r in rows)
    return rows, any_failed


def summarize(rows):
    """Mean and standard error of target accuracy per (setting, method)."""
    groups = {}
    for r in rows:
        if r["failed"]:
            continue
        groups.setdefault((str(r["setting"]), r["method"]), []).append(
            float(r["target_accuracy"]))
    def order(key):
        setting, method = key
        try:
            return (float(setting), method)
        except ValueError:
            return (float("inf"), setting + method)

    out = []
    for (setting, method), vals in sorted(groups.items(), key=lambda kv: order(kv[0])):
        arr = np.asarray(vals)
        se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        out.append({"setting": setting, "method": method,
                    "mean_target_accuracy": float(arr.mean()),
                    "stderr_target_accuracy": se, "n_runs": len(arr)})
    return out


def emit_plot_files(summary, out_dir):
    """One CSV per method: setting, mean, stderr — consumable by any plotter."""
    by_method = {}
    for s in summary:
        by_method.setdefault(s["method"], []).append(s)
    for method, entries in by_method.items():
        with open(Path(out_dir) / f"curve_{method}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "mean", "stderr"])
            for e in entries:
                writer.writerow([e["setting"], repr(e["mean_target_accuracy"]),
                                 repr(e["stderr_target_accuracy"])])
