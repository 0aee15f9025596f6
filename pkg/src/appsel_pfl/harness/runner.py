"""Execute one experiment config end to end.

Every mode writes into its output directory only: ``config.yaml`` (the
effective config), a metrics stream (JSON lines), checkpoints and
``report.json``. Metrics streams and checkpoints are pure functions of the
config; wall time appears only in the report.
"""
from __future__ import annotations

import functools
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from appsel_pfl import engine, fedstats, model, synth
from appsel_pfl.accountant import (
    MechanismSpec, PrivacyBudget, PrivacyLedger, calibrate_sigma, epsilon_for,
)
from appsel_pfl.checkpoint import load_checkpoint, load_checkpoint_full, params_digest, save_checkpoint
from appsel_pfl.engine import (
    CohortUnderflowError, DivergenceError, FederatedPopulation, ServerState, TaskFilter,
)
from appsel_pfl.harness.config import (
    FINETUNE_MODES, ConfigError, ExperimentConfig, config_hash, dump_config,
)
from appsel_pfl.nn import AdamWState

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4

METRIC_FIELDS = ("iteration", "train_loss", "val_accuracy", "cder", "disambiguation_rate",
                 "epsilon_spent", "wall_ms")


class FeasibilityError(RuntimeError):
    def __init__(self, message: str, eligibility: fedstats.EligibilityReport):
        super().__init__(message)
        self.eligibility = eligibility


@dataclass
class RunResult:
    exit_code: int
    report: dict
    out_dir: Path

    @property
    def status(self) -> str:
        return self.report["status"]


# -- data -------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _datasets(data_cfg: synth.DataConfig) -> dict:
    return synth.make_experiment_datasets(data_cfg)


def datasets_for(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    return _datasets(synth.DataConfig(d.num_users, d.train_size, d.valid_size, d.drift_strength,
                                      d.concentration, cfg.seed))


def population_for(cfg: ExperimentConfig) -> FederatedPopulation:
    records = datasets_for(cfg)[cfg.train_split]
    return engine.partition_population(records, cfg.data.mean_points_per_user, cfg.seed,
                                       cfg.data.partition)


def task_filter_for(cfg: ExperimentConfig) -> TaskFilter:
    f = cfg.task_filter
    return TaskFilter(None if f.os_versions is None else frozenset(f.os_versions),
                      None if f.asset_versions is None else frozenset(f.asset_versions))


def thresholds_for(cfg: ExperimentConfig) -> model.Thresholds:
    return model.Thresholds(cfg.thresholds.tau_epistemic, cfg.thresholds.tau_aleatoric)


# -- output -----------------------------------------------------------------

def _num(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def metrics_line(row: dict) -> str:
    return json.dumps({k: _num(row.get(k)) for k in METRIC_FIELDS}, separators=(", ", ": "))


class MetricsStream:
    def __init__(self, path: Path, prior: list[dict] = ()):
        self.path = path
        self.rows = list(prior)
        path.write_text("".join(metrics_line(r) + "\n" for r in self.rows), encoding="utf-8")

    def __call__(self, row: dict) -> None:
        self.rows.append(row)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(metrics_line(row) + "\n")


def _final(row: dict | None) -> dict:
    if not row:
        return {}
    return {"accuracy": row.get("val_accuracy"), "cder": row.get("cder"),
            "disambiguation_rate": row.get("disambiguation_rate"),
            "epsilon_spent": _num(row.get("epsilon_spent"))}


def _eval_final(params, batch, thresholds, eps=None) -> dict:
    ev = model.evaluate(params, batch, thresholds)
    return {"accuracy": ev["accuracy"], "cder": ev["cder"],
            "disambiguation_rate": ev["disambiguation_rate"], "epsilon_spent": _num(eps)}


# -- state checkpoints ------------------------------------------------------

def save_state(path: Path, state: ServerState, cfg: ExperimentConfig, history: list[dict],
               q: float) -> None:
    extra, meta = {}, {"iteration": state.iteration, "sigma": state.sigma, "q": q,
                       "config_hash": config_hash(cfg), "history": [
                           {k: _num(r.get(k)) for k in METRIC_FIELDS} for r in history]}
    opt = state.optimizer
    if isinstance(opt, AdamWState):
        meta["step_count"] = opt.step_count
        if opt.first_moment is not None:
            extra = {"adam.first_moment": opt.first_moment,
                     "adam.second_moment": opt.second_moment}
    save_checkpoint(state.params, path, extra, meta)


def load_state(path, cfg: ExperimentConfig) -> tuple[ServerState, list[dict], float]:
    params, extra, meta = load_checkpoint_full(path)
    if meta.get("config_hash") != config_hash(cfg):
        raise ConfigError(f"resume_from: {path} was written by a different configuration")
    opt = engine.make_optimizer(cfg.training)
    if isinstance(opt, AdamWState):
        opt.step_count = int(meta.get("step_count", 0))
        if "adam.first_moment" in extra:
            opt.first_moment = extra["adam.first_moment"].copy()
            opt.second_moment = extra["adam.second_moment"].copy()
    sigma, q = float(meta["sigma"]), float(meta["q"])
    ledger = None
    if sigma > 0:
        ledger = PrivacyLedger(MechanismSpec(sigma, q, cfg.training.central_iterations),
                               cfg.training.delta_dp)
        ledger.record(int(meta["iteration"]))
    history = [{k: (math.inf if k == "epsilon_spent" and v is None else v)
                for k, v in r.items()} for r in meta.get("history", [])]
    state = ServerState(params, opt, int(meta["iteration"]), ledger, sigma,
                        {"master_seed": cfg.seed})
    return state, history, q


# -- gate -------------------------------------------------------------------

def feasibility_gate(cfg: ExperimentConfig, pop: FederatedPopulation,
                     cohort: int | None = None) -> fedstats.EligibilityReport:
    cohort = cfg.training.devices_per_iteration if cohort is None else cohort
    rep = fedstats.count_eligible_devices(pop, task_filter_for(cfg), cfg.fedstats.noise_scale,
                                          cfg.seed, cohort, cfg.fedstats.safety_factor)
    if not rep.feasible:
        raise FeasibilityError(
            f"only {rep.noisy_count:.1f} eligible devices (noisy); need {rep.required:g}", rep)
    return rep


# -- modes ------------------------------------------------------------------

def _initial_params(cfg: ExperimentConfig):
    if cfg.init_checkpoint:
        return load_checkpoint(cfg.init_checkpoint).with_frozen(())
    return model.init_params(cfg.seed)


def _pfl(cfg: ExperimentConfig, out: Path, pop, valid, training, initial, stream_name,
         ckpt_name, clock=None):
    """One federated run writing a metrics stream and a final checkpoint."""
    tf = task_filter_for(cfg)
    q = engine.sampling_rate(training, pop, tf)
    prior: list[dict] = []
    if cfg.resume_from:
        state, prior, q = load_state(cfg.resume_from, cfg)
    else:
        state = engine.init_state(training, initial, q)
    stream = MetricsStream(out / stream_name, prior)
    ckpt_dir = out / "checkpoints"

    def on_eval(row):
        stream(row)
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_state(ckpt_dir / f"{Path(ckpt_name).stem}-{state.iteration:05d}.json", state,
                       cfg, stream.rows, q)

    try:
        engine.run_training(training, pop, valid, initial, thresholds_for(cfg), tf,
                            state=state, on_eval=on_eval, clock=clock)
    finally:
        save_state(out / ckpt_name, state, cfg, stream.rows, q)
    return state, stream.rows, q


def _mode_train_pfl(cfg, out, ds, valid, clock):
    pop = population_for(cfg)
    gate = feasibility_gate(cfg, pop)
    initial = _initial_params(cfg)
    details = {"eligible_devices": gate.noisy_count}
    base = None
    if cfg.mode in FINETUNE_MODES:
        base = _eval_final(initial, valid, thresholds_for(cfg))
        frozen = sorted(model.frozen_names(initial, cfg.training.freeze_policy))
        details["frozen_before"] = params_digest(initial, frozen)
    state, rows, q = _pfl(cfg, out, pop, valid, cfg.training, initial, "metrics.jsonl",
                          "checkpoint.json", clock)
    details.update(sigma=state.sigma, q=q, iterations=state.iteration)
    if base is not None:
        details["frozen_after"] = params_digest(state.params, sorted(details["frozen_before"]))
        details["frozen_unchanged"] = details["frozen_after"] == details["frozen_before"]
    final = _eval_final(state.params, valid, thresholds_for(cfg), state.epsilon_spent())
    if base is not None:
        # the same comparison at the baseline's disambiguation rate
        th = model.match_disambiguation_rate(state.params, valid, base["disambiguation_rate"],
                                             cfg.thresholds.tau_epistemic)
        matched = _eval_final(state.params, valid, th, state.epsilon_spent())
        details["matched_operating_point"] = {
            "tau_aleatoric": th.tau_aleatoric, **matched, "deltas": _deltas(matched, base)}
    return final, base, details


def _mode_train_central(cfg, out, ds, valid, clock):
    train = synth.to_batch(ds[cfg.train_split])
    params, hist = engine.train_central(
        replace(cfg.central, freeze_policy="none"), train, valid, _initial_params(cfg),
        thresholds_for(cfg))
    stream = MetricsStream(out / "metrics.jsonl")
    for h in hist:
        stream({"iteration": h["epoch"], "train_loss": h["train_loss"],
                "val_accuracy": h["val_accuracy"], "cder": h["cder"],
                "disambiguation_rate": h["disambiguation_rate"], "epsilon_spent": math.inf,
                "wall_ms": None})
    save_checkpoint(params, out / "checkpoint.json", meta={"config_hash": config_hash(cfg)})
    return _eval_final(params, valid, thresholds_for(cfg), math.inf), None, {"epochs": len(hist)}


def plateau_stats(rows: list[dict]) -> dict:
    """Accuracy gained over the last quarter of a curve, in absolute points.

    The gain is the least-squares trend across the last quarter of the evals
    (endpoints included) times its span, so single noisy evals do not decide it.
    """
    pts = [(r["iteration"], r["val_accuracy"]) for r in rows if r.get("val_accuracy") is not None]
    if len(pts) < 2:
        return {"last_quarter_gain_points": 0.0}
    k = max(1, len(pts) // 4)
    x, y = np.array(pts[-1 - k:], dtype=float).T
    slope = np.polyfit(x, y, 1)[0]
    return {"last_quarter_gain_points": float(100.0 * slope * (x[-1] - x[0]))}


def _mode_cohort_sweep(cfg, out, ds, valid, clock):
    pop = population_for(cfg)
    feasibility_gate(cfg, pop, max(cfg.cohort_sizes))
    initial = _initial_params(cfg)
    runs = {}
    for n in cfg.cohort_sizes:
        training = replace(cfg.training, devices_per_iteration=n)
        state, rows, q = _pfl(replace(cfg, resume_from=None), out, pop, valid, training,
                              initial, f"metrics-cohort{n}.jsonl", f"checkpoint-cohort{n}.json",
                              clock)
        runs[str(n)] = {**_eval_final(state.params, valid, thresholds_for(cfg),
                                      state.epsilon_spent()),
                        **plateau_stats(rows), "sigma": state.sigma, "q": q}
    smallest = runs[str(min(cfg.cohort_sizes))]["accuracy"]
    for r in runs.values():
        r["relative_accuracy_improvement"] = (r["accuracy"] - smallest) / smallest
    best = max(runs, key=lambda k: runs[k]["accuracy"])
    largest = runs[str(max(cfg.cohort_sizes))]
    return dict(largest), None, {"cohorts": runs, "best_cohort": int(best)}


def _mode_fedstats(cfg, out, ds, valid, clock):
    pop = population_for(cfg)
    query = fedstats.HistogramQuery(cfg.fedstats.key, task_filter_for(cfg),
                                    cfg.fedstats.noise_scale)
    hist = fedstats.run_query(pop, query, cfg.seed)
    with (out / "histogram.jsonl").open("w", encoding="utf-8") as fh:
        for row in hist.rows():
            fh.write(json.dumps(row) + "\n")
    rep = fedstats.count_eligible_devices(pop, task_filter_for(cfg), cfg.fedstats.noise_scale,
                                          cfg.seed, cfg.training.devices_per_iteration,
                                          cfg.fedstats.safety_factor)
    return {}, None, {"histogram": hist.rows(), "eligible_devices": rep.noisy_count,
                      "required_devices": rep.required, "feasible": rep.feasible}


def _mode_calibrate(cfg, out, ds, valid, clock):
    pop = population_for(cfg)
    t = cfg.training
    q = engine.sampling_rate(t, pop, task_filter_for(cfg))
    sigma = calibrate_sigma(PrivacyBudget(t.epsilon, t.delta_dp), q, t.central_iterations)
    eps, order = epsilon_for(MechanismSpec(sigma, q, t.central_iterations), t.delta_dp)
    return {}, None, {"sigma": sigma, "q": q, "steps": t.central_iterations,
                      "epsilon_accounted": eps, "order": order}


def _mode_simulate(cfg, out, ds, valid, clock):
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    hashes = {}
    for split, records in ds.items():
        synth.write_records(records, data_dir / f"{split}.jsonl")
        hashes[split] = synth.dataset_hash(records)
    return {}, None, {"dataset_hashes": hashes, "sizes": {k: len(v) for k, v in ds.items()}}


def _mode_evaluate(cfg, out, ds, valid, clock):
    params = load_checkpoint(cfg.init_checkpoint)
    return _eval_final(params, valid, thresholds_for(cfg)), None, {}


_MODES = {
    "train-central": _mode_train_central,
    "train-pfl-scratch": _mode_train_pfl,
    "finetune-all": _mode_train_pfl,
    "finetune-top": _mode_train_pfl,
    "cohort-sweep": _mode_cohort_sweep,
    "fedstats": _mode_fedstats,
    "calibrate-noise": _mode_calibrate,
    "simulate-data": _mode_simulate,
    "evaluate": _mode_evaluate,
}


def _deltas(final: dict, base: dict | None) -> dict:
    if not base:
        return {}
    out = {}
    for k in ("accuracy", "cder", "disambiguation_rate"):
        if final.get(k) is not None and base.get(k) is not None:
            out[k] = final[k] - base[k]
    return out


def run(cfg: ExperimentConfig, clock=None) -> RunResult:
    """Run ``cfg``; failures map to exit codes and still leave a report behind."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    t0 = time.perf_counter()
    ds = datasets_for(cfg)
    valid = synth.to_batch(ds[cfg.valid_split])
    report = {"mode": cfg.mode, "status": "ok", "config_hash": config_hash(cfg), "seed": cfg.seed,
              "dataset_hash": synth.dataset_hash(ds[cfg.valid_split]),
              "train_dataset_hash": synth.dataset_hash(ds[cfg.train_split]),
              "final": {}, "baseline": None, "deltas": {}, "details": {}}
    code = EXIT_OK
    try:
        final, base, details = _MODES[cfg.mode](cfg, out, ds, valid, clock)
        report.update(final=final, baseline=base, deltas=_deltas(final, base), details=details)
    except FeasibilityError as exc:
        report.update(status="infeasible", error=str(exc),
                      details={"eligible_devices": exc.eligibility.noisy_count,
                               "required_devices": exc.eligibility.required})
        code = EXIT_INFEASIBLE
    except CohortUnderflowError as exc:
        report.update(status="infeasible", error=str(exc))
        code = EXIT_INFEASIBLE
    except DivergenceError as exc:
        report.update(status="diverged", error=str(exc), final=_final(
            exc.history[-1] if exc.history else None), details={"iteration": exc.iteration})
        code = EXIT_DIVERGED
    report["wall_time_s"] = round(time.perf_counter() - t0, 3)
    write_report(report, out / "report.json")
    return RunResult(code, report, out)


def write_report(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")
