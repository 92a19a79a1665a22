"""Experiment orchestration: build the task, run rounds, emit metrics.

A run is a pure function of its configuration: dataset generation, the
train/test split, client partitioning, model init, client sampling and every
perturbation all derive from the master seed, so re-running a config
reproduces the metrics file byte for byte (wall_time excepted).

Outputs per run directory:
    config.yaml     resolved configuration echo
    metrics.jsonl   one self-contained record per eval point
    final.fspz      final global model checkpoint
    payloads/       final round's client payloads (binary, inspectable)
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import costs, data as data_mod, models, protocol
from .config import ExperimentConfig, dump_config
from .errors import ConfigError

METRIC_FIELDS = ("round", "loss", "acc", "fw_flops", "perturb_flops", "update_flops",
                 "upload_bytes", "download_bytes", "peak_mem", "wall_time", "task", "method")


@dataclass
class ExperimentSetup:
    """Everything a run needs, derived deterministically from the config."""

    cfg: ExperimentConfig
    spec: models.ModelSpec
    theta0: np.ndarray
    client_datasets: list
    test_set: data_mod.Dataset
    fingerprint: str


def load_dataset(cfg: ExperimentConfig) -> data_mod.Dataset:
    d = cfg.data
    if d.source == "blobs":
        dataset = data_mod.make_blobs(d.n, d.dim, d.num_classes, d.spread, d.seed)
    else:
        dataset = data_mod.load_csv(d.path, d.label_column)
    if d.standardize:
        dataset = data_mod.standardize(dataset)
    return dataset


def build_setup(cfg: ExperimentConfig) -> ExperimentSetup:
    dataset = load_dataset(cfg)
    train, test = data_mod.train_test_split_stratified(
        dataset, cfg.data.test_fraction, protocol.fold_seed(cfg.master_seed, protocol.TAG_DATA))
    plan = data_mod.partition(train, cfg.n_clients, cfg.partition.scheme,
                              protocol.fold_seed(cfg.master_seed, protocol.TAG_DATA, 1),
                              alpha=cfg.partition.alpha)
    client_datasets = [train.subset(plan.client_indices(cid)) for cid in range(cfg.n_clients)]
    spec = cfg.build_model_spec(dataset.dim, dataset.num_classes)
    if cfg.method == "fedspzo" and spec.cut is None:
        raise ConfigError("fedspzo requires a model with a cut layer")
    theta0 = models.init_params(spec, protocol.fold_seed(cfg.master_seed, protocol.TAG_INIT))
    return ExperimentSetup(cfg=cfg, spec=spec, theta0=theta0,
                           client_datasets=client_datasets, test_set=test,
                           fingerprint=cfg.task_fingerprint())


def modeled_peak_memory(cfg: ExperimentConfig, spec: models.ModelSpec) -> int:
    """Per-method memory model; fedspzo holds the cut activation, other ZO
    methods don't, backprop keeps all activations plus a gradient vector."""
    if cfg.method == "fedspzo":
        return costs.peak_memory_model(spec, spec.cut, cfg.batch_size)
    if cfg.method == "fedavg_fo":
        bytes_per = 4 if spec.precision == 32 else 8
        acts = sum(spec.layer_output_sizes(cfg.batch_size))
        return (2 * spec.num_params + acts) * bytes_per
    return costs.peak_memory_model(spec, None, cfg.batch_size)


def run_experiment(cfg: ExperimentConfig, out_dir, force: bool = False,
                   workers: int = 1) -> Path:
    """Execute the configured run; returns the output directory."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use force to overwrite)")
        for p in sorted(out.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    setup = build_setup(cfg)
    spec = setup.spec
    theta = setup.theta0.copy()
    ledger = costs.CostLedger()
    ledger.observe_peak_memory(modeled_peak_memory(cfg, spec))
    method_cfg = cfg.method_config()
    started = time.monotonic()
    final_blobs = None

    with open(out / "metrics.jsonl", "w") as metrics_file:
        def emit(round_id: int) -> None:
            loss, acc = models.evaluate(spec, theta, setup.test_set.features,
                                        setup.test_set.labels)
            snap = ledger.snapshot()
            record = {
                "round": round_id,
                "loss": loss,
                "acc": acc,
                "fw_flops": snap["fw_flops"],
                "perturb_flops": snap["perturb_flops"],
                "update_flops": snap["update_flops"],
                "upload_bytes": snap["upload_bytes"],
                "download_bytes": snap["download_bytes"],
                "peak_mem": snap["peak_memory_bytes"],
                "wall_time": round(time.monotonic() - started, 3),
                "task": setup.fingerprint,
                "method": cfg.method,
            }
            metrics_file.write(json.dumps(record) + "\n")

        emit(0)
        for round_id in range(1, cfg.rounds + 1):
            plan = protocol.plan_round(cfg.master_seed, round_id, cfg.n_clients,
                                       cfg.num_sampled)
            keep = round_id == cfg.rounds
            theta, blobs = protocol.run_round(
                spec, theta, plan, cfg.method, method_cfg, cfg.local_steps,
                cfg.batch_size, setup.client_datasets, cfg.master_seed,
                payload_mode=cfg.payload_mode, ledger=ledger, workers=workers,
                keep_payloads=keep)
            if keep:
                final_blobs = blobs
            if round_id % cfg.eval_every == 0 or round_id == cfg.rounds:
                emit(round_id)

    models.save_checkpoint(out / "final.fspz", spec, theta)
    if final_blobs:
        pdir = out / "payloads"
        pdir.mkdir(exist_ok=True)
        for cid, blob in sorted(final_blobs.items()):
            (pdir / f"round{cfg.rounds:05d}_client{cid:04d}.fspb").write_bytes(blob)
    return out


def read_metrics(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: bad metrics record ({exc})") from None
            records.append(rec)
    if not records:
        raise ConfigError(f"{path}: no metrics records")
    return records


@dataclass(frozen=True)
class ThresholdHit:
    reached: bool
    round: int | None = None
    fw_flops: int | None = None


def _first_hit(records: list[dict], key: str, target: float, downward: bool) -> ThresholdHit:
    for rec in records:
        good = rec[key] <= target if downward else rec[key] >= target
        if good:
            return ThresholdHit(True, rec["round"], rec["fw_flops"])
    return ThresholdHit(False)


def compare_report(paths, baseline_index: int = 0, acc_thresholds=(0.9,)) -> dict:
    """Rounds and forward FLOPs each run needs to reach shared targets.

    The loss target is the baseline run's best test loss; accuracy targets
    are given explicitly. Ratios are relative to the baseline's cost at the
    same target; runs that never get there are reported as not reached.
    """
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise ConfigError("compare needs at least two metrics files")
    if not 0 <= baseline_index < len(paths):
        raise ConfigError(f"baseline index {baseline_index} out of range")
    runs = [read_metrics(p) for p in paths]
    tasks = {rec["task"] for run in runs for rec in run}
    if len(tasks) != 1:
        raise ConfigError(f"metrics files come from different tasks: {sorted(tasks)}")

    baseline = runs[baseline_index]
    loss_target = min(rec["loss"] for rec in baseline)
    targets = [("loss", loss_target, True)]
    targets += [("acc", thr, False) for thr in acc_thresholds]

    report = {"baseline": str(paths[baseline_index]), "targets": [], "task": tasks.pop()}
    for key, target, downward in targets:
        base_hit = _first_hit(baseline, key, target, downward)
        entry = {"metric": key, "target": target, "runs": []}
        for path, run in zip(paths, runs):
            hit = _first_hit(run, key, target, downward)
            row = {
                "path": str(path),
                "method": run[-1]["method"],
                "reached": hit.reached,
                "rounds": hit.round,
                "fw_flops": hit.fw_flops,
                "flops_ratio": None,
            }
            if hit.reached and base_hit.reached and base_hit.fw_flops:
                row["flops_ratio"] = hit.fw_flops / base_hit.fw_flops
            entry["runs"].append(row)
        report["targets"].append(entry)
    return report


def format_report(report: dict) -> str:
    lines = [f"baseline: {report['baseline']}", f"task: {report['task']}"]
    for entry in report["targets"]:
        lines.append(f"\n{entry['metric']} target {entry['target']:.6g}:")
        for row in entry["runs"]:
            if row["reached"]:
                ratio = "-" if row["flops_ratio"] is None else f"{row['flops_ratio']:.3f}"
                lines.append(f"  {row['method']:<12} round {row['rounds']:>5}  "
                             f"fw_flops {row['fw_flops']:>16,}  ratio {ratio}")
            else:
                lines.append(f"  {row['method']:<12} not reached")
    return "\n".join(lines)
