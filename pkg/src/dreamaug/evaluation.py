"""Domain-generalization protocols: leave-one-domain-out, single-source grid,
cue-conflict bias probe, and the ablation / sweep drivers built on them.

Each protocol expands into independent jobs (config label, seed, sources,
target). Jobs are pure functions of (dataset, job), so they can run in any
order or in worker processes; the report is assembled in job order.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dream import bounds_from_normalization
from .errors import ConfigError, DataError
from .model import Arch, Model, init_model
from .synth import CueConflictSet, DomainDataset, make_cue_conflict, normalize
from .training import MODES, TrainConfig, train

log = logging.getLogger(__name__)

PROTOCOLS = ("leave_one_out", "single_source_matrix", "bias_probe", "ablation",
             "divergence_sweep", "alpha_sweep", "tau_sweep")
# rows (a)-(d) of the SD ablation
ABLATION_MODES = ("sd_consistency", "deepdream_consistency", "sd_ce", "erm")
ALPHA_GRID = (0.01, 0.03, 0.09, 0.15, 0.3, 0.6, 0.9)
TAU_GRID = (1.0, 3.0, 5.0, 10.0, 20.0)
DIVERGENCE_GRID = ("mse", "js", "kl")


@dataclass
class ExperimentSpec:
    protocol: str = "leave_one_out"
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Arch = field(default_factory=Arch)
    # held-out domains for leave-one-out style protocols; None = every domain
    targets: Optional[tuple] = None
    # training domains for bias_probe; None = every domain
    train_domains: Optional[tuple] = None
    modes: tuple = ABLATION_MODES
    alphas: tuple = ALPHA_GRID
    taus: tuple = TAU_GRID
    divergences: tuple = DIVERGENCE_GRID
    probe_n: int = 0
    probe_seed: int = 12345

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {list(PROTOCOLS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.protocol == "ablation" and not self.modes:
            raise ConfigError("ablation needs at least one mode")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.protocol == "alpha_sweep" and not self.alphas:
            raise ConfigError("alpha_sweep needs a non-empty alphas grid")
        if self.protocol == "tau_sweep" and not self.taus:
            raise ConfigError("tau_sweep needs a non-empty taus grid")
        if self.protocol == "divergence_sweep" and not self.divergences:
            raise ConfigError("divergence_sweep needs a non-empty divergences grid")
        if self.probe_n < 0:
            raise ConfigError("probe_n must be >= 0")
        self.arch.validate()
        self.train.validate()


@dataclass
class Job:
    label: str
    value: object
    seed: int
    sources: tuple
    target: Optional[str]
    train: TrainConfig


def evaluate(model: Model, images: np.ndarray, labels: Sequence[int], batch_size: int = 256) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    preds = predict(model, images, batch_size)
    if len(preds) == 0:
        raise DataError("evaluate() needs a non-empty set")
    return float(np.mean(preds == np.asarray(labels)))


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch_size):
        logits = model.predict_logits(ad.Tensor(images[lo:lo + batch_size])).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def run_bias_probe(model: Model, probe: CueConflictSet, mean=None, std=None) -> dict:
    """Fractions of probes classified by shape, by texture, or by neither."""
    if len(probe.images) == 0:
        raise DataError("bias probe is empty")
    images = probe.images if mean is None else normalize(probe.images, mean, std)
    preds = predict(model, images)
    shape = float(np.mean(preds == probe.shape_labels))
    texture = float(np.mean(preds == probe.texture_labels))
    return {"shape_match_frac": shape, "texture_match_frac": texture, "other_frac": 1.0 - shape - texture}


# -- job expansion ---------------------------------------------------------
def _variants(spec: ExperimentSpec) -> List[tuple]:
    """(label, value, TrainConfig) for every configuration the protocol compares."""
    base = spec.train
    p = spec.protocol
    if p == "ablation":
        return [(m, m, replace(base, mode=m)) for m in spec.modes]
    if p == "alpha_sweep":
        return [(f"alpha={a:g}", float(a), replace(base, mode="sd_consistency", dream=replace(base.dream, alpha=float(a))))
                for a in spec.alphas]
    if p == "tau_sweep":
        return [(f"tau={t:g}", float(t), replace(base, mode="sd_consistency", tau=float(t))) for t in spec.taus]
    if p == "divergence_sweep":
        return [(d, d, replace(base, mode="sd_consistency", divergence=d)) for d in spec.divergences]
    if p == "bias_probe":
        return [(m, m, replace(base, mode=m)) for m in spec.modes]
    return [(base.mode, base.mode, base)]


def expand_jobs(spec: ExperimentSpec, domains: Sequence[str]) -> List[Job]:
    domains = tuple(domains)
    if spec.protocol != "bias_probe" and len(domains) < 2:
        raise DataError("domain-generalization protocols need at least 2 domains")
    targets = tuple(domains if spec.targets is None else spec.targets)
    for t in targets:
        if t not in domains:
            raise DataError(f"unknown target domain {t!r}")
    jobs = []
    for label, value, cfg in _variants(spec):
        for seed in spec.seeds:
            run_cfg = replace(cfg, seed=int(seed))
            if spec.protocol == "single_source_matrix":
                for src in domains:
                    jobs.append(Job(label, value, int(seed), (src,), None, run_cfg))
            elif spec.protocol == "bias_probe":
                src = tuple(domains if spec.train_domains is None else spec.train_domains)
                jobs.append(Job(label, value, int(seed), src, None, run_cfg))
            else:
                for t in targets:
                    jobs.append(Job(label, value, int(seed), tuple(d for d in domains if d != t), t, run_cfg))
    return jobs


# -- job execution ---------------------------------------------------------
_WORKER_DATASET: Optional[DomainDataset] = None


def _init_worker(dataset: DomainDataset) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def train_on_domains(dataset: DomainDataset, sources: Sequence[str], cfg: TrainConfig, arch: Arch,
                     init_seed: int) -> tuple:
    """Normalize with source statistics, clamp dreams to the normalized [0, 1] box, train."""
    mean, std = dataset.normalization(sources)
    lower, upper = bounds_from_normalization(mean, std)
    cfg = replace(cfg, dream=replace(cfg.dream, lower_bound=lower, upper_bound=upper))
    images, labels, _ = dataset.split(sources)
    arch = replace(arch, num_classes=len(dataset.classes), input_size=dataset.size)
    model = init_model(init_seed, arch)
    model.normalization = {"mean": list(mean), "std": list(std)}
    model, report = train(model, normalize(images, mean, std), labels, cfg)
    return model, report, (mean, std)


def run_job(dataset: DomainDataset, job: Job, arch: Arch, probe: Optional[CueConflictSet]) -> dict:
    model, report, (mean, std) = train_on_domains(dataset, job.sources, job.train, arch, job.seed)
    record = {"config": job.label, "value": job.value, "seed": job.seed, "sources": list(job.sources)}
    if job.target is not None:
        imgs, labels, _ = dataset.split([job.target])
        record["target"] = job.target
        record["accuracy"] = evaluate(model, normalize(imgs, mean, std), labels)
    elif len(job.sources) == 1:
        record["accuracy_by_target"] = {}
        for t in dataset.domains:
            if t == job.sources[0]:
                continue
            imgs, labels, _ = dataset.split([t])
            record["accuracy_by_target"][t] = evaluate(model, normalize(imgs, mean, std), labels)
    if probe is not None:
        record["probe"] = run_bias_probe(model, probe, mean, std)
    record["final_train_acc"] = report.epochs[-1].acc if report.epochs else None
    return record


def _run_job_in_worker(args) -> dict:
    job, arch, probe = args
    return run_job(_WORKER_DATASET, job, arch, probe)


def execute(spec: ExperimentSpec, dataset: DomainDataset, threads: int = 1) -> List[dict]:
    spec.validate()
    jobs = expand_jobs(spec, dataset.domains)
    probe = None
    if spec.probe_n > 0 or spec.protocol == "bias_probe":
        probe = make_cue_conflict(dataset, spec.probe_seed, spec.probe_n or 500)
    arch = spec.arch
    if threads <= 1:
        records = []
        for i, job in enumerate(jobs):
            log.info("job %d/%d: %s seed=%d target=%s", i + 1, len(jobs), job.label, job.seed, job.target)
            records.append(run_job(dataset, job, arch, probe))
        return records
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(dataset,)) as pool:
        return list(pool.map(_run_job_in_worker, [(job, arch, probe) for job in jobs]))


# -- report assembly -------------------------------------------------------
def _mean_std(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def aggregate(protocol: str, runs: List[dict]) -> dict:
    """Per-configuration aggregates; std is the population std over seeds."""
    labels = list(dict.fromkeys(r["config"] for r in runs))
    out: Dict[str, dict] = {}
    for label in labels:
        rs = [r for r in runs if r["config"] == label]
        seeds = list(dict.fromkeys(r["seed"] for r in rs))
        agg: dict = {"value": rs[0]["value"], "seeds": seeds}
        if protocol == "single_source_matrix":
            sources = list(dict.fromkeys(r["sources"][0] for r in rs))
            matrix, rows = {}, {}
            for s in sources:
                cells = [r for r in rs if r["sources"][0] == s]
                targets = list(cells[0]["accuracy_by_target"])
                matrix[s] = {t: _mean_std([c["accuracy_by_target"][t] for c in cells]) for t in targets}
                rows[s] = _mean_std([float(np.mean(list(c["accuracy_by_target"].values()))) for c in cells])
            agg["matrix"] = matrix
            agg["row_average"] = rows
        elif protocol != "bias_probe":
            targets = list(dict.fromkeys(r["target"] for r in rs))
            agg["per_target"] = {t: _mean_std([r["accuracy"] for r in rs if r["target"] == t]) for t in targets}
            per_seed = [float(np.mean([r["accuracy"] for r in rs if r["seed"] == s])) for s in seeds]
            agg["average"] = _mean_std(per_seed)
        if all("probe" in r for r in rs):
            per_seed_probe = {}
            for key in ("shape_match_frac", "texture_match_frac", "other_frac"):
                per_seed_probe[key] = _mean_std(
                    [float(np.mean([r["probe"][key] for r in rs if r["seed"] == s])) for s in seeds])
            agg["probe"] = per_seed_probe
        out[label] = agg
    return out


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["train"] = spec.train.to_dict()
    d["arch"] = spec.arch.to_dict()
    for k in ("seeds", "modes", "alphas", "taus", "divergences"):
        d[k] = list(d[k])
    for k in ("targets", "train_domains"):
        d[k] = None if d[k] is None else list(d[k])
    return d


def build_report(spec: ExperimentSpec, runs: List[dict]) -> dict:
    return {
        "protocol": spec.protocol,
        "std": "population",
        "runs": runs,
        "aggregates": aggregate(spec.protocol, runs),
    }


def run_protocol(spec: ExperimentSpec, dataset: DomainDataset, threads: int = 1) -> dict:
    return build_report(spec, execute(spec, dataset, threads))


def run_leave_one_out(spec: ExperimentSpec, dataset: DomainDataset, threads: int = 1) -> dict:
    return run_protocol(replace(spec, protocol="leave_one_out"), dataset, threads)


def run_single_source_matrix(spec: ExperimentSpec, dataset: DomainDataset, threads: int = 1) -> dict:
    return run_protocol(replace(spec, protocol="single_source_matrix"), dataset, threads)


def check_report(report: dict) -> None:
    """Raise AssertionError unless the aggregates match a recomputation from the runs."""
    again = aggregate(report["protocol"], report["runs"])
    assert again == report["aggregates"], "aggregates do not match per-run records"
    for r in report["runs"]:
        if "probe" in r:
            p = r["probe"]
            total = p["shape_match_frac"] + p["texture_match_frac"] + p["other_frac"]
            assert abs(total - 1.0) <= 1e-12, f"probe fractions sum to {total}"


def matrix_csv(report: dict, label: Optional[str] = None) -> str:
    """Single-source grid: header row = target domains, first column = source domain."""
    aggs = report["aggregates"]
    label = label or next(iter(aggs))
    matrix = aggs[label]["matrix"]
    sources = list(matrix)
    targets = list(dict.fromkeys(t for s in sources for t in matrix[s]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source"] + targets + ["row_average"])
    for s in sources:
        w.writerow([s] + [repr(matrix[s][t]["mean"]) if t in matrix[s] else "" for t in targets]
                   + [repr(aggs[label]["row_average"][s]["mean"])])
    return buf.getvalue()


def sweep_csv(report: dict) -> str:
    """One row per configuration: held-out accuracy per target plus the average."""
    aggs = report["aggregates"]
    targets = list(dict.fromkeys(t for a in aggs.values() for t in a.get("per_target", {})))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "value"] + targets + ["average", "average_std"])
    for label, a in aggs.items():
        w.writerow([label, a["value"]] + [repr(a["per_target"][t]["mean"]) for t in targets]
                   + [repr(a["average"]["mean"]), repr(a["average"]["std"])])
    return buf.getvalue()
