"""End-to-end experiment orchestration and metric reporting.

A pipeline run is: adversarial training (or checkpoint load), neuron
scoring, candidate selection, grafting, fine-tuning, then per-example
verification of the first K test examples.  Every stage persists its
artifact in the output directory; a stage failure aborts with the stage
name and keeps what earlier stages wrote.

Reports carry UNR / VA / SA / RA percentages, per-example verdicts, the
mean verification time (excluding misclassified or attacked examples) and
a verified-count-vs-time curve.  In deterministic mode the clock is a
work-unit count (explored domains) instead of wall seconds so re-runs are
byte-identical; the report records which unit applies.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import compute_bounds, input_region, tally_stability
from .data import Dataset, load_dataset
from .errors import PipelineError, UsageError
from .grafting import (
    baseline_select,
    default_gamma_schedule,
    save_plan,
    score_neurons,
    select_neurons,
)
from .network import (
    Network,
    apply_graft,
    forward_batch,
    load_checkpoint,
    make_mlp,
    network_from_dict,
    network_to_dict,
    save_checkpoint,
)
from .training import (
    AttackConfig,
    FinetuneConfig,
    TrainConfig,
    finetune_grafted,
    gradual_graft,
    train,
)
from .verifier import (
    Specification,
    VerdictStatus,
    VerifyBudget,
    bab_verify,
    build_specs,
    pgd_attack,
)

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "run_pipeline",
    "evaluate_network",
    "report",
    "mask_forward",
]

_METHODS = ("graft", "graft-zero", "sap", "gap", "random", "none")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data, architecture, method, and all sub-configs."""

    dataset: dict
    architecture: tuple[int, ...]
    eps_train: float = 0.1
    eps_verify: float = 0.1
    clip: tuple[float, float] | None = (0.0, 1.0)
    graft_fraction: float = 0.5
    method: str = "graft"
    init_slope: float = 0.25
    init_intercept: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    attack_steps: int = 20
    attack_restarts: int = 2
    train_attack_steps: int = 7
    train_l1: float = 0.0
    train_rs: float = 0.0
    finetune_l1: float = 0.0
    warmup_epochs: int = 0
    warmup_lr: float | None = None
    budget: VerifyBudget = field(default_factory=lambda: VerifyBudget(30.0, 4000))
    num_verify: int = 100
    score_subset: int = 512
    score_eps: float | None = None
    intermediate: str = "crown"
    seed: int = 0
    deterministic: bool = True
    workers: int = 1
    out_dir: str | None = None
    checkpoint: str | None = None
    gradual: bool = False

    def __post_init__(self):
        if self.method not in _METHODS:
            raise UsageError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.eps_train < 0 or self.eps_verify < 0:
            raise UsageError("eps values must be >= 0")
        if not 0.0 < self.graft_fraction <= 1.0 and self.method != "none":
            raise UsageError("graft_fraction must be in (0, 1]")
        if len(self.architecture) < 2:
            raise UsageError("architecture needs at least input and output widths")
        if self.intermediate not in ("ibp", "crown"):
            raise UsageError(f"intermediate must be 'ibp' or 'crown'")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        try:
            if "train" in doc and isinstance(doc["train"], dict):
                doc["train"] = TrainConfig(**doc["train"])
            if "finetune" in doc and isinstance(doc["finetune"], dict):
                doc["finetune"] = FinetuneConfig(**doc["finetune"])
            if "budget" in doc and isinstance(doc["budget"], dict):
                doc["budget"] = VerifyBudget(**doc["budget"])
            if "architecture" in doc:
                doc["architecture"] = tuple(int(w) for w in doc["architecture"])
            if doc.get("clip") is not None:
                doc["clip"] = tuple(float(v) for v in doc["clip"])
            return cls(**doc)
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from exc

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["architecture"] = list(self.architecture)
        if self.clip is not None:
            doc["clip"] = list(self.clip)
        doc["finetune"] = dataclasses.asdict(self.finetune)
        doc["train"] = dataclasses.asdict(self.train)
        doc["train"]["milestones"] = list(self.train.milestones)
        doc["budget"] = dataclasses.asdict(self.budget)
        return doc


@dataclass
class MetricsReport:
    """UNR / VA / SA / RA percentages plus per-example detail and the
    verified-count-vs-time curve (thresholds in ``time_unit``)."""

    unr: float
    va: float
    sa: float
    ra: float
    mean_verification_time: float
    time_unit: str
    num_examples: int
    per_example: list[dict]
    curve: list[tuple[float, int]]

    def __post_init__(self):
        if not (self.va <= self.ra + 1e-9 and self.ra <= self.sa + 1e-9):
            raise UsageError(
                f"metric ordering violated: VA={self.va} RA={self.ra} SA={self.sa}"
            )
        counts = [c for _, c in self.curve]
        if any(b > a for b, a in zip(counts, counts[1:])):
            raise UsageError("verified-vs-time curve must be nondecreasing")

    def to_dict(self) -> dict:
        return {
            "unr": self.unr,
            "va": self.va,
            "sa": self.sa,
            "ra": self.ra,
            "mean_verification_time": self.mean_verification_time,
            "time_unit": self.time_unit,
            "num_examples": self.num_examples,
            "per_example": self.per_example,
            "curve": [[t, c] for t, c in self.curve],
        }


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _dump_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# evaluation


def _verify_example(payload: dict) -> dict:
    """Evaluate one test example: correctness, PGD attack, then complete
    verification of every class margin.  Standalone for worker pools."""
    net = network_from_dict(payload["net"])
    x0 = np.asarray(payload["x0"], dtype=np.float64)
    label = int(payload["label"])
    eps = payload["eps"]
    clip = payload["clip"]
    seed = payload["seed"]
    deterministic = payload["deterministic"]
    budget = VerifyBudget(*payload["budget"])
    record = {
        "index": payload["index"],
        "label": label,
        "sa": False,
        "ra": False,
        "verified": False,
        "verdict": "misclassified",
        "bound": 0.0,
        "time_seconds": 0.0,
        "work_units": 0,
        "branches": 0,
    }
    logits, _, _ = forward_batch(net, x0[None, :])
    pred = int(np.argmax(logits[0]))
    record["predicted"] = pred
    num_classes = net.output_dim
    margins = [Specification(s.coeffs, s.const, s.label, s.target) for s in build_specs(num_classes, label)]
    if pred != label:
        record["bound"] = float(min(s.value(logits[0]) for s in margins))
        return record
    record["sa"] = True
    atk = AttackConfig(
        eps,
        steps=payload["attack_steps"],
        restarts=payload["attack_restarts"],
        clip=clip,
    )
    adv = pgd_attack(net, x0, label, atk, seed=seed)
    if adv is not None:
        adv_logits, _, _ = forward_batch(net, adv[None, :])
        record["verdict"] = "attacked"
        record["bound"] = float(min(s.value(adv_logits[0]) for s in margins))
        return record
    record["ra"] = True
    box = input_region(x0, eps, clip)
    root_inter = compute_bounds(net, box, None, method=payload["intermediate"])
    t0 = time.perf_counter()
    work = 0
    worst = math.inf
    verdict = "verified"
    for k, spec in enumerate(margins):
        if deterministic:
            spec_budget = VerifyBudget(None, budget.max_domains)
        else:
            remaining = budget.time_limit - (time.perf_counter() - t0)
            if remaining <= 0:
                verdict = "timeout"
                break
            spec_budget = VerifyBudget(remaining, budget.max_domains)
        v = bab_verify(
            net,
            spec,
            box,
            spec_budget,
            seed=seed + 7919 * (k + 1),
            root_inter=root_inter,
        )
        work += v.domains_explored
        worst = min(worst, v.bound)
        if v.status == VerdictStatus.FALSIFIED:
            verdict = "falsified"
            break
        if v.status == VerdictStatus.TIMEOUT:
            verdict = "timeout"
            break
    record["time_seconds"] = time.perf_counter() - t0
    record["work_units"] = work
    record["branches"] = work
    record["bound"] = float(worst)
    record["verdict"] = verdict
    record["verified"] = verdict == "verified"
    return record


def evaluate_network(
    net: Network,
    test: Dataset,
    *,
    eps_verify: float,
    clip: tuple[float, float] | None,
    budget: VerifyBudget,
    num_verify: int,
    attack_steps: int = 20,
    attack_restarts: int = 2,
    intermediate: str = "crown",
    seed: int = 0,
    deterministic: bool = True,
    workers: int = 1,
) -> tuple[list[dict], float]:
    """Per-example verification records over the first ``num_verify`` test
    examples, plus the unstable-neuron ratio (percent) on that slice."""
    k = min(num_verify, len(test))
    if k == 0:
        raise UsageError("no test examples to evaluate")
    net_doc = network_to_dict(net)
    payloads = [
        {
            "net": net_doc,
            "x0": test.features[i].tolist(),
            "label": int(test.labels[i]),
            "index": i,
            "eps": eps_verify,
            "clip": clip,
            "budget": (budget.time_limit, budget.max_domains),
            "attack_steps": attack_steps,
            "attack_restarts": attack_restarts,
            "intermediate": intermediate,
            "seed": seed * 1_000_003 + i,
            "deterministic": deterministic,
        }
        for i in range(k)
    ]
    if workers > 1 and not deterministic:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_verify_example, payloads))
    else:
        records = [_verify_example(p) for p in payloads]
    records.sort(key=lambda r: r["index"])
    tally = tally_stability(net, test.features[:k], eps_verify, clip)
    unr = 100.0 * float(tally.times_unstable.sum()) / (k * max(net.num_hidden, 1))
    return records, unr


def _curve_thresholds(top: float) -> list[float]:
    base = [1.0, 2.0, 5.0, 10.0, 30.0, 60.0]
    t = 120.0
    while t < top:
        base.append(t)
        t *= 2.0
    out = [b for b in base if b < top]
    out.append(float(top))
    return out


def _build_report(records: list[dict], unr: float, time_unit: str, budget_top: float) -> MetricsReport:
    n = len(records)
    sa = 100.0 * sum(r["sa"] for r in records) / n
    ra = 100.0 * sum(r["ra"] for r in records) / n
    va = 100.0 * sum(r["verified"] for r in records) / n
    timed = [r for r in records if r["verdict"] in ("verified", "falsified", "timeout")]
    key = "work_units" if time_unit == "work_units" else "time_seconds"
    mean_time = float(np.mean([r[key] for r in timed])) if timed else 0.0
    thresholds = _curve_thresholds(budget_top)
    curve = [
        (t, sum(1 for r in records if r["verified"] and r[key] <= t))
        for t in thresholds
    ]
    if time_unit == "work_units":
        # wall-clock readings vary between runs; the deterministic report
        # must be byte-reproducible, so it carries work units only
        records = [{k: v for k, v in r.items() if k != "time_seconds"} for r in records]
    return MetricsReport(unr, va, sa, ra, mean_time, time_unit, n, records, curve)


def report(
    records: list[dict],
    unr: float,
    out_dir,
    *,
    time_unit: str,
    budget_top: float,
) -> MetricsReport:
    """Aggregate one run's verdict records and write metrics.json,
    metrics.csv (one row per example) and curve.csv."""
    if not records:
        raise UsageError("report needs at least one verdict record")
    os.makedirs(out_dir, exist_ok=True)
    rep = _build_report(records, unr, time_unit, budget_top)
    _dump_json(rep.to_dict(), os.path.join(out_dir, "metrics.json"))
    key = "work_units" if time_unit == "work_units" else "time_seconds"
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("index,sa,ra,verdict,bound,time,branches\n")
        for r in rep.per_example:
            fh.write(
                f"{r['index']},{int(r['sa'])},{int(r['ra'])},{r['verdict']},"
                f"{r['bound']!r},{r[key]!r},{r['branches']}\n"
            )
    with open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("threshold,verified_count\n")
        for t, c in rep.curve:
            fh.write(f"{t!r},{c}\n")
    return rep


# ---------------------------------------------------------------------------
# the full pipeline


def mask_forward(net: Network, X: np.ndarray, neuron_ids) -> np.ndarray:
    """Reference evaluation with the given neurons' post-activations forced
    to zero (explicit activation pruning); used to cross-check graft-zero."""
    offs = net.layer_offsets()
    masks = [np.ones(d, dtype=bool) for d in net.hidden_sizes]
    for nid in neuron_ids:
        h, j = net.neuron_location(int(nid))
        masks[h][j] = False
    a = np.asarray(X, dtype=np.float64)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight.T + layer.bias
        if i < last:
            g = net.grafted[i]
            post = np.maximum(z, 0.0)
            if g.any():
                lin = net.slopes[i] * z + net.intercepts[i]
                post = np.where(g, lin, post)
            a = post * masks[i]
        else:
            return z
    return z


def _subset(ds: Dataset, size: int) -> Dataset:
    return ds.head(min(size, len(ds)))


def run_pipeline(cfg: ExperimentConfig) -> MetricsReport:
    """Execute train -> score -> select -> graft -> finetune -> verify and
    return the metrics report.  Artifacts land in ``cfg.out_dir``."""
    out = cfg.out_dir or "run_out"
    os.makedirs(out, exist_ok=True)
    _dump_json(cfg.to_dict(), os.path.join(out, "config.json"))
    stage = "data"
    try:
        train_ds = load_dataset(cfg.dataset["train"])
        test_ds = load_dataset(cfg.dataset["test"])
        if train_ds.dim != cfg.architecture[0]:
            raise UsageError(
                f"dataset dim {train_ds.dim} != input width {cfg.architecture[0]}"
            )
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc

    stage = "train"
    try:
        if cfg.checkpoint:
            net = load_checkpoint(cfg.checkpoint)
        else:
            net = make_mlp(cfg.architecture, seed=cfg.seed)
            adv = None
            if cfg.eps_train > 0:
                adv = AttackConfig(
                    cfg.eps_train, steps=cfg.train_attack_steps, clip=cfg.clip
                )
            if cfg.warmup_epochs > 0:
                # clean warmup before the adversarial phase
                warm = dataclasses.replace(
                    cfg.train,
                    epochs=cfg.warmup_epochs,
                    lr=cfg.warmup_lr if cfg.warmup_lr is not None else cfg.train.lr,
                    milestones=(),
                )
                net = train(
                    net,
                    train_ds,
                    warm,
                    adversarial=None,
                    rs=cfg.train_rs,
                    l1=cfg.train_l1,
                    reg_clip=cfg.clip,
                )
            net = train(
                net,
                train_ds,
                cfg.train,
                adversarial=adv,
                rs=cfg.train_rs,
                l1=cfg.train_l1,
                reg_clip=cfg.clip,
                log_path=os.path.join(out, "train_log.csv"),
                holdout=_subset(test_ds, 256),
            )
        save_checkpoint(net, os.path.join(out, "checkpoint.json"))
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc

    plan = None
    if cfg.method != "none":
        stage = "select"
        try:
            score_ds = _subset(train_ds, cfg.score_subset)
            eps_score = cfg.score_eps if cfg.score_eps is not None else cfg.eps_verify
            if cfg.method in ("graft", "graft-zero"):
                scores = score_neurons(
                    net, score_ds.features, score_ds.labels, eps_score, clip=cfg.clip
                )
                init = (0.0, 0.0) if cfg.method == "graft-zero" else (
                    cfg.init_slope,
                    cfg.init_intercept,
                )
                plan = select_neurons(
                    scores,
                    cfg.graft_fraction,
                    default_gamma_schedule(cfg.graft_fraction),
                    init_slope=init[0],
                    init_intercept=init[1],
                )
            else:
                plan = baseline_select(
                    cfg.method,
                    net,
                    score_ds.features,
                    score_ds.labels,
                    cfg.graft_fraction,
                    seed=cfg.seed,
                    init_slope=cfg.init_slope,
                    init_intercept=cfg.init_intercept,
                )
            save_plan(plan, os.path.join(out, "plan.json"))
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

        stage = "finetune"
        try:
            adv = None
            if cfg.eps_train > 0:
                adv = AttackConfig(
                    cfg.eps_train, steps=cfg.train_attack_steps, clip=cfg.clip
                )
            if cfg.gradual:
                eps_score = cfg.score_eps if cfg.score_eps is not None else cfg.eps_verify
                net = gradual_graft(
                    net,
                    train_ds,
                    eps_score,
                    cfg.graft_fraction,
                    cfg.finetune,
                    adversarial=adv,
                    clip=cfg.clip,
                    score_size=cfg.score_subset,
                    init_slope=cfg.init_slope,
                    init_intercept=cfg.init_intercept,
                )
            else:
                net = apply_graft(net, plan)
                ft = cfg.finetune
                if cfg.method == "graft-zero":
                    ft = dataclasses.replace(ft, graft_lr=0.0)
                net = finetune_grafted(
                    net, train_ds, ft, adversarial=adv,
                    l1=cfg.finetune_l1, reg_clip=cfg.clip,
                )
            save_checkpoint(net, os.path.join(out, "grafted.json"))
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

    stage = "verify"
    try:
        records, unr = evaluate_network(
            net,
            test_ds,
            eps_verify=cfg.eps_verify,
            clip=cfg.clip,
            budget=cfg.budget,
            num_verify=cfg.num_verify,
            attack_steps=cfg.attack_steps,
            attack_restarts=cfg.attack_restarts,
            intermediate=cfg.intermediate,
            seed=cfg.seed,
            deterministic=cfg.deterministic,
            workers=1 if cfg.deterministic else cfg.workers,
        )
        _dump_json(
            {"records": records, "unr": unr}, os.path.join(out, "verdicts.json")
        )
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc

    stage = "report"
    try:
        if cfg.deterministic:
            classes = cfg.architecture[-1]
            top = float(cfg.budget.max_domains * max(classes - 1, 1))
            return report(records, unr, out, time_unit="work_units", budget_top=top)
        return report(
            records, unr, out, time_unit="seconds", budget_top=float(cfg.budget.time_limit)
        )
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc
