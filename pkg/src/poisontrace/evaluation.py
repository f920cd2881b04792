"""End-to-end evaluation campaigns and their metrics.

A campaign forges data, plants an attack, trains a victim, mints
misclassification events, runs traceback on each, and scores the identified
rows against the ground-truth poison mask:

    precision = |identified ∩ poison| / |identified|   (None when nothing identified)
    recall    = |identified ∩ poison| / |poison|       (None when nothing injected)

Aggregates exclude None entries. All timing figures live under a separate
"timings" object in emitted JSON so reports from identical seeds are
byte-identical outside it.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .attacks import (
    CLEAN_LABEL,
    DIRTY_LABEL,
    OVERLAPPING,
    AttackPlan,
    MisclassificationEvent,
    TriggerSpec,
    attack_success_rate,
    craft_evasion_events,
    default_trigger,
    find_benign_events,
    inject_clean_label_collision,
    inject_dirty_label,
    inject_overlapping,
    mint_collision_event,
    mint_events,
)
from .clustering import KMeansConfig
from .data import LabeledDataset, forge_blobs, split
from .errors import NoSuccessfulEvent
from .projection import ProjectionConfig
from .seeding import derive_seed
from .tracer import (
    NON_POISON,
    TracebackConfig,
    TracebackReport,
    UnlearnConfig,
    trace,
    identify_event_kind,
)


def precision_recall(
    identified: np.ndarray, poison_mask: np.ndarray
) -> tuple[float | None, float | None]:
    identified = np.asarray(identified, dtype=np.int64)
    true_rows = np.flatnonzero(np.asarray(poison_mask, dtype=bool))
    hit = np.intersect1d(identified, true_rows).size
    precision = hit / identified.size if identified.size else None
    recall = hit / true_rows.size if true_rows.size else None
    return precision, recall


def _mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class EvalSummary:
    task: str
    events: list[dict]
    mean_precision: float | None
    std_precision: float | None
    mean_recall: float | None
    std_recall: float | None
    verdict_counts: dict
    details: dict
    config: dict
    total_seconds: float
    per_event_seconds: list[float]

    def to_json(self, include_timings: bool = True) -> dict:
        out = {
            "schema": "poisontrace/eval-summary/v1",
            "task": self.task,
            "n_events": len(self.events),
            "precision": {"mean": self.mean_precision, "std": self.std_precision},
            "recall": {"mean": self.mean_recall, "std": self.std_recall},
            "verdicts": self.verdict_counts,
            "events": self.events,
            "details": self.details,
            "config": self.config,
        }
        if include_timings:
            out["timings"] = {
                "total_seconds": self.total_seconds,
                "per_event_seconds": self.per_event_seconds,
            }
        return out


def summarize(
    task: str,
    scored: list[tuple[TracebackReport, LabeledDataset, dict]],
    details: dict,
    config: dict,
    total_seconds: float,
) -> EvalSummary:
    """Score (report, ground-truth dataset, extra-fields) triples."""
    events, precisions, recalls, seconds = [], [], [], []
    verdicts: dict[str, int] = {}
    for report, dataset, extra in scored:
        p, r = precision_recall(report.identified_indices, dataset.poison_mask)
        precisions.append(p)
        recalls.append(r)
        verdicts[report.verdict] = verdicts.get(report.verdict, 0) + 1
        row = {
            "event_id": report.event.event_id,
            "verdict": report.verdict,
            "precision": p,
            "recall": r,
            "identified": int(report.identified_indices.size),
            "iterations": len(report.iterations),
        }
        row.update(extra)
        events.append(row)
        seconds.append(report.total_seconds)
    mp, sp = _mean_std(precisions)
    mr, sr = _mean_std(recalls)
    return EvalSummary(
        task=task,
        events=events,
        mean_precision=mp,
        std_precision=sp,
        mean_recall=mr,
        std_recall=sr,
        verdict_counts=dict(sorted(verdicts.items())),
        details=details,
        config=config,
        total_seconds=total_seconds,
        per_event_seconds=seconds,
    )


def write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class BlobSpec:
    # sigma is on the scale of the mean box; 0.8 keeps classes separable but
    # diffuse, so no benign class is tighter than the trigger-bound poison —
    # k-means always splits the wide cloud. mean_box shrinks the whole
    # geometry for tasks whose perturbation budgets are absolute.
    classes: int = 10
    per_class: int = 625
    dim: int = 64
    separation: float = 1.0
    sigma: float = 0.8
    train_fraction: float = 0.8
    mean_box: float = 0.8

    def forge(self, seed: int) -> LabeledDataset:
        return forge_blobs(
            self.classes, self.per_class, self.dim, self.separation,
            self.sigma, seed, mean_box=self.mean_box,
        )


@dataclass(frozen=True)
class VictimSpec:
    # Wide single hidden layer: projections live on the final-layer weights,
    # and keep-rates down at 1% still need ~100 sampled coordinates to see the
    # trigger direction. Few epochs at moderate lr converge on blobs.
    hidden: tuple[int, ...] = (1024,)
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 0.2

    def arch(self, dim: int, classes: int) -> nn.Architecture:
        return nn.Architecture(layer_sizes=(dim, *self.hidden, classes))


# Campaign-tuned traceback, shared by the trigger-style tasks. Non-default
# knobs and why:
#   cap 500          uncapped retention fine-tuning re-teaches the backdoor
#                    from still-retained poison whenever the forget set holds
#                    only part of it, so partial removals look harmless; 500
#                    retained rows per epoch keep the refit anchored without
#                    drowning the forget signal
#   margin 0.08      a converged victim sits at ~0 loss on the event; benign
#                    refit noise at cap 500 reaches ~0.05-0.07, well separated
#                    from the >0.1 rise a surviving backdoor shows
#   max_batches 80   centroids on unit-norm rows settle well before this;
#                    the stock 1000 only adds wall-clock
#   rho 10           same identified sets as 100 on this geometry at a tenth
#                    of the projection width
CAMPAIGN_TRACEBACK = TracebackConfig(
    unlearn=UnlearnConfig(epochs=5, epsilon_margin=0.08, benign_sample_cap=500),
    kmeans=KMeansConfig(max_batches=80),
    projection=ProjectionConfig(rho_percent=10.0),
)


@dataclass(frozen=True)
class TriggerCampaignConfig:
    blobs: BlobSpec = BlobSpec()
    victim: VictimSpec = VictimSpec()
    injection_rate: float = 0.10
    trigger_width: int | None = 32
    events_per_seed: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    overlapping: bool = False
    traceback: TracebackConfig = CAMPAIGN_TRACEBACK


@dataclass
class TriggerScenario:
    """One fully built attack instance: data, plan, victim, quality stats."""

    seed: int
    root: int
    train_data: LabeledDataset
    test_data: LabeledDataset
    plan: AttackPlan
    poisoned: LabeledDataset
    victim: nn.Classifier
    target_label: int
    clean_accuracy: float
    attack_success: float


def build_trigger_scenario(cfg: TriggerCampaignConfig, seed: int) -> TriggerScenario:
    root = derive_seed(seed, "trigger-campaign")
    b = cfg.blobs
    clean = b.forge(derive_seed(root, "forge"))
    train_data, test_data = split(clean, b.train_fraction, derive_seed(root, "split"))
    target = int(np.random.default_rng(derive_seed(root, "target")).integers(b.classes))
    main_trigger = default_trigger(train_data, target, width=cfg.trigger_width)
    if cfg.overlapping:
        # Two nearly identical triggers: each drops a different edge coordinate
        # of the main patch, so the joint input carries both. Keeping the
        # patches this close puts both poison subsets in one projection cone;
        # far-apart patches train two independent rules, either of which
        # sustains the joint event on its own and so unlearns as innocent.
        coords = main_trigger.feature_indices
        value = main_trigger.trigger_values[0]
        first = TriggerSpec(coords[1:], (value,) * (len(coords) - 1), target)
        second = TriggerSpec(coords[:-1], (value,) * (len(coords) - 1), target)
        plan = AttackPlan(
            kind=OVERLAPPING,
            injection_rate=cfg.injection_rate,
            triggers=(first, second),
            seed=derive_seed(root, "inject"),
        )
        poisoned = inject_overlapping(train_data, plan)
    else:
        plan = AttackPlan(
            kind=DIRTY_LABEL,
            injection_rate=cfg.injection_rate,
            triggers=(main_trigger,),
            seed=derive_seed(root, "inject"),
        )
        poisoned = inject_dirty_label(train_data, plan)
    victim = nn.train(
        poisoned,
        cfg.victim.arch(b.dim, b.classes),
        nn.TrainConfig(
            epochs=cfg.victim.epochs,
            batch_size=cfg.victim.batch_size,
            learning_rate=cfg.victim.learning_rate,
            shuffle_seed=derive_seed(root, "shuffle"),
        ),
        derive_seed(root, "init"),
    )
    return TriggerScenario(
        seed=seed,
        root=root,
        train_data=train_data,
        test_data=test_data,
        plan=plan,
        poisoned=poisoned,
        victim=victim,
        target_label=target,
        clean_accuracy=nn.accuracy(victim, test_data),
        attack_success=attack_success_rate(victim, test_data, plan),
    )


@dataclass
class SeedRun:
    scenario: TriggerScenario
    events: list[MisclassificationEvent]
    reports: list[TracebackReport]


@dataclass
class CampaignResult:
    summary: EvalSummary
    runs: list[SeedRun]


def run_trigger_campaign(cfg: TriggerCampaignConfig) -> CampaignResult:
    """Dirty-label (or overlapping-trigger) campaign over all configured seeds."""
    start = time.perf_counter()
    runs, scored, seed_details = [], [], []
    for seed in cfg.seeds:
        scenario = build_trigger_scenario(cfg, seed)
        events = mint_events(
            scenario.victim,
            scenario.test_data,
            scenario.plan,
            cfg.events_per_seed,
            derive_seed(scenario.root, "mint"),
        )
        reports = []
        for event in events:
            tb = replace(cfg.traceback, seed=derive_seed(scenario.root, "trace", event.event_id))
            report = trace(scenario.victim, scenario.poisoned, event, tb)
            reports.append(report)
            scored.append((report, scenario.poisoned, {"seed": seed}))
        runs.append(SeedRun(scenario=scenario, events=events, reports=reports))
        seed_details.append(
            {
                "seed": seed,
                "target_label": scenario.target_label,
                "clean_accuracy": scenario.clean_accuracy,
                "attack_success_rate": scenario.attack_success,
                "poison_rows": int(scenario.poisoned.poison_mask.sum()),
                "train_rows": len(scenario.poisoned),
                "events": len(events),
            }
        )
    task = "overlapping_triggers" if cfg.overlapping else "dirty_label_trigger"
    summary = summarize(
        task,
        scored,
        details={"per_seed": seed_details},
        config=_config_dict(cfg),
        total_seconds=time.perf_counter() - start,
    )
    return CampaignResult(summary=summary, runs=runs)


# Feature-collision events need their own unlearning calibration. The attack
# input sits inside its own class cloud, so forgetting that (innocent) class
# necessarily uniformizes the event's neighborhood a little; with flip
# confidence well short of 1.0 the loss wobble from such refits runs
# 0.10-0.20, an order below what removing collided poison does (1.5-2.5).
# A gentler forget lr plus a wider margin puts the innocence cut between
# those two bands; the trigger campaigns keep their tighter margin.
COLLISION_TRACEBACK = replace(
    CAMPAIGN_TRACEBACK,
    unlearn=replace(CAMPAIGN_TRACEBACK.unlearn, learning_rate=0.12, epsilon_margin=0.22),
)

# The one-shot screen inverts the margin's cost. In the iterative loop the
# slack keeps capped-refit noise from stalling progress on real poison; in a
# single qualify-or-not round on a clean model the same slack converts halves
# that are merely irrelevant to a borderline event (|loss shift| under the
# noise floor) into accusations. Screening runs strict.
SCREEN_TRACEBACK = replace(
    CAMPAIGN_TRACEBACK,
    unlearn=replace(CAMPAIGN_TRACEBACK.unlearn, epsilon_margin=0.0),
)


@dataclass(frozen=True)
class CollisionCampaignConfig:
    # An absolute perturbation budget only means something relative to the data
    # scale: on the stock ±0.8 box a 0.05 step cannot cross any class gap, so
    # the blobs here shrink (mean_box) until the budget covers most of the
    # per-coordinate class gaps and collisions land almost on the attack
    # sample. Partial collisions leave poison features *between* the target
    # cloud and the attack sample; the flip then leans on the clean target
    # rows as much as on the poison and no clean verdict exists.
    # injection_rate 0.10 covers the entire target-class train block, so the
    # identified set has no innocent same-class residue to stall on.
    blobs: BlobSpec = BlobSpec(
        classes=10, per_class=150, dim=32, separation=0.10, sigma=0.02, mean_box=0.05
    )
    extractor: VictimSpec = VictimSpec(hidden=(1024,), epochs=8, batch_size=64, learning_rate=0.5)
    finetune_epochs: int = 20
    finetune_lr: float = 0.2
    injection_rate: float = 0.10
    budget: float = 0.05
    # Attack samples are drawn from the few test rows whose features already
    # sit nearest the target class; collisions against far-off samples leave a
    # residual the victim never mistakes for the target.
    candidate_pool: int = 8
    events: int = 20
    max_attempts: int = 60
    seed: int = 0
    traceback: TracebackConfig = COLLISION_TRACEBACK


@dataclass
class CollisionInstance:
    event: MisclassificationEvent
    poisoned: LabeledDataset
    victim: nn.Classifier
    plan: AttackPlan
    report: TracebackReport | None = None


def run_collision_campaign(cfg: CollisionCampaignConfig) -> CampaignResult:
    """Feature-collision campaign; every event is its own poisoning instance.

    The extractor is trained once on clean data; each instance perturbs
    target-class rows toward a fresh attack sample, warm-start fine-tunes a
    victim on the result, and only instances whose victim actually flips the
    attack sample become events.
    """
    start = time.perf_counter()
    b = cfg.blobs
    root = derive_seed(cfg.seed, "collision-campaign")
    clean = b.forge(derive_seed(root, "forge"))
    train_data, test_data = split(clean, b.train_fraction, derive_seed(root, "split"))
    extractor = nn.train(
        train_data,
        cfg.extractor.arch(b.dim, b.classes),
        nn.TrainConfig(
            epochs=cfg.extractor.epochs,
            batch_size=cfg.extractor.batch_size,
            learning_rate=cfg.extractor.learning_rate,
            shuffle_seed=derive_seed(root, "shuffle"),
        ),
        derive_seed(root, "init"),
    )
    extractor_preds = nn.predict(extractor, test_data.inputs)
    _, test_features = nn.forward_batch(extractor, test_data.inputs)
    _, train_features = nn.forward_batch(extractor, train_data.inputs)
    instances: list[CollisionInstance] = []
    attempts = 0
    used: set[tuple[int, int]] = set()
    while len(instances) < cfg.events and attempts < cfg.max_attempts:
        aseed = derive_seed(root, "instance", attempts)
        attempts += 1
        rng = np.random.default_rng(aseed)
        target = int(rng.integers(b.classes))
        # Only attack rows the extractor gets right: a sample the clean model
        # already sends to the target would succeed without the poison.
        pool = np.flatnonzero(
            (test_data.labels != target) & (extractor_preds == test_data.labels)
        )
        pool = pool[[(target, int(r)) not in used for r in pool]]
        if not len(pool):
            continue
        centroid = train_features[train_data.labels == target].mean(axis=0)
        gaps = np.linalg.norm(test_features[pool] - centroid, axis=1)
        candidates = pool[np.argsort(gaps)[: cfg.candidate_pool]]
        attack_row = int(rng.choice(candidates))
        used.add((target, attack_row))
        plan = AttackPlan(
            kind=CLEAN_LABEL,
            injection_rate=cfg.injection_rate,
            triggers=(TriggerSpec((), (), target),),
            seed=derive_seed(aseed, "inject"),
            perturb_budget=cfg.budget,
        )
        poisoned = inject_clean_label_collision(
            train_data, plan, extractor, test_data.inputs[attack_row]
        )
        victim = nn.continue_training(
            extractor,
            poisoned,
            nn.TrainConfig(
                epochs=cfg.finetune_epochs,
                batch_size=cfg.extractor.batch_size,
                learning_rate=cfg.finetune_lr,
                shuffle_seed=derive_seed(aseed, "finetune"),
            ),
        )
        try:
            event = mint_collision_event(
                victim, test_data.inputs[attack_row], int(test_data.labels[attack_row]), plan
            )
        except NoSuccessfulEvent:
            continue
        instances.append(CollisionInstance(event=event, poisoned=poisoned, victim=victim, plan=plan))

    if not instances:
        raise NoSuccessfulEvent(
            f"no collision instance succeeded in {attempts} attempts at budget {cfg.budget}"
        )
    scored = []
    for inst in instances:
        tb = replace(cfg.traceback, seed=derive_seed(root, "trace", inst.event.event_id))
        inst.report = trace(inst.victim, inst.poisoned, inst.event, tb)
        scored.append((inst.report, inst.poisoned, {"seed": cfg.seed}))
    details = {
        "attempts": attempts,
        "successes": len(instances),
        "attack_success_fraction": len(instances) / attempts,
        "budget": cfg.budget,
        "extractor_accuracy": nn.accuracy(extractor, test_data),
    }
    summary = summarize(
        "clean_label_collision",
        scored,
        details=details,
        config=_config_dict(cfg),
        total_seconds=time.perf_counter() - start,
    )
    return CampaignResult(summary=summary, runs=[])


@dataclass(frozen=True)
class NonPoisonConfig:
    # Same family and traceback as the trigger campaign, with sigma raised
    # until the clean model leaves a healthy crop of natural mistakes to
    # screen (~8% test error) without collapsing class structure.
    blobs: BlobSpec = BlobSpec(sigma=1.1)
    victim: VictimSpec = VictimSpec()
    benign_events: int = 50
    evasion_events: int = 50
    evasion_epsilon: float = 0.05
    seed: int = 0
    traceback: TracebackConfig = SCREEN_TRACEBACK


@dataclass
class ScreenResult:
    benign_rate: float
    evasion_rate: float
    rows: list[dict]
    details: dict
    config: dict
    total_seconds: float

    def to_json(self, include_timings: bool = True) -> dict:
        out = {
            "schema": "poisontrace/nonpoison-screen/v1",
            "benign_non_poison_rate": self.benign_rate,
            "evasion_non_poison_rate": self.evasion_rate,
            "events": self.rows,
            "details": self.details,
            "config": self.config,
        }
        if include_timings:
            out["timings"] = {"total_seconds": self.total_seconds}
        return out


def run_nonpoison_screen(cfg: NonPoisonConfig) -> ScreenResult:
    """Benign misclassifications and bounded evasions on a clean model should
    be ruled non-poison by the first prune round."""
    start = time.perf_counter()
    b = cfg.blobs
    root = derive_seed(cfg.seed, "nonpoison-screen")
    clean = b.forge(derive_seed(root, "forge"))
    train_data, test_data = split(clean, b.train_fraction, derive_seed(root, "split"))
    model = nn.train(
        train_data,
        cfg.victim.arch(b.dim, b.classes),
        nn.TrainConfig(
            epochs=cfg.victim.epochs,
            batch_size=cfg.victim.batch_size,
            learning_rate=cfg.victim.learning_rate,
            shuffle_seed=derive_seed(root, "shuffle"),
        ),
        derive_seed(root, "init"),
    )
    benign = find_benign_events(model, test_data, cfg.benign_events, derive_seed(root, "benign"))
    evasion = craft_evasion_events(
        model, test_data, cfg.evasion_events, cfg.evasion_epsilon, derive_seed(root, "evasion")
    )
    rows = []
    counts = {"benign": [0, 0], "evasion": [0, 0]}
    for kind, events in (("benign", benign), ("evasion", evasion)):
        for event in events:
            tb = replace(cfg.traceback, seed=derive_seed(root, "identify", event.event_id))
            verdict = identify_event_kind(model, train_data, event, tb)
            counts[kind][0] += verdict == NON_POISON
            counts[kind][1] += 1
            rows.append({"kind": kind, "event_id": event.event_id, "verdict": verdict})
    details = {
        "test_accuracy": nn.accuracy(model, test_data),
        "benign_events": counts["benign"][1],
        "evasion_events": counts["evasion"][1],
        "evasion_epsilon": cfg.evasion_epsilon,
    }
    return ScreenResult(
        benign_rate=counts["benign"][0] / max(counts["benign"][1], 1),
        evasion_rate=counts["evasion"][0] / max(counts["evasion"][1], 1),
        rows=rows,
        details=details,
        config=_config_dict(cfg),
        total_seconds=time.perf_counter() - start,
    )


def run_rho_sweep(
    cfg: TriggerCampaignConfig, rhos: tuple[float, ...] = (1.0, 10.0, 100.0)
) -> dict:
    """Trace the same events under different projection keep-rates.

    Shares one scenario and one event set across all rhos so differences come
    from the projection subsampling alone. Returns per-rho mean precision and
    recall plus the largest pairwise absolute deltas.
    """
    start = time.perf_counter()
    seed = cfg.seeds[0]
    scenario = build_trigger_scenario(cfg, seed)
    events = mint_events(
        scenario.victim,
        scenario.test_data,
        scenario.plan,
        cfg.events_per_seed,
        derive_seed(scenario.root, "mint"),
    )
    per_rho = {}
    for rho in rhos:
        scored = []
        for event in events:
            tb = replace(
                cfg.traceback,
                seed=derive_seed(scenario.root, "trace", event.event_id),
                projection=replace(cfg.traceback.projection, rho_percent=rho),
            )
            report = trace(scenario.victim, scenario.poisoned, event, tb)
            scored.append((report, scenario.poisoned, {"rho": rho}))
        summary = summarize(
            f"rho-{rho:g}", scored, details={}, config=_config_dict(cfg), total_seconds=0.0
        )
        per_rho[rho] = {
            "mean_precision": summary.mean_precision,
            "mean_recall": summary.mean_recall,
        }
    precisions = [v["mean_precision"] for v in per_rho.values()]
    recalls = [v["mean_recall"] for v in per_rho.values()]
    return {
        "schema": "poisontrace/rho-sweep/v1",
        "rhos": list(rhos),
        "per_rho": {f"{rho:g}": stats for rho, stats in per_rho.items()},
        "max_precision_delta": float(max(precisions) - min(precisions)),
        "max_recall_delta": float(max(recalls) - min(recalls)),
        "events": len(events),
        "timings": {"total_seconds": time.perf_counter() - start},
    }


def _config_dict(cfg) -> dict:
    return asdict(cfg)
