"""Built-in poisoning attacks and misclassification-event minting.

Three attack generators, each returning a new dataset with the injected rows
appended (or substituted) and flagged in the poison mask:

- dirty-label trigger: copies of clean rows get a fixed feature patch and the
  attacker's target label;
- clean-label feature collision: rows already belonging to the target class
  are nudged (within an L-infinity budget) so their penultimate features match
  a chosen attack input under a clean feature extractor, labels untouched;
- overlapping triggers: two disjoint trigger patches aimed at the same target
  label, each carried by its own injected subset.

Event minting finds concrete (input, wrong label) pairs the victim actually
misclassifies: triggered test inputs for the trigger attacks, the pre-chosen
attack sample for collisions, plus benign misclassifications and bounded
adversarial perturbations of clean inputs for the non-poison control arms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ContractViolation, NoSuccessfulEvent
from .nn import Classifier, forward_batch, forward_caches, grad_input, one_hot, predict

DIRTY_LABEL = "dirty_label_trigger"
CLEAN_LABEL = "clean_label_collision"
OVERLAPPING = "overlapping_triggers"
_KINDS = (DIRTY_LABEL, CLEAN_LABEL, OVERLAPPING)

COLLISION_STEPS = 100


@dataclass(frozen=True)
class TriggerSpec:
    """A fixed-value feature patch and the label it should force."""

    feature_indices: tuple[int, ...]
    trigger_values: tuple[float, ...]
    target_label: int

    def __post_init__(self):
        if len(self.feature_indices) != len(self.trigger_values):
            raise ContractViolation("feature_indices and trigger_values lengths differ")
        if len(set(self.feature_indices)) != len(self.feature_indices):
            raise ContractViolation("trigger feature indices must be unique")
        if any(i < 0 for i in self.feature_indices):
            raise ContractViolation("trigger feature indices must be nonnegative")
        if not all(np.isfinite(v) for v in self.trigger_values):
            raise ContractViolation("trigger values must be finite")
        if self.target_label < 0:
            raise ContractViolation("target_label must be nonnegative")


@dataclass(frozen=True)
class AttackPlan:
    kind: str
    injection_rate: float
    triggers: tuple[TriggerSpec, ...]
    seed: int
    perturb_budget: float | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractViolation(f"unknown attack kind {self.kind!r}")
        if not 0.0 < self.injection_rate <= 0.5:
            raise ContractViolation("injection_rate must be in (0, 0.5]")
        if not self.triggers:
            raise ContractViolation("at least one trigger is required")
        targets = {t.target_label for t in self.triggers}
        if len(targets) != 1:
            raise ContractViolation("all triggers must share one target label")
        if self.kind == OVERLAPPING:
            if len(self.triggers) < 2:
                raise ContractViolation("overlapping attack needs at least two triggers")
            if len({(t.feature_indices, t.trigger_values) for t in self.triggers}) < len(
                self.triggers
            ):
                raise ContractViolation("overlapping attack triggers must be distinct")
            # Triggers may share coordinates, but a joint input can only carry
            # them all if the shared coordinates agree in value.
            written: dict[int, float] = {}
            for t in self.triggers:
                for idx, val in zip(t.feature_indices, t.trigger_values):
                    if written.setdefault(idx, val) != val:
                        raise ContractViolation(
                            "overlapping attack triggers conflict on shared features"
                        )
        if self.kind == CLEAN_LABEL:
            if self.perturb_budget is None or self.perturb_budget < 0:
                raise ContractViolation("clean-label attack needs a nonnegative perturb_budget")

    @property
    def target_label(self) -> int:
        return self.triggers[0].target_label

    def attack_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(int(self.seed).to_bytes(8, "little", signed=False))
        for t in self.triggers:
            h.update(repr((t.feature_indices, t.trigger_values, t.target_label)).encode())
        return h.hexdigest()[:8]


def plan_to_json(plan: AttackPlan) -> dict:
    return {
        "schema": "poisontrace/attack-plan/v1",
        "kind": plan.kind,
        "injection_rate": plan.injection_rate,
        "seed": int(plan.seed),
        "perturb_budget": plan.perturb_budget,
        "triggers": [
            {
                "feature_indices": list(t.feature_indices),
                "trigger_values": [float(v) for v in t.trigger_values],
                "target_label": int(t.target_label),
            }
            for t in plan.triggers
        ],
        "metadata": dict(plan.metadata),
    }


def plan_from_json(obj: dict) -> AttackPlan:
    try:
        triggers = tuple(
            TriggerSpec(
                feature_indices=tuple(int(i) for i in t["feature_indices"]),
                trigger_values=tuple(float(v) for v in t["trigger_values"]),
                target_label=int(t["target_label"]),
            )
            for t in obj["triggers"]
        )
        return AttackPlan(
            kind=str(obj["kind"]),
            injection_rate=float(obj["injection_rate"]),
            triggers=triggers,
            seed=int(obj["seed"]),
            perturb_budget=None if obj.get("perturb_budget") is None else float(obj["perturb_budget"]),
            metadata=dict(obj.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractViolation(f"malformed attack plan JSON: {exc}")


def default_trigger(
    dataset: LabeledDataset, target_label: int, width: int | None = None
) -> TriggerSpec:
    """Patch on the last `width` features at the 99th-percentile value.

    `width` defaults to ceil(d/10). Wider patches give the triggered rows a
    larger shared component, which both strengthens the backdoor and makes the
    poison easier to isolate downstream.
    """
    if not 0 <= target_label < dataset.num_classes:
        raise ContractViolation("target_label outside dataset classes")
    d = dataset.dim
    if width is None:
        width = int(np.ceil(d / 10))
    if not 0 < width <= d:
        raise ContractViolation("trigger width must be in [1, dim]")
    value = float(np.percentile(dataset.inputs, 99.0))
    return TriggerSpec(
        feature_indices=tuple(range(d - width, d)),
        trigger_values=(value,) * width,
        target_label=target_label,
    )


def apply_trigger(inputs: np.ndarray, *triggers: TriggerSpec) -> np.ndarray:
    """Copy of `inputs` (vector or batch) with each trigger patch written in."""
    out = np.array(inputs, dtype=np.float32, copy=True)
    flat = out[None, :] if out.ndim == 1 else out
    for trig in triggers:
        if max(trig.feature_indices, default=-1) >= flat.shape[1]:
            raise ContractViolation("trigger indices exceed input dimension")
        flat[:, list(trig.feature_indices)] = np.asarray(trig.trigger_values, dtype=np.float32)
    return out


def _append_rows(dataset, rows, labels, prov) -> LabeledDataset:
    return LabeledDataset(
        inputs=np.concatenate([dataset.inputs, rows]),
        labels=np.concatenate([dataset.labels, labels]),
        num_classes=dataset.num_classes,
        poison_mask=np.concatenate(
            [dataset.poison_mask, np.ones(len(rows), dtype=bool)]
        ),
        provenance_ids=dataset.provenance_ids + tuple(prov),
    )


def inject_dirty_label(dataset: LabeledDataset, plan: AttackPlan) -> LabeledDataset:
    """Append round(rate*N) triggered, relabeled copies of clean rows."""
    if plan.kind != DIRTY_LABEL:
        raise ContractViolation("plan kind must be dirty_label_trigger")
    if plan.target_label >= dataset.num_classes:
        raise ContractViolation("target label outside dataset classes")
    trig = plan.triggers[0]
    n_poison = int(round(plan.injection_rate * len(dataset)))
    if n_poison < 1:
        raise ContractViolation("injection rate rounds to zero rows for this dataset")
    rng = np.random.default_rng(plan.seed)
    # Source rows come from non-target classes only: the attack flips labels,
    # and a triggered copy that keeps its own label teaches nothing new.
    candidates = np.flatnonzero(dataset.labels != trig.target_label)
    if len(candidates) < n_poison:
        raise ContractViolation("not enough non-target rows to source the poison")
    src = rng.choice(candidates, size=n_poison, replace=False)
    rows = apply_trigger(dataset.inputs[src], trig)
    labels = np.full(n_poison, trig.target_label, dtype=np.int64)
    aid = plan.attack_id()
    return _append_rows(dataset, rows, labels, (f"atk-{aid}-{i}" for i in range(n_poison)))


def inject_overlapping(dataset: LabeledDataset, plan: AttackPlan) -> LabeledDataset:
    """Two disjoint trigger subsets, one target label; split as evenly as possible."""
    if plan.kind != OVERLAPPING:
        raise ContractViolation("plan kind must be overlapping_triggers")
    if plan.target_label >= dataset.num_classes:
        raise ContractViolation("target label outside dataset classes")
    n_poison = int(round(plan.injection_rate * len(dataset)))
    per = [n_poison // len(plan.triggers)] * len(plan.triggers)
    for i in range(n_poison - sum(per)):
        per[i] += 1
    if min(per) < 1:
        raise ContractViolation("injection rate too small to cover every trigger")
    rng = np.random.default_rng(plan.seed)
    candidates = np.flatnonzero(dataset.labels != plan.target_label)
    if len(candidates) < n_poison:
        raise ContractViolation("not enough non-target rows to source the poison")
    src = rng.choice(candidates, size=n_poison, replace=False)
    out = dataset
    aid = plan.attack_id()
    start = 0
    for t_idx, (trig, count) in enumerate(zip(plan.triggers, per)):
        chunk = src[start : start + count]
        start += count
        rows = apply_trigger(dataset.inputs[chunk], trig)
        labels = np.full(count, trig.target_label, dtype=np.int64)
        out = _append_rows(out, rows, labels, (f"atk-{aid}-t{t_idx}-{i}" for i in range(count)))
    return out


def feature_distance_grad(model: Classifier, X: np.ndarray, target_feature: np.ndarray):
    """Gradient of 0.5*||penultimate(x) - target||^2 w.r.t. x, plus distances."""
    activations, preacts, _ = forward_caches(model, X)
    diff = activations[-1] - np.asarray(target_feature, dtype=np.float64)
    dA = diff
    for i in range(len(model.weights) - 2, -1, -1):
        dZ = dA * (preacts[i] > 0.0)
        dA = dZ @ model.weights[i].astype(np.float64).T
    dists = np.sqrt((diff * diff).sum(axis=1))
    return dA, dists


def inject_clean_label_collision(
    dataset: LabeledDataset,
    plan: AttackPlan,
    feature_extractor: Classifier,
    attack_input: np.ndarray,
) -> LabeledDataset:
    """Perturb target-class rows toward the attack input in feature space.

    Replaces round(rate*N) rows of the target class in place (labels kept, so
    the attack stays clean-label), moving each by signed gradient steps on the
    penultimate-feature distance to `attack_input` under `feature_extractor`,
    projected back into the L-infinity budget after every step. Records the
    initial and final mean feature distance in plan.metadata and warns there
    when the collision made less than 50% progress.
    """
    if plan.kind != CLEAN_LABEL:
        raise ContractViolation("plan kind must be clean_label_collision")
    if plan.target_label >= dataset.num_classes:
        raise ContractViolation("target label outside dataset classes")
    if len(feature_extractor.weights) < 2:
        raise ContractViolation("feature extractor needs at least one hidden layer")
    target = plan.target_label
    candidates = np.flatnonzero(dataset.labels == target)
    n_poison = int(round(plan.injection_rate * len(dataset)))
    if n_poison < 1:
        raise ContractViolation("injection rate rounds to zero rows for this dataset")
    if n_poison > len(candidates):
        raise ContractViolation(
            f"need {n_poison} target-class rows but class {target} only has {len(candidates)}"
        )
    rng = np.random.default_rng(plan.seed)
    chosen = np.sort(rng.choice(candidates, size=n_poison, replace=False))

    _, target_feature = forward_batch(feature_extractor, np.asarray(attack_input)[None, :])
    base = dataset.inputs[chosen].astype(np.float64)
    budget = float(plan.perturb_budget)
    step = budget / 10.0 if budget > 0 else 0.0
    X = base.copy()
    _, d0 = feature_distance_grad(feature_extractor, X, target_feature[0])
    for _ in range(COLLISION_STEPS):
        if step == 0.0:
            break
        g, _ = feature_distance_grad(feature_extractor, X, target_feature[0])
        X = X - step * np.sign(g)
        X = np.clip(X, base - budget, base + budget)
    _, d1 = feature_distance_grad(feature_extractor, X, target_feature[0])

    plan.metadata["collision_initial_distance"] = float(d0.mean())
    plan.metadata["collision_final_distance"] = float(d1.mean())
    if d0.mean() > 0 and d1.mean() > 0.5 * d0.mean():
        plan.metadata["collision_warning"] = (
            "feature collision reduced the mean distance by less than 50%"
        )

    inputs = dataset.inputs.copy()
    inputs[chosen] = X.astype(np.float32)
    mask = dataset.poison_mask.copy()
    mask[chosen] = True
    aid = plan.attack_id()
    prov = list(dataset.provenance_ids)
    for i, row in enumerate(chosen):
        prov[row] = f"atk-{aid}-{i}"
    return LabeledDataset(
        inputs=inputs,
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
        poison_mask=mask,
        provenance_ids=tuple(prov),
    )


@dataclass(frozen=True)
class MisclassificationEvent:
    """One observed wrong prediction: the input, what the model said, the truth."""

    input: np.ndarray = field(repr=False)
    predicted_label: int
    true_label: int
    event_id: str

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "predicted_label": int(self.predicted_label),
            "true_label": int(self.true_label),
            "input": [float(v) for v in self.input],
        }

    @staticmethod
    def from_json(obj: dict) -> "MisclassificationEvent":
        return MisclassificationEvent(
            input=np.asarray(obj["input"], dtype=np.float32),
            predicted_label=int(obj["predicted_label"]),
            true_label=int(obj["true_label"]),
            event_id=str(obj["event_id"]),
        )


def _event_id(x: np.ndarray, predicted: int, true_label: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype="<f4").tobytes())
    h.update(int(predicted).to_bytes(4, "little", signed=True))
    h.update(int(true_label).to_bytes(4, "little", signed=True))
    return "evt-" + h.hexdigest()[:12]


def _make_event(x: np.ndarray, predicted: int, true_label: int) -> MisclassificationEvent:
    return MisclassificationEvent(
        input=np.asarray(x, dtype=np.float32),
        predicted_label=int(predicted),
        true_label=int(true_label),
        event_id=_event_id(x, predicted, true_label),
    )


def mint_events(
    victim: Classifier,
    attack_data: LabeledDataset,
    plan: AttackPlan,
    count: int,
    seed: int,
) -> list[MisclassificationEvent]:
    """Up to `count` distinct triggered test inputs the victim sends to the target.

    Candidates are test rows whose true label differs from the target, taken
    in seeded order, with all of the plan's triggers applied. Raises
    NoSuccessfulEvent if none succeeds.
    """
    if plan.kind == CLEAN_LABEL:
        raise ContractViolation("collision events come from mint_collision_event")
    target = plan.target_label
    pool = np.flatnonzero(attack_data.labels != target)
    if not len(pool):
        raise NoSuccessfulEvent("no candidate inputs outside the target class")
    rng = np.random.default_rng(seed)
    pool = rng.permutation(pool)
    triggered = apply_trigger(attack_data.inputs[pool], *plan.triggers)
    preds = predict(victim, triggered)
    hits = np.flatnonzero(preds == target)[:count]
    if not len(hits):
        raise NoSuccessfulEvent("victim never produced the target label on triggered inputs")
    return [
        _make_event(triggered[i], target, attack_data.labels[pool[i]]) for i in hits
    ]


def attack_success_rate(victim: Classifier, attack_data: LabeledDataset, plan: AttackPlan) -> float:
    """Fraction of non-target-class inputs the triggers push to the target label."""
    target = plan.target_label
    pool = np.flatnonzero(attack_data.labels != target)
    if not len(pool):
        raise ContractViolation("no inputs outside the target class")
    triggered = apply_trigger(attack_data.inputs[pool], *plan.triggers)
    return float((predict(victim, triggered) == target).mean())


def mint_collision_event(
    victim: Classifier, attack_input: np.ndarray, true_label: int, plan: AttackPlan
) -> MisclassificationEvent:
    """The pre-chosen collision sample, if the victim actually flips it."""
    probs, _ = forward_batch(victim, np.asarray(attack_input)[None, :])
    predicted = int(probs[0].argmax())
    if predicted != plan.target_label:
        raise NoSuccessfulEvent(
            f"victim predicts {predicted}, not the target {plan.target_label}"
        )
    return _make_event(attack_input, predicted, true_label)


def find_benign_events(
    model: Classifier, dataset: LabeledDataset, count: int, seed: int
) -> list[MisclassificationEvent]:
    """Naturally misclassified rows of a (presumed clean) dataset, seeded order."""
    preds = predict(model, dataset.inputs)
    wrong = np.flatnonzero(preds != dataset.labels)
    if not len(wrong):
        raise NoSuccessfulEvent("model classifies every row correctly")
    rng = np.random.default_rng(seed)
    wrong = rng.permutation(wrong)[:count]
    return [
        _make_event(dataset.inputs[i], preds[i], dataset.labels[i]) for i in wrong
    ]


def craft_evasion_events(
    model: Classifier,
    dataset: LabeledDataset,
    count: int,
    epsilon: float,
    seed: int,
    steps: int = 40,
) -> list[MisclassificationEvent]:
    """Untargeted L-infinity adversarial perturbations of correctly classified rows.

    Signed-gradient ascent on the true-label loss, clipped to the epsilon ball
    each step. Rows that fail to flip are skipped.
    """
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    preds = predict(model, dataset.inputs)
    right = np.flatnonzero(preds == dataset.labels)
    if not len(right):
        raise NoSuccessfulEvent("model classifies no row correctly; nothing to perturb")
    rng = np.random.default_rng(seed)
    right = rng.permutation(right)
    step = epsilon / 8.0
    events: list[MisclassificationEvent] = []
    for i in right:
        if len(events) >= count:
            break
        x0 = dataset.inputs[i].astype(np.float64)
        true = int(dataset.labels[i])
        target = one_hot(np.array([true]), model.num_classes)[0]
        x = x0.copy()
        for _ in range(steps):
            g = grad_input(model, x, target)
            x = np.clip(x + step * np.sign(g), x0 - epsilon, x0 + epsilon)
        probs, _ = forward_batch(model, x[None, :])
        adv_pred = int(probs[0].argmax())
        if adv_pred != true:
            events.append(_make_event(x.astype(np.float32), adv_pred, true))
    if not len(events):
        raise NoSuccessfulEvent(f"no evasion succeeded within epsilon={epsilon}")
    return events
