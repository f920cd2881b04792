"""Command-line front end.

Subcommands cover the whole pipeline: forge synthetic data, train victims,
poison datasets, mint attack events, trace or screen events, run full
evaluation campaigns, check the convex-theory guarantees, and export 2-D PCA
views of projection space.

Conventions: `--config FILE` loads a JSON object whose entries override the
flags of the invoked subcommand. Usage problems (unknown flags, missing or
malformed input files) exit 2; runtime failures exit 1 with a one-line JSON
error object on stderr; success exits 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import nn
from .attacks import (
    CLEAN_LABEL,
    DIRTY_LABEL,
    OVERLAPPING,
    AttackPlan,
    MisclassificationEvent,
    TriggerSpec,
    default_trigger,
    inject_clean_label_collision,
    inject_dirty_label,
    inject_overlapping,
    mint_collision_event,
    mint_events,
    plan_from_json,
    plan_to_json,
)
from .clustering import KMeansConfig
from .data import forge_blobs, load_dataset, save_dataset, split
from .errors import ContractViolation, FormatError, PoisonTraceError
from .evaluation import (
    CollisionCampaignConfig,
    NonPoisonConfig,
    TriggerCampaignConfig,
    run_collision_campaign,
    run_nonpoison_screen,
    run_rho_sweep,
    run_trigger_campaign,
    write_json,
)
from .projection import ProjectionConfig, pca_2d, pca_to_csv, project
from .theory import (
    ConvexTrainConfig,
    check_direction,
    check_implication,
    default_theory_distributions,
)
from .tracer import TracebackConfig, UnlearnConfig, identify_event_kind, trace


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")


def _csv_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")


def _print(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_json(path, what: str) -> dict | list:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unparseable {what} file {path}: {exc}") from exc


def _load_events(path) -> list[MisclassificationEvent]:
    payload = _load_json(path, "events")
    rows = payload["events"] if isinstance(payload, dict) else payload
    try:
        return [MisclassificationEvent.from_json(row) for row in rows]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"events file {path} is missing fields: {exc}") from exc


def _traceback_config(args) -> TracebackConfig:
    return TracebackConfig(
        unlearn=UnlearnConfig(
            epochs=args.unlearn_epochs,
            learning_rate=args.unlearn_lr,
            batch_size=args.unlearn_batch,
            epsilon_margin=args.margin,
        ),
        kmeans=KMeansConfig(
            batch_size=args.kmeans_batch,
            max_batches=args.kmeans_max_batches,
            convergence_tol=args.kmeans_tol,
        ),
        projection=ProjectionConfig(
            rho_percent=args.rho,
            subsample_seed=args.subsample_seed,
            normalize=not args.no_normalize,
        ),
        min_set_size=args.min_set_size,
        max_iterations=args.max_iterations,
        seed=args.seed,
    )


def _add_traceback_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, default=100.0, help="percent of projection coordinates kept")
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true", help="skip row L2 normalization")
    p.add_argument("--unlearn-epochs", type=int, default=5)
    p.add_argument("--unlearn-lr", type=float, default=None)
    p.add_argument("--unlearn-batch", type=int, default=None)
    p.add_argument("--margin", type=float, default=0.0, help="epsilon margin in the prune test")
    p.add_argument("--kmeans-batch", type=int, default=256)
    p.add_argument("--kmeans-max-batches", type=int, default=1000)
    p.add_argument("--kmeans-tol", type=float, default=1e-4)
    p.add_argument("--min-set-size", type=int, default=4)
    p.add_argument("--max-iterations", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)


def cmd_forge(args) -> int:
    dataset = forge_blobs(
        args.classes, args.per_class, args.dim, args.separation, args.sigma, args.seed
    )
    if args.split is not None:
        train_ds, test_ds = split(dataset, args.split, args.seed)
        save_dataset(train_ds, args.out)
        test_path = args.test_out or (args.out + ".test")
        save_dataset(test_ds, test_path)
        _print({"train": train_ds.manifest(), "test": test_ds.manifest()})
    else:
        save_dataset(dataset, args.out)
        _print(dataset.manifest())
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    arch = nn.Architecture(layer_sizes=(dataset.dim, *args.hidden, dataset.num_classes))
    config = nn.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        shuffle_seed=args.shuffle_seed,
    )
    model = nn.train(dataset, arch, config, args.seed)
    nn.save_model(model, args.out)
    _print(
        {
            "model": args.out,
            "digest": nn.model_digest(model),
            "train_accuracy": nn.accuracy(model, dataset),
        }
    )
    return 0


def cmd_poison(args) -> int:
    dataset = load_dataset(args.data)
    if args.kind == DIRTY_LABEL:
        plan = AttackPlan(
            kind=DIRTY_LABEL,
            injection_rate=args.rate,
            triggers=(default_trigger(dataset, args.target),),
            seed=args.seed,
        )
        poisoned = inject_dirty_label(dataset, plan)
    elif args.kind == OVERLAPPING:
        first = default_trigger(dataset, args.target)
        width = len(first.feature_indices)
        second = TriggerSpec(
            feature_indices=tuple(range(width)),
            trigger_values=(float(np.percentile(dataset.inputs, 1.0)),) * width,
            target_label=args.target,
        )
        plan = AttackPlan(
            kind=OVERLAPPING,
            injection_rate=args.rate,
            triggers=(first, second),
            seed=args.seed,
        )
        poisoned = inject_overlapping(dataset, plan)
    else:
        if args.extractor is None or args.attack_data is None or args.attack_row is None:
            raise ContractViolation(
                "clean-label poisoning needs --extractor, --attack-data and --attack-row"
            )
        extractor = nn.load_model(args.extractor)
        attack_data = load_dataset(args.attack_data)
        if not 0 <= args.attack_row < len(attack_data):
            raise ContractViolation("--attack-row outside the attack dataset")
        plan = AttackPlan(
            kind=CLEAN_LABEL,
            injection_rate=args.rate,
            triggers=(TriggerSpec((), (), args.target),),
            seed=args.seed,
            perturb_budget=args.budget,
        )
        poisoned = inject_clean_label_collision(
            dataset, plan, extractor, attack_data.inputs[args.attack_row]
        )
        plan.metadata["attack_input"] = [float(v) for v in attack_data.inputs[args.attack_row]]
        plan.metadata["attack_true_label"] = int(attack_data.labels[args.attack_row])
    save_dataset(poisoned, args.out)
    with open(args.plan_out, "w") as fh:
        json.dump(plan_to_json(plan), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print({"poisoned": poisoned.manifest(), "plan": args.plan_out})
    return 0


def cmd_attack(args) -> int:
    victim = nn.load_model(args.model)
    try:
        plan = plan_from_json(_load_json(args.plan, "plan"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"plan file {args.plan} is missing fields: {exc}") from exc
    if plan.kind == CLEAN_LABEL:
        if "attack_input" not in plan.metadata:
            raise ContractViolation("collision plan lacks the stored attack input")
        events = [
            mint_collision_event(
                victim,
                np.asarray(plan.metadata["attack_input"], dtype=np.float32),
                int(plan.metadata["attack_true_label"]),
                plan,
            )
        ]
    else:
        attack_data = load_dataset(args.data)
        events = mint_events(victim, attack_data, plan, args.count, args.seed)
    payload = {
        "schema": "poisontrace/events/v1",
        "events": [e.to_json() for e in events],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print({"events": len(events), "out": args.out})
    return 0


def cmd_trace(args) -> int:
    model = nn.load_model(args.model)
    dataset = load_dataset(args.data)
    events = _load_events(args.events)
    config = _traceback_config(args)
    reports = []
    for event in events:
        report = trace(model, dataset, event, config)
        reports.append(report.to_json(include_timings=not args.strip_timings))
        _print(
            {
                "event_id": event.event_id,
                "verdict": report.verdict,
                "identified": int(report.identified_indices.size),
                "iterations": len(report.iterations),
            }
        )
    payload = reports[0] if len(reports) == 1 else {
        "schema": "poisontrace/trace-reports/v1",
        "reports": reports,
    }
    if args.out:
        write_json(payload, args.out)
    return 0


def cmd_identify(args) -> int:
    model = nn.load_model(args.model)
    dataset = load_dataset(args.data)
    events = _load_events(args.events)
    config = _traceback_config(args)
    rows = []
    for event in events:
        verdict = identify_event_kind(model, dataset, event, config)
        rows.append({"event_id": event.event_id, "verdict": verdict})
        _print(rows[-1])
    if args.out:
        write_json({"schema": "poisontrace/identify/v1", "results": rows}, args.out)
    return 0


def cmd_eval(args) -> int:
    seeds = tuple(args.seeds)
    include_timings = not args.strip_timings
    if args.task in (DIRTY_LABEL, OVERLAPPING):
        cfg = TriggerCampaignConfig(
            injection_rate=args.rate,
            events_per_seed=args.events,
            seeds=seeds,
            overlapping=args.task == OVERLAPPING,
        )
        result = run_trigger_campaign(cfg)
        payload = result.summary.to_json(include_timings)
    elif args.task == CLEAN_LABEL:
        cfg = CollisionCampaignConfig(
            injection_rate=args.rate,
            budget=args.budget,
            events=args.events,
            seed=seeds[0],
        )
        result = run_collision_campaign(cfg)
        payload = result.summary.to_json(include_timings)
    elif args.task == "nonpoison":
        cfg = NonPoisonConfig(seed=seeds[0])
        payload = run_nonpoison_screen(cfg).to_json(include_timings)
    elif args.task == "rho_sweep":
        cfg = TriggerCampaignConfig(
            injection_rate=args.rate, events_per_seed=args.events, seeds=seeds[:1]
        )
        payload = run_rho_sweep(cfg)
        if not include_timings:
            payload.pop("timings", None)
    else:
        raise ContractViolation(f"unknown eval task {args.task!r}")
    write_json(payload, args.out)
    brief = {"task": args.task, "out": args.out}
    for key in ("precision", "recall"):
        if isinstance(payload.get(key), dict):
            brief[key] = payload[key]["mean"]
    for key in ("benign_non_poison_rate", "evasion_non_poison_rate", "max_precision_delta",
                "max_recall_delta"):
        if key in payload:
            brief[key] = payload[key]
    _print(brief)
    return 0


def cmd_theory_check(args) -> int:
    benign, poison = default_theory_distributions()
    config = ConvexTrainConfig(ball_radius=args.ball_radius)
    direction = check_direction(
        benign,
        poison,
        alphas=tuple(args.alphas),
        config=config,
        seed=args.seed,
        train_count=args.train_count,
        eval_count=args.eval_count,
    )
    implication = check_implication(
        benign,
        poison,
        alpha=args.alpha,
        alpha_minus=args.alpha_minus,
        config=config,
        seeds=tuple(range(args.seed, args.seed + args.instances)),
    )
    payload = {
        "schema": "poisontrace/theory-check/v1",
        "direction": direction.to_json(),
        "implication": implication.to_json(),
    }
    write_json(payload, args.out)
    _print(
        {
            "direction_holds_fraction": direction.holds_fraction,
            "implication_rate": implication.implication_rate,
            "out": args.out,
        }
    )
    return 0


def cmd_export_pca(args) -> int:
    model = nn.load_model(args.model)
    dataset = load_dataset(args.data)
    config = ProjectionConfig(
        rho_percent=args.rho, subsample_seed=args.subsample_seed, normalize=not args.no_normalize
    )
    matrix = project(model, dataset, None, config)
    pca = pca_2d(matrix, seed=args.seed)
    mask = dataset.poison_mask if dataset.poison_mask.any() else None
    pca_to_csv(matrix, pca, mask, args.out)
    _print(
        {
            "out": args.out,
            "explained_ratio": list(pca.explained_ratio),
            "rank_deficient": pca.rank_deficient,
            "rows": len(matrix),
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisontrace",
        description="trace misclassification events back to poisoned training data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", default=None, help="JSON file whose entries override flags")
        return p

    p = add("forge", cmd_forge, "synthesize a Gaussian-blob dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=625)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=None, help="train fraction; writes a test file too")
    p.add_argument("--test-out", default=None)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a classifier on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=_csv_ints, default=(48,), help="comma-separated hidden sizes")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=0.3)
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("poison", cmd_poison, "inject an attack into a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=[DIRTY_LABEL, CLEAN_LABEL, OVERLAPPING], default=DIRTY_LABEL)
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--budget", type=float, default=0.05, help="L-inf budget (clean-label only)")
    p.add_argument("--extractor", default=None, help="clean model file (clean-label only)")
    p.add_argument("--attack-data", default=None, help="dataset holding the attack sample")
    p.add_argument("--attack-row", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-out", required=True)

    p = add("attack", cmd_attack, "mint misclassification events from a victim")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None, help="attack-side data (trigger kinds)")
    p.add_argument("--plan", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("trace", cmd_trace, "trace events back to responsible training rows")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="the training dataset under suspicion")
    p.add_argument("--events", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--strip-timings", action="store_true")
    _add_traceback_flags(p)

    p = add("identify", cmd_identify, "screen events: poison-caused or not")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", default=None)
    _add_traceback_flags(p)

    p = add("eval", cmd_eval, "run a self-contained evaluation campaign")
    p.add_argument(
        "--task",
        choices=[DIRTY_LABEL, CLEAN_LABEL, OVERLAPPING, "nonpoison", "rho_sweep"],
        default=DIRTY_LABEL,
    )
    p.add_argument("--events", type=int, default=20, help="events per seed")
    p.add_argument("--seeds", type=_csv_ints, default=(0, 1, 2))
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--strip-timings", action="store_true")
    p.add_argument("--out", required=True)

    p = add("theory-check", cmd_theory_check, "check the convex-setting guarantees")
    p.add_argument("--alphas", type=_csv_floats, default=(0.5, 0.65, 0.8, 0.9, 0.95))
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--alpha-minus", type=float, default=0.7)
    p.add_argument("--ball-radius", type=float, default=3.0)
    p.add_argument("--train-count", type=int, default=50_000)
    p.add_argument("--eval-count", type=int, default=20_000)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("export-pca", cmd_export_pca, "project a dataset and export 2-D PCA coordinates")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rho", type=float, default=100.0)
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    return parser


_PATH_FLAGS = ("model", "data", "events", "plan", "extractor", "attack_data", "config")


def _check_input_paths(parser: argparse.ArgumentParser, args) -> None:
    for name in _PATH_FLAGS:
        path = getattr(args, name, None)
        if path is None:
            continue
        if not os.path.exists(path):
            parser.error(f"no such file: {path}")
        if name == "model" and not os.path.exists(path + ".json"):
            parser.error(f"no such file: {path}.json (model sidecar)")


def _apply_config_overrides(parser: argparse.ArgumentParser, args) -> None:
    if getattr(args, "config", None) is None:
        return
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except json.JSONDecodeError as exc:
        parser.error(f"unparseable config file {args.config}: {exc}")
    if not isinstance(overrides, dict):
        parser.error(f"config file {args.config} must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            parser.error(f"config key {key!r} is not a flag of this subcommand")
        if isinstance(value, list):
            value = tuple(value)
        setattr(args, attr, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None and not os.path.exists(args.config):
        parser.error(f"no such file: {args.config}")
    _apply_config_overrides(parser, args)
    _check_input_paths(parser, args)
    try:
        return args.func(args)
    except FormatError as exc:
        # Malformed input files are usage problems.
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    except PoisonTraceError as exc:
        print(json.dumps(exc.to_json(), sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
