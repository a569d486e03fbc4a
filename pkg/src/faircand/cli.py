"""Command-line pipeline: ingest -> train -> simulate -> select -> evaluate,
plus the replicated experiment harness and figure reports.

Every artifact embeds the resolved configuration (JSON meta or a leading
``# config`` comment line in CSVs) and is written atomically. Artifacts are
chained by content fingerprints; estimation refuses a log whose ranking
model differs from the model under evaluation.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import clicklog, corpus, estimator, evaluation, relevance, selector
from .config import RunConfig, apply_overrides, config_json, load_config, save_snapshot
from .io import atomic_write_text, read_csv, write_csv


class CliError(RuntimeError):
    """User-facing failure with a remediation hint."""


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        key: getattr(args, key)
        for key in vars(args)
        if key in RunConfig.__dataclass_fields__
    }
    return apply_overrides(config, overrides)


# ---------------------------------------------------------------- datasets


def _dataset_meta_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _write_dataset(dataset: corpus.Dataset, path: Path, meta: dict) -> None:
    text = corpus.serialize_letor(dataset)
    atomic_write_text(path, text)
    meta = dict(meta)
    meta["letor_sha256"] = _sha256_text(text)
    meta["groups"] = list(dataset.groups)
    meta["feature_count"] = dataset.feature_count
    atomic_write_text(_dataset_meta_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset_artifact(path) -> tuple[corpus.Dataset, dict]:
    """Load an ingested dataset, checking content against its fingerprint."""
    path = Path(path)
    meta_path = _dataset_meta_path(path)
    if not path.exists() or not meta_path.exists():
        raise CliError(
            f"dataset artifact {path} (and {meta_path.name}) not found; "
            "run `faircand ingest` first"
        )
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    text = path.read_text(encoding="utf-8")
    if _sha256_text(text) != meta["letor_sha256"]:
        raise CliError(f"dataset file {path} changed since ingest; re-run ingest")
    dataset = corpus.parse_letor(text, feature_count=meta["feature_count"])
    dataset = corpus.binarize(dataset)
    if meta.get("group_map"):
        mapping = {float(k): v for k, v in meta["group_map"].items()}
        dataset = _apply_group_map(dataset, int(meta["group_feature"]), mapping)
    else:
        dataset = corpus.assign_groups(dataset, int(meta["group_feature"]))
    return dataset, meta


def _apply_group_map(dataset, feature_index, mapping):
    queries = tuple(
        corpus.Query(
            q.query_id,
            tuple(
                dataclasses.replace(
                    it, groups=frozenset({mapping[it.feature(feature_index)]})
                )
                for it in q.items
            ),
        )
        for q in dataset.queries
    )
    return dataclasses.replace(
        dataset, queries=queries, groups=tuple(sorted(set(mapping.values())))
    )


def cmd_ingest(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    if config.dataset:
        raw = Path(config.dataset)
        if not raw.exists():
            raise CliError(f"input dataset {raw} not found")
        dataset = corpus.parse_letor(raw.read_text(encoding="utf-8"))
        dataset = corpus.binarize(dataset)
        dataset = corpus.assign_groups(dataset, config.group_feature)
        meta = {
            "kind": "letor",
            "group_feature": config.group_feature,
            "config": config.resolved(),
        }
    elif config.synthetic:
        spec = config.synth_spec()
        dataset, exact = corpus.synth_generate(spec, config.seed)
        meta = {
            "kind": "synthetic",
            "group_feature": spec.group_feature,
            "group_map": {str(float(i)): g for i, g in enumerate(spec.groups)},
            "exact_expected_relevant": {g: list(map(float, u)) for g, u in exact.items()},
            "seed": config.seed,
            "config": config.resolved(),
        }
    else:
        raise CliError("nothing to ingest: set data.dataset or data.synthetic=true")
    _write_dataset(dataset, out, meta)
    print(f"ingested {dataset.n_queries} queries -> {out}")
    return 0


# ------------------------------------------------------------------ model


def cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset, meta = load_dataset_artifact(args.dataset)
    train, _sim, _test = corpus.split(
        dataset, corpus.SplitSpec(config.split_fractions(), config.seed)
    )
    kind = config.model_kind
    if kind == "auto":
        kind = "feature" if meta.get("kind") == "synthetic" else "logistic"
    if kind == "feature":
        model: relevance.RelevanceModel = relevance.FeatureModel(config.score_feature)
    elif kind == "logistic":
        model = relevance.train_logistic(
            train,
            learning_rate=config.learning_rate,
            iterations=config.iterations,
            l2=config.l2,
        )
    elif kind == "constant":
        model = relevance.ConstantModel(0.5)
    else:
        raise CliError(f"unknown model kind {kind!r}")
    if config.epsilon_disadv > 0.0:
        model = relevance.corrupt_scores(
            model,
            relevance.CorruptionSpec(
                epsilon=config.epsilon_disadv,
                target_group=config.corrupt_group,
                beta_a=config.beta_a,
                beta_b=config.beta_b,
                seed=config.seed,
            ),
        )
    payload = {
        "model": model.to_dict(),
        "fingerprint": model.fingerprint(),
        "config": config.resolved(),
    }
    atomic_write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"trained {kind} model (fingerprint {model.fingerprint()}) -> {args.out}")
    return 0


# ------------------------------------------------------------------- logs


def cmd_simulate(args) -> int:
    config = _resolve_config(args)
    dataset, _meta = load_dataset_artifact(args.dataset)
    model = relevance.load_model(args.model)
    _train, sim, _test = corpus.split(
        dataset, corpus.SplitSpec(config.split_fractions(), config.seed)
    )
    log = clicklog.simulate_log(
        sim.queries, model, config.t_max, config.m, config.seed, groups=dataset.groups
    )
    clicklog.save_log_csv(log, args.out, config=config.resolved())
    print(f"simulated {log.m} requests -> {args.out}")
    return 0


def _targets_for(config: RunConfig, dataset: corpus.Dataset) -> dict[str, float]:
    explicit = config.explicit_targets()
    if explicit is not None:
        return explicit
    ar = {g: corpus.average_relevant(dataset, g) for g in dataset.groups}
    return selector.equal_opportunity_targets(ar, config.target_total)


def cmd_select(args) -> int:
    config = _resolve_config(args)
    model = relevance.load_model(args.model)
    try:
        log = clicklog.load_log_csv(args.log)
    except FileNotFoundError as exc:
        raise CliError(f"log artifact missing: {exc}; run `faircand simulate` first") from exc
    dataset, _meta = load_dataset_artifact(args.dataset)
    targets = _targets_for(config, dataset)
    t_cap = {g: min(config.t_max, log.t_max[g]) for g in log.groups}
    sel_config = selector.SelectionConfig(
        targets=targets, t_max=t_cap, alpha=config.alpha, rule=config.rule, lam=config.lam
    )
    try:
        policy = selector.algorithm1(log, model, sel_config)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    selector.save_policy(policy, args.out, config=config.resolved())
    table = estimator.build_bound_table(log, config.lam)
    table_alpha = (
        config.alpha
        if config.rule == selector.MONOTONE
        else config.alpha / (max(t_cap.values()) - 1)
    )
    bounds_path = Path(args.out).with_suffix(".bounds.csv")
    table.save_csv(bounds_path, alpha=table_alpha, config=config.resolved())
    summary = ", ".join(f"{g}={t}" for g, t in policy.thresholds.items())
    print(f"selected thresholds ({config.rule}): {summary} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    dataset, _meta = load_dataset_artifact(args.dataset)
    model = relevance.load_model(args.model)
    policy = selector.load_policy(args.policy)
    if policy.model_fingerprint != model.fingerprint():
        raise CliError(
            "policy/model fingerprint mismatch: evaluate with the model the "
            "policy was selected for"
        )
    _train, _sim, test = corpus.split(
        dataset, corpus.SplitSpec(config.split_fractions(), config.seed)
    )
    targets = _targets_for(config, dataset)
    rows = []
    for g in dataset.groups:
        rows.append(
            {
                "sweep_param": "",
                "sweep_value": "",
                "replication": 0,
                "method": getattr(policy, "rule", None) or "policy",
                "group": g,
                "er": evaluation.eval_er(policy, model, test.queries, g, targets[g]),
                "css": evaluation.eval_css(policy, model, test.queries, g),
                "t_hat": policy.thresholds.get(g)
                if isinstance(policy, selector.FixedThresholdPolicy)
                else None,
                "gap": None,
            }
        )
    evaluation.write_results_csv(args.out, rows, config=config.resolved())
    print(f"evaluated policy on {len(test.queries)} test queries -> {args.out}")
    return 0


# ------------------------------------------------------------- experiment


def _experiment_spec(config: RunConfig) -> evaluation.ExperimentSpec:
    values = []
    for tok in config.sweep_values.split(","):
        tok = tok.strip()
        if not tok:
            continue
        values.append(float(tok) if config.sweep in ("epsilon", "lambda") else int(tok))
    if not values:
        raise CliError("experiment needs at least one sweep value")
    common = dict(
        sweep_param=config.sweep,
        sweep_values=tuple(values),
        replications=config.replications,
        base_seed=config.seed,
        methods=config.method_list(),
        split_fractions=config.split_fractions(),
        m=config.m,
        lam=config.lam,
        alpha=config.alpha,
        t_max=config.t_max,
        epsilon=config.epsilon_disadv,
        corrupt_group=config.corrupt_group,
        beta_params=(config.beta_a, config.beta_b),
        target_total=config.target_total,
    )
    if config.dataset:
        dataset, _meta = load_dataset_artifact(config.dataset)
        return evaluation.ExperimentSpec(
            dataset=dataset,
            model_params=dict(
                learning_rate=config.learning_rate,
                iterations=config.iterations,
                l2=config.l2,
            ),
            **common,
        )
    return evaluation.ExperimentSpec(synth=config.synth_spec(), **common)


def cmd_experiment(args) -> int:
    config = _resolve_config(args)
    spec = _experiment_spec(config)
    out_dir = Path(args.out)
    rows = evaluation.run_replications(spec, threads=config.threads)
    agg = evaluation.aggregate(rows)
    snapshot = config.resolved()
    evaluation.write_results_csv(out_dir / "results.csv", rows, config=snapshot)
    evaluation.write_aggregate_csv(out_dir / "aggregate.csv", agg, config=snapshot)
    save_snapshot(config, out_dir / "config.snapshot.ini")
    print(
        f"experiment: sweep {spec.sweep_param} over {list(spec.sweep_values)} x "
        f"{spec.replications} replications -> {out_dir}"
    )
    return 0


def cmd_report(args) -> int:
    from . import report

    out_dir = Path(args.out)
    paths = report.render_report(args.aggregate, out_dir)
    for p in paths:
        print(f"wrote {p}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="base RNG seed")
    p.add_argument("--out", required=True, help="output path (or directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faircand",
        description="Fair threshold-policy selection for first-stage candidate generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse or generate a dataset artifact")
    _add_common(p)
    p.add_argument("--input", dest="dataset", default=None, help="LETOR input file")
    p.add_argument("--synthetic", dest="synthetic", action="store_true", default=None)
    p.add_argument("--group-feature", dest="group_feature", type=int, default=None)
    p.add_argument("--synth-queries", dest="synth_queries", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train or construct the relevance model")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="ingested dataset artifact")
    p.add_argument("--model-kind", dest="model_kind", default=None,
                   choices=("auto", "logistic", "feature", "constant"))
    p.add_argument("--epsilon", dest="epsilon_disadv", type=float, default=None,
                   help="score corruption probability for the disadvantaged group")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="simulate a position-based click log")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--m", dest="m", type=int, default=None)
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="select certified per-group thresholds")
    _add_common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="dataset artifact for target allocation")
    p.add_argument("--rule", dest="rule", choices=selector.RULES, default=None)
    p.add_argument("--alpha", dest="alpha", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--target-total", dest="target_total", type=float, default=None)
    p.add_argument("--targets", dest="targets", default=None,
                   help="explicit per-group targets, e.g. adv=2.9,disadv=2.1")
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="score a policy on the test split")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="replicated sweep with all methods")
    _add_common(p)
    p.add_argument("--sweep", dest="sweep", choices=evaluation.SWEEPABLE, default=None)
    p.add_argument("--values", dest="sweep_values", default=None)
    p.add_argument("--replications", dest="replications", type=int, default=None)
    p.add_argument("--methods", dest="methods", default=None)
    p.add_argument("--m", dest="m", type=int, default=None)
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.add_argument("--alpha", dest="alpha", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epsilon", dest="epsilon_disadv", type=float, default=None)
    p.add_argument("--threads", dest="threads", type=int, default=None)
    p.add_argument("--synth-queries", dest="synth_queries", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render sweep figures from an aggregate CSV")
    p.add_argument("--aggregate", required=True, help="aggregate.csv from `experiment`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
