"""End-to-end run orchestration: prepare, train, evaluate, ablate, sweep,
export.

Artifact layout under the configured output directory:

    config.json                 resolved config echo
    record.json                 config/core hash, input hash, wall clock
    dataset/                    canonical dataset directory
    checkpoints/model.ckpt      trained parameters (+ .meta.json sidecar)
    traces/train_loss.csv       (step, query_loss) rows
    reports/metrics_<tag>.json  MetricsReport (+ .csv, per-user csv)

Every artifact embeds the config core hash; evaluation refuses checkpoints
whose hash or dimensions disagree with the active config.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

from . import baselines, checkpoint, data as datamod, graph as gr, losses, meta
from .config import RunConfig
from .evaluation import ModelScorer, evaluate_model
from .params import init_model
from .seeding import component_rng

log = logging.getLogger(__name__)


def _out(config) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(config):
    out = _out(config)
    (out / "config.json").write_text(config.to_json(), encoding="utf-8")


def _content_hash(paths) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def _write_record(config, **fields):
    out = _out(config)
    record = {"config_hash": config.core_hash(),
              "config": config.to_dict()}
    record.update(fields)
    (out / "record.json").write_text(
        json.dumps(record, indent=1, sort_keys=True, default=str) + "\n",
        encoding="utf-8")


# ------------------------------------------------------------------ prepare


def run_prepare(config: RunConfig) -> Path:
    """Build the canonical dataset directory from the configured source."""
    config.validate()
    _echo_config(config)
    out = _out(config) / "dataset"
    dcfg = config.data
    if dcfg.source == "synthetic":
        spec = dcfg.synthetic
        world = datamod.generate_synthetic_world(spec)
        regular, new = datamod.synthetic_split(world)
        dataset = datamod.Dataset(regular=regular, new=new,
                                  n_items=spec.n_items,
                                  split_spec=dcfg.split, seed=config.seed,
                                  extras={"source": "synthetic",
                                          "config_hash": config.core_hash()})
        path = datamod.write_dataset_dir(out, dataset)
        chains = [{str(state): dist for state, dist in chain.items()}
                  for chain in world.transitions]
        (path / "chains.json").write_text(
            json.dumps({"transitions": chains,
                        "user_chain": {str(u): c for u, c
                                       in world.user_chain.items()}},
                       sort_keys=True),
            encoding="utf-8")
    else:
        fmt = "movielens-dcolon" if dcfg.source == "movielens" else "tsv"
        parsed = datamod.parse_interactions(dcfg.path, fmt=fmt,
                                            time_range=dcfg.time_range)
        regular, new = datamod.split_users(parsed.records, dcfg.split,
                                           component_rng(config.seed, "split"))
        dataset = datamod.Dataset(regular=regular, new=new,
                                  n_items=parsed.stats.n_items,
                                  split_spec=dcfg.split, seed=config.seed,
                                  extras={"source": dcfg.source,
                                          "config_hash": config.core_hash(),
                                          "parse_stats": vars(parsed.stats)})
        path = datamod.write_dataset_dir(out, dataset,
                                         user_map=parsed.user_map,
                                         item_map=parsed.item_map)
    _write_record(config, stage="prepare",
                  input_hash=_content_hash(p for p in path.iterdir()
                                           if p.is_file()))
    log.info("dataset written to %s (%d regular / %d new users)",
             path, len(dataset.regular), len(dataset.new))
    return path


def load_dataset(config: RunConfig) -> datamod.Dataset:
    path = _out(config) / "dataset"
    if not (path / "split.json").exists():
        raise FileNotFoundError(f"no prepared dataset under {path};"
                                " run prepare first")
    return datamod.read_dataset_dir(path)


def _training_histories(config, dataset):
    """Regular histories, optionally restricted for the fraction sweep.

    The sweep shuffles users deterministically (seeded) and keeps the first
    ``train_fraction`` share.
    """
    histories = dataset.regular
    if config.train_fraction >= 1.0:
        return histories
    users = sorted(histories)
    order = component_rng(config.seed, "train-fraction").permutation(len(users))
    keep = max(1, int(round(len(users) * config.train_fraction)))
    chosen = {users[i] for i in order[:keep]}
    return {u: histories[u] for u in users if u in chosen}


def build_graph(dataset, histories=None):
    histories = dataset.regular if histories is None else histories
    n_users = (max(dataset.regular) + 1) if dataset.regular else 0
    edges = [(u, item) for u, items in histories.items() for item in items]
    return gr.build_interaction_graph(edges, n_users, dataset.n_items)


# -------------------------------------------------------------------- train


def run_train(config: RunConfig, max_steps=None, quiet=False) -> Path:
    """Train per config.train_mode; write checkpoint and loss trace."""
    config.validate()
    _echo_config(config)
    started = time.time()
    dataset = load_dataset(config)
    histories = _training_histories(config, dataset)
    graph = build_graph(dataset, histories)
    params = init_model(graph.n_entities, config.model,
                        component_rng(config.seed, "init"))

    def on_step(step, loss):
        if not quiet and step % 25 == 0:
            log.info("step %d: query loss %.5f", step, loss)

    if config.train_mode == "meta":
        trainer = meta.MetaTrainer(graph, histories, params, config.meta,
                                   config.seed)
        trace = trainer.train(max_steps=max_steps, on_step=on_step)
        adam_state = trainer.adam
    else:
        adam_state = meta.AdamState()
        trace = baselines.joint_train(graph, histories, params, config.meta,
                                      config.seed, max_steps=max_steps,
                                      on_step=on_step, adam=adam_state)

    out = _out(config)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    ckpt_path = out / "checkpoints" / "model.ckpt"
    checkpoint.save_model(ckpt_path, params, adam_state=adam_state)
    sidecar = Path(str(ckpt_path) + ".meta.json")
    meta_doc = json.loads(sidecar.read_text(encoding="utf-8"))
    meta_doc["config_hash"] = config.core_hash()
    meta_doc["train_mode"] = config.train_mode
    sidecar.write_text(json.dumps(meta_doc, indent=1, sort_keys=True) + "\n",
                       encoding="utf-8")
    trace_path = out / "traces" / "train_loss.csv"
    with trace_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config.core_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "query_loss"])
        for step, value in trace:
            writer.writerow([step, repr(value)])
    _write_record(config, stage="train", steps=len(trace),
                  wall_clock=time.time() - started)
    return ckpt_path


# --------------------------------------------------------------------- eval


def _load_checkpoint_for(config, ckpt_path):
    params, _ = checkpoint.load_model(ckpt_path)
    sidecar = Path(str(ckpt_path) + ".meta.json")
    if sidecar.exists():
        meta_doc = json.loads(sidecar.read_text(encoding="utf-8"))
        stored = meta_doc.get("config_hash")
        if stored is not None and stored != config.core_hash():
            raise ValueError(
                f"checkpoint config hash {stored} does not match the active "
                f"config {config.core_hash()}; refusing to evaluate")
    if params.dim != config.model.dim:
        raise ValueError(
            f"checkpoint dimension {params.dim} != config {config.model.dim}")
    params.config = config.model
    return params


def run_evaluate(config: RunConfig, ckpt_path=None, scorer_kind="metacsr",
                 tag=None) -> Path:
    """Evaluate a checkpoint (or a baseline) under the configured scenario.

    Cold: new users, per-user fine-tuning of theta2 before scoring.
    Warm: regular users' held-out last behavior, direct scoring.
    """
    config.validate()
    _echo_config(config)
    dataset = load_dataset(config)
    histories = _training_histories(config, dataset)
    graph = build_graph(dataset, histories)
    cold = config.scenario == "cold"
    test_histories = dataset.new if cold else histories

    if scorer_kind == "metacsr":
        ckpt_path = ckpt_path or _out(config) / "checkpoints" / "model.ckpt"
        params = _load_checkpoint_for(config, ckpt_path)
        features = losses.cached_item_features(
            graph, params, component_rng(config.seed, "eval/features"))
        steps = config.meta.fine_tune_steps if cold else 0
        scorer = ModelScorer(params=params, features=features,
                             cfg=config.meta, fine_tune_steps=steps,
                             seed=config.seed)
        model_name = "metaCSR" if config.train_mode == "meta" else "joint"
    elif scorer_kind == "popularity":
        scorer = baselines.PopularityModel.fit(histories, dataset.n_items)
        model_name = "popularity"
    elif scorer_kind == "bpr":
        n_users = max(dataset.regular) + 1
        scorer = baselines.train_bpr(histories, n_users, dataset.n_items,
                                     component_rng(config.seed, "bpr"))
        model_name = "bpr-mf"
    else:
        raise ValueError(f"unknown scorer {scorer_kind!r}")

    report, per_user = evaluate_model(
        scorer, test_histories, dataset.n_items,
        n_neg=config.data.eval_negatives, seed=config.seed,
        min_history=config.model.t_min + 1,
        config_hash=config.core_hash(), scenario=config.scenario,
        model=model_name)

    out = _out(config) / "reports"
    out.mkdir(exist_ok=True)
    tag = tag or f"{config.scenario}_{model_name}"
    report_path = out / f"metrics_{tag}.json"
    report_path.write_text(report.to_json(), encoding="utf-8")
    (out / f"metrics_{tag}.csv").write_text(report.to_csv(), encoding="utf-8")
    with (out / f"per_user_{tag}.csv").open("w", encoding="utf-8",
                                            newline="") as fh:
        fh.write(f"# config_hash={config.core_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "positive_rank", "auc"])
        for user, rank, user_auc in per_user:
            writer.writerow([user, rank, repr(user_auc)])
    log.info("%s: AUC %.4f MAP %.4f (%d users)", tag, report.auc,
             report.map, report.n_users)
    return report_path


# ------------------------------------------------------------------- ablate


ABLATION_VARIANTS = {
    "full": {},
    "no-diffusion": {"model.use_diffusion": False},
    "no-sequence": {"model.use_sequence": False},
    "no-meta": {"train_mode": "joint"},
}


def run_ablate(config: RunConfig, max_steps=None) -> Path:
    """Train and cold-evaluate the four architecture variants."""
    from .config import resolve_config

    rows = []
    base = config.to_dict()
    for name, overrides in ABLATION_VARIANTS.items():
        variant = resolve_config(base, overrides)
        variant.out_dir = str(Path(config.out_dir) / "ablation" / name)
        run_prepare(variant)
        run_train(variant, max_steps=max_steps, quiet=True)
        report_path = run_evaluate(variant, tag="cold")
        report = json.loads(report_path.read_text(encoding="utf-8"))
        rows.append((name, report["auc"], report["map"]))
        log.info("ablation %s: AUC %.4f", name, report["auc"])
    out = _out(config)
    path = out / "ablation.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config.core_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "auc", "map"])
        for name, auc_v, map_v in rows:
            writer.writerow([name, repr(auc_v), repr(map_v)])
    return path


# ------------------------------------------------------------------- sweeps


def run_sweep_fraction(config: RunConfig, fractions=None, max_steps=None):
    """Cold-start quality as the training-user share grows (10% steps)."""
    from .config import resolve_config

    fractions = fractions or [round(0.1 * k, 1) for k in range(1, 11)]
    rows = []
    for fraction in fractions:
        variant = resolve_config(config.to_dict(),
                                 {"train_fraction": fraction})
        variant.out_dir = str(Path(config.out_dir) / "fraction"
                              / f"{int(fraction * 100):03d}")
        run_prepare(variant)
        run_train(variant, max_steps=max_steps, quiet=True)
        report_path = run_evaluate(variant, tag="cold")
        report = json.loads(report_path.read_text(encoding="utf-8"))
        rows.append((fraction, report["auc"], report["map"]))
    return _sweep_csv(config, "fraction_sweep.csv", "fraction", rows)


def run_sweep_length(config: RunConfig, lengths=(5, 10, 15, 20, 25),
                     max_steps=None):
    """Cold-start quality across maximum window lengths."""
    from .config import resolve_config

    rows = []
    for t_max in lengths:
        variant = resolve_config(config.to_dict(), {"model.t_max": t_max})
        variant.out_dir = str(Path(config.out_dir) / "length" / f"{t_max:02d}")
        run_prepare(variant)
        run_train(variant, max_steps=max_steps, quiet=True)
        report_path = run_evaluate(variant, tag="cold")
        report = json.loads(report_path.read_text(encoding="utf-8"))
        rows.append((t_max, report["auc"], report["map"]))
    return _sweep_csv(config, "length_sweep.csv", "t_max", rows)


def _sweep_csv(config, filename, key, rows):
    path = _out(config) / filename
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config.core_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key, "metric", "value"])
        for value, auc_v, map_v in rows:
            writer.writerow([value, "auc", repr(auc_v)])
            writer.writerow([value, "map", repr(map_v)])
    return path


# ------------------------------------------------------------------- export


def run_export(record_dirs, out_path) -> Path:
    """Merge run artifacts into tidy plot-ready CSV rows.

    All records must share one config core hash; clashing hashes abort.
    """
    rows = []
    seen_hash = None
    for record_dir in record_dirs:
        record_dir = Path(record_dir)
        record = json.loads((record_dir / "record.json")
                            .read_text(encoding="utf-8"))
        config_hash = record["config_hash"]
        if seen_hash is None:
            seen_hash = config_hash
        elif seen_hash != config_hash:
            raise ValueError(
                f"config hash {config_hash} in {record_dir} clashes with "
                f"{seen_hash}; refusing to merge")
        trace = record_dir / "traces" / "train_loss.csv"
        if trace.exists():
            for line in trace.read_text(encoding="utf-8").splitlines()[2:]:
                step, value = line.split(",")
                rows.append((config_hash, "train", "query_loss", step, value))
        reports = record_dir / "reports"
        if reports.exists():
            for report_file in sorted(reports.glob("metrics_*.json")):
                report = json.loads(report_file.read_text(encoding="utf-8"))
                tag = report_file.stem[len("metrics_"):]
                rows.append((config_hash, tag, "auc", "", repr(report["auc"])))
                rows.append((config_hash, tag, "map", "", repr(report["map"])))
                for metric in ("hit", "ndcg"):
                    for n, value in sorted(report[metric].items(),
                                           key=lambda kv: int(kv[0])):
                        rows.append((config_hash, tag, metric, n, repr(value)))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config_hash", "run", "metric", "step_or_n", "value"])
        for row in rows:
            writer.writerow(row)
    return out_path
