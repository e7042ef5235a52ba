"""``powerprof`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from powerprof import cluster as clu
from powerprof import features as feat
from powerprof import gan, ingest, iterative, openset, synth, workflow
from powerprof.artifacts import file_digest, save_artifact
from powerprof.errors import ConfigError, PowerprofError

log = logging.getLogger("powerprof")


def _load_config(path: str | None, section: str | None = None) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    # a full pipeline config can be reused for single stages
    if section is not None and isinstance(d.get(section), dict):
        return dict(d[section])
    return d


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _target(args, name: str) -> Path:
    """``--out`` names a file when it carries the default's suffix, else a directory."""
    out = Path(args.out)
    if out.suffix and out.suffix == Path(name).suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    return _out(args) / name


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _gan_config(args) -> gan.GanConfig:
    d = _load_config(args.config, "gan")
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return gan.GanConfig.from_dict(d)


def _clf_config(args, input_dim: int | None = None) -> openset.ClassifierConfig:
    d = _load_config(args.config, "classifier")
    if args.seed is not None:
        d["seed"] = args.seed
    if input_dim is not None:
        d.setdefault("input_dim", input_dim)
    return openset.ClassifierConfig.from_dict(d)


def _labels(path) -> tuple[dict[str, int], dict[str, int]]:
    """job_id -> class id (and submit epochs) from labels.csv or a catalog artifact."""
    if str(path).endswith(".json"):
        return clu.ClassCatalog.load(path).labels(), {}
    return synth.read_labels(path)


def _aligned_labels(ids, labels: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of ``ids`` that carry a label, and those labels."""
    keep = [i for i, j in enumerate(ids) if j in labels]
    return np.array(keep, dtype=np.int64), np.array([labels[ids[i]] for i in keep], dtype=np.int64)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    specs = synth.load_specs(args.spec) if args.spec else synth.default_specs()
    ds = synth.generate_dataset(
        specs, args.per_class, (args.length_min, args.length_max), seed=args.seed or 0, year_days=args.year_days
    )
    p, l = synth.write_dataset(_out(args), ds)
    print(f"wrote {len(ds.profiles)} profiles ({len(specs)} classes) to {p} and {l}")


def cmd_ingest(args):
    jobs = ingest.load_jobs(args.jobs)
    profiles, summary = ingest.build_profiles(jobs, ingest.parse_telemetry(args.telemetry), args.min_len)
    out = _out(args)
    ingest.write_profiles(out / "profiles.jsonl", profiles)
    (out / "ingest_summary.json").write_text(json.dumps(summary.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"retained {summary.retained} jobs, dropped {dict(summary.dropped)}")


def cmd_features(args):
    ids, X = feat.feature_matrix(ingest.read_profiles(args.profiles))
    path = _target(args, "features.csv")
    feat.write_feature_csv(path, ids, X)
    print(f"wrote {len(ids)} x {feat.N_FEATURES} features to {path}")


def cmd_train_gan(args):
    ids, X = feat.read_feature_csv(args.features)
    scaler = feat.fit_scaler(X)
    model = gan.train(scaler.transform(X), _gan_config(args), scaler)
    path = _target(args, "gan.json")
    model.save(path)
    save_artifact(path.with_name("scaler.json"), "scaler", scaler.to_dict())
    h0, h1 = model.history[0]["recon_mse"], model.history[-1]["recon_mse"]
    print(f"trained GAN on {len(ids)} jobs: reconstruction MSE {h0:.4f} -> {h1:.4f}")


def cmd_embed(args):
    model = gan.GanModel.load(args.model)
    ids, X = feat.read_feature_csv(args.features)
    path = _target(args, "latents.csv")
    workflow.write_latents(path, ids, gan.embed_raw(model, X))
    print(f"wrote {len(ids)} latent vectors to {path}")


def cmd_cluster(args):
    ids, Z = workflow.read_latents(args.latents)
    if args.algorithm == "kmeans":
        result = clu.kmeans(Z, args.k, seed=args.seed or 0, job_ids=ids)
    else:
        dcfg = workflow.DbscanConfig(args.eps, args.min_pts, args.eps_quantile)
        result = clu.dbscan(Z, dcfg.resolve_eps(Z), dcfg.min_pts, ids)
    path = _target(args, "clusters.json")
    result.save(path)
    print(f"{result.algorithm}: {result.n_clusters} clusters, noise {result.noise_fraction:.3f} -> {path}")


def cmd_label(args):
    result = clu.ClusterResult.load(args.clusters)
    profiles = ingest.read_profiles(args.profiles)
    fids, X = feat.read_feature_csv(args.features)
    lat = workflow.read_latents(args.latents) if args.latents else None
    catalog = clu.build_catalog(result, profiles, (fids, X), lat, args.min_class_size)
    path = _target(args, "catalog.json")
    catalog.save(path)
    for c in catalog.classes:
        print(f"class {c.class_id}: {c.size} jobs, {c.intensity_label}, medoid {c.medoid}")
    print(f"residual: {len(catalog.residual)} jobs -> {path}")


def cmd_train_classifier(args):
    ids, Z = workflow.read_latents(args.latents)
    idx, y = _aligned_labels(ids, _labels(args.catalog)[0])
    model = openset.train_closed(Z[idx], y, _clf_config(args, Z.shape[1]))
    if str(args.catalog).endswith(".json"):
        model.catalog_ref = file_digest(args.catalog)
    path = _target(args, "classifier.json")
    model.save(path)
    print(f"trained {model.n_classes}-class model on {len(idx)} jobs, tau = p95 = {model.threshold:.4f} -> {path}")


def cmd_classify(args):
    model = openset.ClassifierModel.load(args.model)
    ids, Z = workflow.read_latents(args.latents)
    tau = None if args.threshold in (None, "auto") else _float(args.threshold)
    preds = openset.predict(model, Z, tau, ids)
    path = _target(args, "predictions.jsonl")
    openset.write_predictions(path, preds)
    n_unk = sum(p.outcome == openset.UNKNOWN for p in preds)
    print(f"{len(preds)} predictions, {n_unk} UNKNOWN -> {path}")


def cmd_sweep(args):
    model = openset.ClassifierModel.load(args.model)
    labels, _ = _labels(args.labels)
    if args.known:
        kids, KZ = workflow.read_latents(args.known)
        kidx, ky = _aligned_labels(kids, labels)
        Zk, yk = KZ[kidx], ky
        if not args.unknown:
            raise ConfigError("--known needs --unknown")
        Zu = workflow.read_latents(args.unknown)[1]
    else:
        if not args.latents:
            raise ConfigError("sweep needs --latents or --known/--unknown")
        ids, Z = workflow.read_latents(args.latents)
        idx, y = _aligned_labels(ids, labels)
        known = np.isin(y, model.class_ids)
        Zk, yk, Zu = Z[idx[known]], y[known], Z[idx[~known]]
    res = openset.sweep_threshold(model, Zk, yk, Zu, args.grid)
    path = _target(args, "sweep.csv")
    res.write_csv(path)
    print(f"tau* = {res.tau_star:.4f} (accuracy {res.best_accuracy:.4f}), tau_max = {res.tau_max:.4f}")
    if args.apply:
        model.threshold = res.tau_star
        model.save(path.with_name("classifier.json"))
        print(f"updated threshold written to {path.with_name('classifier.json')}")


def cmd_evaluate(args):
    model = openset.ClassifierModel.load(args.model)
    ids, Z = workflow.read_latents(args.latents)
    labels, _ = _labels(args.labels)
    idx, y = _aligned_labels(ids, labels)
    tau = model.threshold if args.tau is None else args.tau
    report = openset.evaluate(model, tau, Z[idx], y)
    path = _target(args, "evaluation.json")
    path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(f"closed {report['closed_acc']:.4f}  open {report['open_acc']:.4f}  "
          f"(known {report['n_known']}, unknown {report['n_unknown']}) -> {path}")


def cmd_temporal_eval(args):
    ids, Z = workflow.read_latents(args.latents)
    labels, stamps = _labels(args.labels)
    idx, y = _aligned_labels(ids, labels)
    t = np.array([stamps[ids[i]] for i in idx])
    res = workflow.temporal_eval(
        Z[idx], y, t, _ints(args.months), _ints(args.horizons), _clf_config(args, Z.shape[1])
    )
    out = _out(args)
    (out / "temporal.json").write_text(json.dumps(res.to_dict(), indent=1) + "\n", encoding="utf-8")
    res.write_csv(out / "temporal.csv")
    for r in res.rows:
        print(f"m={r['train_months']:>2} h={r['horizon_days']:>3}d  closed {r['closed_acc']:.3f}  "
              f"open {r['open_acc']:.3f}  known {r['known_classes']:.2f}")


def cmd_pool(args):
    preds = openset.read_predictions(args.predictions)
    lids, Z = workflow.read_latents(args.latents)
    fids, X = feat.read_feature_csv(args.features)
    stamps = _labels(args.labels)[1] if args.labels else None
    profiles = {p.job_id: p for p in ingest.read_profiles(args.profiles)} if args.profiles else None
    n = iterative.pool_unknowns(
        iterative.UnknownPool(Path(args.review_dir) / iterative.POOL_FILE),
        preds, dict(zip(lids, Z)), dict(zip(fids, X)), stamps, profiles,
    )
    print(f"added {n} UNKNOWN jobs to the pool in {args.review_dir}")


def cmd_recluster(args):
    rd = Path(args.review_dir)
    entries = iterative.UnknownPool(rd / iterative.POOL_FILE).entries()
    eps = args.eps
    if eps is None:
        Z = np.array([e.latent for e in entries])
        eps = clu.knn_eps(Z, args.min_pts, args.eps_quantile) if len(Z) >= args.min_pts else 1.0
    props = iterative.recluster_unknowns(rd, eps, args.min_pts, args.min_class_size)
    for p in props:
        print(f"{p.proposal_id}: {p.size} jobs, medoid {p.medoid} ({rd / p.medoid_csv})")
    print(f"{len(props)} new proposal(s) from {len(entries)} pooled jobs (eps {eps:.4f})")


def cmd_review(args):
    rd = Path(args.review_dir)
    if args.action == "list":
        for p in iterative.ProposalStore.load(rd).proposals:
            extra = f" class {p.class_id}" if p.class_id is not None else ""
            print(f"{p.proposal_id}  {p.status:<8}  {p.size:>5} jobs  medoid {p.medoid}{extra}")
        return
    if not args.id or not args.catalog:
        raise ConfigError("approve/reject need --id and --catalog")
    p = iterative.review(rd, args.catalog, args.id, args.action, args.operator)
    extra = f" as class {p.class_id}" if p.class_id is not None else ""
    print(f"{p.proposal_id} {p.status}{extra} by {p.operator}")


def cmd_retrain(args):
    ids, Z = workflow.read_latents(args.latents)
    cfg = _clf_config(args, Z.shape[1]) if args.config else None
    model = iterative.retrain(args.catalog, dict(zip(ids, Z)), args.model, args.review_dir, cfg, args.force,
                              seed=args.seed or 0)
    if model is None:
        print("nothing approved since the last model; no retraining done (pass --force to retrain anyway)")
        return
    print(f"model v{model.version}: {model.n_classes} classes, tau {model.threshold:.4f} -> {args.model}")


def cmd_run(args):
    d = _load_config(args.config)
    if args.profiles:
        d["profiles"] = args.profiles
    if args.telemetry:
        d["telemetry"] = args.telemetry
    if args.jobs:
        d["jobs"] = args.jobs
    d["out"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = workflow.PipelineConfig.from_dict(d)
    manifest = workflow.run_pipeline(cfg)
    for name, rec in manifest.artifacts.items():
        print(f"{name:<11} {rec['path']:<16} {rec['sha256'][:16]}")
    print(json.dumps(manifest.summary, indent=1, default=float))


# ---------------------------------------------------------------- parser

def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    default = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=default(None), help="JSON config file")
    p.add_argument("--seed", type=int, default=default(None), help="random seed")
    p.add_argument("--out", default=default("out"), help="output directory")
    p.add_argument("--log-level", default=default("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="powerprof", description="Job power-profile classification pipeline.")
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, top=False)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a labeled synthetic dataset")
    p.add_argument("--spec", help="JSON list of pattern specs (default: the built-in 8 classes)")
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--length-min", type=int, default=40)
    p.add_argument("--length-max", type=int, default=160)
    p.add_argument("--year-days", type=int, default=360)

    p = add("ingest", cmd_ingest, "build 10 s job profiles from telemetry and a job log")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--jobs", required=True)
    p.add_argument("--min-len", type=int, default=ingest.MIN_PROFILE_LEN)

    p = add("features", cmd_features, "extract the 186-feature matrix")
    p.add_argument("--profiles", required=True)

    p = add("train-gan", cmd_train_gan, "fit the scaler and train the GAN")
    p.add_argument("--features", required=True)
    p.add_argument("--epochs", type=int)

    p = add("embed", cmd_embed, "encode features into latent vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)

    p = add("cluster", cmd_cluster, "cluster latent vectors")
    p.add_argument("--latents", required=True)
    p.add_argument("--algorithm", "--algo", choices=["dbscan", "kmeans"], default="dbscan")
    p.add_argument("--eps", type=float)
    p.add_argument("--min-pts", type=int, default=10)
    p.add_argument("--eps-quantile", type=float, default=0.9)
    p.add_argument("--k", type=int, default=8)

    p = add("label", cmd_label, "turn clusters into a class catalog")
    p.add_argument("--clusters", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--latents")
    p.add_argument("--min-class-size", type=int, default=50)

    p = add("train-classifier", cmd_train_classifier, "train the open-set classifier on catalog classes")
    p.add_argument("--catalog", "--labels", dest="catalog", required=True, help="catalog.json or labels.csv")
    p.add_argument("--latents", required=True)

    p = add("classify", cmd_classify, "predict classes or UNKNOWN")
    p.add_argument("--model", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--threshold", "--tau", dest="threshold", help="tau, or 'auto' for the model's stored tau")

    p = add("sweep", cmd_sweep, "sweep the rejection threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--latents", help="labeled latents; classes unknown to the model count as unknown")
    p.add_argument("--known", help="known-class validation latents")
    p.add_argument("--unknown", help="unknown validation latents")
    p.add_argument("--labels", required=True, help="labels.csv or catalog.json")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--apply", action="store_true", help="write the model back with tau = tau*")

    p = add("evaluate", cmd_evaluate, "closed/open accuracy and confusion on labeled jobs")
    p.add_argument("--model", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--tau", type=float)

    p = add("temporal-eval", cmd_temporal_eval, "train on early months, test on later horizons")
    p.add_argument("--latents", required=True)
    p.add_argument("--labels", required=True, help="labels.csv with submit_epoch")
    p.add_argument("--months", default="1,3,6,9,11")
    p.add_argument("--horizons", default="7,30,90", help="horizon lengths in days")

    p = add("pool", cmd_pool, "append UNKNOWN predictions to the unknown pool")
    p.add_argument("--predictions", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--profiles")
    p.add_argument("--labels", help="labels.csv supplying submit timestamps")
    p.add_argument("--review-dir", required=True)

    p = add("recluster", cmd_recluster, "cluster the unknown pool into class proposals")
    p.add_argument("--review-dir", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--min-pts", type=int, default=10)
    p.add_argument("--eps-quantile", type=float, default=0.9)
    p.add_argument("--min-class-size", type=int, default=50)

    p = add("review", cmd_review, "list, approve or reject class proposals")
    p.add_argument("action", choices=["list", "approve", "reject"])
    p.add_argument("--review-dir", required=True)
    p.add_argument("--catalog")
    p.add_argument("--id")
    p.add_argument("--operator", default="operator")

    p = add("retrain", cmd_retrain, "retrain the classifier with approved classes")
    p.add_argument("--catalog", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--review-dir", required=True)
    p.add_argument("--force", action="store_true")

    p = add("run", cmd_run, "run the full pipeline")
    p.add_argument("--profiles")
    p.add_argument("--telemetry")
    p.add_argument("--jobs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PowerprofError as exc:
        print(f"powerprof {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
