"""``ata`` command-line entry point.

One binary with subcommands chaining the full workflow:
pack/split/subsample -> fit -> train -> route -> eval/sweeps/simulate.

Exit codes: 0 success, 1 usage error, 2 data error. ``ata route`` instead
exits 0/10/20 for Act/Think/Abstain so a control stack can branch on it.
Every subcommand writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .ataf import read_tensor, write_tensor
from .dataset import (
    FeatureMatrix,
    Manifest,
    SubsampleSpec,
    partition,
    read_features,
    subsample,
    write_features,
)
from .errors import DataError
from .gmm import fit_gmm, save_gmm
from .nnindex import build_index, save_index
from .preprocess import fit_pca, fit_standardizer, load_preprocess, save_preprocess
from .router import (
    Hyper,
    MixupSpec,
    decide,
    load_router,
    save_router,
    train_baseline,
    train_router,
)
from .scorebundle import (
    fit_bundle,
    load_bundle,
    make_config,
    score_batch,
    score_sample,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
ROUTE_EXIT = {0: 0, 1: 10, 2: 20}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def derive_seed(master: int, subcommand: str, index: int = 0) -> int:
    """Fan a master seed out into per-stage sub-seeds via hashing."""
    digest = hashlib.sha256(f"{subcommand}:{index}:{master}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _write_run_config(out: Path, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "run_config.json").write_text(json.dumps(resolved, indent=2, default=str))


def _load_feature_set(args) -> dict[str, FeatureMatrix]:
    features = {}
    if getattr(args, "vision", None):
        features["vision"] = read_features(args.vision)
    if getattr(args, "text", None):
        features["text"] = read_features(args.text)
    if getattr(args, "fused", None):
        features["fused"] = read_features(args.fused)
    if not features:
        raise DataError("no feature files supplied")
    return features


def _emit(obj, args) -> None:
    if getattr(args, "json", False):
        print(json.dumps(obj, indent=2, default=str))
    else:
        print(json.dumps(obj, default=str))


# --- subcommand implementations ------------------------------------------------


def cmd_pack(args) -> int:
    path = Path(args.input)
    if path.suffix == ".npy":
        data = np.load(path)
    elif path.suffix == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        raise DataError(f"unsupported input format {path.suffix!r} (use .npy or .csv)")
    if args.ids:
        ids = Path(args.ids).read_text().split()
    else:
        ids = [str(i) for i in range(data.shape[0])]
    matrix = FeatureMatrix(data=data.astype(np.float32), modality=args.modality, ids=ids)
    write_features(matrix, args.out)
    _write_run_config(Path(args.out).parent, args)
    _emit({"written": args.out, "shape": list(matrix.data.shape)}, args)
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = Manifest.read(args.manifest)
    result = partition(manifest, seed=args.seed)
    result.write(args.out)
    _write_run_config(Path(args.out).parent, args)
    counts = {s: len(result.ids(split=s)) for s in ("detector", "mlp", "validation")}
    _emit({"written": args.out, "split_sizes": counts}, args)
    return EXIT_OK


def cmd_subsample(args) -> int:
    manifest = Manifest.read(args.manifest)
    result = subsample(manifest, SubsampleSpec(fraction=args.fraction, seed=args.seed))
    result.write(args.out)
    _write_run_config(Path(args.out).parent, args)
    _emit({"written": args.out, "records": len(result)}, args)
    return EXIT_OK


def cmd_fit_pre(args) -> int:
    matrix = read_features(args.features)
    standardizer = fit_standardizer(matrix.data)
    pca = fit_pca(
        standardizer.transform(matrix.data),
        var_target=args.var_target,
        max_dims=args.max_dims,
        seed=args.seed,
    )
    save_preprocess(standardizer, pca, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "n_components": pca.n_components}, args)
    return EXIT_OK


def cmd_fit_gmm(args) -> int:
    matrix = read_features(args.features)
    data = matrix.data.astype(np.float64)
    if args.pre:
        standardizer, pca = load_preprocess(args.pre)
        data = pca.project(standardizer.transform(data))
    model = fit_gmm(data, args.k, rho=args.rho, n_starts=args.starts, seed=args.seed)
    save_gmm(model, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "final_avg_loglik": model.fit_meta["final_avg_loglik"]}, args)
    return EXIT_OK


def cmd_fit_knn(args) -> int:
    matrix = read_features(args.features)
    data = matrix.data.astype(np.float64)
    if args.pre:
        standardizer, pca = load_preprocess(args.pre)
        data = pca.project(standardizer.transform(data))
    index = build_index(data)
    save_index(index, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "points": index.n_points}, args)
    return EXIT_OK


def cmd_fit(args) -> int:
    features = _load_feature_set(args)
    manifest = Manifest.read(args.manifest)
    config = make_config(
        args.config, k=args.k, rho=args.rho, n_starts=args.starts, seed=args.seed
    )
    bundle = fit_bundle(features, manifest, config)
    from .scorebundle import save_bundle

    save_bundle(bundle, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "config": config.to_json()}, args)
    return EXIT_OK


def cmd_score(args) -> int:
    bundle = load_bundle(args.bundle)
    features = _load_feature_set(args)
    if args.manifest:
        ids = Manifest.read(args.manifest).ids(split=args.split)
    else:
        ids = next(iter(features.values())).ids
    scores = score_batch(bundle, features, ids)
    out = Path(args.out)
    write_tensor(out, scores.astype(np.float32))
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps({"ids": ids, "score_layout": bundle.config.score_layout})
    )
    _write_run_config(out.parent, args)
    _emit({"written": args.out, "samples": len(ids)}, args)
    return EXIT_OK


def cmd_train_router(args) -> int:
    bundle = load_bundle(args.bundle)
    features = _load_feature_set(args)
    manifest = Manifest.read(args.manifest)
    hyper = Hyper(lr=args.lr, batch=args.batch, patience=args.patience, max_epochs=args.max_epochs)
    mixup = MixupSpec(seed=derive_seed(args.seed, "mixup"), count=args.mixup_count)
    model = train_router(bundle, features, manifest, hyper=hyper, mixup=mixup, seed=args.seed)
    save_router(model, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "best_val_loss": model.train_meta["best_val_loss"]}, args)
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    features = _load_feature_set(args)
    manifest = Manifest.read(args.manifest)
    hyper = Hyper(lr=args.lr, batch=args.batch, patience=args.patience, max_epochs=args.max_epochs)
    mixup = MixupSpec(seed=derive_seed(args.seed, "mixup"), count=args.mixup_count)
    model = train_baseline(features, manifest, hyper=hyper, mixup=mixup, seed=args.seed)
    save_router(model, args.out)
    _write_run_config(Path(args.out), args)
    _emit({"written": args.out, "best_val_loss": model.train_meta["best_val_loss"]}, args)
    return EXIT_OK


def cmd_route(args) -> int:
    bundle = load_bundle(args.bundle)
    model = load_router(args.router)
    sample_dir = Path(args.sample)
    sample = {}
    for modality in ("vision", "text", "fused"):
        path = sample_dir / f"{modality}.ataf"
        if path.exists():
            arr = read_tensor(path).astype(np.float64)
            sample[modality] = arr[0] if arr.ndim == 2 else arr
    if not sample:
        raise DataError(f"no modality files found under {sample_dir}")
    vector = score_sample(bundle, sample)
    probs = model.forward(vector.values)
    decision = decide(probs)
    print(json.dumps({
        "strategy": decision.name,
        "probabilities": [float(p) for p in probs],
        "scores": {sid: float(v) for sid, v in zip(bundle.config.score_layout, vector.values)},
    }))
    if decision.name == "Think" and args.on_think:
        # once-per-episode extension hook; reasoning content is out of scope
        subprocess.run(args.on_think, shell=True, check=False)
    return ROUTE_EXIT[decision.strategy]


def cmd_eval(args) -> int:
    scores = read_tensor(args.scores).astype(np.float64)
    meta = json.loads(Path(args.scores + ".json").read_text())
    model = load_router(args.router)
    manifest = Manifest.read(args.manifest)
    table = manifest.sample_table()
    from .router import LABEL_TO_CLASS

    truth, pred = [], []
    for sid, row in zip(meta["ids"], scores):
        truth.append(LABEL_TO_CLASS[table[sid].label])
        pred.append(decide(model.forward(row)).strategy)
    report = evaluation.classification_report(truth, pred)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\pred", "Act", "Think", "Abstain"])
        for name, row in zip(("Act", "Think", "Abstain"), report.confusion):
            writer.writerow([name, *row.tolist()])
    _write_run_config(out, args)
    _emit(report.to_json(), args)
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    features = _load_feature_set(args)
    manifest = Manifest.read(args.manifest)
    k_values = [int(v) for v in args.k_values.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    result = evaluation.sweep_k(features, manifest, k_values, seeds, config_name=args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_k.json").write_text(json.dumps(result.to_json(), indent=2))
    with open(out / "sweep_k.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "macro_f1_mean", "macro_f1_std"])
        for k, m, s in zip(result.axis, result.mean, result.std):
            writer.writerow([k, m, s])
    _write_run_config(out, args)
    _emit(result.to_json(), args)
    return EXIT_OK


def cmd_sweep_data(args) -> int:
    features = _load_feature_set(args)
    manifest = Manifest.read(args.manifest)
    fractions = [float(v) for v in args.fractions.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    configs = args.configs.split(",")
    results = evaluation.sweep_data(
        features, manifest, fractions=fractions, seeds=seeds, config_names=configs
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {name: r.to_json() for name, r in results.items()}
    (out / "sweep_data.json").write_text(json.dumps(payload, indent=2))
    with open(out / "sweep_data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "fraction", "macro_f1_mean", "macro_f1_std"])
        for name, result in results.items():
            for f, m, s in zip(result.axis, result.mean, result.std):
                writer.writerow([name, f, m, s])
    _write_run_config(out, args)
    _emit(payload, args)
    return EXIT_OK


def cmd_simulate(args) -> int:
    log = evaluation.read_episode_log(args.log)
    accounts = evaluation.rollout_account(log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {f"{suite}/{variant}": stats.to_json() for (suite, variant), stats in accounts.items()}
    (out / "rollout.json").write_text(json.dumps(payload, indent=2))
    with open(out / "rollout.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "variant", "SR", "PF", "A", "T", "Ab", "mean_time_s"])
        for (suite, variant), stats in accounts.items():
            writer.writerow([
                suite, variant, f"{stats.success_rate:.4f}", stats.prevented_failures,
                stats.act, stats.think, stats.abstain, f"{stats.mean_wall_time_s:.3f}",
            ])
    _write_run_config(out, args)
    _emit(payload, args)
    return EXIT_OK


def cmd_synth_bench(args) -> int:
    features, manifest, truth = evaluation.make_benchmark(
        seed=args.seed, n_id=args.n_id, n_think=args.n_think, n_ood=args.n_ood,
        dim=args.dim, text_dim=args.text_dim,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_features(features["vision"], out / "vision.ataf")
    write_features(features["text"], out / "text.ataf")
    manifest.write(out / "manifest.jsonl")
    np.savez(
        out / "truth.npz",
        rotation=truth.rotation,
        id_means=truth.id_means,
        id_vars=truth.id_vars,
        ood_means=truth.ood_means,
        lambda_range=np.array(truth.lambda_range),
        priors=truth.priors,
    )
    _write_run_config(out, args)
    _emit({"written": str(out), "samples": len(features["vision"].ids)}, args)
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed for this run")
    p.add_argument("--json", action="store_true", help="pretty machine-readable output")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--mixup-count", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ata", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="convert .npy/.csv features into an ATAF file")
    p.add_argument("--input", required=True)
    p.add_argument("--modality", required=True, choices=["vision", "text", "fused"])
    p.add_argument("--ids", default=None, help="optional whitespace-separated id file")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("split", help="assign detector/mlp/validation splits (50/25/25)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("subsample", help="keep a fraction of the detector+mlp splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("fit-pre", help="fit standardizer + PCA on a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--var-target", type=float, default=0.95)
    p.add_argument("--max-dims", type=int, default=64)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit_pre)

    p = sub.add_parser("fit-gmm", help="fit a Gaussian mixture on (reduced) features")
    p.add_argument("--features", required=True)
    p.add_argument("--pre", default=None, help="preprocessing dir to reduce through first")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("fit-knn", help="build the exact 1-NN index")
    p.add_argument("--features", required=True)
    p.add_argument("--pre", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit_knn)

    p = sub.add_parser("fit", help="fit a full detector bundle for a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--vision", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--fused", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score samples through a fitted bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--vision", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--fused", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-router", help="train the routing MLP on score vectors")
    p.add_argument("--bundle", required=True)
    p.add_argument("--vision", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--fused", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("train-baseline", help="train the raw-embedding baseline MLP")
    p.add_argument("--vision", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("route", help="decide Act/Think/Abstain for one sample")
    p.add_argument("--bundle", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--sample", required=True, help="dir with vision.ataf [text.ataf ...]")
    p.add_argument("--on-think", default=None, help="shell command run once on a Think decision")
    _add_common(p)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("eval", help="classification report from exported score files")
    p.add_argument("--scores", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="macro F1 vs GMM component count")
    p.add_argument("--vision", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k-values", default="1,2,3,4,5")
    p.add_argument("--seeds", default="0")
    p.add_argument("--config", default="gmm_vision")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sweep-data", help="macro F1 vs training-data fraction")
    p.add_argument("--vision", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", default="0.001,0.01,0.05,0.10,0.25")
    p.add_argument("--seeds", default="0")
    p.add_argument("--configs", default="gmm_vision")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_data)

    p = sub.add_parser("simulate", help="rollout accounting over an episode log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth-bench", help="generate the seeded synthetic benchmark")
    p.add_argument("--n-id", type=int, default=6000)
    p.add_argument("--n-think", type=int, default=3000)
    p.add_argument("--n-ood", type=int, default=6000)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--text-dim", type=int, default=960)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
