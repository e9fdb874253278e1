"""``trapnet`` command line: gen-data, train, attack, evaluate, full-run.

Stages talk only through files in the output directory:

    data.json / data.bin        dataset cache
    model.json                  checkpoint
    trapdoor.json               defender-private trapdoor
    signature.json              defender-private phi and tau
    train_metrics.json
    attack-<name>.jsonl         one record per attacked input
    report.json, report.<name>.roc.csv
    timings.json                wall-clock only; kept out of report.json
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks, data, defense, evaluation, nn_core
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    FormatError,
    HashMismatchError,
    IsolationError,
    TrainingError,
)

ATTACKS = ("pgd", "joint", "alternating", "alternating-ortho", "no-signature", "ortho-pair")
SIGNATURE_FREE = ("pgd", "no-signature", "ortho-pair")
# rows per worker chunk; fixed so results do not depend on the thread count
CHUNK = 64

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_ISOLATION, EXIT_HASH = 0, 2, 3, 4, 5, 6


def _threads() -> int:
    value = os.environ.get("TRAPNET_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"TRAPNET_THREADS must be an integer, got {value!r}") from None
    return os.cpu_count() or 1


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing artifact {path}; run the earlier stage first") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- shared loading ---------------------------------------------------------


def build_dataset(cfg: RunConfig) -> data.Dataset:
    d = cfg.data
    if d.idx_images or d.idx_labels:
        if not (d.idx_images and d.idx_labels):
            raise ConfigError("[data] idx_images and idx_labels must be given together")
        base = Path(cfg.source).parent if cfg.source else Path(".")
        return data.load_idx(base / d.idx_images, base / d.idx_labels, num_classes=d.num_classes)
    return data.gen_synthetic(cfg.gen_config())


def splits(cfg: RunConfig, ds: data.Dataset):
    """(train, calibration, test) from two seeded splits."""
    train, held = data.split(ds, cfg.data.train_frac, cfg.seed("split"))
    calib, test = data.split(held, cfg.data.calibration_frac, cfg.seed("split-holdout"))
    return train, calib, test


def load_splits(cfg: RunConfig):
    ds = data.load_dataset(cfg.out_dir() / "data")
    return splits(cfg, ds)


def load_model(out: Path) -> tuple[nn_core.ModelParams, str]:
    try:
        text = (out / "model.json").read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing checkpoint {out / 'model.json'}; run train first") from None
    params = nn_core.ModelParams.from_json(text)
    return params, params.digest()


def signature_path(cfg: RunConfig) -> Path:
    if cfg.paths.signature:
        p = Path(cfg.paths.signature)
        return p if p.is_absolute() or not cfg.source else Path(cfg.source).parent / p
    return cfg.out_dir() / "signature.json"


def attack_inputs(cfg: RunConfig, test: data.Dataset) -> data.Dataset:
    n = cfg.attack.max_inputs or len(test)
    return test.subset(np.arange(min(n, len(test))))


# -- stages -----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> Path:
    ds = build_dataset(cfg)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    manifest, _ = data.save_dataset(ds, out / "data")
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {manifest}")
    return manifest


def cmd_train(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    train, calib, test = load_splits(cfg)
    side = cfg.data.image_side
    if side * side != train.input_dim:
        raise ConfigError(f"image_side {side} does not match input_dim {train.input_dim}")
    trapdoor = data.make_trapdoor(
        side, cfg.target_class, cfg.seed("trapdoor"), cfg.trapdoor.patch_side, cfg.trapdoor.amplitude
    )
    arch = nn_core.Architecture(train.input_dim, cfg.model.hidden_dims, cfg.model_classes)
    params, metrics = defense.train_trapdoored(train, trapdoor, cfg.train_config(), arch, test=test)
    model_text = params.to_json()
    model_hash = params.digest()

    phi = defense.compute_signature(params, train, trapdoor)
    calib_scores = defense.detection_score(params, phi, calib.images)
    tau = defense.calibrate_threshold(calib_scores, cfg.detector.fpr_target)
    sig = defense.Signature(
        phi, tau, cfg.detector.fpr_target, len(calib), model_hash, phi_source="train"
    )
    _write(out / "model.json", model_text + "\n")
    _write(out / "trapdoor.json", json.dumps(trapdoor.to_dict(), sort_keys=True) + "\n")
    _write(signature_path(cfg), sig.to_json())
    metrics = {**metrics, "tau": tau, "model_hash": model_hash}
    _write(out / "train_metrics.json", evaluation.report_json(metrics))
    print(
        f"clean accuracy {metrics['clean_accuracy']:.4f}  "
        f"trigger success {metrics['trigger_success']:.4f}  tau {tau:.6f}"
    )
    return metrics


def _chunked(fn, x, y):
    """Run a batch attack over fixed-size row chunks, in parallel, results in input order."""
    chunks = [(x[i:i + CHUNK], y[i:i + CHUNK]) for i in range(0, len(x), CHUNK)]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(lambda c: fn(*c), chunks))
    return parts


def _concat(parts: list) -> attacks.AttackBatch:
    kw = {}
    for f in attacks.fields(attacks.AttackBatch):
        if f.name != "extra":
            kw[f.name] = np.concatenate([getattr(p, f.name) for p in parts])
    return attacks.AttackBatch(**kw)


def run_attack(name: str, params, x, y, cfg: RunConfig, phi=None, attacker_data=None):
    """Returns (AttackBatch, extra per-row columns, attack config)."""
    if name == "pgd":
        acfg = cfg.attack_config()
        return _concat(_chunked(lambda a, b: attacks.pgd_xent(params, a, b, acfg), x, y)), {}, acfg
    if name == "joint":
        acfg = cfg.attack_config()
        fn = lambda a, b: attacks.joint_attack(params, phi, a, b, acfg)  # noqa: E731
        return _concat(_chunked(fn, x, y)), {}, acfg
    if name in ("alternating", "alternating-ortho"):
        acfg = cfg.attack_config(ortho_mode="off" if name == "alternating" else cfg.attack.ortho_mode)
        fn = lambda a, b: attacks.alternating_attack(params, phi, a, b, acfg)  # noqa: E731
        return _concat(_chunked(fn, x, y)), {}, acfg
    # signature-free: estimate phi from the attacker's own PGD examples
    acfg = cfg.attack_config()
    phi_est = attacks.estimate_signature(params, attacker_data, cfg=cfg.attack_config())
    if name == "no-signature":
        fn = lambda a, b: attacks.alternating_attack(params, phi_est, a, b, acfg)  # noqa: E731
        return _concat(_chunked(fn, x, y)), {}, acfg
    parts = _chunked(lambda a, b: attacks.orthogonal_pair_attack(params, phi_est, a, b, acfg), x, y)
    batch = _concat([p.chosen for p in parts])
    extra = {
        "pair_cosine": np.concatenate([p.pair_cosine for p in parts]),
        "coin": np.concatenate([p.coin for p in parts]),
    }
    return batch, extra, acfg


def cmd_attack(cfg: RunConfig, name: str) -> Path:
    if name not in ATTACKS:
        raise ConfigError(f"unknown attack {name!r}; valid names: {', '.join(ATTACKS)}")
    out = cfg.out_dir()
    if name in SIGNATURE_FREE and cfg.paths.signature:
        raise IsolationError(
            f"attack {name!r} must not reference the signature file "
            f"(config sets paths.signature = {cfg.paths.signature!r})"
        )
    params, model_hash = load_model(out)
    train, _, test = load_splits(cfg)
    inputs = attack_inputs(cfg, test)
    phi = None
    if name not in SIGNATURE_FREE:
        sig = defense.Signature.from_json(signature_path(cfg).read_text())
        if sig.model_hash != model_hash:
            raise HashMismatchError("signature was derived from a different checkpoint")
        phi = sig.phi
    batch, extra, acfg = run_attack(name, params, inputs.images, inputs.labels, cfg, phi, train)
    lines = []
    for i in range(len(batch)):
        r = batch[i]
        rec = {
            "index": i,
            "attack": name,
            "epsilon": acfg.epsilon,
            "eta": acfg.eta,
            "lambda_weight": acfg.lambda_weight if name == "joint" else None,
            "step_rule": acfg.step_rule,
            "ortho_mode": acfg.ortho_mode if name not in ("pgd", "joint") else None,
            "select": acfg.select,
            "delta_linf": r.delta_linf,
            "misclassified": r.misclassified,
            "label": r.target_or_true_label,
            # score against the signature the attacker optimised for (null for pgd)
            "detection_score": None if np.isnan(r.detection_score) else r.detection_score,
            "iterations": r.iterations_used,
            "seed": acfg.seed,
            "model_hash": model_hash,
            "x_adv": r.x_adv.tolist(),
        }
        for key, col in extra.items():
            rec[key] = col[i].item()
        lines.append(json.dumps(evaluation._round_floats(rec), sort_keys=True))
    path = out / f"attack-{name}.jsonl"
    _write(path, "\n".join(lines) + "\n")
    rate = float(np.mean(batch.misclassified))
    print(f"{name}: {len(batch)} inputs, success rate {rate:.4f} -> {path}")
    return path


def read_results(path: Path) -> list[dict]:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing attack results {path}; run attack first") from None
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def evaluate_results(records, params, phi, benign_scores, include_failed, fprs):
    x_adv = np.asarray([r["x_adv"] for r in records], dtype=np.float64)
    misclassified = np.asarray([r["misclassified"] for r in records], dtype=bool)
    scores = np.atleast_1d(defense.detection_score(params, phi, x_adv))
    adv = scores if include_failed else scores[misclassified]
    entry = {
        "num_inputs": len(records),
        "success_rate": evaluation.attack_success_rate(records),
        "scored": int(adv.size),
        "include_failed": include_failed,
        "max_delta_linf": float(max(r["delta_linf"] for r in records)),
    }
    if "pair_cosine" in records[0]:
        pc = np.asarray([r["pair_cosine"] for r in records])
        entry["pair_cosine_median"] = float(np.median(pc))
        entry["pair_cosine_le_0.1"] = float(np.mean(pc <= 0.1))
    if adv.size:
        entry["roc"] = evaluation.RocReport.build(adv, benign_scores, fprs)
    return entry


def cmd_evaluate(cfg: RunConfig, names=None) -> evaluation.ExperimentReport:
    out = cfg.out_dir()
    params, model_hash = load_model(out)
    sig = defense.Signature.from_json(signature_path(cfg).read_text())
    if sig.model_hash != model_hash:
        raise HashMismatchError(
            f"signature model hash {sig.model_hash[:12]} != checkpoint {model_hash[:12]}"
        )
    _, _, test = load_splits(cfg)
    benign = attack_inputs(cfg, test)
    benign_scores = defense.detection_score(params, sig.phi, benign.images)
    if names is None:
        names = [n for n in ATTACKS if (out / f"attack-{n}.jsonl").exists()]
    train_metrics = _read_json(out / "train_metrics.json")
    report = evaluation.ExperimentReport(
        config=cfg.to_dict(),
        model_metrics={**train_metrics, "tau": sig.tau, "fpr_target": sig.fpr_target},
    )
    fprs = tuple(sorted(set(cfg.detector.report_fprs) | {cfg.detector.fpr_target}))
    for name in names:
        records = read_results(out / f"attack-{name}.jsonl")
        bad = {r["model_hash"] for r in records} - {model_hash}
        if bad:
            raise HashMismatchError(f"{name} results were produced by a different checkpoint")
        report.attacks[name] = evaluate_results(
            records, params, sig.phi, benign_scores, cfg.eval.include_failed, fprs
        )
    report.attacks["_benign"] = {"num_inputs": len(benign), "score_median": float(np.median(benign_scores))}
    evaluation.emit_report(report, out / "report.json")
    print(summary_table(report, cfg.detector.fpr_target))
    return report


def summary_table(report: evaluation.ExperimentReport, fpr: float) -> str:
    rows = [f"{'attack':<18} {'success':>8} {'AUC':>8} {f'TPR@{fpr:.0%}FPR':>12}"]
    for name in ATTACKS:
        entry = report.attacks.get(name)
        if entry is None:
            continue
        roc = entry.get("roc")
        auc = f"{roc.auc:.4f}" if roc else "n/a"
        tpr = f"{roc.tpr_at[fpr]:.4f}" if roc else "n/a"
        rows.append(f"{name:<18} {entry['success_rate']:>8.4f} {auc:>8} {tpr:>12}")
    return "\n".join(rows)


def cmd_full_run(cfg: RunConfig) -> evaluation.ExperimentReport:
    timings = {}
    start = time.perf_counter()

    def timed(label, fn, *args):
        t0 = time.perf_counter()
        result = fn(*args)
        timings[label] = time.perf_counter() - t0
        return result

    timed("gen-data", cmd_gen_data, cfg)
    timed("train", cmd_train, cfg)
    for name in ATTACKS:
        timed(f"attack:{name}", cmd_attack, cfg, name)
    report = timed("evaluate", cmd_evaluate, cfg, list(ATTACKS))
    timings["total"] = time.perf_counter() - start
    _write(cfg.out_dir() / "timings.json", json.dumps(timings, sort_keys=True, indent=1) + "\n")
    return report


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapnet", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["gen-data", "train", "attack", "evaluate", "full-run"])
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--attack", help=f"attack name for 'attack': {', '.join(ATTACKS)}")
    parser.add_argument("--out", help="output directory (overrides [paths] out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            from dataclasses import replace

            cfg = replace(cfg, paths=replace(cfg.paths, out=str(Path(args.out).resolve())))
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "attack":
            if not args.attack:
                raise ConfigError(f"--attack is required; valid names: {', '.join(ATTACKS)}")
            cmd_attack(cfg, args.attack)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        else:
            cmd_full_run(cfg)
    except ConfigError as exc:
        print(f"trapnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"trapnet: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except IsolationError as exc:
        print(f"trapnet: signature isolation violated: {exc}", file=sys.stderr)
        return EXIT_ISOLATION
    except HashMismatchError as exc:
        print(f"trapnet: artifact hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (OSError, FormatError) as exc:
        print(f"trapnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
