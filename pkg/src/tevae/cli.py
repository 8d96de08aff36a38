"""Command-line experiment driver.

    tevae generate   --config configs/default.yaml
    tevae preprocess --config ...
    tevae train      --config ... [--ablation noma] [--d-k K] [--d-z Z] [--seeds 0 1 2]
    tevae detect     --config ... [--reverse {first,last,mean}]
    tevae evaluate   --config ...
    tevae benchmark  --config ...

Output layout below ``output_dir``::

    data/                              generated dataset (unless data.dir is set)
    preprocess/                        norm.json, window.json, train/val windows
    models/<tag>/seed_<s>/             model.npz, history.csv, train.json
    models/<tag>/seed_<s>/<eval>/<m>/  detection.json, scores/, metrics.json, plots/
    models/<tag>/report_<eval>_<m>.json   mean and std across seeds
    benchmark.json, benchmark.md       TeVAE against NoMA
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import syndata
from .config import ExperimentConfig, dump_config, load_config, override
from .dataset import load_split
from .detect import (
    DetectionOutcome, ReverseWindowMethod, decide, score_sequence, threshold_from_scores, write_score_dump,
)
from .metrics import GroundTruth, evaluate, pr_curve
from .model import ModelConfig, TeVAE, load_checkpoint, save_checkpoint
from .plots import plot_pr_curve, plot_score_trace
from .preprocess import NormStats, apply_norm, estimate_window_size, fit_norm, window_many
from .train import TrainConfig, fit

log = logging.getLogger("tevae")

SUMMARY_KEYS = ("P", "R", "F1", "F1_best", "P_best", "R_best", "F1_closest", "A_PR",
                "delay_s", "delay_best_s", "P_rc", "tau")


# ---------------------------------------------------------------- helpers

def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}; run the previous pipeline step first")
    return json.loads(path.read_text())


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def preprocess_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "preprocess"


def window_size(cfg: ExperimentConfig) -> int:
    return int(read_json(preprocess_dir(cfg) / "window.json")["w"])


def model_config(cfg: ExperimentConfig, w: int, d_D: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(w=w, d_D=d_D, d_Z=m.d_Z, h=m.h, d_K=m.d_K, enc_hidden=tuple(m.enc_hidden),
                       dec_hidden=tuple(m.dec_hidden), attention=m.attention)


def model_tag(cfg: ExperimentConfig, w: int) -> str:
    mc = model_config(cfg, w, len(syndata.CHANNELS))
    return f"{cfg.variant}_w{w}_dz{mc.d_Z}_dk{mc.d_K}"


def model_root(cfg: ExperimentConfig, w: int | None = None) -> Path:
    w = window_size(cfg) if w is None else w
    return Path(cfg.output_dir) / "models" / model_tag(cfg, w)


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                       corrupt_std=t.corrupt_std, seed=seed, learning_rate=t.learning_rate, anneal=t.anneal)


def _load_norm(cfg: ExperimentConfig) -> NormStats:
    return NormStats.from_dict(read_json(preprocess_dir(cfg) / "norm.json"))


def _normalised(records, stats):
    return [apply_norm(r.seq, stats) for r in records]


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = cfg.data_dir
    d = cfg.data
    ds_cfg = syndata.DatasetConfig(n_train=d.n_train, budget=d.budget, cycles=list(d.cycles),
                                   anomalies_per_pair=d.anomalies_per_pair, anomaly_ratio=d.anomaly_ratio,
                                   val_fraction=d.val_fraction, magnitudes=dict(d.magnitudes),
                                   midpoint_share=d.midpoint_share, seed=d.seed)
    manifest_path = out / "dataset.json"
    if manifest_path.is_file():
        if json.loads(manifest_path.read_text()).get("config") == json.loads(json.dumps(ds_cfg.to_dict())):
            log.info("dataset at %s already matches the config", out)
            return out
        for split in ("train", "val", "test"):
            shutil.rmtree(out / split, ignore_errors=True)
    elif out.is_dir() and any(out.iterdir()):
        raise FileExistsError(f"{out} is not empty and holds no generated dataset; refusing to overwrite")
    t0 = time.time()
    manifest = syndata.build_dataset(out, ds_cfg)
    log.info("generated %s in %.1f s: %s", out, time.time() - t0, manifest["counts"])
    return out


def cmd_preprocess(cfg: ExperimentConfig) -> dict:
    data = _require_dir(cfg.data_dir, "dataset")
    train, val = load_split(data, "train"), load_split(data, "val")
    if not train or not val:
        raise ValueError("training and validation splits must be non-empty")
    stats = fit_norm([r.seq for r in train])
    train_n, val_n = _normalised(train, stats), _normalised(val, stats)
    max_lag = min(cfg.preprocess.max_lag, min(s.T for s in train_n) - 1)
    estimated = estimate_window_size(train_n, max_lag=max_lag, min_window=cfg.preprocess.min_window)
    w = cfg.preprocess.window or estimated
    Xtr = window_many(train_n, w, max(1, w // 2))
    Xva = window_many(val_n, w, max(1, w // 2))
    out = preprocess_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "norm.json", {**stats.to_dict(), "channels": train[0].seq.channel_names})
    info = {"w": int(w), "estimated_w": int(estimated), "max_lag": int(max_lag),
            "n_train_windows": int(Xtr.shape[0]), "n_val_windows": int(Xva.shape[0])}
    write_json(out / "window.json", info)
    np.save(out / "train_windows.npy", Xtr.astype(np.float32))
    np.save(out / "val_windows.npy", Xva.astype(np.float32))
    log.info("preprocess: w=%d (estimated %d), %d train / %d val windows",
             w, estimated, Xtr.shape[0], Xva.shape[0])
    return info


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    pre = preprocess_dir(cfg)
    Xtr = np.load(_require_file(pre / "train_windows.npy"))
    Xva = np.load(_require_file(pre / "val_windows.npy"))
    w = window_size(cfg)
    mc = model_config(cfg, w, Xtr.shape[-1])
    outs = []
    for seed in cfg.seeds:
        run = model_root(cfg, w) / f"seed_{seed}"
        tc = _train_config(cfg, seed)
        signature = {"model": mc.to_dict(), "train": tc.to_dict(), "preprocess": read_json(pre / "window.json")}
        done = run / "train.json"
        if not force and done.is_file() and read_json(done).get("signature") == _json_safe(signature):
            log.info("seed %d already trained at %s", seed, run)
            outs.append(run)
            continue
        run.mkdir(parents=True, exist_ok=True)
        model = TeVAE(mc, seed=seed)
        t0 = time.time()

        def progress(epoch, hist, stop):
            log.info("[%s seed %d] epoch %d train_nll %.3f val_nll %.3f beta %.2g",
                     cfg.variant, seed, epoch, hist.train_nll[-1], hist.val_nll[-1], hist.beta[-1])

        _, hist, stop = fit(Xtr, Xva, model, tc, on_epoch=progress)
        save_checkpoint(run / "model.npz", model, stop.best_epoch, stop.best_val_nll)
        hist.to_csv(run / "history.csv")
        write_json(done, {
            "signature": signature,
            "seed": seed,
            "epochs_run": len(hist),
            "best_epoch": stop.best_epoch,
            "best_val_nll": stop.best_val_nll,
            "stopped_early": stop.epochs_since_improve >= tc.patience,
            "runtime_s": round(time.time() - t0, 1),
        })
        log.info("seed %d: best epoch %d val_nll %.3f (%.0f s)", seed, stop.best_epoch,
                 stop.best_val_nll, time.time() - t0)
        outs.append(run)
    return outs


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}; run the previous pipeline step first")
    return path


def cmd_detect(cfg: ExperimentConfig, eval_name: str = "test") -> list[Path]:
    data = _require_dir(cfg.data_dir, "dataset")
    stats = _load_norm(cfg)
    val = load_split(data, "val")
    test = load_split(data, "test")
    val_n, test_n = _normalised(val, stats), _normalised(test, stats)
    method = ReverseWindowMethod(cfg.reverse)
    outs = []
    for seed in cfg.seeds:
        run = model_root(cfg) / f"seed_{seed}"
        model, meta = load_checkpoint(_require_file(run / "model.npz"))
        t0 = time.time()
        tau = threshold_from_scores([score_sequence(s.values, model, method).s for s in val_n])
        out = run / eval_name / method.value
        scores_dir = out / "scores"
        shutil.rmtree(scores_dir, ignore_errors=True)
        scores_dir.mkdir(parents=True)
        records = []
        for rec, seq in zip(test, test_n):
            sc = score_sequence(seq.values, model, method)
            o = decide(sc, tau)
            write_score_dump(scores_dir / f"{seq.id}.csv", sc, seq.channel_names)
            records.append({"id": seq.id, "label": o.label, "first_flagged_step": o.first_flagged_step,
                            "root_cause_channel": o.root_cause_channel, "max_score": o.max_score,
                            "tau": tau})
        write_json(out / "detection.json", {
            "method": method.value, "tau": tau, "w": model.config.w, "seed": seed,
            "data_dir": str(data), "checkpoint_epoch": meta["epoch"], "records": records,
        })
        n_flag = sum(r["label"] == "anomalous" for r in records)
        log.info("[%s seed %d %s] tau=%.3f flagged %d/%d (%.0f s)", cfg.variant, seed, method.value,
                 tau, n_flag, len(records), time.time() - t0)
        outs.append(out)
    return outs


def _read_scores(path: Path) -> tuple[np.ndarray, np.ndarray]:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return table[:, 1], table[:, 2:]


def cmd_evaluate(cfg: ExperimentConfig, eval_name: str = "test", plots: bool = True) -> dict:
    data = _require_dir(cfg.data_dir, "dataset")
    test = {r.seq.id: r for r in load_split(data, "test")}
    method = ReverseWindowMethod(cfg.reverse)
    per_seed = {}
    for seed in cfg.seeds:
        out = model_root(cfg) / f"seed_{seed}" / eval_name / method.value
        det = read_json(out / "detection.json")
        w, tau = int(det["w"]), float(det["tau"])
        outcomes, scores, gts, ids = [], [], [], []
        for r in det["records"]:
            rec = test[r["id"]]
            s, _ = _read_scores(out / "scores" / f"{r['id']}.csv")
            outcomes.append(DetectionOutcome(r["label"], r["first_flagged_step"], r["root_cause_channel"],
                                             float(r["max_score"])))
            scores.append(s)
            gts.append(rec.gt)
            ids.append(r["id"])
        rate = test[ids[0]].seq.rate
        report = evaluate(outcomes, scores, gts, w, rate, tau)
        labels = report.pop("labels")
        report["sequences"] = {i: lab for i, lab in zip(ids, labels)}
        report["by_type"] = _per_type(labels, gts)
        write_json(out / "metrics.json", report)
        per_seed[str(seed)] = report
        if plots:
            _plots(out, ids, scores, gts, tau, rate, test, w, seed, cfg.variant)

    summary = {k: _mean_std([r[k] for r in per_seed.values()]) for k in SUMMARY_KEYS}
    full = {
        "variant": cfg.variant,
        "method": method.value,
        "eval": eval_name,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "summary": summary,
        "model": cfg.to_dict()["model"],
    }
    path = model_root(cfg) / f"report_{eval_name}_{method.value}.json"
    write_json(path, full)
    log.info("%s %s: %s", cfg.variant, method.value,
             ", ".join(f"{k}={summary[k]['mean']:.3f}±{summary[k]['std']:.3f}" for k in ("P", "R", "A_PR", "P_rc")))
    return full


def _per_type(labels, gts: list[GroundTruth]) -> dict:
    out = {}
    for lab, g in zip(labels, gts):
        key = g.anomaly_type or g.kind
        out.setdefault(key, {}).setdefault(lab, 0)
        out[key][lab] += 1
    return out


def _mean_std(values) -> dict:
    arr = np.array([float(v) for v in values])
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def _plots(out: Path, ids, scores, gts, tau, rate, test, w, seed, variant) -> None:
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    curve, _, area = pr_curve(scores, gts, w)
    plot_pr_curve(plot_dir / "pr_curve.png", curve, area, f"{variant} seed {seed}")
    seen = set()
    for sid, g in zip(ids, gts):
        key = g.anomaly_type if g.anomalous else None
        if key is None or key in seen:
            continue
        seen.add(key)
        s, pc = _read_scores(out / "scores" / f"{sid}.csv")
        plot_score_trace(plot_dir / f"score_{sid}.png", s, pc, tau, test[sid].seq.channel_names, rate,
                         g.t_gt, f"{sid} ({key})")


def cmd_benchmark(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Both variants on one dataset; ``runtime_s`` holds wall-clock seconds per stage."""
    t0 = time.time()
    cmd_generate(cfg)
    cmd_preprocess(cfg)
    runtime = {"data": time.time() - t0}
    table = {}
    for attention in (True, False):
        t0 = time.time()
        vcfg = override(cfg, {"model.attention": attention})
        cmd_train(vcfg, force=force)
        for m in cfg.benchmark_methods:
            mcfg = override(vcfg, {"reverse": m})
            cmd_detect(mcfg)
            rep = cmd_evaluate(mcfg)
            table.setdefault(vcfg.variant, {})[m] = {"summary": rep["summary"],
                                                     "per_seed_A_PR": [r["A_PR"] for r in rep["per_seed"].values()]}
        runtime[vcfg.variant] = time.time() - t0
    result = {"seeds": list(cfg.seeds), "window": window_size(cfg), "results": table,
              "runtime_s": {k: round(v, 1) for k, v in runtime.items()}}
    write_json(Path(cfg.output_dir) / "benchmark.json", result)
    (Path(cfg.output_dir) / "benchmark.md").write_text(_benchmark_markdown(result))
    return result


def _benchmark_markdown(result: dict) -> str:
    cols = ("P", "R", "F1", "F1_best", "A_PR", "delay_s", "P_rc")
    lines = [f"Seeds: {result['seeds']}, window {result['window']}", "",
             "| variant | reverse | " + " | ".join(cols) + " |",
             "|---|---|" + "---|" * len(cols)]
    for variant, by_method in result["results"].items():
        for m, r in by_method.items():
            cells = [f"{r['summary'][c]['mean']:.3f} ± {r['summary'][c]['std']:.3f}" for c in cols]
            lines.append(f"| {variant} | {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tevae", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--output-dir")
        sp.add_argument("--data-dir", help="dataset directory (default: <output-dir>/data)")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.patience=5 (YAML value syntax)")

    def model_flags(sp):
        sp.add_argument("--ablation", choices=["noma"], help="remove the attention bridge")
        sp.add_argument("--d-k", type=int, dest="d_k")
        sp.add_argument("--d-z", type=int, dest="d_z")

    def eval_flags(sp):
        sp.add_argument("--reverse", choices=[m.value for m in ReverseWindowMethod])
        sp.add_argument("--eval-name", default="test", help="name of the evaluation run directory")

    common(sub.add_parser("generate", help="build the synthetic dataset"))
    sp = sub.add_parser("preprocess", help="normalise, size and window the training data")
    common(sp)
    sp.add_argument("--window", type=int)
    sp = sub.add_parser("train", help="train one model per seed")
    common(sp)
    model_flags(sp)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--force", action="store_true", help="retrain even if a matching run exists")
    sp = sub.add_parser("detect", help="score the test split and write detection reports")
    common(sp)
    model_flags(sp)
    eval_flags(sp)
    sp = sub.add_parser("evaluate", help="compute metrics, mean and std across seeds, plots")
    common(sp)
    model_flags(sp)
    eval_flags(sp)
    sp.add_argument("--no-plots", action="store_true")
    sp = sub.add_parser("benchmark", help="generate, train and evaluate TeVAE and NoMA")
    common(sp)
    sp.add_argument("--methods", nargs="+", choices=[m.value for m in ReverseWindowMethod])
    sp.add_argument("--force", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(Path(args.config)) if args.config else ExperimentConfig()
    dotted = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        dotted[key.strip()] = yaml.safe_load(value)
    cfg = override(cfg, dotted, skip_none=False)
    flags = {
        "output_dir": args.output_dir,
        "data.dir": args.data_dir,
        "seeds": args.seeds,
        "threads": args.threads,
        "preprocess.window": getattr(args, "window", None),
        "model.d_K": getattr(args, "d_k", None),
        "model.d_Z": getattr(args, "d_z", None),
        "train.max_epochs": getattr(args, "max_epochs", None),
        "train.patience": getattr(args, "patience", None),
        "reverse": getattr(args, "reverse", None),
        "benchmark_methods": getattr(args, "methods", None),
    }
    if getattr(args, "ablation", None) == "noma":
        flags["model.attention"] = False
    return override(cfg, flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(cfg.threads)
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.output_dir) / "config.yaml").write_text(dump_config(cfg))
        if args.command == "generate":
            print(cmd_generate(cfg))
        elif args.command == "preprocess":
            print(json.dumps(cmd_preprocess(cfg), sort_keys=True))
        elif args.command == "train":
            for path in cmd_train(cfg, force=args.force):
                print(path)
        elif args.command == "detect":
            for path in cmd_detect(cfg, args.eval_name):
                print(path)
        elif args.command == "evaluate":
            rep = cmd_evaluate(cfg, args.eval_name, plots=not args.no_plots)
            print(json.dumps(_json_safe(rep["summary"]), indent=2, sort_keys=True))
        elif args.command == "benchmark":
            res = cmd_benchmark(cfg, force=args.force)
            print(_benchmark_markdown(res))
    except (ValueError, FileNotFoundError, FileExistsError, RuntimeError, KeyError) as exc:
        print(f"tevae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
