"""Command-line entry points: train, eval, infer, bench, ablate.

Exit status: 0 success, 3 configuration error, 4 data error, 5 numeric abort,
6 checkpoint mismatch or corruption.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import statistics
import sys
import time

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from . import config as run_config
from .data import DataError, DatasetSplit, gen_synthetic, load_root
from .losses import LossWeights
from .mbfem import BRANCHES
from .metrics import MetricsReport, compute_metrics, metrics_csv, metrics_record
from .network import ChangeDetector, ConfigError, ModelConfig, mask_from_logits, model_forward
from .scan import scan_parallel, scan_sequential
from .ssm3d import PLANES, Ssm3dParams
from .tensor import Tensor
from .train import Adam, NumericError, batch_order, evaluate, train_step

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 3, 4, 5, 6

# confusion colours: TP white, TN black, FP green, FN red
COLOURS = {"tp": (255, 255, 255), "tn": (0, 0, 0), "fp": (0, 255, 0), "fn": (255, 0, 0)}

log = logging.getLogger("ssm3dcd")


# ---------------------------------------------------------------- helpers

def _setup_logging(out_dir: str | None) -> None:
    log.setLevel(logging.INFO)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(fmt)
    log.addHandler(stream)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = logging.FileHandler(os.path.join(out_dir, "run.log"))
        fh.setFormatter(fmt)
        log.addHandler(fh)


def load_split(cfg: run_config.RunConfig, split: str) -> DatasetSplit:
    d = cfg.data
    if d["source"] == "synthetic":
        offset = {"train": 0, "val": 1, "test": 2}[split]
        return gen_synthetic(d["seed"] + offset, d[f"n_{split}"], d["size"], split=split)
    return load_root(d["root"], split, d["manifest"])


def confusion_image(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p, g = pred.astype(bool), gt.astype(bool)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    for key, sel in (("tp", p & g), ("fp", p & ~g), ("fn", ~p & g)):
        img[sel] = COLOURS[key]
    return img


def save_masks(out_dir: str, split: DatasetSplit, masks: list) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for sample, mask in zip(split, masks):
        Image.fromarray(confusion_image(mask, sample.label.mask)).save(os.path.join(out_dir, f"{sample.id}.png"))


# ---------------------------------------------------------------- train

def run_training(cfg: run_config.RunConfig, out_dir: str | None, train: DatasetSplit | None = None,
                 val: DatasetSplit | None = None) -> dict:
    """Train per ``cfg``; writes best/last checkpoints and ``metrics.jsonl`` when ``out_dir`` is set.

    Returns the trained model (last state), the per-step losses and the
    per-epoch validation records.
    """
    train = train if train is not None else load_split(cfg, "train")
    val = val if val is not None else load_split(cfg, "val")
    t = cfg.training
    model = ChangeDetector(cfg.model, cfg.dtype)
    opt = Adam(model.parameters(), cfg.optimizer["learning_rate"], (cfg.optimizer["beta1"], cfg.optimizer["beta2"]))
    rng = np.random.default_rng(cfg.seed)
    losses, records = [], []
    best_f1 = -1.0
    log_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        open(log_path, "w").close()
    log.info("training %d parameters on %d samples (%s precision)", model.num_parameters(), len(train),
             t["precision"])
    for epoch in range(1, t["epochs"] + 1):
        epoch_losses = []
        for idx in batch_order(rng, len(train), t["batch_size"]):
            I1, I2, y = train.arrays(idx, cfg.dtype)
            epoch_losses.append(train_step(model, opt, I1, I2, y, cfg.loss))
            if t["max_steps"] is not None and opt.t >= t["max_steps"]:
                break
        losses.extend(epoch_losses)
        done = t["max_steps"] is not None and opt.t >= t["max_steps"]
        last = epoch == t["epochs"] or done
        if epoch % t["eval_every"] == 0 or last:
            result = evaluate(model, val, t["threshold"], t["batch_size"], cfg.loss)
            rec = json.loads(metrics_record("val", result.report, epoch=epoch, step=opt.t,
                                            train_loss=float(np.mean(epoch_losses)), val_loss=result.loss))
            records.append(rec)
            log.info("epoch %d step %d loss %.6f val F1 %.4f", epoch, opt.t, rec["train_loss"], rec["f1"])
            if out_dir:
                with open(log_path, "a") as f:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
                if result.report.f1 > best_f1:
                    ckpt.save(model, os.path.join(out_dir, "best.ckpt"))
            best_f1 = max(best_f1, result.report.f1)
        if last:
            break
    if out_dir:
        ckpt.save(model, os.path.join(out_dir, "last.ckpt"))
        with open(os.path.join(out_dir, "config.yaml"), "w") as f:
            f.write(run_config.dumps(cfg))
    return {"model": model, "losses": losses, "records": records, "steps": opt.t}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.output_dir
    _setup_logging(out)
    res = run_training(cfg, out)
    log.info("finished after %d steps; checkpoints in %s", res["steps"], out)
    return EXIT_OK


# ---------------------------------------------------------------- eval / infer

def run_eval(cfg: run_config.RunConfig, model: ChangeDetector, split_name: str, out_dir: str | None):
    split = load_split(cfg, split_name)
    result = evaluate(model, split, cfg.training["threshold"], cfg.training["batch_size"], cfg.loss)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"metrics_{split_name}.csv"), "w") as f:
            f.write(metrics_csv({split_name: result.report}))
        with open(os.path.join(out_dir, "eval.jsonl"), "a") as f:
            f.write(metrics_record(split_name, result.report) + "\n")
        save_masks(os.path.join(out_dir, "masks", split_name), split, result.masks)
    return result


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.output_dir, "eval")
    _setup_logging(out)
    model = _load_checkpoint(args, cfg)
    result = run_eval(cfg, model, args.split, out)
    sys.stdout.write(metrics_csv({args.split: result.report}))
    return EXIT_OK


def _read_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")) / 255.0
    except OSError as exc:
        raise DataError(path, f"unreadable image ({exc})") from exc


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.output_dir, "infer")
    _setup_logging(out)
    model = _load_checkpoint(args, cfg)
    os.makedirs(out, exist_ok=True)
    if args.t1 or args.t2:
        if not (args.t1 and args.t2):
            raise ConfigError("--t1/--t2", "both images are required")
        pairs = [(os.path.splitext(os.path.basename(args.t1))[0], _read_rgb(args.t1), _read_rgb(args.t2))]
    else:
        pairs = [(s.id, s.image_t1, s.image_t2) for s in load_split(cfg, args.split)]
    for name, a, b in pairs:
        if a.shape != b.shape:
            raise DataError(name, f"t1 shape {a.shape} differs from t2 shape {b.shape}")
        logits = model_forward(a[None].astype(cfg.dtype), b[None].astype(cfg.dtype), model)[-1]
        mask = mask_from_logits(logits.data, a.shape[0], a.shape[1], cfg.training["threshold"]).mask[0]
        Image.fromarray(mask * 255).save(os.path.join(out, f"{name}.png"))
    log.info("wrote %d masks to %s", len(pairs), out)
    return EXIT_OK


# ---------------------------------------------------------------- bench

def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_scan(sizes, repeats: int = 5, seed: int = 0, dtype=np.float32) -> list:
    """Median wall time of both kernels per ``(L, D, N)`` plus their max deviation."""
    rng = np.random.default_rng(seed)
    rows = []
    for L, D, N in sizes:
        a_bar = rng.uniform(0.5, 1.0, (1, L, D, N)).astype(dtype)
        bx = rng.normal(0, 0.1, (1, L, D, N)).astype(dtype)
        c = rng.normal(size=(1, L, N)).astype(dtype)
        d = np.ones(D, dtype=dtype)
        x = rng.normal(size=(1, L, D)).astype(dtype)
        ys = scan_sequential(a_bar, bx, c, d, x)
        yp = scan_parallel(a_bar, bx, c, d, x)
        rows.append({
            "L": L, "D": D, "N": N,
            "sequential_s": _median_time(lambda: scan_sequential(a_bar, bx, c, d, x), repeats),
            "parallel_s": _median_time(lambda: scan_parallel(a_bar, bx, c, d, x), repeats),
            "max_deviation": float(np.max(np.abs(ys - yp))),
        })
    return rows


def bench_planes(model_cfg: ModelConfig, repeats: int = 3, batch: int = 1) -> list:
    """Forward time of a single-plane 3D scan at the first encoder stage shape."""
    shape = model_cfg.stage_shapes()[0]
    rng = np.random.default_rng(model_cfg.seed)
    F = Tensor(rng.normal(size=(batch,) + shape).astype(np.float32))
    rows = []
    for plane in PLANES:
        p = Ssm3dParams(np.random.default_rng(0), shape, (plane,), model_cfg.state_size, model_cfg.expand)
        rows.append({"plane": plane, "shape": list(shape), "forward_s": _median_time(lambda: p(F), repeats),
                     "parameters": p.num_parameters()})
    return rows


def parameter_table(model_cfg: ModelConfig) -> list:
    rows = []
    for mode in ("SS2D", "SS2D+CA", "SSM3D"):
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "ssm_mode": mode})
        rows.append({"ssm_mode": mode, "sim_mode": cfg.sim_mode, "parameters": ChangeDetector(cfg).num_parameters()})
    cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "sim_mode": "AbsDiff"})
    rows.append({"ssm_mode": cfg.ssm_mode, "sim_mode": "AbsDiff", "parameters": ChangeDetector(cfg).num_parameters()})
    return rows


def _parse_sizes(text: str) -> list:
    sizes = []
    for item in text.split(","):
        try:
            L, D, N = (int(v) for v in item.lower().split("x"))
        except ValueError:
            raise ConfigError("--sizes", f"expected LxDxN triples separated by commas, got {item!r}") from None
        if min(L, D, N) < 1:
            raise ConfigError("--sizes", f"dimensions must be >= 1, got {item!r}")
        sizes.append((L, D, N))
    return sizes


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    _setup_logging(args.out)
    report = {
        "scan": bench_scan(_parse_sizes(args.sizes), args.repeats, args.seed or 0),
        "planes": bench_planes(cfg.model, max(1, args.repeats // 2)),
        "parameters": parameter_table(cfg.model),
    }
    lines = ["L,D,N,sequential_ms,parallel_ms,max_deviation"]
    lines += [f"{r['L']},{r['D']},{r['N']},{1e3 * r['sequential_s']:.3f},{1e3 * r['parallel_s']:.3f},"
              f"{r['max_deviation']:.3e}" for r in report["scan"]]
    lines += ["", "plane,forward_ms,parameters"]
    lines += [f"{r['plane']},{1e3 * r['forward_s']:.3f},{r['parameters']}" for r in report["planes"]]
    lines += ["", "ssm_mode,sim_mode,parameters"]
    lines += [f"{r['ssm_mode']},{r['sim_mode']},{r['parameters']}" for r in report["parameters"]]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(os.path.join(args.out, "bench.csv"), "w") as f:
            f.write(text)
        with open(os.path.join(args.out, "bench.json"), "w") as f:
            json.dump(report, f, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _subsets(items) -> list:
    return [c for k in range(1, len(items) + 1) for c in itertools.combinations(items, k)]


def ablation_arms(cfg: run_config.RunConfig) -> dict:
    """Axis name -> list of (check-mark columns, overrides) for every arm."""
    arms = {}
    for axis in cfg.ablation["axes"]:
        if axis == "planes":
            arms[axis] = (list(PLANES), [({p: p in s for p in PLANES}, {"model": {"plane_flags": list(s)}})
                                         for s in _subsets(PLANES)])
        elif axis == "branches":
            arms[axis] = (list(BRANCHES), [({b: b in s for b in BRANCHES}, {"model": {"branch_flags": list(s)}})
                                           for s in _subsets(BRANCHES)])
        elif axis == "sim_mode":
            modes = ("AbsDiff", "SIM")
            arms[axis] = (list(modes), [({m: m == mode for m in modes}, {"model": {"sim_mode": mode}})
                                        for mode in modes])
        elif axis == "ssm_mode":
            modes = ("SS2D", "SS2D+CA", "SSM3D")
            arms[axis] = (list(modes), [({m: m == mode for m in modes}, {"model": {"ssm_mode": mode}})
                                        for mode in modes])
        else:
            pairs = cfg.ablation["loss_weights"]
            arms[axis] = (["lambda1", "lambda2"], [({"lambda1": w[0], "lambda2": w[1]},
                                                    {"loss": {"lambda1": float(w[0]), "lambda2": float(w[1])}})
                                                   for w in pairs])
    return arms


def _arm_config(cfg: run_config.RunConfig, overrides: dict) -> run_config.RunConfig:
    raw = cfg.to_dict()
    for section, values in overrides.items():
        raw[section].update(values)
    raw["training"]["epochs"] = cfg.ablation["epochs"]
    raw["training"]["max_steps"] = None
    arm = run_config.from_dict(raw)
    return arm


def _mark(v) -> str:
    if isinstance(v, bool):
        return "✓" if v else ""
    return f"{v:g}"


def run_ablation(cfg: run_config.RunConfig, out_dir: str | None = None) -> dict:
    if not cfg.ablation["axes"]:
        raise ConfigError("ablation.axes", "no axes to sweep")
    n = cfg.ablation["n_samples"]
    seed = cfg.data["seed"]
    size = cfg.model.image_size
    train = gen_synthetic(seed, n, size, "train") if cfg.data["source"] == "synthetic" else load_split(cfg, "train")
    val = gen_synthetic(seed + 1, n, size, "val") if cfg.data["source"] == "synthetic" else load_split(cfg, "val")
    tables = {}
    for axis, (columns, arms) in ablation_arms(cfg).items():
        if not arms:
            raise ConfigError(f"ablation.{axis}", "axis has no arms")
        rows = []
        for marks, overrides in arms:
            arm = _arm_config(cfg, overrides)
            res = run_training(arm, None, train, val)
            report = evaluate(res["model"], val, arm.training["threshold"], arm.training["batch_size"], arm.loss).report
            rows.append({"marks": marks, "parameters": res["model"].num_parameters(), "report": report})
            log.info("ablate %s %s: params %d F1 %.4f", axis, marks, rows[-1]["parameters"], report.f1)
        tables[axis] = (columns, rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.md"), "w") as f:
            f.write(format_ablation(tables))
        with open(os.path.join(out_dir, "ablation.jsonl"), "w") as f:
            for axis, (_, rows) in tables.items():
                for r in rows:
                    f.write(json.dumps({"axis": axis, "arm": r["marks"], "parameters": r["parameters"],
                                        **r["report"].as_dict()}, sort_keys=True) + "\n")
    return tables


def format_ablation(tables: dict) -> str:
    out = []
    for axis, (columns, rows) in tables.items():
        header = columns + ["Params", "Pre", "Rec", "F1", "Kappa", "OA"]
        out.append(f"## {axis}\n")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for r in rows:
            cells = [_mark(r["marks"][c]) for c in columns] + [str(r["parameters"])] + r["report"].percent_row()
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out) + "\n"


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.output_dir, "ablation")
    _setup_logging(out)
    tables = run_ablation(cfg, out)
    sys.stdout.write(format_ablation(tables))
    return EXIT_OK


# ---------------------------------------------------------------- plumbing

def _load_config(args) -> run_config.RunConfig:
    cfg = run_config.load(args.config) if args.config else run_config.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "threshold", None) is not None:
        if not 0 < args.threshold < 1:
            raise ConfigError("--threshold", f"must lie in (0, 1), got {args.threshold}")
        cfg = copy.deepcopy(cfg)
        cfg.training["threshold"] = args.threshold
    return cfg


def _load_checkpoint(args, cfg: run_config.RunConfig) -> ChangeDetector:
    path = args.checkpoint or os.path.join(cfg.output_dir, "best.ckpt")
    return ckpt.load(path, cfg.dtype, config=cfg.model)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssm3dcd", description="3D selective-scan change detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, split=False):
        p.add_argument("--config", help="run configuration (YAML)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threshold", type=float, help="change-probability threshold in (0, 1)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file (default <output_dir>/best.ckpt)")
        if split:
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        return p

    common(sub.add_parser("train", help="train a model")).set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="evaluate a checkpoint on a split"), True, True).set_defaults(func=cmd_eval)
    p = common(sub.add_parser("infer", help="write change masks"), True, True)
    p.add_argument("--t1", help="first-date image (PNG)")
    p.add_argument("--t2", help="second-date image (PNG)")
    p.set_defaults(func=cmd_infer)
    p = common(sub.add_parser("bench", help="time scan kernels and report parameter counts"))
    p.add_argument("--sizes", default="1x16x8,64x16x8,256x16x8,1024x16x8", help="comma-separated LxDxN triples")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    common(sub.add_parser("ablate", help="sweep ablation axes"), False, False).set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
