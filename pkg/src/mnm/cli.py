"""Command-line entry point: generate, train, eval, ablate, plot.

Exit codes: 0 success, 2 usage or malformed input, 3 I/O failure,
4 training diverged (non-finite loss budget exhausted), 5 checkpoint does
not match the model config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import synthdata
from .evaluation import evaluate_model
from .metrics import MetricsError, load_froc_csv, save_detections, save_froc_csv, save_report
from .model import ConfigError, ModelConfig
from .model.checkpoint import CheckpointError, load_model
from .trainer import NonFiniteError, TrainConfig, TrainError, train

log = logging.getLogger("mnm")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5
RUN_MANIFEST = "run_manifest.json"

# (name, dual_heads, multi_view, mil) in the order of the component table
ABLATIONS = (
    ("baseline", False, False, False),
    ("dual", True, False, False),
    ("dual+mv", True, True, False),
    ("dual+mil", True, False, True),
    ("full", True, True, True),
)
ABLATION_COLUMNS = ("config", "dual_heads", "multi_view", "mil", "ap_mb", "ap", "delta", "r_at_0.1",
                    "breast_auc", "status")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- helpers ------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> tuple[dict, dict]:
    """``key=value`` pairs; ``model.key`` targets the model config, the rest the train config."""
    train_kw, model_kw = {}, {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}")
        target = model_kw if key.startswith("model.") else train_kw
        target[key.removeprefix("model.")] = _parse_value(value)
    return train_kw, model_kw


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"{path} must hold a JSON object")
    return data


def load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    train_kw, model_kw = parse_overrides(getattr(args, "set", None))
    model_d = _read_json(args.model_config) if getattr(args, "model_config", None) else {}
    train_d = _read_json(args.train_config) if getattr(args, "train_config", None) else {}
    model_d.update(model_kw)
    train_d.update(train_kw)
    if getattr(args, "seed", None) is not None:
        train_d["seed"] = args.seed
    try:
        model_cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **model_d})
        cfg = TrainConfig.from_dict(train_d).validate()
        model_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc
    return model_cfg, cfg


def prepare_out(path, force: bool) -> Path:
    """Run directories are append-only: a non-empty one needs ``--force``."""
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(f"{out} exists and is not empty; pass --force to overwrite", EXIT_IO)
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from exc
    return out


def write_manifest(out: Path, command: str, config: dict, seed, artifacts: list, started: float,
                   argv=None) -> None:
    manifest = {
        "command": command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "duration_s": round(time.time() - started, 3),
    }
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_data(path, split: str | None = None):
    try:
        data = synthdata.load(path)
    except synthdata.DatasetError as exc:
        raise CliError(str(exc)) from exc
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_IO) from exc
    if split is None:
        return data
    part = data.split(split)
    if len(part) == 0:
        raise CliError(f"split {split!r} of {path} is empty")
    return part


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _threads() -> int:
    raw = os.environ.get("MNM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"MNM_THREADS must be an integer, got {raw!r}") from None


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> None:
    started = time.time()
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = synthdata.DatasetConfig.from_dict(d)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad dataset config: {exc}") from exc
    out = prepare_out(args.out, args.force)
    data = synthdata.generate_dataset(cfg)
    try:
        synthdata.save(data, out)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}", EXIT_IO) from exc
    write_manifest(out, "generate", cfg.to_dict(), cfg.seed, ["manifest.json", "images/"], started, args.argv)
    print(f"wrote {len(data)} breasts to {out}: {data.category_counts()}")


def _train_run(model_cfg: ModelConfig, cfg: TrainConfig, data, out: Path, resume=None, stop_after=None) -> list:
    try:
        res = train(model_cfg, cfg, data, out_dir=out, resume=resume, stop_after=stop_after)
    except NonFiniteError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    except (TrainError, ConfigError) as exc:
        raise CliError(str(exc)) from exc
    return res.history


def cmd_train(args) -> None:
    started = time.time()
    model_cfg, cfg = load_configs(args)
    data = load_data(args.data, "train")
    out = prepare_out(args.out, args.force)
    history = _train_run(model_cfg, cfg, data, out, resume=args.resume, stop_after=args.stop_after)
    snapshot = {"model": cfg.model_config(model_cfg).to_dict(), "train": cfg.to_dict(), "data": str(args.data)}
    if args.resume:
        snapshot["resumed_from"] = str(args.resume)
    write_manifest(out, "train", snapshot, cfg.seed, ["checkpoint/", "loss.csv"], started, args.argv)
    last = history[-1][1].total if history else float("nan")
    print(f"trained {len(history)} iterations, final loss {last:.4f}; checkpoint in {out / 'checkpoint'}")


def _write_eval(report, pred, out: Path) -> list:
    save_detections(pred.detections, out / "detections.json")
    save_report(report, out / "report.json")
    save_froc_csv(report.froc, out / "froc.csv")
    return ["detections.json", "report.json", "froc.csv"]


def cmd_eval(args) -> None:
    started = time.time()
    data = load_data(args.data, args.split)
    try:
        model = load_model(args.checkpoint)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}", EXIT_IO) from exc
    if tuple(data.breasts[0].image_cc.shape) != tuple(model.cfg.image_size):
        raise CliError(f"checkpoint expects {model.cfg.image_size} images, data has "
                       f"{data.breasts[0].image_cc.shape}", EXIT_MISMATCH)
    out = prepare_out(args.out, args.force)
    report, pred = evaluate_model(model, data, include_negatives=args.include_negatives,
                                  benign_hits_are_fp=args.benign_hits_are_fp)
    artifacts = _write_eval(report, pred, out)
    snapshot = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                "include_negatives": args.include_negatives, "benign_hits_are_fp": args.benign_hits_are_fp}
    write_manifest(out, "eval", snapshot, None, artifacts, started, args.argv)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "froc"}, indent=1))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def run_ablation(name: str, flags: tuple, model_cfg: ModelConfig, cfg: TrainConfig, data_dir: str, out: Path) -> dict:
    """Train and test one component configuration; returns its table row."""
    dual, mv, mil = flags
    row = {"config": name, "dual_heads": dual, "multi_view": mv, "mil": mil}
    run_cfg = replace(cfg, dual_heads=dual, multi_view=mv, mil=mil)
    try:
        data = synthdata.load(data_dir)
        res = train(model_cfg, run_cfg, data.split("train"), out_dir=out)
        report, pred = evaluate_model(res.state.model, data.split("test"), with_auc=mil)
        _write_eval(report, pred, out)
    except Exception as exc:  # one failed child must not lose the others
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        return row
    row.update({"ap_mb": report.ap_mb, "ap": report.ap_all, "delta": report.delta,
                "r_at_0.1": report.recall_at[0.1], "breast_auc": report.breast_auc if mil else None,
                "status": "ok"})
    return row


def write_ablation_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["config"], r["dual_heads"], r["multi_view"], r["mil"]]
                       + [_fmt(r.get(k)) for k in ("ap_mb", "ap", "delta", "r_at_0.1", "breast_auc")]
                       + [r.get("status", "")])


def cmd_ablate(args) -> None:
    started = time.time()
    model_cfg, cfg = load_configs(args)
    load_data(args.data, "train")
    load_data(args.data, "test")
    out = prepare_out(args.out, args.force)
    jobs = min(_threads(), len(ABLATIONS))
    tasks = [(name, flags, model_cfg, cfg, str(args.data), out / name) for name, *flags in ABLATIONS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_ablation, *zip(*tasks)))
    else:
        rows = [run_ablation(*t) for t in tasks]
    write_ablation_csv(rows, out / "ablation.csv")
    snapshot = {"model": model_cfg.to_dict(), "train": cfg.to_dict(), "data": str(args.data)}
    artifacts = ["ablation.csv"] + [f"{n}/" for n, *_ in ABLATIONS]
    write_manifest(out, "ablate", snapshot, cfg.seed, artifacts, started, args.argv)
    print((out / "ablation.csv").read_text(), end="")
    failed = [r["config"] for r in rows if r.get("status") != "ok"]
    if failed:
        raise CliError(f"configurations failed: {', '.join(failed)} (see ablation.csv)", 1)


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.report]
    if len(labels) != len(args.report):
        raise CliError("--labels needs one label per report")
    curves = []
    for path in args.report:
        try:
            curves.append(load_froc_csv(path))
        except MetricsError as exc:
            raise CliError(str(exc)) from exc
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    fig, ax = plt.subplots(figsize=(5, 4))
    for curve, label in zip(curves, labels):
        fp, rec = zip(*curve)
        ax.step(fp, rec, where="post", label=label)
    ax.set_xlim(args.xmin if args.log_x else 0.0, args.xmax)
    if args.log_x:
        ax.set_xscale("log")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("recall")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(args.out, format="svg")
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    finally:
        plt.close(fig)
    print(f"wrote {args.out}")


# -- parser -------------------------------------------------------------------


def _config_args(p) -> None:
    p.add_argument("--model-config", help="JSON file with model config fields")
    p.add_argument("--train-config", help="JSON file with train config fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a train config field (model.KEY for the model config); repeatable")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnm", description="Two-view malignancy detector on synthetic mammograms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with dataset config fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from", dest="resume", help="checkpoint directory to resume from")
    p.add_argument("--stop-after", type=int, help="halt at this iteration; the LR schedule still spans the full run")
    p.add_argument("--force", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--include-negatives", type=_bool, default=True, metavar="BOOL")
    p.add_argument("--benign-hits-are-fp", type=_bool, default=True, metavar="BOOL")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test the five component configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="overlay FROC curves into an SVG")
    p.add_argument("--report", nargs="+", required=True, help="FROC CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--log-x", action="store_true")
    p.add_argument("--xmin", type=float, default=0.01)
    p.add_argument("--xmax", type=float, default=1.0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"mnm {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
