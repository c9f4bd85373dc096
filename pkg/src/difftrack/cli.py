"""Command-line surface: train, track, eval, analyze, inpaint, plot.

Every command reads the same flat key=value config schema; flags win over
config files. Outputs land in --out when given, otherwise under the
DIFFTRACK_OUT root (default ./out) in a per-command directory. Exit codes:
0 ok, 1 usage/config, 2 data, 3 runtime.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import metrics, semantics
from .config import Config, load_config, schema_help
from .datasets import (Sequence, list_sequences, load_sequence, read_results,
                       write_results)
from .errors import (ConfigError, DataError, DiffTrackError, ParseError,
                     UndefinedMetricError)
from .geometry import BoundingBox, BoxFormat, BoxUnit, crop_region
from .model import build_model, load_checkpoint
from .semantics import DegradeKind, StubEmbeddingBackend, analyze_video
from .tracker import run_sequence
from .training import evaluate_mean_iou, held_out_sequences, train_tracker

ENV_OUT_ROOT = "DIFFTRACK_OUT"
MONTAGE_SIDE = 512  # each inpaint panel is rendered at this square size

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the documented code is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int,
                   help="master seed (sets train.seed, data.seed, diffusion.seed)")
    p.add_argument("--fusion-mode", choices=("pooled", "modulation", "concat"),
                   help="how text/generative features reach the search tokens")
    p.add_argument("--diffusion-taps", metavar="I,J,K",
                   help="denoiser submodule indices feeding fusion")
    p.add_argument("--hann-weight", type=float, metavar="W",
                   help="window blend weight in [0, 1]")
    p.add_argument("--out", metavar="DIR", help="output directory")


def resolve_config(args, base: Config | None = None) -> Config:
    """base < --config file < --set pairs < named flags."""
    cfg = base or Config()
    if getattr(args, "config", None):
        cfg = cfg.copy_with(load_config(args.config).overridden())
    pairs: dict[str, str] = {}
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    if getattr(args, "fusion_mode", None):
        pairs["fusion.mode"] = args.fusion_mode
    if getattr(args, "diffusion_taps", None):
        pairs["diffusion.taps"] = args.diffusion_taps
    if getattr(args, "hann_weight", None) is not None:
        pairs["head.hann_weight"] = str(args.hann_weight)
    if getattr(args, "seed", None) is not None:
        for key in ("train.seed", "data.seed", "diffusion.seed"):
            pairs[key] = str(args.seed)
    return cfg.copy_with(pairs)


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        d = Path(args.out)
    else:
        d = Path(os.environ.get(ENV_OUT_ROOT, "out")) / command
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_model_any(path: str):
    """Accept either a full tracker checkpoint or a generative-only one."""
    try:
        cfg, state = load_checkpoint(path, "tracker")
    except DataError:
        cfg, state = load_checkpoint(path, "generative")
        model = build_model(cfg)
        model.load_generative(state)
        model.eval()
        return model, cfg
    model = build_model(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Commands.


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "train")
    echo = None if args.quiet else print
    result = train_tracker(cfg, out, generative_ckpt=args.generative,
                           finetune_diffusion=args.finetune_diffusion,
                           resume=args.resume, echo=echo)
    print(f"checkpoint\t{result.checkpoint}")
    print(f"log\t{result.log_path}")
    if result.final_losses:
        print("final\t" + "\t".join(f"{k}={v:.4f}"
                                    for k, v in result.final_losses.items()))
    if args.eval_holdout > 0:
        from .model import load_tracker
        model = load_tracker(result.checkpoint)
        score = evaluate_mean_iou(model, held_out_sequences(cfg, args.eval_holdout))
        print(f"holdout_mean_iou\t{score:.4f}")
    return EXIT_OK


def _track_sequences(args) -> list[Sequence]:
    if bool(args.sequence) == bool(args.dataset):
        raise ConfigError("give exactly one of a sequence directory or --dataset")
    if args.sequence:
        return [load_sequence(args.sequence)]
    return [load_sequence(d) for d in list_sequences(args.dataset)]


def cmd_track(args) -> int:
    base_cfg, state = load_checkpoint(args.checkpoint, "tracker")
    cfg = resolve_config(args, base=base_cfg)
    model = build_model(cfg)
    model.load_state_dict(state)
    model.eval()
    out = _out_dir(args, "track")
    for seq in _track_sequences(args):
        boxes, fps = run_sequence(model, seq)
        path = out / f"{seq.name}.txt"
        write_results(path, boxes)
        print(f"{seq.name}\t{len(boxes)} frames\t{fps:.2f} fps\t{path}")
    return EXIT_OK


def _render_curve(path: Path, x, y, xlabel: str, ylabel: str, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, lw=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _write_curve_tsv(path: Path, xlabel: str, x, y):
    with open(path, "w") as f:
        print(f"{xlabel}\trate", file=f)
        for xi, yi in zip(x, y):
            print(f"{xi:.6g}\t{yi:.6f}", file=f)


def _read_curve_tsv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        lines = Path(path).read_text().strip().splitlines()
    except OSError as e:
        raise DataError(f"cannot read curve file {path}: {e}")
    vals = [line.split("\t") for line in lines[1:]]
    return (np.array([float(v[0]) for v in vals]),
            np.array([float(v[1]) for v in vals]))


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "eval")
    seq_dirs = list_sequences(args.dataset)
    sequences = [load_sequence(d) for d in seq_dirs]

    missing = [s.name for s in sequences
               if not (Path(args.results) / f"{s.name}.txt").exists()]
    if missing:
        raise DataError("missing results for: " + ", ".join(missing))

    rows = []
    success_curves, precision_curves = [], []
    for seq in sequences:
        pred = read_results(Path(args.results) / f"{seq.name}.txt")
        try:
            rows.append((seq.name, metrics.evaluate_sequence(
                pred, seq.boxes, precision_px=cfg["eval.precision_px"])))
            ious = metrics.iou_series(pred, seq.boxes)
            errs = metrics.center_errors_px(pred, seq.boxes)
        except UndefinedMetricError as e:
            raise DataError(f"sequence {seq.name}: {e}")
        success_curves.append(metrics.success_curve(ious)[1])
        precision_curves.append(metrics.precision_curve(errs)[1])

    agg = metrics.aggregate([row for _, row in rows])
    report = metrics.format_report(rows, agg)
    (out / "report.tsv").write_text(report)
    print(report, end="")

    s_taus = metrics.SUCCESS_TAUS
    p_taus = np.linspace(0.0, 50.0, 51)
    s_mean = np.mean(success_curves, axis=0)
    p_mean = np.mean(precision_curves, axis=0)
    _write_curve_tsv(out / "success_curve.tsv", "iou_threshold", s_taus, s_mean)
    _write_curve_tsv(out / "precision_curve.tsv", "center_error_px", p_taus, p_mean)
    _render_curve(out / "success_plot.png", s_taus, s_mean, "IoU threshold",
                  "success rate", f"Success (AUC {agg['auc']:.3f})")
    _render_curve(out / "precision_plot.png", p_taus, p_mean, "center error (px)",
                  "precision", f"Precision ({agg['precision']:.3f} @ "
                  f"{cfg['eval.precision_px']:.0f}px)")
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.eval_dir)
    report = src / "report.tsv"
    if not report.exists():
        raise DataError(f"no report.tsv under {src}")
    out = _out_dir(args, "plot")
    s_x, s_y = _read_curve_tsv(src / "success_curve.tsv")
    p_x, p_y = _read_curve_tsv(src / "precision_curve.tsv")
    _render_curve(out / "success_plot.png", s_x, s_y, "IoU threshold",
                  "success rate", "Success")
    _render_curve(out / "precision_plot.png", p_x, p_y, "center error (px)",
                  "precision", "Precision")
    for line in report.read_text().splitlines():
        if line.startswith(("sequence", "AGGREGATE")):
            print(line)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    backend = StubEmbeddingBackend(logit_scale=cfg["semantics.logit_scale"])
    sequences = [load_sequence(d) for d in list_sequences(args.dataset)]
    out = _out_dir(args, "analyze")

    reports = []
    for seq in sequences:
        try:
            reports.append(analyze_video(seq, backend, stride=cfg["semantics.stride"],
                                         template_crop=args.template_crop))
        except DiffTrackError as e:
            raise DataError(f"sequence {seq.name}: {e}")
    agg = semantics.aggregate(reports)

    lines = ["video\ttemplate_score\tmean_sampled\tlabel"]
    for r in reports:
        mean_sampled = float(np.mean(r.scores[1:]))
        label = "high" if r.video_high else "low"
        lines.append(f"{r.name}\t{r.template_score:.4f}\t{mean_sampled:.4f}\t{label}")
    lines.append("")
    lines.extend(f"{k}\t{v}" for k, v in agg.items())
    text = "\n".join(lines) + "\n"
    (out / "semantics.tsv").write_text(text)
    print(text, end="")

    if args.degrade:
        study = semantics.degradation_study(sequences, backend,
                                            seed=cfg["train.seed"])
        rows = ["condition\tmean_template_score"]
        rows.extend(f"{k}\t{v:.4f}" for k, v in study.items())
        table = "\n".join(rows) + "\n"
        (out / "degrade.tsv").write_text(table)
        print(table, end="")
    return EXIT_OK


def _to_panel(img: torch.Tensor) -> np.ndarray:
    """(1,3,H,W) float in [0,1] -> uint8 RGB panel at the montage size."""
    arr = (img[0].permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    return cv2.resize(arr, (MONTAGE_SIDE, MONTAGE_SIDE), interpolation=cv2.INTER_NEAREST)


def cmd_inpaint(args) -> int:
    model, cfg = _load_model_any(args.checkpoint)
    out = _out_dir(args, "inpaint")

    raw = cv2.imread(args.image, cv2.IMREAD_COLOR)
    if raw is None:
        raise DataError(f"unreadable image {args.image}")
    frame = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    side = model.core.unet.image_size
    if args.box:
        try:
            x, y, w, h = (float(v) for v in args.box.split(","))
        except ValueError:
            raise ConfigError(f"--box expects x,y,w,h, got {args.box!r}")
        anchor = BoundingBox(x, y, w, h, format=BoxFormat.XYWH_TOPLEFT,
                             unit=BoxUnit.PIXEL)
        crop, _ = crop_region(frame, anchor, cfg["image.template_factor"], side)
    else:
        crop = cv2.resize(frame, (side, side), interpolation=cv2.INTER_LINEAR)

    from .encoders import image_to_tensor
    template = image_to_tensor(crop).unsqueeze(0)
    with torch.no_grad():
        text, mask = model.encode_text([args.text])
        restored = model.core.inpaint(template, text, mask, steps=args.steps)

    montage = np.concatenate([_to_panel(template), _to_panel(restored)], axis=1)
    path = out / "inpaint.png"
    cv2.imwrite(str(path), cv2.cvtColor(montage, cv2.COLOR_RGB2BGR))
    print(f"inpaint\t{path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly and entry point.


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="difftrack",
                     description="text-conditioned diffusion-fusion tracker",
                     epilog=schema_help(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="staged pretraining plus tracker training",
                       epilog=schema_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--synthetic", action="store_true",
                   help="train on the built-in generator (the default and only source)")
    p.add_argument("--generative", metavar="CKPT",
                   help="reuse a pretrained generative checkpoint")
    p.add_argument("--finetune-diffusion", action="store_true",
                   help="keep the generative branch trainable during tracking loss")
    p.add_argument("--resume", action="store_true",
                   help="continue from resume.pt in the output directory")
    p.add_argument("--eval-holdout", type=int, default=0, metavar="N",
                   help="after training, report mean IoU on N held-out sequences")
    p.add_argument("--quiet", action="store_true", help="suppress per-step lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over sequences")
    _add_common(p)
    p.add_argument("sequence", nargs="?", help="one sequence directory")
    p.add_argument("--dataset", metavar="DIR", help="root of sequence directories")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score results files against ground truth")
    _add_common(p)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--results", required=True, metavar="DIR",
                   help="directory of <sequence>.txt results files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="caption/frame semantic alignment report")
    _add_common(p)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--backend", choices=("stub",), default="stub",
                   help="embedding backend (deterministic stub)")
    p.add_argument("--template-crop", action="store_true",
                   help="score the template crop instead of the full first frame")
    p.add_argument("--degrade", action="store_true",
                   help="also run the template degradation study")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("inpaint", help="text-guided template restoration montage")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT",
                   help="tracker or generative checkpoint")
    p.add_argument("--image", required=True, metavar="FILE")
    p.add_argument("--text", required=True, metavar="CAPTION")
    p.add_argument("--box", metavar="X,Y,W,H",
                   help="crop this box as the template instead of the whole image")
    p.add_argument("--steps", type=int, default=4, help="denoising iterations, 1 to 8")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("plot", help="re-render curves from an eval directory")
    _add_common(p)
    p.add_argument("eval_dir", help="directory produced by eval")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DiffTrackError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
