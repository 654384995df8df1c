"""Command-line pipeline: dataset synthesis, training, stage growth,
evaluation, and prediction.

Configuration comes from a flat key-value file (``section.key = value``)
merged with command-line flags; flags win. Every command echoes the fully
resolved configuration, and feeding the echoed file back reproduces the run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import PRESETS, STEM_STRIDE, BackboneConfig
from .cascade import CascadeConfig, CascadeOutput, CascadePose, grow_cascade
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .heatmaps import FUSION_MODES, HeatmapGeometry, encode_heatmaps, fuse_heatmaps
from .metrics import format_report_table, reports_to_json
from .schema import AnnotationError, mpii_skeleton, save_predictions
from .synth import AugmentRanges, SynthConfig, load_dataset, tensor_to_image, write_dataset
from .training import EvalConfig, TrainConfig, TrainingDiverged, evaluate, train

DEFAULTS = {
    "run.deterministic": False,
    "synth.seed": 0,
    "synth.count": 16,
    "synth.image_size": 96,
    "synth.occlusion_prob": 0.0,
    "synth.limb_width": 3,
    "synth.pose_jitter": 0.25,
    "synth.background": "plain",
    "cascade.stages": 2,
    "cascade.first_preset": "mini",
    "cascade.rest_preset": "mini",
    "cascade.num_joints": 16,
    "cascade.fusion_window": "auto",  # auto: min(3, stages)
    "cascade.fusion_mode": "eq5",
    "cascade.rectified_boost": True,
    "heatmap.stride": 4,
    "heatmap.sigma": 2.0,
    "train.batch_size": 64,
    "train.lr": 5e-4,
    "train.lr_decay_factor": 0.3,
    "train.lr_decay_epochs": "6,10,13",
    "train.epochs": 15,
    "train.stage_loss_weights": "",  # empty: all ones
    "train.seed": 0,
    "train.augment": True,
    "train.checkpoint_every": 1,  # 0: final checkpoint only
    "eval.flip_test": True,
    "eval.alpha": 0.5,
    "grow.preset": "",  # empty: cascade.rest_preset
    "paths.data": "",
    "paths.out": "out",
    "paths.checkpoint": "",
}

# flag destination -> config key(s) it overrides
_FLAG_KEYS = {
    "seed": ("synth.seed", "train.seed"),
    "deterministic": ("run.deterministic",),
    "stages": ("cascade.stages",),
    "fusion_window": ("cascade.fusion_window",),
    "fusion_mode": ("cascade.fusion_mode",),
    "flip_test": ("eval.flip_test",),
    "out": ("paths.out",),
    "data": ("paths.data",),
    "checkpoint": ("paths.checkpoint",),
    "count": ("synth.count",),
    "image_size": ("synth.image_size",),
    "occlusion_prob": ("synth.occlusion_prob",),
    "background": ("synth.background",),
    "epochs": ("train.epochs",),
    "batch_size": ("train.batch_size",),
    "lr": ("train.lr",),
    "augment": ("train.augment",),
    "grow_preset": ("grow.preset",),
    "alpha": ("eval.alpha",),
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        if key == "cascade.fusion_window" and raw == "auto":
            return "auto"
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for dest, keys in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            for key in keys:
                if key == "cascade.fusion_window":
                    cfg[key] = value
                else:
                    cfg[key] = type(DEFAULTS[key])(value) if not isinstance(DEFAULTS[key], str) else str(value)
    if cfg["cascade.fusion_mode"] not in FUSION_MODES:
        raise ValueError(f"cascade.fusion_mode must be one of {FUSION_MODES}")
    if cfg["heatmap.stride"] != STEM_STRIDE:
        raise ValueError(f"heatmap.stride must be {STEM_STRIDE} (the backbone's output stride)")
    return cfg


def echo_config(cfg: dict, out_dir: Path | None) -> str:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    text = "\n".join(lines) + "\n"
    print("resolved configuration:")
    print(text, end="")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config_resolved.txt").write_text(text)
    return text


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip()) if raw.strip() else ()


def _float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip()) if raw.strip() else ()


def _fusion_window(cfg: dict, stages: int) -> int:
    value = cfg["cascade.fusion_window"]
    if value == "auto":
        return min(3, stages)
    return int(value)


def _cascade_config(cfg: dict) -> CascadeConfig:
    stages = int(cfg["cascade.stages"])
    return CascadeConfig.of(
        num_stages=stages,
        first_preset=cfg["cascade.first_preset"],
        rest_preset=cfg["cascade.rest_preset"],
        num_joints=int(cfg["cascade.num_joints"]),
        fusion_window=_fusion_window(cfg, stages),
        fusion_mode=cfg["cascade.fusion_mode"],
        rectified_boost=bool(cfg["cascade.rectified_boost"]),
    )


def _train_config(cfg: dict) -> TrainConfig:
    weights = _float_list(cfg["train.stage_loss_weights"])
    return TrainConfig(
        batch_size=int(cfg["train.batch_size"]),
        lr=float(cfg["train.lr"]),
        lr_decay_factor=float(cfg["train.lr_decay_factor"]),
        lr_decay_epochs=_int_list(cfg["train.lr_decay_epochs"]),
        epochs=int(cfg["train.epochs"]),
        stage_loss_weights=weights or None,
        seed=int(cfg["train.seed"]),
    )


def _apply_determinism(cfg: dict):
    if cfg["run.deterministic"]:
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(int(cfg["train.seed"]))


def _require(cfg: dict, key: str, flag: str) -> str:
    value = cfg[key]
    if not value:
        raise ValueError(f"missing required {flag} (config key {key})")
    return value


def _load_data(cfg: dict):
    data_dir = _require(cfg, "paths.data", "--data")
    samples = load_dataset(data_dir, mpii_skeleton())
    if not samples:
        raise ValueError(f"no samples in {data_dir}")
    size = samples[0].image.shape[-1]
    geom = HeatmapGeometry.for_image(size, int(cfg["heatmap.stride"]), float(cfg["heatmap.sigma"]))
    return samples, geom


def _train_on(model, samples, geom, cfg, out: Path, parent_hash=None):
    ranges = AugmentRanges() if cfg["train.augment"] else None
    every = int(cfg["train.checkpoint_every"])
    ckpt_dir = out / "checkpoints"

    def checkpoint_callback(epoch, m):
        if every > 0 and epoch % every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(m, ckpt_dir / f"epoch_{epoch:04d}.ckpt", parent_hash)
        return False

    model, log = train(
        model, samples, _train_config(cfg), geom,
        skel=mpii_skeleton(), augment_ranges=ranges, epoch_callback=checkpoint_callback,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_log.txt").write_text("\n".join(log.lines()) + "\n" if log.entries else "")
    final = out / "checkpoint_final.ckpt"
    save_checkpoint(model, final, parent_hash)
    if log.entries:
        last_epoch = log.entries[-1][0]
        print(f"trained {last_epoch} epoch(s); final mean loss {log.epoch_mean(last_epoch):.6f}")
    print(f"checkpoint written to {final}")
    return model, log


class _OracleModel:
    """Replays encoded ground-truth heatmaps in dataset order; a pipeline
    smoke-test stand-in for a trained model (single stage, no flip test)."""

    def __init__(self, samples, geom):
        self._maps = [
            encode_heatmaps(s.annotation.keypoints, s.annotation.visibility, geom)
            for s in samples
        ]
        self._cursor = 0
        self.config = None

    def eval(self):
        self._cursor = 0
        return self

    def __call__(self, images):
        batch = images.shape[0]
        maps = torch.stack(self._maps[self._cursor : self._cursor + batch])
        if maps.shape[0] != batch:
            raise RuntimeError("oracle predictor exhausted; is the flip test enabled?")
        self._cursor += batch
        return CascadeOutput(stage_heatmaps=[maps], fused=fuse_heatmaps([maps]))


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    _apply_determinism(cfg)
    out = Path(cfg["paths.out"])
    echo_config(cfg, out)
    synth_cfg = SynthConfig(
        seed=int(cfg["synth.seed"]),
        count=int(cfg["synth.count"]),
        image_size=int(cfg["synth.image_size"]),
        occlusion_prob=float(cfg["synth.occlusion_prob"]),
        limb_width=int(cfg["synth.limb_width"]),
        pose_jitter=float(cfg["synth.pose_jitter"]),
        background=cfg["synth.background"],
    )
    samples = write_dataset(synth_cfg, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _apply_determinism(cfg)
    out = Path(cfg["paths.out"])
    echo_config(cfg, out)
    samples, geom = _load_data(cfg)
    model = CascadePose(_cascade_config(cfg), seed=int(cfg["train.seed"]))
    _train_on(model, samples, geom, cfg, out)
    return 0


def cmd_grow(args) -> int:
    cfg = resolve_config(args)
    _apply_determinism(cfg)
    out = Path(cfg["paths.out"])
    echo_config(cfg, out)
    ckpt_path = _require(cfg, "paths.checkpoint", "--checkpoint")
    model, _manifest = load_checkpoint(ckpt_path)
    preset = cfg["grow.preset"] or cfg["cascade.rest_preset"]
    new_stage = BackboneConfig.from_preset(preset, model.config.num_joints)
    grown = grow_cascade(model, new_stage, seed=int(cfg["train.seed"]) + model.num_stages)
    print(f"grew cascade from {model.num_stages} to {grown.num_stages} stages")
    samples, geom = _load_data(cfg)
    _train_on(grown, samples, geom, cfg, out, parent_hash=file_hash(ckpt_path))
    return 0


def _eval_model_and_data(cfg, args):
    samples, geom = _load_data(cfg)
    if getattr(args, "oracle", False):
        return _OracleModel(samples, geom), samples, geom, False
    ckpt_path = _require(cfg, "paths.checkpoint", "--checkpoint")
    model, _ = load_checkpoint(ckpt_path)
    return model, samples, geom, bool(cfg["eval.flip_test"])


def _write_plots(out: Path, samples, result, skel, max_overlays: int = 8):
    import cv2
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    by_id = {r.image_id: r for r in result.records}
    for sample in samples[:max_overlays]:
        record = by_id[sample.annotation.image_id]
        img = cv2.cvtColor(tensor_to_image(sample.image), cv2.COLOR_RGB2BGR)
        pts = [(int(round(x)), int(round(y))) for x, y in record.keypoints]
        for parent, child in skel.limbs:
            cv2.line(img, pts[parent], pts[child], (255, 255, 255), 1, cv2.LINE_AA)
        for x, y in pts:
            cv2.circle(img, (x, y), 2, (0, 0, 255), -1, cv2.LINE_AA)
        cv2.imwrite(str(plots / f"overlay_{record.image_id}.png"), img)

    labels = [f"stage {j + 1}" for j in range(len(result.stage_reports))] + ["fused"]
    totals = [100 * r.total for r in result.stage_reports] + [100 * result.fused_report.total]
    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 4))
    ax.bar(labels, totals, color="steelblue")
    ax.set_ylabel("PCKh@0.5 (%)")
    ax.set_ylim(0, 105)
    for i, value in enumerate(totals):
        ax.text(i, value + 1, f"{value:.2f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(plots / "pckh_per_stage.png", dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    _apply_determinism(cfg)
    out = Path(cfg["paths.out"])
    echo_config(cfg, out)
    skel = mpii_skeleton()
    model, samples, geom, flip = _eval_model_and_data(cfg, args)
    window = cfg["cascade.fusion_window"]
    eval_cfg = EvalConfig(
        use_flip_test=flip,
        fusion_window=None if window == "auto" else int(window),
        fusion_mode=None,
        alpha=float(cfg["eval.alpha"]),
    )
    result = evaluate(model, samples, eval_cfg, geom, skel)
    labelled = [
        (f"stage {j + 1}", report) for j, report in enumerate(result.stage_reports)
    ] + [("fused", result.fused_report)]
    print(format_report_table(labelled))
    out.mkdir(parents=True, exist_ok=True)
    (out / "pckh_report.json").write_text(reports_to_json(labelled) + "\n")
    save_predictions(result.records, out / "predictions.json")
    if getattr(args, "plots", False):
        _write_plots(out, samples, result, skel)
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    _apply_determinism(cfg)
    out = Path(cfg["paths.out"])
    echo_config(cfg, out)
    model, samples, geom, flip = _eval_model_and_data(cfg, args)
    eval_cfg = EvalConfig(use_flip_test=flip, alpha=float(cfg["eval.alpha"]))
    result = evaluate(model, samples, eval_cfg, geom, mpii_skeleton())
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predictions.json"
    save_predictions(result.records, path)
    print(f"wrote {len(result.records)} prediction records to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file (section.key = value)")
    common.add_argument("--seed", type=int, help="master seed (synthesis and training)")
    common.add_argument("--deterministic", action="store_const", const=True, default=None,
                        help="force deterministic algorithms")
    common.add_argument("--out", help="output directory")
    common.add_argument("--stages", type=int, help="number of cascade stages")
    common.add_argument("--fusion-window", dest="fusion_window", type=int,
                        help="how many trailing stages to fuse")
    common.add_argument("--fusion-mode", dest="fusion_mode", choices=list(FUSION_MODES))
    common.add_argument("--flip-test", dest="flip_test", action=argparse.BooleanOptionalAction,
                        default=None, help="average with the mirrored image at eval")

    parser = argparse.ArgumentParser(prog="cfa-pose",
                                     description="cascaded hourglass pose estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p_synth.add_argument("--count", type=int, help="number of samples")
    p_synth.add_argument("--image-size", dest="image_size", type=int)
    p_synth.add_argument("--occlusion-prob", dest="occlusion_prob", type=float)
    p_synth.add_argument("--background", choices=("plain", "noise", "clutter"))
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", parents=[common], help="train a cascade")
    p_train.add_argument("--data", help="dataset directory (from synth)")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p_train.set_defaults(func=cmd_train)

    p_grow = sub.add_parser("grow", parents=[common],
                            help="append a stage to a checkpoint and continue training")
    p_grow.add_argument("--data", help="dataset directory")
    p_grow.add_argument("--checkpoint", help="checkpoint to grow from")
    p_grow.add_argument("--grow-preset", dest="grow_preset", choices=sorted(PRESETS))
    p_grow.add_argument("--epochs", type=int)
    p_grow.add_argument("--batch-size", dest="batch_size", type=int)
    p_grow.add_argument("--lr", type=float)
    p_grow.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p_grow.set_defaults(func=cmd_grow)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="per-stage and fused PCKh table, reports, plots")
    p_eval.add_argument("--data", help="dataset directory")
    p_eval.add_argument("--checkpoint", help="checkpoint to evaluate")
    p_eval.add_argument("--alpha", type=float, help="PCKh threshold fraction")
    p_eval.add_argument("--oracle", action="store_true",
                        help="evaluate a ground-truth replay instead of a checkpoint")
    p_eval.add_argument("--plots", action="store_true", help="write overlay and bar-chart images")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", parents=[common], help="write prediction records")
    p_pred.add_argument("--data", help="dataset directory")
    p_pred.add_argument("--checkpoint", help="checkpoint to run")
    p_pred.add_argument("--oracle", action="store_true",
                        help="predict from a ground-truth replay instead of a checkpoint")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors with exit 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, AnnotationError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
