"""Command-line entry point: ``facadet <subcommand> [options]``.

Every run writes ``manifest.json`` into ``--out`` with the fully resolved
options; ``--config manifest.json`` replays it.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (SPLITS, SceneSpec, generate_dataset, load_samples, load_split, read_annotation_file,
                   scene_samples, tiny_scene_spec)
from .metrics import (coco_suite, pr_curve_export, postprocess, read_detections, tide_analysis,
                      write_detections)
from .model import (ABLATIONS, ModelConfig, ablation_config, build_model, center_receptive_box, erf_map,
                    load_checkpoint, save_checkpoint)
from .structures import Annotation
from .train import TrainConfig, desk_train_config, fit, predict

SUBCOMMANDS = ("gen-data", "train", "eval", "detect", "tide", "erf", "ablate")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values (a manifest.json works too)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/out"))
    p.add_argument("--tiny", action="store_true", help="desk-scale preset (128 px scenes, short training)")


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default="M7",
                   help="switch combination (Baseline, M1..M7); M7 enables all three modules")
    p.add_argument("--width", type=int, default=16)


def _train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-grad-norm", type=float)
    p.add_argument("--scenes", type=int, default=8, help="in-memory scenes when --data is not given")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facadet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"facadet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--no-warp", action="store_true", help="keep every view frontal")

    p = sub.add_parser("train", help="train a model and write checkpoint + run log")
    _common(p)
    _model_opts(p)
    _train_opts(p)
    p.add_argument("--data", type=Path, help="dataset directory (train split is used)")

    p = sub.add_parser("eval", help="AP suite, PR curves")
    _common(p)
    p.add_argument("--gt", type=Path, help="annotation JSON")
    p.add_argument("--dets", type=Path, help="detections JSON lines")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("detect", help="run a checkpoint over a dataset split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--conf", type=float, default=0.001)

    p = sub.add_parser("tide", help="TIDE error breakdown")
    _common(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--dets", type=Path, required=True)

    p = sub.add_parser("erf", help="effective receptive field map of a backbone stage")
    _common(p)
    _model_opts(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--stage", type=int, default=1, choices=(1, 2, 3, 4))

    p = sub.add_parser("ablate", help="train and evaluate all eight switch combinations")
    _common(p)
    _train_opts(p)
    p.add_argument("--width", type=int, default=16)
    return parser


def _explicit(argv: Sequence[str]) -> set[str]:
    return {a[2:].split("=")[0].replace("-", "_") for a in argv if a.startswith("--")}


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"--config: cannot read {args.config}: {exc}")
        if isinstance(cfg, dict) and "options" in cfg and "command" in cfg:
            if cfg["command"] != args.command:
                parser.error(f"--config manifest is for '{cfg['command']}', not '{args.command}'")
            cfg = cfg["options"]
        if not isinstance(cfg, dict):
            parser.error("--config must hold a JSON object")
        given = _explicit(argv)
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key in ("command", "config"):
                continue
            if not hasattr(args, key):
                parser.error(f"--config: unknown option '{key}' for {args.command}")
            if key not in given:
                default = getattr(args, key)
                setattr(args, key, Path(value) if isinstance(default, Path) else value)
    _validate(parser, args)
    return args


def _validate(parser: argparse.ArgumentParser, a: argparse.Namespace) -> None:
    for name in ("n", "epochs", "batch_size", "scenes", "trials", "size", "width"):
        v = getattr(a, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1 (got {v})")
    if getattr(a, "lr", None) is not None and not a.lr > 0:
        parser.error(f"--lr must be positive (got {a.lr})")
    if a.command == "eval":
        if (a.gt is None) != (a.dets is None):
            parser.error("eval needs both --gt and --dets, or --checkpoint with --data")
        if a.gt is None and (a.checkpoint is None or a.data is None):
            parser.error("eval needs both --gt and --dets, or --checkpoint with --data")
    if a.command == "erf" and a.size % 32:
        parser.error(f"--size must be a multiple of 32 (got {a.size})")
    for name in ("gt", "dets", "checkpoint", "data"):
        p = getattr(a, name, None)
        if p is not None and not Path(p).exists():
            parser.error(f"--{name}: {p} does not exist")
    threads = os.environ.get("BFA_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        parser.error(f"BFA_THREADS must be a positive integer (got {threads!r})")


def _options(a: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(a).items()):
        if k in ("command", "config"):
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _write_manifest(a: argparse.Namespace, outputs: list[str], extra: Optional[dict] = None) -> None:
    manifest = {"command": a.command, "version": __version__, "options": _options(a),
                "outputs": sorted(outputs)}
    if extra:
        manifest.update(extra)
    (a.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _scene_spec(a) -> SceneSpec:
    return tiny_scene_spec() if a.tiny else SceneSpec()


def _train_config(a) -> TrainConfig:
    base = desk_train_config(seed=a.seed) if a.tiny else TrainConfig(seed=a.seed)
    for key in ("epochs", "lr", "batch_size", "max_grad_norm"):
        v = getattr(a, key, None)
        if v is not None:
            setattr(base, key, v)
    return base.validate()


def _model_config(a, name: Optional[str] = None) -> ModelConfig:
    base = ModelConfig(width=a.width, input_size=128 if a.tiny else 512, seed=a.seed)
    return ablation_config(name or a.ablation, base)


def cmd_gen_data(a) -> None:
    with stage("generate"):
        stats = generate_dataset(a.out, a.n, a.seed, _scene_spec(a), warp=not a.no_warp)
    _write_manifest(a, ["images/", "annotations/", "classes.txt", "stats.csv"],
                    {"scene_spec": _scene_spec(a).to_json(), "totals": stats.totals})
    print(f"wrote {a.n} scenes to {a.out}")


def _training_samples(a):
    if a.data is not None:
        return load_samples(a.data, "train")
    return scene_samples(_scene_spec(a), a.scenes, a.seed)


def cmd_train(a) -> None:
    with stage("load-data"):
        samples = _training_samples(a)
    with stage("build-model"):
        tcfg = _train_config(a)
        mcfg = _model_config(a)
        if samples and samples[0].image.shape[1] != mcfg.input_size:
            mcfg.input_size = int(samples[0].image.shape[1])
        model = build_model(mcfg)
    with stage("train"):
        log = fit(model, samples, tcfg,
                  callback=lambda r: print(f"epoch {r.epoch + 1}: loss {r.loss:.4f} "
                                           f"(cls {r.cls:.4f}, box {r.box:.4f})", flush=True))
    with stage("write-outputs"):
        save_checkpoint(model, a.out / "model.ckpt", {"epochs": tcfg.epochs})
        log.write(a.out / "run_log.json")
    _write_manifest(a, ["model.ckpt", "run_log.json"],
                    {"model_config": mcfg.to_json(), "train_config": tcfg.to_json()})


def _gt_from_data(root: Path, split: str) -> list[Annotation]:
    return load_split(root, split)[1]


def _report_files(report, out: Path) -> list[str]:
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    rows = ["class," + ",".join(next(iter(report.per_class.values())).keys())]
    for name, row in report.per_class.items():
        rows.append(name + "," + ",".join("" if v is None else f"{v:.6f}" for v in row.values()))
    (out / "per_class.csv").write_text("\n".join(rows) + "\n")
    pr_curve_export(report, out / "pr_curve")
    return ["report.json", "per_class.csv", "pr_curve.csv", "pr_curve.svg"]


def cmd_eval(a) -> None:
    with stage("load-inputs"):
        if a.gt is not None:
            gts = read_annotation_file(a.gt)[1]
            dets = read_detections(a.dets)
        else:
            model = load_checkpoint(a.checkpoint)
            dets = predict(model, load_samples(a.data, a.split))
            gts = _gt_from_data(a.data, a.split)
    with stage("evaluate"):
        report = coco_suite(dets, gts)
    with stage("write-outputs"):
        files = _report_files(report, a.out)
    _write_manifest(a, files)
    print(json.dumps(report.summary(), sort_keys=True))


def cmd_detect(a) -> None:
    with stage("load-model"):
        model = load_checkpoint(a.checkpoint)
    with stage("load-data"):
        samples = load_samples(a.data, a.split)
    with stage("detect"):
        dets = predict(model, samples, conf_threshold=a.conf)
    with stage("write-outputs"):
        write_detections(a.out / "detections.jsonl", dets)
    _write_manifest(a, ["detections.jsonl"])
    print(f"{len(dets)} detections")


def cmd_tide(a) -> None:
    with stage("load-inputs"):
        gts = read_annotation_file(a.gt)[1]
        dets = postprocess(read_detections(a.dets))
    with stage("analyse"):
        rep = tide_analysis(dets, gts)
    with stage("write-outputs"):
        (a.out / "tide.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n")
    _write_manifest(a, ["tide.json"])
    print(json.dumps({"counts": rep.counts, "delta_ap": rep.delta_ap}, sort_keys=True))


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    path.write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


def cmd_erf(a) -> None:
    with stage("build-model"):
        if a.checkpoint is not None:
            model = load_checkpoint(a.checkpoint)
        else:
            mcfg = _model_config(a)
            mcfg.input_size = a.size
            model = build_model(mcfg)
    with stage("erf"):
        emap = erf_map(model, a.size, a.trials, stage=a.stage, seed=a.seed)
        box = center_receptive_box(model, a.size, a.stage)
    with stage("write-outputs"):
        np.savetxt(a.out / "erf.csv", emap, delimiter=",", fmt="%.6e")
        write_pgm(a.out / "erf.pgm", np.rint(emap * 255))
    _write_manifest(a, ["erf.csv", "erf.pgm"],
                    {"theoretical_rf_box": None if box is None else list(box),
                     "nonzero_fraction": float((emap > 0).mean())})
    print(f"nonzero fraction {(emap > 0).mean():.3f}; conv RF box {box}")


TABLE_COLUMNS = ("model", "FBSM", "TDATH", "PMESA", "AP_small", "AP_medium", "AP_large", "AP50", "AP75",
                 "AP50:95", "params")


def cmd_ablate(a) -> None:
    with stage("load-data"):
        samples = scene_samples(_scene_spec(a), a.scenes, a.seed)
        gts = [Annotation(s.image_id, int(c), tuple(float(v) for v in b))
               for s in samples for b, c in zip(s.boxes, s.classes)]
    base_train = desk_train_config(seed=a.seed, epochs=10)
    for key in ("epochs", "lr", "batch_size", "max_grad_norm"):
        v = getattr(a, key, None)
        if v is not None:
            setattr(base_train, key, v)
    rows = []
    for name, switches in ABLATIONS.items():
        with stage(f"ablate:{name}"):
            mcfg = ablation_config(name, ModelConfig(width=a.width, input_size=samples[0].image.shape[1],
                                                     seed=a.seed))
            model = build_model(mcfg)
            t0 = time.perf_counter()
            fit(model, samples, base_train)
            summary = coco_suite(predict(model, samples), gts).summary()
            row = {"model": name, "FBSM": switches[0], "TDATH": switches[1], "PMESA": switches[2]}
            row.update({k: summary[k] for k in ("AP_small", "AP_medium", "AP_large", "AP50", "AP75", "AP50:95")})
            row["params"] = model.num_parameters()
            rows.append(row)
            print(f"{name}: AP50={summary['AP50']} ({time.perf_counter() - t0:.1f}s)", flush=True)
    with stage("write-outputs"):
        lines = [",".join(TABLE_COLUMNS)]
        for r in rows:
            cells = []
            for c in TABLE_COLUMNS:
                v = r[c]
                if isinstance(v, bool):
                    cells.append("x" if v else "")
                elif isinstance(v, float):
                    cells.append(f"{100 * v:.1f}")
                else:
                    cells.append("" if v is None else str(v))
            lines.append(",".join(cells))
        (a.out / "ablation.csv").write_text("\n".join(lines) + "\n")
        (a.out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    _write_manifest(a, ["ablation.csv", "ablation.json"], {"train_config": base_train.to_json()})


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "tide": cmd_tide, "erf": cmd_erf, "ablate": cmd_ablate}


def _thread_limit():
    threads = os.environ.get("BFA_THREADS")
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(threads))


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with stage("prepare-output"):
            args.out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            HANDLERS[args.command](args)
    except StageFailure as exc:
        print(f"facadet {args.command}: failed in stage {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
