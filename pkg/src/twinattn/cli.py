"""Batch commands: ``gen``, ``train``, ``eval`` and ``inspect``.

Every command takes ``--config``, ``--seed`` and ``--out``; the effective
configuration is echoed into the output directory as ``config.ini``.
Failures exit nonzero with one ``twinattn: error [category]: ...`` line.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, load
from .inference import evaluate, infer, point_instances
from .model import TwinAttnModel
from .scene import SceneConfigError, class_primitive, generate_scene, gt_superpoint_masks, load_scene, partition_superpoints, save_scene
from .training import NonFiniteLossError, prepare, train

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 1

MANIFEST = "manifest.json"
CONFIG_ECHO = "config.ini"


class DataError(RuntimeError):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise DataError(f"output directory {out} is not writable: {err.strerror}") from err
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / CONFIG_ECHO).write_text(cfg.to_ini())


def class_names(n_classes: int) -> dict:
    return {c: f"{class_primitive(c)}_{c}" for c in range(n_classes)}


# ----------------------------------------------------------------------- gen


def cmd_gen(cfg: RunConfig, out: Path, count: int) -> dict:
    """Write ``count`` scenes with seeds ``seed .. seed + count - 1`` plus a manifest."""
    rows = []
    for k in range(count):
        seed = cfg.seed + k
        scene = generate_scene(cfg.scene, seed)
        part = partition_superpoints(scene, cfg.partition.cell_low, cfg.partition.cell_high)
        gt = gt_superpoint_masks(scene, part)
        name = f"scene_{seed:04d}.json"
        save_scene(scene, out / name)
        rows.append(
            {
                "file": name,
                "seed": seed,
                "n_points": scene.n_points,
                "n_instances": scene.n_instances,
                "n_superpoints_low": part.n_low,
                "n_superpoints_high": part.n_high,
                "fidelity": round(gt.fidelity, 6),
            }
        )
        print(f"{name}  instances={scene.n_instances}  superpoints={part.n_low}/{part.n_high}  fidelity={gt.fidelity:.4f}")
    manifest = {"scenes": rows}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    _echo_config(cfg, out)
    return manifest


def load_dataset(data_dir, cfg: RunConfig) -> list:
    """Scenes listed in the manifest (or every ``scene_*.json``), prepared for training."""
    data = Path(data_dir)
    if not data.is_dir():
        raise DataError(f"data directory {data} does not exist")
    if (data / MANIFEST).exists():
        files = [data / row["file"] for row in json.loads((data / MANIFEST).read_text())["scenes"]]
    else:
        files = sorted(data.glob("scene_*.json"))
    if not files:
        raise DataError(f"no scene files in {data}")
    samples = []
    for f in files:
        try:
            scene = load_scene(f)
        except (OSError, ValueError, KeyError) as err:
            raise DataError(f"cannot read scene {f}: {err}") from err
        if int(scene.class_of_instance.max(initial=-1)) >= cfg.scene.n_classes:
            raise DataError(f"{f.name} uses class ids beyond scene.n_classes={cfg.scene.n_classes}")
        samples.append(prepare(scene, cfg.partition.cell_low, cfg.partition.cell_high))
    return samples


# --------------------------------------------------------------------- train


def _save(model, cfg: RunConfig, path: Path) -> None:
    checkpoint.save(path, model.params.state(), cfg.model_dict())


def cmd_train(cfg: RunConfig, data_dir, out: Path) -> Path:
    samples = load_dataset(data_dir, cfg)
    _echo_config(cfg, out)
    model = TwinAttnModel(cfg.decoder(), cfg.substream("init"))
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()

    with open(out / "train_log.jsonl", "w") as log:

        def on_step(step, model, opt):
            if step % cfg.train.checkpoint_every == 0:
                _save(model, cfg, ckpt_dir / f"step_{step:06d}.ckpt")
                log.flush()
                print(f"step {step:6d}  lr {opt.lr_at(step):.2e}  {time.perf_counter() - t0:.0f}s", flush=True)

        t = cfg.train
        train(model, samples, cfg.loss, t.optimizer(), t.steps, t.batch_size, cfg.substream("train"), log=log, on_step=on_step)
    final = out / "final.ckpt"
    _save(model, cfg, final)
    print(f"wrote {final}")
    return final


# ---------------------------------------------------------------------- eval


def restore(cfg: RunConfig, path) -> TwinAttnModel:
    try:
        arrays = checkpoint.load(path, cfg.model_dict())
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err.strerror}") from err
    model = TwinAttnModel(cfg.decoder(), 0)
    model.params.load_state(arrays)
    return model


def cmd_eval(cfg: RunConfig, ckpt, data_dir, out: Path):
    model = restore(cfg, ckpt)
    samples = load_dataset(data_dir, cfg)
    preds = [infer(model, s.scene, s.part, cfg.eval.k) for s in samples]
    gts = [point_instances(s.scene) for s in samples]
    report = evaluate(preds, gts, cfg.scene.n_classes, cfg.eval.thresholds, class_names(cfg.scene.n_classes))
    _echo_config(cfg, out)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    print(report.to_text(), end="")
    return report


# ------------------------------------------------------------------- inspect


def parameter_table(model: TwinAttnModel) -> str:
    rows = model.parameter_report()
    width = max(len(r) for r, _ in rows) + 2
    lines = [f"{label:<{width}}{count:>10,d}" for label, count in rows]
    lines.append(f"{'Total parameters':<{width}}{sum(c for _, c in rows):>10,d}")
    return "\n".join(lines) + "\n"


def cmd_inspect(cfg: RunConfig, ckpt, out: Path | None) -> str:
    model = restore(cfg, ckpt) if ckpt else TwinAttnModel(cfg.decoder(), cfg.substream("init"))
    table = parameter_table(model)
    if out is not None:
        _echo_config(cfg, out)
        (out / "parameters.txt").write_text(table)
    print(table, end="")
    return table


# ----------------------------------------------------------------------- main


def _config_for(args, ckpt=None) -> RunConfig:
    path = args.config
    if path is None and ckpt is not None:
        # fall back to the config echoed next to (or one level above) the checkpoint
        for cand in (Path(ckpt).parent / CONFIG_ECHO, Path(ckpt).parent.parent / CONFIG_ECHO):
            if cand.exists():
                path = cand
                break
    return load(path, args.set, args.seed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] [scene] [partition] [model] [loss] [train] [eval] sections")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")

    parser = argparse.ArgumentParser(prog="twinattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=4)
    tr = sub.add_parser("train", parents=[common], help="train on a scene directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ins = sub.add_parser("inspect", parents=[common], help="per-component parameter counts")
    ins.add_argument("--checkpoint")
    ins.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            if args.count < 1:
                raise ConfigError("--count must be at least 1")
            cmd_gen(_config_for(args), _out_dir(args.out), args.count)
        elif args.command == "train":
            cmd_train(_config_for(args), args.data, _out_dir(args.out))
        elif args.command == "eval":
            cmd_eval(_config_for(args, args.checkpoint), args.checkpoint, args.data, _out_dir(args.out))
        else:
            out = _out_dir(args.out) if args.out else None
            cmd_inspect(_config_for(args, args.checkpoint), args.checkpoint, out)
    except (ConfigError, SceneConfigError) as err:
        return _fail("config", err, EXIT_USAGE)
    except (DataError, checkpoint.CheckpointError, KeyError) as err:
        return _fail("data", err, EXIT_DATA)
    except NonFiniteLossError as err:
        return _fail("numeric", err, EXIT_NUMERIC)
    except Exception as err:  # noqa: BLE001 - last-resort categorisation
        return _fail("internal", f"{type(err).__name__}: {err}", EXIT_INTERNAL)
    return 0


def _fail(category: str, err, code: int) -> int:
    print(f"twinattn: error [{category}]: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
