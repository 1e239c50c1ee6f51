"""``psg`` command line: gen, train, eval, gradcheck, experiment.

Every option can also come from a JSON config file (``--config``); explicit
flags win over the file, which wins over built-in defaults. Each run writes
the resolved configuration next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import io as pio
from .metrics import DEFAULT_KS, MetricError, evaluate, oracle_predictions
from .model import ModelConfig, RelationModel
from .numeric import DimensionError
from .scene import ConfigError, CorpusConfig, GenerationError, generate_corpus
from .tokenizer import LabelError
from .training import CompatibilityError, DivergenceError, TrainingError, TrainSchedule, train

log = logging.getLogger("psg")


class UsageError(Exception):
    """Bad flags or config values (exit 2)."""


class RunError(Exception):
    """Runtime failure with a user-facing message (exit 1)."""


# value parsers shared by flags and config-file entries


def _hw(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        return int(text[0]), int(text[1])
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _range(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        return int(text[0]), int(text[1])
    s = str(text)
    try:
        if ".." in s:
            lo, hi = s.split("..")
            return int(lo), int(hi)
        return int(s), int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got {text!r}") from None


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


# (flag, dest, type, default, help); type None marks a boolean switch
GEN_OPTS = [
    ("--scenes", "scenes", int, 200, "number of scenes"),
    ("--hw", "hw", _hw, (16, 16), "feature map size HxW"),
    ("--channels", "channels", int, 32, "feature channels"),
    ("--objects", "objects", _range, (2, 5), "objects per scene, MIN..MAX"),
    ("--classes", "classes", int, 8, "object classes"),
    ("--predicates", "predicates", int, 8, "predicate classes"),
    ("--context-mode", "context_mode", None, False, "predicate depends on a context object"),
    ("--context-classes", "context_classes", int, 2, "number of context classes"),
    ("--ambiguity", "ambiguity", float, 0.0, "rate of ambiguous relations"),
    ("--density", "density", float, 0.5, "fraction of class pairs that carry a relation"),
    ("--patches", "patches", int, 4, "patch tokens per object"),
    ("--start", "start", int, 0, "index of the first scene"),
    ("--seed", "seed", int, 0, "corpus seed"),
]
TRAIN_OPTS = [
    ("--corpus", "corpus", str, None, "training corpus (.psgc)"),
    ("--phase1", "phase1", int, 10, "hard-label epochs"),
    ("--phase2", "phase2", int, 5, "self-distillation epochs"),
    ("--lr", "lr", float, 1e-4, "learning rate"),
    ("--wd", "wd", float, 0.05, "AdamW weight decay"),
    ("--ema", "ema", float, 0.999, "teacher EMA decay"),
    ("--gamma", "gamma", float, 2.0, "focal exponent"),
    ("--balance", "balance", float, 0.25, "focal positive-class weight"),
    ("--tau", "tau", float, 0.5, "soft-label confidence floor"),
    ("--batch", "batch", int, 8, "scenes per optimizer step"),
    ("--decay", "decay", _ints, (6, 10), "epochs after which the lr drops"),
    ("--decay-factor", "decay_factor", float, 0.1, "lr multiplier per drop"),
    ("--phase2-loss", "phase2_loss", str, "focal", "loss on soft targets: focal or bce"),
    ("--soft-refresh", "soft_refresh", str, "step", "recompute soft labels each step or epoch"),
    ("--model", "model", str, "global", "global or pairwise"),
    ("--layers", "layers", int, 2, "encoder layers"),
    ("--heads", "heads", int, 4, "attention heads"),
    ("--dk", "dk", int, 16, "relation head width"),
    ("--seed", "seed", int, 0, "initialisation and shuffling seed"),
]
EVAL_OPTS = [
    ("--corpus", "corpus", str, None, "evaluation corpus (.psgc)"),
    ("--ckpt", "ckpt", str, None, "model checkpoint"),
    ("--k", "k", _ints, DEFAULT_KS, "comma-separated K values"),
    ("--oracle", "oracle", None, False, "emit ground truth as predictions"),
    ("--figures", "figures", _bool, True, "write PNG figures next to the report"),
]
GRADCHECK_OPTS = [
    ("--seed", "seed", int, 0, "seed of the tiny model"),
    ("--rtol", "rtol", float, 1e-3, "relative tolerance"),
    ("--atol", "atol", float, 1e-6, "absolute tolerance"),
    ("--corrupt", "corrupt", None, False, "perturb analytic gradients (must fail)"),
]
EXPERIMENT_OPTS = [
    ("--which", "which", str, "both", "context, ambiguity or both"),
]
COMMANDS = {"gen": GEN_OPTS, "train": TRAIN_OPTS, "eval": EVAL_OPTS,
            "gradcheck": GRADCHECK_OPTS, "experiment": EXPERIMENT_OPTS}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps unset flags out of the namespace so config values can fill them
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file (flags win)")
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS,
                        help="scene-level worker threads (default: $PSG_THREADS or 1)")
    common.add_argument("-o", "--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="psg", description="Relation prediction on synthetic panoptic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, parents=[common])
        for flag, dest, typ, _default, help_ in opts:
            if typ is None:
                p.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS, help=help_)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=help_)
    return parser


def _load_config_file(path: str, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    # either a flat mapping or one section per subcommand
    if command in data and isinstance(data[command], dict):
        data = data[command]
    elif any(k in COMMANDS for k in data):
        data = {}
    return data


def resolve(command: str, explicit: dict, env: dict | None = None) -> dict:
    """Defaults < config file < explicit flags."""
    env = os.environ if env is None else env
    opts = {dest: (typ, default) for _, dest, typ, default, _ in COMMANDS[command]}
    opts["out"] = (str, None)
    opts["threads"] = (_positive_int, None)
    resolved = {dest: default for dest, (_, default) in opts.items()}
    if "PSG_THREADS" in env:
        try:
            resolved["threads"] = _positive_int(env["PSG_THREADS"])
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"PSG_THREADS must be a positive integer, got {env['PSG_THREADS']!r}") from None
    if explicit.get("config"):
        for key, value in _load_config_file(explicit["config"], command).items():
            key = key.replace("-", "_")
            if key not in opts:
                raise UsageError(f"unknown config key for '{command}': {key}")
            typ = opts[key][0] or _bool
            try:
                resolved[key] = typ(value) if value is not None else None
            except (ValueError, TypeError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {key}: {e}") from None
    for key, value in explicit.items():
        if key in opts:
            resolved[key] = value
    if resolved["threads"] is None:
        resolved["threads"] = 1
    return resolved


def _snapshot(path: Path, command: str, resolved: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "resolved": {k: (list(v) if isinstance(v, tuple) else v)
                                            for k, v in sorted(resolved.items())}}
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _snapshot_path(out: Path) -> Path:
    return out.with_name(out.stem + ".config.json")


def _file_id(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _read_corpus(path: str | None):
    if not path:
        raise UsageError("--corpus is required")
    p = Path(path)
    if not p.is_file():
        raise RunError(f"corpus not found: {p}")
    scenes, config = pio.load_corpus(p)
    return p, scenes, config


# subcommands


def cmd_gen(r: dict) -> int:
    if not r["out"]:
        raise UsageError("gen needs -o/--out")
    (h, w), (lo, hi) = r["hw"], r["objects"]
    try:
        cfg = CorpusConfig(num_scenes=r["scenes"], height=h, width=w, channels=r["channels"],
                           min_objects=lo, max_objects=hi, num_object_classes=r["classes"],
                           num_predicates=r["predicates"], context_mode=r["context_mode"],
                           context_classes=r["context_classes"], ambiguity_rate=r["ambiguity"],
                           relation_density=r["density"], patches=r["patches"], seed=r["seed"])
    except ConfigError as e:
        raise UsageError(str(e)) from None
    if r["start"] < 0:
        raise UsageError("--start must be >= 0")
    scenes = generate_corpus(cfg, start=r["start"], threads=r["threads"])
    out = Path(r["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    pio.save_corpus(scenes, out, cfg.to_dict() | {"start": r["start"]})
    _snapshot(_snapshot_path(out), "gen", r, {"corpus_config": cfg.to_dict()})
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _model_config(r: dict, corpus_cfg: dict, scenes) -> ModelConfig:
    if not scenes:
        raise RunError("training corpus is empty")
    C = scenes[0].features.shape[2]
    classes = corpus_cfg.get("num_object_classes") or int(max(s.labels.max() for s in scenes)) + 1
    preds = corpus_cfg.get("num_predicates") or 1 + max((p for s in scenes for _, _, p in s.triplets), default=0)
    try:
        return ModelConfig(num_object_classes=classes, num_predicates=preds, D=C,
                           L=corpus_cfg.get("patches", 4), layers=r["layers"], heads=r["heads"],
                           d_k=r["dk"], kind=r["model"], init_seed=r["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(r: dict) -> int:
    if not r["out"]:
        raise UsageError("train needs -o/--out (a run directory)")
    if r["model"] not in ("global", "pairwise"):
        raise UsageError(f"--model must be global or pairwise, got {r['model']!r}")
    try:
        schedule = TrainSchedule(phase1_epochs=r["phase1"], phase2_epochs=r["phase2"], alpha=r["ema"], lr=r["lr"],
                                 weight_decay=r["wd"], lr_decay_epochs=r["decay"],
                                 lr_decay_factor=r["decay_factor"], gamma=r["gamma"], balance=r["balance"],
                                 tau=r["tau"], batch_size=r["batch"], seed=r["seed"],
                                 phase2_loss=r["phase2_loss"], soft_refresh=r["soft_refresh"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    cpath, scenes, corpus_cfg = _read_corpus(r["corpus"])
    mcfg = _model_config(r, corpus_cfg, scenes)
    model = RelationModel(mcfg)
    run = Path(r["out"])
    run.mkdir(parents=True, exist_ok=True)
    corpus_id = _file_id(cpath)
    meta = {"model": mcfg.to_dict(), "schedule": schedule.to_dict(), "corpus_id": corpus_id}
    _snapshot(run / "config.json", "train", r, {"model": mcfg.to_dict(), "schedule": schedule.to_dict(),
                                                 "corpus_id": corpus_id})
    log_path = run / "log.jsonl"
    with log_path.open("w") as fh:
        def progress(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        try:
            result = train(scenes, model, schedule, progress=progress)
        except DivergenceError as e:
            pio.save_checkpoint(run / "last_good.ckpt", e.last_good, meta | {"role": "last_good"})
            raise RunError(f"training diverged: {e}; last good parameters in {run / 'last_good.ckpt'}") from None
    pio.save_checkpoint(run / "model.ckpt", model.state_dict(), meta | {"role": "student"})
    if result.teacher is not None:
        pio.save_checkpoint(run / "teacher.ckpt", result.teacher.params, meta | {"role": "teacher"})
    try:
        from .plotting import plot_loss
        plot_loss(result.log, run / "loss.png")
    except ImportError:  # pragma: no cover - matplotlib is a declared dependency
        log.warning("matplotlib unavailable; skipping loss figure")
    last = result.log[-1] if result.log else {}
    print(f"trained {mcfg.kind} model for {schedule.total_epochs} epochs; final loss {last.get('mean_loss')!r}")
    return 0


def cmd_eval(r: dict) -> int:
    cpath, scenes, _ = _read_corpus(r["corpus"])
    Ks = r["k"]
    if not Ks or min(Ks) < 1:
        raise UsageError("--k values must be positive integers")
    if r["oracle"]:
        predictor, ckpt_id = oracle_predictions, "oracle"
    else:
        if not r["ckpt"]:
            raise UsageError("eval needs --ckpt (or --oracle)")
        kp = Path(r["ckpt"])
        if not kp.is_file():
            raise RunError(f"checkpoint not found: {kp}")
        params, meta = pio.load_checkpoint(kp)
        if "model" not in meta:
            raise RunError(f"checkpoint {kp} carries no model configuration")
        model = RelationModel(ModelConfig.from_dict(meta["model"]))
        model.load_state_dict(params)
        for s in scenes:
            model.check_scene(s)
        predictor, ckpt_id = model, _file_id(kp)
    report = evaluate(scenes, predictor, Ks, corpus_id=_file_id(cpath), checkpoint_id=ckpt_id,
                      threads=r["threads"])
    print(report.table())
    if r["out"]:
        out = Path(r["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json() + "\n")
        _snapshot(_snapshot_path(out), "eval", r)
        if r["figures"]:
            from .plotting import plot_recall
            plot_recall(report, out.with_name(out.stem + ".recall.png"))
    return 0


def cmd_gradcheck(r: dict) -> int:
    from .gradcheck import run_suite
    report = run_suite(seed=r["seed"], rtol=r["rtol"], atol=r["atol"], corrupt=r["corrupt"])
    print("block\tsize\tmax_abs_err\tmax_rel_err\tstatus")
    for b in report.blocks:
        print(f"{b.name}\t{b.size}\t{b.max_abs_err:.3e}\t{b.max_rel_err:.3e}\t{'ok' if b.passed else 'FAIL'}")
    if r["out"]:
        out = Path(r["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"passed": report.passed, "rtol": report.rtol, "atol": report.atol,
                                   "blocks": [vars(b) for b in report.blocks]}, indent=1) + "\n")
        _snapshot(_snapshot_path(out), "gradcheck", r)
    if report.passed:
        print(f"all {len(report.blocks)} blocks pass")
        return 0
    print("worst offenders:", file=sys.stderr)
    for b in report.worst(5):
        print(f"  {b.name} at {b.worst_index}: rel err {b.max_rel_err:.3e}", file=sys.stderr)
    return 1


def cmd_experiment(r: dict) -> int:
    from . import experiments as ex
    if r["which"] not in ("context", "ambiguity", "both"):
        raise UsageError("--which must be context, ambiguity or both")
    results = {}
    if r["which"] in ("context", "both"):
        c = ex.context_experiment()
        results["context"] = vars(c) | {"gap": c.gap}
        print(f"context\tglobal={c.global_acc!r}\tpairwise={c.pairwise_acc!r}\tgap={c.gap!r}")
    if r["which"] in ("ambiguity", "both"):
        a = ex.ambiguity_experiment()
        results["ambiguity"] = vars(a) | {"top2_gain": a.top2_gain, "r20_drop": a.r20_drop}
        print(f"ambiguity\ttop2_phase1={a.top2_phase1!r}\ttop2_final={a.top2_final!r}\t"
              f"gain={a.top2_gain!r}\tr20_drop={a.r20_drop!r}")
    if r["out"]:
        out = Path(r["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return 0


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "experiment": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))  # argparse exits with 2 on bad flags
    command = ns.pop("command")
    logging.basicConfig(level=logging.INFO if ns.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = resolve(command, ns)
        return HANDLERS[command](resolved)
    except UsageError as e:
        print(f"psg {command}: error: {e}", file=sys.stderr)
        return 2
    except (RunError, pio.FormatError, DimensionError, LabelError, CompatibilityError,
            TrainingError, MetricError, GenerationError, OSError) as e:
        print(f"psg {command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
