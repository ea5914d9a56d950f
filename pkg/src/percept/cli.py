"""Command-line entry point.

Subcommands wire the library into reproducible workflows:

  generate   synthesize a scene dataset from a spec file
  train      train a denoiser on a manifest split for one ear
  evaluate   run left/right models over a manifest and report metrics
  analyze    correlate scores of enhanced outputs (plus optional labels)
  gradcheck  finite-difference verification of all backward passes

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical
abort.  Config files are TOML or JSON; unknown keys are rejected.  Every
command writes the fully resolved configuration into its output directory
so a run can be reproduced from the artifacts alone.  PERCEPT_SEED serves
as the seed fallback when neither flag nor config supplies one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

import numpy as np

from percept.analysis import AnalysisError, analyze, evaluate
from percept.audio import AudioError
from percept.denoiser import DenoiserConfig, DenoiserError, DenoiserModel
from percept.encoder import EncoderError, FeatureEncoder
from percept.gradcheck import SUITES, run_suite
from percept.losses import LossError
from percept.metrics import MetricError
from percept.scenes import (DIFFICULTIES, SceneError, generate_dataset, load_manifest,
                            mix_scene)
from percept.sewf import SewfError
from percept.trainer import (STRATEGIES, TrainConfig, TrainSample, TrainerError,
                             TrainingDiverged, train)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

_CONFIG_ERRORS = (SceneError, TrainerError, DenoiserError, EncoderError, LossError,
                  MetricError, AnalysisError, SewfError, AudioError, ValueError,
                  FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    if str(path).endswith(".json"):
        with open(path) as fh:
            return json.load(fh)
    with open(path, "rb") as fh:
        return _toml.load(fh)


def _reject_unknown(d: dict, known, where: str) -> None:
    unknown = set(d) - set(known)
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")


def _seed_fallback(explicit, config_seed=None):
    if explicit is not None:
        return int(explicit)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("PERCEPT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PERCEPT_SEED must be an integer, got {env!r}")
    return 0


def _write_resolved(out_dir, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- generate --------------------------------------------------------------

_GENERATE_KEYS = ("counts", "difficulty", "sample_rate_hz", "duration_s",
                  "mic_count", "with_labels", "seed")


def _cmd_generate(args) -> int:
    spec = _load_config(args.spec)
    # provenance keys so a config.resolved.json replays as-is
    _reject_unknown(spec, _GENERATE_KEYS + ("command", "workers"), args.spec)
    counts = spec.get("counts")
    if not isinstance(counts, dict) or not counts:
        raise UsageError("spec needs a [counts] table with train/val/test sizes")
    _reject_unknown(counts, ("train", "val", "test"), "counts")
    difficulty = spec.get("difficulty", "cec1_like")
    if difficulty not in DIFFICULTIES:
        raise UsageError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    seed = _seed_fallback(args.seed, spec.get("seed"))
    resolved = {"command": "generate", "counts": counts, "difficulty": difficulty,
                "sample_rate_hz": int(spec.get("sample_rate_hz", 16000)),
                "duration_s": float(spec.get("duration_s", 2.0)),
                "mic_count": int(spec.get("mic_count", 6)),
                "with_labels": bool(spec.get("with_labels", False)),
                "seed": seed, "workers": args.workers}
    manifest = generate_dataset(
        counts, difficulty, seed, args.out,
        sample_rate_hz=resolved["sample_rate_hz"], duration_s=resolved["duration_s"],
        mic_count=resolved["mic_count"], with_labels=resolved["with_labels"],
        workers=args.workers)
    _write_resolved(args.out, resolved)
    print(f"wrote {manifest}")
    return EXIT_OK


# --- train -----------------------------------------------------------------

_TRAIN_KEYS = ("manifest", "ear", "encoder", "train", "denoiser")


def _ear_samples(scenes, base, split, ear):
    out = []
    for sc in scenes:
        if sc.split != split:
            continue
        sa = mix_scene(sc, base)
        target = sa.target_l if ear == "l" else sa.target_r
        out.append(TrainSample(sc.scene_id, sa.mixture, target))
    return out


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _reject_unknown(cfg, _TRAIN_KEYS + ("command",), args.config)
    if "manifest" not in cfg:
        raise UsageError("config must name a manifest")
    train_cfg_dict = dict(cfg.get("train", {}))
    if args.strategy is not None:
        train_cfg_dict["strategy"] = args.strategy
    if "strategy" not in train_cfg_dict:
        raise UsageError(f"no strategy given; choose from {STRATEGIES}")
    if "seed" not in train_cfg_dict:
        train_cfg_dict["seed"] = _seed_fallback(None)
    tcfg = TrainConfig.from_dict(train_cfg_dict)
    dcfg = DenoiserConfig.from_dict(dict(cfg.get("denoiser", {})))
    ear = args.ear or cfg.get("ear", "l")
    if ear not in ("l", "r"):
        raise UsageError(f"ear must be 'l' or 'r', got {ear!r}")

    manifest_path = cfg["manifest"]
    if not os.path.isabs(manifest_path):
        manifest_path = os.path.join(os.path.dirname(os.path.abspath(args.config)),
                                     manifest_path)
    scenes, base = load_manifest(manifest_path)

    encoder = None
    encoder_path = cfg.get("encoder")
    if tcfg.strategy in ("wlm_finetune", "joint_scheduled"):
        if not encoder_path:
            raise UsageError(f"strategy {tcfg.strategy} needs an encoder weights file")
    if encoder_path:
        if not os.path.isabs(encoder_path):
            encoder_path = os.path.join(os.path.dirname(os.path.abspath(args.config)),
                                        encoder_path)
        encoder = FeatureEncoder.load(encoder_path)

    train_samples = _ear_samples(scenes, base, "train", ear)
    val_samples = _ear_samples(scenes, base, "val", ear)
    if not train_samples:
        raise UsageError(f"manifest {manifest_path} has no train split")

    model = None
    if args.resume is None:
        model = DenoiserModel(dcfg, seed=tcfg.seed)
    resolved = {"command": "train", "manifest": manifest_path, "ear": ear,
                "encoder": encoder_path, "train": tcfg.to_dict(),
                "denoiser": dcfg.to_dict()}
    _write_resolved(args.out, resolved)

    def log(msg):
        print(msg)

    result = train(model, train_samples, val_samples, tcfg, encoder=encoder,
                   out_dir=args.out, resume_from=args.resume, log=log)
    last = result.history[-1] if result.history else {}
    print(f"finished: {len(result.history)} epoch rows, last train loss "
          f"{last.get('train_loss', float('nan')):.4f}, "
          f"last val stoi {last.get('val_stoi', float('nan')):.4f}")
    return EXIT_OK


# --- evaluate --------------------------------------------------------------


def _cmd_evaluate(args) -> int:
    model_l = DenoiserModel.load(args.model_l)
    model_r = DenoiserModel.load(args.model_r)
    report = evaluate(args.manifest, model_l, model_r, out_dir=args.out,
                      split=args.split, workers=args.workers)
    _write_resolved(args.out, {"command": "evaluate", "manifest": args.manifest,
                               "model_l": args.model_l, "model_r": args.model_r,
                               "split": args.split, "workers": args.workers})
    for name, value in report.means.items():
        print(f"{name:24s} {value: .4f}")
    return EXIT_OK


# --- analyze ---------------------------------------------------------------


def _cmd_analyze(args) -> int:
    encoder = FeatureEncoder.load(args.encoder)
    report = analyze(args.manifest, args.enhanced, encoder, out_dir=args.out,
                     workers=args.workers)
    _write_resolved(args.out, {"command": "analyze", "manifest": args.manifest,
                               "enhanced": args.enhanced, "encoder": args.encoder,
                               "workers": args.workers})
    print(f"{report.n_samples} samples, scores: {', '.join(report.score_names)}")
    for a, b in report.undefined_pairs:
        print(f"undefined (zero variance): {a} vs {b}")
    return EXIT_OK


# --- gradcheck -------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    results = run_suite(args.module)
    failed = False
    for res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:24s} max rel err {res.max_rel_err:.3e} "
              f"({res.n_seeds} seeds)  {status}")
        failed = failed or not res.passed
    return EXIT_CHECK_FAILED if failed else EXIT_OK


# --- argument parsing ------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="percept",
                                description="speech enhancement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scene dataset")
    g.add_argument("--spec", required=True, help="TOML/JSON dataset spec")
    g.add_argument("--seed", type=int, default=None,
                   help="overrides spec seed and PERCEPT_SEED")
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train a denoiser for one ear")
    t.add_argument("--config", required=True, help="TOML/JSON run config")
    t.add_argument("--strategy", choices=STRATEGIES, default=None)
    t.add_argument("--ear", choices=("l", "r"), default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint prefix to resume from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("evaluate", help="score left/right models over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--model-l", required=True)
    e.add_argument("--model-r", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=_cmd_evaluate)

    a = sub.add_parser("analyze", help="correlate scores over enhanced outputs")
    a.add_argument("--manifest", required=True)
    a.add_argument("--enhanced", required=True, help="dir of <scene_id>_<l|r>.wav")
    a.add_argument("--encoder", required=True, help="encoder weights (SEWF)")
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(fn=_cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--module", choices=("all",) + tuple(SUITES), default="all")
    c.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage, 0 on --help
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
