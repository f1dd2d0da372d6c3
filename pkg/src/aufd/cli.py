"""Command-line entry points with run manifests.

Every command resolves a ``ModelConfig`` (preset, then ``--config`` file, then
flag overrides), refuses to write into a non-empty output directory unless
``--force`` is given, and finishes by writing ``manifest.json`` next to its
artifacts.  Failures print exactly one ``error:`` line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import AU_SUBSETS, MODES, PRESETS, ConfigError, ModelConfig, config_json, load_config
from .formats import FormatError, write_aumap
from .fusion import extract_attention_maps, finetune, from_pretext, load_fused, predict, save_fused
from .evaluation import (
    ablation_run,
    format_table,
    metric_report,
    reports_json,
    robustness_sweep,
    roc_auc,
    UndefinedMetricError,
)
from .numerics import NonFiniteError, ShapeError
from .pretext import load_pretext, save_pretext, train_pretext
from .video import (
    EXTREME_PARAMS,
    ClipGeometry,
    PerturbationError,
    PerturbationSpec,
    make_corpus,
    read_corpus,
    write_corpus,
)

MANIFEST = "manifest.json"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE, kind: str = "runtime"):
        super().__init__(message)
        self.code = code
        self.kind = kind


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    code_version: str = ""
    wall_time: float = 0.0
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def read(cls, path) -> RunManifest:
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise CLIError(f"cannot read manifest {path}: {exc}", EXIT_DATA, "manifest") from None


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tree_digests(path) -> dict[str, str]:
    p = Path(path)
    files = [p] if p.is_file() else sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST)
    return {str(f): file_digest(f) for f in files}


def code_version() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# -- helpers ----------------------------------------------------------------------


def _need(args, name: str) -> Path:
    value = getattr(args, name, None)
    if value is None:
        raise CLIError(f"--{name.replace('_', '-')} is required for {args.command}", EXIT_USAGE, "usage")
    p = Path(value)
    if not p.exists():
        raise CLIError(f"{p} does not exist", EXIT_DATA, "missing-input")
    return p


def _corpus(path: Path):
    clips = read_corpus(path)
    if not clips:
        raise CLIError(f"{path} contains no .clip files", EXIT_DATA, "empty-corpus")
    return clips


def _check_geometry(clips, cfg: ModelConfig, path) -> None:
    want = (cfg.frames, 3, cfg.height, cfg.width)
    if clips[0].stack.frames.shape != want:
        raise CLIError(f"clips in {path} have shape {clips[0].stack.frames.shape}, config expects {want}",
                       EXIT_CONFIG, "config")


def _perturb_grid(args, seed: int) -> list[PerturbationSpec]:
    if args.perturb:
        return [PerturbationSpec.parse(text, seed) for text in args.perturb]
    return [PerturbationSpec(fam, p, seed) for fam, ps in EXTREME_PARAMS.items() for p in ps]


# -- commands ---------------------------------------------------------------------
# Each handler gets (args, cfg, out_dir) and returns (input paths, metric summary).


def cmd_validate_config(args, cfg: ModelConfig, out: Path | None):
    print(config_json(cfg))
    if out is not None:
        (out / "config.txt").write_text(cfg.to_text())
    return [], cfg.summary()


def cmd_gen_data(args, cfg: ModelConfig, out: Path):
    geometry = ClipGeometry.from_config(cfg)
    clips = make_corpus(args.n, cfg.seed, geometry, args.fake_fraction)
    write_corpus(clips, out)
    n_fake = sum(c.label for c in clips)
    return [], {"clips": len(clips), "fake": n_fake, "real": len(clips) - n_fake}


def _pretrain(task: str, ckpt_name: str):
    def run(args, cfg: ModelConfig, out: Path):
        data = _need(args, "data")
        clips = _corpus(data)
        _check_geometry(clips, cfg, data)
        model, log = train_pretext(clips, cfg, task, max_steps=args.steps)
        save_pretext(model, out / ckpt_name)
        log.write_csv(out / "loss.csv")
        metrics = {"steps": model.step}
        if log.losses:
            metrics.update(initial_loss=log.losses[0], final_loss=log.losses[-1])
        return [data], metrics

    return run


def cmd_finetune(args, cfg: ModelConfig, out: Path):
    data = _need(args, "data")
    clips = _corpus(data)
    _check_geometry(clips, cfg, data)
    inputs = [data]
    vfe = aue = None
    if cfg.mode in ("fused", "vfe_only"):
        inputs.append(_need(args, "vfe"))
        vfe = load_pretext(args.vfe)
    if cfg.mode in ("fused", "aue_only"):
        inputs.append(_need(args, "aue"))
        aue = load_pretext(args.aue)
    model = from_pretext(cfg, vfe, aue, cfg.mode)
    epoch_losses = []
    model, _ = finetune(clips, model, cfg, on_epoch=lambda e, loss: epoch_losses.append((e, loss)))
    save_fused(model, out / "fused.ckpt")
    with open(out / "curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{e},{loss!r}\n" for e, loss in epoch_losses)
    labels = [c.label for c in clips]
    metrics = {"epochs": cfg.finetune_epochs, "final_loss": epoch_losses[-1][1] if epoch_losses else None}
    if 0 < sum(labels) < len(labels):
        metrics["train_auc"] = roc_auc(predict(model, clips), labels)
    return inputs, metrics


def _load_model(args):
    path = _need(args, "model")
    return path, load_fused(path)


def cmd_evaluate(args, cfg: ModelConfig, out: Path):
    mpath, model = _load_model(args)
    data = _need(args, "data")
    clips = _corpus(data)
    _check_geometry(clips, model.cfg, data)
    scores = predict(model, clips)
    rep = metric_report(scores, [c.label for c in clips], Path(data).name, args.threshold,
                        model.cfg.seed, model.cfg.digest())
    (out / "metrics.json").write_text(reports_json([rep]))
    (out / "table.txt").write_text(format_table([rep]) + "\n")
    np.savetxt(out / "scores.txt", scores, fmt="%.9g")
    return [mpath, data], rep.to_dict()


def cmd_perturb_eval(args, cfg: ModelConfig, out: Path):
    mpath, model = _load_model(args)
    data = _need(args, "data")
    clips = _corpus(data)
    _check_geometry(clips, model.cfg, data)
    reports = robustness_sweep(model, clips, _perturb_grid(args, cfg.seed), perturb_real=not args.clean_real,
                               threshold=args.threshold)
    (out / "robustness.json").write_text(reports_json(reports))
    (out / "table.txt").write_text(format_table(reports, "Robustness") + "\n")
    return [mpath, data], {r.condition: r.auc for r in reports}


def cmd_ablate(args, cfg: ModelConfig, out: Path):
    data, test = _need(args, "data"), _need(args, "test")
    train_clips, test_clips = _corpus(data), _corpus(test)
    _check_geometry(train_clips, cfg, data)
    modes = args.modes.split(",") if args.modes else list(MODES)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CLIError(f"unknown mode(s) {', '.join(bad)}; expected {', '.join(MODES)}", EXIT_USAGE, "usage")
    inputs = [data, test]
    vfe = aue = None
    if any(m in ("fused", "vfe_only") for m in modes):
        inputs.append(_need(args, "vfe"))
        vfe = load_pretext(args.vfe)
    if any(m in ("fused", "aue_only") for m in modes):
        inputs.append(_need(args, "aue"))
        aue = load_pretext(args.aue)
    reports = ablation_run(modes, train_clips, test_clips, cfg, vfe, aue)
    rows = [reports[m] for m in modes]
    (out / "ablation.json").write_text(reports_json(rows))
    (out / "table.txt").write_text(format_table(rows, "Effect of encoders") + "\n")
    return inputs, {m: r.auc for m, r in reports.items()}


def cmd_attn_dump(args, cfg: ModelConfig, out: Path):
    mpath, model = _load_model(args)
    data = _need(args, "data")
    clips = _corpus(data)[: args.limit]
    _check_geometry(clips, model.cfg, data)
    inside, outside = [], []
    for i, clip in enumerate(clips):
        heat = extract_attention_maps(clip.stack.frames, model)
        write_aumap(out / f"clip_{i:05d}.aumap", heat[:, None], content="attention", label=clip.label)
        if clip.region is not None:
            y0, y1, x0, x1 = clip.region
            mask = np.zeros(heat.shape[1:], dtype=bool)
            mask[y0:y1, x0:x1] = True
            inside.append(float(heat[:, mask].mean()))
            outside.append(float(heat[:, ~mask].mean()))
    metrics = {"clips": len(clips)}
    if inside:
        metrics.update(heat_inside=float(np.mean(inside)), heat_outside=float(np.mean(outside)))
    return [mpath, data], metrics


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "pretrain-frames": _pretrain("frame_recon", "vfe.ckpt"),
    "pretrain-au": _pretrain("au_detect", "aue.ckpt"),
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "perturb-eval": cmd_perturb_eval,
    "ablate": cmd_ablate,
    "attn-dump": cmd_attn_dump,
    "validate-config": cmd_validate_config,
}


# -- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one machine-parseable line instead of argparse's usage dump
        raise CLIError(message, EXIT_USAGE, "usage")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aufd", description="AU-guided deepfake detection at desk scale.")
    p.add_argument("--version", action="version", version=f"aufd {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="key=value config file")
        c.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", help="output directory")
        c.add_argument("--force", action="store_true", help="replace an existing output directory")
        c.add_argument("--mode", choices=MODES)
        c.add_argument("--au-subset", choices=AU_SUBSETS)
        c.add_argument("--freeze-aue", action="store_true")
        c.add_argument("--perturb", action="append", metavar="FAMILY=PARAM")
        c.add_argument("--data", help="corpus directory")
        c.add_argument("--test", help="held-out corpus directory")
        c.add_argument("--vfe", help="frame_recon checkpoint")
        c.add_argument("--aue", help="au_detect checkpoint")
        c.add_argument("--model", help="fused checkpoint")
        c.add_argument("--n", type=int, default=100, help="clips to generate")
        c.add_argument("--fake-fraction", type=float, default=0.5)
        c.add_argument("--steps", type=int, help="cap on pretext optimizer steps")
        c.add_argument("--modes", help="comma-separated ablation modes")
        c.add_argument("--limit", type=int, default=20, help="clips for attn-dump")
        c.add_argument("--threshold", type=float, default=0.5)
        c.add_argument("--clean-real", action="store_true", help="leave real clips unperturbed")
    return p


def resolve_config(args) -> ModelConfig:
    cfg = PRESETS[args.preset]
    if args.config:
        try:
            cfg = load_config(args.config, cfg)
        except OSError as exc:
            raise CLIError(f"cannot read config {args.config}: {exc.strerror}", EXIT_DATA, "missing-input") from None
    changes = {"seed": args.seed, "mode": args.mode, "au_subset": args.au_subset}
    if args.freeze_aue:
        changes["freeze_aue"] = True
    return cfg.replace(**{k: v for k, v in changes.items() if v is not None}).validate()


def prepare_out(out, force: bool, required: bool) -> Path | None:
    if out is None:
        if required:
            raise CLIError("--out is required", EXIT_USAGE, "usage")
        return None
    out = Path(out)
    if out.exists() and (out.is_file() or any(out.iterdir())):
        if not force:
            raise CLIError(f"{out} exists and is not empty; pass --force to replace it", EXIT_DATA, "exists")
        if out.is_file():
            out.unlink()
        else:
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def execute(args, cfg: ModelConfig) -> RunManifest:
    """Run one parsed command and write its manifest."""
    out = prepare_out(args.out, args.force, required=args.command != "validate-config")
    start = time.perf_counter()
    inputs, metrics = COMMANDS[args.command](args, cfg, out)
    manifest = RunManifest(
        command=args.command,
        args={k: v for k, v in vars(args).items()},
        config=cfg.to_dict(),
        seed=cfg.seed,
        inputs={k: v for p in inputs for k, v in _tree_digests(p).items()},
        outputs=_tree_digests(out) if out is not None else {},
        code_version=code_version(),
        wall_time=time.perf_counter() - start,
        metrics=metrics,
    )
    if out is not None:
        (out / MANIFEST).write_text(manifest.to_json())
    return manifest


def replay(manifest_path, out, force: bool = False) -> RunManifest:
    """Re-run a recorded command with its recorded config into ``out``."""
    m = RunManifest.read(manifest_path)
    args = argparse.Namespace(**m.args)
    args.out, args.force = str(out), force
    try:
        cfg = ModelConfig(**m.config).validate()
    except TypeError as exc:
        raise CLIError(f"manifest config does not match this version: {exc}", EXIT_CONFIG, "config") from None
    return execute(args, cfg)


def _error_line(kind: str, message: str, command: str | None) -> str:
    msg = " ".join(str(message).split())
    return f"error: kind={kind} command={command or '-'} message={json.dumps(msg)}"


def _replay_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aufd replay", description="Re-run a command from its manifest.json.")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if a in COMMANDS or a == "replay"), None)
    try:
        if argv[:1] == ["replay"]:
            r = _replay_parser().parse_args(argv[1:])
            replay(r.manifest, r.out, r.force)
            return EXIT_OK
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        execute(args, cfg)
    except CLIError as exc:
        print(_error_line(exc.kind, exc, command), file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(_error_line("config", exc, command), file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, PerturbationError, ShapeError, UndefinedMetricError) as exc:
        print(_error_line(type(exc).__name__, exc, command), file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, OSError) as exc:
        print(_error_line(type(exc).__name__, exc, command), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
