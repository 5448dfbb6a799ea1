"""Command-line entry point: generate / train / eval / report / ablate.

Configuration is a flat key=value text file merged with --set overrides
and a few dedicated flags; every output file embeds the fully resolved
configuration and the tool version. The GROUPACT_VERBOSE environment
variable ("0" silences per-epoch progress lines) controls verbosity only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Scenario, dataset_summary, generate, load_clips,
                   per_class_delta, save_clips)
from .errors import ConfigError, GroupActError
from .pipeline import (ModelConfig, TrainConfig, TwoBranchModel, build_model,
                       evaluate, load_checkpoint, metrics_csv, parameter_report,
                       phase1_train, phase2_train, save_checkpoint)

# flat config keys -> (section, dataclass field, parser)
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {s!r}") from None


def _parse_names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _parse_opt_int(s: str):
    return None if s.strip().lower() in ("none", "") else int(s)


CONFIG_KEYS = {
    "actions": ("scenario", "actions", _parse_names),
    "key_actions": ("scenario", "key_actions", _parse_names),
    "actors_per_clip": ("scenario", "actors_per_clip", int),
    "frames": ("scenario", "frames", int),
    "feature_dim": ("scenario", "feature_dim", int),
    "noise_sigma": ("scenario", "noise_sigma", float),
    "data_seed": ("scenario", "seed", int),
    "train_clips": ("scenario", "train_clips", int),
    "test_clips": ("scenario", "test_clips", int),
    "text_dim": ("model", "text_dim", int),
    "encoder_layers": ("model", "encoder_layers", int),
    "encoder_heads": ("model", "encoder_heads", int),
    "ffn_width": ("model", "ffn_width", _parse_opt_int),
    "relation_kind": ("model", "relation_kind", str),
    "dual_path": ("model", "dual_path", _parse_bool),
    "teacher_seed": ("model", "teacher_seed", int),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "warmup_epochs": ("train", "warmup_epochs", int),
    "alpha": ("train", "alpha", float),
    "r": ("train", "r", int),
    "lambda_kd": ("train", "lambda_kd", float),
    "seed": ("train", "seed", int),
    "distill_scope": ("train", "distill_scope", str),
}


@dataclass
class RunConfig:
    scenario: Scenario
    model: ModelConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(),
                "model": self.model.to_dict(),
                "train": self.train.to_dict()}


def parse_config_file(path) -> dict[str, str]:
    """Read flat key=value lines; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_config(config_path=None, overrides=None) -> RunConfig:
    """Defaults, then config file, then --set overrides."""
    flat: dict[str, str] = {}
    if config_path:
        flat.update(parse_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flat[key.strip()] = value.strip()
    sections: dict[str, dict] = {"scenario": {}, "model": {}, "train": {}}
    for key, value in flat.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} "
                              f"(known: {', '.join(sorted(CONFIG_KEYS))})")
        section, field, conv = CONFIG_KEYS[key]
        sections[section][field] = conv(value)
    return RunConfig(scenario=Scenario(**sections["scenario"]),
                     model=ModelConfig(**sections["model"]),
                     train=TrainConfig(**sections["train"]))


def _verbose() -> bool:
    return os.environ.get("GROUPACT_VERBOSE", "1") != "0"


def _progress(row: dict) -> None:
    if _verbose():
        parts = [f"epoch {row['epoch']:3d} phase {row['phase']}"]
        parts.append(f"loss={row['loss_total']:.4f}")
        if row["loss_kd"] != "":
            parts.append(f"kd={row['loss_kd']:.4f}")
        parts.append(f"mca={row['mca']:.4f} mpca={row['mpca']:.4f}")
        print("  ".join(parts))


# -- commands -------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    scenario = cfg.scenario
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if args.noise is not None:
        scenario = replace(scenario, noise_sigma=args.noise)
    cfg = RunConfig(scenario, cfg.model, cfg.train)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate(scenario)
    extra = {"config": cfg.to_dict(), "tool_version": __version__}
    save_clips(out_dir / "train.jsonl", train, scenario, extra,
               embed_features=not args.regen_only)
    save_clips(out_dir / "test.jsonl", test, scenario, extra,
               embed_features=not args.regen_only)
    summary = {"train": dataset_summary(train, scenario),
               "test": dataset_summary(test, scenario)}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _load_split(data_dir) -> tuple[list, list, Scenario]:
    data_dir = Path(data_dir)
    train, scenario, _ = load_clips(data_dir / "train.jsonl")
    test, scenario2, _ = load_clips(data_dir / "test.jsonl")
    if scenario2 != scenario:
        raise ConfigError("train/test datasets were generated from different scenarios")
    return train, test, scenario


def rebuild_text_branch(model: TwoBranchModel, model_cfg: ModelConfig,
                        train_cfg: TrainConfig) -> None:
    """Re-initialize the text branch in place for new text-side settings.

    The image branch (relation base weights and classifiers) is kept;
    adapters, the feature-to-text adapter, text classifier, temperature
    and teacher are rebuilt.
    """
    from .distill import Temperature
    from .image2text import Image2TextAdapter
    from .layers import Linear
    from .teacher import TextTeacher

    rng = np.random.default_rng([train_cfg.seed, 3, 1])
    m = model.scenario.feature_dim
    model.relation.attach_adapters(rng, train_cfg.r, train_cfg.alpha)
    model.image2text = Image2TextAdapter(rng, m, model_cfg.text_dim,
                                         layers=model_cfg.encoder_layers,
                                         heads=model_cfg.encoder_heads,
                                         ffn_width=model_cfg.ffn_width)
    model.text_activity_cls = Linear(rng, m, model.n_activities, zero_init=True)
    model.tau = Temperature(0.07)
    model.teacher = TextTeacher(model.scenario.actions, dim=model_cfg.text_dim,
                                seed=model_cfg.teacher_seed)
    model.model_cfg = model_cfg
    model.train_cfg = train_cfg
    model.trained_phases.discard(2)
    model.set_phase(None)


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    train_clips, test_clips, scenario = _load_split(args.data)
    if args.phase == 1:
        run_cfg = RunConfig(scenario, cfg.model, cfg.train)
        model = build_model(scenario, cfg.model, cfg.train)
        log = phase1_train(model, train_clips, test_clips, log_cb=_progress)
    else:
        if not args.ckpt_in:
            raise ConfigError("phase 2 requires --ckpt-in with a phase-1 checkpoint")
        model = load_checkpoint(args.ckpt_in)
        if model.scenario != scenario:
            raise ConfigError("checkpoint scenario does not match the dataset")
        explicit = {k.split("=", 1)[0].strip() for k in (args.set or [])}
        if args.config or explicit:
            # text-side settings may change between phases; image branch is kept
            rebuild_text_branch(model, cfg.model, cfg.train)
        run_cfg = RunConfig(scenario, model.model_cfg, model.train_cfg)
        log = phase2_train(model, train_clips, test_clips, log_cb=_progress)
    save_checkpoint(model, args.ckpt_out)
    metrics_path = args.metrics or (str(args.ckpt_out) + f".phase{args.phase}.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(metrics_csv(log, {**run_cfg.to_dict(), "tool_version": __version__}))
    report = parameter_report(model)
    if _verbose():
        print(f"phase-{args.phase} done: checkpoint -> {args.ckpt_out}, "
              f"metrics -> {metrics_path}")
    print(f"phase-2 trainable parameters: {report['phase2_trainable_total']}")
    return 0


def confusion_svg(matrix: np.ndarray, class_names) -> str:
    """Plain SVG heatmap of a confusion matrix (no plotting dependency)."""
    k = matrix.shape[0]
    cell = 36
    margin = 110
    size = margin + k * cell + 20
    peak = max(1, int(matrix.max()))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'font-family="monospace" font-size="11">']
    parts.append(f'<text x="{margin}" y="20">confusion matrix (rows: true, cols: predicted)</text>')
    for i in range(k):
        y = margin + i * cell
        parts.append(f'<text x="4" y="{y + cell * 0.65}">{class_names[i]}</text>')
        x = margin + i * cell
        parts.append(f'<text x="{x + 4}" y="{margin - 8}" transform="rotate(-60 {x + 4} {margin - 8})">'
                     f'{class_names[i]}</text>')
        for j in range(k):
            v = int(matrix[i, j])
            x = margin + j * cell
            alpha = v / peak
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb(30,90,180)" fill-opacity="{alpha:.3f}" '
                         f'stroke="#999" stroke-width="0.5"/>')
            if v:
                color = "#fff" if alpha > 0.55 else "#000"
                parts.append(f'<text x="{x + cell / 2}" y="{y + cell * 0.65}" '
                             f'text-anchor="middle" fill="{color}">{v}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "test.jsonl"
    clips, scenario, _ = load_clips(data_path)
    if scenario.activities != model.scenario.activities or \
            scenario.actions != model.scenario.actions:
        raise ConfigError("label spaces of checkpoint and dataset disagree")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = evaluate(model, clips)
    fused_conf = results["fused"]["confusion"]
    payload = {
        "tool_version": __version__,
        "config": {"scenario": model.scenario.to_dict(),
                   "model": model.model_cfg.to_dict(),
                   "train": model.train_cfg.to_dict()},
        "branches": {b: {"mca": results[b]["mca"], "mpca": results[b]["mpca"]}
                     for b in results},
        "confusion_fused": fused_conf.tolist(),
    }
    names = model.scenario.activities
    if args.baseline:
        base_model = load_checkpoint(args.baseline)
        base_results = evaluate(base_model, clips)
        delta = per_class_delta(fused_conf, base_results["fused"]["confusion"])
        payload["per_class_delta_vs_baseline"] = delta.tolist()
        with open(out_dir / "delta.csv", "w", encoding="utf-8") as fh:
            fh.write("class,delta_correct\n")
            for name, d in zip(names, delta):
                fh.write(f"{name},{int(d)}\n")
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "confusion.csv", "w", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(names) + "\n")
        for name, row in zip(names, fused_conf):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    if args.svg:
        with open(out_dir / "confusion.svg", "w", encoding="utf-8") as fh:
            fh.write(confusion_svg(fused_conf, names))
    if args.dump_maps:
        _, _, image_maps = model.forward_image(clips[0])
        _, _, text_maps = model.forward_text(clips[0])
        maps = {f"image/{k}": v.tolist() for k, v in image_maps.items()}
        maps.update({f"text/{k}": v.tolist() for k, v in text_maps.items()})
        with open(out_dir / "maps.json", "w", encoding="utf-8") as fh:
            json.dump(maps, fh, sort_keys=True)
            fh.write("\n")
    print(json.dumps(payload["branches"], indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    model = load_checkpoint(args.ckpt)
    report = parameter_report(model)
    width = max(len(r["module"]) for r in report["rows"])
    print(f"{'module':<{width}}  {'total':>10}  {'trainable(phase2)':>18}")
    for row in report["rows"]:
        print(f"{row['module']:<{width}}  {row['total']:>10}  {row['trainable_phase2']:>18}")
    print(f"adapter formula: r*(M_in+M_out) summed = {report['adapter_formula']}")
    print(f"phase-2 trainable total: {report['phase2_trainable_total']}")
    return 0


SWEEP_KEYS = {"r": int, "alpha": float, "layers": int, "lambda_kd": float}


def cmd_ablate(args) -> int:
    if args.sweep not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep key {args.sweep!r} "
                          f"(choose from {', '.join(SWEEP_KEYS)})")
    values = [SWEEP_KEYS[args.sweep](v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must name at least one value")
    cfg = resolve_config(args.config, args.set)
    train_clips, test_clips, _ = _load_split(args.data)
    rows = []
    for value in values:
        model = load_checkpoint(args.ckpt_in)
        model_cfg, train_cfg = cfg.model, cfg.train
        if args.sweep == "layers":
            model_cfg = replace(model_cfg, encoder_layers=value)
        else:
            train_cfg = replace(train_cfg, **{args.sweep: value})
        rebuild_text_branch(model, model_cfg, train_cfg)
        phase2_train(model, train_clips, test_clips, log_cb=_progress)
        results = evaluate(model, test_clips, branches=("fused",))
        report = parameter_report(model)
        rows.append({"sweep": args.sweep, "value": value,
                     "adapter_trainable": report["adapter_trainable"],
                     "phase2_trainable": report["phase2_trainable_total"],
                     "mca": results["fused"]["mca"]})
    header = {"config": cfg.to_dict(), "tool_version": __version__}
    lines = [f"# groupact {__version__} config={json.dumps(header['config'], sort_keys=True)}",
             "sweep,value,adapter_trainable,phase2_trainable,mca"]
    for row in rows:
        lines.append(f"{row['sweep']},{row['value']},{row['adapter_trainable']},"
                     f"{row['phase2_trainable']},{row['mca']!r}")
    text = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupact",
                                description="Two-branch group activity recognition toolkit.")
    p.add_argument("--version", action="version", version=f"groupact {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    g = sub.add_parser("generate", parents=[common],
                       help="write synthetic train/test dataset files")
    g.add_argument("out_dir")
    g.add_argument("--seed", type=int, help="dataset seed override")
    g.add_argument("--noise", type=float, help="feature noise sigma override")
    g.add_argument("--regen-only", action="store_true",
                   help="store regeneration seeds instead of feature payloads")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="run one training phase")
    t.add_argument("--phase", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True, help="directory with train.jsonl/test.jsonl")
    t.add_argument("--ckpt-in", help="phase-1 checkpoint (required for phase 2)")
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--metrics", help="metrics CSV path (default: <ckpt>.phaseN.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset file or directory")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--baseline", help="second checkpoint for per-class deltas")
    e.add_argument("--svg", action="store_true", help="also write an SVG heatmap")
    e.add_argument("--dump-maps", action="store_true",
                   help="dump relation attention/adjacency maps for the first clip")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print the parameter ledger of a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", parents=[common],
                       help="sweep one text-branch knob over values")
    a.add_argument("--sweep", required=True, choices=sorted(SWEEP_KEYS))
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--data", required=True)
    a.add_argument("--ckpt-in", required=True, help="shared phase-1 checkpoint")
    a.add_argument("--out", required=True, help="sweep CSV path")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except GroupActError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
