"""Command-line entry point: ``widenet {train,eval,analyze,verify}``.

Exit codes: 0 success, 1 usage or config error, 2 numerical abort,
3 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import analysis, verify
from .checkpoint import CheckpointError, load_checkpoint
from .model import ConfigError, WideNetConfig
from .train import DataConfig, NumericalAbort, ToyDataset, TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("widenet")

_TOY_MODEL = dict(
    depth=4, d_model=64, d_ff=128, heads=4, num_experts=4, top_k=2, capacity_ratio=1.2,
    balance_weight=0.01, groups=4, vocab_size=32, e_embed=16, seq_len=8, num_classes=4,
)  # fmt: skip
_TOY_TRAIN = dict(steps=2000, batch_size=32, lr=3e-3, warmup_steps=100, optimizer="adam", seed=0,
                  eval_every=500, checkpoint_every=1000)  # fmt: skip

PRESETS: dict[str, dict] = {
    "widenet-toy": {"model": _TOY_MODEL, "train": _TOY_TRAIN, "data": {}},
    "widenet-toy-sharedln": {"model": {**_TOY_MODEL, "share_ln": True}, "train": _TOY_TRAIN, "data": {}},
    "widenet-toy-nosharing": {
        "model": {**_TOY_MODEL, "share_attn": False, "share_moe": False},
        "train": _TOY_TRAIN,
        "data": {},
    },
    "vit-toy": {
        "model": {**_TOY_MODEL, "use_moe": False, "share_attn": False, "share_moe": False,
                  "head_type": "token-cls", "groups": 1},  # fmt: skip
        "train": _TOY_TRAIN,
        "data": {},
    },
    "squad1-style": {
        "model": {**_TOY_MODEL, "balance_weight": 0.0, "capacity_ratio": 2.0},
        "train": _TOY_TRAIN,
        "data": {},
    },
    "group-sweep": {"model": _TOY_MODEL, "train": _TOY_TRAIN, "data": {}, "sweep": {"groups": [1, 2, 4]}},
}

_SECTIONS = {"model": WideNetConfig, "train": TrainConfig, "data": DataConfig}


@dataclass
class RunConfig:
    """Merged model, train and data settings plus output paths, validated on construction."""

    model: WideNetConfig
    train: TrainConfig
    data: DataConfig
    data_overrides: dict = field(default_factory=dict)
    out_dir: Path | None = None
    sweep_groups: list[int] = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        unknown = sorted(set(raw) - {"model", "train", "data", "paths", "sweep", "preset"})
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        for name in ("model", "train", "data", "paths", "sweep"):
            if not isinstance(raw.get(name, {}), dict):
                raise ConfigError(f"config section {name!r} must be an object")
        model = WideNetConfig.from_dict(raw.get("model", {}))
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
        overrides = dict(raw.get("data", {}))
        data = DataConfig.from_dict(asdict(DataConfig.for_model(model, **_checked_data(overrides))))
        paths = dict(raw.get("paths", {}))
        bad = sorted(set(paths) - {"out_dir"})
        if bad:
            raise ConfigError(f"unknown paths keys: {bad}")
        sweep = dict(raw.get("sweep", {}))
        if set(sweep) - {"groups"}:
            raise ConfigError(f"unknown sweep keys: {sorted(set(sweep) - {'groups'})}")
        groups = [int(g) for g in sweep.get("groups", [])]
        for g in groups:
            WideNetConfig.from_dict({**model.to_dict(), "groups": g})
        out = Path(paths["out_dir"]) if paths.get("out_dir") else None
        return cls(model, tcfg, data, overrides, out, groups)


def _checked_data(overrides: dict) -> dict:
    known = {f.name for f in fields(DataConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown data config keys: {unknown}")
    return overrides


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (or an unambiguous bare ``key=value``) in place."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    value = _parse_value(text.strip())
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in ("model", "train", "data", "paths", "sweep"):
            raise ConfigError(f"--set {key}: unknown section {section!r}")
    else:
        owners = [s for s, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
        if not owners:
            raise ConfigError(f"--set {key}: unknown key")
        if len(owners) > 1:
            raise ConfigError(f"--set {key}: ambiguous, qualify as one of {[o + '.' + key for o in owners]}")
        section, name = owners[0], key
    raw.setdefault(section, {})[name] = value


def build_run_config(config: str | None, preset: str | None, sets: list[str], out: str | None) -> RunConfig:
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = copy.deepcopy(PRESETS[preset])
    if config is not None:
        try:
            loaded = json.loads(Path(config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config}: top level must be an object")
        base = loaded.pop("preset", None)
        if base is not None and preset is None:
            if base not in PRESETS:
                raise ConfigError(f"{config}: unknown preset {base!r}")
            raw = copy.deepcopy(PRESETS[base])
        for section, values in loaded.items():
            if isinstance(values, dict) and isinstance(raw.get(section), dict):
                raw[section] = {**raw[section], **values}
            else:
                raw[section] = values
    for s in sets:
        apply_override(raw, s)
    if out is not None:
        raw.setdefault("paths", {})["out_dir"] = out
    return RunConfig.from_dict(raw)


def _prepare_out_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror}") from None


def _run_single(run: RunConfig, out: Path | None) -> dict:
    data = ToyDataset(run.data)
    result = train(run.model, data, run.train, out_dir=out)
    last = result.history[-1] if result.history else {}
    ev = result.final_eval
    summary = {
        "steps": run.train.steps,
        "final_total": last.get("total"),
        "eval_accuracy": None if ev is None else ev.accuracy,
        "eval_loss": None if ev is None else ev.loss,
    }
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    run = build_run_config(args.config, args.preset, args.set or [], args.out)
    if run.out_dir is not None:
        _prepare_out_dir(run.out_dir)
    if not run.sweep_groups:
        _run_single(run, run.out_dir)
        return EXIT_OK
    rows = []
    for g in run.sweep_groups:
        sub = copy.copy(run)
        sub.model = WideNetConfig.from_dict({**run.model.to_dict(), "groups": g})
        out = run.out_dir / f"groups_{g}" if run.out_dir is not None else None
        print(f"# groups={g}")
        summary = _run_single(sub, out)
        rows.append({"groups": g, "eval_accuracy": summary["eval_accuracy"], "eval_loss": summary["eval_loss"]})
    table = format_sweep_table(rows)
    print(table, end="")
    if run.out_dir is not None:
        (run.out_dir / "group_sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
        (run.out_dir / "group_sweep.md").write_text(table)
    return EXIT_OK


def format_sweep_table(rows: list[dict]) -> str:
    lines = ["| G | eval accuracy | eval loss |", "|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['groups']} | {r['eval_accuracy']:.4f} | {r['eval_loss']:.6f} |")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    data_cfg = dict(ck.meta.get("data", {})) or asdict(DataConfig.for_model(ck.config))
    raw = {"data": data_cfg}
    for s in args.set or []:
        key = s.split("=", 1)[0]
        if not key.startswith("data.") and "." in key:
            raise ConfigError(f"eval only accepts data.* overrides, got {key!r}")
        apply_override(raw, s if key.startswith("data.") else "data." + s)
    dcfg = DataConfig.from_dict(raw["data"])
    if dcfg.num_classes != ck.config.num_classes:
        raise ConfigError("data num_classes does not match the checkpoint's classifier")
    result = evaluate(ck.params, ck.config, ToyDataset(dcfg), args.batch_size)
    print(f"accuracy {result.accuracy:.6f}")
    print(f"loss {result.loss:.10f}")
    for g in result.groups:
        share = " ".join(f"{s:.4f}" for s in g["expert_share"])
        print(f"group {g['group']} drop_rate {g['drop_rate']:.6f} expert_share {share}")
    if args.out:
        _prepare_out_dir(Path(args.out))
        Path(args.out, "eval.json").write_text(json.dumps(result.as_record(ck.meta.get("step", 0)), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = Path(args.out) if args.out else None
    if out is not None:
        _prepare_out_dir(out)
    if args.which == "tokens-estimate":
        t = analysis.tokens_per_expert_estimate(args.n_images, args.n_patches, args.top_k, args.experts)
        print(f"{t:g}")
        print("# assumes capacity ratio near 1 (almost no dropped tokens)")
        report = {"n_images": args.n_images, "n_patches": args.n_patches, "top_k": args.top_k,
                  "experts": args.experts, "tokens_per_expert": t}  # fmt: skip
    elif args.which == "ln-divergence":
        if not args.checkpoint:
            raise ConfigError("ln-divergence needs --checkpoint")
        ck = load_checkpoint(args.checkpoint)
        rep = analysis.divergence_report(ck.params, args.site)
        print(f"site {rep.site} y_gamma {rep.y_gamma!r} y_beta {rep.y_beta!r}")
        report = rep.to_dict()
    else:
        if not args.metrics:
            raise ConfigError("utilization needs --metrics (a routing.jsonl stream)")
        summary = analysis.expert_utilization(args.metrics)
        report = summary.to_dict()
        for g in summary.groups:
            share = " ".join(f"{s:.4f}" for s in summary.share[g][-1])
            print(f"group {g} final_share {share} mean_drop_rate {report['mean_drop_rate'][g]:.6f} "
                  f"tokens_per_expert {summary.empirical_tokens_per_expert[g]:.1f} "
                  f"estimate {summary.estimated_tokens_per_expert[g]:.1f}")  # fmt: skip
        if out is not None:
            analysis.write_series_csv(out / "utilization.csv", summary.series())
    if out is not None:
        (out / f"{args.which}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_battery(args.seed, args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widenet", description="Train and inspect WideNet models on toy data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, routing stream and checkpoints")
    p.add_argument("--config", help="JSON file with model/train/data/paths/sweep sections (optional 'preset' key)")
    p.add_argument("--preset", help=f"start from a shipped preset: {', '.join(sorted(PRESETS))}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a field, e.g. share_ln=true or train.steps=500; repeatable")  # fmt: skip
    p.add_argument("--out", help="output directory (created if missing)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="data overrides, e.g. data.n_eval=256")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", help="directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="layer-norm divergence, expert utilization or tokens-per-expert estimate")
    p.add_argument("--which", required=True, choices=["ln-divergence", "utilization", "tokens-estimate"])
    p.add_argument("--checkpoint", help="checkpoint directory (ln-divergence)")
    p.add_argument("--site", choices=["moe", "att"], default="moe", help="norm site for ln-divergence")
    p.add_argument("--metrics", help="routing.jsonl stream (utilization)")
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--n-patches", type=int, default=16)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--out", help="directory for report files")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run the built-in verification battery")
    p.add_argument("--seed", type=int, default=0, help="seed for the randomly sampled check instances")
    p.add_argument("--inject-fault", action="store_true", help="renormalize gate values (negative test)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
