"""``gdpnet`` command line: gen-data, train, infer, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import (DataError, Mesh, SplitError, SynthConfig, generate_synthetic_dataset, load_dataset,
                   load_feature_file, load_mesh, write_dataset, write_mesh)
from .evaluate import conditioning_subject, evaluate, parse_noise_grid, per_vertex_error, predict_windows, write_per_vertex_csv, write_report
from .gradcheck import GRADCHECK_MODEL, GradcheckConfig, run_gradcheck
from .model import ModelConfig
from .numeric import ShapeError
from .train import (DivergenceError, TrainConfig, format_ablation, ablation_table, load_model, model_config_for,
                    run_ablation, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SECTIONS = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig, "gradcheck": GradcheckConfig}

log = logging.getLogger("gdpnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config: JSON file merged with dotted --set overrides


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _section_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_config(path=None, overrides=()) -> dict:
    """Nested ``{section: {field: value}}`` from a JSON file plus ``key.sub=value`` overrides."""
    cfg: dict = {name: {} for name in SECTIONS}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be an object")
        for name, body in raw.items():
            if name not in SECTIONS:
                raise UsageError(f"unknown config section {name!r}; expected one of {sorted(SECTIONS)}")
            for key, value in body.items():
                _set(cfg, f"{name}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} must look like section.key=value")
        _set(cfg, key.strip(), _parse_value(value))
    return cfg


def _set(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) < 2 or parts[0] not in SECTIONS:
        raise UsageError(f"unknown config key {dotted!r}; keys look like section.field with section in {sorted(SECTIONS)}")
    section, key = parts[0], parts[1]
    if key not in _section_keys(SECTIONS[section]):
        raise UsageError(f"unknown config key {dotted!r}")
    if section == "gradcheck" and key == "model":
        if len(parts) == 2:
            if not isinstance(value, dict):
                raise UsageError("gradcheck.model must be an object")
            for k, v in value.items():
                _set(cfg, f"gradcheck.model.{k}", v)
            return
        if len(parts) != 3 or parts[2] not in _section_keys(ModelConfig):
            raise UsageError(f"unknown config key {dotted!r}")
        cfg[section].setdefault("model", {})[parts[2]] = value
        return
    if len(parts) != 2:
        raise UsageError(f"unknown config key {dotted!r}")
    cfg[section][key] = value


def build(cfg: dict, section: str):
    body = dict(cfg.get(section, {}))
    if section == "gradcheck":
        body["model"] = replace(GRADCHECK_MODEL, **body.get("model", {}))
    try:
        return SECTIONS[section](**body)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {section} config: {exc}") from None


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    return obj


def echo_config(effective: dict, out_dir=None) -> None:
    text = json.dumps({k: _jsonable(v) for k, v in effective.items()}, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(text, encoding="utf-8")


def _check_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args, cfg) -> int:
    if args.subjects is not None:
        cfg["data"]["subjects"] = args.subjects
    synth = build(cfg, "data")
    out = _check_out_dir(args.out, args.force)
    try:
        ds = generate_synthetic_dataset(synth)
    except SplitError as exc:
        raise UsageError(str(exc)) from None
    echo_config({"data": synth}, None)
    write_dataset(ds, out)
    for part, ms in ds.split.parts().items():
        subjects = ds.split.subjects(part)
        print(f"{part}: {len(subjects)} subjects ({', '.join(subjects)}), {len(ms)} sequences")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.variant is not None:
        cfg["train"]["variant"] = args.variant
    tcfg = build(cfg, "train")
    base = build(cfg, "model")
    dataset = load_dataset(args.data)
    n_frames = sum(s.meshes.shape[0] for s in dataset.part("train"))
    mcfg = model_config_for(dataset, tcfg.variant, base, n_frames)
    echo_config({"train": tcfg, "model": mcfg, "data": {"path": str(args.data)}}, args.out)
    res = train(tcfg, dataset, args.out, base, resume=args.resume)
    print(f"best epoch {res.best_epoch}: val {res.best_val:.6f} ({res.wall_seconds:.1f}s)")
    print(f"wrote {Path(args.out) / 'best.ckpt'}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    model, _, header = load_model(args.checkpoint)
    windows = load_feature_file(args.features)
    template = load_mesh(args.template)
    if template.N != model.cfg.N:
        raise ShapeError("infer", "N (topology)", model.cfg.N, template.N)
    S = model.cfg.S
    if not 0 <= args.subject < S:
        raise UsageError(f"--subject {args.subject} out of range; valid subject indices are 0..{S - 1} "
                         f"({', '.join(header.get('train_subjects', []))})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict_windows(model, windows, template.vertices, args.subject)
    width = max(4, len(str(max(len(pred) - 1, 0))))
    for t, verts in enumerate(pred):
        write_mesh(Mesh(verts.astype(np.float64), template.faces), out / f"{t:0{width}d}.obj")
    echo_config({"infer": {"checkpoint": str(args.checkpoint), "features": str(args.features),
                           "template": str(args.template), "subject": args.subject, "frames": len(pred)}}, out)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    try:
        grid = parse_noise_grid(args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, _, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, grid, seed=args.seed)
    out = Path(args.out)
    jpath, cpath = write_report(report, out)
    if args.per_vertex:
        pv = out / "per_vertex"
        pv.mkdir(exist_ok=True)
        for part in ("val", "test"):
            for s in dataset.part(part):
                pred = predict_windows(model, s.windows, s.template, conditioning_subject(model, s))
                for t, e in enumerate(per_vertex_error(pred, s.meshes)):
                    write_per_vertex_csv(pv / f"{s.manifest.subject_id}_{s.manifest.sentence_id}_{t:04d}.csv", e)
    echo_config({"eval": {"checkpoint": str(args.checkpoint), "data": str(args.data), "noise": grid,
                          "seed": args.seed}}, out)
    for part in ("val", "test"):
        print(f"{part}: model {report.overall[part]:.6f}  baseline {report.baseline[part]:.6f}")
    for r in report.noise_rows:
        print(f"noise {r['kind']}:{r['level']:g}  {r['error']:.6f}")
    print(f"wrote {jpath} and {cpath}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    for flag, key in (("samples", "samples"), ("seeds", "seeds"), ("variants", "variants")):
        v = getattr(args, flag)
        if v is not None:
            cfg["gradcheck"][key] = v
    if cfg["gradcheck"].get("samples", 1) < 1:
        raise UsageError("--samples must be >= 1")
    gcfg = build(cfg, "gradcheck")
    echo_config({"gradcheck": gcfg}, None)
    worst = run_gradcheck(gcfg)
    for v, e in worst.items():
        print(f"variant {v}: worst relative error {e:.3e}")
    top = max(worst.values())
    ok = top <= gcfg.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {top:.3e} (tolerance {gcfg.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args, cfg) -> int:
    tcfg = build(cfg, "train")
    base = build(cfg, "model")
    dataset = load_dataset(args.data)
    seeds = tuple(range(args.seeds))
    echo_config({"train": tcfg, "model": base, "ablation": {"variants": args.variants, "seeds": list(seeds)}},
                args.out)
    rows = run_ablation(dataset, args.variants, seeds, tcfg, base, args.out)
    sys.stdout.write(format_ablation(ablation_table(rows)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _variant(text: str) -> str:
    if text not in "abcdef" or len(text) != 1:
        raise argparse.ArgumentTypeError(f"variant must be one of a..f, got {text!r}")
    return text


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdpnet", description="Speech-driven 3D face animation with geometry guidance.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config with data/model/train/gradcheck sections")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.lr=3e-4 (repeatable)")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--subjects", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", type=_variant)
    t.add_argument("--resume", help="continue from a last.ckpt")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict an OBJ sequence from a feature file")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--template", required=True)
    i.add_argument("--subject", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="clean and noisy error report")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--noise", default="default", help='"default", "none" or kind:level,...')
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--per-vertex", action="store_true", help="also write one per-vertex CSV per frame")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    common(c)
    c.add_argument("--samples", type=int, help="coordinates sampled per parameter tensor")
    c.add_argument("--seeds", type=int)
    c.add_argument("--variants")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train variants a-f over seeds and tabulate")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", default="abcdef")
    a.add_argument("--seeds", type=int, default=3)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"gdpnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"gdpnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        print(f"gdpnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
