"""Command-line entry point: ``atlasreg <subcommand> ...``.

Every subcommand that writes outputs also writes ``resolved_config.txt``
next to them: the merged configuration (file values overridden by ``--set``
and ``--seed``) in the key-value schema, enough to replay the run.

On failure a single line ``atlasreg: error=<Class> <message>`` goes to
stderr and the exit code names the class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import config as C
from .engine import (
    DatasetManifest, DivergenceError, TrainConfig, load_dataset, optimize_direct,
    precompute_band, register_case, segment_case, train_amortized,
)
from .evaluation import (
    aggregate, evaluate_case, write_case_csv, write_summary_json,
)
from .gradcheck import run_scope
from .net.model import CheckpointError, NetConfig, load_checkpoint
from .phantom import PhantomSpec, write_dataset
from .volcore import (
    DataError, DimensionError, FormatError, read_field, read_mask, read_mesh, read_volume,
    write_field, write_mask, write_mesh,
)

EXIT_OK = 0
EXIT_CODES = {
    "UsageError": 2,
    "MissingFile": 3,
    "SchemaError": 4,
    "DimensionMismatch": 5,
    "Divergence": 6,
    "GradcheckFailed": 7,
    "InvalidArgument": 8,
    "InternalError": 1,
}


class UsageError(ValueError):
    pass


class GradcheckFailed(RuntimeError):
    pass


def classify(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError):
        return "MissingFile"
    if isinstance(exc, DimensionError):
        return "DimensionMismatch"
    if isinstance(exc, (C.ConfigError, FormatError, DataError, CheckpointError)):
        return "SchemaError"
    if isinstance(exc, DivergenceError):
        return "Divergence"
    if isinstance(exc, GradcheckFailed):
        return "GradcheckFailed"
    if isinstance(exc, UsageError):
        return "UsageError"
    if isinstance(exc, ValueError):
        return "InvalidArgument"
    return "InternalError"


# ---------------------------------------------------------------------------
# config helpers


def _split_overrides(items) -> list[tuple[str, str]]:
    out = []
    for it in items or ():
        key, sep, value = it.partition("=")
        if not sep or not key.strip():
            raise C.ConfigError(f"override must look like key=value, got {it!r}")
        out.append((key.strip(), value.strip()))
    return out


def _sections(pairs, names) -> dict[str, list]:
    """Route ``section.key`` pairs to their section; bare keys are rejected."""
    out = {n: [] for n in names}
    for key, value in pairs:
        section, dot, rest = key.partition(".")
        if not dot or section not in out:
            raise C.ConfigError(f"key {key!r} needs one of the prefixes {sorted(names)}")
        out[section].append((rest, value))
    return out


def _snapshot(path, header: list[str], sections: dict[str, object]) -> None:
    lines = [f"# {h}" for h in header]
    for prefix, obj in sections.items():
        for line in C.dump(obj).splitlines():
            lines.append(f"{prefix}.{line}")
    Path(path).write_text("\n".join(lines) + "\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _load_manifest(path) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    return DatasetManifest.load(_require(p))


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    pairs = C.read_pairs(_require(args.spec)) if args.spec else []
    pairs += _split_overrides(args.set)
    # overrides are in the units of the unscaled anatomy
    spec = C.build(PhantomSpec, pairs, ignore=("scale",))
    scale = dict(pairs).get("scale", "1.0")
    if args.scale is not None:
        scale = repr(args.scale)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    fractions = tuple(float(f) for f in args.fractions.replace(",", " ").split())
    out = Path(args.out)
    path = write_dataset(out, spec.scaled(float(scale)) if float(scale) != 1.0 else spec,
                         args.n_cases, fractions)
    (out / "resolved_config.txt").write_text(
        f"# atlasreg phantom n_cases={args.n_cases} fractions={args.fractions}\n"
        + C.dump(spec, skip=("parts",)) + f"scale = {scale}\n")
    print(f"wrote {args.n_cases} cases and manifest {path}")
    return EXIT_OK


def _train_configs(args):
    file_pairs = C.read_pairs(_require(args.config)) if args.config else []
    sec = _sections(file_pairs + _split_overrides(args.set), ("net", "train"))
    net_pairs = (C.read_pairs(_require(args.net_config)) if args.net_config else []) + sec["net"]
    train_pairs = ((C.read_pairs(_require(args.train_config)) if args.train_config else [])
                   + sec["train"])
    net_cfg = C.build(NetConfig, net_pairs)
    train_cfg = C.build(TrainConfig, train_pairs)
    if args.seed is not None:
        net_cfg = dataclasses.replace(net_cfg, seed=args.seed)
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return net_cfg, train_cfg


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    net_cfg, train_cfg = _train_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(manifest)
    if net_cfg.input_dims is None:
        net_cfg = dataclasses.replace(net_cfg, input_dims=data.dims)
    _snapshot(out / "resolved_config.txt", ["atlasreg train", f"manifest={args.manifest}"],
              {"net": net_cfg, "train": train_cfg})
    res = train_amortized(data, net_cfg, train_cfg, out,
                          resume=Path(args.resume) if args.resume else None)
    split_lines = [f"{name} = {' '.join(ids)}" for name, ids in
                   zip(("train", "val", "test"), res.split)]
    (out / "split.txt").write_text("\n".join(split_lines) + "\n")
    last = res.epoch_log[-1]
    print(f"trained {train_cfg.epochs} epochs; best epoch {res.best_epoch}; "
          f"final val dice {last['val_dice_patient']:.4f}")
    return EXIT_OK


def _case_volume(args, manifest):
    if manifest is not None and not Path(args.case).is_file():
        try:
            rec = manifest.case(args.case)
        except KeyError:
            raise FileNotFoundError(f"{args.case!r} is neither a file nor a case id") from None
        return read_volume(manifest.resolve(rec.volume))
    return read_volume(_require(args.case))


def cmd_register(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(args.manifest) if args.manifest else None
    if args.direct:
        if manifest is None:
            raise UsageError("--direct needs --manifest for the atlas")
        p = _case_volume(args, manifest)
        pairs = (C.read_pairs(_require(args.train_config)) if args.train_config else []) + \
            _sections(_split_overrides(args.set), ("train",))["train"]
        cfg = C.build(TrainConfig, pairs)
        atlas = read_volume(manifest.resolve(manifest.atlas_volume))
        beta = read_mask(manifest.resolve(manifest.atlas_mask))
        mu = precompute_band(beta, cfg.band_radius)
        res = optimize_direct(p, atlas, beta, mu, cfg.weights, args.steps, args.lr,
                              cfg.reduction, cfg.beta1, cfg.beta2, cfg.eps)
        field = res.field
        _snapshot(out.with_name(out.name + ".config.txt"),
                  ["atlasreg register --direct", f"case={args.case}", f"steps={args.steps}",
                   f"lr={args.lr!r}"], {"train": cfg})
    else:
        if not args.checkpoint:
            raise UsageError("give --checkpoint or --direct")
        net, _, _ = load_checkpoint(_require(args.checkpoint))
        p = _case_volume(args, manifest)
        field = register_case(net, p)
        _snapshot(out.with_name(out.name + ".config.txt"),
                  ["atlasreg register", f"checkpoint={args.checkpoint}", f"case={args.case}"],
                  {"net": net.config})
    write_field(field, out)
    print(f"wrote field {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    field = read_field(_require(args.field))
    alpha = read_mesh(_require(args.atlas_mesh))
    beta = read_mask(_require(args.atlas_mask))
    mesh, mask = segment_case(field, alpha, beta, args.supersample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, out / "mesh.obj")
    write_mask(mask, out / "mask.mmsk")
    (out / "resolved_config.txt").write_text(
        f"# atlasreg segment field={args.field}\nsupersample = {args.supersample}\n")
    print(f"wrote {out / 'mesh.obj'} and {out / 'mask.mmsk'}")
    return EXIT_OK


def _parse_outputs(items) -> list[tuple[str, Path]]:
    out = []
    for it in items:
        tag, sep, path = it.partition("=")
        out.append((tag, Path(path)) if sep else ("network", Path(it)))
    return out


def cmd_evaluate(args) -> int:
    manifest = _load_manifest(args.ground_truth)
    beta = read_mask(manifest.resolve(manifest.atlas_mask))
    rows = []
    for method, root in _parse_outputs(args.outputs):
        if not root.is_dir():
            raise FileNotFoundError(f"no such outputs directory: {root}")
        for rec in manifest.cases:
            case_dir = root / rec.case_id
            if not (case_dir / "mesh.obj").is_file():
                continue
            if rec.gt_mask is None or rec.gt_mesh is None:
                raise C.ConfigError(f"case {rec.case_id} has no ground truth in the manifest")
            gt_mask = read_mask(manifest.resolve(rec.gt_mask))
            gt_mesh = read_mesh(manifest.resolve(rec.gt_mesh), frame="patient")
            out_mesh = read_mesh(case_dir / "mesh.obj", frame="patient")
            out_mask = read_mask(_require(case_dir / "mask.mmsk"))
            field_path = case_dir / "field.mfld"
            field = read_field(field_path) if field_path.is_file() else None
            rows.append(evaluate_case(rec.case_id, method, out_mesh, out_mask, gt_mesh, gt_mask,
                                      gt_mask.spacing, field, beta, args.samples_per_triangle))
    if not rows:
        raise FileNotFoundError("no case outputs found (expected <outputs>/<case_id>/mesh.obj)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_case_csv(rows, out / "cases.csv")
    write_summary_json(aggregate(rows), out / "summary.json")
    (out / "resolved_config.txt").write_text(
        f"# atlasreg evaluate ground_truth={args.ground_truth}\n"
        + "".join(f"# outputs {m}={p}\n" for m, p in _parse_outputs(args.outputs))
        + f"samples_per_triangle = {args.samples_per_triangle}\n")
    print(f"evaluated {len(rows)} case outputs into {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_scope(args.scope, args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"  {status} {r.name} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e} "
              f"n={r.n_checked}")
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e}")
    if not ok:
        raise GradcheckFailed(f"{args.scope} gradients exceed tolerance (max {worst:.3e})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atlasreg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset and manifest")
    p.add_argument("--spec", help="phantom spec file (key = value)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, required=True)
    p.add_argument("--fractions", default="0.7 0.2 0.1")
    p.add_argument("--scale", type=float, help="resample the default anatomy by this factor")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the registration network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="combined config with net.* and train.* keys")
    p.add_argument("--net-config")
    p.add_argument("--train-config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="predict or optimize a displacement field")
    p.add_argument("--checkpoint")
    p.add_argument("--direct", action="store_true", help="optimize the field per pair")
    p.add_argument("--manifest")
    p.add_argument("--case", required=True, help="volume path, or case id with --manifest")
    p.add_argument("--out", required=True, help="output field file (.mfld)")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--train-config", help="loss weights for --direct")
    p.add_argument("--set", action="append", metavar="train.KEY=VALUE")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("segment", help="warp the atlas mesh and mask through a field")
    p.add_argument("--field", required=True)
    p.add_argument("--atlas-mesh", required=True)
    p.add_argument("--atlas-mask", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--supersample", type=int, default=3)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="metrics and paired statistics")
    p.add_argument("--outputs", action="append", required=True, metavar="[METHOD=]DIR")
    p.add_argument("--ground-truth", required=True, help="manifest file or its directory")
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-triangle", type=int, default=16)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scope", choices=("losses", "layers", "end-to-end"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = args.verbose or os.environ.get("ATLASREG_VERBOSE", "") not in ("", "0")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        cls = classify(exc)
        msg = " ".join(str(exc).split())
        print(f"atlasreg: error={cls} {msg}", file=sys.stderr)
        if verbose:
            raise
        return EXIT_CODES[cls]


if __name__ == "__main__":
    sys.exit(main())
