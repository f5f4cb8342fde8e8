"""Command line entry point: ``icwm <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from icwm import harness
from icwm.bounds import fit_family_models
from icwm.cartpole import DatasetSpec, build_dataset, dataset_to_json, load_dataset, save_dataset
from icwm.errors import ConfigError, NumericalError
from icwm.seqmodel.checkpoint import load_checkpoint, save_checkpoint
from icwm.seqmodel.evaluate import evaluate_icl
from icwm.seqmodel.model import GsaConfig
from icwm.seqmodel.train import TrainConfig, new_model, train
from icwm.tabular_env import EnvFamilyConfig, load_family, sample_env_family, save_family

log = logging.getLogger("icwm")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read {path}: {err}") from None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_for(args, kind: harness.ExperimentKind, params: dict) -> harness.ExperimentSpec:
    """Build a spec from --config (a full spec or a bare params object) plus flag overrides."""
    doc = {"kind": kind.value, "experiment_id": args.experiment_id or kind.value.lower(), "seed": args.seed, "params": {}}
    if args.config:
        cfg = _read_json(args.config)
        if "kind" in cfg:
            if cfg["kind"] != kind.value:
                raise ConfigError(f"config kind {cfg['kind']} does not match subcommand ({kind.value})")
            doc = cfg | {"params": dict(cfg.get("params", {}))}
            if args.seed_given:
                doc["seed"] = args.seed
        else:
            doc["params"] = cfg
    doc["params"].update({k: v for k, v in params.items() if v is not None})
    return harness.ExperimentSpec.from_dict(doc)


def _run_spec(args, spec: harness.ExperimentSpec) -> None:
    manifest = harness.run(spec, args.out_dir)
    print(json.dumps({"status": manifest["status"], "outputs": manifest["outputs"]}, indent=1))


def cmd_gen_envs(args) -> None:
    cfg = EnvFamilyConfig(args.count, tuple(args.dims), args.concentration, args.determinism, args.kind, args.seed)
    path = _out(args) / "envs.json"
    save_family(path, cfg, sample_env_family(cfg))
    print(path)


def cmd_build_dataset(args) -> None:
    spec = DatasetSpec(args.name, args.n_envs, args.scope, args.traj_per_env, args.length)
    ds = build_dataset(spec, args.seed)
    path = _out(args) / f"{args.name}.bin"
    save_dataset(path, ds)
    if args.json:
        (_out(args) / f"{args.name}.json").write_text(dataset_to_json(ds))
    print(path)


def cmd_fit_models(args) -> None:
    _, envs = load_family(args.envs)
    models = fit_family_models(envs, args.samples, args.smoothing, args.seed)
    path = _out(args) / "models.json"
    path.write_text(json.dumps([m.to_dict() for m in models], sort_keys=True) + "\n")
    print(path)


def cmd_verify_bounds(args) -> None:
    bound = {"trials": args.trials} if args.trials else None
    params = {"n_families": args.families, "target": args.target}
    if bound:
        params["bound"] = bound
    _run_spec(args, _spec_for(args, harness.ExperimentKind.BOUND_VERIFY, params))


def cmd_crossover(args) -> None:
    params = {"runs": args.runs, "n_envs": list(_ints(args.n_envs)) if args.n_envs else None}
    _run_spec(args, _spec_for(args, harness.ExperimentKind.CROSSOVER, params))


def cmd_train(args) -> None:
    ds = load_dataset(args.dataset)
    gcfg = GsaConfig.from_dict(_read_json(args.model_config) if args.model_config else {})
    overrides = {k: v for k, v in {"epochs": args.epochs, "batch": args.batch, "lr": args.lr}.items() if v is not None}
    tcfg = TrainConfig.from_dict((_read_json(args.train_config) if args.train_config else {}) | overrides | {"seed": args.seed})
    model = new_model(gcfg, ds, tcfg.seed)
    result = train(model, ds, tcfg, progress=lambda e, l: log.info("epoch %d loss %.6g", e, l))
    out = _out(args)
    save_checkpoint(out / f"{args.name}.ckpt", model, result.steps, extra={"train_set": ds.spec.to_dict(), "seed": ds.seed})
    rows = [harness.ReportRow(args.name, args.name, None, None, "train_loss", float(l), e + 1) for e, l in enumerate(result.epoch_loss)]
    harness.emit_reports(rows, out, f"{args.name}_train", {"train": tcfg.to_dict(), "epoch_loss": result.epoch_loss})
    print(out / f"{args.name}.ckpt")


def cmd_eval_icl(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    table = evaluate_icl(model, ds, _ints(args.T_grid), _ints(args.k))
    name = Path(args.checkpoint).stem
    rows = harness.icl_rows(name, f"{name}|{ds.spec.name}", table, None)
    harness.emit_reports(rows, _out(args), f"{name}_{ds.spec.name}_icl",
                         {"T_grid": list(table.T_grid), "k_list": list(table.k_list),
                          "error_mean": table.mean().tolist(), "error_median_env": table.median_over_envs().tolist()})
    for T, row in zip(table.T_grid, table.mean()):
        print(T, " ".join(f"{v:.6g}" for v in row))


def cmd_probe_pc(args) -> None:
    params = {"checkpoint": args.checkpoint, "positions": list(_ints(args.positions)) if args.positions else None}
    _run_spec(args, _spec_for(args, harness.ExperimentKind.PROBE_PREDICTIVE_CODING, params))


def cmd_probe_silhouette(args) -> None:
    _run_spec(args, _spec_for(args, harness.ExperimentKind.PROBE_SILHOUETTE, {"checkpoint": args.checkpoint}))


def cmd_report(args) -> None:
    if args.rerun:
        manifest = harness.rerun(args.rerun, args.out_dir)
        print(json.dumps({"status": manifest["status"], "outputs": manifest["outputs"]}, indent=1))
        return
    if not args.config:
        raise ConfigError("report needs --config SPEC or --rerun MANIFEST")
    spec = harness.ExperimentSpec.load(args.config)
    if args.seed_given:
        spec = harness.ExperimentSpec(spec.kind, spec.experiment_id, args.seed, spec.params, spec.out_dir)
    _run_spec(args, spec)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment spec or params object")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default="runs/out")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--experiment-id", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icwm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-envs", parents=[common], help="sample a tabular environment family")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--dims", type=int, nargs=3, default=(6, 3, 6), metavar=("S", "A", "O"))
    p.add_argument("--kind", choices=["MDP", "POMDP"], default="MDP")
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--determinism", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_envs)

    p = sub.add_parser("build-dataset", parents=[common], help="collect a cart-pole dataset")
    p.add_argument("--name", required=True)
    p.add_argument("--n-envs", type=int, required=True)
    p.add_argument("--scope", choices=["SCOPE1", "SCOPE1PLUS2_EXCL1", "SCOPE1PLUS2", "ORIGINAL"], required=True)
    p.add_argument("--traj-per-env", type=int, required=True)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--json", action="store_true", help="also write the JSON form")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("fit-models", parents=[common], help="fit smoothed tabular models to a family")
    p.add_argument("--envs", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--smoothing", type=float, default=1.0)
    p.set_defaults(func=cmd_fit_models)

    p = sub.add_parser("verify-bounds", parents=[common], help="Monte-Carlo check of the ER/EL bounds")
    p.add_argument("--families", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--target", choices=["seen", "holdout"], default=None)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("crossover", parents=[common], help="ER/EL crossover sweep")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--n-envs", default=None, help="comma list")
    p.set_defaults(func=cmd_crossover)

    p = sub.add_parser("train", parents=[common], help="train a cart-pole world model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="model")
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-icl", parents=[common], help="k-step error versus context length")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--T-grid", default="1,2,5,10,20,50,100")
    p.add_argument("--k", default="1,8")
    p.set_defaults(func=cmd_eval_icl)

    p = sub.add_parser("probe-pc", parents=[common], help="predictive-coding substitution probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--positions", default=None, help="comma list")
    p.set_defaults(func=cmd_probe_pc)

    p = sub.add_parser("probe-silhouette", parents=[common], help="memory-state silhouette probe")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe_silhouette)

    p = sub.add_parser("report", parents=[common], help="run an experiment spec or rerun a manifest")
    p.add_argument("--rerun", metavar="MANIFEST")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    torch.set_num_threads(max(1, args.threads))
    try:
        args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
