"""Experiment orchestration: specs, runs, manifests and report files.

Every run writes its report bodies (CSV, summary JSON) plus a manifest that
echoes the spec; rerunning the manifest's spec reproduces the bodies byte
for byte. Timings and versions live only in the manifest.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field, fields
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

from icwm import __version__
from icwm.bounds import BoundConfig, crossover_scan, verify_bound_montecarlo
from icwm.cartpole import Dataset, DatasetSpec, build_dataset, collect_for_envs
from icwm.errors import ConfigError, NumericalError
from icwm.probes import predictive_coding_probe, rank_correlation, silhouette_probe
from icwm.seqmodel.checkpoint import load_checkpoint, save_checkpoint
from icwm.seqmodel.evaluate import evaluate_icl
from icwm.seqmodel.model import GsaConfig
from icwm.seqmodel.train import TrainConfig, new_model, train
from icwm.tabular_env import EnvFamilyConfig, sample_env_family

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class ExperimentKind(str, enum.Enum):
    BOUND_VERIFY = "BOUND_VERIFY"
    CROSSOVER = "CROSSOVER"
    CARTPOLE_ICL = "CARTPOLE_ICL"
    PROBE_PREDICTIVE_CODING = "PROBE_PREDICTIVE_CODING"
    PROBE_SILHOUETTE = "PROBE_SILHOUETTE"


def load_schema() -> dict:
    text = resources.files("icwm").joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: ExperimentKind
    experiment_id: str
    seed: int
    params: dict = field(default_factory=dict)
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "experiment_id": self.experiment_id, "seed": self.seed, "params": self.params}
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        try:
            jsonschema.validate(d, load_schema())
        except jsonschema.ValidationError as err:
            raise ConfigError(f"invalid experiment spec: {err.message}") from None
        return cls(d["kind"], d["experiment_id"], d["seed"], dict(d.get("params", {})), d.get("out_dir"))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read spec {path}: {err}") from None
        return cls.from_dict(doc)


@dataclass(frozen=True)
class ReportRow:
    experiment_id: str
    model: str
    T: int | None
    k: int | None
    metric: str
    value: float
    trial: int | None = None
    seen: bool | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NumericalError(f"non-finite metric {self.metric}={self.value} for {self.model}")


REPORT_COLUMNS = tuple(f.name for f in fields(ReportRow))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _opt_int(s: str):
    return None if s == "" else int(s)


def read_report_csv(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for d in reader:
        seen = None if d["seen"] == "" else d["seen"] == "true"
        out.append(ReportRow(d["experiment_id"], d["model"], _opt_int(d["T"]), _opt_int(d["k"]), d["metric"],
                             float(d["value"]), _opt_int(d["trial"]), seen))
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def emit_reports(rows, out_dir, stem: str = "report", summary: dict | None = None, formats=("csv", "json")) -> list[Path]:
    """Write ``<stem>.csv`` (ReportRow columns) and ``<stem>.json`` (summary)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err}") from None
    written = []
    if "csv" in formats:
        p = out / f"{stem}.csv"
        p.write_text(rows_to_csv(rows))
        written.append(p)
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(_dump_json(summary if summary is not None else {}))
        written.append(p)
    return written


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _versions() -> dict:
    out = {"python": platform.python_version(), "icwm": __version__}
    for pkg in ("numpy", "scipy", "scikit-learn", "torch", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# -- experiments ---------------------------------------------------------


def _bound_verify(spec: ExperimentSpec, out: Path):
    p = spec.params
    fam = EnvFamilyConfig.from_dict(p.get("family", {"count": 4, "dims": [6, 3, 6]}) | {"seed": 0})
    bcfg = BoundConfig.from_dict(p.get("bound", {}))
    n_families = int(p.get("n_families", 1))
    target = p.get("target", "seen")
    rows, summaries, seeds = [], [], {}
    for f in range(n_families):
        fseed = derive_seed(spec.seed, 1, f)
        envs = sample_env_family(EnvFamilyConfig.from_dict(fam.to_dict() | {"count": fam.count + (target == "holdout"), "seed": fseed}))
        cfg = BoundConfig.from_dict(bcfg.to_dict() | {"seed": derive_seed(spec.seed, 2, f)})
        seeds[f"family{f}"] = {"family_seed": fseed, "trial_seed": cfg.seed}
        if target == "holdout":
            rep = verify_bound_montecarlo(envs[:-1], envs[-1], cfg)
        else:
            rep = verify_bound_montecarlo(envs, int(p.get("seen_index", 0)), cfg)
        (out / f"bounds_family{f}.csv").write_text(rep.to_csv())
        for pred in rep.tv:
            model = f"{pred}@family{f}"
            for i, T in enumerate(rep.T_grid):
                for j in range(rep.trials):
                    rows.append(ReportRow(spec.experiment_id, model, T, None, "empirical_tv", float(rep.tv[pred][i, j]), j, target != "holdout"))
                rows.append(ReportRow(spec.experiment_id, model, T, None, "bound", float(rep.bounds[pred][i]), None, target != "holdout"))
                rate = rep.violation_rate(pred)[i]
                if not np.isnan(rate):
                    rows.append(ReportRow(spec.experiment_id, model, T, None, "violation_rate", float(rate), None, target != "holdout"))
        summaries.append(rep.summary())
    return rows, {"families": summaries}, seeds


def _crossover(spec: ExperimentSpec, out: Path):
    p = spec.params
    base = EnvFamilyConfig.from_dict(p.get("family", {"count": 4, "dims": [6, 3, 6]}) | {"seed": 0})
    bcfg = BoundConfig.from_dict(p.get("bound", {}))
    n_envs = [int(n) for n in p.get("n_envs", [base.count])]
    dims_list = [tuple(d) for d in p.get("dims_list", [list(base.dims)])]
    runs = int(p.get("runs", 1))
    rows, tables, seeds = [], [], {}
    csv_parts = []
    for r in range(runs):
        fam = EnvFamilyConfig.from_dict(base.to_dict() | {"seed": derive_seed(spec.seed, 3, r)})
        cfg = BoundConfig.from_dict(bcfg.to_dict() | {"seed": derive_seed(spec.seed, 4, r)})
        seeds[f"run{r}"] = {"family_seed": fam.seed, "trial_seed": cfg.seed}
        rep = crossover_scan(fam, n_envs, dims_list, cfg)
        body = rep.to_csv()
        csv_parts.append(body if r == 0 else body.split("\n", 1)[1])
        for cell in rep.cells:
            tag = f"E={cell.n_envs}|S{cell.dims[0]}A{cell.dims[1]}O{cell.dims[2]}"
            for setting, sub, cross in (("unseen", cell.unseen, cell.crossover_unseen), ("seen", cell.seen, cell.crossover_seen)):
                seen = setting == "seen"
                for pred in ("EL", "ER"):
                    for T, m in zip(sub.T_grid, sub.median_tv(pred)):
                        rows.append(ReportRow(spec.experiment_id, f"{pred}|{tag}", T, None, "median_tv", float(m), r, seen))
                rows.append(ReportRow(spec.experiment_id, tag, None, None, "crossover_found", float(cross is not None), r, seen))
                if cross is not None:
                    rows.append(ReportRow(spec.experiment_id, tag, cross, None, "crossover_T", float(cross), r, seen))
        tables.append(rep.table())
    (out / "crossover.csv").write_text("".join(csv_parts))
    return rows, {"runs": tables}, seeds


DEFAULT_TRAIN_SETS = (
    {"name": "one", "n_envs": 1, "scope": "ORIGINAL", "traj_per_env": 8192},
    {"name": "four", "n_envs": 4, "scope": "SCOPE1PLUS2", "traj_per_env": 2048},
    {"name": "many", "n_envs": 1024, "scope": "SCOPE1PLUS2", "traj_per_env": 8},
)
DEFAULT_EVAL_SETS = (
    {"name": "seen:own"},
    {"name": "seen:four"},
    {"name": "scope1", "scope": "SCOPE1", "n_envs": 64, "traj_per_env": 4},
    {"name": "scope2", "scope": "SCOPE1PLUS2_EXCL1", "n_envs": 64, "traj_per_env": 4},
)


def _seen_set(train: Dataset, name: str, max_envs: int, traj_per_env: int, seed: int, min_traj: int = 256) -> Dataset:
    """Fresh trajectories of a training set's environments; small families
    get more trajectories per environment so every set has >= min_traj."""
    params = train.env_params()[:max_envs]
    traj_per_env = max(traj_per_env, -(-min_traj // len(params)))
    spec = DatasetSpec(name, len(params), train.spec.scope, traj_per_env, train.spec.length, train.spec.noise_range)
    return collect_for_envs(spec, params, seed)


def icl_rows(exp_id, model, table, seen):
    rows = []
    mean, med = table.mean(), table.median_over_envs()
    for i, T in enumerate(table.T_grid):
        for j, k in enumerate(table.k_list):
            rows.append(ReportRow(exp_id, model, T, k, "error_mean", float(mean[i, j]), None, seen))
            rows.append(ReportRow(exp_id, model, T, k, "error_median_env", float(med[i, j]), None, seen))
    return rows


def _cartpole_icl(spec: ExperimentSpec, out: Path):
    p = spec.params
    train_specs = [DatasetSpec.from_dict(d) for d in p.get("train_sets", DEFAULT_TRAIN_SETS)]
    names = [s.name for s in train_specs]
    if len(set(names)) != len(names):
        raise ConfigError("training set names must be unique")
    eval_defs = list(p.get("eval_sets", DEFAULT_EVAL_SETS))
    gcfg = GsaConfig.from_dict(p.get("model", {}))
    tcfg_base = TrainConfig.from_dict(p.get("train", {}))
    T_grid = tuple(p.get("T_grid", (1, 2, 5, 10, 20, 50, 100)))
    k_list = tuple(p.get("k_list", (1, 8)))
    early = p.get("early_checkpoint", {"train_set": "four", "fraction": 0.1})
    seen_envs = int(p.get("seen_max_envs", 64))
    seen_traj = int(p.get("seen_traj_per_env", 4))
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    seeds = {}

    train_sets = {}
    for i, ds_spec in enumerate(train_specs):
        s = derive_seed(spec.seed, 10, i)
        seeds[f"dataset:{ds_spec.name}"] = s
        train_sets[ds_spec.name] = build_dataset(ds_spec, s)
    fixed_eval = {}
    for i, d in enumerate(eval_defs):
        if d["name"].startswith("seen:"):
            continue
        s = int(d.get("seed", derive_seed(spec.seed, 11, i)))
        seeds[f"eval:{d['name']}"] = s
        fixed_eval[d["name"]] = build_dataset(
            DatasetSpec(d["name"], d["n_envs"], d["scope"], d["traj_per_env"], d.get("length", 200)), s
        )

    def seen_eval(train_name: str) -> Dataset:
        s = derive_seed(spec.seed, 12, names.index(train_name))
        seeds[f"eval:seen:{train_name}"] = s
        return _seen_set(train_sets[train_name], f"seen:{train_name}", seen_envs, seen_traj, s)

    seen_cache = {}
    rows, summary = [], {"models": {}}
    for i, name in enumerate(names):
        ds = train_sets[name]
        tcfg = TrainConfig.from_dict(tcfg_base.to_dict() | {"seed": derive_seed(spec.seed, 13, i)})
        seeds[f"train:{name}"] = tcfg.seed
        torch.manual_seed(tcfg.seed)
        model = new_model(gcfg, ds, tcfg.seed)
        early_epoch = None
        if early and early.get("train_set") == name and tcfg.epochs > 0:
            early_epoch = max(1, int(round(early.get("fraction", 0.1) * tcfg.epochs)))
        result = train(model, ds, tcfg, snapshot_epochs=(early_epoch,) if early_epoch else ())
        save_checkpoint(ckpt_dir / f"{name}.ckpt", model, result.steps, extra={"train_set": ds_spec_dict(ds), "seed": ds.seed})
        for e, loss in enumerate(result.epoch_loss):
            rows.append(ReportRow(spec.experiment_id, name, None, None, "train_loss", float(loss), e + 1, None))
        variants = [(name, model)]
        if early_epoch:
            early_model = new_model(gcfg, None, 0)
            early_model.load_state_dict(result.checkpoints[early_epoch])
            variants.append((f"{name}@epoch{early_epoch}", early_model))
        for label, m in variants:
            per_set = {}
            for d in eval_defs:
                set_name = d["name"]
                if set_name.startswith("seen:"):
                    src = name if set_name == "seen:own" else set_name.split(":", 1)[1]
                    if src not in train_sets:
                        raise ConfigError(f"eval set {set_name} names unknown training set {src!r}")
                    if src not in seen_cache:
                        seen_cache[src] = seen_eval(src)
                    ev, seen = seen_cache[src], src == name
                    set_label = f"seen:{src}"
                else:
                    ev, seen, set_label = fixed_eval[set_name], False, set_name
                if set_label in per_set:
                    continue
                table = evaluate_icl(m, ev, T_grid, k_list)
                rows.extend(icl_rows(spec.experiment_id, f"{label}|{set_label}", table, seen))
                per_set[set_label] = {
                    "T_grid": list(table.T_grid),
                    "k_list": list(table.k_list),
                    "error_mean": table.mean().tolist(),
                    "error_median_env": table.median_over_envs().tolist(),
                    "seen": seen,
                }
            summary["models"][label] = {"eval": per_set}
        summary["models"][name]["final_train_loss"] = result.epoch_loss[-1] if result.epoch_loss else None
    summary["indicators"] = icl_indicators(summary)
    return rows, summary, seeds


def ds_spec_dict(ds: Dataset) -> dict:
    return ds.spec.to_dict()


def _err(entry: dict, T: int, k: int = 1, stat: str = "error_median_env") -> float:
    return entry[stat][entry["T_grid"].index(T)][entry["k_list"].index(k)]


def icl_indicators(summary: dict, k: int = 1) -> dict:
    """Scale-free indicators per model: relative error drop from the shortest
    to the longest context on each eval set, and the relative seen-unseen gap
    at the longest context (unseen averaged over the non-seen sets)."""
    out = {}
    for label, info in summary["models"].items():
        ev = info["eval"]
        ind = {"drop": {}, "gap": None}
        for set_name, entry in ev.items():
            T0, T1 = entry["T_grid"][0], entry["T_grid"][-1]
            e0, e1 = _err(entry, T0, k), _err(entry, T1, k)
            ind["drop"][set_name] = 1.0 - e1 / e0 if e0 > 0 else 0.0
        own = [e for e in ev.values() if e["seen"]]
        unseen = [e for n, e in ev.items() if not n.startswith("seen:")]
        if own and unseen:
            T1 = own[0]["T_grid"][-1]
            s = _err(own[0], T1, k)
            u = float(np.mean([_err(e, T1, k) for e in unseen]))
            ind["gap"] = (u - s) / s if s > 0 else None
        out[label] = ind
    return out


def _load_eval_set(p: dict, seed: int, key: int) -> Dataset:
    d = p.get("eval_set", {"name": "scope1", "scope": "SCOPE1", "n_envs": 64, "traj_per_env": 4})
    s = int(d.get("seed", derive_seed(seed, key)))
    return build_dataset(DatasetSpec(d.get("name", "eval"), d["n_envs"], d["scope"], d["traj_per_env"], d.get("length", 200)), s)


def _checkpoint(p: dict):
    if "checkpoint" not in p:
        raise ConfigError("probe experiments need params.checkpoint")
    path = Path(p["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    model, _ = load_checkpoint(path, dtype=torch.float64 if p.get("float64") else torch.float32)
    return model, path.stem


def _probe_pc(spec: ExperimentSpec, out: Path):
    p = spec.params
    model, name = _checkpoint(p)
    ev = _load_eval_set(p, spec.seed, 20)
    positions = tuple(p.get("positions", (10, 50, 100)))
    k_list = tuple(p.get("k_list", (1, 8)))
    res = predictive_coding_probe(model, ev, positions, k_list, int(p.get("horizon", 1)))
    boot_seed = derive_seed(spec.seed, 21)
    corr = rank_correlation(res, int(p.get("n_boot", 1000)), boot_seed)
    rows = []
    for i in range(len(ev)):
        for j, pos in enumerate(positions):
            rows.append(ReportRow(spec.experiment_id, name, pos, None, "frame_error", float(res.frame_error[i, j]), i, False))
            for q, k in enumerate(k_list):
                rows.append(ReportRow(spec.experiment_id, name, pos, k, "delta_error", float(res.delta[i, j, q]), i, False))
    rows.append(ReportRow(spec.experiment_id, name, None, None, "spearman_rho", corr.rho))
    summary = {"spearman_rho": corr.rho, "ci_low": corr.ci_low, "ci_high": corr.ci_high, "n": corr.n,
               "per_k": {str(k): v for k, v in corr.per_k.items()}, "positions": list(positions)}
    return rows, summary, {"eval": ev.seed, "bootstrap": boot_seed}


def _probe_silhouette(spec: ExperimentSpec, out: Path):
    p = spec.params
    model, name = _checkpoint(p)
    ev = _load_eval_set(p, spec.seed, 30)
    scores, dump = silhouette_probe(model, ev, p.get("layers"), p.get("steps"))
    np.savez_compressed(out / "memory_states.npz", env_index=dump["env_index"],
                        **{f"layer{l}": dump["states"][l] for l in dump["layers"]})
    rows = [ReportRow(spec.experiment_id, name, None, None, f"silhouette_layer{l}", float(v)) for l, v in scores.items()]
    return rows, {"silhouette": {str(l): v for l, v in scores.items()}}, {"eval": ev.seed}


_RUNNERS = {
    ExperimentKind.BOUND_VERIFY: _bound_verify,
    ExperimentKind.CROSSOVER: _crossover,
    ExperimentKind.CARTPOLE_ICL: _cartpole_icl,
    ExperimentKind.PROBE_PREDICTIVE_CODING: _probe_pc,
    ExperimentKind.PROBE_SILHOUETTE: _probe_silhouette,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(spec: ExperimentSpec, out_dir=None) -> dict:
    """Run one experiment; returns the manifest dict (also written to disk)."""
    if spec.kind not in _RUNNERS:
        raise ConfigError(f"unknown experiment kind {spec.kind}")
    out = Path(out_dir or spec.out_dir or Path("runs") / spec.experiment_id)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_dict(),
        "versions": _versions(),
        "seeds": {"experiment": spec.seed},
        "status": "running",
        "outputs": {},
    }
    t0 = time.perf_counter()
    try:
        rows, summary, seeds = _RUNNERS[spec.kind](spec, out)
        manifest["seeds"].update(seeds)
        files = emit_reports(rows, out, "report", summary)
        extra = sorted(p for p in out.glob("*.csv") if p.name != "report.csv")
        manifest["outputs"] = {p.name: _sha256(p) for p in [*files, *extra]}
        manifest["status"] = "ok"
    except NumericalError as err:
        manifest["status"] = "failed"
        manifest["error"] = str(err)
        raise
    finally:
        manifest["wall_time_s"] = time.perf_counter() - t0
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def rerun(manifest_path, out_dir) -> dict:
    """Run the spec recorded in a manifest again into ``out_dir``."""
    doc = json.loads(Path(manifest_path).read_text())
    return run(ExperimentSpec.from_dict(doc["spec"]), out_dir)


def report_bodies(out_dir) -> dict[str, bytes]:
    """All CSV bodies of a run directory, keyed by file name."""
    return {p.name: p.read_bytes() for p in sorted(Path(out_dir).glob("*.csv"))}
