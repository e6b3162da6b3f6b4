"""Command-line interface, configuration loading, run registry and plot-data export.

    lrtune tune-single   --config CFG --out DIR [--seed N] [--threads N]
    lrtune tune-multi    --config CFG --out DIR [--seed N] [--threads N]
    lrtune warm-start    --config CFG --snapshot MODEL.json --out DIR
    lrtune run-baselines --config CFG --out DIR
    lrtune export-plot   --registry DIR --kind {surface,traces,fan,embeddings} --out FILE

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Heavy modules are imported inside the commands so ``--threads`` can set the
BLAS thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
PLOT_KINDS = ("surface", "traces", "fan", "embeddings")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("lrtune")


class UsageError(Exception):
    """Bad arguments, missing files or an invalid configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_schema(name: str) -> dict:
    return json.loads(resources.files("lrtune.schemas").joinpath(f"{name}.schema.json").read_text())


def validate(instance, schema_name: str) -> None:
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"invalid {schema_name} at {where}: {e.message}")


def load_config(path, seed: int | None = None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    validate(cfg, "config")
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(factory, **kw):
    try:
        return factory(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def runner_config(cfg: dict):
    from .tasks import RunnerConfig
    return _build(RunnerConfig, **cfg.get("runner", {}))


def single_config(cfg: dict):
    from .tuning_single import SingleTuneConfig
    sec = dict(cfg.get("single", {}))
    if "alphas" in sec:
        sec["alphas"] = tuple(sec["alphas"])
    return _build(SingleTuneConfig, **sec, runner=runner_config(cfg), seed=cfg["seed"])


def multi_config(cfg: dict):
    from .tuning_multi import MultiTuneConfig
    return _build(MultiTuneConfig, **cfg.get("multi", {}), runner=runner_config(cfg), seed=cfg["seed"])


def single_task(cfg: dict):
    from .tasks import TaskSpec, ill_conditioned_quadratic
    if "task" in cfg:
        return _build(TaskSpec.from_dict, d=cfg["task"])
    return ill_conditioned_quadratic()


def task_list(cfg: dict):
    from .tasks import TaskSpec, make_task_family
    if "tasks" in cfg:
        return [_build(TaskSpec.from_dict, d=t) for t in cfg["tasks"]]
    fam = {"family_seed": 0, "M": 5, "spread": 0.5, **cfg.get("family", {})}
    return _build(make_task_family, **fam)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

class RunRegistry:
    """Append-only JSON-lines record store under ``root`` with numbered records.

    Every record gets ``seq`` (1, 2, ...) and the config hash. Writers hold an
    advisory lock on ``registry.lock``; a partially written last line (from an
    interrupted writer) is cut off before reading or appending.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "registry.jsonl"
        self.lock_path = self.root / "registry.lock"
        self.snapshot_dir = self.root / "snapshots"

    def exists(self) -> bool:
        return self.path.is_file()

    @contextlib.contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.lock_path, "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _recover(self) -> list[dict]:
        if not self.path.is_file():
            return []
        raw = self.path.read_bytes()
        cut = raw.rfind(b"\n") + 1
        if cut != len(raw):
            log.warning("registry %s: dropping %d bytes of a partial record", self.path, len(raw) - cut)
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
            raw = raw[:cut]
        return [json.loads(line) for line in raw.decode().splitlines() if line.strip()]

    def records(self, kind: str | None = None) -> list[dict]:
        with self.locked():
            recs = self._recover()
        return recs if kind is None else [r for r in recs if r.get("kind") == kind]

    def append(self, kind: str, payload: dict, chash: str) -> dict:
        with self.locked():
            recs = self._recover()
            rec = {"seq": recs[-1]["seq"] + 1 if recs else 1, "kind": kind, "config_hash": chash, **payload}
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        return rec

    def save_snapshot(self, name: str, model, chash: str) -> Path:
        from .trace.model import trace_model_to_dict
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        path = self.snapshot_dir / f"{name}.json"
        write_json(path, trace_model_to_dict(model))
        self.append("snapshot", {"name": name, "path": str(path.relative_to(self.root))}, chash)
        return path

    def latest_snapshot(self):
        snaps = self.records("snapshot")
        if not snaps:
            raise UsageError(f"registry {self.root} holds no model snapshot")
        return load_model(self.root / snaps[-1]["path"])

    def config(self) -> dict:
        recs = self.records("config")
        return recs[-1]["config"] if recs else {"seed": 0}


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_model(path):
    from .trace.model import trace_model_from_dict
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model snapshot not found: {path}")
    try:
        return trace_model_from_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"unreadable model snapshot {path}: {exc}") from None


def save_schedule(path, schedule) -> None:
    validate(schedule.to_dict(), "schedule")
    write_json(path, schedule.to_dict())


def load_schedule(path):
    from .trace.schedule import Schedule
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"schedule file not found: {path}")
    d = json.loads(p.read_text())
    validate(d, "schedule")
    return _build(Schedule.from_dict, d=d)


def _lr_at(schedule, t: int) -> float:
    return schedule.rate(schedule.interval_of(t))


def _start(args, cfg) -> tuple[RunRegistry, str]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reg = RunRegistry(out)
    chash = config_hash(cfg)
    reg.append("config", {"command": args.command, "config": cfg}, chash)
    return reg, chash


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_tune_single(args) -> int:
    cfg = load_config(args.config, args.seed)
    scfg, task = single_config(cfg), single_task(cfg)
    from .trace.io import write_traces
    from .tuning_single import audit_log, run_tuning

    reg, chash = _start(args, cfg)
    res = run_tuning(task, scfg)
    for rec in res.log:
        reg.append("event" if "event" in rec else "segment", rec, chash)
    audit = audit_log(res.log, scfg)
    reg.append("result", {"task_id": task.task_id, "final_value": res.final_value,
                          "schedule": res.best_schedule.to_dict(), "audit": audit}, chash)
    if res.model is not None:
        reg.save_snapshot("model", res.model, chash)
    out = Path(args.out)
    save_schedule(out / "schedule.json", res.best_schedule)
    write_json(out / "tuning_log.json", res.log)
    write_traces(out / "traces.jsonl", res.traces)
    bp = scfg.schedule().breakpoints
    rows = []
    for rec, tr in zip([r for r in res.log if "event" not in r], res.traces):
        if rec["superseded"]:
            continue
        for t, y in zip(tr.times, tr.values):
            if t >= bp[rec["interval"]]:
                rows.append([int(t), rec["run"], float(y), rec["rate"]])
    write_csv(out / "traces_rates.csv", ["t", "run", "y", "lr"], rows)
    return EXIT_OK


def cmd_tune_multi(args) -> int:
    cfg = load_config(args.config, args.seed)
    mcfg, tasks = multi_config(cfg), task_list(cfg)
    import numpy as np

    from .seeding import derive_rng
    from .tasks import run_schedule
    from .trace.io import write_traces
    from .trace.sampling import sample_trajectories
    from .tuning_multi import run_multi_tuning

    reg, chash = _start(args, cfg)

    def on_round(r, model, refs, J):
        reg.append("round", {"round": r, "J": J, "references": np.asarray(refs).tolist()}, chash)
        reg.save_snapshot(f"round_{r + 1:03d}", model, chash)

    res = run_multi_tuning(tasks, mcfg, callback=on_round)
    for rec in res.log:
        reg.append("run", rec, chash)
    reg.save_snapshot("model", res.model, chash)
    out = Path(args.out)
    (out / "schedules").mkdir(exist_ok=True)
    for tid, sched in res.recommended.items():
        save_schedule(out / "schedules" / f"{tid}.json", sched)
    write_json(out / "recommended.json", {tid: s.to_dict() for tid, s in res.recommended.items()})
    write_traces(out / "traces.jsonl", res.traces)
    _write_embeddings(out / "embeddings.csv", res.model)

    n_samples = cfg.get("export", {}).get("n_samples", 256)
    rows = []
    for i, task in enumerate(tasks):
        sched = res.recommended[task.task_id]
        actual = run_schedule(task, sched, mcfg.runner, derive_rng(mcfg.seed, "check", i), run_id=f"check{i}")
        Y = sample_trajectories(res.model, sched, n_samples, actual.times, derive_rng(mcfg.seed, "predict", i),
                                task_index=i)
        q = np.quantile(Y, [0.05, 0.5, 0.95], axis=0)
        for j, (t, y) in enumerate(zip(actual.times, actual.values)):
            rows.append([task.task_id, int(t), float(y), float(q[0, j]), float(q[1, j]), float(q[2, j])])
    write_csv(out / "predicted_vs_actual.csv", ["task_id", "t", "y", "q05", "q50", "q95"], rows)
    return EXIT_OK


def cmd_warm_start(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not args.snapshot:
        raise UsageError("warm-start needs --snapshot")
    model = load_model(args.snapshot)
    if model.embedding is None:
        raise UsageError("snapshot has no task embedding; warm start needs a multi-task model")
    mcfg = multi_config(cfg)
    ws = {"prefix_intervals": 1, "n_w": 32, "n_traj": 32, "n_candidates": 64, "embedding_steps": 150,
          **cfg.get("warm_start", {})}
    i = ws["prefix_intervals"]
    if i >= mcfg.d:
        raise UsageError(f"prefix_intervals must be < d = {mcfg.d}")
    from .seeding import derive_rng
    from .tasks import TaskSpec, run_schedule
    from .trace.io import write_traces
    from .trace.schedule import Schedule
    from .tuning_multi import estimate_new_task_embedding, ucb_maximizer, universal_schedule, warm_start_schedule

    if "new_task" in ws:
        new_task = _build(TaskSpec.from_dict, d=ws["new_task"])
    else:
        new_task = task_list(cfg)[0]
    reg, chash = _start(args, cfg)
    seed = mcfg.seed
    u = universal_schedule(model, mcfg, derive_rng(seed, "universal"))
    x, score = warm_start_schedule(model, i, mcfg, derive_rng(seed, "prefix"), n_w=ws["n_w"], n_traj=ws["n_traj"],
                                   n_candidates=ws["n_candidates"])
    full0 = mcfg.schedule(list(x) + list(u[i:]))
    prefix = Schedule(full0.breakpoints[:i + 1], tuple(x), mcfg.lr_min, mcfg.lr_max)
    tr = run_schedule(new_task, prefix, mcfg.runner, derive_rng(seed, "prefix_run"), run_id="prefix",
                      task_index=model.num_tasks)
    est = estimate_new_task_embedding(model, [tr], derive_rng(seed, "embedding"), steps=ws["embedding_steps"])
    full = mcfg.schedule(ucb_maximizer(est.model, est.task_index, mcfg.alpha_rec, derive_rng(seed, "rec"), mcfg))

    out = Path(args.out)
    save_schedule(out / "universal.json", mcfg.schedule(u))
    save_schedule(out / "prefix.json", full0)
    save_schedule(out / "schedule.json", full)
    write_traces(out / "traces.jsonl", [tr])
    summary = {"task_id": new_task.task_id, "prefix_intervals": i, "prefix_values": [float(v) for v in x],
               "prefix_score": score, "w_new": [float(v) for v in est.w], "elbo": est.elbo,
               "schedule": full.to_dict(), "universal": [float(v) for v in u]}
    write_json(out / "warm_start.json", summary)
    reg.append("warm_start", summary, chash)
    reg.save_snapshot("model", est.model, chash)
    return EXIT_OK


def cmd_run_baselines(args) -> int:
    cfg = load_config(args.config, args.seed)
    scfg, task = single_config(cfg), single_task(cfg)
    bl = {"n_constant": 5, "gammas": [0.5, 0.63, 0.77, 0.9], "n_initial": 3, **cfg.get("baselines", {})}
    import numpy as np

    from .seeding import derive_rng, derive_seed
    from .tasks import best_constant_baseline, constant_grid, decay_grid, exponential_decay_baseline
    from .trace.io import write_traces

    reg, chash = _start(args, cfg)
    T = scfg.total_steps
    const = best_constant_baseline(task, constant_grid(scfg.lr_min, scfg.lr_max, bl["n_constant"]), T, scfg.runner,
                                   seed=derive_seed(cfg["seed"], "constant"))
    rows, traces = [], []
    for lr, final in const.finals.items():
        rows.append(["constant", "", "", lr, final])
        traces.append(const.traces[lr])
    for j, (g0, g) in enumerate(decay_grid(scfg.lr_min, scfg.lr_max, tuple(bl["gammas"]), bl["n_initial"])):
        tr = exponential_decay_baseline(task, g0, g, T, scfg.runner, derive_rng(cfg["seed"], "decay", j))
        final = -np.inf if tr.failed else tr.final_value
        rows.append(["decay", g0, g, "", final])
        traces.append(tr)
    for row in rows:
        reg.append("baseline", dict(zip(["kind", "gamma0", "gamma", "lr", "final"], row)), chash)
    out = Path(args.out)
    write_csv(out / "baselines.csv", ["kind", "gamma0", "gamma", "lr", "final"], rows)
    write_traces(out / "traces.jsonl", [replace(tr, run_id=f"baseline{n}") for n, tr in enumerate(traces)])
    return EXIT_OK


def _write_embeddings(path, model) -> None:
    import numpy as np

    from .gp import autodiff as ad
    if model.embedding is None:
        raise UsageError("model has no task embedding")
    W = np.asarray(ad.value(model.embedding))
    ids = list(model.task_ids) + [f"task{j}" for j in range(len(model.task_ids), len(W))]
    write_csv(path, ["task_id"] + [f"w{l + 1}" for l in range(W.shape[1])],
              [[ids[j]] + [float(v) for v in W[j]] for j in range(len(W))])


def surface_rows(model, grid: int = 64, task_index: int = 0, lr_bounds=(1e-3, 1.0)):
    """phi(f_j) at the posterior mean over a grid x grid lattice of normalised (Y, x)."""
    import numpy as np

    from .gp import autodiff as ad
    from .trace.links import softplus
    from .trace.schedule import denormalize_lr

    Yg, xg = np.meshgrid(np.linspace(0, 1, grid), np.linspace(0, 1, grid), indexing="ij")
    Y, x = Yg.ravel(), xg.ravel()
    q = model.order
    X = np.column_stack([Y] * q + [x] * q)
    if model.embedding is not None:
        w = np.asarray(ad.value(model.embedding))[task_index]
        X = np.column_stack([X, np.tile(w, (len(X), 1))])
    phis = [softplus(np.asarray(ad.value(lat.posterior(X)[0]))) for lat in model.latent]
    y_raw = model.normalizer.inverse(Y)
    lr = denormalize_lr(x, *lr_bounds)
    header = ["y", "Y", "x", "lr"] + [f"phi_f{j + 1}" for j in range(len(phis))]
    rows = [[float(y_raw[n]), float(Y[n]), float(x[n]), float(lr[n])] + [float(p[n]) for p in phis]
            for n in range(len(Y))]
    return header, rows


def cmd_export_plot(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind {args.kind!r}; choose from {', '.join(PLOT_KINDS)}")
    reg = RunRegistry(args.registry)
    if not reg.exists() or not reg.records():
        raise UsageError(f"registry {args.registry} is empty")
    cfg = reg.config()
    exp = {"n_samples": 256, "grid": 64, **cfg.get("export", {})}
    section = cfg.get("single", {}) if "single" in cfg or "multi" not in cfg else cfg["multi"]
    lr_bounds = (section.get("lr_min", 1e-3), section.get("lr_max", 1.0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "surface":
        write_csv(out, *surface_rows(reg.latest_snapshot(), exp["grid"], args.task, lr_bounds))
    elif args.kind == "embeddings":
        _write_embeddings(out, reg.latest_snapshot())
    elif args.kind == "traces":
        from .trace.io import read_traces
        path = reg.root / "traces.jsonl"
        if not path.is_file():
            raise UsageError(f"registry {args.registry} holds no traces")
        rows = [[int(t), tr.run_id, float(y), _lr_at(tr.schedule, int(t))]
                for tr in read_traces(path) for t, y in zip(tr.times, tr.values)]
        write_csv(out, ["t", "run", "y", "lr"], rows)
    else:
        import numpy as np

        from .seeding import derive_rng
        from .trace.sampling import sample_trajectories
        model = reg.latest_snapshot()
        sched_path = reg.root / "schedule.json"
        if not sched_path.is_file():
            cands = sorted((reg.root / "schedules").glob("*.json"))
            if not cands:
                raise UsageError(f"registry {args.registry} holds no schedule to predict")
            sched_path = cands[min(args.task, len(cands) - 1)]
        sched = load_schedule(sched_path)
        every = cfg.get("runner", {}).get("record_every", 50)
        times = sorted(set(range(0, sched.total_steps + 1, every)) | set(sched.breakpoints))
        task_index = min(args.task, max(model.num_tasks - 1, 0))
        Y = sample_trajectories(model, sched, exp["n_samples"], times, derive_rng(cfg.get("seed", 0), "fan"),
                                task_index=task_index)
        q = np.quantile(Y, [0.05, 0.5, 0.95], axis=0)
        write_csv(out, ["t", "q05", "q50", "q95"],
                  [[t, float(q[0, j]), float(q[1, j]), float(q[2, j])] for j, t in enumerate(times)])
    return EXIT_OK


COMMANDS = {
    "tune-single": cmd_tune_single,
    "tune-multi": cmd_tune_multi,
    "warm-start": cmd_warm_start,
    "run-baselines": cmd_run_baselines,
    "export-plot": cmd_export_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lrtune", description="Learning-rate schedule tuning with probabilistic trace models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("tune-single", "tune-multi", "warm-start", "run-baselines"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        if name == "warm-start":
            s.add_argument("--snapshot", required=True)
    e = sub.add_parser("export-plot")
    e.add_argument("--registry", required=True)
    e.add_argument("--kind", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--task", type=int, default=0)
    e.add_argument("--threads", type=int)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            for var in THREAD_VARS:
                os.environ[var] = str(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lrtune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure inside a run maps to exit 1
        log.debug("run failed", exc_info=True)
        print(f"lrtune: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
