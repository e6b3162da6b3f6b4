"""Line-delimited JSON persistence for traces and schedules."""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .schedule import Schedule, Trace


def trace_records(trace: Trace) -> list[dict]:
    return [
        {"run_id": trace.run_id, "task_id": trace.task_id, "t": int(t), "y": float(y), "failed": bool(trace.failed)}
        for t, y in zip(trace.times, trace.values)
    ]


def write_traces(path, traces: list[Trace]) -> None:
    """One record per observation; schedules go to a sibling ``<stem>.schedules.jsonl``."""
    path = Path(path)
    with path.open("w") as fh:
        for tr in traces:
            for rec in trace_records(tr):
                fh.write(json.dumps(rec, allow_nan=True) + "\n")
    sched_path = path.with_name(path.stem + ".schedules.jsonl")
    with sched_path.open("w") as fh:
        for tr in traces:
            fh.write(json.dumps({"run_id": tr.run_id, "task_index": tr.task_index, **tr.schedule.to_dict()}) + "\n")


def read_traces(path) -> list[Trace]:
    path = Path(path)
    sched_path = path.with_name(path.stem + ".schedules.jsonl")
    schedules, task_index = {}, {}
    for line in sched_path.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            schedules[d["run_id"]] = Schedule.from_dict(d)
            task_index[d["run_id"]] = int(d.get("task_index", 0))
    runs: OrderedDict[str, list[dict]] = OrderedDict()
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            runs.setdefault(rec["run_id"], []).append(rec)
    out = []
    for run_id, recs in runs.items():
        out.append(Trace(
            task_id=recs[0]["task_id"], schedule=schedules[run_id],
            times=np.array([r["t"] for r in recs]), values=np.array([r["y"] for r in recs], dtype=float),
            failed=any(r["failed"] for r in recs), run_id=run_id, task_index=task_index[run_id],
        ))
    return out


def write_schedule(path, schedule: Schedule) -> None:
    Path(path).write_text(json.dumps(schedule.to_dict(), indent=2) + "\n")


def read_schedule(path) -> Schedule:
    return Schedule.from_dict(json.loads(Path(path).read_text()))
