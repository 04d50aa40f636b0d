"""Run measurement product: report.json and steps.csv."""
from __future__ import annotations

import csv
import json
import os


def build_report(spec_cfg: dict, engine_cfg: dict, artifact: str,
                 rank_reports: dict[int, dict], wall_s: float, init_s: float,
                 consumer: dict | None = None,
                 failures: dict | None = None) -> dict:
    steps = []
    nsteps = max((len(r.get("write_s", [])) for r in rank_reports.values()),
                 default=0)
    for step in range(nsteps):
        write = max((r["write_s"][step] for r in rank_reports.values()
                     if len(r.get("write_s", [])) > step), default=0.0)
        compute = max((r["compute_s"][step] for r in rank_reports.values()
                       if len(r.get("compute_s", [])) > step), default=0.0)
        steps.append({"step": step, "perceived_write_s": write,
                      "compute_s": compute})
    io_sum = sum(s["perceived_write_s"] for s in steps)
    skipped: list[int] = []
    for r in rank_reports.values():
        for s in r.get("summary", {}).get("skipped_steps", []):
            if s not in skipped:
                skipped.append(s)
    report = {
        "config": {"workload": spec_cfg, "engine": engine_cfg,
                   "artifact": artifact},
        "steps": steps,
        "totals": {"wall_s": wall_s, "init_s": init_s, "io_sum_s": io_sum},
        "skipped_steps": sorted(skipped),
        "ranks": {str(r): rep.get("summary", rep) for r, rep in rank_reports.items()},
    }
    if consumer is not None:
        report["consumer"] = consumer
    if failures:
        report["failures"] = {str(r): msg for r, msg in failures.items()}
    return report


def write_report(out_dir: str, report: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    with open(os.path.join(out_dir, "steps.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "perceived_write_s", "compute_s"])
        for s in report["steps"]:
            w.writerow([s["step"], repr(s["perceived_write_s"]),
                        repr(s["compute_s"])])


def load_report(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "report.json")) as f:
        return json.load(f)
