"""Command-line front end.

    seqrecourse synthesize --model M --catalog C --instances I --out DIR
    seqrecourse sweep      --model M --catalog C --instances I --out DIR
    seqrecourse robustness --model M --catalog C --instances I --out DIR --theta 0 --theta 0.1
    seqrecourse validate   --model M --catalog C [--instances I]

Every input file is parsed before any work starts; on failure nothing is
written and the exit code is 2. ``RECOURSE_LOG`` sets the log level.

Instances CSV: one column per numeric feature and one per one-hot group
(holding the category label), plus optional ``id`` and ``label`` columns.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .actions import ActionError, Catalog, CatalogError, describe_step, load_catalog, trajectory
from .cwopt import CWConfig
from .exprlang import ExprNameError, ExprSyntaxError
from .nnmodel import FeatureSchema, Instance, Model, ModelFormatError, load_model
from .robustness import (RobustnessConfig, Solution, robustness_curve, write_curve_json,
                         write_robustness_csv)
from .search import (SCORE_FUNCTIONS, SearchConfig, sweep, sweep_plot_data, synthesize,
                     write_log_jsonl, write_sweep_csv)

log = logging.getLogger("seqrecourse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
META_COLUMNS = ("id", "label")


class InputError(Exception):
    pass


# -- instances ---------------------------------------------------------------

def load_instances(path, schema: FeatureSchema) -> list[Instance]:
    """Read raw-space instances; one-hot groups appear as one categorical column."""
    path = Path(path)
    numeric = [f.name for f in schema.features if f.kind == "numeric"]
    expected = set(numeric) | set(schema.groups)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in header:
            if col not in expected and col not in META_COLUMNS:
                raise InputError(f"{path}: unknown column {col!r}")
        missing = sorted(expected - set(header))
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        for rownum, row in enumerate(reader, start=2):
            raw = np.zeros(len(schema))
            for name in numeric:
                try:
                    raw[schema.index(name)] = float(row[name])
                except (TypeError, ValueError):
                    raise InputError(f"{path} row {rownum}: column {name!r} is not a number: {row[name]!r}") from None
            for g in schema.groups:
                try:
                    raw[schema.group_member(g, row[g])] = 1.0
                except KeyError:
                    raise InputError(f"{path} row {rownum}: invalid category {row[g]!r} for {g!r}") from None
            try:
                schema.validate(raw, where=f"row {rownum}")
            except ValueError as exc:
                raise InputError(f"{path}: {exc}") from None
            label = row.get("label")
            out.append(Instance(raw, row.get("id") or f"row{rownum}",
                                int(label) if label not in (None, "") else None))
    return out


def write_instances(path, schema: FeatureSchema, instances: Sequence[Instance]) -> None:
    numeric = [f.name for f in schema.features if f.kind == "numeric"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", *numeric, *schema.groups])
        for inst in instances:
            row = [inst.id, "" if inst.label is None else inst.label]
            row += [repr(float(inst.raw[schema.index(n)])) for n in numeric]
            for members in schema.groups.values():
                j = max(members, key=lambda m: inst.raw[m])
                row.append(schema.features[j].category)
            w.writerow(row)


# -- manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    model_path: str
    catalog_path: str
    instances_path: str | None
    out_dir: str | None
    search: SearchConfig
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["search"]["cw"] = asdict(self.search.cw)
        d["robustness"]["thetas"] = list(self.robustness.thetas)
        return d

    def digest(self) -> str:
        cfg = {k: v for k, v in self.to_json().items() if k in ("search", "robustness")}
        h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
        for p in (self.model_path, self.catalog_path, self.instances_path):
            if p:
                h.update(Path(p).read_bytes())
        return h.hexdigest()[:16]


@dataclass
class Loaded:
    manifest: RunManifest
    model: Model
    catalog: Catalog
    instances: list[Instance]
    digest: str


def load_inputs(m: RunManifest, need_instances: bool = True) -> Loaded:
    """Parse every input; raises InputError naming the offending file."""
    for label, p in (("model", m.model_path), ("catalog", m.catalog_path), ("instances", m.instances_path)):
        if p is None:
            if label == "instances" and not need_instances:
                continue
            raise InputError(f"--{label} is required")
        if not Path(p).is_file():
            raise InputError(f"{label} file not found: {p}")
    try:
        model = load_model(m.model_path)
    except (ModelFormatError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{m.model_path}: {exc}") from None
    try:
        catalog = load_catalog(m.catalog_path, model.schema)
    except (CatalogError, ExprSyntaxError, ExprNameError, ValueError) as exc:
        raise InputError(f"{m.catalog_path}: {exc}") from None
    instances = load_instances(m.instances_path, model.schema) if m.instances_path else []
    return Loaded(m, model, catalog, instances, m.digest())


# -- commands ----------------------------------------------------------------

def _num(v):
    return v if isinstance(v, (int, float)) and math.isfinite(v) else None


def solution_record(ld: Loaded, inst: Instance, res) -> dict:
    cat, schema = ld.catalog, ld.model.schema
    b = res.best
    rec = {"instance_id": inst.id, "manifest": ld.digest, "seed": ld.manifest.search.seed,
           "score_fn": ld.manifest.search.score_fn, "x0": [float(v) for v in inst.raw],
           "calls": res.calls, "iterations_to_best": res.iterations_to_best}
    if b is None:
        rec.update(status="unsolved", reason=f"no feasible sequence within length {ld.manifest.search.max_length}")
        return rec
    states = trajectory(cat, b.seq.sigma, b.seq.rho, inst.raw)
    steps, deltas = [], []
    for k, i in enumerate(b.seq.sigma):
        before, after = np.asarray(states[k], float), np.asarray(states[k + 1], float)
        steps.append(describe_step(cat, cat.actions[i], before, after))
        deltas.append({schema.features[j].name: float(after[j] - before[j])
                       for j in range(len(schema)) if after[j] != before[j]})
    rec.update(status="solved", sigma=[cat.actions[i].name for i in b.seq.sigma],
               rho=[list(r) for r in b.seq.rho], exact_cost=b.exact_cost,
               h=_num(b.h), deltas=deltas, rendering=steps)
    return rec


def _negatives(ld: Loaded, report: list) -> list[Instance]:
    keep = []
    for inst in ld.instances:
        if ld.model.predict(inst.raw) == 1:
            report.append({"instance_id": inst.id, "status": "skipped", "reason": "already positive",
                           "manifest": ld.digest, "seed": ld.manifest.search.seed})
        else:
            keep.append(inst)
    return keep


def cmd_synthesize(ld: Loaded) -> int:
    out = Path(ld.manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: list[dict] = []
    todo = _negatives(ld, report)
    for inst in todo:
        try:
            res = synthesize(ld.model, inst.raw, ld.catalog, ld.manifest.search)
        except (ActionError, ArithmeticError, ValueError) as exc:
            log.error("instance %s failed: %s", inst.id, exc)
            report.append({"instance_id": inst.id, "status": "error", "reason": str(exc),
                           "manifest": ld.digest, "seed": ld.manifest.search.seed})
            continue
        rec = solution_record(ld, inst, res)
        with open(out / f"solution_{inst.id}.json", "w") as fh:
            json.dump(rec, fh, indent=2)
        write_log_jsonl(res, out / f"log_{inst.id}.jsonl")
        report.append({k: rec[k] for k in ("instance_id", "status", "manifest", "seed")}
                      | {"exact_cost": rec.get("exact_cost"), "length": len(rec.get("sigma", [])) or None})
        log.info("instance %s: %s", inst.id, rec["status"])
    with open(out / "report.json", "w") as fh:
        json.dump({"manifest": ld.digest, "config": ld.manifest.to_json(), "instances": report}, fh, indent=2)
    solved = sum(r["status"] == "solved" for r in report)
    print(f"{solved}/{len(todo)} negative instances solved; outputs in {out}")
    return EXIT_OK


def cmd_sweep(ld: Loaded) -> int:
    out = Path(ld.manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = _negatives(ld, [])
    rows = sweep(ld.model, todo, ld.catalog, ld.manifest.search)
    write_sweep_csv(rows, out / "sweep.csv")
    plot = sweep_plot_data(rows) | {"manifest": ld.digest, "seed": ld.manifest.search.seed}
    with open(out / "sweep_plot.json", "w") as fh:
        json.dump(plot, fh, indent=2)
    print(f"{len(rows)} sweep rows written to {out / 'sweep.csv'}")
    return EXIT_OK


def _prior_solutions(ld: Loaded) -> list[Solution]:
    out = Path(ld.manifest.out_dir)
    by_id = {inst.id: inst for inst in ld.instances}
    sols = []
    for p in sorted(out.glob("solution_*.json")):
        rec = json.loads(p.read_text())
        if rec.get("status") != "solved":
            continue
        x0 = by_id[rec["instance_id"]].raw if rec["instance_id"] in by_id else np.asarray(rec["x0"], float)
        sigma = [ld.catalog.index(n) for n in rec["sigma"]]
        sols.append(Solution(rec["instance_id"], np.asarray(x0, float), ld.catalog.sequence(sigma, rec["rho"])))
    return sols


def cmd_robustness(ld: Loaded) -> int:
    sols = _prior_solutions(ld)
    if not sols:
        print(f"error: no solved instances found in {ld.manifest.out_dir}; run synthesize first", file=sys.stderr)
        return EXIT_FAIL
    cfg = ld.manifest.robustness
    rep = robustness_curve(ld.model, ld.catalog, sols, cfg)
    out = Path(ld.manifest.out_dir)
    write_robustness_csv(rep, out / "robustness.csv")
    write_curve_json(rep, cfg, out / "robustness_curve.json")
    with open(out / "robustness_curve.json") as fh:
        data = json.load(fh)
    data.update(manifest=ld.digest)
    with open(out / "robustness_curve.json", "w") as fh:
        json.dump(data, fh, indent=2)
    for row in rep.curve:
        print(f"theta={row['theta']:<6g} fraction={row['fraction']:.3f}")
    return EXIT_OK


def cmd_validate(ld: Loaded) -> int:
    print(f"model: {ld.model.spec.input_dim} inputs, {len(ld.model.spec.layers)} layers")
    print(f"catalog: {len(ld.catalog)} actions ({', '.join(a.name for a in ld.catalog.actions)})")
    if ld.manifest.instances_path:
        neg = sum(ld.model.predict(i.raw) == 0 for i in ld.instances)
        print(f"instances: {len(ld.instances)} ({neg} negatively classified)")
    print(f"manifest {ld.digest}")
    return EXIT_OK


COMMANDS = {"synthesize": cmd_synthesize, "sweep": cmd_sweep,
            "robustness": cmd_robustness, "validate": cmd_validate}


# -- argument handling -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqrecourse",
                                 description="Synthesize minimum-cost action sequences that flip a classifier.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--model", required=True)
        p.add_argument("--catalog", required=True)
        p.add_argument("--instances", required=name != "validate")
        p.add_argument("--out", required=name != "validate")
        p.add_argument("--max-length", type=int, default=3)
        p.add_argument("--score", choices=SCORE_FUNCTIONS, default="vanilla")
        p.add_argument("--budget", type=int, default=None, help="stop after this many optimizer calls")
        p.add_argument("--cost-bound", type=float, default=None, help="stop once a solution this cheap is found")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-iters", type=int, default=CWConfig.max_iters)
        p.add_argument("--theta", type=float, action="append", default=None)
        p.add_argument("--samples", type=int, default=RobustnessConfig.samples)
    return ap


def manifest_from_args(args) -> RunManifest:
    cw = CWConfig(seed=args.seed, max_iters=args.max_iters)
    search = SearchConfig(score_fn=args.score, max_length=args.max_length, budget=args.budget,
                          cost_bound=args.cost_bound, workers=args.workers, seed=args.seed, cw=cw)
    thetas = tuple(args.theta) if args.theta else RobustnessConfig.thetas
    rob = RobustnessConfig(thetas=thetas, samples=args.samples, seed=args.seed)
    return RunManifest(args.model, args.catalog, args.instances, args.out, search, rob)


def _setup_logging() -> None:
    level = os.environ.get("RECOURSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        manifest = manifest_from_args(args)
        ld = load_inputs(manifest, need_instances=args.command != "validate")
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return COMMANDS[args.command](ld)


if __name__ == "__main__":
    sys.exit(main())
