"""Pipeline stages behind the command line: demand, assignment, rasterization,
comparison, extraction, synthesis and experiment series.

Every stage writes its outputs plus a ``<stage>.manifest.json`` recording
input hashes, parameters and output hashes.  A stage whose manifest still
matches its inputs and outputs is skipped, which makes long series
resumable.  Manifests hold no timings or absolute paths so that repeated
runs produce byte-identical JSON; wall-clock timings go to ``run.log``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .assign import AssignmentResult, BPRParams, FWConfig, flows_from_csv, frank_wolfe
from .demand import (DemandConfig, ODMatrix, ZoneGrid, boost_external_zones, build_zones,
                     detect_external_zones, od_from_csv, od_to_csv, select_centroid_nodes,
                     synthesize_demand)
from .network import (DEFAULT_CLASS_TABLE, ClassParams, NetworkError, RoadClass, RoadNetwork,
                      assign_class_params, class_table_to_json, clip_to_frame, extract_by_class,
                      length_reduction_rate, load_network, parse_class_table, reduce_links_random,
                      serialize_network, synth_grid_city)
from .raster import GridSpec, TGDistribution, build_tg
from .report import (default_thresholds, hotspots, network_stats, otm_lines, write_geojson,
                     write_report, write_svg, write_text)
from .uot import UOTConfig, UOTResult, tgw_distance

FORMAT_VERSION = 1

log = logging.getLogger("tgnet")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration (exit code 2)."""


class NotConverged(RuntimeError):
    """Raised after outputs are written when a solver hit its iteration cap."""


# --------------------------------------------------------------------------
# configuration

_KNOWN_KEYS = {"reference", "target", "class_table", "demand", "bpr", "frank_wolfe", "grid",
               "uot", "report", "output_dir", "seed", "clip_to_frame", "extract", "synth",
               "experiment"}


@dataclass(frozen=True)
class ReportConfig:
    min_mass_rel: float = 1e-4
    min_distance_cells: float = 2.0
    top_k: int = 10


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    reference: Path | None = None
    target: Path | None = None
    class_table: Path | None = None
    demand: DemandConfig = DemandConfig()
    detect_external: bool = False
    bpr: BPRParams = BPRParams()
    fw: FWConfig = FWConfig()
    cell_size_km: float = 0.05
    uot: UOTConfig = UOTConfig()
    report: ReportConfig = ReportConfig()
    output_dir: Path = Path("out")
    seed: int = 0
    clip: bool = False
    extract: Mapping[str, Any] = field(default_factory=dict)
    synth: Mapping[str, Any] = field(default_factory=dict)
    experiment: Mapping[str, Any] = field(default_factory=dict)
    raw: Mapping[str, Any] = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path, seed: int | None = None, output_dir=None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_json(obj, path.parent, seed=seed, output_dir=output_dir)

    @classmethod
    def from_json(cls, obj: Mapping, base_dir: Path, seed: int | None = None,
                  output_dir=None) -> "RunConfig":
        if not isinstance(obj, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base_dir = Path(base_dir)

        def rel(key):
            v = obj.get(key)
            if v is None:
                return None
            if not isinstance(v, str):
                raise ConfigError(f"{key}: expected a path string")
            return base_dir / v

        try:
            dem = dict(obj.get("demand") or {})
            detect = bool(dem.pop("detect_external_zones", False))
            grid = dict(obj.get("grid") or {})
            rep = dict(obj.get("report") or {})
            cfg = cls(
                base_dir=base_dir,
                reference=rel("reference"), target=rel("target"),
                class_table=rel("class_table"),
                demand=DemandConfig.from_json(dem), detect_external=detect,
                bpr=BPRParams(**(obj.get("bpr") or {})),
                fw=FWConfig(**(obj.get("frank_wolfe") or {})),
                cell_size_km=float(grid.pop("cell_size_km", 0.05)),
                uot=UOTConfig.from_json(obj.get("uot")),
                report=ReportConfig(**rep),
                output_dir=base_dir / (obj.get("output_dir") or "out"),
                seed=int(obj.get("seed", 0)),
                clip=bool(obj.get("clip_to_frame", False)),
                extract=dict(obj.get("extract") or {}),
                synth=dict(obj.get("synth") or {}),
                experiment=dict(obj.get("experiment") or {}),
                raw=dict(obj))
            if grid:
                raise ConfigError(f"unknown grid keys: {sorted(grid)}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not cfg.cell_size_km > 0:
            raise ConfigError("grid.cell_size_km must be positive")
        if not 0 <= cfg.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        return cfg

    def require(self, key: str) -> Path:
        p = getattr(self, key)
        if p is None:
            raise ConfigError(f"config lacks {key!r}")
        return p

    def params(self) -> dict:
        """Parameters that determine stage outputs (recorded in manifests)."""
        return {"demand": self.demand.to_json(), "detect_external_zones": self.detect_external,
                "bpr": {"alpha": self.bpr.alpha, "beta": self.bpr.beta},
                "frank_wolfe": {"max_iterations": self.fw.max_iterations,
                                "gap_tolerance": self.fw.gap_tolerance,
                                "line_search_tolerance": self.fw.line_search_tolerance},
                "cell_size_km": self.cell_size_km, "uot": self.uot.to_json(),
                "report": {"min_mass_rel": self.report.min_mass_rel,
                           "min_distance_cells": self.report.min_distance_cells,
                           "top_k": self.report.top_k},
                "seed": self.seed, "clip_to_frame": self.clip}


# --------------------------------------------------------------------------
# manifests and files

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _relname(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return Path(path).name


@dataclass
class Stage:
    """One resumable stage writing into ``out_dir``."""

    name: str
    out_dir: Path
    root: Path  # paths in the manifest are relative to this
    inputs: list[Path]
    params: Mapping[str, Any]

    @property
    def manifest_path(self) -> Path:
        return self.out_dir / f"{self.name}.manifest.json"

    def _input_hashes(self) -> dict:
        out = {}
        for p in self.inputs:
            if not Path(p).exists():
                raise FileNotFoundError(f"missing input {p} (run the upstream stage first)")
            out[_relname(p, self.root)] = sha256_file(Path(p))
        return dict(sorted(out.items()))

    def up_to_date(self) -> bool:
        if not self.manifest_path.exists():
            return False
        try:
            old = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        if (old.get("format_version") != FORMAT_VERSION or old.get("params") != _jsonable(self.params)
                or old.get("inputs") != self._input_hashes() or not old.get("complete")):
            return False
        for name, digest in old.get("outputs", {}).items():
            p = self.out_dir / name
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def finish(self, outputs: list[Path], extra: Mapping[str, Any] | None = None,
               complete: bool = True) -> Path:
        man = {"format_version": FORMAT_VERSION, "stage": self.name,
               "inputs": self._input_hashes(), "params": _jsonable(self.params),
               "outputs": {_relname(p, self.out_dir): sha256_file(p) for p in sorted(outputs)},
               "complete": complete}
        if extra:
            man.update(_jsonable(extra))
        return write_text(self.manifest_path, json.dumps(man, indent=1, sort_keys=True) + "\n")


def _jsonable(obj):
    return json.loads(json.dumps(obj, sort_keys=True, default=str))


class _Timer:
    def __init__(self, what: str):
        self.what = what

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        log.info("%s %.3f s%s", self.what, time.perf_counter() - self.t0,
                 " (failed)" if exc[0] else "")


# --------------------------------------------------------------------------
# loading

def class_table(cfg: RunConfig) -> list[ClassParams]:
    if cfg.class_table is None:
        return list(DEFAULT_CLASS_TABLE)
    return parse_class_table(cfg.class_table.read_text(encoding="utf-8"))


def load_role(cfg: RunConfig, role: str) -> RoadNetwork:
    if role not in ("ref", "target"):
        raise ConfigError(f"unknown role {role!r}; expected 'ref' or 'target'")
    path = cfg.require("reference" if role == "ref" else "target")
    net = load_network(path)
    if cfg.clip:
        net = clip_to_frame(net)
    return assign_class_params(net, class_table(cfg))


def _role_path(cfg: RunConfig, role: str) -> Path:
    return cfg.require("reference" if role == "ref" else "target")


def _stage_inputs(cfg: RunConfig, *paths) -> list[Path]:
    extra = [cfg.class_table] if cfg.class_table is not None else []
    return [Path(p) for p in paths] + extra


def _zones(cfg: RunConfig, ref: RoadNetwork) -> ZoneGrid:
    dcfg = demand_config(cfg, ref)
    zones = build_zones(ref.frame, dcfg.zone_size_km).with_volumes(dcfg.base_generation_vph,
                                                                  dcfg.base_attraction_vph)
    return boost_external_zones(zones, dcfg.external_zones, dcfg.boost_per_road_vph)


def demand_config(cfg: RunConfig, ref: RoadNetwork) -> DemandConfig:
    dcfg = cfg.demand
    if cfg.detect_external:
        zones = build_zones(ref.frame, dcfg.zone_size_km)
        dcfg = replace(dcfg, external_zones=tuple(dcfg.external_zones)
                       + tuple(detect_external_zones(ref, zones)))
    return dcfg


# --------------------------------------------------------------------------
# stages

def validate(cfg: RunConfig) -> dict:
    """Diagnostics for every referenced input; raises on the first error."""
    diag: dict[str, Any] = {"config": "ok"}
    for key in ("reference", "target", "class_table"):
        p = getattr(cfg, key)
        if p is not None and not p.is_file():
            raise ConfigError(f"{key}: file not found: {p}")
    nets = {}
    for role, key in (("ref", "reference"), ("target", "target")):
        if getattr(cfg, key) is None:
            continue
        net = load_role(cfg, role)
        nets[role] = net
        diag[role] = network_stats(net) | {"frame": net.frame.to_json()}
        GridSpec(net.frame, cfg.cell_size_km)
        build_zones(net.frame, cfg.demand.zone_size_km)
    if len(nets) == 2 and nets["ref"].frame != nets["target"].frame:
        raise NetworkError("reference and target networks have different study frames")
    if nets:
        any_net = next(iter(nets.values()))
        g = GridSpec(any_net.frame, cfg.cell_size_km)
        diag["grid"] = {"m": g.m, "n": g.n, "cell_size_km": g.cell_size}
    diag["class_table"] = class_table_to_json(class_table(cfg))
    return diag


def run_demand(cfg: RunConfig, force: bool = False) -> Path:
    out = cfg.output_dir / "demand"
    stage = Stage("demand", out, cfg.base_dir, _stage_inputs(cfg, cfg.require("reference")),
                  cfg.params())
    if not force and stage.up_to_date():
        log.info("demand: up to date")
        return out
    ref = load_role(cfg, "ref")
    with _Timer("demand"):
        zones, od = synthesize_demand(ref, demand_config(cfg, ref))
    od_path = write_text(out / "od.csv", od_to_csv(od))
    zjson = [{"row": z.id[0], "col": z.id[1], "centroid_km": list(z.centroid),
              "centroid_node": od.centroid_of[z.id], "generation_vph": z.generation,
              "attraction_vph": z.attraction, "external_boost_vph": z.external_boost}
             for z in zones.zones]
    zpath = write_text(out / "zones.json", json.dumps(zjson, indent=1) + "\n")
    stage.finish([od_path, zpath], {"total_demand_vph": od.total})
    return out


def _load_od(cfg: RunConfig, net: RoadNetwork, ref: RoadNetwork) -> ODMatrix:
    od_path = cfg.output_dir / "demand" / "od.csv"
    if not od_path.exists():
        raise FileNotFoundError(f"missing {od_path} (run 'tgnet demand' first)")
    od = od_from_csv(od_path.read_text(encoding="utf-8"))
    zones = _zones(cfg, ref)
    return od.with_centroids(select_centroid_nodes(net, zones))


def run_assign(cfg: RunConfig, role: str, force: bool = False) -> AssignmentResult | None:
    out = cfg.output_dir / role
    od_path = cfg.output_dir / "demand" / "od.csv"
    stage = Stage("assign", out, cfg.base_dir,
                  _stage_inputs(cfg, _role_path(cfg, role), od_path), cfg.params())
    if not force and stage.up_to_date():
        log.info("assign %s: up to date", role)
        return None
    net = load_role(cfg, role)
    ref = net if role == "ref" else load_role(cfg, "ref")
    od = _load_od(cfg, net, ref)
    with _Timer(f"assign {role}"):
        res = frank_wolfe(net, od, cfg.bpr, cfg.fw)
    fpath = write_text(out / "flows.csv", res.to_csv())
    summ = res.summary() | {"objective_history": res.objective_history,
                            "gap_history": res.gap_history}
    spath = write_text(out / "assignment.json", json.dumps(summ, indent=1, sort_keys=True) + "\n")
    stage.finish([fpath, spath], {"converged": res.converged}, complete=res.converged)
    if not res.converged:
        raise NotConverged(f"assignment ({role}) stopped at relative gap {res.relative_gap:.3g} "
                           f"after {res.iterations} iterations")
    return res


def run_rasterize(cfg: RunConfig, role: str, force: bool = False) -> TGDistribution | None:
    out = cfg.output_dir / role
    fpath = out / "flows.csv"
    stage = Stage("rasterize", out, cfg.base_dir, _stage_inputs(cfg, _role_path(cfg, role), fpath),
                  cfg.params())
    if not force and stage.up_to_date():
        log.info("rasterize %s: up to date", role)
        return None
    if not fpath.exists():
        raise FileNotFoundError(f"missing {fpath} (run 'tgnet assign --role {role}' first)")
    net = load_role(cfg, role)
    flows = flows_from_csv(fpath.read_text(encoding="utf-8"))
    grid = GridSpec(net.frame, cfg.cell_size_km)
    with _Timer(f"rasterize {role}"):
        D = build_tg(net, flows, grid)
    tpath = write_text(out / "tg.csv", D.to_csv())
    spath = write_text(out / "tg.svg", D.to_svg())
    stage.finish([tpath, spath], {"total_mass_veh_km": D.total_mass, "cells": len(D)})
    return D


def _load_tg(cfg: RunConfig, role: str, grid: GridSpec) -> TGDistribution:
    p = cfg.output_dir / role / "tg.csv"
    if not p.exists():
        raise FileNotFoundError(f"missing {p} (run 'tgnet rasterize --role {role}' first)")
    return TGDistribution.from_csv(p.read_text(encoding="utf-8"), grid)


def compare_outputs(cfg: RunConfig, out: Path, ref: RoadNetwork, tgt: RoadNetwork,
                    D_a: TGDistribution, D_b: TGDistribution, res: UOTResult) -> list[Path]:
    grid = D_a.grid
    mm, md = default_thresholds(res.plan, grid.cell_size)
    mm = cfg.report.min_mass_rel / 1e-4 * mm
    md = cfg.report.min_distance_cells / 2.0 * md
    lines = otm_lines(res.plan, mm, md)
    hs = hotspots(lines, grid, cfg.report.top_k)
    meta = {"cell_size_km": grid.cell_size, "lambda": res.lam,
            "length_reduction": length_reduction_rate(ref, tgt),
            "reference_total_mass": D_a.total_mass, "target_total_mass": D_b.total_mass,
            "otm_min_mass": mm, "otm_min_distance_km": md, "otm_lines": len(lines)}
    stats = {"reference": network_stats(ref), "target": network_stats(tgt)}
    return [write_text(out / "result.json", res.json_text()),
            write_text(out / "plan.csv", res.plan.to_csv()),
            write_text(out / "otm.geojson", write_geojson(lines)),
            write_text(out / "overlay.svg", write_svg(ref, tgt, lines, D_a, D_b)),
            write_text(out / "report.json", write_report(meta, res, stats, hs))]


def run_compare(cfg: RunConfig, force: bool = False) -> UOTResult | None:
    out = cfg.output_dir / "compare"
    inputs = _stage_inputs(cfg, cfg.require("reference"), cfg.require("target"),
                           cfg.output_dir / "ref" / "tg.csv", cfg.output_dir / "target" / "tg.csv")
    stage = Stage("compare", out, cfg.base_dir, inputs, cfg.params())
    if not force and stage.up_to_date():
        log.info("compare: up to date")
        return None
    ref, tgt = load_role(cfg, "ref"), load_role(cfg, "target")
    if ref.frame != tgt.frame:
        raise NetworkError("reference and target networks have different study frames")
    grid = GridSpec(ref.frame, cfg.cell_size_km)
    D_a, D_b = _load_tg(cfg, "ref", grid), _load_tg(cfg, "target", grid)
    with _Timer("compare"):
        res = tgw_distance(D_a, D_b, cfg.uot)
    outputs = compare_outputs(cfg, out, ref, tgt, D_a, D_b, res)
    stage.finish(outputs, {"converged": res.converged}, complete=res.converged)
    if not res.converged:
        raise NotConverged("unbalanced transport solver hit max_iterations")
    return res


def derive_network(ref: RoadNetwork, opts: Mapping[str, Any], seed: int) -> RoadNetwork:
    mode = opts.get("mode")
    if mode == "class":
        lvl = opts.get("lowest_retained")
        if lvl is None:
            raise ConfigError("class extraction needs 'lowest_retained'")
        try:
            RoadClass.parse(lvl)
        except (ValueError, NetworkError) as exc:
            raise ConfigError(str(exc)) from None
        return extract_by_class(ref, lvl)
    if mode == "random":
        k = opts.get("k")
        if not isinstance(k, (int, float)) or not 0 <= k <= 1:
            raise ConfigError("random reduction needs 'k' in [0, 1]")
        return reduce_links_random(ref, float(k), int(opts.get("seed", seed)))
    raise ConfigError(f"unknown extraction mode {mode!r}; expected 'class' or 'random'")


def run_extract(cfg: RunConfig) -> Path:
    opts = dict(cfg.extract)
    if not opts:
        raise ConfigError("config lacks an 'extract' section")
    ref_path = cfg.require("reference")
    net = load_network(ref_path)
    derived = derive_network(net, opts, cfg.seed)
    name = opts.get("name") or (f"{opts['mode']}-{opts.get('lowest_retained', opts.get('k'))}"
                                + (f"-s{cfg.seed}" if opts["mode"] == "random" else ""))
    out = cfg.output_dir / "extract"
    p = write_text(out / f"{name}.json", serialize_network(derived))
    stage = Stage(f"extract-{name}", out, cfg.base_dir, [ref_path],
                  {"extract": opts, "seed": cfg.seed})
    stage.finish([p], {"length_reduction": length_reduction_rate(net, derived)})
    return p


def run_synth(cfg: RunConfig) -> Path:
    opts = dict(cfg.synth)
    if not opts:
        raise ConfigError("config lacks a 'synth' section")
    try:
        net = synth_grid_city(int(opts["rows"]), int(opts["cols"]), float(opts["spacing_km"]),
                              int(opts["arterial_every"]),
                              None if opts.get("secondary_every") is None
                              else int(opts["secondary_every"]))
    except KeyError as exc:
        raise ConfigError(f"synth section lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = cfg.output_dir / "synth"
    p = write_text(out / (opts.get("name", "network") + ".json"), serialize_network(net))
    Stage("synth", out, cfg.base_dir, [], {"synth": opts}).finish([p])
    return p


# --------------------------------------------------------------------------
# experiment series

EXPERIMENT_COLUMNS = ["case_id", "mode", "parameter", "seed", "length_reduction", "tgw",
                      "transport_cost", "kl_penalty", "created_mass", "destroyed_mass",
                      "lost_demand_vph", "fw_relative_gap", "converged"]


def _expand_cases(cfg: RunConfig) -> list[dict]:
    cases = cfg.experiment.get("cases")
    if not isinstance(cases, list) or not cases:
        raise ConfigError("experiment section needs a nonempty 'cases' list")
    out = []
    for c in cases:
        if not isinstance(c, Mapping) or "id" not in c or "mode" not in c:
            raise ConfigError("each experiment case needs 'id' and 'mode'")
        if c["mode"] == "random":
            seeds = c.get("seeds", [cfg.seed])
            for s in seeds:
                out.append(dict(c, seed=int(s), id=f"{c['id']}-s{int(s)}"
                                if "seeds" in c else c["id"]))
        else:
            out.append(dict(c))
    ids = [c["id"] for c in out]
    if len(set(ids)) != len(ids):
        raise ConfigError("experiment case ids must be unique")
    return out


@dataclass
class Reference:
    net: RoadNetwork
    zones: ZoneGrid
    od: ODMatrix
    tg: TGDistribution
    assignment: AssignmentResult


def prepare_reference(cfg: RunConfig) -> Reference:
    ref = load_role(cfg, "ref")
    with _Timer("reference demand"):
        zones, od = synthesize_demand(ref, demand_config(cfg, ref))
    with _Timer("reference assignment"):
        res = frank_wolfe(ref, od, cfg.bpr, cfg.fw)
    grid = GridSpec(ref.frame, cfg.cell_size_km)
    return Reference(ref, zones, od, build_tg(ref, res.flow, grid), res)


def run_case(cfg: RunConfig, ref: Reference, case: Mapping[str, Any]) -> dict:
    tgt = derive_network(ref.net, case, cfg.seed)
    grid = ref.tg.grid
    with _Timer(f"case {case['id']}"):
        if tgt.links:
            od = ref.od.with_centroids(select_centroid_nodes(tgt, ref.zones))
            res = frank_wolfe(tgt, od, cfg.bpr, cfg.fw)
            D_b = build_tg(tgt, res.flow, grid)
            lost, gap, fw_ok = res.lost_demand, res.relative_gap, res.converged
        else:
            D_b = TGDistribution(grid, {})
            lost, gap, fw_ok = ref.od.total, 0.0, True
        uot = tgw_distance(ref.tg, D_b, cfg.uot)
    param = case.get("lowest_retained") if case["mode"] == "class" else case.get("k")
    return {"case_id": case["id"], "mode": case["mode"], "parameter": param,
            "seed": case.get("seed", "") if case["mode"] == "random" else "",
            "length_reduction": length_reduction_rate(ref.net, tgt), "tgw": uot.tgw,
            "transport_cost": uot.transport_cost, "kl_penalty": uot.kl_penalty,
            "created_mass": uot.created_mass, "destroyed_mass": uot.destroyed_mass,
            "lost_demand_vph": lost, "fw_relative_gap": gap,
            "converged": bool(fw_ok and uot.converged)}


def experiment_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EXPERIMENT_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in EXPERIMENT_COLUMNS])
    return buf.getvalue()


def run_experiment(cfg: RunConfig, force: bool = False,
                   progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Run (or resume) every case; returns the table rows in case order."""
    cases = _expand_cases(cfg)
    out = cfg.output_dir / "experiment"
    inputs = _stage_inputs(cfg, cfg.require("reference"))
    ref: Reference | None = None
    rows, outputs = [], []
    for case in cases:
        stage = Stage(f"case-{case['id']}", out / "cases", cfg.base_dir, inputs,
                      cfg.params() | {"case": case})
        cpath = out / "cases" / f"{case['id']}.json"
        if not force and stage.up_to_date():
            row = json.loads(cpath.read_text(encoding="utf-8"))
            log.info("case %s: up to date", case["id"])
        else:
            if ref is None:
                ref = prepare_reference(cfg)
            row = run_case(cfg, ref, case)
            write_text(cpath, json.dumps(row, indent=1, sort_keys=True) + "\n")
            stage.finish([cpath])
        outputs.append(cpath)
        rows.append(row)
        if progress:
            progress(row)
    table = write_text(out / "experiment.csv", experiment_csv(rows))
    Stage("experiment", out, cfg.base_dir, inputs,
          cfg.params() | {"cases": cases}).finish([table] + outputs,
                                                  {"converged": all(r["converged"] for r in rows)})
    if not all(r["converged"] for r in rows):
        bad = [r["case_id"] for r in rows if not r["converged"]]
        raise NotConverged(f"cases without convergence: {', '.join(bad)}")
    return rows


__all__ = ["ConfigError", "NotConverged", "RunConfig", "ReportConfig", "validate", "run_demand",
           "run_assign", "run_rasterize", "run_compare", "run_extract", "run_synth",
           "run_experiment", "prepare_reference", "run_case", "derive_network",
           "experiment_csv", "EXPERIMENT_COLUMNS", "FORMAT_VERSION", "sha256_file"]
