"""Batch interface: config files, presets, subcommands, report files.

    hypertori check --preset example1
    hypertori run --config run.toml --out runs/demo --jobs 4
    hypertori sieve --preset example2 --out runs/measure
    hypertori verify --config run.toml --out runs/demo

Configuration lives in a single TOML file (sections [problem], [lambda],
[numerics], [run], [measure], [verify]); every field has a default, the
flags --preset/--out/--jobs/--seed override the file, and dumping a
loaded config reproduces it byte for byte.  All detailed outputs are
line-delimited JSON records under --out; summaries go to stdout.  No
timestamps are written anywhere, so identical configs give identical
report bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:           # Python 3.10
    import tomli as tomllib

from . import presets
from .driver import measure_excluded, reconstruct_embedding, run, run_point
from .homological import GeneratingData
from .kamstep import KamParams
from .model import (NormalForm, ProblemInstance, SeriesMatrix, check_hyperbolicity,
                    check_mb, check_nd, check_russmann, compute_eta)
from .series import Series, add
from .structure import PoissonStructure
from .verify import integrate, invariance_residual, rotation_numbers, torus_flow


# ----------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    # [problem]
    preset: str = "example1"            # "" means inline
    eps: float = 1e-4
    options: dict = field(default_factory=dict)   # preset keyword overrides
    inline: dict = field(default_factory=dict)    # full inline problem spec
    # [lambda]
    lambda_box: list = field(default_factory=list)
    lambda_grid: list = field(default_factory=list)
    # [numerics]
    numerics: KamParams = field(default_factory=KamParams)
    # [run]
    out: str = "runs/out"
    jobs: int = 0                       # 0: logical cores
    seed: int = 0
    embedding: bool = False
    embedding_grid: int = 32
    # [measure]
    measure_gammas: list = field(default_factory=lambda: [0.01, 0.02, 0.04, 0.08])
    measure_grid: int = 10000  # total lambda samples, split across axes
    measure_K: int = 30
    # [verify]
    verify_grid: int = 128
    rotation_T: float = 1000.0
    rotation_dt: float = 0.05
    energy_T: float = 3.0
    energy_dt: float = 0.01


class ConfigError(ValueError):
    pass


_NUMERIC_FIELDS = {f.name: f.type for f in dataclasses.fields(KamParams)}


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return normalize_config(raw, where=path)


def normalize_config(raw: dict, where: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    known = {"problem", "lambda", "numerics", "run", "measure", "verify"}
    for section in raw:
        if section not in known:
            raise ConfigError(f"{where}: unknown section [{section}]")

    prob = dict(raw.get("problem", {}))
    cfg.preset = prob.pop("preset", cfg.preset)
    cfg.eps = float(prob.pop("eps", cfg.eps))
    cfg.inline = prob.pop("inline", {})
    cfg.options = prob.pop("options", {})
    if prob:
        raise ConfigError(f"{where}: unknown key problem.{sorted(prob)[0]}")
    if cfg.preset and cfg.preset not in ("example1", "example2",
                                         "preset1", "preset2"):
        raise ConfigError(f"{where}: unknown preset {cfg.preset!r}")
    if not cfg.preset and not cfg.inline:
        raise ConfigError(f"{where}: need either a preset or an inline problem")

    lam = dict(raw.get("lambda", {}))
    cfg.lambda_box = [list(map(float, iv)) for iv in lam.pop("box", [])]
    cfg.lambda_grid = [int(v) for v in lam.pop("grid", [])]
    if lam:
        raise ConfigError(f"{where}: unknown key lambda.{sorted(lam)[0]}")
    if cfg.lambda_box and len(cfg.lambda_grid) != len(cfg.lambda_box):
        raise ConfigError(f"{where}: lambda.grid must match lambda.box length")

    num = dict(raw.get("numerics", {}))
    kwargs = {}
    for key, val in num.items():
        if key not in _NUMERIC_FIELDS:
            raise ConfigError(f"{where}: unknown key numerics.{key}")
        kwargs[key] = val
    try:
        cfg.numerics = KamParams(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: [numerics] {exc}") from None

    runsec = dict(raw.get("run", {}))
    cfg.out = str(runsec.pop("out", cfg.out))
    cfg.jobs = int(runsec.pop("jobs", cfg.jobs))
    cfg.seed = int(runsec.pop("seed", cfg.seed))
    cfg.embedding = bool(runsec.pop("embedding", cfg.embedding))
    cfg.embedding_grid = int(runsec.pop("embedding_grid", cfg.embedding_grid))
    if runsec:
        raise ConfigError(f"{where}: unknown key run.{sorted(runsec)[0]}")

    meas = dict(raw.get("measure", {}))
    cfg.measure_gammas = [float(g) for g in meas.pop("gammas", cfg.measure_gammas)]
    cfg.measure_grid = int(meas.pop("grid", cfg.measure_grid))
    cfg.measure_K = int(meas.pop("K", cfg.measure_K))
    if meas:
        raise ConfigError(f"{where}: unknown key measure.{sorted(meas)[0]}")

    ver = dict(raw.get("verify", {}))
    cfg.verify_grid = int(ver.pop("grid", cfg.verify_grid))
    cfg.rotation_T = float(ver.pop("rotation_T", cfg.rotation_T))
    cfg.rotation_dt = float(ver.pop("rotation_dt", cfg.rotation_dt))
    cfg.energy_T = float(ver.pop("energy_T", cfg.energy_T))
    cfg.energy_dt = float(ver.pop("energy_dt", cfg.energy_dt))
    if ver:
        raise ConfigError(f"{where}: unknown key verify.{sorted(ver)[0]}")
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(q) for q in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def dump_config(cfg: RunConfig) -> str:
    """Canonical TOML text; load(dump(cfg)) reproduces cfg exactly."""
    lines = ["[problem]",
             f"preset = {_toml_value(cfg.preset)}",
             f"eps = {_toml_value(cfg.eps)}"]
    if cfg.options:
        lines.append("[problem.options]")
        for k in sorted(cfg.options):
            lines.append(f"{k} = {_toml_value(cfg.options[k])}")
    if cfg.inline:
        lines.append("[problem.inline]")
        for k in sorted(cfg.inline):
            lines.append(f"{k} = {_toml_value(cfg.inline[k])}")
    lines.append("")
    lines.append("[lambda]")
    lines.append(f"box = {_toml_value(cfg.lambda_box)}")
    lines.append(f"grid = {_toml_value(cfg.lambda_grid)}")
    lines.append("")
    lines.append("[numerics]")
    for f_ in dataclasses.fields(KamParams):
        val = getattr(cfg.numerics, f_.name)
        if val is None:
            continue
        lines.append(f"{f_.name} = {_toml_value(val)}")
    lines.append("")
    lines.append("[run]")
    lines.append(f"out = {_toml_value(cfg.out)}")
    lines.append(f"jobs = {_toml_value(cfg.jobs)}")
    lines.append(f"seed = {_toml_value(cfg.seed)}")
    lines.append(f"embedding = {_toml_value(cfg.embedding)}")
    lines.append(f"embedding_grid = {_toml_value(cfg.embedding_grid)}")
    lines.append("")
    lines.append("[measure]")
    lines.append(f"gammas = {_toml_value(cfg.measure_gammas)}")
    lines.append(f"grid = {_toml_value(cfg.measure_grid)}")
    lines.append(f"K = {_toml_value(cfg.measure_K)}")
    lines.append("")
    lines.append("[verify]")
    lines.append(f"grid = {_toml_value(cfg.verify_grid)}")
    lines.append(f"rotation_T = {_toml_value(cfg.rotation_T)}")
    lines.append(f"rotation_dt = {_toml_value(cfg.rotation_dt)}")
    lines.append(f"energy_T = {_toml_value(cfg.energy_T)}")
    lines.append(f"energy_dt = {_toml_value(cfg.energy_dt)}")
    lines.append("")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# instances from config


def _inline_instance(spec: dict, d_max: int) -> ProblemInstance:
    need = {"n", "l", "m", "E", "C", "Omega", "A", "M", "n0"}
    missing = need - set(spec)
    if missing:
        raise ConfigError(f"inline problem misses {sorted(missing)}")
    n, l, m = int(spec["n"]), int(spec["l"]), int(spec["m"])
    E = np.array(spec["E"], dtype=float)
    C = np.array(spec["C"], dtype=float)
    if not np.array_equal(C, -np.array(C).T):
        bad = np.argwhere(C != -np.array(C).T)
        r, c = (int(v) for v in bad[0])
        raise ConfigError(f"inline C is not antisymmetric at entry ({r}, {c})")
    try:
        S = PoissonStructure(n=n, l=l, m=m, E=E, C=C)
    except ValueError as exc:
        raise ConfigError(f"inline structure: {exc}") from None

    def matrix(key, rows, cols):
        val = spec.get(key)
        if val is None:
            return SeriesMatrix.constant(np.zeros((rows, cols)), n)
        arr = np.array(val, dtype=float)
        if arr.shape != (rows, cols):
            raise ConfigError(f"inline {key} must be {rows}x{cols}")
        return SeriesMatrix.constant(arr, n)

    def coeff_series(key, max_K=8):
        rows = spec.get(key, [])
        terms = [(tuple(r["k"]), tuple(r["i"]), tuple(r["j"]),
                  complex(r.get("re", 0.0), r.get("im", 0.0))) for r in rows]
        K = max([1] + [sum(abs(q) for q in t[0]) for t in terms])
        return Series.from_terms(n, l, m, d_max, min(K, max_K), terms)

    try:
        N = NormalForm(
            e=float(spec.get("e", 0.0)),
            Omega=np.array(spec["Omega"], dtype=float),
            A=matrix("A", l, l),
            B=matrix("B", l, 2 * m),
            M=matrix("M", 2 * m, 2 * m),
            h=coeff_series("h"),
        )
    except ValueError as exc:
        raise ConfigError(f"inline normal form: {exc}") from None
    return ProblemInstance(structure=S, normal_form=N, P=coeff_series("P"),
                           n0=int(spec["n0"]), lam=None, name="inline")


def _lambda_points(cfg: RunConfig):
    if not cfg.lambda_box:
        return [None]
    axes = [np.linspace(lo, hi, g)
            for (lo, hi), g in zip(cfg.lambda_box, cfg.lambda_grid)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return [tuple(float(g.ravel()[i]) for g in mesh)
            for i in range(mesh[0].size)]


def instances_from_config(cfg: RunConfig):
    """Materialize the problem family the config describes."""
    if cfg.inline:
        return [_inline_instance(cfg.inline, cfg.numerics.d_max)]
    opts = dict(cfg.options)
    opts.setdefault("eps", cfg.eps)
    opts.setdefault("d_max", cfg.numerics.d_max)
    out = []
    for pt in _lambda_points(cfg):
        kw = dict(opts)
        if pt is not None:
            if cfg.preset in ("example1", "preset1"):
                kw["lam"] = pt[0]
            else:
                kw["lam"] = pt
        out.append(presets.get(cfg.preset, **kw))
    return out


def omega_fn_from_config(cfg: RunConfig):
    opts = cfg.options
    if cfg.preset in ("example1", "preset1"):
        return presets.example1_omega_fn(opts.get("alpha", 1.0),
                                         opts.get("beta", presets.GOLDEN))
    if cfg.preset in ("example2", "preset2"):
        return presets.example2_omega_fn()
    inst = _inline_instance(cfg.inline, cfg.numerics.d_max)
    return lambda lam: inst.omega


def default_lambda_box(cfg: RunConfig):
    if cfg.lambda_box:
        return cfg.lambda_box
    if cfg.preset in ("example1", "preset1"):
        return [[-0.05, 0.05]]
    return [[0.9, 1.1], [1.5, 1.7]]


# ----------------------------------------------------------------------
# result serialization


def _jline(fh, obj):
    fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _matrix_records(tag: str, mat: SeriesMatrix):
    rows, cols = mat.shape
    out = []
    for k in mat.nonzero_modes(include_zero=True):
        M = mat.mode(k)
        for r in range(rows):
            for c in range(cols):
                v = M[r, c]
                if v != 0.0:
                    out.append({"record": tag, "r": r, "c": c, "k": list(k),
                                "re": v.real, "im": v.imag})
    return out


def write_torus_file(path: str, result, inst: ProblemInstance):
    """Full per-point dump: normal form, perturbation, transforms, embedding."""
    st = result.state
    S = inst.structure
    with open(path, "w") as fh:
        _jline(fh, {
            "record": "meta",
            "lam": None if result.lam is None else list(map(float, result.lam)),
            "status": result.status,
            "Omega_inf": list(map(float, result.Omega_inf)),
            "omega_inf": list(map(float, result.omega_inf)),
            "drift": list(map(float, result.drift)),
            "steps": result.steps,
            "final_residual": result.final_residual,
            "dims": {"n": S.n, "l": S.l, "m": S.m, "n0": inst.n0},
            "E": S.E.tolist(), "C": S.C.tolist(),
            "domain": {"r": st.r, "s": st.s, "gamma": st.gamma},
            "d_max": st.P.d_max, "K_max": st.P.K_max,
            "NK_max": st.N.A.K_max,
        })
        _jline(fh, {"record": "normal_form", "e": st.N.e,
                    "Omega": list(map(float, st.N.Omega))})
        for tag, mat in (("A", st.N.A), ("B", st.N.B), ("M", st.N.M)):
            for rec in _matrix_records(tag, mat):
                _jline(fh, rec)
        for rec in st.N.h.to_records():
            rec["record"] = "h_term"
            _jline(fh, rec)
        for rec in st.P.to_records():
            rec["record"] = "P_term"
            _jline(fh, rec)
        for nu, (g, y_star) in enumerate(st.transform_log):
            _jline(fh, {"record": "transform", "nu": nu, "K_plus": g.K_plus,
                        "n0": g.n0, "omega": list(map(float, g.omega)),
                        "y_star": list(map(float, y_star)),
                        "F_01": list(map(float, g.F_01))})
            for k, v in sorted(g.f_k0.items()):
                _jline(fh, {"record": "f_k0", "nu": nu, "k": list(k),
                            "re": v.real, "im": v.imag})
            for k, vec in sorted(g.f_k1.items()):
                for b, v in enumerate(vec):
                    if v != 0.0:
                        _jline(fh, {"record": "f_k1", "nu": nu, "k": list(k),
                                    "b": b, "re": v.real, "im": v.imag})
            for k, vec in sorted(g.F_k1.items()):
                for c, v in enumerate(vec):
                    if v != 0.0:
                        _jline(fh, {"record": "F_k1", "nu": nu, "k": list(k),
                                    "c": c, "re": v.real, "im": v.imag})
        if result.embedding is not None:
            emb = result.embedding
            G = emb["theta"].shape[0]
            _jline(fh, {"record": "embedding_meta", "grid": G,
                        "distance": emb["distance"]})
            states = emb["states"].reshape(-1, S.l + S.n + 2 * S.m)
            for i in range(states.shape[0]):
                _jline(fh, {"record": "embedding_state", "idx": i,
                            "state": [float(v) for v in states[i]]})


def read_torus_file(path: str):
    """Rebuild (instance-like data, final H parts, transforms, embedding)."""
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    by = {}
    for rec in records:
        by.setdefault(rec["record"], []).append(rec)
    meta = by["meta"][0]
    dims = meta["dims"]
    n, l, m = dims["n"], dims["l"], dims["m"]
    S = PoissonStructure(n=n, l=l, m=m, E=np.array(meta["E"]),
                         C=np.array(meta["C"]))
    NK = meta["NK_max"]

    def matrix(tag, rows, cols):
        grids = np.zeros((rows, cols) + (2 * NK + 1,) * n, dtype=complex)
        for rec in by.get(tag, []):
            grids[(rec["r"], rec["c"])
                  + tuple(q + NK for q in rec["k"])] = complex(rec["re"], rec["im"])
        return SeriesMatrix(n, NK, grids)

    nf = by["normal_form"][0]
    d_max, K_max = meta["d_max"], meta["K_max"]
    h = Series.from_records(n, l, m, d_max, max(K_max, 1),
                            by.get("h_term", []))
    N = NormalForm(e=nf["e"], Omega=np.array(nf["Omega"]),
                   A=matrix("A", l, l), B=matrix("B", l, 2 * m),
                   M=matrix("M", 2 * m, 2 * m), h=h)
    P = Series.from_records(n, l, m, d_max, max(K_max, 1),
                            by.get("P_term", []))

    transforms = []
    for t in sorted(by.get("transform", []), key=lambda r: r["nu"]):
        nu = t["nu"]
        f_k0 = {tuple(r["k"]): complex(r["re"], r["im"])
                for r in by.get("f_k0", []) if r["nu"] == nu}
        f_k1 = {}
        for r in by.get("f_k1", []):
            if r["nu"] == nu:
                f_k1.setdefault(tuple(r["k"]),
                                np.zeros(l, dtype=complex))[r["b"]] = \
                    complex(r["re"], r["im"])
        F_k1 = {}
        for r in by.get("F_k1", []):
            if r["nu"] == nu:
                F_k1.setdefault(tuple(r["k"]),
                                np.zeros(2 * m, dtype=complex))[r["c"]] = \
                    complex(r["re"], r["im"])
        g = GeneratingData(K_plus=t["K_plus"], omega=np.array(t["omega"]),
                           f_k0=f_k0, f_k1=f_k1, F_k1=F_k1,
                           F_01=np.array(t["F_01"]),
                           y_star=np.array(t["y_star"]), n0=t["n0"])
        transforms.append((g, np.array(t["y_star"])))

    embedding = None
    if "embedding_meta" in by:
        G = by["embedding_meta"][0]["grid"]
        dim = l + n + 2 * m
        states = np.zeros((G ** n, dim))
        for rec in by["embedding_state"]:
            states[rec["idx"]] = rec["state"]
        embedding = {
            "theta": 2.0 * np.pi * np.arange(G) / G,
            "states": states.reshape((G,) * n + (dim,)),
            "distance": by["embedding_meta"][0]["distance"],
        }
    return {"meta": meta, "structure": S, "N": N, "P": P,
            "transforms": transforms, "embedding": embedding,
            "n0": dims["n0"]}


# ----------------------------------------------------------------------
# subcommands


def _prepare_out(out: str, force: bool, names=(), prefixes=()):
    """Create the output directory; refuse to clobber this command's own
    files unless --force, so check/run/sieve/verify can share one out dir."""
    os.makedirs(out, exist_ok=True)
    if force:
        return
    clashes = [f for f in sorted(os.listdir(out))
               if f in names or any(f.startswith(p) for p in prefixes)]
    if clashes:
        raise SystemExit(f"refusing to overwrite {clashes[0]!r} in {out!r} "
                         f"(use --force)")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_check(cfg: RunConfig, force: bool = False) -> int:
    _prepare_out(cfg.out, force, names=("check_report.jsonl",))
    insts = instances_from_config(cfg)
    omega_fn = omega_fn_from_config(cfg)
    box = default_lambda_box(cfg)
    gate_ok = True
    rows = []
    path = os.path.join(cfg.out, "check_report.jsonl")
    with open(path, "w") as fh:
        for inst in insts:
            N = inst.normal_form
            hyp = check_hyperbolicity(N.M.avg(), cfg.numerics.sigma0)
            ndc = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), inst.n0,
                           cfg.numerics.cond_max)
            rus = check_russmann(omega_fn, box, grid_res=9, n=inst.structure.n)
            if ndc.nd is not None:
                eta = compute_eta(ndc.nd, N.M.avg(), N.B.avg(),
                                  cfg.numerics.sigma0, inst.structure.m)
                mb = check_mb(N.A, N.B, N.M, eta.eta, cfg.numerics.r0)
            else:
                eta = None
                mb = None
            ok = hyp.passed and ndc.passed and (mb is None or mb.passed)
            gate_ok &= ok
            rec = {
                "lam": None if inst.lam is None else list(map(float, inst.lam)),
                "hyperbolic": hyp.passed,
                "spectrum": sorted([[v.real, v.imag] for v in hyp.eigenvalues]),
                "min_abs_re": hyp.min_abs_re,
                "twist_rank": rus.max_rank, "twist_full": rus.passed,
                "nd_ok": ndc.passed, "cond_U": ndc.cond_U, "cond_Y": ndc.cond_Y,
                "A_avg_singular": bool(np.linalg.matrix_rank(N.A.avg())
                                       < N.A.shape[0]),
                "eta": None if eta is None else eta.eta,
                "alpha": None if eta is None else eta.alpha,
                "rho0": None if eta is None else eta.rho0,
                "dev_M": None if mb is None else mb.dev_M,
                "dev_B": None if mb is None else mb.dev_B,
                "mb_ok": None if mb is None else mb.passed,
                "gate_ok": ok,
            }
            _jline(fh, rec)
            rows.append(rec)

    hdr = ["lam", "H)", "R) rank", "ND)", "eta", "(mb)", "gate"]
    print("  ".join(f"{h:>12}" for h in hdr))
    for rec in rows:
        print("  ".join(f"{_fmt(v):>12}" for v in [
            rec["lam"], "pass" if rec["hyperbolic"] else "FAIL",
            f"{rec['twist_rank']}{'' if rec['twist_full'] else ' (FAIL)'}",
            "pass" if rec["nd_ok"] else "FAIL",
            rec["eta"] if rec["eta"] is not None else "-",
            "pass" if rec["mb_ok"] else "FAIL" if rec["mb_ok"] is not None else "-",
            "ok" if rec["gate_ok"] else "FAIL",
        ]))
    print(f"wrote {path}")
    return 0 if gate_ok else 1


def cmd_run(cfg: RunConfig, force: bool = False) -> int:
    _prepare_out(cfg.out, force, names=("results.jsonl", "steps.jsonl"),
                 prefixes=("torus_",))
    insts = instances_from_config(cfg)
    # gate: hyperbolicity + nondegeneracy must hold unless forced
    for inst in insts:
        N = inst.normal_form
        hyp = check_hyperbolicity(N.M.avg(), cfg.numerics.sigma0)
        ndc = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), inst.n0,
                       cfg.numerics.cond_max)
        if not (hyp.passed and ndc.passed):
            if not force:
                raise SystemExit(
                    f"pre-run check failed at lam={inst.lam}; use --force "
                    f"to run anyway")
            break
    jobs = cfg.jobs if cfg.jobs > 0 else os.cpu_count() or 1
    results = run(insts, cfg.numerics, jobs=1 if len(insts) == 1 else jobs,
                  want_embedding=cfg.embedding,
                  embedding_grid=cfg.embedding_grid) \
        if jobs > 1 else [
            run_point(inst, cfg.numerics, cfg.embedding, cfg.embedding_grid)
            for inst in insts]

    res_path = os.path.join(cfg.out, "results.jsonl")
    step_path = os.path.join(cfg.out, "steps.jsonl")
    counts = {}
    hard_failure = False
    with open(res_path, "w") as rf, open(step_path, "w") as sf:
        for idx, (inst, res) in enumerate(zip(insts, results)):
            counts[res.status] = counts.get(res.status, 0) + 1
            if res.status in ("diverged", "check_failed"):
                hard_failure = True
            rec = {
                "idx": idx,
                "lam": None if res.lam is None else list(map(float, res.lam)),
                "status": res.status,
                "steps": res.steps,
                "final_residual": res.final_residual,
                "message": res.message,
            }
            if res.Omega_inf is not None:
                rec["Omega_inf"] = list(map(float, res.Omega_inf))
                rec["omega_inf"] = list(map(float, res.omega_inf))
                rec["drift"] = list(map(float, res.drift))
            if res.embedding is not None:
                rec["embedding_distance"] = res.embedding["distance"]
            _jline(rf, rec)
            for d in res.diagnostics:
                _jline(sf, {"idx": idx, **{k: v for k, v in d.items()}})
            if res.state is not None and res.status == "converged":
                write_torus_file(os.path.join(cfg.out, f"torus_{idx:04d}.jsonl"),
                                 res, inst)

    total = len(results)
    print(f"{total} point(s): " + ", ".join(
        f"{k}={v}" for k, v in sorted(counts.items())))
    drifts = [float(np.abs(r.drift).max()) for r in results
              if r.drift is not None]
    if drifts:
        print(f"max |Omega drift| = {max(drifts):.3e}")
    resids = [r.final_residual for r in results if np.isfinite(r.final_residual)]
    if resids:
        print(f"max final residual = {max(resids):.3e}")
    print(f"wrote {res_path}, {step_path}")
    return 1 if hard_failure else 0


def cmd_sieve(cfg: RunConfig, force: bool = False) -> int:
    _prepare_out(cfg.out, force, names=("measure.jsonl",))
    omega_fn = omega_fn_from_config(cfg)
    box = default_lambda_box(cfg)
    # measure.grid is the total point budget, split evenly across axes
    per_axis = max(2, int(round(cfg.measure_grid ** (1.0 / len(box)))))
    res = measure_excluded(omega_fn, box, cfg.measure_gammas,
                           cfg.numerics.tau, cfg.measure_K, per_axis)
    path = os.path.join(cfg.out, "measure.jsonl")
    with open(path, "w") as fh:
        for row in res.as_rows():
            _jline(fh, row)
        _jline(fh, {"slope": res.slope, "tau": res.tau, "K": res.K,
                    "npoints": res.npoints, "dropped": res.dropped})
    print(f"{'gamma':>10}  {'excluded fraction':>18}")
    for row in res.as_rows():
        print(f"{row['gamma']:>10.4g}  {row['fraction']:>18.6g}")
    if res.dropped:
        print(f"warning: zero excluded fraction at gamma = {res.dropped}; "
              f"dropped from the fit")
    print(f"fitted log-log slope: {res.slope:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_verify(cfg: RunConfig, force: bool = False) -> int:
    out = cfg.out
    _prepare_out(out, force, names=("verify_report.jsonl",))
    files = sorted(f for f in (os.listdir(out) if os.path.isdir(out) else [])
                   if f.startswith("torus_") and f.endswith(".jsonl"))
    if not files:
        raise SystemExit(f"no torus_*.jsonl files under {out!r}; "
                         f"run `hypertori run` first")
    insts = instances_from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    path = os.path.join(out, "verify_report.jsonl")
    with open(path, "w") as fh:
        for fname in files:
            idx = int(fname[len("torus_"):-len(".jsonl")])
            if idx >= len(insts):
                raise SystemExit(f"{fname} has no matching point in the "
                                 f"config's lambda grid")
            inst = insts[idx]
            data = read_torus_file(os.path.join(out, fname))
            S = data["structure"]
            N, P = data["N"], data["P"]
            meta = data["meta"]
            omega_inf = np.array(meta["omega_inf"])

            # the torus is checked in the original variables: pull the
            # grid back through the stored transforms (or reuse the
            # stored embedding) and test it against the original field
            emb = data["embedding"]
            if emb is None or emb["theta"].shape[0] < cfg.verify_grid:
                emb = reconstruct_embedding(data["transforms"], inst,
                                            grid=cfg.verify_grid)
            H0 = add(inst.normal_form.to_series(P.d_max,
                                                max(inst.P.K_max, 1)),
                     inst.P)
            resid, _ = invariance_residual(emb, omega_inf, H0, S)

            # rotation numbers from the conjugated flow restricted to
            # the torus, where long windows are numerically safe
            K_work = max(P.K_max, N.A.K_max, 1)
            H = add(N.to_series(P.d_max, K_work), P)
            theta0 = rng.uniform(0.0, 2.0 * np.pi, S.n)
            traj = torus_flow(H, S, theta0, cfg.rotation_T, cfg.rotation_dt)
            rot = rotation_numbers(traj)
            rot_err = float(np.abs(rot - omega_inf).max())

            state0 = np.zeros(S.l + S.n + 2 * S.m)
            state0[S.l:S.l + S.n] = theta0
            etraj = integrate(H0, S, state0, cfg.energy_T, cfg.energy_dt)
            drift = etraj.energy_drift()

            rec = {
                "file": fname,
                "lam": meta["lam"],
                "invariance_residual": resid,
                "embedding_distance": emb["distance"],
                "rotation_numbers": [float(v) for v in rot],
                "rotation_error": rot_err,
                "energy_drift": drift,
                "energy_dt": cfg.energy_dt,
            }
            _jline(fh, rec)
            print(f"{fname}: invariance {resid:.3e}, rotation error "
                  f"{rot_err:.3e}, energy drift {drift:.3e}")
    print(f"wrote {path}")
    return 0


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hypertori",
        description="hyperbolic invariant tori: check, iterate, sieve, verify")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("check", cmd_check), ("run", cmd_run),
                     ("sieve", cmd_sieve), ("verify", cmd_verify)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--preset", default=None,
                       help="problem preset (example1, example2)")
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.preset is not None:
            cfg.preset = args.preset
            if args.preset not in ("example1", "example2",
                                   "preset1", "preset2"):
                raise ConfigError(f"unknown preset {args.preset!r}")
        if args.out is not None:
            cfg.out = args.out
        env_out = os.environ.get("HYPERTORI_OUT")
        if args.out is None and env_out:
            cfg.out = env_out
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.seed is not None:
            cfg.seed = args.seed
        return args.fn(cfg, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
