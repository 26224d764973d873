"""Command-line entry point.

Subcommands tie the library together for training, caching, decoding,
benchmarking, and verification; every command resolves its settings from an
optional TOML config file plus flag overrides and writes the resolved
configuration next to its outputs for provenance. Numeric CSV output uses 17
significant digits. Exit codes: 0 success, 1 internal error, 2 bad input,
3 verification/fingerprint failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import costmodel, statecache, training
from .attention import HeadParams, multihead_physattn
from .errors import (FingerprintMismatchError, MeshFormatError, ShapeError,
                     TrainingDivergedError)
from .linalg import make_rng
from .meshes import (MeshBatch, gen_random_sphere_mesh, gen_sphere_mesh,
                     manufactured_field, manufactured_shear, read_mesh,
                     read_mesh_chunks, write_mesh)
from .metrics import mae_per_column, r2_per_column, rel_l2
from .model import (ModelConfig, forward, init_params, layer_slice_weights,
                    load_checkpoint, param_count, save_checkpoint)
from .quadrature import FlowConstants, integrate_force
from .statecache import build_cache, decode_stream, iter_query_chunks, load_cache, save_cache
from .training import TrainConfig, amortized_sample, train

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_INPUT = 2
EXIT_VERIFICATION = 3

_BAD_INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, MeshFormatError,
                     ShapeError, ValueError, KeyError)


class VerificationFailure(RuntimeError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Settings merged from a TOML file and flag overrides."""

    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    mode: str = "fast"
    tile_size: int | None = None
    chunk_size: int = 4096
    precision: str = "f64"
    parallel: bool = False

    @classmethod
    def load(cls, args: argparse.Namespace) -> "RunConfig":
        rc = cls()
        path = getattr(args, "config", None)
        if path:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
            rc.model.update(doc.get("model", {}))
            rc.train.update(doc.get("train", {}))
            for key, value in doc.get("run", {}).items():
                if not hasattr(rc, key) or key in ("model", "train"):
                    raise ValueError(f"unknown [run] setting {key!r} in {path}")
                setattr(rc, key, value)
        for key in ("seed", "mode", "tile_size", "chunk_size", "precision", "parallel"):
            v = getattr(args, key, None)
            if v is not None:
                setattr(rc, key, v)
        if rc.mode == "tiled" and rc.model.get("tile_size") is None:
            rc.model["tile_size"] = rc.tile_size
        return rc

    def model_config(self, in_dim: int, out_dim: int) -> ModelConfig:
        kw = dict(self.model)
        kw.setdefault("in_dim", in_dim)
        kw.setdefault("out_dim", out_dim)
        kw.setdefault("mode", self.mode)
        kw.setdefault("tile_size", self.tile_size)
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        kw = dict(self.train)
        kw.setdefault("seed", self.seed)
        return TrainConfig(**kw)

    def to_toml(self) -> str:
        def fmt_value(v) -> str:
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            if isinstance(v, (float, np.floating)):
                return _fmt(v)
            return json.dumps(str(v))

        lines = ["[run]"]
        for key in ("seed", "mode", "tile_size", "chunk_size", "precision", "parallel"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key} = {fmt_value(v)}")
        for section in ("model", "train"):
            d = getattr(self, section)
            if d:
                lines.append(f"\n[{section}]")
                for k in sorted(d):
                    if d[k] is not None:
                        lines.append(f"{k} = {fmt_value(d[k])}")
        return "\n".join(lines) + "\n"


def _write_provenance(out_path: str, rc: RunConfig) -> None:
    """Serialize the resolved RunConfig next to the command's outputs."""
    out_dir = out_path if os.path.isdir(out_path) else (os.path.dirname(out_path) or ".")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.toml"), "w", encoding="utf-8") as f:
        f.write(rc.to_toml())


def _require_out(args) -> str:
    if not getattr(args, "out", None):
        raise ValueError("--out is required for this command")
    return args.out


def _cast_mesh(mesh: MeshBatch, precision: str) -> MeshBatch:
    if precision == "f64":
        return mesh
    mesh.coords = mesh.coords.astype(np.float32).astype(np.float64)
    return mesh


# ---------------------------------------------------------------------------
# commands


def cmd_gen_mesh(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    rng = make_rng(rc.seed)
    gen = gen_sphere_mesh if args.kind == "sphere" else gen_random_sphere_mesh
    mesh = gen(args.n, rng)
    pressure = manufactured_field(mesh.coords)
    targets = [pressure]
    if args.shear:
        targets.append(manufactured_shear(mesh.coords, mesh.normals))
    mesh.targets = np.concatenate(targets, axis=1)
    write_mesh(out, mesh)
    if args.reference_n > 0:
        fc = FlowConstants()
        ref_mesh = gen_sphere_mesh(args.reference_n)
        shear = manufactured_shear(ref_mesh.coords, ref_mesh.normals) if args.shear else None
        res = integrate_force(ref_mesh, fc, pressure=manufactured_field(ref_mesh.coords),
                              shear=shear)
        with open(out + ".ref.json", "w", encoding="utf-8") as f:
            json.dump({"reference_n": args.reference_n, "cd": res.cd, "cl": res.cl,
                       "force": [float(v) for v in res.force],
                       "p_inf": fc.p_inf, "rho_inf": fc.rho_inf, "v_inf": fc.v_inf,
                       "a_ref": fc.a_ref}, f, indent=1)
    _write_provenance(out, rc)
    print(f"wrote {mesh.n} points to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    os.makedirs(out, exist_ok=True)
    meshes = [read_mesh(p) for p in args.data]
    for p, m in zip(args.data, meshes):
        if m.targets is None:
            raise ValueError(f"training mesh {p} has no target columns")
    val_mesh = read_mesh(args.val) if args.val else None
    cfg = rc.model_config(in_dim=meshes[0].in_width, out_dim=meshes[0].targets.shape[1])
    tcfg = rc.train_config()
    params = init_params(cfg, seed=rc.seed)
    result = train(params, meshes, tcfg, val_mesh=val_mesh,
                   log_path=os.path.join(out, "metrics.csv"),
                   mode=rc.mode, tile_size=rc.tile_size)
    save_checkpoint(os.path.join(out, "checkpoint"), result.params)
    _write_provenance(out, rc)
    print(f"parameters: {param_count(cfg)}")
    print(f"final train loss: {_fmt(result.final_train_loss)}")
    if result.final_val_rel_l2 is not None:
        print(f"final validation relL2: {_fmt(result.final_val_rel_l2)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    mesh = read_mesh(args.mesh)
    pred = forward(params, mesh, mode=rc.mode, tile_size=rc.tile_size, parallel=rc.parallel)
    write_mesh(out, MeshBatch(coords=mesh.coords, normals=mesh.normals,
                              areas=mesh.areas, targets=pred))
    _write_provenance(out, rc)
    print(f"wrote predictions for {mesh.n} points to {out}")
    return EXIT_OK


def cmd_cache(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    stream = read_mesh_chunks(args.mesh, rc.chunk_size)
    cache = build_cache(params, stream)
    save_cache(out, cache)
    _write_provenance(out, rc)
    print(f"cached {cache.layers} layers x {cache.heads} heads "
          f"({cache.slices} x {cache.head_channels} states each) -> {out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    cache = load_cache(args.cache)
    query = read_mesh(args.mesh)
    summary = decode_stream(cache, params, iter_query_chunks(query, rc.chunk_size), out)
    _write_provenance(out, rc)
    print(f"decoded {summary['points']} points in {summary['chunks']} chunks -> {out}")
    return EXIT_OK


def cmd_sample_subset(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    mesh = read_mesh(args.mesh)
    sub = amortized_sample(mesh, args.n, make_rng(rc.seed))
    write_mesh(out, sub)
    _write_provenance(out, rc)
    print(f"sampled {sub.n} of {mesh.n} points -> {out}")
    return EXIT_OK


def cmd_export_slices(args) -> int:
    rc = RunConfig.load(args)
    out = _require_out(args)
    params = load_checkpoint(args.checkpoint)
    mesh = read_mesh(args.mesh)
    w = layer_slice_weights(params, mesh, args.layer, args.head)
    with open(out, "w", encoding="utf-8") as f:
        f.write("index," + ",".join(f"w{j + 1}" for j in range(w.shape[1])) + "\n")
        for i, row in enumerate(w):
            f.write(f"{i}," + ",".join(_fmt(v) for v in row) + "\n")
    _write_provenance(out, rc)
    print(f"wrote {w.shape[0]} x {w.shape[1]} slice weights -> {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    rc = RunConfig.load(args)
    cfg = costmodel.CostConfig(n=args.n, channels=args.channels, slices=args.slices,
                               heads=args.heads, layers=args.layers)
    lines = ["variant,op,time_flops,space_bytes,n_dependent"]
    for variant in costmodel.VARIANTS:
        report = costmodel.cost_model(variant, cfg)
        for t in report.terms:
            lines.append(f"{variant},{json.dumps(t.op)},{t.time_flops},{t.space_bytes},"
                         f"{'true' if t.n_dependent else 'false'}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _write_provenance(args.out, rc)
    else:
        sys.stdout.write(text)
    orig = costmodel.cost_model("original", cfg)
    opt = costmodel.cost_model("optimized", cfg)
    print(f"n_related original: time={orig.n_related_time} space={orig.n_related_space}")
    print(f"n_related optimized: time={opt.n_related_time} space={opt.n_related_space}")
    print(f"flop ratio optimized/original: {costmodel.flop_ratio(cfg):.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = RunConfig.load(args)
    dtype = np.float32 if rc.precision == "f32" else np.float64
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = ["mode,n,seconds"]
    for n in sizes:
        rng = make_rng(rc.seed)
        x = rng.standard_normal((n, args.channels)).astype(dtype)
        heads = [HeadParams.init(args.channels // args.heads, args.slices, rng)
                 for _ in range(args.heads)]
        if dtype is np.float32:
            for h in heads:
                for _, t in h.tensors():
                    t.data = t.data.astype(np.float32)
        for mode in ("original", "fast", "tiled"):
            tile = rc.tile_size or max(1, n // 8)
            best = min(
                _timed(lambda: multihead_physattn(x, heads, mode,
                                                  tile_size=tile if mode == "tiled" else None,
                                                  parallel=rc.parallel))
                for _ in range(args.repeats))
            rows.append(f"{mode},{n},{_fmt(best)}")
    text = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _write_provenance(args.out, rc)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def cmd_integrate(args) -> int:
    rc = RunConfig.load(args)
    mesh = read_mesh(args.pred)
    fc = FlowConstants(p_inf=args.p_inf, rho_inf=args.rho_inf, v_inf=args.v_inf,
                       a_ref=args.a_ref,
                       drag_dir=np.array([float(v) for v in args.drag_dir.split(",")]),
                       lift_dir=np.array([float(v) for v in args.lift_dir.split(",")]))
    res = integrate_force(mesh, fc)
    print(f"Cd = {_fmt(res.cd)}")
    print(f"Cl = {_fmt(res.cl)}")
    if args.truth:
        truth = read_mesh(args.truth)
        if truth.targets is None or mesh.targets is None:
            raise ValueError("both prediction and truth files need target columns")
        print(f"rel_l2 = {_fmt(rel_l2(mesh.targets, truth.targets))}")
        r2 = r2_per_column(mesh.targets, truth.targets)
        mae = mae_per_column(mesh.targets, truth.targets)
        for j, (a, b) in enumerate(zip(r2, mae)):
            r2s = "undefined" if a is None else _fmt(a)
            print(f"column {j + 1}: R2 = {r2s}, MAE = {_fmt(b)}")
        res_truth = integrate_force(truth, fc)
        print(f"Cd_truth = {_fmt(res_truth.cd)}  |dCd| = {_fmt(abs(res.cd - res_truth.cd))}")
        print(f"Cl_truth = {_fmt(res_truth.cl)}  |dCl| = {_fmt(abs(res.cl - res_truth.cl))}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(f"cd,cl\n{_fmt(res.cd)},{_fmt(res.cl)}\n")
        _write_provenance(args.out, rc)
    return EXIT_OK


def cmd_check_equivalence(args) -> int:
    rc = RunConfig.load(args)
    rng = make_rng(rc.seed)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    worst = 0.0
    worst_desc = "none"
    for trial in range(args.trials):
        n = int(rng.integers(8, max(9, args.max_n + 1))) if not sizes else sizes[trial % len(sizes)]
        c_h = int(rng.choice([4, 8, 16]))
        m = int(rng.choice([2, 4, 8, 16]))
        p = HeadParams.init(c_h, m, rng)
        x = rng.standard_normal((n, c_h))
        y_orig = multihead_physattn(x, [p], "original")
        scale = np.linalg.norm(y_orig)
        for mode, tile in [("fast", None), ("tiled", n), ("tiled", max(1, n // 4)),
                           ("tiled", max(1, n // 8)), ("tiled", 7)]:
            y = multihead_physattn(x, [p], mode, tile_size=tile)
            rel = float(np.linalg.norm(y - y_orig)) / scale
            if rel > worst:
                worst, worst_desc = rel, f"trial {trial} n={n} mode={mode} tile={tile}"
        if worst > args.tolerance:
            break
    print(f"worst relative difference: {worst:.3e} ({worst_desc})")
    if worst > args.tolerance:
        raise VerificationFailure(
            f"equivalence tolerance exceeded: {worst:.3e} > {args.tolerance:.1e} at {worst_desc}")
    print(f"equivalence suite passed: {args.trials} trials within {args.tolerance:.1e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slicesolver",
                                 description="slice-attention mesh surrogate toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=["original", "fast", "tiled"], default=None)
        p.add_argument("--tile-size", dest="tile_size", type=int, default=None)
        p.add_argument("--chunk-size", dest="chunk_size", type=int, default=None)
        p.add_argument("--precision", choices=["f32", "f64"], default=None)
        p.add_argument("--parallel", action="store_const", const=True, default=None)
        p.add_argument("--out", default=None)
        return p

    p = add("gen-mesh", cmd_gen_mesh, help="generate a synthetic surface mesh")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kind", choices=["sphere", "random-sphere"], default="sphere")
    p.add_argument("--shear", action="store_true")
    p.add_argument("--reference-n", dest="reference_n", type=int, default=1_000_000,
                   help="points for the reference quadrature JSON (0 to skip)")

    p = add("train", cmd_train, help="amortized training run")
    p.add_argument("--data", nargs="+", required=True, help="training mesh file(s)")
    p.add_argument("--val", default=None, help="validation mesh (default: first data mesh)")

    p = add("infer", cmd_infer, help="monolithic forward prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)

    p = add("cache", cmd_cache, help="build a physical state cache from chunks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)

    p = add("decode", cmd_decode, help="decode query points against a cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True, help="query mesh file")

    p = add("check-equivalence", cmd_check_equivalence, help="verify path equivalence")
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--max-n", dest="max_n", type=int, default=512)
    p.add_argument("--sizes", default="", help="comma list; empty = random sizes")
    p.add_argument("--tolerance", type=float, default=1e-10)

    p = add("flops", cmd_flops, help="cost-model table as CSV")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--slices", type=int, default=64)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)

    p = add("bench", cmd_bench, help="wall-clock latency (informational only)")
    p.add_argument("--sizes", default="1024,4096")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)

    p = add("integrate", cmd_integrate, help="drag/lift from a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--p-inf", dest="p_inf", type=float, default=0.0)
    p.add_argument("--rho-inf", dest="rho_inf", type=float, default=1.0)
    p.add_argument("--v-inf", dest="v_inf", type=float, default=1.0)
    p.add_argument("--a-ref", dest="a_ref", type=float, default=float(np.pi))
    p.add_argument("--drag-dir", dest="drag_dir", default="1,0,0")
    p.add_argument("--lift-dir", dest="lift_dir", default="0,0,1")

    p = add("sample-subset", cmd_sample_subset, help="uniform subset of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--n", type=int, required=True)

    p = add("export-slices", cmd_export_slices, help="per-point slice weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FingerprintMismatchError, VerificationFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except _BAD_INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # pragma: no cover
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
