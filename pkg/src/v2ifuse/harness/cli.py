"""Command-line entry point: ``v2ifuse {simulate,train,ablate,bandwidth,dump-masks}``.

Every command reads a YAML config (see :mod:`v2ifuse.harness.config`), echoes
the resolved values into the header of its CSV output and writes a JSON
summary next to it.  Outputs carry no timestamps, so identical configs give
byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .. import comm
from ..errors import ConfigurationError, DecodeError, GenerationError, TrainingError
from ..tensor import no_grad
from .ablation import ABLATION_ROWS, Lab, run_ablation, run_bandwidth, run_trend
from .config import ExperimentConfig, from_dict, load_config
from .evaluate import make_scene, report, suite_scenes
from .pipeline import encode_agents, grid_spec, load_params, run_states, save_params, sense_scene
from .train import train_toy


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(path: Path, cfg: ExperimentConfig, rows: list[dict], extra_header: list[str] = ()) -> None:
    """CSV with ``# key: value`` comment lines echoing the config."""
    buf = io.StringIO()
    for line in cfg.echo_lines():
        buf.write(f"# {line}\n")
    buf.write(f"# defaults_applied: {', '.join(cfg.defaults_applied) or '-'}\n")
    for line in extra_header:
        buf.write(f"# {line}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    if getattr(args, "set", None):
        changes = {}
        for item in args.set:
            key, _, value = item.partition("=")
            changes[key] = json.loads(value) if value[:1] in "[{0123456789-tfn\"" else value
        cfg = cfg.with_(**changes)
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg.output.dir)


def _params(args, cfg, log):
    path = getattr(args, "params", None) or cfg.output.params
    if path:
        return load_params(path)
    log(f"no parameter file given; training for {cfg.training.steps} steps")
    return train_toy(cfg).params


def _log(args):
    quiet = getattr(args, "quiet", False)
    return (lambda msg: None) if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    log = _log(args)
    params = _params(args, cfg, log)
    scenes = suite_scenes(cfg)
    failures = []
    results = []
    spec = grid_spec(cfg)
    full_bytes = comm.full_map_bytes(spec.h, spec.w, cfg.model.channels * spec.height_bins)
    with no_grad():
        for k, sc in enumerate(scenes):
            pair = sense_scene(sc, cfg)
            v, i = encode_agents(pair, params, cfg)
            res = run_states(v, i, sc, params, cfg, k)
            results.append(res)
            if args.check:
                if res.ledger.total_bytes > full_bytes:
                    failures.append(f"scene {sc.seed}: payload {res.ledger.total_bytes} exceeds full map {full_bytes}")
                if k == 0:
                    again = run_states(*encode_agents(sense_scene(sc, cfg), params, cfg), sc, params, cfg, k)
                    if again.row() != res.row() or again.raw.tobytes() != res.raw.tobytes():
                        failures.append(f"scene {sc.seed}: rerun differs")
    rep = report(results, scenes, "simulate")
    out = _out_dir(args, cfg)
    write_csv(out / "simulate.csv", cfg, rep.rows, [f"suite: {rep.suite}"])
    summary = rep.summary()
    if args.check:
        for name in ("ap50", "ap70", "ap50_occluded", "ap50_open"):
            v = summary[name]
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                failures.append(f"{name}={v} outside [0, 1]")
        summary["check_failures"] = failures
    write_json(out / "simulate.json", summary)
    print(f"AP@0.5 {rep.ap50:.4f}  AP@0.7 {rep.ap70:.4f}  occluded {rep.ap50_occluded:.4f}  "
          f"open {rep.ap50_open:.4f}  mean payload {rep.mean_payload_bytes:.1f} B")
    for f in failures:
        print(f"CHECK FAILED: {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train_toy(cfg, log=_log(args))
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    params_path = Path(args.params_out) if args.params_out else out / "params.npz"
    save_params(res.params, params_path)
    write_csv(out / "train.csv", cfg, [{"step": k, "loss": v} for k, v in enumerate(res.losses)])
    losses = res.losses
    write_json(out / "train.json", {"steps": len(losses), "initial_loss": losses[0] if losses else None,
                                    "final_loss": losses[-1] if losses else None, "params": str(params_path)})
    if losses:
        print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; parameters in {params_path}")
    return 0


def ablation_checks(trend, rows, bw) -> list[tuple[str, bool, str]]:
    """Directional checks on experiment results: (name, passed, detail)."""
    f_hi = max(trend["lidar"])
    f_lo = min(trend["lidar"])
    lidar = [trend["lidar"][f].ap50 for f in sorted(trend["lidar"])]
    full_drop = trend["full"][f_lo].ap50 - trend["full"][f_hi].ap50
    lidar_drop = trend["lidar"][f_lo].ap50 - trend["lidar"][f_hi].ap50
    gain = trend["full"][f_hi].ap50_occluded - trend["no-collab"][f_hi].ap50_occluded
    ab = [r.ap50 for r in rows]
    out = [
        ("collaboration gain on occluded split >= 0.05", gain >= 0.05,
         f"collab {trend['full'][f_hi].ap50_occluded:.4f} vs none {trend['no-collab'][f_hi].ap50_occluded:.4f} (gain {gain:+.4f})"),
        ("lidar-only AP falls monotonically with degradation", all(a > b for a, b in zip(lidar, lidar[1:])),
         " > ".join(f"{a:.4f}" for a in lidar)),
        ("full pipeline drops less than lidar-only", full_drop < lidar_drop,
         f"full drop {full_drop:+.4f}, lidar drop {lidar_drop:+.4f}"),
        ("+all row has the maximum AP", ab[-1] >= max(ab),
         ", ".join(f"{r.label} {r.ap50:.4f}" for r in rows)),
    ]
    if bw is not None:
        frac = bw.score_diff.mean_payload_bytes / bw.full_map_bytes
        loss = bw.full_map.ap50 - bw.score_diff.ap50
        out += [
            ("score+diff >= score-only at matched payload", bw.score_diff.ap50 >= bw.score_only.ap50,
             f"{bw.score_diff.ap50:.4f} ({bw.score_diff.mean_payload_bytes:.0f} B) vs {bw.score_only.ap50:.4f} "
             f"({bw.score_only.mean_payload_bytes:.0f} B at threshold {bw.matched_threshold:g})"),
            ("masked payload <= 50% of full map", frac <= 0.5, f"{100 * frac:.2f}% of {bw.full_map_bytes} B"),
            ("masked AP within 0.02 of full map", loss <= 0.02,
             f"masked {bw.score_diff.ap50:.4f}, full map {bw.full_map.ap50:.4f} (loss {loss:+.4f})"),
        ]
    return out


def cmd_ablate(args) -> int:
    cfg = _config(args)
    lab = Lab(cfg, log=_log(args))
    factor = args.factor or cfg.sensors.degrade_factor
    rows = run_ablation(lab, factor=factor)
    trend = run_trend(lab, tuple(args.factors))
    bw = run_bandwidth(lab, cfg.with_(**{"sensors.degrade_factor": factor}))
    out = _out_dir(args, cfg)
    table = []
    for r in rows:
        table.append({"table": "modules", "row": r.label, "factor": factor, **_metrics(r)})
    for kind, by_factor in trend.items():
        for f, r in sorted(by_factor.items()):
            table.append({"table": "degradation", "row": kind, "factor": f, **_metrics(r)})
    for r in (bw.score_only_default, bw.score_only, bw.score_diff, bw.full_map):
        table.append({"table": "communication", "row": r.label, "factor": factor, **_metrics(r)})
    write_csv(out / "ablate.csv", cfg, table, [f"suite: {rows[0].suite}", f"module rows: {', '.join(ABLATION_ROWS)}"])
    checks = ablation_checks(trend, rows, bw)
    write_json(out / "ablate.json", {
        "suite": rows[0].suite,
        "rows": [dict(t) for t in table],
        "matched_threshold": bw.matched_threshold,
        "threshold_sweep": bw.sweep,
        "full_map_bytes": bw.full_map_bytes,
        "checks": [{"name": n, "passed": p, "detail": d} for n, p, d in checks],
    })
    for n, p, d in checks:
        print(f"{'PASS' if p else 'FAIL'}  {n}: {d}")
    return 1 if args.check and not all(p for _, p, _ in checks) else 0


def _metrics(r) -> dict:
    return {"ap50": r.ap50, "ap70": r.ap70, "ap50_occluded": r.ap50_occluded, "ap50_open": r.ap50_open,
            "mean_payload_bytes": r.mean_payload_bytes, "mean_log2_bytes": r.mean_log2_bytes}


def cmd_bandwidth(args) -> int:
    if args.full_map:
        h, w, c = args.full_map
        n = comm.full_map_bytes(h, w, c)
        print(f"full map {h}x{w}x{c} float32: {n} bytes, log2 {comm.full_map_log2(h, w, c):.4f}")
        return 0
    cfg = _config(args)
    params = _params(args, cfg, _log(args))
    spec = grid_spec(cfg)
    full = comm.full_map_bytes(spec.h, spec.w, cfg.model.channels * spec.height_bins)
    rows = []
    with no_grad():
        for k, sc in enumerate(suite_scenes(cfg)):
            v, i = encode_agents(sense_scene(sc, cfg), params, cfg)
            res = run_states(v, i, sc, params, cfg, k)
            rows.append({"scene": sc.seed, "split": "occluded" if sc.occluded else "open",
                         "payload_bytes": res.ledger.total_bytes, "wire_bytes": res.ledger.wire_bytes,
                         "log2_bytes": res.ledger.log2_bytes, "fraction_of_full": res.ledger.total_bytes / full})
    out = _out_dir(args, cfg)
    write_csv(out / "bandwidth.csv", cfg, rows, [f"full_map_bytes: {full}", f"full_map_log2: {math.log2(full):.6f}"])
    payload = np.array([r["payload_bytes"] for r in rows], dtype=np.float64)
    summary = {"frames": len(rows), "full_map_bytes": full, "full_map_log2": math.log2(full),
               "mean_payload_bytes": float(payload.mean()) if len(rows) else 0.0,
               "mean_log2_bytes": float(np.mean([r["log2_bytes"] for r in rows])) if rows else 0.0}
    write_json(out / "bandwidth.json", summary)
    print(f"full map {full} B (log2 {math.log2(full):.2f}); mean masked payload {summary['mean_payload_bytes']:.1f} B")
    return 0


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """Binary (P5) graymap, 0 -> black, 1 -> white, row 0 at the top."""
    img = (np.asarray(mask) != 0).astype(np.uint8) * 255
    h, w = img.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary graymap")
    w, h = map(int, dims.split())
    return (np.frombuffer(rest, np.uint8, h * w).reshape(h, w) > 0).astype(np.uint8)


def cmd_dump_masks(args) -> int:
    cfg = _config(args)
    params = _params(args, cfg, _log(args))
    scene = make_scene(args.scene, cfg, occluded=not args.open)
    with no_grad():
        v, i = encode_agents(sense_scene(scene, cfg), params, cfg)
    out = _out_dir(args, cfg) / f"masks_{args.scene}"
    written = []
    for st in (v, i):
        if st is None:
            continue
        for name in ("M_s", "M_d", "M_sd"):
            p = out / f"{st.name}_{name}.pgm"
            write_pgm(p, getattr(st, name))
            written.append(p)
    p = out / "vehicle_M_re.pgm"
    write_pgm(p, comm.request_map(v.M_sd))
    written.append(p)
    for p in written:
        print(p)
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="v2ifuse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, params=True):
        p.add_argument("--config", "-c", help="YAML config file (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. modes.rfea=false")
        p.add_argument("--out", "-o", help="output directory (default: output.dir)")
        p.add_argument("--quiet", "-q", action="store_true")
        if params:
            p.add_argument("--params", help="trained parameter file (.npz); trains from the config when omitted")

    p = sub.add_parser("simulate", help="run the scene suite and emit metrics")
    common(p)
    p.add_argument("--check", action="store_true", help="exit nonzero when a consistency check fails")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="toy end-to-end training")
    common(p, params=False)
    p.add_argument("--params-out", help="where to write parameters (default: <out>/params.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="module, degradation and communication ablations")
    common(p, params=False)
    p.add_argument("--factor", type=int, help="degradation factor of the module/communication tables")
    p.add_argument("--factors", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--check", action="store_true", help="exit nonzero when a directional check fails")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bandwidth", help="communication accounting report")
    common(p)
    p.add_argument("--full-map", type=int, nargs=3, metavar=("H", "W", "C"),
                   help="only report the size of a dense H x W x C float32 map")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("dump-masks", help="write score/difference/confidence/request masks as PGM images")
    common(p)
    p.add_argument("--scene", type=int, default=0, help="scene seed")
    p.add_argument("--open", action="store_true", help="generate the scene without occluders")
    p.set_defaults(func=cmd_dump_masks)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DecodeError, GenerationError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
