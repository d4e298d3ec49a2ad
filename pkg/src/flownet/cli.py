"""``flownet`` command line.

Every command writes its outputs plus a run manifest (``<output>.manifest.json``,
or ``manifest.json`` inside an output directory) recording the resolved
arguments, the seed, input and output hashes, the tool version and the wall
time. ``flownet replay MANIFEST --verify`` re-runs a manifest and checks that
the outputs come out byte-identical.

Exit codes: 0 success, 1 I/O failure (or replay mismatch), 2 usage or
configuration error, 3 numeric failure. ``FLOWNET_SEED`` overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, dtignn, pipeline
from .errors import ConfigurationError, DimensionError, DomainError, NumericError, UnsupportedTopologyError
from .roadnet import build_grid_network, load_network, save_network
from .signals import fixed_time_plan, max_pressure_plan
from .simflow import (
    DemandSpec, FlowPack, SaturationRates, apply_mask, run_case_study, sample_unobserved, simulate, to_flowpack,
)

log = logging.getLogger("flownet")

EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _load_flowpack(path) -> FlowPack:
    return FlowPack.load(path)


def load_config(path: str | None, n: int) -> tuple[dtignn.ModelConfig, pipeline.TrainConfig]:
    """Model and training config from JSON.

    Accepts ``{"model": {...}, "train": {...}}`` or one flat object whose keys
    are ModelConfig / TrainConfig field names. ``n`` always comes from the network.
    """
    doc = {} if path is None else json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    model_keys = set(dtignn.ModelConfig.__dataclass_fields__) - {"n"}
    train_keys = set(pipeline.TrainConfig.__dataclass_fields__)
    if set(doc) <= {"model", "train"} and doc:
        mdoc, tdoc = dict(doc.get("model", {})), dict(doc.get("train", {}))
    else:
        mdoc = {k: v for k, v in doc.items() if k in model_keys}
        tdoc = {k: v for k, v in doc.items() if k in train_keys}
        unknown = set(doc) - model_keys - train_keys
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for part, allowed in ((mdoc, model_keys), (tdoc, train_keys)):
        if set(part) - allowed:
            raise ConfigurationError(f"unknown config keys: {sorted(set(part) - allowed)}")
    mdoc.pop("n", None)
    return dtignn.ModelConfig(n=n, **mdoc), pipeline.TrainConfig(**tdoc)


def _resolve_mask(text: str, net, seed: int) -> list[int]:
    """A bare integer is a count drawn at random; anything with a comma is an id list."""
    text = text.strip()
    if text == "":
        return []
    if "," in text:
        ids = sorted(set(_int_list(text)))
        known = {x.id for x in net.intersections}
        if not set(ids) <= known:
            raise UsageError(f"unknown intersections {sorted(set(ids) - known)}")
        return ids
    try:
        count = int(text)
    except ValueError as exc:
        raise UsageError(f"--mask-intersections takes a count or a comma list, got {text!r}") from exc
    return sample_unobserved(net, count, seed)


# ---------------------------------------------------------------- commands
# each returns (inputs, outputs, extra manifest fields)

def cmd_gen_net(a):
    if a.rows < 1 or a.cols < 1 or a.lanes < 1 or not a.length > 0:
        raise UsageError("rows, cols and lanes must be >= 1 and length > 0")
    net = build_grid_network(a.rows, a.cols, a.lanes, a.length)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_network(net, out)
    return [], [out], {"intersections": len(net.intersections), "segments": net.n}


def cmd_simulate(a):
    if a.steps < 1:
        raise UsageError("--steps must be >= 1")
    net = load_network(a.net)
    if a.plan == "fixed":
        plan = fixed_time_plan(action_interval_s=a.interval)
    else:
        plan = max_pressure_plan(action_interval_s=a.interval)
    gamma = SaturationRates(max_release=a.max_release)
    states, phases = simulate(net, plan, gamma, DemandSpec(a.demand_rate, seed=a.seed), a.steps)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    to_flowpack(states, phases).save(out)
    return [Path(a.net)], [out], {"t": states.t}


def cmd_mask(a):
    net = load_network(a.net)
    pack = _load_flowpack(a.flowpack)
    if pack.n != net.n:
        raise DimensionError(f"flowpack has {pack.n} segments, network has {net.n}")
    hidden = _resolve_mask(a.mask_intersections, net, a.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    FlowPack(pack.volumes, pack.phases, apply_mask(net, hidden), pack.interval_s).save(out)
    pct = 100.0 * len(hidden) / len(net.intersections)
    print(f"unobserved intersections {hidden} ({pct:g}%)")
    return [Path(a.net), Path(a.flowpack)], [out], {"unobserved": hidden, "unobserved_pct": pct}


def _train_setup(a, net):
    mcfg, tcfg = load_config(a.config, net.n)
    changes = {"seed": a.seed}
    if getattr(a, "variant", None):
        changes["ablation"] = a.variant
    if getattr(a, "epochs", None):
        changes["epochs"] = a.epochs
    return mcfg, pipeline._with(tcfg, **changes)


def cmd_train(a):
    net = load_network(a.net)
    pack = _load_flowpack(a.flowpack)
    mcfg, tcfg = _train_setup(a, net)
    data = pipeline.make_windows(pack, net, mcfg.t_window)
    out_dir = Path(a.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        res = pipeline.train(mcfg, data, tcfg, net)
    except NumericError as exc:
        if exc.checkpoint is not None:
            scale = pipeline.fit_scale(data["train"], tcfg.normalize)
            last = pipeline.Model(mcfg, exc.checkpoint, scale, tcfg.ablation, None, tcfg.seed)
            pipeline.save_checkpoint(last, out_dir / "last_finite.json", tcfg)
        raise
    ck = out_dir / "model.json"
    pipeline.save_checkpoint(res.model, ck, tcfg)
    (out_dir / "history.json").write_text(res.history_json() + "\n")
    outputs = [ck, dtignn.config_path(ck), out_dir / "history.json"]
    if len(data["test"]):
        _write_json(out_dir / "metrics.json", pipeline.evaluate(res.model, data["test"], net).to_dict())
        outputs.append(out_dir / "metrics.json")
    return ([Path(a.net), Path(a.flowpack)] + ([Path(a.config)] if a.config else []), outputs,
            {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "best_epoch": res.best_epoch})


def cmd_eval(a):
    net = load_network(a.net)
    pack = _load_flowpack(a.flowpack)
    model = pipeline.load_checkpoint(a.checkpoint, net)
    if model.cfg.n != pack.n:
        raise DimensionError(f"checkpoint expects N={model.cfg.n}, flowpack has N={pack.n}")
    data = pipeline.make_windows(pack, net, model.cfg.t_window, a.t_prime)
    rep = pipeline.evaluate(model, data[a.split], net)
    out = Path(a.out)
    _write_json(out, rep.to_dict())
    print(f"{a.split}: mae {rep.mae:.6f} rmse {rep.rmse:.6f} mape {rep.mape:.6f}")
    return [Path(a.net), Path(a.flowpack), Path(a.checkpoint)], [out], {}


def cmd_sweep(a):
    net = load_network(a.net)
    pack = _load_flowpack(a.flowpack)
    mcfg, tcfg = _train_setup(a, net)
    seeds = _int_list(a.seeds)
    counts = _int_list(a.counts)
    rows = pipeline.sparsity_sweep(pack, net, counts, mcfg, tcfg, seeds)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_results_csv(rows, out)
    med = pipeline.median_by(rows, "sparsity_pct")
    for k, v in med.items():
        print(f"sparsity {k:g}%: median mae {v:.6f}")
    return [Path(a.net), Path(a.flowpack)], [out], {"median_mae": {f"{k:g}": v for k, v in med.items()}}


def cmd_ablation(a):
    net = load_network(a.net)
    pack = _load_flowpack(a.flowpack)
    mcfg, tcfg = _train_setup(a, net)
    rows = pipeline.ablation_study(pack, net, mcfg, tcfg, _int_list(a.seeds))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_results_csv(rows, out)
    med = pipeline.median_by(rows, "variant")
    for k, v in med.items():
        print(f"{k}: median mae {v:.6f}")
    return [Path(a.net), Path(a.flowpack)], [out], {"median_mae": med}


def cmd_case_study(a):
    net = load_network(a.net)
    hidden = _resolve_mask(a.mask_intersections, net, a.seed)
    mask = apply_mask(net, hidden)
    inputs = [Path(a.net)]
    if a.estimator == "model":
        if not a.checkpoint:
            raise UsageError("--estimator model needs --checkpoint")
        model = pipeline.load_checkpoint(a.checkpoint, net)
        transition = pipeline.ModelEstimator(model, net)
        inputs.append(Path(a.checkpoint))
    else:
        transition = a.estimator
    plan = fixed_time_plan() if a.controller == "fixed" else max_pressure_plan()
    gamma = SaturationRates(max_release=a.max_release)
    res = run_case_study(net, transition, mask, DemandSpec(a.demand_rate, seed=a.seed), a.steps, gamma, plan)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["intersection", "mean_queue"])
        for k, v in res.queue_per_intersection.items():
            w.writerow([k, f"{v:.10g}"])
        w.writerow(["all", f"{res.mean_queue:.10g}"])
    summary = out.with_name(out.stem + ".summary.json")
    _write_json(summary, {"mean_queue": res.mean_queue, "travel_time_s": res.travel_time_s,
                          "injected": res.injected, "unobserved": hidden, "controller": a.controller,
                          "estimator": a.estimator})
    print(f"mean queue {res.mean_queue:.4f} vehicles, travel time proxy {res.travel_time_s:.2f} s")
    return inputs, [out, summary], {"mean_queue": res.mean_queue, "travel_time_s": res.travel_time_s}


def cmd_replay(a):
    doc = json.loads(Path(a.manifest).read_text())
    try:
        argv = list(doc["argv"])
        recorded = dict(doc["outputs"])
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed manifest: {exc}") from exc
    if argv and argv[0] == "replay":
        raise UsageError("a replay manifest cannot be replayed")
    code = main(argv, _env_seed=False)
    if code != 0:
        return code
    if a.verify:
        bad = [p for p, h in recorded.items() if not Path(p).exists() or _sha256(Path(p)) != h]
        for p in bad:
            print(f"output differs: {p}", file=sys.stderr)
        if bad:
            return EXIT_IO
        print(f"{len(recorded)} outputs reproduced byte-identically")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flownet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"flownet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp, default=0):
        sp.add_argument("--seed", type=int, default=default)

    g = sub.add_parser("gen-net", help="write a grid road network")
    g.add_argument("--rows", type=int, default=4)
    g.add_argument("--cols", type=int, default=4)
    g.add_argument("--lanes", type=int, default=3)
    g.add_argument("--length", type=float, default=300.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_net)

    s = sub.add_parser("simulate", help="simulate a flowpack")
    s.add_argument("--net", required=True)
    s.add_argument("--demand-rate", type=float, default=180.0, help="vehicles per lane per hour")
    s.add_argument("--steps", type=int, default=360)
    s.add_argument("--interval", type=float, default=10.0)
    s.add_argument("--plan", choices=("fixed", "maxpressure"), default="fixed")
    s.add_argument("--max-release", type=float, default=None, help="per-movement discharge cap per step")
    seeded(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("mask", help="hide intersections of a flowpack")
    m.add_argument("--net", required=True)
    m.add_argument("--flowpack", required=True)
    m.add_argument("--mask-intersections", required=True, help="count (random) or comma list of ids")
    seeded(m)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask)

    def training(sp):
        sp.add_argument("--net", required=True)
        sp.add_argument("--flowpack", required=True)
        sp.add_argument("--config", default=None, help="JSON with ModelConfig / TrainConfig fields")
        sp.add_argument("--epochs", type=_positive_int, default=None)
        seeded(sp)

    t = sub.add_parser("train", help="train a model on a flowpack")
    training(t)
    t.add_argument("--variant", choices=dtignn.VARIANTS, default=None)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--net", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--flowpack", required=True)
    e.add_argument("--split", choices=pipeline.SPLITS, default="test")
    e.add_argument("--t-prime", type=_positive_int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="sparsity sweep")
    training(w)
    w.add_argument("--counts", default="0,1,2,3")
    w.add_argument("--seeds", default="0,1,2")
    w.add_argument("--variant", choices=dtignn.VARIANTS, default=None)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    b = sub.add_parser("ablation", help="compare model variants on one mask")
    training(b)
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_ablation)

    c = sub.add_parser("case-study", help="closed-loop signal control")
    c.add_argument("--net", required=True)
    c.add_argument("--checkpoint", default=None)
    c.add_argument("--controller", choices=("maxpressure", "fixed"), default="maxpressure")
    c.add_argument("--estimator", choices=("model", "zero", "truth"), default="model")
    c.add_argument("--mask-intersections", default="2")
    c.add_argument("--demand-rate", type=float, default=360.0)
    c.add_argument("--max-release", type=float, default=5.0)
    c.add_argument("--steps", type=int, default=360)
    seeded(c)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_case_study)

    r = sub.add_parser("replay", help="re-run a manifest")
    r.add_argument("manifest")
    r.add_argument("--verify", action="store_true", help="check outputs match the recorded hashes")
    r.set_defaults(func=cmd_replay)
    return p


def _manifest_path(outputs: list[Path], a) -> Path:
    if getattr(a, "out_dir", None):
        return Path(a.out_dir) / "manifest.json"
    return outputs[0].with_name(outputs[0].name + ".manifest.json")


def _argv_for(argv: list[str], seed: int | None) -> list[str]:
    """The invocation with the effective seed written in, so a replay needs no environment."""
    out = [x for x in argv if x not in ("-v", "--verbose")]
    if seed is None:
        return out
    clean, skip = [], False
    for x in out:
        if skip:
            skip = False
            continue
        if x == "--seed":
            skip = True
            continue
        if x.startswith("--seed="):
            continue
        clean.append(x)
    return clean + ["--seed", str(seed)]


def main(argv: list[str] | None = None, _env_seed: bool = True) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    env = os.environ.get("FLOWNET_SEED") if _env_seed else None
    if env is not None and hasattr(a, "seed"):
        try:
            a.seed = int(env)
        except ValueError:
            print(f"flownet: FLOWNET_SEED must be an integer, got {env!r}", file=sys.stderr)
            return EXIT_USAGE
    if getattr(a, "seed", 0) is not None and getattr(a, "seed", 0) < 0:
        print("flownet: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        result = a.func(a)
        if a.command == "replay":
            return result
        inputs, outputs, extra = result
        config = {k: v for k, v in vars(a).items() if k not in ("func", "verbose")}
        manifest = {
            "command": a.command,
            "argv": _argv_for(argv, getattr(a, "seed", None)),
            "config": config,
            "seed": getattr(a, "seed", None),
            "inputs": {str(p): _sha256(p) for p in inputs},
            "outputs": {str(p): _sha256(p) for p in outputs},
            "tool_version": __version__,
            "duration_s": round(time.perf_counter() - start, 3),
            **extra,
        }
        _write_json(_manifest_path(outputs, a), manifest)
        return 0
    except UsageError as exc:
        print(f"flownet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DimensionError, DomainError, UnsupportedTopologyError) as exc:
        print(f"flownet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"flownet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"flownet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
