"""``scfm`` command-line entry point.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or
configuration error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, config_load
from .data import gen_factors_lite, gen_gmm2d
from .errors import (ConfigError, DomainError, FormatError, IoError, MetricValueError, ScfmError,
                     ShapeError)
from .metrics import (GaussianStats, dci_disentanglement, factorvae_score, frechet_distance,
                      hungarian_acc, importance_from_linear, nmi, probe_train_eval)
from .model import ScfmModel, build_model
from .networks import endpoint_encode
from .objectives import TrainState, aggregate_kl_estimate, train
from .oracle import run_all
from .prior import responsibilities
from .rng import substream
from .sampler import SolverSpec, reconstruct, sample_decoder, sample_full, sample_refined
from .tensorio import load_checkpoint, save_checkpoint, stf_read, stf_write, write_json

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# canonical metric JSON


def _canonical(value, key: str) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise MetricValueError(key, v)
        return format(v, ".17g")
    if isinstance(value, str) or value is None:
        return json.dumps(value)
    if isinstance(value, dict):
        items = sorted((str(k), v) for k, v in value.items())
        body = ", ".join(f"{json.dumps(k)}: {_canonical(v, f'{key}.{k}' if key else k)}"
                         for k, v in items)
        return "{" + body + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_canonical(v, f"{key}[{i}]") for i, v in enumerate(value)) + "]"
    raise MetricValueError(key, value)


def metrics_json(values: dict) -> str:
    return _canonical(values, "") + "\n"


def emit_metrics(path, values: dict):
    """Write ``values`` as canonical JSON (sorted keys, 17 significant digits).

    Raises MetricValueError naming the first non-finite entry; nothing is
    written in that case. ``path=None`` prints to stdout.
    """
    text = metrics_json(values)
    if path is None:
        sys.stdout.write(text)
    else:
        from .tensorio import _atomic_write

        _atomic_write(Path(path), text.encode())


# ---------------------------------------------------------------------------
# helpers


def _load_model(directory, use_ema: bool) -> ScfmModel:
    model, extra = load_checkpoint(directory)
    if use_ema:
        params = model.named_parameters()
        missing = [k for k in params if f"ema.{k}" not in extra]
        if missing:
            raise FormatError(f"checkpoint has no EMA tensors for {missing[:3]}")
        for k, p in params.items():
            p.data = extra[f"ema.{k}"]
    return model


def _training_data(cfg: TrainConfig) -> np.ndarray:
    if cfg.dataset == "gmm2d":
        if cfg.D != 2:
            raise ConfigError("dataset gmm2d needs D = 2")
        return gen_gmm2d(cfg.gmm2d_k, cfg.gmm2d_separation, cfg.dataset_size, cfg.seed)[0]
    if cfg.dataset == "factors-lite":
        ds = gen_factors_lite(cfg.seed)
        if cfg.D != ds.D:
            raise ConfigError(f"dataset factors-lite needs D = {ds.D}")
        rng = substream(cfg.seed, "factors-lite-draws")
        grid = ds.all_factors
        return ds.render(grid[rng.integers(len(grid), size=cfg.dataset_size)])
    data = stf_read(cfg.data_path)
    if data.ndim != 2 or data.shape[1] != cfg.D:
        raise ConfigError(f"data file must hold an [N, {cfg.D}] tensor")
    return data


def _encode_mean(model: ScfmModel, x) -> np.ndarray:
    with ad.no_grad():
        return endpoint_encode(model.net, np.asarray(x, dtype=np.float64))[0].data


def _solver(args, default_steps: int) -> SolverSpec:
    steps = args.steps if args.steps is not None else default_steps
    return SolverSpec(args.solver, steps, args.rtol, args.atol)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = config_load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    out = Path(args.out)
    effective = cfg.to_dict()
    print(json.dumps(effective, sort_keys=True, indent=2))
    data = _training_data(cfg)
    cfg.dataset_size = len(data)
    model = build_model(cfg.d_z, cfg.d_eps, cfg.K, substream(cfg.seed, "init"), cfg.hidden,
                        cfg.var_hidden, cfg.dec_hidden, cfg.activation,
                        mean_skip=cfg.mean_skip)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", effective)
    last = {}
    try:
        with open(out / "train_log.jsonl", "w") as log:
            state = train(model, data, cfg, log=log,
                          callback=lambda step, losses: last.update(losses.as_dict()))
    except OSError as exc:
        raise IoError(f"cannot write training log: {exc}") from exc
    save_checkpoint(out, model, {f"ema.{k}": v for k, v in state.ema.items()})
    kl_agg = aggregate_kl_estimate(model, data[: min(len(data), 2000)],
                                   substream(cfg.seed, "kl-agg"))
    emit_metrics(out / "metrics.json", {**last, "steps": state.step, "kl_aggregate": kl_agg})
    return EXIT_OK


def cmd_sample(args) -> int:
    model = _load_model(args.model, args.ema)
    rng = substream(args.seed, "sample")
    if args.mode == "full":
        trace = sample_full(model, args.n, _solver(args, 25), rng)
    elif args.mode == "decoder":
        trace = sample_decoder(model, args.n, rng, args.stochastic_decoder)
    else:
        trace = sample_refined(model, args.n, args.t0, _solver(args, 5), rng,
                               args.stochastic_decoder)
    stf_write(args.out, trace.x_final)
    diag = trace.diagnostics()
    emit_metrics(str(args.out) + ".json", diag)
    emit_metrics(None, diag)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model = _load_model(args.model, args.ema)
    x1 = stf_read(args.data)
    if x1.ndim != 2 or x1.shape[1] != model.D:
        raise DomainError(f"data must be an [N, {model.D}] tensor")
    trace = reconstruct(model, x1, _solver(args, 25), substream(args.seed, "reconstruct"))
    stf_write(args.out, trace.x_final)
    diag = trace.diagnostics()
    emit_metrics(str(args.out) + ".json", diag)
    emit_metrics(None, diag)
    return EXIT_OK


def cmd_eval_cluster(args) -> int:
    model = _load_model(args.model, args.ema)
    x = stf_read(args.data)
    labels = stf_read(args.labels).astype(np.int64).ravel()
    z = _encode_mean(model, x)
    clusters = responsibilities(model.prior, z).argmax(axis=1)
    acc, _ = hungarian_acc(labels, clusters)
    emit_metrics(args.out, {"acc": acc, "nmi": nmi(labels, clusters), "n": int(len(labels))})
    return EXIT_OK


def cmd_eval_disentangle(args) -> int:
    model = _load_model(args.model, args.ema)
    ds = gen_factors_lite(args.data_seed)
    if model.D != ds.D:
        raise DomainError(f"model D={model.D} does not match dataset D={ds.D}")
    score, info = factorvae_score(lambda x: _encode_mean(model, x), ds,
                                  rng=substream(args.seed, "factorvae"), return_info=True)
    grid = ds.all_factors
    R = importance_from_linear(_encode_mean(model, ds.render(grid)), grid)
    emit_metrics(args.out, {"factorvae": score, "dci": dci_disentanglement(R),
                            "factorvae_excluded_coordinates": info["excluded_coordinates"],
                            "factorvae_std_floor": info["std_floor"]})
    return EXIT_OK


def cmd_eval_frechet(args) -> int:
    a, b = stf_read(args.a), stf_read(args.b)
    fd = frechet_distance(GaussianStats.from_samples(a), GaussianStats.from_samples(b))
    emit_metrics(args.out, {"frechet": fd})
    return EXIT_OK


def cmd_probe(args) -> int:
    model = _load_model(args.model, args.ema)
    x = stf_read(args.data)
    y = stf_read(args.labels).astype(np.int64).ravel()
    if len(x) != len(y):
        raise DomainError("data and labels differ in length")
    z = _encode_mean(model, x)
    perm = substream(args.seed, "probe-split").permutation(len(y))
    n_test = max(1, int(round(args.test_frac * len(y))))
    te, tr = perm[:n_test], perm[n_test:]
    ks = [int(k) for k in args.topk.split(",") if k]
    acc = probe_train_eval(z[tr], y[tr], z[te], y[te], args.kind, ks, args.seed)
    emit_metrics(args.out, {f"top{k}": v for k, v in acc.items()})
    return EXIT_OK


def cmd_oracle(args) -> int:
    start = time.perf_counter()
    report = run_all(args.seed)
    print(f"oracle suite finished in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    emit_metrics(args.out, report)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_data_gmm2d(args) -> int:
    pts, labels = gen_gmm2d(args.k, args.separation, args.n, args.seed)
    stf_write(args.out, pts)
    stf_write(args.labels_out, labels.astype(np.float64))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="scfm", formatter_class=fmt,
                                description="Structured-coupling flow matching toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(parent, name, fn, help_text):
        sp = parent.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    def model_flags(sp):
        sp.add_argument("--model", required=True, help="checkpoint directory")
        sp.add_argument("--ema", action="store_true", help="use EMA parameters")

    def solver_flags(sp):
        sp.add_argument("--solver", choices=["heun", "dopri5"], default="heun", help="ODE solver")
        sp.add_argument("--steps", type=int, default=None,
                        help="heun steps (default 25 for full flow, 5 for refinement)")
        sp.add_argument("--rtol", type=float, default=1e-5, help="dopri5 relative tolerance")
        sp.add_argument("--atol", type=float, default=1e-5, help="dopri5 absolute tolerance")

    sp = add(sub, "train", cmd_train, "train a model from a JSON config")
    sp.add_argument("--config", required=True, help="JSON config file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--steps", type=int, default=None, help="override the config step count")

    sp = add(sub, "sample", cmd_sample, "generate samples")
    model_flags(sp)
    sp.add_argument("--n", type=int, required=True, help="number of samples")
    sp.add_argument("--mode", choices=["full", "decoder", "refine"], default="full",
                    help="sampling mode")
    sp.add_argument("--t0", type=float, default=0.8, help="refinement start time")
    sp.add_argument("--stochastic-decoder", action="store_true",
                    help="add unit observation noise to decoder proposals")
    solver_flags(sp)
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", required=True, help="output STF file")

    sp = add(sub, "reconstruct", cmd_reconstruct, "encode data and transport it back")
    model_flags(sp)
    sp.add_argument("--data", required=True, help="input STF tensor [N, D]")
    solver_flags(sp)
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", required=True, help="output STF file")

    ev = add(sub, "eval", None, "evaluation metrics")
    evsub = ev.add_subparsers(dest="eval_command", required=True, metavar="METRIC")
    sp = add(evsub, "cluster", cmd_eval_cluster, "clustering ACC and NMI of prior assignments")
    model_flags(sp)
    sp.add_argument("--data", required=True, help="STF tensor [N, D]")
    sp.add_argument("--labels", required=True, help="STF tensor of integer labels")
    sp.add_argument("--out", default=None, help="metrics JSON file (stdout if omitted)")
    sp = add(evsub, "disentangle", cmd_eval_disentangle, "FactorVAE and DCI scores")
    model_flags(sp)
    sp.add_argument("--dataset", choices=["factors-lite"], default="factors-lite",
                    help="factor dataset")
    sp.add_argument("--data-seed", type=int, default=0, help="dataset construction seed")
    sp.add_argument("--seed", type=int, default=0, help="metric sampling seed")
    sp.add_argument("--out", default=None, help="metrics JSON file (stdout if omitted)")
    sp = add(evsub, "frechet", cmd_eval_frechet, "Frechet distance between two sample sets")
    sp.add_argument("--a", required=True, help="STF tensor [N, d]")
    sp.add_argument("--b", required=True, help="STF tensor [M, d]")
    sp.add_argument("--out", default=None, help="metrics JSON file (stdout if omitted)")

    sp = add(sub, "probe", cmd_probe, "Top-k accuracy of a probe on frozen latents")
    model_flags(sp)
    sp.add_argument("--data", required=True, help="STF tensor [N, D]")
    sp.add_argument("--labels", required=True, help="STF tensor of integer labels")
    sp.add_argument("--kind", choices=["linear", "mlp"], default="linear", help="probe family")
    sp.add_argument("--topk", default="1,5", help="comma-separated k values")
    sp.add_argument("--test-frac", type=float, default=0.2, help="held-out fraction")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", default=None, help="metrics JSON file (stdout if omitted)")

    sp = add(sub, "oracle", cmd_oracle, "run the closed-form verification suite")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", default=None, help="report JSON file (stdout if omitted)")

    da = add(sub, "data", None, "generate synthetic datasets")
    dasub = da.add_subparsers(dest="data_command", required=True, metavar="DATASET")
    sp = add(dasub, "gmm2d", cmd_data_gmm2d, "2-D Gaussian blobs on a circle")
    sp.add_argument("--k", type=int, default=5, help="number of clusters")
    sp.add_argument("--separation", type=float, default=6.0, help="circle radius")
    sp.add_argument("--n", type=int, default=20000, help="number of points")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", required=True, help="points STF file")
    sp.add_argument("--labels-out", required=True, help="labels STF file")
    return p


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (IoError, FormatError, OSError) as exc:
        print(f"scfm: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DomainError, ShapeError) as exc:
        print(f"scfm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MetricValueError as exc:
        print(f"scfm: non-finite metric {exc.key!r}", file=sys.stderr)
        return EXIT_FAIL
    except ScfmError as exc:
        print(f"scfm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main(argv=None) -> int:
    code = dispatch(sys.argv[1:] if argv is None else argv)
    sys.exit(code)
