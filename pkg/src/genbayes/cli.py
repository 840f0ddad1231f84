"""Command line front end: generate, train, sample, evaluate, benchmark.

Every command takes ``--config FILE`` with flat ``key = value`` lines whose
keys are the long flag names with underscores. Precedence, lowest first:
built-in defaults, the ``GENBAYES_SEED`` environment variable (seed only),
the config file, explicit flags. Each run writes its resolved settings to
``config.txt`` in its output directory, and feeding that file back with
``--config`` reproduces every output byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import causal, dgp, engine, metrics, nn

log = logging.getLogger("genbayes")

SEED_ENV = "GENBAYES_SEED"
# settings that locate outputs rather than define them
NOT_RECORDED = {"config", "out", "command", "verbose", "func"}

# mode-dependent training defaults, filled in when a flag is left unset
TRAIN_DEFAULTS = {
    "causal": dict(epochs=300, learning_rate=5e-3, batch_size=200, lr_final_frac=0.05),
    "engine": dict(epochs=20, learning_rate=2e-3, batch_size=256, lr_final_frac=0.02),
}


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt(conv):
    """Converter that maps the literal 'none' to None."""

    def convert(text):
        if text is None or str(text).strip().lower() == "none":
            return None
        return conv(text)

    convert.__name__ = conv.__name__
    return convert


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def write_config(path: Path, args: argparse.Namespace) -> None:
    lines = [f"command = {args.command}"]
    for key in sorted(vars(args)):
        if key not in NOT_RECORDED:
            lines.append(f"{key} = {_render(getattr(args, key))}")
    path.write_text("\n".join(lines) + "\n")


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value file; explicit flags override it")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_opt(int), default=None)
    g.add_argument("--learning-rate", type=_opt(float), default=None)
    g.add_argument("--batch-size", type=_opt(int), default=None)
    g.add_argument("--lr-final-frac", type=_opt(float), default=None,
                   help="final learning rate as a fraction of the initial one (cosine decay)")
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--members", type=int, default=8, help="bootstrap ensemble size for the causal model")
    g.add_argument("--w-z", type=float, default=1.0)
    g.add_argument("--w-q", type=float, default=1.0)
    g.add_argument("--w-mse", type=float, default=1.0)
    g.add_argument("--w-cross", type=float, default=1.0)
    g.add_argument("--w-eff", type=float, default=0.07, help="shrinkage weight on the effect readout")
    g.add_argument("--n-cos", type=int, default=32, help="cosine terms in the causal quantile embedding")
    g.add_argument("--width", type=int, default=32, help="hidden width of the causal net blocks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genbayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate the causal benchmark data")
    _common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--p", type=int, default=3, help="covariate count (extra columns are noise)")
    p.add_argument("--raw-tau", type=_bool, nargs="?", const=True, default=False,
                   help="generate y with the unstandardised effect")
    p.add_argument("--bins", type=int, default=30)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a causal quantile model or an inverse posterior map")
    _common(p)
    p.add_argument("--mode", choices=("causal", "engine"), default="causal")
    p.add_argument("--data", default="", help="observational CSV (causal mode)")
    p.add_argument("--model", choices=("conjugate",), default="conjugate", help="simulator (engine mode)")
    p.add_argument("--N", type=int, default=100_000, help="simulation table rows (engine mode)")
    p.add_argument("--prior-mean", type=float, default=0.0)
    p.add_argument("--prior-sd", type=float, default=1.0)
    p.add_argument("--like-sd", type=float, default=1.0)
    _training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw effect or parameter posteriors from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=False, default="")
    p.add_argument("--data", default="", help="CSV with covariates (causal checkpoints)")
    p.add_argument("--units", default="all", help="comma separated unit ids or 'all'")
    p.add_argument("--y-obs", default="", help="observations for engine checkpoints, ';' between cases")
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a causal checkpoint against ground truth")
    _common(p)
    p.add_argument("--checkpoint", default="")
    p.add_argument("--truth", default="", help="CSV with ground-truth columns")
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--grid-size", type=int, default=99)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="replicated generate, train, evaluate")
    _common(p)
    p.add_argument("--R", type=int, default=20)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--grid-size", type=int, default=99)
    _training(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    defaults = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            defaults["seed"] = int(env_seed)
        except ValueError:
            parser.error(f"{SEED_ENV} must be an integer, got {env_seed!r}")
    if args.config:
        try:
            cfg = read_config(args.config)
        except (OSError, UsageError) as err:
            parser.error(f"cannot read config: {err}")
        cmd = cfg.pop("command", args.command)
        if cmd != args.command:
            parser.error(f"config is for '{cmd}', not '{args.command}'")
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(cfg) - known - NOT_RECORDED)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults.update(cfg)
    if defaults:
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = 0
    else:
        args.seed = int(args.seed)
    try:
        _validate(args)
    except UsageError as err:
        subparser.error(str(err))
    return args


def _validate(args) -> None:
    positive = {"n": "--n", "bins": "--bins", "N": "--N", "M": "--M", "R": "--R", "members": "--members",
                "epochs": "--epochs", "batch_size": "--batch-size", "grid_size": "--grid-size",
                "n_cos": "--n-cos", "width": "--width"}
    for key, flag in positive.items():
        val = getattr(args, key, None)
        if val is not None and val < 1:
            raise UsageError(f"{flag} must be at least 1")
    if getattr(args, "p", 3) < 3:
        raise UsageError("--p must be at least 3")
    if getattr(args, "sigma", 0.0) < 0:
        raise UsageError("--sigma must be nonnegative")
    level = getattr(args, "level", 0.5)
    if not 0 < level < 1:
        raise UsageError("--level must lie in (0, 1)")
    if args.seed < 0:
        raise UsageError("--seed must be nonnegative")
    if args.command in ("evaluate",) and getattr(args, "M", 100) < 100:
        raise UsageError("--M must be at least 100 for evaluation")
    if args.command == "train":
        for key, val in TRAIN_DEFAULTS[args.mode].items():
            if getattr(args, key) is None:
                setattr(args, key, val)
        if args.mode == "causal" and not args.data:
            raise UsageError("--data is required in causal mode")
    if args.command == "benchmark":
        for key, val in TRAIN_DEFAULTS["causal"].items():
            if getattr(args, key) is None:
                setattr(args, key, val)
    if args.command in ("sample", "evaluate") and not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if args.command == "evaluate" and not args.truth:
        raise UsageError("--truth is required")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _train_config(args, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size, epochs=args.epochs,
                          optimizer=args.optimizer, seed=seed, lr_final_frac=args.lr_final_frac,
                          weight_decay=args.weight_decay)


def _loss_weights(args) -> causal.LossWeights:
    return causal.LossWeights(w_z=args.w_z, w_q=args.w_q, w_mse=args.w_mse, w_cross=args.w_cross,
                              w_eff=args.w_eff)


def _causal_arch(args, p: int) -> causal.CausalArch:
    return causal.CausalArch(p=p, n_cos=args.n_cos, width=args.width)


def _fit_causal(ds, args, seed: int):
    return causal.train_causal_ensemble(ds.observational(), args.members, _causal_arch(args, ds.p),
                                        _train_config(args, seed), _loss_weights(args))


def _histograms(ds: dgp.CausalDataset, bins: int) -> tuple[list[str], list[list]]:
    columns = {"y": ds.y, "mu": ds.mu_true, "tau": ds.tau_true, "pi": ds.pi_true}
    header = ["bin"]
    parts = []
    for name, values in columns.items():
        counts, edges = np.histogram(values, bins=bins)
        header += [f"{name}_lo", f"{name}_hi", f"{name}_count"]
        parts.append((edges[:-1], edges[1:], counts))
    rows = [[b] + [v for lo, hi, c in parts for v in (lo[b], hi[b], int(c[b]))] for b in range(bins)]
    return header, rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    ds = dgp.gen_causal(args.n, args.sigma, args.seed, p=args.p, raw_tau=args.raw_tau)
    out = _out_dir(args)
    ds.to_csv(out / "data.csv", truth=False)
    ds.to_csv(out / "truth.csv", truth=True)
    header, rows = _histograms(ds, args.bins)
    _write_csv(out / "histograms.csv", header, rows)
    write_config(out / "config.txt", args)
    print(f"n = {ds.n}")
    print(f"treated share = {ds.z.mean():.4f} (mean propensity {ds.pi_true.mean():.4f})")
    print(f"y mean = {ds.y.mean():.4f}, sd = {ds.y.std():.4f}")
    print(f"raw effect mean = {ds.tau_mean:.4f}, sd = {ds.tau_sd:.4f}")
    return 0


def _write_trace(path: Path, trace) -> None:
    if isinstance(trace, dict):
        keys = list(trace)
        rows = [[e + 1] + [trace[k][e] for k in keys] for e in range(len(trace[keys[0]]) if keys else 0)]
        _write_csv(path, ["epoch", *keys], rows)
    else:
        _write_csv(path, ["epoch", "loss"], [[e + 1, v] for e, v in enumerate(trace or [])])


def _ensemble_trace(model: causal.CausalEnsemble) -> dict[str, list[float]]:
    keys = list(model.members[0].history)
    return {k: list(np.mean([m.history[k] for m in model.members], axis=0)) for k in keys}


def cmd_train(args) -> int:
    out = _out_dir(args)
    write_config(out / "config.txt", args)
    trace_path = out / "loss_trace.csv"
    try:
        if args.mode == "engine":
            sim = engine.ConjugateSimulator(args.prior_mean, args.prior_sd, args.like_sd)
            table = engine.build_sim_table(sim, args.N, seed=nn.derive_seed(args.seed, 0))
            imap = engine.train_inverse_map(table, engine.ArchConfig(), _train_config(args, nn.derive_seed(args.seed, 1)))
            engine.save_inverse_map(out / "model.bin", imap)
            _write_trace(trace_path, imap.loss_trace)
        else:
            ds = dgp.CausalDataset.from_csv(args.data)
            model = causal.train_causal_ensemble(ds.observational(), args.members, _causal_arch(args, ds.p),
                                                 _train_config(args, args.seed), _loss_weights(args))
            causal.save_causal(out / "model.bin", model)
            _write_trace(trace_path, _ensemble_trace(model))
    except engine.TrainingDiverged as err:
        _write_trace(trace_path, err.trace)
        raise
    return 0


def _load_checkpoint(path: str, ds: dgp.CausalDataset | None = None):
    arrays, meta = nn.load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "oracle_effect":
        if ds is None or not ds.has_truth:
            raise ValueError("an oracle checkpoint needs a dataset with ground truth")
        return metrics.OracleEffect(ds)
    if kind == "inverse_map":
        return engine.InverseMap.from_arrays(arrays, meta)
    return causal.load_causal(path)


def write_oracle_checkpoint(path: str | Path) -> None:
    """Checkpoint standing for the true effect of whichever dataset it is scored on."""
    nn.save_checkpoint(path, {}, {"kind": "oracle_effect"})


def _parse_units(text: str, n: int) -> np.ndarray:
    if text.strip().lower() == "all":
        return np.arange(n)
    ids = np.array([int(t) for t in text.split(",") if t.strip()], dtype=np.int64)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= n:
        raise ValueError(f"unit ids must lie in 0..{n - 1}")
    return ids


def cmd_sample(args) -> int:
    out = _out_dir(args)
    write_config(out / "config.txt", args)
    ds = dgp.CausalDataset.from_csv(args.data) if args.data else None
    model = _load_checkpoint(args.checkpoint, ds)
    if isinstance(model, engine.InverseMap):
        cases = [np.array([float(v) for v in c.split(",")]) for c in args.y_obs.split(";") if c.strip()]
        if not cases:
            raise ValueError("--y-obs is required for an inverse-map checkpoint")
        rows = []
        for i, y in enumerate(cases):
            draws = engine.posterior_sample(model, y, args.M, seed=nn.derive_seed(args.seed, i))
            rows += [[i, j, *draws[j]] for j in range(args.M)]
        _write_csv(out / "samples.csv", ["obs_id", "draw_id", *[f"theta_{k + 1}" for k in range(model.k)]], rows)
        return 0
    if ds is None:
        raise ValueError("--data is required for a causal checkpoint")
    units = _parse_units(args.units, ds.n)
    # unit u always draws from the stream derived from (seed, u), whatever the selection
    if len(units) == ds.n:
        draws = causal.cate_draws(model, ds.x, args.M, args.seed)
    else:
        draws = np.vstack([causal.cate_posterior(model, ds.x[u], args.M, args.seed, int(u)).draws for u in units])
    _write_csv(out / "samples.csv", ["unit_id", "draw_id", "tau_draw"],
               ([u, j, draws[i, j]] for i, u in enumerate(units) for j in range(args.M)))
    alpha = 1.0 - args.level
    lo = metrics.nearest_rank_quantile(draws, alpha / 2)
    hi = metrics.nearest_rank_quantile(draws, 1 - alpha / 2)
    y_mean, y_med, pi_hat = _outcome_readout(model, ds.x[units], ds.z[units])
    _write_csv(out / "predictions.csv", ["unit_id", "y_hat_mean", "y_hat_q50", "pi_hat", "cate_mean", "ci_lo", "ci_hi"],
               ([u, y_mean[i], y_med[i], pi_hat[i], draws[i].mean(), lo[i], hi[i]] for i, u in enumerate(units)))
    return 0


def _outcome_readout(model, x, z):
    """Mean head, median head and propensity at the observed treatment;
    NaN for models without those heads."""
    if not isinstance(model, (causal.CausalEnsemble, causal.CausalQuantileNet)):
        nan = np.full(len(x), np.nan)
        return nan, nan, nan
    return causal.predict_outcomes(model, x, z, q=0.5)


REPORT_FIELDS = list(metrics.MetricsReport.__dataclass_fields__)


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    write_config(out / "config.txt", args)
    ds = dgp.CausalDataset.from_csv(args.truth)
    model = _load_checkpoint(args.checkpoint, ds)
    report = metrics.evaluate(ds, model, M=args.M, level=args.level, seed=args.seed, grid_size=args.grid_size)
    report.write(out / "report.txt")
    _write_csv(out / "report.csv", REPORT_FIELDS, [[getattr(report, k) for k in REPORT_FIELDS]])
    print(report.to_text(), end="")
    return 0


def replication_seed(seed: int, r: int) -> int:
    return nn.derive_seed(seed, r)


def run_replication(args, r: int) -> metrics.MetricsReport:
    s = replication_seed(args.seed, r)
    ds = dgp.gen_causal(args.n, args.sigma, nn.derive_seed(s, 0), p=args.p)
    model = _fit_causal(ds, args, nn.derive_seed(s, 1))
    return metrics.evaluate(ds, model, M=args.M, level=args.level, seed=nn.derive_seed(s, 2),
                            grid_size=args.grid_size)


def cmd_benchmark(args) -> int:
    out = _out_dir(args)
    write_config(out / "config.txt", args)
    header = ["replication", "seed", "status", *REPORT_FIELDS, "baseline_win"]
    rows, reports, failed = [], [], 0
    for r in range(args.R):
        t0 = time.perf_counter()
        try:
            rep = run_replication(args, r)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as err:
            failed += 1
            log.error("replication %d failed: %s", r, err)
            rows.append([r, replication_seed(args.seed, r), "failed"] + [""] * (len(REPORT_FIELDS) + 1))
            continue
        reports.append(rep)
        rows.append([r, replication_seed(args.seed, r), "ok", *[getattr(rep, k) for k in REPORT_FIELDS],
                     rep.cate_rmse < rep.baseline_cate_rmse])
        log.info("replication %d: ate error %.4f, coverage %.3f, corr %.3f (%.1fs)", r,
                 rep.ate_est - rep.ate_true, rep.coverage, rep.cate_corr, time.perf_counter() - t0)
    _write_csv(out / "benchmark.csv", header, rows)
    agg_rows = []
    if reports:
        table = {k: np.array([getattr(rep, k) for rep in reports], dtype=float) for k in REPORT_FIELDS}
        table["abs_ate_err"] = np.abs(table["ate_est"] - table["ate_true"])
        table["baseline_win"] = (table["cate_rmse"] < table["baseline_cate_rmse"]).astype(float)
        for k, col in table.items():
            sd = float(np.std(col, ddof=1)) if len(col) > 1 else 0.0
            agg_rows.append([k, math.fsum(col) / len(col), sd, len(col)])
    _write_csv(out / "aggregate.csv", ["metric", "mean", "sd", "count"], agg_rows)
    for name, mean, sd, _ in agg_rows:
        if name in ("abs_ate_err", "coverage", "cate_corr", "cate_rmse", "baseline_cate_rmse", "baseline_win"):
            print(f"{name} = {mean:.4f} (sd {sd:.4f})")
    if failed:
        print(f"{failed} of {args.R} replications failed", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (OSError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as err:
        print(f"genbayes {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
