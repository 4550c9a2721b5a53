"""Command-line entry point: solve, gradcheck, retrieve, train, maskeval, selftest.

Exit codes: 0 success, 1 input error, 2 solver non-convergence, 3 failed
verification (selftest or gradcheck).
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .core import FeatureSet, FormatError, gap, read_pfs
from .diffgrad import DegeneracyError, grad_check
from .metrics import LossConfig
from .retrieval import (METRICS, Gallery, parse_experiment_config, rank_of, reports_to_csv, run_experiment,
                        score_gallery, summary_table)
from .synth import generate_pair, make_prototypes, mask_objects, random_scene
from .train import EmbeddingParams, TrainConfig, batch_loss, make_triplets, train, write_training_log
from .transport import (ConvergenceError, ParseError, kkt_residual, parse_problem, random_problem, solve,
                        solve_reference)

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3


class InputError(ValueError):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _fmt_matrix(a: np.ndarray) -> str:
    return "\n".join("  " + " ".join(f"{v:14.8f}" for v in row) for row in np.atleast_2d(a))


# -- solve ------------------------------------------------------------------------


def cmd_solve(args) -> int:
    if not args.problem:
        raise InputError("solve needs a problem file")
    problem = parse_problem(_read_text(args.problem))
    try:
        sol = solve(problem)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"residual = {exc.residual:.6e}")
        return EXIT_SOLVER
    x = sol.flow
    lines = [
        f"flow ({problem.m} x {problem.n}):",
        _fmt_matrix(x),
        f"objective = {sol.objective:.12g}",
        f"residual = {float(np.abs(kkt_residual(problem, sol)).max()):.6e}",
        f"iterations = {sol.iterations}",
        f"row_violation = {float(np.abs(x.sum(axis=1) - problem.supplies).max()):.3e}",
        f"col_violation = {float(np.abs(x.sum(axis=0) - problem.demands).max()):.3e}",
        f"min_flow = {float(x.min()):.3e}",
    ]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------


def _dw_check(u: np.ndarray, v: np.ndarray, threshold: float = 1e-3):
    shape_u, shape_v = u.shape, v.shape

    def fs(a, shape):
        return FeatureSet(1, shape[0], shape[1], a)

    def fn(a, b):
        return metrics.region_distance(fs(a, shape_u), fs(b, shape_v))

    def grad(a, b):
        _, gu, gv = metrics.d_w_and_grad(fs(a, shape_u), fs(b, shape_v))
        return gu, gv

    return grad_check(fn, grad, u, v, threshold=threshold)


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    m, n, c = args.m, args.n, args.channels
    u = np.abs(rng.standard_normal((m, c)))
    v = np.abs(rng.standard_normal((n, c)))
    try:
        report = _dw_check(u, v)
    except DegeneracyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _emit(report.to_text(), args.out)
    return EXIT_OK if report.passed else EXIT_VERIFY


# -- retrieve ---------------------------------------------------------------------


def cmd_retrieve(args) -> int:
    """Rank a gallery for one query.  Without --gallery a synthetic scene gallery is generated."""
    metric = args.metric or "ot+adj"
    if args.gallery:
        try:
            gallery = Gallery.load(args.gallery)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot load gallery {args.gallery}: {exc}") from exc
        if not args.query:
            raise InputError("--query is required with --gallery")
        query, true_id = read_pfs(args.query), None
    else:
        cfg = _experiment_config(args)
        rng = np.random.default_rng(args.seed)
        protos = make_prototypes(cfg.num_classes, cfg.channels, rng)
        items, pairs = [], []
        for k in range(cfg.gallery_size):
            spec = random_scene(rng, cfg.grid, cfg.channels, cfg.num_classes, cfg.num_objects, cfg.noise_sigma,
                                jitter=cfg.jitter, instance_spread=cfg.instance_spread,
                                background_scale=cfg.background_scale, nonnegative=cfg.nonnegative)
            photo, sketch, truth = generate_pair(spec, int(rng.integers(2**63)), protos)
            items.append((f"scene{k:04d}", photo))
            pairs.append((sketch, truth))
        gallery = Gallery(items)
        sketch, truth = pairs[0]
        query, _ = mask_objects(sketch, truth, args.pmask or 0.0, int(rng.integers(2**63)))
        true_id = items[0][0]
    ranking = score_gallery(query, gallery, metric)
    lines = [f"metric = {metric}", "rank,id,distance"]
    lines += [f"{k},{item_id},{dist:.10g}" for k, (item_id, dist) in enumerate(ranking[:args.top], start=1)]
    if true_id is not None:
        lines.append(f"true_match = {true_id} at rank {rank_of(ranking, true_id)}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# -- train ------------------------------------------------------------------------

_TRAIN_KEYS = {
    "steps": int, "batch_size": int, "learning_rate": float, "num_triplets": int, "channels": int,
    "embed_dim": int, "margin_global": float, "margin_region": float, "margin_struct": float,
    "alpha": float, "reg": float, "noise_sigma": float,
}


def _train_settings(args) -> dict:
    values = {"steps": 200, "batch_size": 16, "learning_rate": 5.0, "num_triplets": 32, "channels": 16,
              "embed_dim": 8, "margin_global": 0.05, "margin_region": 0.05, "margin_struct": 0.05,
              "alpha": LossConfig.alpha, "reg": 1e-3, "noise_sigma": 0.1}
    if args.config:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(_read_text(args.config), source=args.config)
        except configparser.Error as exc:
            raise InputError(str(exc)) from exc
        for section in cp.sections():
            if section != "train":
                raise InputError(f"{args.config}: unknown section [{section}]")
        if cp.has_section("train"):
            for key, raw in cp["train"].items():
                if key not in _TRAIN_KEYS:
                    raise InputError(f"{args.config}: [train] unknown key {key!r}")
                try:
                    values[key] = _TRAIN_KEYS[key](raw)
                except ValueError as exc:
                    raise InputError(f"{args.config}: [train] field {key!r}: {exc}") from exc
    if args.steps is not None:
        values["steps"] = args.steps
    return values


def cmd_train(args) -> int:
    opts = _train_settings(args)
    try:
        loss = LossConfig(opts["margin_global"], opts["margin_region"], opts["margin_struct"], opts["alpha"])
        cfg = TrainConfig(loss, opts["batch_size"], opts["steps"], opts["reg"])
        triplets = make_triplets(opts["num_triplets"], args.seed, channels=opts["channels"],
                                 noise_sigma=opts["noise_sigma"])
        params = EmbeddingParams.random(opts["channels"], opts["embed_dim"], args.seed, opts["learning_rate"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    start = batch_loss(params, triplets, loss, cfg.reg)[0]
    params, history = train(params, triplets, cfg)
    end = batch_loss(params, triplets, loss, cfg.reg)[0]
    if args.out:
        write_training_log(history, args.out)
    print(f"steps = {cfg.steps}")
    print(f"initial_loss = {start:.8g}")
    print(f"final_loss = {end:.8g}")
    print(f"ratio = {end / start if start else float('nan'):.4f}")
    return EXIT_OK


# -- maskeval ---------------------------------------------------------------------


def _experiment_config(args):
    overrides = {"seed": args.seed, "runs": args.runs}
    if getattr(args, "metric", None):
        overrides["metrics"] = (args.metric,)
    if getattr(args, "pmask", None) is not None:
        overrides["p_mask_levels"] = (args.pmask,)
    text = _read_text(args.config) if args.config else ""
    try:
        return parse_experiment_config(text, args.config or "<defaults>", **overrides)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_maskeval(args) -> int:
    cfg = _experiment_config(args)
    start = time.perf_counter()

    def progress(run, p):
        print(f"run {run + 1}/{cfg.runs} p_mask={p:.2f} ({time.perf_counter() - start:.0f}s)", file=sys.stderr)

    reports = run_experiment(cfg, progress)
    csv_text = reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(summary_table(reports), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# -- selftest ---------------------------------------------------------------------


def _check_oracle(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(30):
        m, n = (int(k) for k in rng.integers(1, 4, size=2))
        p = random_problem(rng, m, n)
        worst = max(worst, float(np.abs(solve(p).flow - solve_reference(p).flow).max()))
    return worst <= 1e-5, f"max |x_ipm - x_ref| = {worst:.2e}"


def _check_feasibility(rng) -> tuple[bool, str]:
    worst_marg, worst_neg, worst_kkt = 0.0, 0.0, 0.0
    for _ in range(200):
        m, n = (int(k) for k in rng.integers(1, 6, size=2))
        p = random_problem(rng, m, n)
        sol = solve(p)
        x = sol.flow
        worst_marg = max(worst_marg, float(np.abs(x.sum(axis=1) - p.supplies).max()),
                         float(np.abs(x.sum(axis=0) - p.demands).max()))
        worst_neg = min(worst_neg, float(x.min()))
        worst_kkt = max(worst_kkt, float(np.abs(kkt_residual(p, sol)).max()))
    ok = worst_marg <= 1e-6 and worst_neg >= -1e-8 and worst_kkt <= 1e-6
    return ok, f"marginal {worst_marg:.1e}, min flow {worst_neg:.1e}, kkt {worst_kkt:.1e}"


def _check_gradients(rng) -> tuple[bool, str]:
    worst = 0.0
    for m, n in ((2, 2), (2, 3), (3, 2)):
        report = _dw_check(np.abs(rng.standard_normal((m, 4))), np.abs(rng.standard_normal((n, 4))))
        worst = max(worst, report.max_rel_err)
    return worst <= 1e-3, f"max relative error {worst:.2e}"


def _check_identity(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        m, n, c = (int(k) for k in rng.integers(1, 6, size=3))
        u = FeatureSet(1, m, c, rng.standard_normal((m, c)))
        v = FeatureSet(1, n, c, rng.standard_normal((n, c)))
        pooled = 1.0 - gap(u) @ gap(v)
        pairwise = float(np.mean(1.0 - u.data @ v.data.T))
        worst = max(worst, abs(pooled - pairwise))
    return worst <= 1e-9, f"max deviation {worst:.1e}"


def _check_empty_region(rng) -> tuple[bool, str]:
    c = 6
    u = np.abs(rng.standard_normal((4, c)))
    v = np.abs(rng.standard_normal((4, c)))
    u[:, 0] = v[:, 0] = 0.0
    u[3] = np.eye(c)[0]
    w = metrics.omega(FeatureSet(2, 2, c, u), FeatureSet(2, 2, c, v))
    touched = float(np.abs(np.concatenate([w[3], w[:, 3]])).max())
    return touched == 0.0, f"max omega on the empty region {touched:.1e}"


SELFTEST_SUITES = {
    "oracle-equivalence": _check_oracle,
    "feasibility": _check_feasibility,
    "gradcheck": _check_gradients,
    "pooling-identity": _check_identity,
    "empty-region": _check_empty_region,
}


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, check in SELFTEST_SUITES.items():
        rng = np.random.default_rng([seed, len(results)])
        try:
            ok, detail = check(rng)
        except Exception as exc:  # a crash is a failure of that property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results


def cmd_selftest(args) -> int:
    start = time.perf_counter()
    results = run_selftest(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

COMMANDS = {
    "solve": cmd_solve,
    "gradcheck": cmd_gradcheck,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "maskeval": cmd_maskeval,
    "selftest": cmd_selftest,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regionot", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("problem", nargs="?", help="problem file (solve)")
    parser.add_argument("--seed", type=_u64, default=0)
    parser.add_argument("--config", help="structured key-value config file")
    parser.add_argument("--out", help="output file (default: stdout)")
    parser.add_argument("--metric", choices=METRICS)
    parser.add_argument("--pmask", type=float)
    parser.add_argument("--runs", type=_positive)
    parser.add_argument("--gallery", help="gallery directory (retrieve)")
    parser.add_argument("--query", help="query PFS1 file (retrieve)")
    parser.add_argument("--top", type=_positive, default=10, help="rows to print (retrieve)")
    parser.add_argument("--steps", type=int, help="training steps (train)")
    parser.add_argument("--m", type=_positive, default=2, help="sketch regions (gradcheck)")
    parser.add_argument("--n", type=_positive, default=3, help="photo regions (gradcheck)")
    parser.add_argument("--channels", type=_positive, default=4, help="channels (gradcheck)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if args.pmask is not None and not 0.0 <= args.pmask <= 1.0:
        print("error: --pmask must lie in [0, 1]", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (InputError, ParseError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
