"""
main.py

Command-line entry point for fitting, evaluating and inspecting polynomial approximants.
- approx / refine: fit linear or quadratic approximants to a network bundle
- eval / spectrum / attack: evaluation report, eigendecomposition, SVD attack curve
- sweep: end-to-end training-dynamics experiment from a JSON config
Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 resource budget exceeded.
"""

import argparse
import csv
import json
import logging
import os
import sys

from src.analysis import DEFAULT_EVAL_SAMPLES, attack_accuracy_curve, coefficient_rank, evaluate, quadratic_spectrum
from src.approx import LinearApproximant, QuadraticApproximant, linear_approx, quadratic_approx, refine_quadratic
from src.bundle_io import bundle_write, load_approximant, load_distribution, load_net, save_approximant
from src.errors import InvalidInputError, exit_code_for

__all__ = ["main"]


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Polynomial approximants of MLPs and GLUs under Gaussian inputs")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("approx", help="Fit a closed-form approximant")
    p.add_argument("--net", required=True, help="Network bundle")
    p.add_argument("--dist", required=True, help="Distribution (.json or bundle)")
    p.add_argument("--degree", type=int, choices=[1, 2], default=1)
    p.add_argument("--out", required=True, help="Output approximant bundle")
    p.add_argument("--ridge", type=float, default=1e-9, help="Starting ridge factor")

    p = sub.add_parser("eval", help="Print an EvalReport as JSON")
    p.add_argument("--net", required=True)
    p.add_argument("--approx", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--n", type=int, default=DEFAULT_EVAL_SAMPLES)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("spectrum", help="Eigendecomposition of a quadratic approximant")
    p.add_argument("--approx", required=True)
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--top", type=int, default=None, help="Keep the top-k eigenpairs")
    p.add_argument("--out", default=None, help="Eigenvector bundle (default: next to --approx)")

    p = sub.add_parser("attack", help="Accuracy under SVD ablation for k = 0..K")
    p.add_argument("--approx", required=True, help="Linear approximant bundle")
    p.add_argument("--k", type=int, required=True, help="Largest number of ablated directions")
    p.add_argument("--net", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--quadratic", default=None, help="Quadratic approximant bundle to add as a column")

    p = sub.add_parser("sweep", help="Train and trace approximant FVU/KL across checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("refine", help="Stochastic refinement of a quadratic approximant")
    p.add_argument("--approx", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--out", required=True)
    return parser.parse_args(argv)


def _cmd_approx(args):
    net = load_net(args.net)
    dist = load_distribution(args.dist)
    fit = linear_approx if args.degree == 1 else quadratic_approx
    approx = fit(net, dist, ridge=args.ridge)
    save_approximant(args.out, approx)
    print(json.dumps({"out": args.out, **approx.metadata}))


def _cmd_eval(args):
    report = evaluate(load_net(args.net), load_approximant(args.approx), load_distribution(args.dist), n=args.n, seed=args.seed)
    print(json.dumps(report.to_dict()))


def _cmd_spectrum(args):
    approx = load_approximant(args.approx)
    if not isinstance(approx, QuadraticApproximant):
        logging.error("spectrum needs a quadratic approximant.")
        raise InvalidInputError("spectrum needs a quadratic approximant.")
    spectrum = quadratic_spectrum(approx, args.class_index)
    if args.top is not None:
        spectrum = spectrum.top(args.top)
    out = args.out or f"{os.path.splitext(args.approx)[0]}_class{args.class_index}_eigenvectors.bin"
    bundle_write(out, {"eigenvalues": spectrum.eigenvalues, "eigenvectors": spectrum.eigenvectors})
    print(json.dumps({"class": args.class_index, "eigenvalues": spectrum.eigenvalues.tolist(), "out": out}))


def _cmd_attack(args):
    approx = load_approximant(args.approx)
    if not isinstance(approx, LinearApproximant):
        logging.error("attack needs a linear approximant.")
        raise InvalidInputError("attack needs a linear approximant.")
    rank = coefficient_rank(approx.beta)
    if args.k < 0 or args.k > rank:
        logging.error(f"--k must be between 0 and rank(beta)={rank}.")
        raise InvalidInputError(f"--k must be between 0 and rank(beta)={rank}.")
    extra = None
    if args.quadratic:
        quad = load_approximant(args.quadratic)
        if not isinstance(quad, QuadraticApproximant):
            logging.error("--quadratic needs a quadratic approximant.")
            raise InvalidInputError("--quadratic needs a quadratic approximant.")
        extra = {"quadratic": quad}
    rows = attack_accuracy_curve(
        load_net(args.net),
        approx,
        load_distribution(args.dist),
        range(args.k + 1),
        n=args.n,
        seed=args.seed,
        approximants=extra,
    )
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()


def _cmd_sweep(args):
    from src.harness import run_sweep

    records = run_sweep(args.config, args.out_dir, workers=args.workers)
    print(json.dumps({"rows": len(records), "metrics": os.path.join(args.out_dir, "metrics.csv")}))


def _cmd_refine(args):
    approx = load_approximant(args.approx)
    if not isinstance(approx, QuadraticApproximant):
        logging.error("refine needs a quadratic approximant.")
        raise InvalidInputError("refine needs a quadratic approximant.")
    refined = refine_quadratic(
        approx,
        load_net(args.net),
        load_distribution(args.dist),
        steps=args.steps,
        batch=args.batch,
        seed=args.seed,
        step_size=args.lr,
    )
    save_approximant(args.out, refined)
    print(json.dumps({"out": args.out, **refined.metadata}))


COMMANDS = {
    "approx": _cmd_approx,
    "eval": _cmd_eval,
    "spectrum": _cmd_spectrum,
    "attack": _cmd_attack,
    "sweep": _cmd_sweep,
    "refine": _cmd_refine,
}


def main(argv=None) -> int:
    """
    Run one subcommand and return its exit code.

    Library errors are logged and mapped to exit codes through src.errors.exit_code_for.
    """
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            logging.exception(f"Unexpected failure in '{args.command}'")
        else:
            logging.error(f"{type(e).__name__}: {e}")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
