"""Command line entry point: ``mssmpc <subcommand> [--seed S] [--config cfg.json] [--out DIR]``.

Exit codes: 0 success, 2 infeasible design, 3 failed acceptance check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_INFEASIBLE, EXIT_CHECK = 0, 2, 3


def _load_json(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _out(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_generate_data(args, cfg):
    from .plant import generate_test_ensemble, generate_training_data

    out = _out(args, "data")
    if cfg.get("kind", "train") == "test":
        ds = generate_test_ensemble(args.seed, cfg.get("horizon", 65), cfg.get("S", 1000))
    else:
        ds = generate_training_data(args.seed, cfg.get("length", 8000), cfg.get("reps", 10))
    print(ds.save(out))
    return EXIT_OK


def cmd_train(args, cfg):
    from .plant import Dataset
    from .sysid import TrainConfig, init_model, train

    out = _out(args, "model")
    data = Dataset.load(cfg["dataset"])
    tc = TrainConfig(**dict(cfg.get("train", {}), seed=args.seed))
    model, report = train(init_model(data, args.seed), data, tc, progress=True)
    model.save(os.path.join(out, "model.json"))
    report.save(os.path.join(out, "fit_report.json"))
    print(f"best validation NLL {report.best_val_nll:.4f} in {report.wall_clock:.0f} s")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .cases import load_benchmark_model
    from .plant import generate_test_ensemble
    from .sysid import entropy_upper_limit, mean_log_likelihood

    out = _out(args, "eval")
    m = load_benchmark_model(cfg.get("model"))
    horizons = cfg.get("n_bar", [5, 10, 25, 50, 75])
    S = cfg.get("S", 1000)
    rows = [["n_bar", "upper_limit", "log_likelihood"]]
    for nb in horizons:
        ens = generate_test_ensemble(args.seed, m.lag + nb, S)
        rows.append([nb, entropy_upper_limit(ens, nb, m.lag), mean_log_likelihood(m, ens, nb)])
        print("N_bar=%3d  upper limit %.3f  log-likelihood %.3f" % tuple(rows[-1]))
    with open(os.path.join(out, "loglik.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    if cfg.get("check"):
        ll50 = dict((r[0], r) for r in rows[1:]).get(50)
        if ll50 is None or ll50[2] < 0.75 or ll50[1] - ll50[2] > 0.20:
            return EXIT_CHECK
    return EXIT_OK


def cmd_find_setpoint(args, cfg):
    from .cases import U_BOX, load_benchmark_model
    from .gmm import ChanceSpec
    from .setpoint import ReferencePdf, find_setpoint_mean, find_setpoint_pdf

    out = _out(args, "setpoint")
    m = load_benchmark_model(cfg.get("model"))
    spec = ChanceSpec.from_json(cfg.get("chance", {}))
    if "reference" in cfg:
        ref = ReferencePdf.from_json(cfg["reference"])
        sp = find_setpoint_pdf(m, ref, spec, U_BOX, cfg.get("starts", 16), seed=args.seed)
    else:
        sp = find_setpoint_mean(m, cfg["y_ref"], cfg.get("beta", 0.0), spec, U_BOX, cfg.get("starts", 16),
                                seed=args.seed)
    with open(os.path.join(out, "setpoint.json"), "w") as fh:
        json.dump(sp.to_json(), fh, indent=1)
    print(json.dumps({"z": sp.z.tolist(), "u": sp.u.tolist(), "cost": sp.cost, "rank": sp.rank}))
    return EXIT_OK


def cmd_design_terminal(args, cfg):
    from .cases import U_BOX, load_benchmark_model
    from .gmm import ChanceSpec
    from .setpoint import Setpoint
    from .terminal import design

    out = _out(args, "terminal")
    m = load_benchmark_model(cfg.get("model"))
    sp = Setpoint.from_json(_load_json(cfg["setpoint"]))
    spec = ChanceSpec.from_json(cfg.get("chance", {}))
    td = design(m, sp, np.diag(cfg["Q"]), np.atleast_2d(cfg["R"]), spec, U_BOX, seed=args.seed)
    with open(os.path.join(out, "terminal.json"), "w") as fh:
        json.dump(td.to_json(), fh, indent=1)
    print(f"gamma = {td.gamma:.6g}")
    return EXIT_OK


def cmd_certify_reach(args, cfg):
    from . import cases
    from .reachability import certify_roi

    out = _out(args, "reach")
    m = cases.load_benchmark_model(cfg.get("model"))
    case = cases.case2(m, seed=args.seed) if str(cfg.get("case", "2")) == "2" else cases.case1(m, seed=args.seed)
    zb = case.setpoint.z
    half = np.asarray(cfg.get("roi_half_width", [1.0] * m.n_z), float)
    cert = certify_roi(case.controller, zb - half, zb + half, max_rects=cfg.get("max_rects", 2000))
    with open(os.path.join(out, "certificate.json"), "w") as fh:
        json.dump(cert.to_json(), fh)
    cert.boxes_csv(os.path.join(out, "boxes.csv"))
    print(f"{len(cert.passed)} passed, {len(cert.failed)} failed, complete={cert.complete}")
    return EXIT_OK


def cmd_run_case(args, cfg):
    from . import cases
    from .harness import closed_loop, monte_carlo, report, steady_state_pdf

    out = _out(args, f"case{args.case}")
    m = cases.load_benchmark_model(cfg.get("model"))
    runs = cfg.get("runs", 10)
    if args.case in ("1", "2"):
        case = (cases.case1 if args.case == "1" else cases.case2)(m, seed=args.seed)
        steps = cfg.get("steps", 500)
        records = monte_carlo(lambda i: case.policy(), m.lag, runs, steps, args.seed)
        spec = case.spec
        ss = steady_state_pdf(records, y_max=None if spec.y_max is None else float(spec.y_max[0]))
        report(f"case{args.case}", records, out, case.config, ss)
        print(json.dumps(ss.summary))
        if cfg.get("check"):
            s = ss.summary
            if args.case == "1":
                ok = (len(s["modes"]) == 2 and abs(s["modes"][0] - 2.5) <= 0.1 and abs(s["modes"][1] - 2.9) <= 0.1
                      and s["p_leq_y_max"] >= 0.85)
            else:
                ok = abs(s["mean"] - 1.0) <= 0.05 and s["p_leq_y_max"] >= 0.75
            return EXIT_OK if ok else EXIT_CHECK
    else:
        case = cases.case3(m) if args.case == "3" else cases.case4(m)
        steps = cfg.get("steps", case.steps)
        rec = closed_loop(case.policy(), m.lag, steps, args.seed)
        report(f"case{args.case}", [rec], out, case.config)
        print(f"mean solve time {np.nanmean(rec.solve_time[m.lag:]) * 1e3:.1f} ms")
    return EXIT_OK


def cmd_report(args, cfg):
    from .harness import RunRecord, report, steady_state_pdf

    out = _out(args, "report")
    records = []
    for path in cfg.get("records", []):
        doc = _load_json(path)
        records.append(RunRecord(**{k: (np.asarray(v) if isinstance(v, list) and k != "status" else v)
                                    for k, v in doc.items()}))
    ss = steady_state_pdf(records, y_max=cfg.get("y_max")) if records else None
    print(report(cfg.get("case", "report"), records, out, cfg, ss))
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "find-setpoint": cmd_find_setpoint,
    "design-terminal": cmd_design_terminal,
    "certify-reach": cmd_certify_reach,
    "run-case": cmd_run_case,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mssmpc", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None, help="JSON file with subcommand settings")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "run-case":
            p.add_argument("case", choices=["1", "2", "3", "4"])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .diffnet import ContractError
    from .setpoint import InfeasibleError
    from .terminal import DareError

    cfg = _load_json(args.config)
    try:
        return COMMANDS[args.command](args, cfg)
    except (InfeasibleError, DareError) as exc:
        print(f"infeasible design: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
