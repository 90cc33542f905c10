"""Command line entry point.

Every run writes ``manifest.json`` to its output directory before any
computation, then ``report.json`` and a plain ``summary.txt`` holding exactly
what was printed.  Exit codes: 0 success, 1 validation failure, 2 solver
failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import mc_engine as mc
from . import stability, synthesis, transform
from .errors import ModelError, OptimalityViolated, RLQError
from .io import load_gain, load_problem, write_json
from .model import ProblemSpec, validate

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3
HALVING = (0.35, 0.65)
ALGEBRA_RTOL = 1e-10

log = logging.getLogger("reclq")


class VerificationFailed(Exception):
    pass


class Run:
    """Output directory, manifest and printed/persisted summary lines."""

    def __init__(self, args, subcommand):
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        self.out = Path(args.out) if args.out else Path("runs") / stamp
        self.out.mkdir(parents=True, exist_ok=True)
        self.quiet = args.quiet
        self.lines = []
        config = {k: v for k, v in vars(args).items() if k != "func"}
        write_json(self.out / "manifest.json", {
            "problem": getattr(args, "problem", None), "subcommand": subcommand,
            "config": config, "seed": args.seed, "version": __version__,
            "backend": kernels.BACKEND, "output_dir": str(self.out),
            "created": _dt.datetime.now().isoformat(timespec="seconds")})

    def say(self, text=""):
        self.lines.append(text)
        if not self.quiet:
            print(text)

    def finish(self, report, code):
        report = dict(report)
        report["exit_code"] = code
        write_json(self.out / "report.json", report)
        (self.out / "summary.txt").write_text("\n".join(self.lines) + "\n")
        return code


def _fmt(M):
    return np.array2string(np.asarray(M), precision=6, suppress_small=True,
                           separator=", ").replace("\n", "")


def _load_validated(args, run, report):
    spec = load_problem(args.problem)
    vrep = validate(spec, "permissive" if args.permissive else "strict")
    report["validation"] = vrep.as_dict()
    return spec


def _cfg(args, **over):
    kw = dict(T_max=args.tmax, dt=args.dt, n_paths=args.paths, seed=args.seed,
              antithetic=getattr(args, "antithetic", False))
    kw.update(over)
    return mc.SimConfig(**kw)


# -- subcommands ------------------------------------------------------------------

def cmd_validate(args, run, report):
    spec = load_problem(args.problem)
    try:
        vrep = validate(spec, "permissive" if args.permissive else "strict")
    except RLQError as exc:
        inner = exc.details.get("report")
        if inner is not None:
            report["validation"] = inner.as_dict()
            for c in inner.checks:
                run.say(f"{c.name:24s} {'pass' if c.passed else 'FAIL'}  {c.detail}")
        raise
    report["validation"] = vrep.as_dict()
    for c in vrep.checks:
        run.say(f"{c.name:24s} {'pass' if c.passed else 'FAIL'}  {c.detail}")
    run.say(f"mode {vrep.mode}: {'passed' if vrep.passed else 'passed with recorded failures'}")
    return EXIT_OK


def cmd_transform(args, run, report):
    spec = load_problem(args.problem)
    ts = transform.to_classical(spec)
    report["transformed"] = ts.as_dict()
    for k in ("At", "Bt", "Ct", "Dt"):
        run.say(f"{k} = {_fmt(getattr(ts, k))}")
    if args.check_roundtrip:
        back = transform.from_classical(ts, spec.E, spec.F)
        dev = max(float(np.abs(a - b).max()) for a, b in zip(back, (spec.A, spec.B, spec.C, spec.D)))
        report["roundtrip_max_deviation"] = dev
        run.say(f"round-trip max deviation {dev:.3e}")
        if dev > 1e-12 * max(1.0, max(np.abs(M).max() for M in (spec.A, spec.B, spec.C, spec.D))):
            raise VerificationFailed(f"round-trip deviation {dev:.3e}")
    return EXIT_OK


def cmd_stability(args, run, report):
    spec = _load_validated(args, run, report)
    Theta = np.zeros((spec.m, spec.n))
    if args.theta:
        Theta, _ = load_gain(args.theta, spec)
    verdict = stability.is_stabilizer(Theta, spec)
    report["verdict"] = verdict.as_dict()
    run.say(f"stable: {verdict.stable}" + (f" ({verdict.reason})" if verdict.reason else ""))
    if verdict.P is not None:
        run.say(f"P = {_fmt(verdict.P)}")
    run.say(f"residual {verdict.certificate:.3e}, min eig P {verdict.min_eig_P:.6g}, "
            f"sufficient condition {'holds' if verdict.sufficient_holds else 'fails'}")
    if args.oracle:
        if not verdict.stable:
            run.say("oracle skipped: closed loop is not weighted stable")
            report["oracle"] = None
            return EXIT_OK
        Acl, Ccl = stability.closed_loop(spec, Theta)
        prob = stability.LyapunovProblem(Acl, Ccl, spec.E, spec.F, np.eye(spec.n))
        est = stability.lyapunov_mc_oracle(prob, args.paths, args.tmax, args.dt, args.seed,
                                           substeps=2)
        coarse = stability.lyapunov_mc_oracle(prob, args.paths, est.T_max, 2 * args.dt,
                                              args.seed)
        delta = est.P - verdict.P
        bias = 2 * np.abs(est.P - coarse.P)
        ok = bool(np.all(np.abs(delta) <= 3 * est.se + bias))
        report["oracle"] = {"P": est.P, "se": est.se, "delta": delta, "bias_budget": bias,
                            "T_max": est.T_max, "dt": args.dt, "paths": args.paths,
                            "within_budget": ok}
        run.say(f"oracle P = {_fmt(est.P)} (SE {_fmt(est.se)}), delta {_fmt(delta)}, "
                f"dt-bias budget {_fmt(bias)}: {'ok' if ok else 'OUTSIDE'}")
        if not ok:
            raise VerificationFailed("Monte Carlo oracle disagrees with the Lyapunov solve")
    return EXIT_OK


def cmd_synthesize(args, run, report):
    spec = _load_validated(args, run, report)
    syn = synthesis.synthesize(spec)
    grid = np.linspace(spec.t0, spec.t0 + args.horizon, args.nodes) if args.horizon else None
    report["synthesis"] = syn.as_dict()
    syn.to_csv(run.out / "synthesis.csv", grid)
    run.say(f"P = {_fmt(syn.P)}")
    run.say(f"Theta_bar = {_fmt(syn.Theta_bar)}")
    run.say(f"iterations {syn.iterations}, residual {syn.residual:.3e}, eta {syn.eta.method}")
    if spec.homogeneous:
        v = synthesis.value_homogeneous(syn.P, spec.x0, spec)
        report["value"] = v
        run.say(f"value x0^T P x0 = {v:.9g}")
    return EXIT_OK


def _control(args, spec):
    if args.control == "zero":
        return mc.ControlLaw.zero(), None
    if args.control == "file":
        if not args.gain:
            raise SystemExit("--control file needs --gain FILE")
        Theta, v = load_gain(args.gain, spec)
        return mc.ControlLaw.feedback(Theta, v), None
    syn = synthesis.synthesize(spec)
    return mc.ControlLaw.closed_loop(syn), syn


def cmd_simulate(args, run, report):
    spec = _load_validated(args, run, report)
    law, syn = _control(args, spec)
    cfg = _cfg(args, keep_paths=args.save_paths)
    rep = mc.estimate_cost(spec, law, cfg)
    if syn is not None and spec.b.is_zero and spec.sigma.is_zero:
        st = mc.stationarity_residual(spec, syn, cfg)
        rep.stationarity_rms = st.stationarity_rms
        rep.extras["stationarity_scale"] = st.extras["scale"]
    report["simulation"] = rep.as_dict()
    report["config"] = cfg.as_dict()
    if rep.ensemble is not None:
        rep.ensemble.to_csv(run.out / "trajectories.csv", spec)
    run.say(f"cost_mean {rep.cost_mean:.9g}  cost_se {rep.cost_se:.3e}  "
            f"tail_bound {rep.tail_bound:.3e}")
    run.say(f"weighted_state_norm {rep.weighted_state_norm:.6g}  "
            "stationarity_rms " + (f"{rep.stationarity_rms:.3e}" if rep.stationarity_rms is not None
                                   else "n/a"))
    if syn is not None and spec.homogeneous:
        v = synthesis.value_homogeneous(syn.P, spec.x0)
        report["value"] = v
        run.say(f"predicted value {v:.9g}, difference {rep.cost_mean - v:.3e}")
    return EXIT_OK


def _halving(fine, coarse):
    if coarse == 0.0:
        return fine == 0.0, 0.0
    ratio = fine / coarse
    return HALVING[0] <= ratio <= HALVING[1], ratio


def cmd_verify(args, run, report):
    spec = _load_validated(args, run, report)
    syn = synthesis.synthesize(spec)
    test = syn
    if args.theta:
        Theta, _ = load_gain(args.theta, spec)
        test = dataclasses.replace(syn, Theta_bar=Theta)
    checks = {}
    cfg = _cfg(args, substeps=2)
    half = _cfg(args, dt=args.dt / 2)

    if spec.b.is_zero and spec.sigma.is_zero:
        coarse = mc.stationarity_residual(spec, syn, cfg, Theta=test.Theta_bar)
        fine = mc.stationarity_residual(spec, syn, half, Theta=test.Theta_bar)
        scale = coarse.extras["scale"]
        halves, ratio = _halving(fine.stationarity_rms, coarse.stationarity_rms)
        small = coarse.stationarity_rms <= 10 * args.dt * scale
        checks["stationarity"] = {"rms": coarse.stationarity_rms, "rms_half_dt": fine.stationarity_rms,
                                  "scale": scale, "threshold": 10 * args.dt * scale,
                                  "halving_ratio": ratio, "passed": bool(small and halves)}
        run.say(f"stationarity rms {coarse.stationarity_rms:.3e} (<= {10 * args.dt * scale:.3e}? "
                f"{small}), dt/2 ratio {ratio:.3f}")

    probe = mc.optimality_probe(spec, test, _cfg(args), args.perturbations, seed=args.seed,
                                raise_on_violation=False)
    checks["optimality"] = probe.as_dict()
    run.say(f"optimality probe: {len(probe.violations)} violation(s), min R^2 "
            f"{probe.r_squared.min():.4f}")

    law = mc.ControlLaw.feedback(test.Theta_bar, test.vbar)
    ens = mc.simulate_state(spec, law, _cfg(args), path_ids=np.arange(min(args.paths, 16)))
    gap = mc.cost_equivalence(spec, ens)[0]
    _, _, Y = mc.evaluate_bsde_representation(spec, ens)
    fwd = mc.forward_cost(spec, ens)
    bsde_gap = float(np.abs(Y - fwd).max() / max(np.abs(fwd).max(), 1e-300))
    checks["cost_identity"] = {"max_rel_gap": gap, "passed": gap <= ALGEBRA_RTOL}
    checks["bsde_agreement"] = {"max_rel_gap": bsde_gap, "passed": bsde_gap <= ALGEBRA_RTOL}
    run.say(f"cost identity gap {gap:.2e}, BSDE/forward gap {bsde_gap:.2e}")

    sde_c = mc.sde_consistency(spec, test.Theta_bar, cfg, v=test.vbar)
    sde_f = mc.sde_consistency(spec, test.Theta_bar, half, v=test.vbar)
    exact = sde_c <= 1e-12
    halves, ratio = _halving(sde_f, sde_c)
    checks["sde_consistency"] = {"gap": sde_c, "gap_half_dt": sde_f, "ratio": ratio,
                                 "passed": bool(exact or halves)}
    run.say(f"transformed SDE gap {sde_c:.3e}, dt/2 ratio {ratio:.3f}")

    report["checks"] = checks
    failed = [k for k, v in checks.items() if not v["passed"]]
    if probe.violations:
        v = probe.violations[0]
        run.say(f"OptimalityViolated: perturbation {v['perturbation']} at eps={v['eps']}: "
                f"delta_J {v['delta_J']:.3e} < -3 SE ({-3 * v['se']:.3e})")
    if failed:
        run.say(f"FAILED: {', '.join(failed)}")
        raise VerificationFailed(", ".join(failed))
    run.say("all verification checks passed")
    return EXIT_OK


def cmd_reduce(args, run, report):
    spec = _load_validated(args, run, report)
    cfg = _cfg(args)
    red = mc.reduce_nonhomogeneous(spec, cfg, keep_paths=args.save_paths)
    report["reduction"] = red.as_dict()
    P, K1, n = red.X_hat.shape
    m = red.r_hat.shape[2]
    if P:
        cols = [np.repeat(red.path_ids, K1)[:, None], np.tile(red.t, P)[:, None],
                red.X_hat.reshape(-1, n), red.q_hat.reshape(-1, n), red.r_hat.reshape(-1, m)]
        header = ",".join(["path_id", "s"] + [f"Xhat_{i + 1}" for i in range(n)]
                          + [f"qhat_{i + 1}" for i in range(n)] + [f"rhat_{j + 1}" for j in range(m)])
        np.savetxt(run.out / "reduction.csv", np.hstack(cols), delimiter=",", header=header,
                   comments="", fmt=["%d"] + ["%.17g"] * (1 + 2 * n + m))
    run.say(f"phi {red.phi:.9g} (SE {red.phi_se:.3e}), superposition error "
            f"{red.superposition_error:.2e}")
    if red.superposition_error > 1e-12:
        raise VerificationFailed("superposition X = X0 + Xhat does not hold")
    return EXIT_OK


def cmd_demo(args, run, report):
    rows = []
    ok = True
    run.say(f"{'instance':>12s} {'P':>10s} {'Theta_bar':>10s} {'J_MC':>10s} {'SE':>9s} "
            f"{'budget':>9s}  ok")
    for F in (0.0, 2.0):
        spec = ProblemSpec.scalar(F=F)
        syn = synthesis.synthesize(spec)
        law = mc.ControlLaw.closed_loop(syn)
        cfg = mc.SimConfig(T_max=args.tmax, dt=args.dt, n_paths=args.paths, seed=args.seed,
                           substeps=2, keep_paths=0)
        rep = mc.estimate_cost(spec, law, cfg)
        coarse = mc.estimate_cost(spec, law, cfg.with_(dt=2 * args.dt, substeps=1))
        # first-order dt bias of J(dt) is about J(dt) - J(2 dt); doubled for safety
        bias = 2 * abs(rep.cost_mean - coarse.cost_mean)
        value = synthesis.value_homogeneous(syn.P, spec.x0)
        budget = 3 * rep.cost_se + rep.tail_bound + bias
        good = abs(rep.cost_mean - value) <= budget
        ok &= good
        rows.append({"F": F, "P": float(syn.P[0, 0]), "Theta_bar": float(syn.Theta_bar[0, 0]),
                     "J_mc": rep.cost_mean, "se": rep.cost_se, "tail": rep.tail_bound,
                     "dt_bias": bias, "value": value, "passed": bool(good)})
        run.say(f"{'F=' + str(F):>12s} {syn.P[0, 0]:10.6f} {syn.Theta_bar[0, 0]:10.6f} "
                f"{rep.cost_mean:10.6f} {rep.cost_se:9.2e} {budget:9.2e}  {'yes' if good else 'NO'}")
    report["demo"] = rows
    if not ok:
        raise VerificationFailed("Monte Carlo cost outside its budget")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", default=None, help="output directory (default ./runs/<timestamp>)")
    common.add_argument("--quiet", action="store_true", help="do not print the summary")
    common.add_argument("--permissive", action="store_true",
                        help="record rather than reject violated positivity hypotheses")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    mcargs = argparse.ArgumentParser(add_help=False)
    mcargs.add_argument("--paths", type=int, default=1000)
    mcargs.add_argument("--dt", type=float, default=1e-3)
    mcargs.add_argument("--tmax", type=float, default=8.0)

    p = argparse.ArgumentParser(prog="reclq", parents=[common],
                                description="Weighted (recursive-cost) stochastic LQ toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)

    s = sub.add_parser("validate", parents=[common], help="check the problem hypotheses")
    s.add_argument("problem")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("transform", parents=[common], help="print the transformed matrices")
    s.add_argument("problem")
    s.add_argument("--check-roundtrip", action="store_true")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("stability", parents=[common], help="weighted L2 stability test")
    s.add_argument("problem")
    s.add_argument("--theta", help="gain file (default: Theta = 0)")
    s.add_argument("--oracle", action="store_true", help="Monte Carlo cross-check of P")
    s.add_argument("--paths", type=int, default=1000)
    s.add_argument("--tmax", type=float, default=None,
                   help="oracle horizon (default: integrand envelope below 1e-6)")
    s.add_argument("--dt", type=float, default=1e-3)
    s.set_defaults(func=cmd_stability)

    s = sub.add_parser("synthesize", parents=[common], help="Riccati solution and feedback")
    s.add_argument("problem")
    s.add_argument("--horizon", type=float, default=None, help="output grid length")
    s.add_argument("--nodes", type=int, default=201, help="output grid nodes")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("simulate", parents=[common, mcargs], help="Monte Carlo cost estimate")
    s.add_argument("problem")
    s.add_argument("--control", choices=("zero", "file", "closed-loop"), default="closed-loop")
    s.add_argument("--gain", help="gain file for --control file")
    s.add_argument("--antithetic", action="store_true")
    s.add_argument("--save-paths", type=int, default=16,
                   help="paths written to trajectories.csv (default 16)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", parents=[common], help="stationarity, optimality, equivalence")
    s.add_argument("problem")
    s.add_argument("--theta", help="gain file to verify instead of the synthesized gain")
    s.add_argument("--paths", type=int, default=200)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--tmax", type=float, default=4.0)
    s.add_argument("--perturbations", type=int, default=10)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("reduce", parents=[common, mcargs], help="split off the forcing b, sigma")
    s.add_argument("problem")
    s.add_argument("--save-paths", type=int, default=16)
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("demo", parents=[common], help="built-in scalar instances end to end")
    s.add_argument("--paths", type=int, default=2000)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--tmax", type=float, default=8.0)
    s.set_defaults(func=cmd_demo)
    return p


def _exit_code(exc):
    if isinstance(exc, (VerificationFailed, OptimalityViolated)):
        return EXIT_VERIFY
    if isinstance(exc, ModelError):
        return EXIT_VALIDATION
    return EXIT_SOLVER


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    run = Run(args, args.subcommand)
    report = {"subcommand": args.subcommand}
    try:
        code = args.func(args, run, report)
    except (RLQError, VerificationFailed) as exc:
        msg = exc.describe() if isinstance(exc, RLQError) else f"verify: {exc}"
        report["error"] = {"type": type(exc).__name__, "message": msg}
        run.say(msg)
        code = _exit_code(exc)
    return run.finish(report, code)


if __name__ == "__main__":
    sys.exit(main())
