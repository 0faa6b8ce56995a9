"""Command-line entry point: ``robustfl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from robustfl import approx
from robustfl.adversary import AttackConfig, estimate_adv_risk
from robustfl.data import MultiIndexTask, contract_sym, gen_dataset
from robustfl.experiment import ExperimentSpec, emit_plot_data, run_experiment
from robustfl.model import Activation, LinearPredictor, TwoLayerNet
from robustfl.oracles import (Alg2Config, alg2_single_index_fl, alg3_multi_index_fl, check_dfl,
                              check_sfl_alignment)
from robustfl.rng import stream
from robustfl.robust_train import Phase2Config, init_phase2, robust_fit_second_layer
from robustfl.verify import theorem1_check


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def load_predictor(path):
    """A two-layer checkpoint, or ``{"w": [...]}`` for a linear predictor."""
    spec = _read_json(path)
    if "w" in spec and "W" not in spec:
        return LinearPredictor(np.asarray(spec["w"], dtype=np.float64))
    return TwoLayerNet.from_dict(spec)


def _load_W(path) -> tuple[np.ndarray, dict]:
    spec = _read_json(path)
    return np.asarray(spec["W"], dtype=np.float64), spec


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args) -> int:
    task = MultiIndexTask.load(args.task)
    gen_dataset(task, args.n, args.seed).to_csv(args.out)
    return 0


def cmd_attack_eval(args) -> int:
    pred = load_predictor(args.model)
    task = MultiIndexTask.load(args.task)
    cfg = AttackConfig(epsilon=args.eps, norm=args.norm, steps=args.steps,
                       step_size=args.step_size, step_mode=args.step_mode)
    est = estimate_adv_risk(pred, task, cfg, n=args.n, seed=args.seed, method=args.method)
    _write_json(args.out, est.to_dict())
    return 0


def cmd_feature_learn(args) -> int:
    task = MultiIndexTask.load(args.task)
    conf = _read_json(args.config) if args.config else {}
    N = int(conf.pop("N", 50))
    if args.alg == "alg2":
        T = int(conf.pop("T", 20_000))
        W = alg2_single_index_fl(task, N, T, Alg2Config(**conf))
    else:
        n = int(conf.pop("n", 20_000))
        seed = int(conf.get("seed", 0))
        W = alg3_multi_index_fl(gen_dataset(task, n, seed), N, **conf)
    _write_json(args.out, {"W": W.tolist(), "alg": args.alg, "N": N})
    return 0


def cmd_oracle_check(args) -> int:
    task = MultiIndexTask.load(args.task)
    W, _ = _load_W(args.W)
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    check = check_dfl if args.mode == "dfl" else check_sfl_alignment
    _write_json(args.out, check(W, task.U, args.zeta, seed=args.seed).to_dict())
    return 0


def cmd_robust_train(args) -> int:
    task = MultiIndexTask.load(args.task)
    cfg = Phase2Config(**_read_json(args.phase2))
    W, spec = _load_W(args.W)
    a0, b = init_phase2(W.shape[0], cfg.r_b, cfg.seed)
    if "b" in spec:
        b = np.asarray(spec["b"], dtype=np.float64)
    data = gen_dataset(task, cfg.n_FA, cfg.seed)
    a, trace = robust_fit_second_layer(W, b, data, cfg, a0=a0)
    net = TwoLayerNet(a, W, b, Activation("relu"), meta={"seed": cfg.seed, "phase": 2})
    net.save(args.out)
    if args.trace:
        trace.to_csv(args.trace)
    return 0


def _grid_errors(z, got, want) -> dict:
    err = np.abs(np.asarray(got) - np.asarray(want))
    return {"grid": np.asarray(z).tolist(), "errors": err.ravel().tolist(),
            "max_error": float(err.max())}


def approx_case(case: str, conf: dict) -> dict:
    """Reconstruction errors of one approximation construction on a grid."""
    if case == "relu-dual":
        r_b = float(conf.get("r_b", 3.0))
        h = np.polynomial.Polynomial(conf.get("h", [0.0, 1.0]))
        fn = approx.relu_dual_weights(h, r_b)
        z = np.linspace(-r_b, r_b, int(conf.get("grid", 101)))
        out = _grid_errors(z, fn.reconstruct(z), h(z))
        out["sup_bound"] = fn.sup_bound
    elif case == "poly-dual":
        h = np.polynomial.Polynomial(conf.get("h", [0.0, 1.0]))
        fn = approx.poly_dual_weights(h, conf.get("sigma", [0.0, 0.0, 1.0]),
                                      float(conf.get("r_b", 4.0)))
        lim = float(conf.get("z_max", 1.0))
        z = np.linspace(-lim, lim, int(conf.get("grid", 101)))
        out = _grid_errors(z, fn.reconstruct(z), h(z))
        out["sup_bound"] = fn.sup_bound
    elif case == "monomial":
        T = np.asarray(conf.get("T", (np.eye(2) / math.sqrt(2)).tolist()), dtype=np.float64)
        fn = approx.monomial_dual(T, n_quad=int(conf.get("n_quad", 10_000)))
        Z = stream(int(conf.get("seed", 0)), "approx-points").standard_normal(
            (int(conf.get("points", 20)), T.shape[0]))
        out = _grid_errors(Z, fn.reconstruct(Z), contract_sym(T, Z))
        out["sup_bound"] = fn.sup_bound
    elif case == "riemann":
        return riemann_case(conf)
    else:
        raise ValueError(f"unknown approximation case {case!r}")
    out["case"] = case
    return out


def riemann_case(conf: dict) -> dict:
    """k = 1 finite-width reconstruction with neurons aligned to +-u and uniform biases."""
    N = int(conf.get("N", 2000))
    d = int(conf.get("d", 10))
    r_b = float(conf.get("r_b", 3.0))
    zeta = float(conf.get("zeta", 1e-4))
    seed = int(conf.get("seed", 0))
    h = np.polynomial.Polynomial(conf.get("h", [0.0, 1.0]))
    U = np.zeros((1, d))
    U[0, 0] = 1.0
    W = np.zeros((N, d))
    W[: N // 2, 0] = 1.0
    W[N // 2:, 0] = -1.0
    b = stream(seed, "riemann-bias").uniform(-r_b, r_b, N)
    fn = approx.relu_dual_weights(h, r_b)
    res = approx.riemann_second_layer(fn, W, b, U, zeta, r_b, seed=seed)
    z = np.linspace(-1.0, 1.0, int(conf.get("grid", 201)))
    out = _grid_errors(z, approx.riemann_predict(res, b, z[:, None]), h(z))
    out.update(case="riemann", A=res.A, max_abs_a=float(np.max(np.abs(res.a))),
               sup_bound=fn.sup_bound)
    return out


def cmd_approx_verify(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    _write_json(args.out, approx_case(args.case, conf))
    return 0


def cmd_theorem1_check(args) -> int:
    f = load_predictor(args.model)
    task = MultiIndexTask.load(args.task)
    attack = AttackConfig(epsilon=args.eps, steps=args.steps, step_size=args.step_size,
                          step_mode="normalized")
    rep = theorem1_check(f, task, attack, n_mc=args.n, m_proj=args.m_proj, slack=args.slack,
                         seed=args.seed)
    _write_json(args.out, rep.to_dict())
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_dict(_read_json(args.spec))
    paths = run_experiment(spec, args.out, threads=args.threads)
    print(paths["results"])
    return 0


def cmd_plot_data(args) -> int:
    emit_plot_data(getattr(args, "in"), args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustfl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", help="sample a dataset from a task JSON")
    s.add_argument("--task", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("attack-eval", help="Monte-Carlo adversarial risk of a model")
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--eps", type=float, default=1.0)
    s.add_argument("--norm", default="l2", choices=("l2", "linf"))
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--step-size", type=float, default=0.1)
    s.add_argument("--step-mode", default="signed", choices=("signed", "normalized"))
    s.add_argument("--method", default="auto", choices=("auto", "pgd", "exact"))
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack_eval)

    s = sub.add_parser("feature-learn", help="run a first-layer feature learner")
    s.add_argument("--alg", required=True, choices=("alg2", "alg3"))
    s.add_argument("--task", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_feature_learn)

    s = sub.add_parser("oracle-check", help="check first-layer weights against an oracle")
    s.add_argument("--W", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--zeta", type=float, required=True)
    s.add_argument("--mode", default="dfl", choices=("dfl", "sfl"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_oracle_check)

    s = sub.add_parser("robust-train", help="robustly fit the second layer on frozen features")
    s.add_argument("--task", required=True)
    s.add_argument("--phase2", required=True)
    s.add_argument("--W", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_robust_train)

    s = sub.add_parser("approx-verify", help="reconstruction errors of an approximation formula")
    s.add_argument("--case", required=True, choices=("relu-dual", "poly-dual", "monomial", "riemann"))
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_approx_verify)

    s = sub.add_parser("theorem1-check", help="projected vs unprojected adversarial risk")
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--eps", type=float, default=1.0)
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--m-proj", type=int, default=200)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--step-size", type=float, default=0.25)
    s.add_argument("--slack", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_theorem1_check)

    s = sub.add_parser("experiment", help="run a training comparison from a spec JSON")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("plot-data", help="aggregate results over seeds")
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"robustfl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
