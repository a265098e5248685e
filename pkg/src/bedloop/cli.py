"""Command-line front door: train, refine, run, evaluate, sweep, oracle,
serve, and live. Every command reads a config file, applies dotted-path
overrides, and writes CSV reports with figures next to them.

Exit codes: 2 config error, 3 numeric divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, reports
from .bounds import NetworkProposer, ThetaSource, write_bounds_csv
from .config import ConfigError, EngineConfig, apply_overrides, load_config, serialize_json
from .evaluation import MethodRow, SweepMethod
from .models import toy_preset
from .models.base import OutcomeSupportError
from .models.toy import toy_enumerate, exact_eig_from_table
from .orchestrate import (
    SimulatedEnvironment,
    TrainingDiverged,
    run_experiment,
    random_policy,
    train_policy,
    train_static_designs,
)
from .policy import init_policy, load_policy, save_policy
from .seeding import rng_stream

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _load(args) -> EngineConfig:
    cfg = load_config(args.config) if args.config else EngineConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _out_dirs(cfg: EngineConfig):
    ckpt = Path(cfg.io.checkpoint_dir)
    rep = Path(cfg.io.report_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    rep.mkdir(parents=True, exist_ok=True)
    return ckpt, rep


def cmd_train(args) -> int:
    cfg = _load(args)
    model = cfg.model.build()
    ckpt_dir, rep_dir = _out_dirs(cfg)
    horizon = cfg.schedule.horizon
    rng = rng_stream(cfg.seed, "train")
    if args.method == "static":
        designs, result = train_static_designs(model, horizon, cfg.train, rng)
        np.save(ckpt_dir / "static_designs.npy", designs)
        print(f"wrote {ckpt_dir / 'static_designs.npy'}")
    else:
        policy = init_policy(model, rng_stream(cfg.seed, "policy-init"), cfg.policy.build_arch(model))
        result = train_policy(
            model, policy, cfg.train, rng, horizon,
            on_checkpoint=lambda step, params: save_policy(
                ckpt_dir / f"policy_step{step}", policy, {"horizon": horizon}
            ),
        )
        save_policy(ckpt_dir / "policy", policy, {"horizon": horizon})
        print(f"wrote {ckpt_dir / 'policy'}.json/.bin")
    reports.write_trace_csv(rep_dir / "train_trace.csv", result.trace)
    reports.figure_trace(rep_dir / "train_trace.png", result.trace)
    print(f"wrote {rep_dir / 'train_trace.csv'} and .png")
    if result.diverged:
        print("training diverged; last good parameters were kept", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def cmd_refine(args) -> int:
    cfg = _load(args)
    model = cfg.model.build()
    ckpt_dir, rep_dir = _out_dirs(cfg)
    policy = load_policy(args.policy, model)
    history = reports.read_history_csv(args.history, model)
    from .inference import fit_posterior_is
    from .orchestrate import refine_policy

    posterior = fit_posterior_is(
        model, history, cfg.refine.particles, rng_stream(cfg.seed, "refine", "infer")
    )
    tuned, result = refine_policy(
        model, policy, posterior, history, cfg.schedule.horizon, cfg.refine,
        rng_stream(cfg.seed, "refine", "train"),
    )
    save_policy(ckpt_dir / "policy_refined", tuned, {"horizon": cfg.schedule.horizon})
    reports.write_trace_csv(rep_dir / "refine_trace.csv", result.trace)
    reports.figure_trace(rep_dir / "refine_trace.png", result.trace, "refinement objective")
    print(f"wrote {ckpt_dir / 'policy_refined'}.json/.bin (ESS {posterior.ess:.1f})")
    if result.diverged:
        return EXIT_DIVERGED
    return 0


def cmd_run(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        from .config import config_from_dict

        cfg = config_from_dict(manifest["config"])
    else:
        cfg = _load(args)
        manifest = None
    model = cfg.model.build()
    ckpt_dir, rep_dir = _out_dirs(cfg)
    schedule = cfg.schedule.build()
    policy_stem = args.policy or (manifest or {}).get("policy")
    if policy_stem:
        proposer = NetworkProposer(load_policy(policy_stem, model))
        from . import gradcore

        _, meta = gradcore.load_tensors(policy_stem)
        trained_horizon = meta.get("horizon")
        if (
            trained_horizon is not None
            and schedule.horizon > trained_horizon
            and not cfg.schedule.allow_extension
        ):
            raise ConfigError(
                f"horizon {schedule.horizon} exceeds the trained horizon {trained_horizon}; "
                "set schedule.allow_extension=true to deploy beyond it"
            )
    else:
        proposer = NetworkProposer(
            init_policy(model, rng_stream(cfg.seed, "policy-init"), cfg.policy.build_arch(model))
        )
    environment = SimulatedEnvironment.from_source(model, ThetaSource.prior(model), cfg.seed)
    result = run_experiment(model, schedule, proposer, cfg.refine, environment, cfg.seed)
    history_path = reports.write_history_csv(rep_dir / "history.csv", model, result.history)
    reports.write_timings_csv(rep_dir / "timings.csv", result)
    from .inference import write_posterior_csv

    for stage, posterior in enumerate(result.posteriors):
        write_posterior_csv(
            rep_dir / f"posterior_stage{stage}.csv", posterior, model.theta_labels
        )
    stage_paths = []
    for tau, prop in result.stage_policies:
        if isinstance(prop, NetworkProposer):
            stem = ckpt_dir / f"policy_stage{tau}"
            save_policy(stem, prop.policy, {"horizon": schedule.horizon})
            stage_paths.append(str(stem))
    out_manifest = {
        "config": cfg.to_dict(),
        "seed": str(cfg.seed),
        "policy": policy_stem,
        "history": str(history_path),
        "stage_checkpoints": stage_paths,
        "timings": [
            {
                "tau": t.tau,
                "design_seconds": t.design_seconds,
                "inference_seconds": t.inference_seconds,
                "refine_seconds": t.refine_seconds,
            }
            for t in result.timings
        ],
    }
    (rep_dir / "run_manifest.json").write_text(json.dumps(out_manifest, indent=2))
    print(f"wrote {history_path} and {rep_dir / 'run_manifest.json'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    model = cfg.model.build()
    _, rep_dir = _out_dirs(cfg)
    horizon = cfg.schedule.horizon
    ev = cfg.eval
    rows: list[MethodRow] = []
    estimates = []
    for method in ev.methods:
        if method == "random":
            prop = random_policy(model)
            lo, hi, _ = evaluation.estimate_total_eig(
                model, prop, ev.contrasts, ev.n_rollouts,
                rng_stream(cfg.seed, "eval", "random"), horizon=horizon, seed=cfg.seed,
            )
        elif method == "static":
            if not args.static:
                raise ConfigError("method 'static' needs --static pointing at static_designs.npy")
            designs = np.load(args.static)
            lo, hi, _ = evaluation.estimate_total_eig(
                model, designs, ev.contrasts, ev.n_rollouts,
                rng_stream(cfg.seed, "eval", "static"), horizon=horizon, seed=cfg.seed,
            )
        elif method == "amortized":
            if not args.policy:
                raise ConfigError("method 'amortized' needs --policy")
            prop = NetworkProposer(load_policy(args.policy, model))
            lo, hi, _ = evaluation.estimate_total_eig(
                model, prop, ev.contrasts, ev.n_rollouts,
                rng_stream(cfg.seed, "eval", "amortized"), horizon=horizon, seed=cfg.seed,
            )
        elif method == "refined":
            if not args.policy:
                raise ConfigError("method 'refined' needs --policy")
            if not cfg.schedule.taus:
                raise ConfigError("method 'refined' needs a non-empty [schedule] taus")
            policy = load_policy(args.policy, model)
            result = evaluation.estimate_delta_eig(
                model, policy, cfg.schedule.taus[0], horizon, cfg.refine,
                ev.step_histories, ev.contrasts, ev.n_rollouts, cfg.seed,
            )
            lo_v, hi_v, se = result.step_bounds()
            rows.append(MethodRow("refined", lo_v, se, hi_v, se, ev.step_histories, ev.contrasts, cfg.seed))
            rows.append(MethodRow(
                "refined.delta", result.delta_mean(), result.delta_se(),
                result.delta_mean(), result.delta_se(), ev.step_histories, ev.contrasts, cfg.seed,
            ))
            estimates += [result.base_lower, result.base_upper, result.prefix_lower, result.prefix_upper]
            evaluation.write_delta_csv(rep_dir / "delta_report.csv", result)
            continue
        else:
            raise ConfigError(f"unknown eval method {method!r}")
        rows.append(MethodRow(method, lo.value, lo.se, hi.value, hi.se, ev.n_rollouts, ev.contrasts, cfg.seed))
        estimates += [lo, hi]
    evaluation.write_method_csv(rep_dir / "eval_report.csv", rows)
    write_bounds_csv(rep_dir / "eval_bounds.csv", estimates)
    reports.figure_methods(rep_dir / "eval_report.png", rows)
    table = evaluation.render_table(rows)
    (rep_dir / "eval_report.txt").write_text(table + "\n")
    print(table)
    print(f"wrote {rep_dir / 'eval_report.csv'}, .txt, .png")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    model = cfg.model.build()
    _, rep_dir = _out_dirs(cfg)
    if not args.policy:
        raise ConfigError("sweep needs --policy")
    policy = load_policy(args.policy, model)
    methods = [
        SweepMethod(name="amortized", proposer=NetworkProposer(policy)),
        SweepMethod(name="random", proposer=random_policy(model)),
    ]
    if cfg.schedule.taus:
        methods.append(
            SweepMethod(
                name="refined", policy=policy, tau=cfg.schedule.taus[0],
                refine_config=cfg.refine, n_histories=cfg.eval.step_histories,
            )
        )
    rows = evaluation.robustness_sweep(
        model, methods, cfg.eval.shifts, cfg.schedule.horizon,
        cfg.eval.contrasts, cfg.eval.n_rollouts, cfg.seed,
    )
    evaluation.write_method_csv(rep_dir / "sweep.csv", rows)
    reports.figure_sweep(rep_dir / "sweep.png", rows)
    print(evaluation.render_table(rows))
    print(f"wrote {rep_dir / 'sweep.csv'} and .png")
    return 0


def cmd_oracle(args) -> int:
    model = toy_preset(args.variant)
    horizon = args.horizon
    prop = random_policy(model)
    rng = rng_stream(args.seed, "oracle")
    table = toy_enumerate(model, lambda h: prop.propose_single(h, rng), horizon)
    eig = exact_eig_from_table(table)
    print(f"toy-{args.variant} T={horizon}: exact EIG = {eig:.4f} nats")
    for tau in range(horizon + 1):
        parts = evaluation.decomposition_terms(table, tau)
        print(
            f"  tau={tau}: prefix {parts.prefix:.6f} + E[remaining] "
            f"{parts.expected_remaining:.6f} (residual {parts.residual:.2e})"
        )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    cfg = _load(args)
    app = create_app(cfg, policy_stem=args.policy)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_live(args) -> int:
    cfg = _load(args)
    model = cfg.model.build()
    schedule = cfg.schedule.build()
    if args.policy:
        proposer = NetworkProposer(load_policy(args.policy, model))
    else:
        proposer = NetworkProposer(
            init_policy(model, rng_stream(cfg.seed, "policy-init"), cfg.policy.build_arch(model))
        )

    def prompt(design, t):
        print(f"step {t + 1}/{schedule.horizon}: run design {model.design_payload(design)}")
        while True:
            raw = input(f"outcome ({model.outcome_support_text()}): ")
            try:
                return model.validate_outcome(float(raw))
            except (ValueError, OutcomeSupportError) as err:
                print(f"  invalid: {err}")

    from .orchestrate import CallbackEnvironment

    environment = CallbackEnvironment(model, prompt)
    result = run_experiment(model, schedule, proposer, cfg.refine, environment, cfg.seed)
    _, rep_dir = _out_dirs(cfg)
    path = reports.write_history_csv(rep_dir / "live_history.csv", model, result.history)
    print(f"experiment complete; history at {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bedloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config key, e.g. --set train.lr=2e-4")

    p = sub.add_parser("train", help="train a design policy (or static designs)")
    common(p)
    p.add_argument("--method", choices=["policy", "static"], default="policy")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("refine", help="fine-tune a policy checkpoint on an observed history")
    common(p)
    p.add_argument("--policy", required=True, help="policy checkpoint stem")
    p.add_argument("--history", required=True, help="history CSV")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("run", help="execute a simulated experiment with scheduled refinement")
    common(p)
    p.add_argument("--policy", help="policy checkpoint stem")
    p.add_argument("--from-manifest", help="re-execute a previous run exactly")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("evaluate", help="estimate total EIG bounds per method")
    common(p)
    p.add_argument("--policy", help="policy checkpoint stem")
    p.add_argument("--static", help="static designs .npy")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="robustness sweep over perturbed test-time priors")
    common(p)
    p.add_argument("--policy", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("oracle", help="exact enumeration values for the toy model")
    p.add_argument("--variant", default="binary", help="toy preset name")
    p.add_argument("--horizon", "--T", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("serve", help="serve the HTTP session API")
    common(p)
    p.add_argument("--policy", help="policy checkpoint stem")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8710)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("live", help="interactive terminal experiment")
    common(p)
    p.add_argument("--policy", help="policy checkpoint stem")
    p.set_defaults(fn=cmd_live)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
