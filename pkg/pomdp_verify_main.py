from dotenv import load_dotenv
import argparse
import logging
import os
import sys

import numpy as np

from case_studies import BUILTIN_MODELS, LatticeTeachingSpec, ad_policy, build_builtin, teaching_unsafe_states
from certificate import InitialSet, UnsafeSet, load_certificate, save_certificate
from certifier import (
    NotFound,
    OverlapError,
    TubeViolation,
    ValidationFailure,
    build_programs,
    certify_with_escalation,
    load_config,
    reach_per_action,
    reach_policy,
    reach_single,
    set_grid,
    validate_certificate,
    verify_optimality,
    verify_safety,
)
from lp_solver import IterationLimit, dump_program, export_mps
from polynomial import parse_polynomial
from pomdp_csv import PomdpCSV
from pomdp_model import Belief, Pomdp, sample_trajectories
from pomdp_parser import parse_policy, parse_pomdp, write_policy, write_pomdp

COMMANDS = ["simulate", "reach", "verify-safety", "verify-opt", "build-model", "export-lp", "check-cert"]
INCONCLUSIVE = 2
BUILTIN_POLICY = ("builtin", "paper")
FLAGS = {"tau": "--tau", "threshold": "--lambda", "bound": "--gamma"}


def get_args():
    """
    Parse command-line arguments.
    return: argparse.ArgumentParser
    """
    parser = argparse.ArgumentParser(prog="POMDP Verify", description="Verify reachability, safety and optimality of POMDPs with polynomial certificates.")
    parser.add_argument(
        "command",
        choices=COMMANDS,
        help="""Command to run:
  simulate      : Sample trajectories of the belief system
  reach         : Over-approximate the reachable beliefs
  verify-safety : Barrier certificate for a belief safety property
  verify-opt    : Barrier certificate for a cumulative reward bound
  build-model   : Write a built-in model (and its policy) as files
  export-lp     : Write the programs of --job as MPS files without solving
  check-cert    : Re-validate a certificate file against its model""")
    parser.add_argument("-m", "--model", dest="model", required=True, help=f"Built-in model ({', '.join(BUILTIN_MODELS)}) or path to a .pomdp file")
    parser.add_argument("--policy", dest="policy", help="Policy file, or 'builtin' for the built-in ad-scheduling policy")
    parser.add_argument("--b0", dest="b0", help="Initial belief as comma-separated probabilities (default: the model's)")
    parser.add_argument("--mode", dest="mode", help="reach: single | per_action | per_partition; barriers: monolithic | per_action_hull | per_partition")
    parser.add_argument("--degree", dest="degree", type=int, help="Certificate degree (default: escalate through the config degrees)")
    parser.add_argument("--unsafe", dest="unsafe", help="Comma-separated unsafe states (default: every non-target hypothesis for 'lattice', the last state otherwise)")
    parser.add_argument("--lambda", dest="threshold", type=float, help="Safety threshold on the unsafe mass")
    parser.add_argument("--tau", dest="tau", type=int, help="Verification horizon")
    parser.add_argument("--gamma", dest="bound", type=float, help="Cumulative reward bound")
    parser.add_argument("--tube", dest="tube", help="Reward tube as a polynomial in t (default: gamma / (tau + 1))")
    parser.add_argument("--rewards", dest="rewards", help="Constant reward value, or CSV with a 'state' column and one column per action")
    parser.add_argument("--job", dest="job", choices=["reach", "verify-safety", "verify-opt"], help="Program family written by export-lp")
    parser.add_argument("--export-only", dest="export_only", action="store_true", default=False, help="Write the programs as MPS files instead of solving them")
    parser.add_argument("--horizon", dest="horizon", type=int, help="Simulation horizon (default: config sampling.horizon)")
    parser.add_argument("--trajectories", dest="trajectories", type=int, help="Number of simulated trajectories (default: config sampling.trajectories)")
    parser.add_argument("--seed", dest="seed", type=int, help="Random seed (default: config sampling.seed)")
    parser.add_argument("--resolution", dest="resolution", type=int, default=50, help="Grid resolution of set CSV outputs")
    parser.add_argument("--cert", dest="cert", help="Certificate file (written by reach/verify, read by check-cert)")
    parser.add_argument("-o", "--out", dest="out", help="Comma-separated output paths")
    parser.add_argument("--config", dest="config", help="Configuration file (default: $POMDP_VERIFY_CONFIG or config.yaml)")
    parser.add_argument("--debug", dest="debug", choices=["info", "debug", "none"], default="info", help="Debug level: info (default), debug (verbose), none (quiet)")
    return parser


def setup_logging(debug_level):
    """
    Configure logging based on debug level.
    debug_level (str): Debug level (info, debug, none)
    """
    if debug_level == "debug":
        logging.basicConfig(level=logging.DEBUG)
    elif debug_level == "info":
        logging.basicConfig(level=logging.INFO)
    else:  # none
        logging.basicConfig(level=logging.WARNING)


def validate_files(args):
    """
    Validate that referenced input files exist.
    args: parsed arguments (dict)
    return: (tuple) is_valid, error_message
    """
    model = args["model"]
    if model not in BUILTIN_MODELS and not os.path.exists(model):
        return False, f"Model is neither built-in nor a file: {model}"
    policy = args.get("policy")
    if policy and policy not in BUILTIN_POLICY and not os.path.exists(policy):
        return False, f"Policy file not found: {policy}"
    if args["command"] == "check-cert":
        if not args.get("cert"):
            return False, "check-cert needs --cert"
        if not os.path.exists(args["cert"]):
            return False, f"Certificate file not found: {args['cert']}"
    if args.get("config") and not os.path.exists(args["config"]):
        return False, f"Config file not found: {args['config']}"
    return True, None


def load_model(name: str) -> Pomdp:
    return build_builtin(name) if name in BUILTIN_MODELS else parse_pomdp(name)


def load_policy(value, pomdp: Pomdp):
    if not value:
        return None
    if value in BUILTIN_POLICY:
        if pomdp.name != "ad":
            raise ValueError(f"The built-in policy is defined for the ad-scheduling model, not '{pomdp.name}'")
        return ad_policy(pomdp)
    return parse_policy(value, pomdp)


def load_rewards(value, pomdp: Pomdp) -> Pomdp:
    """
    Attach rewards from --rewards (constant or CSV) when given.
    return: Pomdp
    """
    if not value:
        return pomdp
    try:
        rewards = np.full((pomdp.n_states, len(pomdp.actions)), float(value))
    except ValueError:
        rows = PomdpCSV(value).read_csv(PomdpCSV(value).detect_delimiter())
        if not rows:
            raise ValueError(f"No rewards read from {value}")
        by_state = {row["state"]: row for row in rows}
        rewards = np.array([[float(by_state[state][action]) for action in pomdp.actions] for state in pomdp.states])
    return Pomdp(pomdp.states, pomdp.actions, pomdp.observations, pomdp.transition, pomdp.observation, pomdp.initial_belief, rewards, pomdp.name)


def default_unsafe_states(args, pomdp: Pomdp):
    if args.get("unsafe"):
        return [s.strip() for s in args["unsafe"].split(",")]
    if args["model"] == "lattice":
        return teaching_unsafe_states(LatticeTeachingSpec())
    return [pomdp.states[-1]]


def output_paths(args, count: int, defaults):
    paths = [p.strip() for p in args["out"].split(",")] if args.get("out") else []
    return (paths + list(defaults)[len(paths):])[:count]


def require(args, *names):
    missing = [FLAGS[name] for name in names if args.get(name) is None]
    if missing:
        raise ValueError(f"{args['command']} needs {', '.join(missing)}")


def certify(procedure, args, config, **kwargs):
    if args.get("degree"):
        return procedure(degree=args["degree"], config=config, **kwargs)
    return certify_with_escalation(procedure, config=config, **kwargs)


def export_programs(args, pomdp: Pomdp, policy, config) -> int:
    """
    Write every first-stage program of a job as MPS (plus a readable dump).
    return: exit code
    """
    job = args.get("job") or args["command"]
    degree = args.get("degree") or config["degrees"][0]
    if job == "reach":
        mode = args.get("mode") or ("per_partition" if policy else "single")
        programs = build_programs("reach", pomdp, degree, mode, policy, config=config)
    else:
        require(args, "tau")
        if job == "verify-safety":
            require(args, "threshold")
            unsafe = UnsafeSet.safety(default_unsafe_states(args, pomdp), args["threshold"])
        else:
            require(args, "bound")
            tube = parse_polynomial(args["tube"], ("t",)) if args.get("tube") else None
            unsafe = UnsafeSet.optimality(args["bound"], tube)
        programs = build_programs("barrier", pomdp, degree, args.get("mode"), policy, unsafe, args["tau"], config=config)
    paths = output_paths(args, len(programs), [f"{lp.name}.mps" for lp in programs])
    for lp, path in zip(programs, paths):
        export_mps(lp, path)
        dump_program(lp, path + ".txt")
        print(f"Program {lp.name} written to {path}")
    return 0


def execute_action(args):
    """
    Execute the requested command.
    args: parsed arguments (dict)
    return: exit code (0 success/certified, 2 inconclusive, 1 error)
    """
    command = args["command"]
    logging.info(f"Executing command: {command.upper()}")
    logging.info(f"Model: {args['model']}")
    print("=" * 50)
    try:
        config = load_config(args.get("config"))
        sampling = config["sampling"]
        seed = sampling["seed"] if args.get("seed") is None else args["seed"]
        logging.info(f"Random seed: {seed}")
        pomdp = load_rewards(args.get("rewards"), load_model(args["model"]))
        if args.get("b0"):
            pomdp = pomdp.with_initial_belief(Belief([float(v) for v in args["b0"].split(",")]))
        policy = load_policy(args.get("policy"), pomdp)

        if command == "export-lp" or args.get("export_only"):
            return export_programs(args, pomdp, policy, config)

        if command == "simulate":
            horizon = args.get("horizon") or sampling["horizon"]
            count = args.get("trajectories") or sampling["trajectories"]
            trajectories = sample_trajectories(pomdp, horizon, count, seed, policy)
            (path,) = output_paths(args, 1, ["trajectories.csv"])
            if not PomdpCSV(path).write_trajectories(trajectories, pomdp.n_states):
                return 1
            print(f"\n{count} trajectories of horizon {horizon} written to {path}")
            return 0

        elif command == "reach":
            mode = args.get("mode") or ("per_partition" if policy else "single")
            if mode == "per_partition":
                if policy is None:
                    raise ValueError("per_partition reach needs --policy")
                cert = certify(reach_policy, args, config, pomdp=pomdp, policy=policy)
            elif mode == "per_action":
                cert = certify(reach_per_action, args, config, pomdp=pomdp)
            else:
                cert = certify(reach_single, args, config, pomdp=pomdp)
            validate_certificate(cert, pomdp, config, rng_seed=seed)
            cert_path = args.get("cert") or f"{pomdp.name}.reach.cert"
            save_certificate(cert, cert_path)
            cloud_path, set_path = output_paths(args, 2, ["cloud.csv", "set.csv"])
            horizon = args.get("horizon") or sampling["horizon"]
            count = args.get("trajectories") or sampling["trajectories"]
            PomdpCSV(cloud_path).write_trajectories(sample_trajectories(pomdp, horizon, count, seed, policy), pomdp.n_states)
            PomdpCSV(set_path).write_set_grid(set_grid(cert, args["resolution"]), pomdp.n_states)
            print(f"\nReach set CERTIFIED at degree {cert.degree} ({cert.mode})")
            print(f"Certificate: {cert_path}, sample cloud: {cloud_path}, set grid: {set_path}")
            return 0

        elif command in ("verify-safety", "verify-opt"):
            require(args, "tau")
            mode = args.get("mode") or ("per_partition" if policy else "monolithic")
            initial = InitialSet.singleton(pomdp.initial_belief)
            if command == "verify-safety":
                require(args, "threshold")
                unsafe = UnsafeSet.safety(default_unsafe_states(args, pomdp), args["threshold"])
                cert = certify(verify_safety, args, config, pomdp=pomdp, unsafe=unsafe, horizon=args["tau"], mode=mode, initial=initial, policy=policy)
            else:
                require(args, "bound")
                tube = parse_polynomial(args["tube"], ("t",)) if args.get("tube") else None
                cert = certify(verify_optimality, args, config, pomdp=pomdp, horizon=args["tau"], bound=args["bound"], tube=tube, mode=mode, initial=initial, policy=policy)
            validate_certificate(cert, pomdp, config, rng_seed=seed)
            cert_path = args.get("cert") or f"{pomdp.name}.{command}.cert"
            save_certificate(cert, cert_path)
            if args.get("out"):
                (path,) = output_paths(args, 1, [])
                PomdpCSV(path).write_set_grid(set_grid(cert, args["resolution"]), pomdp.n_states)
            print(f"\nProperty CERTIFIED at degree {cert.degree} ({cert.mode}, horizon {cert.horizon})")
            print(f"Certificate: {cert_path}")
            return 0

        elif command == "build-model":
            model_path, policy_path = output_paths(args, 2, [f"{pomdp.name}.pomdp", f"{pomdp.name}.policy"])
            write_pomdp(pomdp, model_path)
            print(f"\nModel written to {model_path}")
            if policy is not None:
                write_policy(policy, policy_path)
                print(f"Policy written to {policy_path}")
            return 0

        elif command == "check-cert":
            cert = load_certificate(args["cert"])
            evidence = validate_certificate(cert, pomdp, config, rng_seed=seed)
            print(f"\nCertificate VALID: {evidence['conditions']} conditions, identity residual {evidence['max_identity_residual']:.2e}, {evidence['trajectories']} trajectories")
            return 0

        else:
            logging.error(f"Unknown command: {command}")
            return 1

    except (NotFound, IterationLimit) as e:
        logging.warning(f"Inconclusive: {e}")
        print(f"\nINCONCLUSIVE: {e}")
        return INCONCLUSIVE
    except (OverlapError, TubeViolation, ValidationFailure) as e:
        logging.error(f"{type(e).__name__}: {e}")
        print(f"\nERROR: {type(e).__name__}: {e}")
        return 1
    except Exception as e:
        logging.error(f"Error executing command '{command}': {e}", exc_info=logging.getLogger().isEnabledFor(logging.DEBUG))
        print(f"\nERROR: {e}")
        return 1


def main(argv=None):
    """
    Main entry point for the CLI application.
    """
    # Load environment variables from the .env file
    load_dotenv()

    # Parse arguments
    parser = get_args()
    args = vars(parser.parse_args(argv))

    # Setup logging first
    setup_logging(args.get("debug", "info"))

    # Validate files
    valid_files, files_error = validate_files(args)
    if not valid_files:
        logging.error(f"File validation failed: {files_error}")
        print(f"\nERROR: {files_error}")
        sys.exit(1)

    # Execute command
    code = execute_action(args)

    # Exit with appropriate code
    if code == 0:
        logging.info("Operation completed successfully")
    elif code == INCONCLUSIVE:
        logging.warning("Operation inconclusive")
    else:
        logging.error("Operation completed with errors")
    sys.exit(code)


if __name__ == "__main__":
    main()
