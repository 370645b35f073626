from argparse import ArgumentParser

from balancedfmm.config import FMM_BACKEND, FMM_LOG_LEVEL, FMM_RANK, FMM_ROSTER, FMM_WATCHDOG_TIMEOUT


def _levels(value: str):
    return value if value == "auto" else int(value)


def _add_problem_args(parser):
    group = parser.add_argument_group("problem")
    group.add_argument(
        "--dist",
        type=str,
        default="uniform",
        choices=["uniform", "uniform-cube", "gaussian", "shell", "helix", "galaxy"],
        help="Point distribution to generate when no --points-file is given.",
    )
    group.add_argument("--n", type=int, default=1000, help="Number of source points.")
    group.add_argument("--seed", type=int, default=0, help="64-bit generator seed.")
    group.add_argument(
        "--galaxy-depth",
        type=int,
        default=3,
        dest="galaxy_depth",
        help="Recursion stages of the galaxy model; N must be seeds * 10^depth.",
    )
    group.add_argument(
        "--points-file",
        type=str,
        default=None,
        dest="points_file",
        help="Read sources from an FMM3 binary file or a .csv (x,y,z[,mass]) instead of generating them.",
    )
    group.add_argument(
        "--targets-file",
        type=str,
        default=None,
        dest="targets_file",
        help="Evaluate at these points instead of at the sources.",
    )
    group.add_argument(
        "--n-targets",
        type=int,
        default=None,
        dest="n_targets",
        help="Generate this many external evaluation points from the same distribution.",
    )


def _add_fmm_args(parser):
    group = parser.add_argument_group("fmm")
    group.add_argument("--theta", type=float, default=0.5, help="Admissibility parameter in (0, 1).")
    group.add_argument(
        "--eta",
        type=float,
        default=0.5,
        help="Split-plane blend: 0 = geometric midpoint, 1 = point median.",
    )
    group.add_argument(
        "--levels",
        type=_levels,
        default=3,
        help="Levels per rank tree, or 'auto' to aim for --leaf-target points per leaf.",
    )
    group.add_argument("--leaf-target", type=int, default=100, dest="leaf_target",
                       help="Points per leaf aimed at by --levels auto.")
    group.add_argument("--tol", type=float, default=1e-6, help="Requested relative tolerance.")
    group.add_argument("--order", type=int, default=None, help="Explicit expansion order Q, overrides --tol.")
    group.add_argument(
        "--bound-constant",
        type=float,
        default=1.0,
        dest="bound_constant",
        help="C in the truncation bound C theta^(Q+1) / (1 - theta)^2.",
    )
    group.add_argument(
        "--m2l",
        type=str,
        default="rotation",
        choices=["rotation", "direct"],
        help="M2L translation form.",
    )


def _add_run_args(parser):
    group = parser.add_argument_group("run")
    group.add_argument("--p", type=int, default=1, dest="ranks", help="Number of ranks.")
    group.add_argument(
        "--backend",
        type=str,
        default=FMM_BACKEND,
        choices=["memory", "tcp", "serial"],
        help="memory: ranks as tasks in one process. tcp: one process per rank. serial: one rank owning all P boxes.",
    )
    group.add_argument(
        "--partition",
        type=str,
        default="cubic",
        choices=["cubic", "orb"],
        help="Rank decomposition: cubic grid (P = k^3) or recursive bisection (P = 2^k).",
    )
    group.add_argument(
        "--halo-wait",
        type=str,
        default="rank",
        choices=["rank", "any"],
        dest="halo_wait",
        help="Process halo receives in rank order or in completion order.",
    )
    group.add_argument("--repeats", type=int, default=1, help="Repeat each measurement this many times.")
    group.add_argument(
        "--watchdog-timeout",
        type=float,
        default=FMM_WATCHDOG_TIMEOUT,
        dest="watchdog_timeout",
        help="Seconds without message progress before a rank reports a deadlock.",
    )
    group.add_argument("--rank", type=int, default=None if FMM_RANK is None else int(FMM_RANK),
                       help="This process's rank (tcp backend).")
    group.add_argument("--roster", type=str, default=FMM_ROSTER, help="host:port list file, one line per rank.")
    group.add_argument(
        "--spawn",
        action="store_true",
        help="With --backend tcp: write a localhost roster and launch all rank processes.",
    )
    group.add_argument("--no-warmup", action="store_true", dest="no_warmup",
                       help="Skip building operator tables before timing.")


def _add_output_args(parser):
    group = parser.add_argument_group("output")
    group.add_argument(
        "--check-oracle",
        action="store_true",
        dest="check_oracle",
        help="Compare against the direct O(N^2) sum and report the max relative error.",
    )
    group.add_argument("--out", type=str, default=None, help="Write potentials here (FMMP binary, or .csv).")
    group.add_argument("--report", type=str, default=None, help="Write the JSON report here.")


def parse_args(argv=None):
    parser = ArgumentParser(prog="balancedfmm-bench", description="Balanced-tree FMM benchmark harness")
    parser.add_argument(
        "-l",
        "--log-level",
        type=str,
        default=FMM_LOG_LEVEL,
        dest="log_level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set the log level",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    eval_parser = commands.add_parser("eval", help="Evaluate potentials once.")
    converge = commands.add_parser("converge", help="Error against tolerance 10^-k, k = 1..k_max.")
    converge.add_argument("--k-max", type=int, default=12, dest="k_max", help="Largest tolerance exponent.")
    sweep = commands.add_parser("sweep", help="One-at-a-time parameter sweeps around the defaults.")
    sweep.add_argument(
        "--param",
        type=str,
        default="theta",
        choices=["theta", "levels", "eta"],
        help="Parameter to vary.",
    )
    sweep.add_argument("--values", type=str, default=None,
                       help="Comma-separated values; defaults to the parameter's usual range.")
    connectivity = commands.add_parser("connectivity", help="C_near and C_far over rank counts (tree only).")
    connectivity.add_argument("--ranks-list", type=str, default="1,8,27,64", dest="ranks_list",
                              help="Comma-separated rank counts.")
    connectivity.add_argument("--n-per-rank", type=int, default=None, dest="n_per_rank",
                              help="Points per rank for weak scaling; defaults to N / max(P).")
    galaxy = commands.add_parser("galaxy-eta", help="Total time and P2P variance over eta.")
    galaxy.add_argument("--etas", type=str, default="0,0.25,0.5,0.75,1", help="Comma-separated eta values.")
    scaling = commands.add_parser("scaling", help="Weak or strong scaling over rank counts.")
    scaling.add_argument("--ranks-list", type=str, default="1,8", dest="ranks_list", help="Comma-separated rank counts.")
    scaling.add_argument("--mode", type=str, default="weak", choices=["weak", "strong"],
                         help="weak: N grows with P. strong: N fixed.")

    for sub in (eval_parser, converge, sweep, connectivity, galaxy, scaling):
        _add_problem_args(sub)
        _add_fmm_args(sub)
        _add_run_args(sub)
        _add_output_args(sub)

    # must follow the argument groups
    sweep.set_defaults(repeats=4)
    connectivity.set_defaults(eta=0.0, levels=4, n=1000000)
    galaxy.set_defaults(dist="galaxy", n=1000000, ranks=8, levels=4)

    args = parser.parse_args(argv)
    return args
