"""Command-line pipelines: simulate, calibrate, reconstruct, score, experiment.

Every output file embeds the seed and a digest of the run configuration so
a run can be reproduced byte-for-byte from its own artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import ancestral, distances, merge, scoring, simulate, trees

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3


def _config_digest(args: dict) -> str:
    """Digest of the generating configuration (output locations excluded)."""
    skip = {"func", "out", "params_out", "command"}
    blob = json.dumps(
        {k: v for k, v in args.items() if k not in skip}, sort_keys=True, default=str
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# -- sequence files -----------------------------------------------------------


def save_matrix(path, labeled_rows, n_sites, alphabet, seed, digest):
    """Write the tab-separated sequence format with its '#taxa=' header."""
    lines = [f"#taxa={len(labeled_rows)} sites={n_sites} alphabet={alphabet} seed={seed} config={digest}"]
    for label in sorted(labeled_rows):
        row = labeled_rows[label]
        if alphabet == "binary":
            symbols = "".join("1" if x == 1 else "0" for x in row)
        else:
            symbols = "".join(simulate.KLEIN_ELEMENTS[int(x)] for x in row)
        lines.append(f"{label}\t{symbols}")
    _write(path, "\n".join(lines) + "\n")


def load_matrix(path):
    """Read a sequence file; returns (label -> +/-1 row, n_sites, alphabet).

    Four-letter alphabets are projected onto signs through the standard
    purine/pyrimidine morphism, which reduces them to the two-state model.
    """
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#taxa="):
            raise ValueError(f"{path}: missing '#taxa=' header")
        fields = dict(kv.split("=", 1) for kv in header[1:].split())
        n_sites = int(fields["sites"])
        alphabet = fields.get("alphabet", "binary")
        rows = {}
        sym_index = {s: i for i, s in enumerate(simulate.KLEIN_ELEMENTS)}
        phi = np.asarray(simulate.KLEIN_PHI, dtype=np.int8)
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            label, symbols = line.split("\t")
            if len(symbols) != n_sites:
                raise ValueError(f"{path}: row {label} has {len(symbols)} sites, expected {n_sites}")
            if alphabet == "binary":
                rows[label] = np.fromiter(
                    (1 if ch == "1" else -1 for ch in symbols), dtype=np.int8, count=n_sites
                )
            else:
                idx = np.fromiter((sym_index[ch] for ch in symbols), dtype=np.int64, count=n_sites)
                rows[label] = phi[idx]
    if int(fields["taxa"]) != len(rows):
        raise ValueError(f"{path}: header claims {fields['taxa']} taxa, found {len(rows)}")
    return rows, n_sites, alphabet


# -- commands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    digest = _config_digest(vars(args))
    rng = np.random.default_rng(args.seed)
    if args.tree:
        with open(args.tree) as fh:
            truth = trees.parse_newick(fh.read().strip().splitlines()[-1])
    else:
        labels = [f"t{i:03d}" for i in range(args.taxa)]
        truth = simulate.random_binary_tree(labels, rng, (args.edge_min, args.edge_max))
    truth.validate_binary()
    header = [f"seed={args.seed} config={digest}"]
    _write(os.path.join(args.out, "truth.nwk"), trees.forest_to_newick([truth], header))

    seq_path = os.path.join(args.out, "sequences.txt")
    if args.model == "cfn":
        model = simulate.CFNModel(truth)
        mat = simulate.sample_cfn(model, args.sites, args.seed)
        labeled = {truth.label[v]: mat[v] for v in truth.leaves()}
        save_matrix(seq_path, labeled, args.sites, "binary", args.seed, digest)
    else:
        weight = 2.0 if args.model == "k3st" else 1.0
        gmodel = simulate.kimura_model(truth, transition_weight=weight)
        gmat = simulate.sample_group(gmodel, args.sites, args.seed)
        labeled = {truth.label[v]: gmat.rows[v] for v in truth.leaves()}
        save_matrix(seq_path, labeled, args.sites, args.model.upper(), args.seed, digest)
    print(f"wrote {seq_path} and truth.nwk (seed={args.seed})")
    return EXIT_OK


def _resolve_params(n_sites, n_taxa, xi, epsilon, depth):
    """Calibrated parameters, or a practical operating point when overridden."""
    if epsilon is not None:
        return distances.operating_params(n_sites, n_taxa, xi, epsilon, depth)
    return distances.calibrate(n_sites, n_taxa, xi, depth)


def cmd_calibrate(args) -> int:
    try:
        params = _resolve_params(args.sites, args.taxa, args.xi, args.epsilon, args.depth_d)
    except distances.CalibrationInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        print(f"minimal feasible sites: {exc.min_feasible_sites}", file=sys.stderr)
        return EXIT_INFEASIBLE
    text = params.to_text()
    if args.params_out:
        _write(args.params_out, text)
    print(text, end="")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    digest = _config_digest(vars(args))
    rows, n_sites, _ = load_matrix(args.seqs)
    try:
        params = _resolve_params(n_sites, len(rows), args.xi, args.epsilon, args.depth_d)
    except distances.CalibrationInfeasibleError as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        print(f"minimal feasible sites: {exc.min_feasible_sites}", file=sys.stderr)
        return EXIT_INFEASIBLE
    result = merge.tree_merge(rows, params, seed=args.seed)
    header = [f"seed={args.seed} config={digest}"]
    _write(os.path.join(args.out, "forest.nwk"), result.forest_newick(header))
    _write(
        os.path.join(args.out, "runlog.txt"),
        "\n".join([f"# seed={args.seed} config={digest}"] + result.log) + "\n",
    )
    tel = result.telemetry
    report = [
        f"# seed={args.seed} config={digest}",
        f"taxa\t{tel.n_taxa}",
        f"components\t{len(result.components)}",
        f"iterations\t{tel.iterations}",
        f"merges\t{tel.merges}",
        f"distance_evaluations\t{tel.distance_evaluations}",
        f"learned_sequences\t{tel.learned_sequences}",
        f"runtime_seconds\t{tel.runtime_seconds:.3f}",
    ]
    _write(os.path.join(args.out, "telemetry.tsv"), "\n".join(report) + "\n")
    if args.params_out:
        _write(args.params_out, params.to_text())
    print(f"{len(result.components)} component(s); telemetry in {args.out}/telemetry.tsv")
    return EXIT_OK


def cmd_score(args) -> int:
    with open(args.forest) as fh:
        components = trees.parse_forest(fh.read())
    with open(args.truth) as fh:
        truth_parts = trees.parse_forest(fh.read())
    if len(truth_parts) != 1:
        print("reference file must hold exactly one tree", file=sys.stderr)
        return EXIT_USAGE
    report = scoring.score_forest(components, truth_parts[0])
    out = report.to_tsv()
    if args.out:
        _write(args.out, out)
    print(out, end="")
    return EXIT_OK


def _run_trial(n_taxa, n_sites, edge_range, xi, epsilon, depth, trial_seed):
    rng = np.random.default_rng(trial_seed)
    labels = [f"t{i:03d}" for i in range(n_taxa)]
    truth = simulate.random_binary_tree(labels, rng, edge_range)
    model = simulate.CFNModel(truth)
    mat = simulate.sample_cfn(model, n_sites, trial_seed)
    rows = {truth.label[v]: mat[v] for v in truth.leaves()}
    params = distances.operating_params(n_sites, n_taxa, xi, epsilon, depth)
    t0 = time.perf_counter()
    result = merge.tree_merge(rows, params, seed=trial_seed)
    elapsed = time.perf_counter() - t0
    report = scoring.score_forest(result.components, truth)
    return report, elapsed, result.telemetry


def cmd_experiment(args) -> int:
    digest = _config_digest(vars(args))
    taxa_grid = [int(x) for x in args.grid_taxa.split(",")]
    sites_grid = [int(x) for x in args.grid_sites.split(",")]
    lines = [
        f"# seed={args.seed} config={digest}",
        "taxa\tsites\ttrials\tsuccess_rate\tmean_compatibility\tmean_runtime_s",
    ]
    runtimes_by_n = {}
    for n_taxa in taxa_grid:
        for n_sites in sites_grid:
            successes, compats, times = 0, [], []
            for trial in range(args.trials):
                trial_seed = int(
                    np.random.SeedSequence([args.seed, n_taxa, n_sites, trial]).generate_state(1)[0]
                )
                try:
                    report, elapsed, _ = _run_trial(
                        n_taxa,
                        n_sites,
                        (args.edge_min, args.edge_max),
                        args.xi,
                        args.epsilon,
                        args.depth_d,
                        trial_seed,
                    )
                    successes += int(report.full_recovery)
                    compats.append(report.compatibility)
                    times.append(elapsed)
                except Exception as exc:  # a failed trial must not abort the sweep
                    lines.append(f"# trial_error taxa={n_taxa} sites={n_sites} trial={trial}: {exc}")
                    compats.append(0.0)
                    times.append(0.0)
            lines.append(
                f"{n_taxa}\t{n_sites}\t{args.trials}\t{successes / args.trials:.4f}"
                f"\t{sum(compats) / len(compats):.4f}\t{sum(times) / len(times):.4f}"
            )
            runtimes_by_n.setdefault(n_taxa, []).append(sum(times) / len(times))
    if len(taxa_grid) >= 3:
        xs = np.log([n for n in taxa_grid])
        ys = np.log([max(1e-9, np.mean(runtimes_by_n[n])) for n in taxa_grid])
        slope = float(np.polyfit(xs, ys, 1)[0])
        lines.append(f"# runtime_exponent\t{slope:.3f}")
    out = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, out)
    print(out, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treemerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate characters and a reference tree")
    p.add_argument("--taxa", type=int, default=8)
    p.add_argument("--sites", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=["cfn", "jc", "k3st"], default="cfn")
    p.add_argument("--edge-min", type=float, default=0.05)
    p.add_argument("--edge-max", type=float, default=0.15)
    p.add_argument("--tree", help="Newick file to use instead of a random tree")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="solve for reconstruction parameters")
    p.add_argument("--sites", type=int, required=True)
    p.add_argument("--taxa", type=int, required=True)
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, help="practical override; skips certification")
    p.add_argument("--depth-d", type=int)
    p.add_argument("--params-out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="reconstruct a forest from sequences")
    p.add_argument("--seqs", required=True)
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--depth-d", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--params-out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("score", help="compare a forest against a reference tree")
    p.add_argument("--forest", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="seeded sweep over taxa/sites grids")
    p.add_argument("--grid-taxa", default="8,16")
    p.add_argument("--grid-sites", default="1000")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--xi", type=float, default=0.2)
    p.add_argument("--epsilon", type=float, default=0.004)
    p.add_argument("--depth-d", type=int, default=3)
    p.add_argument("--edge-min", type=float, default=0.05)
    p.add_argument("--edge-max", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
