"""Command-line entry point: ``hpl {simulate,invert,klyshko,theory-check,print-default-config}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .coincidence import (
    CoincidenceCounts,
    ExperimentScenario,
    dumps_sidecar,
    extract_exact_k,
    klyshko_counts,
    run_experiment,
    sidecar,
)
from .config import ExperimentConfig, default_config, load_config
from .detector_bank import build_conditional_matrix
from .errors import IO_EXIT_CODE, ConfigError, DegenerateDataError, HPLError, StatisticsError
from .inversion import infer_noise_free, invert_clicks, systematic_band
from .klyshko import (
    KlyshkoDataset,
    KlyshkoPoint,
    dataset_from_points,
    estimate_klyshko,
    fit_klyshko,
    model_eta,
    model_rows,
)
from .noise_theory import equivalence_table, noisy_herald_conditional
from .source_model import diagonal_joint

CHECK_FAILED = 1
THEORY_TOLERANCE = 1e-9


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _csv(header: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in rows)
    return buf.getvalue()


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("HPL_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HPL_WORKERS must be an integer, got {env!r}") from None
    return 1


def _load_with_overrides(args) -> ExperimentConfig:
    data = default_config() if args.config is None else None
    config = ExperimentConfig.from_dict(data) if data is not None else load_config(args.config)
    scenario = config.scenario
    if args.seed is not None:
        scenario = scenario.replace(seed=args.seed)
    if args.pulses is not None:
        scenario = scenario.replace(n_pulses=args.pulses)
    output_dir = Path(args.output_dir) if args.output_dir else config.output_dir
    return ExperimentConfig(scenario, config.sweep, output_dir, config.emit_plots_data)


# --- simulate ----------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_with_overrides(args)
    chash = config.config_hash()
    workers = _workers(args)
    for stem, scenario in config.points():
        counts = run_experiment(scenario, workers=workers)
        prov = {"config_hash": chash, "seed": scenario.seed}
        _write(config.output_dir / f"{stem}.csv", counts.to_csv(prov))
        _write(config.output_dir / f"{stem}.json", dumps_sidecar(sidecar(counts, scenario, chash)))
        if config.emit_plots_data:
            rows = []
            for k_h in range(counts.m_herald + 1):
                try:
                    clicks = extract_exact_k(counts, k_h)
                except StatisticsError:
                    continue
                sig = np.sqrt(np.diag(clicks.covariance))
                rows += [(k_h, k, float(q), float(s), clicks.n_trials)
                         for k, (q, s) in enumerate(zip(clicks.q, sig))]
            header = f"#schema=hpl-clicks/1;config_hash={chash};seed={scenario.seed}"
            _write(config.output_dir / f"{stem}_clicks.csv",
                   _csv(header, ["herald_clicks", "k", "q_k", "sigma", "n_trials"], rows))
        print(f"{stem}: {counts.n_pulses} pulses, herald clicks {dict(sorted(counts.herald_click_histogram().items()))}")
    return 0


# --- invert ------------------------------------------------------------

def _read_counts(path: Path) -> tuple[CoincidenceCounts, dict]:
    text = path.read_text()
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    counts = CoincidenceCounts.from_csv(text, meta.get("photon_tallies"))
    return counts, meta


def _scenario_for(meta: dict, config_path) -> ExperimentScenario:
    if config_path is not None:
        return load_config(config_path).scenario
    if "scenario" not in meta:
        raise ConfigError("counts file has no JSON sidecar; pass --config")
    return ExperimentScenario.from_dict(meta["scenario"])


def _klyshko_efficiencies(spec: str, counts, scenario, herald_label):
    """Return (etas, per_path) for an ``--efficiencies klyshko:<source>`` value."""
    source = spec.split(":", 1)[1]
    bank = scenario.signal_bank
    if source == "self":
        etas = {}
        for label in bank.labels:
            n_h, n_hs = klyshko_counts(counts, herald_label or counts.herald_labels[0], label)
            etas[label] = estimate_klyshko(n_hs, n_h)[0]
        return etas, False
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"Klyshko file {path} not found")
    data = json.loads(path.read_text())
    if "klyshko_etas" in data:
        return data["klyshko_etas"], bool(data.get("per_path", False))
    if {"eta_S", "alpha", "beta"} <= set(data):
        src = scenario.source
        eta = model_eta(src.pump_power, src.fiber_length, data["eta_S"], data["alpha"], data["beta"])
        return [eta] * bank.m, True
    raise ConfigError(f"{path} holds neither 'klyshko_etas' nor a fitted eta_S/alpha/beta")


def cmd_invert(args) -> int:
    counts_path = Path(args.counts)
    counts, meta = _read_counts(counts_path)
    scenario = _scenario_for(meta, args.config)
    bank = scenario.signal_bank
    if bank.labels != counts.signal_labels:
        raise ConfigError(f"config signal bank {bank.labels} does not match counts {counts.signal_labels}")
    n_max = args.n_max or bank.m
    out_dir = Path(args.output_dir) if args.output_dir else counts_path.parent
    prov_base = {"counts_file": counts_path.name, "config_hash": meta.get("config_hash", ""),
                 "seed": meta.get("seed", "")}

    if args.efficiencies == "tracer":
        klyshko = None
    elif args.efficiencies.startswith("klyshko:"):
        klyshko = _klyshko_efficiencies(args.efficiencies, counts, scenario, args.klyshko_herald)
    else:
        raise ConfigError(f"--efficiencies must be 'tracer' or 'klyshko:<file|self>', got {args.efficiencies!r}")

    for k_h in args.herald:
        clicks = extract_exact_k(counts, k_h, mode=args.herald_mode)
        if klyshko is None:
            est = invert_clicks(clicks, build_conditional_matrix(bank, n_max))
        else:
            est = infer_noise_free(clicks, bank, klyshko[0], n_max=n_max, per_path=klyshko[1])
        prov = dict(est.provenance, **prov_base, herald_condition=k_h, herald_mode=args.herald_mode,
                    n_trials=clicks.n_trials)
        payload = dict(est.to_json(), provenance=prov)
        if args.systematic:
            payload["systematic_delta"] = args.systematic
            payload["sigma_systematic"] = systematic_band(clicks, bank, args.systematic, n_max).tolist()
        stem = f"distribution_h{k_h}_{'tracer' if klyshko is None else 'klyshko'}"
        _write(out_dir / f"{stem}.json", _json(payload))
        header = f"#schema=hpl-distribution/1;config_hash={prov['config_hash']};seed={prov['seed']};herald={k_h}"
        _write(out_dir / f"{stem}.csv", _csv(header, ["n", "p_n", "sigma_n"], est.csv_rows()))
        shown = " ".join(f"p{n}={p:.4f}±{s:.4f}" for n, p, s in est.csv_rows())
        print(f"herald={k_h} ({clicks.n_trials} pulses, {prov['efficiencies']}): {shown}")
    return 0


# --- klyshko -----------------------------------------------------------

def _dataset_from_counts(paths, herald_label):
    points, inputs = [], []
    for path in map(Path, paths):
        counts, meta = _read_counts(path)
        if "scenario" not in meta:
            raise ConfigError(f"{path} has no JSON sidecar with pump power and fiber length")
        scenario = ExperimentScenario.from_dict(meta["scenario"])
        bank = scenario.signal_bank
        for label, R in zip(bank.labels, bank.split_fractions):
            n_h, n_hs = klyshko_counts(counts, herald_label or counts.herald_labels[0], label)
            eta, sigma = estimate_klyshko(n_hs, n_h)
            if sigma == 0:
                sigma = 1.0 / n_h
            # a single signal detector sees only its split fraction of the beam
            points.append(KlyshkoPoint(scenario.source.pump_power, scenario.source.fiber_length,
                                       label, min(eta / R, 1.0), sigma / R))
        inputs.append({"file": path.name, "config_hash": meta.get("config_hash", ""), "seed": meta.get("seed", "")})
    return dataset_from_points(points), inputs


def cmd_klyshko(args) -> int:
    if args.dataset:
        dataset = KlyshkoDataset.from_csv(Path(args.dataset).read_text())
        inputs = [{"file": Path(args.dataset).name}]
    else:
        if not args.counts:
            raise ConfigError("give counts files from a sweep or --dataset")
        dataset, inputs = _dataset_from_counts(args.counts, args.herald_label)
    if len(dataset.points) < 4:
        raise DegenerateDataError(f"need at least 4 sweep points, got {len(dataset.points)}")
    fit = fit_klyshko(dataset, weighted=not args.unweighted)
    digest = hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()[:16]
    out_dir = Path(args.output_dir or ".")
    header = f";inputs_hash={digest}"
    _write(out_dir / "klyshko_dataset.csv", dataset.to_csv(header))
    _write(out_dir / "klyshko_fit.json", _json(dict(fit.to_json(), inputs=inputs, inputs_hash=digest)))
    _write(out_dir / "klyshko_model.csv",
           _csv(f"#schema=hpl-klyshko-model/1{header}",
                ["power_mw", "length_m", "detector", "eta_measured", "eta_model", "residual"],
                model_rows(fit, dataset)))
    lo, hi = fit.confidence_interval("beta")
    print(f"eta_S={fit.eta_S:.4f}±{fit.stderr[0]:.4f} alpha={fit.alpha:.4g}±{fit.stderr[1]:.3g} mW m "
          f"beta={fit.beta:.4g} mW (95% [{lo:.3g}, {hi:.3g}])")
    return 0


# --- theory-check ------------------------------------------------------

def cmd_theory_check(args) -> int:
    joint = diagonal_joint(args.mu, args.family, args.n_max)
    rows = equivalence_table(joint, args.eta_r, args.n_max)
    worst = max(r[4] for r in rows)
    header = f"#schema=hpl-theory/1;eta_r={args.eta_r!r};mu={args.mu!r};n_max={args.n_max};family={args.family}"
    out = _csv(header, ["k_r", "n_s", "noisy_herald", "lossy_signal", "abs_diff"], rows)
    summary = {"single_herald_signal_presence": noisy_herald_conditional(joint, args.eta_r, 1, 1)}
    if args.n_max >= 2:
        summary["double_herald_p1"] = noisy_herald_conditional(joint, args.eta_r, 1, 2)
        summary["double_herald_p2"] = noisy_herald_conditional(joint, args.eta_r, 2, 2)
    summary["max_abs_discrepancy"] = worst
    out += "".join(f"#{k}={v!r}\n" for k, v in summary.items())
    sys.stdout.write(out)
    return 0 if worst <= THEORY_TOLERANCE else CHECK_FAILED


def cmd_print_default_config(args) -> int:
    sys.stdout.write(_json(default_config()))
    return 0


# --- parser ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the reference setup as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--output-dir")
        p.add_argument("--workers", type=int, help="worker processes (default $HPL_WORKERS or 1)")

    p = sub.add_parser("simulate", help="run the Monte Carlo experiment")
    p.add_argument("config", nargs="?", help="experiment JSON (default: reference setup)")
    p.add_argument("--seed", type=int)
    p.add_argument("--pulses", type=int)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("invert", help="reconstruct photon-number distributions")
    p.add_argument("counts", help="counts CSV written by 'simulate'")
    p.add_argument("--config", help="experiment JSON (default: the counts sidecar)")
    p.add_argument("--herald", type=int, nargs="+", default=[0, 1, 2], choices=range(0, 9))
    p.add_argument("--herald-mode", choices=["exact", "at_least"], default="exact")
    p.add_argument("--efficiencies", default="tracer", help="tracer | klyshko:<json> | klyshko:self")
    p.add_argument("--klyshko-herald", help="herald detector for klyshko:self (default: first)")
    p.add_argument("--systematic", type=float, default=0.0,
                   help="report a +/- band for this absolute shift of path efficiencies")
    p.add_argument("--n-max", type=int)
    common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("klyshko", help="fit heralding efficiencies over a power/length sweep")
    p.add_argument("counts", nargs="*", help="counts CSVs from a sweep")
    p.add_argument("--dataset", help="fit an existing dataset CSV instead")
    p.add_argument("--herald-label", help="herald detector to condition on (default: first)")
    p.add_argument("--unweighted", action="store_true")
    common(p)
    p.set_defaults(func=cmd_klyshko)

    p = sub.add_parser("theory-check", help="compare noisy heralding with the lossy-signal model")
    p.add_argument("--eta-r", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.01)
    p.add_argument("--n-max", type=int, default=3)
    p.add_argument("--family", choices=["thermal", "poissonian"], default="poissonian")
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("print-default-config", help="print the reference setup as JSON")
    p.set_defaults(func=cmd_print_default_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        return cmd_print_default_config(args)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except HPLError as exc:
        print(f"hpl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"hpl: I/O error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
