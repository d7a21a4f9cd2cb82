"""Command-line experiment runner: ``hmm-gpsm generate|train|evaluate|benchmark``.

Settings come from a flat ``key=value`` file (``--config``) and repeated
``--set key=value`` overrides, in that order. Exit status is 0 on success,
2 on usage errors and 1 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import MissingSpec, SyntheticSpec, gen_dataset, load_csv, save_csv
from .emission import EmissionModel, emission_loglik_grid
from .hmm import DirichletPriors, vbem_fit
from .pipeline import (
    METHODS,
    SCHEMA_VERSION,
    TrainedModel,
    TrainSettings,
    corrupt,
    evaluate,
    module_rng,
    train,
)
from .spectral import SmKernelParams, default_counts
from .svi import TRACE_FIELDS, SviConfig, svi_fit

log = logging.getLogger("hmm_gpsm")

GENERATE_DEFAULTS = {
    "n_components": 3,
    "sample_rate": 50,
    "n_segments": 100,
    "noise_std": 0.1,
    "duration_factor": 2,
    "missing_mode": "",
    "missing_percent": 0.0,
}

BENCHMARK_DEFAULTS = {
    "n": "250,500,1000",
    "m": "20",
    "L": "10",
    "T": "20",
    "n_states": 8,
    "n_components": 3,
    "batch_count": 3,
    "mc_reps": 4,
    "repeats": 3,
}

BENCHMARK_COLUMNS = ("mode", "n", "m", "L", "T", "n_states", "n_components",
                     "emission_seconds", "emission_seconds_min", "iteration_seconds")


class UsageError(Exception):
    """Bad command-line input; reported with exit status 2."""


# --- configuration -------------------------------------------------------------------

def read_config(path: str | None, overrides: list[str] | None) -> dict[str, str]:
    """Merge a ``key=value`` file with ``key=value`` overrides (later wins)."""
    entries: list[tuple[str, str]] = []
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise UsageError(f"cannot read config {path}: {err}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            entries.append(tuple(p.strip() for p in line.split("=", 1)))  # type: ignore[arg-type]
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        entries.append(tuple(p.strip() for p in item.split("=", 1)))  # type: ignore[arg-type]
    return dict(entries)


def typed_config(raw: dict[str, str], defaults: dict) -> dict:
    """Cast ``raw`` to the types of ``defaults``; unknown keys are a usage error."""
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"invalid config keys: {', '.join(unknown)}; valid keys: {', '.join(sorted(defaults))}")
    out = dict(defaults)
    for key, text in raw.items():
        kind = type(defaults[key])
        try:
            out[key] = kind(float(text)) if kind is int and "." in text else kind(text)
        except ValueError:
            raise UsageError(f"config key {key}: cannot parse {text!r} as {kind.__name__}") from None
    return out


def train_settings(raw: dict[str, str]) -> TrainSettings:
    defaults = asdict(TrainSettings())
    return TrainSettings(**typed_config(raw, defaults))


def parse_grid(text: str, key: str) -> list[int]:
    values = [v.strip() for v in str(text).split(",") if v.strip()]
    try:
        out = [int(v) for v in values]
    except ValueError:
        raise UsageError(f"benchmark key {key}: expected comma-separated integers, got {text!r}") from None
    if not out:
        raise UsageError(f"benchmark grid for {key} is empty")
    if any(v < 1 for v in out):
        raise UsageError(f"benchmark grid for {key} must be positive")
    return out


def missing_option(text: str | None) -> str | None:
    if not text or text == "none":
        return None
    try:
        MissingSpec.parse(text)
    except ValueError as err:
        raise UsageError(str(err)) from None
    return text


def write_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# --- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = typed_config(read_config(args.config, args.set), GENERATE_DEFAULTS)
    missing = missing_option(args.missing)
    if cfg["missing_mode"] or cfg["missing_percent"]:
        try:
            spec = MissingSpec(cfg["missing_mode"], cfg["missing_percent"])
        except ValueError as err:
            raise UsageError(str(err)) from None
        missing = f"{spec.mode}{spec.percent:g}"
    try:
        spec = SyntheticSpec.random(cfg["n_components"], cfg["sample_rate"], cfg["n_segments"],
                                    module_rng(args.seed, "data-spec"), noise_std=cfg["noise_std"])
    except ValueError as err:
        raise UsageError(str(err)) from None
    train_seq, test_seq = gen_dataset(spec, module_rng(args.seed, "data"), cfg["duration_factor"])
    train_seq = corrupt(train_seq, missing, args.seed, "missing-train")
    test_seq = corrupt(test_seq, missing, args.seed, "missing-test")

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train_seq, out / "train.csv")
    save_csv(test_seq, out / "test.csv")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": args.seed,
        "config": cfg,
        "missing": missing or "none",
        "frequencies": spec.frequencies.tolist(),
        "weights": spec.weights.tolist(),
        "transition": spec.transition.tolist(),
        "files": {"train": "train.csv", "test": "test.csv"},
    }
    write_json(manifest, str(out / "manifest.json"))
    log.info("wrote %d train and %d test segments to %s", len(train_seq), len(test_seq), out)
    return 0


def cmd_train(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    settings = train_settings(read_config(args.config, args.set))
    if args.impute:
        settings.impute = args.impute
    seq = load_csv(args.dataset)
    seq = corrupt(seq, missing_option(args.missing), args.seed, "missing-train")
    out = Path(args.out or "model.json")
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")

    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        writer.writeheader()

        def on_row(row: dict) -> None:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})
            fh.flush()

        try:
            trained = train(seq, args.method, settings, args.seed, callback=on_row)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as err:
            print(f"training failed: {err}; diagnostics so far in {trace_path}", file=sys.stderr)
            return 1
    trained.save(out)
    log.info("trained %s in %.2fs; model %s, diagnostics %s", args.method, trained.train_seconds, out, trace_path)
    return 0


def cmd_evaluate(args) -> int:
    trained = TrainedModel.load(args.model)
    test = load_csv(args.dataset)
    result = evaluate(trained, test, missing=missing_option(args.missing),
                      impute=args.impute or "nfo", seed=args.seed, emission=args.emission)
    write_json(result, args.out)
    return 0


def _bench_model(rng, n_states: int, n_components: int) -> EmissionModel:
    kernels = tuple(
        SmKernelParams.from_natural(rng.uniform(0.2, 1.0, n_components), rng.uniform(0.5, 20.0, n_components),
                                    rng.uniform(0.2, 1.0, n_components))
        for _ in range(n_states)
    )
    return EmissionModel(kernels, float(np.log(0.1)))


def _best_of(fn, repeats: int) -> tuple[float, float]:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), float(np.min(times))


def benchmark_cell(mode: str, n: int, m: int, L: int, T: int, n_states: int, n_components: int,
                   batch_count: int, mc_reps: int, repeats: int, rng: np.random.Generator) -> dict:
    """Time one iteration's emission work and one full training iteration.

    Exact mode is a VBEM iteration over all T segments; sparse mode is an
    RSS-SVI iteration over ``batch_count`` windows of L segments with m
    spectral points per state.
    """
    model = _bench_model(rng, n_states, n_components)
    x = np.arange(n) / n
    segments = [(x, rng.standard_normal(n)) for _ in range(T)]
    priors = DirichletPriors.symmetric(n_states)
    if mode == "exact":
        def emission():
            emission_loglik_grid(segments, model, "exact", with_grad=True)

        def iteration():
            vbem_fit(segments, model, priors, max_iters=1)
    else:
        window = min(L, T)
        counts = [default_counts(n_components, m)] * n_states
        noise = [rng.standard_normal((mc_reps, m)) for _ in range(n_states)]
        batch = [segments[i] for i in range(window)]
        cfg = SviConfig(batch_len=window, batch_count=batch_count, mc_reps=mc_reps,
                        spectral_points=max(m // n_components, 1), iterations=1, accuracy_every=0)

        def emission():
            for _ in range(batch_count):
                emission_loglik_grid(batch, model, "sparse", noise=noise, counts=counts,
                                     priors=model.kernels, with_grad=True)

        def iteration():
            svi_fit(segments, model, priors, cfg, spectral_priors=model.kernels, rng=np.random.default_rng(0))
    med, low = _best_of(emission, repeats)
    it_med, _ = _best_of(iteration, 1)
    return {"mode": mode, "n": n, "m": m, "L": L, "T": T, "n_states": n_states, "n_components": n_components,
            "emission_seconds": med, "emission_seconds_min": low, "iteration_seconds": it_med}


def cmd_benchmark(args) -> int:
    cfg = typed_config(read_config(args.config, args.set), BENCHMARK_DEFAULTS)
    grid = {k: parse_grid(cfg[k], k) for k in ("n", "m", "L", "T")}
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be at least 1")
    modes = [args.mode] if args.mode else ["sparse", "exact"]
    rng = module_rng(args.seed, "benchmark")
    out = Path(args.out or "benchmark.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for mode in modes:
            for n in grid["n"]:
                for m in grid["m"]:
                    for L in grid["L"]:
                        for T in grid["T"]:
                            row = benchmark_cell(mode, n, m, L, T, cfg["n_states"], cfg["n_components"],
                                                 cfg["batch_count"], cfg["mc_reps"], cfg["repeats"], rng)
                            writer.writerow(row)
                            fh.flush()
                            log.info("%s n=%d m=%d L=%d T=%d: %.4fs", mode, n, m, L, T, row["emission_seconds"])
    return 0


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hmm-gpsm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="write synthetic train/test CSVs")
    gen.add_argument("--missing", help="rm25, rm50, im25 or im50")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", parents=[common], help="fit a model to a dataset CSV")
    tr.add_argument("dataset")
    tr.add_argument("--method", required=True, help=" | ".join(METHODS))
    tr.add_argument("--missing", help="corrupt the training data first")
    tr.add_argument("--impute", choices=("fo", "nfo"))
    tr.add_argument("--trace", help="diagnostics CSV path (default: next to the model)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", parents=[common], help="label a test CSV with a trained model")
    ev.add_argument("model")
    ev.add_argument("dataset")
    ev.add_argument("--missing", help="rm25, rm50, im25 or im50")
    ev.add_argument("--impute", choices=("fo", "nfo"))
    ev.add_argument("--emission", choices=("exact", "sparse"), default="exact")
    ev.set_defaults(func=cmd_evaluate)

    bm = sub.add_parser("benchmark", parents=[common], help="time exact vs sparse emissions")
    bm.add_argument("--mode", choices=("exact", "sparse"))
    bm.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as err:
        parser.error(str(err))
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
