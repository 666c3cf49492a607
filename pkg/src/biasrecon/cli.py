"""Command-line pipeline: simulate | train-prior | reconstruct | evaluate | export-png.

Every command reads a strict JSON run configuration (unknown keys are
rejected, seeds must be explicit), and given identical inputs and seeds
produces byte-identical outputs. Thread count is taken from --threads or
the BRC_THREADS environment variable and applied to the numeric backends
before they load, which is why the heavy imports happen inside the
command handlers.

Exit codes: 0 success; 1 invalid configuration or missing inputs;
2 solver divergence (partial outputs are still written when possible).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

__all__ = ["main", "load_run_config"]

_SECTION_KEYS: dict[str, set[str]] = {
    "simulate": {
        "n_samples", "accelerations", "height", "width", "n_coils",
        "n_tissues", "bias_amplitude", "bias_length_scale", "noise_sigma",
        "phase_amplitude", "n_center_rows", "reciprocal_bias",
        "bias_base_seed", "bias_base_weight", "seed",
    },
    "train_prior": {
        "n_iterations", "batch_size", "learning_rate", "patch_size",
        "latent_dim", "hidden_width", "likelihood_sigma", "n_mc", "bias",
        "seed",
    },
    "solver": {
        "num_iter", "mode", "bias_estim_freq", "dc_proj_freq", "alpha",
        "prior_steps", "phase_projection", "phase_sigma",
        "dc_warmup_iters", "seed",
    },
    "n4": {
        "n_bins", "fwhm", "wiener_noise", "control_spacing",
        "convergence_threshold", "max_iterations", "n_fitting_levels",
    },
    "evaluate": {"n_permutations", "seed"},
}
_SEEDED_SECTIONS = ("simulate", "train_prior", "solver", "evaluate")

_IMAGE_WINDOW = (0.0, 1.2)
_BIAS_WINDOW = (0.5, 1.8)


class ConfigError(ValueError):
    pass


def load_run_config(path: str | Path) -> dict:
    """Parse and validate the JSON run configuration.

    Only the known sections and keys are accepted, and any section that
    drives randomness must spell out its seed.
    """
    import json

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a JSON object")
        bad = set(body) - _SECTION_KEYS[section]
        if bad:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(bad)}")
        if section in _SEEDED_SECTIONS and "seed" not in body:
            raise ConfigError(f"section {section!r} must state its seed")
    return doc


def _section(config: dict, name: str, seed_override: int | None) -> dict:
    if name not in config:
        raise ConfigError(f"config is missing the {name!r} section")
    body = dict(config[name])
    if seed_override is not None and name in _SEEDED_SECTIONS:
        body["seed"] = seed_override
    return body


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("BRC_THREADS")
        if env is None:
            return
        try:
            threads = int(env)
        except ValueError as exc:
            raise ConfigError(f"BRC_THREADS must be an integer, got {env!r}") from exc
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    for var in (
        "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(threads)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    from . import simulate

    cfg = _section(load_run_config(args.config), "simulate", args.seed)
    cfg["accelerations"] = tuple(cfg.get("accelerations", (2, 3, 4, 5)))
    simulate.make_dataset(args.out, **cfg)
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train_prior(args) -> int:
    import numpy as np

    from . import prior, simulate

    cfg = _section(load_run_config(args.config), "train_prior", args.seed)
    bias_flag = cfg.pop("bias", "off")
    if args.bias is not None:
        bias_flag = args.bias
    if bias_flag not in ("on", "off"):
        raise ConfigError(f"bias flag must be 'on' or 'off', got {bias_flag!r}")

    manifest = simulate.read_manifest(args.dataset)
    images = []
    for i in range(manifest["n_samples"]):
        sample = simulate.read_sample(args.dataset, i)
        mag = np.abs(sample["x"])
        if bias_flag == "on":
            mag = sample["bias"].field * mag
        images.append(mag)

    train_cfg = prior.TrainConfig(**cfg)
    params, trace = prior.train_vae(np.stack(images), train_cfg)
    out = Path(args.out)
    prior.save_params(params, out, extra={"trained_on_biased_images": bias_flag == "on"})
    from . import io

    io.write_array(out / "loss_trace.brc", trace)
    print(f"prior trained on {len(images)} images (bias {bias_flag}); saved to {out}")
    return 0


def _export_result_pngs(result, out: Path) -> None:
    import numpy as np

    from . import io

    io.write_png(out / "x.png", np.abs(result.x), _IMAGE_WINDOW)
    io.write_png(out / "bx.png", np.abs(result.bx), _IMAGE_WINDOW)
    io.write_png(out / "bias.png", result.bias.field, _BIAS_WINDOW)


def _cmd_reconstruct(args) -> int:
    from . import bias as bias_mod
    from . import prior, simulate, solver

    config = load_run_config(args.config)
    solver_cfg = _section(config, "solver", args.seed)
    if args.num_iter is not None:
        solver_cfg["num_iter"] = args.num_iter
    if args.mode is not None:
        solver_cfg["mode"] = args.mode
    n4 = bias_mod.N4Config(**config["n4"]) if "n4" in config else bias_mod.N4Config()

    sample = simulate.read_sample_dir(args.sample, r=args.r)
    params = prior.load_params(args.params)
    cfg = solver.SolverConfig(**solver_cfg)

    out = Path(args.out)
    try:
        result = solver.reconstruct(
            sample["y"], sample["coils"], params, cfg, n4,
            support_mask=sample["brain_mask"],
        )
    except RuntimeError as exc:
        print(f"reconstruction aborted: {exc}", file=sys.stderr)
        return 2
    solver.save_result(result, out, cfg)
    _export_result_pngs(result, out)
    if result.diverged:
        print(
            f"reconstruction diverged at iteration {result.stopped_at}; "
            f"partial outputs in {out}",
            file=sys.stderr,
        )
        return 2
    print(f"reconstruction written to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    import numpy as np

    from . import evaluate, io, simulate

    cfg = _section(load_run_config(args.config), "evaluate", args.seed)
    methods: dict[str, Path] = {}
    for spec_str in args.method:
        if "=" not in spec_str:
            raise ConfigError(f"--method expects NAME=DIR, got {spec_str!r}")
        name, _, root = spec_str.partition("=")
        methods[name] = Path(root)
    if len(methods) < 1:
        raise ConfigError("need at least one --method NAME=DIR")

    manifest = simulate.read_manifest(args.dataset)
    rs = [int(r) for r in (args.r or manifest["accelerations"])]
    reports = {}
    for r in rs:
        per_sample: dict[str, list[float]] = {name: [] for name in methods}
        for i in range(manifest["n_samples"]):
            sample = simulate.read_sample(args.dataset, i)
            reference = sample["bias"].field * sample["x"]
            for name, root in methods.items():
                result_dir = root / f"{sample['name']}_R{r}"
                bx_path = result_dir / "bx.brc"
                if not bx_path.is_file():
                    print(f"missing result {bx_path}", file=sys.stderr)
                    return 1
                bx = io.read_array(bx_path)
                per_sample[name].append(
                    evaluate.rmse_percent(bx, reference, sample["brain_mask"])
                )
        reports[r] = evaluate.make_report(
            {n: np.asarray(v) for n, v in per_sample.items()},
            n_permutations=cfg.get("n_permutations", 10000),
            seed=cfg["seed"],
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_report_json(reports, out / "report.json")
    evaluate.write_table_csv(reports, out / "report.csv")
    print(f"evaluation report written to {out}")
    return 0


def _cmd_export_png(args) -> int:
    import numpy as np

    from . import io

    arr = io.read_array(args.input)
    if np.iscomplexobj(arr):
        arr = np.abs(arr)
    io.write_png(args.output, arr, (args.window[0], args.window[1]))
    print(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biasrecon",
        description="Joint bias-field and image reconstruction pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the section seed")
        p.add_argument("--threads", type=int, default=None,
                       help="numeric backend threads (default: BRC_THREADS or library default)")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("train-prior", help="train the patch prior on a dataset")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="parameter directory to create")
    p.add_argument("--bias", choices=("on", "off"), default=None,
                   help="train on biased (B*x) or bias-free (x) magnitudes")
    p.set_defaults(handler=_cmd_train_prior)

    p = sub.add_parser("reconstruct", help="reconstruct one sample")
    add_common(p)
    p.add_argument("--sample", required=True, help="sample directory")
    p.add_argument("--params", required=True, help="trained prior directory")
    p.add_argument("--r", type=int, required=True, help="acceleration factor")
    p.add_argument("--out", required=True, help="result directory to create")
    p.add_argument("--num-iter", type=int, default=None, help="override solver num_iter")
    p.add_argument("--mode", choices=("baseline", "joint"), default=None,
                   help="override solver mode")
    p.set_defaults(handler=_cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score methods against a dataset")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", action="append", required=True,
                   metavar="NAME=DIR", help="method name and its results root")
    p.add_argument("--r", type=int, action="append", default=None,
                   help="acceleration(s) to score (default: all in the dataset)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("export-png", help="window an array container to PNG")
    add_common(p, needs_config=False)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window", type=float, nargs=2, default=list(_IMAGE_WINDOW),
                   metavar=("LO", "HI"))
    p.set_defaults(handler=_cmd_export_png)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
