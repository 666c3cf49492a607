"""Joint image and multiplicative-field reconstruction for undersampled data.

The package alternates projections onto three constraint sets — a learned
patch prior on the image magnitude, optional phase smoothness, and data
consistency under a masked Fourier encoding — while a histogram-sharpening
estimator tracks the smooth multiplicative intensity field, so the image
and the field are recovered jointly rather than the field being baked into
the image.

Submodules load lazily so the command-line entry point can pin the numeric
backends' thread count before anything imports numpy.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "numerics", "encoding", "io", "prior", "bias",
    "solver", "simulate", "evaluate", "cli",
)

_EXPORTS = {
    # numerics
    "derive_seed": "numerics",
    "fft2_unitary": "numerics",
    "ifft2_unitary": "numerics",
    "lowpass_gaussian": "numerics",
    "Histogram": "numerics",
    "histogram": "numerics",
    "BSplineFitter": "numerics",
    "bspline_smooth": "numerics",
    # encoding
    "SamplingMask": "encoding",
    "center_rows": "encoding",
    "make_mask": "encoding",
    "CoilSensitivities": "encoding",
    "simulate_coils": "encoding",
    "KSpaceData": "encoding",
    "apply_E": "encoding",
    "apply_EH": "encoding",
    # io
    "write_array": "io",
    "read_array": "io",
    "write_json": "io",
    "read_json": "io",
    "write_png": "io",
    # prior
    "PatchVAEParams": "prior",
    "TrainConfig": "prior",
    "PatchGrid": "prior",
    "init_params": "prior",
    "elbo": "prior",
    "elbo_terms": "prior",
    "elbo_grad_input": "prior",
    "train_vae": "prior",
    "make_patch_grid": "prior",
    "extract_patches": "prior",
    "assemble_patches": "prior",
    "p_prior": "prior",
    "save_params": "prior",
    "load_params": "prior",
    # bias
    "BiasField": "bias",
    "N4Config": "bias",
    "IntensityMapping": "bias",
    "sharpen_histogram": "bias",
    "estimate_bias": "bias",
    "normalize_field": "bias",
    # solver
    "SolverConfig": "solver",
    "ReconResult": "solver",
    "p_dc": "solver",
    "p_dc_bias": "solver",
    "p_phase": "solver",
    "dc_residual": "solver",
    "reconstruct": "solver",
    "save_result": "solver",
    "load_result": "solver",
    # simulate
    "PhantomSpec": "simulate",
    "BiasSynthConfig": "simulate",
    "NoiseConfig": "simulate",
    "make_phantom": "simulate",
    "synth_bias": "simulate",
    "reciprocal_field": "simulate",
    "simulate_acquisition": "simulate",
    "make_dataset": "simulate",
    "read_manifest": "simulate",
    "read_sample": "simulate",
    "read_sample_dir": "simulate",
    # evaluate
    "rmse_percent": "evaluate",
    "permutation_test": "evaluate",
    "EvalReport": "evaluate",
    "make_report": "evaluate",
    "write_report_json": "evaluate",
    "write_table_csv": "evaluate",
}

__all__ = ["__version__", *_SUBMODULES, *_EXPORTS]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
