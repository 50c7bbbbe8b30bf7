"""Dual-view 3D deconvolution and fusion toolkit."""

from ._dualcycle import (  # noqa: F401
    ConfigError,
    PhantomSpec,
    PSF,
    SsimWindow,
    ViewPair,
    Volume3D,
    VolumeError,
    convolve3d,
    extract_slice,
    fuse_average,
    gaussian_psf,
    generate_phantom,
    joint_richardson_lucy,
    load_volume,
    max_intensity_projection,
    preprocess_volume,
    psnr,
    resample_isotropic,
    run_experiment,
    save_volume,
    simulate_views,
    ssim,
)

__all__ = [
    "ConfigError",
    "PhantomSpec",
    "PSF",
    "SsimWindow",
    "ViewPair",
    "Volume3D",
    "VolumeError",
    "convolve3d",
    "extract_slice",
    "fuse_average",
    "gaussian_psf",
    "generate_phantom",
    "joint_richardson_lucy",
    "load_volume",
    "max_intensity_projection",
    "preprocess_volume",
    "psnr",
    "resample_isotropic",
    "run_experiment",
    "save_volume",
    "simulate_views",
    "ssim",
]
