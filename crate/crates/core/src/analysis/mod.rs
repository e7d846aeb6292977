//! Image quality metrics, velocity-similarity traces, reuse error-order
//! verification and benchmarking.

mod benchmark;
mod bounds;
mod metrics;

pub use benchmark::{benchmark, BenchRow, BenchTask, Method};
pub use bounds::{
    block_reuse_deviation, block_reuse_scaling, fit_loglog, global_reuse_error, lipschitz_probe,
    local_reuse_error, BlockScalingReport, ErrorScalingReport, ExpansivenessProbe, LipschitzBudget,
    ProbeRegion, Reference, StateMap, NOISE_FLOOR,
};
pub use metrics::{cosine_series, psnr, ssim, SimilaritySeries, PSNR_CAP};
