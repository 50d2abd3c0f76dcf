//! Image I/O, datasets, synthetic low-light data and reference metrics.

mod dataset;
mod metrics;
mod png;
mod synth;

pub use dataset::{read_split, write_split, Dataset, ImageRecord, SplitDataset};
pub use metrics::{psnr, ssim, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use png::{load_png, save_png};
pub use synth::{clean_scene, synth_lowlight, synthetic_dataset, write_synthetic, SynthParams};
