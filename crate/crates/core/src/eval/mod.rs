//! Synthetic data, image IO, Fréchet-lite and the symmetry probe.

mod datasets;
mod frechet;
mod image_io;

pub use datasets::{
    make_synthetic_dataset, mean_symmetry_score, paired_dots_offset, symmetry_score, DatasetKind,
    SyntheticDatasetSpec,
};
pub use frechet::{
    cross_term, embed_and_stats, frechet_distance, frechet_embedder, frechet_lite, sqrt_psd,
    DistributionStats, FRECHET_DIM, FRECHET_SEED,
};
pub use image_io::{
    crop_and_resize, decode_any, decode_png, decode_ppm, encode_png, encode_ppm, from_byte,
    image_grid, load_image_folder, read_image, to_byte, write_image,
};
