//! Hyperspectral cubes: the on-disk format, band filtering, normalization,
//! neighbor-block extraction, stratified splits and a synthetic generator.

mod cube;
mod patches;
mod synth;

pub use cube::{load_cube, save_cube, HsiCube, Normalization, CUBE_MAGIC};
pub use patches::{pad_and_extract, stratified_split, Patch, PatchDataset, Split, SplitRatios};
pub use synth::{nearest_prototype_accuracy, synthesize_dataset, SynthParams, Synthetic};
