//! Procedural scenes, synthetic rain, PNG and manifest I/O, and luma
//! histogram analysis.

mod hist;
mod image;
mod io;
mod rain;
mod synth;


pub use hist::{down_up, down_up_correlation, hist_correlation, y_histogram, BT601};
pub use image::{stack, Image};
pub use io::{crop_patches, load_dataset, load_png, quantize, read_manifest, save_png, write_dataset, ManifestEntry, MANIFEST};
pub use rain::{add_rain, rain_layer, RainParams, SamplePair};
pub use synth::{synth_clean, CleanKind, SYNTH_MULTIPLE};
