//! Dataset manifests, raster loading and the synthetic glyph corpus.

pub mod manifest;
pub mod raster;
pub mod synth;

pub use manifest::{Category, DatasetManifest, ManifestEntry, Split, MANIFEST_VERSION};
pub use raster::{decode_raster, load_raster, raster_from_file, read_raster, resize_bilinear, Grid, GridDtype};
pub use synth::{canned_corpus, generate_synthetic, GlyphFamily, RasterFormat, Shape, SyntheticSpec};
