//! Tabular/image ingestion, preprocessing, splits and synthetic data.

pub mod access;
pub mod dataset;
pub mod image;
pub mod schema;
pub mod split;
pub mod synth;
pub mod table;

pub use access::{Access, AccessLog, Field, Phase};
pub use dataset::{DataConfig, PairedDataset, Targets};
pub use image::{crop, load_image_pgm, write_image_pgm, CropMode, Image};
pub use schema::{ColumnKind, TableSchema};
pub use split::{split, SplitSpec, SplitTag};
pub use synth::{generate_synthetic, SynthConfig};
pub use table::{encode_standardize, load_tabular, Imputer, RawTable, Standardizer};
