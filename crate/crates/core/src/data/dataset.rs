//! The preprocessed paired dataset consumed by training.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::access::{AccessLog, Field, Phase};
use super::image::{crop, load_image_pgm, CropMode, Image};
use super::schema::TableSchema;
use super::split::{indices, split, subsample_train, SplitSpec, SplitTag};
use super::table::{encode_standardize, load_tabular, EncodedTargets, Imputer, RawColumn, Standardizer};
use crate::encoders::Task;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub mode: CropMode,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub schema: PathBuf,
    pub split: SplitSpec,
    pub split_seed: u64,
    /// Fraction of the training split kept, for low-data runs.
    pub train_fraction: f64,
    pub crop: Option<CropConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: PathBuf::from("data/data.csv"),
            schema: PathBuf::from("data/schema_regression.txt"),
            split: SplitSpec::default(),
            split_seed: 0,
            train_fraction: 1.0,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Standardized `[n][T]`.
    Regression { y: Vec<Vec<f64>>, stats: Standardizer },
    Classes { y: Vec<usize>, names: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub schema: TableSchema,
    pub tags: Vec<SplitTag>,
    pub imputer: Imputer,
    pub feature_stats: Standardizer,
    x: Vec<Vec<f64>>,
    targets: Targets,
    images: Option<Vec<PathBuf>>,
    crop: Option<CropConfig>,
    log: Option<Arc<AccessLog>>,
}

impl PairedDataset {
    /// Loads, splits, imputes and standardizes. Every fitted statistic
    /// comes from the training rows.
    pub fn build(cfg: &DataConfig, log: Option<Arc<AccessLog>>) -> Result<Self> {
        let schema = TableSchema::from_file(&cfg.schema)?;
        let table = load_tabular(&cfg.csv, &schema)?;
        let mut tags = split(table.n_rows, cfg.split, cfg.split_seed)?;
        if cfg.train_fraction < 1.0 {
            subsample_train(&mut tags, cfg.train_fraction, cfg.split_seed)?;
        }
        let train = indices(&tags, SplitTag::Train);
        let lg = log.as_deref();
        let prev = lg.map(AccessLog::phase);
        if let Some(l) = lg {
            l.set_phase(Phase::FitStats);
        }
        let imputer = Imputer::fit(&table, &train, lg)?;
        let imputed = imputer.apply(&table)?;
        let enc = encode_standardize(&imputed, &train, lg)?;
        if let (Some(l), Some(p)) = (lg, prev) {
            l.set_phase(p);
        }
        let root = cfg.csv.parent().map(Path::to_path_buf).unwrap_or_default();
        let images = schema.image_column().map(|c| {
            let Some(RawColumn::Text(paths)) = table.column(&c.name) else {
                unreachable!("image column stored as text")
            };
            paths.iter().map(|p| root.join(p)).collect()
        });
        let targets = match enc.targets {
            EncodedTargets::Regression { y, stats } => Targets::Regression { y, stats },
            EncodedTargets::Classes { y, names } => Targets::Classes { y, names },
        };
        Ok(PairedDataset {
            schema,
            tags,
            imputer,
            feature_stats: enc.features,
            x: enc.x,
            targets,
            images,
            crop: cfg.crop,
            log,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.feature_stats.mean.len()
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        indices(&self.tags, tag)
    }

    /// Rows used for model selection and for final reporting. Without a
    /// test split (k-fold) the validation fold serves both.
    pub fn eval_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let val = self.indices(SplitTag::Val);
        let test = self.indices(SplitTag::Test);
        if test.is_empty() {
            (val.clone(), val)
        } else {
            (val, test)
        }
    }

    pub fn log(&self) -> Option<&Arc<AccessLog>> {
        self.log.as_ref()
    }

    fn record(&self, field: Field, row: usize) {
        if let Some(l) = &self.log {
            l.record(field, row);
        }
    }

    pub fn task(&self) -> Task {
        match &self.targets {
            Targets::Regression { stats, .. } => Task::Regression { dim: stats.mean.len() },
            Targets::Classes { names, .. } => Task::Classification { classes: names.len() },
        }
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Standardized feature row.
    pub fn features(&self, i: usize) -> &[f64] {
        self.record(Field::Features, i);
        &self.x[i]
    }

    /// Standardized regression target row.
    pub fn regression_target(&self, i: usize) -> Result<&[f64]> {
        self.record(Field::Target, i);
        match &self.targets {
            Targets::Regression { y, .. } => Ok(&y[i]),
            Targets::Classes { .. } => Err(Error::Invalid("dataset has class targets".into())),
        }
    }

    pub fn class(&self, i: usize) -> Result<usize> {
        self.record(Field::Target, i);
        match &self.targets {
            Targets::Classes { y, .. } => Ok(y[i]),
            Targets::Regression { .. } => Err(Error::Invalid("dataset has regression targets".into())),
        }
    }

    pub fn has_images(&self) -> bool {
        self.images.is_some()
    }

    /// Loads image `i` from disk and applies the configured crop. Random
    /// crops draw from `rng`; without one they fall back to center crops.
    pub fn image(&self, i: usize, rng: Option<&mut dyn rand::RngCore>) -> Result<Image> {
        let paths = self
            .images
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no image column".into()))?;
        self.record(Field::Image, i);
        let img = load_image_pgm(&paths[i])?;
        match (self.crop, rng) {
            (None, _) => Ok(img),
            (Some(c), Some(mut rng)) => crop(&img, c.mode, (c.height, c.width), &mut rng),
            (Some(c), None) => {
                let mut unused = rand::rngs::mock::StepRng::new(0, 0);
                crop(&img, CropMode::Center, (c.height, c.width), &mut unused)
            }
        }
    }

    /// Same rows, split and preprocessed inputs, so pre-training on either
    /// dataset sees identical data.
    pub fn shares_inputs(&self, other: &PairedDataset) -> bool {
        self.tags == other.tags && self.x == other.x && self.images == other.images && self.crop == other.crop
    }

    pub fn image_path(&self, i: usize) -> Option<&Path> {
        self.images.as_ref().map(|p| p[i].as_path())
    }
}
