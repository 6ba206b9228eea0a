#![allow(dead_code)]

use std::path::Path;

use mtcmtm::config::RunConfig;
use mtcmtm::data::{generate_synthetic, PairedDataset, SynthConfig};

/// Synthetic data plus a tiny model config pointing at it.
pub fn tiny_setup(dir: &Path, n: usize, schema: &str) -> (RunConfig, PairedDataset) {
    if !dir.join("data.csv").exists() {
        generate_synthetic(n, 0, &SynthConfig::default(), dir).unwrap();
    }
    let mut cfg = RunConfig::default();
    cfg.data.csv = dir.join("data.csv");
    cfg.data.schema = dir.join(schema);
    cfg.model.tabular.stem_channels = 4;
    cfg.model.tabular.stem_len = 4;
    cfg.model.tabular.n_blocks = 2;
    cfg.model.tabular.cbam_reduction = 2;
    cfg.model.image.hidden = 16;
    cfg.model.image.feature_dim = 8;
    cfg.model.projection_dim = 8;
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 2;
    cfg.optim.batch_size = 32;
    let data = PairedDataset::build(&cfg.data, None).unwrap();
    (cfg, data)
}
