//! Tabular and image encoders, projection/mask/prediction heads, and
//! analytic model statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{
    join, Conv2d, Dense, Forward, InitScheme, ParamSpec, ResidualBlock, BLOCK_KERNEL,
};
use crate::scalar::Scalar;

pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabularConfig {
    pub input_len: usize,
    pub stem_channels: usize,
    pub stem_len: usize,
    pub n_blocks: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            input_len: 12,
            stem_channels: 32,
            stem_len: 16,
            n_blocks: 4,
            cbam_reduction: 4,
            cbam_kernel: 7,
        }
    }
}

impl TabularConfig {
    /// `(cin, cout, stride)` of every residual block. Odd-indexed blocks
    /// double the channels and halve the length.
    pub fn block_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut c = self.stem_channels;
        (0..self.n_blocks)
            .map(|i| {
                let (cout, stride) = if i % 2 == 1 { (c * 2, 2) } else { (c, 1) };
                let plan = (c, cout, stride);
                c = cout;
                plan
            })
            .collect()
    }

    /// Encoder output width `D` (the final channel count).
    pub fn feature_dim(&self) -> usize {
        self.block_plan()
            .last()
            .map_or(self.stem_channels, |&(_, cout, _)| cout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 {
            return Err(Error::Config("tabular input_len must be >= 1".into()));
        }
        if !(1..=8).contains(&self.n_blocks) {
            return Err(Error::Config(format!(
                "n_blocks must be in 1..=8, got {}",
                self.n_blocks
            )));
        }
        if self.stem_channels == 0 || self.stem_len == 0 {
            return Err(Error::Config("stem dimensions must be positive".into()));
        }
        if self.cbam_reduction == 0 || self.stem_channels % self.cbam_reduction != 0 {
            return Err(Error::Config(format!(
                "stem_channels {} not divisible by cbam_reduction {}",
                self.stem_channels, self.cbam_reduction
            )));
        }
        if self.cbam_kernel % 2 == 0 {
            return Err(Error::Config("cbam_kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Mlp,
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub kind: ImageKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub feature_dim: usize,
    /// Hidden width of the `mlp` encoder.
    pub hidden: usize,
    /// Channel widths of the two `small_cnn` stages.
    pub cnn_channels: [usize; 2],
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            kind: ImageKind::Mlp,
            height: 32,
            width: 32,
            channels: 1,
            feature_dim: 128,
            hidden: 512,
            cnn_channels: [16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub tabular: TabularConfig,
    pub image: ImageConfig,
    pub projection_dim: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tabular: TabularConfig::default(),
            image: ImageConfig::default(),
            projection_dim: 128,
            temperature: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.tabular.validate()?;
        if self.projection_dim < 2 {
            return Err(Error::Config("projection_dim must be >= 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        let img = &self.image;
        if img.height == 0 || img.width == 0 || img.channels == 0 || img.feature_dim == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression { dim: usize },
    Classification { classes: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Regression { dim } => dim,
            Task::Classification { classes } => classes,
        }
    }
}

// --- tabular encoder -----------------------------------------------------

/// Dense stem to a `[C0, S0]` pseudo-sequence, a stack of residual CBAM
/// blocks, then global average pooling over length.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEncoder {
    pub cfg: TabularConfig,
    pub stem: Dense,
    pub blocks: Vec<ResidualBlock>,
}

impl TabularEncoder {
    pub fn new(cfg: &TabularConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Dense::new("tab.stem", cfg.input_len, cfg.stem_channels * cfg.stem_len);
        let blocks = cfg
            .block_plan()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, stride))| {
                ResidualBlock::new(
                    format!("tab.blocks.{i}"),
                    cin,
                    cout,
                    stride,
                    cfg.cbam_reduction,
                    cfg.cbam_kernel,
                )
            })
            .collect::<Result<_>>()?;
        Ok(TabularEncoder {
            cfg: cfg.clone(),
            stem,
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.stem.specs();
        for b in &self.blocks {
            s.extend(b.specs());
        }
        s
    }

    /// `x: [batch, L]` to features `[batch, D]`.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.cfg.input_len {
            return Err(Error::shape(
                "tabular_encode",
                format!("expected [batch, {}], got {shape:?}", self.cfg.input_len),
            ));
        }
        let b = shape[0];
        let mut h = self
            .stem
            .forward(f, x)?
            .reshape(&[b, self.cfg.stem_channels, self.cfg.stem_len])?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        h.mean(2)
    }
}

// --- image encoder -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ImageEncoder {
    /// flatten -> dense(hidden) -> relu -> dense(D_i)
    Mlp { cfg: ImageConfig, fc1: Dense, fc2: Dense },
    /// two stride-2 conv+relu stages -> global average pool -> dense(D_i)
    SmallCnn {
        cfg: ImageConfig,
        conv1: Conv2d,
        conv2: Conv2d,
        fc: Dense,
    },
}

impl ImageEncoder {
    pub fn new(cfg: &ImageConfig) -> Self {
        match cfg.kind {
            ImageKind::Mlp => ImageEncoder::Mlp {
                cfg: cfg.clone(),
                fc1: Dense::new("img.fc1", cfg.height * cfg.width * cfg.channels, cfg.hidden),
                fc2: Dense::new("img.fc2", cfg.hidden, cfg.feature_dim),
            },
            ImageKind::SmallCnn => {
                let [c1, c2] = cfg.cnn_channels;
                ImageEncoder::SmallCnn {
                    cfg: cfg.clone(),
                    conv1: Conv2d::new("img.conv1", cfg.channels, c1, 3, 2, 1),
                    conv2: Conv2d::new("img.conv2", c1, c2, 3, 2, 1),
                    fc: Dense::new("img.fc", c2, cfg.feature_dim),
                }
            }
        }
    }

    pub fn cfg(&self) -> &ImageConfig {
        match self {
            ImageEncoder::Mlp { cfg, .. } | ImageEncoder::SmallCnn { cfg, .. } => cfg,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        match self {
            ImageEncoder::Mlp { fc1, fc2, .. } => [fc1.specs(), fc2.specs()].concat(),
            ImageEncoder::SmallCnn { conv1, conv2, fc, .. } => {
                [conv1.specs(), conv2.specs(), fc.specs()].concat()
            }
        }
    }

    /// `x: [batch, H, W, C]` with pixels in `[0, 1]` to `[batch, D_i]`.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = self.cfg();
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [cfg.height, cfg.width, cfg.channels] {
            return Err(Error::shape(
                "image_encode",
                format!(
                    "expected [batch, {}, {}, {}], got {shape:?}",
                    cfg.height, cfg.width, cfg.channels
                ),
            ));
        }
        let b = shape[0];
        match self {
            ImageEncoder::Mlp { fc1, fc2, .. } => {
                let flat = x.reshape(&[b, cfg.height * cfg.width * cfg.channels])?;
                let h = fc1.forward(f, flat)?.relu()?;
                fc2.forward(f, h)
            }
            ImageEncoder::SmallCnn { conv1, conv2, fc, .. } => {
                let chw = x.transpose(2, 3)?.transpose(1, 2)?;
                let h = conv1.forward(f, chw)?.relu()?;
                let h = conv2.forward(f, h)?.relu()?;
                let s = h.shape();
                let pooled = h.reshape(&[b, s[1], s[2] * s[3]])?.mean(2)?;
                fc.forward(f, pooled)
            }
        }
    }
}

// --- heads ---------------------------------------------------------------

/// dense(D->D) -> relu -> dense(D->P), optionally followed by row-wise
/// l2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ProjectionHead {
    pub fn new(name: &str, input: usize, output: usize) -> Self {
        ProjectionHead {
            fc1: Dense::new(join(name, "fc1"), input, input),
            fc2: Dense::new(join(name, "fc2"), input, output),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        [self.fc1.specs(), self.fc2.specs()].concat()
    }

    pub fn forward_raw<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(f, v)?.relu()?;
        self.fc2.forward(f, h)
    }

    /// Unit-norm rows `[batch, P]`.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_raw(f, v)?.l2_normalize(1, NORMALIZE_EPS)
    }
}

/// Mask estimator `s_m`: dense(D->L) -> sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEstimator {
    pub fc: Dense,
}

impl MaskEstimator {
    pub fn new(feature_dim: usize, input_len: usize) -> Self {
        MaskEstimator {
            fc: Dense::new("mask_head", feature_dim, input_len),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.fc.specs()
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc.forward(f, z)?.sigmoid()
    }
}

/// Linear read-out used both as the downstream predictor (`head`) and the
/// feature-reconstruction pretext head (`recon_head`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub task: Task,
    pub fc: Dense,
}

impl PredictorHead {
    pub fn new(name: &str, feature_dim: usize, task: Task) -> Self {
        PredictorHead {
            task,
            fc: Dense::new(name, feature_dim, task.output_dim()),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.fc.specs()
    }

    /// Regression outputs or classification logits.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc.forward(f, v)
    }
}

// --- assembled models ----------------------------------------------------

/// Everything trained during pre-training. Only `tab.*` survives into the
/// downstream model.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub cfg: EncoderConfig,
    pub tab: TabularEncoder,
    pub img: ImageEncoder,
    pub proj_t: ProjectionHead,
    pub proj_i: ProjectionHead,
    pub mask_head: MaskEstimator,
    pub recon_head: PredictorHead,
    pub simsiam_pred: ProjectionHead,
}

pub const UNCERTAINTY_PARAMS: [&str; 2] = ["mt.s_c", "mt.s_m"];
pub const CLIP_TEMPERATURE_PARAM: &str = "clip.t";

impl PretrainModel {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let tab = TabularEncoder::new(&cfg.tabular)?;
        let d = tab.feature_dim();
        let p = cfg.projection_dim;
        Ok(PretrainModel {
            img: ImageEncoder::new(&cfg.image),
            proj_t: ProjectionHead::new("proj_t", d, p),
            proj_i: ProjectionHead::new("proj_i", cfg.image.feature_dim, p),
            mask_head: MaskEstimator::new(d, cfg.tabular.input_len),
            recon_head: PredictorHead::new(
                "recon_head",
                d,
                Task::Regression {
                    dim: cfg.tabular.input_len,
                },
            ),
            simsiam_pred: ProjectionHead::new("simsiam_pred", p, p),
            tab,
            cfg: cfg.clone(),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.tab.specs();
        s.extend(self.img.specs());
        s.extend(self.proj_t.specs());
        s.extend(self.proj_i.specs());
        s.extend(self.mask_head.specs());
        s.extend(self.recon_head.specs());
        s.extend(self.simsiam_pred.specs());
        for name in UNCERTAINTY_PARAMS {
            s.push(ParamSpec::new(name.into(), vec![], InitScheme::Zeros, 1));
        }
        s.push(ParamSpec::new(
            CLIP_TEMPERATURE_PARAM.into(),
            vec![],
            InitScheme::Constant((1.0 / self.cfg.temperature).ln()),
            1,
        ));
        s
    }
}

/// Tabular encoder plus a task head: the model used after pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    pub cfg: TabularConfig,
    pub tab: TabularEncoder,
    pub head: PredictorHead,
}

impl DownstreamModel {
    pub fn new(cfg: &TabularConfig, task: Task) -> Result<Self> {
        let tab = TabularEncoder::new(cfg)?;
        let head = PredictorHead::new("head", tab.feature_dim(), task);
        Ok(DownstreamModel {
            cfg: cfg.clone(),
            tab,
            head,
        })
    }

    pub fn task(&self) -> Task {
        self.head.task
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        [self.tab.specs(), self.head.specs()].concat()
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.tab.forward(f, x)?;
        self.head.forward(f, v)
    }
}

// --- statistics ----------------------------------------------------------

/// Trainable parameter count and per-sample forward FLOPs (a multiply-add
/// counts as two). Only dense and convolution layers contribute FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ModelStats {
    pub param_count: usize,
    pub flops_per_forward: usize,
}

impl std::ops::Add for ModelStats {
    type Output = ModelStats;

    fn add(self, o: ModelStats) -> ModelStats {
        ModelStats {
            param_count: self.param_count + o.param_count,
            flops_per_forward: self.flops_per_forward + o.flops_per_forward,
        }
    }
}

impl ModelStats {
    pub fn dense(input: usize, output: usize) -> Self {
        ModelStats {
            param_count: input * output + output,
            flops_per_forward: 2 * input * output,
        }
    }

    pub fn conv1d(cin: usize, cout: usize, k: usize, out_len: usize) -> Self {
        ModelStats {
            param_count: cin * cout * k + cout,
            flops_per_forward: 2 * cin * cout * k * out_len,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        ModelStats {
            param_count: 2 * channels,
            flops_per_forward: 0,
        }
    }

    /// CBAM over `channels x len`: the shared MLP runs on both pooled
    /// descriptors, the spatial conv maps 2 pooled maps to 1.
    pub fn cbam(channels: usize, reduction: usize, kernel: usize, len: usize) -> Self {
        let hidden = channels / reduction;
        let mlp = Self::dense(channels, hidden) + Self::dense(hidden, channels);
        ModelStats {
            param_count: mlp.param_count,
            flops_per_forward: 2 * mlp.flops_per_forward,
        } + Self::conv1d(2, 1, kernel, len)
    }
}

fn strided_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Analytic statistics of the tabular encoder alone.
pub fn tabular_stats(cfg: &TabularConfig) -> ModelStats {
    let mut total = ModelStats::dense(cfg.input_len, cfg.stem_channels * cfg.stem_len);
    let mut len = cfg.stem_len;
    for (cin, cout, stride) in cfg.block_plan() {
        let out = strided_len(len, stride);
        total = total
            + ModelStats::conv1d(cin, cout, BLOCK_KERNEL, out)
            + ModelStats::batchnorm(cout)
            + ModelStats::conv1d(cout, cout, BLOCK_KERNEL, out)
            + ModelStats::batchnorm(cout)
            + ModelStats::cbam(cout, cfg.cbam_reduction, cfg.cbam_kernel, out);
        if cin != cout || stride != 1 {
            total = total + ModelStats::conv1d(cin, cout, 1, out);
        }
        len = out;
    }
    total
}

/// Statistics of the deployed downstream model: tabular encoder plus task head.
pub fn model_stats(cfg: &TabularConfig, task: Task) -> ModelStats {
    tabular_stats(cfg) + ModelStats::dense(cfg.feature_dim(), task.output_dim())
}

/// Trainable scalars actually registered by a layer description.
pub fn registered_count(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.trainable)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}
