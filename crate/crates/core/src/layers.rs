//! Parameterized building blocks of the encoders.
//!
//! A layer is a plain description (names and sizes). Its tensors live in a
//! [`ParamStore`] under `<layer name>.<tensor>`; forward passes read them
//! through a [`Forward`] context that registers trainable tensors on the tape.

use std::cell::RefCell;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass view of the parameters. Train-mode batch norm queues its
/// running-stat updates here; callers collect them with [`Forward::into_updates`].
pub struct Forward<'t, 'p, T: Scalar> {
    pub tape: &'t Tape<T>,
    params: &'p ParamStore<T>,
    pub mode: Mode,
    updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'t, 'p, T: Scalar> Forward<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ParamStore<T>, mode: Mode) -> Self {
        Forward {
            tape,
            params,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Trainable tensors become tape parameters; the rest are constants.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        let p = self
            .params
            .entry(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(if p.trainable {
            self.tape.param(name, p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        })
    }

    pub fn value(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.params.get(name)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    fn queue_update(&self, name: String, value: Tensor<T>) {
        self.updates.borrow_mut().push((name, value));
    }

    /// Queued running-stat updates, to be applied with
    /// [`ParamStore::apply_updates`] once the pass is finished.
    pub fn into_updates(self) -> Vec<(String, Tensor<T>)> {
        self.updates.into_inner()
    }
}

// --- initialization ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    KaimingUniform,
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub scheme: InitScheme,
    pub fan_in: usize,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: String, shape: Vec<usize>, scheme: InitScheme, fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            scheme,
            fan_in,
            trainable: true,
        }
    }

    fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_tensor<T: Scalar>(
    scheme: InitScheme,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape.to_vec()),
        InitScheme::Ones => Tensor::ones(shape.to_vec()),
        InitScheme::Constant(v) => Tensor::full(shape.to_vec(), T::from_f64(v)),
        InitScheme::KaimingUniform => {
            let bound = kaiming_bound(fan_in.max(1));
            let dist = Uniform::new_inclusive(-bound, bound);
            let n = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches count")
        }
    }
}

/// Materializes parameter specs in order from one seeded stream.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in specs {
        let t = init_tensor(s.scheme, &s.shape, s.fan_in, &mut rng);
        store.insert(s.name.clone(), t, s.trainable);
    }
    store
}

/// Replaces every spec's scheme before initialization.
pub fn with_scheme(specs: &[ParamSpec], scheme: InitScheme) -> Vec<ParamSpec> {
    specs
        .iter()
        .map(|s| ParamSpec {
            scheme,
            ..s.clone()
        })
        .collect()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn expect_rank<T: Scalar>(op: &'static str, x: &Var<'_, T>, rank: usize, dim1: Option<usize>) -> Result<Vec<usize>> {
    let shape = x.shape();
    if shape.len() != rank || dim1.is_some_and(|d| shape[1] != d) {
        return Err(Error::shape(
            op,
            format!("got {shape:?}, expected rank {rank} with dim1 {dim1:?}"),
        ));
    }
    Ok(shape)
}

// --- dense ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Dense {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                join(&self.name, "w"),
                vec![self.input, self.output],
                InitScheme::KaimingUniform,
                self.input,
            ),
            ParamSpec::new(join(&self.name, "b"), vec![self.output], InitScheme::Zeros, self.input),
        ]
    }

    /// `x W + b` for `x: [batch, input]`.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        expect_rank("dense", &x, 2, Some(self.input))?;
        let w = f.param(&join(&self.name, "w"))?;
        let b = f.param(&join(&self.name, "b"))?;
        x.matmul(w)?.add(b)
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }

    pub fn flops(&self) -> usize {
        2 * self.input * self.output
    }
}

// --- conv1d --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv1d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let fan_in = self.cin * self.kernel;
        vec![
            ParamSpec::new(
                join(&self.name, "w"),
                vec![self.cout, self.cin, self.kernel],
                InitScheme::KaimingUniform,
                fan_in,
            ),
            ParamSpec::new(join(&self.name, "b"), vec![self.cout], InitScheme::Zeros, fan_in),
        ]
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kernel + self.cout
    }

    pub fn flops(&self, len: usize) -> usize {
        2 * self.cin * self.cout * self.kernel * self.out_len(len)
    }
}

impl Conv1d {
    /// Cross-correlation of `x: [batch, cin, len]`.
    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        expect_rank("conv1d", &x, 3, Some(self.cin))?;
        let w = f.param(&join(&self.name, "w"))?;
        let b = f.param(&join(&self.name, "b"))?;
        x.conv1d(w, Some(b), self.stride, self.pad)
    }
}

/// Square-kernel 2D cross-correlation over `[batch, cin, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let fan_in = self.cin * self.kernel * self.kernel;
        vec![
            ParamSpec::new(
                join(&self.name, "w"),
                vec![self.cout, self.cin, self.kernel, self.kernel],
                InitScheme::KaimingUniform,
                fan_in,
            ),
            ParamSpec::new(join(&self.name, "b"), vec![self.cout], InitScheme::Zeros, fan_in),
        ]
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel + self.cout
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        expect_rank("conv2d", &x, 4, Some(self.cin))?;
        let w = f.param(&join(&self.name, "w"))?;
        let b = f.param(&join(&self.name, "b"))?;
        x.conv2d(w, Some(b), self.stride, self.pad)
    }
}

// --- batch norm ----------------------------------------------------------

/// Per-channel batch normalization over `[batch, channels, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm1d {
            name: name.into(),
            channels,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        vec![
            ParamSpec::new(join(&self.name, "gamma"), vec![c], InitScheme::Ones, c),
            ParamSpec::new(join(&self.name, "beta"), vec![c], InitScheme::Zeros, c),
            ParamSpec::new(join(&self.name, "running_mean"), vec![c], InitScheme::Zeros, c).frozen(),
            ParamSpec::new(join(&self.name, "running_var"), vec![c], InitScheme::Ones, c).frozen(),
        ]
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = expect_rank("batchnorm1d", &x, 3, Some(self.channels))?;
        let (b, c, s) = (shape[0], shape[1], shape[2]);
        let gamma = f.param(&join(&self.name, "gamma"))?;
        let beta = f.param(&join(&self.name, "beta"))?;
        let per_channel = |v: Var<'t, T>| v.reshape(&[1, c, 1])?.expand(&[b, c, s]);
        match f.mode {
            Mode::Eval => {
                let rm = f.param(&join(&self.name, "running_mean"))?;
                let rv = f.param(&join(&self.name, "running_var"))?;
                let scale = gamma.div(rv.add_scalar(BN_EPS)?.sqrt()?)?;
                let shift = beta.sub(rm.mul(scale)?)?;
                x.mul(per_channel(scale)?)?.add(per_channel(shift)?)
            }
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Invalid(format!(
                        "batchnorm1d `{}`: train mode needs batch >= 2, got {b}",
                        self.name
                    )));
                }
                let n = b * s;
                let flat = x.transpose(0, 1)?.reshape(&[c, n])?;
                let mean = flat.mean(1)?;
                let centered = flat.sub(mean.reshape(&[c, 1])?.expand(&[c, n])?)?;
                let var = centered.mul(centered)?.mean(1)?;
                let inv_std = var.add_scalar(BN_EPS)?.powf(-0.5)?;
                let normed = centered.mul(inv_std.reshape(&[c, 1])?.expand(&[c, n])?)?;
                let normed = normed.reshape(&[c, b, s])?.transpose(0, 1)?;
                let y = normed.mul(per_channel(gamma)?)?.add(per_channel(beta)?)?;
                self.queue_running_stats(f, &mean.value(), &var.value(), n)?;
                Ok(y)
            }
        }
    }

    fn queue_running_stats<T: Scalar>(
        &self,
        f: &Forward<'_, '_, T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        n: usize,
    ) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
        let rm_name = join(&self.name, "running_mean");
        let rv_name = join(&self.name, "running_var");
        let rm = f.value(&rm_name)?;
        let rv = f.value(&rv_name)?;
        let new_rm: Vec<T> = rm
            .data()
            .iter()
            .zip(mean.data())
            .map(|(&r, &v)| keep * r + m * v)
            .collect();
        let new_rv: Vec<T> = rv
            .data()
            .iter()
            .zip(var.data())
            .map(|(&r, &v)| keep * r + m * v * unbias)
            .collect();
        f.queue_update(rm_name, Tensor::new(rm.shape().to_vec(), new_rm)?);
        f.queue_update(rv_name, Tensor::new(rv.shape().to_vec(), new_rv)?);
        Ok(())
    }
}

// --- CBAM ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbamConfig {
    pub channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl CbamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Invalid(format!(
                "CBAM channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Invalid(format!(
                "CBAM spatial kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

/// Channel attention followed by spatial attention over 1D feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Cbam1d {
    pub name: String,
    pub cfg: CbamConfig,
    pub fc1: Dense,
    pub fc2: Dense,
    pub spatial: Conv1d,
}

impl Cbam1d {
    pub fn new(name: impl Into<String>, cfg: CbamConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let hidden = cfg.channels / cfg.reduction;
        Ok(Cbam1d {
            fc1: Dense::new(join(&name, "fc1"), cfg.channels, hidden),
            fc2: Dense::new(join(&name, "fc2"), hidden, cfg.channels),
            spatial: Conv1d::new(
                join(&name, "spatial"),
                2,
                1,
                cfg.spatial_kernel,
                1,
                (cfg.spatial_kernel - 1) / 2,
            ),
            name,
            cfg,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.fc1.specs();
        s.extend(self.fc2.specs());
        s.extend(self.spatial.specs());
        s
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.spatial.param_count()
    }

    pub fn flops(&self, len: usize) -> usize {
        // The shared MLP runs on both pooled descriptors.
        2 * (self.fc1.flops() + self.fc2.flops()) + self.spatial.flops(len)
    }

    /// `sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`, shape `[batch, channels]`.
    pub fn channel_attention<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mlp = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let h = self.fc1.forward(f, v)?.relu()?;
            self.fc2.forward(f, h)
        };
        mlp(x.mean(2)?)?.add(mlp(x.max(2)?)?)?.sigmoid()
    }

    /// `sigmoid(conv([avgpool_c(x); maxpool_c(x)]))`, shape `[batch, len]`.
    pub fn spatial_attention<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (b, s) = (shape[0], shape[2]);
        let avg = x.mean(1)?.reshape(&[b, 1, s])?;
        let max = x.max(1)?.reshape(&[b, 1, s])?;
        let pooled = f.tape.concat(&[avg, max], 1)?;
        self.spatial.forward(f, pooled)?.reshape(&[b, s])?.sigmoid()
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        expect_rank("cbam1d", &x, 3, Some(self.cfg.channels))?;
        let mc = self.channel_attention(f, x)?;
        let refined = gate_channels(x, mc)?;
        let ms = self.spatial_attention(f, refined)?;
        gate_positions(refined, ms)
    }
}

/// `x[b, c, s] * m[b, c]`
pub fn gate_channels<'t, T: Scalar>(x: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (b, c) = (shape[0], shape[1]);
    x.mul(m.reshape(&[b, c, 1])?.expand(&shape)?)
}

/// `x[b, c, s] * m[b, s]`
pub fn gate_positions<'t, T: Scalar>(x: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (b, s) = (shape[0], shape[2]);
    x.mul(m.reshape(&[b, 1, s])?.expand(&shape)?)
}

// --- residual block ------------------------------------------------------

/// `relu(CBAM(BN(conv(relu(BN(conv(x)))))) + shortcut(x))`. The shortcut is
/// the identity when shapes are preserved, a strided 1x1 conv otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    pub cbam: Cbam1d,
    pub shortcut: Option<Conv1d>,
}

pub const BLOCK_KERNEL: usize = 3;

impl ResidualBlock {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        stride: usize,
        cbam_reduction: usize,
        cbam_kernel: usize,
    ) -> Result<Self> {
        let name = name.into();
        let shortcut =
            (cin != cout || stride != 1).then(|| Conv1d::new(join(&name, "shortcut"), cin, cout, 1, stride, 0));
        Ok(ResidualBlock {
            conv1: Conv1d::new(join(&name, "conv1"), cin, cout, BLOCK_KERNEL, stride, 1),
            bn1: BatchNorm1d::new(join(&name, "bn1"), cout),
            conv2: Conv1d::new(join(&name, "conv2"), cout, cout, BLOCK_KERNEL, 1, 1),
            bn2: BatchNorm1d::new(join(&name, "bn2"), cout),
            cbam: Cbam1d::new(
                join(&name, "cbam"),
                CbamConfig {
                    channels: cout,
                    reduction: cbam_reduction,
                    spatial_kernel: cbam_kernel,
                },
            )?,
            shortcut,
            name,
            cin,
            cout,
            stride,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.conv1.specs();
        s.extend(self.bn1.specs());
        s.extend(self.conv2.specs());
        s.extend(self.bn2.specs());
        s.extend(self.cbam.specs());
        if let Some(sc) = &self.shortcut {
            s.extend(sc.specs());
        }
        s
    }

    pub fn out_len(&self, len: usize) -> usize {
        self.conv1.out_len(len)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.cbam.param_count()
            + self.shortcut.as_ref().map_or(0, Conv1d::param_count)
    }

    pub fn flops(&self, len: usize) -> usize {
        let out = self.out_len(len);
        self.conv1.flops(len)
            + self.conv2.flops(out)
            + self.cbam.flops(out)
            + self.shortcut.as_ref().map_or(0, |sc| sc.flops(len))
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        expect_rank("residual_block", &x, 3, Some(self.cin))?;
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?.relu()?;
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let h = self.cbam.forward(f, h)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(f, x)?,
            None => x,
        };
        h.add(skip)?.relu()
    }
}
