//! Synthetic paired tabular/image data with known generative maps.
//!
//! Twelve inputs: nine numeric (`n0..n8`) and three categorical (`c0`, `c1`,
//! `c2` with 3, 4 and 5 levels). A latent `u` in R^3 is a sparse linear map
//! of `n0..n5`. The image renders `u` (and the level of `c0`) as Gaussian
//! blobs; the four regression targets are quadratic functions of `u`; the
//! class is the sign quadrant of `(u1, u2)`.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::image::{write_image_pgm, Image};
use crate::error::{Error, Result};

pub const N_NUMERIC: usize = 9;
pub const CATEGORY_LEVELS: [usize; 3] = [3, 4, 5];
pub const MISSING_COLUMNS: [usize; 3] = [0, 1, 6];
pub const N_TARGETS: usize = 4;
pub const N_CLASSES: usize = 4;

pub const REGRESSION_SCHEMA: &str = "schema_regression.txt";
pub const CLASSIFICATION_SCHEMA: &str = "schema_classification.txt";
pub const DATA_FILE: &str = "data.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub pixel_noise: f64,
    pub target_noise: f64,
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            pixel_noise: 0.02,
            target_noise: 0.05,
            missing_rate: 0.05,
        }
    }
}

/// One generated sample, before missingness is applied to the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRow {
    pub numeric: [f64; N_NUMERIC],
    pub categorical: [usize; 3],
    pub missing: [bool; N_NUMERIC],
    pub latent: [f64; 3],
    pub targets: [f64; N_TARGETS],
    pub class: usize,
    pub image: Image,
}

/// The fixed latent map.
pub fn latent(numeric: &[f64; N_NUMERIC]) -> [f64; 3] {
    [
        0.8 * numeric[0] + 0.6 * numeric[3],
        0.6 * numeric[1] - 0.8 * numeric[4],
        0.8 * numeric[2] + 0.6 * numeric[5],
    ]
}

/// Noise-free regression targets.
pub fn target_map(u: &[f64; 3]) -> [f64; N_TARGETS] {
    let [u1, u2, u3] = *u;
    [
        u1 * u1 + 0.5 * u2,
        u1 * u2 + 0.3 * u3,
        u3 * u3 - 0.5 * u1 * u3,
        0.5 * u2 * u2 + u3 - 0.3 * u1,
    ]
}

pub fn class_map(u: &[f64; 3]) -> usize {
    2 * usize::from(u[0] > 0.0) + usize::from(u[1] > 0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noise-free rendering of the latent state.
pub fn render(u: &[f64; 3], blobs: usize, size: usize) -> Vec<f64> {
    let [u1, u2, u3] = *u;
    let background = 0.1 + 0.25 * sigmoid(1.5 * u1);
    let amplitude = 0.25 + 0.5 * sigmoid(1.5 * u1);
    let sigma = (1.5 + sigmoid(u3)) * size as f64 / 32.0;
    let ring = (6.0 + 3.0 * u2.tanh()) * size as f64 / 32.0;
    let mid = (size as f64 - 1.0) / 2.0;
    let centres: Vec<(f64, f64)> = (0..blobs)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / blobs as f64 + 0.5 * u3;
            (mid + ring * theta.sin(), mid + ring * theta.cos())
        })
        .collect();
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = centres
                .iter()
                .map(|&(cy, cx)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            px.push(background + v);
        }
    }
    px
}

/// Generates `n` samples in memory.
pub fn generate_rows(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthRow>> {
    if n < 50 {
        return Err(Error::Invalid(format!("synthetic data needs n >= 50, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unit_uniform = Uniform::new(-3f64.sqrt(), 3f64.sqrt());
    let pixel = Normal::new(0.0, cfg.pixel_noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let target = Normal::new(0.0, cfg.target_noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let s = cfg.image_size;
    (0..n)
        .map(|_| {
            let mut numeric = [0.0; N_NUMERIC];
            for (j, v) in numeric.iter_mut().enumerate() {
                *v = match j {
                    3 | 4 | 5 | 7 => unit_uniform.sample(&mut rng),
                    8 => normal.sample(&mut rng) / SQRT_2 + 1.0,
                    _ => normal.sample(&mut rng),
                };
            }
            let categorical = CATEGORY_LEVELS.map(|k| rng.gen_range(0..k));
            let mut missing = [false; N_NUMERIC];
            for j in MISSING_COLUMNS {
                missing[j] = rng.gen::<f64>() < cfg.missing_rate;
            }
            let u = latent(&numeric);
            let mut pixels = render(&u, categorical[0] + 1, s);
            for p in &mut pixels {
                *p = (*p + pixel.sample(&mut rng)).clamp(0.0, 1.0);
            }
            let mut targets = target_map(&u);
            for t in &mut targets {
                *t += target.sample(&mut rng);
            }
            Ok(SynthRow {
                numeric,
                categorical,
                missing,
                latent: u,
                targets,
                class: class_map(&u),
                image: Image::new(s, s, 1, pixels)?,
            })
        })
        .collect()
}

fn category_name(col: usize, level: usize) -> String {
    format!("{}{}", ["a", "b", "c"][col], level)
}

fn input_schema() -> String {
    let mut s = String::new();
    for j in 0..N_NUMERIC {
        s.push_str(&format!("n{j} = numeric\n"));
    }
    for (c, &k) in CATEGORY_LEVELS.iter().enumerate() {
        let cats: Vec<String> = (0..k).map(|l| category_name(c, l)).collect();
        s.push_str(&format!("c{c} = categorical : {}\n", cats.join(", ")));
    }
    s.push_str("image = image_path\n");
    s
}

pub fn regression_schema_text() -> String {
    let mut s = input_schema();
    for t in 0..N_TARGETS {
        s.push_str(&format!("y{t} = target_numeric\n"));
    }
    s
}

pub fn classification_schema_text() -> String {
    let names: Vec<String> = (0..N_CLASSES).map(|c| format!("q{c}")).collect();
    format!("{}label = target_class : {}\n", input_schema(), names.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub rows: usize,
    pub missing_cells: usize,
}

/// Writes `data.csv`, the two schema files and `images/NNNNN.pgm` under
/// `out`. The output is a pure function of `(n, seed, cfg)`.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let rows = generate_rows(n, seed, cfg)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let csv_path = out.join(DATA_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header: Vec<String> = (0..N_NUMERIC).map(|j| format!("n{j}")).collect();
    header.extend((0..3).map(|c| format!("c{c}")));
    header.extend((0..N_TARGETS).map(|t| format!("y{t}")));
    header.push("label".into());
    header.push("image".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut missing_cells = 0;
    for (i, r) in rows.iter().enumerate() {
        let rel = format!("images/{i:05}.pgm");
        write_image_pgm(&out.join(&rel), &r.image)?;
        let mut rec: Vec<String> = r
            .numeric
            .iter()
            .zip(&r.missing)
            .map(|(v, &m)| if m { String::new() } else { v.to_string() })
            .collect();
        missing_cells += r.missing.iter().filter(|&&m| m).count();
        rec.extend(r.categorical.iter().enumerate().map(|(c, &l)| category_name(c, l)));
        rec.extend(r.targets.iter().map(f64::to_string));
        rec.push(format!("q{}", r.class));
        rec.push(rel);
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    for (name, text) in [
        (REGRESSION_SCHEMA, regression_schema_text()),
        (CLASSIFICATION_SCHEMA, classification_schema_text()),
    ] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(SynthSummary { rows: n, missing_cells })
}
