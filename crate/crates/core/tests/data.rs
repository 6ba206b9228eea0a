use std::path::Path;

use mtcmtm::data::synth::{generate_rows, latent, target_map};
use mtcmtm::data::table::{raw_inputs, write_tabular, RawColumn};
use mtcmtm::data::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn permuted_header_loads_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let schema = TableSchema::parse("a = numeric\nb = categorical : x, y\nt = target_numeric\n").unwrap();
    write(&dir.path().join("t.csv"), "t,b,extra,a\n0,y,1,2.5\n0,x,1,\n");
    let t = load_tabular(&dir.path().join("t.csv"), &schema).unwrap();
    assert_eq!(t.column("a"), Some(&RawColumn::Numeric(vec![Some(2.5), None])));
    assert_eq!(t.column("b"), Some(&RawColumn::Categorical(vec![Some(1), Some(0)])));
    assert_eq!(t.missing_count(), 1);
}

#[test]
fn imputation_uses_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    let schema = TableSchema::parse("a = numeric\nb = categorical : x, y\nt = target_numeric\n").unwrap();
    write(&dir.path().join("t.csv"), "a,b,t\n1,x,0\n2,x,0\n3,y,0\n,,0\n100,y,0\n");
    let t = load_tabular(&dir.path().join("t.csv"), &schema).unwrap();
    let imp = Imputer::fit(&t, &[0, 1, 2], None).unwrap();
    let filled = imp.apply(&t).unwrap();
    assert_eq!(filled.missing_count(), 0);
    let x = raw_inputs(&filled).unwrap();
    assert_eq!(x[3], vec![2.0, 0.0]);
}

#[test]
fn standardization_conventions() {
    let s = Standardizer::fit(&[vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap();
    assert_eq!(s.transform(&[2.0, 5.0]), vec![-1.0, 0.0]);
    assert_eq!(s.transform(&[4.0, 5.0]), vec![1.0, 0.0]);
    assert_eq!(s.inverse(&[1.0, 0.0]), vec![4.0, 5.0]);
}

#[test]
fn synthetic_generation_is_reproducible_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        missing_rate: 0.1,
        ..SynthConfig::default()
    };
    let sa = generate_synthetic(120, 4, &cfg, a.path()).unwrap();
    let sb = generate_synthetic(120, 4, &cfg, b.path()).unwrap();
    assert_eq!(sa, sb);
    assert!(sa.missing_cells > 0);
    for f in ["data.csv", "schema_regression.txt", "images/00000.pgm", "images/00119.pgm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let data = PairedDataset::build(
        &DataConfig {
            csv: a.path().join("data.csv"),
            schema: a.path().join("schema_regression.txt"),
            ..DataConfig::default()
        },
        None,
    )
    .unwrap();
    assert!((0..data.len()).all(|i| data.features(i).iter().all(|v| v.is_finite())));
    // standardized training features are centered
    let train = data.indices(SplitTag::Train);
    for j in 0..data.input_len() {
        let m = train.iter().map(|&i| data.features(i)[j]).sum::<f64>() / train.len() as f64;
        assert!(m.abs() < 1e-9, "feature {j} mean {m}");
    }
    let img = data.image(0, None).unwrap();
    assert_eq!((img.height, img.width, img.channels), (32, 32, 1));
}

#[test]
fn synthetic_targets_have_a_low_noise_floor() {
    let rows = generate_rows(2000, 0, &SynthConfig::default()).unwrap();
    for t in 0..4 {
        let y: Vec<f64> = rows.iter().map(|r| r.targets[t]).collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        let mse = rows
            .iter()
            .map(|r| (target_map(&latent(&r.numeric))[t] - r.targets[t]).powi(2))
            .sum::<f64>()
            / rows.len() as f64;
        assert!(mse / var <= 0.01, "target {t}: standardized oracle mse {}", mse / var);
    }
}

#[test]
fn images_carry_latent_information() {
    let rows = generate_rows(1000, 1, &SynthConfig::default()).unwrap();
    let intensity: Vec<f64> = rows.iter().map(|r| r.image.mean()).collect();
    let u1: Vec<f64> = rows.iter().map(|r| r.latent[0]).collect();
    let r = pearson(&intensity, &u1).abs();
    assert!(r > 0.5, "correlation {r}");
}

#[test]
fn held_out_values_do_not_move_fitted_statistics() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(200, 2, &SynthConfig::default(), dir.path()).unwrap();
    let cfg = DataConfig {
        csv: dir.path().join("data.csv"),
        schema: dir.path().join("schema_regression.txt"),
        ..DataConfig::default()
    };
    let base = PairedDataset::build(&cfg, None).unwrap();
    // rewrite every non-training numeric cell to a wild value
    let schema = TableSchema::from_file(&cfg.schema).unwrap();
    let mut table = load_tabular(&cfg.csv, &schema).unwrap();
    let train = base.indices(SplitTag::Train);
    for col in &mut table.columns {
        if let RawColumn::Numeric(v) = col {
            for (i, cell) in v.iter_mut().enumerate() {
                if !train.contains(&i) {
                    *cell = Some(1e6);
                }
            }
        }
    }
    let tampered = dir.path().join("tampered.csv");
    write_tabular(&tampered, &table).unwrap();
    let moved = PairedDataset::build(&DataConfig { csv: tampered, ..cfg.clone() }, None).unwrap();
    assert_eq!(moved.imputer, base.imputer);
    assert_eq!(moved.feature_stats, base.feature_stats);
    for &i in &train {
        assert_eq!(moved.features(i), base.features(i));
    }
}

#[test]
fn splits_are_seeded_partitions() {
    let a = split(100, SplitSpec::default(), 3).unwrap();
    assert_eq!(a, split(100, SplitSpec::default(), 3).unwrap());
    let count = |t| a.iter().filter(|&&x| x == t).count();
    assert_eq!((count(SplitTag::Train), count(SplitTag::Val), count(SplitTag::Test)), (64, 16, 20));
}

#[test]
fn random_crop_is_reproducible_and_full_crop_is_identity() {
    let data: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
    let img = Image::new(6, 6, 1, data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(crop(&img, CropMode::Random, (6, 6), &mut rng).unwrap(), img);
    let a = crop(&img, CropMode::Random, (3, 4), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = crop(&img, CropMode::Random, (3, 4), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(crop(&img, CropMode::Center, (7, 1), &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn table_round_trip(
        cells in prop::collection::vec((prop::option::of(-1e6f64..1e6), prop::option::of(0usize..3)), 1..30),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let schema = TableSchema::parse("v = numeric\nc = categorical : p, q, r\nt = target_class : p, q, r\n").unwrap();
        let table = RawTable {
            schema: schema.clone(),
            columns: vec![
                RawColumn::Numeric(cells.iter().map(|c| c.0).collect()),
                RawColumn::Categorical(cells.iter().map(|c| c.1).collect()),
                RawColumn::Categorical(cells.iter().map(|c| c.1.or(Some(0))).collect()),
            ],
            n_rows: cells.len(),
        };
        let path = dir.path().join("t.csv");
        write_tabular(&path, &table).unwrap();
        prop_assert_eq!(load_tabular(&path, &schema).unwrap(), table);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..h * w).map(|_| rng.gen()).collect();
        let img = Image::new(h, w, 1, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_image_pgm(&path, &img).unwrap();
        prop_assert_eq!(load_image_pgm(&path).unwrap(), img);
    }

    #[test]
    fn kfold_validation_folds_partition_rows(n in 10usize..200, k in 2usize..6, seed in any::<u64>()) {
        let mut seen = vec![0usize; n];
        for fold in 0..k {
            let tags = split(n, SplitSpec::Kfold { k, fold }, seed).unwrap();
            for (i, t) in tags.iter().enumerate() {
                if *t == SplitTag::Val {
                    seen[i] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn ratio_splits_cover_every_row_once(n in 20usize..500, seed in any::<u64>()) {
        let tags = split(n, SplitSpec::default(), seed).unwrap();
        prop_assert_eq!(tags.len(), n);
        prop_assert!(tags.iter().all(|t| matches!(t, SplitTag::Train | SplitTag::Val | SplitTag::Test)));
    }
}
