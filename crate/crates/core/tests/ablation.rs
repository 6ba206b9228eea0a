mod common;

use common::tiny_setup;
use mtcmtm::ablation::*;
use mtcmtm::config::Strategy;
use mtcmtm::data::{DataConfig, PairedDataset};
use mtcmtm::train::{finetune, pretrain, Init};

#[test]
fn rows_parse_from_their_keys() {
    for row in AblationRow::ALL {
        assert_eq!(AblationRow::parse(row.key()).unwrap(), row);
    }
    assert!(AblationRow::parse("nope").is_err());
    let labels: Vec<&str> = AblationRow::ALL.iter().map(|r| r.label()).collect();
    assert_eq!(labels[0], "PM");
    assert_eq!(labels[4], "PM + MT-CMTM");
}

#[test]
fn report_covers_every_row_seed_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, reg) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.run.seeds = vec![0, 1];
    let cls = PairedDataset::build(
        &DataConfig {
            schema: dir.path().join("schema_classification.txt"),
            ..cfg.data.clone()
        },
        None,
    )
    .unwrap();
    assert!(reg.shares_inputs(&cls));
    let tasks = [
        AblationTask { name: "reg".into(), data: &reg },
        AblationTask { name: "cls".into(), data: &cls },
    ];
    let report = run_ablation::<f32>(&cfg, &tasks, &AblationRow::ALL).unwrap();
    assert_eq!(report.records.len(), 2 * 5 * 2);
    assert_eq!(report.tasks(), vec!["reg".to_string(), "cls".to_string()]);
    assert_eq!(report.rows(), AblationRow::ALL.to_vec());
    for task in ["reg", "cls"] {
        let ids: Vec<&str> = report
            .records
            .iter()
            .filter(|r| r.task == task)
            .map(|r| r.test_ids.as_str())
            .collect();
        assert!(ids.windows(2).all(|w| w[0] == w[1]), "{task} rows saw different test rows");
        for row in AblationRow::ALL {
            assert_eq!(report.primary(task, row).len(), 2);
        }
    }
    let mut run_ids: Vec<&str> = report.records.iter().map(|r| r.run_id.as_str()).collect();
    run_ids.sort_unstable();
    run_ids.dedup();
    assert_eq!(run_ids.len(), report.records.len());

    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + report.records.len());
    assert!(csv.starts_with("run_id,task,row,seed,train_fraction,best_epoch,test_ids,mse,mae,accuracy"));
    let table = report.to_table();
    assert!(table.contains("PM + MM-CL") && table.contains("balanced_accuracy"));

    let out = dir.path().join("report");
    report.write(&out).unwrap();
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap(), csv);
}

#[test]
fn scratch_row_equals_direct_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.run.seeds = vec![4];
    let tasks = [AblationTask { name: "t".into(), data: &data }];
    let report = run_ablation::<f32>(&cfg, &tasks, &[AblationRow::Scratch]).unwrap();
    let direct = finetune::<f32>(&cfg, Init::Fresh, &data, 4).unwrap();
    let rec = &report.records[0];
    assert_eq!(rec.test, direct.test);
    assert_eq!(rec.best_epoch, direct.best_epoch);
}

#[test]
fn pretrained_row_equals_manual_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.run.seeds = vec![2];
    let tasks = [AblationTask { name: "t".into(), data: &data }];
    let row = AblationRow::Pretrained(Strategy::Mmcl);
    let report = run_ablation::<f32>(&cfg, &tasks, &[row]).unwrap();
    let mut pcfg = cfg.clone();
    pcfg.pretrain.strategy = Strategy::Mmcl;
    let pre = pretrain::<f32>(&pcfg, &data, 2).unwrap();
    let direct = finetune::<f32>(&cfg, Init::Pretrained(&pre.checkpoint), &data, 2).unwrap();
    assert_eq!(report.records[0].test, direct.test);
}

#[test]
fn ablation_is_reproducible_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    let tasks = [AblationTask { name: "t".into(), data: &data }];
    let rows = [AblationRow::Scratch, AblationRow::Pretrained(Strategy::MtCmtm)];
    let a = run_ablation::<f32>(&cfg, &tasks, &rows).unwrap();
    let b = run_ablation::<f32>(&cfg, &tasks, &rows).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert!(run_ablation::<f32>(&cfg, &tasks, &[]).is_err());
    assert!(run_ablation::<f32>(&cfg, &[], &rows).is_err());
}
