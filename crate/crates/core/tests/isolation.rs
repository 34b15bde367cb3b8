//! Training only ever reads the training portion of the split.

use std::collections::BTreeSet;

use adsnet::config::RunConfig;
use adsnet::data::{make_paper_split, synthetic_toy_dataset, AccessLog, Dataset, SampleRecord};
use adsnet::train::{make_batch, train, TrainOptions};

fn renamed(prefix: &str, n: usize, seed: u64) -> Vec<SampleRecord> {
    synthetic_toy_dataset(n, 32, seed)
        .unwrap()
        .records
        .into_iter()
        .map(|r| SampleRecord {
            image_id: format!("{prefix}_{}", r.image_id),
            ..r
        })
        .collect()
}

#[test]
fn training_never_touches_test_images() {
    let kvasir = renamed("kvasir", 1000, 1);
    let clinic = renamed("clinic", 612, 2);
    let split = make_paper_split(&kvasir, &clinic, 3).unwrap();
    let test_ids: BTreeSet<String> = split
        .test_kvasir
        .iter()
        .chain(&split.test_clinic)
        .map(|r| r.image_id.clone())
        .collect();
    assert_eq!(test_ids.len(), 162);
    let train_set = Dataset {
        name: "paper_train".into(),
        records: split.train,
        failures: Vec::new(),
    };

    let mut cfg = RunConfig::default();
    cfg.image_size = 32;
    cfg.train.batch_size = 4;
    cfg.train.iterations = 3;
    let logged = AccessLog::new(train_set);
    train(&cfg, &logged, TrainOptions::default()).unwrap();
    // a full epoch of batches as the loader would draw them
    for it in 3..(1450 / 4 + 2) as u64 {
        make_batch(&logged, &cfg, it).unwrap();
    }
    let seen: BTreeSet<String> = logged.accessed().into_iter().collect();
    assert_eq!(seen.len(), 1450, "one epoch reaches every training image");
    assert!(seen.is_disjoint(&test_ids));
}
