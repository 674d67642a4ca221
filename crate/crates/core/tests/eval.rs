mod common;

use std::collections::{BTreeMap, HashSet};

use prunekit_core::eval::checkpoint;
use prunekit_core::eval::report::runs_csv;
use prunekit_core::eval::tasks::{answer, N_SLOTS, N_VALUES};
use prunekit_core::eval::{
    emit_report, evaluate, exact_match_accuracy, generate_dataset, task_model_config, RunRecord,
    TaskKind, TaskMix,
};
use prunekit_core::importance::{build_dependency_groups, taylor_group_importance, CalibrationSet, ImportanceReport};
use prunekit_core::model::{names, Capture, LoraConfig, Model, Triplet};
use prunekit_core::prune::{execute, plan, Floors};
use prunekit_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn ids(pool: &[Triplet]) -> Vec<u64> {
    pool.iter().map(|t| t.id).collect()
}

#[test]
fn same_seed_same_pools() {
    let a = generate_dataset(&TaskMix::default(), 300, 4).unwrap();
    let b = generate_dataset(&TaskMix::default(), 300, 4).unwrap();
    let c = generate_dataset(&TaskMix::default(), 300, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, c.train);
    assert_eq!(a.train.len() + a.eval.len(), 300);
    assert_eq!(a.eval.len(), 60);
}

#[test]
fn too_small_dataset_is_rejected() {
    assert!(generate_dataset(&TaskMix::default(), 9, 0).is_err());
}

#[test]
fn split_is_disjoint() {
    let d = generate_dataset(&TaskMix::default(), 500, 1).unwrap();
    let train: HashSet<u64> = ids(&d.train).into_iter().collect();
    assert!(d.eval.iter().all(|t| !train.contains(&t.id)));
    let content = |t: &Triplet| (t.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.prompt.clone());
    let train_items: HashSet<_> = d.train.iter().map(content).collect();
    assert!(d.eval.iter().all(|t| !train_items.contains(&content(t))));
}

#[test]
fn stored_answers_match_regenerated_answers() {
    let d = generate_dataset(&TaskMix::default(), 1000, 2).unwrap();
    for t in d.train.iter().chain(&d.eval) {
        assert_eq!(answer(&t.image, &t.prompt).unwrap(), t.response, "item {}", t.id);
    }
}

#[test]
fn answer_labels_are_roughly_uniform() {
    let d = generate_dataset(&TaskMix::default(), 6000, 3).unwrap();
    let mut counts: BTreeMap<TaskKind, Vec<f64>> = BTreeMap::new();
    for t in d.train.iter().chain(&d.eval) {
        let k = TaskKind::of(t).unwrap();
        counts.entry(k).or_insert_with(|| vec![0.0; k.answer_count()])[t.response[0]] += 1.0;
    }
    assert_eq!(counts[&TaskKind::VisualLookup].len(), N_VALUES);
    assert_eq!(counts[&TaskKind::VisualCount].len(), N_SLOTS + 1);
    for (kind, c) in counts {
        let n: f64 = c.iter().sum();
        let e = n / c.len() as f64;
        let chi2: f64 = c.iter().map(|o| (o - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((c.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "{kind:?}: chi2 {chi2}, p {p}");
    }
}

#[test]
fn random_model_is_at_chance_on_lookup() {
    let d = generate_dataset(&TaskMix::default(), 3000, 6).unwrap();
    let lookups: Vec<Triplet> = d
        .train
        .iter()
        .filter(|t| TaskKind::of(t) == Some(TaskKind::VisualLookup))
        .cloned()
        .collect();
    let m = Model::init(&task_model_config(), 7).unwrap();
    let acc = exact_match_accuracy(&m, &lookups).unwrap();
    let p = 1.0 / N_VALUES as f64;
    let sigma = (p * (1.0 - p) / lookups.len() as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc} over {} items", lookups.len());
}

#[test]
fn zeroed_projector_makes_output_image_blind() {
    let mut m = Model::init(&task_model_config(), 8).unwrap();
    for name in [names::FC1_W, names::FC1_B, names::FC2_W, names::FC2_B] {
        let shape = m.tensor(name).unwrap().shape().to_vec();
        m.set_tensor(name, prunekit_tensor::Tensor::zeros(&shape)).unwrap();
    }
    let d = generate_dataset(&TaskMix::default(), 200, 9).unwrap();
    let a = &d.train[0];
    for b in d.train.iter().skip(1).take(20) {
        let swapped = Triplet {
            image: b.image.clone(),
            ..a.clone()
        };
        let la = m.forward(a, &Capture::None).unwrap().logits;
        let lb = m.forward(&swapped, &Capture::None).unwrap().logits;
        assert_eq!(la, lb);
    }
}

#[test]
fn evaluation_is_deterministic_and_self_relative_is_100() {
    let d = generate_dataset(&TaskMix::default(), 200, 10).unwrap();
    let m = Model::init(&task_model_config(), 1).unwrap();
    let a = evaluate(&m, &d.eval, "m", None).unwrap();
    let b = evaluate(&m, &d.eval, "m", None).unwrap();
    assert_eq!(a, b);
    let total: usize = a.per_task.values().map(|s| s.total).sum();
    assert_eq!(total, d.eval.len());
    let mut perfect = a.clone();
    for s in perfect.per_task.values_mut() {
        s.correct = s.total;
        s.accuracy = 1.0;
    }
    let rel = perfect.relative_to(&perfect);
    assert!((rel.avg_pct.unwrap() - 100.0).abs() < 1e-12);
}

#[test]
fn empty_pool_is_data_error() {
    let m = Model::init(&task_model_config(), 1).unwrap();
    assert!(matches!(evaluate(&m, &[], "m", None), Err(Error::Data(_))));
}

fn round_trip(m: &Model) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), "x".to_string());
    checkpoint::save(m, &path, &meta).unwrap();
    let (back, meta_back) = checkpoint::load(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.layers(), m.layers());
    assert_eq!(back.checksum(), m.checksum());
    let d = generate_dataset(&TaskMix::default(), 50, 11).unwrap();
    for t in &d.eval {
        let a = m.forward(t, &Capture::All).unwrap();
        let b = back.forward(t, &Capture::All).unwrap();
        assert_eq!(a.logits.max_abs_diff(&b.logits), 0.0);
    }
}

#[test]
fn checkpoint_round_trips_dense_pruned_and_lora_models() {
    let m = Model::init(&task_model_config(), 12).unwrap();
    round_trip(&m);

    let d = generate_dataset(&TaskMix::default(), 100, 13).unwrap();
    let calib = CalibrationSet::sample(&d.train, 10, 0).unwrap();
    let groups = taylor_group_importance(&m, &build_dependency_groups(&m), &calib).unwrap();
    let p = plan(&m, &ImportanceReport::Groups { groups }, 0.3, &Floors::default()).unwrap();
    let pruned = execute(&m, &p).unwrap().model;
    assert_ne!(pruned.layers(), m.layers());
    round_trip(&pruned);

    let mut lora = pruned.clone();
    lora.attach_lora(&LoraConfig::default(), 3).unwrap();
    round_trip(&lora);
}

#[test]
fn corrupted_checkpoint_fails_to_load() {
    let m = Model::init(&task_model_config(), 14).unwrap();
    let mut bytes = checkpoint::to_bytes(&m, &BTreeMap::new()).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes(&bytes[..20]), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes(b"NOTACKPT0000"), Err(Error::Checkpoint(_))));
}

#[test]
fn report_has_one_tuple_per_run() {
    let d = generate_dataset(&TaskMix::default(), 100, 15).unwrap();
    let m = Model::init(&task_model_config(), 1).unwrap();
    let eval = evaluate(&m, &d.eval, "a", None).unwrap();
    let runs: Vec<RunRecord> = [("ft", 0.25), ("ft+l2", 0.4)]
        .iter()
        .map(|&(s, r)| RunRecord {
            name: format!("{s}-{r}"),
            mode: "widthwise".into(),
            target_ratio: r,
            achieved_ratio: r,
            strategy: s.into(),
            data_fraction: 1.0,
            seed: 0,
            eval: eval.relative_to(&eval),
        })
        .collect();
    let csv = runs_csv(&runs);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",0.2500,") && rows[0].contains(",ft,"));
    assert!(rows[1].contains(",0.4000,") && rows[1].contains(",ft+l2,"));
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&runs, dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    let json: Vec<RunRecord> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs.json")).unwrap()).unwrap();
    assert_eq!(json, runs);
}
