use super::*;
use crate::masking::Granularity;

#[test]
fn conditions_parse_and_print() {
    for c in Condition::standard() {
        assert_eq!(Condition::parse(&c.to_string()).unwrap(), c);
    }
    assert_eq!(Condition::standard().len(), 8);
    assert_eq!(Condition::PretrainMasked(0.4).to_string(), "pretrain_masked(0.4)");
    assert!(Condition::parse("pretrain_masked(1.5)").is_err());
    assert!(Condition::parse("pretrained").is_err());
    assert_eq!(Condition::Observable.probe_ratio(0.4), 0.0);
    assert_eq!(Condition::NonObservable.probe_ratio(0.4), 0.4);
    assert_eq!(Condition::NonObservable.pretrain_ratio(), Some(0.0));
    assert_eq!(Condition::RandomCnn.pretrain_ratio(), None);
    assert!(!Condition::Supervised.frozen() && Condition::RandomCnn.frozen());
}

#[test]
fn config_text_round_trips() {
    let text = "# comment\nmask.granularity = patch\nmask.patch_side = 8\nmask.fill = zero\nexperiment.seeds = 2 # trailing\nexperiment.conditions = observable, pretrain_masked(0.6)\n";
    let c = ExperimentConfig::parse(text, ExperimentConfig::desk()).unwrap();
    assert_eq!(c.mask.granularity, Granularity::Patch(8));
    assert_eq!(c.seeds, 2);
    assert_eq!(c.conditions, vec![Condition::Observable, Condition::PretrainMasked(0.6)]);
    let again = ExperimentConfig::parse(&c.to_text(), ExperimentConfig::paper()).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.fingerprint(), c.fingerprint());

    assert!(ExperimentConfig::parse("bogus.key = 1", ExperimentConfig::desk()).is_err());
    assert!(ExperimentConfig::parse("env.height", ExperimentConfig::desk()).is_err());
    assert!(ExperimentConfig::parse("mask.patch_side = 4", ExperimentConfig::desk()).is_err());
    assert!(ExperimentConfig::parse("mask.granularity = patch\nmask.patch_side = 5", ExperimentConfig::desk()).is_err());
    assert!(ExperimentConfig::parse("experiment.seeds = 0", ExperimentConfig::desk()).is_err());
    let paper = ExperimentConfig::parse("profile = paper", ExperimentConfig::desk()).unwrap();
    assert_eq!(paper.steps.pretrain, 80000);
    assert_eq!((paper.env.height, paper.env.width), (210, 160));
}

#[test]
fn fingerprints_track_the_right_keys() {
    let base = ExperimentConfig::desk();
    let mut other = base.clone();
    other.out = "elsewhere".into();
    assert_eq!(base.fingerprint(), other.fingerprint());
    other.probe.updates += 1;
    assert_ne!(base.fingerprint(), other.fingerprint());
    // Probe settings never invalidate pretrained checkpoints.
    assert_eq!(base.pretrain_key(0.4), other.pretrain_key(0.4));
    assert_ne!(base.pretrain_key(0.0), base.pretrain_key(0.4));
    other.pretrain.updates += 1;
    assert_ne!(base.pretrain_key(0.4), other.pretrain_key(0.4));
    assert_eq!(base.fingerprint().len(), 16);
}

#[test]
fn seeds_are_stable_and_distinct() {
    let c = ExperimentConfig::desk();
    assert_eq!(derive_seed(7, "observable", 0), derive_seed(7, "observable", 0));
    assert_ne!(derive_seed(7, "observable", 0), derive_seed(7, "observable", 1));
    assert_ne!(derive_seed(7, "observable", 0), derive_seed(8, "observable", 0));
    assert_ne!(
        cell_seed(&c, &Condition::Observable, 0),
        cell_seed(&c, &Condition::NonObservable, 0)
    );
}

fn tiny_config(out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.env.height = 48;
    c.env.width = 48;
    c.steps = StepBudgets {
        pretrain: 200,
        probe_train: 160,
        probe_test: 64,
    };
    c.pretrain = TrainingBudget {
        updates: 3,
        batch_size: 16,
        learning_rate: 3e-4,
    };
    c.probe = TrainingBudget {
        updates: 3,
        batch_size: 16,
        learning_rate: 3e-4,
    };
    c.conditions = vec![Condition::Observable, Condition::NonObservable, Condition::Supervised];
    c.seeds = 1;
    c.out = out.to_path_buf();
    c
}

#[test]
fn matrix_shares_checkpoints_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let mut cache = Cache::new(dir.path().join("cache"));
    let first = run_matrix(&config, &mut cache, &mut |_| {}).unwrap();
    assert_eq!(first.failed_cells(), 0);
    // One pretraining shared by observable and non_observable, three probe runs.
    assert_eq!(cache.trainings, 4);
    assert_eq!(cache.hits, 1);
    let ckpts = std::fs::read_dir(&cache.dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
        .count();
    assert_eq!(ckpts, 1);

    let mut again = Cache::new(dir.path().join("cache"));
    let second = run_matrix(&config, &mut again, &mut |_| {}).unwrap();
    assert_eq!(again.trainings, 0);
    assert_eq!(again.hits, 3);
    assert_eq!(first, second);
    assert!(dir.path().join("cells/observable-0.json").exists());

    // A fresh cache reproduces the cached numbers exactly.
    let mut fresh = Cache::new(dir.path().join("fresh"));
    let third = run_matrix(&config, &mut fresh, &mut |_| {}).unwrap();
    assert_eq!(first.to_json(), third.to_json());

    // Probing a cached checkpoint directly gives the same report.
    let data = load_datasets(&config, 0).unwrap();
    let enc = pretrained_encoder(&config, &data.pretrain, 0.0, 0, &mut fresh).unwrap();
    let vars = crate::probe::filter_variables(&data.probe_train, config.entropy_threshold).unwrap();
    let seed = cell_seed(&config, &Condition::NonObservable, 0);
    let direct = probe_condition(&Condition::NonObservable, &config, &enc, &vars, &data, seed).unwrap();
    assert_eq!(Some(&direct), first.cells[1].report.as_ref());
}

#[test]
fn failed_cells_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.data_dir = Some(dir.path().join("missing"));
    let mut cache = Cache::new(dir.path().join("cache"));
    let result = run_matrix(&config, &mut cache, &mut |_| {}).unwrap();
    assert_eq!(result.failed_cells(), 3);
    assert!(result.cells[0].error.as_ref().unwrap().contains("missing"));
    assert_eq!(result.summary("observable").unwrap().seeds_failed, 1);
    let md = markdown(&result);
    assert!(md.contains("3 cell(s) failed"));
}

#[test]
fn cache_dir_override() {
    let c = tiny_config(std::path::Path::new("/tmp/x"));
    // Not set in the test environment unless a caller exports it.
    if std::env::var_os(CACHE_ENV).is_none() {
        assert_eq!(Cache::for_config(&c).dir, std::path::PathBuf::from("/tmp/x/cache"));
    }
}
