use super::*;
use crate::encoder::{init_encoder, EncoderConfig};
use crate::envsim::{collect_trajectories, Category, EnvConfig, EpisodeSpan};
use proptest::prelude::*;
use rand::Rng;

fn spec(name: &str, category: Category) -> VariableSpec {
    VariableSpec {
        name: name.into(),
        category,
    }
}

/// Blank 48x48 frames carrying the given label columns.
fn label_fixture(columns: &[(&str, Vec<u8>)]) -> TrajectoryDataset {
    let n = columns[0].1.len();
    let mut env = EnvConfig::desk();
    env.height = 48;
    env.width = 48;
    let variables = columns.iter().map(|(name, _)| spec(name, Category::Misc)).collect();
    let labels = (0..n).flat_map(|t| columns.iter().map(move |(_, c)| c[t])).collect();
    TrajectoryDataset::from_parts(
        env,
        0,
        Split::ProbeTrain,
        1,
        variables,
        vec![0; n * 48 * 48],
        labels,
        vec![EpisodeSpan { episode: 0, start: 0, len: n }],
    )
    .unwrap()
}

#[test]
fn entropy_filter_fixtures() {
    let data = label_fixture(&[
        ("constant", vec![7; 8]),
        ("uniform4", vec![0, 1, 2, 3, 0, 1, 2, 3]),
        ("skewed", vec![0, 0, 0, 1, 0, 0, 0, 1]),
    ]);
    let kept: Vec<String> = filter_variables(&data, ENTROPY_THRESHOLD).unwrap().into_iter().map(|v| v.name).collect();
    assert_eq!(kept, vec!["uniform4"]);
    let kept = filter_variables(&data, 0.5).unwrap();
    assert_eq!(kept.len(), 2);
    assert!(filter_variables(&data, -1.0).is_err());

    let flat = label_fixture(&[("constant", vec![7; 8])]);
    assert!(matches!(filter_variables(&flat, 0.6), Err(Error::Config(_))));
}

#[test]
fn metric_worked_example() {
    let y = [1, 1, 0];
    let p = [1, 0, 0];
    assert_eq!(accuracy(&y, &p), 2.0 / 3.0);
    assert!((macro_f1(&y, &p) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(accuracy(&y, &y), 1.0);
    assert_eq!(macro_f1(&y, &y), 1.0);
}

#[test]
fn f1_ignores_classes_absent_from_labels() {
    // Class 9 only ever predicted: it costs class 0 recall but has no F1 term.
    let y = [0, 0, 1, 1];
    let p = [0, 9, 1, 1];
    let f1_0 = 2.0 * 1.0 / (2.0 * 1.0 + 0.0 + 1.0);
    let f1_1 = 1.0;
    assert!((macro_f1(&y, &p) - (f1_0 + f1_1) / 2.0).abs() < 1e-15);
}

#[test]
fn category_and_overall_means() {
    let v = |name: &str, c, acc, f1| VariableScore {
        name: name.into(),
        category: c,
        accuracy: acc,
        f1,
    };
    let r = ConditionReport::new(
        "x",
        1,
        "fp",
        vec![
            v("a", Category::AgentLoc, 1.0, 0.5),
            v("b", Category::AgentLoc, 0.5, 0.25),
            v("c", Category::Misc, 0.0, 0.0),
        ],
    );
    assert_eq!(r.categories.len(), 2);
    assert_eq!(r.category(Category::AgentLoc).unwrap().accuracy, 0.75);
    assert!(r.category(Category::SmallLoc).is_none());
    // Over categories: (0.75 + 0) / 2, not (1 + 0.5 + 0) / 3.
    assert_eq!(r.mean_accuracy, 0.375);
    assert_eq!(r.mean_f1, 0.1875);
    assert_eq!(ConditionReport::from_json(&r.to_json()).unwrap(), r);
    assert_eq!(ReportRow::to_csv(&ReportRow::parse_csv(&r.to_csv()).unwrap()), r.to_csv());
    assert!(r.to_csv().starts_with("condition,variable,category,accuracy,f1\nx,a,agent_loc,1,0.5\n"));
}

fn separable_heads() -> (Vec<f32>, Vec<u8>, usize) {
    // Two one-hot-ish feature clusters per class for four classes.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 256;
    let d = 8;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = (i % 4) as u8;
        for j in 0..d {
            let centre = if j == class as usize { 2.0 } else { 0.0 };
            feats.push(centre + rng.gen_range(-0.3..0.3f32));
        }
        labels.push(class * 10);
    }
    (feats, labels, d)
}

#[test]
fn heads_fit_a_separable_fixture() {
    let (feats, labels, d) = separable_heads();
    let mut heads = ProbeHeads::<f32>::init(&[spec("v", Category::Misc)], d, 0).unwrap();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        &heads.segment_lens(),
    );
    let b = 64;
    for step in 0..2000 {
        let k = (step * b) % labels.len();
        heads.zero_grad();
        heads.loss(&feats[k * d..(k + b) * d], &labels[k..k + b], b, true).unwrap();
        adam.update_tensors(&mut heads.tensors_mut()).unwrap();
    }
    let preds = heads.predict(&feats, labels.len());
    assert!(accuracy(&labels, &preds) >= 0.99);
}

#[test]
fn head_gradients_match_finite_differences() {
    use crate::numerics::{grad_check, sample_coordinates, GradCheckOptions};
    let (feats, labels, d) = separable_heads();
    let feats: Vec<f64> = feats[..4 * d].iter().map(|&x| x as f64).collect();
    let labels = &labels[..4];
    let mut heads = ProbeHeads::<f64>::init(&[spec("v", Category::Misc)], d, 3).unwrap();
    heads.zero_grad();
    heads.loss(&feats, labels, 4, true).unwrap();
    let coords = sample_coordinates(&heads.segment_lens(), 40, 64, 0);
    let mut probe = heads.clone();
    let report = grad_check(
        |x: &[f64]| {
            probe.load_flat(x)?;
            Ok(probe.loss(&feats, labels, 4, false)?.0)
        },
        &heads.flatten(),
        &heads.flat_grad(),
        &coords,
        GradCheckOptions { epsilon: 1e-4, denominator_floor: 1e-5 },
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

fn desk_splits() -> (TrajectoryDataset, TrajectoryDataset) {
    let env = EnvConfig::desk();
    (
        collect_trajectories(&env, 4, 256, Split::ProbeTrain).unwrap(),
        collect_trajectories(&env, 4, 128, Split::ProbeTest).unwrap(),
    )
}

#[test]
fn untrained_heads_score_near_chance_and_frozen_encoder_is_untouched() {
    let (train, test) = desk_splits();
    let encoder = init_encoder::<f32>(&EncoderConfig::compact(), 1).unwrap();
    let before = encoder.checksum();
    let vars = filter_variables(&train, ENTROPY_THRESHOLD).unwrap();
    let config = ProbeConfig {
        updates: 0,
        ..ProbeConfig::default()
    };
    let model = train_probes(&encoder, &train, &vars, &MaskSpec::default(), true, &config).unwrap();
    let report = evaluate(&model.encoder, &model.heads, &test, &MaskSpec::default(), 0).unwrap();
    assert!(report.mean_accuracy < 0.1, "{report:?}");

    let masked = MaskSpec::with_ratio(0.4);
    let config = ProbeConfig {
        updates: 5,
        batch_size: 32,
        ..ProbeConfig::default()
    };
    let model = train_probes(&encoder, &train, &vars, &masked, true, &config).unwrap();
    assert_eq!(encoder.checksum(), before);
    assert_eq!(model.encoder.checksum(), before);
    let fixed = MaskSpec {
        policy: MaskPolicy::FixedPerObservation,
        ..masked
    };
    assert!(evaluate(&model.encoder, &model.heads, &test, &masked, 0).is_err());
    let a = evaluate(&model.encoder, &model.heads, &test, &fixed, 9).unwrap();
    let b = evaluate(&model.encoder, &model.heads, &test, &fixed, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn supervised_training_moves_the_encoder_and_beats_frozen_random() {
    let (train, _) = desk_splits();
    let encoder = init_encoder::<f32>(&EncoderConfig::compact(), 2).unwrap();
    let vars = filter_variables(&train, ENTROPY_THRESHOLD).unwrap();
    let config = ProbeConfig {
        updates: 40,
        batch_size: 32,
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        seed: 3,
    };
    let mask = MaskSpec::default();
    let sup = train_probes(&encoder, &train, &vars, &mask, false, &config).unwrap();
    assert_ne!(sup.encoder.checksum(), encoder.checksum());
    let frozen = train_probes(&encoder, &train, &vars, &mask, true, &config).unwrap();
    let train_acc = |m: &ProbeModel| {
        let feats = encode_all(&m.encoder, &train, &mask, 0).unwrap();
        let preds = m.heads.predict(&feats, train.len());
        let labels = label_matrix(&train, &vars).unwrap();
        accuracy(&labels, &preds)
    };
    assert!(train_acc(&sup) > train_acc(&frozen));
}

#[test]
fn wrong_splits_are_rejected() {
    let (train, test) = desk_splits();
    let encoder = init_encoder::<f32>(&EncoderConfig::compact(), 1).unwrap();
    let vars = filter_variables(&train, ENTROPY_THRESHOLD).unwrap();
    let cfg = ProbeConfig::default();
    assert!(train_probes(&encoder, &test, &vars, &MaskSpec::default(), true, &cfg).is_err());
    let heads = ProbeHeads::<f32>::init(&vars, 128, 0).unwrap();
    assert!(evaluate(&encoder, &heads, &train, &MaskSpec::default(), 0).is_err());
    let narrow = ProbeHeads::<f32>::init(&vars, 7, 0).unwrap();
    assert!(evaluate(&encoder, &narrow, &test, &MaskSpec::default(), 0).is_err());
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_class_permutation_equivariant(
        pairs in prop::collection::vec((0u8..6, 0u8..6), 1..60),
        shift in 1u8..250,
    ) {
        let y: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let p: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let acc = accuracy(&y, &p);
        let f1 = macro_f1(&y, &p);
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
        prop_assert_eq!(f1 == 1.0, y == p);
        let relabel = |v: &[u8]| v.iter().map(|&c| c.wrapping_add(shift)).collect::<Vec<u8>>();
        prop_assert_eq!(accuracy(&relabel(&y), &relabel(&p)), acc);
        prop_assert!((macro_f1(&relabel(&y), &relabel(&p)) - f1).abs() < 1e-15);
    }
}
