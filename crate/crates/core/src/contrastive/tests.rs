use super::*;
use crate::encoder::{conv, encode};
use crate::envsim::{collect_trajectories, EnvConfig};
use crate::masking::{sample_mask, Granularity, MaskPolicy};
use crate::numerics::{bilinear_score, grad_check, sample_coordinates, GradCheckOptions};
use proptest::prelude::*;
use rand::Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        input_channels: 1,
        input_height: 12,
        input_width: 12,
        layers: vec![conv(3, 4, 2, 1), conv(4, 3, 1, 1), conv(2, 3, 2, 0)],
        local_layer: 1,
        global_dim: 5,
    }
}

fn random_batch(b: usize, seed: u64) -> ContrastiveBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * 144;
    let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let p: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    ContrastiveBatch::new(b, a, p).unwrap()
}

fn column(local: &Tensor<f64>, li: usize) -> Tensor<f64> {
    let &[c, m, n] = local.shape() else { unreachable!() };
    Tensor::from_fn(&[c], |ci| local.data()[ci * m * n + li])
}

/// Per-image encodes and explicit double loops over locations and rows.
fn brute(batch: &ContrastiveBatch<f64>, enc: &EncoderParams<f64>, sc: &ScorerParams<f64>, ll: bool) -> f64 {
    let b = batch.batch;
    let len = batch.anchors.len() / b;
    let image = |buf: &[f64], i: usize| Tensor::from_vec(&[1, 12, 12], buf[i * len..(i + 1) * len].to_vec()).unwrap();
    let anc: Vec<_> = (0..b).map(|i| encode(&image(&batch.anchors, i), enc).unwrap()).collect();
    let pos: Vec<_> = (0..b).map(|i| encode(&image(&batch.positives, i), enc).unwrap()).collect();
    let (_, m, n) = enc.config.local_shape().unwrap();
    let mut total = 0.0;
    for li in 0..m * n {
        for i in 0..b {
            let score = |j: usize| {
                if ll {
                    bilinear_score(&column(&anc[i].local, li), &sc.w_l, &column(&pos[j].local, li)).unwrap()
                } else {
                    bilinear_score(&anc[i].global, &sc.w_g, &column(&pos[j].local, li)).unwrap()
                }
            };
            let row: Vec<f64> = (0..b).map(score).collect();
            let lse = row.iter().map(|s| s.exp()).sum::<f64>().ln();
            total += lse - row[i];
        }
    }
    total / (b * m * n) as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn infonce_matches_direct_formula() {
    let s = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.5, 2.0]).unwrap();
    let direct = (1f64.exp() / (1f64.exp() + 1.0)).ln() + (2f64.exp() / (0.5f64.exp() + 2f64.exp())).ln();
    assert!(rel(infonce(&s).unwrap(), direct) < 1e-14);
    assert!(infonce(&Tensor::<f64>::zeros(&[2, 3])).is_err());
}

#[test]
fn losses_match_brute_force() {
    for seed in 0..5 {
        let enc = init_encoder::<f64>(&tiny(), seed).unwrap();
        let sc = ScorerParams::<f64>::init(&tiny(), seed + 100).unwrap();
        let batch = random_batch(4, seed);
        let gl = loss_gl(&batch, &enc, &sc).unwrap();
        let ll = loss_ll(&batch, &enc, &sc).unwrap();
        assert!(rel(gl, brute(&batch, &enc, &sc, false)) < 1e-10);
        assert!(rel(ll, brute(&batch, &enc, &sc, true)) < 1e-10);
    }
}

#[test]
fn gl_scores_diagonal_holds_true_pairs() {
    let enc = init_encoder::<f64>(&tiny(), 3).unwrap();
    let sc = ScorerParams::<f64>::init(&tiny(), 4).unwrap();
    let batch = random_batch(3, 5);
    let scores = gl_scores(&batch, &enc, &sc).unwrap();
    let (_, m, n) = tiny().local_shape().unwrap();
    assert_eq!(scores.len(), m * n);
    let a0 = encode(&Tensor::from_vec(&[1, 12, 12], batch.anchors[..144].to_vec()).unwrap(), &enc).unwrap();
    let p2 = encode(&Tensor::from_vec(&[1, 12, 12], batch.positives[288..].to_vec()).unwrap(), &enc).unwrap();
    let expect = bilinear_score(&a0.global, &sc.w_g, &column(&p2.local, 7)).unwrap();
    assert!(rel(scores[7].data()[2], expect) < 1e-12);
}

#[test]
fn all_visible_masks_reproduce_unmasked_losses_bitwise() {
    let enc = init_encoder::<f64>(&tiny(), 1).unwrap();
    let sc = ScorerParams::<f64>::init(&tiny(), 2).unwrap();
    let batch = random_batch(4, 3)
        .with_masks(vec![Mask::all_visible(12, 12); 4])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mgl = loss_masked(&batch, &enc, &sc, Variant::GlobalLocal, FillMode::Zero, &mut rng).unwrap();
    let mll = loss_masked(&batch, &enc, &sc, Variant::LocalLocal, FillMode::Zero, &mut rng).unwrap();
    assert_eq!(mgl.to_bits(), loss_gl(&batch, &enc, &sc).unwrap().to_bits());
    assert_eq!(mll.to_bits(), loss_ll(&batch, &enc, &sc).unwrap().to_bits());
}

#[test]
fn masking_touches_anchors_only() {
    let enc = init_encoder::<f64>(&tiny(), 1).unwrap();
    let sc = ScorerParams::<f64>::init(&tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = MaskSpec::with_ratio(0.5);
    let masks: Vec<Mask> = (0..4).map(|_| sample_mask(12, 12, &spec, &mut rng).unwrap()).collect();
    let batch = random_batch(4, 3).with_masks(masks.clone()).unwrap();
    let anchors = batch.masked_anchors(FillMode::Zero, &mut rng).unwrap();
    for (k, mask) in masks.iter().enumerate() {
        for (px, &v) in mask.visible.iter().enumerate() {
            let got = anchors[k * 144 + px];
            assert_eq!(got, if v == 1 { batch.anchors[k * 144 + px] } else { 0.0 });
        }
    }
    let masked = ContrastiveBatch::new(4, anchors, batch.positives.clone()).unwrap();
    let direct = loss_gl(&masked, &enc, &sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let via = loss_masked(&batch, &enc, &sc, Variant::GlobalLocal, FillMode::Zero, &mut rng).unwrap();
    assert_eq!(direct.to_bits(), via.to_bits());
    assert!(loss_masked(&random_batch(4, 3), &enc, &sc, Variant::LocalLocal, FillMode::Zero, &mut rng).is_err());
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut enc = init_encoder::<f64>(&tiny(), 11).unwrap();
    for t in enc.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let mut sc = ScorerParams::<f64>::init(&tiny(), 12).unwrap();
    let spec = MaskSpec {
        ratio: 0.4,
        granularity: Granularity::Patch(2),
        fill: FillMode::UniformNoise,
        policy: MaskPolicy::FreshPerVisit,
    };
    let masks: Vec<Mask> = (0..3).map(|_| sample_mask(12, 12, &spec, &mut rng).unwrap()).collect();
    let batch = random_batch(3, 13).with_masks(masks).unwrap();
    let anchors = batch.masked_anchors(FillMode::UniformNoise, &mut rng).unwrap();

    enc.zero_grad();
    sc.zero_grad();
    contrastive_loss(&mut enc, &mut sc, &anchors, &batch.positives, 3, Objective::BOTH, true).unwrap();
    let mut analytic = enc.flat_grad();
    analytic.extend(sc.flat_grad());
    let mut x0 = enc.flatten();
    x0.extend(sc.flatten());
    let mut lens = enc.segment_lens();
    lens.extend(sc.segment_lens());
    let split = enc.num_params();
    let coords = sample_coordinates(&lens, 12, 80, 4);
    let (mut e, mut s) = (enc.clone(), sc.clone());
    let report = grad_check(
        |x: &[f64]| {
            e.load_flat(&x[..split])?;
            s.load_flat(&x[split..])?;
            Ok(contrastive_loss(&mut e, &mut s, &anchors, &batch.positives, 3, Objective::BOTH, false)?.total())
        },
        &x0,
        &analytic,
        &coords,
        GradCheckOptions { epsilon: 1e-5, denominator_floor: 1e-5 },
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn infonce_ignores_per_row_shifts(vals in prop::collection::vec(-5.0f64..5.0, 16), shifts in prop::collection::vec(-50.0f64..50.0, 4)) {
        let s = Tensor::from_vec(&[4, 4], vals.clone()).unwrap();
        let shifted = Tensor::from_fn(&[4, 4], |k| vals[k] + shifts[k / 4]);
        prop_assert!(rel(infonce(&s).unwrap(), infonce(&shifted).unwrap()) < 1e-12);
        prop_assert!(infonce(&s).unwrap() <= 0.0);
    }

    #[test]
    fn losses_invariant_under_pair_permutation(seed in 0u64..1000) {
        let enc = init_encoder::<f64>(&tiny(), seed).unwrap();
        let sc = ScorerParams::<f64>::init(&tiny(), seed + 1).unwrap();
        let batch = random_batch(4, seed);
        let perm = [2usize, 0, 3, 1];
        let pick = |buf: &[f64]| perm.iter().flat_map(|&i| buf[i * 144..(i + 1) * 144].to_vec()).collect::<Vec<_>>();
        let permuted = ContrastiveBatch::new(4, pick(&batch.anchors), pick(&batch.positives)).unwrap();
        prop_assert!(rel(loss_gl(&batch, &enc, &sc).unwrap(), loss_gl(&permuted, &enc, &sc).unwrap()) < 1e-12);
        prop_assert!(rel(loss_ll(&batch, &enc, &sc).unwrap(), loss_ll(&permuted, &enc, &sc).unwrap()) < 1e-12);
    }
}

fn small_run() -> (TrajectoryDataset, EncoderConfig) {
    let env = EnvConfig::desk();
    let data = collect_trajectories(&env, 3, 200, Split::Pretrain).unwrap();
    (data, EncoderConfig::compact())
}

#[test]
fn pretraining_lowers_the_loss_and_is_reproducible() {
    let (data, cfg) = small_run();
    let config = PretrainConfig {
        updates: 30,
        batch_size: 16,
        log_every: 10,
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        mask: MaskSpec::with_ratio(0.4),
        seed: 5,
        ..PretrainConfig::default()
    };
    let a = pretrain(&data, &cfg, &config).unwrap();
    let b = pretrain(&data, &cfg, &config).unwrap();
    assert_eq!(a.encoder.checksum(), b.encoder.checksum());
    let steps: Vec<usize> = a.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 10, 20, 30]);
    assert!(a.log[3].loss_total < a.log[0].loss_total, "{:?}", a.log);
    let chance = 2.0 * (16f64).ln();
    assert!((a.log[0].loss_total - chance).abs() < 0.5);
    for r in &a.log {
        assert!((r.loss_total - r.loss_gl - r.loss_ll).abs() < 1e-5);
    }

    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.csv");
    write_log_csv(&log_path, &a.log).unwrap();
    let text = std::fs::read_to_string(&log_path).unwrap();
    assert!(text.starts_with("step,loss_gl,loss_ll,loss_total,wall_ms\n1,"));
    assert_eq!(text.lines().count(), 5);

    let ckpt = dir.path().join("enc.ckpt");
    save_pretrained(&ckpt, &a.encoder, &a.scorer).unwrap();
    let (enc, sc) = load_pretrained(&ckpt, &a.encoder.config).unwrap();
    assert_eq!(enc.checksum(), a.encoder.checksum());
    assert_eq!(sc.checksum(), a.scorer.checksum());
}

#[test]
fn pretraining_rejects_bad_inputs() {
    let (data, cfg) = small_run();
    let probe = collect_trajectories(&EnvConfig::desk(), 3, 50, Split::ProbeTrain).unwrap();
    let config = PretrainConfig {
        updates: 1,
        ..PretrainConfig::default()
    };
    assert!(matches!(pretrain(&probe, &cfg, &config), Err(Error::Config(_))));
    let huge = PretrainConfig {
        batch_size: 1000,
        ..config.clone()
    };
    assert!(matches!(pretrain(&data, &cfg, &huge), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_step_and_checkpoint() {
    let (data, cfg) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let config = PretrainConfig {
        updates: 50,
        batch_size: 8,
        adam: AdamConfig {
            learning_rate: 1e30,
            ..AdamConfig::default()
        },
        abort_checkpoint: Some(path.clone()),
        ..PretrainConfig::default()
    };
    match pretrain(&data, &cfg, &config) {
        Err(Error::Training { step, reason }) => {
            assert!((1..=50).contains(&step));
            assert!(reason.contains("last.ckpt"), "{reason}");
            assert!(path.exists());
        }
        other => panic!("expected a training abort, got {other:?}"),
    }
}
