mod common;

use bayes_lth::data::{synth_blobs, BLOB_RADIUS};
use bayes_lth::metrics::{accuracy, argmax};
use bayes_lth::models::{Model, ModelConfig};
use bayes_lth::objective::{draw_noise_set, elbo, elbo_gradients, ObjectiveConfig};
use bayes_lth::optim::{adam_step, AdamConfig, AdamState};
use bayes_lth::rng::stream;
use bayes_lth::tensor::Tensor;
use bayes_lth::tickets::reinit_weights;
use bayes_lth::variational::InitScheme;
use rand::Rng;

use common::{mean_std, rel_err, MlpOracle};

fn widen_posterior(model: &mut Model, sigma: f32) {
    let rho = (sigma as f64).exp_m1().ln() as f32;
    for l in model.layers_mut() {
        if let Some(r) = l.weight.rho.as_mut() {
            r.iter_mut().for_each(|v| *v = rho);
        }
    }
}

#[test]
fn deterministic_mlp_gradients_match_finite_differences() {
    let model = Model::build(&ModelConfig::mlp(&[3, 7, 5, 3], false), 4).unwrap();
    let mut rng = stream(8, "fd-input", 0);
    let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.5f32..1.5)).collect()).unwrap();
    let y = vec![0, 1, 2, 2, 1, 0];
    let cfg = ObjectiveConfig { samples: 1, ..Default::default() };
    let noise = draw_noise_set(&model, 1, &mut rng);
    let (_, grads) = elbo_gradients(&model, &x, &y, &cfg, &noise).unwrap();
    let mut oracle = MlpOracle::new(&model, &noise, &x, &y, 0.0, 1);
    for (l, (g, rho)) in grads.weights.iter().enumerate() {
        assert!(rho.is_none());
        for (k, &a) in g.iter().enumerate() {
            let fd = oracle.finite_difference(l, k, false, 1e-3);
            // a zero analytic gradient means a dead unit; the difference must vanish too
            if a == 0.0 {
                assert!(fd.abs() < 1e-9, "layer {l} [{k}]: fd {fd}");
                continue;
            }
            assert!(rel_err(a as f64, fd) < 1e-3, "layer {l} [{k}]: {a} vs {fd}");
        }
    }
}

#[test]
fn rho_gradients_match_finite_differences_with_wide_posterior() {
    let mut model = Model::build(&ModelConfig::mlp(&[2, 8, 2], true), 6).unwrap();
    widen_posterior(&mut model, 0.3);
    let data = synth_blobs(5, 2, 0.5, 2).unwrap();
    let (x, y) = data.all();
    let cfg = ObjectiveConfig { samples: 2, dataset_size: 10, ..Default::default() };
    let noise = draw_noise_set(&model, 2, &mut stream(3, "fd", 0));
    let (_, grads) = elbo_gradients(&model, &x, &y, &cfg, &noise).unwrap();
    let mut oracle = MlpOracle::new(&model, &noise, &x, &y, cfg.temperature, cfg.dataset_size);
    for (l, (_, rho)) in grads.weights.iter().enumerate() {
        for (k, &a) in rho.as_ref().unwrap().iter().enumerate() {
            let fd = oracle.finite_difference(l, k, true, 1e-6);
            assert!(rel_err(a as f64, fd) < 1e-3, "layer {l} [{k}]: {a} vs {fd}");
        }
    }
}

#[test]
fn predictive_variance_shrinks_with_samples() {
    let mut model = Model::build(&ModelConfig::mlp(&[2, 16, 3], true), 2).unwrap();
    widen_posterior(&mut model, 0.5);
    let x = Tensor::new(vec![1, 2], vec![0.4, -0.7]).unwrap();
    let reps = 200;
    let draws = |samples: usize, offset: u64| -> Vec<Vec<f64>> {
        (0..reps)
            .map(|r| {
                let p = model.predict_mean(&x, samples, offset + r).unwrap();
                p.data.iter().map(|&v| v as f64).collect()
            })
            .collect()
    };
    let single = draws(1, 0);
    let ten = draws(10, 10_000);
    let dof = (reps - 1) as f64;
    for c in 0..3 {
        let (_, s1) = mean_std(&single.iter().map(|p| p[c]).collect::<Vec<_>>());
        let (_, s10) = mean_std(&ten.iter().map(|p| p[c]).collect::<Vec<_>>());
        let (v1, v10) = (s1 * s1, s10 * s10);
        // standard error of a sample variance under normality
        let se = ((v10 * v10 + (v1 / 10.0) * (v1 / 10.0)) * 2.0 / dof).sqrt();
        assert!((v10 - v1 / 10.0).abs() <= 3.0 * se, "class {c}: var10 {v10:e} vs var1/10 {:e} (se {se:e})", v1 / 10.0);
    }
}

#[test]
fn nll_spread_falls_as_inverse_sqrt_samples() {
    let mut model = Model::build(&ModelConfig::mlp(&[2, 16, 2], true), 5).unwrap();
    widen_posterior(&mut model, 0.4);
    let data = synth_blobs(8, 2, 0.5, 1).unwrap();
    let (x, y) = data.all();
    let spread = |samples: usize| {
        let cfg = ObjectiveConfig { samples, ..Default::default() };
        let v: Vec<f64> = (0..200).map(|r| elbo(&model, &x, &y, &cfg, 1000 * samples as u64 + r).unwrap().nll).collect();
        mean_std(&v).1
    };
    let (s1, s4, s16) = (spread(1), spread(4), spread(16));
    // each std estimate from 200 draws carries ~5% relative error
    for (s, k) in [(s4, 2.0), (s16, 4.0)] {
        let ratio = s * k / s1;
        assert!((ratio - 1.0).abs() < 0.25, "std ratio {ratio} (s1 {s1}, s4 {s4}, s16 {s16})");
    }
}

#[test]
fn single_batch_descent_lowers_moving_average() {
    let mut model = Model::build(&ModelConfig::mlp(&[2, 16, 2], true), 3).unwrap();
    let data = synth_blobs(16, 2, 0.8, 4).unwrap();
    let (x, y) = data.all();
    let cfg = ObjectiveConfig { samples: 10, dataset_size: 32, ..Default::default() };
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&model);
    let mut rng = stream(9, "descent", 0);
    let mut totals = Vec::new();
    for _ in 0..200 {
        let noise = draw_noise_set(&model, cfg.samples, &mut rng);
        let (parts, grads) = elbo_gradients(&model, &x, &y, &cfg, &noise).unwrap();
        totals.push(parts.total);
        adam_step(&mut model, &grads, &mut state, 0.01, &adam).unwrap();
    }
    let avg: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in avg.windows(2).enumerate() {
        assert!(w[1] < w[0], "moving average rose at step {}: {} -> {}", i + 10, w[0], w[1]);
    }
}

#[test]
fn least_squares_separates_tight_blobs() {
    let data = synth_blobs(200, 2, 0.1, 17).unwrap();
    assert!((2.0 * BLOB_RADIUS - 4.0).abs() < 1e-12);
    // normal equations for w in [x1, x2, 1] . w = +-1
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for r in &data.records {
        let f = [r.features[0] as f64, r.features[1] as f64, 1.0];
        let t = if r.label == 0 { -1.0 } else { 1.0 };
        for i in 0..3 {
            b[i] += f[i] * t;
            for j in 0..3 {
                a[i][j] += f[i] * f[j];
            }
        }
    }
    // Gaussian elimination without pivoting is fine for this SPD system
    for i in 0..3 {
        for j in i + 1..3 {
            let m = a[j][i] / a[i][i];
            for k in i..3 {
                a[j][k] -= m * a[i][k];
            }
            b[j] -= m * b[i];
        }
    }
    let mut w = [0.0f64; 3];
    for i in (0..3).rev() {
        w[i] = (b[i] - (i + 1..3).map(|k| a[i][k] * w[k]).sum::<f64>()) / a[i][i];
    }
    let correct = data
        .records
        .iter()
        .filter(|r| {
            let s = w[0] * r.features[0] as f64 + w[1] * r.features[1] as f64 + w[2];
            (s > 0.0) == (r.label == 1)
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc > 0.99, "{acc}");
}

#[test]
fn reinit_means_are_uncorrelated_with_originals() {
    let cfg = ModelConfig::mlp(&[2, 64, 64, 2], true);
    let model = Model::build(&cfg, 21).unwrap();
    let ticket = bayes_lth::tickets::Ticket {
        config: cfg,
        mask: bayes_lth::pruning::PruneMask::of(&model, 0, bayes_lth::pruning::Lineage::Imp),
        init: model.initial_state(),
        score: bayes_lth::pruning::ScoreKind::Snr,
    };
    for scheme in [InitScheme::KaimingUniform, InitScheme::KaimingNormal] {
        let fresh = reinit_weights(&ticket, scheme, 99).unwrap();
        let old = &ticket.init.weights[1].0;
        let new = &fresh.init.weights[1].0;
        assert_eq!(old.len(), 4096);
        let (ma, _) = mean_std(&old.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let (mb, _) = mean_std(&new.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&a, &b) in old.iter().zip(new) {
            let (da, db) = (a as f64 - ma, b as f64 - mb);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        let corr = sab / (saa * sbb).sqrt();
        assert!(corr.abs() < 0.05, "{scheme:?}: correlation {corr}");
    }
}

#[test]
fn accuracy_matches_row_loop() {
    let mut rng = stream(12, "acc", 0);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let c = rng.gen_range(2..6);
        // coarse values so ties occur
        let data: Vec<f32> = (0..n * c).map(|_| rng.gen_range(0..4) as f32 / 4.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let probs = Tensor::new(vec![n, c], data.clone()).unwrap();
        let mut hits = 0;
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            assert_eq!(argmax(row), best);
            hits += usize::from(best == labels[i]);
        }
        let acc = accuracy(&probs, &labels).unwrap();
        assert!((acc - hits as f64 / n as f64).abs() < 1e-12);
    }
}

#[test]
fn resnet_prunable_layers_enumerate_by_hand() {
    // widths [4, 8, 8], one block per stage:
    // stem; s0.b0 conv1, conv2; s1.b0 and s2.b0 conv1, conv2 plus a strided 1x1 shortcut
    let cfg = ModelConfig::mini_resnet(3, &[4, 8, 8], &[1, 1, 1], 10, true);
    let model = Model::build(&cfg, 0).unwrap();
    let names: Vec<&str> = model.prunable_parameters().iter().map(|(n, _)| *n).collect();
    assert_eq!(
        names,
        ["stem.conv", "s0.b0.conv1", "s0.b0.conv2", "s1.b0.conv1", "s1.b0.conv2", "s1.b0.shortcut", "s2.b0.conv1", "s2.b0.conv2", "s2.b0.shortcut"]
    );
    let expected = 3 * 4 * 9 + 2 * (4 * 4 * 9) + 4 * 8 * 9 + 8 * 8 * 9 + 4 * 8 + 2 * (8 * 8 * 9) + 8 * 8;
    assert_eq!(model.prunable_count(), expected);
    assert_eq!(model.weight_count(), expected + 8 * 10);
}
