//! Monte-Carlo and closed-form checks on the synthetic table generator.

use feat::embed::Task;
use feat::numerics::random::RngStream;
use feat::scmgen::stats::{cosine, excess_kurtosis, spearman};
use feat::scmgen::{
    gen_dag, gen_dataset, heteroscedastic_noise, init_roots, noise_profile, synth_targets, warp_column, Attachment,
    ScmGenConfig, TeacherKind,
};
use proptest::prelude::*;

fn graph_cfg(features: usize, roots: usize, attach: usize, attachment: Attachment, seed: u64) -> ScmGenConfig {
    ScmGenConfig {
        features,
        roots,
        attach,
        attachment,
        seed,
        ..ScmGenConfig::default()
    }
}

#[test]
fn preferential_attachment_forms_hubs_against_uniform_control() {
    let mut wins = 0;
    for seed in 0..100 {
        let max_out = |attachment| {
            let cfg = graph_cfg(200, 2, 2, attachment, seed);
            let g = gen_dag(&cfg, &mut RngStream::new(seed, 1)).unwrap();
            g.out_degrees().into_iter().max().unwrap()
        };
        if max_out(Attachment::Preferential) > max_out(Attachment::Uniform) {
            wins += 1;
        }
    }
    println!("hub wins: {wins}/100");
    assert!(wins >= 90, "preferential max out-degree won only {wins}/100 seeds");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_graphs_are_acyclic_and_rooted(
        features in 1usize..60,
        roots_frac in 0.0f64..1.0,
        attach in 1usize..5,
        preferential in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let roots = 1 + ((features - 1) as f64 * roots_frac) as usize;
        let attachment = if preferential { Attachment::Preferential } else { Attachment::Uniform };
        let cfg = graph_cfg(features, roots, attach, attachment, seed);
        let g = gen_dag(&cfg, &mut RngStream::new(seed, 1)).unwrap();
        let order = g.topological_order().unwrap();
        prop_assert_eq!(order.len(), features);
        let indeg = g.in_degrees();
        for v in 0..features {
            if v < roots {
                prop_assert_eq!(indeg[v], 0);
            } else {
                prop_assert!(indeg[v] >= 1);
                prop_assert_eq!(indeg[v], attach.min(v));
            }
        }
        for &(p, c) in &g.edges {
            prop_assert!(p < c);
        }
    }

    #[test]
    fn dirichlet_weights_lie_on_the_simplex(
        alpha in 0.005f64..20.0,
        prototypes in 1usize..12,
        seed in any::<u64>(),
    ) {
        let cfg = ScmGenConfig { prototypes, alpha: vec![alpha], rows: 50, roots: 3, features: 3, seed, ..ScmGenConfig::default() };
        let r = init_roots(&cfg, &mut RngStream::new(seed, 2)).unwrap();
        for w in r.weights.chunks(prototypes) {
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn warp_preserves_ranks_exactly(
        values in prop::collection::vec(-3i32..4, 8..200),
        noise in prop::collection::vec(-1.0f64..1.0, 200),
        a in 0.5f64..2.0,
        b in 0.5f64..2.0,
    ) {
        // Integer offsets produce ties, noise on half the cells keeps others distinct.
        let x: Vec<f64> = values.iter().zip(&noise).enumerate()
            .map(|(i, (&v, &e))| if i % 2 == 0 { v as f64 } else { v as f64 + 0.5 * e })
            .collect();
        prop_assume!(x.iter().any(|v| *v != x[0]));
        let w = warp_column(&x, a, b).unwrap().unwrap();
        prop_assert_eq!(spearman(&x, &w), 1.0);
    }
}

#[test]
fn small_concentration_clusters_rows_at_prototypes() {
    let cfg = ScmGenConfig {
        features: 8,
        roots: 8,
        prototypes: 8,
        rows: 1000,
        alpha: vec![0.01],
        ..ScmGenConfig::default()
    };
    let r = init_roots(&cfg, &mut RngStream::new(11, 2)).unwrap();
    let nearest: Vec<f64> = r
        .x
        .chunks(8)
        .map(|row| {
            r.prototypes
                .chunks(8)
                .map(|p| cosine(row, p))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mean = nearest.iter().sum::<f64>() / nearest.len() as f64;
    println!("mean nearest-prototype cosine: {mean}");
    assert!(mean > 0.95, "mean nearest-prototype cosine {mean}");
}

fn fitted_noise_slope(sigma: f64, gamma: f64, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 9);
    let clean: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let noise: Vec<f64> = clean.iter().map(|&c| heteroscedastic_noise(c, sigma, gamma, &mut rng)).collect();
    noise_profile(&clean, &noise, 20).unwrap().slope
}

#[test]
fn heteroscedastic_slope_recovers_the_exponent() {
    let slope = fitted_noise_slope(0.5, 1.0, 3);
    println!("gamma=1 slope: {slope}");
    assert!((slope - 1.0).abs() <= 0.1, "slope {slope}");
}

#[test]
fn homoscedastic_noise_has_flat_profile() {
    let slope = fitted_noise_slope(0.5, 0.0, 4);
    println!("gamma=0 slope: {slope}");
    assert!(slope.abs() <= 0.1, "slope {slope}");
}

#[test]
fn noiseless_linear_teacher_labels_by_a_linear_functional() {
    let cfg = ScmGenConfig {
        teacher: TeacherKind::Linear,
        teacher_density: 0.5,
        snr_range: [1e300, 1e300],
        task: Task::Classification { classes: 2 },
        ..ScmGenConfig::default()
    };
    let (n, d) = (2000, 10);
    let mut rng = RngStream::new(21, 0);
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let t = synth_targets(&x, d, &cfg, &mut RngStream::new(22, 4)).unwrap();
    let teacher = &t.teacher;
    // Class 1 wins when (w₁ − w₀)·x + (b₁ − b₀) > 0, computed independently of `logits`.
    let mut agree = 0;
    for (row, y) in x.chunks(d).zip(&t.y) {
        let mut margin = teacher.b1[1] - teacher.b1[0];
        for (a, &node) in teacher.inputs.iter().enumerate() {
            margin += row[node] * (teacher.w1[a * 2 + 1] - teacher.w1[a * 2]);
        }
        assert!(margin.abs() > 1e-12, "tie on the decision boundary");
        if (margin > 0.0) == (*y == 1.0) {
            agree += 1;
        }
    }
    assert_eq!(agree, n);
}

/// Plain batch-gradient logistic regression, trained on the first half and
/// scored on the second.
fn logistic_accuracy(x: &[f64], y: &[f64], d: usize) -> (f64, f64) {
    let n = y.len();
    let train = n / 2;
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for i in 0..train {
            let row = &x[i * d..(i + 1) * d];
            let z = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y[i];
            for j in 0..d {
                g[j] += err * row[j];
            }
            g[d] += err;
        }
        for j in 0..=d {
            w[j] -= 0.5 * g[j] / train as f64;
        }
    }
    let test = n - train;
    let mut correct = 0;
    let mut ones = 0;
    for i in train..n {
        let row = &x[i * d..(i + 1) * d];
        let z = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        if (z > 0.0) == (y[i] == 1.0) {
            correct += 1;
        }
        if y[i] == 1.0 {
            ones += 1;
        }
    }
    let majority = ones.max(test - ones) as f64 / test as f64;
    (correct as f64 / test as f64, majority)
}

#[test]
fn logistic_regression_beats_majority_on_high_snr_tasks() {
    let (mut acc, mut maj) = (0.0, 0.0);
    for seed in 0..10 {
        let cfg = ScmGenConfig {
            features: 8,
            rows: 512,
            snr_range: [50.0, 100.0],
            warp: false,
            seed: 500 + seed,
            ..ScmGenConfig::default()
        };
        let g = gen_dataset(&cfg).unwrap();
        let (a, m) = logistic_accuracy(g.dataset.x(), g.dataset.y(), 8);
        acc += a / 10.0;
        maj += m / 10.0;
    }
    println!("logistic accuracy {acc:.3} vs majority {maj:.3}");
    assert!(acc > maj + 0.05, "logistic {acc} vs majority {maj}");
}

#[test]
fn different_seeds_differ_in_almost_every_cell() {
    let a = gen_dataset(&ScmGenConfig { seed: 1, ..ScmGenConfig::default() }).unwrap();
    let b = gen_dataset(&ScmGenConfig { seed: 2, ..ScmGenConfig::default() }).unwrap();
    let (xa, xb) = (a.dataset.x(), b.dataset.x());
    let differing = xa.iter().zip(xb).filter(|(u, v)| u != v).count();
    let share = differing as f64 / xa.len() as f64;
    assert!(share > 0.99, "only {share} of cells differ");
}

/// Excess kurtosis of Kumaraswamy(a, b) from its raw moments
/// `E[Xⁿ] = b·B(1 + n/a, b)`.
fn kumaraswamy_excess_kurtosis(a: f64, b: f64) -> f64 {
    let beta = |p: f64, q: f64| (libm::lgamma(p) + libm::lgamma(q) - libm::lgamma(p + q)).exp();
    let m: Vec<f64> = (1..=4).map(|k| b * beta(1.0 + k as f64 / a, b)).collect();
    let var = m[1] - m[0] * m[0];
    let mu4 = m[3] - 4.0 * m[0] * m[2] + 6.0 * m[0] * m[0] * m[1] - 3.0 * m[0].powi(4);
    mu4 / (var * var) - 3.0
}

fn warped_gaussian_kurtosis(a: f64, b: f64) -> f64 {
    let mut rng = RngStream::new(31, 0);
    let x: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    excess_kurtosis(&warp_column(&x, a, b).unwrap().unwrap())
}

#[test]
fn skewed_warp_produces_heavy_tails() {
    let (measured, oracle) = (warped_gaussian_kurtosis(0.3, 3.0), kumaraswamy_excess_kurtosis(0.3, 3.0));
    println!("a=0.3 b=3 excess kurtosis {measured} (closed form {oracle})");
    assert!(measured > 0.0);
    assert!((measured - oracle).abs() < 0.05 * oracle, "measured {measured} vs {oracle}");
}

#[test]
fn symmetric_small_shapes_give_light_tails() {
    let (measured, oracle) = (warped_gaussian_kurtosis(0.3, 0.3), kumaraswamy_excess_kurtosis(0.3, 0.3));
    println!("a=b=0.3 excess kurtosis {measured} (closed form {oracle})");
    assert!(oracle < 0.0);
    assert!((measured - oracle).abs() < 0.02, "measured {measured} vs {oracle}");
}
