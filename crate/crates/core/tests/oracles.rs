#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::time::Instant;

use dmegp_core::kernel::rbf_ard;
use dmegp_core::linalg::{chol_solve, cholesky, log_det};
use dmegp_core::model::{cohort_log_marginal, megp_joint_log_marginal, mtgp_joint_log_marginal, patient_log_marginal};
use dmegp_core::nn::{Dense, MeanParams, ParamView};
use dmegp_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Determinant by cofactor expansion along the first row.
fn cofactor_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n == 1 {
        return m[0][0];
    }
    (0..n)
        .map(|j| {
            let minor: Vec<Vec<f64>> = m[1..]
                .iter()
                .map(|row| row.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, v)| *v).collect())
                .collect();
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[0][j] * cofactor_det(&minor)
        })
        .sum()
}

/// Gauss-Jordan inverse with partial pivoting.
fn dense_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|x, y| a[*x][c].abs().total_cmp(&a[*y][c].abs())).unwrap();
        a.swap(c, p);
        let d = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                let pivot = a[c].clone();
                a[r].iter_mut().zip(&pivot).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn gaussian_density(cov: &[Vec<f64>], y: &[f64]) -> f64 {
    let inv = dense_inverse(cov);
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += y[i] * inv[i][j] * y[j];
        }
    }
    -0.5 * quad - 0.5 * cofactor_det(cov).ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| a[k][i] * a[k][j]).sum::<f64>() + if i == j { n as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn identity_model(d: usize, sharing: SharingMode) -> DmeGpModel {
    let mut arch = Architecture::new(d);
    arch.cell = CellKind::Identity;
    arch.mean_hidden = vec![4];
    let mut m = DmeGpModel::new(ModelConfig { sharing, ..ModelConfig::new(arch) }, 1).unwrap();
    m.shared.mean.fill(0.0);
    m
}

fn random_theta(rng: &mut ChaCha8Rng, d: usize) -> KernelParams {
    KernelParams {
        log_lengthscales: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        log_signal_variance: rng.random_range(-0.5..0.5),
        log_noise_variance: rng.random_range(-2.0..-1.0),
    }
}

fn random_cohort(rng: &mut ChaCha8Rng, p: usize, max_t: usize, d: usize) -> Vec<PatientSeries> {
    (0..p)
        .map(|i| {
            let t = rng.random_range(1..=max_t);
            let xs = (0..t).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let ys = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
            PatientSeries::new(format!("p{i}"), xs, ys).unwrap()
        })
        .collect()
}

proptest! {
    #[test]
    fn cholesky_solve_residual_is_small(seed in any::<u64>(), n in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_spd(&mut rng, n);
        let m = SpdMatrix::from_rows(&rows).unwrap();
        let f = cholesky(&m, &JitterConfig::default()).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = chol_solve(&f, &b).unwrap();
        for i in 0..n {
            let r: f64 = (0..n).map(|j| rows[i][j] * x[j]).sum::<f64>() - b[i];
            prop_assert!(r.abs() < 1e-8);
        }
        // reconstruction
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| f.get(i, k) * f.get(j, k)).sum();
                err += (v - rows[i][j]).powi(2);
                norm += rows[i][j].powi(2);
            }
        }
        prop_assert!((err / norm).sqrt() < 1e-10);
    }

    #[test]
    fn log_det_matches_cofactor_expansion(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_spd(&mut rng, n);
        let f = cholesky(&SpdMatrix::from_rows(&rows).unwrap(), &JitterConfig::default()).unwrap();
        prop_assert!((log_det(&f) - cofactor_det(&rows).ln()).abs() < 1e-8);
    }

    #[test]
    fn rbf_is_symmetric_and_bounded(seed in any::<u64>(), d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_theta(&mut rng, d);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = rbf_ard(&a, &b, &p).unwrap();
        prop_assert_eq!(k, rbf_ard(&b, &a, &p).unwrap());
        prop_assert!(k > 0.0 && k <= p.signal_variance());
    }
}

#[test]
fn jitter_escalation_is_deterministic() {
    let m = SpdMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let a = cholesky(&m, &JitterConfig::default()).unwrap();
    let b = cholesky(&m, &JitterConfig::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.jitter() > 0.0);
    assert!(matches!(cholesky(&m, &JitterConfig::none()), Err(Error::NotPositiveDefinite { .. })));
}

#[test]
fn patient_log_marginal_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let d = rng.random_range(1..=3);
        let mut arch = Architecture::new(d);
        arch.embed_dim = 3;
        let mut m = DmeGpModel::new(ModelConfig::new(arch), rng.random()).unwrap();
        let flat: Vec<f64> = (0..m.shared.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.shared.set_flat(&flat).unwrap();
        let s = random_cohort(&mut rng, 1, 5, d).remove(0);
        let theta = random_theta(&mut rng, 3);
        m.patients.insert(s.id.clone(), PatientParams { kernel: theta.clone(), embedding: None });

        let emb = m.shared.embedding.embed(&s.inputs).unwrap();
        let mu = m.shared.mean.evaluate(&emb).unwrap();
        let hs = emb.vectors();
        let cov: Vec<Vec<f64>> = (0..s.len())
            .map(|i| {
                (0..s.len())
                    .map(|j| rbf_ard(&hs[i], &hs[j], &theta).unwrap() + if i == j { theta.noise_variance() } else { 0.0 })
                    .collect()
            })
            .collect();
        let r: Vec<f64> = s.targets.iter().zip(&mu).map(|(y, m)| y - m).collect();
        let expect = gaussian_density(&cov, &r);
        let got = patient_log_marginal(&s, &m).unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }
}

#[test]
fn block_diagonal_model_equals_joint_oracles_without_global_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let d = rng.random_range(1..=2);
        let p = rng.random_range(1..=3);
        let cohort = random_cohort(&mut rng, p, 4, d);
        let mut model = identity_model(d, SharingMode::DmeGp);
        let mut per = BTreeMap::new();
        for s in &cohort {
            let t = random_theta(&mut rng, d);
            per.insert(s.id.clone(), t.clone());
            model.patients.insert(s.id.clone(), PatientParams { kernel: t, embedding: None });
        }
        let mut global = random_theta(&mut rng, d);
        global.log_signal_variance = f64::NEG_INFINITY;
        let dme = cohort_log_marginal(&cohort, &model).unwrap();
        let megp = megp_joint_log_marginal(&cohort, &global, &per).unwrap();
        assert!((dme - megp).abs() < 1e-8);

        // MTGP with an identity task matrix decouples into per-patient terms
        let g = random_theta(&mut rng, d);
        let mtgp = mtgp_joint_log_marginal(&cohort, &SpdMatrix::identity(p), &g).unwrap();
        let mut shared = identity_model(d, SharingMode::PGpsCov);
        shared.shared_kernel = Some(g.clone());
        let blocks = cohort_log_marginal(&cohort, &shared).unwrap();
        assert!((mtgp - blocks).abs() < 1e-8);
    }
}

#[test]
fn megp_single_patient_uses_summed_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cohort = random_cohort(&mut rng, 1, 4, 2);
    let g = random_theta(&mut rng, 2);
    let k = random_theta(&mut rng, 2);
    let per = BTreeMap::from([(cohort[0].id.clone(), k.clone())]);
    let s = &cohort[0];
    let cov: Vec<Vec<f64>> = (0..s.len())
        .map(|i| {
            (0..s.len())
                .map(|j| {
                    rbf_ard(&s.inputs[i], &s.inputs[j], &g).unwrap()
                        + rbf_ard(&s.inputs[i], &s.inputs[j], &k).unwrap()
                        + if i == j { k.noise_variance() } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let expect = gaussian_density(&cov, &s.targets);
    assert!((megp_joint_log_marginal(&cohort, &g, &per).unwrap() - expect).abs() < 1e-10);
}

#[test]
fn mtgp_matches_dense_oracle_and_pools_identical_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs = vec![vec![0.1], vec![0.9]];
    let a = PatientSeries::new("a", xs.clone(), vec![0.5, -0.3]).unwrap();
    let b = PatientSeries::new("b", xs.clone(), vec![1.2, 0.4]).unwrap();
    let g = random_theta(&mut rng, 1);
    let task = SpdMatrix::from_rows(&[vec![1.3, 0.4], vec![0.4, 0.8]]).unwrap();
    let owner = [0, 0, 1, 1];
    let all_x = [&xs[0], &xs[1], &xs[0], &xs[1]];
    let cov: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            (0..4)
                .map(|j| {
                    task.get(owner[i], owner[j]) * rbf_ard(all_x[i], all_x[j], &g).unwrap()
                        + if i == j { g.noise_variance() } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let y = [0.5, -0.3, 1.2, 0.4];
    let got = mtgp_joint_log_marginal(&[a.clone(), b.clone()], &task, &g).unwrap();
    assert!((got - gaussian_density(&cov, &y)).abs() < 1e-10);

    // all-ones tasks over identical inputs: one pooled patient with four points
    let ones = SpdMatrix::from_fn(2, |_, _| 1.0);
    let joint = mtgp_joint_log_marginal(&[a, b], &ones, &g).unwrap();
    let pooled = PatientSeries::new("c", [xs.clone(), xs].concat(), y.to_vec()).unwrap();
    let single = mtgp_joint_log_marginal(&[pooled], &SpdMatrix::identity(1), &g).unwrap();
    assert!((joint - single).abs() < 1e-10);
}

#[test]
fn cohort_sum_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cohort = random_cohort(&mut rng, 4, 5, 2);
    let mut model = DmeGpModel::new(ModelConfig::new(Architecture::new(2)), 5).unwrap();
    for s in &cohort {
        model.ensure_patient(&s.id);
        model.patients.get_mut(&s.id).unwrap().kernel = random_theta(&mut rng, 8);
    }
    let total = cohort_log_marginal(&cohort, &model).unwrap();
    let rest = cohort_log_marginal(&cohort[1..], &model).unwrap();
    assert_eq!(total - rest, total - rest);
    assert!((total - rest - patient_log_marginal(&cohort[0], &model).unwrap()).abs() < 1e-12);
    assert_eq!(cohort_log_marginal(&cohort[..1], &model).unwrap(), patient_log_marginal(&cohort[0], &model).unwrap());

    let mut shared = DmeGpModel::new(ModelConfig { sharing: SharingMode::PGpsBoth, ..ModelConfig::new(Architecture::new(2)) }, 5).unwrap();
    shared.shared_kernel = Some(random_theta(&mut rng, 8));
    let twin = [cohort[0].clone(), PatientSeries { id: "twin".into(), ..cohort[0].clone() }];
    let one = cohort_log_marginal(&twin[..1], &shared).unwrap();
    assert_eq!(cohort_log_marginal(&twin, &shared).unwrap(), 2.0 * one);
}

#[test]
fn mlp_marginal_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = random_cohort(&mut rng, 1, 5, 2).remove(0);
    let mut m = DmeGpModel::new(ModelConfig::new(Architecture::new(2)), 2).unwrap();
    m.ensure_patient(&s.id);
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.reverse();
    let permuted = PatientSeries {
        id: s.id.clone(),
        inputs: idx.iter().map(|i| s.inputs[*i].clone()).collect(),
        targets: idx.iter().map(|i| s.targets[*i]).collect(),
    };
    let a = patient_log_marginal(&s, &m).unwrap();
    let b = patient_log_marginal(&permuted, &m).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn mean_head_layer_shapes_are_checked() {
    let mut m = identity_model(1, SharingMode::DmeGp);
    if let MeanParams::Mlp(mlp) = &mut m.shared.mean {
        mlp.layers[0] = Dense::zeros(2, 4);
    }
    m.ensure_patient("a");
    let s = PatientSeries::new("a", vec![vec![0.0]], vec![0.0]).unwrap();
    assert!(matches!(patient_log_marginal(&s, &m), Err(Error::DimensionMismatch { .. })));
}

fn synthetic_cohort(p: usize, t: usize, seed: u64) -> Vec<PatientSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p)
        .map(|i| {
            let xs = (0..t).map(|k| vec![k as f64 / t as f64, rng.random_range(-1.0..1.0)]).collect();
            let ys = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            PatientSeries::new(format!("s{i}"), xs, ys).unwrap()
        })
        .collect()
}

fn secs(f: &mut dyn FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64()
}

#[test]
fn cohort_cost_grows_linearly_in_patients() {
    let mut model = DmeGpModel::new(ModelConfig::new(Architecture::new(2)), 0).unwrap();
    let small = synthetic_cohort(32, 20, 1);
    let large = synthetic_cohort(64, 20, 2);
    for s in small.iter().chain(&large) {
        model.ensure_patient(&s.id);
    }
    let run = |c: &[PatientSeries]| {
        for _ in 0..40 {
            std::hint::black_box(cohort_log_marginal(c, &model).unwrap());
        }
    };
    run(&large);
    // interleaved so background load affects both sizes alike
    let mut ratios: Vec<f64> = (0..5).map(|_| {
        let a = secs(&mut || run(&small));
        let b = secs(&mut || run(&large));
        b / a
    }).collect();
    ratios.sort_by(f64::total_cmp);
    let ratio = ratios[2];
    assert!((1.6..=2.6).contains(&ratio), "ratio {ratio}");
}
