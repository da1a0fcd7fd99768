//! Property suites over the geometry, attention and model layers, each
//! checked against an independent computation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{l1_normalize_rows, linear_attention, soft_mask_values, DENOM_GUARD};
use crate::geometry::{knn_indices, knn_indices_accelerated, PointSet};
use crate::model::{ModelConfig, OperatorModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    /// Number of individual comparisons made.
    pub checked: usize,
    /// Largest observed deviation, where the suite measures one.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new() -> Self {
        Self {
            checked: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------
// KNN

/// Accelerated KNN against brute force on `sets` random point sets (uniform,
/// 3-D, and snapped to a coarse lattice so distances tie), then on regular
/// grids and a fully degenerate set.
pub fn knn_oracle_suite(sets: usize, max_points: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    let compare = |pts: &PointSet, k: usize, label: String, report: &mut SuiteReport| {
        let brute = knn_indices(pts, k).expect("valid k");
        let fast = knn_indices_accelerated(pts, k).expect("valid k");
        report.expect(brute == fast, || format!("{label}: accelerated KNN differs"));
    };
    for t in 0..sets {
        let m = rng.random_range(32..=max_points);
        let k = [1, 8, 32, m][t % 4];
        let (pts, kind) = match t % 3 {
            0 => (uniform(&mut rng, &[m, 2], 0.0, 1.0), "uniform-2d"),
            1 => (uniform(&mut rng, &[m, 3], -1.0, 1.0), "uniform-3d"),
            _ => {
                let raw = uniform(&mut rng, &[m, 2], 0.0, 1.0);
                (Tensor::from_fn(&[m, 2], |i| (raw.data()[i] * 16.0).floor() / 16.0), "lattice")
            }
        };
        let pts = PointSet::new(pts).expect("finite");
        compare(&pts, k, format!("set {t} ({kind}, M={m}, K={k})"), &mut report);
    }
    for g in [8, 16, 32, 45] {
        let grid = PointSet::unit_grid(g).expect("grid");
        for k in [1, 4, 5, 8, 9, 13, 25, 32] {
            compare(&grid, k, format!("grid {g}x{g}, K={k}"), &mut report);
        }
    }
    let cube = PointSet::new(Tensor::from_fn(&[1000, 3], |i| {
        let p = i / 3;
        [p % 10, (p / 10) % 10, p / 100][i % 3] as f64
    }))
    .expect("finite");
    for k in [7, 19, 27] {
        compare(&cube, k, format!("cube 10^3, K={k}"), &mut report);
    }
    let same = PointSet::new(Tensor::full(&[50, 2], 0.25)).expect("finite");
    compare(&same, 10, "50 identical points, K=10".into(), &mut report);
    report
}

// ---------------------------------------------------------------------------
// Soft mask

fn log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Strictness of the rank weights is checked in log space, where neither
/// `w` nor `1 - w` saturates; the f64 weights themselves are compared to an
/// independent evaluation and checked for (non-strict) monotonicity.
pub fn soft_mask_suite(alphas: &[f64], ss: &[f64], ks: std::ops::RangeInclusive<usize>) -> SuiteReport {
    let mut report = SuiteReport::new();
    for &alpha in alphas {
        for kk in ks.clone() {
            let mut prev_s: Option<Vec<f64>> = None;
            let mut prev_logs: Option<(Vec<f64>, Vec<f64>)> = None;
            for &s in ss {
                let w = soft_mask_values(s, alpha, kk);
                let tau = (1.0 / (1.0 + (-s).exp())) * (kk as f64 - 1.0) + 1.0;
                let z: Vec<f64> = (1..=kk).map(|k| -alpha * (k as f64 - tau)).collect();
                let log_w: Vec<f64> = z.iter().map(|&z| log_sigmoid(z)).collect();
                let log_c: Vec<f64> = z.iter().map(|&z| log_sigmoid(-z)).collect();
                let tag = format!("alpha={alpha}, s={s}, K={kk}");

                for (k, (&wk, &zk)) in w.iter().zip(&z).enumerate() {
                    let oracle = 1.0 / (1.0 + (-zk).exp());
                    report.worst = report.worst.max((wk - oracle).abs());
                    report.expect((wk - oracle).abs() <= 1e-14, || {
                        format!("{tag}: w_{} = {wk} but formula gives {oracle}", k + 1)
                    });
                    report.expect((0.0..=1.0).contains(&wk), || format!("{tag}: w_{} = {wk}", k + 1));
                    report.expect(log_w[k].is_finite() && log_c[k].is_finite(), || {
                        format!("{tag}: w_{} reaches 0 or 1", k + 1)
                    });
                }
                for k in 0..kk - 1 {
                    report.expect(w[k] >= w[k + 1], || format!("{tag}: f64 weights increase at k={}", k + 1));
                    let strict = log_w[k] > log_w[k + 1] || log_c[k] < log_c[k + 1];
                    report.expect(strict, || format!("{tag}: not strictly decreasing at k={}", k + 1));
                }
                if s == 0.0 && kk % 2 == 1 {
                    let anchor = (kk - 1) / 2;
                    report.expect(w[anchor] == 0.5, || {
                        format!("{tag}: anchor w_{} = {} (expected exactly 0.5)", anchor + 1, w[anchor])
                    });
                }
                if let (Some(pw), Some((pl, pc))) = (&prev_s, &prev_logs) {
                    for k in 0..kk {
                        report.expect(w[k] >= pw[k], || format!("{tag}: w_{} fell as s grew", k + 1));
                        let strict = log_w[k] > pl[k] || log_c[k] < pc[k];
                        report.expect(strict, || format!("{tag}: w_{} not strictly rising in s", k + 1));
                    }
                }
                prev_s = Some(w);
                prev_logs = Some((log_w, log_c));
            }

            // Non-trivial integral thresholds: σ(s) = j / (K - 1).
            if kk >= 3 {
                for j in [1, kk / 2, kk - 2] {
                    let frac = j as f64 / (kk - 1) as f64;
                    let s = (frac / (1.0 - frac)).ln();
                    let w = soft_mask_values(s, alpha, kk);
                    report.expect((w[j] - 0.5).abs() < 1e-12, || {
                        format!("alpha={alpha}, K={kk}, threshold {}: w = {}", j + 1, w[j])
                    });
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Linear attention

fn dense_linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let (m, d) = (q.shape()[0], q.shape()[1]);
    let mut scores = vec![0.0; m * m];
    let mut mass = vec![0.0; m];
    for a in 0..m {
        for b in 0..m {
            let (qa, kb) = (q.row(a), k.row(b));
            scores[a * m + b] = qa.iter().zip(kb).map(|(x, y)| x * y).sum();
            mass[a] += qa.iter().zip(kb).map(|(x, y)| x.abs() * y.abs()).sum::<f64>();
        }
    }
    let mut numer = Tensor::zeros(&[m, d]);
    for a in 0..m {
        for b in 0..m {
            for c in 0..d {
                numer.data_mut()[a * d + c] += scores[a * m + b] * v.row(b)[c];
            }
        }
    }
    let out = Tensor::from_fn(&[m, d], |i| {
        let den = if mass[i / d].abs() < DENOM_GUARD { 1.0 } else { mass[i / d] };
        numer.data()[i] / den + q.data()[i]
    });
    (numer, out)
}

/// Right-associated linear attention against the dense `(Q̃ K̃ᵀ) V` form on
/// random cases, some with exactly-zero and near-zero rows.
pub fn linear_attention_suite(cases: usize, max_points: usize, tol: f64, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    for t in 0..cases {
        let m = rng.random_range(1..=max_points);
        let d = [1, 2, 4, 8, 16][t % 5];
        let mut raw: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[m, d], -2.0, 2.0)).collect();
        if t % 3 == 0 {
            for x in raw.iter_mut().take(2) {
                x.data_mut().iter_mut().for_each(|v| *v = v.abs());
            }
        }
        if t % 4 == 1 {
            // Zero, tiny (guarded) and small (normalized) rows in Q and K.
            for x in raw.iter_mut().take(2) {
                let rows = x.shape()[0];
                for (r, scale) in [(0, 0.0), (rows / 2, 1e-14), (rows - 1, 1e-11)] {
                    x.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        let tape = Tape::new();
        let q = l1_normalize_rows(&tape.constant(raw[0].clone())).expect("finite");
        let k = l1_normalize_rows(&tape.constant(raw[1].clone())).expect("finite");
        let v = tape.constant(raw[2].clone());
        let out = linear_attention(&q, &k, &v).expect("finite").value();
        let right = q.matmul(&k.matmul_tn(&v).expect("shapes")).expect("shapes").value();
        let (dense_numer, dense_out) = dense_linear_attention(&q.value(), &k.value(), &v.value());

        let assoc = right.max_abs_diff(&dense_numer);
        let full = out.max_abs_diff(&dense_out);
        report.worst = report.worst.max(assoc).max(full);
        let tag = format!("case {t} (M={m}, d={d})");
        report.expect(out.is_finite(), || format!("{tag}: non-finite output"));
        report.expect(assoc <= tol, || format!("{tag}: Q(KᵀV) vs (QKᵀ)V differ by {assoc:e}"));
        report.expect(full <= tol, || format!("{tag}: normalized outputs differ by {full:e}"));
    }
    report
}

// ---------------------------------------------------------------------------
// Permutation equivariance

/// Full forward pass under joint permutation of features, coordinates and
/// KNN labels, on random point sets.
pub fn permutation_suite(instances: usize, perms: usize, points: usize, tol: f64, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    for inst in 0..instances {
        let config = ModelConfig {
            layers: 2,
            hidden: 16,
            k: 8,
            heads: 2,
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let mut model = OperatorModel::init(config).expect("valid config");
        for layer in &mut model.layers {
            layer.mask_s = uniform(&mut rng, &[1], -2.0, 2.0);
        }
        let pts = PointSet::new(uniform(&mut rng, &[points, 2], 0.0, 1.0)).expect("finite");
        let knn = knn_indices(&pts, model.config.k).expect("valid k");
        let f = uniform(&mut rng, &[points, 1], -2.0, 2.0);
        let out = model.predict(&f, &pts, &knn).expect("forward");
        for p in 0..perms {
            let mut perm: Vec<usize> = (0..points).collect();
            perm.shuffle(&mut rng);
            let f_p = Tensor::new(f.shape(), perm.iter().map(|&i| f.data()[i]).collect()).expect("shape");
            let pts_p = pts.permuted(&perm);
            let knn_p = knn.permuted(&perm);
            let tag = format!("instance {inst}, permutation {p}");
            report.expect(knn_indices(&pts_p, model.config.k).expect("valid k") == knn_p, || {
                format!("{tag}: KNN of permuted points is not the relabeled KNN")
            });
            let out_p = model.predict(&f_p, &pts_p, &knn_p).expect("forward");
            let expected = Tensor::new(out.shape(), perm.iter().map(|&i| out.data()[i]).collect()).expect("shape");
            let diff = out_p.max_abs_diff(&expected);
            report.worst = report.worst.max(diff);
            report.expect(diff <= tol, || format!("{tag}: outputs differ by {diff:e}"));
        }
    }
    report
}
