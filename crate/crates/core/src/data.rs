//! Synthetic PDE datasets and their on-disk layout.
//!
//! A dataset directory holds `geometry.la2t` `[M, C_s]`, `inputs.la2t`
//! `[N, M, C_f]`, `outputs.la2t` `[N, M, C_u]` and `manifest.json`.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{load_tensor, save_tensor, FormatError};
use crate::geometry::{GeometryError, PointSet};
use crate::tensor::{Tensor, TensorError};

pub const A_LO: f64 = 3.0;
pub const A_HI: f64 = 12.0;
pub const DARCY_FORCING: f64 = 1.0;
pub const TEST_FRACTION: f64 = 0.2;
const STD_GUARD: f64 = 1e-12;
const SOLVE_TOL: f64 = 1e-10;

// Stream ids reserved for dataset-level draws; sample i uses stream i.
const SPLIT_STREAM: u64 = u64::MAX;
const GEOMETRY_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("coefficient must be positive and finite, got {value} at node {index}")]
    NonPositiveCoefficient { index: usize, value: f64 },
    #[error("linear solve did not converge: residual {residual:e}")]
    NonConvergence { residual: f64 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Finite-volume Darcy solver

fn square_side(t: &Tensor) -> Option<usize> {
    match t.shape() {
        [a, b] if a == b => Some(*a),
        _ => None,
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face coefficients `[east, west, north, south]` at interior node `(ix, iy)`.
fn faces(a: &[f64], g: usize, ix: usize, iy: usize) -> [f64; 4] {
    let p = iy * g + ix;
    [
        harmonic(a[p], a[p + 1]),
        harmonic(a[p], a[p - 1]),
        harmonic(a[p], a[p + g]),
        harmonic(a[p], a[p - g]),
    ]
}

fn check_darcy_inputs(a: &Tensor, f: &Tensor) -> Result<usize, DataError> {
    let g = square_side(a)
        .filter(|&g| g >= 3 && f.shape() == a.shape())
        .ok_or_else(|| {
            DataError::InvalidArgument(format!(
                "coefficient {:?} and forcing {:?} must be equal g x g grids with g >= 3",
                a.shape(),
                f.shape()
            ))
        })?;
    if let Some((index, &value)) = a
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return Err(DataError::NonPositiveCoefficient { index, value });
    }
    if !f.is_finite() {
        return Err(DataError::InvalidArgument("forcing contains non-finite values".into()));
    }
    Ok(g)
}

/// Applies the discrete operator `-div(a grad u)` at every interior node;
/// boundary entries of the result are zero.
pub fn darcy_apply(a: &Tensor, u: &Tensor) -> Tensor {
    let g = a.shape()[0];
    let inv_h2 = ((g - 1) * (g - 1)) as f64;
    let (av, uv) = (a.data(), u.data());
    let mut out = Tensor::zeros(&[g, g]);
    let o = out.data_mut();
    for iy in 1..g - 1 {
        for ix in 1..g - 1 {
            let p = iy * g + ix;
            let [e, w, n, s] = faces(av, g, ix, iy);
            o[p] = inv_h2
                * (e * (uv[p] - uv[p + 1])
                    + w * (uv[p] - uv[p - 1])
                    + n * (uv[p] - uv[p + g])
                    + s * (uv[p] - uv[p - g]));
        }
    }
    out
}

/// Max-abs stencil residual `f + div(a grad u)` over interior nodes, also
/// counting any deviation of `u` from zero on the boundary.
pub fn darcy_residual(a: &Tensor, f: &Tensor, u: &Tensor) -> Result<f64, DataError> {
    let g = check_darcy_inputs(a, f)?;
    if u.shape() != a.shape() {
        return Err(DataError::InvalidArgument(format!(
            "solution {:?} does not match grid {:?}",
            u.shape(),
            a.shape()
        )));
    }
    let au = darcy_apply(a, u);
    let mut worst = 0.0f64;
    for iy in 0..g {
        for ix in 0..g {
            let p = iy * g + ix;
            let boundary = ix == 0 || iy == 0 || ix == g - 1 || iy == g - 1;
            let r = if boundary { u.data()[p] } else { f.data()[p] - au.data()[p] };
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Lower band of a symmetric positive definite matrix, `bw` sub-diagonals.
struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (self.bw - (i - j))
    }

    fn factor(mut self) -> Option<Self> {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let mut s = self.band[self.idx(i, j)];
                for k in lo.max(j.saturating_sub(self.bw))..j {
                    s -= self.band[self.idx(i, k)] * self.band[self.idx(j, k)];
                }
                let slot = self.idx(i, j);
                if i == j {
                    if !(s > 0.0) {
                        return None;
                    }
                    self.band[slot] = s.sqrt();
                } else {
                    self.band[slot] = s / self.band[self.idx(j, j)];
                }
            }
        }
        Some(self)
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut y = rhs.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.band[self.idx(i, k)] * y[k];
            }
            y[i] = s / self.band[self.idx(i, i)];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.band[self.idx(k, i)] * y[k];
            }
            y[i] = s / self.band[self.idx(i, i)];
        }
        y
    }
}

/// Solves `-div(a grad u) = f` on the unit square with `u = 0` on the
/// boundary. Nodes sit at `i / (g - 1)`; `[iy, ix]` indexing.
fn grid_fn(g: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let h = 1.0 / (g - 1) as f64;
    Tensor::from_fn(&[g, g], |p| f((p % g) as f64 * h, (p / g) as f64 * h))
}

/// Max nodal error of the solver against `u = sin(πx) sin(πy)` with
/// coefficient `a = 2 + xy` and the matching analytic forcing.
pub fn manufactured_solution_error(g: usize) -> Result<f64, DataError> {
    let a = grid_fn(g, |x, y| 2.0 + x * y);
    let f = grid_fn(g, |x, y| {
        let (sx, cx, sy, cy) = ((PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos());
        (2.0 + x * y) * 2.0 * PI * PI * sx * sy - PI * (y * cx * sy + x * sx * cy)
    });
    let exact = grid_fn(g, |x, y| (PI * x).sin() * (PI * y).sin());
    Ok(solve_darcy_fd(&a, &f)?.max_abs_diff(&exact))
}

pub fn solve_darcy_fd(a: &Tensor, f: &Tensor) -> Result<Tensor, DataError> {
    let g = check_darcy_inputs(a, f)?;
    let ni = g - 2;
    let n = ni * ni;
    let inv_h2 = ((g - 1) * (g - 1)) as f64;
    let av = a.data();

    let mut chol = BandCholesky {
        n,
        bw: ni,
        band: vec![0.0; n * (ni + 1)],
    };
    for iy in 1..g - 1 {
        for ix in 1..g - 1 {
            let q = (iy - 1) * ni + (ix - 1);
            let [e, w, nn, s] = faces(av, g, ix, iy);
            let d = chol.idx(q, q);
            chol.band[d] = inv_h2 * (e + w + nn + s);
            if ix > 1 {
                let west = chol.idx(q, q - 1);
                chol.band[west] = -inv_h2 * w;
            }
            if iy > 1 {
                let south = chol.idx(q, q - ni);
                chol.band[south] = -inv_h2 * s;
            }
        }
    }
    let chol = chol
        .factor()
        .ok_or(DataError::NonConvergence { residual: f64::INFINITY })?;

    let interior = |t: &Tensor| -> Vec<f64> {
        (1..g - 1)
            .flat_map(|iy| (1..g - 1).map(move |ix| (iy, ix)))
            .map(|(iy, ix)| t.data()[iy * g + ix])
            .collect()
    };
    let scatter = |x: &[f64]| -> Tensor {
        let mut u = Tensor::zeros(&[g, g]);
        for iy in 1..g - 1 {
            for ix in 1..g - 1 {
                u.data_mut()[iy * g + ix] = x[(iy - 1) * ni + (ix - 1)];
            }
        }
        u
    };

    let rhs = interior(f);
    let mut x = chol.solve(&rhs);
    // One step of iterative refinement.
    let u = scatter(&x);
    let r: Vec<f64> = rhs
        .iter()
        .zip(interior(&darcy_apply(a, &u)))
        .map(|(b, au)| b - au)
        .collect();
    for (xi, di) in x.iter_mut().zip(chol.solve(&r)) {
        *xi += di;
    }
    let u = scatter(&x);

    let scale = f.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residual = darcy_residual(a, f, &u)?;
    if !(residual <= SOLVE_TOL * scale) {
        return Err(DataError::NonConvergence { residual });
    }
    Ok(u)
}

// ---------------------------------------------------------------------------
// Generators

/// Cosine-series Gaussian random field on the node grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSettings {
    /// Highest cosine mode per axis.
    pub modes: usize,
    /// Length-scale parameter.
    pub tau: f64,
    /// Spectral decay exponent.
    pub decay: f64,
}

impl Default for GrfSettings {
    fn default() -> Self {
        Self {
            modes: 6,
            tau: 3.0,
            decay: 2.0,
        }
    }
}

/// `sum xi * (pi^2 (k1^2 + k2^2) + tau^2)^(-decay/2) cos(pi k1 x) cos(pi k2 y)`
/// over `0 <= k1, k2 <= modes` except the constant mode, `xi ~ N(0, 1)`.
pub fn gaussian_random_field(rng: &mut impl Rng, g: usize, s: &GrfSettings) -> Tensor {
    let h = 1.0 / (g - 1) as f64;
    let cos: Vec<Vec<f64>> = (0..=s.modes)
        .map(|k| (0..g).map(|i| (PI * k as f64 * i as f64 * h).cos()).collect())
        .collect();
    let mut field = Tensor::zeros(&[g, g]);
    for k1 in 0..=s.modes {
        for k2 in 0..=s.modes {
            if k1 == 0 && k2 == 0 {
                continue;
            }
            let xi: f64 = rng.sample(StandardNormal);
            let lambda = PI * PI * (k1 * k1 + k2 * k2) as f64 + s.tau * s.tau;
            let amp = xi * lambda.powf(-s.decay / 2.0);
            let out = field.data_mut();
            for iy in 0..g {
                for ix in 0..g {
                    out[iy * g + ix] += amp * cos[k1][ix] * cos[k2][iy];
                }
            }
        }
    }
    field
}

/// Two-phase medium: `A_HI` where the field is non-negative, `A_LO` elsewhere.
pub fn threshold_coefficient(field: &Tensor) -> Tensor {
    let data = field
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { A_HI } else { A_LO })
        .collect();
    Tensor::new(field.shape(), data).expect("same shape")
}

pub fn generate_darcy(n: usize, g: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || g < 8 {
        return Err(DataError::InvalidArgument(format!(
            "darcy needs n >= 1 and grid >= 8, got n={n}, grid={g}"
        )));
    }
    let grf = GrfSettings::default();
    let m = g * g;
    let forcing = Tensor::full(&[g, g], DARCY_FORCING);
    let mut inputs = Vec::with_capacity(n * m);
    let mut outputs = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let a = threshold_coefficient(&gaussian_random_field(&mut rng, g, &grf));
        let u = solve_darcy_fd(&a, &forcing)?;
        inputs.extend_from_slice(a.data());
        outputs.extend_from_slice(u.data());
    }
    Dataset::assemble(
        "darcy",
        seed,
        PointSet::unit_grid(g)?,
        Tensor::new(&[n, m, 1], inputs)?,
        Tensor::new(&[n, m, 1], outputs)?,
        Generator::Darcy {
            grid: g,
            a_lo: A_LO,
            a_hi: A_HI,
            forcing: DARCY_FORCING,
            grf,
        },
    )
}

pub const ANNULUS_CENTER: [f64; 2] = [0.5, 0.5];
pub const REF_INNER: f64 = 0.2;
pub const REF_OUTER: f64 = 0.45;
const NOTCH_RADIUS: f64 = 0.3;
pub const POINTCLOUD_TARGET: &str = "u = 10 (r - inner)(outer - r)(1 + 0.5 cos(2 theta)), \
    with (r, theta) the polar coordinates about (0.5, 0.5) of the deformed point (the input features); \
    a reference point at radius r0 maps to r = inner + (r0 - 0.2) / 0.25 * (outer - inner) at the same angle";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnulusParams {
    pub inner: f64,
    pub outer: f64,
}

/// Closed-form point-cloud target at polar coordinates `(r, theta)`.
pub fn pointcloud_target(r: f64, theta: f64, p: AnnulusParams) -> f64 {
    10.0 * (r - p.inner) * (p.outer - r) * (1.0 + 0.5 * (2.0 * theta).cos())
}

fn polar(x: f64, y: f64) -> (f64, f64) {
    let (dx, dy) = (x - ANNULUS_CENTER[0], y - ANNULUS_CENTER[1]);
    (dx.hypot(dy), dy.atan2(dx))
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Reference annulus with a wedge notch cut from the outer rim. Samples deform
/// it radially; inputs are the deformed coordinates, the stored geometry is
/// the reference.
pub fn generate_pointcloud_task(n: usize, m: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || m < 16 {
        return Err(DataError::InvalidArgument(format!(
            "pointcloud needs n >= 1 and m >= 16, got n={n}, m={m}"
        )));
    }
    let mut rng = sample_rng(seed, GEOMETRY_STREAM);
    let notch_angle = rng.random_range(0.0..2.0 * PI);
    let notch_half_width = rng.random_range(0.2..0.5);
    let mut coords = Vec::with_capacity(2 * m);
    while coords.len() < 2 * m {
        let x = rng.random_range(0.0..1.0);
        let y = rng.random_range(0.0..1.0);
        let (r, theta) = polar(x, y);
        let notched = r > NOTCH_RADIUS && angle_gap(theta, notch_angle) < notch_half_width;
        if (REF_INNER..=REF_OUTER).contains(&r) && !notched {
            coords.push(x);
            coords.push(y);
        }
    }
    let geometry = PointSet::new(Tensor::new(&[m, 2], coords)?)?;

    let mut samples = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * m * 2);
    let mut outputs = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let p = AnnulusParams {
            inner: rng.random_range(0.15..0.25),
            outer: rng.random_range(0.40..0.48),
        };
        for j in 0..m {
            let pt = geometry.point(j);
            let (r0, theta) = polar(pt[0], pt[1]);
            let r = p.inner + (r0 - REF_INNER) / (REF_OUTER - REF_INNER) * (p.outer - p.inner);
            inputs.push(ANNULUS_CENTER[0] + r * theta.cos());
            inputs.push(ANNULUS_CENTER[1] + r * theta.sin());
            outputs.push(pointcloud_target(r, theta, p));
        }
        samples.push(p);
    }
    Dataset::assemble(
        "pointcloud",
        seed,
        geometry,
        Tensor::new(&[n, m, 2], inputs)?,
        Tensor::new(&[n, m, 1], outputs)?,
        Generator::PointCloud {
            points: m,
            reference_inner: REF_INNER,
            reference_outer: REF_OUTER,
            notch_angle,
            notch_half_width,
            notch_radius: NOTCH_RADIUS,
            target: POINTCLOUD_TARGET.to_string(),
            samples,
        },
    )
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Per-channel mean and population std of `t` `[N, M, C]` over `samples`.
    /// A std below `1e-12` is stored as 1.
    pub fn compute(t: &Tensor, samples: &[usize]) -> Self {
        let (m, c) = (t.shape()[1], t.shape()[2]);
        let count = (samples.len() * m) as f64;
        let rows = || {
            samples
                .iter()
                .flat_map(move |&s| (0..m).map(move |p| t.row_of(s, p, m, c)))
        };
        let mut mean = vec![0.0; c];
        for row in rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= count);
        let mut var = vec![0.0; c];
        for row in rows() {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s < STD_GUARD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    /// `(x - mean) / std` on a `[M, C]` field.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        Tensor::from_fn(x.shape(), |i| (x.data()[i] - self.mean[i % c]) / self.std[i % c])
    }

    /// `x * std + mean` on a `[M, C]` field.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        Tensor::from_fn(x.shape(), |i| x.data()[i] * self.std[i % c] + self.mean[i % c])
    }
}

trait SampleRows {
    fn row_of(&self, sample: usize, point: usize, m: usize, c: usize) -> &[f64];
}

impl SampleRows for Tensor {
    fn row_of(&self, sample: usize, point: usize, m: usize, c: usize) -> &[f64] {
        let start = (sample * m + point) * c;
        &self.data()[start..start + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Darcy {
        grid: usize,
        a_lo: f64,
        a_hi: f64,
        forcing: f64,
        grf: GrfSettings,
    },
    PointCloud {
        points: usize,
        reference_inner: f64,
        reference_outer: f64,
        notch_angle: f64,
        notch_half_width: f64,
        notch_radius: f64,
        target: String,
        samples: Vec<AnnulusParams>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub num_samples: usize,
    pub num_points: usize,
    pub in_channels: usize,
    pub coord_dim: usize,
    pub out_channels: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub input_stats: ChannelStats,
    pub output_stats: ChannelStats,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: PointSet,
    pub inputs: Tensor,
    pub outputs: Tensor,
    pub manifest: Manifest,
}

/// Seeded shuffle of `0..n`, then 80/20 train/test.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sample_rng(seed, SPLIT_STREAM));
    let n_test = ((n as f64 * TEST_FRACTION).round() as usize).min(n.saturating_sub(1));
    let test = idx.split_off(n - n_test);
    (idx, test)
}

impl Dataset {
    fn assemble(
        name: &str,
        seed: u64,
        geometry: PointSet,
        inputs: Tensor,
        outputs: Tensor,
        generator: Generator,
    ) -> Result<Self, DataError> {
        let n = inputs.shape()[0];
        let (train, test) = split_indices(n, seed);
        let manifest = Manifest {
            name: name.to_string(),
            seed,
            num_samples: n,
            num_points: geometry.len(),
            in_channels: inputs.shape()[2],
            coord_dim: geometry.dim(),
            out_channels: outputs.shape()[2],
            train_size: train.len(),
            test_size: test.len(),
            input_stats: ChannelStats::compute(&inputs, &train),
            output_stats: ChannelStats::compute(&outputs, &train),
            train_indices: train,
            test_indices: test,
            generator,
        };
        let ds = Self {
            geometry,
            inputs,
            outputs,
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DataError> {
        let man = &self.manifest;
        let bad = |msg: String| Err(DataError::Malformed(msg));
        let (n, m) = (man.num_samples, man.num_points);
        if n == 0 {
            return bad("dataset has no samples".into());
        }
        if self.geometry.len() != m || self.geometry.dim() != man.coord_dim {
            return bad(format!(
                "geometry [{}, {}] does not match manifest [{m}, {}]",
                self.geometry.len(),
                self.geometry.dim(),
                man.coord_dim
            ));
        }
        if self.inputs.shape() != [n, m, man.in_channels] {
            return bad(format!("inputs {:?} do not match manifest", self.inputs.shape()));
        }
        if self.outputs.shape() != [n, m, man.out_channels] {
            return bad(format!("outputs {:?} do not match manifest", self.outputs.shape()));
        }
        let mut seen = vec![false; n];
        for &i in man.train_indices.iter().chain(&man.test_indices) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return bad(format!("split index {i} is out of range or repeated"));
            }
        }
        if seen.contains(&false)
            || man.train_indices.len() != man.train_size
            || man.test_indices.len() != man.test_size
        {
            return bad("train/test split does not partition the samples".into());
        }
        if man.input_stats.mean.len() != man.in_channels || man.output_stats.mean.len() != man.out_channels {
            return bad("normalization statistics have the wrong channel count".into());
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn num_points(&self) -> usize {
        self.manifest.num_points
    }

    fn slice(t: &Tensor, i: usize) -> Tensor {
        let (m, c) = (t.shape()[1], t.shape()[2]);
        Tensor::new(&[m, c], t.data()[i * m * c..(i + 1) * m * c].to_vec()).expect("sample slice")
    }

    /// Raw input field of sample `i`, `[M, C_f]`.
    pub fn input(&self, i: usize) -> Tensor {
        Self::slice(&self.inputs, i)
    }

    /// Raw output field of sample `i`, `[M, C_u]`.
    pub fn output(&self, i: usize) -> Tensor {
        Self::slice(&self.outputs, i)
    }

    pub fn normalized_input(&self, i: usize) -> Tensor {
        self.manifest.input_stats.normalize(&self.input(i))
    }

    pub fn normalized_output(&self, i: usize) -> Tensor {
        self.manifest.output_stats.normalize(&self.output(i))
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_tensor(&dir.join("geometry.la2t"), ds.geometry.coords())?;
    save_tensor(&dir.join("inputs.la2t"), &ds.inputs)?;
    save_tensor(&dir.join("outputs.la2t"), &ds.outputs)?;
    let manifest = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&ds.manifest)?;
    json.push('\n');
    fs::write(&manifest, json).map_err(io_err(&manifest))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let check_rank = |t: Tensor, rank: usize, what: &str| {
        if t.rank() == rank {
            Ok(t)
        } else {
            Err(DataError::Malformed(format!("{what} has rank {}, expected {rank}", t.rank())))
        }
    };
    let geometry = check_rank(load_tensor(&dir.join("geometry.la2t"))?, 2, "geometry")?;
    let inputs = check_rank(load_tensor(&dir.join("inputs.la2t"))?, 3, "inputs")?;
    let outputs = check_rank(load_tensor(&dir.join("outputs.la2t"))?, 3, "outputs")?;
    let ds = Dataset {
        geometry: PointSet::new(geometry)?,
        inputs,
        outputs,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mms_error(g: usize) -> f64 {
        manufactured_solution_error(g).unwrap()
    }

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let u = solve_darcy_fd(&Tensor::ones(&[9, 9]), &Tensor::zeros(&[9, 9])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manufactured_solution_converges_second_order() {
        let (e16, e32) = (mms_error(16), mms_error(32));
        assert!(e16 / e32 >= 3.5, "ratio {}", e16 / e32);
    }

    #[test]
    fn symmetric_problem_symmetric_solution() {
        let g = 12;
        let a = grid_fn(g, |x, y| 1.0 + x * y + (x + y).powi(2));
        let f = grid_fn(g, |x, y| (x * y * 7.0).cos());
        let u = solve_darcy_fd(&a, &f).unwrap();
        for iy in 0..g {
            for ix in 0..g {
                assert!((u.at(&[iy, ix]) - u.at(&[ix, iy])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_coefficients() {
        let mut a = Tensor::ones(&[5, 5]);
        a.data_mut()[7] = 0.0;
        assert!(matches!(
            solve_darcy_fd(&a, &Tensor::ones(&[5, 5])),
            Err(DataError::NonPositiveCoefficient { index: 7, .. })
        ));
        assert!(solve_darcy_fd(&Tensor::ones(&[2, 2]), &Tensor::ones(&[2, 2])).is_err());
    }

    #[test]
    fn darcy_dataset_shapes_and_residuals() {
        let ds = generate_darcy(6, 16, 7).unwrap();
        assert_eq!(ds.inputs.shape(), &[6, 256, 1]);
        assert_eq!(ds.outputs.shape(), &[6, 256, 1]);
        assert_eq!(ds.geometry.dim(), 2);
        let f = Tensor::full(&[16, 16], DARCY_FORCING);
        for i in 0..6 {
            let a = ds.input(i).reshape(&[16, 16]).unwrap();
            let u = ds.output(i).reshape(&[16, 16]).unwrap();
            assert!(darcy_residual(&a, &f, &u).unwrap() < 1e-8);
            assert!(a.data().iter().all(|&v| v == A_LO || v == A_HI));
        }
        assert_eq!(generate_darcy(6, 16, 7).unwrap(), ds);
        assert!(generate_darcy(1, 4, 7).is_err());
    }

    #[test]
    fn pointcloud_target_matches_closed_form() {
        let ds = generate_pointcloud_task(3, 64, 11).unwrap();
        assert_eq!(ds.inputs.shape(), &[3, 64, 2]);
        let Generator::PointCloud { samples, .. } = &ds.manifest.generator else {
            panic!("wrong generator");
        };
        for (i, p) in samples.iter().enumerate() {
            let (x, u) = (ds.input(i), ds.output(i));
            for j in 0..64 {
                let (r, theta) = polar(x.row(j)[0], x.row(j)[1]);
                assert!((pointcloud_target(r, theta, *p) - u.row(j)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (train, test) = split_indices(200, 3);
        assert_eq!((train.len(), test.len()), (160, 40));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 3), (vec![0], vec![]));
    }

    #[test]
    fn stats_normalize_train_split() {
        let ds = generate_darcy(10, 8, 1).unwrap();
        let stats = &ds.manifest.output_stats;
        let normed: Vec<f64> = ds
            .manifest
            .train_indices
            .iter()
            .flat_map(|&i| ds.normalized_output(i).into_data())
            .collect();
        let mean = normed.iter().sum::<f64>() / normed.len() as f64;
        let var = normed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / normed.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
        let x = ds.output(0);
        assert!(stats.denormalize(&stats.normalize(&x)).max_abs_diff(&x) < 1e-15);
    }
}
