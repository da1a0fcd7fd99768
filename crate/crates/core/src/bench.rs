//! Forward-pass timings of the attention branches against a dense
//! pairwise-softmax reference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    dense_attention_reference, global_attention, local_attention, masked_patches, GlaLayerParams,
};
use crate::geometry::{knn_indices_accelerated, GeometryError, PointSet};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark case: {0}")]
    InvalidCase(String),
    #[error("case needs about {needed} bytes, above the {cap}-byte memory cap")]
    MemoryCap { needed: usize, cap: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Linear-cost global branch.
    Global,
    /// Patch-local softmax branch, including the gather and soft mask.
    Local,
    /// Full `M × M` softmax attention.
    Dense,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub kind: AttentionKind,
    pub points: usize,
    /// Patch size; only the local branch reads it.
    pub k: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    /// Timed repeats after one untimed warm-up.
    pub repeats: usize,
    pub memory_cap_bytes: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            repeats: 5,
            memory_cap_bytes: 2 << 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: BenchCase,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
}

/// Rough peak working set of one forward pass, in bytes.
pub fn estimated_bytes(case: &BenchCase) -> usize {
    let (m, c, k) = (case.points, case.hidden, case.k);
    let floats = match case.kind {
        AttentionKind::Global => 12 * m * c,
        AttentionKind::Local => 6 * m * k * c + 8 * m * c,
        AttentionKind::Dense => 2 * m * m + 6 * m * c,
    };
    floats.saturating_mul(8)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `settings.repeats` forward passes of `case`.
pub fn run_case(case: &BenchCase, settings: &BenchSettings) -> Result<BenchRow, BenchError> {
    let BenchCase { kind, points: m, k, hidden } = *case;
    if settings.repeats == 0 {
        return Err(BenchError::InvalidCase("repeats must be at least 1".into()));
    }
    if m == 0 || hidden < 2 || hidden % 2 != 0 {
        return Err(BenchError::InvalidCase(format!(
            "need M >= 1 and an even hidden width >= 2, got M={m}, C={hidden}"
        )));
    }
    if kind == AttentionKind::Local && !(1..=m).contains(&k) {
        return Err(BenchError::InvalidCase(format!("patch size K={k} must be in 1..={m}")));
    }
    let needed = estimated_bytes(case);
    if needed > settings.memory_cap_bytes {
        return Err(BenchError::MemoryCap {
            needed,
            cap: settings.memory_cap_bytes,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let layer = GlaLayerParams::init(&mut rng, hidden, 2 * hidden);
    let h = Tensor::from_fn(&[m, hidden], |_| rng.random_range(-1.0..1.0));
    let knn = match kind {
        AttentionKind::Local => {
            let pts = PointSet::new(Tensor::from_fn(&[m, 2], |_| rng.random_range(0.0..1.0)))?;
            Some(knn_indices_accelerated(&pts, k)?)
        }
        _ => None,
    };

    let once = || -> Result<f64, BenchError> {
        let started = Instant::now();
        match kind {
            AttentionKind::Global => {
                let tape = Tape::new();
                let p = layer.map(|_, t| tape.constant(t.clone()));
                let out = global_attention(&tape.constant(h.clone()), &p, 1)?;
                std::hint::black_box(out.value());
            }
            AttentionKind::Local => {
                let tape = Tape::new();
                let p = layer.map(|_, t| tape.constant(t.clone()));
                let h_bar = tape.constant(h.clone());
                let patches = masked_patches(&h_bar, knn.as_ref().expect("local knn"), &p, 10.0)?;
                let out = local_attention(&h_bar, &patches, &p, 1)?;
                std::hint::black_box(out.value());
            }
            AttentionKind::Dense => {
                let out = dense_attention_reference(&h, &layer.wq_g, &layer.wk_g, &layer.wv_g)?;
                std::hint::black_box(out);
            }
        }
        Ok(started.elapsed().as_secs_f64())
    };
    once()?;
    let samples = (0..settings.repeats).map(|_| once()).collect::<Result<Vec<_>, _>>()?;
    Ok(BenchRow {
        case: *case,
        median_seconds: median(&samples),
        samples,
    })
}

/// Least-squares slope of `log t` against `log size`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_power_laws() {
        let quad: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((scaling_exponent(&quad) - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [10.0, 20.0].iter().map(|&x| (x, 0.5 * x)).collect();
        assert!((scaling_exponent(&lin) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn runs_each_kind_and_enforces_cap() {
        let settings = BenchSettings {
            repeats: 2,
            ..BenchSettings::default()
        };
        for kind in [AttentionKind::Global, AttentionKind::Local, AttentionKind::Dense] {
            let case = BenchCase {
                kind,
                points: 64,
                k: 8,
                hidden: 8,
            };
            let row = run_case(&case, &settings).unwrap();
            assert_eq!(row.samples.len(), 2);
            assert!(row.median_seconds >= 0.0);
        }
        let huge = BenchCase {
            kind: AttentionKind::Dense,
            points: 1 << 20,
            k: 1,
            hidden: 8,
        };
        assert!(matches!(run_case(&huge, &settings), Err(BenchError::MemoryCap { .. })));
        let bad_k = BenchCase {
            kind: AttentionKind::Local,
            points: 4,
            k: 5,
            hidden: 8,
        };
        assert!(matches!(run_case(&bad_k, &settings), Err(BenchError::InvalidCase(_))));
    }
}
