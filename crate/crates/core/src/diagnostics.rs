//! Finite-difference gradient cases covering every differentiable operation,
//! the attention building blocks, a full layer and the full model.
//!
//! Each case draws fresh random inputs per instance and reduces its output to
//! a scalar with a fixed, non-uniform weighting so that every output entry
//! contributes a distinct gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    gla, global_attention, l1_normalize_rows, la2_layer, linear_attention, local_attention, soft_mask,
    weighted_knn_features, GlaLayer, GlaLayerParams, LayerSettings,
};
use crate::geometry::{knn_indices, KnnIndex, PointSet};
use crate::gradcheck::{check, GradCheck};
use crate::model::{forward, ModelConfig, ModelError, OperatorModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-6;

type CaseFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>>;
type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

pub struct GradCase {
    pub name: &'static str,
    inputs: InputFn,
    f: CaseFn,
}

impl GradCase {
    /// One random instance of this case's inputs.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (self.inputs)(rng)
    }

    /// The scalar the case differentiates, evaluated without gradients.
    pub fn value_at(&self, inputs: &[Tensor]) -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok((self.f)(&tape, &vars)?.value().data()[0])
    }

    pub fn check_at(&self, inputs: &[Tensor], step: f64) -> Result<GradCheck, TensorError> {
        check(inputs, step, &self.f)
    }

    /// Worst relative error over `instances` random draws.
    pub fn run(&self, instances: usize, seed: u64) -> Result<CaseResult, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let inputs = self.draw(&mut rng);
            worst = worst.max(self.check_at(&inputs, FD_STEP)?.max_rel_error);
        }
        Ok(CaseResult {
            name: self.name,
            instances,
            max_rel_error: worst,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ out ⊙ W` with a fixed weighting `W` in `[-1, 1)`.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>, TensorError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(
        &shape,
        (0..n).map(|i| ((i as f64 + 1.0) * 0.754_877_666).fract() * 2.0 - 1.0).collect(),
    )?;
    Ok(out.mul(&out.tape().constant(w))?.sum())
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: Box::new(inputs),
        f: Box::new(f),
    }
}

/// Inputs drawn uniformly from `[-2, 2)` with the given shapes.
fn shapes(list: &'static [&'static [usize]]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| list.iter().map(|s| uniform(rng, s, -2.0, 2.0)).collect()
}

fn random_knn(m: usize, k: usize, seed: u64) -> KnnIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = PointSet::new(uniform(&mut rng, &[m, 2], 0.0, 1.0)).expect("finite points");
    knn_indices(&pts, k).expect("k <= m")
}

fn random_layer(rng: &mut ChaCha8Rng, hidden: usize) -> Vec<Tensor> {
    let mut p = GlaLayerParams::init(rng, hidden, 2 * hidden);
    p.mask_s = uniform(rng, &[1], -2.0, 2.0);
    p.ln1_gamma = uniform(rng, &[hidden], 0.5, 2.0);
    p.ln1_beta = uniform(rng, &[hidden], -0.5, 0.5);
    p.bq_g = uniform(rng, p.bq_g.shape(), -0.5, 0.5);
    p.bk_g = uniform(rng, p.bk_g.shape(), -0.5, 0.5);
    p.fields().into_iter().map(|(_, t)| t.clone()).collect()
}

fn layer_from<'t>(template: &GlaLayerParams, vars: &[Var<'t>]) -> GlaLayer<Var<'t>> {
    let mut it = vars.iter().copied();
    template.map(|_, _| it.next().expect("one var per field"))
}

const M: usize = 8;
const C: usize = 8;
const K: usize = 4;

/// Every tape operation, exercised through its public method.
pub fn op_cases() -> Vec<GradCase> {
    let gather_idx: Vec<usize> = random_knn(M, K, 1).as_slice().to_vec();
    vec![
        case("add", shapes(&[&[4, 3], &[4, 3]]), |_, v| project(v[0].add(&v[1])?)),
        case("add_broadcast_row", shapes(&[&[2, 4, 3], &[3]]), |_, v| project(v[0].add(&v[1])?)),
        case("add_broadcast_general", shapes(&[&[2, 4, 3], &[2, 1, 3]]), |_, v| {
            project(v[0].add(&v[1])?)
        }),
        case("sub", shapes(&[&[4, 3], &[4, 1]]), |_, v| project(v[0].sub(&v[1])?)),
        case("mul", shapes(&[&[4, 3], &[4, 3]]), |_, v| project(v[0].mul(&v[1])?)),
        case("mul_scalar_rhs", shapes(&[&[4, 3], &[1]]), |_, v| project(v[0].mul(&v[1])?)),
        case(
            "div",
            |rng| vec![uniform(rng, &[4, 3], -2.0, 2.0), uniform(rng, &[4, 3], 0.5, 2.0)],
            |_, v| project(v[0].div(&v[1])?),
        ),
        case("affine", shapes(&[&[5, 2]]), |_, v| project(v[0].affine(-1.5, 0.25)?)),
        case("scale", shapes(&[&[5, 2]]), |_, v| project(v[0].scale(3.0)?)),
        case("neg", shapes(&[&[5, 2]]), |_, v| project(v[0].neg()?)),
        case("abs", shapes(&[&[5, 2]]), |_, v| project(v[0].abs()?)),
        case("sigmoid", shapes(&[&[5, 2]]), |_, v| project(v[0].sigmoid()?)),
        case("gelu", shapes(&[&[5, 2]]), |_, v| project(v[0].gelu()?)),
        case("matmul", shapes(&[&[4, 3], &[3, 5]]), |_, v| project(v[0].matmul(&v[1])?)),
        case("matmul_batched", shapes(&[&[2, 4, 3], &[2, 3, 5]]), |_, v| {
            project(v[0].matmul(&v[1])?)
        }),
        case("matmul_shared_rhs", shapes(&[&[2, 4, 3], &[3, 5]]), |_, v| {
            project(v[0].matmul(&v[1])?)
        }),
        case("matmul_nt", shapes(&[&[4, 3], &[5, 3]]), |_, v| project(v[0].matmul_nt(&v[1])?)),
        case("matmul_nt_batched", shapes(&[&[2, 1, 3], &[2, 4, 3]]), |_, v| {
            project(v[0].matmul_nt(&v[1])?)
        }),
        case("matmul_tn", shapes(&[&[4, 3], &[4, 5]]), |_, v| project(v[0].matmul_tn(&v[1])?)),
        case("sum", shapes(&[&[3, 4]]), |_, v| v[0].sum().scale(0.5)),
        case("mean", shapes(&[&[3, 4]]), |_, v| v[0].mean().scale(2.0)),
        case("sum_axis_0", shapes(&[&[3, 4]]), |_, v| project(v[0].sum_axis(0)?)),
        case("sum_axis_1", shapes(&[&[2, 3, 4]]), |_, v| project(v[0].sum_axis(1)?)),
        case("l1_lastdim", shapes(&[&[3, 4]]), |_, v| project(v[0].l1_lastdim()?)),
        case("l2_lastdim", shapes(&[&[3, 4]]), |_, v| project(v[0].l2_lastdim()?)),
        case("softmax_lastdim", shapes(&[&[2, 3, 4]]), |_, v| project(v[0].softmax_lastdim()?)),
        case("layer_norm", shapes(&[&[3, 6], &[6], &[6]]), |_, v| {
            project(v[0].layer_norm(&v[1], &v[2], 1e-5)?)
        }),
        case("gather_rows", shapes(&[&[M, 3]]), move |_, v| {
            project(v[0].gather_rows(&gather_idx, K)?)
        }),
        case("concat_lastdim", shapes(&[&[3, 2], &[3, 4]]), |_, v| {
            project(v[0].concat_lastdim(&v[1])?)
        }),
        case("slice_lastdim", shapes(&[&[2, 3, 5]]), |_, v| project(v[0].slice_lastdim(1, 3)?)),
        case("reshape", shapes(&[&[3, 4]]), |_, v| project(v[0].reshape(&[2, 6])?)),
        case("transpose", shapes(&[&[3, 4]]), |_, v| project(v[0].transpose()?)),
        case("guard_small", shapes(&[&[4, 3]]), |_, v| project(v[0].guard_small(1e-3)?)),
    ]
}

/// Attention building blocks and a complete layer.
pub fn layer_cases() -> Vec<GradCase> {
    let template = GlaLayerParams::init(&mut ChaCha8Rng::seed_from_u64(0), C, 2 * C);
    let knn = random_knn(M, K, 2);
    let layer_inputs = |rng: &mut ChaCha8Rng| {
        let mut v = vec![uniform(rng, &[M, C], -2.0, 2.0)];
        v.extend(random_layer(rng, C));
        v
    };
    let settings = LayerSettings::default();
    let (t1, t2, t3, t4, t5) = (
        template.clone(),
        template.clone(),
        template.clone(),
        template.clone(),
        template,
    );
    let (knn_a, knn_b) = (knn.clone(), knn);

    vec![
        case("soft_mask", shapes(&[&[1]]), |_, v| project(soft_mask(&v[0], 10.0, 6)?)),
        case("weighted_knn_features", shapes(&[&[M, K, 3], &[K]]), |_, v| {
            project(weighted_knn_features(&v[0], &v[1])?)
        }),
        case("l1_normalize_rows", shapes(&[&[M, 4]]), |_, v| project(l1_normalize_rows(&v[0])?)),
        case(
            "linear_attention",
            // Positive queries and keys keep the normalizer away from zero.
            |rng| {
                vec![
                    uniform(rng, &[M, 4], 0.1, 2.0),
                    uniform(rng, &[M, 4], 0.1, 2.0),
                    uniform(rng, &[M, 4], -2.0, 2.0),
                ]
            },
            |_, v| project(linear_attention(&v[0], &v[1], &v[2])?),
        ),
        case("global_attention", layer_inputs, move |_, v| {
            project(global_attention(&v[0], &layer_from(&t1, &v[1..]), 1)?)
        }),
        case("global_attention_two_heads", layer_inputs, move |_, v| {
            project(global_attention(&v[0], &layer_from(&t2, &v[1..]), 2)?)
        }),
        case(
            "local_attention",
            move |rng| {
                let mut v = vec![uniform(rng, &[M, C], -2.0, 2.0), uniform(rng, &[M, K, C], -2.0, 2.0)];
                v.extend(random_layer(rng, C));
                v
            },
            move |_, v| project(local_attention(&v[0], &v[1], &layer_from(&t3, &v[2..]), 2)?),
        ),
        case("gla", layer_inputs, move |_, v| {
            project(gla(&v[0], &knn_a, &layer_from(&t4, &v[1..]), &settings)?)
        }),
        case("la2_layer", layer_inputs, move |_, v| {
            project(la2_layer(&v[0], &knn_b, &layer_from(&t5, &v[1..]), &settings)?)
        }),
    ]
}

/// Full operator at `M=16, C=8, L=2, K=4`, gradients w.r.t. the input field
/// and every parameter.
pub fn model_case() -> GradCase {
    let config = ModelConfig {
        layers: 2,
        hidden: 8,
        k: 4,
        seed: 0,
        ..ModelConfig::default()
    };
    let m = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points = PointSet::new(uniform(&mut rng, &[m, 2], 0.0, 1.0)).expect("finite points");
    let knn = knn_indices(&points, config.k).expect("k <= m");
    let template = OperatorModel::init(config.clone()).expect("valid config");
    let cfg = config.clone();
    case(
        "full_model",
        move |rng| {
            let mut model = OperatorModel::init(ModelConfig {
                seed: rng.random(),
                ..config.clone()
            })
            .expect("valid config");
            for layer in &mut model.layers {
                layer.mask_s = uniform(rng, &[1], -2.0, 2.0);
            }
            let mut v = vec![uniform(rng, &[m, 1], -2.0, 2.0)];
            v.extend(model.named_params().into_iter().map(|(_, t)| t.clone()));
            v
        },
        move |_, v| {
            let bound = template.assemble(&v[1..]).expect("one var per parameter");
            match forward(&cfg, &bound, &v[0], &points, &knn) {
                Ok(out) => project(out),
                Err(ModelError::Tensor(e)) => Err(e),
                Err(e) => panic!("full model case is malformed: {e}"),
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_weights_are_distinct() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3, 3]));
        let g = tape.backward(&project(x).unwrap()).unwrap().get(&x);
        let mut vals = g.into_data();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals.len(), 9);
    }
}
