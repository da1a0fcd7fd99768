//! Global-local attention block.
//!
//! Each layer normalizes its input, gathers every point's K-nearest-neighbor
//! patch, attenuates the patch with a rank-based soft mask, and runs two
//! branches side by side:
//!
//! * a global branch: linear attention with ℓ1-normalized queries and keys,
//!   evaluated right-associated so no `M × M` matrix is ever formed;
//! * a local branch: softmax attention of each point over its own patch.
//!
//! The two `d = C/2` wide outputs are concatenated and mixed back to `C`
//! channels, then a feed-forward sub-block follows (both with pre-norm and
//! residual connections).

use rand::Rng;

use crate::geometry::KnnIndex;
use crate::params::param_group;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Rows whose ℓ1 norm falls below this are left unnormalized.
pub const L1_GUARD: f64 = 1e-12;
/// Linear-attention rows whose normalizer falls below this use 1 instead.
pub const DENOM_GUARD: f64 = 1e-12;

/// Non-learned settings shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSettings {
    /// Soft-mask sharpness.
    pub alpha: f64,
    /// Attention heads per branch; must divide `d`.
    pub heads: usize,
    /// Layer-norm epsilon.
    pub eps: f64,
}

impl Default for LayerSettings {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            heads: 1,
            eps: 1e-5,
        }
    }
}

param_group! {
    /// Parameters of one layer. Shapes, with `d = C/2`:
    /// projections `[C, d]`, their biases `[d]`, fusion `[2d, C]` + `[C]`,
    /// feed-forward `[C, C_ff]`/`[C_ff, C]`, norms `[C]`, and the soft-mask
    /// logit `mask_s` `[1]`. `wk_l`/`wv_l` act on masked neighbor features and
    /// carry no bias, so a fully masked neighbor contributes a zero key/value.
    GlaLayer {
        ln1_gamma, ln1_beta,
        wq_g, bq_g, wk_g, bk_g, wv_g, bv_g,
        wq_l, bq_l, wk_l, wv_l,
        w_out, b_out,
        ln2_gamma, ln2_beta,
        w1, b1, w2, b2,
        mask_s,
    }
}

pub type GlaLayerParams = GlaLayer<Tensor>;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight matrix.
pub fn uniform_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

impl GlaLayerParams {
    pub fn init(rng: &mut impl Rng, hidden: usize, ff_hidden: usize) -> Self {
        let d = hidden / 2;
        Self {
            ln1_gamma: Tensor::ones(&[hidden]),
            ln1_beta: Tensor::zeros(&[hidden]),
            wq_g: uniform_weight(rng, hidden, d),
            bq_g: Tensor::zeros(&[d]),
            wk_g: uniform_weight(rng, hidden, d),
            bk_g: Tensor::zeros(&[d]),
            wv_g: uniform_weight(rng, hidden, d),
            bv_g: Tensor::zeros(&[d]),
            wq_l: uniform_weight(rng, hidden, d),
            bq_l: Tensor::zeros(&[d]),
            wk_l: uniform_weight(rng, hidden, d),
            wv_l: uniform_weight(rng, hidden, d),
            w_out: uniform_weight(rng, 2 * d, hidden),
            b_out: Tensor::zeros(&[hidden]),
            ln2_gamma: Tensor::ones(&[hidden]),
            ln2_beta: Tensor::zeros(&[hidden]),
            w1: uniform_weight(rng, hidden, ff_hidden),
            b1: Tensor::zeros(&[ff_hidden]),
            w2: uniform_weight(rng, ff_hidden, hidden),
            b2: Tensor::zeros(&[hidden]),
            mask_s: Tensor::zeros(&[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.ln1_gamma.numel()
    }

    /// Effective neighbor fraction `sigmoid(s)`.
    pub fn mask_fraction(&self) -> f64 {
        let s = self.mask_s.data()[0];
        1.0 / (1.0 + (-s).exp())
    }
}

impl GlaLayer<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> GlaLayer<Var<'t>> {
        self.map(|_, t| tape.param(t.clone()))
    }
}

pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>, TensorError> {
    x.matmul(w)?.add(b)
}

/// Rank weights `w_k = σ(-α (k - σ(s)(K-1) - 1))` for `k = 1..=K`.
/// `s` is a one-element variable; gradients flow through both sigmoids.
pub fn soft_mask<'t>(s: &Var<'t>, alpha: f64, k: usize) -> Result<Var<'t>, TensorError> {
    let tape = s.tape();
    let ranks = tape.constant(Tensor::from_fn(&[k], |i| (i + 1) as f64));
    let threshold = s.sigmoid()?.affine(k as f64 - 1.0, 1.0)?;
    ranks.sub(&threshold)?.scale(-alpha)?.sigmoid()
}

/// Plain-valued [`soft_mask`].
pub fn soft_mask_values(s: f64, alpha: f64, k: usize) -> Vec<f64> {
    let tape = Tape::new();
    let s = tape.constant(Tensor::full(&[1], s));
    soft_mask(&s, alpha, k)
        .expect("finite soft mask")
        .value()
        .into_data()
}

/// `h_knn[a, b, :] * w[b]`.
pub fn weighted_knn_features<'t>(h_knn: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>, TensorError> {
    let (hs, ws) = (h_knn.shape(), w.shape());
    if hs.len() != 3 || ws != [hs[1]] {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_knn_features",
            lhs: hs,
            rhs: ws,
        });
    }
    h_knn.mul(&w.reshape(&[hs[1], 1])?)
}

/// Divides each row by its ℓ1 norm over the last axis (rows with a norm
/// below [`L1_GUARD`] pass through unchanged).
pub fn l1_normalize_rows<'t>(x: &Var<'t>) -> Result<Var<'t>, TensorError> {
    x.div(&x.l1_lastdim()?.guard_small(L1_GUARD)?)
}

/// `Q̃ (K̃ᵀ V) D⁻¹ + Q̃` for normalized `q`, `k` and values `v`, all `[M, d]`.
///
/// `D = diag(|Q̃| (|K̃|ᵀ 1))` is the absolute interaction mass of each query.
/// It equals `Q̃ (K̃ᵀ 1)` for non-negative features, but stays positive when
/// features are signed, so each output row is a weighted average of value
/// rows with total weight magnitude at most one.
pub fn linear_attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>, TensorError> {
    let d = k.shape()[1];
    let kv = k.matmul_tn(v)?;
    let numer = q.matmul(&kv)?;
    let key_mass = k.abs()?.sum_axis(0)?.reshape(&[d, 1])?;
    let denom = q.abs()?.matmul(&key_mass)?.guard_small(DENOM_GUARD)?;
    numer.div(&denom)?.add(q)
}

fn head_slices<'t>(x: &Var<'t>, heads: usize) -> Result<Vec<Var<'t>>, TensorError> {
    if heads == 1 {
        return Ok(vec![*x]);
    }
    let width = *x.shape().last().expect("rank >= 1");
    let dh = width / heads;
    (0..heads).map(|h| x.slice_lastdim(h * dh, dh)).collect()
}

fn concat_heads<'t>(parts: Vec<Var<'t>>) -> Result<Var<'t>, TensorError> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one head");
    for p in it {
        acc = acc.concat_lastdim(&p)?;
    }
    Ok(acc)
}

/// Global branch on `h_bar` `[M, C]`, output `[M, d]`.
pub fn global_attention<'t>(
    h_bar: &Var<'t>,
    p: &GlaLayer<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>, TensorError> {
    let q = linear(h_bar, &p.wq_g, &p.bq_g)?;
    let k = linear(h_bar, &p.wk_g, &p.bk_g)?;
    let v = linear(h_bar, &p.wv_g, &p.bv_g)?;
    let outs = head_slices(&q, heads)?
        .iter()
        .zip(head_slices(&k, heads)?)
        .zip(head_slices(&v, heads)?)
        .map(|((q, k), v)| linear_attention(&l1_normalize_rows(q)?, &l1_normalize_rows(&k)?, &v))
        .collect::<Result<Vec<_>, _>>()?;
    concat_heads(outs)
}

/// Local branch: each point attends over its own weighted patch
/// `h_knn_w` `[M, K, C]`. Output `[M, d]`.
pub fn local_attention<'t>(
    h_bar: &Var<'t>,
    h_knn_w: &Var<'t>,
    p: &GlaLayer<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>, TensorError> {
    let (hs, ks) = (h_bar.shape(), h_knn_w.shape());
    if hs.len() != 2 || ks.len() != 3 || hs[0] != ks[0] || hs[1] != ks[2] {
        return Err(TensorError::ShapeMismatch {
            op: "local_attention",
            lhs: hs,
            rhs: ks,
        });
    }
    let (m, k) = (ks[0], ks[1]);
    let q = linear(h_bar, &p.wq_l, &p.bq_l)?;
    let keys = h_knn_w.matmul(&p.wk_l)?;
    let values = h_knn_w.matmul(&p.wv_l)?;
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs = head_slices(&q, heads)?
        .iter()
        .zip(head_slices(&keys, heads)?)
        .zip(head_slices(&values, heads)?)
        .map(|((q, kh), vh)| {
            let scores = q.reshape(&[m, 1, dh])?.matmul_nt(&kh)?.scale(scale)?;
            let attn = scores.softmax_lastdim()?;
            debug_assert_eq!(attn.shape(), vec![m, 1, k]);
            attn.matmul(&vh)?.reshape(&[m, dh])
        })
        .collect::<Result<Vec<_>, _>>()?;
    concat_heads(outs)
}

/// Gathered and soft-masked patches `[M, K, C]` for `h_bar`.
pub fn masked_patches<'t>(
    h_bar: &Var<'t>,
    knn: &KnnIndex,
    p: &GlaLayer<Var<'t>>,
    alpha: f64,
) -> Result<Var<'t>, TensorError> {
    let h_knn = h_bar.gather_rows(knn.as_slice(), knn.k())?;
    let w = soft_mask(&p.mask_s, alpha, knn.k())?;
    weighted_knn_features(&h_knn, &w)
}

/// Global-local fusion: `Linear(Concat(G(h̄), L(h̄, h̃_knn)))`, `[M, C]`.
pub fn gla<'t>(
    h_bar: &Var<'t>,
    knn: &KnnIndex,
    p: &GlaLayer<Var<'t>>,
    settings: &LayerSettings,
) -> Result<Var<'t>, TensorError> {
    let m = h_bar.shape()[0];
    if knn.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "gla",
            lhs: h_bar.shape(),
            rhs: vec![knn.len(), knn.k()],
        });
    }
    let patches = masked_patches(h_bar, knn, p, settings.alpha)?;
    let global = global_attention(h_bar, p, settings.heads)?;
    let local = local_attention(h_bar, &patches, p, settings.heads)?;
    linear(&global.concat_lastdim(&local)?, &p.w_out, &p.b_out)
}

/// One pre-norm block:
/// `ĥ = GLA(LN(h)) + h`, then `FFN(LN(ĥ)) + ĥ` with a GELU feed-forward.
pub fn la2_layer<'t>(
    h_prev: &Var<'t>,
    knn: &KnnIndex,
    p: &GlaLayer<Var<'t>>,
    settings: &LayerSettings,
) -> Result<Var<'t>, TensorError> {
    let h_bar = h_prev.layer_norm(&p.ln1_gamma, &p.ln1_beta, settings.eps)?;
    let h_hat = gla(&h_bar, knn, p, settings)?.add(h_prev)?;
    let z = h_hat.layer_norm(&p.ln2_gamma, &p.ln2_beta, settings.eps)?;
    let ff = linear(&linear(&z, &p.w1, &p.b1)?.gelu()?, &p.w2, &p.b2)?;
    ff.add(&h_hat)
}

/// Forward-only full pairwise softmax attention `softmax(QKᵀ/√d) V` over all
/// `M` points. Quadratic in `M`; kept as a runtime reference.
pub fn dense_attention_reference(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<Tensor, TensorError> {
    let q = h.matmul(wq)?;
    let k = h.matmul(wk)?;
    let v = h.matmul(wv)?;
    let (m, d) = (q.shape()[0], q.shape()[1]);
    let kt = Tensor::from_fn(&[d, m], |i| k.data()[(i % m) * d + i / m]);
    let mut scores = q.matmul(&kt)?;
    let scale = 1.0 / (d as f64).sqrt();
    for row in scores.data_mut().chunks_mut(m) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s * scale - mx).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    scores.matmul(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn soft_mask_anchor_and_values() {
        let w = soft_mask_values(0.0, 10.0, 3);
        assert_eq!(w[1], 0.5);
        // direct scalar evaluation of the rank weights at s = 0, K = 4
        let w = soft_mask_values(0.0, 10.0, 4);
        let want = [0.999_999_694, 0.993_307_149, 0.006_692_851, 3.059_022_e-7];
        assert!(close(&w, &want, 1e-9), "{w:?}");
    }

    #[test]
    fn weighted_features_identity_and_zeroing() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 + 1.0));
        let ones = tape.constant(Tensor::ones(&[2]));
        assert_eq!(weighted_knn_features(&h, &ones).unwrap().value(), h.value());
        let w = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let out = weighted_knn_features(&h, &w).unwrap().value();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]);
        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(weighted_knn_features(&h, &bad).is_err());
    }

    #[test]
    fn linear_attention_hand_example() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::new(&[1, 2], vec![3.0, 7.0]).unwrap());
        let out = linear_attention(
            &l1_normalize_rows(&q).unwrap(),
            &l1_normalize_rows(&k).unwrap(),
            &v,
        )
        .unwrap()
        .value();
        assert!(close(out.data(), &[3.5, 7.5], 1e-15), "{:?}", out.data());
    }

    #[test]
    fn zero_rows_stay_finite() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 2]));
        let k = tape.constant(Tensor::zeros(&[3, 2]));
        let v = tape.constant(Tensor::ones(&[3, 2]));
        let out = linear_attention(
            &l1_normalize_rows(&q).unwrap(),
            &l1_normalize_rows(&k).unwrap(),
            &v,
        )
        .unwrap()
        .value();
        assert!(out.is_finite());
    }

    #[test]
    fn signed_features_with_cancelling_mass_stay_bounded() {
        // Q̃ (K̃ᵀ 1) is exactly zero for the first query here.
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(&[2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap());
        let v = tape.constant(Tensor::new(&[2, 2], vec![3.0, -7.0, 2.0, 5.0]).unwrap());
        let out = linear_attention(&q, &k, &v).unwrap().value();
        // Row 0: (0.5 v0 - 0.5 v1) / 1 + q0.
        assert!(close(out.row(0), &[1.0, -5.5], 1e-15), "{:?}", out.data());
        // Row 1: v0 / 1 + q1.
        assert!(close(out.row(1), &[4.0, -7.0], 1e-15), "{:?}", out.data());
    }

    #[test]
    fn local_attention_hand_example() {
        // C = 2 so that d = 1; query/key/value projections pick channel 0.
        let tape = Tape::new();
        let mut p = GlaLayerParams::init(&mut ChaCha8Rng::seed_from_u64(1), 2, 4);
        p.wq_l = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        p.wk_l = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        p.wv_l = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let vars = p.bind(&tape);
        let h_bar = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let h_knn = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, -1.0, 4.0]).unwrap());
        let out = local_attention(&h_bar, &h_knn, &vars, 1).unwrap().value();
        assert!((out.data()[0] - 2.238_406).abs() < 1e-6, "{:?}", out.data());
    }

    #[test]
    fn local_attention_single_neighbor_and_identical_neighbors() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GlaLayerParams::init(&mut rng, 4, 8).bind(&tape);
        let h_bar = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let patch = tape.constant(Tensor::from_fn(&[3, 1, 4], |i| (i as f64).cos()));
        let out = local_attention(&h_bar, &patch, &p, 1).unwrap().value();
        let v0 = patch.matmul(&p.wv_l).unwrap().value();
        assert_eq!(out.data(), v0.data());

        let same = tape.constant(Tensor::from_fn(&[3, 5, 4], |i| ((i / 20) * 4 + i % 4) as f64 * 0.1));
        let out = local_attention(&h_bar, &same, &p, 1).unwrap().value();
        let v = same.matmul(&p.wv_l).unwrap().value();
        for a in 0..3 {
            for c in 0..2 {
                assert!((out.at(&[a, c]) - v.at(&[a, 0, c])).abs() < 1e-12);
            }
        }
        let short = tape.constant(Tensor::zeros(&[2, 5, 4]));
        assert!(local_attention(&h_bar, &short, &p, 1).is_err());
    }

    #[test]
    fn zero_fusion_weight_leaves_bias() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = GlaLayerParams::init(&mut rng, 4, 8);
        p.w_out = Tensor::zeros(&[4, 4]);
        p.b_out = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let vars = p.bind(&tape);
        let pts = crate::geometry::PointSet::unit_grid(3).unwrap();
        let knn = crate::geometry::knn_indices(&pts, 3).unwrap();
        let h = tape.constant(Tensor::from_fn(&[9, 4], |i| (i as f64 * 0.7).sin()));
        let out = gla(&h, &knn, &vars, &LayerSettings::default()).unwrap().value();
        for r in 0..9 {
            assert_eq!(out.row(r), p.b_out.data());
        }
    }

    #[test]
    fn zero_weights_make_layer_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GlaLayerParams::init(&mut rng, 4, 8).map(|name, t| {
            if name.starts_with("ln") || name == "mask_s" {
                t.clone()
            } else {
                Tensor::zeros(t.shape())
            }
        });
        let vars = p.bind(&tape);
        let pts = crate::geometry::PointSet::unit_grid(3).unwrap();
        let knn = crate::geometry::knn_indices(&pts, 4).unwrap();
        let h = tape.constant(Tensor::from_fn(&[9, 4], |i| (i as f64 * 0.3).cos()));
        let out = la2_layer(&h, &knn, &vars, &LayerSettings::default()).unwrap().value();
        assert_eq!(out, h.value());
    }

    #[test]
    fn multi_head_shapes() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vars = GlaLayerParams::init(&mut rng, 8, 16).bind(&tape);
        let pts = crate::geometry::PointSet::unit_grid(4).unwrap();
        let knn = crate::geometry::knn_indices(&pts, 5).unwrap();
        let h = tape.constant(Tensor::from_fn(&[16, 8], |i| (i as f64 * 0.11).sin()));
        let settings = LayerSettings { heads: 2, ..LayerSettings::default() };
        assert_eq!(la2_layer(&h, &knn, &vars, &settings).unwrap().shape(), vec![16, 8]);
    }

    #[test]
    fn dense_reference_rows_are_convex_combinations() {
        let h = Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.9).sin());
        let w = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1);
        let out = dense_attention_reference(&h, &w, &w, &Tensor::from_fn(&[4, 2], |_| 0.25)).unwrap();
        // values are h·(1/4) per channel; attention averages them, so every
        // output lies in the value range
        let v = h.matmul(&Tensor::from_fn(&[4, 2], |_| 0.25)).unwrap();
        let (lo, hi) = v.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }
}
