//! Full operator: MLP encoder, a stack of global-local attention layers, and
//! a linear projection to the output channels.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{la2_layer, linear, uniform_weight, GlaLayer, GlaLayerParams, LayerSettings};
use crate::geometry::{KnnIndex, PointSet};
use crate::params::param_group;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LA2C";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Patch size K.
    pub k: usize,
    /// Soft-mask sharpness.
    pub alpha: f64,
    /// Feed-forward width; `2 * hidden` when absent.
    pub ff_hidden: Option<usize>,
    pub heads: usize,
    pub in_channels: usize,
    pub coord_dim: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: 128,
            k: 8,
            alpha: 10.0,
            ff_hidden: None,
            heads: 1,
            in_channels: 1,
            coord_dim: 2,
            out_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width of each attention branch.
    pub fn branch_width(&self) -> usize {
        self.hidden / 2
    }

    pub fn ff_width(&self) -> usize {
        self.ff_hidden.unwrap_or(2 * self.hidden)
    }

    pub fn layer_settings(&self) -> LayerSettings {
        LayerSettings {
            alpha: self.alpha,
            heads: self.heads,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden width {} must be even and positive", self.hidden));
        }
        if self.heads == 0 || !self.branch_width().is_multiple_of(self.heads) {
            return fail(format!(
                "branch width {} not divisible by {} heads",
                self.branch_width(),
                self.heads
            ));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.k == 0 {
            return fail("patch size k must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha {} must be positive", self.alpha));
        }
        if self.ff_width() == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if !(1..=3).contains(&self.coord_dim) {
            return fail(format!("coordinate dimension {} not in 1..=3", self.coord_dim));
        }
        Ok(())
    }
}

param_group! {
    /// Two-layer MLP lifting `[f, x]` (C_f + C_s channels) to C channels.
    Encoder { w1, b1, w2, b2 }
}

param_group! {
    /// Linear map from C channels to the C_u output channels.
    Projection { w, b }
}

/// Parameters bound to a tape.
pub struct BoundModel<'t> {
    pub encoder: Encoder<Var<'t>>,
    pub layers: Vec<GlaLayer<Var<'t>>>,
    pub projection: Projection<Var<'t>>,
}

impl<'t> BoundModel<'t> {
    /// All variables in checkpoint order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.encoder.fields().into_iter().map(|(_, v)| *v).collect();
        for layer in &self.layers {
            out.extend(layer.fields().into_iter().map(|(_, v)| *v));
        }
        out.extend(self.projection.fields().into_iter().map(|(_, v)| *v));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub config: ModelConfig,
    pub encoder: Encoder<Tensor>,
    pub layers: Vec<GlaLayerParams>,
    pub projection: Projection<Tensor>,
}

impl OperatorModel {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.hidden;
        let encoder = Encoder {
            w1: uniform_weight(&mut rng, config.in_channels + config.coord_dim, c),
            b1: Tensor::zeros(&[c]),
            w2: uniform_weight(&mut rng, c, c),
            b2: Tensor::zeros(&[c]),
        };
        let layers = (0..config.layers)
            .map(|_| GlaLayerParams::init(&mut rng, c, config.ff_width()))
            .collect();
        let projection = Projection {
            w: uniform_weight(&mut rng, c, config.out_channels),
            b: Tensor::zeros(&[config.out_channels]),
        };
        Ok(Self {
            config,
            encoder,
            layers,
            projection,
        })
    }

    /// Parameters in checkpoint order, with dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .fields()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fields().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.extend(
            self.projection
                .fields()
                .into_iter()
                .map(|(n, t)| (format!("projection.{n}"), t)),
        );
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.fields_mut().into_iter().map(|(_, t)| t).collect();
        for layer in &mut self.layers {
            out.extend(layer.fields_mut().into_iter().map(|(_, t)| t));
        }
        out.extend(self.projection.fields_mut().into_iter().map(|(_, t)| t));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every parameter as a gradient-receiving leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.bind_with_vars(|t| tape.param(t.clone()))
    }

    /// Binds every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.bind_with_vars(|t| tape.constant(t.clone()))
    }

    /// Rebuilds the parameter structure from variables in checkpoint order.
    pub fn assemble<'t>(&self, vars: &[Var<'t>]) -> Result<BoundModel<'t>, ModelError> {
        let expected = self.named_params().len();
        if vars.len() != expected {
            return Err(ModelError::Input(format!(
                "expected {expected} parameter variables, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        Ok(self.bind_with_vars(|_| it.next().expect("length checked")))
    }

    fn bind_with_vars<'t>(&self, mut leaf: impl FnMut(&Tensor) -> Var<'t>) -> BoundModel<'t> {
        BoundModel {
            encoder: self.encoder.map(|_, t| leaf(t)),
            layers: self.layers.iter().map(|l| l.map(|_, t| leaf(t))).collect(),
            projection: self.projection.map(|_, t| leaf(t)),
        }
    }

    /// `[σ(s_1), …, σ(s_L)]`.
    pub fn mask_trajectory(&self) -> Vec<f64> {
        self.layers.iter().map(GlaLayerParams::mask_fraction).collect()
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, f_in: &Tensor, points: &PointSet, knn: &KnnIndex) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let f = tape.constant(f_in.clone());
        Ok(forward(&self.config, &bound, &f, points, knn)?.value())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.named_params() {
            entries.push(ParamEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            params: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.named_params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let header_len = u64::from_le_bytes(b8) as usize;
        if header_len > r.len() {
            return Err(ModelError::Format("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..header_len])?;
        let blobs = &r[header_len..];
        let mut model = Self::init(header.config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != header.params.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameters, header lists {}",
                names.len(),
                header.params.len()
            )));
        }
        let mut expected_offset = 0usize;
        for ((name, slot), entry) in names.iter().zip(model.params_mut()).zip(&header.params) {
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(ModelError::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    slot.shape()
                )));
            }
            let start = expected_offset;
            if entry.offset != start as u64 {
                return Err(ModelError::Format(format!("{name} stored at offset {}, expected {start}", entry.offset)));
            }
            let end = start + 8 * slot.numel();
            if end > blobs.len() {
                return Err(ModelError::Format(format!("truncated data for {name}")));
            }
            expected_offset = end;
            for (v, chunk) in slot.data_mut().iter_mut().zip(blobs[start..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if expected_offset != blobs.len() {
            return Err(ModelError::Format(format!(
                "{} trailing bytes after parameter data",
                blobs.len() - expected_offset
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Format("truncated file".into()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// Lifts `[f_in, coords]` to the hidden width, `[M, C]`.
pub fn encode<'t>(
    config: &ModelConfig,
    bound: &BoundModel<'t>,
    f_in: &Var<'t>,
    points: &PointSet,
) -> Result<Var<'t>, ModelError> {
    let fs = f_in.shape();
    if fs != [points.len(), config.in_channels] || points.dim() != config.coord_dim {
        return Err(ModelError::Input(format!(
            "features {:?} and coordinates [{}, {}] do not match config (C_f={}, C_s={})",
            fs,
            points.len(),
            points.dim(),
            config.in_channels,
            config.coord_dim
        )));
    }
    let coords = f_in.tape().constant(points.coords().clone());
    let x = f_in.concat_lastdim(&coords)?;
    let e = &bound.encoder;
    Ok(linear(&linear(&x, &e.w1, &e.b1)?.gelu()?, &e.w2, &e.b2)?)
}

/// `P ∘ K_L ∘ … ∘ K_1 ∘ E`, output `[M, C_u]`.
pub fn forward<'t>(
    config: &ModelConfig,
    bound: &BoundModel<'t>,
    f_in: &Var<'t>,
    points: &PointSet,
    knn: &KnnIndex,
) -> Result<Var<'t>, ModelError> {
    forward_with_hook(config, bound, f_in, points, knn, &mut |_, _| {})
}

/// [`forward`], calling `hook(layer_index, output)` after every layer.
pub fn forward_with_hook<'t>(
    config: &ModelConfig,
    bound: &BoundModel<'t>,
    f_in: &Var<'t>,
    points: &PointSet,
    knn: &KnnIndex,
    hook: &mut dyn FnMut(usize, &Var<'t>),
) -> Result<Var<'t>, ModelError> {
    if knn.len() != points.len() || knn.k() != config.k {
        return Err(ModelError::Input(format!(
            "knn index [{}, {}] does not match {} points with K={}",
            knn.len(),
            knn.k(),
            points.len(),
            config.k
        )));
    }
    let settings = config.layer_settings();
    let mut h = encode(config, bound, f_in, points)?;
    for (i, layer) in bound.layers.iter().enumerate() {
        h = la2_layer(&h, knn, layer, &settings)?;
        hook(i, &h);
    }
    Ok(linear(&h, &bound.projection.w, &bound.projection.b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn_indices;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            k: 4,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_layout() {
        let m = OperatorModel::init(ModelConfig::default()).unwrap();
        assert_eq!(m.layers.len(), 8);
        assert_eq!(m.encoder.w2.shape(), &[128, 128]);
        assert_eq!(m.layers[0].wq_g.shape(), &[128, 64]);
        assert_eq!(m.layers[0].w_out.shape(), &[128, 128]);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = OperatorModel::init(tiny_config()).unwrap();
        let b = OperatorModel::init(tiny_config()).unwrap();
        assert_eq!(a, b);
        let c = OperatorModel::init(ModelConfig { seed: 4, ..tiny_config() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ModelConfig { hidden: 127, ..tiny_config() },
            ModelConfig { heads: 3, ..tiny_config() },
            ModelConfig { layers: 0, ..tiny_config() },
            ModelConfig { alpha: 0.0, ..tiny_config() },
        ] {
            assert!(matches!(OperatorModel::init(cfg), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn fresh_mask_trajectory_is_one_half() {
        let m = OperatorModel::init(tiny_config()).unwrap();
        assert_eq!(m.mask_trajectory(), vec![0.5, 0.5]);
    }

    #[test]
    fn encode_shapes_and_zero_weights() {
        let mut m = OperatorModel::init(ModelConfig { hidden: 128, layers: 1, ..tiny_config() }).unwrap();
        let pts = PointSet::unit_grid(16).unwrap();
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[256, 1]));
        let h = encode(&m.config, &m.bind_frozen(&tape), &f, &pts).unwrap();
        assert_eq!(h.shape(), vec![256, 128]);

        m.encoder.w2 = Tensor::zeros(&[128, 128]);
        m.encoder.b2 = Tensor::from_fn(&[128], |i| i as f64);
        let tape = Tape::new();
        let f = tape.constant(Tensor::ones(&[256, 1]));
        let h = encode(&m.config, &m.bind_frozen(&tape), &f, &pts).unwrap().value();
        for r in 0..256 {
            assert_eq!(h.row(r), m.encoder.b2.data());
        }
        let bad = tape.constant(Tensor::ones(&[255, 1]));
        assert!(matches!(
            encode(&m.config, &m.bind_frozen(&tape), &bad, &pts),
            Err(ModelError::Input(_))
        ));
    }

    #[test]
    fn forward_applies_every_layer_once() {
        let m = OperatorModel::init(tiny_config()).unwrap();
        let pts = PointSet::unit_grid(4).unwrap();
        let knn = knn_indices(&pts, 4).unwrap();
        let tape = Tape::new();
        let f = tape.constant(Tensor::from_fn(&[16, 1], |i| i as f64 / 16.0));
        let mut seen = Vec::new();
        let out = forward_with_hook(&m.config, &m.bind(&tape), &f, &pts, &knn, &mut |i, _| seen.push(i)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(out.shape(), vec![16, 1]);
        let wrong_k = knn_indices(&pts, 3).unwrap();
        assert!(forward(&m.config, &m.bind(&tape), &f, &pts, &wrong_k).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = OperatorModel::init(tiny_config()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = OperatorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(OperatorModel::from_bytes(&bad), Err(ModelError::Format(_))));
        assert!(matches!(
            OperatorModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Format(_))
        ));
    }
}
