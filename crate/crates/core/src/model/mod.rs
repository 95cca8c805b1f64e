//! Pre-norm Transformer encoder for window classification.
//!
//! Sequence layout is `[CTX], step_1 .. step_T`. The [CTX] slot is an MLP
//! over the history context plus the species embedding; step slots add the
//! projected step features, the projected cell embedding, the species
//! embedding and a sinusoidal position. The window logit is read from the
//! last non-padded step.

mod checkpoint;
mod encoder;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use encoder::{ForwardOutput, InputGradient, Mode};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Window, N_CTX, N_STEP_FEATURES};
use crate::geo::CellId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub cell_dim: usize,
    pub dropout_p: f64,
    pub t_max: usize,
    /// Filled from the training data when zero.
    pub n_species: usize,
    /// Filled from the training data when zero.
    pub cell_vocab: usize,
    pub aux_head_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers: 6,
            n_heads: 6,
            d_ff: 384,
            cell_dim: 32,
            dropout_p: 0.15,
            t_max: 60,
            n_species: 0,
            cell_vocab: 0,
            aux_head_enabled: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                section: "model".into(),
                key: key.into(),
                message,
            })
        };
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model", format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be positive".into());
        }
        if self.cell_dim == 0 {
            return bad("cell_dim", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p", format!("{} outside [0, 1)", self.dropout_p));
        }
        if self.t_max == 0 {
            return bad("t_max", "must be positive".into());
        }
        if self.n_species == 0 {
            return bad("n_species", "must be positive".into());
        }
        if self.cell_vocab < 2 {
            return bad("cell_vocab", "needs at least the sentinel and OOV rows".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Cell dictionary: row 0 is the padding/unobserved sentinel, row 1 the
/// out-of-vocabulary bucket, rows 2.. the sorted training cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellVocab {
    cells: Vec<CellId>,
}

impl CellVocab {
    pub const SENTINEL: usize = 0;
    pub const OOV: usize = 1;

    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Self {
        let mut cells: Vec<CellId> = windows.into_iter().flat_map(|w| w.cells.iter().flatten().copied()).collect();
        cells.sort_unstable();
        cells.dedup();
        Self { cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, cell: Option<CellId>) -> usize {
        match cell {
            None => Self::SENTINEL,
            Some(c) => self.cells.binary_search(&c).map_or(Self::OOV, |i| i + 2),
        }
    }
}

/// Encoder-ready view of one normalized window.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `T x 14` step features.
    pub x: Array2<f64>,
    /// Cell-embedding row per step.
    pub cells: Vec<usize>,
    pub species: usize,
    /// `1 x 18` history context.
    pub ctx: Array2<f64>,
    /// Key-padding flag per step (the [CTX] slot is never masked).
    pub pad: Vec<bool>,
}

impl ModelInput {
    pub fn from_window(w: &Window, vocab: &CellVocab) -> Result<Self> {
        if !w.normalized {
            return Err(Error::invalid(format!("window {} is not normalized", w.window_id)));
        }
        let t = w.len();
        let x = Array2::from_shape_fn((t, N_STEP_FEATURES), |(i, j)| w.x_cont[i][j]);
        Ok(Self {
            x,
            cells: w.cells.iter().map(|c| vocab.index(*c)).collect(),
            species: w.species_id as usize,
            ctx: Array2::from_shape_fn((1, N_CTX), |(_, j)| w.ctx[j]),
            pad: w.pad_mask.clone(),
        })
    }

    pub fn steps(&self) -> usize {
        self.x.nrows()
    }

    /// Sequence index of the readout slot: last non-padded step + 1.
    pub fn readout_index(&self) -> Option<usize> {
        self.pad.iter().rposition(|p| !p).map(|t| t + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

/// Named weight tensors; biases and layer-norm vectors are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub input_w: Array2<f64>,
    pub input_b: Array2<f64>,
    pub cell_emb: Array2<f64>,
    pub cell_proj: Array2<f64>,
    pub species_emb: Array2<f64>,
    pub ctx_w1: Array2<f64>,
    pub ctx_b1: Array2<f64>,
    pub ctx_w2: Array2<f64>,
    pub ctx_b2: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
    pub step_head: Option<(Array2<f64>, Array2<f64>)>,
}

/// Gradients share the parameter layout.
pub type GradientSet = Parameters;

macro_rules! named_tensors {
    ($p:expr, $($r:tt)+) => {{
        let p = $p;
        let mut v = vec![
            ("input.w".to_string(), $($r)+ p.input_w),
            ("input.b".to_string(), $($r)+ p.input_b),
            ("cell.emb".to_string(), $($r)+ p.cell_emb),
            ("cell.proj".to_string(), $($r)+ p.cell_proj),
            ("species.emb".to_string(), $($r)+ p.species_emb),
            ("ctx.w1".to_string(), $($r)+ p.ctx_w1),
            ("ctx.b1".to_string(), $($r)+ p.ctx_b1),
            ("ctx.w2".to_string(), $($r)+ p.ctx_w2),
            ("ctx.b2".to_string(), $($r)+ p.ctx_b2),
        ];
        for (i, l) in ($($r)+ p.layers).into_iter().enumerate() {
            v.extend([
                (format!("layers.{i}.ln1.g"), $($r)+ l.ln1_g),
                (format!("layers.{i}.ln1.b"), $($r)+ l.ln1_b),
                (format!("layers.{i}.attn.wq"), $($r)+ l.wq),
                (format!("layers.{i}.attn.bq"), $($r)+ l.bq),
                (format!("layers.{i}.attn.wk"), $($r)+ l.wk),
                (format!("layers.{i}.attn.bk"), $($r)+ l.bk),
                (format!("layers.{i}.attn.wv"), $($r)+ l.wv),
                (format!("layers.{i}.attn.bv"), $($r)+ l.bv),
                (format!("layers.{i}.attn.wo"), $($r)+ l.wo),
                (format!("layers.{i}.attn.bo"), $($r)+ l.bo),
                (format!("layers.{i}.ln2.g"), $($r)+ l.ln2_g),
                (format!("layers.{i}.ln2.b"), $($r)+ l.ln2_b),
                (format!("layers.{i}.ff.w1"), $($r)+ l.ff_w1),
                (format!("layers.{i}.ff.b1"), $($r)+ l.ff_b1),
                (format!("layers.{i}.ff.w2"), $($r)+ l.ff_w2),
                (format!("layers.{i}.ff.b2"), $($r)+ l.ff_b2),
            ]);
        }
        v.push(("final_ln.g".to_string(), $($r)+ p.lnf_g));
        v.push(("final_ln.b".to_string(), $($r)+ p.lnf_b));
        v.push(("head.w".to_string(), $($r)+ p.head_w));
        v.push(("head.b".to_string(), $($r)+ p.head_b));
        if let Some((w, b)) = ($($r)+ p.step_head).as_mut_or_ref() {
            v.push(("step_head.w".to_string(), w));
            v.push(("step_head.b".to_string(), b));
        }
        v
    }};
}

trait AsMutOrRef<'a, T> {
    type Out;
    fn as_mut_or_ref(self) -> Option<Self::Out>;
}

impl<'a, T: 'a> AsMutOrRef<'a, T> for &'a Option<(T, T)> {
    type Out = (&'a T, &'a T);
    fn as_mut_or_ref(self) -> Option<Self::Out> {
        self.as_ref().map(|(a, b)| (a, b))
    }
}

impl<'a, T: 'a> AsMutOrRef<'a, T> for &'a mut Option<(T, T)> {
    type Out = (&'a mut T, &'a mut T);
    fn as_mut_or_ref(self) -> Option<Self::Out> {
        self.as_mut().map(|(a, b)| (a, b))
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
    Array2::from_shape_simple_fn((fan_in, fan_out), || u.sample(rng))
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let n = Normal::new(0.0, 0.02).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

fn zeros(n: usize) -> Array2<f64> {
    Array2::zeros((1, n))
}

fn ones(n: usize) -> Array2<f64> {
    Array2::ones((1, n))
}

impl Parameters {
    /// Deterministic initialization from `cfg.seed`: Xavier-uniform linear
    /// weights, N(0, 0.02) embeddings, unit layer-norm scales, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let input_w = xavier(&mut rng, N_STEP_FEATURES, d);
        let cell_emb = normal(&mut rng, cfg.cell_vocab, cfg.cell_dim);
        let cell_proj = xavier(&mut rng, cfg.cell_dim, d);
        let species_emb = normal(&mut rng, cfg.n_species, d);
        let ctx_w1 = xavier(&mut rng, N_CTX, d);
        let ctx_w2 = xavier(&mut rng, d, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: xavier(&mut rng, d, d),
                bq: zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                ff_w1: xavier(&mut rng, d, cfg.d_ff),
                ff_b1: zeros(cfg.d_ff),
                ff_w2: xavier(&mut rng, cfg.d_ff, d),
                ff_b2: zeros(d),
            })
            .collect();
        let head_w = xavier(&mut rng, d, 1);
        let step_head = cfg.aux_head_enabled.then(|| (xavier(&mut rng, d, 1), zeros(1)));
        Ok(Self {
            input_w,
            input_b: zeros(d),
            cell_emb,
            cell_proj,
            species_emb,
            ctx_w1,
            ctx_b1: zeros(d),
            ctx_w2,
            ctx_b2: zeros(d),
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            head_w,
            head_b: zeros(1),
            step_head,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        named_tensors!(self, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        named_tensors!(self, &mut)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * alpha);
        }
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every entry through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&self) -> Self {
        let mut p = self.clone();
        for (_, t) in p.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
        p
    }

    /// Shapes must agree with `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Parameters::init(&ModelConfig { seed: 0, ..cfg.clone() })?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("parameter set does not match the model configuration"));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.dim() != b.dim() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: b.dim(),
                    got: a.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Sinusoidal table with `rows` positions; row 0 belongs to the [CTX] slot.
pub fn positional_encoding(rows: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d_model), |(pos, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameters plus the fixed positional table.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pe: Array2<f64>,
}

impl Model {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        let params = Parameters::init(&cfg)?;
        Ok(Self::with_params(cfg, params))
    }

    pub fn from_params(cfg: ModelConfig, params: Parameters) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self::with_params(cfg, params))
    }

    fn with_params(cfg: ModelConfig, params: Parameters) -> Self {
        let pe = positional_encoding(cfg.t_max + 1, cfg.d_model);
        Self { cfg, params, pe }
    }

    /// `(T + 1) x d_model` input sequence.
    pub fn embed(&self, input: &ModelInput) -> Result<Array2<f64>> {
        encoder::check_input(self, input)?;
        Ok(encoder::embed(self, input).x0)
    }

    pub fn forward(&self, input: &ModelInput, mode: Mode, rng: &mut impl Rng) -> Result<ForwardOutput> {
        encoder::forward(self, input, mode, rng)
    }

    /// Eval-mode logit without keeping activations.
    pub fn logit(&self, input: &ModelInput) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = encoder::forward(self, input, Mode::Eval, &mut rng)?;
        out.cache = None;
        Ok(out.window_logit)
    }

    /// Reverse-mode gradients for upstream `d loss / d window_logit` and,
    /// when the step head is enabled, `d loss / d step_logits`.
    pub fn backward(&self, out: &ForwardOutput, d_logit: f64, d_steps: Option<&[f64]>) -> Result<GradientSet> {
        let mut g = self.params.zeros_like();
        encoder::backward(self, out, d_logit, d_steps, &mut g)?;
        Ok(g)
    }

    /// Adds the gradients of `out` into `grads`, which must share the
    /// parameter layout.
    pub fn backward_accumulate(
        &self,
        out: &ForwardOutput,
        d_logit: f64,
        d_steps: Option<&[f64]>,
        grads: &mut GradientSet,
    ) -> Result<()> {
        encoder::backward(self, out, d_logit, d_steps, grads).map(|_| ())
    }

    /// Like [`Model::backward`] but also returns the gradient with respect
    /// to the step features.
    pub fn backward_with_input(
        &self,
        out: &ForwardOutput,
        d_logit: f64,
        d_steps: Option<&[f64]>,
    ) -> Result<(GradientSet, InputGradient)> {
        let mut g = self.params.zeros_like();
        let ig = encoder::backward(self, out, d_logit, d_steps, &mut g)?;
        Ok((g, ig))
    }

    pub fn positional(&self) -> &Array2<f64> {
        &self.pe
    }
}

pub(crate) fn sum_rows(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            cell_dim: 4,
            dropout_p: 0.0,
            t_max: 6,
            n_species: 3,
            cell_vocab: 5,
            aux_head_enabled: false,
            seed: 42,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Parameters::init(&tiny_cfg()).unwrap();
        let b = Parameters::init(&tiny_cfg()).unwrap();
        assert_eq!(a, b);
        let c = Parameters::init(&ModelConfig { seed: 43, ..tiny_cfg() }).unwrap();
        assert_ne!(a.input_w, c.input_w);
        assert!(a.layers.iter().all(|l| l.ln1_g.iter().all(|&g| g == 1.0) && l.ln2_g.iter().all(|&g| g == 1.0)));
        assert!(a.lnf_g.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 9, ..tiny_cfg() }.validate().is_err());
        assert!(ModelConfig { dropout_p: 1.0, ..tiny_cfg() }.validate().is_err());
        assert!(ModelConfig { d_ff: 0, ..tiny_cfg() }.validate().is_err());
        assert!(Parameters::init(&ModelConfig { n_layers: 0, ..tiny_cfg() }).is_err());
        let mut d = ModelConfig::default();
        d.n_species = 4;
        d.cell_vocab = 100;
        d.validate().unwrap();
        assert_eq!(d.head_dim(), 16);
    }

    #[test]
    fn tensor_names_unique_and_aux_head() {
        let p = Parameters::init(&ModelConfig { aux_head_enabled: true, ..tiny_cfg() }).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"step_head.w".to_string()));
        assert_eq!(names.len(), 9 + 2 * 16 + 4 + 2);
    }

    #[test]
    fn positional_examples() {
        let pe = positional_encoding(61, 96);
        for j in 0..96 {
            assert_eq!(pe[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe[[1, 0]] - 0.841471).abs() < 1e-6);
        // column 2i has period 2π·10000^(2i/d)
        let i2 = 4.0;
        let period = std::f64::consts::TAU * 10000f64.powf(i2 / 96.0);
        let at = |pos: f64| (pos / 10000f64.powf(i2 / 96.0)).sin();
        assert!((at(3.0) - at(3.0 + period)).abs() < 1e-9);
        assert!((pe[[3, 4]] - at(3.0)).abs() < 1e-15);
    }

    #[test]
    fn vocab_indices() {
        let a: CellId = "841fa07ffffffff".parse().unwrap();
        let v = CellVocab { cells: vec![a] };
        assert_eq!(v.index(None), CellVocab::SENTINEL);
        assert_eq!(v.index(Some(a)), 2);
        let b: CellId = "85283473fffffff".parse().unwrap();
        assert_eq!(v.index(Some(b)), CellVocab::OOV);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn add_scale_norm() {
        let p = Parameters::init(&tiny_cfg()).unwrap();
        let mut g = p.zeros_like();
        assert_eq!(g.global_norm(), 0.0);
        g.add_scaled(&p, 2.0);
        assert!((g.global_norm() - 2.0 * p.global_norm()).abs() < 1e-12);
        g.scale(0.5);
        assert_eq!(g, p);
    }
}
