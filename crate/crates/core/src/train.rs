//! Optimization loop: weighted BCE, positive oversampling, AdamW with global
//! norm clipping, best-AP checkpointing and F1-maximizing threshold choice.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_stats, fit_stats, Window};
use crate::metrics::{average_precision, confusion, roc_auc};
use crate::model::{Checkpoint, CheckpointHeader, CellVocab, GradientSet, Mode, Model, ModelConfig, ModelInput, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub pos_oversample_weight: f64,
    /// Weight of the per-step loss; only used when the step head is enabled.
    pub aux_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            pos_oversample_weight: 3.0,
            aux_loss_weight: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                section: "train".into(),
                key: key.into(),
                message,
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} is negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", format!("{} outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", format!("{} outside [0, 1)", self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("{} is not positive", self.eps));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", format!("{} is not positive", self.clip_norm));
        }
        if !(self.pos_oversample_weight > 0.0 && self.pos_oversample_weight.is_finite()) {
            return bad("pos_oversample_weight", format!("{} is not positive", self.pos_oversample_weight));
        }
        if !(self.aux_loss_weight >= 0.0) {
            return bad("aux_loss_weight", format!("{} is negative", self.aux_loss_weight));
        }
        Ok(())
    }
}

/// `n_neg / n_pos` over the training labels.
pub fn pos_weight(labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("training"));
    }
    Ok(neg as f64 / pos as f64)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on a logit; returns `(loss, dloss/dz)`.
pub fn bce_with_logits(z: f64, y: u8, w: f64) -> (f64, f64) {
    if y == 1 {
        (w * softplus(-z), -w * sigmoid(-z))
    } else {
        (softplus(z), sigmoid(z))
    }
}

/// One epoch of indices drawn with replacement, positives weighted by
/// `weight` and negatives by 1.
pub fn weighted_sampler(labels: &[u8], weight: f64, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let weights = labels.iter().map(|&y| if y == 1 { weight } else { 1.0 });
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("sampler weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..labels.len()).map(|_| dist.sample(&mut rng)).collect())
}

/// Scales every tensor by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradientSet, max_norm: f64) -> Result<f64> {
    for (name, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut Parameters, grads: &GradientSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let names = params.tensors();
    let gnames = grads.tensors();
    if names.len() != gnames.len() || state.m.tensors().len() != names.len() {
        return Err(Error::invalid("gradient set does not match the parameters"));
    }
    for ((name, p), (_, g)) in names.iter().zip(&gnames) {
        if p.dim() != g.dim() {
            return Err(Error::Shape {
                name: name.clone(),
                expected: p.dim(),
                got: g.dim(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, lr, wd, eps) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.weight_decay, cfg.eps);
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in ps.into_iter().zip(ms).zip(vs.into_iter().zip(gnames)) {
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub threshold: f64,
    pub f1_at_threshold: f64,
}

/// Unique score maximizing F1 under `score >= t`; ties go to the smallest.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<ThresholdSelection> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::SingleClass("validation"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = ThresholdSelection {
        threshold: f64::NAN,
        f1_at_threshold: -1.0,
    };
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64;
        // thresholds descend, so `>=` keeps the smallest among ties
        if f1 >= best.f1_at_threshold {
            best = ThresholdSelection {
                threshold: s,
                f1_at_threshold: f1,
            };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
    pub val_ap: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_acc,val_auc,val_ap";

pub fn write_history_csv(mut w: impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_acc,
            opt(r.val_auc),
            opt(r.val_ap)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Encoder inputs for normalized windows.
pub fn prepare_inputs(windows: &[Window], vocab: &CellVocab) -> Result<Vec<ModelInput>> {
    windows.par_iter().map(|w| ModelInput::from_window(w, vocab)).collect()
}

/// Eval-mode sigmoid scores.
pub fn score(model: &Model, inputs: &[ModelInput]) -> Result<Vec<f64>> {
    inputs.par_iter().map(|x| model.logit(x).map(sigmoid)).collect()
}

/// Species names indexed by id, taken from the training windows.
fn species_names(train: &[Window]) -> Vec<String> {
    let n = train.iter().map(|w| w.species_id as usize + 1).max().unwrap_or(0);
    let mut names = vec![String::new(); n];
    for w in train {
        names[w.species_id as usize] = w.species.clone();
    }
    names
}

fn resolve_model_cfg(cfg: &ModelConfig, n_species: usize, vocab: &CellVocab, t_needed: usize) -> Result<ModelConfig> {
    let mut cfg = cfg.clone();
    let bad = |key: &str, message: String| Error::Config {
        section: "model".into(),
        key: key.into(),
        message,
    };
    if cfg.n_species == 0 {
        cfg.n_species = n_species;
    } else if cfg.n_species < n_species {
        return Err(bad("n_species", format!("{} is below the {n_species} training species", cfg.n_species)));
    }
    if cfg.cell_vocab == 0 {
        cfg.cell_vocab = vocab.len();
    } else if cfg.cell_vocab != vocab.len() {
        return Err(bad("cell_vocab", format!("{} differs from the training vocabulary size {}", cfg.cell_vocab, vocab.len())));
    }
    if t_needed > cfg.t_max {
        return Err(bad("t_max", format!("{} is shorter than the {t_needed}-step windows", cfg.t_max)));
    }
    cfg.validate()?;
    Ok(cfg)
}

// Fixed partition of a batch so the gradient sum order does not depend on
// the worker count.
const GRAD_CHUNKS: usize = 8;

struct Sample<'a> {
    input: &'a ModelInput,
    label: u8,
    rng_stream: u64,
}

/// Loss of one sample; its gradient is added into `acc`.
fn item_loss_grad(model: &Model, s: &Sample, pw: f64, cfg: &TrainConfig, seed: u64, acc: &mut GradientSet) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s.rng_stream);
    let out = model.forward(s.input, Mode::Train, &mut rng)?;
    let (mut loss, d) = bce_with_logits(out.window_logit, s.label, pw);
    let mut d_steps = None;
    if let Some(steps) = &out.step_logits {
        // per-step target is the window label on observed steps
        let observed: Vec<usize> = (0..steps.len()).filter(|&t| !s.input.pad[t] && s.input.cells[t] != CellVocab::SENTINEL).collect();
        let mut ds = vec![0.0; steps.len()];
        if !observed.is_empty() {
            let k = cfg.aux_loss_weight / observed.len() as f64;
            for &t in &observed {
                let (l, g) = bce_with_logits(steps[t], s.label, pw);
                loss += k * l;
                ds[t] = k * g;
            }
        }
        d_steps = Some(ds);
    }
    model.backward_accumulate(&out, d, d_steps.as_deref(), acc)?;
    Ok(loss)
}

fn batch_gradient(model: &Model, batch: &[Sample], pw: f64, cfg: &TrainConfig, seed: u64) -> Result<(f64, GradientSet)> {
    let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
    let parts: Vec<Result<(f64, GradientSet)>> = batch
        .par_chunks(chunk)
        .map(|items| {
            let mut acc = model.params.zeros_like();
            let mut loss = 0.0;
            for s in items {
                loss += item_loss_grad(model, s, pw, cfg, seed, &mut acc)?;
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

fn mean_bce(scores_logit: &[f64], labels: &[u8], pw: f64) -> f64 {
    scores_logit.iter().zip(labels).map(|(&z, &y)| bce_with_logits(z, y, pw).0).sum::<f64>() / labels.len() as f64
}

/// Trains on `train`, selects the checkpoint and threshold on `val`.
/// Windows are raw; normalization statistics are fitted on `train`.
pub fn fit(train: &[Window], val: &[Window], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with_progress(train, val, model_cfg, cfg, |_| {})
}

pub fn fit_with_progress(
    train: &[Window],
    val: &[Window],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let train_labels: Vec<u8> = train.iter().map(|w| w.label).collect();
    let val_labels: Vec<u8> = val.iter().map(|w| w.label).collect();
    let pw = pos_weight(&train_labels)?;
    if val_labels.iter().all(|&y| y == val_labels[0]) {
        return Err(Error::SingleClass("validation"));
    }

    let stats = fit_stats(train)?;
    let train_n: Vec<Window> = train.iter().map(|w| apply_stats(w, &stats)).collect::<Result<_>>()?;
    let val_n: Vec<Window> = val.iter().map(|w| apply_stats(w, &stats)).collect::<Result<_>>()?;
    let vocab = CellVocab::from_windows(&train_n);
    let species = species_names(&train_n);
    let t_needed = train_n.iter().chain(&val_n).map(|w| w.len()).max().unwrap_or(0);
    let mcfg = resolve_model_cfg(model_cfg, species.len(), &vocab, t_needed)?;
    let train_x = prepare_inputs(&train_n, &vocab)?;
    let val_x = prepare_inputs(&val_n, &vocab)?;

    let mut model = Model::init(mcfg.clone())?;
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Parameters, usize, f64, Option<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let order = weighted_sampler(&train_labels, cfg.pos_oversample_weight, cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| Sample {
                    input: &train_x[i],
                    label: train_labels[i],
                    rng_stream: ((epoch as u64) << 40) | ((b as u64) << 16) | j as u64,
                })
                .collect();
            let (loss, mut grads) = batch_gradient(&model, &batch, pw, cfg, cfg.seed)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adamw_step(&mut model.params, &grads, &mut adam, cfg)?;
        }
        let train_loss = loss_sum / order.len() as f64;

        let logits: Vec<f64> = val_x.par_iter().map(|x| model.logit(x)).collect::<Result<_>>()?;
        let val_loss = mean_bce(&logits, &val_labels, pw);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc: confusion(&scores, &val_labels, 0.5).accuracy(),
            val_auc: roc_auc(&scores, &val_labels),
            val_ap: average_precision(&scores, &val_labels),
        };
        if let Some(ap) = rec.val_ap {
            if best.as_ref().is_none_or(|b| ap > b.2) {
                best = Some((model.params.round_to_f32(), epoch, ap, rec.val_auc));
            }
        }
        on_epoch(&rec);
        history.push(rec);
    }

    let (params, epoch, ap, auc) = best.expect("validation has both classes, so AP is defined every epoch");
    let best_model = Model::from_params(mcfg.clone(), params.clone())?;
    let val_scores = score(&best_model, &val_x)?;
    let sel = select_threshold(&val_scores, &val_labels)?;
    let header = CheckpointHeader {
        model: mcfg,
        stats,
        vocab,
        species,
        epoch,
        val_ap: Some(ap),
        val_auc: auc,
        threshold: sel.threshold,
        history: history.clone(),
        tensors: Vec::new(),
    };
    Ok(FitResult {
        checkpoint: Checkpoint::new(header, &params),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pos_weight_examples() {
        let mk = |neg: usize, pos: usize| [vec![0u8; neg], vec![1u8; pos]].concat();
        assert_eq!(pos_weight(&mk(90, 10)).unwrap(), 9.0);
        assert_eq!(pos_weight(&mk(5, 5)).unwrap(), 1.0);
        assert_eq!(pos_weight(&mk(50, 200)).unwrap(), 0.25);
        assert!(matches!(pos_weight(&mk(5, 0)), Err(Error::SingleClass(_))));
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_with_logits(0.0, 0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, 0.5);
        let (l, g) = bce_with_logits(0.0, 1, 9.0);
        assert!((l - 6.238325).abs() < 1e-6);
        assert_eq!(g, -4.5);
        let (l, g) = bce_with_logits(50.0, 1, 1.0);
        assert!(l >= 0.0 && l < 1e-20 && g.is_finite());
        let (l, _) = bce_with_logits(-800.0, 1, 1.0);
        assert_eq!(l, 800.0);
    }

    proptest! {
        #[test]
        fn bce_gradient_matches_difference(z in -20.0f64..20.0, y in 0u8..2, w in 0.1f64..10.0) {
            let h = 1e-5;
            let num = (bce_with_logits(z + h, y, w).0 - bce_with_logits(z - h, y, w).0) / (2.0 * h);
            let (_, g) = bce_with_logits(z, y, w);
            prop_assert!((num - g).abs() < 1e-8, "{} vs {}", num, g);
        }
    }

    #[test]
    fn sampler_positive_fraction() {
        let labels: Vec<u8> = (0..100_000).map(|i| u8::from(i % 10 == 0)).collect();
        let idx = weighted_sampler(&labels, 3.0, 11).unwrap();
        assert_eq!(idx.len(), labels.len());
        let frac = idx.iter().filter(|&&i| labels[i] == 1).count() as f64 / idx.len() as f64;
        assert!((frac - 0.25).abs() < 0.01, "{frac}");
        assert_eq!(idx, weighted_sampler(&labels, 3.0, 11).unwrap());

        let uniform = weighted_sampler(&labels, 1.0, 12).unwrap();
        let frac = uniform.iter().filter(|&&i| labels[i] == 1).count() as f64 / uniform.len() as f64;
        assert!((frac - 0.1).abs() < 0.01);
    }

    fn tiny_params() -> Parameters {
        Parameters::init(&ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 4,
            cell_dim: 2,
            dropout_p: 0.0,
            t_max: 3,
            n_species: 1,
            cell_vocab: 2,
            aux_head_enabled: false,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn clipping() {
        let p = tiny_params();
        let mut g = p.clone();
        let n = g.global_norm();
        g.scale(2.0 / n);
        let before = g.clone();
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-12);
        for ((_, a), (_, b)) in g.tensors().into_iter().zip(before.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - 0.5 * y).abs() < 1e-15));
        }
        assert!((g.global_norm() - 1.0).abs() < 1e-9);

        let mut small = p.clone();
        small.scale(0.5 / n);
        let keep = small.clone();
        clip_gradients(&mut small, 1.0).unwrap();
        assert_eq!(small, keep);

        let mut bad = p.clone();
        bad.layers[0].wk[[0, 1]] = f64::NAN;
        match clip_gradients(&mut bad, 1.0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layers.0.attn.wk"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_closed_forms() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = tiny_params().zeros_like();
        let mut g = p.clone();
        for (_, t) in g.tensors_mut() {
            t.fill(1.0);
        }
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!(p.input_w.iter().all(|&v| (v - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15));

        let orig = tiny_params();
        let mut q = orig.clone();
        let zero = q.zeros_like();
        let mut st = AdamState::new(&q);
        adamw_step(&mut q, &zero, &mut st, &cfg).unwrap();
        assert_eq!(q, orig);

        let decay = TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&q);
        adamw_step(&mut q, &zero, &mut st, &decay).unwrap();
        for ((_, a), (_, b)) in q.tensors().into_iter().zip(orig.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y * (1.0 - 0.001)).abs() < 1e-15));
        }
    }

    #[test]
    fn adamw_matches_scalar_loop() {
        use rand::Rng;
        let cfg = TrainConfig {
            lr: 0.01,
            weight_decay: 0.05,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = tiny_params();
        let mut st = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (p.input_w[[2, 1]], 0.0f64, 0.0f64);
        for t in 1..=100 {
            let mut g = p.zeros_like();
            let gi: f64 = rng.random_range(-2.0..2.0);
            g.input_w[[2, 1]] = gi;
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * gi;
            v = 0.999 * v + 0.001 * gi * gi;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.05 * theta);
            assert!((p.input_w[[2, 1]] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        g.head_w = ndarray::Array2::zeros((3, 1));
        let mut st = AdamState::new(&p);
        assert!(matches!(adamw_step(&mut p, &g, &mut st, &TrainConfig::default()), Err(Error::Shape { .. })));
    }

    #[test]
    fn threshold_examples() {
        let s = select_threshold(&[0.2, 0.6, 0.9], &[0, 1, 1]).unwrap();
        assert_eq!(s.threshold, 0.6);
        assert_eq!(s.f1_at_threshold, 1.0);

        let inv = select_threshold(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(inv.threshold, 0.1);
        assert!((inv.f1_at_threshold - 2.0 / 3.0).abs() < 1e-15);

        let eq = select_threshold(&[0.4; 5], &[0, 1, 0, 1, 1]).unwrap();
        assert_eq!(eq.threshold, 0.4);
        assert!(select_threshold(&[0.1, 0.2], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn threshold_matches_dense_grid(
            data in prop::collection::vec((0.001f64..0.999, 0u8..2), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| (d.0 * 100.0).round() / 100.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let sel = select_threshold(&scores, &labels).unwrap();
            let f1 = |t: f64| crate::metrics::confusion(&scores, &labels, t).f1();
            let mut grid_best = 0.0f64;
            for k in 0..10_000 {
                grid_best = grid_best.max(f1(k as f64 / 10_000.0));
            }
            prop_assert!((sel.f1_at_threshold - grid_best).abs() < 1e-12);
            prop_assert!((f1(sel.threshold) - sel.f1_at_threshold).abs() < 1e-15);
            prop_assert!(scores.contains(&sel.threshold));
        }
    }

    #[test]
    fn history_csv_blanks() {
        let mut buf = Vec::new();
        write_history_csv(
            &mut buf,
            &[EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 1.0,
                val_auc: None,
                val_ap: Some(0.75),
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss,val_acc,val_auc,val_ap\n1,0.500000,0.250000,1.000000,,0.750000\n");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: -1.0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
