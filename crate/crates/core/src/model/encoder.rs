use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{sum_rows, GradientSet, Model, ModelInput};
use crate::error::{Error, Result};
use crate::features::{N_CTX, N_STEP_FEATURES};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub window_logit: f64,
    pub step_logits: Option<Vec<f64>>,
    pub(crate) cache: Option<Box<Cache>>,
}

impl ForwardOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops the stored activations.
    pub fn discard_cache(&mut self) {
        self.cache = None;
    }
}

/// Gradient with respect to the `T x 14` step features.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub d_x: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities per head.
    probs: Vec<Array2<f64>>,
    /// Scaled dropout masks on the probabilities per head.
    prob_masks: Vec<Option<Array2<f64>>>,
    attn: Array2<f64>,
    attn_out_mask: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    /// GELU derivative at the feed-forward pre-activation.
    f1_grad: Array2<f64>,
    g_mask: Option<Array2<f64>>,
    g: Array2<f64>,
    ff_out_mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Embedded {
    pub x0: Array2<f64>,
    c1: Array2<f64>,
    g1: Array2<f64>,
    cell_rows: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    input: ModelInput,
    emb: Embedded,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Array2<f64>,
    readout: usize,
}

pub(crate) fn check_input(model: &Model, input: &ModelInput) -> Result<()> {
    let t = input.steps();
    let cfg = &model.cfg;
    if t == 0 || t > cfg.t_max {
        return Err(Error::invalid(format!("sequence of {t} steps outside 1..={}", cfg.t_max)));
    }
    if input.x.ncols() != N_STEP_FEATURES {
        return Err(Error::Shape {
            name: "x_cont".into(),
            expected: (t, N_STEP_FEATURES),
            got: input.x.dim(),
        });
    }
    if input.ctx.dim() != (1, N_CTX) {
        return Err(Error::Shape {
            name: "ctx".into(),
            expected: (1, N_CTX),
            got: input.ctx.dim(),
        });
    }
    if input.cells.len() != t || input.pad.len() != t {
        return Err(Error::invalid("cell and mask lengths must match the step count"));
    }
    if input.species >= cfg.n_species {
        return Err(Error::invalid(format!("species index {} outside the embedding table", input.species)));
    }
    if let Some(&c) = input.cells.iter().find(|&&c| c >= cfg.cell_vocab) {
        return Err(Error::invalid(format!("cell index {c} outside the vocabulary")));
    }
    if input.readout_index().is_none() {
        return Err(Error::invalid("window has no valid step"));
    }
    Ok(())
}

// tanh through exp is markedly cheaper than libm tanh and accurate to a few
// ulps in absolute terms, which is all GELU needs
fn tanh_fast(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let t = tanh_fast(GELU_C * (x + GELU_A * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn gelu_grad(x: f64) -> f64 {
    gelu_parts(x).1
}

/// GELU and its derivative, elementwise.
fn gelu_with_grad(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut y = a.clone();
    let mut dy = a.clone();
    ndarray::Zip::from(&mut y).and(&mut dy).for_each(|y, dy| {
        (*y, *dy) = gelu_parts(*y);
    });
    (y, dy)
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, c: &LnCache, g: &Array2<f64>, dg: &mut Array2<f64>, db: &mut Array2<f64>) -> Array2<f64> {
    *dg += &sum_rows(&(dy * &c.xhat));
    *db += &sum_rows(dy);
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = dxhat.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xh = c.xhat.row(i);
        let m1 = row.sum() / n;
        let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let rs = c.rstd[i];
        for (v, &x) in row.iter_mut().zip(xh) {
            *v = rs * (*v - m1 - x * m2);
        }
    }
    dx
}

fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), p: f64, mode: Mode) -> Option<Array2<f64>> {
    if mode == Mode::Eval || p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    // drop when a uniform u32 falls below p * 2^32
    let cut = (p * 4_294_967_296.0) as u64;
    let mut m = Array2::from_elem(shape, keep);
    for v in m.iter_mut() {
        if u64::from(rng.next_u32()) < cut {
            *v = 0.0;
        }
    }
    Some(m)
}

fn apply_mask(a: Array2<f64>, m: &Option<Array2<f64>>) -> Array2<f64> {
    match m {
        Some(m) => a * m,
        None => a,
    }
}

pub(crate) fn embed(model: &Model, input: &ModelInput) -> Embedded {
    let p = &model.params;
    let t = input.steps();
    let d = model.cfg.d_model;
    let species = p.species_emb.row(input.species);

    let c1 = input.ctx.dot(&p.ctx_w1) + &p.ctx_b1;
    let g1 = c1.mapv(gelu);
    let slot0 = g1.dot(&p.ctx_w2) + &p.ctx_b2 + &species;

    let cell_rows = p.cell_emb.select(Axis(0), &input.cells);
    let steps = input.x.dot(&p.input_w) + &p.input_b + cell_rows.dot(&p.cell_proj) + &species + &model.pe.slice(s![1..=t, ..]);

    let mut x0 = Array2::zeros((t + 1, d));
    x0.slice_mut(s![0..1, ..]).assign(&slot0);
    x0.slice_mut(s![1.., ..]).assign(&steps);
    Embedded { x0, c1, g1, cell_rows }
}

pub(crate) fn forward(model: &Model, input: &ModelInput, mode: Mode, rng: &mut impl Rng) -> Result<ForwardOutput> {
    check_input(model, input)?;
    let cfg = &model.cfg;
    let p = &model.params;
    let len = input.steps() + 1;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let drop = cfg.dropout_p;
    // key j is masked for every query when its step is padding
    let masked: Vec<bool> = std::iter::once(false).chain(input.pad.iter().copied()).collect();

    let emb = embed(model, input);
    let mut x = emb.x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (h1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = h1.dot(&lp.wq) + &lp.bq;
        let k = h1.dot(&lp.wk) + &lp.bk;
        let v = h1.dot(&lp.wv) + &lp.bv;
        let mut attn = Array2::zeros((len, cfg.d_model));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let mut prob_masks = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in sc.rows_mut() {
                for (v, &m) in row.iter_mut().zip(&masked) {
                    if m {
                        *v = f64::NEG_INFINITY;
                    }
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let z = row.sum();
                row.mapv_inplace(|v| v / z);
            }
            let pm = dropout_mask(rng, (len, len), drop, mode);
            let pd = apply_mask(sc.clone(), &pm);
            attn.slice_mut(cols).assign(&pd.dot(&v.slice(cols)));
            probs.push(sc);
            prob_masks.push(pm);
        }
        let o = attn.dot(&lp.wo) + &lp.bo;
        let attn_out_mask = dropout_mask(rng, o.dim(), drop, mode);
        let x1 = &x + &apply_mask(o, &attn_out_mask);

        let (h2, ln2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
        let f1 = h2.dot(&lp.ff_w1) + &lp.ff_b1;
        let g_mask = dropout_mask(rng, f1.dim(), drop, mode);
        let (act, f1_grad) = gelu_with_grad(&f1);
        let g = apply_mask(act, &g_mask);
        let f2 = g.dot(&lp.ff_w2) + &lp.ff_b2;
        let ff_out_mask = dropout_mask(rng, f2.dim(), drop, mode);
        x = &x1 + &apply_mask(f2, &ff_out_mask);

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            prob_masks,
            attn,
            attn_out_mask,
            ln2,
            h2,
            f1_grad,
            g_mask,
            g,
            ff_out_mask,
        });
    }
    let (y, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    let readout = input.readout_index().expect("checked above");
    let window_logit = y.row(readout).dot(&p.head_w.column(0)) + p.head_b[[0, 0]];
    let step_logits = p.step_head.as_ref().map(|(w, b)| {
        let z = y.slice(s![1.., ..]).dot(w) + b;
        z.column(0).to_vec()
    });
    Ok(ForwardOutput {
        window_logit,
        step_logits,
        cache: Some(Box::new(Cache {
            input: input.clone(),
            emb,
            layers,
            lnf,
            y,
            readout,
        })),
    })
}

fn mask_grad(d: Array2<f64>, m: &Option<Array2<f64>>) -> Array2<f64> {
    apply_mask(d, m)
}

fn matmul_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    a.t().dot(b)
}

/// Adds the gradients of one forward pass into `gr`.
pub(crate) fn backward(
    model: &Model,
    out: &ForwardOutput,
    d_logit: f64,
    d_steps: Option<&[f64]>,
    gr: &mut GradientSet,
) -> Result<super::InputGradient> {
    let cache = out.cache.as_deref().ok_or(Error::MissingCache)?;
    let cfg = &model.cfg;
    let p = &model.params;
    let len = cache.y.nrows();
    let t = len - 1;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dy = Array2::zeros((len, cfg.d_model));
    dy.row_mut(cache.readout).scaled_add(d_logit, &p.head_w.column(0));
    gr.head_w.column_mut(0).scaled_add(d_logit, &cache.y.row(cache.readout));
    gr.head_b[[0, 0]] += d_logit;
    match (d_steps, &p.step_head, &mut gr.step_head) {
        (Some(ds), Some((w, _)), Some((gw, gb))) => {
            if ds.len() != t {
                return Err(Error::invalid(format!("{} step gradients for {t} steps", ds.len())));
            }
            let dz = Array2::from_shape_fn((t, 1), |(i, _)| ds[i]);
            dy.slice_mut(s![1.., ..]).scaled_add(1.0, &dz.dot(&w.t()));
            *gw += &cache.y.slice(s![1.., ..]).t().dot(&dz);
            gb[[0, 0]] += dz.sum();
        }
        (Some(_), None, _) => return Err(Error::invalid("step gradients given but the step head is disabled")),
        _ => {}
    }

    let mut dx = layer_norm_backward(&dy, &cache.lnf, &p.lnf_g, &mut gr.lnf_g, &mut gr.lnf_b);

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[li];
        let lg = &mut gr.layers[li];

        // feed-forward branch
        let df2 = mask_grad(dx.clone(), &lc.ff_out_mask);
        lg.ff_w2 += &matmul_tn(&lc.g, &df2);
        lg.ff_b2 += &sum_rows(&df2);
        let dg = mask_grad(df2.dot(&lp.ff_w2.t()), &lc.g_mask);
        let df1 = dg * &lc.f1_grad;
        lg.ff_w1 += &matmul_tn(&lc.h2, &df1);
        lg.ff_b1 += &sum_rows(&df1);
        let dh2 = df1.dot(&lp.ff_w1.t());
        let dx1 = dx + layer_norm_backward(&dh2, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

        // attention branch
        let d_o = mask_grad(dx1.clone(), &lc.attn_out_mask);
        lg.wo += &matmul_tn(&lc.attn, &d_o);
        lg.bo += &sum_rows(&d_o);
        let d_attn = d_o.dot(&lp.wo.t());
        let mut dq = Array2::zeros(lc.q.dim());
        let mut dk = Array2::zeros(lc.k.dim());
        let mut dv = Array2::zeros(lc.v.dim());
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &lc.probs[h];
            let pd = apply_mask(probs.clone(), &lc.prob_masks[h]);
            let da: ArrayView2<f64> = d_attn.slice(cols);
            dv.slice_mut(cols).assign(&pd.t().dot(&da));
            let dp = mask_grad(da.dot(&lc.v.slice(cols).t()), &lc.prob_masks[h]);
            let mut ds = dp * probs;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&prow, |v, &pr| *v -= pr * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        lg.wq += &matmul_tn(&lc.h1, &dq);
        lg.bq += &sum_rows(&dq);
        lg.wk += &matmul_tn(&lc.h1, &dk);
        lg.bk += &sum_rows(&dk);
        lg.wv += &matmul_tn(&lc.h1, &dv);
        lg.bv += &sum_rows(&dv);
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        dx = dx1 + layer_norm_backward(&dh1, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
    }

    // embedding
    let input = &cache.input;
    let emb = &cache.emb;
    let d_slot0 = dx.slice(s![0..1, ..]).to_owned();
    let d_steps_emb = dx.slice(s![1.., ..]).to_owned();
    let species_total = &d_slot0 + &sum_rows(&d_steps_emb);
    gr.species_emb.row_mut(input.species).scaled_add(1.0, &species_total.row(0));

    gr.ctx_w2 += &matmul_tn(&emb.g1, &d_slot0);
    gr.ctx_b2 += &d_slot0;
    let dc1 = d_slot0.dot(&p.ctx_w2.t()) * &emb.c1.mapv(gelu_grad);
    gr.ctx_w1 += &matmul_tn(&input.ctx, &dc1);
    gr.ctx_b1 += &dc1;

    gr.input_w += &matmul_tn(&input.x, &d_steps_emb);
    gr.input_b += &sum_rows(&d_steps_emb);
    gr.cell_proj += &matmul_tn(&emb.cell_rows, &d_steps_emb);
    let d_cell_rows = d_steps_emb.dot(&p.cell_proj.t());
    for (i, &c) in input.cells.iter().enumerate() {
        gr.cell_emb.row_mut(c).scaled_add(1.0, &d_cell_rows.row(i));
    }
    let d_x = d_steps_emb.dot(&p.input_w.t());
    Ok(super::InputGradient { d_x })
}
