//! Exact gradients of the calibration loss.
//!
//! The computation graph is fixed (balanced ratio -> token network -> scale
//! means -> weighted sum -> smoothed BCE, plus the scale-weight penalty), so
//! the reverse pass is written out by hand instead of going through a
//! general autodiff engine.
//!
//! Every token score enters the image score linearly, which means the
//! derivative of `P(x)` with respect to the parameters can be accumulated
//! during the forward pass; the loss derivative `dL/dP` then just scales that
//! per-image vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::record::TokenLikelihoodRecord;
use crate::scores::{InputMode, Mlp, ScoreModel};

/// Where each trainable scalar lives in a flat parameter vector.
///
/// Ordering: `alpha` (ratio mode only), network parameters in
/// [`Mlp::write_params`] order, then scale weights (only when `S > 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub has_alpha: bool,
    pub n_mlp: usize,
    pub n_weights: usize,
}

impl ParamLayout {
    pub fn of(model: &ScoreModel) -> Self {
        let s = model.n_scales();
        Self {
            has_alpha: model.mode() == InputMode::Ratio1d,
            n_mlp: model.mlp.param_count(),
            n_weights: if s > 1 { s } else { 0 },
        }
    }

    pub fn len(&self) -> usize {
        usize::from(self.has_alpha) + self.n_mlp + self.n_weights
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha_index(&self) -> Option<usize> {
        self.has_alpha.then_some(0)
    }

    pub fn mlp_range(&self) -> std::ops::Range<usize> {
        let start = usize::from(self.has_alpha);
        start..start + self.n_mlp
    }

    pub fn weights_range(&self) -> std::ops::Range<usize> {
        let start = self.mlp_range().end;
        start..start + self.n_weights
    }
}

/// All trainable scalars of a [`ScoreModel`] in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn pack(model: &ScoreModel) -> Self {
        let layout = ParamLayout::of(model);
        let mut v = vec![0.0; layout.len()];
        if let Some(i) = layout.alpha_index() {
            v[i] = model.alpha;
        }
        model.mlp.write_params(&mut v[layout.mlp_range()]);
        if layout.n_weights > 0 {
            v[layout.weights_range()].copy_from_slice(&model.scale_weights);
        }
        Self(v)
    }

    pub fn unpack_into(&self, model: &mut ScoreModel) {
        let layout = ParamLayout::of(model);
        assert_eq!(self.0.len(), layout.len(), "parameter vector length");
        if let Some(i) = layout.alpha_index() {
            model.alpha = self.0[i];
        }
        model.mlp.read_params(&self.0[layout.mlp_range()]);
        if layout.n_weights > 0 {
            model
                .scale_weights
                .copy_from_slice(&self.0[layout.weights_range()]);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One labelled training image; `target` is 1 for generated, 0 for real.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub record: &'a TokenLikelihoodRecord,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub label_smoothing: f64,
    pub weight_penalty: f64,
}

/// Gaussian noise added to every network input during training.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub sigmas: Vec<f64>,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(sigmas: Vec<f64>, rng: ChaCha8Rng) -> Self {
        Self { sigmas, rng }
    }

    pub fn from_seed(sigmas: Vec<f64>, seed: u64) -> Self {
        Self::new(sigmas, ChaCha8Rng::seed_from_u64(seed))
    }

    #[inline]
    fn draw(&mut self, scale: usize) -> f64 {
        let sigma = self.sigmas[scale];
        if sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = self.rng.sample(StandardNormal);
        sigma * z
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `| ||w||_1 - 1 |` and its subgradient (zero at the kink and at `w_s = 0`).
pub fn weight_penalty(weights: &[f64]) -> (f64, Vec<f64>) {
    let norm: f64 = weights.iter().map(|w| w.abs()).sum();
    let outer = sign(norm - 1.0);
    let grad = weights.iter().map(|&w| outer * sign(w)).collect();
    ((norm - 1.0).abs(), grad)
}

/// Scratch buffers reused across calls.
#[derive(Debug, Default, Clone)]
pub struct GradWorkspace {
    h1: Vec<f64>,
    d1: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    sample_grad: Vec<f64>,
    scale_means: Vec<f64>,
}

/// Mean smoothed BCE over the batch plus the weight penalty, and its exact
/// gradient with respect to [`ParamVector`]. Noise, when given, perturbs the
/// network inputs and is held constant for differentiation.
pub fn loss_and_grad(
    model: &ScoreModel,
    batch: &[Sample<'_>],
    settings: &LossSettings,
    noise: Option<&mut NoiseSource>,
) -> Result<(f64, ParamVector)> {
    let mut grad = vec![0.0; ParamLayout::of(model).len()];
    let mut ws = GradWorkspace::default();
    let loss = loss_and_grad_into(model, batch, settings, noise, &mut ws, &mut grad)?;
    Ok((loss, ParamVector(grad)))
}

/// Allocation-free variant of [`loss_and_grad`]; `grad` is overwritten.
pub fn loss_and_grad_into(
    model: &ScoreModel,
    batch: &[Sample<'_>],
    settings: &LossSettings,
    mut noise: Option<&mut NoiseSource>,
    ws: &mut GradWorkspace,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    let layout = ParamLayout::of(model);
    assert_eq!(grad.len(), layout.len(), "gradient buffer length");
    let h = model.mlp.n_hidden;
    for buf in [&mut ws.h1, &mut ws.d1, &mut ws.h2, &mut ws.u, &mut ws.v] {
        buf.resize(h, 0.0);
    }
    ws.sample_grad.resize(layout.len(), 0.0);
    ws.scale_means.resize(model.n_scales(), 0.0);
    grad.fill(0.0);

    let eps = settings.label_smoothing;
    let inv_batch = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for sample in batch {
        if sample.target != 0.0 && sample.target != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "target must be 0 or 1, got {}",
                sample.target
            )));
        }
        model.check_record(sample.record)?;
        let p = image_forward_backward(model, &layout, sample.record, noise.as_deref_mut(), ws);
        let target = sample.target * (1.0 - eps) + 0.5 * eps;
        loss += (softplus(p) - target * p) * inv_batch;
        let dl_dp = (sigmoid(p) - target) * inv_batch;
        for (g, s) in grad.iter_mut().zip(&ws.sample_grad) {
            *g += dl_dp * s;
        }
    }

    if layout.n_weights > 0 && settings.weight_penalty != 0.0 {
        let (pen, pen_grad) = weight_penalty(&model.scale_weights);
        loss += settings.weight_penalty * pen;
        for (g, pg) in grad[layout.weights_range()].iter_mut().zip(pen_grad) {
            *g += settings.weight_penalty * pg;
        }
    }

    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    Ok(loss)
}

/// Computes `P(x)` and leaves `dP/dparams` in `ws.sample_grad`.
fn image_forward_backward(
    model: &ScoreModel,
    layout: &ParamLayout,
    record: &TokenLikelihoodRecord,
    mut noise: Option<&mut NoiseSource>,
    ws: &mut GradWorkspace,
) -> f64 {
    let mlp = &model.mlp;
    let h = mlp.n_hidden;
    let d_in = mlp.input_dim();
    let alpha = model.alpha;
    let clamp = model.input_clamp;

    let GradWorkspace {
        h1,
        d1,
        h2,
        u,
        v,
        sample_grad: g,
        scale_means,
    } = ws;
    g.fill(0.0);

    let m0 = layout.mlp_range().start;
    let (gw1, rest) = g[m0..m0 + layout.n_mlp].split_at_mut(h * d_in);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, rest) = rest.split_at_mut(h * h);
    let (gb2, rest) = rest.split_at_mut(h);
    let (gw3, gb3) = rest.split_at_mut(h);
    let mut g_alpha = 0.0;

    let mut x = [0.0f64; 2];
    let mut x_live = [true; 2];

    for (s, (block, &w_s)) in record.scales.iter().zip(&model.scale_weights).enumerate() {
        let coeff = w_s / block.len() as f64;
        let mut out_sum = 0.0;
        for (pc, pu) in block.tokens() {
            // Network input, with clamp bookkeeping.
            match mlp.mode {
                InputMode::Ratio1d => {
                    let mut raw = (2.0 - alpha) * pc - alpha * pu;
                    if let Some(n) = noise.as_deref_mut() {
                        raw += n.draw(s);
                    }
                    let (xc, live) = clamp_with_flag(raw, clamp);
                    x[0] = xc;
                    x_live[0] = live;
                }
                InputMode::Pair2d => {
                    let (mut a, mut b) = (pc, pu);
                    if let Some(n) = noise.as_deref_mut() {
                        a += n.draw(s);
                        b += n.draw(s);
                    }
                    let (xa, la) = clamp_with_flag(a, clamp);
                    let (xb, lb) = clamp_with_flag(b, clamp);
                    x = [xa, xb];
                    x_live = [la, lb];
                }
            }
            let x = &x[..d_in];

            // Forward.
            for j in 0..h {
                let mut z = mlp.b1[j];
                for (i, xi) in x.iter().enumerate() {
                    z += mlp.w1[j * d_in + i] * xi;
                }
                if z >= 0.0 {
                    h1[j] = z;
                    d1[j] = 1.0;
                } else {
                    let e = z.exp();
                    h1[j] = e - 1.0;
                    d1[j] = e;
                }
            }
            let mut out = mlp.b3;
            for k in 0..h {
                let row = &mlp.w2[k * h..(k + 1) * h];
                let z = mlp.b2[k] + dot(row, h1);
                // u_k = coeff * w3_k * elu'(z2_k)
                if z >= 0.0 {
                    h2[k] = z;
                    u[k] = coeff * mlp.w3[k];
                } else {
                    let e = z.exp();
                    h2[k] = e - 1.0;
                    u[k] = coeff * mlp.w3[k] * e;
                }
                out += mlp.w3[k] * h2[k];
            }
            out_sum += out;

            // Backward, scaled by dP/d(out) = coeff.
            gb3[0] += coeff;
            for (gw, &hk) in gw3.iter_mut().zip(h2.iter()) {
                *gw += coeff * hk;
            }
            v.fill(0.0);
            for k in 0..h {
                let uk = u[k];
                gb2[k] += uk;
                let row = &mlp.w2[k * h..(k + 1) * h];
                let grow = &mut gw2[k * h..(k + 1) * h];
                for ((gw, &hj), (vj, &w)) in
                    grow.iter_mut().zip(h1.iter()).zip(v.iter_mut().zip(row))
                {
                    *gw += uk * hj;
                    *vj += uk * w;
                }
            }
            let mut dx = [0.0f64; 2];
            for j in 0..h {
                let delta1 = d1[j] * v[j];
                gb1[j] += delta1;
                for (i, xi) in x.iter().enumerate() {
                    gw1[j * d_in + i] += delta1 * xi;
                    dx[i] += mlp.w1[j * d_in + i] * delta1;
                }
            }
            if mlp.mode == InputMode::Ratio1d && x_live[0] {
                g_alpha += dx[0] * (-pc - pu);
            }
        }
        scale_means[s] = out_sum / block.len() as f64;
    }

    if let Some(i) = layout.alpha_index() {
        g[i] = g_alpha;
    }
    if layout.n_weights > 0 {
        g[layout.weights_range()].copy_from_slice(scale_means);
    }
    model
        .scale_weights
        .iter()
        .zip(scale_means.iter())
        .map(|(w, m)| w * m)
        .sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Clamped value and whether the gradient flows through it.
#[inline]
fn clamp_with_flag(x: f64, clamp: f64) -> (f64, bool) {
    if clamp > 0.0 && x.abs() > clamp {
        (clamp.copysign(x), false)
    } else {
        (x, true)
    }
}

/// Loss only, evaluated through the plain scoring path. Used by the
/// finite-difference checks.
pub fn loss_value(model: &ScoreModel, batch: &[Sample<'_>], settings: &LossSettings) -> f64 {
    let eps = settings.label_smoothing;
    let mut loss = 0.0;
    for sample in batch {
        let p = model.score_unchecked(sample.record);
        let target = sample.target * (1.0 - eps) + 0.5 * eps;
        loss += softplus(p) - target * p;
    }
    loss /= batch.len() as f64;
    if model.n_scales() > 1 {
        loss += settings.weight_penalty * weight_penalty(&model.scale_weights).0;
    }
    loss
}

/// Deterministic network initialization, uniform in `+-1/sqrt(fan_in)` for
/// weights and biases of each layer.
pub fn init_mlp<R: Rng>(mlp: &mut Mlp, rng: &mut R) {
    let d_in = mlp.input_dim() as f64;
    let h = mlp.n_hidden as f64;
    let mut fill = |buf: &mut [f64], fan_in: f64| {
        let bound = 1.0 / fan_in.sqrt();
        for v in buf {
            *v = rng.random_range(-bound..bound);
        }
    };
    fill(&mut mlp.w1, d_in);
    fill(&mut mlp.b1, d_in);
    fill(&mut mlp.w2, h);
    fill(&mut mlp.b2, h);
    fill(&mut mlp.w3, h);
    let mut b3 = [0.0];
    fill(&mut b3, h);
    mlp.b3 = b3[0];
}
