//! Content-side adaptor: mix-style layer normalization, duration
//! prediction, length regulation and the pitch predictor architecture
//! shared by the style-agnostic and style-specific branches.

use melstyle_autograd::{ParamStore, RngStream, Tensor, Var};

use crate::config::{MixStyleConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, Fwd, Linear, LN_EPS};

/// Linear maps from a style vector to the scale and bias of a conditional
/// layer norm. With `bias` enabled the scale map starts from one.
#[derive(Clone, Debug)]
pub struct ConditionalScaleBias {
    pub gamma: Linear,
    pub beta: Linear,
}

impl ConditionalScaleBias {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, name: &str, dim: usize, bias: bool) -> Result<Self> {
        let gamma = Linear::new(ps, rng, &format!("{name}.gamma"), dim, dim, bias)?;
        let beta = Linear::new(ps, rng, &format!("{name}.beta"), dim, dim, bias)?;
        if let Some(b) = gamma.b {
            ps.set(b, Tensor::filled(&[dim], 1.0))?;
        }
        Ok(Self { gamma, beta })
    }

    /// `(gamma(w), beta(w))` for a style row `w: [1, dim]`, each `[dim]`.
    pub fn scale_bias(&self, f: &mut Fwd, w: Var) -> Result<(Var, Var)> {
        let dim = self.gamma.out_dim;
        let g = self.gamma.forward(f, w)?;
        let b = self.beta.forward(f, w)?;
        Ok((f.g.reshape(g, &[dim])?, f.g.reshape(b, &[dim])?))
    }

    /// Conditional layer norm `gamma(w) * norm(x) + beta(w)`.
    pub fn cln(&self, f: &mut Fwd, x: Var, w: Var) -> Result<Var> {
        let (g, b) = self.scale_bias(f, w)?;
        apply_scale_bias(f, x, g, b)
    }
}

fn apply_scale_bias(f: &mut Fwd, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = f.g.layer_norm(x, LN_EPS)?;
    let y = f.g.mul_row(n, gamma)?;
    Ok(f.g.add_row(y, beta)?)
}

/// Random choices of one mix-style application: a mixing weight per batch
/// item and the partner permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDraw {
    pub lambdas: Vec<f64>,
    pub perm: Vec<usize>,
}

/// Decides whether a batch of `b` items is mixed and draws the mixing
/// variables. `None` means the layer is the identity for this batch.
pub fn draw_mix(cfg: &MixStyleConfig, b: usize, rng: &mut RngStream) -> Result<Option<MixDraw>> {
    cfg.validate()?;
    if !cfg.training || rng.uniform() > cfg.p {
        return Ok(None);
    }
    let lambdas = (0..b).map(|_| rng.beta(cfg.alpha)).collect::<melstyle_autograd::Result<Vec<_>>>()?;
    Ok(Some(MixDraw { lambdas, perm: rng.permutation(b) }))
}

/// Mixes scale and bias of batch item `i` with those of item `perm[i]`.
pub fn mix_with(
    f: &mut Fwd,
    csb: &ConditionalScaleBias,
    xs: &[Var],
    ws: &[Var],
    draw: &MixDraw,
) -> Result<Vec<Var>> {
    if xs.len() != ws.len() || draw.lambdas.len() != xs.len() || draw.perm.len() != xs.len() {
        return Err(Error::validation(format!(
            "mix-style batch mismatch: {} inputs, {} style vectors, {} mixing weights",
            xs.len(),
            ws.len(),
            draw.lambdas.len()
        )));
    }
    let sb = ws.iter().map(|&w| csb.scale_bias(f, w)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let lam = draw.lambdas[i];
        let j = draw.perm[i];
        let mix = |f: &mut Fwd, a: Var, b: Var| -> Result<Var> {
            let a = f.g.scale(a, lam)?;
            let b = f.g.scale(b, 1.0 - lam)?;
            Ok(f.g.add(a, b)?)
        };
        let gamma = mix(f, sb[i].0, sb[j].0)?;
        let beta = mix(f, sb[i].1, sb[j].1)?;
        out.push(apply_scale_bias(f, x, gamma, beta)?);
    }
    Ok(out)
}

/// Mix-style layer normalization over a batch of hidden sequences `xs[i]:
/// [L_i, dim]` with style rows `ws[i]: [1, dim]`. Outside training, or when
/// the gate draw exceeds `p`, the inputs are returned unchanged.
pub fn mix_style_layer_norm(
    f: &mut Fwd,
    csb: &ConditionalScaleBias,
    xs: &[Var],
    ws: &[Var],
    cfg: &MixStyleConfig,
    rng: &mut RngStream,
) -> Result<Vec<Var>> {
    if xs.len() != ws.len() {
        return Err(Error::validation(format!(
            "mix-style batch mismatch: {} inputs, {} style vectors",
            xs.len(),
            ws.len()
        )));
    }
    let cfg = MixStyleConfig { training: cfg.training && f.training(), ..cfg.clone() };
    match draw_mix(&cfg, xs.len(), rng)? {
        Some(draw) => mix_with(f, csb, xs, ws, &draw),
        None => Ok(xs.to_vec()),
    }
}

/// Log-duration predictor: two conv layers and a linear head.
#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub body: ConvStack,
    pub head: Linear,
}

impl DurationPredictor {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, cfg: &ModelConfig) -> Result<Self> {
        let body = ConvStack::new(
            ps,
            rng,
            "duration.body",
            cfg.hidden,
            cfg.predictor_filter,
            2,
            cfg.predictor_kernel,
            cfg.predictor_dropout,
        )?;
        let head = Linear::new(ps, rng, "duration.head", cfg.predictor_filter, 1, true)?;
        Ok(Self { body, head })
    }

    /// Log-duration predictions `[L]` from hidden states `h: [L, dim]` and
    /// the style row `w: [1, dim]`.
    pub fn predict(&self, f: &mut Fwd, h: Var, w: Var) -> Result<Var> {
        let l = f.g.dims(h)[0];
        let dim = f.g.dims(w)[1];
        let wv = f.g.reshape(w, &[dim])?;
        let x = f.g.add_row(h, wv)?;
        let x = self.body.forward(f, x)?;
        let y = self.head.forward(f, x)?;
        Ok(f.g.reshape(y, &[l])?)
    }
}

/// Regression targets: `ln(max(d, 1))` per phoneme.
pub fn log_duration_targets(durations: &[usize]) -> Vec<f64> {
    durations.iter().map(|&d| (d.max(1) as f64).ln()).collect()
}

/// Mean squared error between predicted log-durations and the targets.
pub fn duration_loss(f: &mut Fwd, pred: Var, durations: &[usize]) -> Result<Var> {
    let target = f.g.constant(Tensor::vector(log_duration_targets(durations)));
    let d = f.g.sub(pred, target)?;
    let sq = f.g.square(d)?;
    Ok(f.g.mean(sq)?)
}

/// Frame counts from log-duration predictions: `max(1, round(exp(d)))`.
pub fn durations_from_log(pred: &[f64]) -> Vec<usize> {
    pred.iter().map(|&d| (d.exp().round().max(1.0)).min(1e6) as usize).collect()
}

/// Source row for each output frame.
pub fn expand_indices(durations: &[usize]) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(Error::validation("length regulation needs at least one positive duration"));
    }
    let mut idx = Vec::with_capacity(total);
    for (i, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat(i).take(d));
    }
    Ok(idx)
}

/// Repeats row `i` of `h` `durations[i]` times.
pub fn length_regulate(f: &mut Fwd, h: Var, durations: &[usize]) -> Result<Var> {
    let rows = f.g.dims(h)[0];
    if durations.len() != rows {
        return Err(Error::validation(format!(
            "length regulation: {} durations for {rows} rows",
            durations.len()
        )));
    }
    let idx = expand_indices(durations)?;
    Ok(f.g.gather_rows(h, &idx)?)
}

/// Per-frame CWT coefficients `[T, n_scales]` and utterance statistics `[2]`
/// (log-F0 mean offset, log-F0 std).
#[derive(Clone, Copy, Debug)]
pub struct PitchPrediction {
    pub coeffs: Var,
    pub stats: Var,
}

/// Pitch predictor: conv body, a per-frame coefficient head and a pooled
/// statistics head.
#[derive(Clone, Debug)]
pub struct PitchPredictor {
    pub body: ConvStack,
    pub coeffs: Linear,
    pub stats: Linear,
}

impl PitchPredictor {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let body = ConvStack::new(
            ps,
            rng,
            &format!("{name}.body"),
            cfg.hidden,
            cfg.predictor_filter,
            2,
            cfg.predictor_kernel,
            cfg.predictor_dropout,
        )?;
        let coeffs = Linear::new(ps, rng, &format!("{name}.coeffs"), cfg.predictor_filter, cfg.n_scales, true)?;
        let stats = Linear::new(ps, rng, &format!("{name}.stats"), cfg.predictor_filter, 2, true)?;
        Ok(Self { body, coeffs, stats })
    }

    /// Variant with both heads zero-initialized.
    pub fn new_zero_head(ps: &mut ParamStore, rng: &mut RngStream, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let body = ConvStack::new(
            ps,
            rng,
            &format!("{name}.body"),
            cfg.hidden,
            cfg.predictor_filter,
            2,
            cfg.predictor_kernel,
            cfg.predictor_dropout,
        )?;
        let coeffs = Linear::zeros(ps, &format!("{name}.coeffs"), cfg.predictor_filter, cfg.n_scales, true)?;
        let stats = Linear::zeros(ps, &format!("{name}.stats"), cfg.predictor_filter, 2, true)?;
        Ok(Self { body, coeffs, stats })
    }

    pub fn predict(&self, f: &mut Fwd, x: Var) -> Result<PitchPrediction> {
        let h = self.body.forward(f, x)?;
        let coeffs = self.coeffs.forward(f, h)?;
        let width = f.g.dims(h)[1];
        let pooled = f.g.mean_rows(h)?;
        let pooled = f.g.reshape(pooled, &[1, width])?;
        let stats = self.stats.forward(f, pooled)?;
        let stats = f.g.reshape(stats, &[2])?;
        Ok(PitchPrediction { coeffs, stats })
    }
}
