//! Conditional Glow post-net.
//!
//! Mel frames are squeezed along time (`[T, C] -> [T/f, C*f]`, zero-padding
//! `T` up to a multiple of `f`) and pushed through a chain of flow steps,
//! each `actnorm -> invertible 1x1 -> affine coupling`. Steps reuse a small
//! number of parameter sets (see [`FlowDims::param_index`]).
//!
//! The coupling scale is `sigmoid(raw + 2) / sigmoid(2)`: bounded above by
//! about 1.14, strictly positive, and exactly 1 when the zero-initialized
//! output layer gives `raw = 0`, so a fresh coupling is the identity.

use std::f64::consts::PI;

use melstyle_autograd::linalg::{inverse, random_orthogonal};
use melstyle_autograd::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::config::{FlowSharing, ModelConfig, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{new_param, Fwd, Linear, WaveNet};

const SCALE_SHIFT: f64 = 2.0;
const MIN_SCALE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDims {
    pub in_channels: usize,
    pub cond_channels: usize,
    pub wn_channels: usize,
    pub wn_layers: usize,
    pub kernel: usize,
    pub steps: usize,
    pub groups: usize,
    pub sharing: FlowSharing,
    pub squeeze: usize,
}

impl FlowDims {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            in_channels: N_MELS,
            cond_channels: N_MELS + cfg.hidden,
            wn_channels: cfg.flow_channels,
            wn_layers: cfg.flow_wn_layers,
            kernel: cfg.flow_kernel,
            steps: cfg.flow_steps,
            groups: cfg.flow_groups,
            sharing: cfg.flow_sharing,
            squeeze: cfg.squeeze,
        }
    }

    /// Channels after squeezing.
    pub fn channels(&self) -> usize {
        self.in_channels * self.squeeze
    }

    pub fn unique_steps(&self) -> usize {
        match self.sharing {
            FlowSharing::Cyclic => self.steps / self.groups,
            FlowSharing::Blocked => self.groups,
        }
    }

    pub fn param_index(&self, k: usize) -> usize {
        match self.sharing {
            FlowSharing::Cyclic => k % self.unique_steps(),
            FlowSharing::Blocked => k / (self.steps / self.groups),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.groups == 0 || self.steps % self.groups != 0 {
            return Err(Error::validation(format!(
                "flow steps ({}) must be a positive multiple of groups ({})",
                self.steps, self.groups
            )));
        }
        if self.squeeze == 0 || self.channels() % 2 != 0 {
            return Err(Error::validation("squeezed channel count must be even and positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::validation("flow kernel must be odd"));
        }
        Ok(())
    }
}

/// How fresh parameters are set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowInit {
    /// Random orthogonal 1x1 mixing.
    Random,
    /// Identity 1x1 mixing, so the whole flow starts as the identity map.
    Identity,
}

#[derive(Clone, Debug)]
pub struct Coupling {
    pub start: Linear,
    pub wn: WaveNet,
    pub end: Linear,
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub an_scale: ParamId,
    pub an_bias: ParamId,
    pub mix: ParamId,
    pub coupling: Coupling,
}

#[derive(Clone, Debug)]
pub struct PostNet {
    pub dims: FlowDims,
    pub cond_proj: Linear,
    pub params: Vec<FlowStep>,
}

/// Latent and accumulated log-determinant of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FlowState {
    pub z: Var,
    pub logdet: Var,
}

/// Pads `x: [T, C]` with zero rows to a multiple of `f` and folds `f`
/// consecutive frames into one row. Returns the squeezed tensor and the
/// number of padding rows.
pub fn squeeze(x: &Tensor, f: usize) -> Result<(Tensor, usize)> {
    let (t, c) = (x.rows(), x.cols());
    if f == 0 || t == 0 {
        return Err(Error::validation("squeeze needs a positive factor and at least one frame"));
    }
    let pad = (f - t % f) % f;
    let mut data = x.data().to_vec();
    data.resize((t + pad) * c, 0.0);
    Ok((Tensor::new(vec![(t + pad) / f, c * f], data)?, pad))
}

/// Inverse of [`squeeze`]: unfolds rows and drops `pad` trailing frames.
pub fn unsqueeze(x: &Tensor, f: usize, pad: usize) -> Result<Tensor> {
    let (rows, cf) = (x.rows(), x.cols());
    if f == 0 || cf % f != 0 || pad >= rows * f {
        return Err(Error::validation(format!("cannot unsqueeze {:?} by {f} with padding {pad}", x.dims())));
    }
    let c = cf / f;
    let t = rows * f - pad;
    Ok(Tensor::new(vec![t, c], x.data()[..t * c].to_vec())?)
}

fn squeeze_var(g: &mut Graph, x: Var, f: usize) -> Result<Var> {
    let (t, c) = (g.dims(x)[0], g.dims(x)[1]);
    let pad = (f - t % f) % f;
    let x = if pad > 0 {
        let z = g.constant(Tensor::zeros(&[pad, c]));
        g.concat_rows(&[x, z])?
    } else {
        x
    };
    Ok(g.reshape(x, &[(t + pad) / f, c * f])?)
}

fn numerical(k: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Numerical(format!("flow step {k}: {e}"))
    } else {
        e
    }
}

impl PostNet {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, name: &str, dims: FlowDims, init: FlowInit) -> Result<Self> {
        dims.validate()?;
        let c = dims.channels();
        let w = dims.wn_channels;
        let cond_proj = Linear::new(ps, rng, &format!("{name}.cond"), dims.cond_channels * dims.squeeze, w, true)?;
        let mut params = Vec::with_capacity(dims.unique_steps());
        for p in 0..dims.unique_steps() {
            let n = format!("{name}.step{p}");
            let an_scale = new_param(ps, &format!("{n}.an_scale"), Tensor::filled(&[c], 1.0))?;
            let an_bias = new_param(ps, &format!("{n}.an_bias"), Tensor::zeros(&[c]))?;
            let m = match init {
                FlowInit::Random => random_orthogonal(c, rng),
                FlowInit::Identity => Tensor::eye(c),
            };
            let mix = new_param(ps, &format!("{n}.mix"), m)?;
            let coupling = Coupling {
                start: Linear::new(ps, rng, &format!("{n}.start"), c / 2, w, true)?,
                wn: WaveNet::new(ps, rng, &format!("{n}.wn"), w, dims.wn_layers, dims.kernel, Some(w))?,
                end: Linear::zeros(ps, &format!("{n}.end"), w, c, true)?,
            };
            params.push(FlowStep { an_scale, an_bias, mix, coupling });
        }
        Ok(Self { dims, cond_proj, params })
    }

    /// Squeezes per-frame conditioning `[T, cond_channels]` and projects it
    /// to the conditioner width.
    pub fn prepare_condition(&self, f: &mut Fwd, cond: Var) -> Result<Var> {
        let c = f.g.dims(cond)[1];
        if c != self.dims.cond_channels {
            return Err(Error::validation(format!(
                "flow condition has {c} channels, expected {}",
                self.dims.cond_channels
            )));
        }
        let sq = squeeze_var(f.g, cond, self.dims.squeeze)?;
        self.cond_proj.forward(f, sq)
    }

    fn check_scale(&self, f: &Fwd, step: &FlowStep, k: usize) -> Result<()> {
        if f.store.get(step.an_scale).data().iter().any(|s| s.abs() < MIN_SCALE) {
            return Err(Error::Numerical(format!("flow step {k}: actnorm scale is zero (non-invertible)")));
        }
        Ok(())
    }

    /// `(log_scale_raw, shift)` from the coupling conditioner.
    fn conditioner(&self, f: &mut Fwd, step: &FlowStep, xa: Var, cond: Var) -> Result<(Var, Var)> {
        let half = self.dims.channels() / 2;
        let h = step.coupling.start.forward(f, xa)?;
        let h = step.coupling.wn.forward(f, h, Some(cond))?;
        let out = step.coupling.end.forward(f, h)?;
        let raw = f.g.slice_cols(out, 0, half)?;
        let shift = f.g.slice_cols(out, half, 2 * half)?;
        Ok((raw, shift))
    }

    fn coupling_scale(f: &mut Fwd, raw: Var) -> Result<Var> {
        let s = f.g.add_scalar(raw, SCALE_SHIFT)?;
        let s = f.g.sigmoid(s)?;
        let norm = 1.0 + (-SCALE_SHIFT).exp();
        Ok(f.g.scale(s, norm)?)
    }

    fn step_forward(&self, f: &mut Fwd, k: usize, x: Var, cond: Var) -> Result<(Var, Var)> {
        let step = &self.params[self.dims.param_index(k)];
        self.check_scale(f, step, k)?;
        let rows = f.g.dims(x)[0] as f64;
        let half = self.dims.channels() / 2;
        let (s, b) = (f.p(step.an_scale), f.p(step.an_bias));
        let x = f.g.add_row(x, b)?;
        let x = f.g.mul_row(x, s)?;
        let abs = f.g.abs(s)?;
        let logs = f.g.log(abs)?;
        let ld_an = f.g.sum(logs)?;
        let ld_an = f.g.scale(ld_an, rows)?;

        let w = f.p(step.mix);
        let x = f.g.matmul(x, w)?;
        let ld_w = f.g.log_abs_det(w)?;
        let ld_w = f.g.scale(ld_w, rows)?;

        let xa = f.g.slice_cols(x, 0, half)?;
        let xb = f.g.slice_cols(x, half, 2 * half)?;
        let (raw, shift) = self.conditioner(f, step, xa, cond)?;
        let sc = Self::coupling_scale(f, raw)?;
        let yb = f.g.mul(sc, xb)?;
        let yb = f.g.add(yb, shift)?;
        let y = f.g.concat_cols(&[xa, yb])?;
        let lsc = f.g.log(sc)?;
        let ld_c = f.g.sum(lsc)?;
        let ld = f.g.add_all(&[ld_an, ld_w, ld_c])?;
        if !f.value(y).is_finite() {
            return Err(Error::Numerical(format!("flow step {k}: non-finite output")));
        }
        Ok((y, ld))
    }

    /// Squeezed data `[T', C]` to latent, with the summed log-determinant.
    pub fn forward(&self, f: &mut Fwd, x: Var, cond: Var) -> Result<FlowState> {
        let mut x = x;
        let mut parts = Vec::with_capacity(self.dims.steps);
        for k in 0..self.dims.steps {
            let (y, ld) = self.step_forward(f, k, x, cond).map_err(|e| numerical(k, e))?;
            x = y;
            parts.push(ld);
        }
        let logdet = f.g.add_all(&parts)?;
        Ok(FlowState { z: x, logdet })
    }

    /// Latent to squeezed data, running the steps backwards.
    pub fn inverse(&self, f: &mut Fwd, z: Var, cond: Var) -> Result<Var> {
        let half = self.dims.channels() / 2;
        let mut y = z;
        for k in (0..self.dims.steps).rev() {
            let step = &self.params[self.dims.param_index(k)];
            self.check_scale(f, step, k)?;
            let ya = f.g.slice_cols(y, 0, half)?;
            let yb = f.g.slice_cols(y, half, 2 * half)?;
            let (raw, shift) = self.conditioner(f, step, ya, cond)?;
            let sc = Self::coupling_scale(f, raw)?;
            let xb = f.g.sub(yb, shift)?;
            let xb = f.g.div(xb, sc)?;
            let x = f.g.concat_cols(&[ya, xb])?;

            let winv = inverse(f.store.get(step.mix)).map_err(|e| numerical(k, e.into()))?;
            let winv = f.g.constant(winv);
            let x = f.g.matmul(x, winv)?;

            let inv_s = f.store.get(step.an_scale).map(|s| 1.0 / s);
            let neg_b = f.store.get(step.an_bias).map(|b| -b);
            let inv_s = f.g.constant(inv_s);
            let neg_b = f.g.constant(neg_b);
            let x = f.g.mul_row(x, inv_s)?;
            y = f.g.add_row(x, neg_b)?;
            if !f.value(y).is_finite() {
                return Err(Error::Numerical(format!("flow step {k}: non-finite inverse")));
            }
        }
        Ok(y)
    }

    /// Negative log-likelihood per dimension of `mel: [T, in_channels]`
    /// given raw conditioning `[T, cond_channels]`. Padding frames count as
    /// data dimensions.
    pub fn nll(&self, f: &mut Fwd, mel: &Tensor, cond: Var) -> Result<(FlowState, Var)> {
        let (sq, _) = squeeze(mel, self.dims.squeeze)?;
        let x = f.g.constant(sq);
        let c = self.prepare_condition(f, cond)?;
        let st = self.forward(f, x, c)?;
        let n = f.g.value(st.z).len() as f64;
        let z2 = f.g.square(st.z)?;
        let z2 = f.g.sum(z2)?;
        let prior = f.g.scale(z2, 0.5)?;
        let prior = f.g.add_scalar(prior, 0.5 * n * (2.0 * PI).ln())?;
        let total = f.g.sub(prior, st.logdet)?;
        let nll = f.g.scale(total, 1.0 / n)?;
        Ok((st, nll))
    }

    /// Draws `z ~ N(0, tau^2 I)` and maps it back to `frames` mel frames.
    pub fn sample(&self, f: &mut Fwd, cond: Var, frames: usize, tau: f64) -> Result<Tensor> {
        if tau < 0.0 {
            return Err(Error::validation(format!("temperature must be >= 0, got {tau}")));
        }
        let fct = self.dims.squeeze;
        let rows = frames.div_ceil(fct);
        let pad = rows * fct - frames;
        let c = self.dims.channels();
        let z: Vec<f64> = (0..rows * c).map(|_| tau * f.rng.normal()).collect();
        let z = f.g.constant(Tensor::new(vec![rows, c], z)?);
        let cp = self.prepare_condition(f, cond)?;
        let x = self.inverse(f, z, cp)?;
        unsqueeze(f.value(x), fct, pad)
    }

    /// Data-dependent actnorm initialization over a batch of
    /// `(mel, condition)` pairs: each parameter set, at its first use along
    /// the chain, is set so its output has zero mean and unit variance per
    /// channel over all batch frames.
    pub fn data_init(&self, store: &mut ParamStore, batch: &[(Tensor, Tensor)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::validation("actnorm initialization needs a non-empty batch"));
        }
        let c = self.dims.channels();
        let mut xs: Vec<Tensor> = batch.iter().map(|(m, _)| squeeze(m, self.dims.squeeze).map(|t| t.0)).collect::<Result<_>>()?;
        let mut done = vec![false; self.params.len()];
        for k in 0..self.dims.steps {
            let p = self.dims.param_index(k);
            if !done[p] {
                let mut mean = vec![0.0; c];
                let mut sq = vec![0.0; c];
                let mut n = 0.0;
                for x in &xs {
                    for r in 0..x.rows() {
                        for (j, v) in x.row(r).iter().enumerate() {
                            mean[j] += v;
                        }
                    }
                    n += x.rows() as f64;
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for x in &xs {
                    for r in 0..x.rows() {
                        for (j, v) in x.row(r).iter().enumerate() {
                            sq[j] += (v - mean[j]).powi(2);
                        }
                    }
                }
                let scale: Vec<f64> = sq
                    .iter()
                    .map(|s| {
                        let sd = (s / n).sqrt();
                        if sd > 1e-6 {
                            1.0 / sd
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let bias: Vec<f64> = mean.iter().map(|m| -m).collect();
                let (mut scale, mut bias) = (Tensor::vector(scale), Tensor::vector(bias));
                scale.round_to_f32();
                bias.round_to_f32();
                store.set(self.params[p].an_scale, scale)?;
                store.set(self.params[p].an_bias, bias)?;
                done[p] = true;
            }
            let mut next = Vec::with_capacity(xs.len());
            for (x, (_, cond)) in xs.iter().zip(batch) {
                let mut g = Graph::new(false);
                let mut f = Fwd::new(&mut g, store, RngStream::new(0));
                let cv = f.g.constant(cond.clone());
                let cp = self.prepare_condition(&mut f, cv)?;
                let xv = f.g.constant(x.clone());
                let (y, _) = self.step_forward(&mut f, k, xv, cp).map_err(|e| numerical(k, e))?;
                next.push(f.value(y).clone());
            }
            xs = next;
        }
        Ok(())
    }
}
