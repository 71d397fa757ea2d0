//! Layer building blocks shared by the encoder, decoder, adaptors and flow.
//!
//! Layers own only [`ParamId`]s. A forward pass borrows the parameter store
//! through a [`Fwd`] context that also carries the dropout RNG and collects
//! attention maps for inspection.

use melstyle_autograd::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::error::Result;

/// Per-pass context: the tape, the parameters and pass-local randomness.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub rng: RngStream,
    /// Attention matrices produced during the pass, in creation order.
    pub attention: Vec<Tensor>,
    pub record_attention: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, rng: RngStream) -> Self {
        Self { g, store, rng, attention: Vec::new(), record_attention: false }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn training(&self) -> bool {
        self.g.is_training()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        Ok(self.g.dropout(x, rate, &mut self.rng)?)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    fn record(&mut self, attn: Var) {
        if self.record_attention {
            self.attention.push(self.g.value(attn).clone());
        }
    }
}

/// Adds a parameter after rounding it to single precision, so that saved
/// checkpoints hold exactly the values training starts from.
pub fn new_param(ps: &mut ParamStore, name: &str, mut t: Tensor) -> Result<ParamId> {
    t.round_to_f32();
    Ok(ps.add(name, t)?)
}

fn gaussian(dims: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal() * std).collect()).expect("dims are positive")
}

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, name: &str, i: usize, o: usize, bias: bool) -> Result<Self> {
        let w = new_param(ps, &format!("{name}.w"), gaussian(&[i, o], (1.0 / i as f64).sqrt(), rng))?;
        let b = if bias { Some(new_param(ps, &format!("{name}.b"), Tensor::zeros(&[o]))?) } else { None };
        Ok(Self { w, b, in_dim: i, out_dim: o })
    }

    /// Weights and bias start at zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool) -> Result<Self> {
        let w = new_param(ps, &format!("{name}.w"), Tensor::zeros(&[i, o]))?;
        let b = if bias { Some(new_param(ps, &format!("{name}.b"), Tensor::zeros(&[o]))?) } else { None };
        Ok(Self { w, b, in_dim: i, out_dim: o })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                Ok(f.g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Same-padded 1-D convolution over time; input `[T, in]`, output `[T, out]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        i: usize,
        o: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = (kernel * i) as f64;
        let w = new_param(ps, &format!("{name}.w"), gaussian(&[kernel * i, o], (1.0 / fan_in).sqrt(), rng))?;
        let b = new_param(ps, &format!("{name}.b"), Tensor::zeros(&[o]))?;
        Ok(Self { w, b, kernel, dilation })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.g.conv1d(x, w, self.kernel, self.dilation)?;
        Ok(f.g.add_row(y, b)?)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: new_param(ps, &format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: new_param(ps, &format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let n = f.g.layer_norm(x, LN_EPS)?;
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        let y = f.g.mul_row(n, g)?;
        Ok(f.g.add_row(y, b)?)
    }
}

/// Sinusoidal position table `[len, dim]`: sine on even columns, cosine on
/// odd ones, wavelength growing geometrically to `10000 * 2 pi`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive dims")
}

pub fn add_positional(f: &mut Fwd, x: Var) -> Result<Var> {
    let d = f.g.dims(x).to_vec();
    let pe = f.g.constant(positional_encoding(d[0], d[1]));
    Ok(f.g.add(x, pe)?)
}

/// Multi-head self-attention with output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, rng: &mut RngStream, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(ps, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let dim = self.q.out_dim;
        let dh = dim / self.heads;
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = f.g.slice_cols(q, lo, hi)?;
            let kh = f.g.slice_cols(k, lo, hi)?;
            let vh = f.g.slice_cols(v, lo, hi)?;
            let scores = f.g.matmul_t(qh, false, kh, true)?;
            let scores = f.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = f.g.softmax(scores)?;
            f.record(attn);
            outs.push(f.g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { f.g.concat_cols(&outs)? };
        self.o.forward(f, cat)
    }
}

/// Single-head cross attention `softmax(Q K^T / sqrt(d)) V`.
pub fn cross_attention(f: &mut Fwd, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = f.g.dims(q)[1] as f64;
    let scores = f.g.matmul_t(q, false, k, true)?;
    let scores = f.g.scale(scores, 1.0 / d.sqrt())?;
    let attn = f.g.softmax(scores)?;
    f.record(attn);
    Ok(f.g.matmul(attn, v)?)
}

/// Feed-forward Transformer block, post-norm:
/// `x = LN(x + MHA(x))`, then `x = LN(x + Conv_1(relu(Conv_k(x))))`.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub conv1: Conv,
    pub conv2: Conv,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        filter: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(ps, rng, &format!("{name}.attn"), dim, heads)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            conv1: Conv::new(ps, rng, &format!("{name}.conv1"), dim, filter, kernel, 1)?,
            conv2: Conv::new(ps, rng, &format!("{name}.conv2"), filter, dim, 1, 1)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            dropout,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let a = self.attn.forward(f, x)?;
        let a = f.dropout(a, self.dropout)?;
        let x = f.g.add(x, a)?;
        let x = self.ln1.forward(f, x)?;
        let h = self.conv1.forward(f, x)?;
        let h = f.g.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        let h = f.dropout(h, self.dropout)?;
        let x = f.g.add(x, h)?;
        self.ln2.forward(f, x)
    }
}

/// Conv -> relu -> layer norm -> dropout, repeated.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<(Conv, LayerNorm)>,
    pub dropout: f64,
}

impl ConvStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        width: usize,
        layers: usize,
        kernel: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut v = Vec::with_capacity(layers);
        for l in 0..layers {
            let i = if l == 0 { input } else { width };
            let conv = Conv::new(ps, rng, &format!("{name}.{l}.conv"), i, width, kernel, 1)?;
            let ln = LayerNorm::new(ps, &format!("{name}.{l}.ln"), width)?;
            v.push((conv, ln));
        }
        Ok(Self { layers: v, dropout })
    }

    pub fn forward(&self, f: &mut Fwd, mut x: Var) -> Result<Var> {
        for (conv, ln) in &self.layers {
            x = conv.forward(f, x)?;
            x = f.g.relu(x)?;
            x = ln.forward(f, x)?;
            x = f.dropout(x, self.dropout)?;
        }
        Ok(x)
    }
}

/// Non-causal WaveNet stack: dilated convolutions (dilation `2^l`) with
/// gated tanh/sigmoid units, residual and skip paths, and optional global
/// conditioning added before the gate. Returns the summed skip output.
#[derive(Clone, Debug)]
pub struct WaveNet {
    pub channels: usize,
    pub layers: Vec<WnLayer>,
}

#[derive(Clone, Debug)]
pub struct WnLayer {
    pub conv: Conv,
    pub cond: Option<Linear>,
    pub res_skip: Linear,
}

impl WaveNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        channels: usize,
        layers: usize,
        kernel: usize,
        cond_channels: Option<usize>,
    ) -> Result<Self> {
        let mut v = Vec::with_capacity(layers);
        for l in 0..layers {
            let conv = Conv::new(ps, rng, &format!("{name}.{l}.conv"), channels, 2 * channels, kernel, 1 << l)?;
            let cond = match cond_channels {
                Some(c) => Some(Linear::new(ps, rng, &format!("{name}.{l}.cond"), c, 2 * channels, false)?),
                None => None,
            };
            let out = if l + 1 == layers { channels } else { 2 * channels };
            let res_skip = Linear::new(ps, rng, &format!("{name}.{l}.res_skip"), channels, out, true)?;
            v.push(WnLayer { conv, cond, res_skip });
        }
        Ok(Self { channels, layers: v })
    }

    pub fn forward(&self, f: &mut Fwd, mut x: Var, cond: Option<Var>) -> Result<Var> {
        let c = self.channels;
        let mut skip: Option<Var> = None;
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.conv.forward(f, x)?;
            if let (Some(proj), Some(cv)) = (&layer.cond, cond) {
                let cc = proj.forward(f, cv)?;
                a = f.g.add(a, cc)?;
            }
            let ta = f.g.slice_cols(a, 0, c)?;
            let sa = f.g.slice_cols(a, c, 2 * c)?;
            let ta = f.g.tanh(ta)?;
            let sa = f.g.sigmoid(sa)?;
            let z = f.g.mul(ta, sa)?;
            let rs = layer.res_skip.forward(f, z)?;
            let s = if l + 1 < n {
                let res = f.g.slice_cols(rs, 0, c)?;
                x = f.g.add(x, res)?;
                f.g.slice_cols(rs, c, 2 * c)?
            } else {
                rs
            };
            skip = Some(match skip {
                Some(acc) => f.g.add(acc, s)?,
                None => s,
            });
        }
        Ok(skip.unwrap_or(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(1, 2) - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn params_are_single_precision() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::new(1);
        let l = Linear::new(&mut ps, &mut rng, "l", 3, 5, true).unwrap();
        for &x in ps.get(l.w).data() {
            assert_eq!(x, x as f32 as f64);
        }
    }

    #[test]
    fn wavenet_shapes() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::new(2);
        let wn = WaveNet::new(&mut ps, &mut rng, "wn", 4, 3, 3, Some(2)).unwrap();
        let mut g = Graph::new(false);
        let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
        let x = f.g.constant(Tensor::filled(&[7, 4], 0.5));
        let c = f.g.constant(Tensor::filled(&[7, 2], -0.5));
        let y = wn.forward(&mut f, x, Some(c)).unwrap();
        assert_eq!(f.g.dims(y), &[7, 4]);
    }
}
