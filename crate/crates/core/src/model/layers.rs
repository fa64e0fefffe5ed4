//! Small building blocks: linear maps, GRU cells, layer norm and seeded dropout.

use candle_core::{Tensor, Var, D};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::params::{live, Init, ParamGroup, ParamStore};
use crate::error::Result;

/// Registers parameters under a name prefix and group.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(name, self.group, shape, init, self.rng)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.param(&format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in))?,
            b: self.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn gru(&mut self, name: &str, d_in: usize, hidden: usize) -> Result<Gru> {
        Ok(Gru {
            w_ih: self.param(&format!("{name}.w_ih"), &[d_in, 3 * hidden], Init::FanIn(hidden))?,
            w_hh: self.param(&format!("{name}.w_hh"), &[hidden, 3 * hidden], Init::FanIn(hidden))?,
            b_ih: self.param(&format!("{name}.b_ih"), &[3 * hidden], Init::Zeros)?,
            b_hh: self.param(&format!("{name}.b_hh"), &[3 * hidden], Init::Zeros)?,
            hidden,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.param(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: self.param(&format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> Result<Var> {
        self.param(name, &[vocab, d], Init::Uniform(1.0))
    }
}

/// `y = x W + b` applied over the last dimension.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let w = live(&self.w, frozen);
        let b = live(&self.b, frozen);
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&w)?.broadcast_add(&b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Gated recurrent unit with PyTorch gate layout (reset, update, new).
#[derive(Debug, Clone)]
pub(crate) struct Gru {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

impl Gru {
    /// Input projection for a whole `[n, len, d_in]` sequence.
    pub fn project(&self, xs: &Tensor, frozen: bool) -> Result<Tensor> {
        let (n, len, d_in) = xs.dims3()?;
        let w = live(&self.w_ih, frozen);
        let b = live(&self.b_ih, frozen);
        Ok(xs
            .reshape((n * len, d_in))?
            .matmul(&w)?
            .broadcast_add(&b)?
            .reshape((n, len, 3 * self.hidden))?)
    }

    /// One recurrence step from an already projected input `[n, 3h]`.
    pub fn step(&self, xi: &Tensor, h: &Tensor, frozen: bool) -> Result<Tensor> {
        let hd = self.hidden;
        let hh = h
            .matmul(&live(&self.w_hh, frozen))?
            .broadcast_add(&live(&self.b_hh, frozen))?;
        let rz = candle_nn::ops::sigmoid(&(xi.narrow(1, 0, 2 * hd)? + hh.narrow(1, 0, 2 * hd)?)?)?;
        let r = rz.narrow(1, 0, hd)?;
        let z = rz.narrow(1, hd, hd)?;
        let n = (xi.narrow(1, 2 * hd, hd)? + (r * hh.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
        let delta = (h - &n)?;
        Ok((n + (z * delta)?)?)
    }

    /// Runs over `[n, len, d_in]`; returns per-step hidden states in time
    /// order and the final state.
    pub fn run(
        &self,
        xs: &Tensor,
        h0: Option<&Tensor>,
        reverse: bool,
        frozen: bool,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let (n, len, _) = xs.dims3()?;
        let xi = self.project(xs, frozen)?;
        let mut h = match h0 {
            Some(h) => h.clone(),
            None => Tensor::zeros((n, self.hidden), xs.dtype(), xs.device())?,
        };
        let mut outs = vec![None; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            h = self.step(&xi.narrow(1, t, 1)?.squeeze(1)?, &h, frozen)?;
            outs[t] = Some(h.clone());
        }
        Ok((outs.into_iter().map(Option::unwrap).collect(), h))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&live(&self.gamma, frozen))?
            .broadcast_add(&live(&self.beta, frozen))?)
    }
}

/// Inverted dropout with a mask drawn from the caller's seeded stream.
/// Identity when `rng` is `None` or `rate` is zero.
pub(crate) fn dropout(x: &Tensor, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let threshold = (keep * 4294967296.0).min(u32::MAX as f64) as u32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.next_u32() < threshold { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Host-side integer indices as a `u32` tensor.
pub(crate) fn index_tensor(
    values: Vec<u32>,
    shape: &[usize],
    device: &candle_core::Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?)
}
