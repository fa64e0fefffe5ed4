//! Fused last-dimension softmax and log-softmax with analytic backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "fused-softmax" }),
    }
}

use std::ops::{Add, Div, Mul, Sub};

trait Real:
    WithDType + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + std::iter::Sum
{
    fn exp_(self) -> Self;
    fn ln_(self) -> Self;
    fn max_(self, o: Self) -> Self;
    const NEG_INF: Self;
    const ZERO: Self;
}

macro_rules! real {
    ($t:ty) => {
        impl Real for $t {
            fn exp_(self) -> Self {
                <$t>::exp(self)
            }
            fn ln_(self) -> Self {
                <$t>::ln(self)
            }
            fn max_(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            const NEG_INF: Self = <$t>::NEG_INFINITY;
            const ZERO: Self = 0.0;
        }
    };
}
real!(f32);
real!(f64);

fn rows<T: Real>(src: &[T], dim: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let max = row.iter().fold(T::NEG_INF, |m, &v| m.max_(v));
        let mut sum = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp_();
            sum = sum + *d;
        }
        if log {
            let lse = max + sum.ln_();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        } else {
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
    }
    out
}

/// Softmax gradient: `y ⊙ (g − ⟨g, y⟩)`; log-softmax: `g − exp(y)·Σg`.
fn grad_rows<T: Real>(y: &[T], g: &[T], dim: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for ((yr, gr), dst) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        if log {
            let s: T = gr.iter().copied().sum();
            for ((d, &y), &g) in dst.iter_mut().zip(yr).zip(gr) {
                *d = g - y.exp_() * s;
            }
        } else {
            let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
            for ((d, &y), &g) in dst.iter_mut().zip(yr).zip(gr) {
                *d = y * (g - dot);
            }
        }
    }
    out
}

struct Fused {
    log: bool,
}

impl CustomOp1 for Fused {
    fn name(&self) -> &'static str {
        if self.log {
            "fused-log-softmax"
        } else {
            "fused-softmax"
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = l.dims().last().copied().unwrap_or(1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(rows(contiguous_slice(v, l)?, dim, self.log)),
            CpuStorage::F64(v) => CpuStorage::F64(rows(contiguous_slice(v, l)?, dim, self.log)),
            _ => return Err(candle_core::Error::Msg("fused softmax supports f32/f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = res
            .contiguous()?
            .apply_op2_no_bwd(&grad.contiguous()?, &FusedGrad { log: self.log })?;
        Ok(Some(g))
    }
}

struct FusedGrad {
    log: bool,
}

impl CustomOp2 for FusedGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = l1.dims().last().copied().unwrap_or(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(grad_rows(
                contiguous_slice(y, l1)?,
                contiguous_slice(g, l2)?,
                dim,
                self.log,
            )),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(grad_rows(
                contiguous_slice(y, l1)?,
                contiguous_slice(g, l2)?,
                dim,
                self.log,
            )),
            _ => return Err(candle_core::Error::Msg("fused softmax grad dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `out[b, i, j] = p[b, i, clip(j − i) + c]` for `p: [batch, len, 2c + 1]`.
struct RelGather {
    clip: usize,
}

/// Adjoint of [`RelGather`]: sums `[batch, len, len]` back onto distances.
struct RelScatter {
    clip: usize,
}

fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let c = clip as i64;
    ((j as i64 - i as i64).clamp(-c, c) + c) as usize
}

fn gather_rows<T: Real>(p: &[T], len: usize, clip: usize) -> Vec<T> {
    let n_rel = 2 * clip + 1;
    let mut out = vec![T::ZERO; p.len() / n_rel * len];
    for (src, dst) in p.chunks_exact(n_rel).zip(out.chunks_exact_mut(len)).enumerate().map(|(r, (s, d))| ((r % len, s), d)) {
        let (i, src) = src;
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[rel_index(i, j, clip)];
        }
    }
    out
}

fn scatter_rows<T: Real>(g: &[T], len: usize, clip: usize) -> Vec<T> {
    let n_rel = 2 * clip + 1;
    let mut out = vec![T::ZERO; g.len() / len * n_rel];
    for (r, (src, dst)) in g.chunks_exact(len).zip(out.chunks_exact_mut(n_rel)).enumerate() {
        let i = r % len;
        for (j, &v) in src.iter().enumerate() {
            let k = rel_index(i, j, clip);
            dst[k] = dst[k] + v;
        }
    }
    out
}

impl CustomOp1 for RelGather {
    fn name(&self) -> &'static str {
        "rel-gather"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, len, n_rel) = l.shape().dims3()?;
        if n_rel != 2 * self.clip + 1 {
            return Err(candle_core::Error::Msg(format!("rel-gather: {n_rel} distances for clip {}", self.clip)));
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather_rows(contiguous_slice(v, l)?, len, self.clip)),
            CpuStorage::F64(v) => CpuStorage::F64(gather_rows(contiguous_slice(v, l)?, len, self.clip)),
            _ => return Err(candle_core::Error::Msg("rel-gather supports f32/f64".into())),
        };
        Ok((out, Shape::from((batch, len, len))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&RelScatter { clip: self.clip })?))
    }
}

impl CustomOp1 for RelScatter {
    fn name(&self) -> &'static str {
        "rel-scatter"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, len, _) = l.shape().dims3()?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter_rows(contiguous_slice(v, l)?, len, self.clip)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter_rows(contiguous_slice(v, l)?, len, self.clip)),
            _ => return Err(candle_core::Error::Msg("rel-scatter supports f32/f64".into())),
        };
        Ok((out, Shape::from((batch, len, 2 * self.clip + 1))))
    }
}

/// Routes per-distance scores `[batch, len, 2·clip + 1]` to per-key scores
/// `[batch, len, len]`, clipping distances beyond `clip`.
pub(crate) fn relative_to_absolute(p: &Tensor, clip: usize) -> Result<Tensor> {
    Ok(p.contiguous()?.apply_op1(RelGather { clip })?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Fused { log: false })?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Fused { log: true })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var, D};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_composed_ops_and_their_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 3.0, (3, 5, 7), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 5, 7), &dev).unwrap();
        for log in [false, true] {
            let (fused, composed) = if log {
                (
                    log_softmax_last(x.as_tensor()).unwrap(),
                    candle_nn::ops::log_softmax(x.as_tensor(), D::Minus1).unwrap(),
                )
            } else {
                (
                    softmax_last(x.as_tensor()).unwrap(),
                    candle_nn::ops::softmax(x.as_tensor(), D::Minus1).unwrap(),
                )
            };
            assert!(max_diff(&fused, &composed) < 1e-12);
            let ga = (&fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let (ga, gb) = (ga.get(x.as_tensor()).unwrap(), gb.get(x.as_tensor()).unwrap());
            assert!(max_diff(ga, gb) < 1e-12);
        }
    }

    #[test]
    fn relative_routing_matches_index_oracle_and_is_self_adjoint() {
        let dev = Device::Cpu;
        let (len, clip) = (6, 2);
        let p = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, len, 2 * clip + 1), &dev).unwrap()).unwrap();
        let out = relative_to_absolute(p.as_tensor(), clip).unwrap();
        let pv = p.as_tensor().to_vec3::<f64>().unwrap();
        let ov = out.to_vec3::<f64>().unwrap();
        for b in 0..2 {
            for i in 0..len {
                for j in 0..len {
                    let d = (j as i64 - i as i64).clamp(-2, 2) + 2;
                    assert_eq!(ov[b][i][j], pv[b][i][d as usize]);
                }
            }
        }
        // <G p, w> = <p, G^T w>
        let w = Tensor::randn(0f64, 1.0, (2, len, len), &dev).unwrap();
        let g = (&out * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let lhs = (&out * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (p.as_tensor() * g.get(p.as_tensor()).unwrap())
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn f32_rows_sum_to_one() {
        let x = Tensor::randn(0f32, 1.0, (4, 9), &Device::Cpu).unwrap();
        let s = softmax_last(&x.t().unwrap()).unwrap().sum(1).unwrap();
        let s = s.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }
}
