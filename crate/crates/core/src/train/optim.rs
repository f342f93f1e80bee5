use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam moments with decoupled weight decay. The learning rate is passed
/// per step so a schedule can drive it.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S: Scalar = f32> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub checked: bool,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &[Tensor<S>], hyper: AdamHyper) -> Self {
        OptimState {
            hyper,
            step: 0,
            checked: false,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// Parameters with a `None` gradient are left untouched, decay included.
    pub fn update(&mut self, params: &mut [Tensor<S>], grads: &[Option<Tensor<S>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            bail!(Dimension, "optimizer tracks {} tensors, got {} params and {} grads", self.m.len(), params.len(), grads.len());
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() || p.shape() != self.m[i].shape() {
                    bail!(Dimension, "gradient {:?} for parameter {:?}", g.shape(), p.shape());
                }
                if self.checked && !g.is_finite() {
                    bail!(Numeric, "non-finite gradient for parameter {i}");
                }
            }
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let decay = lr * h.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.to_f();
                let mf = h.beta1 * mv.to_f() + (1.0 - h.beta1) * gf;
                let vf = h.beta2 * vv.to_f() + (1.0 - h.beta2) * gf * gf;
                *mv = S::from_f(mf);
                *vv = S::from_f(vf);
                let pf = pv.to_f();
                let step = lr * (mf / bc1) / ((vf / bc2).sqrt() + h.eps);
                *pv = S::from_f(pf - decay * pf - step);
            }
        }
        Ok(())
    }

    /// `"PTDO" | u32 version | u8 dtype | u32 len + hyper JSON | u64 step |
    /// u32 count | per tensor: u8 rank, u32 dims, m payload, v payload`.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"PTDO");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(S::DTYPE);
        let json = serde_json::to_vec(&self.hyper)?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            buf.push(m.rank() as u8);
            for &d in m.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [m, v] {
                for &x in t.data() {
                    if S::DTYPE == 0 {
                        buf.extend_from_slice(&(x.to_f() as f32).to_le_bytes());
                    } else {
                        buf.extend_from_slice(&x.to_f().to_le_bytes());
                    }
                }
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                bail!(Format, "optimizer state truncated at byte {pos}");
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(4)? != b"PTDO" {
            bail!(Format, "not an optimizer state file");
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != 1 {
            bail!(Format, "unsupported optimizer state version");
        }
        if take(1)?[0] != S::DTYPE {
            bail!(Format, "optimizer state dtype mismatch");
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let hyper: AdamHyper = serde_json::from_slice(take(len)?)?;
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let width = if S::DTYPE == 0 { 4 } else { 8 };
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let rank = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            for dst in [&mut m, &mut v] {
                let data = take(numel * width)?
                    .chunks_exact(width)
                    .map(|b| {
                        if width == 4 {
                            S::from_f(f32::from_le_bytes(b.try_into().unwrap()) as f64)
                        } else {
                            S::from_f(f64::from_le_bytes(b.try_into().unwrap()))
                        }
                    })
                    .collect();
                dst.push(Tensor::from_vec(&dims, data)?);
            }
        }
        if pos != buf.len() {
            bail!(Format, "trailing bytes in optimizer state");
        }
        Ok(OptimState { hyper, step, checked: false, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = step.min(total) as f64 / total as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
