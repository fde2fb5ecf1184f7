//! Parameterized layers shared by the encoder and heads.

use crate::diff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], Init::KaimingUniform { fan_in: d_in })?;
        let b = if bias { Some(store.add(format!("{name}.b"), &[d_out], Init::Zeros)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn with_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, w: Init, b: Init) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], w)?;
        let b = Some(store.add(format!("{name}.b"), &[d_out], b)?);
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.add(format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), &[c_out, c_in, k, k], Init::KaimingUniform { fan_in: c_in * k * k })?,
            b: store.add(format!("{name}.b"), &[c_out], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}
