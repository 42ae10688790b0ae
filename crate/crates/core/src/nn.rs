//! Named-parameter layers on top of the gradient tape.

use crate::error::{shape_err, Result};
use crate::numerics::{AttnDims, ParamStore, Rng, Tape, Tensor, Var, LAYER_NORM_EPS};

/// A tape bound to a parameter store.
///
/// Parameters are pulled onto the tape lazily by name; `trainable` decides
/// which of them receive gradients.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
}

fn none(_: &str) -> bool {
    false
}

fn all(_: &str) -> bool {
    true
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            trainable,
        }
    }

    /// Inference graph: no parameter receives a gradient.
    pub fn frozen(params: &'a ParamStore) -> Self {
        Self::new(params, &none)
    }

    /// Every parameter receives a gradient.
    pub fn training_all(params: &'a ParamStore) -> Self {
        Self::new(params, &all)
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.require(name)?;
        let train = (self.trainable)(name);
        Ok(self.tape.param(name, t, train))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// `x · {prefix}.weight + {prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let (_, cin) = self.value(x).rows_cols();
        let win = self.value(w).shape()[0];
        if cin != win {
            return Err(shape_err!(
                "{prefix}: input width {cin} does not match weight {:?}",
                self.value(w).shape()
            ));
        }
        Ok(self.tape.linear(x, w, b))
    }

    /// Affine layer norm with `{prefix}.gamma` and `{prefix}.beta`.
    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        let (_, c) = self.value(x).rows_cols();
        if self.value(g).len() != c {
            return Err(shape_err!("{prefix}: width {c} vs gamma {}", self.value(g).len()));
        }
        Ok(self.tape.layer_norm_affine(x, g, b, LAYER_NORM_EPS))
    }

    /// Projected attention increment `to_out(attn(to_q(query), to_k(ctx), to_v(ctx)))`.
    ///
    /// `query` rows are `batches × nq`; `context` rows are `nk` (shared) or
    /// `batches × nk`.
    pub fn attend(
        &mut self,
        prefix: &str,
        query: Var,
        context: Var,
        batches: usize,
        heads: usize,
        kv_shared: bool,
    ) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.to_q"), query)?;
        let k = self.linear(&format!("{prefix}.to_k"), context)?;
        let v = self.linear(&format!("{prefix}.to_v"), context)?;
        let (qr, d) = self.value(q).rows_cols();
        let (kr, _) = self.value(k).rows_cols();
        let (_, dv) = self.value(v).rows_cols();
        let kv_batches = if kv_shared { 1 } else { batches };
        if qr % batches != 0 || kr % kv_batches != 0 {
            return Err(shape_err!("{prefix}: rows {qr}/{kr} not divisible into {batches} batches"));
        }
        if d % heads != 0 || dv % heads != 0 {
            return Err(crate::error::config_err!("{prefix}: {heads} heads do not divide {d}"));
        }
        let dims = AttnDims {
            batches,
            nq: qr / batches,
            nk: kr / kv_batches,
            d,
            dv,
            heads,
            kv_shared,
        };
        let a = self.tape.attention(q, k, v, dims);
        self.linear(&format!("{prefix}.to_out"), a)
    }
}

/// Seeded parameter initialization into a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// Weight `N(0, gain²/fan_in)` stored `in × out`, zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        let w = self.rng.normal_tensor([fan_in, fan_out]).map(|v| v * std);
        self.store.insert(format!("{prefix}.weight"), w);
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
    }

    pub fn zeros_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.store.insert(format!("{prefix}.weight"), Tensor::zeros([fan_in, fan_out]));
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) {
        self.store.insert(format!("{prefix}.gamma"), Tensor::full([c], 1.0));
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros([c]));
    }

    /// Query/key/value/output projections of an attention layer.
    pub fn attention(&mut self, prefix: &str, d_query: usize, d_context: usize, width: usize, out_gain: f64) {
        self.linear(&format!("{prefix}.to_q"), d_query, width, 1.0);
        self.linear(&format!("{prefix}.to_k"), d_context, width, 1.0);
        self.linear(&format!("{prefix}.to_v"), d_context, width, 1.0);
        self.linear(&format!("{prefix}.to_out"), width, d_query, out_gain);
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) {
        self.store.insert(name, t);
    }
}
