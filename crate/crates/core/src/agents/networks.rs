use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{EncodedObservation, EncoderConfig, FusionCache, FusionEncoder, VisualShape};
use crate::nncore::{relu, relu_backward, Linear, ParameterSet, Tensor};

/// Width of the hidden layer that sits between the fused state and the heads.
pub const HEAD_HIDDEN: usize = 64;

/// Fused encoder followed by `fused -> 64 -> actions` with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub encoder: FusionEncoder,
    hidden: Linear,
    out: Linear,
    action_count: usize,
}

pub struct QCache {
    encoder: FusionCache,
    fused: Tensor,
    pre_hidden: Tensor,
    hidden: Tensor,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        config: &EncoderConfig,
        visual_shape: VisualShape,
        vocab_size: usize,
        action_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = FusionEncoder::new(params, config, visual_shape, vocab_size, rng)?;
        let hidden = Linear::new(params, "q.hidden", encoder.fused_dim(), HEAD_HIDDEN, rng);
        let out = Linear::new(params, "q.out", HEAD_HIDDEN, action_count, rng);
        Ok(QNetwork {
            encoder,
            hidden,
            out,
            action_count,
        })
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// `[batch, actions]` Q-values.
    pub fn forward(&self, params: &ParameterSet, batch: &[&EncodedObservation]) -> Result<(Tensor, QCache)> {
        let (fused, encoder) = self.encoder.forward(params, batch)?;
        let pre_hidden = self.hidden.forward(params, &fused)?;
        let hidden = relu(&pre_hidden);
        let q = self.out.forward(params, &hidden)?;
        Ok((
            q,
            QCache {
                encoder,
                fused,
                pre_hidden,
                hidden,
            },
        ))
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &QCache, grad_q: &Tensor) -> Result<()> {
        let gh = self.out.backward(params, &cache.hidden, grad_q)?;
        let gpre = relu_backward(&cache.pre_hidden, &gh)?;
        let gfused = self.hidden.backward(params, &cache.fused, &gpre)?;
        self.encoder.backward(params, &cache.encoder, &gfused)
    }

    pub fn q_values(&self, params: &ParameterSet, obs: &EncodedObservation) -> Result<Vec<f64>> {
        Ok(self.forward(params, &[obs])?.0.into_data())
    }
}

/// Fused encoder, shared ReLU trunk, categorical policy head and scalar value head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueNet {
    pub encoder: FusionEncoder,
    trunk: Linear,
    policy: Linear,
    value: Linear,
    action_count: usize,
}

pub struct PolicyValueCache {
    encoder: FusionCache,
    fused: Tensor,
    pre_trunk: Tensor,
    trunk: Tensor,
}

impl PolicyValueNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        config: &EncoderConfig,
        visual_shape: VisualShape,
        vocab_size: usize,
        action_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = FusionEncoder::new(params, config, visual_shape, vocab_size, rng)?;
        let trunk = Linear::new(params, "pv.trunk", encoder.fused_dim(), HEAD_HIDDEN, rng);
        let policy = Linear::new(params, "pv.policy", HEAD_HIDDEN, action_count, rng);
        let value = Linear::new(params, "pv.value", HEAD_HIDDEN, 1, rng);
        Ok(PolicyValueNet {
            encoder,
            trunk,
            policy,
            value,
            action_count,
        })
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// Returns `([batch, actions]` logits, `[batch]` values, cache).
    pub fn forward(
        &self,
        params: &ParameterSet,
        batch: &[&EncodedObservation],
    ) -> Result<(Tensor, Vec<f64>, PolicyValueCache)> {
        let (fused, encoder) = self.encoder.forward(params, batch)?;
        let pre_trunk = self.trunk.forward(params, &fused)?;
        let trunk = relu(&pre_trunk);
        let logits = self.policy.forward(params, &trunk)?;
        let values = self.value.forward(params, &trunk)?.into_data();
        Ok((
            logits,
            values,
            PolicyValueCache {
                encoder,
                fused,
                pre_trunk,
                trunk,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &mut ParameterSet,
        cache: &PolicyValueCache,
        grad_logits: &Tensor,
        grad_values: &[f64],
    ) -> Result<()> {
        let batch = grad_values.len();
        if grad_logits.shape() != [batch, self.action_count] {
            return Err(Error::Shape(format!(
                "policy grad {:?} for batch {batch}",
                grad_logits.shape()
            )));
        }
        let gv = Tensor::new(vec![batch, 1], grad_values.to_vec())?;
        let mut gtrunk = self.policy.backward(params, &cache.trunk, grad_logits)?;
        gtrunk.add_assign(&self.value.backward(params, &cache.trunk, &gv)?)?;
        let gpre = relu_backward(&cache.pre_trunk, &gtrunk)?;
        let gfused = self.trunk.backward(params, &cache.fused, &gpre)?;
        self.encoder.backward(params, &cache.encoder, &gfused)
    }
}
