use std::fmt::Write as _;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to one parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

pub const CHECKPOINT_HEADER: &str = "fusionrl-checkpoint v1";

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let zeros = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a `shape` parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape/data agree"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Value (read) and gradient (write) of the same parameter.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "{} values for {} scalars",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies every value from a structurally identical set. Gradients and
    /// moments of `self` are left alone.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute difference between the values of two identical layouts.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// One bias-corrected Adam step at step count `t >= 1`, then zeroes gradients.
    pub fn adam_update(&mut self, config: &AdamConfig, t: u64) {
        assert!(t >= 1, "adam step count starts at 1");
        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2 = 1.0 - config.beta2.powi(t as i32);
        for p in &mut self.params {
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, &g) in m.iter_mut().zip(grads) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
            }
            let v = p.second_moment.data_mut();
            for (vi, &g) in v.iter_mut().zip(grads) {
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
            p.grad.fill(0.0);
        }
    }

    /// Text checkpoint: a header line, then one line per parameter:
    /// `name<TAB>d0xd1x...<TAB>v0 v1 ...` with 9 significant digits per value.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from(CHECKPOINT_HEADER);
        out.push('\n');
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&p.name);
            out.push('\t');
            out.push_str(&dims.join("x"));
            out.push('\t');
            for (i, v) in p.value.data().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint into a fresh set with zero gradients and moments.
    pub fn from_checkpoint(text: &str) -> Result<ParameterSet> {
        let bad = |line: usize, msg: String| Error::Schema {
            file: "<checkpoint>".into(),
            line,
            message: msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad(1, format!("expected header `{CHECKPOINT_HEADER}`")));
        }
        let mut set = ParameterSet::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(name), Some(dims), Some(values), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad(line_no, "expected name, shape and values".into()));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(line_no, format!("bad shape `{dims}`: {e}")))?;
            let data = values
                .split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(line_no, format!("bad value: {e}")))?;
            if set.find(name).is_some() {
                return Err(bad(line_no, format!("duplicate parameter {name}")));
            }
            let tensor = Tensor::new(shape, data).map_err(|e| bad(line_no, e.to_string()))?;
            set.add(name, tensor);
        }
        Ok(set)
    }

    /// Overwrites values from a checkpoint with exactly the same layout.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let loaded = ParameterSet::from_checkpoint(text)?;
        self.copy_values_from(&loaded)
    }
}
