use rand::Rng;

use super::layers::{accumulate_a_bt, project, sigmoid_scalar};
use super::tensor::accumulate_at_b;
use super::{ParamId, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = z * h + (1 - z) * n
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_z: ParamId,
    w_r: ParamId,
    w_n: ParamId,
    u_z: ParamId,
    u_r: ParamId,
    u_n: ParamId,
    b_z: ParamId,
    b_r: ParamId,
    b_n: ParamId,
}

/// Activations saved by [`GruCell::step`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    n: Tensor,
    rh: Tensor,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |gate: &str, params: &mut ParameterSet| {
            params.add_uniform(
                format!("{name}.w_{gate}"),
                vec![input_dim, hidden_dim],
                input_dim,
                rng,
            )
        };
        let w_z = w("z", params);
        let w_r = w("r", params);
        let w_n = w("n", params);
        let mut u = |gate: &str, params: &mut ParameterSet| {
            params.add_uniform(
                format!("{name}.u_{gate}"),
                vec![hidden_dim, hidden_dim],
                hidden_dim,
                rng,
            )
        };
        let u_z = u("z", params);
        let u_r = u("r", params);
        let u_n = u("n", params);
        let b_z = params.add_zeros(format!("{name}.b_z"), vec![hidden_dim]);
        let b_r = params.add_zeros(format!("{name}.b_r"), vec![hidden_dim]);
        let b_n = params.add_zeros(format!("{name}.b_n"), vec![hidden_dim]);
        GruCell {
            input_dim,
            hidden_dim,
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z,
            b_r,
            b_n,
        }
    }

    pub fn bias_ids(&self) -> [ParamId; 3] {
        [self.b_z, self.b_r, self.b_n]
    }

    /// The update-gate bias; saturating it high makes the cell copy its state.
    pub fn update_bias(&self) -> ParamId {
        self.b_z
    }

    fn check(&self, x: &Tensor, h: &Tensor) -> Result<usize> {
        let (b, d) = x.dims2()?;
        let (bh, dh) = h.dims2()?;
        if d != self.input_dim || dh != self.hidden_dim || b != bh {
            return Err(Error::Shape(format!(
                "gru step x {:?}, h {:?}; expected [b, {}], [b, {}]",
                x.shape(),
                h.shape(),
                self.input_dim,
                self.hidden_dim
            )));
        }
        Ok(b)
    }

    fn preactivation(
        &self,
        params: &ParameterSet,
        w: ParamId,
        u: ParamId,
        b: ParamId,
        x: &Tensor,
        h: &Tensor,
    ) -> Result<Tensor> {
        let mut a = project(params, w, x)?;
        a.add_assign(&project(params, u, h)?)?;
        let bias = params.value(b).data();
        for row in a.data_mut().chunks_mut(self.hidden_dim) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        Ok(a)
    }

    /// One recurrence step; returns the new state and the cache for backward.
    pub fn step(&self, params: &ParameterSet, x: &Tensor, h_prev: &Tensor) -> Result<(Tensor, GruStepCache)> {
        self.check(x, h_prev)?;
        let z = self
            .preactivation(params, self.w_z, self.u_z, self.b_z, x, h_prev)?
            .map(sigmoid_scalar);
        let r = self
            .preactivation(params, self.w_r, self.u_r, self.b_r, x, h_prev)?
            .map(sigmoid_scalar);
        let rh = r.zip_map(h_prev, |a, b| a * b)?;
        let mut n = project(params, self.w_n, x)?;
        n.add_assign(&project(params, self.u_n, &rh)?)?;
        let bias = params.value(self.b_n).data();
        for row in n.data_mut().chunks_mut(self.hidden_dim) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v = (*v + bv).tanh();
            }
        }
        let mut h = h_prev.clone();
        for ((hv, &zv), &nv) in h.data_mut().iter_mut().zip(z.data()).zip(n.data()) {
            *hv = zv * *hv + (1.0 - zv) * nv;
        }
        Ok((
            h,
            GruStepCache {
                x: x.clone(),
                h_prev: h_prev.clone(),
                z,
                r,
                n,
                rh,
            },
        ))
    }

    /// Backward through one step. Returns `(grad_x, grad_h_prev)`.
    pub fn step_backward(
        &self,
        params: &mut ParameterSet,
        cache: &GruStepCache,
        grad_h: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        grad_h.expect_same_shape(&cache.h_prev)?;
        let GruStepCache {
            x,
            h_prev,
            z,
            r,
            n,
            rh,
        } = cache;

        let mut grad_h_prev = grad_h.zip_map(z, |g, zv| g * zv)?;
        // through n = tanh(.)
        let mut da_n = grad_h.zip_map(z, |g, zv| g * (1.0 - zv))?;
        da_n = da_n.zip_map(n, |g, nv| g * (1.0 - nv * nv))?;
        // through z = sigmoid(.)
        let mut da_z = grad_h.clone();
        for (((d, &hv), &nv), &zv) in da_z
            .data_mut()
            .iter_mut()
            .zip(h_prev.data())
            .zip(n.data())
            .zip(z.data())
        {
            *d *= (hv - nv) * zv * (1.0 - zv);
        }

        accumulate_at_b(params.grad_mut(self.w_n), x, &da_n)?;
        accumulate_at_b(params.grad_mut(self.u_n), rh, &da_n)?;
        accumulate_bias(params.grad_mut(self.b_n), &da_n);
        let mut grad_x = Tensor::zeros(x.shape().to_vec());
        accumulate_a_bt(&mut grad_x, &da_n, params.value(self.w_n))?;
        let mut grad_rh = Tensor::zeros(h_prev.shape().to_vec());
        accumulate_a_bt(&mut grad_rh, &da_n, params.value(self.u_n))?;

        let mut da_r = grad_rh.zip_map(h_prev, |g, hv| g * hv)?;
        for (d, &rv) in da_r.data_mut().iter_mut().zip(r.data()) {
            *d *= rv * (1.0 - rv);
        }
        for ((g, &grh), &rv) in grad_h_prev
            .data_mut()
            .iter_mut()
            .zip(grad_rh.data())
            .zip(r.data())
        {
            *g += grh * rv;
        }

        for (da, w, u, b) in [
            (&da_z, self.w_z, self.u_z, self.b_z),
            (&da_r, self.w_r, self.u_r, self.b_r),
        ] {
            accumulate_at_b(params.grad_mut(w), x, da)?;
            accumulate_at_b(params.grad_mut(u), h_prev, da)?;
            accumulate_bias(params.grad_mut(b), da);
            accumulate_a_bt(&mut grad_x, da, params.value(w))?;
            accumulate_a_bt(&mut grad_h_prev, da, params.value(u))?;
        }
        Ok((grad_x, grad_h_prev))
    }

    /// Runs the cell over `inputs` (one `[batch, input_dim]` tensor per time
    /// step) from `h0`. Returns the final state and per-step caches.
    pub fn forward_sequence(
        &self,
        params: &ParameterSet,
        inputs: &[Tensor],
        h0: &Tensor,
    ) -> Result<(Tensor, Vec<GruStepCache>)> {
        let mut h = h0.clone();
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, cache) = self.step(params, x, &h)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, caches))
    }

    /// Backpropagates a gradient on the final state through every step.
    /// Returns per-step input gradients and the gradient on `h0`.
    pub fn backward_sequence(
        &self,
        params: &mut ParameterSet,
        caches: &[GruStepCache],
        grad_final: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut grad_h = grad_final.clone();
        let mut grad_inputs = vec![Tensor::zeros(vec![1]); caches.len()];
        for (t, cache) in caches.iter().enumerate().rev() {
            let (gx, gh) = self.step_backward(params, cache, &grad_h)?;
            grad_inputs[t] = gx;
            grad_h = gh;
        }
        Ok((grad_inputs, grad_h))
    }
}

fn accumulate_bias(grad: &mut Tensor, da: &Tensor) {
    let width = grad.len();
    let g = grad.data_mut();
    for row in da.data().chunks(width) {
        for (gv, v) in g.iter_mut().zip(row) {
            *gv += v;
        }
    }
}
