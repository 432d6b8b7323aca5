//! Layers with hand-written backward passes. Every `backward` accumulates into
//! the parameter gradients and returns the gradient with respect to its input.

use rand::Rng;

use super::tensor::{accumulate_at_b, gemm, matmul, matmul_a_bt};
use super::{ParamId, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng);
        let bias = params.add_zeros(format!("{name}.bias"), vec![out_dim]);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let (batch, d) = input.dims2()?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {d}",
                self.in_dim
            )));
        }
        Ok(batch)
    }

    pub fn forward(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut out = matmul(input, params.value(self.weight))?;
        let bias = params.value(self.bias).data();
        for row in out.data_mut().chunks_mut(self.out_dim) {
            for (y, b) in row.iter_mut().zip(bias) {
                *y += b;
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        params: &mut ParameterSet,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let batch = self.check_input(input)?;
        if grad_out.shape() != [batch, self.out_dim] {
            return Err(Error::Shape(format!(
                "linear grad {:?}, expected [{batch}, {}]",
                grad_out.shape(),
                self.out_dim
            )));
        }
        accumulate_at_b(params.grad_mut(self.weight), input, grad_out)?;
        let gb = params.grad_mut(self.bias).data_mut();
        for row in grad_out.data().chunks(self.out_dim) {
            for (g, r) in gb.iter_mut().zip(row) {
                *g += r;
            }
        }
        matmul_a_bt(grad_out, params.value(self.weight))
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its forward input.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through sigmoid given its forward output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| g * y * (1.0 - y))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Gradient through tanh given its forward output.
pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| g * (1.0 - y * y))
}

/// Stride-1 2-D cross-correlation with symmetric zero padding.
/// Weight `[out_c, in_c, k, k]`, input `[batch, in_c, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = params.add_zeros(format!("{name}.bias"), vec![out_channels]);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    /// `(batch, h, w, out_h, out_w)` for a valid input.
    fn geometry(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let [batch, c, h, w] = input.shape()[..] else {
            return Err(Error::Shape(format!(
                "conv2d expects [batch, channels, h, w], got {:?}",
                input.shape()
            )));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} does not fit padded input {ph}x{pw}",
                self.kernel
            )));
        }
        Ok((batch, h, w, ph - self.kernel + 1, pw - self.kernel + 1))
    }

    /// Input pixel feeding output `(oy, ox)` at kernel offset `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let y = (oy + ky).checked_sub(self.padding)?;
        let x = (ox + kx).checked_sub(self.padding)?;
        (y < h && x < w).then_some((y, x))
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let probe = Tensor::zeros(input_shape.to_vec());
        let (b, _, _, oh, ow) = self.geometry(&probe)?;
        Ok(vec![b, self.out_channels, oh, ow])
    }

    pub fn forward(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        let (batch, h, w, oh, ow) = self.geometry(input)?;
        let (ic, oc, k) = (self.in_channels, self.out_channels, self.kernel);
        let weight = params.value(self.weight).data();
        let bias = params.value(self.bias).data();
        let x = input.data();
        let mut out = vec![0.0; batch * oc * oh * ow];
        for n in 0..batch {
            for o in 0..oc {
                let plane = &mut out[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bias[o]);
                for c in 0..ic {
                    let xin = &x[(n * ic + c) * h * w..(n * ic + c + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[((o * ic + c) * k + ky) * k + kx];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    if let Some((y, xx)) = self.source(oy, ox, ky, kx, h, w) {
                                        plane[oy * ow + ox] += wv * xin[y * w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch, oc, oh, ow], out)
    }

    pub fn backward(
        &self,
        params: &mut ParameterSet,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let (batch, h, w, oh, ow) = self.geometry(input)?;
        let (ic, oc, k) = (self.in_channels, self.out_channels, self.kernel);
        if grad_out.shape() != [batch, oc, oh, ow] {
            return Err(Error::Shape(format!(
                "conv2d grad {:?}, expected {:?}",
                grad_out.shape(),
                [batch, oc, oh, ow]
            )));
        }
        let x = input.data();
        let g = grad_out.data();
        let mut grad_in = vec![0.0; x.len()];
        {
            let gb = params.grad_mut(self.bias).data_mut();
            for n in 0..batch {
                for o in 0..oc {
                    gb[o] += g[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow]
                        .iter()
                        .sum::<f64>();
                }
            }
        }
        let (weight, grad_w) = params.value_and_grad_mut(self.weight);
        let weight = weight.data();
        let grad_w = grad_w.data_mut();
        for n in 0..batch {
            for o in 0..oc {
                let gplane = &g[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
                for c in 0..ic {
                    let base = (n * ic + c) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * ic + c) * k + ky) * k + kx;
                            let wv = weight[widx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    if let Some((y, xx)) = self.source(oy, ox, ky, kx, h, w) {
                                        let gv = gplane[oy * ow + ox];
                                        acc += gv * x[base + y * w + xx];
                                        grad_in[base + y * w + xx] += gv * wv;
                                    }
                                }
                            }
                            grad_w[widx] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), grad_in)
    }
}

/// 2x2 mean pooling with stride 2; a trailing odd row/column is dropped.
pub fn mean_pool2x2(input: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = input.shape()[..] else {
        return Err(Error::Shape(format!("pool expects rank 4, got {:?}", input.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("input {h}x{w} too small to pool")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                out.push(
                    0.25 * (plane[y * w + xx]
                        + plane[y * w + xx + 1]
                        + plane[(y + 1) * w + xx]
                        + plane[(y + 1) * w + xx + 1]),
                );
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn mean_pool2x2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = input_shape[..] else {
        return Err(Error::Shape(format!("pool expects rank 4, got {input_shape:?}")));
    };
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::Shape(format!("pool grad {:?}", grad_out.shape())));
    }
    let mut grad = vec![0.0; b * c * h * w];
    for (plane, gplane) in grad.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * gplane[oy * ow + ox];
                let (y, xx) = (2 * oy, 2 * ox);
                plane[y * w + xx] += g;
                plane[y * w + xx + 1] += g;
                plane[(y + 1) * w + xx] += g;
                plane[(y + 1) * w + xx + 1] += g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), grad)
}

/// Lookup table `[vocab, dim]`. When `pad` is set that row is zero at init and
/// never receives gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    pub pad: Option<usize>,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        vocab: usize,
        dim: usize,
        pad: Option<usize>,
        rng: &mut R,
    ) -> Self {
        // fan_in of a one-hot lookup is 1
        let table = params.add_uniform(format!("{name}.table"), vec![vocab, dim], 1, rng);
        if let Some(p) = pad {
            params.value_mut(table).data_mut()[p * dim..(p + 1) * dim].fill(0.0);
        }
        Embedding {
            table,
            vocab,
            dim,
            pad,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab) {
            Some(bad) => Err(Error::Shape(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab
            ))),
            None if ids.is_empty() => Err(Error::Shape("empty id list".into())),
            None => Ok(()),
        }
    }

    /// Returns `[ids.len(), dim]`.
    pub fn forward(&self, params: &ParameterSet, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let table = params.value(self.table).data();
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            out.extend_from_slice(&table[i * self.dim..(i + 1) * self.dim]);
        }
        Tensor::new(vec![ids.len(), self.dim], out)
    }

    pub fn backward(&self, params: &mut ParameterSet, ids: &[usize], grad_out: &Tensor) -> Result<()> {
        self.check_ids(ids)?;
        if grad_out.shape() != [ids.len(), self.dim] {
            return Err(Error::Shape(format!("embedding grad {:?}", grad_out.shape())));
        }
        let d = self.dim;
        let grad = params.grad_mut(self.table).data_mut();
        for (row, &i) in grad_out.data().chunks(d).zip(ids) {
            if Some(i) == self.pad {
                continue;
            }
            for (g, r) in grad[i * d..(i + 1) * d].iter_mut().zip(row) {
                *g += r;
            }
        }
        Ok(())
    }
}

/// `y = x W` where only `W` needs a gradient; used by recurrent cells.
pub(crate) fn project(params: &ParameterSet, id: ParamId, x: &Tensor) -> Result<Tensor> {
    matmul(x, params.value(id))
}

/// `acc_x += g W^T` when `acc_x` already holds a partial input gradient.
pub(crate) fn accumulate_a_bt(acc: &mut Tensor, g: &Tensor, w: &Tensor) -> Result<()> {
    let (m, n) = g.dims2()?;
    let (k, n2) = w.dims2()?;
    if n != n2 || acc.shape() != [m, k] {
        return Err(Error::Shape(format!(
            "g W^T with {:?}, {:?} into {:?}",
            g.shape(),
            w.shape(),
            acc.shape()
        )));
    }
    gemm(m, n, k, g.data(), false, w.data(), true, acc.data_mut(), 1.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_passes_input_through() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut ps, "l", 3, 3, &mut rng);
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        ps.value_mut(lin.weight).data_mut().copy_from_slice(&eye);
        let x = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap();
        assert_eq!(lin.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn linear_zero_batch_gives_bias() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, "l", 4, 2, &mut rng);
        ps.value_mut(lin.bias).data_mut().copy_from_slice(&[0.25, -1.5]);
        let y = lin.forward(&ps, &Tensor::zeros(vec![3, 4])).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, "l", 4, 2, &mut rng);
        assert!(lin.forward(&ps, &Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut ps, "c", 1, 1, 1, 0, &mut rng);
        ps.value_mut(conv.weight).fill(1.0);
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(conv.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1, &mut rng);
        ps.value_mut(conv.bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let y = conv.forward(&ps, &Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for (o, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == (o + 1) as f64));
        }
        assert!(conv.forward(&ps, &Tensor::zeros(vec![1, 3, 4, 4])).is_err());
    }

    #[test]
    fn pool_averages_blocks() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 6.]).unwrap();
        assert_eq!(mean_pool2x2(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn embedding_pad_row_is_pinned() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = Embedding::new(&mut ps, "e", 5, 3, Some(0), &mut rng);
        let y = emb.forward(&ps, &[0, 2]).unwrap();
        assert_eq!(&y.data()[..3], &[0.0, 0.0, 0.0]);
        emb.backward(&mut ps, &[0, 2], &Tensor::filled(vec![2, 3], 1.0)).unwrap();
        assert_eq!(&ps.grad(emb.table).data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&ps.grad(emb.table).data()[6..9], &[1.0, 1.0, 1.0]);
        assert!(emb.forward(&ps, &[5]).is_err());
    }
}
