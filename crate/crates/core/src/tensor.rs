//! Dense row-major f64 tensors and the raw numeric kernels behind every
//! layer. Kernels are deterministic: fixed loop order, no threading, so
//! identical inputs produce bit-identical outputs.

use crate::error::{shape_err, Result};

/// N-dimensional dense tensor. `data` is row-major; `grad`, when present,
/// has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Output spatial extent of a convolution/pooling window sweep.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride < 1 {
        return Err(shape_err!("stride must be >= 1, got {stride}"));
    }
    if kernel == 0 {
        return Err(shape_err!("kernel size must be >= 1"));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(shape_err!(
            "kernel {kernel} exceeds padded input extent {padded} (input {input}, padding {padding})"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// GEMM variants (row-major, accumulate into out)
// ---------------------------------------------------------------------------

/// Column-block width: keeps a K×tile panel of B resident in cache while
/// every row of A sweeps over it.
const GEMM_J_TILE: usize = 512;

/// out[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut jt = 0;
    while jt < n {
        let je = (jt + GEMM_J_TILE).min(n);
        for i in 0..m {
            let out_row = &mut out[i * n + jt..i * n + je];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n + jt..p * n + je];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
        jt = je;
    }
}

/// out[m,n] += aᵀ * b, with a stored as [k,m]
pub fn gemm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut jt = 0;
    while jt < n {
        let je = (jt + GEMM_J_TILE).min(n);
        for i in 0..m {
            let out_row = &mut out[i * n + jt..i * n + je];
            for p in 0..k {
                let aip = a[p * m + i];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n + jt..p * n + je];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
        jt = je;
    }
}

/// out[m,n] += a * bᵀ, with b stored as [n,k]
pub fn gemm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out[i * n + j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution via im2col
// ---------------------------------------------------------------------------

/// Unfold one [C,H,W] image into a [C*k*k, oh*ow] patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    cols.fill(0.0);
    for ci in 0..c {
        let img_c = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let img_row = &img_c[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[ox] = img_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a [C*k*k, oh*ow] patch-gradient matrix back onto a [C,H,W] image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    for ci in 0..c {
        let img_c = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let img_row = &mut img_c[iy as usize * w..(iy as usize + 1) * w];
                    let col_row = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img_row[ix as usize] += col_row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_dims(
    input_shape: &[usize],
    weight_shape: &[usize],
    bias_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Conv2dDims> {
    if input_shape.len() != 4 {
        return Err(shape_err!("conv2d input must be [N,C,H,W], got {:?}", input_shape));
    }
    if weight_shape.len() != 4 || weight_shape[2] != weight_shape[3] {
        return Err(shape_err!("conv2d weight must be [F,C,k,k], got {:?}", weight_shape));
    }
    let (batch, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (c_out, wc, k) = (weight_shape[0], weight_shape[1], weight_shape[2]);
    if wc != c_in {
        return Err(shape_err!(
            "conv2d channel mismatch: input has C={c_in}, weight expects C={wc} (input {:?}, weight {:?})",
            input_shape,
            weight_shape
        ));
    }
    if bias_shape != [c_out] {
        return Err(shape_err!("conv2d bias must be [{c_out}], got {:?}", bias_shape));
    }
    let oh = conv_out_dim(h, k, stride, padding)?;
    let ow = conv_out_dim(w, k, stride, padding)?;
    Ok(Conv2dDims { batch, c_in, h, w, c_out, k, oh, ow })
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv2d_dims(&input.shape, &weight.shape, &bias.shape, stride, padding)?;
    let ckk = d.c_in * d.k * d.k;
    let area = d.oh * d.ow;
    let mut out = vec![0.0; d.batch * d.c_out * area];
    let mut cols = vec![0.0; ckk * area];
    for n in 0..d.batch {
        let img = &input.data[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        im2col(img, d.c_in, d.h, d.w, d.k, stride, padding, d.oh, d.ow, &mut cols);
        let out_n = &mut out[n * d.c_out * area..(n + 1) * d.c_out * area];
        gemm_nn(out_n, &weight.data, &cols, d.c_out, ckk, area);
        for f in 0..d.c_out {
            let b = bias.data[f];
            for v in &mut out_n[f * area..(f + 1) * area] {
                *v += b;
            }
        }
    }
    Tensor::new(vec![d.batch, d.c_out, d.oh, d.ow], out)
}

pub struct Conv2dGrads {
    pub d_input: Option<Vec<f64>>,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_d_input: bool,
) -> Result<Conv2dGrads> {
    let bias_shape = [weight.shape[0]];
    let d = conv2d_dims(&input.shape, &weight.shape, &bias_shape, stride, padding)?;
    let ckk = d.c_in * d.k * d.k;
    let area = d.oh * d.ow;
    debug_assert_eq!(grad_out.len(), d.batch * d.c_out * area);

    let mut d_weight = vec![0.0; weight.data.len()];
    let mut d_bias = vec![0.0; d.c_out];
    let mut d_input = if need_d_input { Some(vec![0.0; input.data.len()]) } else { None };
    let mut cols = vec![0.0; ckk * area];
    let mut d_cols = vec![0.0; ckk * area];

    for n in 0..d.batch {
        let img = &input.data[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        let go_n = &grad_out[n * d.c_out * area..(n + 1) * d.c_out * area];
        im2col(img, d.c_in, d.h, d.w, d.k, stride, padding, d.oh, d.ow, &mut cols);
        // dW += gOut · colsᵀ
        gemm_nt(&mut d_weight, go_n, &cols, d.c_out, area, ckk);
        for f in 0..d.c_out {
            let mut acc = 0.0;
            for v in &go_n[f * area..(f + 1) * area] {
                acc += v;
            }
            d_bias[f] += acc;
        }
        if let Some(di) = d_input.as_mut() {
            d_cols.fill(0.0);
            // dCols = Wᵀ · gOut
            gemm_tn(&mut d_cols, &weight.data, go_n, ckk, d.c_out, area);
            let di_n = &mut di[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
            col2im(&d_cols, d.c_in, d.h, d.w, d.k, stride, padding, d.oh, d.ow, di_n);
        }
    }
    Ok(Conv2dGrads { d_input, d_weight, d_bias })
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling without padding. Returns the output and, per output cell, the
/// linear index into the input that produced the max (gradient routing;
/// ties break toward the lowest linear index).
pub fn maxpool2d_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.shape.len() != 4 {
        return Err(shape_err!("maxpool2d input must be [N,C,H,W], got {:?}", input.shape));
    }
    let (batch, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if k == 0 || k > h || k > w {
        return Err(shape_err!(
            "pooling window {k}x{k} is empty or exceeds input {h}x{w}"
        ));
    }
    let oh = conv_out_dim(h, k, stride, 0)?;
    let ow = conv_out_dim(w, k, stride, 0)?;
    let mut out = vec![0.0; batch * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for n in 0..batch {
        for ci in 0..c {
            let base = (n * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                            let v = input.data[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((n * c + ci) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(argmax: &[usize], grad_out: &[f64], input_numel: usize) -> Vec<f64> {
    let mut d_input = vec![0.0; input_numel];
    for (o, &idx) in argmax.iter().enumerate() {
        d_input[idx] += grad_out[o];
    }
    d_input
}

// ---------------------------------------------------------------------------
// Dense / activation kernels
// ---------------------------------------------------------------------------

pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.shape.len() != 2 || w.shape.len() != 2 {
        return Err(shape_err!(
            "linear expects 2-d input and weight, got {:?} and {:?}",
            x.shape,
            w.shape
        ));
    }
    let (batch, d_in) = (x.shape[0], x.shape[1]);
    let (wd, d_out) = (w.shape[0], w.shape[1]);
    if wd != d_in {
        return Err(shape_err!(
            "linear dimension mismatch: input feature {d_in}, weight expects {wd}"
        ));
    }
    if let Some(b) = b {
        if b.shape != [d_out] {
            return Err(shape_err!("linear bias must be [{d_out}], got {:?}", b.shape));
        }
    }
    let mut out = vec![0.0; batch * d_out];
    gemm_nn(&mut out, &x.data, &w.data, batch, d_in, d_out);
    if let Some(b) = b {
        for row in out.chunks_mut(d_out) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![batch, d_out], out)
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Softmax over the last axis, numerically stabilized.
pub fn softmax_last_axis(x: &[f64], row_len: usize) -> Vec<f64> {
    debug_assert!(row_len > 0 && x.len() % row_len == 0);
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Per-row log-sum-exp, used by the cross-entropy kernels.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn rand_vec(rng: &mut DetRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
    }

    /// Direct 6-loop convolution, the independence oracle for the im2col path.
    fn conv2d_naive(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
        let (f, _, k, _) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data[fi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = input.data
                                        [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = weight.data[((fi * c + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, f, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_1x1_kernel_scales() {
        let input = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let bias = Tensor::new(vec![1], vec![0.0]).unwrap();
        let out = conv2d_forward(&input, &weight, &bias, 1, 0).unwrap();
        assert_eq!(out.shape, vec![1, 1, 3, 3]);
        assert!(out.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = DetRng::seed(11);
        let input = Tensor::new(vec![1, 1, 3, 3], rand_vec(&mut rng, 9)).unwrap();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center
        let weight = Tensor::new(vec![1, 1, 3, 3], kernel).unwrap();
        let bias = Tensor::new(vec![1], vec![0.0]).unwrap();
        let out = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = DetRng::seed(7);
        for (shape, wshape, stride, pad) in [
            (vec![1, 2, 4, 4], vec![3, 2, 3, 3], 2usize, 1usize),
            (vec![2, 4, 8, 8], vec![5, 4, 3, 3], 1, 1),
            (vec![2, 3, 8, 8], vec![4, 3, 3, 3], 2, 0),
            (vec![1, 1, 5, 7], vec![2, 1, 2, 2], 1, 2),
        ] {
            let n_in: usize = shape.iter().product();
            let n_w: usize = wshape.iter().product();
            let input = Tensor::new(shape.clone(), rand_vec(&mut rng, n_in)).unwrap();
            let weight = Tensor::new(wshape.clone(), rand_vec(&mut rng, n_w)).unwrap();
            let bias = Tensor::new(vec![wshape[0]], rand_vec(&mut rng, wshape[0])).unwrap();
            let fast = conv2d_forward(&input, &weight, &bias, stride, pad).unwrap();
            let slow = conv2d_naive(&input, &weight, &bias, stride, pad);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-10, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(vec![1, 3, 4, 4]);
        let weight = Tensor::zeros(vec![2, 4, 3, 3]);
        let bias = Tensor::zeros(vec![2]);
        let err = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("C=3") && msg.contains("C=4"), "missing dims in: {msg}");
    }

    #[test]
    fn maxpool_2x2() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2d_forward(&input, 2, 2).unwrap();
        assert_eq!(out.data, vec![4.0]);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn maxpool_tie_breaks_to_lowest_index() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, argmax) = maxpool2d_forward(&input, 2, 2).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_empty_window() {
        let input = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(maxpool2d_forward(&input, 0, 1).is_err());
        assert!(maxpool2d_forward(&input, 3, 1).is_err());
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu_forward(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax_last_axis(&[0.0, 0.0], 2);
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = DetRng::seed(3);
        let input = Tensor::new(vec![2, 3, 6, 6], rand_vec(&mut rng, 2 * 3 * 36)).unwrap();
        let weight = Tensor::new(vec![4, 3, 3, 3], rand_vec(&mut rng, 4 * 27)).unwrap();
        let bias = Tensor::new(vec![4], rand_vec(&mut rng, 4)).unwrap();
        let a = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap();
        let b = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = DetRng::seed(5);
        let (m, k, n) = (4, 3, 5);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut c_nn = vec![0.0; m * n];
        gemm_nn(&mut c_nn, &a, &b, m, k, n);
        // aᵀ stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(&mut c_tn, &at, &b, m, k, n);
        // bᵀ stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(&mut c_nt, &a, &bt, m, k, n);
        for i in 0..m * n {
            assert!((c_nn[i] - c_tn[i]).abs() < 1e-12);
            assert!((c_nn[i] - c_nt[i]).abs() < 1e-12);
        }
    }
}
