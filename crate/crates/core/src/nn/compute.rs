//! Batched forward and backward kernels, generic over the scalar type so the
//! gradient checker can run the exact same code in f64.
//!
//! Layout: a batch is `batch` samples stored back to back, each sample in
//! CHW order. Weights are row-major `[outputs, inputs]` for affine layers and
//! `[filters, channels, 3, 3]` for convolutions.

use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::arch::{Activation, Architecture, LayerSpec, Shape};
use super::NnError;

pub(crate) trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Send + Sync + 'static
{
    /// `c = a·b + beta·c` with arbitrary strides (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f32(v: f32) -> Self;

    fn as_f64(self) -> f64;
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides));
                assert!(b.len() >= extent(k, n, b_strides));
                assert!(c.len() >= extent(m, n, c_strides));
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn from_f32(v: f32) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `c[m×n] = a[m×k] · bᵀ` where `b` is `[n×k]`.
fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c[m×n] = a[m×k] · b[k×n]`.
fn matmul_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c[m×n] = aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// Activations recorded by a forward pass.
pub(crate) struct Trace<T> {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    /// The last entry holds softmax probabilities.
    pub acts: Vec<Vec<T>>,
    /// Pre-softmax logits of the output layer.
    pub logits: Vec<T>,
    /// Argmax offsets (within a sample) for each pooling layer.
    pub pool_argmax: Vec<Vec<u32>>,
}

impl<T: Real> Trace<T> {
    pub fn probabilities(&self) -> &[T] {
        self.acts.last().expect("nonempty trace")
    }

    /// Activations feeding the output layer.
    pub fn features(&self) -> &[T] {
        &self.acts[self.acts.len() - 2]
    }
}

/// Index of each layer's weight tensor in the flat parameter list.
pub(crate) fn param_slots(arch: &Architecture) -> Vec<Option<usize>> {
    let mut next = 0;
    arch.layers()
        .iter()
        .map(|layer| match layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } | LayerSpec::SoftmaxOutput { .. } => {
                let slot = next;
                next += 2;
                Some(slot)
            }
            LayerSpec::MaxPool | LayerSpec::Flatten => None,
        })
        .collect()
}

fn volume(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Volume {
            channels,
            height,
            width,
        } => (channels, height, width),
        Shape::Flat(_) => unreachable!("validated architecture"),
    }
}

fn im2col<T: Real>(x: &[T], (c, h, w): (usize, usize, usize), cols: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for oy in 0..oh {
                    let src = ch * h * w + (oy + ky) * w + kx;
                    cols[row + oy * ow..row + oy * ow + ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], (c, h, w): (usize, usize, usize), dx: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for oy in 0..oh {
                    let dst = ch * h * w + (oy + ky) * w + kx;
                    for ox in 0..ow {
                        dx[dst + ox] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn ensure_finite<T: Real>(values: &[T], layer: usize) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::Numeric(format!(
            "non-finite activation after layer {layer}"
        )))
    }
}

fn affine_forward<T: Real>(
    x: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    matmul_nt(batch, inputs, outputs, x, weight, T::one(), &mut out);
    out
}

fn relu_in_place<T: Real>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub(crate) fn forward<T: Real>(
    arch: &Architecture,
    params: &[&[T]],
    input: Vec<T>,
    batch: usize,
) -> Result<Trace<T>, NnError> {
    debug_assert_eq!(input.len(), batch * arch.input_len());
    let slots = param_slots(arch);
    let mut acts = Vec::with_capacity(arch.layers().len() + 1);
    let mut pool_argmax = Vec::new();
    let mut logits = Vec::new();
    acts.push(input);

    for (i, layer) in arch.layers().iter().enumerate() {
        let in_shape = arch.shape_before(i);
        let x = acts.last().unwrap();
        let out = match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => {
                let s = slots[i].unwrap();
                let mut out = affine_forward(x, batch, inputs, outputs, params[s], params[s + 1]);
                if activation == Activation::Relu {
                    relu_in_place(&mut out);
                }
                out
            }
            LayerSpec::Conv { filters } => {
                let s = slots[i].unwrap();
                let (weight, bias) = (params[s], params[s + 1]);
                let dims = volume(in_shape);
                let (c, h, w) = dims;
                let plane = (h - 2) * (w - 2);
                let in_len = c * h * w;
                let mut cols = vec![T::zero(); c * 9 * plane];
                let mut out = vec![T::zero(); batch * filters * plane];
                for b in 0..batch {
                    im2col(&x[b * in_len..(b + 1) * in_len], dims, &mut cols);
                    let y = &mut out[b * filters * plane..(b + 1) * filters * plane];
                    for (f, row) in y.chunks_mut(plane).enumerate() {
                        row.fill(bias[f]);
                    }
                    matmul_nn(filters, c * 9, plane, weight, &cols, T::one(), y);
                }
                relu_in_place(&mut out);
                out
            }
            LayerSpec::MaxPool => {
                let (c, h, w) = volume(in_shape);
                let (oh, ow) = (h / 2, w / 2);
                let in_len = c * h * w;
                let out_len = c * oh * ow;
                let mut out = Vec::with_capacity(batch * out_len);
                let mut argmax = Vec::with_capacity(batch * out_len);
                for b in 0..batch {
                    let sample = &x[b * in_len..(b + 1) * in_len];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let base = ch * h * w + 2 * oy * w + 2 * ox;
                                let mut best = base;
                                for off in [1, w, w + 1] {
                                    if sample[base + off] > sample[best] {
                                        best = base + off;
                                    }
                                }
                                out.push(sample[best]);
                                argmax.push(best as u32);
                            }
                        }
                    }
                }
                pool_argmax.push(argmax);
                out
            }
            LayerSpec::Flatten => x.clone(),
            LayerSpec::SoftmaxOutput { classes } => {
                let s = slots[i].unwrap();
                let inputs = in_shape.len();
                let z = affine_forward(x, batch, inputs, classes, params[s], params[s + 1]);
                ensure_finite(&z, i)?;
                let mut probs = z.clone();
                for row in probs.chunks_mut(classes) {
                    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut total = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / total;
                    }
                }
                logits = z;
                probs
            }
        };
        ensure_finite(&out, i)?;
        acts.push(out);
    }

    Ok(Trace {
        batch,
        acts,
        logits,
        pool_argmax,
    })
}

/// Mean cross-entropy of the batch, accumulated in f64 from the logits.
pub(crate) fn cross_entropy<T: Real>(trace: &Trace<T>, labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0f64;
    for (row, &label) in trace.logits.chunks(classes).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let log_sum: f64 = row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += log_sum - row[label].as_f64();
    }
    total / trace.batch as f64
}

/// Gradients of the mean cross-entropy with respect to every parameter.
pub(crate) fn backward<T: Real>(
    arch: &Architecture,
    params: &[&[T]],
    trace: &Trace<T>,
    labels: &[usize],
) -> Vec<Vec<T>> {
    let batch = trace.batch;
    let classes = arch.classes();
    let slots = param_slots(arch);
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();

    let scale = T::one() / T::from_f32(batch as f32);
    let mut delta: Vec<T> = trace.probabilities().to_vec();
    for (row, &label) in delta.chunks_mut(classes).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let mut pool_index = trace.pool_argmax.len();
    for (i, layer) in arch.layers().iter().enumerate().rev() {
        let in_shape = arch.shape_before(i);
        let x = &trace.acts[i];
        let y = &trace.acts[i + 1];
        let need_input_grad = i > 0;
        delta = match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => {
                if activation == Activation::Relu {
                    mask_relu(&mut delta, y);
                }
                affine_backward(
                    params,
                    &mut grads,
                    slots[i].unwrap(),
                    x,
                    &delta,
                    batch,
                    inputs,
                    outputs,
                    need_input_grad,
                )
            }
            LayerSpec::SoftmaxOutput { classes } => affine_backward(
                params,
                &mut grads,
                slots[i].unwrap(),
                x,
                &delta,
                batch,
                in_shape.len(),
                classes,
                need_input_grad,
            ),
            LayerSpec::Conv { filters } => {
                mask_relu(&mut delta, y);
                let s = slots[i].unwrap();
                let dims = volume(in_shape);
                let (c, h, w) = dims;
                let plane = (h - 2) * (w - 2);
                let in_len = c * h * w;
                let k = c * 9;
                let mut cols = vec![T::zero(); k * plane];
                let mut dcols = vec![T::zero(); k * plane];
                let mut dx = if need_input_grad {
                    vec![T::zero(); batch * in_len]
                } else {
                    Vec::new()
                };
                let (gw, rest) = grads.split_at_mut(s + 1);
                let gw = &mut gw[s];
                let gb = &mut rest[0];
                for b in 0..batch {
                    let dz = &delta[b * filters * plane..(b + 1) * filters * plane];
                    im2col(&x[b * in_len..(b + 1) * in_len], dims, &mut cols);
                    matmul_nt(filters, plane, k, dz, &cols, T::one(), gw);
                    for (f, row) in dz.chunks(plane).enumerate() {
                        for &v in row {
                            gb[f] += v;
                        }
                    }
                    if need_input_grad {
                        matmul_tn(k, filters, plane, params[s], dz, T::zero(), &mut dcols);
                        col2im_add(&dcols, dims, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                }
                dx
            }
            LayerSpec::MaxPool => {
                pool_index -= 1;
                let argmax = &trace.pool_argmax[pool_index];
                let in_len = in_shape.len();
                let out_len = argmax.len() / batch;
                let mut dx = vec![T::zero(); batch * in_len];
                for b in 0..batch {
                    for j in 0..out_len {
                        dx[b * in_len + argmax[b * out_len + j] as usize] += delta[b * out_len + j];
                    }
                }
                dx
            }
            LayerSpec::Flatten => delta,
        };
    }
    grads
}

fn mask_relu<T: Real>(delta: &mut [T], output: &[T]) {
    for (d, &y) in delta.iter_mut().zip(output) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Real>(
    params: &[&[T]],
    grads: &mut [Vec<T>],
    slot: usize,
    x: &[T],
    dz: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    need_input_grad: bool,
) -> Vec<T> {
    matmul_tn(outputs, batch, inputs, dz, x, T::zero(), &mut grads[slot]);
    let gb = &mut grads[slot + 1];
    for row in dz.chunks(outputs) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    if !need_input_grad {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); batch * inputs];
    matmul_nn(batch, outputs, inputs, dz, params[slot], T::zero(), &mut dx);
    dx
}
