//! 2-D convolution over `[B, H, W, C]` tensors with `[k, k, C_out, C_in]` kernels.
//!
//! Output pixel `y` reads input pixel `y * stride + ky - k / 2` for tap `ky`,
//! so the centre tap of an odd kernel is aligned with the strided pixel.

use serde::{Deserialize, Serialize};

use super::{Precision, ReductionPolicy, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub boundary: Boundary,
    pub ho: usize,
    pub wo: usize,
    /// `rows[oy * k + ky]`: input row read by output row `oy` through tap `ky`.
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    /// `inv_rows[iy * k + ky]`: output row that reads input row `iy` through tap `ky`.
    inv_rows: Vec<Option<usize>>,
    inv_cols: Vec<Option<usize>>,
}

fn axis_maps(n: usize, k: usize, stride: usize, boundary: Boundary) -> (usize, Vec<Option<usize>>, Vec<Option<usize>>) {
    let pad = (k / 2) as isize;
    let no = match boundary {
        Boundary::Periodic => n / stride,
        Boundary::Zero => n.div_ceil(stride),
    };
    let mut fwd = vec![None; no * k];
    let mut inv = vec![None; n * k];
    for o in 0..no {
        for t in 0..k {
            let raw = (o * stride) as isize + t as isize - pad;
            let i = match boundary {
                Boundary::Periodic => Some(raw.rem_euclid(n as isize) as usize),
                Boundary::Zero => (raw >= 0 && raw < n as isize).then_some(raw as usize),
            };
            fwd[o * k + t] = i;
            if let Some(i) = i {
                inv[i * k + t] = Some(o);
            }
        }
    }
    (no, fwd, inv)
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize, boundary: Boundary) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv input must be [B,H,W,C], got {input_shape:?}"
            )));
        }
        if weight_shape.len() != 4 || weight_shape[0] != weight_shape[1] {
            return Err(TensorError::InvalidKernel(format!(
                "kernel must be [k,k,C_out,C_in], got {weight_shape:?}"
            )));
        }
        let k = weight_shape[0];
        if k.is_multiple_of(2) {
            return Err(TensorError::InvalidKernel(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidStride { stride, extent: 0 });
        }
        let (batch, h, w, c_in) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        if weight_shape[3] != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel expects {} input channels, input has {c_in}",
                weight_shape[3]
            )));
        }
        if boundary == Boundary::Periodic {
            for extent in [h, w] {
                if extent % stride != 0 {
                    return Err(TensorError::InvalidStride { stride, extent });
                }
            }
        }
        let (ho, rows, inv_rows) = axis_maps(h, k, stride, boundary);
        let (wo, cols, inv_cols) = axis_maps(w, k, stride, boundary);
        Ok(Self {
            batch,
            h,
            w,
            c_in,
            k,
            c_out: weight_shape[2],
            stride,
            boundary,
            ho,
            wo,
            rows,
            cols,
            inv_rows,
            inv_cols,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.ho, self.wo, self.c_out]
    }

    fn in_off(&self, b: usize, y: usize, x: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c_in
    }

    fn out_off(&self, b: usize, y: usize, x: usize) -> usize {
        ((b * self.ho + y) * self.wo + x) * self.c_out
    }

    /// Valid (tap, input offset) pairs for an output pixel.
    fn taps_for_output(&self, b: usize, oy: usize, ox: usize, buf: &mut Vec<(usize, usize)>) {
        buf.clear();
        let k = self.k;
        for ky in 0..k {
            let Some(iy) = self.rows[oy * k + ky] else { continue };
            for kx in 0..k {
                let Some(ix) = self.cols[ox * k + kx] else { continue };
                buf.push((ky * k + kx, self.in_off(b, iy, ix)));
            }
        }
    }

    /// Valid (tap, output offset) pairs for an input pixel.
    fn taps_for_input(&self, b: usize, iy: usize, ix: usize, buf: &mut Vec<(usize, usize)>) {
        buf.clear();
        let k = self.k;
        for ky in 0..k {
            let Some(oy) = self.inv_rows[iy * k + ky] else { continue };
            for kx in 0..k {
                let Some(ox) = self.inv_cols[ix * k + kx] else { continue };
                buf.push((ky * k + kx, self.out_off(b, oy, ox)));
            }
        }
    }
}

/// Single-sample convolution on `[H, W, C_in]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    boundary: Boundary,
    policy: &ReductionPolicy,
) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d input must be [H,W,C], got {s:?}"
        )));
    }
    let batched = input.reshape(&[1, s[0], s[1], s[2]])?;
    let out = conv2d_batch(&batched, weight, stride, boundary, policy)?;
    let o = out.shape().to_vec();
    out.reshape(&o[1..])
}

pub fn conv2d_batch(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    boundary: Boundary,
    policy: &ReductionPolicy,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, boundary)?;
    let p = policy.precision;
    let x = input.data();
    let wd = weight.data();
    let (c_in, c_out) = (g.c_in, g.c_out);
    let mut out = vec![0.0; g.batch * g.ho * g.wo * c_out];
    if policy.is_ordered() {
        match p {
            Precision::Single => forward_ordered::<f32>(&g, x, wd, &mut out),
            Precision::Double => forward_ordered::<f64>(&g, x, wd, &mut out),
        }
        return Tensor::new(&g.output_shape(), out, p);
    }
    let mut taps = Vec::with_capacity(g.k * g.k);
    let mut terms = Vec::new();
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                g.taps_for_output(b, oy, ox, &mut taps);
                let base = g.out_off(b, oy, ox);
                for o in 0..c_out {
                    terms.clear();
                    for &(t, off) in &taps {
                        let wrow = &wd[(t * c_out + o) * c_in..(t * c_out + o + 1) * c_in];
                        for (wv, xv) in wrow.iter().zip(&x[off..off + c_in]) {
                            terms.push(p.round(wv * xv));
                        }
                    }
                    out[base + o] = policy.sum_terms(&mut terms, (base + o) as u64);
                }
            }
        }
    }
    Tensor::new(&g.output_shape(), out, p)
}

/// Gradient with respect to the input, given the output gradient `dy`.
pub fn conv2d_grad_input(
    input_shape: &[usize],
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    boundary: Boundary,
    policy: &ReductionPolicy,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input_shape, weight.shape(), stride, boundary)?;
    if dy.shape() != g.output_shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "output gradient {:?} vs expected {:?}",
            dy.shape(),
            g.output_shape()
        )));
    }
    let p = policy.precision;
    let wd = weight.data();
    let gd = dy.data();
    let (c_in, c_out) = (g.c_in, g.c_out);
    let mut dx = vec![0.0; g.batch * g.h * g.w * c_in];
    if policy.is_ordered() {
        match p {
            Precision::Single => grad_input_ordered::<f32>(&g, wd, gd, &mut dx),
            Precision::Double => grad_input_ordered::<f64>(&g, wd, gd, &mut dx),
        }
        return Tensor::new(input_shape, dx, p);
    }
    let mut taps = Vec::with_capacity(g.k * g.k);
    let mut terms = Vec::new();
    for b in 0..g.batch {
        for iy in 0..g.h {
            for ix in 0..g.w {
                g.taps_for_input(b, iy, ix, &mut taps);
                let base = g.in_off(b, iy, ix);
                for c in 0..c_in {
                    terms.clear();
                    for &(t, off) in &taps {
                        for o in 0..c_out {
                            terms.push(p.round(wd[(t * c_out + o) * c_in + c] * gd[off + o]));
                        }
                    }
                    dx[base + c] = policy.sum_terms(&mut terms, (base + c) as u64);
                }
            }
        }
    }
    Tensor::new(input_shape, dx, p)
}

/// Gradient with respect to the kernel.
pub fn conv2d_grad_weight(
    input: &Tensor,
    weight_shape: &[usize],
    dy: &Tensor,
    stride: usize,
    boundary: Boundary,
    policy: &ReductionPolicy,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight_shape, stride, boundary)?;
    if dy.shape() != g.output_shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "output gradient {:?} vs expected {:?}",
            dy.shape(),
            g.output_shape()
        )));
    }
    let p = policy.precision;
    let x = input.data();
    let gd = dy.data();
    let (k, c_in, c_out) = (g.k, g.c_in, g.c_out);
    let mut dw = vec![0.0; k * k * c_out * c_in];
    // (output offset, input offset) pairs per tap, in (b, oy, ox) order.
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k * k];
    let mut taps = Vec::with_capacity(k * k);
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                g.taps_for_output(b, oy, ox, &mut taps);
                let out = g.out_off(b, oy, ox);
                for &(t, off) in &taps {
                    pairs[t].push((out, off));
                }
            }
        }
    }
    if policy.is_ordered() {
        match p {
            Precision::Single => grad_weight_ordered::<f32>(&g, x, gd, &pairs, &mut dw),
            Precision::Double => grad_weight_ordered::<f64>(&g, x, gd, &pairs, &mut dw),
        }
        return Tensor::new(weight_shape, dw, p);
    }
    let mut terms = Vec::new();
    for (t, list) in pairs.iter().enumerate() {
        for o in 0..c_out {
            for c in 0..c_in {
                terms.clear();
                terms.extend(list.iter().map(|&(out, inp)| p.round(gd[out + o] * x[inp + c])));
                let e = (t * c_out + o) * c_in + c;
                dw[e] = policy.sum_terms(&mut terms, e as u64);
            }
        }
    }
    Tensor::new(weight_shape, dw, p)
}

/// Native arithmetic type for a precision. Sums and products of two values
/// computed natively in `f32` equal the 64-bit result rounded to `f32`, so
/// the ordered kernels below reproduce rounding after every operation.
trait Lane: Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Lane for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Lane for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

fn lanes<T: Lane>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Each output sums over (tap, input channel) left to right; outputs of one
/// pixel advance together.
fn forward_ordered<T: Lane>(g: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (c_in, c_out) = (g.c_in, g.c_out);
    let x: Vec<T> = lanes(x);
    let mut wt = vec![T::default(); w.len()];
    for t in 0..g.k * g.k {
        for o in 0..c_out {
            for c in 0..c_in {
                wt[(t * c_in + c) * c_out + o] = T::from_f64(w[(t * c_out + o) * c_in + c]);
            }
        }
    }
    let mut taps = Vec::with_capacity(g.k * g.k);
    let mut acc = vec![T::default(); c_out];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                g.taps_for_output(b, oy, ox, &mut taps);
                acc.iter_mut().for_each(|a| *a = T::default());
                for &(t, off) in &taps {
                    let wt = &wt[t * c_in * c_out..(t + 1) * c_in * c_out];
                    for (wcol, &xv) in wt.chunks_exact(c_out).zip(&x[off..off + c_in]) {
                        for (a, &wv) in acc.iter_mut().zip(wcol) {
                            *a = *a + wv * xv;
                        }
                    }
                }
                let base = g.out_off(b, oy, ox);
                for (o, a) in out[base..base + c_out].iter_mut().zip(&acc) {
                    *o = a.to_f64();
                }
            }
        }
    }
}

/// Each input gradient sums over (tap, output channel) left to right.
fn grad_input_ordered<T: Lane>(g: &ConvGeometry, w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let (c_in, c_out) = (g.c_in, g.c_out);
    let w: Vec<T> = lanes(w);
    let dy: Vec<T> = lanes(dy);
    let mut taps = Vec::with_capacity(g.k * g.k);
    let mut acc = vec![T::default(); c_in];
    for b in 0..g.batch {
        for iy in 0..g.h {
            for ix in 0..g.w {
                g.taps_for_input(b, iy, ix, &mut taps);
                acc.iter_mut().for_each(|a| *a = T::default());
                for &(t, off) in &taps {
                    let wt = &w[t * c_out * c_in..(t + 1) * c_out * c_in];
                    for (wrow, &gv) in wt.chunks_exact(c_in).zip(&dy[off..off + c_out]) {
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + wv * gv;
                        }
                    }
                }
                let base = g.in_off(b, iy, ix);
                for (d, a) in dx[base..base + c_in].iter_mut().zip(&acc) {
                    *d = a.to_f64();
                }
            }
        }
    }
}

/// Each kernel entry sums over its (output, input) pixel pairs in order.
fn grad_weight_ordered<T: Lane>(
    g: &ConvGeometry,
    x: &[f64],
    dy: &[f64],
    pairs: &[Vec<(usize, usize)>],
    dw: &mut [f64],
) {
    let (c_in, c_out) = (g.c_in, g.c_out);
    let x: Vec<T> = lanes(x);
    let dy: Vec<T> = lanes(dy);
    let mut acc = vec![T::default(); c_out * c_in];
    for (t, list) in pairs.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = T::default());
        for &(out, inp) in list {
            let xs = &x[inp..inp + c_in];
            for (row, &gv) in acc.chunks_exact_mut(c_in).zip(&dy[out..out + c_out]) {
                for (a, &xv) in row.iter_mut().zip(xs) {
                    *a = *a + gv * xv;
                }
            }
        }
        for (d, a) in dw[t * c_out * c_in..(t + 1) * c_out * c_in].iter_mut().zip(&acc) {
            *d = a.to_f64();
        }
    }
}
