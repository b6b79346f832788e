//! Building blocks of the segmentation net, each with a hand-written
//! backward pass. Tensors are C×H×W, single sample; batching is a loop one
//! level up.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;

use crate::error::{LadError, Result};
use crate::real::Real;

/// 3×3 convolution, stride 1, zero padding 1, laid out as an im2col GEMM.
/// `weight` is (out, in·9) so the forward pass is one matrix product.
#[derive(Debug, Clone)]
pub struct Conv3x3<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub struct Conv3x3Cache<F> {
    patches: Array2<F>,
    in_ch: usize,
    height: usize,
    width: usize,
}

impl<F: Real> Conv3x3<F> {
    /// He-normal init: std = sqrt(2 / fan_in), zero bias.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * 9;
        let std = F::from_f64((2.0 / fan_in as f64).sqrt());
        let weight = Array2::from_shape_simple_fn((out_ch, fan_in), || F::standard_normal(rng) * std);
        Self {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1 / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    /// Patch matrix in (in·9, HW) layout: row `ch·9 + (dy+1)·3 + (dx+1)`
    /// holds the input plane shifted by (−dy, −dx), zero at the borders.
    /// Rows are filled with contiguous per-row copies, not per-pixel gathers.
    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (c, h, w) = x.dim();
        let mut patches = Array2::zeros((c * 9, h * w));
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            let plane = plane.as_slice().expect("contiguous input plane");
            for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                let mut row = patches.row_mut(ch * 9 + k);
                let row = row.as_slice_mut().expect("contiguous patch row");
                let (x_dst, x_src, len) = shifted_cols(w, *dx);
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src = &plane[sy as usize * w + x_src..sy as usize * w + x_src + len];
                    row[y * w + x_dst..y * w + x_dst + len].copy_from_slice(src);
                }
            }
        }
        patches
    }

    pub fn forward(&self, x: &Array3<F>) -> Result<(Array3<F>, Conv3x3Cache<F>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(LadError::shape(
                "conv3x3 input channels",
                format!("{}", self.in_channels()),
                format!("{c}"),
            ));
        }
        let patches = self.im2col(x);
        // (out, in·9) · (in·9, HW) → (out, HW)
        let mut out_mat = self.weight.dot(&patches);
        for (mut row, &b) in out_mat.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out_ch = self.out_channels();
        let out = out_mat
            .into_shape_with_order((out_ch, h, w))
            .expect("conv output reshape");
        Ok((
            out,
            Conv3x3Cache {
                patches,
                in_ch: c,
                height: h,
                width: w,
            },
        ))
    }

    /// Returns (grad_weight, grad_bias, grad_input).
    pub fn backward(
        &self,
        cache: &Conv3x3Cache<F>,
        grad_out: &Array3<F>,
    ) -> (Array2<F>, Array1<F>, Array3<F>) {
        let (h, w) = (cache.height, cache.width);
        let out_ch = self.out_channels();
        let g_mat = grad_out
            .view()
            .into_shape_with_order((out_ch, h * w))
            .expect("grad reshape"); // (out, HW)
        let grad_weight = g_mat.dot(&cache.patches.t());
        let grad_bias = g_mat.sum_axis(Axis(1));
        let grad_patches = self.weight.t().dot(&g_mat); // (in·9, HW)
        // col2im: scatter patch rows back with shifted per-row adds
        let mut grad_x = Array3::zeros((cache.in_ch, h, w));
        for ch in 0..cache.in_ch {
            let mut plane = grad_x.index_axis_mut(Axis(0), ch);
            let plane = plane.as_slice_mut().expect("contiguous grad plane");
            for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                let row = grad_patches.row(ch * 9 + k);
                let row = row.as_slice().expect("contiguous patch row");
                let (x_dst, x_src, len) = shifted_cols(w, *dx);
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w + x_src..sy as usize * w + x_src + len];
                    let src = &row[y * w + x_dst..y * w + x_dst + len];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + *s;
                    }
                }
            }
        }
        (grad_weight, grad_bias, grad_x)
    }
}

/// 3×3 kernel offsets in weight-column order.
const OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Destination start, source start and run length for a horizontal shift by
/// `dx` within a row of width `w`.
fn shifted_cols(w: usize, dx: i64) -> (usize, usize, usize) {
    if dx >= 0 {
        (0, dx as usize, w - dx as usize)
    } else {
        ((-dx) as usize, 0, w - (-dx) as usize)
    }
}

/// 1×1 convolution (the classifier head).
#[derive(Debug, Clone)]
pub struct Conv1x1<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub struct Conv1x1Cache<F> {
    x_mat: Array2<F>,
    height: usize,
    width: usize,
}

impl<F: Real> Conv1x1<F> {
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let std = F::from_f64((2.0 / in_ch as f64).sqrt());
        let weight = Array2::from_shape_simple_fn((out_ch, in_ch), || F::standard_normal(rng) * std);
        Self {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Result<(Array3<F>, Conv1x1Cache<F>)> {
        let (c, h, w) = x.dim();
        if c != self.weight.dim().1 {
            return Err(LadError::shape(
                "conv1x1 input channels",
                format!("{}", self.weight.dim().1),
                format!("{c}"),
            ));
        }
        let x_mat = x
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("conv1x1 reshape");
        let mut out_mat = self.weight.dot(&x_mat); // (out, HW)
        for (mut row, &b) in out_mat.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out_mat
            .into_shape_with_order((self.weight.dim().0, h, w))
            .expect("conv1x1 output reshape");
        Ok((out, Conv1x1Cache { x_mat, height: h, width: w }))
    }

    pub fn backward(
        &self,
        cache: &Conv1x1Cache<F>,
        grad_out: &Array3<F>,
    ) -> (Array2<F>, Array1<F>, Array3<F>) {
        let (out_ch, h, w) = grad_out.dim();
        let g_mat = grad_out
            .view()
            .into_shape_with_order((out_ch, h * w))
            .expect("grad reshape");
        let grad_weight = g_mat.dot(&cache.x_mat.t());
        let grad_bias = g_mat.sum_axis(Axis(1));
        let grad_x = self
            .weight
            .t()
            .dot(&g_mat)
            .into_shape_with_order((self.weight.dim().1, cache.height, cache.width))
            .expect("grad input reshape");
        (grad_weight, grad_bias, grad_x)
    }
}

/// Per-pixel layer normalization across the channel axis with a learned
/// per-channel affine. No cross-pixel statistics, so spatially structured
/// signals (like the label channel) survive normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

pub struct LayerNormCache<F> {
    xhat: Array3<F>,
    inv_std: Array2<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: F::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Result<(Array3<F>, LayerNormCache<F>)> {
        let (c, h, w) = x.dim();
        if c != self.gamma.len() {
            return Err(LadError::shape(
                "layernorm channels",
                format!("{}", self.gamma.len()),
                format!("{c}"),
            ));
        }
        // per-pixel statistics across channels, accumulated plane by plane
        let inv_c = F::one() / F::from_f64(c as f64);
        let mean = x.sum_axis(Axis(0)).mapv_into(|v| v * inv_c);
        let mut var = Array2::<F>::zeros((h, w));
        for plane in x.axis_iter(Axis(0)) {
            ndarray::Zip::from(&mut var).and(&plane).and(&mean).for_each(|v, &p, &m| {
                let d = p - m;
                *v = *v + d * d;
            });
        }
        let eps = self.eps;
        let inv_std = var.mapv_into(|v| F::one() / (v * inv_c + eps).sqrt());
        let mut xhat = Array3::zeros((c, h, w));
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            let mut xh = xhat.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut xh)
                .and(&plane)
                .and(&mean)
                .and(&inv_std)
                .for_each(|o, &p, &m, &is| *o = (p - m) * is);
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let mut o = out.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut o).and(&xh).for_each(|ov, &xv| *ov = g * xv + b);
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    /// Returns (grad_gamma, grad_beta, grad_input).
    pub fn backward(
        &self,
        cache: &LayerNormCache<F>,
        grad_out: &Array3<F>,
    ) -> (Array1<F>, Array1<F>, Array3<F>) {
        let (c, h, w) = grad_out.dim();
        let inv_c = F::one() / F::from_f64(c as f64);
        let mut grad_gamma = Array1::zeros(c);
        let mut grad_beta = Array1::zeros(c);
        let mut sum_dxhat = Array2::<F>::zeros((h, w));
        let mut sum_dxhat_xhat = Array2::<F>::zeros((h, w));
        for ch in 0..c {
            let g = self.gamma[ch];
            let dy = grad_out.index_axis(Axis(0), ch);
            let xh = cache.xhat.index_axis(Axis(0), ch);
            let mut gg = F::zero();
            let mut gb = F::zero();
            ndarray::Zip::from(&mut sum_dxhat)
                .and(&mut sum_dxhat_xhat)
                .and(&dy)
                .and(&xh)
                .for_each(|sd, sdx, &d, &x| {
                    gg = gg + d * x;
                    gb = gb + d;
                    let dxhat = g * d;
                    *sd = *sd + dxhat;
                    *sdx = *sdx + dxhat * x;
                });
            grad_gamma[ch] = gg;
            grad_beta[ch] = gb;
        }
        let mut grad_x = Array3::zeros((c, h, w));
        for ch in 0..c {
            let g = self.gamma[ch];
            let dy = grad_out.index_axis(Axis(0), ch);
            let xh = cache.xhat.index_axis(Axis(0), ch);
            let mut gx = grad_x.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut gx)
                .and(&dy)
                .and(&xh)
                .and(&sum_dxhat)
                .and(&sum_dxhat_xhat)
                .and(&cache.inv_std)
                .for_each(|o, &d, &x, &sd, &sdx, &is| {
                    *o = is * (g * d - inv_c * sd - x * inv_c * sdx);
                });
        }
        (grad_gamma, grad_beta, grad_x)
    }
}

/// ReLU; the mask is recovered from the stored output.
pub fn relu<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| F::max(v, F::zero()))
}

pub fn relu_backward<F: Real>(output: &Array3<F>, grad_out: &Array3<F>) -> Array3<F> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(output).for_each(|gv, &o| {
        if o <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

/// 2×2 average pooling, stride 2. Requires even spatial dims.
pub fn avgpool2<F: Real>(x: &Array3<F>) -> Result<Array3<F>> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(LadError::shape("avgpool2 input", "even H and W", format!("{h}x{w}")));
    }
    let quarter = F::from_f64(0.25);
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        let plane = plane.as_slice().expect("contiguous plane");
        let mut o = out.index_axis_mut(Axis(0), ch);
        let o = o.as_slice_mut().expect("contiguous plane");
        for y in 0..h / 2 {
            let r0 = &plane[2 * y * w..2 * y * w + w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let orow = &mut o[y * (w / 2)..y * (w / 2) + w / 2];
            for (xx, ov) in orow.iter_mut().enumerate() {
                *ov = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_backward<F: Real>(grad_out: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = grad_out.dim();
    let quarter = F::from_f64(0.25);
    let mut grad_x = Array3::zeros((c, h2 * 2, w2 * 2));
    let w = w2 * 2;
    for ch in 0..c {
        let gplane = grad_out.index_axis(Axis(0), ch);
        let gplane = gplane.as_slice().expect("contiguous plane");
        let mut plane = grad_x.index_axis_mut(Axis(0), ch);
        let plane = plane.as_slice_mut().expect("contiguous plane");
        for y in 0..h2 {
            let grow = &gplane[y * w2..y * w2 + w2];
            let (r0, r1) = plane[2 * y * w..(2 * y + 2) * w].split_at_mut(w);
            for (xx, &gv) in grow.iter().enumerate() {
                let g = gv * quarter;
                r0[2 * xx] = g;
                r0[2 * xx + 1] = g;
                r1[2 * xx] = g;
                r1[2 * xx + 1] = g;
            }
        }
    }
    grad_x
}

/// Source taps for one output axis position under ×2 bilinear interpolation
/// (half-pixel centers, edges clamped): indices and weights.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|j| {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor.max(0.0) as usize).min(in_len - 1);
            let i1 = ((floor as i64 + 1).max(0) as usize).min(in_len - 1);
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// ×2 bilinear upsampling with half-pixel alignment and edge clamping.
pub fn upsample2<F: Real>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h * 2, w * 2);
    let ys = bilinear_taps(oh, h);
    let xs: Vec<(usize, usize, F, F)> = bilinear_taps(ow, w)
        .into_iter()
        .map(|(i0, i1, w0, w1)| (i0, i1, F::from_f64(w0), F::from_f64(w1)))
        .collect();
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        let plane = plane.as_slice().expect("contiguous plane");
        let mut o = out.index_axis_mut(Axis(0), ch);
        let o = o.as_slice_mut().expect("contiguous plane");
        for (y, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (F::from_f64(wy0), F::from_f64(wy1));
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let orow = &mut o[y * ow..y * ow + ow];
            for (ov, &(x0, x1, wx0, wx1)) in orow.iter_mut().zip(xs.iter()) {
                *ov = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(grad_out: &Array3<F>) -> Array3<F> {
    let (c, oh, ow) = grad_out.dim();
    let (h, w) = (oh / 2, ow / 2);
    let ys = bilinear_taps(oh, h);
    let xs: Vec<(usize, usize, F, F)> = bilinear_taps(ow, w)
        .into_iter()
        .map(|(i0, i1, w0, w1)| (i0, i1, F::from_f64(w0), F::from_f64(w1)))
        .collect();
    let mut grad_x = Array3::zeros((c, h, w));
    for ch in 0..c {
        let gplane = grad_out.index_axis(Axis(0), ch);
        let gplane = gplane.as_slice().expect("contiguous plane");
        let mut plane = grad_x.index_axis_mut(Axis(0), ch);
        let plane = plane.as_slice_mut().expect("contiguous plane");
        for (y, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (F::from_f64(wy0), F::from_f64(wy1));
            let grow = &gplane[y * ow..y * ow + ow];
            for (&gv, &(x0, x1, wx0, wx1)) in grow.iter().zip(xs.iter()) {
                plane[y0 * w + x0] = plane[y0 * w + x0] + gv * wy0 * wx0;
                plane[y0 * w + x1] = plane[y0 * w + x1] + gv * wy0 * wx1;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gv * wy1 * wx0;
                plane[y1 * w + x1] = plane[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    grad_x
}

/// Channel concatenation [a; b].
pub fn concat_channels<F: Real>(a: &Array3<F>, b: &Array3<F>) -> Result<Array3<F>> {
    let (ca, ha, wa) = a.dim();
    let (cb, hb, wb) = b.dim();
    if (ha, wa) != (hb, wb) {
        return Err(LadError::shape(
            "concat spatial dims",
            format!("{ha}x{wa}"),
            format!("{hb}x{wb}"),
        ));
    }
    let mut out = Array3::zeros((ca + cb, ha, wa));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    Ok(out)
}

pub fn split_channels<F: Real>(grad: &Array3<F>, ca: usize) -> (Array3<F>, Array3<F>) {
    (
        grad.slice(s![..ca, .., ..]).to_owned(),
        grad.slice(s![ca.., .., ..]).to_owned(),
    )
}

/// Copies a flat slice into an arbitrary-dim array, length-checked.
pub fn fill_from_flat<F: Real, D: ndarray::Dimension>(
    dst: &mut ndarray::Array<F, D>,
    src: ArrayView1<F>,
) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}
