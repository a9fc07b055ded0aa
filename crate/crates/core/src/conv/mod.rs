//! Grouped 3D cross-correlation with zero padding.
//!
//! The fast path lowers every (sample, group) pair to an im2col matrix and a
//! GEMM; [`conv3d_naive`] is the seven-loop reference it is checked against.

mod naive;

pub use naive::conv3d_naive;

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::scalar::{gemm_acc, Scalar};
use crate::tensor::Tensor;

/// Hyperparameters of one 3D convolution. Every triple is ordered (D, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Cubic kernel of side `size`, unit stride and dilation, no padding, one group.
    pub fn new(in_channels: usize, out_channels: usize, size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [size; 3],
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = [p; 3];
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = [s; 3];
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = [d; 3];
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Fan-in of a single output unit: `(C_in/G)·S³`.
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel_volume()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("channel and group counts must be positive"));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::shape(format!(
                "channels {}→{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(Error::shape("kernel, stride and dilation must be positive"));
        }
        Ok(())
    }

    /// `floor((n + 2p − dil·(S−1) − 1)/stride) + 1` for each axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = (input[a] + 2 * self.padding[a]) as isize
                - (self.dilation[a] * (self.kernel[a] - 1)) as isize
                - 1;
            if span < 0 {
                return Err(Error::shape(format!(
                    "non-positive output extent on axis {a}: input {input:?}, spec {self:?}"
                )));
            }
            out[a] = span as usize / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Validates operand shapes and returns the output shape.
    pub fn check<T: Scalar>(
        &self,
        x: &[usize],
        w: &[usize],
        b: Option<&Tensor<T>>,
    ) -> Result<Vec<usize>> {
        self.validate()?;
        if x.len() != 5 || x[1] != self.in_channels {
            return Err(Error::shape(format!(
                "input {x:?} does not match B×{}×D×H×W",
                self.in_channels
            )));
        }
        if w != self.weight_shape() {
            return Err(Error::shape(format!(
                "weight {w:?} does not match {:?}",
                self.weight_shape()
            )));
        }
        if let Some(b) = b {
            if b.shape() != [self.out_channels] {
                return Err(Error::shape(format!(
                    "bias {:?} does not match [{}]",
                    b.shape(),
                    self.out_channels
                )));
            }
        }
        let o = self.output_extents([x[2], x[3], x[4]])?;
        Ok(vec![x[0], self.out_channels, o[0], o[1], o[2]])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

thread_local! {
    static FLIP_GRAD_INPUT_SIGN: Cell<bool> = const { Cell::new(false) };
}

/// Test fixture: runs `f` with the sign of the input gradient of every
/// convolution backward pass flipped, so that gradient checks can prove they
/// detect a broken backward rule.
#[doc(hidden)]
pub fn with_flipped_input_gradient<R>(f: impl FnOnce() -> R) -> R {
    FLIP_GRAD_INPUT_SIGN.with(|c| c.set(true));
    let out = f();
    FLIP_GRAD_INPUT_SIGN.with(|c| c.set(false));
    out
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `z·stride + offset` falls inside `0..len`.
fn valid_span(out_len: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 {
        ((-offset) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Fills `col` (rows = in-channel×kernel offset, cols = output position) for one group.
fn im2col<T: Scalar>(
    x: &[T],
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    spec: &ConvSpec,
    channels: usize,
    col: &mut [T],
) {
    let [d, h, w] = in_ext;
    let [od, oh, ow] = out_ext;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..channels {
        let src = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let off_d = (a * spec.dilation[0]) as isize - spec.padding[0] as isize;
            for b in 0..kh {
                let off_h = (b * spec.dilation[1]) as isize - spec.padding[1] as isize;
                for c in 0..kw {
                    let off_w = (c * spec.dilation[2]) as isize - spec.padding[2] as isize;
                    let (lo, hi) = valid_span(ow, w, sw, off_w);
                    let dst = &mut col[row * p..(row + 1) * p];
                    for zd in 0..od {
                        let id = (zd * sd) as isize + off_d;
                        for zh in 0..oh {
                            let ih = (zh * sh) as isize + off_h;
                            let out_row = &mut dst[(zd * oh + zh) * ow..][..ow];
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize || lo >= hi
                            {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let line = &src[(id as usize * h + ih as usize) * w..][..w];
                            out_row[..lo].fill(T::zero());
                            out_row[hi..].fill(T::zero());
                            let first = (lo * sw) as isize + off_w;
                            if sw == 1 {
                                out_row[lo..hi].copy_from_slice(&line[first as usize..][..hi - lo]);
                            } else {
                                for (k, o) in out_row[lo..hi].iter_mut().enumerate() {
                                    *o = line[first as usize + k * sw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds an im2col gradient back onto the input gradient of one group.
fn col2im<T: Scalar>(
    col: &[T],
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    spec: &ConvSpec,
    channels: usize,
    gx: &mut [T],
) {
    let [d, h, w] = in_ext;
    let [od, oh, ow] = out_ext;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..channels {
        let dst = &mut gx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let off_d = (a * spec.dilation[0]) as isize - spec.padding[0] as isize;
            for b in 0..kh {
                let off_h = (b * spec.dilation[1]) as isize - spec.padding[1] as isize;
                for c in 0..kw {
                    let off_w = (c * spec.dilation[2]) as isize - spec.padding[2] as isize;
                    let (lo, hi) = valid_span(ow, w, sw, off_w);
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let first = ((lo * sw) as isize + off_w) as usize;
                    for zd in 0..od {
                        let id = (zd * sd) as isize + off_d;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for zh in 0..oh {
                            let ih = (zh * sh) as isize + off_h;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let line = &mut dst[(id as usize * h + ih as usize) * w..][..w];
                            let g_row = &src[(zd * oh + zh) * ow..][lo..hi];
                            if sw == 1 {
                                line[first..first + g_row.len()]
                                    .iter_mut()
                                    .zip(g_row)
                                    .for_each(|(l, &g)| *l += g);
                            } else {
                                for (k, &g) in g_row.iter().enumerate() {
                                    line[first + k * sw] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution on a zero-padded, flattened volume. With the input
/// padded to `Dp×Hp×Wp`, output `(z_d, z_h, z_w)` reads the padded input at
/// flat index `z_d·Hp·Wp + z_h·Wp + z_w + shift(tap)`, so every kernel tap is
/// one contiguous multiply-add over a span of the flat grid. Span positions
/// that wrap past the valid output columns are computed and discarded.
struct FlatPlan {
    padded: [usize; 3],
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    pad: [usize; 3],
    padded_len: usize,
    span: usize,
    shifts: Vec<usize>,
}

impl FlatPlan {
    fn new(spec: &ConvSpec, in_ext: [usize; 3], out_ext: [usize; 3]) -> Self {
        let padded = [0, 1, 2].map(|a| in_ext[a] + 2 * spec.padding[a]);
        let [_, hp, wp] = padded;
        let [od, oh, ow] = out_ext;
        let span = (od - 1) * hp * wp + (oh - 1) * wp + ow;
        let mut shifts = Vec::with_capacity(spec.kernel_volume());
        for a in 0..spec.kernel[0] {
            for b in 0..spec.kernel[1] {
                for c in 0..spec.kernel[2] {
                    shifts.push(
                        a * spec.dilation[0] * hp * wp
                            + b * spec.dilation[1] * wp
                            + c * spec.dilation[2],
                    );
                }
            }
        }
        FlatPlan {
            padded,
            in_ext,
            out_ext,
            pad: spec.padding,
            padded_len: padded.iter().product(),
            span,
            shifts,
        }
    }

    /// Copies each channel of `x` into the interior of its padded volume.
    fn pad<T: Scalar>(&self, x: &[T], channels: usize, xpad: &mut [T]) {
        let [d, h, w] = self.in_ext;
        let [_, hp, wp] = self.padded;
        for ci in 0..channels {
            let src = &x[ci * d * h * w..][..d * h * w];
            let dst = &mut xpad[ci * self.padded_len..][..self.padded_len];
            for i in 0..d {
                for j in 0..h {
                    let at = ((i + self.pad[0]) * hp + j + self.pad[1]) * wp + self.pad[2];
                    dst[at..at + w].copy_from_slice(&src[(i * h + j) * w..][..w]);
                }
            }
        }
    }

    /// Adds the interior of each padded gradient volume into `gx`.
    fn unpad<T: Scalar>(&self, gpad: &[T], channels: usize, gx: &mut [T]) {
        let [d, h, w] = self.in_ext;
        let [_, hp, wp] = self.padded;
        for ci in 0..channels {
            let src = &gpad[ci * self.padded_len..][..self.padded_len];
            let dst = &mut gx[ci * d * h * w..][..d * h * w];
            for i in 0..d {
                for j in 0..h {
                    let at = ((i + self.pad[0]) * hp + j + self.pad[1]) * wp + self.pad[2];
                    dst[(i * h + j) * w..][..w]
                        .iter_mut()
                        .zip(&src[at..at + w])
                        .for_each(|(o, &v)| *o += v);
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, xpad: &[T], w: &[T], cin: usize, cout: usize, acc: &mut [T]) {
        let taps = self.shifts.len();
        for co in 0..cout {
            let out = &mut acc[co * self.span..][..self.span];
            for ci in 0..cin {
                let src = &xpad[ci * self.padded_len..][..self.padded_len];
                let wk = &w[(co * cin + ci) * taps..][..taps];
                for (&s, &wv) in self.shifts.iter().zip(wk) {
                    axpy(wv, &src[s..s + self.span], out);
                }
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        xpad: &[T],
        w: &[T],
        gacc: &[T],
        cin: usize,
        cout: usize,
        gw: &mut [T],
        gpad: &mut [T],
    ) {
        let taps = self.shifts.len();
        for co in 0..cout {
            let g = &gacc[co * self.span..][..self.span];
            for ci in 0..cin {
                let src = &xpad[ci * self.padded_len..][..self.padded_len];
                let dst = &mut gpad[ci * self.padded_len..][..self.padded_len];
                let k = (co * cin + ci) * taps;
                for (t, &s) in self.shifts.iter().enumerate() {
                    gw[k + t] += dot(g, &src[s..s + self.span]);
                    axpy(w[k + t], g, &mut dst[s..s + self.span]);
                }
            }
        }
    }

    /// Flat span index of the first output of each output row `(z_d, z_h)`.
    fn row_starts(&self) -> impl Iterator<Item = usize> + '_ {
        let [od, oh, _] = self.out_ext;
        let [_, hp, wp] = self.padded;
        (0..od).flat_map(move |i| (0..oh).map(move |j| (i * hp + j) * wp))
    }

    fn gather_outputs<T: Scalar>(&self, acc: &[T], cout: usize, out: &mut [T]) {
        let ow = self.out_ext[2];
        let p: usize = self.out_ext.iter().product();
        for co in 0..cout {
            let src = &acc[co * self.span..][..self.span];
            let dst = &mut out[co * p..][..p];
            for (r, start) in self.row_starts().enumerate() {
                dst[r * ow..][..ow].copy_from_slice(&src[start..start + ow]);
            }
        }
    }

    fn scatter_outputs<T: Scalar>(&self, go: &[T], cout: usize, gacc: &mut [T]) {
        let ow = self.out_ext[2];
        let p: usize = self.out_ext.iter().product();
        gacc.fill(T::zero());
        for co in 0..cout {
            let dst = &mut gacc[co * self.span..][..self.span];
            let src = &go[co * p..][..p];
            for (r, start) in self.row_starts().enumerate() {
                dst[start..start + ow].copy_from_slice(&src[r * ow..][..ow]);
            }
        }
    }
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(o, &v)| *o += a * v);
}

/// Dot product with eight independent partial sums (vectorizable).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = lanes.iter().copied().fold(T::zero(), |acc, v| acc + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Grouped 3D convolution, `x: B×C_in×D×H×W`, `w: C_out×(C_in/G)×S×S×S`.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.check(x.shape(), w.shape(), b)?;
    let xs = x.shape();
    let in_ext = [xs[2], xs[3], xs[4]];
    let out_ext = [out_shape[2], out_shape[3], out_shape[4]];
    let (batch, g_count) = (xs[0], spec.groups);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let in_vol: usize = in_ext.iter().product();
    let p: usize = out_ext.iter().product();
    let rows = spec.fan_in();
    let pointwise = spec.is_pointwise();
    let mut out = vec![T::zero(); out_shape.iter().product()];
    if !pointwise && spec.stride == [1; 3] {
        let plan = FlatPlan::new(spec, in_ext, out_ext);
        let mut xpad = vec![T::zero(); cin_g * plan.padded_len];
        let mut acc = vec![T::zero(); cout_g * plan.span];
        for n in 0..batch {
            for g in 0..g_count {
                let x_g =
                    &x.data()[(n * spec.in_channels + g * cin_g) * in_vol..][..cin_g * in_vol];
                plan.pad(x_g, cin_g, &mut xpad);
                let w_g = &w.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
                acc.fill(T::zero());
                plan.forward(&xpad, w_g, cin_g, cout_g, &mut acc);
                let o_g = &mut out[(n * spec.out_channels + g * cout_g) * p..][..cout_g * p];
                plan.gather_outputs(&acc, cout_g, o_g);
            }
        }
        add_bias(&mut out, b, batch, spec.out_channels, p);
        return Tensor::new(out_shape, out);
    }
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for n in 0..batch {
        for g in 0..g_count {
            let x_g = &x.data()[(n * spec.in_channels + g * cin_g) * in_vol..][..cin_g * in_vol];
            let cols: &[T] = if pointwise {
                x_g
            } else {
                im2col(x_g, in_ext, out_ext, spec, cin_g, &mut col);
                &col
            };
            let w_g = &w.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
            let o_g = &mut out[(n * spec.out_channels + g * cout_g) * p..][..cout_g * p];
            gemm_acc(cout_g, rows, p, w_g, false, cols, false, T::zero(), o_g);
        }
    }
    add_bias(&mut out, b, batch, spec.out_channels, p);
    Tensor::new(out_shape, out)
}

fn add_bias<T: Scalar>(
    out: &mut [T],
    b: Option<&Tensor<T>>,
    batch: usize,
    channels: usize,
    p: usize,
) {
    if let Some(b) = b {
        for n in 0..batch {
            for (co, &bv) in b.data().iter().enumerate() {
                out[(n * channels + co) * p..][..p]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let out_shape = spec.check::<T>(x.shape(), w.shape(), None)?;
    if grad_out.shape() != out_shape.as_slice() {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {out_shape:?}",
            grad_out.shape()
        )));
    }
    let xs = x.shape();
    let in_ext = [xs[2], xs[3], xs[4]];
    let out_ext = [out_shape[2], out_shape[3], out_shape[4]];
    let (batch, g_count) = (xs[0], spec.groups);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let in_vol: usize = in_ext.iter().product();
    let p: usize = out_ext.iter().product();
    let rows = spec.fan_in();
    let pointwise = spec.is_pointwise();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); spec.out_channels];
    let go = grad_out.data();
    if !pointwise && spec.stride == [1; 3] {
        let plan = FlatPlan::new(spec, in_ext, out_ext);
        let mut xpad = vec![T::zero(); cin_g * plan.padded_len];
        let mut gpad = vec![T::zero(); cin_g * plan.padded_len];
        let mut gacc = vec![T::zero(); cout_g * plan.span];
        for n in 0..batch {
            for g in 0..g_count {
                let x_off = (n * spec.in_channels + g * cin_g) * in_vol;
                plan.pad(&x.data()[x_off..][..cin_g * in_vol], cin_g, &mut xpad);
                let go_g = &go[(n * spec.out_channels + g * cout_g) * p..][..cout_g * p];
                plan.scatter_outputs(go_g, cout_g, &mut gacc);
                let w_g = &w.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
                let gw_g = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
                gpad.fill(T::zero());
                plan.backward(&xpad, w_g, &gacc, cin_g, cout_g, gw_g, &mut gpad);
                plan.unpad(&gpad, cin_g, &mut gx[x_off..][..cin_g * in_vol]);
                for co in 0..cout_g {
                    gb[g * cout_g + co] += go_g[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
    } else {
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        let mut gcol = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for n in 0..batch {
            for g in 0..g_count {
                let x_off = (n * spec.in_channels + g * cin_g) * in_vol;
                let x_g = &x.data()[x_off..][..cin_g * in_vol];
                let cols: &[T] = if pointwise {
                    x_g
                } else {
                    im2col(x_g, in_ext, out_ext, spec, cin_g, &mut col);
                    &col
                };
                let go_g = &go[(n * spec.out_channels + g * cout_g) * p..][..cout_g * p];
                let w_g = &w.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
                let gw_g = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
                gemm_acc(cout_g, p, rows, go_g, false, cols, true, T::one(), gw_g);
                let gx_g = &mut gx[x_off..][..cin_g * in_vol];
                if pointwise {
                    gemm_acc(rows, cout_g, p, w_g, true, go_g, false, T::one(), gx_g);
                } else {
                    gemm_acc(
                        rows,
                        cout_g,
                        p,
                        w_g,
                        true,
                        go_g,
                        false,
                        T::zero(),
                        &mut gcol,
                    );
                    col2im(&gcol, in_ext, out_ext, spec, cin_g, gx_g);
                }
                for co in 0..cout_g {
                    gb[g * cout_g + co] += go_g[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
    }
    if FLIP_GRAD_INPUT_SIGN.with(Cell::get) {
        gx.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(ConvGrads {
        grad_x: Tensor::new(xs.to_vec(), gx)?,
        grad_w: Tensor::new(w.shape().to_vec(), gw)?,
        grad_b: Tensor::new(vec![spec.out_channels], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = SeededRng::new(1);
        let x = random(&[2, 1, 3, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let spec = ConvSpec::new(1, 1, 1);
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
        assert_eq!(conv3d_naive(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn zero_kernel_emits_bias() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 3, 3], 5.0);
        let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv3d_forward(&x, &w, Some(&b), &ConvSpec::new(2, 3, 3).padding(1)).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i / 27]);
        }
    }

    #[test]
    fn random_grouped_case_matches_naive() {
        let mut rng = SeededRng::new(3);
        let x = random(&[2, 4, 5, 5, 5], &mut rng);
        let spec = ConvSpec::new(4, 8, 3).padding(1).groups(2);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[8], &mut rng);
        let fast = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
        let slow = conv3d_naive(&x, &w, Some(&b), &spec).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
        let fast32 = conv3d_forward(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), &spec).unwrap();
        let slow32 = conv3d_naive(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), &spec).unwrap();
        assert!(fast32.max_abs_diff(&slow32).unwrap() < 1e-5);
    }

    #[test]
    fn stride_two_halves_extents() {
        let spec = ConvSpec::new(1, 1, 3).padding(1).stride(2);
        assert_eq!(spec.output_extents([8, 6, 4]).unwrap(), [4, 3, 2]);
        let mut rng = SeededRng::new(5);
        let x = random(&[1, 1, 8, 6, 4], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let y = conv3d_naive(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 3, 2]);
        let fast = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert!(fast.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4, 4]);
        let bad_groups = ConvSpec::new(3, 4, 1).groups(2);
        assert!(matches!(
            conv3d_forward(&x, &Tensor::zeros(&[4, 1, 1, 1, 1]), None, &bad_groups),
            Err(Error::Shape(_))
        ));
        let too_big = ConvSpec::new(3, 3, 7);
        assert!(matches!(
            conv3d_forward(&x, &Tensor::zeros(&too_big.weight_shape()), None, &too_big),
            Err(Error::Shape(_))
        ));
        let spec = ConvSpec::new(3, 2, 1);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(conv3d_backward(&Tensor::zeros(&[1, 2, 4, 4, 3]), &x, &w, &spec).is_err());
    }

    #[test]
    fn backward_zero_grad_out() {
        let mut rng = SeededRng::new(9);
        let spec = ConvSpec::new(2, 2, 3).padding(1);
        let x = random(&[1, 2, 3, 3, 3], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let g = conv3d_backward(&Tensor::zeros(&[1, 2, 3, 3, 3]), &x, &w, &spec).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_w.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let spec = ConvSpec::new(1, 1, 1);
        let x = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.75f64]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![-0.5f64]).unwrap();
        let go = Tensor::new(vec![1, 1, 1, 1, 1], vec![3.0f64]).unwrap();
        let g = conv3d_backward(&go, &x, &w, &spec).unwrap();
        assert_eq!(g.grad_w.data(), &[3.0 * 1.75]);
        assert_eq!(g.grad_x.data(), &[3.0 * -0.5]);
        assert_eq!(g.grad_b.data(), &[3.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let spec = ConvSpec::new(4, 2, 3)
            .padding(1)
            .stride(2)
            .dilation(1)
            .groups(2);
        let x = random(&[2, 4, 3, 4, 3], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[2], &mut rng);
        let y = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
        let probe = random(y.shape(), &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv3d_forward(x, w, Some(b), &spec).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let g = conv3d_backward(&probe, &x, &w, &spec).unwrap();
        let h = 1e-4;
        let check = |analytic: &Tensor<f64>, which: usize| {
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for i in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                let (tp, tm) = match which {
                    0 => (xp.data_mut(), xm.data_mut()),
                    1 => (wp.data_mut(), wm.data_mut()),
                    _ => (bp.data_mut(), bm.data_mut()),
                };
                tp[i] += h;
                tm[i] -= h;
                let num = (loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * h);
                worst = worst.max((num - analytic.data()[i]).abs());
                scale = scale.max(num.abs()).max(analytic.data()[i].abs());
            }
            assert!(worst / scale <= 1e-4, "relative error {}", worst / scale);
        };
        check(&g.grad_x, 0);
        check(&g.grad_w, 1);
        check(&g.grad_b, 2);
    }
}
