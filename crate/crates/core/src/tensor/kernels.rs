//! Raw numeric kernels shared by the tape and the untracked forward paths.
//!
//! All buffers are row-major. Shapes are validated by the callers; the
//! kernels only assert buffer lengths.

/// Geometry of a 2-D convolution over `[batch, in_ch, height, width]` inputs
/// with `[out_ch, in_ch, kernel_h, kernel_w]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_ch * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel_h * self.kernel_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_ch * self.out_height() * self.out_width()
    }
}

/// One matrix operand: a buffer plus its logical `rows x cols` layout.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Read the buffer as the transpose of a `cols x rows` row-major matrix.
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View a row-major `cols x rows` buffer as its `rows x cols` transpose.
    pub fn transpose_of(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b`, with `out` a row-major `a.rows x b.cols` buffer.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs length");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs length");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output length");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the assertions above guarantee every index reached through
    // these strides lies inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[b, o] = sum_i x[b, i] * w[o, i]`.
pub fn dense_forward(x: &[f64], w: &[f64], batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    gemm(
        MatRef::new(x, batch, inp),
        MatRef::transpose_of(w, inp, out),
        0.0,
        &mut y,
    );
    y
}

/// Accumulates `dx += dy * w`.
pub fn dense_backward_input(
    dy: &[f64],
    w: &[f64],
    batch: usize,
    inp: usize,
    out: usize,
    dx: &mut [f64],
) {
    gemm(MatRef::new(dy, batch, out), MatRef::new(w, out, inp), 1.0, dx);
}

/// Accumulates `dw += dy^T * x`.
pub fn dense_backward_weight(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    inp: usize,
    out: usize,
    dw: &mut [f64],
) {
    gemm(
        MatRef::transpose_of(dy, out, batch),
        MatRef::new(x, batch, inp),
        1.0,
        dw,
    );
}

/// Direct 2-D convolution (cross-correlation, zero padding).
pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(w.len(), g.weight_len());
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let mut y = vec![0.0; g.output_len()];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let y_off = (b * g.out_ch + o) * oh_n * ow_n;
            let y_plane = &mut y[y_off..y_off + oh_n * ow_n];
            for c in 0..g.in_ch {
                let x_plane = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let wv = w[((o * g.in_ch + c) * g.kernel_h + kh) * g.kernel_w + kw];
                        for oh in 0..oh_n {
                            let Some(ih) = tap_index(oh, kh, g.stride, g.padding, g.height) else {
                                continue;
                            };
                            let x_row = &x_plane[ih * g.width..(ih + 1) * g.width];
                            let y_row = &mut y_plane[oh * ow_n..(oh + 1) * ow_n];
                            for (ow, yv) in y_row.iter_mut().enumerate() {
                                if let Some(iw) = tap_index(ow, kw, g.stride, g.padding, g.width) {
                                    *yv += wv * x_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input and/or weight gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    assert_eq!(dy.len(), g.output_len());
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let dy_plane = &dy[(b * g.out_ch + o) * oh_n * ow_n..][..oh_n * ow_n];
            for c in 0..g.in_ch {
                let plane = (b * g.in_ch + c) * g.height * g.width;
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let widx = ((o * g.in_ch + c) * g.kernel_h + kh) * g.kernel_w + kw;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oh in 0..oh_n {
                            let Some(ih) = tap_index(oh, kh, g.stride, g.padding, g.height) else {
                                continue;
                            };
                            for ow in 0..ow_n {
                                let Some(iw) = tap_index(ow, kw, g.stride, g.padding, g.width)
                                else {
                                    continue;
                                };
                                let d = dy_plane[oh * ow_n + ow];
                                let xi = plane + ih * g.width + iw;
                                acc += d * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += d * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn tap_index(out_pos: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let pos = out_pos * stride + k;
    if pos < padding || pos - padding >= extent {
        None
    } else {
        Some(pos - padding)
    }
}

/// Extents around the channel axis: `(outer, channels, inner)`.
///
/// Rank-1 tensors are treated as a single sample whose only axis is the
/// channel axis; otherwise axis 1 is the channel axis.
pub fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - lse).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh_n, ow_n) = (g.out_height(), g.out_width());
        let mut y = vec![0.0; g.output_len()];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let mut s = 0.0;
                        for c in 0..g.in_ch {
                            for kh in 0..g.kernel_h {
                                for kw in 0..g.kernel_w {
                                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                                    let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                        continue;
                                    }
                                    let xi = ((b * g.in_ch + c) * g.height + ih as usize) * g.width
                                        + iw as usize;
                                    let wi = ((o * g.in_ch + c) * g.kernel_h + kh) * g.kernel_w + kw;
                                    s += x[xi] * w[wi];
                                }
                            }
                        }
                        y[((b * g.out_ch + o) * oh_n + oh) * ow_n + ow] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_definition() {
        let g = ConvGeometry {
            batch: 2,
            in_ch: 3,
            height: 5,
            width: 6,
            out_ch: 4,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..g.input_len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let fast = conv2d_forward(&x, &w, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(MatRef::transpose_of(&a, 2, 2), MatRef::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }
}
