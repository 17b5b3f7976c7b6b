use crate::error::{GaitError, Result};
use crate::kernels::window_len;
use crate::real::Real;
use crate::tensor::Tensor;

/// Kernel, stride and zero padding along (T, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad,
        }
    }

    /// Stride 1 with `pad = floor(k / 2)`, which keeps odd-kernel extents.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvGeometry {
            kernel,
            stride: [1, 1, 1],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            window_len(input[0], self.kernel[0], self.stride[0], self.pad[0])?,
            window_len(input[1], self.kernel[1], self.stride[1], self.pad[1])?,
            window_len(input[2], self.kernel[2], self.stride[2], self.pad[2])?,
        ])
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

struct Layout {
    cin: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Layout {
    fn rows(&self) -> usize {
        self.cin * self.geom.taps()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }
}

/// Number of output lines (`(to, ho)` pairs) lowered at a time, sized so a
/// column block stays in cache.
fn lines_per_block(l: &Layout) -> usize {
    const TARGET: usize = 64 * 1024;
    let per_line = l.rows() * l.output[2];
    (TARGET / per_line.max(1)).max(1)
}

/// Output line ranges processed as one block. With `active` only lines whose
/// output row is marked active are visited.
fn line_blocks(l: &Layout, active: Option<&[bool]>) -> Vec<std::ops::Range<usize>> {
    let block = lines_per_block(l);
    let [t_out, h_out, _] = l.output;
    let runs: Vec<std::ops::Range<usize>> = match active {
        None => vec![0..t_out * h_out],
        Some(rows) => {
            let mut runs = Vec::new();
            for to in 0..t_out {
                let mut ho = 0;
                while ho < h_out {
                    if !rows[ho] {
                        ho += 1;
                        continue;
                    }
                    let first = ho;
                    while ho < h_out && rows[ho] {
                        ho += 1;
                    }
                    runs.push(to * h_out + first..to * h_out + ho);
                }
            }
            runs
        }
    };
    runs.into_iter()
        .flat_map(|r| (r.start..r.end).step_by(block).map(move |s| s..(s + block).min(r.end)))
        .collect()
}

/// Output rows of a convolution that read at least one input row marked in
/// `nonzero_rows`.
pub fn rows_reached(nonzero_rows: &[bool], geom: &ConvGeometry, h_out: usize) -> Vec<bool> {
    let (kh, sh, ph) = (geom.kernel[1], geom.stride[1], geom.pad[1]);
    (0..h_out)
        .map(|ho| {
            (0..kh).any(|dh| {
                let hi = (ho * sh + dh) as isize - ph as isize;
                hi >= 0 && (hi as usize) < nonzero_rows.len() && nonzero_rows[hi as usize]
            })
        })
        .collect()
}

/// Lowers output lines `lines` of one sample `[Cin, T, H, W]` into a
/// `[Cin*kt*kh*kw, lines.len()*Wo]` matrix.
fn im2col<F: Real>(x: &[F], l: &Layout, lines: std::ops::Range<usize>, col: &mut [F]) {
    let [t_in, h_in, w_in] = l.input;
    let [_, h_out, w_out] = l.output;
    let [kt, kh, kw] = l.geom.kernel;
    let [st, sh, sw] = l.geom.stride;
    let [pt, ph, pw] = l.geom.pad;
    let ncols = lines.len() * w_out;
    let mut row = 0;
    for ci in 0..l.cin {
        let xc = &x[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = valid_range(w_out, w_in, sw, pw, dw);
                    for (o, line_i) in lines.clone().enumerate() {
                        let (to, ho) = (line_i / h_out, line_i % h_out);
                        let ti = (to * st + dt) as isize - pt as isize;
                        let hi_ = (ho * sh + dh) as isize - ph as isize;
                        let line = &mut dst[o * w_out..(o + 1) * w_out];
                        if ti < 0 || ti >= t_in as isize || hi_ < 0 || hi_ >= h_in as isize {
                            line.fill(F::zero());
                            continue;
                        }
                        let src = &xc[(ti as usize * h_in + hi_ as usize) * w_in..][..w_in];
                        line[..lo].fill(F::zero());
                        line[hi..].fill(F::zero());
                        if sw == 1 {
                            let start = lo + dw - pw;
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (wo, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = src[wo * sw + dw - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column block back into `[Cin, T, H, W]`.
fn col2im<F: Real>(col: &[F], l: &Layout, lines: std::ops::Range<usize>, dx: &mut [F]) {
    let [t_in, h_in, w_in] = l.input;
    let [_, h_out, w_out] = l.output;
    let [kt, kh, kw] = l.geom.kernel;
    let [st, sh, sw] = l.geom.stride;
    let [pt, ph, pw] = l.geom.pad;
    let ncols = lines.len() * w_out;
    let mut row = 0;
    for ci in 0..l.cin {
        let xc = &mut dx[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let srcrow = &col[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = valid_range(w_out, w_in, sw, pw, dw);
                    for (o, line_i) in lines.clone().enumerate() {
                        let (to, ho) = (line_i / h_out, line_i % h_out);
                        let ti = (to * st + dt) as isize - pt as isize;
                        let hi_ = (ho * sh + dh) as isize - ph as isize;
                        if ti < 0 || ti >= t_in as isize || hi_ < 0 || hi_ >= h_in as isize {
                            continue;
                        }
                        let line = &srcrow[o * w_out..(o + 1) * w_out];
                        let dst = &mut xc[(ti as usize * h_in + hi_ as usize) * w_in..][..w_in];
                        if sw == 1 {
                            let start = lo + dw - pw;
                            for (d, v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d = *d + *v;
                            }
                        } else {
                            for wo in lo..hi {
                                let wi = wo * sw + dw - pw;
                                dst[wi] = dst[wi] + line[wo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Range `[lo, hi)` of output columns whose input column `wo*s + d - p`
/// lies inside `[0, w_in)`.
fn valid_range(w_out: usize, w_in: usize, s: usize, p: usize, d: usize) -> (usize, usize) {
    let lo = if d >= p { 0 } else { (p - d).div_ceil(s) };
    // wo*s + d - p <= w_in - 1  <=>  wo <= (w_in - 1 + p - d) / s
    let hi = if w_in + p < d + 1 {
        0
    } else {
        ((w_in - 1 + p - d) / s + 1).min(w_out)
    };
    (lo.min(hi), hi)
}

fn check_shapes<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: &ConvGeometry,
) -> Result<(Layout, usize, usize)> {
    let [n, cin, t, h, wd] = x.dims5("conv3d")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[1] != cin {
        return Err(GaitError::dim(
            "conv3d",
            format!(
                "weight shape {:?} does not match input shape {:?} (channel axis 1)",
                ws,
                x.shape()
            ),
        ));
    }
    if [ws[2], ws[3], ws[4]] != geom.kernel {
        return Err(GaitError::dim(
            "conv3d",
            format!("weight shape {:?} disagrees with kernel {:?}", ws, geom.kernel),
        ));
    }
    let cout = ws[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(GaitError::dim(
                "conv3d",
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
    }
    let output = geom.output_extents([t, h, wd]).ok_or_else(|| {
        GaitError::dim(
            "conv3d",
            format!(
                "kernel {:?} / stride {:?} / pad {:?} do not fit input {:?}",
                geom.kernel,
                geom.stride,
                geom.pad,
                x.shape()
            ),
        )
    })?;
    Ok((
        Layout {
            cin,
            input: [t, h, wd],
            output,
            geom: *geom,
        },
        n,
        cout,
    ))
}

/// 3D cross-correlation (no kernel flip) with zero padding.
pub fn conv3d<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: &ConvGeometry,
) -> Result<Tensor<F>> {
    conv3d_impl(x, w, bias, geom, None)
}

/// [`conv3d`] restricted to the output rows marked in `active_rows`; the
/// others are left at zero (plus bias). Exact when every skipped row only
/// reads input rows that are zero.
pub fn conv3d_rows<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: &ConvGeometry,
    active_rows: &[bool],
) -> Result<Tensor<F>> {
    conv3d_impl(x, w, bias, geom, Some(active_rows))
}

fn check_rows(l: &Layout, active: Option<&[bool]>) -> Result<()> {
    match active {
        Some(rows) if rows.len() != l.output[1] => Err(GaitError::dim(
            "conv3d",
            format!("{} active-row flags for {} output rows", rows.len(), l.output[1]),
        )),
        _ => Ok(()),
    }
}

fn conv3d_impl<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: &ConvGeometry,
    active: Option<&[bool]>,
) -> Result<Tensor<F>> {
    let (l, n, cout) = check_shapes(x, w, bias, geom)?;
    check_rows(&l, active)?;
    let (k, ncols) = (l.rows(), l.cols());
    let in_len = l.cin * l.input.iter().product::<usize>();
    let mut out = vec![F::zero(); n * cout * ncols];
    let w_out = l.output[2];
    let blocks = line_blocks(&l, active);
    let widest = blocks.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut col = vec![F::zero(); k * widest * w_out];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
        for lines in &blocks {
            let bc = lines.len() * w_out;
            let c0 = lines.start * w_out;
            im2col(xb, &l, lines.clone(), &mut col[..k * bc]);
            F::gemm(cout, k, bc, F::one(), w.data(), k, 1, &col, bc, 1, F::zero(), &mut y[c0..], ncols, 1);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut y[co * ncols..(co + 1) * ncols] {
                    *v = *v + bv;
                }
            }
        }
    }
    let [to, ho, wo] = l.output;
    Tensor::from_vec(&[n, cout, to, ho, wo], out)
}

pub struct Conv3dGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Tensor<F>,
    pub db: Option<Tensor<F>>,
}

pub fn conv3d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    geom: &ConvGeometry,
    dy: &Tensor<F>,
    need_dx: bool,
) -> Result<Conv3dGrads<F>> {
    conv3d_backward_impl(x, w, has_bias, geom, dy, need_dx, None)
}

/// Backward of [`conv3d_rows`]. `dw` and `db` are exact. `dx` misses the
/// share of skipped rows, so it is exact only on input rows no skipped row
/// reads; callers that zero those rows (masking) lose nothing.
pub fn conv3d_rows_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    geom: &ConvGeometry,
    dy: &Tensor<F>,
    need_dx: bool,
    active_rows: &[bool],
) -> Result<Conv3dGrads<F>> {
    conv3d_backward_impl(x, w, has_bias, geom, dy, need_dx, Some(active_rows))
}

fn conv3d_backward_impl<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    geom: &ConvGeometry,
    dy: &Tensor<F>,
    need_dx: bool,
    active: Option<&[bool]>,
) -> Result<Conv3dGrads<F>> {
    let (l, n, cout) = check_shapes(x, w, None, geom)?;
    check_rows(&l, active)?;
    let (k, ncols) = (l.rows(), l.cols());
    let in_len = l.cin * l.input.iter().product::<usize>();
    if dy.len() != n * cout * ncols {
        return Err(GaitError::dim(
            "conv3d_backward",
            format!("upstream gradient shape {:?}", dy.shape()),
        ));
    }
    let mut dw = vec![F::zero(); cout * k];
    let mut db = has_bias.then(|| vec![F::zero(); cout]);
    let mut dx = need_dx.then(|| vec![F::zero(); x.len()]);
    let w_out = l.output[2];
    let blocks = line_blocks(&l, active);
    let cap = k * blocks.iter().map(|r| r.len()).max().unwrap_or(0) * w_out;
    let mut col = vec![F::zero(); cap];
    let mut dcol = if need_dx { vec![F::zero(); cap] } else { Vec::new() };
    for b in 0..n {
        let g = &dy.data()[b * cout * ncols..(b + 1) * cout * ncols];
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        for lines in &blocks {
            let bc = lines.len() * w_out;
            let gb = &g[lines.start * w_out..];
            im2col(xb, &l, lines.clone(), &mut col[..k * bc]);
            // dW[co, r] += sum_l g[co, l] * col[r, l]
            F::gemm(cout, bc, k, F::one(), gb, ncols, 1, &col, 1, bc, F::one(), &mut dw, k, 1);
            if let Some(dx) = dx.as_mut() {
                // dcol[r, l] = sum_co w[co, r] * g[co, l]
                F::gemm(k, cout, bc, F::one(), w.data(), 1, k, gb, ncols, 1, F::zero(), &mut dcol, bc, 1);
                col2im(&dcol[..k * bc], &l, lines.clone(), &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc = *acc + g[co * ncols..(co + 1) * ncols].iter().copied().sum::<F>();
            }
        }
    }
    Ok(Conv3dGrads {
        dx: dx.map(|v| Tensor::from_vec(x.shape(), v)).transpose()?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: db.map(|v| Tensor::from_vec(&[cout], v)).transpose()?,
    })
}
