use super::gemm::{gemm, Layout};
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Spatial padding for [`conv2d_forward`].
///
/// `Same` zero-pads so the output keeps the input's spatial size. Odd
/// kernels pad symmetrically; even kernels put the extra row/column on the
/// bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pt: usize,
    pub pl: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Self> {
        let [b, cin, h, w] = input.dims4("conv2d input")?;
        let [cout, kcin, kh, kw] = kernel.dims4("conv2d kernel")?;
        if kcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, kernel expects {kcin}")));
        }
        if let Some(bias) = bias {
            if bias.len() != cout {
                return Err(Error::shape(format!("conv2d: bias has {} entries for {cout} channels", bias.len())));
            }
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d: empty kernel"));
        }
        let (pt, pl, ho, wo) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} larger than input {h}x{w}")));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        Ok(ConvGeom { b, cin, h, w, cout, kh, kw, pt, pl, ho, wo })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.col_rows() * self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = oy as isize + ky as isize - self.pt as isize;
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - self.pl as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - self.pt as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = ox as isize + kx as isize - self.pl as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with per-output-channel bias.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let geom = ConvGeom::new(input, kernel, bias, padding)?;
    conv2d_with_cols(&geom, input, kernel, bias).map(|(out, _)| out)
}

/// Forward pass that also returns the im2col buffers, one per batch item.
pub(crate) fn conv2d_with_cols(
    g: &ConvGeom,
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Vec<f64>)> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut cols = vec![0.0; g.b * g.col_len()];
    let mut out = vec![0.0; g.b * out_len];
    for bi in 0..g.b {
        let col = &mut cols[bi * g.col_len()..(bi + 1) * g.col_len()];
        g.im2col(&input.data()[bi * in_len..(bi + 1) * in_len], col);
        let dst = &mut out[bi * out_len..(bi + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(g.ho * g.wo).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(
            kernel.data(),
            Layout::row_major(g.cout, g.col_rows()),
            col,
            Layout::row_major(g.col_rows(), g.ho * g.wo),
            1.0,
            dst,
            Layout::row_major(g.cout, g.ho * g.wo),
        );
    }
    ensure_finite(&out, "conv2d")?;
    Ok((Tensor::new(&[g.b, g.cout, g.ho, g.wo], out)?, cols))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let hw = g.ho * g.wo;
    let mut dx = need[0].then(|| vec![0.0; g.b * in_len]);
    let mut dk = need[1].then(|| vec![0.0; kernel.len()]);
    let mut db = need[2].then(|| vec![0.0; g.cout]);
    let mut dcols = if need[0] { vec![0.0; g.col_len()] } else { Vec::new() };
    for bi in 0..g.b {
        let go = &grad_out[bi * out_len..(bi + 1) * out_len];
        let col = &cols[bi * g.col_len()..(bi + 1) * g.col_len()];
        if let Some(dk) = dk.as_mut() {
            gemm(
                go,
                Layout::row_major(g.cout, hw),
                col,
                Layout::transposed(g.col_rows(), hw),
                1.0,
                dk,
                Layout::row_major(g.cout, g.col_rows()),
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(hw).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kernel,
                Layout::transposed(g.cout, g.col_rows()),
                go,
                Layout::row_major(g.cout, hw),
                0.0,
                &mut dcols,
                Layout::row_major(g.col_rows(), hw),
            );
            g.col2im(&dcols, &mut dx[bi * in_len..(bi + 1) * in_len]);
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct TconvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl TconvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::BadParam("transposed conv stride must be >= 1".into()));
        }
        let [b, cin, h, w] = input.dims4("transposed conv input")?;
        let [kcin, cout, kh, kw] = kernel.dims4("transposed conv kernel")?;
        if kcin != cin {
            return Err(Error::shape(format!("transposed conv: input has {cin} channels, kernel expects {kcin}")));
        }
        if let Some(bias) = bias {
            if bias.len() != cout {
                return Err(Error::shape(format!(
                    "transposed conv: bias has {} entries for {cout} channels",
                    bias.len()
                )));
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("transposed conv: empty input"));
        }
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;
        Ok(TconvGeom { b, cin, h, w, cout, kh, kw, stride, ho, wo })
    }

    fn row_len(&self) -> usize {
        self.cout * self.kh * self.kw
    }

    /// `(output offset, column offset in a patch row)` for each kernel row.
    fn for_each_patch_row(&self, p: usize, mut f: impl FnMut(usize, usize)) {
        let (py, px) = (p / self.w, p % self.w);
        for co in 0..self.cout {
            for ky in 0..self.kh {
                let oy = py * self.stride + ky;
                let out_off = (co * self.ho + oy) * self.wo + px * self.stride;
                let patch_off = (co * self.kh + ky) * self.kw;
                f(out_off, patch_off);
            }
        }
    }
}

/// Transposed convolution: every input value scatters a weighted copy of the
/// kernel into the (larger) output.
pub fn transposed_conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let g = TconvGeom::new(input, kernel, bias, stride)?;
    tconv_forward(&g, input, kernel, bias)
}

pub(crate) fn tconv_forward(g: &TconvGeom, input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let p = g.h * g.w;
    let in_len = g.cin * p;
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![0.0; g.b * out_len];
    let mut patches = vec![0.0; p * g.row_len()];
    for bi in 0..g.b {
        gemm(
            &input.data()[bi * in_len..(bi + 1) * in_len],
            Layout::transposed(g.cin, p),
            kernel.data(),
            Layout::row_major(g.cin, g.row_len()),
            0.0,
            &mut patches,
            Layout::row_major(p, g.row_len()),
        );
        let dst = &mut out[bi * out_len..(bi + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(g.ho * g.wo).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        for pi in 0..p {
            let row = &patches[pi * g.row_len()..(pi + 1) * g.row_len()];
            g.for_each_patch_row(pi, |o, k| {
                for (d, s) in dst[o..o + g.kw].iter_mut().zip(&row[k..k + g.kw]) {
                    *d += s;
                }
            });
        }
    }
    ensure_finite(&out, "transposed_conv2d")?;
    Tensor::new(&[g.b, g.cout, g.ho, g.wo], out)
}

pub(crate) fn tconv_backward(
    g: &TconvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let p = g.h * g.w;
    let in_len = g.cin * p;
    let out_len = g.cout * g.ho * g.wo;
    let mut dx = need[0].then(|| vec![0.0; g.b * in_len]);
    let mut dk = need[1].then(|| vec![0.0; kernel.len()]);
    let mut db = need[2].then(|| vec![0.0; g.cout]);
    let mut gathered = vec![0.0; p * g.row_len()];
    for bi in 0..g.b {
        let go = &grad_out[bi * out_len..(bi + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(g.ho * g.wo).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if dx.is_none() && dk.is_none() {
            continue;
        }
        for pi in 0..p {
            let row = &mut gathered[pi * g.row_len()..(pi + 1) * g.row_len()];
            g.for_each_patch_row(pi, |o, k| row[k..k + g.kw].copy_from_slice(&go[o..o + g.kw]));
        }
        if let Some(dk) = dk.as_mut() {
            gemm(
                &input[bi * in_len..(bi + 1) * in_len],
                Layout::row_major(g.cin, p),
                &gathered,
                Layout::row_major(p, g.row_len()),
                1.0,
                dk,
                Layout::row_major(g.cin, g.row_len()),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kernel,
                Layout::row_major(g.cin, g.row_len()),
                &gathered,
                Layout::transposed(p, g.row_len()),
                0.0,
                &mut dx[bi * in_len..(bi + 1) * in_len],
                Layout::row_major(g.cin, p),
            );
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}
