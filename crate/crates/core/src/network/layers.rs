//! Convolution layers with explicit backward passes, implemented as
//! im2col + GEMM. Tensors are flat channel-major buffers.

use crate::error::{BmnError, Result};
use crate::real::{gemm, relu, MatMut, MatRef, Real};

/// Gradients of a linear layer's inputs and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<S> {
    pub dx: Vec<S>,
    pub dw: Vec<S>,
    pub db: Vec<S>,
}

fn add_bias<S: Real>(y: &mut [S], bias: &[S], cols: usize) {
    for (row, &b) in y.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn row_sums<S: Real>(dy: &[S], cols: usize) -> Vec<S> {
    dy.chunks_exact(cols).map(|r| r.iter().copied().sum()).collect()
}

fn check_len<S>(what: &str, v: &[S], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(BmnError::Shape(format!("{what}: {} values, expected {want}", v.len())));
    }
    Ok(())
}

/// Stride-1 temporal convolution (cross-correlation) with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel
    }

    pub fn out_len(&self, t: usize) -> usize {
        t + 2 * self.pad + 1 - self.kernel
    }

    fn im2col<S: Real>(&self, x: &[S], t: usize) -> Vec<S> {
        let t_out = self.out_len(t);
        let mut cols = vec![S::zero(); self.c_in * self.kernel * t_out];
        for c in 0..self.c_in {
            let xr = &x[c * t..(c + 1) * t];
            for k in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + k) * t_out..][..t_out];
                for (p, v) in row.iter_mut().enumerate() {
                    let src = p + k;
                    if src >= self.pad && src - self.pad < t {
                        *v = xr[src - self.pad];
                    }
                }
            }
        }
        cols
    }

    /// Returns the output (`c_out × t_out`) and the im2col buffer needed by
    /// [`Conv1d::backward`].
    pub fn forward<S: Real>(&self, x: &[S], t: usize, w: &[S], b: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        check_len("conv1d input", x, self.c_in * t)?;
        check_len("conv1d weight", w, self.weight_len())?;
        check_len("conv1d bias", b, self.c_out)?;
        let t_out = self.out_len(t);
        let cols = self.im2col(x, t);
        let mut y = vec![S::zero(); self.c_out * t_out];
        let kdim = self.c_in * self.kernel;
        gemm(
            S::one(),
            MatRef::row_major(w, self.c_out, kdim),
            MatRef::row_major(&cols, kdim, t_out),
            S::zero(),
            MatMut::row_major(&mut y, self.c_out, t_out),
        );
        add_bias(&mut y, b, t_out);
        Ok((y, cols))
    }

    pub fn backward<S: Real>(&self, dy: &[S], cols: &[S], w: &[S], t: usize) -> Result<LayerGrads<S>> {
        let t_out = self.out_len(t);
        check_len("conv1d output gradient", dy, self.c_out * t_out)?;
        let kdim = self.c_in * self.kernel;
        check_len("conv1d cached columns", cols, kdim * t_out)?;
        let mut dw = vec![S::zero(); self.weight_len()];
        gemm(
            S::one(),
            MatRef::row_major(dy, self.c_out, t_out),
            MatRef::row_major(cols, kdim, t_out).t(),
            S::zero(),
            MatMut::row_major(&mut dw, self.c_out, kdim),
        );
        let mut dcols = vec![S::zero(); kdim * t_out];
        gemm(
            S::one(),
            MatRef::row_major(w, self.c_out, kdim).t(),
            MatRef::row_major(dy, self.c_out, t_out),
            S::zero(),
            MatMut::row_major(&mut dcols, kdim, t_out),
        );
        let mut dx = vec![S::zero(); self.c_in * t];
        for c in 0..self.c_in {
            for k in 0..self.kernel {
                let row = &dcols[(c * self.kernel + k) * t_out..][..t_out];
                for (p, &g) in row.iter().enumerate() {
                    let src = p + k;
                    if src >= self.pad && src - self.pad < t {
                        dx[c * t + src - self.pad] += g;
                    }
                }
            }
        }
        Ok(LayerGrads {
            dx,
            dw,
            db: row_sums(dy, t_out),
        })
    }
}

/// Stride-1 2-D convolution over a `height × width` grid, zero padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2d {
    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            kh: 1,
            kw: 1,
            pad_h: 0,
            pad_w: 0,
        }
    }

    pub fn same3x3(c_in: usize, c_out: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            kh: 3,
            kw: 3,
            pad_h: 1,
            pad_w: 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad_h + 1 - self.kh, w + 2 * self.pad_w + 1 - self.kw)
    }

    /// Visits every `(column row, output pixel, input pixel)` triple of the
    /// im2col matrix whose source lies inside the grid.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_dims(h, w);
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    for y in 0..ho {
                        let sy = y + ky;
                        if sy < self.pad_h || sy - self.pad_h >= h {
                            continue;
                        }
                        for xo in 0..wo {
                            let sx = xo + kx;
                            if sx < self.pad_w || sx - self.pad_w >= w {
                                continue;
                            }
                            let src = (c * h + sy - self.pad_h) * w + sx - self.pad_w;
                            f(r, y * wo + xo, src);
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Real>(
        &self,
        x: &[S],
        h: usize,
        w: usize,
        weight: &[S],
        bias: &[S],
    ) -> Result<(Vec<S>, Vec<S>)> {
        check_len("conv2d input", x, self.c_in * h * w)?;
        check_len("conv2d weight", weight, self.weight_len())?;
        check_len("conv2d bias", bias, self.c_out)?;
        let (ho, wo) = self.out_dims(h, w);
        let pix = ho * wo;
        let kdim = self.c_in * self.kh * self.kw;
        let mut cols = vec![S::zero(); kdim * pix];
        self.for_each_tap(h, w, |r, p, src| cols[r * pix + p] = x[src]);
        let mut y = vec![S::zero(); self.c_out * pix];
        gemm(
            S::one(),
            MatRef::row_major(weight, self.c_out, kdim),
            MatRef::row_major(&cols, kdim, pix),
            S::zero(),
            MatMut::row_major(&mut y, self.c_out, pix),
        );
        add_bias(&mut y, bias, pix);
        Ok((y, cols))
    }

    pub fn backward<S: Real>(
        &self,
        dy: &[S],
        cols: &[S],
        weight: &[S],
        h: usize,
        w: usize,
    ) -> Result<LayerGrads<S>> {
        let (ho, wo) = self.out_dims(h, w);
        let pix = ho * wo;
        let kdim = self.c_in * self.kh * self.kw;
        check_len("conv2d output gradient", dy, self.c_out * pix)?;
        check_len("conv2d cached columns", cols, kdim * pix)?;
        let mut dw = vec![S::zero(); self.weight_len()];
        gemm(
            S::one(),
            MatRef::row_major(dy, self.c_out, pix),
            MatRef::row_major(cols, kdim, pix).t(),
            S::zero(),
            MatMut::row_major(&mut dw, self.c_out, kdim),
        );
        let mut dcols = vec![S::zero(); kdim * pix];
        gemm(
            S::one(),
            MatRef::row_major(weight, self.c_out, kdim).t(),
            MatRef::row_major(dy, self.c_out, pix),
            S::zero(),
            MatMut::row_major(&mut dcols, kdim, pix),
        );
        let mut dx = vec![S::zero(); self.c_in * h * w];
        self.for_each_tap(h, w, |r, p, src| dx[src] += dcols[r * pix + p]);
        Ok(LayerGrads {
            dx,
            dw,
            db: row_sums(dy, pix),
        })
    }
}

/// 3-D convolution whose kernel spans the whole sample axis of a BM feature
/// map (`c_in × n × cells`), collapsing it; followed by ReLU. Output is
/// `c_out × cells`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleReduce {
    pub c_in: usize,
    pub n: usize,
    pub c_out: usize,
}

impl SampleReduce {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.n
    }

    pub fn forward<S: Real>(&self, mf: &[S], cells: usize, w: &[S], b: &[S]) -> Result<Vec<S>> {
        let kdim = self.c_in * self.n;
        if mf.len() != kdim * cells {
            return Err(BmnError::Shape(format!(
                "BM feature map has {} values, expected {}×{}×{cells}",
                mf.len(),
                self.c_in,
                self.n
            )));
        }
        check_len("conv3d weight", w, self.weight_len())?;
        check_len("conv3d bias", b, self.c_out)?;
        let mut y = vec![S::zero(); self.c_out * cells];
        gemm(
            S::one(),
            MatRef::row_major(w, self.c_out, kdim),
            MatRef::row_major(mf, kdim, cells),
            S::zero(),
            MatMut::row_major(&mut y, self.c_out, cells),
        );
        add_bias(&mut y, b, cells);
        y.iter_mut().for_each(|v| *v = relu(*v));
        Ok(y)
    }

    /// `y` is the (post-ReLU) forward output.
    pub fn backward<S: Real>(&self, dy: &[S], y: &[S], mf: &[S], cells: usize, w: &[S]) -> Result<LayerGrads<S>> {
        let kdim = self.c_in * self.n;
        check_len("conv3d output gradient", dy, self.c_out * cells)?;
        check_len("conv3d output", y, self.c_out * cells)?;
        check_len("conv3d input", mf, kdim * cells)?;
        let dz: Vec<S> = dy
            .iter()
            .zip(y)
            .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
            .collect();
        let mut dw = vec![S::zero(); self.weight_len()];
        gemm(
            S::one(),
            MatRef::row_major(&dz, self.c_out, cells),
            MatRef::row_major(mf, kdim, cells).t(),
            S::zero(),
            MatMut::row_major(&mut dw, self.c_out, kdim),
        );
        let mut dx = vec![S::zero(); kdim * cells];
        gemm(
            S::one(),
            MatRef::row_major(w, self.c_out, kdim).t(),
            MatRef::row_major(&dz, self.c_out, cells),
            S::zero(),
            MatMut::row_major(&mut dx, kdim, cells),
        );
        Ok(LayerGrads {
            dx,
            dw,
            db: row_sums(&dz, cells),
        })
    }
}
