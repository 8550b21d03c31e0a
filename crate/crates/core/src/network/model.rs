//! The boundary-matching network: shared base, temporal evaluation head and
//! proposal evaluation head, with a hand-written backward pass.
//!
//! The proposal head is evaluated in fused form. The sample-axis convolution
//! is linear in the BM feature map, and the BM feature map is linear in the
//! base features, so the convolution weights are applied to the base
//! features first (one GEMM per sample index) and the result is gathered
//! through the sparse mask. Only cells that can influence a valid output are
//! computed: valid cells for the last two 2-D layers, valid cells plus their
//! 3×3 neighbourhood for the first two. [`Bmn::forward_dense`] evaluates the
//! same function layer by layer and serves as the reference.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bm::{bm_forward, dense_taps, SampleMask};
use crate::error::{BmnError, Result};
use crate::network::layers::{Conv1d, Conv2d, SampleReduce};
use crate::real::{gemm, relu, sigmoid, MatMut, MatRef, Real};

/// Geometry and layer widths of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmnShape {
    pub in_channels: usize,
    /// Observation window length `T`.
    pub window: usize,
    /// Maximum proposal duration `D`.
    pub max_duration: usize,
    /// Sample points per proposal `N`.
    pub num_samples: usize,
    pub expand: f64,
    pub base_hidden: usize,
    pub base_out: usize,
    pub tem_hidden: usize,
    pub pem_hidden_3d: usize,
    pub pem_hidden_2d: usize,
}

impl BmnShape {
    /// Full-width architecture.
    pub fn standard(in_channels: usize, window: usize, max_duration: usize) -> Self {
        BmnShape {
            in_channels,
            window,
            max_duration,
            num_samples: 32,
            expand: 0.25,
            base_hidden: 256,
            base_out: 128,
            tem_hidden: 256,
            pem_hidden_3d: 512,
            pem_hidden_2d: 128,
        }
    }

    /// Narrow network on a 16×8 grid for finite-difference checks.
    pub fn scaled_down(in_channels: usize) -> Self {
        BmnShape {
            in_channels,
            window: 16,
            max_duration: 8,
            num_samples: 32,
            expand: 0.25,
            base_hidden: 8,
            base_out: 4,
            tem_hidden: 8,
            pem_hidden_3d: 16,
            pem_hidden_2d: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.in_channels,
            self.base_hidden,
            self.base_out,
            self.tem_hidden,
            self.pem_hidden_3d,
            self.pem_hidden_2d,
        ];
        if widths.contains(&0) {
            return Err(BmnError::Config("layer widths must be positive".into()));
        }
        if self.max_duration == 0 || self.max_duration > self.window {
            return Err(BmnError::Config(format!(
                "max duration D={} must satisfy 1 ≤ D ≤ window {}",
                self.max_duration, self.window
            )));
        }
        if self.num_samples < 2 {
            return Err(BmnError::Config("need at least 2 sample points".into()));
        }
        Ok(())
    }

    pub fn weight_dims(&self, layer: Layer) -> Vec<usize> {
        match layer {
            Layer::Conv1d1 => vec![self.base_hidden, self.in_channels, 3],
            Layer::Conv1d2 => vec![self.base_out, self.base_hidden, 3],
            Layer::Conv1d3 => vec![self.tem_hidden, self.base_out, 3],
            Layer::Conv1d4 => vec![2, self.tem_hidden, 3],
            Layer::Conv3d1 => vec![self.pem_hidden_3d, self.base_out, self.num_samples, 1, 1],
            Layer::Conv2d1 => vec![self.pem_hidden_2d, self.pem_hidden_3d, 1, 1],
            Layer::Conv2d2 => vec![self.pem_hidden_2d, self.pem_hidden_2d, 3, 3],
            Layer::Conv2d3 => vec![2, self.pem_hidden_2d, 1, 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv1d1,
    Conv1d2,
    Conv1d3,
    Conv1d4,
    Conv3d1,
    Conv2d1,
    Conv2d2,
    Conv2d3,
}

impl Layer {
    pub const ALL: [Layer; 8] = [
        Layer::Conv1d1,
        Layer::Conv1d2,
        Layer::Conv1d3,
        Layer::Conv1d4,
        Layer::Conv3d1,
        Layer::Conv2d1,
        Layer::Conv2d2,
        Layer::Conv2d3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv1d1 => "conv1d_1",
            Layer::Conv1d2 => "conv1d_2",
            Layer::Conv1d3 => "conv1d_3",
            Layer::Conv1d4 => "conv1d_4",
            Layer::Conv3d1 => "conv3d_1",
            Layer::Conv2d1 => "conv2d_1",
            Layer::Conv2d2 => "conv2d_2",
            Layer::Conv2d3 => "conv2d_3",
        }
    }

    fn position(self) -> usize {
        Layer::ALL.iter().position(|&l| l == self).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<S>,
    /// Included in the L2 penalty (weights yes, biases no).
    pub decay: bool,
}

/// Every learnable tensor, ordered `[w, b]` per layer in [`Layer::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Real> ModelParams<S> {
    pub fn zeros(shape: &BmnShape) -> Self {
        let mut tensors = Vec::with_capacity(16);
        for layer in Layer::ALL {
            let dims = shape.weight_dims(layer);
            let out = dims[0];
            tensors.push(Tensor {
                name: format!("{}.weight", layer.name()),
                data: vec![S::zero(); dims.iter().product()],
                dims,
                decay: true,
            });
            tensors.push(Tensor {
                name: format!("{}.bias", layer.name()),
                dims: vec![out],
                data: vec![S::zero(); out],
                decay: false,
            });
        }
        ModelParams { tensors }
    }

    /// Uniform in `±√(1/fan_in)` for weights and biases alike.
    pub fn init(shape: &BmnShape, seed: u64) -> Self {
        let mut params = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pair in params.tensors.chunks_exact_mut(2) {
            let fan_in: usize = pair[0].dims[1..].iter().product();
            let bound = (1.0 / fan_in as f64).sqrt();
            for t in pair.iter_mut() {
                t.data
                    .iter_mut()
                    .for_each(|v| *v = S::of(rng.random_range(-bound..bound)));
            }
        }
        params
    }

    pub fn weight(&self, layer: Layer) -> &[S] {
        &self.tensors[2 * layer.position()].data
    }

    pub fn bias(&self, layer: Layer) -> &[S] {
        &self.tensors[2 * layer.position() + 1].data
    }

    pub fn weight_mut(&mut self, layer: Layer) -> &mut Vec<S> {
        &mut self.tensors[2 * layer.position()].data
    }

    pub fn bias_mut(&mut self, layer: Layer) -> &mut Vec<S> {
        &mut self.tensors[2 * layer.position() + 1].data
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// `½ Σ w²` over weight tensors.
    pub fn l2(&self) -> f64 {
        0.5 * self
            .tensors
            .iter()
            .filter(|t| t.decay)
            .flat_map(|t| &t.data)
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| T::of(v.as_f64())).collect(),
                    decay: t.decay,
                })
                .collect(),
        }
    }

    /// `self += k · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams<S>, k: S) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += k * y);
        }
    }

    pub fn check_shape(&self, shape: &BmnShape) -> Result<()> {
        let want = ModelParams::<S>::zeros(shape);
        if want.tensors.len() != self.tensors.len() {
            return Err(BmnError::Shape(format!(
                "expected {} tensors, found {}",
                want.tensors.len(),
                self.tensors.len()
            )));
        }
        for (w, h) in want.tensors.iter().zip(&self.tensors) {
            if w.name != h.name || w.dims != h.dims || h.data.len() != w.data.len() {
                return Err(BmnError::Shape(format!(
                    "tensor {} has dims {:?}, model expects {} {:?}",
                    h.name, h.dims, w.name, w.dims
                )));
            }
        }
        Ok(())
    }
}

/// Network outputs for one window. Maps are `D × T`, zero on invalid cells.
#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub p_start: Vec<S>,
    pub p_end: Vec<S>,
    pub m_cc: Vec<S>,
    pub m_cr: Vec<S>,
    cache: Cache<S>,
}

#[derive(Clone, Debug)]
struct Cache<S> {
    cols1: Vec<S>,
    a1: Vec<S>,
    cols2: Vec<S>,
    base: Vec<S>,
    cols3: Vec<S>,
    a3: Vec<S>,
    cols4: Vec<S>,
    /// `conv3d_1` weights as `[tile][n][o][c]`
    w3: Vec<S>,
    /// `R × O3`, post-ReLU
    h3: Vec<S>,
    /// `O2 × R`, post-ReLU
    h4: Vec<S>,
    /// `9·O2 × V`
    cols5: Vec<S>,
    /// `O2 × V`, post-ReLU
    h5: Vec<S>,
}

/// Loss gradients with respect to the four network outputs (probabilities).
#[derive(Clone, Debug)]
pub struct OutputGrads<S> {
    pub d_start: Vec<S>,
    pub d_end: Vec<S>,
    pub d_cc: Vec<S>,
    pub d_cr: Vec<S>,
}

/// A run of cells `j0..j0+len` in row `i`, stored from `offset` in a cell list.
#[derive(Clone, Copy, Debug)]
struct Span {
    i: usize,
    j0: usize,
    len: usize,
    offset: usize,
}

/// Groups a row-major sorted cell list into per-row contiguous runs.
fn row_spans(cells: &[usize], t: usize) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    for (k, &cell) in cells.iter().enumerate() {
        let (i, j) = (cell / t, cell % t);
        match spans.last_mut() {
            Some(s) if s.i == i && s.j0 + s.len == j => s.len += 1,
            _ => spans.push(Span {
                i,
                j0: j,
                len: 1,
                offset: k,
            }),
        }
    }
    spans
}

/// Index range of `jj in 0..len` for which `j0 + jj + dx` lies in `[0, t)`,
/// and the source column of `jj = 0`.
fn shifted_range(j0: usize, len: usize, dx: isize, t: usize) -> (usize, usize, isize) {
    let first = j0 as isize + dx;
    let lo = (-first).max(0) as usize;
    let hi = ((t as isize - first).max(0) as usize).min(len);
    (lo, hi.max(lo), first)
}

pub struct Bmn<S> {
    shape: BmnShape,
    mask: Arc<SampleMask>,
    conv1d: [Conv1d; 4],
    /// Cells whose first two PEM activations are needed: valid cells and
    /// their 3×3 neighbourhood.
    ring: Vec<usize>,
    /// Cells with a valid proposal.
    valid: Vec<usize>,
    valid_spans: Vec<Span>,
    /// `[r][n]` two-tap sampling rows of ring cells, zero for invalid cells.
    ring_taps: Vec<Tap<S>>,
}

impl<S: Real> Bmn<S> {
    pub fn new(shape: BmnShape) -> Result<Self> {
        shape.validate()?;
        let mask = SampleMask::cached(shape.window, shape.max_duration, shape.num_samples, shape.expand)?;
        let (t, d, n) = (shape.window, shape.max_duration, shape.num_samples);
        let conv = |c_in, c_out| Conv1d {
            c_in,
            c_out,
            kernel: 3,
            pad: 1,
        };
        let conv1d = [
            conv(shape.in_channels, shape.base_hidden),
            conv(shape.base_hidden, shape.base_out),
            conv(shape.base_out, shape.tem_hidden),
            conv(shape.tem_hidden, 2),
        ];

        let cells = d * t;
        let valid: Vec<usize> = (0..cells).filter(|&c| mask.valid()[c]).collect();
        let mut needed = vec![false; cells];
        for &cell in &valid {
            let (i, j) = (cell / t, cell % t);
            for si in i.saturating_sub(1)..(i + 2).min(d) {
                for sj in j.saturating_sub(1)..(j + 2).min(t) {
                    needed[si * t + sj] = true;
                }
            }
        }
        let ring: Vec<usize> = (0..cells).filter(|&c| needed[c]).collect();
        let taps = dense_taps::<S>(&mask);
        let ring_taps = ring
            .iter()
            .flat_map(|&cell| (0..n).map(move |k| k * cells + cell))
            .map(|k| taps[k])
            .collect();

        Ok(Bmn {
            valid_spans: row_spans(&valid, t),
            shape,
            mask,
            conv1d,
            ring,
            valid,
            ring_taps,
        })
    }

    pub fn shape(&self) -> &BmnShape {
        &self.shape
    }

    pub fn mask(&self) -> &SampleMask {
        &self.mask
    }

    /// `conv3d_1` weights regrouped per output tile as `[tile][n][o][c]`.
    fn tiled_weights(&self, w: &[S]) -> Vec<S> {
        let (c, n, o3) = (self.shape.base_out, self.shape.num_samples, self.shape.pem_hidden_3d);
        let mut out = vec![S::zero(); w.len()];
        for (lo, width) in tiles(o3) {
            let block = &mut out[lo * n * c..(lo + width) * n * c];
            for oo in 0..width {
                for ch in 0..c {
                    let src = &w[((lo + oo) * c + ch) * n..][..n];
                    for (k, &v) in src.iter().enumerate() {
                        block[(k * width + oo) * c + ch] = v;
                    }
                }
            }
        }
        out
    }

    /// Gathers 3×3 neighbourhoods of valid cells from a `channels × D × T`
    /// grid into a `9·channels × V` column matrix.
    fn im2col_valid(&self, grid: &[S], channels: usize) -> Vec<S> {
        let (t, d) = (self.shape.window, self.shape.max_duration);
        let cells = d * t;
        let v_count = self.valid.len();
        let mut cols = vec![S::zero(); 9 * channels * v_count];
        for ch in 0..channels {
            let plane = &grid[ch * cells..(ch + 1) * cells];
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let row = &mut cols[(ch * 9 + k) * v_count..][..v_count];
                for s in &self.valid_spans {
                    let si = s.i as isize + dy;
                    if si < 0 || si >= d as isize {
                        continue;
                    }
                    let (lo, hi, first) = shifted_range(s.j0, s.len, dx, t);
                    let from = ((si as usize * t) as isize + first + lo as isize) as usize;
                    row[s.offset + lo..s.offset + hi].copy_from_slice(&plane[from..from + hi - lo]);
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col_valid`].
    fn col2im_valid(&self, cols: &[S], channels: usize) -> Vec<S> {
        let (t, d) = (self.shape.window, self.shape.max_duration);
        let cells = d * t;
        let v_count = self.valid.len();
        let mut grid = vec![S::zero(); channels * cells];
        for ch in 0..channels {
            let plane = &mut grid[ch * cells..(ch + 1) * cells];
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let row = &cols[(ch * 9 + k) * v_count..][..v_count];
                for s in &self.valid_spans {
                    let si = s.i as isize + dy;
                    if si < 0 || si >= d as isize {
                        continue;
                    }
                    let (lo, hi, first) = shifted_range(s.j0, s.len, dx, t);
                    let from = (si as usize * t) as isize + first;
                    let dst = &mut plane[(from + lo as isize) as usize..(from + hi as isize) as usize];
                    dst.iter_mut()
                        .zip(&row[s.offset + lo..s.offset + hi])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        grid
    }

    /// Runs the network on one window (`in_channels × T`, channel-major).
    pub fn forward(&self, params: &ModelParams<S>, x: &[S]) -> Result<ForwardOutput<S>> {
        let sh = &self.shape;
        let (t, n) = (sh.window, sh.num_samples);
        if x.len() != sh.in_channels * t {
            return Err(BmnError::Shape(format!(
                "input has {} values, expected {}×{t}",
                x.len(),
                sh.in_channels
            )));
        }
        params.check_shape(sh)?;
        let cells = sh.max_duration * t;

        // base module
        let (mut a1, cols1) =
            self.conv1d[0].forward(x, t, params.weight(Layer::Conv1d1), params.bias(Layer::Conv1d1))?;
        relu_in_place(&mut a1);
        let (mut base, cols2) =
            self.conv1d[1].forward(&a1, t, params.weight(Layer::Conv1d2), params.bias(Layer::Conv1d2))?;
        relu_in_place(&mut base);

        // temporal evaluation head
        let (mut a3, cols3) =
            self.conv1d[2].forward(&base, t, params.weight(Layer::Conv1d3), params.bias(Layer::Conv1d3))?;
        relu_in_place(&mut a3);
        let (mut logits, cols4) =
            self.conv1d[3].forward(&a3, t, params.weight(Layer::Conv1d4), params.bias(Layer::Conv1d4))?;
        logits.iter_mut().for_each(|v| *v = sigmoid(*v));
        let p_end = logits.split_off(t);
        let p_start = logits;

        // proposal evaluation head: project every snippet through every
        // sample slice of the 3-D kernel, `[tile][t][n][o]`, then interpolate
        let (c, o3, o2) = (sh.base_out, sh.pem_hidden_3d, sh.pem_hidden_2d);
        let w3 = self.tiled_weights(params.weight(Layer::Conv3d1));
        let mut projected = vec![S::zero(); t * n * o3];
        for (lo, width) in tiles(o3) {
            gemm(
                S::one(),
                MatRef::row_major(&base, c, t).t(),
                MatRef::row_major(&w3[lo * n * c..(lo + width) * n * c], n * width, c).t(),
                S::zero(),
                MatMut::row_major(&mut projected[lo * t * n..(lo + width) * t * n], t, n * width),
            );
        }
        let r_count = self.ring.len();
        let mut h3 = vec![S::zero(); r_count * o3];
        gather(&mut h3, &projected, &self.ring_taps, t, n, o3);
        let b3 = params.bias(Layer::Conv3d1);
        for acc in h3.chunks_exact_mut(o3) {
            for (a, &b) in acc.iter_mut().zip(b3) {
                *a = relu(*a + b);
            }
        }

        let mut h4 = vec![S::zero(); o2 * r_count];
        gemm(
            S::one(),
            MatRef::row_major(params.weight(Layer::Conv2d1), o2, o3),
            MatRef::row_major(&h3, r_count, o3).t(),
            S::zero(),
            MatMut::row_major(&mut h4, o2, r_count),
        );
        for (row, &b) in h4.chunks_exact_mut(r_count).zip(params.bias(Layer::Conv2d1)) {
            row.iter_mut().for_each(|v| *v = relu(*v + b));
        }

        let mut grid = vec![S::zero(); o2 * cells];
        for ch in 0..o2 {
            for (r, &cell) in self.ring.iter().enumerate() {
                grid[ch * cells + cell] = h4[ch * r_count + r];
            }
        }
        let cols5 = self.im2col_valid(&grid, o2);
        let v_count = self.valid.len();
        let mut h5 = vec![S::zero(); o2 * v_count];
        gemm(
            S::one(),
            MatRef::row_major(params.weight(Layer::Conv2d2), o2, 9 * o2),
            MatRef::row_major(&cols5, 9 * o2, v_count),
            S::zero(),
            MatMut::row_major(&mut h5, o2, v_count),
        );
        for (row, &b) in h5.chunks_exact_mut(v_count).zip(params.bias(Layer::Conv2d2)) {
            row.iter_mut().for_each(|v| *v = relu(*v + b));
        }
        let mut z6 = vec![S::zero(); 2 * v_count];
        gemm(
            S::one(),
            MatRef::row_major(params.weight(Layer::Conv2d3), 2, o2),
            MatRef::row_major(&h5, o2, v_count),
            S::zero(),
            MatMut::row_major(&mut z6, 2, v_count),
        );
        let b6 = params.bias(Layer::Conv2d3);
        let mut m_cc = vec![S::zero(); cells];
        let mut m_cr = vec![S::zero(); cells];
        for (v, &cell) in self.valid.iter().enumerate() {
            m_cc[cell] = sigmoid(z6[v] + b6[0]);
            m_cr[cell] = sigmoid(z6[v_count + v] + b6[1]);
        }

        Ok(ForwardOutput {
            p_start,
            p_end,
            m_cc,
            m_cr,
            cache: Cache {
                cols1,
                a1,
                cols2,
                base,
                cols3,
                a3,
                cols4,
                w3,
                h3,
                h4,
                cols5,
                h5,
            },
        })
    }

    /// Parameter gradients of a loss whose output gradients are `g`.
    pub fn backward(
        &self,
        params: &ModelParams<S>,
        out: &ForwardOutput<S>,
        g: &OutputGrads<S>,
    ) -> Result<ModelParams<S>> {
        let sh = &self.shape;
        let (t, n) = (sh.window, sh.num_samples);
        let cells = sh.max_duration * t;
        if g.d_start.len() != t || g.d_end.len() != t || g.d_cc.len() != cells || g.d_cr.len() != cells {
            return Err(BmnError::Shape("output gradient sizes do not match the network".into()));
        }
        let (c, o3, o2) = (sh.base_out, sh.pem_hidden_3d, sh.pem_hidden_2d);
        let (r_count, v_count) = (self.ring.len(), self.valid.len());
        let cache = &out.cache;
        let mut grads = ModelParams::<S>::zeros(sh);

        // conv2d_3 + sigmoid
        let mut dz6 = vec![S::zero(); 2 * v_count];
        for (v, &cell) in self.valid.iter().enumerate() {
            let (mc, mr) = (out.m_cc[cell], out.m_cr[cell]);
            dz6[v] = g.d_cc[cell] * mc * (S::one() - mc);
            dz6[v_count + v] = g.d_cr[cell] * mr * (S::one() - mr);
        }
        gemm(
            S::one(),
            MatRef::row_major(&dz6, 2, v_count),
            MatRef::row_major(&cache.h5, o2, v_count).t(),
            S::zero(),
            MatMut::row_major(grads.weight_mut(Layer::Conv2d3), 2, o2),
        );
        *grads.bias_mut(Layer::Conv2d3) = row_sums(&dz6, v_count);
        let mut dz5 = vec![S::zero(); o2 * v_count];
        gemm(
            S::one(),
            MatRef::row_major(params.weight(Layer::Conv2d3), 2, o2).t(),
            MatRef::row_major(&dz6, 2, v_count),
            S::zero(),
            MatMut::row_major(&mut dz5, o2, v_count),
        );
        mask_relu(&mut dz5, &cache.h5);

        // conv2d_2 (3×3) over valid cells
        gemm(
            S::one(),
            MatRef::row_major(&dz5, o2, v_count),
            MatRef::row_major(&cache.cols5, 9 * o2, v_count).t(),
            S::zero(),
            MatMut::row_major(grads.weight_mut(Layer::Conv2d2), o2, 9 * o2),
        );
        *grads.bias_mut(Layer::Conv2d2) = row_sums(&dz5, v_count);
        let mut dcols5 = vec![S::zero(); 9 * o2 * v_count];
        gemm(
            S::one(),
            MatRef::row_major(params.weight(Layer::Conv2d2), o2, 9 * o2).t(),
            MatRef::row_major(&dz5, o2, v_count),
            S::zero(),
            MatMut::row_major(&mut dcols5, 9 * o2, v_count),
        );
        let dgrid = self.col2im_valid(&dcols5, o2);

        // conv2d_1 (1×1) over ring cells
        let mut dz4 = vec![S::zero(); o2 * r_count];
        for ch in 0..o2 {
            for (r, &cell) in self.ring.iter().enumerate() {
                dz4[ch * r_count + r] = dgrid[ch * cells + cell];
            }
        }
        mask_relu(&mut dz4, &cache.h4);
        gemm(
            S::one(),
            MatRef::row_major(&dz4, o2, r_count),
            MatRef::row_major(&cache.h3, r_count, o3),
            S::zero(),
            MatMut::row_major(grads.weight_mut(Layer::Conv2d1), o2, o3),
        );
        *grads.bias_mut(Layer::Conv2d1) = row_sums(&dz4, r_count);
        let mut dacc = vec![S::zero(); r_count * o3];
        gemm(
            S::one(),
            MatRef::row_major(&dz4, o2, r_count).t(),
            MatRef::row_major(params.weight(Layer::Conv2d1), o2, o3),
            S::zero(),
            MatMut::row_major(&mut dacc, r_count, o3),
        );
        mask_relu(&mut dacc, &cache.h3);

        // fused sample-axis conv + BM sampling
        let db3 = grads.bias_mut(Layer::Conv3d1);
        for row in dacc.chunks_exact(o3) {
            db3.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
        }
        let mut dproj = vec![S::zero(); t * n * o3];
        scatter(&mut dproj, &dacc, &self.ring_taps, t, n, o3);
        let mut dw3 = vec![S::zero(); n * o3 * c];
        let mut dbase = vec![S::zero(); c * t];
        for (lo, width) in tiles(o3) {
            let dp = &dproj[lo * t * n..(lo + width) * t * n];
            gemm(
                S::one(),
                MatRef::row_major(dp, t, n * width).t(),
                MatRef::row_major(&cache.base, c, t).t(),
                S::zero(),
                MatMut::row_major(&mut dw3[lo * n * c..(lo + width) * n * c], n * width, c),
            );
            gemm(
                S::one(),
                MatRef::row_major(&cache.w3[lo * n * c..(lo + width) * n * c], n * width, c).t(),
                MatRef::row_major(dp, t, n * width).t(),
                S::one(),
                MatMut::row_major(&mut dbase, c, t),
            );
        }
        {
            let out = grads.weight_mut(Layer::Conv3d1);
            for (lo, width) in tiles(o3) {
                let block = &dw3[lo * n * c..(lo + width) * n * c];
                for oo in 0..width {
                    for ch in 0..c {
                        let dst = &mut out[((lo + oo) * c + ch) * n..][..n];
                        for (k, v) in dst.iter_mut().enumerate() {
                            *v = block[(k * width + oo) * c + ch];
                        }
                    }
                }
            }
        }

        // temporal evaluation head
        let mut dlogits = Vec::with_capacity(2 * t);
        for (p, d) in out.p_start.iter().zip(&g.d_start).chain(out.p_end.iter().zip(&g.d_end)) {
            dlogits.push(*d * *p * (S::one() - *p));
        }
        let mut g4 = self.conv1d[3].backward(&dlogits, &cache.cols4, params.weight(Layer::Conv1d4), t)?;
        let mut da3 = std::mem::take(&mut g4.dx);
        mask_relu(&mut da3, &cache.a3);
        let g3 = self.conv1d[2].backward(&da3, &cache.cols3, params.weight(Layer::Conv1d3), t)?;
        dbase.iter_mut().zip(&g3.dx).for_each(|(a, &b)| *a += b);

        // base module
        mask_relu(&mut dbase, &cache.base);
        let mut g2 = self.conv1d[1].backward(&dbase, &cache.cols2, params.weight(Layer::Conv1d2), t)?;
        let mut da1 = std::mem::take(&mut g2.dx);
        mask_relu(&mut da1, &cache.a1);
        let g1 = self.conv1d[0].backward(&da1, &cache.cols1, params.weight(Layer::Conv1d1), t)?;

        for (layer, lg) in [
            (Layer::Conv1d1, g1),
            (Layer::Conv1d2, g2),
            (Layer::Conv1d3, g3),
            (Layer::Conv1d4, g4),
        ] {
            *grads.weight_mut(layer) = lg.dw;
            *grads.bias_mut(layer) = lg.db;
        }
        Ok(grads)
    }

    /// Layer-by-layer evaluation through an explicit BM feature map.
    /// Returns `(p_start, p_end, m_cc, m_cr)`.
    #[allow(clippy::type_complexity)]
    pub fn forward_dense(&self, params: &ModelParams<S>, x: &[S]) -> Result<(Vec<S>, Vec<S>, Vec<S>, Vec<S>)> {
        let sh = &self.shape;
        let (t, d) = (sh.window, sh.max_duration);
        let cells = d * t;
        let layer = |i: usize, input: &[S], l: Layer| {
            self.conv1d[i].forward(input, t, params.weight(l), params.bias(l)).map(|r| r.0)
        };
        let mut a1 = layer(0, x, Layer::Conv1d1)?;
        relu_in_place(&mut a1);
        let mut base = layer(1, &a1, Layer::Conv1d2)?;
        relu_in_place(&mut base);
        let mut a3 = layer(2, &base, Layer::Conv1d3)?;
        relu_in_place(&mut a3);
        let mut p = layer(3, &a3, Layer::Conv1d4)?;
        p.iter_mut().for_each(|v| *v = sigmoid(*v));
        let p_end = p.split_off(t);

        let mf = bm_forward(&base, sh.base_out, &self.mask)?;
        let reduce = SampleReduce {
            c_in: sh.base_out,
            n: sh.num_samples,
            c_out: sh.pem_hidden_3d,
        };
        let h3 = reduce.forward(&mf.data, cells, params.weight(Layer::Conv3d1), params.bias(Layer::Conv3d1))?;
        let conv = |cv: Conv2d, input: &[S], l: Layer| {
            cv.forward(input, d, t, params.weight(l), params.bias(l)).map(|r| r.0)
        };
        let mut h4 = conv(Conv2d::pointwise(sh.pem_hidden_3d, sh.pem_hidden_2d), &h3, Layer::Conv2d1)?;
        relu_in_place(&mut h4);
        let mut h5 = conv(Conv2d::same3x3(sh.pem_hidden_2d, sh.pem_hidden_2d), &h4, Layer::Conv2d2)?;
        relu_in_place(&mut h5);
        let mut m = conv(Conv2d::pointwise(sh.pem_hidden_2d, 2), &h5, Layer::Conv2d3)?;
        for (k, v) in m.iter_mut().enumerate() {
            *v = if self.mask.valid()[k % cells] { sigmoid(*v) } else { S::zero() };
        }
        let m_cr = m.split_off(cells);
        Ok((p, p_end, m, m_cr))
    }
}

/// Width of the output-channel tiles in the sampling kernels; keeps one tile
/// of the projected features resident in L2.
const TILE: usize = 64;

type Tap<S> = (u32, u32, S, S);

/// `(start, width)` of each output-channel tile.
fn tiles(o3: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..o3).step_by(TILE).map(move |lo| (lo, TILE.min(o3 - lo)))
}

/// `h3[r][o] = Σ_k w0·P[i0][k][o] + w1·P[i1][k][o]`, with `P` stored per
/// output tile as `[t][k][o]`.
#[inline(always)]
fn gather_kernel<S: Real>(h3: &mut [S], projected: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    let mut buf = [S::zero(); TILE];
    for (lo, w) in tiles(o3) {
        let pt = &projected[lo * t * n..(lo + w) * t * n];
        for (r, out) in h3.chunks_exact_mut(o3).enumerate() {
            let acc = &mut buf[..w];
            acc.fill(S::zero());
            for (k, &(i0, i1, w0, w1)) in taps[r * n..(r + 1) * n].iter().enumerate() {
                if w0 == S::zero() && w1 == S::zero() {
                    continue;
                }
                let p0 = &pt[(i0 as usize * n + k) * w..][..w];
                let p1 = &pt[(i1 as usize * n + k) * w..][..w];
                for ((a, &x0), &x1) in acc.iter_mut().zip(p0).zip(p1) {
                    *a += w0 * x0 + w1 * x1;
                }
            }
            out[lo..lo + w].copy_from_slice(acc);
        }
    }
}

/// Adjoint of [`gather_kernel`], accumulating into `dproj`.
#[inline(always)]
fn scatter_kernel<S: Real>(dproj: &mut [S], dacc: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    for (lo, w) in tiles(o3) {
        let dt = &mut dproj[lo * t * n..(lo + w) * t * n];
        for (r, row) in dacc.chunks_exact(o3).enumerate() {
            let g = &row[lo..lo + w];
            for (k, &(i0, i1, w0, w1)) in taps[r * n..(r + 1) * n].iter().enumerate() {
                if w0 != S::zero() {
                    let d = &mut dt[(i0 as usize * n + k) * w..][..w];
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += w0 * v);
                }
                if w1 != S::zero() {
                    let d = &mut dt[(i1 as usize * n + k) * w..][..w];
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += w1 * v);
                }
            }
        }
    }
}

// The kernels are recompiled with wider vector units when the CPU has them.
// Without fast-math flags the compiler does not fuse or reorder the
// arithmetic, so both builds produce identical bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gather_avx2<S: Real>(h3: &mut [S], projected: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    gather_kernel(h3, projected, taps, t, n, o3)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scatter_avx2<S: Real>(dproj: &mut [S], dacc: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    scatter_kernel(dproj, dacc, taps, t, n, o3)
}

fn gather<S: Real>(h3: &mut [S], projected: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { gather_avx2(h3, projected, taps, t, n, o3) };
    }
    gather_kernel(h3, projected, taps, t, n, o3)
}

fn scatter<S: Real>(dproj: &mut [S], dacc: &[S], taps: &[Tap<S>], t: usize, n: usize, o3: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { scatter_avx2(dproj, dacc, taps, t, n, o3) };
    }
    scatter_kernel(dproj, dacc, taps, t, n, o3)
}

fn relu_in_place<S: Real>(v: &mut [S]) {
    v.iter_mut().for_each(|x| *x = relu(*x));
}

/// Zeroes gradient entries whose post-ReLU activation is not positive.
fn mask_relu<S: Real>(grad: &mut [S], activation: &[S]) {
    grad.iter_mut()
        .zip(activation)
        .for_each(|(g, &a)| {
            if a <= S::zero() {
                *g = S::zero();
            }
        });
}

fn row_sums<S: Real>(m: &[S], cols: usize) -> Vec<S> {
    m.chunks_exact(cols).map(|r| r.iter().copied().sum()).collect()
}
