//! Minimal f64 neural-network layers: convolution, batch norm, linear,
//! Gram layer, pooling, softmax cross-entropy, and SGD.
//!
//! Everything is CPU-only and deterministic: convolutions split the
//! batch into a fixed number of chunks (independent of thread count)
//! and partial weight gradients are reduced in chunk order, so repeated
//! runs with the same seed produce bit-identical parameters.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView4, ArrayViewMutD, Axis};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Activations are (batch, channels, height, width).
pub type Act = Array4<f64>;

/// Fixed batch-split factor for parallel convolution. Constant so the
/// arithmetic (and therefore the bits) never depends on core count.
const CONV_CHUNKS: usize = 4;

/// One named parameter with its gradient, yielded during visitation.
pub struct ParamPair<'a> {
    pub name: String,
    pub param: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

/// Anything trainable by [`Sgd`].
pub trait Parameterized {
    /// Visit every trainable parameter in a fixed order.
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamPair<'_>));

    /// Visit every persistent tensor (parameters plus running
    /// statistics) in a fixed order; used for checkpointing.
    fn for_each_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |mut p| p.grad.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.param.len());
        n
    }
}

/// Train two modules with one optimizer (e.g. backbone plus head).
pub struct Jointly<'a, A: Parameterized, B: Parameterized>(pub &'a mut A, pub &'a mut B);

impl<A: Parameterized, B: Parameterized> Parameterized for Jointly<'_, A, B> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamPair<'_>)) {
        self.0.for_each_param(f);
        self.1.for_each_param(f);
    }
    fn for_each_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.0.for_each_state(f);
        self.1.for_each_state(f);
    }
}

/// Plain SGD with optional momentum. Velocities align with parameter
/// visitation order, which is fixed per model.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocities: Vec<ndarray::ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocities: Vec::new(),
        }
    }

    pub fn step(&mut self, target: &mut dyn Parameterized) {
        let lr = self.lr;
        let momentum = self.momentum;
        if momentum == 0.0 {
            target.for_each_param(&mut |mut p| {
                p.param.zip_mut_with(&p.grad.view(), |w, &g| *w -= lr * g);
            });
            return;
        }
        let mut idx = 0;
        let velocities = &mut self.velocities;
        target.for_each_param(&mut |mut p| {
            if velocities.len() <= idx {
                velocities.push(ndarray::ArrayD::zeros(p.param.raw_dim()));
            }
            let v = &mut velocities[idx];
            v.zip_mut_with(&p.grad.view(), |v, &g| *v = momentum * *v + g);
            p.param.zip_mut_with(&v.view(), |w, &v| *w -= lr * v);
            idx += 1;
        });
    }
}

fn he_normal(fan_in: usize) -> Normal<f64> {
    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std")
}

/// Lower image patches into a (C·K·K, N·Ho·Wo) matrix.
fn im2col(
    x: &ArrayView4<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, n * oh * ow));
    for ni in 0..n {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, ni * oh * ow + oy * ow + ox]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter a column gradient back to image layout (adjoint of im2col).
fn col2im(
    dcol: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Act {
    let mut dx = Act::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                dcol[[row, ni * oh * ow + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Fixed chunk ranges over the batch dimension.
fn batch_chunks(n: usize) -> Vec<(usize, usize)> {
    if n < 2 * CONV_CHUNKS {
        return vec![(0, n)];
    }
    let per = n.div_ceil(CONV_CHUNKS);
    (0..CONV_CHUNKS)
        .map(|i| (i * per, ((i + 1) * per).min(n)))
        .filter(|(a, b)| a < b)
        .collect()
}

/// 2-D convolution, square kernel. Bias is omitted when a batch norm
/// follows (its gradient would be cancelled by the normalization).
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Option<Array1<f64>>,
    pub gw: Array4<f64>,
    pub gb: Option<Array1<f64>>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

struct ConvCache {
    cols: Vec<Array2<f64>>,
    chunks: Vec<(usize, usize)>,
    in_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dist = he_normal(cin * k * k);
        let w = Array4::from_shape_fn((cout, cin, k, k), |_| dist.sample(rng));
        Conv2d {
            gw: Array4::zeros(w.raw_dim()),
            w,
            b: bias.then(|| Array1::zeros(cout)),
            gb: bias.then(|| Array1::zeros(cout)),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn compute(&self, x: &Act) -> (Act, Vec<Array2<f64>>, Vec<(usize, usize)>) {
        let (n, c, h, w) = x.dim();
        let (cout, cin, k, _) = self.w.dim();
        assert_eq!(c, cin, "channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("weights contiguous");
        let chunks = batch_chunks(n);
        let stride = self.stride;
        let pad = self.pad;

        let parts: Vec<(Array2<f64>, Array2<f64>)> = {
            use rayon::prelude::*;
            chunks
                .par_iter()
                .map(|&(a, b)| {
                    let xs = x.slice(s![a..b, .., .., ..]);
                    let col = im2col(&xs, k, stride, pad, oh, ow);
                    let mut out = Array2::<f64>::zeros((cout, (b - a) * oh * ow));
                    general_mat_mul(1.0, &wmat, &col, 0.0, &mut out);
                    (col, out)
                })
                .collect()
        };

        let mut y = Act::zeros((n, cout, oh, ow));
        let mut cols = Vec::with_capacity(parts.len());
        for (&(a, b), (col, out)) in chunks.iter().zip(parts) {
            for (local, ni) in (a..b).enumerate() {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[[ni, co, oy, ox]] = out[[co, local * oh * ow + oy * ow + ox]];
                        }
                    }
                }
            }
            cols.push(col);
        }
        if let Some(b) = &self.b {
            for co in 0..cout {
                y.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + b[co]);
            }
        }
        (y, cols, chunks)
    }

    /// Inference without caching; usable through a shared reference.
    pub fn infer(&self, x: &Act) -> Act {
        self.compute(x).0
    }

    pub fn forward(&mut self, x: &Act, train: bool) -> Act {
        let (n, c, h, w) = x.dim();
        let (y, cols, chunks) = self.compute(x);
        self.cache = train.then_some(ConvCache {
            cols,
            chunks,
            in_dim: (n, c, h, w),
        });
        y
    }

    pub fn backward(&mut self, dout: &Act) -> Act {
        let cache = self.cache.take().expect("forward(train) before backward");
        let (n, c, h, w) = cache.in_dim;
        let (cout, cin, k, _) = self.w.dim();
        let (_, _, oh, ow) = dout.dim();
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("weights contiguous");

        let parts: Vec<(Array2<f64>, Act)> = {
            use rayon::prelude::*;
            cache
                .chunks
                .par_iter()
                .zip(cache.cols.par_iter())
                .map(|(&(a, b), col)| {
                    let nn = b - a;
                    let mut dmat = Array2::<f64>::zeros((cout, nn * oh * ow));
                    for (local, ni) in (a..b).enumerate() {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    dmat[[co, local * oh * ow + oy * ow + ox]] =
                                        dout[[ni, co, oy, ox]];
                                }
                            }
                        }
                    }
                    let mut gw_part = Array2::<f64>::zeros((cout, cin * k * k));
                    general_mat_mul(1.0, &dmat, &col.t(), 0.0, &mut gw_part);
                    let mut dcol = Array2::<f64>::zeros((cin * k * k, nn * oh * ow));
                    general_mat_mul(1.0, &wmat.t(), &dmat, 0.0, &mut dcol);
                    let dx_part =
                        col2im(&dcol, nn, c, h, w, k, self.stride, self.pad, oh, ow);
                    (gw_part, dx_part)
                })
                .collect()
        };

        let mut dx = Act::zeros((n, c, h, w));
        for (&(a, b), (gw_part, dx_part)) in cache.chunks.iter().zip(parts) {
            let flat = gw_part
                .into_shape_with_order((cout, cin, k, k))
                .expect("shape");
            self.gw.zip_mut_with(&flat, |g, &p| *g += p);
            dx.slice_mut(s![a..b, .., .., ..]).assign(&dx_part);
        }
        if let Some(gb) = &mut self.gb {
            for co in 0..cout {
                gb[co] += dout.slice(s![.., co, .., ..]).sum();
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        f(ParamPair {
            name: format!("{prefix}.w"),
            param: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        if let (Some(b), Some(gb)) = (&mut self.b, &mut self.gb) {
            f(ParamPair {
                name: format!("{prefix}.b"),
                param: b.view_mut().into_dyn(),
                grad: gb.view_mut().into_dyn(),
            });
        }
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b.view_mut().into_dyn());
        }
    }
}

/// Batch normalization over (N, H, W) per channel.
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    pub g_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Act,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Inference with running statistics; no state is touched.
    pub fn infer(&self, x: &Act) -> Act {
        let (_, c, _, _) = x.dim();
        let mut y = x.clone();
        for ci in 0..c {
            let m = self.running_mean[ci];
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| g * (v - m) * is + b);
        }
        y
    }

    pub fn forward(&mut self, x: &Act, train: bool) -> Act {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        if train {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let sl = x.slice(s![.., ci, .., ..]);
                let m = sl.sum() / count;
                mean[ci] = m;
                var[ci] = sl.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / count;
            }
            let inv_std = var.map(|&v| 1.0 / (v + self.eps).sqrt());
            let mut xhat = x.clone();
            for ci in 0..c {
                let m = mean[ci];
                let is = inv_std[ci];
                xhat.slice_mut(s![.., ci, .., ..])
                    .mapv_inplace(|v| (v - m) * is);
            }
            let mut y = xhat.clone();
            for ci in 0..c {
                let g = self.gamma[ci];
                let b = self.beta[ci];
                y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + b);
            }
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ci in 0..c {
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                    + self.momentum * var[ci] * unbias;
            }
            self.cache = Some(BnCache { xhat, inv_std });
            y
        } else {
            self.cache = None;
            self.infer(x)
        }
    }

    pub fn backward(&mut self, dout: &Act) -> Act {
        let cache = self.cache.take().expect("forward(train) before backward");
        let (n, c, h, w) = dout.dim();
        let count = (n * h * w) as f64;
        let mut dx = Act::zeros((n, c, h, w));
        for ci in 0..c {
            let xhat = cache.xhat.slice(s![.., ci, .., ..]);
            let dy = dout.slice(s![.., ci, .., ..]);
            let sum_dy = dy.sum();
            let sum_dy_xhat = dy.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<f64>();
            self.g_beta[ci] += sum_dy;
            self.g_gamma[ci] += sum_dy_xhat;
            let scale = self.gamma[ci] * cache.inv_std[ci];
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            let mut dst = dx.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut dst).and(&dy).and(&xhat).for_each(|d, &dyv, &xh| {
                *d = scale * (dyv - mean_dy - xh * mean_dy_xhat);
            });
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        f(ParamPair {
            name: format!("{prefix}.gamma"),
            param: self.gamma.view_mut().into_dyn(),
            grad: self.g_gamma.view_mut().into_dyn(),
        });
        f(ParamPair {
            name: format!("{prefix}.beta"),
            param: self.beta.view_mut().into_dyn(),
            grad: self.g_beta.view_mut().into_dyn(),
        });
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
        f(
            &format!("{prefix}.running_mean"),
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            &format!("{prefix}.running_var"),
            self.running_var.view_mut().into_dyn(),
        );
    }
}

/// Fully connected layer: y = x·Wᵀ + b over (N, in) rows.
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = he_normal(input);
        let w = Array2::from_shape_fn((output, input), |_| dist.sample(rng));
        Linear {
            gw: Array2::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(output),
            gb: Array1::zeros(output),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.w.dim().0
    }

    /// Inference without caching.
    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, _) = x.dim();
        let mut y = Array2::<f64>::zeros((n, self.out_dim()));
        general_mat_mul(1.0, x, &self.w.t(), 0.0, &mut y);
        for mut row in y.rows_mut() {
            row.zip_mut_with(&self.b, |v, &b| *v += b);
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        self.cache = train.then(|| x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("forward(train) before backward");
        general_mat_mul(1.0, &dout.t(), &x, 1.0, &mut self.gw);
        self.gb.zip_mut_with(&dout.sum_axis(Axis(0)), |g, &d| *g += d);
        let mut dx = Array2::<f64>::zeros(x.raw_dim());
        general_mat_mul(1.0, dout, &self.w, 0.0, &mut dx);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        f(ParamPair {
            name: format!("{prefix}.w"),
            param: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        f(ParamPair {
            name: format!("{prefix}.b"),
            param: self.b.view_mut().into_dyn(),
            grad: self.gb.view_mut().into_dyn(),
        });
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

/// ReLU with a cached sign mask for the backward pass.
#[derive(Default)]
pub struct Relu {
    mask: Option<Act>,
}

impl Relu {
    pub fn infer(&self, x: &Act) -> Act {
        x.map(|&v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Act, train: bool) -> Act {
        let y = x.map(|&v| v.max(0.0));
        self.mask = train.then(|| x.map(|&v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    pub fn backward(&mut self, dout: &Act) -> Act {
        let mask = self.mask.take().expect("forward(train) before backward");
        dout * &mask
    }
}

/// ReLU over 2-D feature matrices (used inside MLP heads).
#[derive(Default)]
pub struct Relu2 {
    mask: Option<Array2<f64>>,
}

impl Relu2 {
    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        x.map(|&v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let y = x.map(|&v| v.max(0.0));
        self.mask = train.then(|| x.map(|&v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        let mask = self.mask.take().expect("forward(train) before backward");
        dout * &mask
    }
}

/// Global average pooling (N, C, H, W) -> (N, C).
pub fn global_avg_pool(x: &Act) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f64>::zeros((n, c));
    let inv = 1.0 / (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x.slice(s![ni, ci, .., ..]).sum() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward(dout: &Array2<f64>, h: usize, w: usize) -> Act {
    let (n, c) = dout.dim();
    let inv = 1.0 / (h * w) as f64;
    Act::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dout[[ni, ci]] * inv)
}

/// Gram matrix of one feature map: G = F·Fᵀ / (C·H·W), with F the
/// C×(H·W) flattening. Symmetric and positive semi-definite.
pub fn gram_matrix(fmap: &Array3<f64>) -> crate::error::Result<Array2<f64>> {
    if fmap.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::Error::NumericalError(
            "non-finite value in feature map".into(),
        ));
    }
    let (c, h, w) = fmap.dim();
    let f = fmap
        .to_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    let mut g = Array2::<f64>::zeros((c, c));
    general_mat_mul(1.0 / (c * h * w) as f64, &f, &f.t(), 0.0, &mut g);
    // Force bitwise symmetry: average the two triangles so floating
    // point noise cannot break G[i][j] == G[j][i].
    for i in 0..c {
        for j in 0..i {
            let m = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = m;
            g[[j, i]] = m;
        }
    }
    Ok(g)
}

/// Batched Gram layer: (N, C, H, W) -> (N, 1, C, C).
pub struct GramLayer {
    cache: Option<Act>,
}

impl Default for GramLayer {
    fn default() -> Self {
        GramLayer { cache: None }
    }
}

impl GramLayer {
    pub fn infer(&self, x: &Act) -> Act {
        let (n, c, _, _) = x.dim();
        let grams: Vec<Array2<f64>> = {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .map(|ni| {
                    gram_matrix(&x.slice(s![ni, .., .., ..]).to_owned())
                        .expect("finite activations")
                })
                .collect()
        };
        let mut y = Act::zeros((n, 1, c, c));
        for (ni, g) in grams.into_iter().enumerate() {
            y.slice_mut(s![ni, 0, .., ..]).assign(&g);
        }
        y
    }

    pub fn forward(&mut self, x: &Act, train: bool) -> Act {
        let y = self.infer(x);
        self.cache = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dout: &Act) -> Act {
        let x = self.cache.take().expect("forward(train) before backward");
        let (n, c, h, w) = x.dim();
        let norm = 1.0 / (c * h * w) as f64;
        let parts: Vec<Array2<f64>> = {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .map(|ni| {
                    let f = x
                        .slice(s![ni, .., .., ..])
                        .to_owned()
                        .into_shape_with_order((c, h * w))
                        .expect("contiguous");
                    let dg = dout.slice(s![ni, 0, .., ..]);
                    // dF = (dG + dGᵀ)·F / (C·H·W)
                    let sym = &dg + &dg.t();
                    let mut df = Array2::<f64>::zeros((c, h * w));
                    general_mat_mul(norm, &sym, &f, 0.0, &mut df);
                    df
                })
                .collect()
        };
        let mut dx = Act::zeros((n, c, h, w));
        for (ni, df) in parts.into_iter().enumerate() {
            let df4 = df.into_shape_with_order((c, h, w)).expect("shape");
            dx.slice_mut(s![ni, .., .., ..]).assign(&df4);
        }
        dx
    }
}

/// Mean softmax cross-entropy over (N, K) logits; returns the loss and
/// the logits gradient.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len());
    let mut dlogits = Array2::<f64>::zeros((n, k));
    let mut loss = 0.0;
    for (ni, &label) in labels.iter().enumerate() {
        let row = logits.row(ni);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (exps[label] / z).ln();
        for ki in 0..k {
            let p = exps[ki] / z;
            dlogits[[ni, ki]] = (p - if ki == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, dlogits)
}

/// Softmax probabilities per row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_act(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Act {
        Act::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(a*y))/dparam for a scalar probe.
    fn num_grad<F: FnMut(f64) -> f64>(mut f: F, x0: f64, eps: f64) -> f64 {
        (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)
    }

    #[test]
    fn conv_matches_direct_computation() {
        let mut r = rng(1);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, true, &mut r);
        let x = rand_act(&mut r, (2, 2, 5, 5));
        let y = conv.forward(&x, false);
        assert_eq!(y.dim(), (2, 3, 5, 5));
        // Direct dot product at one output location.
        let (ni, co, oy, ox) = (1, 2, 2, 3);
        let mut expect = conv.b.as_ref().unwrap()[co];
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = oy + ky - 1;
                    let ix = ox + kx - 1;
                    expect += conv.w[[co, ci, ky, kx]] * x[[ni, ci, iy, ix]];
                }
            }
        }
        assert!((y[[ni, co, oy, ox]] - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_chunked_equals_small_batch() {
        // A batch large enough to trigger chunking must agree with
        // per-sample forwards.
        let mut r = rng(2);
        let mut conv = Conv2d::new(3, 4, 3, 2, 1, true, &mut r);
        let x = rand_act(&mut r, (9, 3, 8, 8));
        let y = conv.forward(&x, false);
        for ni in 0..9 {
            let xi = x.slice(s![ni..ni + 1, .., .., ..]).to_owned();
            let yi = conv.forward(&xi, false);
            let diff = (&y.slice(s![ni..ni + 1, .., .., ..]) - &yi)
                .iter()
                .fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(diff < 1e-12, "sample {ni} differs by {diff}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(3);
        let mut conv = Conv2d::new(2, 2, 3, 1, 1, true, &mut r);
        let x = rand_act(&mut r, (2, 2, 4, 4));
        let probe = rand_act(&mut r, (2, 2, 4, 4));

        let loss = |conv: &mut Conv2d, x: &Act| (&conv.forward(x, false) * &probe).sum();

        conv.gw.fill(0.0);
        conv.gb.as_mut().unwrap().fill(0.0);
        conv.forward(&x, true);
        let dx = conv.backward(&probe);

        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let orig = conv.w[idx];
            let g = num_grad(
                |v| {
                    conv.w[idx] = v;
                    let l = loss(&mut conv, &x);
                    conv.w[idx] = orig;
                    l
                },
                orig,
                eps,
            );
            assert!((g - conv.gw[idx]).abs() < 1e-6, "gw mismatch at {idx:?}");
        }
        for &idx in &[(0, 0, 1, 1), (1, 1, 3, 2)] {
            let orig = x[idx];
            let mut xm = x.clone();
            let g = num_grad(
                |v| {
                    xm[idx] = v;
                    let out = (&conv.forward(&xm, false) * &probe).sum();
                    xm[idx] = orig;
                    out
                },
                orig,
                eps,
            );
            assert!((g - dx[idx]).abs() < 1e-6, "dx mismatch at {idx:?}");
        }
        let orig = conv.b.as_ref().unwrap()[1];
        let g = num_grad(
            |v| {
                conv.b.as_mut().unwrap()[1] = v;
                let l = loss(&mut conv, &x);
                conv.b.as_mut().unwrap()[1] = orig;
                l
            },
            orig,
            eps,
        );
        assert!((g - conv.gb.as_ref().unwrap()[1]).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_normalizes_and_grads_check() {
        let mut r = rng(4);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.assign(&Array1::from_vec(vec![1.5, 0.7, 1.0]));
        bn.beta.assign(&Array1::from_vec(vec![0.1, -0.2, 0.0]));
        let x = rand_act(&mut r, (4, 3, 3, 3));
        let y = bn.forward(&x, true);
        // Per-channel mean of y equals beta, std equals gamma.
        for ci in 0..3 {
            let sl = y.slice(s![.., ci, .., ..]);
            let m = sl.mean().unwrap();
            assert!((m - bn.beta[ci]).abs() < 1e-10);
        }

        let probe = rand_act(&mut r, (4, 3, 3, 3));
        let dx = bn.backward(&probe);
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (3, 2, 2, 2), (1, 1, 0, 2)] {
            let orig = x[idx];
            let mut xm = x.clone();
            let g = num_grad(
                |v| {
                    xm[idx] = v;
                    let mut bn2 = BatchNorm2d::new(3);
                    bn2.gamma.assign(&bn.gamma);
                    bn2.beta.assign(&bn.beta);
                    let out = (&bn2.forward(&xm, true) * &probe).sum();
                    xm[idx] = orig;
                    out
                },
                orig,
                eps,
            );
            assert!((g - dx[idx]).abs() < 1e-5, "bn dx mismatch at {idx:?}");
        }
    }

    #[test]
    fn linear_grads_check() {
        let mut r = rng(5);
        let mut lin = Linear::new(4, 3, &mut r);
        let x = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((5, 3), |_| r.gen_range(-1.0..1.0));
        lin.forward(&x, true);
        let dx = lin.backward(&probe);

        let eps = 1e-6;
        let idx = (2, 3);
        let orig = lin.w[idx];
        let g = num_grad(
            |v| {
                lin.w[idx] = v;
                let l = (&lin.forward(&x, false) * &probe).sum();
                lin.w[idx] = orig;
                l
            },
            orig,
            eps,
        );
        assert!((g - lin.gw[idx]).abs() < 1e-7);

        let xi = (4, 1);
        let orig = x[xi];
        let mut xm = x.clone();
        let g = num_grad(
            |v| {
                xm[xi] = v;
                let l = (&lin.forward(&xm, false) * &probe).sum();
                xm[xi] = orig;
                l
            },
            orig,
            eps,
        );
        assert!((g - dx[xi]).abs() < 1e-7);
    }

    #[test]
    fn gram_hand_example() {
        // C=1, values {1,2,2} over a 1x3 map: (1+4+4)/3 = 3.
        let fmap = Array3::from_shape_vec((1, 1, 3), vec![1.0, 2.0, 2.0]).unwrap();
        let g = gram_matrix(&fmap).unwrap();
        assert_eq!(g.dim(), (1, 1));
        assert!((g[[0, 0]] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gram_zero_and_nonfinite() {
        let z = Array3::<f64>::zeros((3, 2, 2));
        let g = gram_matrix(&z).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let mut bad = z.clone();
        bad[[0, 0, 0]] = f64::NAN;
        assert!(gram_matrix(&bad).is_err());
    }

    #[test]
    fn gram_layer_grads_check() {
        let mut r = rng(6);
        let mut layer = GramLayer::default();
        let x = rand_act(&mut r, (2, 3, 2, 2));
        let probe = rand_act(&mut r, (2, 1, 3, 3));
        layer.forward(&x, true);
        let dx = layer.backward(&probe);
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (1, 2, 1, 1), (0, 1, 0, 1)] {
            let orig = x[idx];
            let mut xm = x.clone();
            let g = num_grad(
                |v| {
                    xm[idx] = v;
                    let mut l2 = GramLayer::default();
                    let out = (&l2.forward(&xm, false) * &probe).sum();
                    xm[idx] = orig;
                    out
                },
                orig,
                eps,
            );
            assert!((g - dx[idx]).abs() < 1e-6, "gram dx mismatch at {idx:?}");
        }
    }

    #[test]
    fn softmax_ce_matches_manual() {
        let logits = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 2.0, -1.0]).unwrap();
        let (loss, dl) = softmax_cross_entropy(&logits, &[1, 0]);
        // Row 0: uniform -> -ln(0.5); row 1: -ln(e^2/(e^2+e^-1)).
        let p1 = (2.0f64).exp() / ((2.0f64).exp() + (-1.0f64).exp());
        let expect = (-(0.5f64).ln() - p1.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        // Gradient row sums are zero.
        assert!(dl.sum_axis(Axis(1)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        struct One {
            w: Array1<f64>,
            g: Array1<f64>,
        }
        impl Parameterized for One {
            fn for_each_param(&mut self, f: &mut dyn FnMut(ParamPair<'_>)) {
                f(ParamPair {
                    name: "w".into(),
                    param: self.w.view_mut().into_dyn(),
                    grad: self.g.view_mut().into_dyn(),
                });
            }
            fn for_each_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
                f("w", self.w.view_mut().into_dyn());
            }
        }
        let mut m = One {
            w: Array1::from_vec(vec![1.0, -2.0]),
            g: Array1::from_vec(vec![0.5, -0.5]),
        };
        let mut sgd = Sgd::new(0.1, 0.0);
        sgd.step(&mut m);
        assert!((m.w[0] - 0.95).abs() < 1e-15);
        assert!((m.w[1] + 1.95).abs() < 1e-15);

        let mut sgd_m = Sgd::new(0.1, 0.9);
        sgd_m.step(&mut m);
        sgd_m.step(&mut m);
        // Second momentum step applies v = 0.9*0.5 + 0.5 = 0.95 scaled.
        assert!(m.w[0] < 0.95 - 0.05);
    }

    #[test]
    fn relu_masks_negatives() {
        let mut relu = Relu::default();
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu.forward(&x, true);
        assert_eq!(
            y.as_slice().unwrap(),
            &[0.0, 0.0, 2.0, 0.0]
        );
        let d = Array4::from_shape_vec((1, 1, 1, 4), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dx = relu.backward(&d);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gap_round_trip() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(n, c, h, w)| {
            (n * 100 + c * 10 + h * 2 + w) as f64
        });
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        assert!((y[[0, 0]] - 1.5).abs() < 1e-15);
        let dx = global_avg_pool_backward(&y, 2, 2);
        assert!((dx[[0, 0, 1, 1]] - 1.5 / 4.0).abs() < 1e-15);
    }
}
