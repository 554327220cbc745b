//! Forward operators and their adjoints.
//!
//! Every function here is pure: inputs are borrowed, outputs are fresh tensors.
//! The tape in [`super::tape`] records calls to these and replays the
//! `*_backward` counterparts in reverse.

use rand::Rng;

use super::{EngineError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` with explicit strides so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    accumulate: bool,
    c: &mut [f32],
) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices covering the full m×k, k×n and m×n extents
    // implied by the strides; matrixmultiply only reads/writes within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self, EngineError> {
        let (n, cin, h, wd) = x.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
        if wcin != cin {
            return Err(mismatch("conv2d", x, w));
        }
        if b.shape() != [cout] {
            return Err(mismatch("conv2d", w, b));
        }
        if stride == 0 {
            return Err(EngineError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(EngineError::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(EngineError::InvalidArgument(format!(
                "conv2d stride {stride} does not tile padded input {ph}x{pw} with kernel {kh}x{kw}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, unpadded: the column matrix is the input plane itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[j0, j1)` whose kernel tap `v` lands inside the input row.
    fn valid_cols(&self, v: usize) -> (usize, usize) {
        let s = self.stride;
        let j0 = self.pad.saturating_sub(v).div_ceil(s);
        let j1 = (self.w + self.pad).saturating_sub(v).div_ceil(s).min(self.ow);
        (j0.min(j1), j1)
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = &mut col[((c * self.kh + u) * self.kw + v) * p..][..p];
                    let (j0, j1) = self.valid_cols(v);
                    for i in 0..self.oh {
                        let y = (i * self.stride + u) as isize - self.pad as isize;
                        let dst = &mut row[i * self.ow..(i + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        dst[..j0].fill(0.0);
                        dst[j1..].fill(0.0);
                        let x0 = j0 * self.stride + v - self.pad;
                        if self.stride == 1 {
                            dst[j0..j1].copy_from_slice(&src[x0..x0 + (j1 - j0)]);
                        } else {
                            for (d, &sv) in dst[j0..j1].iter_mut().zip(src[x0..].iter().step_by(self.stride)) {
                                *d = sv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = &col[((c * self.kh + u) * self.kw + v) * p..][..p];
                    let (j0, j1) = self.valid_cols(v);
                    if j0 == j1 {
                        continue;
                    }
                    for i in 0..self.oh {
                        let y = (i * self.stride + u) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        let x0 = j0 * self.stride + v - self.pad;
                        let src = &row[i * self.ow + j0..i * self.ow + j1];
                        for (d, &g) in dst[x0..].iter_mut().step_by(self.stride).zip(src) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation plus per-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor, EngineError> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;
    let mut out = vec![0.0f32; g.n * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * p] };
    for n in 0..g.n {
        let xn = &x.data()[n * in_sz..(n + 1) * in_sz];
        let on = &mut out[n * out_sz..(n + 1) * out_sz];
        for (o, chunk) in on.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[o]);
        }
        let cols: &[f32] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut col);
            &col
        };
        gemm(g.cout, k, p, w.data(), (k, 1), cols, (p, 1), true, on);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::new(x, w, b, stride, pad).expect("shapes validated in forward");
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dw = vec![0.0f32; w.numel()];
    let mut db = vec![0.0f32; g.cout];
    let mut col = vec![0.0f32; k * p];
    let mut dcol = vec![0.0f32; k * p];
    for n in 0..g.n {
        let xn = &x.data()[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy.data()[n * out_sz..(n + 1) * out_sz];
        for (o, chunk) in dyn_.chunks(p).enumerate() {
            db[o] += chunk.iter().sum::<f32>();
        }
        let cols: &[f32] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut col);
            &col
        };
        // dw[Cout,K] += dy[Cout,P] · colᵀ[P,K]
        gemm(g.cout, p, k, dyn_, (p, 1), cols, (1, p), true, &mut dw);
        // dcol[K,P] = wᵀ[K,Cout] · dy[Cout,P]
        let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
        if g.is_pointwise() {
            gemm(k, g.cout, p, w.data(), (1, k), dyn_, (p, 1), false, dxn);
        } else {
            gemm(k, g.cout, p, w.data(), (1, k), dyn_, (p, 1), false, &mut dcol);
            g.col2im(&dcol, dxn);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

// ---------------------------------------------------------------------------
// pooling

fn pool_dims(x: &Tensor, window: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize), EngineError> {
    let (n, c, h, w) = x.dims4("pool2d")?;
    if window == 0 || stride == 0 {
        return Err(EngineError::InvalidArgument("pool2d window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(EngineError::InvalidArgument(format!(
            "pool2d window {window} larger than spatial extent {h}x{w}"
        )));
    }
    if (h - window) % stride != 0 || (w - window) % stride != 0 {
        return Err(EngineError::InvalidArgument(format!(
            "pool2d stride {stride} does not tile {h}x{w} with window {window}"
        )));
    }
    Ok((n, c, h, w, (h - window) / stride + 1, (w - window) / stride + 1))
}

/// Returns the pooled tensor and, for max pooling, the flat input index of each winner.
pub fn pool2d(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>), EngineError> {
    let (n, c, h, w, oh, ow) = pool_dims(x, window, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    let inv = 1.0 / (window * window) as f32;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let (y0, x0) = (i * stride, j * stride);
                match kind {
                    PoolKind::Max => {
                        let mut best = base + y0 * w + x0;
                        for u in 0..window {
                            for v in 0..window {
                                let idx = base + (y0 + u) * w + x0 + v;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x.data()[best]);
                        argmax.push(best);
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0f32;
                        for u in 0..window {
                            for v in 0..window {
                                s += x.data()[base + (y0 + u) * w + x0 + v];
                            }
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub(crate) fn pool2d_backward(
    input_shape: &[usize],
    kind: PoolKind,
    window: usize,
    stride: usize,
    argmax: &[usize],
    dy: &Tensor,
) -> Tensor {
    let mut dx = vec![0.0f32; input_shape.iter().product()];
    match kind {
        PoolKind::Max => {
            for (&idx, &g) in argmax.iter().zip(dy.data()) {
                dx[idx] += g;
            }
        }
        PoolKind::Avg => {
            let (h, w) = (input_shape[2], input_shape[3]);
            let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
            let inv = 1.0 / (window * window) as f32;
            for plane in 0..input_shape[0] * input_shape[1] {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dy.data()[(plane * oh + i) * ow + j] * inv;
                        for u in 0..window {
                            for v in 0..window {
                                dx[plane * h * w + (i * stride + u) * w + j * stride + v] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Squeeze step: per-channel spatial mean, `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, EngineError> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = 1.0 / plane as f32;
    let out = x.data().chunks(plane).map(|p| p.iter().sum::<f32>() * inv).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let inv = 1.0 / plane as f32;
    let mut dx = Vec::with_capacity(dy.numel() * plane);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// pointwise

pub fn sigmoid(t: f32) -> f32 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(x: &Tensor, f: Activation) -> Tensor {
    match f {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

pub(crate) fn elementwise_backward(x: &Tensor, y: &Tensor, f: Activation, dy: &Tensor) -> Tensor {
    let d = match f {
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    };
    Tensor::from_parts(x.shape().to_vec(), d)
}

/// `x · wᵀ + b` for `x: [N, Din]`, `w: [Dout, Din]`.
pub fn fully_connected(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let (n, din) = x.dims2("fully_connected")?;
    let (dout, wdin) = w.dims2("fully_connected")?;
    if wdin != din {
        return Err(mismatch("fully_connected", x, w));
    }
    if b.shape() != [dout] {
        return Err(mismatch("fully_connected", w, b));
    }
    let mut out: Vec<f32> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    gemm(n, din, dout, x.data(), (din, 1), w.data(), (1, din), true, &mut out);
    Ok(Tensor::from_parts(vec![n, dout], out))
}

pub(crate) fn fully_connected_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut dx = vec![0.0f32; n * din];
    let mut dw = vec![0.0f32; dout * din];
    // dx[N,Din] = dy[N,Dout] · w[Dout,Din]
    gemm(n, dout, din, dy.data(), (dout, 1), w.data(), (din, 1), false, &mut dx);
    // dw[Dout,Din] = dyᵀ[Dout,N] · x[N,Din]
    gemm(dout, n, din, dy.data(), (1, dout), x.data(), (din, 1), false, &mut dw);
    let mut db = vec![0.0f32; dout];
    for row in dy.data().chunks(dout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![dout], db),
    )
}

/// Stacks NCHW tensors along the channel axis, in list order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, EngineError> {
    let first = parts
        .first()
        .ok_or_else(|| EngineError::InvalidArgument("concat_channels of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(mismatch("concat_channels", first, p));
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], out))
}

pub(crate) fn concat_channels_backward(channels: &[usize], dy: &Tensor) -> Vec<Tensor> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let t = dy.slice_channels(start, start + c).expect("valid by construction");
            start += c;
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// batch norm

/// Per-channel running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Everything the batch-norm adjoint needs.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
    pub mode: Mode,
}

pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BnState,
    mode: Mode,
    eps: f32,
) -> Result<(Tensor, BnSaved), EngineError> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("batch_norm", x, gamma));
    }
    if state.mean.len() != c || state.var.len() != c {
        return Err(EngineError::InvalidArgument(format!(
            "batch_norm running stats sized {} for {c} channels",
            state.mean.len()
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f32;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    s += x.data()[(b * c + ch) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = (s / count as f64) as f32;
                let mut q = 0.0f64;
                for b in 0..n {
                    q += x.data()[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|&v| ((v - m) as f64).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = (q / count as f64) as f32;
            }
            (mean, var)
        }
        Mode::Infer => (state.mean.clone(), state.var.clone()),
    };
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.numel()];
    let mut out = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        BnSaved {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            inv_std,
            batch_mean: mean,
            batch_var: var,
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward(gamma: &Tensor, saved: &BnSaved, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let shape = dy.shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * plane) as f32;
    let xhat = saved.xhat.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy.data()[i] * xhat[i];
                dbeta[ch] += dy.data()[i];
            }
        }
    }
    let mut dx = vec![0.0f32; dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let g = gamma.data()[ch];
            let is = saved.inv_std[ch];
            match saved.mode {
                Mode::Train => {
                    // dxhat = g·dy; Σdxhat = g·dbeta; Σdxhat·xhat = g·dgamma
                    for i in off..off + plane {
                        dx[i] = g * is / m * (m * dy.data()[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
                Mode::Infer => {
                    for i in off..off + plane {
                        dx[i] = g * is * dy.data()[i];
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1-rate)`); in infer mode the multiplier is empty.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f32, mode: Mode, rng: &mut R) -> Result<(Tensor, Vec<f32>), EngineError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EngineError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), Vec::new()));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.numel())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), out), mask))
}

// ---------------------------------------------------------------------------
// loss

/// Mean softmax cross-entropy. Returns the loss and row-normalized probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor), EngineError> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if k < 2 {
        return Err(EngineError::InvalidArgument(format!("softmax_cross_entropy needs K >= 2, got {k}")));
    }
    if labels.len() != n {
        return Err(EngineError::InvalidArgument(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(EngineError::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += (log_sum - (row[label] - max)) as f64;
        probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
    }
    Ok(((loss / n as f64) as f32, Tensor::from_parts(vec![n, k], probs)))
}

pub(crate) fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], dloss: f32) -> Tensor {
    let k = probs.shape()[1];
    let n = labels.len();
    let scale = dloss / n as f32;
    let mut d = probs.data().to_vec();
    for (row, &label) in d.chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_parts(probs.shape().to_vec(), d)
}

// ---------------------------------------------------------------------------
// SE gating

/// `out[n,c,·,·] = s[n,c] · u[n,c,·,·]`.
pub fn scale_channels(u: &Tensor, s: &Tensor) -> Result<Tensor, EngineError> {
    let (n, c, h, w) = u.dims4("scale_channels")?;
    if s.shape() != [n, c] {
        return Err(mismatch("scale_channels", u, s));
    }
    let plane = h * w;
    let mut out = u.data().to_vec();
    for (chunk, &g) in out.chunks_mut(plane).zip(s.data()) {
        for v in chunk {
            *v *= g;
        }
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

pub(crate) fn scale_channels_backward(u: &Tensor, s: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let plane = u.shape()[2] * u.shape()[3];
    let mut du = dy.data().to_vec();
    let mut ds = Vec::with_capacity(s.numel());
    for ((chunk, uc), &g) in du.chunks_mut(plane).zip(u.data().chunks(plane)).zip(s.data()) {
        ds.push(chunk.iter().zip(uc).map(|(d, v)| d * v).sum());
        for v in chunk {
            *v *= g;
        }
    }
    (
        Tensor::from_parts(u.shape().to_vec(), du),
        Tensor::from_parts(s.shape().to_vec(), ds),
    )
}
