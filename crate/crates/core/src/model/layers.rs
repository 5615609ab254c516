//! Network building blocks with explicit forward and backward passes.
//!
//! Parameters are f32, which is also the serialized form, so a checkpoint
//! round trip is bit-exact. Activations and gradients are f64 throughout;
//! that headroom is what lets the finite-difference gradient oracle resolve
//! agreement to 1e-4 relative. Each layer caches whatever its backward pass
//! needs from the last training-mode forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Batched NCHW activation tensor.
#[derive(Debug, Clone)]
pub struct Act4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

/// Batched flat activation, one row per sample.
#[derive(Debug, Clone)]
pub struct Act2 {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Act2 {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * d] }
    }

    /// Reinterprets rows as 1x1 feature maps so the 2-D layers apply.
    pub fn into_act4(self) -> Act4 {
        Act4 { n: self.n, c: self.d, h: 1, w: 1, data: self.data }
    }
}

impl Act4 {
    pub fn into_act2(self) -> Act2 {
        Act2 { n: self.n, d: self.c * self.h * self.w, data: self.data }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
        .collect()
}

/// 3x3 convolution, stride 1, zero padding 1: spatial size is preserved.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    /// [out_c][in_c][3][3]
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    cache: Option<Act4>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let count = out_c * in_c * 9;
        Self {
            in_c,
            out_c,
            w: he_normal(rng, in_c * 9, count),
            b: vec![0.0; out_c],
            dw: vec![0.0; count],
            db: vec![0.0; out_c],
            cache: None,
        }
    }

    fn compute(&self, x: &Act4) -> Act4 {
        let (h, w) = (x.h, x.w);
        let mut y = Act4::zeros(x.n, self.out_c, h, w);
        for n in 0..x.n {
            for oc in 0..self.out_c {
                let out_base = (n * self.out_c + oc) * h * w;
                let bias = f64::from(self.b[oc]);
                for v in &mut y.data[out_base..out_base + h * w] {
                    *v = bias;
                }
                for ic in 0..self.in_c {
                    let in_base = (n * self.in_c + ic) * h * w;
                    let w_base = (oc * self.in_c + ic) * 9;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let wv = f64::from(self.w[w_base + dy * 3 + dx]);
                            if wv == 0.0 {
                                continue;
                            }
                            // Output rows where the shifted input row exists.
                            let y0 = 1usize.saturating_sub(dy);
                            let y1 = (h + 1 - dy).min(h);
                            let x0 = 1usize.saturating_sub(dx);
                            let x1 = (w + 1 - dx).min(w);
                            for yy in y0..y1 {
                                let iy = yy + dy - 1;
                                let src = in_base + iy * w;
                                let dst = out_base + yy * w;
                                for xx in x0..x1 {
                                    let ix = xx + dx - 1;
                                    y.data[dst + xx] += wv * x.data[src + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: Act4) -> Act4 {
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Act4) -> Act4 {
        self.compute(x)
    }

    pub fn backward(&mut self, g: &Act4) -> Act4 {
        let x = self.cache.take().expect("conv backward without forward");
        let (h, w) = (x.h, x.w);
        let mut dx = Act4::zeros(x.n, self.in_c, h, w);
        for n in 0..x.n {
            for oc in 0..self.out_c {
                let out_base = (n * self.out_c + oc) * h * w;
                let mut db = 0.0;
                for v in &g.data[out_base..out_base + h * w] {
                    db += v;
                }
                self.db[oc] += db;
                for ic in 0..self.in_c {
                    let in_base = (n * self.in_c + ic) * h * w;
                    let w_base = (oc * self.in_c + ic) * 9;
                    for dy in 0..3usize {
                        for dx_k in 0..3usize {
                            let wv = f64::from(self.w[w_base + dy * 3 + dx_k]);
                            let mut dw_acc = 0.0;
                            let y0 = 1usize.saturating_sub(dy);
                            let y1 = (h + 1 - dy).min(h);
                            let x0 = 1usize.saturating_sub(dx_k);
                            let x1 = (w + 1 - dx_k).min(w);
                            for yy in y0..y1 {
                                let iy = yy + dy - 1;
                                let src = in_base + iy * w;
                                let dst = out_base + yy * w;
                                for xx in x0..x1 {
                                    let ix = xx + dx_k - 1;
                                    let gv = g.data[dst + xx];
                                    dw_acc += gv * x.data[src + ix];
                                    dx.data[src + ix] += gv * wv;
                                }
                            }
                            self.dw[w_base + dy * 3 + dx_k] += dw_acc;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f64])) {
        f(&mut self.w, &mut self.dw);
        f(&mut self.b, &mut self.db);
    }
}

/// Per-channel batch normalization over N x H x W. Running statistics use
/// the biased (population) variance, the same quantity normalizing the
/// batch, and are stored as f32 so they serialize exactly.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Act4, Vec<f64>)>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            dgamma: vec![0.0; c],
            dbeta: vec![0.0; c],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: Act4) -> Act4 {
        let m = (x.n * x.h * x.w) as f64;
        let plane = x.h * x.w;
        let mut y = Act4::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = Act4::zeros(x.n, x.c, x.h, x.w);
        let mut invstds = vec![0.0; self.c];
        for c in 0..self.c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..x.n {
                let base = (n * x.c + c) * plane;
                for &v in &x.data[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let invstd = 1.0 / (var + self.eps).sqrt();
            invstds[c] = invstd;
            self.running_mean[c] =
                ((1.0 - self.momentum) * f64::from(self.running_mean[c]) + self.momentum * mean)
                    as f32;
            self.running_var[c] =
                ((1.0 - self.momentum) * f64::from(self.running_var[c]) + self.momentum * var)
                    as f32;
            let gamma = f64::from(self.gamma[c]);
            let beta = f64::from(self.beta[c]);
            for n in 0..x.n {
                let base = (n * x.c + c) * plane;
                for i in base..base + plane {
                    let xh = (x.data[i] - mean) * invstd;
                    xhat.data[i] = xh;
                    y.data[i] = gamma * xh + beta;
                }
            }
        }
        self.cache = Some((xhat, invstds));
        y
    }

    pub fn forward_eval(&self, x: &Act4) -> Act4 {
        let plane = x.h * x.w;
        let mut y = Act4::zeros(x.n, x.c, x.h, x.w);
        for c in 0..self.c {
            let mean = f64::from(self.running_mean[c]);
            let invstd = 1.0 / (f64::from(self.running_var[c]) + self.eps).sqrt();
            let gamma = f64::from(self.gamma[c]);
            let beta = f64::from(self.beta[c]);
            for n in 0..x.n {
                let base = (n * x.c + c) * plane;
                for i in base..base + plane {
                    y.data[i] = gamma * (x.data[i] - mean) * invstd + beta;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, g: &Act4) -> Act4 {
        let (xhat, invstds) = self.cache.take().expect("bn backward without forward");
        let m = (g.n * g.h * g.w) as f64;
        let plane = g.h * g.w;
        let mut dx = Act4::zeros(g.n, g.c, g.h, g.w);
        for c in 0..self.c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..g.n {
                let base = (n * g.c + c) * plane;
                for i in base..base + plane {
                    sum_g += g.data[i];
                    sum_gx += g.data[i] * xhat.data[i];
                }
            }
            self.dbeta[c] += sum_g;
            self.dgamma[c] += sum_gx;
            let gamma = f64::from(self.gamma[c]);
            let k = gamma * invstds[c] / m;
            for n in 0..g.n {
                let base = (n * g.c + c) * plane;
                for i in base..base + plane {
                    dx.data[i] = k * (m * g.data[i] - sum_g - xhat.data[i] * sum_gx);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f64])) {
        f(&mut self.gamma, &mut self.dgamma);
        f(&mut self.beta, &mut self.dbeta);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward_train(&mut self, mut x: Act4) -> Act4 {
        let mask = x.data.iter().map(|&v| v > 0.0).collect();
        for v in &mut x.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.mask = Some(mask);
        x
    }

    pub fn forward_eval(&self, x: &Act4) -> Act4 {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        y
    }

    pub fn backward(&mut self, g: &Act4) -> Act4 {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut dx = g.clone();
        for (v, &keep) in dx.data.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        dx
    }
}

/// 2x2 max pooling, stride 2, ceil mode: odd edges pool over the partial
/// window, so any input size down to 1 survives four pools.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, usize, usize, usize, usize)>,
}

pub fn pooled_size(len: usize) -> usize {
    len.div_ceil(2)
}

impl MaxPool2 {
    fn compute(&self, x: &Act4) -> (Act4, Vec<usize>) {
        let (h2, w2) = (pooled_size(x.h), pooled_size(x.w));
        let mut y = Act4::zeros(x.n, x.c, h2, w2);
        let mut arg = vec![0usize; x.n * x.c * h2 * w2];
        let mut oi = 0;
        for n in 0..x.n {
            for c in 0..x.c {
                let base = (n * x.c + c) * x.h * x.w;
                for i in 0..h2 {
                    for j in 0..w2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for yy in 2 * i..(2 * i + 2).min(x.h) {
                            for xx in 2 * j..(2 * j + 2).min(x.w) {
                                let idx = base + yy * x.w + xx;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data[oi] = best;
                        arg[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn forward_train(&mut self, x: Act4) -> Act4 {
        let (y, arg) = self.compute(&x);
        self.argmax = Some((arg, x.n, x.c, x.h, x.w));
        y
    }

    pub fn forward_eval(&self, x: &Act4) -> Act4 {
        self.compute(x).0
    }

    pub fn backward(&mut self, g: &Act4) -> Act4 {
        let (arg, n, c, h, w) = self.argmax.take().expect("pool backward without forward");
        let mut dx = Act4::zeros(n, c, h, w);
        for (gi, &src) in arg.iter().enumerate() {
            dx.data[src] += g.data[gi];
        }
        dx
    }
}

/// Inverted dropout: kept units scale by 1/(1-p) so eval needs no rescale.
/// p = 0 is an exact identity and draws nothing from the stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward_train(&mut self, mut x: Act4, rng: &mut ChaCha8Rng) -> Act4 {
        if self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let scale = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = x
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { scale })
            .collect();
        for (v, m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward(&mut self, g: &Act4) -> Act4 {
        match self.mask.take() {
            None => g.clone(),
            Some(mask) => {
                let mut dx = g.clone();
                for (v, m) in dx.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                dx
            }
        }
    }
}

/// Fully connected layer, weights [out][in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_d: usize,
    pub out_d: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    cache: Option<Act2>,
}

impl Linear {
    pub fn new(in_d: usize, out_d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_d,
            out_d,
            w: he_normal(rng, in_d, out_d * in_d),
            b: vec![0.0; out_d],
            dw: vec![0.0; out_d * in_d],
            db: vec![0.0; out_d],
            cache: None,
        }
    }

    fn compute(&self, x: &Act2) -> Act2 {
        let mut y = Act2::zeros(x.n, self.out_d);
        for n in 0..x.n {
            let xrow = &x.data[n * self.in_d..(n + 1) * self.in_d];
            let yrow = &mut y.data[n * self.out_d..(n + 1) * self.out_d];
            for (o, yv) in yrow.iter_mut().enumerate() {
                let wrow = &self.w[o * self.in_d..(o + 1) * self.in_d];
                let mut acc = f64::from(self.b[o]);
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += f64::from(*wv) * xv;
                }
                *yv = acc;
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: Act2) -> Act2 {
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Act2) -> Act2 {
        self.compute(x)
    }

    pub fn backward(&mut self, g: &Act2) -> Act2 {
        let x = self.cache.take().expect("linear backward without forward");
        let mut dx = Act2::zeros(x.n, self.in_d);
        for n in 0..x.n {
            let xrow = &x.data[n * self.in_d..(n + 1) * self.in_d];
            let grow = &g.data[n * self.out_d..(n + 1) * self.out_d];
            let dxrow = &mut dx.data[n * self.in_d..(n + 1) * self.in_d];
            for (o, &gv) in grow.iter().enumerate() {
                self.db[o] += gv;
                let wrow = &self.w[o * self.in_d..(o + 1) * self.in_d];
                let dwrow = &mut self.dw[o * self.in_d..(o + 1) * self.in_d];
                for i in 0..self.in_d {
                    dwrow[i] += gv * xrow[i];
                    dxrow[i] += gv * f64::from(wrow[i]);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f64])) {
        f(&mut self.w, &mut self.dw);
        f(&mut self.b, &mut self.db);
    }
}
