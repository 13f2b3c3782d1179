//! Convolutional actor-critic with a flat parameter vector and hand-written
//! backpropagation. Activations are channels-last (`batch × h × w × c`).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Input `(height, width, channels)`.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub hidden: usize,
}

impl NetSpec {
    /// Three-layer conv extractor (32@8/4, 64@4/2, 64@3/1) and a 512-unit layer.
    pub fn nature(height: usize, width: usize) -> Self {
        NetSpec {
            input: [height, width, 3],
            convs: vec![
                ConvSpec { filters: 32, kernel: 8, stride: 4 },
                ConvSpec { filters: 64, kernel: 4, stride: 2 },
                ConvSpec { filters: 64, kernel: 3, stride: 1 },
            ],
            hidden: 512,
        }
    }

    /// Small network on 8×8 inputs used for gradient verification.
    pub fn reduced() -> Self {
        NetSpec {
            input: [8, 8, 3],
            convs: vec![
                ConvSpec { filters: 4, kernel: 3, stride: 1 },
                ConvSpec { filters: 5, kernel: 2, stride: 2 },
                ConvSpec { filters: 4, kernel: 2, stride: 1 },
            ],
            hidden: 8,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }
    fn out_len(&self) -> usize {
        self.positions() * self.out_c
    }
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    convs: Vec<(ConvShape, usize, usize)>,
    features: usize,
    fc: (usize, usize),
    actor: (usize, usize),
    critic: (usize, usize),
    log_std: usize,
    total: usize,
}

impl Layout {
    fn new(spec: &NetSpec) -> Result<Self> {
        let [mut h, mut w, mut c] = spec.input;
        if h == 0 || w == 0 || c == 0 || spec.hidden == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let mut off = 0;
        let mut convs = Vec::new();
        for cs in &spec.convs {
            if cs.kernel == 0 || cs.stride == 0 || cs.filters == 0 || cs.kernel > h || cs.kernel > w {
                return Err(Error::Config(format!("conv layer {cs:?} does not fit a {h}x{w} input")));
            }
            let shape = ConvShape {
                in_h: h,
                in_w: w,
                in_c: c,
                k: cs.kernel,
                stride: cs.stride,
                out_c: cs.filters,
                out_h: (h - cs.kernel) / cs.stride + 1,
                out_w: (w - cs.kernel) / cs.stride + 1,
            };
            let wo = off;
            off += shape.patch() * shape.out_c;
            let bo = off;
            off += shape.out_c;
            convs.push((shape, wo, bo));
            (h, w, c) = (shape.out_h, shape.out_w, shape.out_c);
        }
        let features = h * w * c;
        let mut dense = |inp: usize, out: usize| {
            let wo = off;
            off += inp * out;
            let bo = off;
            off += out;
            (wo, bo)
        };
        let fc = dense(features, spec.hidden);
        let actor = dense(spec.hidden, ACTION_DIM);
        let critic = dense(spec.hidden, 1);
        let log_std = off;
        off += ACTION_DIM;
        Ok(Layout {
            convs,
            features,
            fc,
            actor,
            critic,
            log_std,
            total: off,
        })
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    cols: Vec<Vec<T>>,
    conv_out: Vec<Vec<T>>,
    hidden: Vec<T>,
    /// `batch × 2` action means.
    pub means: Vec<T>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T> {
    pub spec: NetSpec,
    layout: Layout,
    pub params: Vec<T>,
}

fn orthogonal(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Vec<f64> {
    let (big, small) = (fan_in.max(fan_out), fan_in.min(fan_out));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    // Row-major `fan_in × fan_out`.
    let mut out = vec![0.0; fan_in * fan_out];
    for i in 0..fan_in {
        for j in 0..fan_out {
            let v = if fan_in >= fan_out { q[(i, j)] } else { q[(j, i)] };
            out[i * fan_out + j] = gain * v;
        }
    }
    out
}

fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn bias_grad<T: Real>(d: &[T], width: usize, g: &mut [T]) {
    for row in d.chunks_exact(width) {
        for (gv, dv) in g.iter_mut().zip(row) {
            *gv += *dv;
        }
    }
}

fn mask_by<T: Real>(d: &mut [T], activation: &[T]) {
    for (dv, a) in d.iter_mut().zip(activation) {
        if *a <= T::ZERO {
            *dv = T::ZERO;
        }
    }
}

fn im2col<T: Real>(input: &[T], s: &ConvShape, batch: usize) -> Vec<T> {
    let patch = s.patch();
    let run = s.k * s.in_c;
    let mut cols = vec![T::ZERO; batch * s.positions() * patch];
    let mut row = 0;
    for b in 0..batch {
        let base = b * s.in_len();
        for oy in 0..s.out_h {
            for ox in 0..s.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..s.k {
                    let src = base + ((oy * s.stride + ky) * s.in_w + ox * s.stride) * s.in_c;
                    dst[ky * run..(ky + 1) * run].copy_from_slice(&input[src..src + run]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], s: &ConvShape, batch: usize) -> Vec<T> {
    let patch = s.patch();
    let run = s.k * s.in_c;
    let mut dinput = vec![T::ZERO; batch * s.in_len()];
    let mut row = 0;
    for b in 0..batch {
        let base = b * s.in_len();
        for oy in 0..s.out_h {
            for ox in 0..s.out_w {
                let src = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..s.k {
                    let dst = base + ((oy * s.stride + ky) * s.in_w + ox * s.stride) * s.in_c;
                    for (d, v) in dinput[dst..dst + run].iter_mut().zip(&src[ky * run..(ky + 1) * run]) {
                        *d += *v;
                    }
                }
                row += 1;
            }
        }
    }
    dinput
}

impl<T: Real> PolicyNet<T> {
    /// All parameters zero (including log-std, i.e. unit standard deviation).
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        let layout = Layout::new(&spec)?;
        Ok(PolicyNet {
            params: vec![T::ZERO; layout.total],
            spec,
            layout,
        })
    }

    /// Orthogonal initialization: gain √2 for hidden layers, 0.01 for the
    /// action head, 1 for the value head; zero biases and log-std.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks: Vec<(usize, usize, usize, f64)> = net
            .layout
            .convs
            .iter()
            .map(|(s, wo, _)| (*wo, s.patch(), s.out_c, std::f64::consts::SQRT_2))
            .collect();
        let l = &net.layout;
        blocks.push((l.fc.0, l.features, net.spec.hidden, std::f64::consts::SQRT_2));
        blocks.push((l.actor.0, net.spec.hidden, ACTION_DIM, 0.01));
        blocks.push((l.critic.0, net.spec.hidden, 1, 1.0));
        for (off, fan_in, fan_out, gain) in blocks {
            let w = orthogonal(&mut rng, fan_in, fan_out, gain);
            for (p, v) in net.params[off..off + w.len()].iter_mut().zip(w) {
                *p = T::from_f64(v);
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: NetSpec, params: Vec<T>) -> Result<Self> {
        let layout = Layout::new(&spec)?;
        if params.len() != layout.total {
            return Err(Error::Dimension {
                expected: format!("{} parameters", layout.total),
                got: format!("{}", params.len()),
            });
        }
        Ok(PolicyNet { spec, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn cast<U: Real>(&self) -> PolicyNet<U> {
        PolicyNet {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
        }
    }

    pub fn log_std(&self) -> [T; ACTION_DIM] {
        let o = self.layout.log_std;
        [self.params[o], self.params[o + 1]]
    }

    /// Index range of the action and value heads plus log-std.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.layout.actor.0..self.layout.total
    }

    /// Index range of the first convolution's weights.
    pub fn first_conv_range(&self) -> std::ops::Range<usize> {
        match self.layout.convs.first() {
            Some((_, wo, bo)) => *wo..*bo,
            None => self.layout.fc.0..self.layout.fc.1,
        }
    }

    pub fn zero_heads(&mut self) {
        let (a, c) = (self.layout.actor.0, self.layout.log_std);
        for p in &mut self.params[a..c] {
            *p = T::ZERO;
        }
    }

    /// Single observation → (action mean, value).
    pub fn forward(&self, obs: &[T]) -> Result<([T; ACTION_DIM], T)> {
        let f = self.forward_batch(obs, 1)?;
        Ok(([f.means[0], f.means[1]], f.values[0]))
    }

    pub fn forward_batch(&self, obs: &[T], batch: usize) -> Result<ForwardCache<T>> {
        let in_len = self.spec.input_len();
        if obs.len() != in_len * batch {
            return Err(Error::Dimension {
                expected: format!("{batch}x{:?}", self.spec.input),
                got: format!("{} values", obs.len()),
            });
        }
        let p = &self.params;
        let mut cols = Vec::with_capacity(self.layout.convs.len());
        let mut conv_out: Vec<Vec<T>> = Vec::with_capacity(self.layout.convs.len());
        for (s, wo, bo) in &self.layout.convs {
            let input: &[T] = conv_out.last().map(Vec::as_slice).unwrap_or(obs);
            let c = im2col(input, s, batch);
            let rows = batch * s.positions();
            let mut out = vec![T::ZERO; rows * s.out_c];
            T::gemm(rows, s.patch(), s.out_c, &c, false, &p[*wo..*bo], false, &mut out, T::ZERO);
            add_bias(&mut out, &p[*bo..*bo + s.out_c]);
            relu_inplace(&mut out);
            cols.push(c);
            conv_out.push(out);
        }
        let features: &[T] = conv_out.last().map(Vec::as_slice).unwrap_or(obs);
        let (f, h) = (self.layout.features, self.spec.hidden);
        let mut hidden = vec![T::ZERO; batch * h];
        let (wo, bo) = self.layout.fc;
        T::gemm(batch, f, h, features, false, &p[wo..bo], false, &mut hidden, T::ZERO);
        add_bias(&mut hidden, &p[bo..bo + h]);
        relu_inplace(&mut hidden);

        let mut means = vec![T::ZERO; batch * ACTION_DIM];
        let (wo, bo) = self.layout.actor;
        T::gemm(batch, h, ACTION_DIM, &hidden, false, &p[wo..bo], false, &mut means, T::ZERO);
        add_bias(&mut means, &p[bo..bo + ACTION_DIM]);
        let mut values = vec![T::ZERO; batch];
        let (wo, bo) = self.layout.critic;
        T::gemm(batch, h, 1, &hidden, false, &p[wo..bo], false, &mut values, T::ZERO);
        add_bias(&mut values, &p[bo..bo + 1]);

        Ok(ForwardCache {
            batch,
            cols,
            conv_out,
            hidden,
            means,
            values,
        })
    }

    /// Parameter gradient given the loss gradients with respect to the
    /// action means (`batch × 2`), values (`batch`) and log-std.
    pub fn backward(
        &self,
        obs: &[T],
        cache: &ForwardCache<T>,
        d_means: &[T],
        d_values: &[T],
        d_log_std: [T; ACTION_DIM],
    ) -> Vec<T> {
        let batch = cache.batch;
        let p = &self.params;
        let h = self.spec.hidden;
        let mut g = vec![T::ZERO; self.layout.total];

        // Heads.
        let (wo, bo) = self.layout.actor;
        T::gemm(h, batch, ACTION_DIM, &cache.hidden, true, d_means, false, &mut g[wo..bo], T::ZERO);
        bias_grad(d_means, ACTION_DIM, &mut g[bo..bo + ACTION_DIM]);
        let mut d_hidden = vec![T::ZERO; batch * h];
        T::gemm(batch, ACTION_DIM, h, d_means, false, &p[wo..bo], true, &mut d_hidden, T::ZERO);
        let (wo, bo) = self.layout.critic;
        T::gemm(h, batch, 1, &cache.hidden, true, d_values, false, &mut g[wo..bo], T::ZERO);
        bias_grad(d_values, 1, &mut g[bo..bo + 1]);
        T::gemm(batch, 1, h, d_values, false, &p[wo..bo], true, &mut d_hidden, T::ONE);
        g[self.layout.log_std] = d_log_std[0];
        g[self.layout.log_std + 1] = d_log_std[1];

        // Feature layer.
        mask_by(&mut d_hidden, &cache.hidden);
        let f = self.layout.features;
        let features: &[T] = cache.conv_out.last().map(Vec::as_slice).unwrap_or(obs);
        let (wo, bo) = self.layout.fc;
        T::gemm(f, batch, h, features, true, &d_hidden, false, &mut g[wo..bo], T::ZERO);
        bias_grad(&d_hidden, h, &mut g[bo..bo + h]);
        if self.layout.convs.is_empty() {
            return g;
        }
        let mut d_out = vec![T::ZERO; batch * f];
        T::gemm(batch, h, f, &d_hidden, false, &p[wo..bo], true, &mut d_out, T::ZERO);

        // Convolutions, last to first.
        for (li, (s, wo, bo)) in self.layout.convs.iter().enumerate().rev() {
            mask_by(&mut d_out, &cache.conv_out[li]);
            let rows = batch * s.positions();
            T::gemm(s.patch(), rows, s.out_c, &cache.cols[li], true, &d_out, false, &mut g[*wo..*bo], T::ZERO);
            bias_grad(&d_out, s.out_c, &mut g[*bo..*bo + s.out_c]);
            if li > 0 {
                let mut d_cols = vec![T::ZERO; rows * s.patch()];
                T::gemm(rows, s.out_c, s.patch(), &d_out, false, &p[*wo..*bo], true, &mut d_cols, T::ZERO);
                d_out = col2im(&d_cols, s, batch);
            }
        }
        debug_assert!(self.layout.convs.iter().all(|(s, _, _)| s.out_len() > 0));
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nature_shapes_on_downscaled_input() {
        let net = PolicyNet::<f32>::zeros(NetSpec::nature(40, 80)).unwrap();
        assert_eq!(net.layout.features, 6 * 64);
        let net = PolicyNet::<f32>::zeros(NetSpec::nature(80, 160)).unwrap();
        // 80×160 → 19×39 → 8×18 → 6×16.
        assert_eq!(net.layout.features, 6 * 16 * 64);
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let mut net = PolicyNet::<f64>::init(NetSpec::reduced(), 3).unwrap();
        net.zero_heads();
        let obs: Vec<f64> = (0..192).map(|i| (i % 7) as f64 / 7.0).collect();
        let (m, v) = net.forward(&obs).unwrap();
        assert_eq!(m, [0.0, 0.0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let net = PolicyNet::<f32>::init(NetSpec::nature(40, 80), 1).unwrap();
        let obs: Vec<f32> = (0..40 * 80 * 3).map(|i| ((i * 31) % 255) as f32 / 255.0).collect();
        let a = net.forward(&obs).unwrap();
        let b = net.forward(&obs).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().all(|m| m.is_finite()) && a.1.is_finite());
        assert!(matches!(net.forward(&obs[1..]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let net = PolicyNet::<f64>::init(NetSpec::reduced(), 9).unwrap();
        let obs: Vec<f64> = (0..3 * 192).map(|i| ((i * 17) % 23) as f64 / 23.0).collect();
        let f = net.forward_batch(&obs, 3).unwrap();
        for b in 0..3 {
            let (m, v) = net.forward(&obs[b * 192..(b + 1) * 192]).unwrap();
            assert!((m[0] - f.means[2 * b]).abs() < 1e-12);
            assert!((m[1] - f.means[2 * b + 1]).abs() < 1e-12);
            assert!((v - f.values[b]).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = orthogonal(&mut rng, 12, 4, 1.0);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..12).map(|i| w[i * 4 + a] * w[i * 4 + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
