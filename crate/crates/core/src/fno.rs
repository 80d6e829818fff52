//! Fourier neural operator for the coefficient-to-corrector map, with
//! hand-written reverse-mode gradients and an Adam trainer.
//!
//! Architecture: pointwise affine lift `3 -> width`, four Fourier layers
//! `v <- gelu(W v + K v + b)`, and a pointwise projection
//! `width -> width -> 2` with a GeLU in between. `K` multiplies each retained
//! Fourier mode (`k1 in 0..=kmax`, `k2 in -kmax..=kmax`) by a complex
//! `width x width` matrix and maps back with the real inverse of
//! [`crate::fft`], so outputs are real by construction.
//!
//! Activations are stored channel-major (`channel * n^2 + node`).

use std::time::Instant;

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Record;
use crate::error::{Error, Result};
use crate::fft::{mode_count, retained_modes, Fft2};
use crate::grid::{PeriodicGrid, SpectralDiff};
use crate::homogenize::{abar_from_correctors, rae};
use crate::metrics::{self, Corrector, ErrorReport};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;

pub const IN_CHANNELS: usize = 3;
pub const OUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FnoConfig {
    pub width: usize,
    pub modes: usize,
    pub layers: usize,
    /// Standardise each input channel with training-set statistics.
    pub normalize_inputs: bool,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self { width: 16, modes: 12, layers: 4, normalize_inputs: false }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.layers != 4 {
            return Err(Error::Config(format!("the network has exactly 4 Fourier layers, got {}", self.layers)));
        }
        Ok(())
    }

    /// `kmax < n / 2` at resolution `n`.
    pub fn check_resolution(&self, n: usize) -> Result<()> {
        if 2 * self.modes >= n {
            return Err(Error::Resolution { kmax: self.modes, n });
        }
        Ok(())
    }

    /// Closed-form number of real parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, m) = (self.width, mode_count(self.modes));
        let lift = IN_CHANNELS * d + d;
        let layer = 2 * m * d * d + d * d + d;
        let proj = d * d + d + OUT_CHANNELS * d + OUT_CHANNELS;
        lift + self.layers * layer + proj
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 20, epochs: 50, seed: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierLayer<T> {
    /// Interleaved `(re, im)` of `P[m][l][j]` at `((m * d + l) * d + j) * 2`.
    pub spectral: Vec<T>,
    /// `d x d`, row-major `[out][in]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnoParams<T> {
    pub config: FnoConfig,
    /// Per-channel input shift and scale (`(x - shift) / scale`).
    pub input_shift: [T; 3],
    pub input_scale: [T; 3],
    pub lift_weight: Vec<T>,
    pub lift_bias: Vec<T>,
    pub layers: Vec<FourierLayer<T>>,
    pub proj1_weight: Vec<T>,
    pub proj1_bias: Vec<T>,
    pub proj2_weight: Vec<T>,
    pub proj2_bias: Vec<T>,
}

fn uniform<T: Scalar>(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..len).map(|_| T::lit(rng.gen_range(lo..hi))).collect()
}

impl<T: Scalar> FnoParams<T> {
    /// All parameters zero, unit input scale.
    pub fn zeros(config: &FnoConfig) -> Self {
        let (d, m) = (config.width, mode_count(config.modes));
        let z = |len: usize| vec![T::zero(); len];
        Self {
            config: config.clone(),
            input_shift: [T::zero(); 3],
            input_scale: [T::one(); 3],
            lift_weight: z(d * IN_CHANNELS),
            lift_bias: z(d),
            layers: (0..config.layers)
                .map(|_| FourierLayer { spectral: z(2 * m * d * d), weight: z(d * d), bias: z(d) })
                .collect(),
            proj1_weight: z(d * d),
            proj1_bias: z(d),
            proj2_weight: z(OUT_CHANNELS * d),
            proj2_bias: z(OUT_CHANNELS),
        }
    }

    /// Spectral entries `U[0, 1) / d^2`; pointwise maps `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: &FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = rng::stream(seed, Domain::FnoInit, 0);
        let d = config.width;
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        p.lift_weight = uniform(&mut rng, d * IN_CHANNELS, -fan(IN_CHANNELS), fan(IN_CHANNELS));
        p.lift_bias = uniform(&mut rng, d, -fan(IN_CHANNELS), fan(IN_CHANNELS));
        let scale = 1.0 / (d * d) as f64;
        for layer in p.layers.iter_mut() {
            layer.spectral = uniform(&mut rng, layer.spectral.len(), 0.0, scale);
            layer.weight = uniform(&mut rng, d * d, -fan(d), fan(d));
            layer.bias = uniform(&mut rng, d, -fan(d), fan(d));
        }
        p.proj1_weight = uniform(&mut rng, d * d, -fan(d), fan(d));
        p.proj1_bias = uniform(&mut rng, d, -fan(d), fan(d));
        p.proj2_weight = uniform(&mut rng, OUT_CHANNELS * d, -fan(d), fan(d));
        p.proj2_bias = uniform(&mut rng, OUT_CHANNELS, -fan(d), fan(d));
        Ok(p)
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<T>)> {
        let mut v = vec![("lift.weight".to_string(), &self.lift_weight), ("lift.bias".to_string(), &self.lift_bias)];
        for (t, l) in self.layers.iter().enumerate() {
            v.push((format!("layer{t}.spectral"), &l.spectral));
            v.push((format!("layer{t}.weight"), &l.weight));
            v.push((format!("layer{t}.bias"), &l.bias));
        }
        v.push(("proj1.weight".into(), &self.proj1_weight));
        v.push(("proj1.bias".into(), &self.proj1_bias));
        v.push(("proj2.weight".into(), &self.proj2_weight));
        v.push(("proj2.bias".into(), &self.proj2_bias));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = vec![&mut self.lift_weight, &mut self.lift_bias];
        for l in self.layers.iter_mut() {
            v.push(&mut l.spectral);
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.proj1_weight);
        v.push(&mut self.proj1_bias);
        v.push(&mut self.proj2_weight);
        v.push(&mut self.proj2_bias);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> FnoParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        FnoParams {
            config: self.config.clone(),
            input_shift: self.input_shift.map(|x| U::lit(x.as_f64())),
            input_scale: self.input_scale.map(|x| U::lit(x.as_f64())),
            lift_weight: c(&self.lift_weight),
            lift_bias: c(&self.lift_bias),
            layers: self
                .layers
                .iter()
                .map(|l| FourierLayer { spectral: c(&l.spectral), weight: c(&l.weight), bias: c(&l.bias) })
                .collect(),
            proj1_weight: c(&self.proj1_weight),
            proj1_bias: c(&self.proj1_bias),
            proj2_weight: c(&self.proj2_weight),
            proj2_bias: c(&self.proj2_bias),
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: &FnoConfig, shift: [f64; 3], scale: [f64; 3], named: &[(String, Vec<f64>)]) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        p.input_shift = shift.map(T::lit);
        p.input_scale = scale.map(T::lit);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != named.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", names.len(), named.len())));
        }
        for ((slot, want), (name, values)) in p.tensors_mut().into_iter().zip(&names).zip(named) {
            if want != name || slot.len() != values.len() {
                return Err(Error::Format(format!(
                    "tensor {name} ({} values) does not match {want} ({} values)",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values.iter().map(|&v| T::lit(v)).collect();
        }
        Ok(p)
    }
}

#[inline]
fn gelu<T: Scalar>(z: T) -> T {
    T::lit(0.5) * z * (T::one() + (z * T::FRAC_1_SQRT_2()).error_fn())
}

#[inline]
fn gelu_prime<T: Scalar>(z: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (z * T::FRAC_1_SQRT_2()).error_fn());
    let pdf = (-T::lit(0.5) * z * z).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + z * pdf
}

/// Intermediate values kept by the forward pass for the backward pass.
#[derive(Clone, Debug)]
struct Tape<T> {
    input: Vec<T>,
    /// `v_0 .. v_T`, each `d x N`.
    v: Vec<Vec<T>>,
    /// Pre-activations of the Fourier layers.
    z: Vec<Vec<T>>,
    /// Retained modes of `v_t`, `d x M`.
    modes: Vec<Vec<Complex<T>>>,
    proj_pre: Vec<T>,
    proj_hidden: Vec<T>,
    out: Vec<T>,
}

/// FFT plans and scratch buffers for one resolution.
#[derive(Clone, Debug)]
pub struct Workspace<T: Scalar> {
    n: usize,
    fft: Fft2<T>,
    diff: SpectralDiff<T>,
    tape: Tape<T>,
    mode_a: Vec<Complex<T>>,
    mode_b: Vec<Complex<T>>,
    field: Vec<T>,
    grads: [Vec<T>; 2],
    vbar: Vec<T>,
    vbar_next: Vec<T>,
    zbar: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(config: &FnoConfig, n: usize) -> Result<Self> {
        let grid = PeriodicGrid::new(n)?;
        config.check_resolution(n)?;
        let len = grid.len();
        let (d, m) = (config.width, mode_count(config.modes));
        let zero = Complex::new(T::zero(), T::zero());
        let dn = vec![T::zero(); d * len];
        Ok(Self {
            n,
            fft: Fft2::new(n),
            diff: SpectralDiff::new(grid)?,
            tape: Tape {
                input: vec![T::zero(); IN_CHANNELS * len],
                v: vec![dn.clone(); config.layers + 1],
                z: vec![dn.clone(); config.layers],
                modes: vec![vec![zero; d * m]; config.layers],
                proj_pre: dn.clone(),
                proj_hidden: dn.clone(),
                out: vec![T::zero(); OUT_CHANNELS * len],
            },
            mode_a: vec![zero; d * m],
            mode_b: vec![zero; d * m],
            field: vec![T::zero(); len],
            grads: [vec![T::zero(); len], vec![T::zero(); len]],
            vbar: dn.clone(),
            vbar_next: dn.clone(),
            zbar: dn,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Output of the last forward pass, `chi_1` then `chi_2`.
    pub fn output(&self) -> &[T] {
        &self.tape.out
    }
}

/// `out[c] = bias[c] + sum_k w[c][k] x[k]` over `N` nodes.
fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], rows: usize, cols: usize, len: usize, out: &mut [T]) {
    for r in 0..rows {
        out[r * len..(r + 1) * len].iter_mut().for_each(|v| *v = b[r]);
    }
    T::gemm(rows, cols, len, T::one(), w, false, x, false, T::one(), out);
}

/// `(re, im)` of one spectral entry.
#[inline]
fn entry<T: Scalar>(p: &[T], idx: usize) -> Complex<T> {
    Complex::new(p[2 * idx], p[2 * idx + 1])
}

fn check_finite<T: Scalar>(v: &[T], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer))
    }
}

impl<T: Scalar> FnoParams<T> {
    /// Forward pass on coefficient channels `(a11, a12, a22)`, each `n^2`
    /// long; the prediction is left in [`Workspace::output`].
    pub fn forward(&self, input: &[T], ws: &mut Workspace<T>) -> Result<()> {
        let cfg = &self.config;
        let n = ws.n;
        let len = n * n;
        let (d, kmax) = (cfg.width, cfg.modes);
        let m = mode_count(kmax);
        if input.len() != IN_CHANNELS * len {
            return Err(Error::InvalidArgument(format!("expected {} input values, got {}", IN_CHANNELS * len, input.len())));
        }
        let tape = &mut ws.tape;
        for c in 0..IN_CHANNELS {
            let (s, k) = (self.input_shift[c], self.input_scale[c]);
            for q in 0..len {
                tape.input[c * len + q] = (input[c * len + q] - s) / k;
            }
        }
        affine(&self.lift_weight, &self.lift_bias, &tape.input, d, IN_CHANNELS, len, &mut tape.v[0]);
        check_finite(&tape.v[0], 0)?;
        for (t, layer) in self.layers.iter().enumerate() {
            let (head, tail) = tape.v.split_at_mut(t + 1);
            let v = &head[t];
            let next = &mut tail[0];
            let modes = &mut tape.modes[t];
            for j in 0..d {
                ws.fft.forward_modes(&v[j * len..(j + 1) * len], kmax, &mut modes[j * m..(j + 1) * m]);
            }
            // Y[l][m] = sum_j P[m][l][j] X[j][m]
            for mi in 0..m {
                for l in 0..d {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for j in 0..d {
                        acc += entry(&layer.spectral, (mi * d + l) * d + j) * modes[j * m + mi];
                    }
                    ws.mode_a[l * m + mi] = acc;
                }
            }
            let z = &mut tape.z[t];
            affine(&layer.weight, &layer.bias, v, d, d, len, z);
            for l in 0..d {
                ws.fft.inverse_modes(&ws.mode_a[l * m..(l + 1) * m], kmax, &mut ws.field);
                for (zq, f) in z[l * len..(l + 1) * len].iter_mut().zip(&ws.field) {
                    *zq += *f;
                }
            }
            for (o, &zq) in next.iter_mut().zip(z.iter()) {
                *o = gelu(zq);
            }
            check_finite(next, t + 1)?;
        }
        let last = &tape.v[cfg.layers];
        affine(&self.proj1_weight, &self.proj1_bias, last, d, d, len, &mut tape.proj_pre);
        for (h, &z) in tape.proj_hidden.iter_mut().zip(&tape.proj_pre) {
            *h = gelu(z);
        }
        affine(&self.proj2_weight, &self.proj2_bias, &tape.proj_hidden, OUT_CHANNELS, d, len, &mut tape.out);
        check_finite(&tape.out, cfg.layers + 1)?;
        Ok(())
    }

    /// Adds `d loss / d params` to `grads`, where `out_bar` (`2 n^2`) is the
    /// loss gradient with respect to the last forward output.
    fn backward(&self, out_bar: &[T], ws: &mut Workspace<T>, grads: &mut FnoParams<T>) {
        let cfg = &self.config;
        let n = ws.n;
        let len = n * n;
        let (d, kmax) = (cfg.width, cfg.modes);
        let m = mode_count(kmax);
        let tape = &ws.tape;
        let one = T::one();

        // projection
        T::gemm(OUT_CHANNELS, len, d, one, out_bar, false, &tape.proj_hidden, true, one, &mut grads.proj2_weight);
        for c in 0..OUT_CHANNELS {
            grads.proj2_bias[c] += out_bar[c * len..(c + 1) * len].iter().copied().sum::<T>();
        }
        T::gemm(d, OUT_CHANNELS, len, one, &self.proj2_weight, true, out_bar, false, T::zero(), &mut ws.zbar);
        for (zb, &z) in ws.zbar.iter_mut().zip(&tape.proj_pre) {
            *zb *= gelu_prime(z);
        }
        T::gemm(d, len, d, one, &ws.zbar, false, &tape.v[cfg.layers], true, one, &mut grads.proj1_weight);
        for c in 0..d {
            grads.proj1_bias[c] += ws.zbar[c * len..(c + 1) * len].iter().copied().sum::<T>();
        }
        T::gemm(d, d, len, one, &self.proj1_weight, true, &ws.zbar, false, T::zero(), &mut ws.vbar);

        let norm = T::one() / T::from_usize_lossy(len);
        let modes_k1 = retained_modes(kmax);
        for t in (0..cfg.layers).rev() {
            let layer = &self.layers[t];
            let g = &mut grads.layers[t];
            for (zb, (&vb, &z)) in ws.zbar.iter_mut().zip(ws.vbar.iter().zip(&tape.z[t])) {
                *zb = vb * gelu_prime(z);
            }
            for c in 0..d {
                g.bias[c] += ws.zbar[c * len..(c + 1) * len].iter().copied().sum::<T>();
            }
            T::gemm(d, len, d, one, &ws.zbar, false, &tape.v[t], true, one, &mut g.weight);
            T::gemm(d, d, len, one, &layer.weight, true, &ws.zbar, false, T::zero(), &mut ws.vbar_next);

            // spectral branch
            for l in 0..d {
                ws.fft.forward_modes(&ws.zbar[l * len..(l + 1) * len], kmax, &mut ws.mode_a[l * m..(l + 1) * m]);
            }
            let x = &tape.modes[t];
            for (mi, &(k1, _)) in modes_k1.iter().enumerate() {
                let c = if k1 == 0 { norm } else { norm + norm };
                for l in 0..d {
                    let yb = ws.mode_a[l * m + mi];
                    let ybc = yb * c;
                    for j in 0..d {
                        let idx = (mi * d + l) * d + j;
                        let pg = ybc * x[j * m + mi].conj();
                        g.spectral[2 * idx] += pg.re;
                        g.spectral[2 * idx + 1] += pg.im;
                    }
                }
                for j in 0..d {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for l in 0..d {
                        acc += entry(&layer.spectral, (mi * d + l) * d + j).conj() * ws.mode_a[l * m + mi];
                    }
                    ws.mode_b[j * m + mi] = acc;
                }
            }
            for j in 0..d {
                ws.fft.inverse_modes(&ws.mode_b[j * m..(j + 1) * m], kmax, &mut ws.field);
                for (vb, f) in ws.vbar_next[j * len..(j + 1) * len].iter_mut().zip(&ws.field) {
                    *vb += *f;
                }
            }
            std::mem::swap(&mut ws.vbar, &mut ws.vbar_next);
        }
        T::gemm(d, len, IN_CHANNELS, one, &ws.vbar, false, &tape.input, true, one, &mut grads.lift_weight);
        for c in 0..d {
            grads.lift_bias[c] += ws.vbar[c * len..(c + 1) * len].iter().copied().sum::<T>();
        }
    }

    /// Per-sample squared `H^1` loss of the forward output against
    /// `(chi, grad)`, with prediction gradients taken spectrally. Adds
    /// `weight * d loss / d params` to `grads` and returns the loss.
    pub fn forward_backward(
        &self,
        input: &[T],
        chi: &[T],
        grad: &[T],
        weight: T,
        ws: &mut Workspace<T>,
        grads: &mut FnoParams<T>,
    ) -> Result<T> {
        self.forward(input, ws)?;
        let len = ws.n * ws.n;
        let area = T::one() / T::from_usize_lossy(len);
        let two_area = area + area;
        let mut out_bar = vec![T::zero(); OUT_CHANNELS * len];
        let mut loss = T::zero();
        for l in 0..OUT_CHANNELS {
            let pred = &ws.tape.out[l * len..(l + 1) * len];
            let ob = &mut out_bar[l * len..(l + 1) * len];
            for q in 0..len {
                let r = pred[q] - chi[l * len + q];
                loss += area * r * r;
                ob[q] = weight * two_area * r;
            }
            let [g1, g2] = &mut ws.grads;
            ws.diff.gradient_into(pred, g1, g2);
            for (dir, gd) in [g1, g2].into_iter().enumerate() {
                let target = &grad[(2 * l + dir) * len..(2 * l + dir + 1) * len];
                for q in 0..len {
                    let s = gd[q] - target[q];
                    loss += area * s * s;
                    gd[q] = weight * two_area * s;
                }
            }
            let [g1, g2] = &ws.grads;
            ws.diff.gradient_adjoint_add(g1, g2, ob);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        self.backward(&out_bar, ws, grads);
        Ok(loss)
    }

    /// Prediction at any admissible resolution `n` (with `kmax < n / 2`).
    pub fn predict(&self, input: &[T], n: usize) -> Result<[Vec<f64>; 2]> {
        let mut ws = Workspace::new(&self.config, n)?;
        self.predict_with(input, &mut ws)
    }

    pub fn predict_with(&self, input: &[T], ws: &mut Workspace<T>) -> Result<[Vec<f64>; 2]> {
        self.forward(input, ws)?;
        let len = ws.n * ws.n;
        let out = ws.output();
        Ok([0, 1].map(|l| out[l * len..(l + 1) * len].iter().map(|v| v.as_f64()).collect()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub first: FnoParams<T>,
    pub second: FnoParams<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &FnoParams<T>) -> Self {
        Self { step: 0, first: FnoParams::zeros(&params.config), second: FnoParams::zeros(&params.config) }
    }

    pub fn update(&mut self, params: &mut FnoParams<T>, grads: &FnoParams<T>, cfg: &TrainConfig) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - T::lit(cfg.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(cfg.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));
        let gs = grads.tensors();
        for (((p, m), v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
            .zip(gs)
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Record fields converted to the training scalar.
pub struct SampleView<T> {
    pub input: Vec<T>,
    pub chi: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> SampleView<T> {
    pub fn from_record(r: &Record) -> Self {
        let c = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect();
        Self { input: c(&r.a), chi: c(&r.chi), grad: c(&r.grad) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each epoch.
    pub train_loss: Vec<f64>,
    pub test_rhe: Vec<f64>,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_rhe\n");
        for (e, (l, r)) in self.train_loss.iter().zip(&self.test_rhe).enumerate() {
            s.push_str(&format!("{},{l:e},{r:e}\n", e + 1));
        }
        s
    }
}

/// Per-channel mean and standard deviation of the training inputs.
pub fn input_statistics(records: &[Record]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0.0;
    for r in records {
        let len = r.a.len() / 3;
        for c in 0..3 {
            for &v in &r.a[c * len..(c + 1) * len] {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += len as f64;
    }
    let mean = sum.map(|s| s / count.max(1.0));
    let mut std = [1.0; 3];
    for c in 0..3 {
        let var = sq[c] / count.max(1.0) - mean[c] * mean[c];
        std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

/// Test-set RHE only (used for checkpoint selection).
pub fn test_rhe<T: Scalar>(params: &FnoParams<T>, records: &[Record], ws: &mut Workspace<T>) -> Result<f64> {
    let grid = PeriodicGrid::new(ws.n)?;
    let mut total = 0.0;
    for r in records {
        let chi = params.predict_with(&r.input(), ws)?;
        let pred = Corrector::with_spectral_gradient(grid, chi)?;
        let truth = r.corrector(grid)?;
        total += metrics::relative_error(&pred, &truth, 2.0)?.ok_or_else(|| Error::ZeroNorm(vec![]))?;
    }
    Ok(total / records.len() as f64)
}

/// Full error report of a model on a record set at the records' resolution.
pub fn evaluate<T: Scalar>(params: &FnoParams<T>, records: &[Record], n: usize) -> Result<ErrorReport> {
    let grid = PeriodicGrid::new(n)?;
    let mut ws = Workspace::new(&params.config, n)?;
    let (mut rhe, mut rwe, mut rae_v, mut srhe, mut srwe) = (vec![], vec![], vec![], vec![], vec![]);
    let mut zero = Vec::new();
    for (k, r) in records.iter().enumerate() {
        r.check_grid(grid)?;
        let chi = params.predict_with(&r.input(), &mut ws)?;
        let a = r.coefficient(grid)?;
        let abar_pred = abar_from_correctors(&a, [&chi[0], &chi[1]])?;
        let pred = Corrector::with_spectral_gradient(grid, chi)?;
        let truth = r.corrector(grid)?;
        let spectral_truth = truth.respectral()?;
        match (
            metrics::relative_error(&pred, &truth, 2.0)?,
            metrics::relative_error(&pred, &truth, 10.0)?,
            metrics::relative_error(&pred, &spectral_truth, 2.0)?,
            metrics::relative_error(&pred, &spectral_truth, 10.0)?,
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => {
                rhe.push(a);
                rwe.push(b);
                srhe.push(c);
                srwe.push(d);
            }
            _ => zero.push(k),
        }
        let abar_true = [[r.abar[0], r.abar[1]], [r.abar[2], r.abar[3]]];
        rae_v.push(rae(&abar_true, &abar_pred, r.a_m, r.a_h)?);
    }
    if !zero.is_empty() {
        return Err(Error::ZeroNorm(zero));
    }
    ErrorReport::from_samples(rhe, rwe, rae_v, &srhe, &srwe)
}

/// Absolute `H^1` quantities of the grid-ambiguity study, averaged over
/// sample pairs that differ only in which side owns boundary nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    /// Mean `|out(open) - out(closed)|_{H^1}`.
    pub output_difference: f64,
    /// Mean `|out - truth|_{H^1}` over both variants.
    pub true_error: f64,
}

impl AmbiguityReport {
    pub fn ratio(&self) -> f64 {
        self.output_difference / self.true_error
    }
}

pub fn grid_ambiguity<T: Scalar>(params: &FnoParams<T>, open: &[Record], closed: &[Record], n: usize) -> Result<AmbiguityReport> {
    if open.len() != closed.len() || open.is_empty() {
        return Err(Error::InvalidArgument("open and closed sets must pair up and be non-empty".into()));
    }
    let grid = PeriodicGrid::new(n)?;
    let mut ws = Workspace::new(&params.config, n)?;
    let (mut diff, mut err) = (0.0, 0.0);
    for (o, c) in open.iter().zip(closed) {
        let po = Corrector::with_spectral_gradient(grid, params.predict_with(&o.input(), &mut ws)?)?;
        let pc = Corrector::with_spectral_gradient(grid, params.predict_with(&c.input(), &mut ws)?)?;
        diff += metrics::h1_error_sq(&po, &pc)?.sqrt();
        err += 0.5 * (metrics::h1_error_sq(&po, &o.corrector(grid)?)?.sqrt() + metrics::h1_error_sq(&pc, &c.corrector(grid)?)?.sqrt());
    }
    let k = open.len() as f64;
    Ok(AmbiguityReport { output_difference: diff / k, true_error: err / k })
}

/// Result of a training run: the best-by-test-RHE parameters, the final
/// parameters and the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: FnoParams<T>,
    pub last: FnoParams<T>,
    pub history: TrainHistory,
}

/// Minibatch Adam on the mean squared `H^1` loss. Minibatches are drawn
/// from a per-epoch shuffle of the training indices.
pub fn train<T: Scalar>(
    train_set: &[Record],
    test_set: &[Record],
    n: usize,
    fno: &FnoConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(train_set, test_set, n, fno, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch with
/// `(epoch, history so far)`.
pub fn train_with<T: Scalar>(
    train_set: &[Record],
    test_set: &[Record],
    n: usize,
    fno: &FnoConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainHistory),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    fno.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
    }
    let grid = PeriodicGrid::new(n)?;
    for r in train_set.iter().chain(test_set) {
        r.check_grid(grid)?;
    }
    let start = Instant::now();
    let mut params = FnoParams::<T>::init(fno, cfg.seed)?;
    if fno.normalize_inputs {
        let (mean, std) = input_statistics(train_set);
        params.input_shift = mean.map(T::lit);
        params.input_scale = std.map(T::lit);
    }
    let mut adam = Adam::new(&params);
    let mut grads = FnoParams::zeros(fno);
    let mut ws = Workspace::new(fno, n)?;
    let views: Vec<SampleView<T>> = train_set.iter().map(SampleView::from_record).collect();
    let mut history = TrainHistory::default();
    let mut best = params.clone();
    let mut best_rhe = f64::INFINITY;
    let mut order: Vec<usize> = (0..views.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, Domain::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let w = T::one() / T::from_usize_lossy(batch.len());
            for &k in batch {
                let s = &views[k];
                match params.forward_backward(&s.input, &s.chi, &s.grad, w, &mut ws, &mut grads) {
                    Ok(l) => epoch_loss += l.as_f64(),
                    Err(Error::NonFiniteGradient | Error::NonFiniteActivation(_)) => {
                        return Err(Error::Diverged { epoch: epoch + 1, losses: history.train_loss });
                    }
                    Err(e) => return Err(e),
                }
            }
            if adam.update(&mut params, &grads, cfg).is_err() {
                return Err(Error::Diverged { epoch: epoch + 1, losses: history.train_loss });
            }
        }
        history.train_loss.push(epoch_loss / views.len() as f64);
        let rhe = test_rhe(&params, test_set, &mut ws)?;
        history.test_rhe.push(rhe);
        if rhe < best_rhe {
            best_rhe = rhe;
            best = params.clone();
            history.best_epoch = epoch + 1;
        }
        on_epoch(epoch + 1, &history);
    }
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { best, last: params, history })
}
