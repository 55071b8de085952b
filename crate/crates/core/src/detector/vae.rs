//! A small dense variational autoencoder with hand-written backprop.
//!
//! Encoder: `x -> relu(hidden) -> [mu | logvar]`; decoder mirrors it:
//! `z -> relu(hidden) -> x_hat`. Loss per sample is the mean squared
//! reconstruction error plus `beta * KL(q(z|x) || N(0, I))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOGVAR_CLAMP: f64 = 8.0;
const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform for the ReLU stacks.
        let limit = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulate parameter gradients for upstream gradient `dy` at input `x`
    /// and write the input gradient into `dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|d| *d = 0.0);
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent_dim: 8,
            beta: 0.1,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub latent_dim: usize,
    pub enc_hidden: Dense,
    pub enc_out: Dense,
    pub dec_hidden: Dense,
    pub dec_out: Dense,
}

/// Forward-pass activations kept for backprop.
struct Trace {
    h1: Vec<f64>,
    enc: Vec<f64>,
    eps: Vec<f64>,
    z: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl Vae {
    pub fn new(input_dim: usize, hidden: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            latent_dim,
            enc_hidden: Dense::init(input_dim, hidden, rng),
            enc_out: Dense::init(hidden, 2 * latent_dim, rng),
            dec_hidden: Dense::init(latent_dim, hidden, rng),
            dec_out: Dense::init(hidden, input_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.enc_hidden.in_dim
    }

    fn layers(&self) -> [&Dense; 4] {
        [&self.enc_hidden, &self.enc_out, &self.dec_hidden, &self.dec_out]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [
            &mut self.enc_hidden,
            &mut self.enc_out,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            latent_dim: self.latent_dim,
            enc_hidden: self.enc_hidden.zeros_like(),
            enc_out: self.enc_out.zeros_like(),
            dec_hidden: self.dec_hidden.zeros_like(),
            dec_out: self.dec_out.zeros_like(),
        }
    }

    /// `eps = None` decodes the posterior mean.
    fn run(&self, x: &[f64], eps: Option<Vec<f64>>) -> Trace {
        let l = self.latent_dim;
        let mut h1 = vec![0.0; self.enc_hidden.out_dim];
        self.enc_hidden.forward(x, &mut h1);
        relu(&mut h1);
        let mut enc = vec![0.0; 2 * l];
        self.enc_out.forward(&h1, &mut enc);
        for lv in &mut enc[l..] {
            *lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        }
        let eps = eps.unwrap_or_else(|| vec![0.0; l]);
        let z: Vec<f64> = (0..l)
            .map(|i| enc[i] + (0.5 * enc[l + i]).exp() * eps[i])
            .collect();
        let mut h2 = vec![0.0; self.dec_hidden.out_dim];
        self.dec_hidden.forward(&z, &mut h2);
        relu(&mut h2);
        let mut out = vec![0.0; self.dec_out.out_dim];
        self.dec_out.forward(&h2, &mut out);
        Trace { h1, enc, eps, z, h2, out }
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, None).out
    }

    /// Mean squared reconstruction error through the posterior mean.
    pub fn reconstruction_error(&self, x: &[f64]) -> f64 {
        mse(&self.reconstruct(x), x)
    }

    /// Loss for one sample; accumulates gradients into `grad`.
    fn accumulate(&self, x: &[f64], eps: Vec<f64>, beta: f64, grad: &mut Vae) -> f64 {
        let l = self.latent_dim;
        let t = self.run(x, Some(eps));
        let d = x.len() as f64;
        let recon = mse(&t.out, x);
        let kl: f64 = (0..l)
            .map(|i| {
                let (mu, lv) = (t.enc[i], t.enc[l + i]);
                -0.5 * (1.0 + lv - mu * mu - lv.exp())
            })
            .sum();

        let dout: Vec<f64> = t.out.iter().zip(x).map(|(o, v)| 2.0 * (o - v) / d).collect();
        let mut dh2 = vec![0.0; t.h2.len()];
        self.dec_out.backward(&t.h2, &dout, &mut grad.dec_out, Some(&mut dh2));
        relu_backward(&t.h2, &mut dh2);
        let mut dz = vec![0.0; l];
        self.dec_hidden.backward(&t.z, &dh2, &mut grad.dec_hidden, Some(&mut dz));

        let mut denc = vec![0.0; 2 * l];
        for i in 0..l {
            let (mu, lv) = (t.enc[i], t.enc[l + i]);
            denc[i] = dz[i] + beta * mu;
            denc[l + i] = if lv.abs() >= LOGVAR_CLAMP {
                0.0
            } else {
                dz[i] * t.eps[i] * 0.5 * (0.5 * lv).exp() + beta * 0.5 * (lv.exp() - 1.0)
            };
        }
        let mut dh1 = vec![0.0; t.h1.len()];
        self.enc_out.backward(&t.h1, &denc, &mut grad.enc_out, Some(&mut dh1));
        relu_backward(&t.h1, &mut dh1);
        self.enc_hidden.backward(x, &dh1, &mut grad.enc_hidden, None);

        recon + beta * kl
    }

    /// Train with minibatch SGD + momentum. Deterministic for a fixed seed.
    /// Returns the mean loss of the final epoch.
    pub fn fit(data: &[Vec<f64>], cfg: &VaeConfig, seed: u64) -> Result<(Self, f64)> {
        let dim = data.first().map(Vec::len).ok_or(Error::Empty("training set"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vae = Vae::new(dim, cfg.hidden, cfg.latent_dim, &mut rng);
        let mut velocity = vae.zeros_like();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = f64::NAN;

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut grad = vae.zeros_like();
                for &i in batch {
                    let eps: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                    total += vae.accumulate(&data[i], eps, cfg.beta, &mut grad);
                }
                let scale = 1.0 / batch.len() as f64;
                let norm = grad
                    .layers()
                    .iter()
                    .flat_map(|l| l.params())
                    .map(|g| (g * scale).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let clip = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
                for ((p, v), g) in vae.layers_mut().into_iter().zip(velocity.layers_mut()).zip(grad.layers()) {
                    for ((w, m), dw) in p.params_mut().zip(v.params_mut()).zip(g.params()) {
                        *m = cfg.momentum * *m - cfg.learning_rate * dw * scale * clip;
                        *w += *m;
                    }
                }
            }
            last = total / data.len() as f64;
            if !last.is_finite() {
                return Err(Error::Diverged { epoch });
            }
        }
        Ok((vae, last))
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}
