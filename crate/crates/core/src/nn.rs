//! Dense layers, seeded initialization, optimizers and the finite-difference
//! gradient checker shared by the object classifier and the graph network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kv::KvValue;
use crate::{Error, Result};

/// Affine map `y = W x + b` with `W` stored row-major (`out × inp`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            weight: vec![0.0; out * inp],
            bias: vec![0.0; out],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inp.max(1) as f64).sqrt();
        let weight = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            out,
            inp,
            weight,
            bias: vec![0.0; out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        (0..self.out)
            .map(|o| {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients for upstream gradient `dy` at input `x`
    /// into `grad`, and, if `dx` is given, adds `Wᵀ dy` to it.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for o in 0..self.out {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if let Some(dx) = dx {
            for o in 0..self.out {
                let g = dy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    /// Reads weights then biases from the front of `src`, returning the rest.
    pub fn read_flat<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weight.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        rest
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl KvValue for OptimizerKind {
    fn to_kv(&self) -> String {
        match self {
            OptimizerKind::Sgd => "sgd".into(),
            OptimizerKind::Adam => "adam".into(),
        }
    }

    fn set_kv(&mut self, s: &str) -> std::result::Result<(), String> {
        *self = match s {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => return Err(format!("expected sgd or adam, got {other:?}")),
        };
        Ok(())
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns `(loss, gradient)` at a parameter vector. Every coordinate is
/// checked when `max_coords` covers the whole vector; otherwise a seeded
/// random subset of `max_coords` coordinates is used. The error of one
/// coordinate is `|analytic − numeric| / max(1, |analytic|)`, and the maximum
/// over checked coordinates is returned.
pub fn grad_check_flat<F>(theta: &[f64], f: F, step: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let (_, analytic) = f(theta);
    if analytic.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient length",
            expected: theta.len(),
            actual: analytic.len(),
        });
    }
    let coords: Vec<usize> = if theta.len() <= max_coords {
        (0..theta.len()).collect()
    } else {
        let mut rng = seeded_rng(seed, 0x6772_6164);
        let mut idx: Vec<usize> = (0..theta.len()).collect();
        for i in 0..max_coords {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(max_coords);
        idx.sort_unstable();
        idx
    };
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let h = step * theta[i].abs().max(1.0);
        work[i] = theta[i] + h;
        let (plus, _) = f(&work);
        work[i] = theta[i] - h;
        let (minus, _) = f(&work);
        work[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_backward() {
        let d = Dense {
            out: 2,
            inp: 3,
            weight: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0],
            bias: vec![0.5, -0.5],
        };
        let x = [1.0, 1.0, 2.0];
        assert_eq!(d.forward(&x), vec![9.5, 0.5]);
        let mut g = Dense::zeros(2, 3);
        let mut dx = vec![0.0; 3];
        d.backward(&x, &[1.0, 2.0], &mut g, Some(&mut dx));
        assert_eq!(g.weight, vec![1.0, 1.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(g.bias, vec![1.0, 2.0]);
        assert_eq!(dx, vec![-1.0, 2.0, 5.0]);
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = seeded_rng(3, 0);
        let d = Dense::init(3, 4, &mut rng);
        let mut flat = Vec::new();
        d.push_flat(&mut flat);
        let mut e = Dense::zeros(3, 4);
        assert!(e.read_flat(&flat).is_empty());
        assert_eq!(d, e);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let good = |t: &[f64]| (t[0] * t[0] + 3.0 * t[1], vec![2.0 * t[0], 3.0]);
        let bad = |t: &[f64]| (t[0] * t[0] + 3.0 * t[1], vec![t[0], 3.0]);
        let theta = [1.5, -2.0];
        assert!(grad_check_flat(&theta, good, 1e-5, 10, 0).unwrap() < 1e-8);
        assert!(grad_check_flat(&theta, bad, 1e-5, 10, 0).unwrap() > 0.1);
        assert!(grad_check_flat(&theta, good, 0.0, 10, 0).is_err());
    }

    #[test]
    fn sgd_and_adam_descend_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.1, 1);
            let mut p = [4.0];
            for _ in 0..200 {
                let g = [2.0 * p[0]];
                opt.step(&mut p, &g);
            }
            assert!(p[0].abs() < 0.1, "{kind:?} ended at {}", p[0]);
        }
    }
}
