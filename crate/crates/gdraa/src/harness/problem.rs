//! Synthetic optimization problems with known structure, for exercising the
//! training loop end to end: a ridge-regularized least-squares problem whose
//! optimum has a closed form, and a logistic-regression problem for a
//! non-quadratic loss. Both are generated from a seed, so every rank can
//! materialize an identical copy without shipping data around.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    LeastSquares,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    kind: ProblemKind,
    /// Row-major `samples × features`.
    x: Vec<f64>,
    /// Targets: real values for least squares, ±1 labels for logistic.
    y: Vec<f64>,
    samples: usize,
    features: usize,
    lambda: f64,
    /// The weights the targets were generated from.
    planted: Vec<f64>,
}

impl SyntheticProblem {
    /// Generate a least-squares problem `y = X·w* + σ·noise` with standard
    /// normal features. With `noise_sigma = 0` the planted weights fit the
    /// data exactly.
    pub fn least_squares(
        seed: u64,
        samples: usize,
        features: usize,
        lambda: f64,
        noise_sigma: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted: Vec<f64> = (0..features).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..samples * features)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y: Vec<f64> = (0..samples)
            .map(|i| {
                let fit: f64 = (0..features)
                    .map(|j| x[i * features + j] * planted[j])
                    .sum();
                fit + noise_sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        SyntheticProblem {
            kind: ProblemKind::LeastSquares,
            x,
            y,
            samples,
            features,
            lambda,
            planted,
        }
    }

    /// Generate a logistic problem with ±1 labels from the sign of the
    /// planted linear score, so the classes are linearly separable.
    pub fn logistic(seed: u64, samples: usize, features: usize, lambda: f64) -> Self {
        let mut base = Self::least_squares(seed, samples, features, lambda, 0.0);
        for y in &mut base.y {
            *y = if *y >= 0.0 { 1.0 } else { -1.0 };
        }
        base.kind = ProblemKind::Logistic;
        base
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn planted_weights(&self) -> &[f64] {
        &self.planted
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    fn score(&self, w: &[f64], i: usize) -> f64 {
        self.row(i).iter().zip(w).map(|(x, w)| x * w).sum()
    }

    /// Mean loss over the sample indices (taken modulo the sample count),
    /// including the `(λ/2)·|w|²` ridge term once.
    pub fn loss(&self, w: &[f64], indices: &[usize]) -> f64 {
        assert!(!indices.is_empty());
        let data: f64 = indices
            .iter()
            .map(|&i| {
                let i = i % self.samples;
                match self.kind {
                    ProblemKind::LeastSquares => {
                        let r = self.score(w, i) - self.y[i];
                        0.5 * r * r
                    }
                    ProblemKind::Logistic => {
                        // ln(1 + exp(−m)) computed without overflow.
                        let m = self.y[i] * self.score(w, i);
                        if m > 0.0 {
                            (-m).exp().ln_1p()
                        } else {
                            -m + m.exp().ln_1p()
                        }
                    }
                }
            })
            .sum();
        let ridge: f64 = 0.5 * self.lambda * w.iter().map(|w| w * w).sum::<f64>();
        data / indices.len() as f64 + ridge
    }

    /// Mean gradient over the sample indices, written into `out`.
    pub fn gradient(&self, w: &[f64], indices: &[usize], out: &mut [f64]) {
        assert!(!indices.is_empty());
        assert_eq!(out.len(), self.features);
        out.fill(0.0);
        for &i in indices {
            let i = i % self.samples;
            let coeff = match self.kind {
                ProblemKind::LeastSquares => self.score(w, i) - self.y[i],
                ProblemKind::Logistic => {
                    // −y·σ(−y·score): the usual logistic gradient factor.
                    let m = self.y[i] * self.score(w, i);
                    -self.y[i] / (1.0 + m.exp())
                }
            };
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += coeff * x;
            }
        }
        let inv = 1.0 / indices.len() as f64;
        for (o, w) in out.iter_mut().zip(w) {
            *o = *o * inv + self.lambda * w;
        }
    }

    /// The exact minimizer of the full-batch least-squares objective:
    /// solves `(XᵀX/n + λI)·w = Xᵀy/n`. Panics for logistic problems,
    /// which have no closed form.
    pub fn closed_form_optimum(&self) -> Vec<f64> {
        assert_eq!(self.kind, ProblemKind::LeastSquares);
        let d = self.features;
        let n = self.samples as f64;
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for i in 0..self.samples {
            let row = self.row(i);
            for j in 0..d {
                b[j] += row[j] * self.y[i];
                for k in j..d {
                    a[j * d + k] += row[j] * row[k];
                }
            }
        }
        for j in 0..d {
            b[j] /= n;
            for k in j..d {
                a[j * d + k] /= n;
                a[k * d + j] = a[j * d + k];
            }
            a[j * d + j] += self.lambda;
        }
        solve_spd(&mut a, &mut b, d);
        b
    }
}

/// Solve `A·x = b` for symmetric positive-definite `A` (row-major, `d × d`)
/// by in-place Cholesky; the solution overwrites `b`.
fn solve_spd(a: &mut [f64], b: &mut [f64], d: usize) {
    // Factor A = L·Lᵀ, storing L in the lower triangle.
    for j in 0..d {
        for k in 0..j {
            let s = a[j * d + k];
            let s = s - (0..k).map(|m| a[j * d + m] * a[k * d + m]).sum::<f64>();
            a[j * d + k] = s / a[k * d + k];
        }
        let diag =
            a[j * d + j] - (0..j).map(|m| a[j * d + m] * a[j * d + m]).sum::<f64>();
        assert!(diag > 0.0, "matrix is not positive definite");
        a[j * d + j] = diag.sqrt();
    }
    // Forward solve L·z = b.
    for j in 0..d {
        let s = b[j] - (0..j).map(|m| a[j * d + m] * b[m]).sum::<f64>();
        b[j] = s / a[j * d + j];
    }
    // Back solve Lᵀ·x = z.
    for j in (0..d).rev() {
        let s = b[j] - (j + 1..d).map(|m| a[m * d + j] * b[m]).sum::<f64>();
        b[j] = s / a[j * d + j];
    }
}
