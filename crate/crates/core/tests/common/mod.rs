//! Shared oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pcmpc_core::benchmarks::lqr_problem;
use pcmpc_core::kkt::{DecisionVector, Layout};
use pcmpc_core::model::HorizonProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct LqrInstance {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
}

fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    m.transpose() * m + DMatrix::identity(n, n) * 0.1
}

impl LqrInstance {
    pub fn random(seed: u64, n: usize, p: usize, horizon: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Self {
            a: random_matrix(&mut rng, n, n),
            b: random_matrix(&mut rng, n, p),
            q: random_spd(&mut rng, n),
            r: random_spd(&mut rng, p),
            horizon,
        }
    }

    pub fn problem(&self) -> HorizonProblem {
        lqr_problem(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            self.horizon,
        )
        .unwrap()
    }

    /// Condensed least-squares solution of
    /// `min 1/2 sum (x'Qx + u'Ru) + 1/2 x_{H+1}'Q x_{H+1}` with the states
    /// eliminated, followed by the backward multiplier recursion.
    pub fn solve(&self, x0: &DVector<f64>) -> DecisionVector {
        let (n, p, h) = (self.a.nrows(), self.b.ncols(), self.horizon);
        let mut phi = DMatrix::zeros(n * (h + 1), n);
        let mut gamma = DMatrix::zeros(n * (h + 1), p * h);
        let mut power = DMatrix::identity(n, n);
        for i in 0..=h {
            phi.view_mut((i * n, 0), (n, n)).copy_from(&power);
            power = &self.a * power;
        }
        for i in 1..=h {
            for j in 0..i {
                let mut block = self.b.clone();
                for _ in 0..(i - 1 - j) {
                    block = &self.a * block;
                }
                gamma.view_mut((i * n, j * p), (n, p)).copy_from(&block);
            }
        }
        let qbar = DMatrix::from_fn(n * (h + 1), n * (h + 1), |r, c| {
            if r / n == c / n {
                self.q[(r % n, c % n)]
            } else {
                0.0
            }
        });
        let rbar = DMatrix::from_fn(
            p * h,
            p * h,
            |r, c| {
                if r / p == c / p {
                    self.r[(r % p, c % p)]
                } else {
                    0.0
                }
            },
        );
        let lhs = gamma.transpose() * &qbar * &gamma + rbar;
        let rhs = -(gamma.transpose() * &qbar * &phi * x0);
        let u = lhs.lu().solve(&rhs).expect("condensed QP is positive definite");
        let x = &phi * x0 + &gamma * &u;

        let xs: Vec<DVector<f64>> = (0..=h).map(|i| x.rows(i * n, n).into_owned()).collect();
        let us: Vec<DVector<f64>> = (0..h).map(|i| u.rows(i * p, p).into_owned()).collect();
        let mut lambda = vec![DVector::zeros(n); h + 1];
        lambda[h] = -(&self.q * &xs[h]);
        for i in (0..h).rev() {
            lambda[i] = self.a.transpose() * &lambda[i + 1] - &self.q * &xs[i];
        }
        DecisionVector::pack(Layout::new(n, p, h), &xs, &us, &lambda).unwrap()
    }
}
