//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `Complex<f64>` and does
//! not call into the solver code it checks.

#![allow(dead_code)]

use farfield_core::{StftConfig, StftTensor, Window, C};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cgauss(r: &mut ChaCha8Rng) -> C<f64> {
    C::new(r.sample(StandardNormal), r.sample(StandardNormal))
}

/// A spectrogram of the given shape filled with complex Gaussian values.
/// `fft_size` only fixes the bin count (`fft_size / 2 + 1`).
pub fn random_tensor(r: &mut ChaCha8Rng, frames: usize, fft_size: usize, channels: usize) -> StftTensor<f64> {
    let cfg = StftConfig::new(fft_size, fft_size / 4, Window::SqrtHann, true).unwrap();
    let mut s = StftTensor::zeros(frames, channels, cfg, 16000).unwrap();
    for v in s.data_mut() {
        *v = cgauss(r);
    }
    s
}

pub fn tensor_from(frames: usize, fft_size: usize, channels: usize, f: impl Fn(usize, usize, usize) -> C<f64>) -> StftTensor<f64> {
    let cfg = StftConfig::new(fft_size, fft_size / 4, Window::SqrtHann, true).unwrap();
    let mut s = StftTensor::zeros(frames, channels, cfg, 16000).unwrap();
    for t in 0..frames {
        for b in 0..s.bins() {
            for m in 0..channels {
                s.set(t, b, m, f(t, b, m));
            }
        }
    }
    s
}

pub fn rel_err(a: &[C<f64>], b: &[C<f64>]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

pub fn max_abs_diff(a: &[C<f64>], b: &[C<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Row-major dense complex matrix.
pub type Dense = Vec<Vec<C<f64>>>;

pub fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![C::new(0.0, 0.0); c]; r]
}

pub fn identity(n: usize) -> Dense {
    let mut a = zeros(n, n);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = C::new(1.0, 0.0);
    }
    a
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let mut c = zeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            for j in 0..b[0].len() {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn adjoint(a: &Dense) -> Dense {
    let mut c = zeros(a[0].len(), a.len());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            c[j][i] = v.conj();
        }
    }
    c
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let k = b[0].len();
    let mut aug: Dense = a.iter().zip(b).map(|(ra, rb)| ra.iter().chain(rb).copied().collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| aug[i][col].norm().total_cmp(&aug[j][col].norm())).unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for j in col..n + k {
            aug[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = aug[i][col];
                if f != C::new(0.0, 0.0) {
                    for j in col..n + k {
                        let v = aug[col][j];
                        aug[i][j] -= f * v;
                    }
                }
            }
        }
    }
    aug.into_iter().map(|row| row[n..].to_vec()).collect()
}

pub fn inverse(a: &Dense) -> Dense {
    gauss_solve(a, &identity(a.len()))
}

/// Random Hermitian positive definite matrix `A A^H + c I`.
pub fn random_hpd(r: &mut ChaCha8Rng, n: usize, c: f64) -> Dense {
    let a: Dense = (0..n).map(|_| (0..n).map(|_| cgauss(r)).collect()).collect();
    let mut h = matmul(&a, &adjoint(&a));
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += C::new(c, 0.0);
    }
    h
}

/// Naive O(N²) DFT of a real sequence, bins `0..=N/2`.
pub fn naive_dft(x: &[f64]) -> Vec<C<f64>> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            x.iter().enumerate().fold(C::new(0.0, 0.0), |acc, (i, &v)| {
                let ang = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                acc + C::new(v * ang.cos(), v * ang.sin())
            })
        })
        .collect()
}

/// Settings for [`naive_wpe`].
#[derive(Clone, Copy)]
pub struct NaiveWpe {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    pub variance_floor: f64,
    pub diag_load: f64,
}

/// Loop-based WPE. `mask`, when given, is indexed `(t, b, m)` and sets the
/// first-iteration variance to the channel mean of `mask * |y|²`.
pub fn naive_wpe(y: &StftTensor<f64>, mask: Option<&dyn Fn(usize, usize, usize) -> f64>, p: NaiveWpe) -> StftTensor<f64> {
    let (frames, bins, channels) = (y.frames(), y.bins(), y.channels());
    let mut mean_power = 0.0;
    for v in y.data() {
        mean_power += v.norm_sqr();
    }
    mean_power /= y.data().len() as f64;
    let floor = p.variance_floor * mean_power + f64::MIN_POSITIVE;
    let n = channels * p.taps;
    let past = |t: usize, b: usize, m: usize, l: usize| -> C<f64> {
        if t >= p.delay + l {
            y.get(t - p.delay - l, b, m)
        } else {
            C::new(0.0, 0.0)
        }
    };

    let mut lambda = vec![vec![0.0; bins]; frames];
    for t in 0..frames {
        for b in 0..bins {
            let mut s = 0.0;
            for m in 0..channels {
                let w = mask.map_or(1.0, |f| f(t, b, m));
                s += w * y.get(t, b, m).norm_sqr();
            }
            lambda[t][b] = (s / channels as f64).max(floor);
        }
    }

    let mut d = y.clone();
    for it in 0..p.iterations {
        if it > 0 {
            for t in 0..frames {
                for b in 0..bins {
                    let mut s = 0.0;
                    for m in 0..channels {
                        s += d.get(t, b, m).norm_sqr();
                    }
                    lambda[t][b] = (s / channels as f64).max(floor);
                }
            }
        }
        let mut out = y.clone();
        for b in 0..bins {
            let mut r = zeros(n, n);
            let mut pm = zeros(n, channels);
            for t in 0..frames {
                for m1 in 0..channels {
                    for l1 in 0..p.taps {
                        let i = m1 * p.taps + l1;
                        let yi = past(t, b, m1, l1) / lambda[t][b];
                        for m2 in 0..channels {
                            for l2 in 0..p.taps {
                                r[i][m2 * p.taps + l2] += yi * past(t, b, m2, l2).conj();
                            }
                            pm[i][m2] += yi * y.get(t, b, m2).conj();
                        }
                    }
                }
            }
            let tr: f64 = (0..n).map(|i| r[i][i].re).sum();
            for (i, row) in r.iter_mut().enumerate() {
                row[i] += C::new(p.diag_load * tr / n as f64, 0.0);
            }
            let g = gauss_solve(&r, &pm);
            for t in 0..frames {
                for m in 0..channels {
                    let mut acc = y.get(t, b, m);
                    for m1 in 0..channels {
                        for l in 0..p.taps {
                            acc -= g[m1 * p.taps + l][m].conj() * past(t, b, m1, l);
                        }
                    }
                    out.set(t, b, m, acc);
                }
            }
        }
        d = out;
    }
    d
}

/// True when the Hermitian matrix `a` has a Cholesky factor with positive
/// pivots (i.e. it is positive definite).
pub fn is_positive_definite(a: &Dense) -> bool {
    let n = a.len();
    let mut l = zeros(n, n);
    for j in 0..n {
        let mut d = a[j][j].re;
        for k in 0..j {
            d -= l[j][k].norm_sqr();
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        l[j][j] = C::new(d, 0.0);
        for i in j + 1..n {
            let mut v = a[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k].conj();
            }
            l[i][j] = v / d;
        }
    }
    true
}

pub fn dense_of(m: &farfield_core::CMatrix<f64>) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn cmatrix_of(d: &Dense) -> farfield_core::CMatrix<f64> {
    farfield_core::CMatrix::from_fn(d.len(), d[0].len(), |i, j| d[i][j])
}
