//! Box-constrained BFGS and finite-difference derivatives of the marginal
//! negative log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scalar::Real;

/// Outcome of [`minimize`].
#[derive(Debug, Clone)]
pub struct OuterOutcome<T> {
    pub x: Vec<T>,
    pub fx: T,
    pub grad: Vec<T>,
    pub projected_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

pub fn projected_gradient<T: Real>(x: &[T], g: &[T], lo: &[T], hi: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > T::zero()) || (xi >= h && gi < T::zero()) {
                T::zero()
            } else {
                gi
            }
        })
        .collect()
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b * b).sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn clip<T: Real>(x: &mut [T], lo: &[T], hi: &[T]) {
    for ((xi, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *xi = xi.max(l).min(h);
    }
}

/// Objective and gradient callbacks for [`minimize`]. Failed evaluations
/// are treated as `+inf` by the line search.
pub trait OuterObjective<T> {
    fn value(&mut self, x: &[T]) -> Option<T>;
    fn gradient(&mut self, x: &[T]) -> Option<Vec<T>>;
}

/// Projected BFGS: variables held at an active bound are frozen for the
/// step, the rest follow the quasi-Newton direction with Armijo
/// backtracking along the projected path.
pub fn minimize<T: Real>(
    obj: &mut impl OuterObjective<T>,
    x0: &[T],
    lo: &[T],
    hi: &[T],
    tol: T,
    max_iter: usize,
    seed: u64,
) -> Option<OuterOutcome<T>> {
    let m = x0.len();
    let mut x = x0.to_vec();
    clip(&mut x, lo, hi);
    let mut fx = obj.value(&x)?;
    let mut g = obj.gradient(&x)?;
    let identity = |scale: T| {
        let mut h = vec![T::zero(); m * m];
        for i in 0..m {
            h[i * m + i] = scale;
        }
        h
    };
    let initial_scale = |g: &[T]| T::one() / norm(g).max(T::one());
    let mut hinv = identity(initial_scale(&g));
    let mut fresh = true;
    let mut restarts = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for iter in 0..max_iter {
        let pg = projected_gradient(&x, &g, lo, hi);
        let pnorm = norm(&pg);
        if pnorm <= tol {
            return Some(OuterOutcome {
                x,
                fx,
                grad: g,
                projected_norm: pnorm,
                iterations: iter,
                converged: true,
            });
        }
        let free: Vec<bool> = pg
            .iter()
            .zip(&g)
            .map(|(&p, &gi)| p != T::zero() || gi == T::zero())
            .collect();
        let mut d = vec![T::zero(); m];
        for i in 0..m {
            if !free[i] {
                continue;
            }
            let mut s = T::zero();
            for j in 0..m {
                if free[j] {
                    s = s + hinv[i * m + j] * pg[j];
                }
            }
            d[i] = -s;
        }
        if dot(&d, &pg) >= T::zero() {
            hinv = identity(initial_scale(&g));
            fresh = true;
            d = pg.iter().map(|&p| -p * initial_scale(&g)).collect();
        }

        let mut t = T::one();
        let mut next = None;
        for _ in 0..40 {
            let mut trial: Vec<T> = x.iter().zip(&d).map(|(&xi, &di)| xi + t * di).collect();
            clip(&mut trial, lo, hi);
            let moved: Vec<T> = trial.iter().zip(&x).map(|(&a, &b)| a - b).collect();
            if norm(&moved) == T::zero() {
                break;
            }
            if let Some(ft) = obj.value(&trial) {
                if ft <= fx + T::lit(1e-4) * dot(&g, &moved) {
                    next = Some((trial, ft, moved));
                    break;
                }
            }
            t = t * T::lit(0.5);
        }

        let Some((xn, fn_, s)) = next else {
            if !fresh {
                hinv = identity(initial_scale(&g));
                fresh = true;
                continue;
            }
            if restarts < 2 {
                // Stalled on a fresh steepest-descent step: nudge the free
                // coordinates and start over.
                restarts += 1;
                let mut trial = x.clone();
                for (i, xi) in trial.iter_mut().enumerate() {
                    if free[i] {
                        *xi = *xi + T::lit(rng.random_range(-1e-3..1e-3));
                    }
                }
                clip(&mut trial, lo, hi);
                if let (Some(ft), Some(gt)) = (obj.value(&trial), obj.gradient(&trial)) {
                    x = trial;
                    fx = ft;
                    g = gt;
                    hinv = identity(initial_scale(&g));
                    continue;
                }
            }
            let pg = projected_gradient(&x, &g, lo, hi);
            return Some(OuterOutcome {
                projected_norm: norm(&pg),
                x,
                fx,
                grad: g,
                iterations: iter,
                converged: false,
            });
        };
        let gn = obj.gradient(&xn)?;
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::lit(1e-12) * norm(&s) * norm(&y) {
            if fresh {
                let yy = dot(&y, &y);
                hinv = identity(sy / yy);
            }
            // H+ = (I - rho s y') H (I - rho y s') + rho s s'
            let rho = T::one() / sy;
            let hy: Vec<T> = (0..m)
                .map(|i| (0..m).fold(T::zero(), |a, j| a + hinv[i * m + j] * y[j]))
                .collect();
            let yhy = dot(&y, &hy);
            for i in 0..m {
                for j in 0..m {
                    hinv[i * m + j] = hinv[i * m + j] - rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let pg = projected_gradient(&x, &g, lo, hi);
    Some(OuterOutcome {
        projected_norm: norm(&pg),
        x,
        fx,
        grad: g,
        iterations: max_iter,
        converged: false,
    })
}

/// Step used for coordinate `i`: relative to the magnitude, floored at 1.
pub fn fd_step<T: Real>(x: T, rel: T) -> T {
    rel * x.abs().max(T::one())
}

/// Five-point central-difference gradient; evaluations run in parallel and
/// are combined in a fixed order.
pub fn fd_gradient<T, F>(f: F, x: &[T], rel_step: T) -> Option<Vec<T>>
where
    T: Real,
    F: Fn(&[T]) -> Option<T> + Sync,
{
    const OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
    let m = x.len();
    let probes: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..4).map(move |k| (i, k))).collect();
    let values: Vec<Option<T>> = probes
        .par_iter()
        .map(|&(i, k)| {
            let mut xp = x.to_vec();
            xp[i] = xp[i] + T::lit(OFFSETS[k]) * fd_step(x[i], rel_step);
            f(&xp)
        })
        .collect();
    (0..m)
        .map(|i| {
            let v = &values[i * 4..i * 4 + 4];
            let (m2, m1, p1, p2) = (v[0]?, v[1]?, v[2]?, v[3]?);
            let h = fd_step(x[i], rel_step);
            Some((m2 - p2 + T::lit(8.0) * (p1 - m1)) / (T::lit(12.0) * h))
        })
        .collect()
}

/// Central second differences of `f` over the coordinates in `idx`.
pub fn fd_hessian<T, F>(f: F, x: &[T], idx: &[usize], rel_step: T) -> Option<Vec<T>>
where
    T: Real,
    F: Fn(&[T]) -> Option<T> + Sync,
{
    let k = idx.len();
    let f0 = f(x)?;
    // (a, b, sa, sb): perturb idx[a] by sa*h_a and idx[b] by sb*h_b.
    let mut probes: Vec<(usize, usize, i8, i8)> = Vec::new();
    for a in 0..k {
        probes.push((a, a, 1, 0));
        probes.push((a, a, -1, 0));
        for b in 0..a {
            for (sa, sb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                probes.push((a, b, sa, sb));
            }
        }
    }
    let h: Vec<T> = idx.iter().map(|&i| fd_step(x[i], rel_step)).collect();
    let values: Vec<Option<T>> = probes
        .par_iter()
        .map(|&(a, b, sa, sb)| {
            let mut xp = x.to_vec();
            xp[idx[a]] = xp[idx[a]] + T::lit(f64::from(sa)) * h[a];
            if sb != 0 {
                xp[idx[b]] = xp[idx[b]] + T::lit(f64::from(sb)) * h[b];
            }
            f(&xp)
        })
        .collect();
    let mut out = vec![T::zero(); k * k];
    let mut it = values.into_iter();
    for a in 0..k {
        let fp = it.next()??;
        let fm = it.next()??;
        out[a * k + a] = (fp - T::lit(2.0) * f0 + fm) / (h[a] * h[a]);
        for b in 0..a {
            let pp = it.next()??;
            let pm = it.next()??;
            let mp = it.next()??;
            let mm = it.next()??;
            let v = (pp - pm - mp + mm) / (T::lit(4.0) * h[a] * h[b]);
            out[a * k + b] = v;
            out[b * k + a] = v;
        }
    }
    Some(out)
}
