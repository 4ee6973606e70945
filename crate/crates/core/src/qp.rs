//! Convex quadratic programs `min ½ xᵀ G x + hᵀ x` subject to `x ≥ 0`,
//! optionally with one linear equality `cᵀ x = 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("active-set iteration limit reached (KKT residual {kkt:e})")]
    NoConvergence { kkt: f64 },
    #[error("dimension mismatch")]
    Dimension,
}

/// First-order optimality measures of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    /// `max_j |x_j g_j|`
    pub complementarity: f64,
    /// `max(|g_j| on the support, max(−g_j, 0) off the support)`
    pub dual_infeasibility: f64,
    /// `|cᵀ x|` (zero without an equality constraint).
    pub equality_residual: f64,
    /// Minimum entry of `x`.
    pub min_x: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.complementarity
            .max(self.dual_infeasibility)
            .max(self.equality_residual)
            .max((-self.min_x).max(0.0))
    }
}

/// KKT measures of `x` with Lagrangian gradient `g = G x + h + ν c`.
pub fn kkt_report(g_mat: &DMatrix<f64>, h: &DVector<f64>, c: Option<(&DVector<f64>, f64)>, x: &DVector<f64>) -> KktReport {
    let mut g = g_mat * x + h;
    let mut eq = 0.0;
    if let Some((c, nu)) = c {
        g += c * nu;
        eq = c.dot(x).abs();
    }
    let mut comp: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for j in 0..x.len() {
        comp = comp.max((x[j] * g[j]).abs());
        dual = dual.max(if x[j] > 0.0 { g[j].abs() } else { (-g[j]).max(0.0) });
    }
    KktReport { complementarity: comp, dual_infeasibility: dual, equality_residual: eq, min_x: x.min() }
}

/// Solves `G_PP z = −h_P` on the passive set.
fn solve_passive(g: &DMatrix<f64>, h: &DVector<f64>, passive: &[usize]) -> DVector<f64> {
    let k = passive.len();
    let mut sub = DMatrix::from_fn(k, k, |a, b| g[(passive[a], passive[b])]);
    let rhs = DVector::from_fn(k, |a, _| -h[passive[a]]);
    if let Some(ch) = sub.clone().cholesky() {
        return ch.solve(&rhs);
    }
    // semidefinite block: tiny ridge, then pseudo-inverse
    let ridge = 1e-14 * sub.diagonal().amax().max(f64::MIN_POSITIVE);
    for a in 0..k {
        sub[(a, a)] += ridge;
    }
    if let Some(ch) = sub.clone().cholesky() {
        return ch.solve(&rhs);
    }
    sub.svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| DVector::zeros(k))
}

/// Primal active-set method for the nonnegativity-constrained convex QP,
/// warm-started from `x0` (clipped to the feasible set).
pub fn solve_nonneg_qp(
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    x0: Option<&DVector<f64>>,
    tol: f64,
) -> Result<DVector<f64>, QpError> {
    let n = h.len();
    if g.nrows() != n || g.ncols() != n {
        return Err(QpError::Dimension);
    }
    // columns with zero curvature and nonnegative slope stay at zero
    let frozen: Vec<bool> = (0..n).map(|j| g[(j, j)] <= 0.0).collect();
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.map(|v| v.max(0.0)),
        _ => DVector::zeros(n),
    };
    for j in 0..n {
        if frozen[j] {
            x[j] = 0.0;
        }
    }
    let scale = h.amax().max(g.diagonal().amax()).max(f64::MIN_POSITIVE);
    let thresh = tol * scale;
    let mut passive: Vec<usize> = (0..n).filter(|&j| x[j] > 0.0).collect();
    let max_outer = 50 * n + 100;
    let mut added: Option<usize> = None;
    for _ in 0..max_outer {
        // move toward the passive-set minimizer, dropping blocking bounds
        let mut stalled = false;
        for _ in 0..=n {
            if passive.is_empty() {
                break;
            }
            let z = solve_passive(g, h, &passive);
            if z.iter().all(|&v| v > 0.0) {
                for (a, &j) in passive.iter().enumerate() {
                    x[j] = z[a];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (a, &j) in passive.iter().enumerate() {
                if z[a] <= 0.0 {
                    let denom = x[j] - z[a];
                    alpha = alpha.min(if denom > 0.0 { x[j] / denom } else { 0.0 });
                }
            }
            let eps = 1e-15 * x.amax().max(1e-300);
            let mut kept = Vec::with_capacity(passive.len());
            for (a, &j) in passive.iter().enumerate() {
                x[j] += alpha * (z[a] - x[j]);
                if x[j] > eps && !(alpha == 0.0 && z[a] <= 0.0) {
                    kept.push(j);
                } else {
                    x[j] = 0.0;
                    if Some(j) == added && alpha == 0.0 {
                        stalled = true;
                    }
                }
            }
            passive = kept;
        }
        if stalled {
            // the entering index cannot move at working precision
            return Ok(x);
        }
        let grad = g * &x + h;
        let candidate = (0..n)
            .filter(|&j| !frozen[j] && !passive.contains(&j))
            .filter(|&j| grad[j] < -thresh)
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        match candidate {
            None => return Ok(x),
            Some(j) => {
                added = Some(j);
                passive.push(j);
                passive.sort_unstable();
            }
        }
    }
    let rep = kkt_report(g, h, None, &x);
    Err(QpError::NoConvergence { kkt: rep.max_residual() })
}

/// Nonnegative QP with one equality constraint by an augmented-Lagrangian loop,
/// followed by an exact KKT solve on the identified support.
/// Returns the solution and the equality multiplier.
pub fn solve_nonneg_qp_eq(
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    c: &DVector<f64>,
    x0: Option<&DVector<f64>>,
    tol: f64,
) -> Result<(DVector<f64>, f64), QpError> {
    let n = h.len();
    if c.len() != n {
        return Err(QpError::Dimension);
    }
    let cc = c * c.transpose();
    let base = g.diagonal().amax().max(f64::MIN_POSITIVE) / c.norm_squared().max(f64::MIN_POSITIVE);
    let mut rho = 10.0 * base;
    let mut nu = 0.0;
    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    for _ in 0..12 {
        let ga = g + &cc * rho;
        let ha = h + c * nu;
        x = solve_nonneg_qp(&ga, &ha, Some(&x), tol)?;
        let viol = c.dot(&x);
        nu += rho * viol;
        if viol.abs() <= 1e-13 * x.amax().max(1e-300) {
            break;
        }
        rho *= 10.0;
    }
    // polish on the support by the equality-constrained KKT system
    let support: Vec<usize> = (0..n).filter(|&j| x[j] > 0.0).collect();
    if !support.is_empty() {
        let k = support.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for a in 0..k {
            for b in 0..k {
                kkt[(a, b)] = g[(support[a], support[b])];
            }
            kkt[(a, k)] = c[support[a]];
            kkt[(k, a)] = c[support[a]];
            rhs[a] = -h[support[a]];
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            if sol.rows(0, k).iter().all(|&v| v > 0.0) && sol.iter().all(|v| v.is_finite()) {
                let mut xp = DVector::zeros(n);
                for (a, &j) in support.iter().enumerate() {
                    xp[j] = sol[a];
                }
                let rep = kkt_report(g, h, Some((c, sol[k])), &xp);
                let rep_al = kkt_report(g, h, Some((c, nu)), &x);
                if rep.max_residual() <= rep_al.max_residual().max(tol * h.amax().max(1.0)) {
                    return Ok((xp, sol[k]));
                }
            }
        }
    }
    Ok((x, nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force over supports for tiny problems.
    fn brute_force(g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
        let n = h.len();
        let mut best = (f64::INFINITY, DVector::zeros(n));
        for mask in 0u32..(1 << n) {
            let s: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
            let mut x = DVector::zeros(n);
            if !s.is_empty() {
                let sub = DMatrix::from_fn(s.len(), s.len(), |a, b| g[(s[a], s[b])]);
                let rhs = DVector::from_fn(s.len(), |a, _| -h[s[a]]);
                let Some(z) = sub.lu().solve(&rhs) else { continue };
                if z.iter().any(|&v| v < 0.0) {
                    continue;
                }
                for (a, &j) in s.iter().enumerate() {
                    x[j] = z[a];
                }
            }
            let f = 0.5 * x.dot(&(g * &x)) + h.dot(&x);
            if f < best.0 {
                best = (f, x);
            }
        }
        best.1
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
        let g = a.transpose() * &a * 2.0;
        let h = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (g, h)
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (g, h) = random_problem(&mut rng, 5);
            let x = solve_nonneg_qp(&g, &h, None, 1e-12).unwrap();
            let bf = brute_force(&g, &h);
            assert!((&x - &bf).norm() < 1e-9, "{x} vs {bf}");
            assert!(kkt_report(&g, &h, None, &x).max_residual() < 1e-9);
        }
    }

    #[test]
    fn equality_constrained_solution_satisfies_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let (g, h) = random_problem(&mut rng, 6);
            let c = DVector::from_vec(vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0]);
            let (x, nu) = solve_nonneg_qp_eq(&g, &h, &c, None, 1e-12).unwrap();
            let rep = kkt_report(&g, &h, Some((&c, nu)), &x);
            assert!(rep.equality_residual < 1e-10, "{rep:?}");
            assert!(rep.complementarity < 1e-7 && rep.dual_infeasibility < 1e-7, "{rep:?}");
        }
    }

    #[test]
    fn large_linear_term_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, _) = random_problem(&mut rng, 4);
        let h = DVector::from_element(4, 1e10);
        assert_eq!(solve_nonneg_qp(&g, &h, None, 1e-12).unwrap(), DVector::zeros(4));
    }

    proptest! {
        #[test]
        fn warm_start_does_not_change_solution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, h) = random_problem(&mut rng, 6);
            let cold = solve_nonneg_qp(&g, &h, None, 1e-13).unwrap();
            let start = DVector::from_fn(6, |_, _| rng.random_range(0.0..2.0));
            let warm = solve_nonneg_qp(&g, &h, Some(&start), 1e-13).unwrap();
            prop_assert!((&cold - &warm).norm() < 1e-8 * cold.norm().max(1.0));
        }
    }
}
