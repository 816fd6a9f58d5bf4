//! Exact posterior for two-topic documents by enumerating every topic
//! assignment.

use serde::{Deserialize, Serialize};

use super::special::ln_beta;
use super::{check_model, MeanFieldState};
use crate::error::{Error, Result};

/// Longest document [`brute_force_posterior`] accepts.
pub const MAX_WORDS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForcePosterior {
    /// ln p(w | α, β), exact.
    pub log_evidence: f64,
    /// p(w | α, β) by trapezoid integration of the joint over the grid.
    pub grid_evidence: f64,
    /// Grid over θ_0 ∈ [0, 1]; θ_1 = 1 − θ_0.
    pub grid: Vec<f64>,
    /// Posterior density of θ_0 at each grid point.
    pub theta_density: Vec<f64>,
    /// E[θ | w], exact.
    pub theta_mean: Vec<f64>,
    /// `z_marginals[i][k]` = p(z_i = k | w).
    pub z_marginals: Vec<Vec<f64>>,
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log Beta density of θ_0 = t with parameters (a, b); finite for a, b ≥ 1.
fn log_beta_density(t: f64, a: f64, b: f64) -> f64 {
    let term = |x: f64, p: f64| if p == 1.0 { 0.0 } else { (p - 1.0) * x.ln() };
    term(t, a) + term(1.0 - t, b) - ln_beta(&[a, b])
}

fn trapezoid(h: f64, f: &[f64]) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]))
}

fn check_two_topics(alpha: &[f64], beta: &[Vec<f64>], resolution: usize) -> Result<()> {
    check_model(alpha, beta)?;
    if alpha.len() != 2 {
        return Err(Error::InvalidConfig(format!("brute force needs K = 2, got {}", alpha.len())));
    }
    if alpha.iter().any(|&a| a < 1.0) {
        return Err(Error::InvalidConfig(
            "grid integration needs α ≥ 1 so the density is bounded".into(),
        ));
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("grid needs at least 2 points".into()));
    }
    Ok(())
}

/// Enumerates all 2ᴺ assignments. The θ integral of each term is the
/// Dirichlet-multinomial B(α + n)/B(α); the grid is used only for the
/// tabulated density and the cross-check `grid_evidence`.
pub fn brute_force_posterior(
    alpha: &[f64],
    beta: &[Vec<f64>],
    words: &[usize],
    resolution: usize,
) -> Result<BruteForcePosterior> {
    check_two_topics(alpha, beta, resolution)?;
    let n = words.len();
    if n > MAX_WORDS {
        return Err(Error::InvalidConfig(format!("brute force handles at most {MAX_WORDS} words, got {n}")));
    }
    if let Some(&w) = words.iter().find(|&&w| w >= beta[0].len()) {
        return Err(Error::ShapeMismatch(format!("word id {w} outside vocabulary")));
    }

    let lb_alpha = ln_beta(alpha);
    // Bit i of `mask` set means z_i = 1.
    let mut log_joint = Vec::with_capacity(1 << n);
    let mut log_beta_part = Vec::with_capacity(1 << n);
    for mask in 0u32..(1u32 << n) {
        let mut lp = 0.0;
        for (i, &w) in words.iter().enumerate() {
            let k = ((mask >> i) & 1) as usize;
            lp += beta[k][w].ln();
        }
        let n1 = mask.count_ones() as f64;
        let n0 = n as f64 - n1;
        log_beta_part.push(lp);
        log_joint.push(lp + ln_beta(&[alpha[0] + n0, alpha[1] + n1]) - lb_alpha);
    }
    let log_evidence = logsumexp(&log_joint);

    let mut z_marginals = vec![vec![0.0; 2]; n];
    let mut theta_mean = vec![0.0; 2];
    let total_alpha = alpha[0] + alpha[1] + n as f64;
    for (mask, &lj) in log_joint.iter().enumerate() {
        let p = (lj - log_evidence).exp();
        let n1 = (mask as u32).count_ones() as f64;
        theta_mean[0] += p * (alpha[0] + n as f64 - n1) / total_alpha;
        theta_mean[1] += p * (alpha[1] + n1) / total_alpha;
        for (i, row) in z_marginals.iter_mut().enumerate() {
            row[(mask >> i) & 1] += p;
        }
    }

    let h = 1.0 / (resolution - 1) as f64;
    let grid: Vec<f64> = (0..resolution).map(|j| j as f64 * h).collect();
    let mut theta_density = Vec::with_capacity(resolution);
    let mut joint = Vec::with_capacity(resolution);
    let mut terms = vec![0.0; log_joint.len()];
    for &t in &grid {
        for (mask, term) in terms.iter_mut().enumerate() {
            let n1 = (mask as u32).count_ones() as f64;
            let n0 = n as f64 - n1;
            // ln[p(θ | α) · Π θ_{z_i} β_{z_i, w_i}]
            *term = log_beta_part[mask] + log_beta_density(t, alpha[0] + n0, alpha[1] + n1)
                + ln_beta(&[alpha[0] + n0, alpha[1] + n1])
                - lb_alpha;
        }
        let lj = logsumexp(&terms);
        joint.push(lj.exp());
        theta_density.push((lj - log_evidence).exp());
    }
    let grid_evidence = trapezoid(h, &joint);

    Ok(BruteForcePosterior {
        log_evidence,
        grid_evidence,
        grid,
        theta_density,
        theta_mean,
        z_marginals,
    })
}

/// KL(q ‖ p(θ, z | w)) for a two-topic mean-field state, by integrating the
/// KL density over a θ grid. The sum over z is taken per word.
pub fn direct_kl(
    state: &MeanFieldState,
    alpha: &[f64],
    beta: &[Vec<f64>],
    words: &[usize],
    log_evidence: f64,
    resolution: usize,
) -> Result<f64> {
    check_two_topics(alpha, beta, resolution)?;
    let g = &state.gamma;
    if g.len() != 2 || g.iter().any(|&x| x < 1.0) {
        return Err(Error::InvalidConfig("direct KL needs K = 2 and γ ≥ 1".into()));
    }
    let q = &state.q_z;
    let counts = [
        q.iter().map(|r| r[0]).sum::<f64>(),
        q.iter().map(|r| r[1]).sum::<f64>(),
    ];
    let mut discrete = 0.0;
    for (row, &w) in q.iter().zip(words) {
        for k in 0..2 {
            if row[k] > 0.0 {
                discrete += row[k] * (row[k].ln() - beta[k][w].ln());
            }
        }
    }

    let h = 1.0 / (resolution - 1) as f64;
    let integrand: Vec<f64> = (0..resolution)
        .map(|j| {
            let t = j as f64 * h;
            let log_q = log_beta_density(t, g[0], g[1]);
            let qd = log_q.exp();
            if qd == 0.0 {
                return 0.0;
            }
            let log_prior = log_beta_density(t, alpha[0], alpha[1]);
            let log_lik = counts[0] * t.ln() + counts[1] * (1.0 - t).ln();
            qd * (log_q - log_prior - log_lik)
        })
        .collect();
    Ok(trapezoid(h, &integrand) + discrete + log_evidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{free_energy, run_meanfield};

    fn beta() -> Vec<Vec<f64>> {
        vec![vec![0.5, 0.3, 0.15, 0.05], vec![0.1, 0.2, 0.3, 0.4]]
    }

    #[test]
    fn empty_document_gives_prior() {
        let alpha = [2.0, 3.0];
        let bf = brute_force_posterior(&alpha, &beta(), &[], 2001).unwrap();
        assert_eq!(bf.log_evidence, 0.0);
        assert!((bf.grid_evidence - 1.0).abs() < 1e-6);
        assert!((bf.theta_mean[0] - 0.4).abs() < 1e-15);
        // Beta(2, 3) density at 0.5 is 12 · 0.5 · 0.25.
        assert!((bf.theta_density[1000] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn evidence_matches_grid_at_two_resolutions() {
        // α ≥ 2 keeps the density differentiable at the endpoints, so the
        // trapezoid error is O(h²).
        let alpha = [2.0, 2.5];
        let words = [0, 3, 3, 1, 2, 0];
        let coarse = brute_force_posterior(&alpha, &beta(), &words, 5000).unwrap();
        let fine = brute_force_posterior(&alpha, &beta(), &words, 10000).unwrap();
        let exact = coarse.log_evidence.exp();
        assert!((coarse.grid_evidence - exact).abs() / exact < 1e-6);
        assert!((fine.grid_evidence - exact).abs() / exact < 1e-6);
        assert!((coarse.grid_evidence - fine.grid_evidence).abs() / exact < 1e-6);
        for row in &coarse.z_marginals {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_word_evidence_by_hand() {
        // p(w) = Σ_k E[θ_k] β_k,w.
        let alpha = [1.0, 3.0];
        let bf = brute_force_posterior(&alpha, &beta(), &[2], 1000).unwrap();
        let expected = 0.25 * 0.15 + 0.75 * 0.3;
        assert!((bf.log_evidence.exp() - expected).abs() < 1e-15);
        assert!((bf.z_marginals[0][0] - 0.25 * 0.15 / expected).abs() < 1e-14);
    }

    #[test]
    fn kl_gap_matches_direct_integral() {
        let alpha = [2.0, 1.5];
        let words = [0, 1, 3, 3, 2];
        let run = run_meanfield(&alpha, &beta(), &words, 10_000, 1e-12).unwrap();
        let bf = brute_force_posterior(&alpha, &beta(), &words, 5000).unwrap();
        let gap = free_energy(&run.state, &alpha, &beta(), &words) + bf.log_evidence;
        let kl = direct_kl(&run.state, &alpha, &beta(), &words, bf.log_evidence, 5000).unwrap();
        assert!(gap >= 0.0, "{gap}");
        assert!((gap - kl).abs() < 1e-4, "{gap} vs {kl}");
    }

    #[test]
    fn input_checks() {
        assert!(brute_force_posterior(&[1.0, 1.0, 1.0], &vec![vec![1.0]; 3], &[0], 100).is_err());
        assert!(brute_force_posterior(&[0.5, 1.0], &beta(), &[0], 100).is_err());
        assert!(brute_force_posterior(&[1.0, 1.0], &beta(), &[0; 17], 100).is_err());
    }
}
