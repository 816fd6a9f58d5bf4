//! Mean-field variational inference for LDA with a known topic matrix.
//!
//! The variational family is q(θ, z) = Dir(θ; γ) · Π_i Cat(z_i; q_i). Every
//! function here works on one document given as a list of word ids.

mod brute;
pub mod special;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use special::{digamma, lgamma};

pub use brute::{brute_force_posterior, direct_kl, BruteForcePosterior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    /// Dirichlet parameters of q(θ).
    pub gamma: Vec<f64>,
    /// `q_z[i][k]` = q_i(z_i = k).
    pub q_z: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldRun {
    pub state: MeanFieldState,
    /// Free energy of the initial state.
    pub initial_free_energy: f64,
    /// Free energy after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl MeanFieldRun {
    pub fn sweeps(&self) -> usize {
        self.trace.len()
    }

    pub fn free_energy(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial_free_energy)
    }
}

/// Topic-word matrix check: K ≥ 1 rows of equal length, entries in [0, 1].
pub fn check_model(alpha: &[f64], beta: &[Vec<f64>]) -> Result<()> {
    if alpha.is_empty() || alpha.len() != beta.len() {
        return Err(Error::InvalidConfig(format!(
            "{} Dirichlet parameters for {} topics",
            alpha.len(),
            beta.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::InvalidConfig(format!("Dirichlet parameter {a} is not positive")));
    }
    let v = beta[0].len();
    if beta.iter().any(|row| row.len() != v || row.iter().any(|b| !(0.0..=1.0).contains(b))) {
        return Err(Error::InvalidConfig("topic rows must have equal length and entries in [0, 1]".into()));
    }
    Ok(())
}

/// E_q[ln θ_k] = ψ(γ_k) − ψ(Σ γ).
pub fn expected_log_theta(gamma: &[f64]) -> Vec<f64> {
    let total = digamma(gamma.iter().sum());
    gamma.iter().map(|&g| digamma(g) - total).collect()
}

/// γ_k = α_k + Σ_i q_i(k).
pub fn update_q_theta(alpha: &[f64], q_z: &[Vec<f64>]) -> Vec<f64> {
    let mut gamma = alpha.to_vec();
    for row in q_z {
        gamma.iter_mut().zip(row).for_each(|(g, q)| *g += q);
    }
    gamma
}

/// q_i(k) ∝ β_k,w · exp(ψ(γ_k) − ψ(Σ γ)), normalized in log space.
pub fn update_q_z(beta: &[Vec<f64>], word: usize, gamma: &[f64]) -> Result<Vec<f64>> {
    let elog = expected_log_theta(gamma);
    let logits: Vec<f64> = beta
        .iter()
        .zip(&elog)
        .map(|(row, e)| {
            let b = row.get(word).copied().unwrap_or(0.0);
            if b > 0.0 {
                b.ln() + e
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ImpossibleWord { word });
    }
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Variational free energy F = E_q[ln q] − E_q[ln p(θ, z, w)], an upper
/// bound on −ln p(w).
pub fn free_energy(state: &MeanFieldState, alpha: &[f64], beta: &[Vec<f64>], words: &[usize]) -> f64 {
    let gamma = &state.gamma;
    let elog = expected_log_theta(gamma);
    let gamma_sum: f64 = gamma.iter().sum();
    let alpha_sum: f64 = alpha.iter().sum();

    let log_q_theta = lgamma(gamma_sum) - gamma.iter().map(|&g| lgamma(g)).sum::<f64>()
        + gamma.iter().zip(&elog).map(|(g, e)| (g - 1.0) * e).sum::<f64>();
    let log_p_theta = lgamma(alpha_sum) - alpha.iter().map(|&a| lgamma(a)).sum::<f64>()
        + alpha.iter().zip(&elog).map(|(a, e)| (a - 1.0) * e).sum::<f64>();

    let mut words_term = 0.0;
    for (row, &w) in state.q_z.iter().zip(words) {
        for (k, &q) in row.iter().enumerate() {
            words_term += xlogy(q, q) - q * elog[k] - xlogy(q, beta[k][w]);
        }
    }
    log_q_theta - log_p_theta + words_term
}

/// Coordinate ascent from γ = α + N/K and uniform q: each sweep updates
/// every q_i, then γ. Stops when no γ component moves by `tol` or more.
pub fn run_meanfield(
    alpha: &[f64],
    beta: &[Vec<f64>],
    words: &[usize],
    max_sweeps: usize,
    tol: f64,
) -> Result<MeanFieldRun> {
    check_model(alpha, beta)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    if let Some(&w) = words.iter().find(|&&w| w >= beta[0].len()) {
        return Err(Error::ShapeMismatch(format!("word id {w} outside vocabulary of {}", beta[0].len())));
    }
    let k = alpha.len();
    let n = words.len() as f64;
    let mut state = MeanFieldState {
        gamma: alpha.iter().map(|a| a + n / k as f64).collect(),
        q_z: vec![vec![1.0 / k as f64; k]; words.len()],
    };
    let initial_free_energy = free_energy(&state, alpha, beta, words);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_sweeps {
        for (i, &w) in words.iter().enumerate() {
            state.q_z[i] = update_q_z(beta, w, &state.gamma)?;
        }
        let gamma = update_q_theta(alpha, &state.q_z);
        let change = gamma
            .iter()
            .zip(&state.gamma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state.gamma = gamma;
        trace.push(free_energy(&state, alpha, beta, words));
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(MeanFieldRun {
        state,
        initial_free_energy,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn q_theta_examples() {
        assert_eq!(update_q_theta(&[1.0, 1.0], &[vec![0.5, 0.5]]), vec![1.5, 1.5]);
        assert_eq!(update_q_theta(&[1.0, 2.0], &[]), vec![1.0, 2.0]);
        assert_eq!(update_q_theta(&[1.0, 1.0], &vec![vec![1.0, 0.0]; 3]), vec![4.0, 1.0]);
    }

    #[test]
    fn q_z_examples() {
        let uniform = vec![vec![0.25; 4]; 3];
        let q = update_q_z(&uniform, 2, &[2.0, 2.0, 2.0]).unwrap();
        assert!(q.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let beta = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(update_q_z(&beta, 0, &[0.3, 40.0]).unwrap(), vec![1.0, 0.0]);

        let beta = vec![vec![0.0, 0.5], vec![0.0, 0.5]];
        assert!(matches!(update_q_z(&beta, 0, &[1.0, 1.0]), Err(Error::ImpossibleWord { word: 0 })));
    }

    #[test]
    fn q_z_golden_pair() {
        // Unnormalized (0.2·e^{ψ(2)−ψ(3)}, 0.6·e^{ψ(1)−ψ(3)}) with
        // ψ(2) − ψ(3) = −1/2 and ψ(1) − ψ(3) = −3/2: q_0 = 0.2e/(0.2e + 0.6).
        let beta = vec![vec![0.2], vec![0.6]];
        let q = update_q_z(&beta, 0, &[2.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let reference = 0.2 * e / (0.2 * e + 0.6);
        assert!((q[0] - reference).abs() < 1e-14);
        assert!((q[0] - 0.475_366_886_418_671_75).abs() < 1e-15, "{}", q[0]);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_topic_collapses() {
        let beta = vec![vec![0.5, 0.3, 0.2]];
        let words = [0, 2, 2, 1];
        let run = run_meanfield(&[0.7], &beta, &words, 100, 1e-12).unwrap();
        assert_eq!(run.sweeps(), 1);
        assert!(run.converged);
        assert_eq!(run.state.gamma, vec![4.7]);
        let expected: f64 = -words.iter().map(|&w| beta[0][w].ln()).sum::<f64>();
        assert!((run.free_energy() - expected).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let beta = vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.2, 0.7]];
        let a = run_meanfield(&[0.5, 0.5], &beta, &[0, 2, 1, 2], 500, 1e-10).unwrap();
        let b = run_meanfield(&[0.5, 0.5], &beta, &[0, 2, 1, 2], 500, 1e-10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let beta = vec![vec![0.5, 0.5]];
        assert!(run_meanfield(&[1.0, 1.0], &beta, &[0], 10, 1e-8).is_err());
        assert!(run_meanfield(&[1.0], &beta, &[2], 10, 1e-8).is_err());
        assert!(run_meanfield(&[1.0], &beta, &[0], 10, 0.0).is_err());
        assert!(run_meanfield(&[-1.0], &beta, &[0], 10, 1e-8).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..=5, 1usize..=10).prop_flat_map(|(k, v)| {
            (
                prop::collection::vec(0.1f64..3.0, k),
                prop::collection::vec(prop::collection::vec(0.01f64..1.0, v), k),
                prop::collection::vec(0..v, 0..=8),
            )
                .prop_map(|(alpha, raw, words)| {
                    let beta = raw
                        .into_iter()
                        .map(|r| {
                            let s: f64 = r.iter().sum();
                            r.into_iter().map(|x| x / s).collect()
                        })
                        .collect();
                    (alpha, beta, words)
                })
        })
    }

    proptest! {
        #[test]
        fn each_coordinate_update_lowers_free_energy((alpha, beta, words) in instance()) {
            let k = alpha.len();
            let mut state = MeanFieldState {
                gamma: alpha.iter().map(|a| a + words.len() as f64 / k as f64).collect(),
                q_z: vec![vec![1.0 / k as f64; k]; words.len()],
            };
            let mut f = free_energy(&state, &alpha, &beta, &words);
            for _ in 0..5 {
                for i in 0..words.len() {
                    state.q_z[i] = update_q_z(&beta, words[i], &state.gamma).unwrap();
                    let next = free_energy(&state, &alpha, &beta, &words);
                    prop_assert!(next <= f + 1e-10, "{} > {}", next, f);
                    f = next;
                }
                state.gamma = update_q_theta(&alpha, &state.q_z);
                let next = free_energy(&state, &alpha, &beta, &words);
                prop_assert!(next <= f + 1e-10, "{} > {}", next, f);
                f = next;
            }
        }

        #[test]
        fn converged_state_is_stationary((alpha, beta, words) in instance()) {
            let run = run_meanfield(&alpha, &beta, &words, 10_000, 1e-12).unwrap();
            prop_assert!(run.converged);
            let mut again = run.state.clone();
            for (i, &w) in words.iter().enumerate() {
                again.q_z[i] = update_q_z(&beta, w, &again.gamma).unwrap();
            }
            again.gamma = update_q_theta(&alpha, &again.q_z);
            let f = free_energy(&again, &alpha, &beta, &words);
            prop_assert!((f - run.free_energy()).abs() < 1e-10);
            for row in &run.state.q_z {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
