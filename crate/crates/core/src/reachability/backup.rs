use crate::error::{check_len, Error, Result};

/// Discounted reach-avoid backup used as the safety-critic target.
pub fn safety_backup(ell_t: f64, q_next: f64, gamma: f64, terminal: bool, ell_terminal: f64) -> f64 {
    if terminal {
        ell_terminal
    } else {
        (1.0 - gamma) * ell_t + gamma * ell_t.min(q_next)
    }
}

/// Deterministic finite system: `next[s][a]` is the successor of `s` under `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub next: Vec<Vec<usize>>,
    pub ell: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl FiniteMdp {
    pub fn validate(&self) -> Result<()> {
        let n = self.next.len();
        check_len("ell per state", n, self.ell.len())?;
        check_len("terminal flags", n, self.terminal.len())?;
        for row in &self.next {
            if row.is_empty() {
                return Err(Error::Config("every state needs at least one action".into()));
            }
            if let Some(&bad) = row.iter().find(|&&s| s >= n) {
                return Err(Error::Config(format!("successor {bad} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    /// Converged value per state and action.
    pub q: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sup-norm change of every sweep.
    pub deltas: Vec<f64>,
}

impl FixedPoint {
    /// State values under greedy (max) action selection.
    pub fn values(&self) -> Vec<f64> {
        self.q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Iterates the discounted safety backup to its fixed point.
///
/// `Q(s, a) = ℓ(s)` at terminal states and
/// `(1 − γ)·ℓ(s) + γ·min(ℓ(s), V(next(s, a)))` elsewhere, where `V` is the max
/// over actions, or the expectation under `policy[s]` when given.
pub fn tabular_fixed_point(
    mdp: &FiniteMdp,
    gamma: f64,
    policy: Option<&[Vec<f64>]>,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    mdp.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    if let Some(p) = policy {
        check_len("policy rows", mdp.next.len(), p.len())?;
        for (row, acts) in p.iter().zip(&mdp.next) {
            check_len("policy weights", acts.len(), row.len())?;
        }
    }
    let value = |q: &[Vec<f64>], s: usize| -> f64 {
        match policy {
            Some(p) => q[s].iter().zip(&p[s]).map(|(v, w)| v * w).sum(),
            None => q[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let mut q: Vec<Vec<f64>> = mdp
        .next
        .iter()
        .zip(&mdp.ell)
        .map(|(row, &l)| vec![l; row.len()])
        .collect();
    let mut deltas = Vec::new();
    for it in 1..=max_iter {
        let v: Vec<f64> = (0..q.len()).map(|s| value(&q, s)).collect();
        let mut delta: f64 = 0.0;
        for s in 0..q.len() {
            let l = mdp.ell[s];
            for (a, &nx) in mdp.next[s].iter().enumerate() {
                let new = if mdp.terminal[s] {
                    l
                } else {
                    safety_backup(l, v[nx], gamma, false, l)
                };
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        deltas.push(delta);
        if delta < tol {
            return Ok(FixedPoint {
                q,
                iterations: it,
                deltas,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_delta: deltas.last().copied().unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_branch_returns_terminal_margin() {
        assert_eq!(safety_backup(-0.3, 0.9, 0.99, true, 0.4), 0.4);
    }

    #[test]
    fn non_terminal_branch() {
        let v = safety_backup(0.5, 0.2, 0.99, false, 0.0);
        assert!((v - 0.203).abs() < 1e-15);
    }

    #[test]
    fn min_collapses_when_future_is_safer() {
        assert_eq!(safety_backup(-0.1, 0.9, 0.99, false, 0.0), -0.1);
    }

    #[test]
    fn absorbing_state_keeps_its_margin() {
        let mdp = FiniteMdp {
            next: vec![vec![0]],
            ell: vec![0.37],
            terminal: vec![false],
        };
        let fp = tabular_fixed_point(&mdp, 0.99, None, 1e-10, 10_000).unwrap();
        assert!((fp.q[0][0] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        // Failure at the end of a chain needs one sweep per link to propagate.
        let mdp = FiniteMdp {
            next: vec![vec![1], vec![2], vec![3], vec![4], vec![4]],
            ell: vec![1.0, 1.0, 1.0, 1.0, -1.0],
            terminal: vec![false; 5],
        };
        assert!(matches!(
            tabular_fixed_point(&mdp, 0.99, None, 1e-10, 3),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_successor() {
        let mdp = FiniteMdp {
            next: vec![vec![3]],
            ell: vec![0.0],
            terminal: vec![false],
        };
        assert!(tabular_fixed_point(&mdp, 0.9, None, 1e-10, 10).is_err());
    }
}
