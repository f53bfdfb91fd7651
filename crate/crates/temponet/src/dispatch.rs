//! From per-token Q-scores to actions: uniprocessor argmax, multicore
//! masked-greedy mapping, its one-hot Jacobian pattern, and the runtime
//! overload mitigation (dynamic sparsity scaling).
//!
//! Uniprocessor selection may pick the idle token when it outranks every
//! task. Multicore mapping never lets idle outrank tasks: cores idle only
//! once the active tasks are exhausted.

use crate::numcore::Array2;
use crate::{Error, Result};

/// Index of the maximum Q-score over valid entries; ties break toward the
/// lowest index, so idle (index 0) wins ties against tasks.
pub fn argmax_action(q: &[f64], valid: &[bool]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (score, ok)) in q.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        match best {
            Some((_, b)) if *score <= b => {}
            _ => best = Some((i, *score)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::contract("argmax_action: no valid entries"))
}

/// Operation counters for the masked-greedy contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyStats {
    pub sorts: u32,
    pub mask_steps: u32,
}

/// Result of the masked-greedy mapping: token indices in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedySelection {
    pub tokens: Vec<usize>,
    pub stats: GreedyStats,
}

/// Iteratively picks the highest unmasked valid task token and masks it,
/// stopping when `m` tasks are chosen or tasks run out. Implemented as one
/// descending sort of all scores followed by at most `m` mask steps.
pub fn masked_greedy(q: &[f64], valid: &[bool], m: usize) -> GreedySelection {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|a, b| q[*b].partial_cmp(&q[*a]).unwrap().then(a.cmp(b)));
    let mut tokens = Vec::new();
    let mut mask_steps = 0;
    for idx in order {
        if tokens.len() == m {
            break;
        }
        // Idle is never masked and never selected during mapping.
        if idx == 0 || !valid[idx] {
            continue;
        }
        tokens.push(idx);
        mask_steps += 1;
    }
    GreedySelection { tokens, stats: GreedyStats { sorts: 1, mask_steps } }
}

/// One-hot selection Jacobian: row j is one-hot at the j-th chosen index.
#[derive(Debug, Clone)]
pub struct JacobianMask {
    /// chosen.len() x q.len() one-hot pattern.
    pub pattern: Array2,
    /// True when a score tie touches the selection (a measure-zero event
    /// where the mapping is not differentiable).
    pub tie_flagged: bool,
}

/// Builds the selection Jacobian pattern for a masked-greedy result.
pub fn selection_jacobian_mask(q: &[f64], chosen: &[usize]) -> JacobianMask {
    let mut pattern = Array2::zeros(chosen.len(), q.len());
    for (row, idx) in chosen.iter().enumerate() {
        pattern.set(row, *idx, 1.0);
    }
    let mut tie_flagged = false;
    for &c in chosen {
        for (i, v) in q.iter().enumerate() {
            if i != c && *v == q[c] {
                tie_flagged = true;
            }
        }
    }
    JacobianMask { pattern, tie_flagged }
}

/// Dynamic sparsity scaling state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MitigationState {
    /// Burst mode currently active.
    pub active: bool,
    /// Trigger threshold on the short-slack fraction p.
    pub tau_p: f64,
    /// Nominal fraction of the block size used for selection.
    pub alpha_nom: f64,
    /// Reduced fraction under overload.
    pub alpha_burst: f64,
    /// Consecutive calm ticks required before reverting.
    pub hysteresis: u32,
    /// Calm ticks observed so far while active.
    pub calm_ticks: u32,
}

impl Default for MitigationState {
    fn default() -> Self {
        MitigationState {
            active: false,
            tau_p: 0.30,
            alpha_nom: 0.10,
            alpha_burst: 0.05,
            hysteresis: 5,
            calm_ticks: 0,
        }
    }
}

impl MitigationState {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_burst > 0.0 && self.alpha_burst < self.alpha_nom && self.alpha_nom <= 1.0)
        {
            return Err(Error::contract("mitigation: need 0 < alpha_burst < alpha_nom <= 1"));
        }
        if !(self.tau_p > 0.0 && self.tau_p < 1.0) {
            return Err(Error::contract("mitigation: tau_p must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Advances the mitigation state with the latest short-slack fraction.
/// Burst mode engages immediately when `p > tau_p` and reverts only after
/// `hysteresis` consecutive ticks at or below the threshold. Returns the new
/// state and the effective sparsity fraction.
pub fn update_mitigation(mit: &MitigationState, p: f64) -> (MitigationState, f64) {
    let mut next = *mit;
    if p > next.tau_p {
        next.active = true;
        next.calm_ticks = 0;
    } else if next.active {
        next.calm_ticks += 1;
        if next.calm_ticks >= next.hysteresis {
            next.active = false;
            next.calm_ticks = 0;
        }
    }
    let alpha = if next.active { next.alpha_burst } else { next.alpha_nom };
    (next, alpha)
}

/// Effective per-block budget `k' = floor(alpha * B)`, floored at 1.
pub fn effective_k(alpha: f64, b: usize) -> usize {
    ((alpha * b as f64).floor() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_basics() {
        let valid = vec![true; 3];
        assert_eq!(argmax_action(&[0.2, 0.9, 0.1], &valid).unwrap(), 1);
        assert_eq!(argmax_action(&[0.5, 0.5], &[true, true]).unwrap(), 0);
        // Masked task rows: idle wins by default.
        assert_eq!(
            argmax_action(&[0.0, f64::NEG_INFINITY], &[true, false]).unwrap(),
            0
        );
        assert!(argmax_action(&[1.0], &[false]).is_err());
    }

    #[test]
    fn masked_greedy_selects_top_tasks() {
        let q = vec![0.0, 0.1, 0.9, 0.5, 0.7];
        let valid = vec![true; 5];
        let sel = masked_greedy(&q, &valid, 2);
        assert_eq!(sel.tokens, vec![2, 4]);
        assert_eq!(sel.stats.sorts, 1);
        assert!(sel.stats.mask_steps <= 2);
    }

    #[test]
    fn masked_greedy_exhaustion_and_empty() {
        let q = vec![0.9, 0.1, 0.2];
        let valid = vec![true, true, true];
        // m >= N selects every task even though idle scores highest.
        let sel = masked_greedy(&q, &valid, 5);
        assert_eq!(sel.tokens, vec![2, 1]);
        // No active tasks: everything idles.
        let sel = masked_greedy(&[0.3], &[true], 2);
        assert!(sel.tokens.is_empty());
    }

    #[test]
    fn masked_greedy_m1_matches_argmax_over_tasks() {
        let q = vec![0.4, 0.8, 0.2, 0.9];
        let valid = vec![true, true, true, true];
        let sel = masked_greedy(&q, &valid, 1);
        let task_argmax = argmax_action(
            &[f64::NEG_INFINITY, q[1], q[2], q[3]],
            &valid,
        )
        .unwrap();
        assert_eq!(sel.tokens, vec![task_argmax]);
    }

    #[test]
    fn jacobian_pattern_one_hot() {
        let q = vec![0.0, 0.1, 0.9, 0.5, 0.7];
        let sel = masked_greedy(&q, &[true; 5], 2);
        let jac = selection_jacobian_mask(&q, &sel.tokens);
        assert!(!jac.tie_flagged);
        assert_eq!(jac.pattern.shape(), (2, 5));
        assert_eq!(jac.pattern.get(0, 2), 1.0);
        assert_eq!(jac.pattern.get(1, 4), 1.0);
        assert_eq!(jac.pattern.data().iter().sum::<f64>(), 2.0);

        let tied = vec![0.0, 0.9, 0.9];
        let sel = masked_greedy(&tied, &[true; 3], 1);
        assert!(selection_jacobian_mask(&tied, &sel.tokens).tie_flagged);
    }

    #[test]
    fn selection_stable_under_small_perturbations() {
        let q = vec![0.0, 0.1, 0.9, 0.5, 0.7];
        let valid = vec![true; 5];
        let base = masked_greedy(&q, &valid, 2).tokens;
        // Gap to the best unchosen score is 0.5 - 0.1 = 0.4 at worst; nudge a
        // non-chosen index by less than the gap.
        let mut bumped = q.clone();
        bumped[1] += 0.2;
        assert_eq!(masked_greedy(&bumped, &valid, 2).tokens, base);
        // Raising a chosen score keeps it chosen.
        let mut raised = q;
        raised[2] += 5.0;
        assert_eq!(masked_greedy(&raised, &valid, 2).tokens, base);
    }

    #[test]
    fn mitigation_trigger_and_revert() {
        let mit = MitigationState::default();
        mit.validate().unwrap();
        let (m1, a1) = update_mitigation(&mit, 0.35);
        assert!(m1.active);
        assert_eq!(a1, 0.05);
        // Sustained low p: reverts only after `hysteresis` calm ticks.
        let mut cur = m1;
        for i in 0..5 {
            assert!(cur.active, "reverted early at tick {i}");
            let (next, _) = update_mitigation(&cur, 0.10);
            cur = next;
        }
        assert!(!cur.active);
        let (_, alpha) = update_mitigation(&cur, 0.10);
        assert_eq!(alpha, 0.10);
    }

    #[test]
    fn effective_k_floors_at_one() {
        assert_eq!(effective_k(0.05, 25), 1);
        assert_eq!(effective_k(0.10, 25), 2);
        assert_eq!(effective_k(0.10, 4), 1);
    }

    proptest! {
        #[test]
        fn greedy_selections_distinct_and_sized(
            scores in proptest::collection::vec(-10.0f64..10.0, 1..24),
            m in 1usize..6,
        ) {
            let mut q = vec![0.0];
            q.extend(scores);
            let valid = vec![true; q.len()];
            let sel = masked_greedy(&q, &valid, m);
            let mut sorted = sel.tokens.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), sel.tokens.len());
            prop_assert_eq!(sel.tokens.len(), m.min(q.len() - 1));
            prop_assert_eq!(sel.stats.sorts, 1);
            prop_assert!(sel.stats.mask_steps as usize <= m);
            // Constant shift leaves the selection unchanged.
            let shifted: Vec<f64> = q.iter().map(|v| v + 3.25).collect();
            prop_assert_eq!(masked_greedy(&shifted, &valid, m).tokens, sel.tokens);
        }

        #[test]
        fn mitigation_no_oscillation(raw in proptest::collection::vec(0.0f64..1.0, 1..120)) {
            let mut mit = MitigationState::default();
            let mut calm_run = 0u32;
            for p in raw {
                let was_active = mit.active;
                let (next, _) = update_mitigation(&mit, p);
                if p <= mit.tau_p {
                    calm_run += 1;
                } else {
                    calm_run = 0;
                }
                if was_active && !next.active {
                    // Reverting requires a full hysteresis window of calm.
                    prop_assert!(calm_run >= mit.hysteresis);
                }
                mit = next;
            }
        }
    }
}
