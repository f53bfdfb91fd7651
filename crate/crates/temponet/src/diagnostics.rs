//! Interpretability and analysis tools: attention entropy and alignment,
//! policy heatmaps, distillation of the learned policy into a weighted-slack
//! rule, and power-law scaling fits.

use crate::simcore::{slack, Decision, SimState};
use crate::taskmodel::Tick;
use crate::urgency::{quantize, QuantizerConfig};
use crate::{Error, Result};

/// Shannon entropy (natural log) of one attention row. The row must sum to 1
/// within 1e-6 over its (nonzero) entries; `0 ln 0 = 0`.
pub fn attention_entropy(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "attention row sums to {sum}, expected 1"
        )));
    }
    let mut h = 0.0;
    for &a in row {
        if a > 0.0 {
            h -= a * a.ln();
        }
    }
    Ok(h)
}

/// Top-k alignment between an attention row and the chosen token set:
/// `|Top_k(row) ∩ chosen| / min(k, |chosen|)`. An empty chosen set is an
/// idle decision, treated as `{0}`.
pub fn topk_alignment(row: &[f64], chosen: &[usize], k: usize) -> f64 {
    let idle = [0usize];
    let chosen: &[usize] = if chosen.is_empty() { &idle } else { chosen };
    let k = k.max(1);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|a, b| row[*b].partial_cmp(&row[*a]).unwrap().then(a.cmp(b)));
    let top: Vec<usize> = order.into_iter().take(k).collect();
    let hits = chosen.iter().filter(|c| top.contains(c)).count();
    hits as f64 / k.min(chosen.len()) as f64
}

/// Per-step interpretability record.
#[derive(Debug, Clone, Copy)]
pub struct StepDiag {
    pub t: Tick,
    pub entropy: f64,
    pub align_top1: f64,
    pub align_topk: f64,
}

/// Run-level diagnostics: per-step values plus time averages.
#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    pub steps: Vec<StepDiag>,
}

impl RunDiagnostics {
    pub fn push(&mut self, step: StepDiag) {
        self.steps.push(step);
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.entropy))
    }

    pub fn mean_align_top1(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.align_top1))
    }

    pub fn mean_align_topk(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.align_topk))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One candidate observation for the policy heatmap.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapObs {
    /// Quantized slack index of the candidate.
    pub sbin: usize,
    /// Normalized remaining execution c / C in (0, 1].
    pub rem_frac: f64,
    pub selected: bool,
}

/// Extracts heatmap observations from recorded decisions: one observation
/// per (decision, active candidate job).
pub fn heatmap_observations(
    decisions: &[Decision],
    quant: &QuantizerConfig,
) -> Vec<HeatmapObs> {
    let mut obs = Vec::new();
    for d in decisions {
        for job in &d.jobs {
            obs.push(HeatmapObs {
                sbin: quantize(slack(job, d.t), quant),
                rem_frac: job.remaining as f64 / job.wcet.max(1) as f64,
                selected: d.selected.contains(&job.task_id),
            });
        }
    }
    obs
}

/// Heatmap cell: selection probability, observation count, sparse flag.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeatCell {
    pub p: f64,
    pub count: u64,
    pub sparse: bool,
}

/// Selection-probability grid over (quantized slack bin, normalized
/// remaining work).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub slack_bins: usize,
    pub rem_bins: usize,
    pub cells: Vec<HeatCell>,
}

impl Heatmap {
    pub fn cell(&self, sbin: usize, rbin: usize) -> &HeatCell {
        &self.cells[sbin * self.rem_bins + rbin]
    }
}

/// Minimum observations per cell before it is considered estimable.
pub const HEATMAP_MIN_OBS: u64 = 10;

/// Aggregates selection probabilities over a (slack x remaining) grid;
/// cells with fewer than [`HEATMAP_MIN_OBS`] observations are flagged sparse.
pub fn policy_heatmap(
    obs: &[HeatmapObs],
    q_levels: usize,
    slack_bins: usize,
    rem_bins: usize,
) -> Heatmap {
    let mut counts = vec![0u64; slack_bins * rem_bins];
    let mut hits = vec![0u64; slack_bins * rem_bins];
    for o in obs {
        let sb = (o.sbin * slack_bins / q_levels.max(1)).min(slack_bins - 1);
        let rb = ((o.rem_frac * rem_bins as f64) as usize).min(rem_bins - 1);
        let idx = sb * rem_bins + rb;
        counts[idx] += 1;
        if o.selected {
            hits[idx] += 1;
        }
    }
    let cells = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| HeatCell {
            p: if c > 0 { h as f64 / c as f64 } else { 0.0 },
            count: c,
            sparse: c < HEATMAP_MIN_OBS,
        })
        .collect();
    Heatmap { slack_bins, rem_bins, cells }
}

fn weighted_slack_set(
    jobs: &[crate::taskmodel::JobInstance],
    t: Tick,
    take: usize,
    alpha: f64,
    beta: f64,
    quant: &QuantizerConfig,
) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = jobs
        .iter()
        .map(|j| {
            let sbin = quantize(slack(j, t), quant) as f64;
            (alpha / (sbin + 1.0) + beta / (j.remaining as f64 + 1.0), j.task_id)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.into_iter().take(take).map(|(_, id)| id).collect()
}

/// Fraction of decisions where the weighted-slack rule with the given
/// weights picks exactly the agent's task set.
pub fn rule_agreement(
    decisions: &[Decision],
    alpha: f64,
    beta: f64,
    quant: &QuantizerConfig,
) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    let mut matches = 0usize;
    for d in decisions {
        let take = if d.selected.is_empty() {
            // An idle decision agrees with the rule only when no task was
            // available.
            0
        } else {
            d.selected.len()
        };
        let rule = weighted_slack_set(&d.jobs, d.t, take.max(1).min(d.jobs.len()), alpha, beta, quant);
        let mut a: Vec<u32> = d.selected.clone();
        a.sort_unstable();
        let mut b = rule;
        b.sort_unstable();
        if a == b {
            matches += 1;
        }
    }
    matches as f64 / decisions.len() as f64
}

/// Grid search over alpha in {0, 0.01, ..., 1} (beta = 1 - alpha) for the
/// weighted-slack rule that best reproduces the recorded decisions. Returns
/// (alpha, beta, agreement).
pub fn distill_rule(decisions: &[Decision], quant: &QuantizerConfig) -> (f64, f64, f64) {
    let mut best = (0.0, 1.0, -1.0);
    for step in 0..=100 {
        let alpha = step as f64 / 100.0;
        let beta = 1.0 - alpha;
        let agree = rule_agreement(decisions, alpha, beta, quant);
        if agree > best.2 {
            best = (alpha, beta, agree);
        }
    }
    best
}

/// Hamming agreement between recorded decisions and another selector run on
/// the same state stream. The selector receives the reconstructed state and
/// returns selected task ids.
pub fn agreement<F>(decisions: &[Decision], m: usize, mut select_other: F) -> f64
where
    F: FnMut(&SimState) -> Vec<u32>,
{
    if decisions.is_empty() {
        return 0.0;
    }
    let mut matches = 0usize;
    for d in decisions {
        let state = SimState {
            clock: d.t,
            jobs: d.jobs.clone(),
            core_map: vec![None; m],
            prev_assignment: Default::default(),
            injected: Vec::new(),
        };
        let mut a = d.selected.clone();
        a.sort_unstable();
        let mut b = select_other(&state);
        b.sort_unstable();
        if a == b {
            matches += 1;
        }
    }
    matches as f64 / decisions.len() as f64
}

/// Power-law fit `T = c * N^e` via least squares on log-transformed data.
#[derive(Debug, Clone, Copy)]
pub struct PowerLawFit {
    pub c: f64,
    pub exponent: f64,
    pub r2: f64,
}

/// Fits sizes/times to a power law. Requires at least 4 strictly positive
/// points. R-squared is computed in log space; a constant series fits
/// exactly (R2 = 1, exponent 0).
pub fn fit_power_law(sizes: &[f64], times: &[f64]) -> Result<PowerLawFit> {
    if sizes.len() != times.len() || sizes.len() < 4 {
        return Err(Error::domain("fit_power_law: need >= 4 paired points"));
    }
    if sizes.iter().chain(times).any(|v| *v <= 0.0) {
        return Err(Error::domain("fit_power_law: values must be positive"));
    }
    let xs: Vec<f64> = sizes.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("fit_power_law: degenerate sizes"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let fitted = intercept + slope * x;
            (y - fitted) * (y - fitted)
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit { c: intercept.exp(), exponent: slope, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskmodel::JobInstance;
    use proptest::prelude::*;

    #[test]
    fn entropy_values() {
        assert_eq!(attention_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = attention_entropy(&[0.25; 4]).unwrap();
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
        let h = attention_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((h - 2.0f64.ln()).abs() < 1e-12);
        assert!(attention_entropy(&[0.5, 0.2]).is_err());
    }

    #[test]
    fn alignment_cases() {
        // Attention argmax equals the chosen action.
        assert_eq!(topk_alignment(&[0.1, 0.8, 0.1], &[1], 1), 1.0);
        // Two chosen, top-2 covers one.
        assert_eq!(topk_alignment(&[0.05, 0.6, 0.3, 0.05], &[1, 3], 2), 0.5);
        // k larger than |A|: denominator is |A|.
        assert_eq!(topk_alignment(&[0.1, 0.8, 0.1], &[1], 3), 1.0);
        // Idle decision.
        assert_eq!(topk_alignment(&[0.9, 0.1], &[], 1), 1.0);
    }

    fn job(id: u32, remaining: u64, deadline: u64) -> JobInstance {
        JobInstance {
            task_id: id,
            instance: 0,
            release: 0,
            abs_deadline: deadline,
            remaining,
            wcet: remaining.max(1),
            assigned_core: None,
        }
    }

    fn quant() -> QuantizerConfig {
        QuantizerConfig::uniform(16, 64.0)
    }

    #[test]
    fn distill_recovers_rule_policy() {
        // Decisions produced by the weighted-slack rule itself.
        let q = quant();
        let (alpha, beta) = (0.7, 0.3);
        let mut decisions = Vec::new();
        for t in 0..50u64 {
            let jobs = vec![
                job(1, 1 + t % 5, 10 + t % 17),
                job(2, 2 + t % 3, 5 + t % 23),
                job(3, 1 + t % 7, 30 + t % 11),
            ];
            let selected = weighted_slack_set(&jobs, t, 1, alpha, beta, &q);
            decisions.push(Decision { t, jobs, selected });
        }
        let (_, _, agree) = distill_rule(&decisions, &q);
        assert_eq!(agree, 1.0);
        assert_eq!(rule_agreement(&decisions, alpha, beta, &q), 1.0);
    }

    #[test]
    fn agreement_self_and_disjoint() {
        let q = quant();
        let mut decisions = Vec::new();
        for t in 0..20u64 {
            let jobs = vec![job(1, 2, 12 + t), job(2, 3, 9 + t)];
            let selected = weighted_slack_set(&jobs, t, 1, 1.0, 0.0, &q);
            decisions.push(Decision { t, jobs, selected });
        }
        let self_agree = agreement(&decisions, 1, |state| {
            weighted_slack_set(&state.jobs, state.clock, 1, 1.0, 0.0, &q)
        });
        assert_eq!(self_agree, 1.0);
        let none = agreement(&decisions, 1, |_| vec![999]);
        assert_eq!(none, 0.0);
    }

    #[test]
    fn heatmap_min_slack_concentrates_low_bins() {
        let q = quant();
        let mut decisions = Vec::new();
        for t in 0..300u64 {
            let jobs = vec![job(1, 2, t + 4), job(2, 2, t + 40)];
            // Min-slack policy always picks task 1 (slack 2 vs 38).
            decisions.push(Decision { t, jobs, selected: vec![1] });
        }
        let obs = heatmap_observations(&decisions, &q);
        let map = policy_heatmap(&obs, q.q, 10, 10);
        // Lowest slack column holds all selections.
        let low: f64 = (0..10).map(|rb| map.cell(0, rb).p).sum();
        let high: f64 = (0..10).map(|rb| map.cell(9, rb).p).sum();
        assert!(low > high);
    }

    #[test]
    fn heatmap_empty_all_sparse() {
        let map = policy_heatmap(&[], 16, 10, 10);
        assert!(map.cells.iter().all(|c| c.sparse));
    }

    #[test]
    fn power_law_exact_recovery() {
        let sizes: Vec<f64> = vec![8.0, 16.0, 32.0, 64.0, 128.0];
        let times: Vec<f64> = sizes.iter().map(|n| 2.0 * n.powf(1.5)).collect();
        let fit = fit_power_law(&sizes, &times).unwrap();
        assert!((fit.exponent - 1.5).abs() < 1e-6);
        assert!((fit.c - 2.0).abs() < 1e-6);
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let constant = vec![3.0; 5];
        let fit = fit_power_law(&sizes, &constant).unwrap();
        assert!(fit.exponent.abs() < 1e-12);

        assert!(fit_power_law(&sizes[..3], &times[..3]).is_err());
        assert!(fit_power_law(&sizes, &[1.0, 2.0, 3.0, 0.0, 5.0]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_and_alignment_bounds(
            raw in proptest::collection::vec(0.001f64..1.0, 2..24),
            k in 1usize..5,
        ) {
            let sum: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let h = attention_entropy(&row).unwrap();
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (row.len() as f64).ln() + 1e-9);
            let align = topk_alignment(&row, &[1], k);
            prop_assert!((0.0..=1.0).contains(&align));
        }
    }
}
