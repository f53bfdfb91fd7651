//! Classical and analytic scheduling policies: opponents, oracles, and
//! behavioral-cloning teachers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::simcore::{assign_cores, slack, ActionSet, Policy, SimState};
use crate::taskmodel::{JobInstance, TaskSpec};
use crate::urgency::{quantize, QuantizerConfig};
use crate::{Error, Result};

/// Baseline policy family.
#[derive(Debug, Clone)]
pub enum PolicyKind {
    /// Rate monotonic: smallest period first.
    Rm,
    /// Earliest deadline first.
    Edf,
    /// Shortest remaining processing time.
    Srpt,
    /// First come, first served (earliest release).
    Fcfs,
    /// Priority `alpha / (sbin + 1) + beta / (c + 1)` over quantized slack
    /// and remaining work; weights normalized to `alpha + beta = 1`.
    WeightedSlack { alpha: f64, beta: f64, quant: QuantizerConfig },
    /// Uniform random valid action per core.
    Random { seed: u64 },
    IdleAlways,
}

impl PolicyKind {
    /// Weighted-slack policy with weights normalized to sum to one.
    pub fn weighted_slack(alpha: f64, beta: f64, quant: QuantizerConfig) -> Result<Self> {
        let sum = alpha + beta;
        if !(sum > 0.0) || alpha < 0.0 || beta < 0.0 {
            return Err(Error::contract("weighted-slack weights must be nonnegative"));
        }
        Ok(PolicyKind::WeightedSlack { alpha: alpha / sum, beta: beta / sum, quant })
    }
}

/// The weighted-slack priority value for one job.
pub fn weighted_slack_priority(
    alpha: f64,
    beta: f64,
    quant: &QuantizerConfig,
    job: &JobInstance,
    t: crate::taskmodel::Tick,
) -> f64 {
    let sbin = quantize(slack(job, t), quant) as f64;
    alpha / (sbin + 1.0) + beta / (job.remaining as f64 + 1.0)
}

/// A runnable baseline policy (owns the RNG for the random variant).
pub struct Baseline {
    pub kind: PolicyKind,
    rng: Option<ChaCha8Rng>,
}

impl Baseline {
    pub fn new(kind: PolicyKind) -> Self {
        let rng = match &kind {
            PolicyKind::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        Baseline { kind, rng }
    }

    /// Parses CLI policy strings: `edf`, `rm`, `srpt`, `fcfs`, `idle`,
    /// `random`, `wslack:0.73,0.27`.
    pub fn parse(s: &str, quant: QuantizerConfig, seed: u64) -> Result<Baseline> {
        let kind = match s {
            "edf" => PolicyKind::Edf,
            "rm" => PolicyKind::Rm,
            "srpt" => PolicyKind::Srpt,
            "fcfs" => PolicyKind::Fcfs,
            "idle" => PolicyKind::IdleAlways,
            "random" => PolicyKind::Random { seed },
            _ => {
                if let Some(rest) = s.strip_prefix("wslack:") {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 2 {
                        return Err(Error::contract(format!("bad wslack spec '{s}'")));
                    }
                    let alpha: f64 = parts[0]
                        .trim()
                        .parse()
                        .map_err(|_| Error::contract(format!("bad wslack alpha in '{s}'")))?;
                    let beta: f64 = parts[1]
                        .trim()
                        .parse()
                        .map_err(|_| Error::contract(format!("bad wslack beta in '{s}'")))?;
                    PolicyKind::weighted_slack(alpha, beta, quant)?
                } else {
                    return Err(Error::contract(format!("unknown policy '{s}'")));
                }
            }
        };
        Ok(Baseline::new(kind))
    }

    /// Ranks active jobs (highest priority first) and returns the selected
    /// task ids for m cores. Ties always break toward the lowest task id.
    pub fn rank(&mut self, tasks: &[TaskSpec], state: &SimState, m: usize) -> Vec<u32> {
        let t = state.clock;
        let period_of = |job: &JobInstance| -> u64 {
            tasks
                .iter()
                .find(|ts| ts.id == job.task_id)
                .map(|ts| ts.period)
                // Injected one-shots: treat the relative deadline as period.
                .unwrap_or_else(|| job.abs_deadline.saturating_sub(job.release).max(1))
        };
        let mut jobs: Vec<&JobInstance> = state.jobs.iter().collect();
        match &self.kind {
            PolicyKind::IdleAlways => return Vec::new(),
            PolicyKind::Random { .. } => {
                let rng = self.rng.as_mut().expect("random policy rng");
                let mut remaining: Vec<u32> = jobs.iter().map(|j| j.task_id).collect();
                let mut picked = Vec::new();
                for _ in 0..m {
                    if remaining.is_empty() {
                        break;
                    }
                    // Index 0 is idle; the rest select a remaining task.
                    let choice = rng.gen_range(0..=remaining.len());
                    if choice == 0 {
                        continue;
                    }
                    picked.push(remaining.remove(choice - 1));
                }
                return picked;
            }
            PolicyKind::Rm => {
                jobs.sort_by_key(|j| (period_of(j), j.task_id));
            }
            PolicyKind::Edf => {
                jobs.sort_by_key(|j| (j.abs_deadline, j.task_id));
            }
            PolicyKind::Srpt => {
                jobs.sort_by_key(|j| (j.remaining, j.task_id));
            }
            PolicyKind::Fcfs => {
                jobs.sort_by_key(|j| (j.release, j.task_id));
            }
            PolicyKind::WeightedSlack { alpha, beta, quant } => {
                let mut keyed: Vec<(f64, u32)> = jobs
                    .iter()
                    .map(|j| (weighted_slack_priority(*alpha, *beta, quant, j, t), j.task_id))
                    .collect();
                keyed.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                });
                return keyed.into_iter().take(m).map(|(_, id)| id).collect();
            }
        }
        jobs.into_iter().take(m).map(|j| j.task_id).collect()
    }
}

impl Policy for Baseline {
    fn select(&mut self, tasks: &[TaskSpec], state: &SimState) -> ActionSet {
        let m = state.cores();
        let selected = self.rank(tasks, state, m);
        assign_cores(&selected, state, m)
    }

    fn name(&self) -> String {
        match &self.kind {
            PolicyKind::Rm => "rm".into(),
            PolicyKind::Edf => "edf".into(),
            PolicyKind::Srpt => "srpt".into(),
            PolicyKind::Fcfs => "fcfs".into(),
            PolicyKind::WeightedSlack { alpha, beta, .. } => {
                format!("wslack:{alpha:.2},{beta:.2}")
            }
            PolicyKind::Random { .. } => "random".into(),
            PolicyKind::IdleAlways => "idle".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::reset;

    fn quant() -> QuantizerConfig {
        QuantizerConfig::uniform(128, 200.0)
    }

    fn counterexample() -> Vec<TaskSpec> {
        // One-shot integerized instance: A short but slack-rich, B urgent.
        vec![TaskSpec::new(1, 200, 1, 100), TaskSpec::new(2, 200, 3, 3)]
    }

    #[test]
    fn edf_picks_min_deadline() {
        let tasks = vec![
            TaskSpec::new(1, 50, 1, 12),
            TaskSpec::new(2, 50, 1, 7),
            TaskSpec::new(3, 50, 1, 30),
        ];
        let (state, _) = reset(&tasks, 1);
        let mut p = Baseline::new(PolicyKind::Edf);
        assert_eq!(p.rank(&tasks, &state, 1), vec![2]);
    }

    #[test]
    fn srpt_prefers_short_job_on_counterexample() {
        let tasks = counterexample();
        let (state, _) = reset(&tasks, 1);
        let mut p = Baseline::new(PolicyKind::Srpt);
        assert_eq!(p.rank(&tasks, &state, 1), vec![1]);
    }

    #[test]
    fn weighted_slack_priorities_match_formula() {
        // alpha=0.73, beta=0.27: (sbin=0, c=1) beats (sbin=9, c=1).
        let q = quant();
        let job = |remaining, deadline| JobInstance {
            task_id: 1,
            instance: 0,
            release: 0,
            abs_deadline: deadline,
            remaining,
            wcet: remaining,
            assigned_core: None,
        };
        // sbin = 0 requires slack < delta (200/128); slack(d=1,c=1,t=0) = 0.
        let urgent = job(1, 1);
        let p_urgent = weighted_slack_priority(0.73, 0.27, &q, &urgent, 0);
        assert!((p_urgent - 0.865).abs() < 1e-12);
        // sbin = 9 requires slack in [9, 10) * delta; delta = 1.5625.
        let relaxed = job(1, 16); // slack 15 -> floor(15/1.5625) = 9
        let p_relaxed = weighted_slack_priority(0.73, 0.27, &q, &relaxed, 0);
        assert!((p_relaxed - (0.73 / 10.0 + 0.27 / 2.0)).abs() < 1e-12);
        assert!((p_relaxed - 0.208).abs() < 1e-12);
    }

    #[test]
    fn weighted_slack_alpha_one_is_min_quantized_slack() {
        let tasks = vec![
            TaskSpec::new(1, 100, 4, 60),
            TaskSpec::new(2, 100, 2, 20),
            TaskSpec::new(3, 100, 8, 90),
        ];
        let (state, _) = reset(&tasks, 1);
        let q = quant();
        let mut p =
            Baseline::new(PolicyKind::weighted_slack(1.0, 0.0, q.clone()).unwrap());
        let picked = p.rank(&tasks, &state, 1)[0];
        let min_bin_task = state
            .jobs
            .iter()
            .min_by_key(|j| (quantize(slack(j, 0), &q), j.task_id))
            .unwrap()
            .task_id;
        assert_eq!(picked, min_bin_task);
    }

    #[test]
    fn weighted_slack_beta_one_is_srpt() {
        let tasks = vec![
            TaskSpec::new(1, 100, 4, 60),
            TaskSpec::new(2, 100, 2, 20),
            TaskSpec::new(3, 100, 8, 90),
        ];
        let (state, _) = reset(&tasks, 1);
        let mut ws =
            Baseline::new(PolicyKind::weighted_slack(0.0, 1.0, quant()).unwrap());
        let mut srpt = Baseline::new(PolicyKind::Srpt);
        assert_eq!(ws.rank(&tasks, &state, 1), srpt.rank(&tasks, &state, 1));
    }

    #[test]
    fn rankings_invariant_under_job_reordering() {
        let tasks = vec![
            TaskSpec::new(1, 40, 3, 35),
            TaskSpec::new(2, 60, 5, 44),
            TaskSpec::new(3, 25, 2, 21),
            TaskSpec::new(4, 80, 9, 77),
        ];
        let (state, _) = reset(&tasks, 1);
        let mut shuffled = state.clone();
        shuffled.jobs.reverse();
        for kind in [PolicyKind::Edf, PolicyKind::Rm, PolicyKind::Srpt, PolicyKind::Fcfs] {
            let a = Baseline::new(kind.clone()).rank(&tasks, &state, 2);
            let b = Baseline::new(kind).rank(&tasks, &shuffled, 2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deterministic_policies_reproduce_traces() {
        use crate::simcore::{run_episode, RewardConfig};
        let tasks = vec![TaskSpec::new(1, 5, 2, 5), TaskSpec::new(2, 7, 3, 7)];
        let run = |kind: PolicyKind| {
            let mut p = Baseline::new(kind);
            run_episode(&tasks, &mut p, 35, &RewardConfig::default(), 1)
                .unwrap()
                .1
        };
        assert_eq!(run(PolicyKind::Edf), run(PolicyKind::Edf));
        assert_eq!(
            run(PolicyKind::Random { seed: 3 }),
            run(PolicyKind::Random { seed: 3 })
        );
    }

    #[test]
    fn parse_policy_strings() {
        let q = quant();
        assert!(Baseline::parse("edf", q.clone(), 0).is_ok());
        assert!(Baseline::parse("wslack:0.73,0.27", q.clone(), 0).is_ok());
        assert!(Baseline::parse("nope", q, 0).is_err());
    }
}
