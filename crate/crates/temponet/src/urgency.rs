//! The urgency tokenizer: slack quantization, binning schemes, learnable
//! urgency embeddings, and token assembly.
//!
//! A token batch has one row per schedulable token: row 0 is the learned idle
//! token, rows 1..=N correspond to the task set in id order, and any injected
//! one-shot jobs occupy additional rows. Rows without an active job are
//! masked. Each active row is `E[s_bin] + W_f . [c/C, (d-t)/P]`, with an
//! additive reserve bias on the top bin when the long-slack reserve is
//! enabled.

use serde::{Deserialize, Serialize};

use crate::numcore::{Array2, ParamStore, Tape, Var};
use crate::simcore::{slack, SimState};
use crate::taskmodel::TaskSpec;
use crate::{Error, Result};

/// Parameter-store keys used by the tokenizer.
pub const EMBED_KEY: &str = "tok.embed";
pub const FEAT_KEY: &str = "tok.feat";
pub const IDLE_KEY: &str = "tok.idle";
pub const RESERVE_KEY: &str = "tok.reserve";

/// Slack binning scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinScheme {
    Uniform,
    LogSpaced,
    /// Data-driven bins: nearest of `centers` (sorted ascending).
    KMeans { centers: Vec<f64> },
}

/// Quantizer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    #[serde(rename = "Q")]
    pub q: usize,
    /// Bin width in ticks (uniform scheme). `delta * q == s_max`.
    pub delta: f64,
    pub scheme: BinScheme,
    /// Reserve the highest bin as a long-slack insurance bucket with a
    /// learned additive bias.
    #[serde(rename = "reserve", default)]
    pub reserve_long_slack: bool,
    /// Clipping ceiling for slack values.
    pub s_max: f64,
}

impl QuantizerConfig {
    /// Uniform bins covering `[0, s_max)` with `q` levels.
    pub fn uniform(q: usize, s_max: f64) -> Self {
        QuantizerConfig {
            q,
            delta: s_max / q as f64,
            scheme: BinScheme::Uniform,
            reserve_long_slack: false,
            s_max,
        }
    }

    /// Default quantizer for a task set: Q = 128 uniform bins with the
    /// ceiling at the largest period.
    pub fn default_for(tasks: &[TaskSpec]) -> Self {
        let s_max = tasks.iter().map(|t| t.period).max().unwrap_or(128) as f64;
        Self::uniform(128, s_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::contract("quantizer: Q must be >= 2"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::contract("quantizer: delta must be > 0"));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::contract("quantizer: s_max must be > 0"));
        }
        match &self.scheme {
            BinScheme::Uniform => {
                if (self.delta * self.q as f64 - self.s_max).abs() > 1e-9 * self.s_max.max(1.0) {
                    return Err(Error::contract("quantizer: delta * Q must equal s_max"));
                }
            }
            BinScheme::KMeans { centers } => {
                if centers.len() != self.q {
                    return Err(Error::contract("quantizer: need Q k-means centers"));
                }
                if centers.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::contract("quantizer: centers must be sorted"));
                }
            }
            BinScheme::LogSpaced => {}
        }
        Ok(())
    }

    /// Slack at or above this value falls in the reserved (top) bin.
    pub fn reserve_threshold(&self) -> f64 {
        match &self.scheme {
            BinScheme::Uniform => (self.q as f64 - 1.0) * self.delta,
            BinScheme::LogSpaced => {
                ((self.s_max + 1.0).powf((self.q as f64 - 1.0) / self.q as f64)) - 1.0
            }
            BinScheme::KMeans { centers } => {
                let last = centers[self.q - 1];
                let prev = centers[self.q - 2];
                (last + prev) / 2.0
            }
        }
    }
}

/// Maps slack to a bin index. Monotone nondecreasing in `s` for every
/// scheme; negative slack clips to bin 0 (most urgent).
pub fn quantize(s: i64, cfg: &QuantizerConfig) -> usize {
    let qm1 = cfg.q - 1;
    match &cfg.scheme {
        BinScheme::Uniform => {
            let idx = (s as f64 / cfg.delta).floor();
            if idx < 0.0 {
                0
            } else if idx > qm1 as f64 {
                qm1
            } else {
                idx as usize
            }
        }
        BinScheme::LogSpaced => {
            if s <= 0 {
                return 0;
            }
            let frac = ((s as f64) + 1.0).ln() / (cfg.s_max + 1.0).ln();
            let idx = (cfg.q as f64 * frac).floor();
            (idx.max(0.0) as usize).min(qm1)
        }
        BinScheme::KMeans { centers } => {
            let sv = s as f64;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (sv - c).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        }
    }
}

/// Assembled encoder input: token matrix plus row bookkeeping.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// (rows x d) token matrix; row 0 is the idle token.
    pub x: Array2,
    /// Row validity: idle is always valid, task rows only when a job is
    /// active.
    pub valid: Vec<bool>,
    /// Quantized slack index per row (0 for idle and inactive rows).
    pub sbin: Vec<usize>,
    /// Absolute deadline per row, used for canonical deadline sorting in the
    /// sparse attention path (`u64::MAX` for idle/inactive rows).
    pub deadline_key: Vec<u64>,
    /// Task id behind each row (0 for the idle row).
    pub row_task: Vec<u32>,
}

impl TokenBatch {
    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn n_valid_tasks(&self) -> usize {
        self.valid.iter().skip(1).filter(|v| **v).count()
    }

    /// Row index of the active job of `task_id`, if any.
    pub fn row_of_task(&self, task_id: u32) -> Option<usize> {
        self.row_task
            .iter()
            .position(|t| *t == task_id)
            .filter(|i| self.valid[*i])
    }
}

struct RowPlan {
    task_id: u32,
    /// (sbin, c/C, (d-t)/P, deadline) for active rows.
    active: Option<(usize, f64, f64, u64)>,
}

fn plan_rows(tasks: &[TaskSpec], state: &SimState, cfg: &QuantizerConfig) -> Vec<RowPlan> {
    let t = state.clock;
    let mut rows = Vec::with_capacity(tasks.len() + 1);
    for task in tasks {
        let active = state.job(task.id).map(|job| {
            let sbin = quantize(slack(job, t), cfg);
            let rem = job.remaining as f64 / job.wcet.max(1) as f64;
            let horizon = job.abs_deadline.saturating_sub(t) as f64 / task.period as f64;
            (sbin, rem, horizon, job.abs_deadline)
        });
        rows.push(RowPlan { task_id: task.id, active });
    }
    // Injected one-shot jobs, ordered by id.
    for job in &state.jobs {
        if job.task_id >= crate::simcore::BURST_ID_BASE {
            let sbin = quantize(slack(job, t), cfg);
            let rem = job.remaining as f64 / job.wcet.max(1) as f64;
            let period = job.abs_deadline.saturating_sub(job.release).max(1);
            let horizon = job.abs_deadline.saturating_sub(t) as f64 / period as f64;
            rows.push(RowPlan {
                task_id: job.task_id,
                active: Some((sbin, rem, horizon, job.abs_deadline)),
            });
        }
    }
    rows
}

fn check_params(params: &ParamStore, cfg: &QuantizerConfig) -> Result<usize> {
    let embed = params.get(EMBED_KEY)?;
    if embed.rows() != cfg.q {
        return Err(Error::contract(format!(
            "embedding table has {} rows, quantizer has Q={}",
            embed.rows(),
            cfg.q
        )));
    }
    let d = embed.cols();
    let feat = params.get(FEAT_KEY)?;
    if feat.shape() != (2, d) {
        return Err(Error::contract("feature projection must be 2 x d"));
    }
    if params.get(IDLE_KEY)?.shape() != (1, d) {
        return Err(Error::contract("idle embedding must be 1 x d"));
    }
    if params.get(RESERVE_KEY)?.shape() != (1, d) {
        return Err(Error::contract("reserve bias must be 1 x d"));
    }
    Ok(d)
}

/// Builds the token batch for a state (pure value computation).
pub fn tokenize(
    tasks: &[TaskSpec],
    state: &SimState,
    params: &ParamStore,
    cfg: &QuantizerConfig,
) -> Result<TokenBatch> {
    cfg.validate()?;
    let d = check_params(params, cfg)?;
    let embed = params.get(EMBED_KEY)?;
    let feat = params.get(FEAT_KEY)?;
    let idle = params.get(IDLE_KEY)?;
    let reserve = params.get(RESERVE_KEY)?;

    let plan = plan_rows(tasks, state, cfg);
    let rows = plan.len() + 1;
    let mut x = Array2::zeros(rows, d);
    let mut valid = vec![false; rows];
    let mut sbin = vec![0usize; rows];
    let mut deadline_key = vec![u64::MAX; rows];
    let mut row_task = vec![0u32; rows];

    x.row_mut(0).copy_from_slice(idle.row(0));
    valid[0] = true;

    for (i, rp) in plan.iter().enumerate() {
        let r = i + 1;
        row_task[r] = rp.task_id;
        let Some((bin, rem, horizon, dl)) = rp.active else { continue };
        valid[r] = true;
        sbin[r] = bin;
        deadline_key[r] = dl;
        let row = x.row_mut(r);
        for c in 0..d {
            let mut v = embed.get(bin, c) + rem * feat.get(0, c) + horizon * feat.get(1, c);
            if cfg.reserve_long_slack && bin == cfg.q - 1 {
                v += reserve.get(0, c);
            }
            row[c] = v;
        }
    }

    Ok(TokenBatch { x, valid, sbin, deadline_key, row_task })
}

/// Tokenizer parameters registered as named leaves on a tape.
pub struct TokenizerVars {
    pub embed: Var,
    pub feat: Var,
    pub idle: Var,
    pub reserve: Var,
}

impl TokenizerVars {
    pub fn register(tape: &mut Tape, params: &ParamStore) -> Result<Self> {
        Ok(TokenizerVars {
            embed: tape.param(EMBED_KEY, params.get(EMBED_KEY)?.clone()),
            feat: tape.param(FEAT_KEY, params.get(FEAT_KEY)?.clone()),
            idle: tape.param(IDLE_KEY, params.get(IDLE_KEY)?.clone()),
            reserve: tape.param(RESERVE_KEY, params.get(RESERVE_KEY)?.clone()),
        })
    }
}

/// Differentiable token assembly; gradients flow into the embedding rows
/// actually looked up, the feature projection, the idle embedding, and (when
/// enabled) the reserve bias.
pub fn tokenize_on_tape(
    tape: &mut Tape,
    vars: &TokenizerVars,
    tasks: &[TaskSpec],
    state: &SimState,
    cfg: &QuantizerConfig,
) -> Result<(Var, TokenBatch)> {
    cfg.validate()?;
    // Value-level batch for bookkeeping (masks, bins, deadlines).
    let plan = plan_rows(tasks, state, cfg);
    let rows = plan.len() + 1;

    let mut active_rows = Vec::new();
    let mut active_bins = Vec::new();
    let mut feat_const = Array2::zeros(rows, 2);
    let mut reserve_rows = Array2::zeros(rows, 1);
    let mut valid = vec![false; rows];
    let mut sbin = vec![0usize; rows];
    let mut deadline_key = vec![u64::MAX; rows];
    let mut row_task = vec![0u32; rows];
    valid[0] = true;

    for (i, rp) in plan.iter().enumerate() {
        let r = i + 1;
        row_task[r] = rp.task_id;
        let Some((bin, rem, horizon, dl)) = rp.active else { continue };
        valid[r] = true;
        sbin[r] = bin;
        deadline_key[r] = dl;
        active_rows.push(r);
        active_bins.push(bin);
        feat_const.set(r, 0, rem);
        feat_const.set(r, 1, horizon);
        if cfg.reserve_long_slack && bin == cfg.q - 1 {
            reserve_rows.set(r, 0, 1.0);
        }
    }

    // X = scatter(E[bins]) + F . W_f + onehot(0) . idle + R . reserve
    let feats = tape.constant(feat_const);
    let mut x = tape.matmul(feats, vars.feat)?;
    if !active_rows.is_empty() {
        let gathered = tape.embedding_lookup(vars.embed, &active_bins)?;
        let scattered = tape.scatter_rows(gathered, &active_rows, rows)?;
        x = tape.add(x, scattered)?;
    }
    let idle_mask = {
        let mut m = Array2::zeros(rows, 1);
        m.set(0, 0, 1.0);
        tape.constant(m)
    };
    let idle_part = tape.matmul(idle_mask, vars.idle)?;
    x = tape.add(x, idle_part)?;
    if cfg.reserve_long_slack {
        let rmask = tape.constant(reserve_rows);
        let rpart = tape.matmul(rmask, vars.reserve)?;
        x = tape.add(x, rpart)?;
    }

    let batch = TokenBatch { x: tape.value(x).clone(), valid, sbin, deadline_key, row_task };
    Ok((x, batch))
}

/// Fraction of active jobs whose slack is strictly below `delta`; 0 when no
/// jobs are active. This is the overload trigger signal `p`.
pub fn short_slack_fraction(state: &SimState, delta: f64) -> f64 {
    if state.jobs.is_empty() {
        return 0.0;
    }
    let t = state.clock;
    let short = state
        .jobs
        .iter()
        .filter(|j| (slack(j, t) as f64) < delta)
        .count();
    short as f64 / state.jobs.len() as f64
}

/// Lloyd's algorithm over 1-D slack samples, deterministic (quantile
/// initialization), at most 100 iterations or centroid shift below 1e-6.
/// Returns sorted centers. Degenerate inputs (all samples equal) collapse to
/// identical centers.
pub fn fit_kmeans_bins(samples: &[f64], q: usize) -> Result<Vec<f64>> {
    Ok(fit_kmeans_bins_detailed(samples, q)?.0)
}

/// As [`fit_kmeans_bins`], additionally returning the inertia after each
/// Lloyd iteration.
pub fn fit_kmeans_bins_detailed(samples: &[f64], q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return Err(Error::contract("k-means: Q must be >= 1"));
    }
    if samples.len() < q {
        return Err(Error::contract(format!(
            "k-means: {} samples for Q={q} bins",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut centers: Vec<f64> = (0..q)
        .map(|i| sorted[((i as f64 + 0.5) / q as f64 * n as f64) as usize % n])
        .collect();

    let mut inertia_history = Vec::new();
    for _ in 0..100 {
        let mut sums = vec![0.0f64; q];
        let mut counts = vec![0usize; q];
        let mut inertia = 0.0;
        for &s in &sorted {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (s - c).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            sums[best] += s;
            counts[best] += 1;
            inertia += best_d * best_d;
        }
        inertia_history.push(inertia);
        let mut shift = 0.0f64;
        for i in 0..q {
            if counts[i] > 0 {
                let next = sums[i] / counts[i] as f64;
                shift = shift.max((next - centers[i]).abs());
                centers[i] = next;
            }
        }
        if shift < 1e-6 {
            break;
        }
    }
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((centers, inertia_history))
}
