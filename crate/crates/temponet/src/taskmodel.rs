//! Task/job data model, synthetic task-set generators, and file I/O for task
//! sets and execution traces.
//!
//! Time is measured in integer ticks; one tick corresponds to one millisecond
//! of the modeled system.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Discrete simulation time, in ticks.
pub type Tick = u64;

/// Static parameters of a periodic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Task identifier, unique within a set (1..=N).
    pub id: u32,
    /// Nominal period, ticks.
    pub period: Tick,
    /// Worst-case execution time, ticks.
    pub wcet: Tick,
    /// Relative deadline, ticks; constrained to `0 < deadline <= period`.
    pub deadline: Tick,
    /// Mission-critical flag (used by PITMD and the success metric).
    #[serde(default)]
    pub critical: bool,
}

impl TaskSpec {
    pub fn new(id: u32, period: Tick, wcet: Tick, deadline: Tick) -> Self {
        TaskSpec { id, period, wcet, deadline, critical: false }
    }

    pub fn critical(mut self, flag: bool) -> Self {
        self.critical = flag;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::domain(format!("task {}: period must be > 0", self.id)));
        }
        if self.wcet == 0 {
            return Err(Error::domain(format!("task {}: wcet must be > 0", self.id)));
        }
        if self.deadline == 0 || self.deadline > self.period {
            return Err(Error::domain(format!(
                "task {}: deadline must satisfy 0 < D <= P (got D={}, P={})",
                self.id, self.deadline, self.period
            )));
        }
        Ok(())
    }
}

/// Validates a whole set: per-task invariants plus id uniqueness.
pub fn validate_taskset(tasks: &[TaskSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.id) {
            return Err(Error::domain(format!("duplicate task id {}", t.id)));
        }
    }
    Ok(())
}

/// A released job of a task: the dynamic half of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobInstance {
    pub task_id: u32,
    /// Instance index k (0 for the first release).
    pub instance: u64,
    /// Release tick.
    pub release: Tick,
    /// Absolute deadline. Set to `release + deadline` at release; migration
    /// latency penalties may later pull it earlier.
    pub abs_deadline: Tick,
    /// Remaining execution, ticks; active jobs have `remaining > 0`.
    pub remaining: Tick,
    /// Total execution requirement of this job (the task's WCET at release).
    pub wcet: Tick,
    /// Core the job last ran on, if it has run.
    pub assigned_core: Option<usize>,
}

impl JobInstance {
    pub fn release(task: &TaskSpec, instance: u64, at: Tick) -> Self {
        JobInstance {
            task_id: task.id,
            instance,
            release: at,
            abs_deadline: at + task.deadline,
            remaining: task.wcet,
            wcet: task.wcet,
            assigned_core: None,
        }
    }
}

/// Deadline distribution used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeadlineDist {
    /// Implicit deadlines: D = P.
    Implicit,
    /// Heavy-tailed deadlines: D ~ Pareto(alpha, x_min), clamped to
    /// `[x_min, P]`.
    Pareto { alpha: f64, x_min: Tick },
}

/// Configuration for synthetic task-set generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSetConfig {
    pub n_tasks: usize,
    /// Target aggregate utilization, in (0, 1.5].
    pub target_utilization: f64,
    /// Inclusive period range, ticks.
    pub period_range: (Tick, Tick),
    pub deadline_dist: DeadlineDist,
    /// Fraction of tasks flagged mission-critical (rounded down, >= 1 when
    /// positive).
    #[serde(default)]
    pub critical_fraction: f64,
    pub seed: u64,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        TaskSetConfig {
            n_tasks: 5,
            target_utilization: 0.8,
            period_range: (10, 100),
            deadline_dist: DeadlineDist::Implicit,
            critical_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Generation tolerance on aggregate utilization.
pub const UTILIZATION_TOLERANCE: f64 = 0.02;

/// Aggregate utilization U = sum C_i / P_i.
pub fn utilization(tasks: &[TaskSpec]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::domain("utilization of an empty task set"));
    }
    Ok(tasks.iter().map(|t| t.wcet as f64 / t.period as f64).sum())
}

/// Least common multiple of all periods: one full schedule cycle for a
/// synchronous periodic set.
pub fn hyperperiod(tasks: &[TaskSpec]) -> Result<Tick> {
    if tasks.is_empty() {
        return Err(Error::domain("hyperperiod of an empty task set"));
    }
    let mut acc: Tick = 1;
    for t in tasks {
        acc = lcm(acc, t.period).ok_or_else(|| {
            Error::domain(format!("hyperperiod overflow at task {}", t.id))
        })?;
    }
    Ok(acc)
}

fn gcd(a: Tick, b: Tick) -> Tick {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: Tick, b: Tick) -> Option<Tick> {
    (a / gcd(a, b)).checked_mul(b)
}

/// Draws one Pareto(alpha, x_min) sample by inverse-CDF.
pub fn pareto_sample(rng: &mut impl Rng, alpha: f64, x_min: f64) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    x_min * u.powf(-1.0 / alpha)
}

/// Generates a synthetic task set.
///
/// Utilization shares are drawn UUniFast-style over `n_tasks`, WCETs are
/// `round(u_i * P_i)` clamped to at least one tick, and a greedy +/-1
/// adjustment pass pulls the aggregate utilization back within
/// [`UTILIZATION_TOLERANCE`] of the target. Deterministic for a fixed seed.
pub fn generate_taskset(cfg: &TaskSetConfig) -> Result<Vec<TaskSpec>> {
    if cfg.n_tasks == 0 {
        return Err(Error::Generation("n_tasks must be > 0".into()));
    }
    if !(cfg.target_utilization > 0.0 && cfg.target_utilization <= 1.5) {
        return Err(Error::Generation(format!(
            "target utilization {} outside (0, 1.5]",
            cfg.target_utilization
        )));
    }
    let (p_lo, p_hi) = cfg.period_range;
    if p_lo == 0 || p_hi < p_lo {
        return Err(Error::Generation(format!(
            "invalid period range [{p_lo}, {p_hi}]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // UUniFast: uniform shares of the utilization budget.
    let mut shares = Vec::with_capacity(cfg.n_tasks);
    let mut remaining = cfg.target_utilization;
    for i in 1..cfg.n_tasks {
        let next =
            remaining * rng.gen_range(0.0f64..1.0).powf(1.0 / (cfg.n_tasks - i) as f64);
        shares.push(remaining - next);
        remaining = next;
    }
    shares.push(remaining);

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (i, share) in shares.iter().enumerate() {
        let period = rng.gen_range(p_lo..=p_hi);
        let wcet = ((share * period as f64).round() as Tick).max(1);
        let deadline = match cfg.deadline_dist {
            DeadlineDist::Implicit => period,
            DeadlineDist::Pareto { alpha, x_min } => {
                let d = pareto_sample(&mut rng, alpha, x_min as f64).round() as Tick;
                d.clamp(x_min.min(period), period).max(1)
            }
        };
        tasks.push(TaskSpec::new(i as u32 + 1, period, wcet, deadline));
    }

    // Greedy +/-1 WCET adjustment toward the target.
    let target = cfg.target_utilization;
    loop {
        let u = utilization(&tasks)?;
        let err = u - target;
        if err.abs() <= UTILIZATION_TOLERANCE * 0.5 {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in tasks.iter().enumerate() {
            let delta = 1.0 / t.period as f64;
            let candidate = if err > 0.0 {
                if t.wcet <= 1 {
                    continue;
                }
                (u - delta - target).abs()
            } else {
                (u + delta - target).abs()
            };
            if candidate < err.abs() && best.map_or(true, |(_, b)| candidate < b) {
                best = Some((i, candidate));
            }
        }
        match best {
            Some((i, _)) => {
                if err > 0.0 {
                    tasks[i].wcet -= 1;
                } else {
                    tasks[i].wcet += 1;
                }
            }
            None => break,
        }
    }

    let achieved = utilization(&tasks)?;
    if (achieved - target).abs() > UTILIZATION_TOLERANCE {
        return Err(Error::Generation(format!(
            "cannot reach utilization {target:.3} with {} tasks in period range \
             [{p_lo}, {p_hi}] (achieved {achieved:.3})",
            cfg.n_tasks
        )));
    }

    if cfg.critical_fraction > 0.0 {
        let n_crit = ((cfg.n_tasks as f64 * cfg.critical_fraction) as usize).max(1);
        for t in tasks.iter_mut().take(n_crit) {
            t.critical = true;
        }
    }

    validate_taskset(&tasks)?;
    Ok(tasks)
}

#[derive(Serialize, Deserialize)]
struct TaskSetFile {
    tasks: Vec<TaskSpec>,
}

/// Saves a task set as JSON (`{"tasks":[{"id":1,"period":40,...}, ...]}`).
pub fn save_taskset(tasks: &[TaskSpec], path: impl AsRef<Path>) -> Result<()> {
    validate_taskset(tasks)?;
    let file = TaskSetFile { tasks: tasks.to_vec() };
    let json = serde_json::to_string_pretty(&file).expect("taskset serialization");
    atomic_write(path.as_ref(), json.as_bytes())
}

/// Loads and validates a task set from JSON.
pub fn load_taskset(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file: TaskSetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {} column {}: {}", e.line(), e.column(), e),
    })?;
    validate_taskset(&file.tasks).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(file.tasks)
}

/// Writes `bytes` to `path` via a temp file + rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Kinds of schedule events recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Release,
    Start,
    Preempt,
    Complete,
    Miss,
    Migrate,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Release => "release",
            EventKind::Start => "start",
            EventKind::Preempt => "preempt",
            EventKind::Complete => "complete",
            EventKind::Miss => "miss",
            EventKind::Migrate => "migrate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "release" => EventKind::Release,
            "start" => EventKind::Start,
            "preempt" => EventKind::Preempt,
            "complete" => EventKind::Complete,
            "miss" => EventKind::Miss,
            "migrate" => EventKind::Migrate,
            _ => return None,
        })
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One schedule event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub t: Tick,
    pub task_id: u32,
    pub kind: EventKind,
    /// Core involved, when meaningful (start/preempt/migrate/complete).
    pub core: Option<usize>,
}

/// A full episode trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, t: Tick, task_id: u32, kind: EventKind, core: Option<usize>) {
        self.events.push(TraceEvent { t, task_id, kind, core });
    }

    /// Serializes as CSV with header `t,task_id,event,core`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("t,task_id,event,core\n");
        for e in &self.events {
            let core = e.core.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.t, e.task_id, e.kind, core));
        }
        atomic_write(path.as_ref(), out.as_bytes())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Trace> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut trace = Trace::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "t,task_id,event,core" {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        detail: format!("line 1: unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let fail = |field: &str| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: bad field '{field}'", lineno + 1),
            };
            if parts.len() != 4 {
                return Err(fail("(column count)"));
            }
            let t: Tick = parts[0].parse().map_err(|_| fail("t"))?;
            let task_id: u32 = parts[1].parse().map_err(|_| fail("task_id"))?;
            let kind = EventKind::parse(parts[2]).ok_or_else(|| fail("event"))?;
            let core = if parts[3].is_empty() {
                None
            } else {
                Some(parts[3].parse().map_err(|_| fail("core"))?)
            };
            trace.events.push(TraceEvent { t, task_id, kind, core });
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn utilization_direct_sum() {
        let tasks = vec![TaskSpec::new(1, 4, 1, 4), TaskSpec::new(2, 8, 2, 8)];
        assert_eq!(utilization(&tasks).unwrap(), 0.5);
    }

    #[test]
    fn utilization_boundary_and_overload() {
        let one = vec![TaskSpec::new(1, 4, 4, 4)];
        assert_eq!(utilization(&one).unwrap(), 1.0);
        // U = 1.3 requires wcet > period, which the validated TaskSpec forbids
        // by D <= P only; C may exceed D under overload.
        let over = vec![TaskSpec::new(1, 10, 13, 10)];
        assert!((utilization(&over).unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn utilization_empty_is_domain_error() {
        assert!(matches!(utilization(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn generation_deterministic() {
        let cfg = TaskSetConfig {
            n_tasks: 3,
            target_utilization: 0.9,
            seed: 7,
            ..Default::default()
        };
        let a = generate_taskset(&cfg).unwrap();
        let b = generate_taskset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_hits_utilization_band() {
        for seed in 0..100u64 {
            let cfg = TaskSetConfig {
                n_tasks: 3 + (seed % 6) as usize,
                target_utilization: 0.5 + 0.01 * (seed % 50) as f64,
                period_range: (10, 200),
                seed,
                ..Default::default()
            };
            let set = generate_taskset(&cfg).unwrap();
            let u = utilization(&set).unwrap();
            assert!(
                (u - cfg.target_utilization).abs() <= UTILIZATION_TOLERANCE,
                "seed {seed}: U={u} target={}",
                cfg.target_utilization
            );
        }
    }

    #[test]
    fn generation_infeasible_reports_error() {
        // 40 tasks at >= 1 tick each over periods <= 4 forces U >= 10.
        let cfg = TaskSetConfig {
            n_tasks: 40,
            target_utilization: 0.5,
            period_range: (2, 4),
            ..Default::default()
        };
        assert!(matches!(generate_taskset(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn pareto_min_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha = 2.0;
        let x_min = 10.0;
        let n = 10_000;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        for _ in 0..n {
            let s = pareto_sample(&mut rng, alpha, x_min);
            sum += s;
            min = min.min(s);
        }
        assert!(min >= x_min);
        let mean = sum / n as f64;
        let expect = alpha * x_min / (alpha - 1.0);
        assert!(
            (mean - expect).abs() / expect < 0.2,
            "mean {mean} vs expected {expect}"
        );
    }

    #[test]
    fn pareto_deadlines_respect_floor() {
        let cfg = TaskSetConfig {
            n_tasks: 8,
            target_utilization: 0.7,
            period_range: (20, 400),
            deadline_dist: DeadlineDist::Pareto { alpha: 2.0, x_min: 10 },
            seed: 3,
            ..Default::default()
        };
        let set = generate_taskset(&cfg).unwrap();
        for t in &set {
            assert!(t.deadline >= 10.min(t.period));
            assert!(t.deadline <= t.period);
        }
    }

    #[test]
    fn taskset_files_reject_invariant_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");

        std::fs::write(
            &path,
            r#"{"tasks":[{"id":1,"period":0,"wcet":1,"deadline":1,"critical":false}]}"#,
        )
        .unwrap();
        assert!(matches!(load_taskset(&path), Err(Error::Parse { .. })));

        std::fs::write(
            &path,
            r#"{"tasks":[
                {"id":1,"period":5,"wcet":1,"deadline":5,"critical":false},
                {"id":1,"period":6,"wcet":1,"deadline":6,"critical":false}]}"#,
        )
        .unwrap();
        assert!(matches!(load_taskset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut trace = Trace::default();
        trace.push(0, 1, EventKind::Release, None);
        trace.push(0, 1, EventKind::Start, Some(0));
        trace.push(3, 1, EventKind::Complete, Some(0));
        trace.push(5, 2, EventKind::Miss, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.save_csv(&path).unwrap();
        let back = Trace::load_csv(&path).unwrap();
        assert_eq!(trace, back);
    }

    proptest! {
        #[test]
        fn taskset_round_trip(seed in 0u64..500) {
            let cfg = TaskSetConfig {
                n_tasks: 2 + (seed % 7) as usize,
                target_utilization: 0.4 + 0.001 * (seed % 900) as f64,
                period_range: (5, 300),
                deadline_dist: if seed % 2 == 0 {
                    DeadlineDist::Implicit
                } else {
                    DeadlineDist::Pareto { alpha: 2.0, x_min: 10 }
                },
                critical_fraction: 0.4,
                seed,
            };
            let set = generate_taskset(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("set.json");
            save_taskset(&set, &path).unwrap();
            let back = load_taskset(&path).unwrap();
            prop_assert_eq!(set, back);
        }
    }
}
