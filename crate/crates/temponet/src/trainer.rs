//! Deep Q-learning loop: replay buffer, epsilon-greedy exploration with an
//! optional inverse-visit bonus, TD targets against a Polyak-averaged target
//! network, and a behavioral-cloning warm start.
//!
//! Replay stores raw state snapshots, re-tokenized at sampling time so that
//! embedding updates affect replayed states.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dispatch::{argmax_action, masked_greedy};
use crate::encoder::{
    forward, forward_on_tape, Capture, EncoderConfig, EncoderVars,
};
use crate::numcore::{
    adam_step, AdamConfig, AdamState, Array2, GradStore, ParamStore, Tape,
};
use crate::simcore::{
    assign_cores, compute_metrics, reset, step, ActionSet, Policy, RewardConfig,
    SimState,
};
use crate::taskmodel::{JobInstance, TaskSpec, Tick, Trace};
use crate::urgency::{tokenize, tokenize_on_tape, QuantizerConfig, TokenBatch, TokenizerVars};
use crate::{Error, Result};

/// Raw state snapshot: enough to re-tokenize under any parameters.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub clock: Tick,
    pub jobs: Vec<JobInstance>,
}

impl Snapshot {
    pub fn of(state: &SimState) -> Self {
        Snapshot { clock: state.clock, jobs: state.jobs.clone() }
    }

    pub fn to_state(&self, m: usize) -> SimState {
        SimState {
            clock: self.clock,
            jobs: self.jobs.clone(),
            core_map: vec![None; m],
            prev_assignment: Default::default(),
            injected: Vec::new(),
        }
    }
}

/// One stored experience. `action` holds the selected task ids (empty for an
/// idle decision).
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Snapshot,
    pub action: Vec<u32>,
    pub reward: f64,
    pub next: Snapshot,
    pub done: bool,
}

/// Bounded FIFO replay store with uniform without-replacement sampling.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), data: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, tr: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(tr);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Uniform sample of distinct indices (partial Fisher-Yates).
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        let n = self.data.len();
        let take = batch.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx[..take].iter().map(|i| &self.data[*i]).collect()
    }
}

/// Exploration schedule: linear epsilon annealing plus an optional
/// inverse-visit-count bonus on the exploitation path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub eps0: f64,
    pub eps_min: f64,
    /// Episodes over which epsilon decays linearly from eps0 to eps_min.
    pub decay_episodes: usize,
    /// Bonus weight beta; 0 disables the bonus and its counters.
    pub beta: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig { eps0: 1.0, eps_min: 0.05, decay_episodes: 100, beta: 0.0 }
    }
}

impl ExplorationConfig {
    /// Epsilon at an episode index: eps0 at 0, eps_min at/after the decay
    /// horizon, linear in between.
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 {
            return self.eps_min;
        }
        let frac = (episode as f64 / self.decay_episodes as f64).min(1.0);
        self.eps0 - (self.eps0 - self.eps_min) * frac
    }
}

/// Visit counters keyed by (state signature, token index).
#[derive(Debug, Default)]
pub struct VisitCounter {
    map: HashMap<u64, u32>,
}

impl VisitCounter {
    pub fn total(&self) -> u64 {
        self.map.values().map(|v| *v as u64).sum()
    }

    fn key(sig: u64, token: usize) -> u64 {
        fnv_mix(sig, token as u64)
    }

    pub fn count(&self, sig: u64, token: usize) -> u32 {
        *self.map.get(&Self::key(sig, token)).unwrap_or(&0)
    }

    pub fn record(&mut self, sig: u64, token: usize) {
        *self.map.entry(Self::key(sig, token)).or_insert(0) += 1;
    }
}

fn fnv_mix(a: u64, b: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for word in [a, b] {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Signature of a state: hash of the sorted quantized-slack indices of its
/// valid task rows.
pub fn state_signature(batch: &TokenBatch) -> u64 {
    let mut bins: Vec<u64> = batch
        .valid
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, v)| **v)
        .map(|(r, _)| batch.sbin[r] as u64)
        .collect();
    bins.sort_unstable();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bins {
        h = fnv_mix(h, b);
    }
    h
}

/// Everything needed to run the network: parameters plus architecture and
/// tokenizer configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamStore,
    pub encoder: EncoderConfig,
    pub quant: QuantizerConfig,
}

/// Training-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub capacity: usize,
    pub warmup_steps: usize,
    /// Train every this many environment steps.
    pub train_interval: usize,
    /// Polyak mixing coefficient.
    pub tau: f64,
    pub episodes: usize,
    pub horizon: Tick,
    pub cores: usize,
    pub seed: u64,
    pub exploration: ExplorationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 64,
            capacity: 100_000,
            warmup_steps: 1000,
            train_interval: 1,
            tau: 0.005,
            episodes: 100,
            horizon: 500,
            cores: 1,
            seed: 0,
            exploration: ExplorationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::contract("train: gamma must lie in [0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::contract("train: tau must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.episodes == 0 && false {
            return Err(Error::contract("train: batch size must be positive"));
        }
        Ok(())
    }
}

/// Scalar TD target for one transition: the summed step reward is split
/// equally over the selected tokens; terminal transitions do not bootstrap.
pub fn td_target_scalar(
    reward: f64,
    n_selected: usize,
    done: bool,
    max_next: f64,
    gamma: f64,
) -> f64 {
    let base = reward / n_selected.max(1) as f64;
    if done {
        base
    } else {
        base + gamma * max_next
    }
}

/// Computes TD targets for a batch against the target network.
pub fn td_targets(
    batch: &[&Transition],
    target: &Model,
    tasks: &[TaskSpec],
    gamma: f64,
    m: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for tr in batch {
        let max_next = if tr.done {
            0.0
        } else {
            let next_state = tr.next.to_state(m);
            let tokens = tokenize(tasks, &next_state, &target.params, &target.quant)?;
            let (q, _) = forward(&target.params, &tokens, &target.encoder, Capture::None)?;
            q.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max)
        };
        out.push(td_target_scalar(tr.reward, tr.action.len(), tr.done, max_next, gamma));
    }
    Ok(out)
}

/// Mean-squared TD loss over a batch with gradients through the encoder and
/// the tokenizer. For multicore transitions the per-token residuals of one
/// transition are averaged before the batch mean.
pub fn dqn_loss(
    batch: &[&Transition],
    model: &Model,
    targets: &[f64],
    tasks: &[TaskSpec],
    m: usize,
) -> Result<(f64, GradStore)> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::contract("dqn_loss: empty batch or target mismatch"));
    }
    let mut tape = Tape::new();
    let tok_vars = TokenizerVars::register(&mut tape, &model.params)?;
    let enc_vars = EncoderVars::register(&mut tape, &model.params, &model.encoder)?;

    let mut per_transition = Vec::with_capacity(batch.len());
    for (tr, y) in batch.iter().zip(targets) {
        let state = tr.state.to_state(m);
        let (x, tokens) =
            tokenize_on_tape(&mut tape, &tok_vars, tasks, &state, &model.quant)?;
        let art = forward_on_tape(&mut tape, &enc_vars, x, &tokens, &model.encoder, Capture::None)?;
        // Selected token rows; an idle decision regresses the idle token.
        let rows: Vec<usize> = if tr.action.is_empty() {
            vec![0]
        } else {
            tr.action
                .iter()
                .map(|id| {
                    tokens.row_of_task(*id).ok_or_else(|| {
                        Error::contract(format!("replayed action task {id} not active"))
                    })
                })
                .collect::<Result<_>>()?
        };
        let q_sel = tape.gather_rows(art.q, &rows)?;
        let y_const = tape.constant(Array2::filled(rows.len(), 1, *y));
        let resid = tape.sub(q_sel, y_const)?;
        let sq = tape.mul_elem(resid, resid)?;
        let sum = tape.sum_all(sq);
        per_transition.push(tape.scale(sum, 1.0 / rows.len() as f64));
    }
    let mut total = per_transition[0];
    for p in &per_transition[1..] {
        total = tape.add(total, *p)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let loss_value = tape.value(loss).get(0, 0);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("dqn loss".into()));
    }
    let grads = tape.backward(loss)?;
    let mut store = GradStore::new();
    tape.export_grads(&grads, &mut store)?;
    Ok((loss_value, store))
}

/// Polyak soft update: `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::contract("polyak: parameter sets differ"));
    }
    for (name, t) in target.iter_mut() {
        let o = online.get(name)?;
        if o.shape() != t.shape() {
            return Err(Error::contract(format!("polyak: shape mismatch on '{name}'")));
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

/// Epsilon-greedy action over masked Q-scores with the optional visit bonus.
/// Returns the selected task ids (empty = idle). Visit counters advance only
/// on the exploitation path and only when the bonus is enabled.
#[allow(clippy::too_many_arguments)]
pub fn select_exploratory(
    q: &[f64],
    tokens: &TokenBatch,
    m: usize,
    epsilon: f64,
    expl: &ExplorationConfig,
    counters: &mut VisitCounter,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    if rng.gen_range(0.0..1.0) < epsilon {
        // Uniform valid action: per core, idle or one of the remaining tasks.
        let mut remaining: Vec<u32> = tokens
            .valid
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, v)| **v)
            .map(|(r, _)| tokens.row_task[r])
            .collect();
        let mut picked = Vec::new();
        for _ in 0..m {
            if remaining.is_empty() {
                break;
            }
            let choice = rng.gen_range(0..=remaining.len());
            if choice == 0 {
                continue;
            }
            picked.push(remaining.remove(choice - 1));
        }
        return Ok(picked);
    }

    let sig = state_signature(tokens);
    let adjusted: Vec<f64> = if expl.beta > 0.0 {
        q.iter()
            .enumerate()
            .map(|(tok, v)| {
                if v.is_finite() {
                    v + expl.beta / ((counters.count(sig, tok) as f64) + 1.0).sqrt()
                } else {
                    *v
                }
            })
            .collect()
    } else {
        q.to_vec()
    };

    let selected_rows: Vec<usize> = if m == 1 {
        let a = argmax_action(&adjusted, &tokens.valid)?;
        if a == 0 {
            vec![]
        } else {
            vec![a]
        }
    } else {
        masked_greedy(&adjusted, &tokens.valid, m).tokens
    };
    if expl.beta > 0.0 {
        if selected_rows.is_empty() {
            counters.record(sig, 0);
        }
        for r in &selected_rows {
            counters.record(sig, *r);
        }
    }
    Ok(selected_rows.iter().map(|r| tokens.row_task[*r]).collect())
}

/// Per-episode training statistics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpisodeStat {
    pub episode: usize,
    pub epsilon: f64,
    /// Mean TD loss over the episode's updates (0 before training starts).
    pub loss: f64,
    pub compliance: f64,
}

/// Output of the training loop.
#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub target_params: ParamStore,
    pub curve: Vec<EpisodeStat>,
    pub env_steps: usize,
    pub train_steps: usize,
}

/// Runs the full DQN loop; deterministic for a fixed seed.
pub fn train(
    tasks: &[TaskSpec],
    mut model: Model,
    cfg: &TrainConfig,
    reward: &RewardConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut target = model.params.clone();
    let mut buffer = ReplayBuffer::new(cfg.capacity);
    let mut counters = VisitCounter::default();
    let mut adam = AdamState::default();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut expl_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x45787031);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53616d70);

    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut env_steps = 0usize;
    let mut train_steps = 0usize;

    for episode in 0..cfg.episodes {
        let epsilon = cfg.exploration.epsilon(episode);
        let (mut state, initial_events) = reset(tasks, cfg.cores);
        let mut trace = Trace { events: initial_events };
        let mut losses = Vec::new();

        for step_i in 0..cfg.horizon {
            let tokens = tokenize(tasks, &state, &model.params, &model.quant)?;
            let (q, _) = forward(&model.params, &tokens, &model.encoder, Capture::None)?;
            let ids = select_exploratory(
                &q,
                &tokens,
                cfg.cores,
                epsilon,
                &cfg.exploration,
                &mut counters,
                &mut expl_rng,
            )?;
            let action = assign_cores(&ids, &state, cfg.cores);
            let out = step(tasks, &state, &action, reward)?;
            let done = step_i == cfg.horizon - 1;
            buffer.push(Transition {
                state: Snapshot::of(&state),
                action: action.selected(),
                reward: out.reward,
                next: Snapshot::of(&out.state),
                done,
            });
            trace.events.extend(out.events);
            state = out.state;
            env_steps += 1;

            let warm = env_steps >= cfg.warmup_steps;
            if warm && env_steps % cfg.train_interval.max(1) == 0 && buffer.len() >= cfg.batch_size
            {
                let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
                let targets = td_targets(
                    &batch,
                    &Model {
                        params: target.clone(),
                        encoder: model.encoder,
                        quant: model.quant.clone(),
                    },
                    tasks,
                    cfg.gamma,
                    cfg.cores,
                )?;
                let (loss, grads) = dqn_loss(&batch, &model, &targets, tasks, cfg.cores)?;
                if loss > 1e6 {
                    return Err(Error::Divergence { step: env_steps, loss });
                }
                adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
                polyak_update(&mut target, &model.params, cfg.tau)?;
                losses.push(loss);
                train_steps += 1;
            }
        }

        // Drop next-window releases recorded by the final step.
        trace.events.retain(|e| {
            !(e.kind == crate::taskmodel::EventKind::Release && e.t == cfg.horizon)
        });
        let report = compute_metrics(&trace, tasks);
        let loss_mean = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        curve.push(EpisodeStat {
            episode,
            epsilon,
            loss: loss_mean,
            compliance: report.compliance_rate,
        });
    }

    Ok(TrainResult { model, target_params: target, curve, env_steps, train_steps })
}

/// Behavioral cloning: minimizes the negative log-likelihood of teacher
/// actions under a masked softmax over the per-token scores. Returns the
/// warm-started parameters and the mean NLL per epoch.
pub fn bc_pretrain(
    dataset: &[(Snapshot, Vec<u32>)],
    mut model: Model,
    tasks: &[TaskSpec],
    epochs: usize,
    lr: f64,
    m: usize,
) -> Result<(Model, Vec<f64>)> {
    if dataset.is_empty() {
        return Ok((model, Vec::new()));
    }
    let mut adam = AdamState::default();
    let adam_cfg = AdamConfig { lr, ..Default::default() };
    let mut history = Vec::with_capacity(epochs);
    const CHUNK: usize = 64;

    for _ in 0..epochs {
        let mut grads = GradStore::new();
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for chunk in dataset.chunks(CHUNK) {
            let mut tape = Tape::new();
            let tok_vars = TokenizerVars::register(&mut tape, &model.params)?;
            let enc_vars = EncoderVars::register(&mut tape, &model.params, &model.encoder)?;
            let mut terms = Vec::new();
            for (snap, action) in chunk {
                let state = snap.to_state(m);
                let (x, tokens) =
                    tokenize_on_tape(&mut tape, &tok_vars, tasks, &state, &model.quant)?;
                let art = forward_on_tape(
                    &mut tape,
                    &enc_vars,
                    x,
                    &tokens,
                    &model.encoder,
                    Capture::None,
                )?;
                // Teacher token: first selected task, or idle.
                let row = match action.first() {
                    None => 0,
                    Some(id) => tokens.row_of_task(*id).ok_or_else(|| {
                        Error::contract(format!("teacher action task {id} not active"))
                    })?,
                };
                let qt = tape.transpose(art.q);
                let mask = Array2::from_fn(1, tokens.rows(), |_, c| {
                    if tokens.valid[c] {
                        0.0
                    } else {
                        -1e9
                    }
                });
                let mask = tape.constant(mask);
                let masked = tape.add(qt, mask)?;
                let probs = tape.softmax_rows(masked);
                let logp = tape.ln(probs);
                let col = tape.transpose(logp);
                let picked = tape.gather_rows(col, &[row])?;
                terms.push(tape.scale(picked, -1.0));
                count += 1;
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = tape.add(total, *t)?;
            }
            nll_sum += tape.value(total).get(0, 0);
            let scaled = tape.scale(total, 1.0 / dataset.len() as f64);
            let g = tape.backward(scaled)?;
            tape.export_grads(&g, &mut grads)?;
        }
        history.push(nll_sum / count as f64);
        adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
        grads.zero();
    }
    Ok((model, history))
}

/// Collects (state, action) pairs from a teacher policy for BC.
pub fn collect_teacher_dataset(
    tasks: &[TaskSpec],
    teacher: &mut dyn Policy,
    episodes: usize,
    horizon: Tick,
    reward: &RewardConfig,
    m: usize,
) -> Result<Vec<(Snapshot, Vec<u32>)>> {
    let mut out = Vec::new();
    for _ in 0..episodes {
        let (decisions, _) = {
            let (_, _, decisions) =
                crate::simcore::run_episode_recorded(tasks, teacher, horizon, reward, m)?;
            (decisions, ())
        };
        for d in decisions {
            out.push((Snapshot { clock: d.t, jobs: d.jobs }, d.selected));
        }
    }
    Ok(out)
}

/// Greedy (epsilon = 0) evaluation policy around a trained model, with
/// optional interpretability capture and runtime mitigation.
pub struct AgentPolicy<'a> {
    pub model: &'a Model,
    pub epsilon: f64,
    rng: ChaCha8Rng,
    /// Capture per-step decision-token attention and q-scores.
    pub capture: bool,
    pub records: Vec<AgentStepRecord>,
    /// Dynamic sparsity scaling (requires a block-top-k encoder).
    pub mitigation: Option<crate::dispatch::MitigationState>,
    pub mitigation_trail: Vec<(Tick, f64, f64)>,
}

/// Per-step capture: decision-token attention row, q-scores, chosen rows.
#[derive(Debug, Clone)]
pub struct AgentStepRecord {
    pub t: Tick,
    pub q: Vec<f64>,
    pub attention_row0: Vec<f64>,
    pub selected_rows: Vec<usize>,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(model: &'a Model, seed: u64) -> Self {
        AgentPolicy {
            model,
            epsilon: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            capture: false,
            records: Vec::new(),
            mitigation: None,
            mitigation_trail: Vec::new(),
        }
    }
}

impl Policy for AgentPolicy<'_> {
    fn select(&mut self, tasks: &[TaskSpec], state: &SimState) -> ActionSet {
        let m = state.cores();
        let tokens = match tokenize(tasks, state, &self.model.params, &self.model.quant) {
            Ok(t) => t,
            Err(_) => return ActionSet::idle(m),
        };

        // Dynamic sparsity scaling: shrink the per-block budget under
        // short-slack pressure.
        let mut enc_cfg = self.model.encoder;
        if let Some(mit) = &self.mitigation {
            if let crate::encoder::AttentionMode::BlockTopK { params } = enc_cfg.attention {
                let p = crate::urgency::short_slack_fraction(state, self.model.quant.delta);
                let (next, alpha) = crate::dispatch::update_mitigation(mit, p);
                self.mitigation = Some(next);
                self.mitigation_trail.push((state.clock, p, alpha));
                let n = tokens.n_valid_tasks();
                let resolved = crate::encoder::SparseParams::resolve(params, n);
                let k = crate::dispatch::effective_k(alpha, resolved.b);
                enc_cfg.attention = crate::encoder::AttentionMode::BlockTopK {
                    params: Some(crate::encoder::ManualSparse {
                        b: resolved.b,
                        k,
                        m: resolved.m,
                    }),
                };
            }
        }

        let capture = if self.capture { Capture::Final } else { Capture::None };
        let Ok((q, attention)) = forward(&self.model.params, &tokens, &enc_cfg, capture) else {
            return ActionSet::idle(m);
        };

        let selected_rows: Vec<usize> = if self.epsilon > 0.0
            && self.rng.gen_range(0.0..1.0) < self.epsilon
        {
            let valid_rows: Vec<usize> = (1..tokens.rows()).filter(|r| tokens.valid[*r]).collect();
            let mut remaining = valid_rows;
            let mut picked = Vec::new();
            for _ in 0..m {
                if remaining.is_empty() {
                    break;
                }
                let choice = self.rng.gen_range(0..=remaining.len());
                if choice == 0 {
                    continue;
                }
                picked.push(remaining.remove(choice - 1));
            }
            picked
        } else if m == 1 {
            match argmax_action(&q, &tokens.valid) {
                Ok(0) | Err(_) => vec![],
                Ok(a) => vec![a],
            }
        } else {
            masked_greedy(&q, &tokens.valid, m).tokens
        };

        if self.capture {
            let row0 = attention
                .as_ref()
                .map(|a| a.averaged.row(0).to_vec())
                .unwrap_or_default();
            self.records.push(AgentStepRecord {
                t: state.clock,
                q: q.clone(),
                attention_row0: row0,
                selected_rows: selected_rows.clone(),
            });
        }

        let ids: Vec<u32> = selected_rows.iter().map(|r| tokens.row_task[*r]).collect();
        assign_cores(&ids, state, m)
    }

    fn name(&self) -> String {
        "agent".into()
    }
}
