//! Permutation-invariant transformer Q-network.
//!
//! The encoder stacks L post-norm transformer blocks (multi-head attention,
//! position-wise FFN, residual + layer norm) over the token batch and emits a
//! per-token Q-score through a shared linear head. No positional encodings:
//! task rows are an unordered set.
//!
//! Two attention paths exist. The dense path masks invalid keys additively
//! before the softmax. The sparse path canonically sorts task rows by
//! ascending absolute deadline (ties by task id), partitions them into
//! contiguous chunks, keeps the top-k scores per query within each B-wide
//! block of its own chunk, and keeps a single representative (maximum) score
//! per (query, other-chunk) pair. The idle token stays dense in both paths:
//! it is the decision token, so every row may attend to it and it attends to
//! every valid row.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::numcore::{Array2, CustomOp, ParamStore, Tape, Var};
use crate::urgency::TokenBatch;
use crate::{Error, Result};

pub const QHEAD_W_KEY: &str = "q_head.w";
pub const QHEAD_B_KEY: &str = "q_head.b";

/// Attention sparsification setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttentionMode {
    Dense,
    /// Block top-k with locality-aware chunking. `None` derives parameters
    /// from the live task count.
    BlockTopK {
        params: Option<ManualSparse>,
    },
}

/// Explicit sparse parameters: block size, per-block budget, chunk count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualSparse {
    pub b: usize,
    pub k: usize,
    pub m: usize,
}

/// Resolved sparse parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseParams {
    /// Block size B.
    pub b: usize,
    /// Retained scores per (query, block).
    pub k: usize,
    /// Chunk count M.
    pub m: usize,
    /// Chunk size C = ceil(N / M).
    pub c: usize,
}

/// Derives sparse parameters from the task count: `B = ceil(sqrt(N))`,
/// `k = max(1, floor(0.1 B))` for `N <= 100` or `floor(log2 B) + 1` above,
/// `M = ceil(log2 N)`, `C = ceil(N / M)`.
pub fn auto_sparse_params(n: usize) -> SparseParams {
    let n = n.max(1);
    let b = ceil_sqrt(n);
    let k = if n <= 100 {
        (b / 10).max(1)
    } else {
        (b.ilog2() as usize) + 1
    };
    let m = ceil_log2(n).max(1);
    let c = n.div_ceil(m);
    SparseParams { b, k, m, c }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 1 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

impl SparseParams {
    pub fn resolve(spec: Option<ManualSparse>, n: usize) -> SparseParams {
        match spec {
            None => auto_sparse_params(n),
            Some(ManualSparse { b, k, m }) => {
                let m = m.max(1);
                SparseParams { b: b.max(1), k: k.max(1), m, c: n.max(1).div_ceil(m) }
            }
        }
    }
}

/// Encoder configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub attention: AttentionMode,
}

impl EncoderConfig {
    /// Full-scale defaults: 2 layers, 4 heads, d = 128, FFN 4d.
    pub fn full() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            attention: AttentionMode::Dense,
        }
    }

    /// Test-scale defaults: 1 layer, 2 heads, d = 32.
    pub fn test_scale() -> Self {
        EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            attention: AttentionMode::Dense,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::contract("encoder: layers must be >= 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::contract("encoder: d_model must divide by heads"));
        }
        if self.d_ff == 0 {
            return Err(Error::contract("encoder: d_ff must be >= 1"));
        }
        Ok(())
    }
}

fn layer_key(l: usize, part: &str) -> String {
    format!("enc.l{l}.{part}")
}

/// Initializes all encoder and tokenizer parameters for a given quantizer
/// size. Deterministic for a fixed rng.
pub fn init_params(
    cfg: &EncoderConfig,
    q_levels: usize,
    rng: &mut impl rand::Rng,
) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.insert(crate::urgency::EMBED_KEY, Array2::randn(q_levels, d, 0.1, rng));
    p.insert(crate::urgency::FEAT_KEY, Array2::randn(2, d, 0.1, rng));
    p.insert(crate::urgency::IDLE_KEY, Array2::randn(1, d, 0.1, rng));
    p.insert(crate::urgency::RESERVE_KEY, Array2::randn(1, d, 0.1, rng));
    let w_std = (1.0 / d as f64).sqrt();
    for l in 0..cfg.layers {
        for part in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            p.insert(layer_key(l, part), Array2::randn(d, d, w_std, rng));
        }
        p.insert(layer_key(l, "ln1.g"), Array2::filled(1, d, 1.0));
        p.insert(layer_key(l, "ln1.b"), Array2::zeros(1, d));
        p.insert(layer_key(l, "ln2.g"), Array2::filled(1, d, 1.0));
        p.insert(layer_key(l, "ln2.b"), Array2::zeros(1, d));
        p.insert(layer_key(l, "ffn.w1"), Array2::randn(d, cfg.d_ff, w_std, rng));
        p.insert(layer_key(l, "ffn.b1"), Array2::zeros(1, cfg.d_ff));
        p.insert(
            layer_key(l, "ffn.w2"),
            Array2::randn(cfg.d_ff, d, (1.0 / cfg.d_ff as f64).sqrt(), rng),
        );
        p.insert(layer_key(l, "ffn.b2"), Array2::zeros(1, d));
    }
    p.insert(QHEAD_W_KEY, Array2::randn(d, 1, w_std, rng));
    p.insert(QHEAD_B_KEY, Array2::zeros(1, 1));
    Ok(p)
}

/// Encoder parameters registered as tape leaves.
pub struct EncoderVars {
    vars: BTreeMap<String, Var>,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, params: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let mut vars = BTreeMap::new();
        let mut bind = |tape: &mut Tape, key: String| -> Result<()> {
            let v = tape.param(key.clone(), params.get(&key)?.clone());
            vars.insert(key, v);
            Ok(())
        };
        for l in 0..cfg.layers {
            for part in [
                "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln1.g", "ln1.b", "ln2.g",
                "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
            ] {
                bind(tape, layer_key(l, part))?;
            }
        }
        bind(tape, QHEAD_W_KEY.into())?;
        bind(tape, QHEAD_B_KEY.into())?;
        Ok(EncoderVars { vars })
    }

    fn var(&self, key: &str) -> Var {
        *self.vars.get(key).expect("registered encoder var")
    }
}

/// Final-layer attention maps.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Head-averaged map, rows x rows.
    pub averaged: Array2,
    /// Per-head maps.
    pub per_head: Vec<Array2>,
}

/// What attention maps to materialize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    None,
    Final,
    AllLayers,
}

/// Tape-level outputs of one encoder forward.
pub struct ForwardArtifacts {
    /// Raw per-token scores, rows x 1 (no validity sentinels applied).
    pub q: Var,
    /// Final-layer attention (when captured).
    pub final_attention: Option<AttentionRecord>,
    /// All layers (when `Capture::AllLayers`).
    pub layers: Option<Vec<AttentionRecord>>,
}

/// Deadline-sorted sparsification plan shared by every layer of a forward.
#[derive(Debug)]
pub struct SparsePlan {
    pub params: SparseParams,
    /// Valid task rows in canonical order (ascending deadline, ties by task
    /// id).
    pub sorted: Vec<usize>,
    /// Chunk boundaries over `sorted` positions.
    pub chunks: Vec<std::ops::Range<usize>>,
    pub valid: Vec<bool>,
}

/// Builds the per-forward plan from the batch bookkeeping.
pub fn build_sparse_plan(batch: &TokenBatch, spec: Option<ManualSparse>) -> SparsePlan {
    let mut sorted: Vec<usize> = (1..batch.rows()).filter(|r| batch.valid[*r]).collect();
    sorted.sort_by_key(|r| (batch.deadline_key[*r], batch.row_task[*r]));
    let n = sorted.len();
    let params = SparseParams::resolve(spec, n);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + params.c).min(n);
        chunks.push(start..end);
        start = end;
    }
    SparsePlan { params, sorted, chunks, valid: batch.valid.clone() }
}

struct SparseAttnOp {
    plan: Rc<SparsePlan>,
    scale: f64,
    /// Retained (key row, weight) lists per query row, saved by forward.
    saved: Vec<Vec<(usize, f64)>>,
    /// Optional capture slot: forward materializes the dense weight map here.
    record: Option<Rc<std::cell::RefCell<Array2>>>,
}

impl SparseAttnOp {
    fn new(
        plan: Rc<SparsePlan>,
        scale: f64,
        record: Option<Rc<std::cell::RefCell<Array2>>>,
    ) -> Self {
        SparseAttnOp { plan, scale, saved: Vec::new(), record }
    }

    /// Retained key rows for one valid task query, scores included.
    fn retained_for_task(
        &self,
        qrow: &[f64],
        keys: &Array2,
        sorted_pos: usize,
    ) -> Vec<(usize, f64)> {
        let plan = &self.plan;
        let p = &plan.params;
        let score = |j: usize| -> f64 {
            let krow = keys.row(plan.sorted[j]);
            self.scale * dot(qrow, krow)
        };
        let own_chunk = sorted_pos / p.c;
        let mut retained = Vec::new();
        for (ci, chunk) in plan.chunks.iter().enumerate() {
            if ci == own_chunk {
                // Block top-k inside the query's own chunk.
                let mut bstart = chunk.start;
                while bstart < chunk.end {
                    let bend = (bstart + p.b).min(chunk.end);
                    let mut block: Vec<(usize, f64)> =
                        (bstart..bend).map(|j| (j, score(j))).collect();
                    block.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                    });
                    block.truncate(p.k);
                    block.sort_by_key(|e| e.0);
                    retained.extend(block);
                    bstart = bend;
                }
            } else {
                // One representative: the maximum score into that chunk.
                let best = chunk
                    .clone()
                    .map(|j| (j, score(j)))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
                if let Some(b) = best {
                    retained.push(b);
                }
            }
        }
        retained
            .into_iter()
            .map(|(j, s)| (plan.sorted[j], s))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CustomOp for SparseAttnOp {
    fn name(&self) -> &'static str {
        "sparse_attention"
    }

    fn forward(&mut self, inputs: &[&Array2]) -> Result<Array2> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let plan = self.plan.clone();
        let rows = q.rows();
        let dk = v.cols();
        let mut out = Array2::zeros(rows, dk);
        let mut saved = Vec::with_capacity(rows);
        let mut pos_of = vec![usize::MAX; rows];
        for (p, r) in plan.sorted.iter().enumerate() {
            pos_of[*r] = p;
        }
        for i in 0..rows {
            // Scored retained set: idle key first, then the pattern.
            let mut entries: Vec<(usize, f64)> = Vec::new();
            let qrow = q.row(i);
            entries.push((0, self.scale * dot(qrow, k.row(0))));
            if i == 0 {
                for &r in &plan.sorted {
                    entries.push((r, self.scale * dot(qrow, k.row(r))));
                }
            } else if plan.valid[i] {
                entries.extend(self.retained_for_task(qrow, k, pos_of[i]));
            }
            // Softmax over the retained scores.
            let max = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut weights: Vec<(usize, f64)> = entries
                .iter()
                .map(|(j, s)| {
                    let e = (s - max).exp();
                    sum += e;
                    (*j, e)
                })
                .collect();
            let orow = out.row_mut(i);
            for (j, w) in weights.iter_mut() {
                *w /= sum;
                let vrow = v.row(*j);
                for (o, x) in orow.iter_mut().zip(vrow) {
                    *o += *w * x;
                }
            }
            saved.push(weights);
        }
        if let Some(record) = &self.record {
            let mut map = Array2::zeros(rows, rows);
            for (i, entries) in saved.iter().enumerate() {
                for (j, w) in entries {
                    map.set(i, *j, *w);
                }
            }
            *record.borrow_mut() = map;
        }
        self.saved = saved;
        Ok(out)
    }

    fn backward(&self, upstream: &Array2, inputs: &[&Array2], grads: &mut [Array2]) {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let dk_cols = v.cols();
        for i in 0..q.rows() {
            let retained = &self.saved[i];
            if retained.is_empty() {
                continue;
            }
            let up = upstream.row(i);
            // dV and the softmax backward within the retained set.
            let da: Vec<f64> = retained
                .iter()
                .map(|(j, w)| {
                    let vrow = v.row(*j);
                    let a = dot(up, vrow);
                    for (g, u) in grads[2].row_mut(*j).iter_mut().zip(up) {
                        *g += w * u;
                    }
                    let _ = dk_cols;
                    a
                })
                .collect();
            let mix: f64 = retained.iter().zip(&da).map(|((_, w), a)| w * a).sum();
            for (idx, (j, w)) in retained.iter().enumerate() {
                let ds = w * (da[idx] - mix) * self.scale;
                for (g, kv) in grads[0].row_mut(i).iter_mut().zip(k.row(*j)) {
                    *g += ds * kv;
                }
                for (g, qv) in grads[1].row_mut(*j).iter_mut().zip(q.row(i)) {
                    *g += ds * qv;
                }
            }
        }
    }
}

/// Additive key mask: 0 on valid columns, -1e9 on invalid ones (same for
/// every row). The -1e9 underflows to exactly zero attention weight.
fn key_mask(batch: &TokenBatch) -> Array2 {
    let rows = batch.rows();
    Array2::from_fn(rows, rows, |_, c| if batch.valid[c] { 0.0 } else { -1e9 })
}

/// Runs the encoder on a tape. `x` must be the batch's token matrix.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
    batch: &TokenBatch,
    cfg: &EncoderConfig,
    capture: Capture,
) -> Result<ForwardArtifacts> {
    cfg.validate()?;
    let d = cfg.d_model;
    if tape.value(x).cols() != d {
        return Err(Error::contract(format!(
            "token width {} != encoder d_model {d}",
            tape.value(x).cols()
        )));
    }
    let dk = d / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let sparse_plan = match cfg.attention {
        AttentionMode::Dense => None,
        AttentionMode::BlockTopK { params } => Some(Rc::new(build_sparse_plan(batch, params))),
    };
    let mask = match cfg.attention {
        AttentionMode::Dense => Some(tape.constant(key_mask(batch))),
        AttentionMode::BlockTopK { .. } => None,
    };

    let mut h = x;
    let mut all_layers = Vec::new();
    let mut final_attention = None;
    for l in 0..cfg.layers {
        let q_full = tape.matmul(h, vars.var(&layer_key(l, "attn.wq")))?;
        let k_full = tape.matmul(h, vars.var(&layer_key(l, "attn.wk")))?;
        let v_full = tape.matmul(h, vars.var(&layer_key(l, "attn.wv")))?;
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        let want_maps = match capture {
            Capture::None => false,
            Capture::Final => l == cfg.layers - 1,
            Capture::AllLayers => true,
        };
        let mut heads = Vec::new();
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q_full, hd * dk, dk)?;
            let kh = tape.slice_cols(k_full, hd * dk, dk)?;
            let vh = tape.slice_cols(v_full, hd * dk, dk)?;
            match (&sparse_plan, mask) {
                (None, Some(mask)) => {
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt)?;
                    let scaled = tape.scale(scores, scale);
                    let masked = tape.add(scaled, mask)?;
                    let attn = tape.softmax_rows(masked);
                    if want_maps {
                        heads.push(tape.value(attn).clone());
                    }
                    head_ctx.push(tape.matmul(attn, vh)?);
                }
                (Some(plan), _) => {
                    let cell = want_maps.then(|| {
                        Rc::new(std::cell::RefCell::new(Array2::zeros(
                            batch.rows(),
                            batch.rows(),
                        )))
                    });
                    let op = SparseAttnOp::new(plan.clone(), scale, cell.clone());
                    let ctx = tape.custom(&[qh, kh, vh], Box::new(op))?;
                    if let Some(cell) = cell {
                        heads.push(cell.borrow().clone());
                    }
                    head_ctx.push(ctx);
                }
                (None, None) => unreachable!("dense mode always builds a mask"),
            }
        }
        let concat = tape.concat_cols(&head_ctx)?;
        let attn_out = tape.matmul(concat, vars.var(&layer_key(l, "attn.wo")))?;
        let resid1 = tape.add(h, attn_out)?;
        let z = tape.layer_norm(
            resid1,
            vars.var(&layer_key(l, "ln1.g")),
            vars.var(&layer_key(l, "ln1.b")),
        )?;
        let ff1 = tape.matmul(z, vars.var(&layer_key(l, "ffn.w1")))?;
        let ff1b = tape.add_row_broadcast(ff1, vars.var(&layer_key(l, "ffn.b1")))?;
        let act = tape.relu(ff1b);
        let ff2 = tape.matmul(act, vars.var(&layer_key(l, "ffn.w2")))?;
        let ff2b = tape.add_row_broadcast(ff2, vars.var(&layer_key(l, "ffn.b2")))?;
        let resid2 = tape.add(z, ff2b)?;
        h = tape.layer_norm(
            resid2,
            vars.var(&layer_key(l, "ln2.g")),
            vars.var(&layer_key(l, "ln2.b")),
        )?;
        tape.check_finite(h, &format!("encoder layer {l}"))?;

        if want_maps {
            let record = make_record(heads);
            if matches!(capture, Capture::AllLayers) {
                all_layers.push(record.clone());
            }
            if l == cfg.layers - 1 {
                final_attention = Some(record);
            }
        }
    }

    let qw = tape.matmul(h, vars.var(QHEAD_W_KEY))?;
    let q = tape.add_row_broadcast(qw, vars.var(QHEAD_B_KEY))?;
    tape.check_finite(q, "q head")?;

    Ok(ForwardArtifacts {
        q,
        final_attention,
        layers: if matches!(capture, Capture::AllLayers) { Some(all_layers) } else { None },
    })
}

fn make_record(per_head: Vec<Array2>) -> AttentionRecord {
    let rows = per_head[0].rows();
    let mut averaged = Array2::zeros(rows, rows);
    for head in &per_head {
        averaged.add_assign(head).expect("same shape");
    }
    let averaged = averaged.scale(1.0 / per_head.len() as f64);
    AttentionRecord { averaged, per_head }
}

/// Value-level forward: returns masked Q-scores (invalid rows carry
/// `f64::NEG_INFINITY`) and the final-layer attention record when captured.
pub fn forward(
    params: &ParamStore,
    batch: &TokenBatch,
    cfg: &EncoderConfig,
    capture: Capture,
) -> Result<(Vec<f64>, Option<AttentionRecord>)> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params, cfg)?;
    let x = tape.constant(batch.x.clone());
    let art = forward_on_tape(&mut tape, &vars, x, batch, cfg, capture)?;
    let q = masked_q(tape.value(art.q), batch);
    Ok((q, art.final_attention))
}

/// Applies validity sentinels to a raw q column.
pub fn masked_q(q: &Array2, batch: &TokenBatch) -> Vec<f64> {
    (0..batch.rows())
        .map(|r| if batch.valid[r] { q.get(r, 0) } else { f64::NEG_INFINITY })
        .collect()
}

/// Retained task-task score entries of the sparse pattern over `n` active
/// tasks (the quantity modeled by the analytic bound).
pub fn pattern_nonzeros(n: usize, p: &SparseParams) -> usize {
    if n == 0 {
        return 0;
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + p.c).min(n);
        chunks.push(end - start);
        start = end;
    }
    let n_chunks = chunks.len();
    let mut total = 0;
    for &width in &chunks {
        // Each query keeps min(k, block width) per block of its chunk.
        let mut per_query = 0;
        let mut bstart = 0;
        while bstart < width {
            let bw = (p.b).min(width - bstart);
            per_query += p.k.min(bw);
            bstart += bw;
        }
        total += width * per_query;
    }
    total + n * (n_chunks - 1)
}

/// Upper bound `M*C*k*ceil(C/B) + N*(M-1)` on the sparse pattern size.
pub fn analytic_nonzero_bound(n: usize, p: &SparseParams) -> usize {
    p.m * p.c * p.k * p.c.div_ceil(p.b) + n * (p.m - 1)
}

/// Number of retained attention entries for a full (N+1)-token batch: the
/// dense count is `(N+1)^2`; the sparse count is the task-task pattern plus
/// the always-dense idle row and idle column.
pub fn nonzero_count(n: usize, cfg: &EncoderConfig) -> usize {
    match cfg.attention {
        AttentionMode::Dense => (n + 1) * (n + 1),
        AttentionMode::BlockTopK { params } => {
            let p = SparseParams::resolve(params, n);
            pattern_nonzeros(n, &p) + (n + 1) + n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::reset;
    use crate::taskmodel::TaskSpec;
    use crate::urgency::{tokenize, QuantizerConfig};
    use rand::SeedableRng;

    fn setup(n: usize, cfg: &EncoderConfig) -> (ParamStore, TokenBatch, QuantizerConfig) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
        let tasks: Vec<TaskSpec> = (0..n)
            .map(|i| {
                let period = 20 + 7 * (i as u64 % 13) + i as u64;
                TaskSpec::new(i as u32 + 1, period, 1 + (i as u64 % 5), period)
            })
            .collect();
        let (state, _) = reset(&tasks, 1);
        let quant = QuantizerConfig::uniform(16, 64.0);
        let params = init_params(cfg, quant.q, &mut rng).unwrap();
        let batch = tokenize(&tasks, &state, &params, &quant).unwrap();
        (params, batch, quant)
    }

    #[test]
    fn auto_params_match_rules() {
        let p = auto_sparse_params(600);
        assert_eq!((p.b, p.k, p.m, p.c), (25, 5, 10, 60));
        let p = auto_sparse_params(64);
        assert_eq!((p.b, p.k), (8, 1));
        assert_eq!(p.m, 6);
        let p = auto_sparse_params(100);
        assert_eq!((p.b, p.k), (10, 1));
        let p = auto_sparse_params(1);
        assert_eq!((p.b, p.k, p.m, p.c), (1, 1, 1, 1));
    }

    #[test]
    fn nonzero_counts() {
        let dense = EncoderConfig { attention: AttentionMode::Dense, ..EncoderConfig::test_scale() };
        assert_eq!(nonzero_count(7, &dense), 64);
        // No pruning: k >= B and M = 1 equals the dense count.
        let no_prune = EncoderConfig {
            attention: AttentionMode::BlockTopK {
                params: Some(ManualSparse { b: 4, k: 10, m: 1 }),
            },
            ..EncoderConfig::test_scale()
        };
        assert_eq!(nonzero_count(7, &no_prune), 64);
        // Auto pattern stays within the analytic bound.
        for n in [64usize, 256, 600] {
            let p = auto_sparse_params(n);
            assert!(pattern_nonzeros(n, &p) <= analytic_nonzero_bound(n, &p));
        }
    }

    #[test]
    fn single_token_attends_itself() {
        let cfg = EncoderConfig { d_model: 8, d_ff: 16, heads: 2, layers: 1, attention: AttentionMode::Dense };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&cfg, 4, &mut rng).unwrap();
        // Idle-only batch.
        let (state, _) = reset(&[], 1);
        let quant = QuantizerConfig::uniform(4, 8.0);
        let batch = tokenize(&[], &state, &params, &quant).unwrap();
        let (q, att) = forward(&params, &batch, &cfg, Capture::Final).unwrap();
        assert_eq!(q.len(), 1);
        let att = att.unwrap();
        assert!((att.averaged.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_q_head_gives_zero_scores() {
        let cfg = EncoderConfig { d_model: 8, d_ff: 16, heads: 2, layers: 1, attention: AttentionMode::Dense };
        let (mut params, batch, _) = setup(3, &cfg);
        *params.get_mut(QHEAD_W_KEY).unwrap() = Array2::zeros(8, 1);
        *params.get_mut(QHEAD_B_KEY).unwrap() = Array2::zeros(1, 1);
        let (q, _) = forward(&params, &batch, &cfg, Capture::None).unwrap();
        for (r, v) in q.iter().enumerate() {
            if batch.valid[r] {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_per_head() {
        let cfg = EncoderConfig { d_model: 16, d_ff: 32, heads: 4, layers: 2, attention: AttentionMode::Dense };
        let (params, batch, _) = setup(5, &cfg);
        let mut tape = Tape::new();
        let vars = EncoderVars::register(&mut tape, &params, &cfg).unwrap();
        let x = tape.constant(batch.x.clone());
        let art = forward_on_tape(&mut tape, &vars, x, &batch, &cfg, Capture::AllLayers).unwrap();
        for layer in art.layers.unwrap() {
            for head in layer.per_head {
                for r in 0..head.rows() {
                    let s: f64 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn dense_sparse_agree_without_pruning() {
        for n in [8usize, 32] {
            let dense_cfg = EncoderConfig { d_model: 16, d_ff: 32, heads: 2, layers: 2, attention: AttentionMode::Dense };
            let sparse_cfg = EncoderConfig {
                attention: AttentionMode::BlockTopK {
                    params: Some(ManualSparse { b: 8, k: 8, m: 1 }),
                },
                ..dense_cfg
            };
            let (params, batch, _) = setup(n, &dense_cfg);
            let (qd, _) = forward(&params, &batch, &dense_cfg, Capture::None).unwrap();
            let (qs, _) = forward(&params, &batch, &sparse_cfg, Capture::None).unwrap();
            for (a, b) in qd.iter().zip(&qs) {
                if a.is_finite() {
                    assert!((a - b).abs() < 1e-10, "dense {a} sparse {b}");
                }
            }
        }
    }
}
