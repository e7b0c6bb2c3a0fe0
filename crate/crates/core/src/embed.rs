//! Time-aware complex KG embeddings.
//!
//! Every entity, relation and timestamp is a complex d-vector. A point quad
//! `(s, r, o, t)` is scored by the real part of the coordinate-wise 4-way
//! complex product `Re(⟨e_s, e_r, e_o, e_t⟩)`, trained with a
//! negative-sampling loss against a fixed margin. Timestamp embeddings are
//! initialized sinusoidally (in their concatenated-real form) and carry an
//! auxiliary binary classification task — "does timestamp i precede j?" —
//! computed from the difference of their concatenated-real vectors through a
//! learned direction. Both objectives are minimized jointly by plain SGD.
//!
//! The sign convention of the quad loss is configurable: `LossSign::Paper`
//! is the literal equation (positives are pushed *below* the margin and
//! negatives above), `LossSign::Standard` flips both signs. Downstream
//! question answering is insensitive to the global sign, since the learned
//! question projections can absorb it.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::complex::{re_multilinear4, CVec};
use crate::kg::{EntityId, PointQuad, RelationId, TemporalKG, TimeRank};
use crate::linalg::{bce_with_logit, log_sigmoid, sigmoid};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("graph has no quads; nothing to train on")]
    EmptyGraph,
    #[error("id out of range: {0}")]
    IdOutOfRange(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which side of the margin positives are pushed to by the quad loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossSign {
    /// Literal form: positives below the margin, negatives above.
    #[default]
    Paper,
    /// Flipped: positives above the margin, negatives below.
    Standard,
}

/// Update rule for both embedding tables and the order head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Per-parameter adaptive steps; the practical default for multilinear
    /// factorizations, whose raw gradient scales are tiny at init.
    #[default]
    Adagrad,
    /// Adam with bias correction (lazy over untouched embedding rows).
    Adam,
    /// Plain SGD with a fixed rate and optional momentum.
    Sgd,
}

/// How the timestamp table is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeInit {
    #[default]
    Sinusoidal,
    Gaussian,
}

/// Hyper-parameters of the KG embedding stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KGTrainConfig {
    /// Complex embedding dimension.
    pub d: usize,
    /// Margin γ of the quad loss.
    pub gamma: f64,
    /// Negatives sampled per positive (K).
    pub negatives: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Momentum coefficient for [`Optimizer::Sgd`]; 0 disables it.
    pub momentum: f64,
    /// Weight of the time-order loss in the joint objective.
    pub alpha_to: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Timestamp pairs sampled per batch for the order loss.
    pub order_pairs_per_batch: usize,
    pub loss_sign: LossSign,
    pub time_init: TimeInit,
}

impl Default for KGTrainConfig {
    fn default() -> Self {
        KGTrainConfig {
            d: 32,
            gamma: 2.0,
            negatives: 16,
            lr: 0.1,
            optimizer: Optimizer::Adagrad,
            momentum: 0.0,
            alpha_to: 1.0,
            epochs: 200,
            batch_size: 256,
            seed: 11,
            order_pairs_per_batch: 64,
            loss_sign: LossSign::Paper,
            time_init: TimeInit::Sinusoidal,
        }
    }
}

/// Parameter tables of complex d-vectors for entities, relations and
/// timestamps. Row `i` of the time table corresponds to rank `i` in the
/// ascending timestamp vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexEmbeddingStore {
    pub d: usize,
    pub entity: Vec<CVec>,
    pub relation: Vec<CVec>,
    pub time: Vec<CVec>,
}

impl ComplexEmbeddingStore {
    pub fn num_entities(&self) -> usize {
        self.entity.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.time.len()
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().all(CVec::is_finite)
            && self.relation.iter().all(CVec::is_finite)
            && self.time.iter().all(CVec::is_finite)
    }
}

/// The learned direction classifying timestamp order from embedding
/// differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeOrderHead {
    /// Parameter vector of dimension 2d.
    pub w_t: Vec<f64>,
}

/// A point quad with its timestamp resolved to a vocabulary rank, the unit
/// the trainer and scorer operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainQuad {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time_rank: TimeRank,
}

impl TrainQuad {
    pub fn from_point(kg: &TemporalKG, pq: &PointQuad) -> Option<Self> {
        Some(TrainQuad {
            subject: pq.subject,
            relation: pq.relation,
            object: pq.object,
            time_rank: kg.time_rank(pq.t)?,
        })
    }
}

/// Sinusoidal initialization of the timestamp table: row `i` (rank order)
/// gets concatenated-real entries `v[2k] = sin(i / 10000^{2k/2d})`,
/// `v[2k+1] = cos(i / 10000^{2k/2d})` for `0 ≤ k ≤ d-1`. The rows remain
/// trainable afterwards.
pub fn init_time_embeddings(num_timestamps: usize, d: usize) -> Vec<CVec> {
    let two_d = (2 * d) as f64;
    (0..num_timestamps)
        .map(|i| {
            let mut v = vec![0.0; 2 * d];
            for k in 0..d {
                let freq = 10000f64.powf(2.0 * k as f64 / two_d);
                let x = i as f64 / freq;
                v[2 * k] = x.sin();
                v[2 * k + 1] = x.cos();
            }
            CVec::from_real(v)
        })
        .collect()
}

/// `Re(⟨e_s, e_r, e_o, e_t⟩)` for the identified quad.
pub fn score_quad(
    store: &ComplexEmbeddingStore,
    s: EntityId,
    r: RelationId,
    t: TimeRank,
    o: EntityId,
) -> Result<f64, EmbedError> {
    if s >= store.entity.len() || o >= store.entity.len() {
        return Err(EmbedError::IdOutOfRange(format!("entity {}", s.max(o))));
    }
    if r >= store.relation.len() {
        return Err(EmbedError::IdOutOfRange(format!("relation {r}")));
    }
    if t >= store.time.len() {
        return Err(EmbedError::IdOutOfRange(format!("time rank {t}")));
    }
    Ok(score_train_quad(
        store,
        &TrainQuad {
            subject: s,
            relation: r,
            object: o,
            time_rank: t,
        },
    ))
}

fn score_train_quad(store: &ComplexEmbeddingStore, q: &TrainQuad) -> f64 {
    re_multilinear4(
        &store.entity[q.subject],
        &store.relation[q.relation],
        &store.entity[q.object],
        &store.time[q.time_rank],
    )
}

/// Negative-sampling quad loss:
/// `-log σ(γ - S(pos)) - (1/K) Σ_i log σ(S(neg_i) - γ)` under
/// [`LossSign::Paper`]; both margin differences are negated under
/// [`LossSign::Standard`].
pub fn tcomplex_loss(
    store: &ComplexEmbeddingStore,
    positive: &TrainQuad,
    negatives: &[TrainQuad],
    gamma: f64,
    sign: LossSign,
) -> f64 {
    assert!(!negatives.is_empty(), "negatives must be non-empty");
    let s_pos = score_train_quad(store, positive);
    let k = negatives.len() as f64;
    let mut loss = match sign {
        LossSign::Paper => -log_sigmoid(gamma - s_pos),
        LossSign::Standard => -log_sigmoid(s_pos - gamma),
    };
    for neg in negatives {
        let s_neg = score_train_quad(store, neg);
        loss -= match sign {
            LossSign::Paper => log_sigmoid(s_neg - gamma),
            LossSign::Standard => log_sigmoid(gamma - s_neg),
        } / k;
    }
    loss
}

/// `σ((t_i - t_j)ᵀ W_t)`: probability that timestamp `i` precedes `j`,
/// computed on concatenated-real vectors.
pub fn time_order_prob(head: &TimeOrderHead, t_i: &CVec, t_j: &CVec) -> f64 {
    sigmoid(order_logit(head, t_i, t_j))
}

fn order_logit(head: &TimeOrderHead, t_i: &CVec, t_j: &CVec) -> f64 {
    let (a, b) = (t_i.as_real(), t_j.as_real());
    assert_eq!(a.len(), head.w_t.len());
    assert_eq!(b.len(), head.w_t.len());
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += (a[k] - b[k]) * head.w_t[k];
    }
    acc
}

/// Mean binary cross-entropy of the order probabilities over rank pairs,
/// with label 1 iff `rank_i < rank_j`.
pub fn time_order_loss(
    head: &TimeOrderHead,
    time_table: &[CVec],
    pairs: &[(TimeRank, TimeRank)],
) -> f64 {
    assert!(!pairs.is_empty(), "pairs must be non-empty");
    let mut acc = 0.0;
    for &(i, j) in pairs {
        let z = order_logit(head, &time_table[i], &time_table[j]);
        let y = if i < j { 1.0 } else { 0.0 };
        acc += bce_with_logit(z, y);
    }
    acc / pairs.len() as f64
}

/// Exhaustive order-classification accuracy over all unordered rank pairs
/// `i < j`: a pair counts as correct when `p(i, j) > 0.5`.
pub fn order_accuracy(store: &ComplexEmbeddingStore, head: &TimeOrderHead) -> f64 {
    let n = store.time.len();
    if n < 2 {
        return 1.0;
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if time_order_prob(head, &store.time[i], &store.time[j]) > 0.5 {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Per-epoch record of the joint training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_tc: f64,
    pub loss_to: f64,
    pub order_accuracy: f64,
}

/// Result of the embedding stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KgEmbeddingModel {
    pub config: KGTrainConfig,
    pub store: ComplexEmbeddingStore,
    pub order_head: TimeOrderHead,
    pub log: Vec<EpochLog>,
    /// Fingerprint of the graph the embeddings were trained on.
    pub kg_fingerprint: u64,
}

/// Sparse gradient accumulator over the three tables plus the order head.
struct GradBuf {
    entity: Vec<CVec>,
    relation: Vec<CVec>,
    time: Vec<CVec>,
    w_t: Vec<f64>,
    touched_entity: Vec<usize>,
    touched_relation: Vec<usize>,
    touched_time: Vec<usize>,
    mark_entity: Vec<bool>,
    mark_relation: Vec<bool>,
    mark_time: Vec<bool>,
    w_t_touched: bool,
}

impl GradBuf {
    fn new(nv: usize, nr: usize, nt: usize, d: usize) -> Self {
        GradBuf {
            entity: vec![CVec::zeros(d); nv],
            relation: vec![CVec::zeros(d); nr],
            time: vec![CVec::zeros(d); nt],
            w_t: vec![0.0; 2 * d],
            touched_entity: Vec::new(),
            touched_relation: Vec::new(),
            touched_time: Vec::new(),
            mark_entity: vec![false; nv],
            mark_relation: vec![false; nr],
            mark_time: vec![false; nt],
            w_t_touched: false,
        }
    }

    fn touch_entity(&mut self, id: usize) -> &mut CVec {
        if !self.mark_entity[id] {
            self.mark_entity[id] = true;
            self.touched_entity.push(id);
        }
        &mut self.entity[id]
    }

    fn touch_relation(&mut self, id: usize) -> &mut CVec {
        if !self.mark_relation[id] {
            self.mark_relation[id] = true;
            self.touched_relation.push(id);
        }
        &mut self.relation[id]
    }

    fn touch_time(&mut self, id: usize) -> &mut CVec {
        if !self.mark_time[id] {
            self.mark_time[id] = true;
            self.touched_time.push(id);
        }
        &mut self.time[id]
    }

    fn clear(&mut self) {
        for &id in &self.touched_entity {
            self.entity[id].as_real_mut().fill(0.0);
            self.mark_entity[id] = false;
        }
        for &id in &self.touched_relation {
            self.relation[id].as_real_mut().fill(0.0);
            self.mark_relation[id] = false;
        }
        for &id in &self.touched_time {
            self.time[id].as_real_mut().fill(0.0);
            self.mark_time[id] = false;
        }
        self.touched_entity.clear();
        self.touched_relation.clear();
        self.touched_time.clear();
        if self.w_t_touched {
            self.w_t.fill(0.0);
            self.w_t_touched = false;
        }
    }
}

/// Dense optimizer state: squared-gradient accumulators for Adagrad, or
/// velocities for SGD momentum.
struct OptState {
    entity: Vec<CVec>,
    relation: Vec<CVec>,
    time: Vec<CVec>,
    w_t: Vec<f64>,
    /// Second-moment buffers (Adam only).
    entity2: Vec<CVec>,
    relation2: Vec<CVec>,
    time2: Vec<CVec>,
    w_t2: Vec<f64>,
    step: u64,
}

impl OptState {
    fn zeros(nv: usize, nr: usize, nt: usize, d: usize, adam: bool) -> Self {
        let (e2, r2, t2, w2) = if adam {
            (
                vec![CVec::zeros(d); nv],
                vec![CVec::zeros(d); nr],
                vec![CVec::zeros(d); nt],
                vec![0.0; 2 * d],
            )
        } else {
            (Vec::new(), Vec::new(), Vec::new(), Vec::new())
        };
        OptState {
            entity: vec![CVec::zeros(d); nv],
            relation: vec![CVec::zeros(d); nr],
            time: vec![CVec::zeros(d); nt],
            w_t: vec![0.0; 2 * d],
            entity2: e2,
            relation2: r2,
            time2: t2,
            w_t2: w2,
            step: 0,
        }
    }
}

const ADAGRAD_EPS: f64 = 1e-10;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam step over one parameter slice; `m`/`v` are the first/second moment
/// buffers and `t` the 1-based step count. Untouched rows keep stale
/// moments (lazy update), which is the usual sparse-table compromise.
pub(crate) fn adam_slice(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m[k] / bc1;
        let vhat = v[k] / bc2;
        param[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

fn adagrad_row(param: &mut CVec, grad: &CVec, acc: &mut CVec, lr: f64) {
    let (p, g, a) = (param.as_real_mut(), grad.as_real(), acc.as_real_mut());
    for k in 0..p.len() {
        a[k] += g[k] * g[k];
        p[k] -= lr * g[k] / (a[k].sqrt() + ADAGRAD_EPS);
    }
}

fn adagrad_vec(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64) {
    for k in 0..param.len() {
        acc[k] += grad[k] * grad[k];
        param[k] -= lr * grad[k] / (acc[k].sqrt() + ADAGRAD_EPS);
    }
}

/// Accumulate the gradient of `g * S(quad)` into the buffer.
fn accumulate_score_grad(
    store: &ComplexEmbeddingStore,
    q: &TrainQuad,
    g: f64,
    grads: &mut GradBuf,
) {
    let es = store.entity[q.subject].clone();
    let er = store.relation[q.relation].clone();
    let eo = store.entity[q.object].clone();
    let et = store.time[q.time_rank].clone();
    // S = Re(Σ (e_s·e_r)·(e_o·e_t)); the gradient w.r.t. each factor is the
    // conjugate of the product of the other three.
    let a = es.hadamard(&er); // e_s ⊙ e_r
    let b = eo.hadamard(&et); // e_o ⊙ e_t
    grads
        .touch_entity(q.subject)
        .add_conj_scaled(&er.hadamard(&b), g);
    grads
        .touch_relation(q.relation)
        .add_conj_scaled(&es.hadamard(&b), g);
    grads
        .touch_entity(q.object)
        .add_conj_scaled(&et.hadamard(&a), g);
    grads
        .touch_time(q.time_rank)
        .add_conj_scaled(&eo.hadamard(&a), g);
}

/// Train entity/relation/timestamp embeddings jointly with the time-order
/// task by stochastic gradient descent over the deduplicated expanded point
/// quads. Negatives corrupt exactly one of {s, o, t} with a uniformly random
/// replacement from the matching vocabulary.
pub fn train_kg_embeddings(
    kg: &TemporalKG,
    cfg: &KGTrainConfig,
) -> Result<KgEmbeddingModel, EmbedError> {
    let quads = training_quads(kg);
    if quads.is_empty() {
        return Err(EmbedError::EmptyGraph);
    }
    let (nv, nr, nt, d) = (
        kg.num_entities(),
        kg.num_relations(),
        kg.num_timestamps(),
        cfg.d,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let entity_std = 1.0 / (d as f64).sqrt();
    let mut store = ComplexEmbeddingStore {
        d,
        entity: (0..nv).map(|_| CVec::gaussian(d, entity_std, &mut rng)).collect(),
        relation: (0..nr).map(|_| CVec::gaussian(d, entity_std, &mut rng)).collect(),
        time: match cfg.time_init {
            TimeInit::Sinusoidal => init_time_embeddings(nt, d),
            TimeInit::Gaussian => (0..nt).map(|_| CVec::gaussian(d, entity_std, &mut rng)).collect(),
        },
    };
    let w_t_std = 1.0 / (2.0 * d as f64).sqrt();
    let mut head = TimeOrderHead {
        w_t: CVec::gaussian(d, w_t_std, &mut rng).into_real(),
    };

    let mut grads = GradBuf::new(nv, nr, nt, d);
    let needs_state = cfg.optimizer != Optimizer::Sgd || cfg.momentum > 0.0;
    let mut opt_state =
        needs_state.then(|| OptState::zeros(nv, nr, nt, d, cfg.optimizer == Optimizer::Adam));

    let mut order: Vec<usize> = (0..quads.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_tc = 0.0;
        let mut epoch_to = 0.0;
        let mut n_batches = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.clear();
            let inv_b = 1.0 / batch.len() as f64;
            let mut batch_tc = 0.0;

            for &qi in batch {
                let pos = quads[qi];
                let s_pos = score_train_quad(&store, &pos);
                let (pos_loss, g_pos) = match cfg.loss_sign {
                    LossSign::Paper => (-log_sigmoid(cfg.gamma - s_pos), sigmoid(s_pos - cfg.gamma)),
                    LossSign::Standard => {
                        (-log_sigmoid(s_pos - cfg.gamma), -sigmoid(cfg.gamma - s_pos))
                    }
                };
                batch_tc += pos_loss;
                accumulate_score_grad(&store, &pos, g_pos * inv_b, &mut grads);

                let inv_k = 1.0 / cfg.negatives as f64;
                for _ in 0..cfg.negatives {
                    let neg = corrupt(&pos, nv, nt, &mut rng);
                    let s_neg = score_train_quad(&store, &neg);
                    let (neg_loss, g_neg) = match cfg.loss_sign {
                        LossSign::Paper => {
                            (-log_sigmoid(s_neg - cfg.gamma), -sigmoid(cfg.gamma - s_neg))
                        }
                        LossSign::Standard => {
                            (-log_sigmoid(cfg.gamma - s_neg), sigmoid(s_neg - cfg.gamma))
                        }
                    };
                    batch_tc += neg_loss * inv_k;
                    accumulate_score_grad(&store, &neg, g_neg * inv_k * inv_b, &mut grads);
                }
            }
            batch_tc *= inv_b;

            // Time-order pairs for this batch.
            let mut batch_to = 0.0;
            if cfg.alpha_to > 0.0 && nt >= 2 && cfg.order_pairs_per_batch > 0 {
                let inv_p = 1.0 / cfg.order_pairs_per_batch as f64;
                for _ in 0..cfg.order_pairs_per_batch {
                    let i = rng.random_range(0..nt);
                    let j = loop {
                        let j = rng.random_range(0..nt);
                        if j != i {
                            break j;
                        }
                    };
                    let z = order_logit(&head, &store.time[i], &store.time[j]);
                    let y = if i < j { 1.0 } else { 0.0 };
                    batch_to += bce_with_logit(z, y) * inv_p;
                    let g = cfg.alpha_to * (sigmoid(z) - y) * inv_p;
                    // d z / d t_i = w_t, d z / d t_j = -w_t, d z / d w_t = t_i - t_j.
                    let diff: Vec<f64> = store.time[i]
                        .as_real()
                        .iter()
                        .zip(store.time[j].as_real())
                        .map(|(a, b)| a - b)
                        .collect();
                    for (w, dv) in grads.w_t.iter_mut().zip(diff.iter()) {
                        *w += g * dv;
                    }
                    grads.w_t_touched = true;
                    let gi = grads.touch_time(i);
                    for (t, w) in gi.as_real_mut().iter_mut().zip(head.w_t.iter()) {
                        *t += g * w;
                    }
                    let gj = grads.touch_time(j);
                    for (t, w) in gj.as_real_mut().iter_mut().zip(head.w_t.iter()) {
                        *t -= g * w;
                    }
                }
            }

            if !batch_tc.is_finite() || !batch_to.is_finite() {
                return Err(EmbedError::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }

            apply_updates(&mut store, &mut head, &grads, cfg, opt_state.as_mut());
            if !updated_rows_finite(&store, &head, &grads) {
                return Err(EmbedError::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }

            epoch_tc += batch_tc;
            epoch_to += batch_to;
            n_batches += 1;
        }

        let entry = EpochLog {
            epoch,
            loss_tc: epoch_tc / n_batches as f64,
            loss_to: epoch_to / n_batches as f64,
            order_accuracy: order_accuracy(&store, &head),
        };
        log::debug!(
            "kg-embed epoch {}: L_TC={:.6} L_TO={:.6} order_acc={:.4}",
            entry.epoch,
            entry.loss_tc,
            entry.loss_to,
            entry.order_accuracy
        );
        log.push(entry);
    }

    Ok(KgEmbeddingModel {
        config: cfg.clone(),
        store,
        order_head: head,
        log,
        kg_fingerprint: crate::kg::fingerprint(kg),
    })
}

/// Expanded point quads with exact duplicates removed (the sampler's
/// deduplication; the KG itself keeps duplicates verbatim).
pub fn training_quads(kg: &TemporalKG) -> Vec<TrainQuad> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for pq in kg.expanded_quads() {
        let tq = TrainQuad::from_point(kg, &pq).expect("expanded timestamp must be in vocabulary");
        if seen.insert(tq) {
            out.push(tq);
        }
    }
    out
}

fn corrupt<R: Rng>(pos: &TrainQuad, nv: usize, nt: usize, rng: &mut R) -> TrainQuad {
    let mut neg = *pos;
    match rng.random_range(0..3u32) {
        0 => neg.subject = rng.random_range(0..nv),
        1 => neg.object = rng.random_range(0..nv),
        _ => neg.time_rank = rng.random_range(0..nt),
    }
    neg
}

fn apply_updates(
    store: &mut ComplexEmbeddingStore,
    head: &mut TimeOrderHead,
    grads: &GradBuf,
    cfg: &KGTrainConfig,
    state: Option<&mut OptState>,
) {
    let lr = cfg.lr;
    match cfg.optimizer {
        Optimizer::Adagrad => {
            let acc = state.expect("adagrad state");
            for &id in &grads.touched_entity {
                adagrad_row(&mut store.entity[id], &grads.entity[id], &mut acc.entity[id], lr);
            }
            for &id in &grads.touched_relation {
                adagrad_row(
                    &mut store.relation[id],
                    &grads.relation[id],
                    &mut acc.relation[id],
                    lr,
                );
            }
            for &id in &grads.touched_time {
                adagrad_row(&mut store.time[id], &grads.time[id], &mut acc.time[id], lr);
            }
            if grads.w_t_touched {
                adagrad_vec(&mut head.w_t, &grads.w_t, &mut acc.w_t, lr);
            }
        }
        Optimizer::Adam => {
            let st = state.expect("adam state");
            st.step += 1;
            let t = st.step;
            for &id in &grads.touched_entity {
                adam_slice(
                    store.entity[id].as_real_mut(),
                    grads.entity[id].as_real(),
                    st.entity[id].as_real_mut(),
                    st.entity2[id].as_real_mut(),
                    lr,
                    t,
                );
            }
            for &id in &grads.touched_relation {
                adam_slice(
                    store.relation[id].as_real_mut(),
                    grads.relation[id].as_real(),
                    st.relation[id].as_real_mut(),
                    st.relation2[id].as_real_mut(),
                    lr,
                    t,
                );
            }
            for &id in &grads.touched_time {
                adam_slice(
                    store.time[id].as_real_mut(),
                    grads.time[id].as_real(),
                    st.time[id].as_real_mut(),
                    st.time2[id].as_real_mut(),
                    lr,
                    t,
                );
            }
            if grads.w_t_touched {
                adam_slice(&mut head.w_t, &grads.w_t, &mut st.w_t, &mut st.w_t2, lr, t);
            }
        }
        Optimizer::Sgd if cfg.momentum > 0.0 => {
            let vel = state.expect("momentum state");
            let mu = cfg.momentum;
            for v in vel.entity.iter_mut() {
                v.scale(mu);
            }
            for v in vel.relation.iter_mut() {
                v.scale(mu);
            }
            for v in vel.time.iter_mut() {
                v.scale(mu);
            }
            vel.w_t.iter_mut().for_each(|x| *x *= mu);
            for &id in &grads.touched_entity {
                vel.entity[id].add_scaled(&grads.entity[id], 1.0);
            }
            for &id in &grads.touched_relation {
                vel.relation[id].add_scaled(&grads.relation[id], 1.0);
            }
            for &id in &grads.touched_time {
                vel.time[id].add_scaled(&grads.time[id], 1.0);
            }
            for (v, g) in vel.w_t.iter_mut().zip(grads.w_t.iter()) {
                *v += g;
            }
            for (row, v) in store.entity.iter_mut().zip(vel.entity.iter()) {
                row.add_scaled(v, -lr);
            }
            for (row, v) in store.relation.iter_mut().zip(vel.relation.iter()) {
                row.add_scaled(v, -lr);
            }
            for (row, v) in store.time.iter_mut().zip(vel.time.iter()) {
                row.add_scaled(v, -lr);
            }
            for (w, v) in head.w_t.iter_mut().zip(vel.w_t.iter()) {
                *w -= lr * v;
            }
        }
        Optimizer::Sgd => {
            for &id in &grads.touched_entity {
                store.entity[id].add_scaled(&grads.entity[id], -lr);
            }
            for &id in &grads.touched_relation {
                store.relation[id].add_scaled(&grads.relation[id], -lr);
            }
            for &id in &grads.touched_time {
                store.time[id].add_scaled(&grads.time[id], -lr);
            }
            if grads.w_t_touched {
                for (w, g) in head.w_t.iter_mut().zip(grads.w_t.iter()) {
                    *w -= lr * g;
                }
            }
        }
    }
}

fn updated_rows_finite(
    store: &ComplexEmbeddingStore,
    head: &TimeOrderHead,
    grads: &GradBuf,
) -> bool {
    grads
        .touched_entity
        .iter()
        .all(|&id| store.entity[id].is_finite())
        && grads
            .touched_relation
            .iter()
            .all(|&id| store.relation[id].is_finite())
        && grads.touched_time.iter().all(|&id| store.time[id].is_finite())
        && head.w_t.iter().all(|v| v.is_finite())
}

const EMB_MAGIC: &[u8; 8] = b"TKQAEMB1";

#[derive(Serialize, Deserialize)]
struct EmbHeader {
    config: KGTrainConfig,
    num_entities: usize,
    num_relations: usize,
    num_timestamps: usize,
    d: usize,
    #[serde(default)]
    kg_fingerprint: u64,
}

/// Write the embedding checkpoint: 8-byte magic/version, JSON header, then
/// the tables as little-endian f64 in row-major order (entity, relation,
/// time, order head).
pub fn save_embeddings(path: impl AsRef<Path>, model: &KgEmbeddingModel) -> Result<(), EmbedError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    let header = EmbHeader {
        config: model.config.clone(),
        num_entities: model.store.num_entities(),
        num_relations: model.store.num_relations(),
        num_timestamps: model.store.num_timestamps(),
        d: model.store.d,
        kg_fingerprint: model.kg_fingerprint,
    };
    binio::write_json_block(&mut buf, &header).map_err(|e| EmbedError::Checkpoint(e.to_string()))?;
    for table in [&model.store.entity, &model.store.relation, &model.store.time] {
        for row in table {
            binio::write_f64_slice(&mut buf, row.as_real());
        }
    }
    binio::write_f64_slice(&mut buf, &model.order_head.w_t);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read an embedding checkpoint written by [`save_embeddings`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<KgEmbeddingModel, EmbedError> {
    let data = std::fs::read(path)?;
    let mut cur = &data[..];
    if cur.len() < 8 || &cur[..8] != EMB_MAGIC {
        return Err(EmbedError::Checkpoint("bad magic/version".into()));
    }
    cur = &cur[8..];
    let header: EmbHeader =
        binio::read_json_block(&mut cur).map_err(|e| EmbedError::Checkpoint(e.to_string()))?;
    let d = header.d;
    let mut read_table = |n: usize| -> Result<Vec<CVec>, EmbedError> {
        (0..n)
            .map(|_| {
                binio::read_f64_vec(&mut cur, 2 * d)
                    .map(CVec::from_real)
                    .map_err(|e| EmbedError::Checkpoint(e.to_string()))
            })
            .collect()
    };
    let entity = read_table(header.num_entities)?;
    let relation = read_table(header.num_relations)?;
    let time = read_table(header.num_timestamps)?;
    let w_t =
        binio::read_f64_vec(&mut cur, 2 * d).map_err(|e| EmbedError::Checkpoint(e.to_string()))?;
    Ok(KgEmbeddingModel {
        config: header.config,
        store: ComplexEmbeddingStore {
            d,
            entity,
            relation,
            time,
        },
        order_head: TimeOrderHead { w_t },
        log: Vec::new(),
        kg_fingerprint: header.kg_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::TemporalKG;
    use std::f64::consts::LN_2;

    fn tiny_store(seed: u64, d: usize) -> ComplexEmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexEmbeddingStore {
            d,
            entity: (0..5).map(|_| CVec::gaussian(d, 0.5, &mut rng)).collect(),
            relation: (0..3).map(|_| CVec::gaussian(d, 0.5, &mut rng)).collect(),
            time: (0..4).map(|_| CVec::gaussian(d, 0.5, &mut rng)).collect(),
        }
    }

    #[test]
    fn sinusoidal_init_row_zero_is_unit_pattern() {
        let rows = init_time_embeddings(3, 4);
        let v = rows[0].as_real();
        for k in 0..4 {
            assert_eq!(v[2 * k], 0.0);
            assert_eq!(v[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn sinusoidal_init_matches_direct_evaluation() {
        // i=1, d=1 → v = [sin 1, cos 1]
        let rows = init_time_embeddings(2, 1);
        let v = rows[1].as_real();
        assert!((v[0] - 1f64.sin()).abs() < 1e-15);
        assert!((v[1] - 1f64.cos()).abs() < 1e-15);

        // i=2, d=2, k=1 → v[2] = sin(2 / 10000^{1/2}) = sin(0.02)
        let rows = init_time_embeddings(3, 2);
        let v = rows[2].as_real();
        assert!((v[2] - 0.02f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn score_of_all_ones_is_dimension() {
        let d = 6;
        let store = ComplexEmbeddingStore {
            d,
            entity: vec![CVec::ones(d); 2],
            relation: vec![CVec::ones(d)],
            time: vec![CVec::ones(d)],
        };
        assert_eq!(score_quad(&store, 0, 0, 0, 1).unwrap(), d as f64);
    }

    #[test]
    fn purely_imaginary_subject_zeroes_the_score() {
        let d = 4;
        let mut i_vec = CVec::zeros(d);
        i_vec.as_real_mut()[d..].fill(1.0); // (0 + 1i)^d
        let store = ComplexEmbeddingStore {
            d,
            entity: vec![i_vec, CVec::ones(d)],
            relation: vec![CVec::ones(d)],
            time: vec![CVec::ones(d)],
        };
        assert_eq!(score_quad(&store, 0, 0, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn score_rejects_out_of_range_ids() {
        let store = tiny_store(3, 4);
        assert!(score_quad(&store, 99, 0, 0, 0).is_err());
        assert!(score_quad(&store, 0, 99, 0, 0).is_err());
        assert!(score_quad(&store, 0, 0, 99, 0).is_err());
    }

    #[test]
    fn quad_loss_at_margin_is_two_ln_two() {
        // With every score equal to γ both terms are -log σ(0).
        let d = 2;
        let store = ComplexEmbeddingStore {
            d,
            entity: vec![CVec::zeros(d); 2],
            relation: vec![CVec::zeros(d)],
            time: vec![CVec::zeros(d)],
        };
        let q = TrainQuad {
            subject: 0,
            relation: 0,
            object: 1,
            time_rank: 0,
        };
        // All-zero embeddings give S = 0 everywhere; use γ = 0 so S = γ.
        let loss = tcomplex_loss(&store, &q, &[q, q], 0.0, LossSign::Paper);
        assert!((loss - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn quad_loss_with_wide_margins_is_small() {
        // K=1, S(pos)=γ-10, S(neg)=γ+10 → loss = 2·(-log σ(10)) ≈ 9.08e-5.
        // Construct scores directly through 1-dim real embeddings.
        let d = 1;
        let mk = |x: f64| CVec::from_real(vec![x, 0.0]);
        let store = ComplexEmbeddingStore {
            d,
            entity: vec![mk(1.0), mk(-10.0), mk(10.0)],
            relation: vec![mk(1.0)],
            time: vec![mk(1.0)],
        };
        let pos = TrainQuad {
            subject: 0,
            relation: 0,
            object: 1,
            time_rank: 0,
        };
        let neg = TrainQuad {
            subject: 0,
            relation: 0,
            object: 2,
            time_rank: 0,
        };
        let loss = tcomplex_loss(&store, &pos, &[neg], 0.0, LossSign::Paper);
        let want = -2.0 * log_sigmoid(10.0);
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 9.08e-5).abs() < 1e-6);
    }

    #[test]
    fn order_prob_degenerate_cases() {
        let d = 3;
        let zero_head = TimeOrderHead { w_t: vec![0.0; 2 * d] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = CVec::gaussian(d, 1.0, &mut rng);
        let b = CVec::gaussian(d, 1.0, &mut rng);
        assert_eq!(time_order_prob(&zero_head, &a, &b), 0.5);

        let head = TimeOrderHead {
            w_t: CVec::gaussian(d, 1.0, &mut rng).into_real(),
        };
        assert_eq!(time_order_prob(&head, &a, &a), 0.5);
    }

    #[test]
    fn order_prob_antisymmetry() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = TimeOrderHead {
            w_t: CVec::gaussian(d, 1.0, &mut rng).into_real(),
        };
        for _ in 0..50 {
            let a = CVec::gaussian(d, 1.0, &mut rng);
            let b = CVec::gaussian(d, 1.0, &mut rng);
            let sum = time_order_prob(&head, &a, &b) + time_order_prob(&head, &b, &a);
            assert!((sum - 1.0).abs() < 1e-15, "sum={sum}");
        }
    }

    #[test]
    fn order_loss_closed_forms() {
        let d = 2;
        let head = TimeOrderHead { w_t: vec![0.0; 2 * d] };
        let table = init_time_embeddings(3, d);
        // p = 0.5 on a single pair → ln 2.
        let loss = time_order_loss(&head, &table, &[(0, 1)]);
        assert!((loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn score_quad_matches_naive_reference_over_seeds() {
        for seed in 0..200 {
            let store = tiny_store(seed, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let q = TrainQuad {
                subject: rng.random_range(0..5),
                relation: rng.random_range(0..3),
                object: rng.random_range(0..5),
                time_rank: rng.random_range(0..4),
            };
            let got = score_train_quad(&store, &q);
            // Naive per-coordinate evaluation with scalar complex arithmetic.
            let (es, er, eo, et) = (
                &store.entity[q.subject],
                &store.relation[q.relation],
                &store.entity[q.object],
                &store.time[q.time_rank],
            );
            let mut want = 0.0;
            for k in 0..4 {
                let (mut pr, mut pi) = (1.0f64, 0.0f64);
                for v in [es, er, eo, et] {
                    let (vr, vi) = (v.re()[k], v.im()[k]);
                    let nr = pr * vr - pi * vi;
                    pi = pr * vi + pi * vr;
                    pr = nr;
                }
                want += pr;
            }
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Central finite difference over one table entry.
    fn fd_tc(
        store: &mut ComplexEmbeddingStore,
        pos: &TrainQuad,
        negs: &[TrainQuad],
        gamma: f64,
        sign: LossSign,
        table: usize,
        row: usize,
        comp: usize,
    ) -> f64 {
        let h = 1e-5;
        let read = |s: &ComplexEmbeddingStore| tcomplex_loss(s, pos, negs, gamma, sign);
        let bump = |s: &mut ComplexEmbeddingStore, delta: f64| {
            let t = match table {
                0 => &mut s.entity,
                1 => &mut s.relation,
                _ => &mut s.time,
            };
            t[row].as_real_mut()[comp] += delta;
        };
        bump(store, h);
        let up = read(store);
        bump(store, -2.0 * h);
        let down = read(store);
        bump(store, h);
        (up - down) / (2.0 * h)
    }

    #[test]
    fn tcomplex_gradients_match_finite_differences() {
        for sign in [LossSign::Paper, LossSign::Standard] {
            let mut store = tiny_store(17, 4);
            let pos = TrainQuad {
                subject: 0,
                relation: 1,
                object: 2,
                time_rank: 3,
            };
            let negs = [
                TrainQuad {
                    subject: 4,
                    relation: 1,
                    object: 2,
                    time_rank: 3,
                },
                TrainQuad {
                    subject: 0,
                    relation: 1,
                    object: 2,
                    time_rank: 1,
                },
            ];
            let gamma = 1.5;

            let mut grads = GradBuf::new(5, 3, 4, 4);
            let s_pos = score_train_quad(&store, &pos);
            let g_pos = match sign {
                LossSign::Paper => sigmoid(s_pos - gamma),
                LossSign::Standard => -sigmoid(gamma - s_pos),
            };
            accumulate_score_grad(&store, &pos, g_pos, &mut grads);
            for neg in &negs {
                let s_neg = score_train_quad(&store, neg);
                let g_neg = match sign {
                    LossSign::Paper => -sigmoid(gamma - s_neg),
                    LossSign::Standard => sigmoid(s_neg - gamma),
                } / negs.len() as f64;
                accumulate_score_grad(&store, neg, g_neg, &mut grads);
            }

            for (table, rows) in [(0usize, 5usize), (1, 3), (2, 4)] {
                for row in 0..rows {
                    for comp in 0..8 {
                        let fd = fd_tc(&mut store, &pos, &negs, gamma, sign, table, row, comp);
                        let analytic = match table {
                            0 => grads.entity[row].as_real()[comp],
                            1 => grads.relation[row].as_real()[comp],
                            _ => grads.time[row].as_real()[comp],
                        };
                        let denom = analytic.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            (analytic - fd).abs() / denom < 1e-4,
                            "sign={sign:?} table={table} row={row} comp={comp}: analytic={analytic} fd={fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_orders_timestamps() {
        // Small dense graph: a handful of entities over 12 timestamps.
        let mut lines = String::new();
        for e in 0..8 {
            for t in 0..3 {
                let start = (e + t * 3) % 10;
                lines.push_str(&format!("e{e}\tr{}\te{}\t{}\t{}\n", t % 2, (e + 1) % 8, start, start + 2));
            }
        }
        let kg = TemporalKG::parse_tsv(&lines).unwrap();
        let cfg = KGTrainConfig {
            d: 8,
            epochs: 40,
            batch_size: 32,
            lr: 0.1,
            seed: 3,
            ..KGTrainConfig::default()
        };
        let m1 = train_kg_embeddings(&kg, &cfg).unwrap();
        let m2 = train_kg_embeddings(&kg, &cfg).unwrap();
        assert_eq!(m1.log, m2.log, "training log must be bitwise reproducible");
        assert!(m1.store.is_finite());
        let acc = m1.log.last().unwrap().order_accuracy;
        assert!(acc > 0.9, "order accuracy after training: {acc}");
    }

    #[test]
    fn empty_graph_is_rejected() {
        let kg = TemporalKG::parse_tsv("").unwrap();
        assert!(matches!(
            train_kg_embeddings(&kg, &KGTrainConfig::default()),
            Err(EmbedError::EmptyGraph)
        ));
    }

    #[test]
    fn embedding_checkpoint_round_trips() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t1\t3\nB\tq\tC\t2\t5\n").unwrap();
        let cfg = KGTrainConfig {
            d: 4,
            epochs: 2,
            batch_size: 8,
            ..KGTrainConfig::default()
        };
        let model = train_kg_embeddings(&kg, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.ckpt");
        save_embeddings(&path, &model).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.store.entity, model.store.entity);
        assert_eq!(loaded.store.relation, model.store.relation);
        assert_eq!(loaded.store.time, model.store.time);
        assert_eq!(loaded.order_head.w_t, model.order_head.w_t);
    }
}
