//! The two-stage training pipeline and the trained-model artifact.
//!
//! Stage 1 trains the KG embeddings (see [`crate::embed`]). Stage 2 freezes
//! them (unless `finetune_kg` is set) and trains the question encoder, the
//! answer head, and the contrastive order head against the joint objective
//! `L_answer + λ_o·L_order + λ_c·L_contrast` with plain minibatch SGD.
//! Gradients are computed by hand; they are verified against central finite
//! differences in the test suite, so every backward rule here has a matching
//! numeric check.
//!
//! Model selection tracks overall dev Hits@1 and keeps the best snapshot.
//! The resulting [`TrainedModel`] serializes to a single checkpoint file
//! with an 8-byte magic/version header, a JSON header (full run config,
//! ablation toggles, cached test-time hop count, vocabulary, KG
//! fingerprint, git describe string), and all parameter tables as
//! little-endian f64 in a documented fixed order.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::complex::CVec;
use crate::config::RunConfig;
use crate::contrastive::{
    self, answer_contrast_loss, make_contrast, order_logit, ContrastError, ContrastHeads,
    ContrastLexicon, ContrastNorm,
};
use crate::embed::{ComplexEmbeddingStore, EmbedError, KgEmbeddingModel, Optimizer, TimeOrderHead};
use crate::kg::{EntityId, TemporalKG, TimeRank};
use crate::linalg::{axpy, dot, sigmoid, Mat};
use crate::neighbor::{self, CandidateSet, NeighborError};
use crate::qa::{
    answer_distribution, answer_loss, estimate_time, score_entities, score_timestamps, QaError,
    QaHeads, ScoredCandidates, TimeEstimate,
};
use crate::question::{
    encode_backward, encode_cached, AnswerType, EncodeCache, EncoderGrads, EncoderParams,
    QuestionRecord, OBJECT_TOKEN, SUBJECT_TOKEN, TIME_TOKEN, UNK_TOKEN,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("question grounds no entities")]
    NoEntities,
    #[error("entity id {0} outside the embedding store")]
    UnknownEntity(EntityId),
    #[error("no candidate timestamps for a time-answer question")]
    TimeQuestionNoCandidates,
    #[error("empty candidate set")]
    NoCandidates,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("no trainable questions after candidate fitting")]
    NoTrainableQuestions,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was trained on a different KG (vocabulary fingerprint mismatch)")]
    KgMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which pipeline features are active. All true for the full model; the
/// ablation harness removes them cumulatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    /// Temporal contrastive losses (λ_o, λ_c).
    pub tc: bool,
    /// Time-order KG embeddings (stage-1 variant; recorded for provenance).
    pub tke: bool,
    /// Neighbor-graph candidate pruning.
    pub ng: bool,
    /// Time estimation (off: entity scoring consumes q_t directly).
    pub te: bool,
}

impl AblationToggles {
    pub fn full() -> Self {
        AblationToggles {
            tc: true,
            tke: true,
            ng: true,
            te: true,
        }
    }
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self::full()
    }
}

/// The trainable QA-side parameters.
#[derive(Debug, Clone)]
pub struct QaModel {
    pub encoder: EncoderParams,
    pub heads: QaHeads,
    pub contrast: ContrastHeads,
}

impl QaModel {
    fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.heads.is_finite()
            && self.contrast.w_o.iter().all(|v| v.is_finite())
    }
}

/// Everything needed for inference, plus provenance.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub toggles: AblationToggles,
    /// Test-time hop count: the largest hop fitted on training questions
    /// (0 when pruning is disabled).
    pub m_test: usize,
    /// Overall dev Hits@1 of the selected snapshot.
    pub dev_hits1: f64,
    pub git_describe: String,
    pub kg_fingerprint: u64,
    pub store: ComplexEmbeddingStore,
    pub order_head: TimeOrderHead,
    pub qa: QaModel,
}

pub use crate::kg::fingerprint as kg_fingerprint;

/// `git describe --always --dirty`, or "unknown" outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Candidate indices of a record's gold answers (answers missing from the
/// candidate set are dropped).
pub fn gold_candidate_indices(record: &QuestionRecord, cands: &CandidateSet) -> Vec<usize> {
    match record.answer_type {
        AnswerType::Entity => record
            .entity_answers()
            .filter_map(|e| cands.entity_index(e))
            .collect(),
        AnswerType::Time => record
            .time_answers()
            .filter_map(|t| cands.time_index(t))
            .collect(),
    }
}

/// Extract candidate sets for a question list: m-hop pruned when `ng` is
/// on, the full entity/timestamp space otherwise.
pub fn prepare_candidates(
    kg: &TemporalKG,
    questions: &[QuestionRecord],
    m: usize,
    ng: bool,
) -> Result<Vec<(QuestionRecord, CandidateSet)>, PipelineError> {
    let full = (!ng).then(|| CandidateSet::full(kg));
    questions
        .iter()
        .map(|q| {
            let cands = match &full {
                Some(f) => f.clone(),
                None => neighbor::extract(kg, &q.entity_ids, m.max(1))?,
            };
            Ok((q.clone(), cands))
        })
        .collect()
}

/// Forward-pass intermediates kept for the backward pass.
pub struct QCache {
    enc: EncodeCache,
    q_r: CVec,
    q_t: CVec,
    s_id: EntityId,
    o_id: Option<EntityId>,
    inline_rank: Option<TimeRank>,
    pub t_q: TimeEstimate,
}

/// Score a question against its candidate set (inference path).
pub fn score_record(
    store: &ComplexEmbeddingStore,
    qa: &QaModel,
    toggles: &AblationToggles,
    kg: &TemporalKG,
    record: &QuestionRecord,
    cands: &CandidateSet,
) -> Result<ScoredCandidates, ScoreError> {
    forward_record(store, qa, toggles, kg, record, cands).map(|(sc, _)| sc)
}

/// Score a question and keep the cache needed for gradients.
pub fn forward_record(
    store: &ComplexEmbeddingStore,
    qa: &QaModel,
    toggles: &AblationToggles,
    kg: &TemporalKG,
    record: &QuestionRecord,
    cands: &CandidateSet,
) -> Result<(ScoredCandidates, QCache), ScoreError> {
    if cands.is_empty() {
        return Err(ScoreError::NoCandidates);
    }
    if record.answer_type == AnswerType::Time && cands.timestamps.is_empty() {
        return Err(ScoreError::TimeQuestionNoCandidates);
    }
    let &s_id = record.entity_ids.first().ok_or(ScoreError::NoEntities)?;
    if s_id >= store.entity.len() {
        return Err(ScoreError::UnknownEntity(s_id));
    }
    let o_id = match record.entity_ids.get(1) {
        Some(&o) if o >= store.entity.len() => return Err(ScoreError::UnknownEntity(o)),
        Some(&o) => Some(o),
        None => None,
    };

    let (encoding, enc_cache) = encode_cached(record, &qa.encoder);
    let d = store.d;
    let e_s = &store.entity[s_id];
    let ones = CVec::ones(d);
    let e_o = o_id.map(|o| &store.entity[o]).unwrap_or(&ones);

    let inline_rank = record
        .inline_timestamp
        .and_then(|t| kg.time_rank(t))
        .filter(|&r| r < store.time.len());
    let inline_vec = inline_rank.map(|r| &store.time[r]);

    let t_q = if toggles.te {
        estimate_time(e_s, e_o, &encoding.q_t, &qa.heads, inline_vec)
    } else {
        TimeEstimate(encoding.q_t.clone())
    };

    let s_t = score_timestamps(&t_q, &cands.time_ranks, store);
    let s_e = score_entities(e_s, &encoding.q_r, &t_q, &cands.entities, store);
    let sc = answer_distribution(&s_e, &s_t, qa.heads.block_bias);

    Ok((
        sc,
        QCache {
            enc: enc_cache,
            q_r: encoding.q_r,
            q_t: encoding.q_t,
            s_id,
            o_id,
            inline_rank,
            t_q,
        },
    ))
}

/// Gradient accumulator for the QA-side parameters.
pub struct QaGrads {
    pub enc: EncoderGrads,
    pub w_ft: Mat,
    pub blend_w: [f64; 2],
    pub block_bias: [f64; 2],
    pub w_o: Vec<f64>,
}

impl QaGrads {
    pub fn zeros(qa: &QaModel) -> Self {
        let two_d = qa.heads.w_ft.rows();
        QaGrads {
            enc: EncoderGrads::zeros(&qa.encoder),
            w_ft: Mat::zeros(two_d, two_d),
            blend_w: [0.0; 2],
            block_bias: [0.0; 2],
            w_o: vec![0.0; two_d],
        }
    }

    pub fn clear(&mut self) {
        self.enc.clear();
        self.w_ft.fill(0.0);
        self.blend_w = [0.0; 2];
        self.block_bias = [0.0; 2];
        self.w_o.fill(0.0);
    }
}

/// Sparse gradients into the embedding store (only with `finetune_kg`).
pub struct StoreGrads {
    entity: Vec<CVec>,
    time: Vec<CVec>,
    touched_entity: Vec<usize>,
    touched_time: Vec<usize>,
    mark_entity: Vec<bool>,
    mark_time: Vec<bool>,
}

impl StoreGrads {
    pub fn zeros(store: &ComplexEmbeddingStore) -> Self {
        StoreGrads {
            entity: vec![CVec::zeros(store.d); store.entity.len()],
            time: vec![CVec::zeros(store.d); store.time.len()],
            touched_entity: Vec::new(),
            touched_time: Vec::new(),
            mark_entity: vec![false; store.entity.len()],
            mark_time: vec![false; store.time.len()],
        }
    }

    fn touch_entity(&mut self, id: usize) -> &mut CVec {
        if !self.mark_entity[id] {
            self.mark_entity[id] = true;
            self.touched_entity.push(id);
        }
        &mut self.entity[id]
    }

    fn touch_time(&mut self, id: usize) -> &mut CVec {
        if !self.mark_time[id] {
            self.mark_time[id] = true;
            self.touched_time.push(id);
        }
        &mut self.time[id]
    }

    pub fn clear(&mut self) {
        for &id in &self.touched_entity {
            self.entity[id].as_real_mut().fill(0.0);
            self.mark_entity[id] = false;
        }
        for &id in &self.touched_time {
            self.time[id].as_real_mut().fill(0.0);
            self.mark_time[id] = false;
        }
        self.touched_entity.clear();
        self.touched_time.clear();
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        store: &mut ComplexEmbeddingStore,
        batch_len: usize,
        lr: f64,
        optimizer: Optimizer,
        m_state: &mut StoreGrads,
        v_state: &mut StoreGrads,
        step: u64,
    ) {
        let inv_b = 1.0 / batch_len as f64;
        match optimizer {
            Optimizer::Adagrad => {
                for &id in &self.touched_entity {
                    adagrad_slice(
                        store.entity[id].as_real_mut(),
                        self.entity[id].as_real(),
                        m_state.entity[id].as_real_mut(),
                        lr,
                        inv_b,
                    );
                }
                for &id in &self.touched_time {
                    adagrad_slice(
                        store.time[id].as_real_mut(),
                        self.time[id].as_real(),
                        m_state.time[id].as_real_mut(),
                        lr,
                        inv_b,
                    );
                }
            }
            Optimizer::Adam => {
                for &id in &self.touched_entity {
                    let scaled: Vec<f64> =
                        self.entity[id].as_real().iter().map(|x| x * inv_b).collect();
                    crate::embed::adam_slice(
                        store.entity[id].as_real_mut(),
                        &scaled,
                        m_state.entity[id].as_real_mut(),
                        v_state.entity[id].as_real_mut(),
                        lr,
                        step,
                    );
                }
                for &id in &self.touched_time {
                    let scaled: Vec<f64> =
                        self.time[id].as_real().iter().map(|x| x * inv_b).collect();
                    crate::embed::adam_slice(
                        store.time[id].as_real_mut(),
                        &scaled,
                        m_state.time[id].as_real_mut(),
                        v_state.time[id].as_real_mut(),
                        lr,
                        step,
                    );
                }
            }
            Optimizer::Sgd => {
                for &id in &self.touched_entity {
                    store.entity[id].add_scaled(&self.entity[id], -lr * inv_b);
                }
                for &id in &self.touched_time {
                    store.time[id].add_scaled(&self.time[id], -lr * inv_b);
                }
            }
        }
    }
}

/// Backpropagate a question's score gradients (plus an optional extra
/// gradient on the time estimate, from the order loss) into the QA
/// parameters and, optionally, the embedding store.
#[allow(clippy::too_many_arguments)]
pub fn backward_record(
    store: &ComplexEmbeddingStore,
    qa: &QaModel,
    toggles: &AblationToggles,
    cands: &CandidateSet,
    cache: &QCache,
    d_scores: &[f64],
    d_tq_extra: Option<&CVec>,
    grads: &mut QaGrads,
    mut store_grads: Option<&mut StoreGrads>,
) {
    let d = store.d;
    let n_ent = cands.entities.len();
    let (d_se, d_st) = d_scores.split_at(n_ent);
    let e_s = &store.entity[cache.s_id];
    let ones = CVec::ones(d);
    let e_o = cache.o_id.map(|o| &store.entity[o]).unwrap_or(&ones);
    let t_q = &cache.t_q.0;

    // Entity scores: S_e[j] = Re(⟨e_q_vec, e_j⟩), e_q_vec = (e_s ⊙ q_r) ⊙ t_q.
    let sr = e_s.hadamard(&cache.q_r);
    let e_q_vec = sr.hadamard(t_q);
    let mut g_eqvec = CVec::zeros(d);
    for (j, &e) in cands.entities.iter().enumerate() {
        if d_se[j] != 0.0 {
            g_eqvec.add_conj_scaled(&store.entity[e], d_se[j]);
            if let Some(sg) = store_grads.as_deref_mut() {
                sg.touch_entity(e).add_conj_scaled(&e_q_vec, d_se[j]);
            }
        }
    }

    // Timestamp scores: S_t[j] = Re(⟨t_q, e_t⟩).
    let mut g_tq = CVec::zeros(d);
    for (j, &rank) in cands.time_ranks.iter().enumerate() {
        if d_st[j] != 0.0 {
            g_tq.add_conj_scaled(&store.time[rank], d_st[j]);
            if let Some(sg) = store_grads.as_deref_mut() {
                sg.touch_time(rank).add_conj_scaled(t_q, d_st[j]);
            }
        }
    }
    if let Some(extra) = d_tq_extra {
        g_tq.add_scaled(extra, 1.0);
    }

    // Through e_q_vec = sr ⊙ t_q.
    g_tq.add_mul_conj(&g_eqvec, &sr, 1.0);
    let mut g_qr = CVec::zeros(d);
    let s_tq = e_s.hadamard(t_q);
    g_qr.add_mul_conj(&g_eqvec, &s_tq, 1.0);
    if let Some(sg) = store_grads.as_deref_mut() {
        let qr_tq = cache.q_r.hadamard(t_q);
        sg.touch_entity(cache.s_id).add_mul_conj(&g_eqvec, &qr_tq, 1.0);
    }

    if qa.heads.block_bias.is_some() {
        grads.block_bias[0] += d_se.iter().sum::<f64>();
        grads.block_bias[1] += d_st.iter().sum::<f64>();
    }

    // Through the time estimate.
    let g_qt = if toggles.te {
        let so = e_s.hadamard(e_o);
        let h = so.hadamard(&cache.q_t);
        let g_pre = if let Some(rank) = cache.inline_rank {
            let pre = CVec::from_real(qa.heads.w_ft.matvec(h.as_real()));
            grads.blend_w[0] += dot(g_tq.as_real(), pre.as_real());
            grads.blend_w[1] += dot(g_tq.as_real(), store.time[rank].as_real());
            if let Some(sg) = store_grads.as_deref_mut() {
                sg.touch_time(rank).add_scaled(&g_tq, qa.heads.blend_w[1]);
            }
            let mut g = g_tq.clone();
            g.scale(qa.heads.blend_w[0]);
            g
        } else {
            g_tq
        };
        grads.w_ft.add_outer(g_pre.as_real(), h.as_real(), 1.0);
        let g_h = CVec::from_real(qa.heads.w_ft.matvec_t(g_pre.as_real()));
        if let Some(sg) = store_grads.as_deref_mut() {
            let qt_o = cache.q_t.hadamard(e_o);
            sg.touch_entity(cache.s_id).add_mul_conj(&g_h, &qt_o, 1.0);
            if let Some(o) = cache.o_id {
                let s_qt = e_s.hadamard(&cache.q_t);
                sg.touch_entity(o).add_mul_conj(&g_h, &s_qt, 1.0);
            }
        }
        let mut g = CVec::zeros(d);
        g.add_mul_conj(&g_h, &so, 1.0);
        g
    } else {
        g_tq
    };

    encode_backward(
        &qa.encoder,
        &cache.enc,
        g_qr.as_real(),
        g_qt.as_real(),
        &mut grads.enc,
    );
}

/// dL/d(scores) of the multi-hot answer cross-entropy.
pub fn answer_score_grad(
    sc: &ScoredCandidates,
    gold: &[usize],
    normalize_gold: bool,
) -> Vec<f64> {
    let w = if normalize_gold {
        1.0 / gold.len() as f64
    } else {
        1.0
    };
    let total = w * gold.len() as f64;
    let mut d: Vec<f64> = sc.probs.iter().map(|&p| total * p).collect();
    for &gi in gold {
        d[gi] -= w;
    }
    d
}

/// Per-epoch record of the QA stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEpochLog {
    pub epoch: usize,
    pub loss_answer: f64,
    pub loss_order: f64,
    pub loss_contrast: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_hits1: Option<f64>,
}

struct TrainItem {
    record: QuestionRecord,
    cands: CandidateSet,
    gold: Vec<usize>,
    contrast: Option<(QuestionRecord, u8)>,
}

const ADAGRAD_EPS: f64 = 1e-10;

fn adagrad_slice(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, inv_b: f64) {
    for k in 0..param.len() {
        let g = grad[k] * inv_b;
        acc[k] += g * g;
        param[k] -= lr * g / (acc[k].sqrt() + ADAGRAD_EPS);
    }
}

/// Walk every parameter slice of the model in lockstep with the matching
/// gradient/state slices; keeps the three optimizers free of copy-paste.
fn for_each_qa_slice(
    qa: &mut QaModel,
    grads: &QaGrads,
    a: &mut QaGrads,
    b: &mut QaGrads,
    mut f: impl FnMut(&mut [f64], &[f64], &mut [f64], &mut [f64]),
) {
    for ((row, g), (ar, br)) in qa
        .encoder
        .token_table
        .iter_mut()
        .zip(&grads.enc.token_table)
        .zip(a.enc.token_table.iter_mut().zip(b.enc.token_table.iter_mut()))
    {
        f(row, g, ar, br);
    }
    f(
        qa.encoder.ffn_w1.as_mut_slice(),
        grads.enc.ffn_w1.as_slice(),
        a.enc.ffn_w1.as_mut_slice(),
        b.enc.ffn_w1.as_mut_slice(),
    );
    f(&mut qa.encoder.ffn_b1, &grads.enc.ffn_b1, &mut a.enc.ffn_b1, &mut b.enc.ffn_b1);
    f(
        qa.encoder.ffn_w2.as_mut_slice(),
        grads.enc.ffn_w2.as_slice(),
        a.enc.ffn_w2.as_mut_slice(),
        b.enc.ffn_w2.as_mut_slice(),
    );
    f(&mut qa.encoder.ffn_b2, &grads.enc.ffn_b2, &mut a.enc.ffn_b2, &mut b.enc.ffn_b2);
    f(
        qa.encoder.w_proj.as_mut_slice(),
        grads.enc.w_proj.as_slice(),
        a.enc.w_proj.as_mut_slice(),
        b.enc.w_proj.as_mut_slice(),
    );
    f(
        qa.encoder.w_qr.as_mut_slice(),
        grads.enc.w_qr.as_slice(),
        a.enc.w_qr.as_mut_slice(),
        b.enc.w_qr.as_mut_slice(),
    );
    f(
        qa.encoder.w_qt.as_mut_slice(),
        grads.enc.w_qt.as_slice(),
        a.enc.w_qt.as_mut_slice(),
        b.enc.w_qt.as_mut_slice(),
    );
    f(
        qa.heads.w_ft.as_mut_slice(),
        grads.w_ft.as_slice(),
        a.w_ft.as_mut_slice(),
        b.w_ft.as_mut_slice(),
    );
    f(&mut qa.heads.blend_w, &grads.blend_w, &mut a.blend_w, &mut b.blend_w);
    if let Some(bias) = qa.heads.block_bias.as_mut() {
        f(bias, &grads.block_bias, &mut a.block_bias, &mut b.block_bias);
    }
    f(&mut qa.contrast.w_o, &grads.w_o, &mut a.w_o, &mut b.w_o);
}

/// One optimizer step over the accumulated batch gradients (mean over the
/// batch). `m_state`/`v_state` carry the optimizer moments.
#[allow(clippy::too_many_arguments)]
fn apply_qa_update(
    qa: &mut QaModel,
    grads: &QaGrads,
    batch_len: usize,
    lr: f64,
    optimizer: Optimizer,
    m_state: &mut QaGrads,
    v_state: &mut QaGrads,
    step: u64,
) {
    let inv_b = 1.0 / batch_len as f64;
    match optimizer {
        Optimizer::Adagrad => {
            for_each_qa_slice(qa, grads, m_state, v_state, |p, g, acc, _| {
                adagrad_slice(p, g, acc, lr, inv_b);
            });
        }
        Optimizer::Adam => {
            for_each_qa_slice(qa, grads, m_state, v_state, |p, g, m, v| {
                let scaled: Vec<f64> = g.iter().map(|x| x * inv_b).collect();
                crate::embed::adam_slice(p, &scaled, m, v, lr, step);
            });
        }
        Optimizer::Sgd => {
            for_each_qa_slice(qa, grads, m_state, v_state, |p, g, _, _| {
                axpy(p, g, -lr * inv_b);
            });
        }
    }
}

/// Train the QA stage on top of trained KG embeddings.
///
/// Returns the best dev-Hits@1 snapshot as a [`TrainedModel`] plus the
/// training log. Questions whose gold answers stay unreachable within
/// `m_max` hops are excluded from training with a warning.
pub fn train_qa(
    kg: &TemporalKG,
    emb: &KgEmbeddingModel,
    train: &[QuestionRecord],
    dev: &[QuestionRecord],
    cfg: &RunConfig,
    toggles: AblationToggles,
) -> Result<(TrainedModel, Vec<QaEpochLog>), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.qa.seed);
    let d = emb.store.d;
    let (lambda_o, lambda_c) = if toggles.tc {
        (cfg.qa.lambda_o, cfg.qa.lambda_c)
    } else {
        (0.0, 0.0)
    };
    let lexicon = ContrastLexicon::default();

    // Encoder vocabulary: special tokens first, then template tokens in
    // first-appearance order over the training questions.
    let mut vocab: Vec<String> = [SUBJECT_TOKEN, OBJECT_TOKEN, TIME_TOKEN, UNK_TOKEN]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut seen: HashSet<String> = vocab.iter().cloned().collect();
    for q in train {
        for tok in &q.template_tokens {
            if seen.insert(tok.clone()) {
                vocab.push(tok.clone());
            }
        }
    }

    let mut qa = QaModel {
        encoder: EncoderParams::init(vocab, cfg.encoder.d_enc, d, cfg.encoder.activation, &mut rng),
        heads: QaHeads::init(d, cfg.qa.block_bias, &mut rng),
        contrast: ContrastHeads::init(d, &mut rng),
    };
    let mut store = emb.store.clone();

    // Fit per-question hop counts and candidate sets.
    let full = (!toggles.ng).then(|| CandidateSet::full(kg));
    let mut items: Vec<TrainItem> = Vec::with_capacity(train.len());
    let mut m_test = 0usize;
    let mut excluded = 0usize;
    for q in train {
        let cands = match &full {
            Some(f) => f.clone(),
            None => {
                let fit = neighbor::fit_hops(kg, q, cfg.qa.m_max)?;
                if !fit.covers_answers {
                    excluded += 1;
                    continue;
                }
                m_test = m_test.max(fit.m);
                neighbor::extract(kg, &q.entity_ids, fit.m)?
            }
        };
        let gold = gold_candidate_indices(q, &cands);
        if gold.is_empty() {
            excluded += 1;
            continue;
        }
        let contrast = if lambda_o > 0.0 || lambda_c > 0.0 {
            make_contrast(q, &lexicon).map(|p| (p.contrast, p.y_o))
        } else {
            None
        };
        items.push(TrainItem {
            record: q.clone(),
            cands,
            gold,
            contrast,
        });
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} training questions with unreachable answers");
    }
    if items.is_empty() {
        return Err(PipelineError::NoTrainableQuestions);
    }
    if toggles.ng {
        m_test = m_test.max(1);
    }

    let dev_items = prepare_candidates(kg, dev, m_test, toggles.ng)?;

    let mut grads = QaGrads::zeros(&qa);
    let mut opt_m = QaGrads::zeros(&qa);
    let mut opt_v = QaGrads::zeros(&qa);
    let mut opt_step = 0u64;
    let mut store_grads = cfg.qa.finetune_kg.then(|| StoreGrads::zeros(&store));
    let mut store_m = cfg.qa.finetune_kg.then(|| StoreGrads::zeros(&store));
    let mut store_v = cfg.qa.finetune_kg.then(|| StoreGrads::zeros(&store));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut logs = Vec::with_capacity(cfg.qa.epochs);
    let mut best: Option<(f64, QaModel, ComplexEmbeddingStore)> = None;

    for epoch in 0..cfg.qa.epochs {
        let epoch_lr = if cfg.qa.epochs > 1 {
            cfg.qa.lr
                * cfg
                    .qa
                    .lr_decay
                    .max(1e-6)
                    .powf(epoch as f64 / (cfg.qa.epochs - 1) as f64)
        } else {
            cfg.qa.lr
        };
        order.shuffle(&mut rng);
        let mut sum_ans = 0.0;
        let mut sum_ord = 0.0;
        let mut sum_con = 0.0;
        let mut n_pairs = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.qa.batch_size.max(1)).enumerate() {
            grads.clear();
            if let Some(sg) = store_grads.as_mut() {
                sg.clear();
            }
            let mut batch_loss = 0.0;

            for &ii in batch {
                let item = &items[ii];
                let (sc, cache) =
                    forward_record(&store, &qa, &toggles, kg, &item.record, &item.cands)?;
                let l_ans = answer_loss(&sc, &item.gold, cfg.qa.gold_norm)?;
                sum_ans += l_ans;
                batch_loss += l_ans;
                let mut d_scores = answer_score_grad(&sc, &item.gold, cfg.qa.gold_norm);
                let mut extra_tq: Option<CVec> = None;

                if let Some((contrast_record, y_o)) = &item.contrast {
                    let (sc_bar, cache_bar) =
                        forward_record(&store, &qa, &toggles, kg, contrast_record, &item.cands)?;

                    // Order loss on the two time estimates.
                    let z = order_logit(&cache.t_q, &cache_bar.t_q, &qa.contrast);
                    let y = *y_o as f64;
                    let l_ord = crate::linalg::bce_with_logit(z, y);
                    sum_ord += l_ord;
                    n_pairs += 1;
                    let gz = lambda_o * (sigmoid(z) - y);
                    for (w, (a, b)) in grads.w_o.iter_mut().zip(
                        cache
                            .t_q
                            .0
                            .as_real()
                            .iter()
                            .zip(cache_bar.t_q.0.as_real()),
                    ) {
                        *w += gz * (a - b);
                    }

                    // Answer-guided contrast on the stacked scores.
                    let l_con = answer_contrast_loss(
                        &sc.scores,
                        &sc_bar.scores,
                        &item.gold,
                        cfg.qa.contrast_norm,
                    )?;
                    sum_con += l_con;
                    let z_norm = match cfg.qa.contrast_norm {
                        ContrastNorm::Paper => sc.scores.len() as f64,
                        ContrastNorm::GoldCount => item.gold.len() as f64,
                    };
                    let mut d_scores_bar = vec![0.0; sc.scores.len()];
                    for &gi in &item.gold {
                        let p0 = sigmoid(sc.scores[gi] - sc_bar.scores[gi]);
                        let coeff = lambda_c * (1.0 - p0) / z_norm;
                        d_scores[gi] -= coeff;
                        d_scores_bar[gi] += coeff;
                    }

                    batch_loss += lambda_o * l_ord + lambda_c * l_con;

                    let mut extra_bar = CVec::from_real(qa.contrast.w_o.clone());
                    extra_bar.scale(-gz);
                    backward_record(
                        &store,
                        &qa,
                        &toggles,
                        &item.cands,
                        &cache_bar,
                        &d_scores_bar,
                        Some(&extra_bar),
                        &mut grads,
                        store_grads.as_mut(),
                    );
                    let mut extra = CVec::from_real(qa.contrast.w_o.clone());
                    extra.scale(gz);
                    extra_tq = Some(extra);
                }

                backward_record(
                    &store,
                    &qa,
                    &toggles,
                    &item.cands,
                    &cache,
                    &d_scores,
                    extra_tq.as_ref(),
                    &mut grads,
                    store_grads.as_mut(),
                );
            }

            if !batch_loss.is_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }
            opt_step += 1;
            apply_qa_update(
                &mut qa,
                &grads,
                batch.len(),
                epoch_lr,
                cfg.qa.optimizer,
                &mut opt_m,
                &mut opt_v,
                opt_step,
            );
            if let (Some(sg), Some(sm), Some(sv)) =
                (store_grads.as_ref(), store_m.as_mut(), store_v.as_mut())
            {
                sg.apply(
                    &mut store,
                    batch.len(),
                    epoch_lr,
                    cfg.qa.optimizer,
                    sm,
                    sv,
                    opt_step,
                );
            }
        }

        let n = items.len() as f64;
        let mut entry = QaEpochLog {
            epoch,
            loss_answer: sum_ans / n,
            loss_order: if n_pairs > 0 { sum_ord / n_pairs as f64 } else { 0.0 },
            loss_contrast: if n_pairs > 0 { sum_con / n_pairs as f64 } else { 0.0 },
            dev_hits1: None,
        };

        let last_epoch = epoch + 1 == cfg.qa.epochs;
        if !dev_items.is_empty() && (epoch % cfg.qa.eval_every.max(1) == 0 || last_epoch) {
            if !qa.is_finite() {
                return Err(PipelineError::NonFinite { epoch, batch: 0 });
            }
            let hits1 = dev_hits1(&store, &qa, &toggles, kg, &dev_items);
            entry.dev_hits1 = Some(hits1);
            if best.as_ref().map_or(true, |(b, _, _)| hits1 > *b) {
                best = Some((hits1, qa.clone(), store.clone()));
            }
        }
        log::debug!(
            "qa epoch {}: answer={:.4} order={:.4} contrast={:.4} dev={:?}",
            entry.epoch,
            entry.loss_answer,
            entry.loss_order,
            entry.loss_contrast,
            entry.dev_hits1
        );
        logs.push(entry);
    }

    let (dev_score, qa, store) = best.unwrap_or((0.0, qa, store));
    Ok((
        TrainedModel {
            config: cfg.clone(),
            toggles,
            m_test,
            dev_hits1: dev_score,
            git_describe: git_describe(),
            kg_fingerprint: kg_fingerprint(kg),
            store,
            order_head: emb.order_head.clone(),
            qa,
        },
        logs,
    ))
}

/// Overall Hits@1 over prepared dev items (model-selection metric).
fn dev_hits1(
    store: &ComplexEmbeddingStore,
    qa: &QaModel,
    toggles: &AblationToggles,
    kg: &TemporalKG,
    items: &[(QuestionRecord, CandidateSet)],
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (q, cands) in items {
        if let Ok(sc) = score_record(store, qa, toggles, kg, q, cands) {
            let top = crate::qa::rank_answers(&sc, 1);
            if let Some(&idx) = top.first() {
                let ok = if idx < cands.entities.len() {
                    q.answer_type == AnswerType::Entity
                        && q.entity_answers().any(|e| e == cands.entities[idx])
                } else {
                    q.answer_type == AnswerType::Time
                        && q
                            .time_answers()
                            .any(|t| t == cands.timestamps[idx - cands.entities.len()])
                };
                hits += ok as usize;
            }
        }
    }
    hits as f64 / items.len() as f64
}

/// Require that a checkpoint matches the KG it is being used with.
pub fn check_kg_match(model: &TrainedModel, kg: &TemporalKG) -> Result<(), PipelineError> {
    if model.kg_fingerprint != kg_fingerprint(kg) {
        return Err(PipelineError::KgMismatch);
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"TKQACKP1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: RunConfig,
    toggles: AblationToggles,
    m_test: usize,
    dev_hits1: f64,
    git_describe: String,
    kg_fingerprint: u64,
    d: usize,
    d_enc: usize,
    num_entities: usize,
    num_relations: usize,
    num_timestamps: usize,
    vocab: Vec<String>,
    activation: crate::question::Activation,
    has_block_bias: bool,
}

/// Serialize the full model. Layout: magic `TKQACKP1`, length-prefixed JSON
/// header, then little-endian f64 tables in this order: entity, relation,
/// time, order head w_t, token table, ffn_w1, ffn_b1, ffn_w2, ffn_b2,
/// w_proj, w_qr, w_qt, w_ft, blend_w, block_bias (if present), w_o.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrainedModel) -> Result<(), PipelineError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let header = CkptHeader {
        config: model.config.clone(),
        toggles: model.toggles,
        m_test: model.m_test,
        dev_hits1: model.dev_hits1,
        git_describe: model.git_describe.clone(),
        kg_fingerprint: model.kg_fingerprint,
        d: model.store.d,
        d_enc: model.qa.encoder.d_enc,
        num_entities: model.store.num_entities(),
        num_relations: model.store.num_relations(),
        num_timestamps: model.store.num_timestamps(),
        vocab: model.qa.encoder.vocab.clone(),
        activation: model.qa.encoder.activation,
        has_block_bias: model.qa.heads.block_bias.is_some(),
    };
    binio::write_json_block(&mut buf, &header)
        .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    for table in [&model.store.entity, &model.store.relation, &model.store.time] {
        for row in table {
            binio::write_f64_slice(&mut buf, row.as_real());
        }
    }
    binio::write_f64_slice(&mut buf, &model.order_head.w_t);
    for row in &model.qa.encoder.token_table {
        binio::write_f64_slice(&mut buf, row);
    }
    let enc = &model.qa.encoder;
    binio::write_f64_slice(&mut buf, enc.ffn_w1.as_slice());
    binio::write_f64_slice(&mut buf, &enc.ffn_b1);
    binio::write_f64_slice(&mut buf, enc.ffn_w2.as_slice());
    binio::write_f64_slice(&mut buf, &enc.ffn_b2);
    binio::write_f64_slice(&mut buf, enc.w_proj.as_slice());
    binio::write_f64_slice(&mut buf, enc.w_qr.as_slice());
    binio::write_f64_slice(&mut buf, enc.w_qt.as_slice());
    binio::write_f64_slice(&mut buf, model.qa.heads.w_ft.as_slice());
    binio::write_f64_slice(&mut buf, &model.qa.heads.blend_w);
    if let Some(bias) = model.qa.heads.block_bias {
        binio::write_f64_slice(&mut buf, &bias);
    }
    binio::write_f64_slice(&mut buf, &model.qa.contrast.w_o);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel, PipelineError> {
    let data = std::fs::read(path)?;
    let mut cur = &data[..];
    if cur.len() < 8 || &cur[..8] != CKPT_MAGIC {
        return Err(PipelineError::Checkpoint("bad magic/version".into()));
    }
    cur = &cur[8..];
    let header: CkptHeader =
        binio::read_json_block(&mut cur).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    let d = header.d;
    let ck = |e: binio::BinIoError| PipelineError::Checkpoint(e.to_string());
    let read_cvecs = |n: usize, cur: &mut &[u8]| -> Result<Vec<CVec>, PipelineError> {
        (0..n)
            .map(|_| binio::read_f64_vec(cur, 2 * d).map(CVec::from_real).map_err(ck))
            .collect()
    };
    let entity = read_cvecs(header.num_entities, &mut cur)?;
    let relation = read_cvecs(header.num_relations, &mut cur)?;
    let time = read_cvecs(header.num_timestamps, &mut cur)?;
    let w_t = binio::read_f64_vec(&mut cur, 2 * d).map_err(ck)?;
    let token_table: Vec<Vec<f64>> = (0..header.vocab.len())
        .map(|_| binio::read_f64_vec(&mut cur, header.d_enc).map_err(ck))
        .collect::<Result<_, _>>()?;
    let d_enc = header.d_enc;
    let read_mat = |rows: usize, cols: usize, cur: &mut &[u8]| -> Result<Mat, PipelineError> {
        Ok(Mat::from_vec(
            rows,
            cols,
            binio::read_f64_vec(cur, rows * cols).map_err(ck)?,
        ))
    };
    let ffn_w1 = read_mat(d_enc, d_enc, &mut cur)?;
    let ffn_b1 = binio::read_f64_vec(&mut cur, d_enc).map_err(ck)?;
    let ffn_w2 = read_mat(d_enc, d_enc, &mut cur)?;
    let ffn_b2 = binio::read_f64_vec(&mut cur, d_enc).map_err(ck)?;
    let w_proj = read_mat(2 * d, d_enc, &mut cur)?;
    let w_qr = read_mat(2 * d, 2 * d, &mut cur)?;
    let w_qt = read_mat(2 * d, 2 * d, &mut cur)?;
    let w_ft = read_mat(2 * d, 2 * d, &mut cur)?;
    let blend = binio::read_f64_vec(&mut cur, 2).map_err(ck)?;
    let block_bias = if header.has_block_bias {
        let b = binio::read_f64_vec(&mut cur, 2).map_err(ck)?;
        Some([b[0], b[1]])
    } else {
        None
    };
    let w_o = binio::read_f64_vec(&mut cur, 2 * d).map_err(ck)?;

    let mut encoder = EncoderParams {
        d_enc,
        d,
        vocab: header.vocab,
        token_table,
        ffn_w1,
        ffn_b1,
        ffn_w2,
        ffn_b2,
        w_proj,
        w_qr,
        w_qt,
        activation: header.activation,
        index: Default::default(),
    };
    encoder.rebuild_index();

    Ok(TrainedModel {
        config: header.config,
        toggles: header.toggles,
        m_test: header.m_test,
        dev_hits1: header.dev_hits1,
        git_describe: header.git_describe,
        kg_fingerprint: header.kg_fingerprint,
        store: ComplexEmbeddingStore {
            d,
            entity,
            relation,
            time,
        },
        order_head: TimeOrderHead { w_t },
        qa: QaModel {
            encoder,
            heads: QaHeads {
                w_ft,
                blend_w: [blend[0], blend[1]],
                block_bias,
            },
            contrast: ContrastHeads { w_o },
        },
    })
}

/// Expose the λ tuning grid at the pipeline level too.
pub use contrastive::LAMBDA_GRID;
