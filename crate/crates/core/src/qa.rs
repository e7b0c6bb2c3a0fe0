//! Answer scoring: time estimation, timestamp/entity scores, the unified
//! candidate softmax, and the answer cross-entropy.
//!
//! The time estimate `t_q` is produced from the subject/object embeddings
//! and the question's time projection by a coordinate-wise triple complex
//! product followed by a learned linear map on the concatenated-real form;
//! when the question carries an inline timestamp, the estimate is a learned
//! linear combination of the mapped vector and that timestamp's embedding.
//! The estimate then feeds entity scoring, so timestamp inference and
//! answer inference interact instead of being predicted independently.
//!
//! Entity and timestamp scores are concatenated (entities first) and pushed
//! through one numerically stable softmax; the answer type is never
//! classified separately.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complex::CVec;
use crate::embed::ComplexEmbeddingStore;
use crate::kg::{EntityId, TimeRank};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("gold answer set is empty")]
    EmptyGold,
    #[error("gold index {idx} out of range for {len} candidates")]
    GoldOutOfRange { idx: usize, len: usize },
    #[error("no candidate timestamps for a time-answer question")]
    NoTimeCandidates,
}

/// Learned parameters of the answer head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaHeads {
    /// 2d × 2d map applied to `[Re(h), Im(h)]` of the triple product.
    pub w_ft: Mat,
    /// Mixing weights for the inline-timestamp linear combination.
    pub blend_w: [f64; 2],
    /// Optional learned per-block score offsets (entities, timestamps).
    pub block_bias: Option<[f64; 2]>,
}

impl QaHeads {
    pub fn init<R: rand::Rng>(d: usize, block_bias: bool, rng: &mut R) -> Self {
        // Same small-init rationale as the encoder heads.
        let std = 0.01 / (2.0 * d as f64).sqrt();
        QaHeads {
            w_ft: Mat::gaussian(2 * d, 2 * d, std, rng),
            blend_w: [0.5, 0.5],
            block_bias: block_bias.then_some([0.0, 0.0]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_ft.is_finite()
            && self.blend_w.iter().all(|v| v.is_finite())
            && self
                .block_bias
                .map_or(true, |b| b.iter().all(|v| v.is_finite()))
    }
}

/// The latent timestamp vector inferred for a question.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEstimate(pub CVec);

/// Compute the time estimate from subject/object embeddings and the
/// question time projection. With a single grounded entity the caller
/// substitutes the all-ones complex vector for the missing side, which
/// degrades the triple product to a two-factor product.
pub fn estimate_time(
    e_s: &CVec,
    e_o: &CVec,
    q_t: &CVec,
    heads: &QaHeads,
    inline_t: Option<&CVec>,
) -> TimeEstimate {
    let h = CVec::triple(e_s, q_t, e_o);
    let mut t_q = CVec::from_real(heads.w_ft.matvec(h.as_real()));
    if let Some(inline) = inline_t {
        t_q.scale(heads.blend_w[0]);
        t_q.add_scaled(inline, heads.blend_w[1]);
    }
    TimeEstimate(t_q)
}

/// `Re(⟨t_q, e_t⟩)` for each candidate timestamp rank.
pub fn score_timestamps(
    t_q: &TimeEstimate,
    candidates: &[TimeRank],
    store: &ComplexEmbeddingStore,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|&rank| t_q.0.re_inner(&store.time[rank]))
        .collect()
}

/// `e_q = ⟨e_s, q_r, t_q⟩`, then `Re(⟨e_q, e⟩)` for each candidate entity.
/// The time estimate flows into entity scoring by construction.
pub fn score_entities(
    e_s: &CVec,
    q_r: &CVec,
    t_q: &TimeEstimate,
    candidates: &[EntityId],
    store: &ComplexEmbeddingStore,
) -> Vec<f64> {
    let e_q = CVec::triple(e_s, q_r, &t_q.0);
    candidates
        .iter()
        .map(|&e| e_q.re_inner(&store.entity[e]))
        .collect()
}

/// Scores and probabilities over the unified candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidates {
    /// Entity scores first, then timestamp scores, in candidate-set order.
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    /// Number of leading entries that are entity candidates.
    pub num_entities: usize,
}

/// Concatenate entity and timestamp scores (entities first) and apply a
/// stable softmax over all candidates. Optional per-block biases are added
/// before the softmax.
pub fn answer_distribution(
    entity_scores: &[f64],
    timestamp_scores: &[f64],
    block_bias: Option<[f64; 2]>,
) -> ScoredCandidates {
    let c = entity_scores.len() + timestamp_scores.len();
    assert!(c >= 1, "at least one candidate required");
    let mut scores = Vec::with_capacity(c);
    let [be, bt] = block_bias.unwrap_or([0.0, 0.0]);
    scores.extend(entity_scores.iter().map(|s| s + be));
    scores.extend(timestamp_scores.iter().map(|s| s + bt));

    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

    ScoredCandidates {
        scores,
        probs,
        num_entities: entity_scores.len(),
    }
}

/// Multi-hot cross-entropy `-Σ_i y_i log P_i` over the gold indices. With
/// `normalize_gold` the label vector is renormalized to sum to one.
pub fn answer_loss(
    sc: &ScoredCandidates,
    gold: &[usize],
    normalize_gold: bool,
) -> Result<f64, QaError> {
    if gold.is_empty() {
        return Err(QaError::EmptyGold);
    }
    for &i in gold {
        if i >= sc.probs.len() {
            return Err(QaError::GoldOutOfRange {
                idx: i,
                len: sc.probs.len(),
            });
        }
    }
    let weight = if normalize_gold {
        1.0 / gold.len() as f64
    } else {
        1.0
    };
    let mut loss = 0.0;
    for &i in gold {
        loss -= weight * sc.probs[i].max(f64::MIN_POSITIVE).ln();
    }
    Ok(loss)
}

/// Indices of the k highest-scoring candidates; ties break toward the
/// smaller candidate index.
pub fn rank_answers(sc: &ScoredCandidates, k: usize) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let mut idx: Vec<usize> = (0..sc.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        sc.scores[b]
            .total_cmp(&sc.scores[a])
            .then_with(|| a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(entity: Vec<CVec>, time: Vec<CVec>, d: usize) -> ComplexEmbeddingStore {
        ComplexEmbeddingStore {
            d,
            entity,
            relation: vec![CVec::ones(d)],
            time,
        }
    }

    #[test]
    fn identity_map_passes_q_t_through() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q_t = CVec::gaussian(d, 1.0, &mut rng);
        let heads = QaHeads {
            w_ft: Mat::identity(2 * d),
            blend_w: [0.5, 0.5],
            block_bias: None,
        };
        let est = estimate_time(&CVec::ones(d), &CVec::ones(d), &q_t, &heads, None);
        assert_eq!(est.0, q_t);
    }

    #[test]
    fn zero_q_t_gives_zero_estimate() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = QaHeads::init(d, false, &mut rng);
        let e_s = CVec::gaussian(d, 1.0, &mut rng);
        let e_o = CVec::gaussian(d, 1.0, &mut rng);
        let est = estimate_time(&e_s, &e_o, &CVec::zeros(d), &heads, None);
        assert!(est.0.as_real().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inline_blend_is_a_linear_combination() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q_t = CVec::gaussian(d, 1.0, &mut rng);
        let inline = CVec::gaussian(d, 1.0, &mut rng);
        let heads = QaHeads {
            w_ft: Mat::identity(2 * d),
            blend_w: [0.25, 2.0],
            block_bias: None,
        };
        let est = estimate_time(&CVec::ones(d), &CVec::ones(d), &q_t, &heads, Some(&inline));
        for k in 0..2 * d {
            let want = 0.25 * q_t.as_real()[k] + 2.0 * inline.as_real()[k];
            assert!((est.0.as_real()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn timestamp_scores_unfold_the_definition() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_emb = CVec::gaussian(d, 1.0, &mut rng);
        let store = store_with(vec![CVec::ones(d)], vec![t_emb.clone()], d);
        // t_q equal to a candidate's own embedding: score = Re(Σ t_q[k]²).
        let est = TimeEstimate(t_emb.clone());
        let scores = score_timestamps(&est, &[0], &store);
        let want: f64 = (0..d)
            .map(|k| t_emb.re()[k] * t_emb.re()[k] - t_emb.im()[k] * t_emb.im()[k])
            .sum();
        assert!((scores[0] - want).abs() < 1e-12);

        let zero = TimeEstimate(CVec::zeros(d));
        assert_eq!(score_timestamps(&zero, &[0], &store), vec![0.0]);
    }

    #[test]
    fn ones_projections_reduce_entity_scores_to_inner_products() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e_s = CVec::gaussian(d, 1.0, &mut rng);
        let cands: Vec<CVec> = (0..3).map(|_| CVec::gaussian(d, 1.0, &mut rng)).collect();
        let store = store_with(cands.clone(), vec![CVec::ones(d)], d);
        let scores = score_entities(
            &e_s,
            &CVec::ones(d),
            &TimeEstimate(CVec::ones(d)),
            &[0, 1, 2],
            &store,
        );
        for (j, c) in cands.iter().enumerate() {
            assert!((scores[j] - e_s.re_inner(c)).abs() < 1e-12);
        }

        let zeros = score_entities(
            &CVec::zeros(d),
            &CVec::ones(d),
            &TimeEstimate(CVec::ones(d)),
            &[0, 1, 2],
            &store,
        );
        assert!(zeros.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let sc = answer_distribution(&[1.0], &[1.0], None);
        assert_eq!(sc.probs, vec![0.5, 0.5]);

        let sc = answer_distribution(&[0.0, 3f64.ln()], &[], None);
        assert!((sc.probs[0] - 0.25).abs() < 1e-12);
        assert!((sc.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_always_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let m = rng.random_range(0..8);
            let es: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let ts: Vec<f64> = (0..m).map(|_| rng.random_range(-50.0..50.0)).collect();
            let sc = answer_distribution(&es, &ts, None);
            assert!((sc.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(sc.probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn loss_closed_forms() {
        let sc = ScoredCandidates {
            scores: vec![0.0, 0.0],
            probs: vec![1.0, 0.0],
            num_entities: 2,
        };
        assert_eq!(answer_loss(&sc, &[0], false).unwrap(), 0.0);

        let sc = ScoredCandidates {
            scores: vec![0.0, 0.0],
            probs: vec![0.5, 0.5],
            num_entities: 2,
        };
        let loss = answer_loss(&sc, &[0], false).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let sc = ScoredCandidates {
            scores: vec![0.0; 3],
            probs: vec![0.3, 0.2, 0.5],
            num_entities: 3,
        };
        let loss = answer_loss(&sc, &[0, 1], false).unwrap();
        let want = -(0.3f64.ln()) - 0.2f64.ln();
        assert!((loss - want).abs() < 1e-12);

        assert!(matches!(
            answer_loss(&sc, &[], false),
            Err(QaError::EmptyGold)
        ));
        assert!(matches!(
            answer_loss(&sc, &[9], false),
            Err(QaError::GoldOutOfRange { .. })
        ));
    }

    #[test]
    fn gold_normalization_scales_the_literal_sum() {
        let sc = ScoredCandidates {
            scores: vec![0.0; 3],
            probs: vec![0.3, 0.2, 0.5],
            num_entities: 3,
        };
        let plain = answer_loss(&sc, &[0, 1], false).unwrap();
        let norm = answer_loss(&sc, &[0, 1], true).unwrap();
        assert!((norm - plain / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_index() {
        let sc = ScoredCandidates {
            scores: vec![0.1, 0.9, 0.5],
            probs: vec![0.0; 3],
            num_entities: 3,
        };
        assert_eq!(rank_answers(&sc, 3), vec![1, 2, 0]);

        let tied = ScoredCandidates {
            scores: vec![0.5; 4],
            probs: vec![0.0; 4],
            num_entities: 4,
        };
        assert_eq!(rank_answers(&tied, 2), vec![0, 1]);
    }

    #[test]
    fn ranking_agrees_with_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sc = ScoredCandidates {
                scores: scores.clone(),
                probs: vec![0.0; n],
                num_entities: n,
            };
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let k = rng.random_range(1..=n);
            assert_eq!(rank_answers(&sc, k), oracle[..k]);
        }
    }

    #[test]
    fn shift_invariance_of_probs_and_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let es: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ts: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = answer_distribution(&es, &ts, None);
        let shift = 7.25;
        let es2: Vec<f64> = es.iter().map(|s| s + shift).collect();
        let ts2: Vec<f64> = ts.iter().map(|s| s + shift).collect();
        let moved = answer_distribution(&es2, &ts2, None);
        for (a, b) in base.probs.iter().zip(moved.probs.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(rank_answers(&base, 9), rank_answers(&moved, 9));
    }
}
