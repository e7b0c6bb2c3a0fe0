//! Contrastive question pairs and their losses.
//!
//! A contrastive question replaces one temporal word of the original with
//! its antonym from a fixed dictionary. The pair feeds two auxiliary
//! objectives: an order loss that classifies which of the two time
//! estimates should be earlier, and an answer-guided loss that pushes the
//! original question's gold answers away from the contrast question's
//! scores. The contrast question's own answers are never computed; the pair
//! reuses the original question's candidate ordering so the stacked score
//! rows align column by column.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complex::CVec;
use crate::linalg::{bce_with_logit, log_sigmoid};
use crate::qa::TimeEstimate;
use crate::question::{QuestionCategory, QuestionRecord};

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("score vectors differ in length: {a} vs {b}")]
    MismatchedCandidates { a: usize, b: usize },
    #[error("gold answer set is empty")]
    EmptyGold,
}

/// The temporal-antonym dictionary. Word pairs are ordered
/// (earlier-side word, later-side word).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastLexicon {
    pub pairs: Vec<(String, String)>,
}

impl Default for ContrastLexicon {
    fn default() -> Self {
        ContrastLexicon {
            pairs: [
                ("first", "last"),
                ("before", "after"),
                ("before", "during"),
                ("during", "after"),
                ("before", "when"),
                ("when", "after"),
            ]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        }
    }
}

impl ContrastLexicon {
    /// Extend the canonical dictionary with extra pairs.
    pub fn with_extra_pairs(mut self, extra: &[(String, String)]) -> Self {
        self.pairs.extend(extra.iter().cloned());
        self
    }
}

/// An original question and its antonym-substituted counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub original: QuestionRecord,
    pub contrast: QuestionRecord,
    pub pair_used: (String, String),
    /// 0 iff word_1 was replaced by word_2.
    pub y_o: u8,
}

/// Learned parameter of the contrastive order head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastHeads {
    /// Direction of dimension 2d.
    pub w_o: Vec<f64>,
}

impl ContrastHeads {
    pub fn init<R: rand::Rng>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (2.0 * d as f64).sqrt();
        ContrastHeads {
            w_o: CVec::gaussian(d, std, rng).into_real(),
        }
    }
}

/// Build the contrastive question by replacing the first template token
/// that matches a lexicon word with its antonym (first matching pair in
/// dictionary order). Pairs involving "when" apply only where "when" is a
/// temporal connective, i.e. the before/after and time-join categories.
/// Returns `None` when no temporal word matches. The contrast record keeps
/// the original's category, entities and answers; its answers are never
/// recomputed.
pub fn make_contrast(q: &QuestionRecord, lex: &ContrastLexicon) -> Option<ContrastivePair> {
    let when_ok = matches!(
        q.category,
        QuestionCategory::BeforeAfter | QuestionCategory::TimeJoin
    );
    for (ti, tok) in q.template_tokens.iter().enumerate() {
        for (w1, w2) in &lex.pairs {
            if (w1 == "when" || w2 == "when") && !when_ok {
                continue;
            }
            let (replacement, y_o) = if tok == w1 {
                (w2.clone(), 0u8)
            } else if tok == w2 {
                (w1.clone(), 1u8)
            } else {
                continue;
            };
            let mut contrast = q.clone();
            contrast.template_tokens[ti] = replacement.clone();
            contrast.temporal_word = Some(replacement.clone());
            contrast.raw_text = replace_word_once(&q.raw_text, tok, &replacement);
            return Some(ContrastivePair {
                original: q.clone(),
                contrast,
                pair_used: (w1.clone(), w2.clone()),
                y_o,
            });
        }
    }
    None
}

fn replace_word_once(text: &str, word: &str, replacement: &str) -> String {
    let mut done = false;
    text.split_whitespace()
        .map(|t| {
            if !done && t == word {
                done = true;
                replacement
            } else {
                t
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Logit of the order probability `p_o = σ((t_q - t_qc)ᵀ W_o)` on the
/// concatenated-real forms of the two time estimates.
pub fn order_logit(t_q: &TimeEstimate, t_qc: &TimeEstimate, heads: &ContrastHeads) -> f64 {
    let (a, b) = (t_q.0.as_real(), t_qc.0.as_real());
    assert_eq!(a.len(), heads.w_o.len());
    assert_eq!(b.len(), heads.w_o.len());
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += (a[k] - b[k]) * heads.w_o[k];
    }
    acc
}

/// Binary cross-entropy of the order probability against the pair label.
pub fn order_loss(
    t_q: &TimeEstimate,
    t_qc: &TimeEstimate,
    heads: &ContrastHeads,
    y_o: u8,
) -> f64 {
    bce_with_logit(order_logit(t_q, t_qc, heads), y_o as f64)
}

/// Normalization of the answer-guided contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastNorm {
    /// Literal 1/C over all candidates.
    #[default]
    Paper,
    /// 1/|gold| over the gold-labeled candidates.
    GoldCount,
}

/// Answer-guided contrastive loss. The two score rows (original question
/// first) are stacked per candidate column and softmax-normalized along the
/// stacking dimension, so each column sums to one; the loss is
/// `-(1/Z) Σ_{i∈gold} log P[0, i]` with `Z = C` (literal) or `|gold|`.
pub fn answer_contrast_loss(
    s: &[f64],
    s_bar: &[f64],
    gold: &[usize],
    norm: ContrastNorm,
) -> Result<f64, ContrastError> {
    if s.len() != s_bar.len() {
        return Err(ContrastError::MismatchedCandidates {
            a: s.len(),
            b: s_bar.len(),
        });
    }
    if gold.is_empty() {
        return Err(ContrastError::EmptyGold);
    }
    let z = match norm {
        ContrastNorm::Paper => s.len() as f64,
        ContrastNorm::GoldCount => gold.len() as f64,
    };
    let mut loss = 0.0;
    for &i in gold {
        // Column softmax over two rows reduces to a sigmoid of the
        // difference: P[0, i] = σ(S_i - S̄_i).
        loss -= log_sigmoid(s[i] - s_bar[i]) / z;
    }
    Ok(loss)
}

/// Column probability `P[0, i]` of the stacked softmax, exposed for
/// invariant checks.
pub fn contrast_top_row_prob(s_i: f64, s_bar_i: f64) -> f64 {
    crate::linalg::sigmoid(s_i - s_bar_i)
}

/// Joint objective `L_answer + λ_o·L_order + λ_c·L_contrast`; questions
/// without a contrastive pair contribute only the answer loss.
pub fn joint_loss(
    l_answer: f64,
    l_order: Option<f64>,
    l_contrast: Option<f64>,
    lambda_o: f64,
    lambda_c: f64,
) -> f64 {
    assert!(lambda_o >= 0.0 && lambda_c >= 0.0);
    l_answer + lambda_o * l_order.unwrap_or(0.0) + lambda_c * l_contrast.unwrap_or(0.0)
}

/// The λ grid swept when tuning the contrastive weights.
pub const LAMBDA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::question::{tokenize, AnswerType};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn question(template: &str, category: QuestionCategory, word: Option<&str>) -> QuestionRecord {
        QuestionRecord {
            raw_text: template.replace("[subject]", "X").replace("[object]", "Y"),
            template_tokens: tokenize(template),
            entity_ids: vec![0],
            inline_timestamp: None,
            category,
            temporal_word: word.map(str::to_string),
            answers: vec![1],
            answer_type: AnswerType::Entity,
        }
    }

    #[test]
    fn default_lexicon_is_the_canonical_six() {
        let lex = ContrastLexicon::default();
        let want = [
            ("first", "last"),
            ("before", "after"),
            ("before", "during"),
            ("during", "after"),
            ("before", "when"),
            ("when", "after"),
        ];
        assert_eq!(lex.pairs.len(), 6);
        for (i, (a, b)) in want.iter().enumerate() {
            assert_eq!(lex.pairs[i], (a.to_string(), b.to_string()));
        }
    }

    #[test]
    fn before_becomes_after_with_label_zero() {
        let lex = ContrastLexicon::default();
        let q = question(
            "Who held [subject] before [object] ?",
            QuestionCategory::BeforeAfter,
            Some("before"),
        );
        let pair = make_contrast(&q, &lex).unwrap();
        assert_eq!(pair.y_o, 0);
        assert_eq!(pair.pair_used, ("before".into(), "after".into()));
        assert_eq!(
            pair.contrast.template_tokens.join(" "),
            "Who held [subject] after [object] ?"
        );
        assert!(pair.contrast.raw_text.contains("after"));
        assert_eq!(pair.contrast.answers, q.answers);
    }

    #[test]
    fn first_becomes_last_with_label_zero() {
        let lex = ContrastLexicon::default();
        let q = question(
            "Who held [object] first ?",
            QuestionCategory::FirstLast,
            Some("first"),
        );
        let pair = make_contrast(&q, &lex).unwrap();
        assert_eq!(pair.y_o, 0);
        assert!(pair.contrast.template_tokens.contains(&"last".to_string()));
    }

    #[test]
    fn question_without_temporal_word_yields_none() {
        let lex = ContrastLexicon::default();
        let q = question(
            "Who held [subject] in [time] ?",
            QuestionCategory::SimpleEntity,
            None,
        );
        assert!(make_contrast(&q, &lex).is_none());
    }

    #[test]
    fn interrogative_when_is_protected_by_category() {
        let lex = ContrastLexicon::default();
        // Lowercase "when" inside a simple-time template must not be
        // replaced: the when-pairs are gated to before/after and time-join.
        let q = question(
            "when did [subject] hold [object] ?",
            QuestionCategory::SimpleTime,
            None,
        );
        assert!(make_contrast(&q, &lex).is_none());

        let tj = question(
            "Who held [subject] when [object] held [object] ?",
            QuestionCategory::TimeJoin,
            Some("when"),
        );
        let pair = make_contrast(&tj, &lex).unwrap();
        // First matching pair containing "when" is (before, when): word_2
        // replaced by word_1.
        assert_eq!(pair.pair_used, ("before".into(), "when".into()));
        assert_eq!(pair.y_o, 1);
        assert!(pair.contrast.template_tokens.contains(&"before".to_string()));
    }

    #[test]
    fn double_application_round_trips_word1_word2_pairs() {
        let lex = ContrastLexicon::default();
        for (template, category) in [
            (
                "Who held [subject] before [object] ?",
                QuestionCategory::BeforeAfter,
            ),
            ("Who held [object] first ?", QuestionCategory::FirstLast),
        ] {
            let q = question(template, category, None);
            let pair = make_contrast(&q, &lex).unwrap();
            assert_eq!(pair.y_o, 0, "{template}");
            let back = make_contrast(&pair.contrast, &lex).unwrap();
            assert_eq!(back.y_o, 1, "{template}");
            assert_eq!(back.contrast.template_tokens, q.template_tokens);
        }
    }

    #[test]
    fn order_loss_degenerate_cases() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = ContrastHeads::init(d, &mut rng);
        let t = TimeEstimate(CVec::gaussian(d, 1.0, &mut rng));
        // Identical estimates → p_o = 0.5 → ln 2.
        let loss = order_loss(&t, &t.clone(), &heads, 1);
        assert!((loss - LN_2).abs() < 1e-12);

        let zero_head = ContrastHeads { w_o: vec![0.0; 2 * d] };
        let other = TimeEstimate(CVec::gaussian(d, 1.0, &mut rng));
        for y in [0u8, 1] {
            let loss = order_loss(&t, &other, &zero_head, y);
            assert!((loss - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_loss_equal_scores_closed_form() {
        let c = 8;
        let s = vec![0.7; c];
        let gold = [0, 3, 5];
        let loss = answer_contrast_loss(&s, &s, &gold, ContrastNorm::Paper).unwrap();
        let want = gold.len() as f64 / c as f64 * LN_2;
        assert!((loss - want).abs() < 1e-12);

        let by_gold = answer_contrast_loss(&s, &s, &gold, ContrastNorm::GoldCount).unwrap();
        assert!((by_gold - LN_2).abs() < 1e-12);
    }

    #[test]
    fn contrast_loss_vanishes_when_gold_dominates() {
        let s = vec![60.0, 0.0];
        let s_bar = vec![-60.0, 0.0];
        let loss = answer_contrast_loss(&s, &s_bar, &[0], ContrastNorm::Paper).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn contrast_columns_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a: f64 = rng.random_range(-30.0..30.0);
            let b: f64 = rng.random_range(-30.0..30.0);
            let p0 = contrast_top_row_prob(a, b);
            let p1 = contrast_top_row_prob(b, a);
            assert!((p0 + p1 - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn contrast_loss_errors() {
        assert!(matches!(
            answer_contrast_loss(&[0.0], &[0.0, 1.0], &[0], ContrastNorm::Paper),
            Err(ContrastError::MismatchedCandidates { .. })
        ));
        assert!(matches!(
            answer_contrast_loss(&[0.0], &[0.0], &[], ContrastNorm::Paper),
            Err(ContrastError::EmptyGold)
        ));
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(1.5, Some(9.0), Some(9.0), 0.0, 0.0), 1.5);
        assert_eq!(joint_loss(1.0, Some(2.0), Some(3.0), 1.0, 1.0), 6.0);
        assert_eq!(joint_loss(1.0, None, None, 2.0, 3.0), 1.0);
    }

    #[test]
    fn lambda_grid_matches_tuning_values() {
        assert_eq!(LAMBDA_GRID, [0.5, 1.0, 2.0, 3.0, 5.0]);
    }
}
