//! Question decomposition and the template encoder.
//!
//! A question is decomposed into grounded entity slots and an
//! entity-independent template: entity mentions are replaced by `[subject]`
//! (first) and `[object]` (second and later) in order of appearance, and
//! 4-digit integers that belong to the timestamp vocabulary are captured as
//! the inline timestamp and replaced by `[time]`.
//!
//! The encoder is a trainable stand-in for a pretrained sentence encoder:
//! a token-embedding table, mean pooling, and a two-layer feed-forward map
//! produce the pooled vector `e_q`; two projection heads then map
//! `δ(W·e_q)` to the relation embedding `q_r` and time embedding `q_t`,
//! each reassembled into complex space as `v[0:d] + i·v[d:2d]`. The encoder
//! sees only the template, never the grounded entities, so questions that
//! share a template share their encoding exactly.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::complex::CVec;
use crate::kg::{EntityId, TemporalKG, Timestamp};
use crate::linalg::{axpy, Mat};

pub const SUBJECT_TOKEN: &str = "[subject]";
pub const OBJECT_TOKEN: &str = "[object]";
pub const TIME_TOKEN: &str = "[time]";
pub const UNK_TOKEN: &str = "[unk]";

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("no entity mention matched the lexicon; question is unanswerable over this KG")]
    NoGroundedEntities,
    #[error("record is invalid: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    SimpleEntity,
    SimpleTime,
    BeforeAfter,
    FirstLast,
    TimeJoin,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 5] = [
        QuestionCategory::SimpleEntity,
        QuestionCategory::SimpleTime,
        QuestionCategory::BeforeAfter,
        QuestionCategory::FirstLast,
        QuestionCategory::TimeJoin,
    ];

    /// Single-fact lookups are "simple"; the rest require reasoning over
    /// multiple facts and their temporal order.
    pub fn is_complex(self) -> bool {
        !matches!(
            self,
            QuestionCategory::SimpleEntity | QuestionCategory::SimpleTime
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionCategory::SimpleEntity => "simple_entity",
            QuestionCategory::SimpleTime => "simple_time",
            QuestionCategory::BeforeAfter => "before_after",
            QuestionCategory::FirstLast => "first_last",
            QuestionCategory::TimeJoin => "time_join",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Entity,
    Time,
}

fn serialize_template<S: Serializer>(tokens: &[String], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&tokens.join(" "))
}

fn deserialize_template<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    let joined = String::deserialize(d)?;
    Ok(joined.split_whitespace().map(str::to_string).collect())
}

/// A templated question grounded in the KG.
///
/// `answers` holds entity ids or timestamp values depending on
/// `answer_type`. The JSON-lines wire format mirrors this struct, with the
/// template serialized as a single space-joined string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub raw_text: String,
    #[serde(
        rename = "template",
        serialize_with = "serialize_template",
        deserialize_with = "deserialize_template"
    )]
    pub template_tokens: Vec<String>,
    pub entity_ids: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline_timestamp: Option<Timestamp>,
    pub category: QuestionCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_word: Option<String>,
    /// Gold answers; may be empty in query-time inputs.
    #[serde(default)]
    pub answers: Vec<i64>,
    pub answer_type: AnswerType,
}

impl QuestionRecord {
    /// Entity answers (valid when `answer_type == Entity`).
    pub fn entity_answers(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.answers.iter().map(|&a| a as EntityId)
    }

    /// Timestamp answers (valid when `answer_type == Time`).
    pub fn time_answers(&self) -> impl Iterator<Item = Timestamp> + '_ {
        self.answers.iter().copied()
    }

    /// Check the record invariants against a KG: grounded entities exist,
    /// answers are non-empty and consistent with the answer type, and the
    /// template carries exactly one slot marker per grounded entity.
    pub fn validate(&self, kg: &TemporalKG) -> Result<(), QuestionError> {
        for &e in &self.entity_ids {
            if e >= kg.num_entities() {
                return Err(QuestionError::InvalidRecord(format!(
                    "entity id {e} not in vocabulary"
                )));
            }
        }
        if self.answers.is_empty() {
            return Err(QuestionError::InvalidRecord("empty answer set".into()));
        }
        match self.answer_type {
            AnswerType::Entity => {
                for a in self.entity_answers() {
                    if a >= kg.num_entities() {
                        return Err(QuestionError::InvalidRecord(format!(
                            "answer entity {a} not in vocabulary"
                        )));
                    }
                }
            }
            AnswerType::Time => {
                for t in self.time_answers() {
                    if kg.time_rank(t).is_none() {
                        return Err(QuestionError::InvalidRecord(format!(
                            "answer timestamp {t} not in vocabulary"
                        )));
                    }
                }
            }
        }
        let markers = self
            .template_tokens
            .iter()
            .filter(|t| *t == SUBJECT_TOKEN || *t == OBJECT_TOKEN)
            .count();
        if markers != self.entity_ids.len() {
            return Err(QuestionError::InvalidRecord(format!(
                "{} slot markers for {} grounded entities",
                markers,
                self.entity_ids.len()
            )));
        }
        Ok(())
    }
}

/// Whitespace tokenizer that splits trailing sentence punctuation into its
/// own token, so entity mentions adjacent to `?` still match the lexicon.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w = word;
        let mut tail = Vec::new();
        while w.len() > 1 {
            let last = w.chars().last().unwrap();
            if matches!(last, '?' | '!' | '.' | ',' | ';') {
                tail.push(last.to_string());
                w = &w[..w.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        out.push(w.to_string());
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Exact longest-match lexicon from entity labels to ids.
#[derive(Debug, Clone, Default)]
pub struct EntityLexicon {
    /// First token of each label → candidate (token sequence, id) entries,
    /// longest first.
    by_first: HashMap<String, Vec<(Vec<String>, EntityId)>>,
}

impl EntityLexicon {
    pub fn from_kg(kg: &TemporalKG) -> Self {
        Self::from_entries(
            kg.entity_labels()
                .iter()
                .enumerate()
                .map(|(id, label)| (label.as_str(), id)),
        )
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, EntityId)>) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, EntityId)>> = HashMap::new();
        for (label, id) in entries {
            let tokens = tokenize(label);
            if tokens.is_empty() {
                continue;
            }
            by_first
                .entry(tokens[0].clone())
                .or_default()
                .push((tokens, id));
        }
        for variants in by_first.values_mut() {
            variants.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        }
        EntityLexicon { by_first }
    }

    /// Longest label match starting at `tokens[0]`, as (length, id).
    fn match_at(&self, tokens: &[String]) -> Option<(usize, EntityId)> {
        let variants = self.by_first.get(tokens.first()?)?;
        for (label_tokens, id) in variants {
            if label_tokens.len() <= tokens.len()
                && label_tokens.iter().zip(tokens).all(|(a, b)| a == b)
            {
                return Some((label_tokens.len(), *id));
            }
        }
        None
    }
}

/// Words the contrastive lexicon recognizes; used to tag `temporal_word`
/// during decomposition. A lowercase "when" counts only when it is not the
/// opening interrogative.
const TEMPORAL_WORDS: [&str; 6] = ["first", "last", "before", "after", "during", "when"];

/// Decompose raw text into a grounded, entity-independent record.
///
/// Entity mentions are matched exact-longest against the lexicon and
/// replaced by `[subject]`/`[object]` in order of appearance (third and
/// later mentions also receive `[object]`). In-vocabulary 4-digit integers
/// become the inline timestamp and the `[time]` token. The category and
/// temporal word are inferred from the surface form; the answer set is left
/// empty for the caller to fill.
pub fn decompose(
    raw_text: &str,
    kg: &TemporalKG,
    lexicon: &EntityLexicon,
) -> Result<QuestionRecord, QuestionError> {
    let tokens = tokenize(raw_text);
    let mut template = Vec::with_capacity(tokens.len());
    let mut entity_ids = Vec::new();
    let mut inline_timestamp = None;

    let mut i = 0;
    while i < tokens.len() {
        if let Some((len, id)) = lexicon.match_at(&tokens[i..]) {
            template.push(if entity_ids.is_empty() {
                SUBJECT_TOKEN.to_string()
            } else {
                OBJECT_TOKEN.to_string()
            });
            entity_ids.push(id);
            i += len;
            continue;
        }
        let tok = &tokens[i];
        if tok.len() == 4 {
            if let Ok(t) = tok.parse::<Timestamp>() {
                if (1000..=9999).contains(&t) && kg.time_rank(t).is_some() {
                    inline_timestamp.get_or_insert(t);
                    template.push(TIME_TOKEN.to_string());
                    i += 1;
                    continue;
                }
            }
        }
        template.push(tok.clone());
        i += 1;
    }

    if entity_ids.is_empty() {
        return Err(QuestionError::NoGroundedEntities);
    }

    let temporal_word = template.iter().enumerate().find_map(|(pos, tok)| {
        let is_when = tok == "when";
        if TEMPORAL_WORDS.contains(&tok.as_str()) && !(is_when && pos == 0) {
            Some(tok.clone())
        } else {
            None
        }
    });

    let category = match temporal_word.as_deref() {
        Some("before") | Some("after") => QuestionCategory::BeforeAfter,
        Some("first") | Some("last") => QuestionCategory::FirstLast,
        Some("during") | Some("when") => QuestionCategory::TimeJoin,
        _ => {
            if template
                .first()
                .is_some_and(|t| t.eq_ignore_ascii_case("when"))
            {
                QuestionCategory::SimpleTime
            } else {
                QuestionCategory::SimpleEntity
            }
        }
    };
    let answer_type = if category == QuestionCategory::SimpleTime {
        AnswerType::Time
    } else {
        AnswerType::Entity
    };

    Ok(QuestionRecord {
        raw_text: raw_text.to_string(),
        template_tokens: template,
        entity_ids,
        inline_timestamp,
        category,
        temporal_word,
        answers: Vec::new(),
        answer_type,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given pre-activation and post-activation values.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

/// Trainable encoder parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_enc: usize,
    pub d: usize,
    pub vocab: Vec<String>,
    /// |vocab| rows of dimension d_enc.
    pub token_table: Vec<Vec<f64>>,
    pub ffn_w1: Mat,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Mat,
    pub ffn_b2: Vec<f64>,
    /// Projection d_enc → 2d.
    pub w_proj: Mat,
    /// Relation head, 2d → 2d.
    pub w_qr: Mat,
    /// Time head, 2d → 2d (distinct from the downstream time-estimation
    /// matrix, which shares its symbol in some notations).
    pub w_qt: Mat,
    pub activation: Activation,
    #[serde(skip)]
    pub(crate) index: HashMap<String, usize>,
}

impl EncoderParams {
    /// Initialize from a token vocabulary. `[unk]` is appended when absent;
    /// unknown tokens map to it.
    pub fn init<R: Rng>(
        mut vocab: Vec<String>,
        d_enc: usize,
        d: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        if !vocab.iter().any(|t| t == UNK_TOKEN) {
            vocab.push(UNK_TOKEN.to_string());
        }
        let enc_std = 1.0 / (d_enc as f64).sqrt();
        let proj_std = 1.0 / (d_enc as f64).sqrt();
        // Small head init keeps initial candidate scores near zero, so the
        // first optimizer steps cannot saturate the softmax or kill the
        // ReLU units upstream.
        let head_std = 0.01 / (2.0 * d as f64).sqrt();
        let token_table = (0..vocab.len())
            .map(|_| {
                (0..d_enc)
                    .map(|_| rng.sample(rand_distr::Normal::new(0.0, enc_std).unwrap()))
                    .collect()
            })
            .collect();
        let mut params = EncoderParams {
            d_enc,
            d,
            vocab,
            token_table,
            ffn_w1: Mat::gaussian(d_enc, d_enc, enc_std, rng),
            ffn_b1: vec![0.0; d_enc],
            ffn_w2: Mat::gaussian(d_enc, d_enc, enc_std, rng),
            ffn_b2: vec![0.0; d_enc],
            w_proj: Mat::gaussian(2 * d, d_enc, proj_std, rng),
            w_qr: Mat::gaussian(2 * d, 2 * d, head_std, rng),
            w_qt: Mat::gaussian(2 * d, 2 * d, head_std, rng),
            activation,
            index: HashMap::new(),
        };
        params.rebuild_index();
        params
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK_TOKEN])
    }

    pub fn is_finite(&self) -> bool {
        self.token_table.iter().flatten().all(|v| v.is_finite())
            && self.ffn_w1.is_finite()
            && self.ffn_b1.iter().all(|v| v.is_finite())
            && self.ffn_w2.is_finite()
            && self.ffn_b2.iter().all(|v| v.is_finite())
            && self.w_proj.is_finite()
            && self.w_qr.is_finite()
            && self.w_qt.is_finite()
    }
}

/// Pooled question vector plus the projected relation/time embeddings in
/// complex space.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEncoding {
    pub e_q: Vec<f64>,
    pub q_r: CVec,
    pub q_t: CVec,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub token_ids: Vec<usize>,
    pooled: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    e_q: Vec<f64>,
    u_pre: Vec<f64>,
    u: Vec<f64>,
}

/// Encode a record's template. Depends only on `template_tokens`.
pub fn encode(record: &QuestionRecord, params: &EncoderParams) -> QuestionEncoding {
    encode_cached(record, params).0
}

pub fn encode_cached(
    record: &QuestionRecord,
    params: &EncoderParams,
) -> (QuestionEncoding, EncodeCache) {
    let token_ids: Vec<usize> = record
        .template_tokens
        .iter()
        .map(|t| params.token_id(t))
        .collect();
    assert!(!token_ids.is_empty(), "template must be non-empty");

    let mut pooled = vec![0.0; params.d_enc];
    for &tid in &token_ids {
        axpy(&mut pooled, &params.token_table[tid], 1.0);
    }
    let inv_n = 1.0 / token_ids.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv_n);

    let mut h1_pre = params.ffn_w1.matvec(&pooled);
    axpy(&mut h1_pre, &params.ffn_b1, 1.0);
    let h1: Vec<f64> = h1_pre.iter().map(|&x| params.activation.apply(x)).collect();
    let mut e_q = params.ffn_w2.matvec(&h1);
    axpy(&mut e_q, &params.ffn_b2, 1.0);

    let u_pre = params.w_proj.matvec(&e_q);
    let u: Vec<f64> = u_pre.iter().map(|&x| params.activation.apply(x)).collect();

    let q_r = CVec::from_real(params.w_qr.matvec(&u));
    let q_t = CVec::from_real(params.w_qt.matvec(&u));

    (
        QuestionEncoding {
            e_q: e_q.clone(),
            q_r,
            q_t,
        },
        EncodeCache {
            token_ids,
            pooled,
            h1_pre,
            h1,
            e_q,
            u_pre,
            u,
        },
    )
}

/// Gradient accumulator matching [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub token_table: Vec<Vec<f64>>,
    pub ffn_w1: Mat,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Mat,
    pub ffn_b2: Vec<f64>,
    pub w_proj: Mat,
    pub w_qr: Mat,
    pub w_qt: Mat,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        EncoderGrads {
            token_table: vec![vec![0.0; params.d_enc]; params.vocab.len()],
            ffn_w1: Mat::zeros(params.d_enc, params.d_enc),
            ffn_b1: vec![0.0; params.d_enc],
            ffn_w2: Mat::zeros(params.d_enc, params.d_enc),
            ffn_b2: vec![0.0; params.d_enc],
            w_proj: Mat::zeros(2 * params.d, params.d_enc),
            w_qr: Mat::zeros(2 * params.d, 2 * params.d),
            w_qt: Mat::zeros(2 * params.d, 2 * params.d),
        }
    }

    pub fn clear(&mut self) {
        self.token_table.iter_mut().for_each(|r| r.fill(0.0));
        self.ffn_w1.fill(0.0);
        self.ffn_b1.fill(0.0);
        self.ffn_w2.fill(0.0);
        self.ffn_b2.fill(0.0);
        self.w_proj.fill(0.0);
        self.w_qr.fill(0.0);
        self.w_qt.fill(0.0);
    }
}

/// Backpropagate gradients on `q_r`/`q_t` (concatenated-real form) into the
/// encoder parameters.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    g_qr: &[f64],
    g_qt: &[f64],
    grads: &mut EncoderGrads,
) {
    grads.w_qr.add_outer(g_qr, &cache.u, 1.0);
    grads.w_qt.add_outer(g_qt, &cache.u, 1.0);
    let mut g_u = params.w_qr.matvec_t(g_qr);
    axpy(&mut g_u, &params.w_qt.matvec_t(g_qt), 1.0);

    let g_u_pre: Vec<f64> = g_u
        .iter()
        .zip(cache.u_pre.iter().zip(cache.u.iter()))
        .map(|(g, (&pre, &post))| g * params.activation.derivative(pre, post))
        .collect();
    grads.w_proj.add_outer(&g_u_pre, &cache.e_q, 1.0);
    let g_e_q = params.w_proj.matvec_t(&g_u_pre);

    grads.ffn_w2.add_outer(&g_e_q, &cache.h1, 1.0);
    axpy(&mut grads.ffn_b2, &g_e_q, 1.0);
    let g_h1 = params.ffn_w2.matvec_t(&g_e_q);
    let g_h1_pre: Vec<f64> = g_h1
        .iter()
        .zip(cache.h1_pre.iter().zip(cache.h1.iter()))
        .map(|(g, (&pre, &post))| g * params.activation.derivative(pre, post))
        .collect();
    grads.ffn_w1.add_outer(&g_h1_pre, &cache.pooled, 1.0);
    axpy(&mut grads.ffn_b1, &g_h1_pre, 1.0);
    let g_pooled = params.ffn_w1.matvec_t(&g_h1_pre);

    let inv_n = 1.0 / cache.token_ids.len() as f64;
    for &tid in &cache.token_ids {
        axpy(&mut grads.token_table[tid], &g_pooled, inv_n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kg_with_years() -> TemporalKG {
        TemporalKG::parse_tsv(
            "Obama\tposition held\tPresident of USA\t2009\t2017\n\
             Clinton\tposition held\tPresident of USA\t1993\t2001\n",
        )
        .unwrap()
    }

    #[test]
    fn decompose_paper_style_question() {
        let kg = kg_with_years();
        let lex = EntityLexicon::from_kg(&kg);
        let rec = decompose(
            "When did Obama hold the position of President of USA?",
            &kg,
            &lex,
        )
        .unwrap();
        assert_eq!(
            rec.template_tokens.join(" "),
            "When did [subject] hold the position of [object] ?"
        );
        assert_eq!(rec.entity_ids.len(), 2);
        assert_eq!(rec.entity_ids[0], kg.entity_id("Obama").unwrap());
        assert_eq!(rec.entity_ids[1], kg.entity_id("President of USA").unwrap());
        assert_eq!(rec.category, QuestionCategory::SimpleTime);
        assert_eq!(rec.answer_type, AnswerType::Time);
        assert_eq!(rec.temporal_word, None);
    }

    #[test]
    fn decompose_captures_inline_timestamp() {
        let kg = kg_with_years();
        let lex = EntityLexicon::from_kg(&kg);
        let rec = decompose("Who held President of USA in 1994 ?", &kg, &lex).unwrap();
        assert_eq!(rec.inline_timestamp, Some(1994));
        assert!(rec.template_tokens.contains(&TIME_TOKEN.to_string()));
        assert_eq!(rec.category, QuestionCategory::SimpleEntity);
    }

    #[test]
    fn out_of_vocabulary_year_is_not_captured() {
        let kg = kg_with_years();
        let lex = EntityLexicon::from_kg(&kg);
        let rec = decompose("Who held President of USA in 1890 ?", &kg, &lex).unwrap();
        assert_eq!(rec.inline_timestamp, None);
        assert!(rec.template_tokens.contains(&"1890".to_string()));
    }

    #[test]
    fn decompose_requires_a_grounded_entity() {
        let kg = kg_with_years();
        let lex = EntityLexicon::from_kg(&kg);
        assert!(matches!(
            decompose("Who was president in 1890 ?", &kg, &lex),
            Err(QuestionError::NoGroundedEntities)
        ));
    }

    #[test]
    fn third_entity_gets_object_marker() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t1\t1\nC\tp\tB\t1\t1\n").unwrap();
        let lex = EntityLexicon::from_kg(&kg);
        let rec = decompose("Did A meet B before C ?", &kg, &lex).unwrap();
        assert_eq!(
            rec.template_tokens.join(" "),
            "Did [subject] meet [object] before [object] ?"
        );
        assert_eq!(rec.entity_ids.len(), 3);
        assert_eq!(rec.category, QuestionCategory::BeforeAfter);
        assert_eq!(rec.temporal_word.as_deref(), Some("before"));
    }

    #[test]
    fn longest_match_wins_over_prefix() {
        let kg = TemporalKG::parse_tsv(
            "President\tp\tB\t1\t1\nPresident of USA\tp\tB\t1\t1\n",
        )
        .unwrap();
        let lex = EntityLexicon::from_kg(&kg);
        let rec = decompose("Who advised President of USA ?", &kg, &lex).unwrap();
        assert_eq!(rec.entity_ids, vec![kg.entity_id("President of USA").unwrap()]);
    }

    fn params_for(vocab: &[&str], seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(
            vocab.iter().map(|s| s.to_string()).collect(),
            8,
            4,
            Activation::Relu,
            &mut rng,
        )
    }

    fn record_with_template(tokens: &[&str], entity_ids: Vec<EntityId>) -> QuestionRecord {
        QuestionRecord {
            raw_text: tokens.join(" "),
            template_tokens: tokens.iter().map(|s| s.to_string()).collect(),
            entity_ids,
            inline_timestamp: None,
            category: QuestionCategory::SimpleEntity,
            temporal_word: None,
            answers: vec![0],
            answer_type: AnswerType::Entity,
        }
    }

    #[test]
    fn zero_parameters_give_zero_projections() {
        let mut params = params_for(&["who", "held", SUBJECT_TOKEN, "?"], 1);
        params.token_table.iter_mut().for_each(|r| r.fill(0.0));
        params.ffn_w1.fill(0.0);
        params.ffn_b1.fill(0.0);
        params.ffn_w2.fill(0.0);
        params.ffn_b2.fill(0.0);
        params.w_proj.fill(0.0);
        params.w_qr.fill(0.0);
        params.w_qt.fill(0.0);
        let rec = record_with_template(&["who", "held", SUBJECT_TOKEN, "?"], vec![0]);
        let enc = encode(&rec, &params);
        assert!(enc.q_r.as_real().iter().all(|&v| v == 0.0));
        assert!(enc.q_t.as_real().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_entity_independent() {
        let params = params_for(&["who", "held", SUBJECT_TOKEN, OBJECT_TOKEN, "?"], 2);
        let a = record_with_template(&["who", "held", SUBJECT_TOKEN, OBJECT_TOKEN, "?"], vec![0, 1]);
        let b = record_with_template(&["who", "held", SUBJECT_TOKEN, OBJECT_TOKEN, "?"], vec![5, 3]);
        assert_eq!(encode(&a, &params), encode(&b, &params));
    }

    #[test]
    fn unknown_tokens_fall_back_to_unk() {
        let params = params_for(&["who", "?"], 3);
        let a = record_with_template(&["who", "zzz", "?"], vec![0]);
        let b = record_with_template(&["who", "yyy", "?"], vec![0]);
        assert_eq!(encode(&a, &params), encode(&b, &params));
    }

    #[test]
    fn encode_matches_independent_matrix_arithmetic() {
        let params = params_for(&["a", "b", "c"], 7);
        let rec = record_with_template(&["a", "c"], vec![0]);
        let enc = encode(&rec, &params);

        // Recompute with scalar loops, no shared helpers.
        let n = 2.0;
        let d_enc = params.d_enc;
        let mut pooled = vec![0.0; d_enc];
        for tid in [params.token_id("a"), params.token_id("c")] {
            for k in 0..d_enc {
                pooled[k] += params.token_table[tid][k] / n;
            }
        }
        let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
        let mut h1 = vec![0.0; d_enc];
        for r in 0..d_enc {
            let mut acc = params.ffn_b1[r];
            for c in 0..d_enc {
                acc += params.ffn_w1.get(r, c) * pooled[c];
            }
            h1[r] = relu(acc);
        }
        let mut e_q = vec![0.0; d_enc];
        for r in 0..d_enc {
            let mut acc = params.ffn_b2[r];
            for c in 0..d_enc {
                acc += params.ffn_w2.get(r, c) * h1[c];
            }
            e_q[r] = acc;
        }
        let two_d = 2 * params.d;
        let mut u = vec![0.0; two_d];
        for r in 0..two_d {
            let mut acc = 0.0;
            for c in 0..d_enc {
                acc += params.w_proj.get(r, c) * e_q[c];
            }
            u[r] = relu(acc);
        }
        for r in 0..two_d {
            let mut qr = 0.0;
            let mut qt = 0.0;
            for c in 0..two_d {
                qr += params.w_qr.get(r, c) * u[c];
                qt += params.w_qt.get(r, c) * u[c];
            }
            assert!((enc.q_r.as_real()[r] - qr).abs() < 1e-10);
            assert!((enc.q_t.as_real()[r] - qt).abs() < 1e-10);
        }
        for k in 0..d_enc {
            assert!((enc.e_q[k] - e_q[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn complex_reassembly_round_trips() {
        let params = params_for(&["x"], 9);
        let rec = record_with_template(&["x"], vec![0]);
        let enc = encode(&rec, &params);
        let d = params.d;
        let real = enc.q_r.as_real().to_vec();
        let rebuilt = CVec::from_real(real.clone());
        assert_eq!(rebuilt.re(), &real[..d]);
        assert_eq!(rebuilt.im(), &real[d..]);
        assert_eq!(rebuilt, enc.q_r);
    }

    #[test]
    fn record_json_round_trip() {
        let rec = QuestionRecord {
            raw_text: "Who held office_1 in 1973 ?".into(),
            template_tokens: tokenize("Who held [subject] in [time] ?"),
            entity_ids: vec![3],
            inline_timestamp: Some(1973),
            category: QuestionCategory::SimpleEntity,
            temporal_word: None,
            answers: vec![7, 9],
            answer_type: AnswerType::Entity,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"template\":\"Who held [subject] in [time] ?\""));
        let back: QuestionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for activation in [Activation::Relu, Activation::Tanh] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut params = EncoderParams::init(
                vec!["a".into(), "b".into(), "c".into()],
                6,
                3,
                activation,
                &mut rng,
            );
            let rec = record_with_template(&["a", "b", "c", "b"], vec![0]);
            let g_qr: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * i as f64).collect();
            let g_qt: Vec<f64> = (0..6).map(|i| -0.2 + 0.05 * i as f64).collect();
            // Scalar objective: fixed linear functional of the projections.
            let objective = |p: &EncoderParams| {
                let enc = encode(&rec, p);
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += g_qr[k] * enc.q_r.as_real()[k] + g_qt[k] * enc.q_t.as_real()[k];
                }
                acc
            };
            let (_, cache) = encode_cached(&rec, &params);
            let mut grads = EncoderGrads::zeros(&params);
            encode_backward(&params, &cache, &g_qr, &g_qt, &mut grads);

            let h = 1e-5;
            let mut check = |analytic: f64, bump: &mut dyn FnMut(&mut EncoderParams, f64)| {
                bump(&mut params, h);
                let up = objective(&params);
                bump(&mut params, -2.0 * h);
                let down = objective(&params);
                bump(&mut params, h);
                let fd = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "{activation:?}: analytic={analytic} fd={fd}"
                );
            };

            for row in 0..3 {
                for col in 0..6 {
                    let a = grads.token_table[row][col];
                    check(a, &mut |p, d| p.token_table[row][col] += d);
                }
            }
            for r in 0..6 {
                for c in 0..6 {
                    let a = grads.ffn_w1.get(r, c);
                    check(a, &mut |p, d| {
                        let v = p.ffn_w1.get(r, c) + d;
                        p.ffn_w1.set(r, c, v);
                    });
                    let a2 = grads.w_qr.get(r, c);
                    check(a2, &mut |p, d| {
                        let v = p.w_qr.get(r, c) + d;
                        p.w_qr.set(r, c, v);
                    });
                }
                let ab = grads.ffn_b1[r];
                check(ab, &mut |p, d| p.ffn_b1[r] += d);
            }
        }
    }
}
