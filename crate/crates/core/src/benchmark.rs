//! Synthetic benchmark: KG generation, oracle-answered questions, Hits@k
//! evaluation, and the ablation harness.
//!
//! The generated graph has a role backbone — "office" entities whose `held`
//! facts partition the timeline into non-overlapping successive holders —
//! plus noise quads over the remaining relations. The backbone makes
//! first/last and before/after questions unambiguous by construction. Gold
//! answers come from a brute-force oracle that scans the expanded role
//! facts with each category's temporal predicate; questions whose oracle
//! answer set is empty are discarded at generation.
//!
//! Evaluation reports Hits@1/Hits@10 overall, by question group
//! (simple/complex), by answer type, and per category, along with candidate
//! coverage statistics. The ablation harness retrains the QA stage under
//! cumulative feature removals and emits one report row per variant.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::embed::{self, KGTrainConfig, TimeInit};
use crate::kg::{EntityId, TemporalKG, Timestamp};
use crate::neighbor::CandidateSet;
use crate::pipeline::{self, AblationToggles, TrainedModel};
use crate::qa::rank_answers;
use crate::question::{AnswerType, QuestionCategory, QuestionRecord, tokenize};

/// Relation label of the role backbone.
pub const ROLE_RELATION: &str = "held";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error("KG has no `{ROLE_RELATION}` relation; not a benchmark graph")]
    NoRoleRelation,
    #[error("question cannot be interpreted: {0}")]
    BadQuestion(String),
    #[error(transparent)]
    Kg(#[from] crate::kg::KgError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_timestamps: usize,
    pub num_quads: usize,
    pub questions_per_category: usize,
    pub seed: u64,
    /// First year of the timeline; timestamps are 4-digit years.
    pub start_year: Timestamp,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            num_entities: 500,
            num_relations: 10,
            num_timestamps: 50,
            num_quads: 3000,
            questions_per_category: 400,
            seed: 42,
            start_year: 1950,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.num_entities == 0
            || self.num_relations == 0
            || self.num_timestamps == 0
            || self.num_quads == 0
            || self.questions_per_category == 0
        {
            return Err(BenchError::Infeasible("all counts must be positive".into()));
        }
        if self.num_timestamps < 10 {
            return Err(BenchError::Infeasible(
                "at least 10 timestamps are needed for well-posed order questions".into(),
            ));
        }
        if self.start_year < 1000 || self.start_year + self.num_timestamps as Timestamp - 1 > 9999
        {
            return Err(BenchError::Infeasible(
                "timeline must stay within 4-digit years".into(),
            ));
        }
        Ok(())
    }

    fn num_offices(&self) -> usize {
        (self.num_entities / 5).max(1)
    }
}

/// Generate the synthetic temporal KG. Deterministic under the spec seed.
pub fn generate_kg(spec: &BenchSpec) -> Result<TemporalKG, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let offices = spec.num_offices();
    let persons = spec.num_entities - offices;
    if persons < 2 {
        return Err(BenchError::Infeasible(
            "need at least two person entities".into(),
        ));
    }
    let quota = spec.num_quads / offices;
    let holder_cap = persons.min(spec.num_timestamps).min(quota.max(1));
    if holder_cap < 2 {
        return Err(BenchError::Infeasible(format!(
            "cannot place at least 2 holders per office \
             (persons={persons}, timestamps={}, quad quota per office={quota})",
            spec.num_timestamps
        )));
    }

    let person_label = |i: usize| format!("person_{i}");
    let office_label = |i: usize| format!("office_{i}");
    let year = |slot: usize| spec.start_year + slot as Timestamp;

    let mut quads: Vec<(String, String, String, Timestamp, Timestamp)> = Vec::new();

    for office in 0..offices {
        // Holder count: deterministic at the cap when the budget is tight,
        // otherwise a small random spread.
        let k = if holder_cap <= 8 {
            holder_cap
        } else {
            rng.random_range(4..=8usize)
        };
        // Partition the timeline into k non-empty contiguous segments.
        let mut cuts: Vec<usize> = (1..spec.num_timestamps).collect();
        cuts.shuffle(&mut rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(spec.num_timestamps);
        // Distinct holders within an office.
        let mut pool: Vec<usize> = (0..persons).collect();
        pool.shuffle(&mut rng);
        for (seg, window) in cuts.windows(2).enumerate() {
            let (start, end) = (window[0], window[1] - 1);
            quads.push((
                person_label(pool[seg]),
                ROLE_RELATION.to_string(),
                office_label(office),
                year(start),
                year(end),
            ));
        }
    }

    let role_quads = quads.len();
    let noise = spec.num_quads.saturating_sub(role_quads);
    if noise > 0 && spec.num_relations < 2 {
        return Err(BenchError::Infeasible(
            "noise quads need a second relation; increase num_relations or lower num_quads".into(),
        ));
    }
    for _ in 0..noise {
        let rel = rng.random_range(1..spec.num_relations);
        let a = rng.random_range(0..spec.num_entities);
        let b = loop {
            let b = rng.random_range(0..spec.num_entities);
            if b != a {
                break b;
            }
        };
        let label = |e: usize| {
            if e < persons {
                person_label(e)
            } else {
                office_label(e - persons)
            }
        };
        let start = rng.random_range(0..spec.num_timestamps);
        let span = rng.random_range(0..=6usize).min(spec.num_timestamps - 1 - start);
        quads.push((
            label(a),
            format!("rel_{rel}"),
            label(b),
            year(start),
            year(start + span),
        ));
    }

    Ok(TemporalKG::from_labeled_quads(&quads)?)
}

/// Role backbone derived from a benchmark KG: offices, their holders in
/// t_start order, and each person's tenures.
pub(crate) struct RoleIndex {
    /// office → [(t_start, t_end, person)] ascending by t_start.
    pub holders: BTreeMap<EntityId, Vec<(Timestamp, Timestamp, EntityId)>>,
    /// person → [(office, t_start, t_end)].
    pub tenures: BTreeMap<EntityId, Vec<(EntityId, Timestamp, Timestamp)>>,
}

impl RoleIndex {
    pub fn build(kg: &TemporalKG) -> Result<Self, BenchError> {
        let role = kg.relation_id(ROLE_RELATION).ok_or(BenchError::NoRoleRelation)?;
        let mut holders: BTreeMap<EntityId, Vec<(Timestamp, Timestamp, EntityId)>> =
            BTreeMap::new();
        let mut tenures: BTreeMap<EntityId, Vec<(EntityId, Timestamp, Timestamp)>> =
            BTreeMap::new();
        for q in kg.quads() {
            if q.relation != role {
                continue;
            }
            holders
                .entry(q.object)
                .or_default()
                .push((q.t_start, q.t_end, q.subject));
            tenures
                .entry(q.subject)
                .or_default()
                .push((q.object, q.t_start, q.t_end));
        }
        for list in holders.values_mut() {
            list.sort_unstable();
        }
        for list in tenures.values_mut() {
            list.sort_unstable();
        }
        Ok(RoleIndex { holders, tenures })
    }

    fn is_office(&self, e: EntityId) -> bool {
        self.holders.contains_key(&e)
    }

    /// The reference tenure of a person for an office (earliest when
    /// several exist).
    fn tenure_of(&self, person: EntityId, office: EntityId) -> Option<(Timestamp, Timestamp)> {
        self.tenures.get(&person)?.iter().find_map(|&(o, a, b)| {
            (o == office).then_some((a, b))
        })
    }
}

/// Brute-force gold answers for a generated question: an exhaustive scan of
/// the role facts under the category's temporal predicate. Returns a sorted
/// set (entity ids or timestamp values per the record's answer type).
pub fn oracle_answer(kg: &TemporalKG, question: &QuestionRecord) -> Result<Vec<i64>, BenchError> {
    let idx = RoleIndex::build(kg)?;
    oracle_answer_indexed(&idx, question)
}

pub(crate) fn oracle_answer_indexed(
    idx: &RoleIndex,
    q: &QuestionRecord,
) -> Result<Vec<i64>, BenchError> {
    let mut out: BTreeSet<i64> = BTreeSet::new();
    match q.category {
        QuestionCategory::SimpleEntity => {
            let &e = q
                .entity_ids
                .first()
                .ok_or_else(|| BenchError::BadQuestion("no entities".into()))?;
            let y = q
                .inline_timestamp
                .ok_or_else(|| BenchError::BadQuestion("simple entity question without a year".into()))?;
            if idx.is_office(e) {
                for &(a, b, person) in &idx.holders[&e] {
                    if a <= y && y <= b {
                        out.insert(person as i64);
                    }
                }
            } else {
                for &(office, a, b) in idx.tenures.get(&e).map(Vec::as_slice).unwrap_or(&[]) {
                    if a <= y && y <= b {
                        out.insert(office as i64);
                    }
                }
            }
        }
        QuestionCategory::SimpleTime => {
            let (person, office) = person_office_pair(idx, &q.entity_ids)?;
            if let Some((a, b)) = idx.tenure_of(person, office) {
                for t in a..=b {
                    out.insert(t);
                }
            }
        }
        QuestionCategory::BeforeAfter => {
            let word = q
                .temporal_word
                .as_deref()
                .ok_or_else(|| BenchError::BadQuestion("before/after without temporal word".into()))?;
            let (person, office) = match q.entity_ids.len() {
                2 => person_office_pair(idx, &q.entity_ids)?,
                1 => {
                    let person = q.entity_ids[0];
                    let tenures = idx
                        .tenures
                        .get(&person)
                        .ok_or_else(|| BenchError::BadQuestion("subject holds no office".into()))?;
                    if tenures.len() != 1 {
                        return Err(BenchError::BadQuestion(
                            "single-entity before/after needs a unique tenure".into(),
                        ));
                    }
                    (person, tenures[0].0)
                }
                n => {
                    return Err(BenchError::BadQuestion(format!(
                        "before/after with {n} entities"
                    )))
                }
            };
            let (ref_start, ref_end) = idx
                .tenure_of(person, office)
                .ok_or_else(|| BenchError::BadQuestion("subject never held the office".into()))?;
            for &(a, b, holder) in &idx.holders[&office] {
                let hit = match word {
                    "before" => b < ref_start,
                    "after" => a > ref_end,
                    other => {
                        return Err(BenchError::BadQuestion(format!(
                            "unexpected temporal word {other:?}"
                        )))
                    }
                };
                if hit {
                    out.insert(holder as i64);
                }
            }
        }
        QuestionCategory::FirstLast => {
            let &office = q
                .entity_ids
                .first()
                .ok_or_else(|| BenchError::BadQuestion("no entities".into()))?;
            let holders = idx
                .holders
                .get(&office)
                .ok_or_else(|| BenchError::BadQuestion("entity is not an office".into()))?;
            let word = q
                .temporal_word
                .as_deref()
                .ok_or_else(|| BenchError::BadQuestion("first/last without temporal word".into()))?;
            let target = match word {
                "first" => holders.iter().map(|&(a, _, _)| a).min(),
                "last" => holders.iter().map(|&(a, _, _)| a).max(),
                other => {
                    return Err(BenchError::BadQuestion(format!(
                        "unexpected temporal word {other:?}"
                    )))
                }
            };
            if let Some(t0) = target {
                for &(a, _, holder) in holders {
                    if a == t0 {
                        out.insert(holder as i64);
                    }
                }
            }
        }
        QuestionCategory::TimeJoin => {
            if q.entity_ids.len() != 3 {
                return Err(BenchError::BadQuestion(
                    "time-join questions ground three entities".into(),
                ));
            }
            let (o1, person, o2) = (q.entity_ids[0], q.entity_ids[1], q.entity_ids[2]);
            if !idx.is_office(o1) || !idx.is_office(o2) || idx.is_office(person) {
                return Err(BenchError::BadQuestion(
                    "time-join expects (office, person, office)".into(),
                ));
            }
            let (ref_start, ref_end) = idx
                .tenure_of(person, o2)
                .ok_or_else(|| BenchError::BadQuestion("subject never held the office".into()))?;
            for &(a, b, holder) in &idx.holders[&o1] {
                // Closed intervals intersect.
                if a <= ref_end && ref_start <= b {
                    out.insert(holder as i64);
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}

fn person_office_pair(
    idx: &RoleIndex,
    entities: &[EntityId],
) -> Result<(EntityId, EntityId), BenchError> {
    if entities.len() != 2 {
        return Err(BenchError::BadQuestion(format!(
            "expected two entities, found {}",
            entities.len()
        )));
    }
    let (a, b) = (entities[0], entities[1]);
    match (idx.is_office(a), idx.is_office(b)) {
        (true, false) => Ok((b, a)),
        (false, true) => Ok((a, b)),
        _ => Err(BenchError::BadQuestion(
            "expected one office and one person".into(),
        )),
    }
}

/// The generated question splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedQuestions {
    pub train: Vec<QuestionRecord>,
    pub dev: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
    /// Per-category shortfall warnings.
    pub warnings: Vec<String>,
}

impl GeneratedQuestions {
    pub fn all(&self) -> impl Iterator<Item = &QuestionRecord> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// One question builder: template tokens plus grounded entity order.
struct Draft {
    template: &'static str,
    entities: Vec<EntityId>,
    inline: Option<Timestamp>,
    category: QuestionCategory,
    temporal_word: Option<&'static str>,
    answer_type: AnswerType,
}

impl Draft {
    fn build(self, kg: &TemporalKG, idx: &RoleIndex) -> Result<Option<QuestionRecord>, BenchError> {
        let template_tokens = tokenize(self.template);
        let mut raw = Vec::with_capacity(template_tokens.len());
        let mut next_entity = 0usize;
        for tok in &template_tokens {
            match tok.as_str() {
                "[subject]" | "[object]" => {
                    raw.push(kg.entity_label(self.entities[next_entity]).to_string());
                    next_entity += 1;
                }
                "[time]" => raw.push(self.inline.expect("[time] slot without inline year").to_string()),
                other => raw.push(other.to_string()),
            }
        }
        let mut record = QuestionRecord {
            raw_text: raw.join(" "),
            template_tokens,
            entity_ids: self.entities,
            inline_timestamp: self.inline,
            category: self.category,
            temporal_word: self.temporal_word.map(str::to_string),
            answers: Vec::new(),
            answer_type: self.answer_type,
        };
        let answers = oracle_answer_indexed(idx, &record)?;
        if answers.is_empty() {
            return Ok(None);
        }
        record.answers = answers;
        Ok(Some(record))
    }
}

/// Generate questions for every category with oracle-computed gold answers,
/// then split 80/10/10 per category. Categories that cannot reach the
/// requested count on this KG are reported short via `warnings`.
pub fn generate_questions(
    kg: &TemporalKG,
    spec: &BenchSpec,
) -> Result<GeneratedQuestions, BenchError> {
    spec.validate()?;
    let idx = RoleIndex::build(kg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5134_7c01_9e37_79b9);

    let mut per_category: Vec<(QuestionCategory, Vec<QuestionRecord>)> = Vec::new();
    let mut warnings = Vec::new();

    for category in QuestionCategory::ALL {
        let mut drafts = draft_pool(kg, &idx, category);
        drafts.shuffle(&mut rng);
        let mut picked = Vec::new();
        let mut seen_raw = HashSet::new();
        for draft in drafts {
            if picked.len() >= spec.questions_per_category {
                break;
            }
            if let Some(record) = draft.build(kg, &idx)? {
                if seen_raw.insert(record.raw_text.clone()) {
                    picked.push(record);
                }
            }
        }
        if picked.len() < spec.questions_per_category {
            warnings.push(format!(
                "category {}: generated {} of {} requested questions",
                category.name(),
                picked.len(),
                spec.questions_per_category
            ));
        }
        per_category.push((category, picked));
    }

    let mut out = GeneratedQuestions {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        warnings,
    };
    for (_, questions) in per_category {
        let n = questions.len();
        let n_train = n * 8 / 10;
        let n_dev = n / 10;
        for (i, q) in questions.into_iter().enumerate() {
            if i < n_train {
                out.train.push(q);
            } else if i < n_train + n_dev {
                out.dev.push(q);
            } else {
                out.test.push(q);
            }
        }
    }
    Ok(out)
}

/// Enumerate every candidate question of a category (pre-shuffle order is
/// deterministic).
fn draft_pool(kg: &TemporalKG, idx: &RoleIndex, category: QuestionCategory) -> Vec<Draft> {
    let mut pool = Vec::new();
    match category {
        QuestionCategory::SimpleEntity => {
            for (&office, holders) in &idx.holders {
                for &(a, b, _) in holders {
                    for y in a..=b {
                        pool.push(Draft {
                            template: "Who held [subject] in [time] ?",
                            entities: vec![office],
                            inline: Some(y),
                            category,
                            temporal_word: None,
                            answer_type: AnswerType::Entity,
                        });
                    }
                }
            }
            for (&person, tenures) in &idx.tenures {
                for &(_, a, b) in tenures {
                    for y in a..=b {
                        pool.push(Draft {
                            template: "Which office did [subject] hold in [time] ?",
                            entities: vec![person],
                            inline: Some(y),
                            category,
                            temporal_word: None,
                            answer_type: AnswerType::Entity,
                        });
                    }
                }
            }
        }
        QuestionCategory::SimpleTime => {
            for (&person, tenures) in &idx.tenures {
                for &(office, _, _) in tenures {
                    for template in [
                        "When did [subject] hold [object] ?",
                        "When was [subject] the holder of [object] ?",
                    ] {
                        pool.push(Draft {
                            template,
                            entities: vec![person, office],
                            inline: None,
                            category,
                            temporal_word: None,
                            answer_type: AnswerType::Time,
                        });
                    }
                }
            }
        }
        QuestionCategory::BeforeAfter => {
            for (&office, holders) in &idx.holders {
                for &(_, _, person) in holders {
                    for (template, word) in [
                        ("Who held [subject] before [object] ?", "before"),
                        ("Who held [subject] after [object] ?", "after"),
                    ] {
                        pool.push(Draft {
                            template,
                            entities: vec![office, person],
                            inline: None,
                            category,
                            temporal_word: Some(word),
                            answer_type: AnswerType::Entity,
                        });
                    }
                }
            }
            // One-entity variants for persons with a unique tenure: the
            // office is implicit, so the answer sits two hops away.
            for (&person, tenures) in &idx.tenures {
                if tenures.len() != 1 {
                    continue;
                }
                for (template, word) in [
                    ("Who held the same office before [subject] ?", "before"),
                    ("Who held the same office after [subject] ?", "after"),
                ] {
                    pool.push(Draft {
                        template,
                        entities: vec![person],
                        inline: None,
                        category,
                        temporal_word: Some(word),
                        answer_type: AnswerType::Entity,
                    });
                }
            }
        }
        QuestionCategory::FirstLast => {
            for &office in idx.holders.keys() {
                for (template, word) in [
                    ("Who held [subject] first ?", "first"),
                    ("Who held [subject] last ?", "last"),
                    ("Who was the first holder of [subject] ?", "first"),
                    ("Who was the last holder of [subject] ?", "last"),
                ] {
                    pool.push(Draft {
                        template,
                        entities: vec![office],
                        inline: None,
                        category,
                        temporal_word: Some(word),
                        answer_type: AnswerType::Entity,
                    });
                }
            }
        }
        QuestionCategory::TimeJoin => {
            let offices: Vec<EntityId> = idx.holders.keys().copied().collect();
            for &o2 in &offices {
                for &(_, _, person) in &idx.holders[&o2] {
                    for &o1 in &offices {
                        if o1 == o2 {
                            continue;
                        }
                        for (template, word) in [
                            (
                                "Who held [subject] during the time [object] held [object] ?",
                                "during",
                            ),
                            ("Who held [subject] when [object] held [object] ?", "when"),
                        ] {
                            pool.push(Draft {
                                template,
                                entities: vec![o1, person, o2],
                                inline: None,
                                category,
                                temporal_word: Some(word),
                                answer_type: AnswerType::Entity,
                            });
                        }
                    }
                }
            }
        }
    }
    let _ = kg;
    pool
}

/// Hits@1/Hits@10 over a set of questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricCell {
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
}

#[derive(Default)]
struct CellAcc {
    hit1: usize,
    hit10: usize,
    count: usize,
}

impl CellAcc {
    fn push(&mut self, hit1: bool, hit10: bool) {
        self.count += 1;
        self.hit1 += hit1 as usize;
        self.hit10 += hit10 as usize;
    }

    fn cell(&self) -> MetricCell {
        let n = self.count.max(1) as f64;
        MetricCell {
            hits1: self.hit1 as f64 / n,
            hits10: self.hit10 as f64 / n,
            count: self.count,
        }
    }
}

/// Evaluation report broken out along the question-type and answer-type
/// axes, with per-category cells and candidate coverage statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricCell,
    pub complex: MetricCell,
    pub simple: MetricCell,
    pub entity_answer: MetricCell,
    pub time_answer: MetricCell,
    /// Cells for the five categories in canonical order.
    pub by_category: Vec<(String, MetricCell)>,
    pub mean_coverage: f64,
    pub num_questions: usize,
    /// Questions that could not be scored (e.g. a time question whose
    /// candidate set has no timestamps); they count as misses.
    pub num_unanswerable: usize,
}

impl EvalReport {
    /// Verify the structural invariants of a report.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut cells: Vec<(&str, &MetricCell)> = vec![
            ("overall", &self.overall),
            ("complex", &self.complex),
            ("simple", &self.simple),
            ("entity", &self.entity_answer),
            ("time", &self.time_answer),
        ];
        for (name, cell) in &self.by_category {
            cells.push((name, cell));
        }
        for (name, cell) in cells {
            for v in [cell.hits1, cell.hits10] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name}: hits value {v} outside [0,1]"));
                }
            }
            if cell.hits1 > cell.hits10 + 1e-12 {
                return Err(format!(
                    "{name}: Hits@1 {} exceeds Hits@10 {}",
                    cell.hits1, cell.hits10
                ));
            }
        }
        let subtype_total: usize = self.by_category.iter().map(|(_, c)| c.count).sum();
        if subtype_total != self.overall.count {
            return Err(format!(
                "subtype counts {subtype_total} do not sum to total {}",
                self.overall.count
            ));
        }
        Ok(())
    }
}

/// Evaluate a trained model on a question list. Candidate sets follow the
/// model's pruning setting and cached test-time hop count.
pub fn evaluate(
    model: &TrainedModel,
    kg: &TemporalKG,
    questions: &[QuestionRecord],
) -> Result<EvalReport, BenchError> {
    let items = pipeline::prepare_candidates(kg, questions, model.m_test, model.toggles.ng)?;
    Ok(evaluate_prepared(model, kg, &items))
}

/// Evaluate over pre-extracted candidate sets (parallel to the question
/// list). Softmax normalization and Hits@1 ≤ Hits@10 are asserted on every
/// scored question.
pub fn evaluate_prepared(
    model: &TrainedModel,
    kg: &TemporalKG,
    items: &[(QuestionRecord, CandidateSet)],
) -> EvalReport {
    let mut overall = CellAcc::default();
    let mut complex = CellAcc::default();
    let mut simple = CellAcc::default();
    let mut entity_answer = CellAcc::default();
    let mut time_answer = CellAcc::default();
    let mut by_cat: BTreeMap<&'static str, CellAcc> = BTreeMap::new();
    let mut coverage_sum = 0.0;
    let mut unanswerable = 0usize;

    for (q, cands) in items {
        coverage_sum += cands.coverage_ratio;
        let (hit1, hit10) = match pipeline::score_record(
            &model.store,
            &model.qa,
            &model.toggles,
            kg,
            q,
            cands,
        ) {
            Ok(sc) => {
                let sum: f64 = sc.probs.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-9,
                    "softmax normalization violated: {sum}"
                );
                let top = rank_answers(&sc, 10);
                let gold: BTreeSet<i64> = q.answers.iter().copied().collect();
                let matches = |idx: usize| -> bool {
                    if idx < cands.entities.len() {
                        q.answer_type == AnswerType::Entity
                            && gold.contains(&(cands.entities[idx] as i64))
                    } else {
                        q.answer_type == AnswerType::Time
                            && gold.contains(&cands.timestamps[idx - cands.entities.len()])
                    }
                };
                let hit1 = top.first().copied().is_some_and(matches);
                let hit10 = top.iter().any(|&i| matches(i));
                assert!(hit10 || !hit1, "Hits@1 implies Hits@10");
                (hit1, hit10)
            }
            Err(_) => {
                unanswerable += 1;
                (false, false)
            }
        };

        overall.push(hit1, hit10);
        if q.category.is_complex() {
            complex.push(hit1, hit10);
        } else {
            simple.push(hit1, hit10);
        }
        match q.answer_type {
            AnswerType::Entity => entity_answer.push(hit1, hit10),
            AnswerType::Time => time_answer.push(hit1, hit10),
        }
        by_cat.entry(q.category.name()).or_default().push(hit1, hit10);
    }

    let by_category = QuestionCategory::ALL
        .iter()
        .map(|c| {
            (
                c.name().to_string(),
                by_cat.get(c.name()).map(CellAcc::cell).unwrap_or_default(),
            )
        })
        .collect();

    let report = EvalReport {
        overall: overall.cell(),
        complex: complex.cell(),
        simple: simple.cell(),
        entity_answer: entity_answer.cell(),
        time_answer: time_answer.cell(),
        by_category,
        mean_coverage: if items.is_empty() {
            0.0
        } else {
            coverage_sum / items.len() as f64
        },
        num_questions: items.len(),
        num_unanswerable: unanswerable,
    };
    report
        .check_invariants()
        .expect("evaluation invariants must hold");
    report
}

/// One ablation variant: its name, report, and the trained model.
pub struct AblationOutcome {
    pub name: String,
    pub report: EvalReport,
    pub model: TrainedModel,
}

/// Run the cumulative-removal ablation: full, -TC, -TC-TKE, -TC-TKE-NG,
/// -TC-TKE-NG-TE. TC = temporal contrast losses, TKE = time-order KG
/// embeddings (removal retrains the encoder stage with random time init and
/// no order loss), NG = neighbor-graph pruning (removal scores the whole
/// entity/timestamp space), TE = time estimation (removal feeds the
/// question time projection directly to entity scoring).
pub fn run_ablation(
    kg: &TemporalKG,
    questions: &GeneratedQuestions,
    cfg: &RunConfig,
) -> Result<Vec<AblationOutcome>, BenchError> {
    let rows = [
        ("full", AblationToggles::full()),
        ("-TC", AblationToggles { tc: false, ..AblationToggles::full() }),
        (
            "-TC-TKE",
            AblationToggles {
                tc: false,
                tke: false,
                ..AblationToggles::full()
            },
        ),
        (
            "-TC-TKE-NG",
            AblationToggles {
                tc: false,
                tke: false,
                ng: false,
                te: true,
            },
        ),
        (
            "-TC-TKE-NG-TE",
            AblationToggles {
                tc: false,
                tke: false,
                ng: false,
                te: false,
            },
        ),
    ];

    // The two KG-encoder variants are shared across rows.
    let emb_full = embed::train_kg_embeddings(kg, &cfg.kg).map_err(pipeline::PipelineError::from)?;
    let plain_cfg = plain_encoder_config(&cfg.kg);
    let emb_plain =
        embed::train_kg_embeddings(kg, &plain_cfg).map_err(pipeline::PipelineError::from)?;

    let mut out = Vec::new();
    for (name, toggles) in rows {
        let emb = if toggles.tke { &emb_full } else { &emb_plain };
        let (model, _log) =
            pipeline::train_qa(kg, emb, &questions.train, &questions.dev, cfg, toggles)?;
        let report = evaluate(&model, kg, &questions.test)?;
        log::info!(
            "ablation {name}: overall Hits@1 {:.3}, complex {:.3}, coverage {:.3}",
            report.overall.hits1,
            report.complex.hits1,
            report.mean_coverage
        );
        out.push(AblationOutcome {
            name: name.to_string(),
            report,
            model,
        });
    }
    Ok(out)
}

/// KG-encoder config with the time-order machinery removed (plain 4-way
/// factorization): no order loss, random time init.
pub fn plain_encoder_config(base: &KGTrainConfig) -> KGTrainConfig {
    KGTrainConfig {
        alpha_to: 0.0,
        time_init: TimeInit::Gaussian,
        ..base.clone()
    }
}

/// Render the Hits table of a single report as aligned text columns.
pub fn render_report_text(title: &str, report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{title}\n"));
    s.push_str(&format!(
        "{:<14}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
        "", "Overall", "Complex", "Simple", "Entity", "Time"
    ));
    for (label, metric) in [("Hits@1", 0usize), ("Hits@10", 1)] {
        let pick = |c: &MetricCell| if metric == 0 { c.hits1 } else { c.hits10 };
        s.push_str(&format!(
            "{:<14}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}\n",
            label,
            pick(&report.overall),
            pick(&report.complex),
            pick(&report.simple),
            pick(&report.entity_answer),
            pick(&report.time_answer),
        ));
    }
    s.push_str(&format!(
        "\n{:<14}{:>13}{:>13}{:>13}{:>13}{:>13}\n",
        "Hits@1", "before_after", "first_last", "time_join", "simple_entity", "simple_time"
    ));
    let get = |name: &str| {
        report
            .by_category
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.hits1)
            .unwrap_or(0.0)
    };
    s.push_str(&format!(
        "{:<14}{:>13.3}{:>13.3}{:>13.3}{:>13.3}{:>13.3}\n",
        "",
        get("before_after"),
        get("first_last"),
        get("time_join"),
        get("simple_entity"),
        get("simple_time"),
    ));
    s.push_str(&format!(
        "\nquestions: {}  unanswerable: {}  mean candidate coverage: {:.4}\n",
        report.num_questions, report.num_unanswerable, report.mean_coverage
    ));
    s
}

/// Render the ablation rows as one aligned table.
pub fn render_ablation_text(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18}{:>9}{:>9}{:>9}{:>9}{:>9}{:>11}\n",
        "Model (Hits@1)", "Overall", "Complex", "Simple", "Entity", "Time", "Coverage"
    ));
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<18}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>11.4}\n",
            name,
            r.overall.hits1,
            r.complex.hits1,
            r.simple.hits1,
            r.entity_answer.hits1,
            r.time_answer.hits1,
            r.mean_coverage
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_spec_plants_five_successive_holders() {
        let spec = BenchSpec {
            num_entities: 6,
            num_relations: 1,
            num_timestamps: 10,
            num_quads: 5,
            questions_per_category: 2,
            seed: 1,
            start_year: 1950,
        };
        let kg = generate_kg(&spec).unwrap();
        kg.validate().unwrap();
        assert_eq!(kg.quads().len(), 5);
        // Non-overlapping successive intervals covering the timeline.
        let mut spans: Vec<(Timestamp, Timestamp)> = kg
            .quads()
            .iter()
            .map(|q| (q.t_start, q.t_end))
            .collect();
        spans.sort_unstable();
        assert_eq!(spans.first().unwrap().0, 1950);
        assert_eq!(spans.last().unwrap().1, 1959);
        for w in spans.windows(2) {
            assert_eq!(w[0].1 + 1, w[1].0, "holders must be successive");
        }
        // Five distinct holders.
        let holders: BTreeSet<EntityId> = kg.quads().iter().map(|q| q.subject).collect();
        assert_eq!(holders.len(), 5);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = BenchSpec::default();
        let a = generate_kg(&spec).unwrap();
        let b = generate_kg(&spec).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn default_spec_generates_a_valid_graph() {
        let spec = BenchSpec::default();
        let kg = generate_kg(&spec).unwrap();
        kg.validate().unwrap();
        assert_eq!(kg.num_entities(), spec.num_entities);
        assert_eq!(kg.num_relations(), spec.num_relations);
        assert_eq!(kg.num_timestamps(), spec.num_timestamps);
        assert_eq!(kg.quads().len(), spec.num_quads);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = BenchSpec::default();
        spec.num_timestamps = 5;
        assert!(matches!(generate_kg(&spec), Err(BenchError::Infeasible(_))));

        let spec = BenchSpec {
            num_entities: 3,
            num_relations: 1,
            num_timestamps: 10,
            num_quads: 1,
            questions_per_category: 1,
            seed: 0,
            start_year: 1950,
        };
        assert!(matches!(generate_kg(&spec), Err(BenchError::Infeasible(_))));
    }

    fn small_bench() -> (BenchSpec, TemporalKG, GeneratedQuestions) {
        let spec = BenchSpec {
            num_entities: 60,
            num_relations: 4,
            num_timestamps: 20,
            num_quads: 220,
            questions_per_category: 30,
            seed: 9,
            start_year: 1950,
        };
        let kg = generate_kg(&spec).unwrap();
        let qs = generate_questions(&kg, &spec).unwrap();
        (spec, kg, qs)
    }

    #[test]
    fn generated_questions_validate_and_have_gold() {
        let (_, kg, qs) = small_bench();
        let mut counted = 0;
        for q in qs.all() {
            q.validate(&kg).unwrap();
            assert!(!q.answers.is_empty());
            counted += 1;
        }
        assert!(counted > 100, "expected a populated benchmark, got {counted}");
    }

    #[test]
    fn oracle_matches_planted_structure_for_first_last() {
        let (_, kg, _) = small_bench();
        let idx = RoleIndex::build(&kg).unwrap();
        for (&office, holders) in &idx.holders {
            let q = QuestionRecord {
                raw_text: String::new(),
                template_tokens: tokenize("Who held [subject] first ?"),
                entity_ids: vec![office],
                inline_timestamp: None,
                category: QuestionCategory::FirstLast,
                temporal_word: Some("first".into()),
                answers: vec![],
                answer_type: AnswerType::Entity,
            };
            let got = oracle_answer(&kg, &q).unwrap();
            let planted = holders.first().unwrap().2;
            assert_eq!(got, vec![planted as i64]);
        }
    }

    #[test]
    fn oracle_before_excludes_boundary_and_empties_discard() {
        let (_, kg, _) = small_bench();
        let idx = RoleIndex::build(&kg).unwrap();
        // The earliest holder of any office has no "before" answers.
        let (&office, holders) = idx.holders.iter().next().unwrap();
        let earliest = holders.first().unwrap().2;
        let q = QuestionRecord {
            raw_text: String::new(),
            template_tokens: tokenize("Who held [subject] before [object] ?"),
            entity_ids: vec![office, earliest],
            inline_timestamp: None,
            category: QuestionCategory::BeforeAfter,
            temporal_word: Some("before".into()),
            answers: vec![],
            answer_type: AnswerType::Entity,
        };
        assert!(oracle_answer(&kg, &q).unwrap().is_empty());
    }

    #[test]
    fn question_generation_is_deterministic() {
        let (spec, kg, qs) = small_bench();
        let qs2 = generate_questions(&kg, &spec).unwrap();
        let ser = |g: &GeneratedQuestions| serde_json::to_string(&g.train).unwrap();
        assert_eq!(ser(&qs), ser(&qs2));
    }

    #[test]
    fn splits_are_stratified_and_disjoint() {
        let (_, _, qs) = small_bench();
        let n_total = qs.train.len() + qs.dev.len() + qs.test.len();
        assert!(qs.train.len() > qs.dev.len());
        assert!(!qs.test.is_empty());
        let mut raws: HashSet<&str> = HashSet::new();
        for q in qs.all() {
            assert!(raws.insert(&q.raw_text), "duplicate question across splits");
        }
        assert_eq!(raws.len(), n_total);
    }
}
