//! Neighbor-graph extraction: the candidate answer spaces.
//!
//! From the entities grounded in a question, breadth-first traversal over
//! quads (a hop traverses one quad, subject↔object, regardless of
//! direction) collects the m-hop subgraph around each entity; their union
//! is the question's search graph. The entities and timestamps occurring in
//! it — interval quads contribute every timestamp inside their closed
//! interval — form the candidate sets for answer scoring. Extraction is
//! read-only over the immutable KG.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, TemporalKG, TimeRank, Timestamp};
use crate::question::{AnswerType, QuestionRecord};

#[derive(Debug, Error)]
pub enum NeighborError {
    #[error("hop count must be at least 1")]
    ZeroHops,
    #[error("no question entities supplied")]
    NoEntities,
    #[error("entity id {0} not in vocabulary")]
    UnknownEntity(EntityId),
}

/// The per-question search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Candidate entities, ascending by id.
    pub entities: Vec<EntityId>,
    /// Candidate timestamps, ascending by value.
    pub timestamps: Vec<Timestamp>,
    /// Ranks of `timestamps` in the KG vocabulary (parallel vector).
    pub time_ranks: Vec<TimeRank>,
    /// Hop count used for extraction (0 for the unpruned full space).
    pub hop_used: usize,
    /// Fraction of KG quads contained in the extracted subgraph.
    pub coverage_ratio: f64,
    /// Question entities that had no incident quads.
    pub isolated: Vec<EntityId>,
}

impl CandidateSet {
    /// Total number of candidates (entities first, then timestamps).
    pub fn len(&self) -> usize {
        self.entities.len() + self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidate index of an entity, if present.
    pub fn entity_index(&self, e: EntityId) -> Option<usize> {
        self.entities.binary_search(&e).ok()
    }

    /// Candidate index of a timestamp, if present (offset past entities).
    pub fn time_index(&self, t: Timestamp) -> Option<usize> {
        self.timestamps
            .binary_search(&t)
            .ok()
            .map(|i| self.entities.len() + i)
    }

    /// The unpruned search space: every entity and timestamp of the KG.
    pub fn full(kg: &TemporalKG) -> CandidateSet {
        CandidateSet {
            entities: (0..kg.num_entities()).collect(),
            timestamps: kg.timestamps().to_vec(),
            time_ranks: (0..kg.num_timestamps()).collect(),
            hop_used: 0,
            coverage_ratio: 1.0,
            isolated: Vec::new(),
        }
    }
}

/// Extract the union of m-hop subgraphs around the given entities and
/// collect the entities/timestamps occurring in it. Question entities are
/// always members of the candidate entities, even when isolated.
pub fn extract(
    kg: &TemporalKG,
    entity_ids: &[EntityId],
    m: usize,
) -> Result<CandidateSet, NeighborError> {
    if m == 0 {
        return Err(NeighborError::ZeroHops);
    }
    if entity_ids.is_empty() {
        return Err(NeighborError::NoEntities);
    }
    let nv = kg.num_entities();
    for &e in entity_ids {
        if e >= nv {
            return Err(NeighborError::UnknownEntity(e));
        }
    }

    let nq = kg.quads().len();
    let mut quad_in = vec![false; nq];
    let mut dist = vec![usize::MAX; nv];
    let mut frontier: Vec<EntityId> = Vec::new();
    let mut isolated = Vec::new();
    for &e in entity_ids {
        if dist[e] == usize::MAX {
            dist[e] = 0;
            frontier.push(e);
            if kg.incident_quads(e).is_empty() {
                isolated.push(e);
            }
        }
    }

    // Quads incident to an entity at distance k are reached at hop k+1, so
    // depth runs to m-1. Hops count quad traversals, not entities.
    for depth in 0..m {
        let mut next = Vec::new();
        for &e in &frontier {
            for &qi in kg.incident_quads(e) {
                quad_in[qi] = true;
                let q = &kg.quads()[qi];
                for other in [q.subject, q.object] {
                    if dist[other] == usize::MAX {
                        dist[other] = depth + 1;
                        next.push(other);
                    }
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }

    let mut entity_mark = vec![false; nv];
    for &e in entity_ids {
        entity_mark[e] = true;
    }
    let mut time_mark = vec![false; kg.num_timestamps()];
    let mut included = 0usize;
    for (qi, &inside) in quad_in.iter().enumerate() {
        if !inside {
            continue;
        }
        included += 1;
        let q = &kg.quads()[qi];
        entity_mark[q.subject] = true;
        entity_mark[q.object] = true;
        for t in q.t_start..=q.t_end {
            let rank = kg
                .time_rank(t)
                .expect("covered timestamp must be in vocabulary");
            time_mark[rank] = true;
        }
    }

    let entities: Vec<EntityId> = entity_mark
        .iter()
        .enumerate()
        .filter_map(|(e, &m)| m.then_some(e))
        .collect();
    let mut timestamps = Vec::new();
    let mut time_ranks = Vec::new();
    for (rank, &m) in time_mark.iter().enumerate() {
        if m {
            timestamps.push(kg.timestamps()[rank]);
            time_ranks.push(rank);
        }
    }

    Ok(CandidateSet {
        entities,
        timestamps,
        time_ranks,
        hop_used: m,
        coverage_ratio: if nq == 0 {
            0.0
        } else {
            included as f64 / nq as f64
        },
        isolated,
    })
}

/// Result of the training-time hop fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FitHops {
    pub m: usize,
    /// False when even `m_max` hops do not reach every gold answer; such
    /// questions are excluded from training.
    pub covers_answers: bool,
}

/// Smallest `m ≤ m_max` whose candidate set contains every gold answer;
/// falls back to `m_max` with `covers_answers = false` when none suffices.
pub fn fit_hops(
    kg: &TemporalKG,
    question: &QuestionRecord,
    m_max: usize,
) -> Result<FitHops, NeighborError> {
    assert!(m_max >= 1, "m_max must be at least 1");
    for m in 1..=m_max {
        let cands = extract(kg, &question.entity_ids, m)?;
        if answers_covered(&cands, question) {
            return Ok(FitHops {
                m,
                covers_answers: true,
            });
        }
    }
    Ok(FitHops {
        m: m_max,
        covers_answers: false,
    })
}

/// Whether every gold answer of the question lies in the candidate set.
pub fn answers_covered(cands: &CandidateSet, question: &QuestionRecord) -> bool {
    match question.answer_type {
        AnswerType::Entity => question
            .entity_answers()
            .all(|e| cands.entity_index(e).is_some()),
        AnswerType::Time => question
            .time_answers()
            .all(|t| cands.time_index(t).is_some()),
    }
}
