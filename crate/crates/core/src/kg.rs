//! Temporal knowledge-graph data model and ingestion.
//!
//! A graph is a set of interval-annotated quadruples `(s, r, o, [t_s, t_e])`
//! over dense integer vocabularies. Timestamps are plain integers (years);
//! there is no calendar arithmetic. Point intervals (`t_s == t_e`) are
//! allowed. Interval quads expand to one point quad per covered timestamp,
//! and the timestamp vocabulary registers every covered timestamp, not just
//! the endpoints.
//!
//! The KG file format is a UTF-8 TSV with five columns
//! `subject\trelation\tobject\tt_start\tt_end`, one quad per line, no
//! header. An optional sidecar name table (`id\tlabel` TSV) preserves
//! display labels. A loaded graph is immutable and safe to share across
//! threads.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense entity id, assigned in first-appearance order at ingestion.
pub type EntityId = usize;
/// Dense relation id, assigned in first-appearance order at ingestion.
pub type RelationId = usize;
/// Rank of a timestamp in the ascending timestamp vocabulary.
pub type TimeRank = usize;
/// A discretized integer timestamp (e.g. a year).
pub type Timestamp = i64;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: interval start {start} exceeds end {end}")]
    Interval {
        line: usize,
        start: Timestamp,
        end: Timestamp,
    },
    #[error("invalid id: {0}")]
    InvalidId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fact holding over a closed time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntervalQuad {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

/// A fact holding at a single timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointQuad {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub t: Timestamp,
}

/// Expand an interval quad into its covered point quads, ascending in `t`.
///
/// The result has exactly `t_end - t_start + 1` elements; a point interval
/// yields a single quad.
pub fn expand(q: &IntervalQuad) -> Vec<PointQuad> {
    (q.t_start..=q.t_end)
        .map(|t| PointQuad {
            subject: q.subject,
            relation: q.relation,
            object: q.object,
            t,
        })
        .collect()
}

/// An immutable temporal knowledge graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalKG {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    /// Ascending, duplicate-free timestamp vocabulary.
    timestamps: Vec<Timestamp>,
    quads: Vec<IntervalQuad>,
    /// Per-entity indices of incident quads (as subject or object).
    adjacency: Vec<Vec<usize>>,
    #[serde(skip)]
    entity_index: HashMap<String, EntityId>,
    #[serde(skip)]
    relation_index: HashMap<String, RelationId>,
}

impl TemporalKG {
    /// Build a graph from labeled quads. Vocabularies are assigned in
    /// first-appearance order; the timestamp vocabulary collects every
    /// timestamp covered by some interval and is sorted ascending.
    pub fn from_labeled_quads(
        quads: &[(String, String, String, Timestamp, Timestamp)],
    ) -> Result<Self, KgError> {
        let mut kg = TemporalKG {
            entity_labels: Vec::new(),
            relation_labels: Vec::new(),
            timestamps: Vec::new(),
            quads: Vec::new(),
            adjacency: Vec::new(),
            entity_index: HashMap::new(),
            relation_index: HashMap::new(),
        };
        let mut seen_times: HashMap<Timestamp, ()> = HashMap::new();
        for (line0, (s, r, o, ts, te)) in quads.iter().enumerate() {
            let line = line0 + 1;
            if ts > te {
                return Err(KgError::Interval {
                    line,
                    start: *ts,
                    end: *te,
                });
            }
            let subject = kg.intern_entity(s);
            let relation = kg.intern_relation(r);
            let object = kg.intern_entity(o);
            for t in *ts..=*te {
                seen_times.entry(t).or_insert(());
            }
            kg.quads.push(IntervalQuad {
                subject,
                relation,
                object,
                t_start: *ts,
                t_end: *te,
            });
        }
        kg.timestamps = seen_times.into_keys().collect();
        kg.timestamps.sort_unstable();
        kg.rebuild_adjacency();
        Ok(kg)
    }

    /// Load a graph from a 5-column TSV file.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text)
    }

    /// Parse the TSV wire format from a string.
    pub fn parse_tsv(text: &str) -> Result<Self, KgError> {
        let mut labeled = Vec::new();
        for (line0, raw) in text.lines().enumerate() {
            let line = line0 + 1;
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 5 {
                return Err(KgError::Parse {
                    line,
                    msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let ts: Timestamp = fields[3].parse().map_err(|_| KgError::Parse {
                line,
                msg: format!("t_start is not an integer: {:?}", fields[3]),
            })?;
            let te: Timestamp = fields[4].parse().map_err(|_| KgError::Parse {
                line,
                msg: format!("t_end is not an integer: {:?}", fields[4]),
            })?;
            labeled.push((
                fields[0].to_string(),
                fields[1].to_string(),
                fields[2].to_string(),
                ts,
                te,
            ));
        }
        Self::from_labeled_quads(&labeled)
    }

    /// Serialize to the TSV wire format (one quad per line, input order).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for q in &self.quads {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                self.entity_labels[q.subject],
                self.relation_labels[q.relation],
                self.entity_labels[q.object],
                q.t_start,
                q.t_end
            );
        }
        out
    }

    /// Write the sidecar name table (`id\tlabel`).
    pub fn name_table_tsv(&self) -> String {
        let mut out = String::new();
        for (id, label) in self.entity_labels.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{label}");
        }
        out
    }

    fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(label) {
            return id;
        }
        let id = self.entity_labels.len();
        self.entity_labels.push(label.to_string());
        self.entity_index.insert(label.to_string(), id);
        id
    }

    fn intern_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(label) {
            return id;
        }
        let id = self.relation_labels.len();
        self.relation_labels.push(label.to_string());
        self.relation_index.insert(label.to_string(), id);
        id
    }

    fn rebuild_adjacency(&mut self) {
        self.adjacency = vec![Vec::new(); self.entity_labels.len()];
        for (i, q) in self.quads.iter().enumerate() {
            self.adjacency[q.subject].push(i);
            if q.object != q.subject {
                self.adjacency[q.object].push(i);
            }
        }
    }

    /// Rebuild the (non-serialized) label lookup tables after deserialization.
    pub fn rebuild_indexes(&mut self) {
        self.entity_index = self
            .entity_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        self.relation_index = self
            .relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn num_entities(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.timestamps.len()
    }

    /// Ascending timestamp vocabulary.
    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn quads(&self) -> &[IntervalQuad] {
        &self.quads
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_index.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label).copied()
    }

    /// Rank of a timestamp value in the ascending vocabulary.
    pub fn time_rank(&self, t: Timestamp) -> Option<TimeRank> {
        self.timestamps.binary_search(&t).ok()
    }

    /// Indices (into `quads`) of the quads incident to an entity.
    pub fn incident_quads(&self, e: EntityId) -> &[usize] {
        &self.adjacency[e]
    }

    /// All point quads of the graph: expansion of every interval quad, in
    /// input order with ascending `t` within each quad.
    pub fn expanded_quads(&self) -> Vec<PointQuad> {
        self.quads.iter().flat_map(expand).collect()
    }

    /// Check the structural invariants: quad ids within vocabularies, valid
    /// intervals with endpoints registered in the timestamp vocabulary,
    /// strictly increasing timestamps, and adjacency exactly matching
    /// incidence.
    pub fn validate(&self) -> Result<(), String> {
        let nv = self.num_entities();
        let nr = self.num_relations();
        for (i, q) in self.quads.iter().enumerate() {
            if q.subject >= nv || q.object >= nv {
                return Err(format!("quad {i} references unknown entity"));
            }
            if q.relation >= nr {
                return Err(format!("quad {i} references unknown relation"));
            }
            if q.t_start > q.t_end {
                return Err(format!("quad {i} has t_start > t_end"));
            }
            if self.time_rank(q.t_start).is_none() || self.time_rank(q.t_end).is_none() {
                return Err(format!("quad {i} endpoints missing from vocabulary"));
            }
        }
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err("timestamp vocabulary is not strictly increasing".into());
        }
        let mut want = vec![Vec::new(); nv];
        for (i, q) in self.quads.iter().enumerate() {
            want[q.subject].push(i);
            if q.object != q.subject {
                want[q.object].push(i);
            }
        }
        if want != self.adjacency {
            return Err("adjacency does not match quad incidence".into());
        }
        Ok(())
    }
}

/// FNV-1a over the KG vocabularies; checkpoints store it to detect being
/// loaded against a different graph.
pub fn fingerprint(kg: &TemporalKG) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for label in kg.entity_labels() {
        mix(label.as_bytes());
    }
    for label in kg.relation_labels() {
        mix(label.as_bytes());
    }
    for &t in kg.timestamps() {
        mix(&t.to_le_bytes());
    }
    h
}

/// Parse an optional sidecar name table (`id\tlabel` per line).
pub fn parse_name_table(text: &str) -> Result<Vec<(usize, String)>, KgError> {
    let mut out = Vec::new();
    for (line0, raw) in text.lines().enumerate() {
        let line = line0 + 1;
        if raw.is_empty() {
            continue;
        }
        let (id, label) = raw.split_once('\t').ok_or_else(|| KgError::Parse {
            line,
            msg: "expected `id\\tlabel`".into(),
        })?;
        let id: usize = id.parse().map_err(|_| KgError::Parse {
            line,
            msg: format!("id is not an integer: {id:?}"),
        })?;
        out.push((id, label.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line_registers_expanded_timestamps() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t3\t5\n").unwrap();
        assert_eq!(kg.num_entities(), 2);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!(kg.timestamps(), &[3, 4, 5]);
        assert_eq!(kg.quads().len(), 1);
        kg.validate().unwrap();
    }

    #[test]
    fn empty_file_yields_empty_graph() {
        let kg = TemporalKG::parse_tsv("").unwrap();
        assert_eq!(kg.num_entities(), 0);
        assert_eq!(kg.num_relations(), 0);
        assert_eq!(kg.num_timestamps(), 0);
        assert!(kg.quads().is_empty());
        assert!(kg.expanded_quads().is_empty());
        kg.validate().unwrap();
    }

    #[test]
    fn reversed_interval_is_a_validation_error() {
        let err = TemporalKG::parse_tsv("A\tp\tB\t5\t3\n").unwrap_err();
        match err {
            KgError::Interval { line, start, end } => {
                assert_eq!((line, start, end), (1, 5, 3));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = TemporalKG::parse_tsv("A\tp\tB\t3\t5\nA\tp\tB\n").unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
        let err = TemporalKG::parse_tsv("A\tp\tB\tx\t5\n").unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn expand_enumerates_the_closed_interval() {
        let q = IntervalQuad {
            subject: 0,
            relation: 0,
            object: 1,
            t_start: 3,
            t_end: 5,
        };
        let pts = expand(&q);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].t, 3);
        assert_eq!(pts[1].t, 4);
        assert_eq!(pts[2].t, 5);
    }

    #[test]
    fn expand_point_interval() {
        let q = IntervalQuad {
            subject: 0,
            relation: 0,
            object: 1,
            t_start: 7,
            t_end: 7,
        };
        assert_eq!(expand(&q).len(), 1);
        assert_eq!(expand(&q)[0].t, 7);
    }

    #[test]
    fn thirteen_year_presidency_expands_to_thirteen_quads() {
        let kg =
            TemporalKG::parse_tsv("Franklin D. Roosevelt\tposition held\tPresident of USA\t1933\t1945\n")
                .unwrap();
        let pts = kg.expanded_quads();
        assert_eq!(pts.len(), 13);
        assert_eq!(pts.first().unwrap().t, 1933);
        assert_eq!(pts.last().unwrap().t, 1945);
    }

    #[test]
    fn expanded_quads_concatenates_per_quad_expansions() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t1\t3\nB\tp\tC\t9\t9\n").unwrap();
        assert_eq!(kg.expanded_quads().len(), 4);
    }

    #[test]
    fn ingestion_is_deterministic() {
        let text = "A\tp\tB\t3\t5\nC\tq\tA\t1\t1\nB\tp\tC\t2\t4\n";
        let kg1 = TemporalKG::parse_tsv(text).unwrap();
        let kg2 = TemporalKG::parse_tsv(text).unwrap();
        assert_eq!(kg1.entity_labels(), kg2.entity_labels());
        assert_eq!(kg1.relation_labels(), kg2.relation_labels());
        assert_eq!(kg1.to_tsv(), kg2.to_tsv());
        assert_eq!(kg1.to_tsv(), text);
    }

    #[test]
    fn vocabulary_closure_over_expansion() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t3\t5\nC\tq\tA\t1\t1\n").unwrap();
        for pq in kg.expanded_quads() {
            assert!(pq.subject < kg.num_entities());
            assert!(pq.object < kg.num_entities());
            assert!(pq.relation < kg.num_relations());
            assert!(kg.time_rank(pq.t).is_some());
        }
    }

    #[test]
    fn duplicate_quads_are_ingested_verbatim() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t3\t5\nA\tp\tB\t3\t5\n").unwrap();
        assert_eq!(kg.quads().len(), 2);
    }

    #[test]
    fn adjacency_lists_incident_quads() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t1\t1\nB\tp\tC\t2\t2\n").unwrap();
        let a = kg.entity_id("A").unwrap();
        let b = kg.entity_id("B").unwrap();
        let c = kg.entity_id("C").unwrap();
        assert_eq!(kg.incident_quads(a), &[0]);
        assert_eq!(kg.incident_quads(b), &[0, 1]);
        assert_eq!(kg.incident_quads(c), &[1]);
    }

    #[test]
    fn name_table_round_trip() {
        let kg = TemporalKG::parse_tsv("A\tp\tB\t1\t1\n").unwrap();
        let table = parse_name_table(&kg.name_table_tsv()).unwrap();
        assert_eq!(table, vec![(0, "A".to_string()), (1, "B".to_string())]);
    }
}
