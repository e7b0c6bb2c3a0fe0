//! Scratch diagnostic: stage-1 fact recovery quality.

use tkgqa_core::benchmark::{generate_kg, BenchSpec};
use tkgqa_core::embed::{self, training_quads, KGTrainConfig, LossSign};

fn recovery(kg: &tkgqa_core::TemporalKG, cfg: &KGTrainConfig, name: &str) {
    let quads = training_quads(kg);
    let emb = embed::train_kg_embeddings(kg, cfg).unwrap();
    let store = &emb.store;
    let last = emb.log.last().unwrap();
    let lower_is_better = matches!(cfg.loss_sign, LossSign::Paper);
    let role = kg.relation_id("held").unwrap();
    let sample: Vec<_> = quads.iter().filter(|q| q.relation == role).step_by(3).collect();

    let mut hits1 = 0usize;
    let mut mrr = 0.0;
    for q in &sample {
        let s_true = embed::score_quad(store, q.subject, q.relation, q.time_rank, q.object).unwrap();
        let mut rank = 1usize;
        for o in 0..kg.num_entities() {
            if o == q.object {
                continue;
            }
            let s = embed::score_quad(store, q.subject, q.relation, q.time_rank, o).unwrap();
            if if lower_is_better { s < s_true } else { s > s_true } {
                rank += 1;
            }
        }
        if rank == 1 {
            hits1 += 1;
        }
        mrr += 1.0 / rank as f64;
    }
    // Subject recovery (the QA direction for "who held X in year").
    let mut shits1 = 0usize;
    for q in &sample {
        let s_true = embed::score_quad(store, q.subject, q.relation, q.time_rank, q.object).unwrap();
        let mut rank = 1usize;
        for s_ent in 0..kg.num_entities() {
            if s_ent == q.subject {
                continue;
            }
            let s = embed::score_quad(store, s_ent, q.relation, q.time_rank, q.object).unwrap();
            if if lower_is_better { s < s_true } else { s > s_true } {
                rank += 1;
            }
        }
        if rank == 1 {
            shits1 += 1;
        }
    }
    // Interval-aware time recovery: best timestamp inside the source
    // interval counts as a hit (simple_time questions are multi-gold).
    let mut in_interval = 0usize;
    let mut checked = 0usize;
    for iq in kg.quads().iter().filter(|q| q.relation == role).step_by(3) {
        let (s, o) = (iq.subject, iq.object);
        let mut best_rank = 0usize;
        let mut best_score = f64::NAN;
        for t in 0..kg.num_timestamps() {
            let sc = embed::score_quad(store, s, role, t, o).unwrap();
            let better = best_score.is_nan() || if lower_is_better { sc < best_score } else { sc > best_score };
            if better {
                best_score = sc;
                best_rank = t;
            }
        }
        let best_t = kg.timestamps()[best_rank];
        if iq.t_start <= best_t && best_t <= iq.t_end {
            in_interval += 1;
        }
        checked += 1;
    }
    println!(
        "{name}: L_TC={:.4} order_acc={:.4} | obj H@1={:.3} MRR={:.3} | subj H@1={:.3} | time-in-interval={:.3}",
        last.loss_tc,
        last.order_accuracy,
        hits1 as f64 / sample.len() as f64,
        mrr / sample.len() as f64,
        shits1 as f64 / sample.len() as f64,
        in_interval as f64 / checked as f64,
    );
}

fn main() {
    let spec = BenchSpec::default();
    let kg = generate_kg(&spec).unwrap();
    let base = KGTrainConfig::default();
    for (name, cfg) in [
        ("d=64 e=300        ", KGTrainConfig { d: 64, epochs: 300, ..base.clone() }),
        ("d=96 e=300        ", KGTrainConfig { d: 96, epochs: 300, ..base.clone() }),
    ] {
        recovery(&kg, &cfg, name);
    }
}
