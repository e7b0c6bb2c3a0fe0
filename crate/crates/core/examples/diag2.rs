//! Scratch diagnostic: embedding-ceiling probe for the QA categories.

use tkgqa_core::embed::{load_embeddings, score_quad};
use tkgqa_core::neighbor::extract;
use tkgqa_core::pipeline::load_checkpoint;
use tkgqa_core::question::{AnswerType, QuestionRecord};
use tkgqa_core::TemporalKG;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/tmp/t2".into());
    let kg = TemporalKG::load_tsv(format!("{dir}/kg.tsv")).unwrap();
    let emb = load_embeddings(format!("{dir}/embeddings.ckpt")).unwrap();
    let store = &emb.store;
    let held = kg.relation_id("held").unwrap();

    let model = load_checkpoint(format!("{dir}/model.ckpt")).unwrap();
    println!(
        "learned blend_w = {:?}  (w_ft frobenius = {:.3})",
        model.qa.heads.blend_w,
        model
            .qa
            .heads
            .w_ft
            .as_slice()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    );

    let text = std::fs::read_to_string(format!("{dir}/questions_test.jsonl")).unwrap();
    let questions: Vec<QuestionRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    // Probe: ideal-head scoring using raw 4-way scores (paper sign: lower =
    // more true, so rank ascending).
    let mut stats: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for q in &questions {
        if q.category.name() != "simple_entity" || q.answer_type != AnswerType::Entity {
            continue;
        }
        let year = q.inline_timestamp.unwrap();
        let t = kg.time_rank(year).unwrap();
        let cands = extract(&kg, &q.entity_ids, model.m_test).unwrap();
        let e0 = q.entity_ids[0];
        let v1 = q.template_tokens.first().map(|s| s == "Who").unwrap_or(false);
        // v1: (cand, held, office, t)  v2: (person, held, cand, t)
        let mut best: Option<(f64, usize)> = None;
        for &c in &cands.entities {
            if c == e0 {
                continue;
            }
            let s = if v1 {
                score_quad(store, c, held, t, e0).unwrap()
            } else {
                score_quad(store, e0, held, t, c).unwrap()
            };
            if best.map_or(true, |(b, _)| s < b) {
                best = Some((s, c));
            }
        }
        let hit = best.map_or(false, |(_, c)| q.answers.contains(&(c as i64)));
        let key = if v1 { "v1 who-held-office" } else { "v2 which-office" };
        let e = stats.entry(key).or_default();
        e.0 += 1;
        e.1 += hit as usize;
    }
    for (k, (n, h)) in &stats {
        println!("probe {k}: {h}/{n} = {:.3}", *h as f64 / *n as f64);
    }
}
