//! Command implementations behind the `tkgqa` binary.
//!
//! Every command works inside an output directory (`--out`) with stable
//! filenames:
//!
//! - `kg.tsv`, `entity_names.tsv` — the graph and its name table
//! - `questions_train.jsonl` / `questions_dev.jsonl` / `questions_test.jsonl`
//! - `run_config.toml` — the resolved configuration written by `gen` and
//!   picked up by later commands unless `--config` overrides it
//! - `embeddings.ckpt` — stage-1 KG embeddings (reused on retrain when the
//!   config and graph match)
//! - `model.ckpt` — the full trained model
//! - `eval_report.{json,txt}`, `ablation_report.{json,txt}`,
//!   `contrast_pairs.jsonl`, `answers.jsonl`
//!
//! Reports and checkpoints embed the resolved run configuration and a
//! `git describe` string, so any artifact can be reproduced from itself.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use tkgqa_core::benchmark::{self, GeneratedQuestions};
use tkgqa_core::contrastive::{make_contrast, ContrastLexicon};
use tkgqa_core::embed;
use tkgqa_core::pipeline::{self, AblationToggles, TrainedModel};
use tkgqa_core::qa::rank_answers;
use tkgqa_core::question::QuestionRecord;
use tkgqa_core::{RunConfig, TemporalKG};

pub const KG_FILE: &str = "kg.tsv";
pub const NAMES_FILE: &str = "entity_names.tsv";
pub const CONFIG_FILE: &str = "run_config.toml";
pub const EMB_CKPT: &str = "embeddings.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";

/// Common flags shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct CommonOpts {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub set: Vec<String>,
}

impl CommonOpts {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        CommonOpts {
            out: out.into(),
            config: None,
            seed: None,
            set: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Resolve the effective configuration: explicit `--config`, else the
    /// directory's `run_config.toml`, else defaults; then `--set` overrides
    /// and finally `--seed`.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let base: RunConfig = if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        } else {
            let fallback = self.path(CONFIG_FILE);
            if fallback.exists() {
                let text = fs::read_to_string(&fallback)?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", fallback.display()))?
            } else {
                RunConfig::default()
            }
        };
        let mut cfg = apply_overrides(base, &self.set)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_master_seed(seed);
        }
        Ok(cfg)
    }
}

/// Apply `key.path=value` overrides through the TOML tree.
pub fn apply_overrides(cfg: RunConfig, sets: &[String]) -> Result<RunConfig> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut tree = toml::Value::try_from(&cfg).context("serializing config for overrides")?;
    for set in sets {
        let (key, value) = set
            .split_once('=')
            .with_context(|| format!("override {set:?} is not of the form key=value"))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .map(|t| t["v"].clone())
            .unwrap_or_else(|_| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        set_path(&mut tree, &parts, parsed, key)?;
    }
    tree.try_into().context("applying overrides")
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let table = node
        .as_table_mut()
        .with_context(|| format!("override {key:?}: not a table at {:?}", parts[0]))?;
    if parts.len() == 1 {
        if !table.contains_key(parts[0]) {
            bail!("override {key:?}: unknown field {:?}", parts[0]);
        }
        table.insert(parts[0].to_string(), value);
        Ok(())
    } else {
        let child = table
            .get_mut(parts[0])
            .with_context(|| format!("override {key:?}: unknown section {:?}", parts[0]))?;
        set_path(child, &parts[1..], value, key)
    }
}

fn write_jsonl(path: &Path, records: &[QuestionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<QuestionRecord>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: bad question record", path.display(), i + 1))
        })
        .collect()
}

fn load_kg(opts: &CommonOpts) -> Result<TemporalKG> {
    let path = opts.path(KG_FILE);
    TemporalKG::load_tsv(&path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct ReportEnvelope<'a, T: Serialize> {
    config: &'a RunConfig,
    git_describe: String,
    #[serde(flatten)]
    body: T,
}

/// `gen`: generate the KG and question files. Nothing is written until the
/// whole benchmark has been generated and validated.
pub fn cmd_gen(opts: &CommonOpts) -> Result<()> {
    let cfg = opts.resolve_config()?;
    let kg = benchmark::generate_kg(&cfg.bench)?;
    kg.validate().map_err(|e| anyhow::anyhow!("generated KG failed validation: {e}"))?;
    let questions = benchmark::generate_questions(&kg, &cfg.bench)?;
    for q in questions.all() {
        q.validate(&kg)
            .map_err(|e| anyhow::anyhow!("generated question failed validation: {e}"))?;
    }

    fs::create_dir_all(&opts.out)?;
    fs::write(opts.path(KG_FILE), kg.to_tsv())?;
    fs::write(opts.path(NAMES_FILE), kg.name_table_tsv())?;
    write_jsonl(&opts.path("questions_train.jsonl"), &questions.train)?;
    write_jsonl(&opts.path("questions_dev.jsonl"), &questions.dev)?;
    write_jsonl(&opts.path("questions_test.jsonl"), &questions.test)?;
    fs::write(opts.path(CONFIG_FILE), toml::to_string_pretty(&cfg)?)?;

    #[derive(Serialize)]
    struct GenBody {
        num_entities: usize,
        num_relations: usize,
        num_timestamps: usize,
        num_quads: usize,
        questions_train: usize,
        questions_dev: usize,
        questions_test: usize,
        warnings: Vec<String>,
    }
    let body = GenBody {
        num_entities: kg.num_entities(),
        num_relations: kg.num_relations(),
        num_timestamps: kg.num_timestamps(),
        num_quads: kg.quads().len(),
        questions_train: questions.train.len(),
        questions_dev: questions.dev.len(),
        questions_test: questions.test.len(),
        warnings: questions.warnings.clone(),
    };
    for w in &questions.warnings {
        log::warn!("{w}");
    }
    fs::write(
        opts.path("gen_report.json"),
        serde_json::to_string_pretty(&ReportEnvelope {
            config: &cfg,
            git_describe: pipeline::git_describe(),
            body,
        })?,
    )?;
    println!(
        "generated {} quads, {}/{}/{} train/dev/test questions under {}",
        kg.quads().len(),
        questions.train.len(),
        questions.dev.len(),
        questions.test.len(),
        opts.out.display()
    );
    Ok(())
}

fn load_questions(opts: &CommonOpts) -> Result<GeneratedQuestions> {
    Ok(GeneratedQuestions {
        train: read_jsonl(&opts.path("questions_train.jsonl"))?,
        dev: read_jsonl(&opts.path("questions_dev.jsonl"))?,
        test: read_jsonl(&opts.path("questions_test.jsonl"))?,
        warnings: Vec::new(),
    })
}

/// Train stage 1 or reuse a matching checkpoint from the output directory.
fn stage1(
    opts: &CommonOpts,
    kg: &TemporalKG,
    cfg: &RunConfig,
    resume: bool,
) -> Result<embed::KgEmbeddingModel> {
    let path = opts.path(EMB_CKPT);
    if resume && path.exists() {
        if let Ok(existing) = embed::load_embeddings(&path) {
            if existing.config == cfg.kg
                && existing.kg_fingerprint == tkgqa_core::kg::fingerprint(kg)
            {
                log::info!("reusing stage-1 checkpoint {}", path.display());
                return Ok(existing);
            }
        }
        log::info!("stage-1 checkpoint does not match config; retraining");
    }
    let emb = embed::train_kg_embeddings(kg, &cfg.kg)?;
    embed::save_embeddings(&path, &emb)?;
    Ok(emb)
}

/// Options specific to `train`.
#[derive(Debug, Clone, Default)]
pub struct TrainOpts {
    /// Ignore an existing stage-1 checkpoint.
    pub no_resume: bool,
    /// Sweep λ_o × λ_c over the tuning grid and keep the best dev model.
    pub sweep_lambda: bool,
}

/// `train`: stage 1 (KG embeddings) then stage 2 (QA heads + encoder).
pub fn cmd_train(opts: &CommonOpts, train_opts: &TrainOpts) -> Result<()> {
    let cfg = opts.resolve_config()?;
    let kg = load_kg(opts)?;
    let questions = load_questions(opts)?;
    let emb = stage1(opts, &kg, &cfg, !train_opts.no_resume)?;
    log::info!(
        "stage 1 done: final L_TC={:.4}, order accuracy={:.4}",
        emb.log.last().map(|l| l.loss_tc).unwrap_or(f64::NAN),
        embed::order_accuracy(&emb.store, &emb.order_head)
    );

    let toggles = AblationToggles::full();
    let (model, logs, sweep_rows) = if train_opts.sweep_lambda {
        let mut best: Option<(TrainedModel, Vec<pipeline::QaEpochLog>)> = None;
        let mut rows = Vec::new();
        for &lo in &pipeline::LAMBDA_GRID {
            for &lc in &pipeline::LAMBDA_GRID {
                let mut c = cfg.clone();
                c.qa.lambda_o = lo;
                c.qa.lambda_c = lc;
                let (m, l) =
                    pipeline::train_qa(&kg, &emb, &questions.train, &questions.dev, &c, toggles)?;
                log::info!("sweep λ_o={lo} λ_c={lc}: dev Hits@1 {:.4}", m.dev_hits1);
                rows.push((lo, lc, m.dev_hits1));
                if best.as_ref().map_or(true, |(b, _)| m.dev_hits1 > b.dev_hits1) {
                    best = Some((m, l));
                }
            }
        }
        let (m, l) = best.expect("non-empty sweep grid");
        (m, l, Some(rows))
    } else {
        let (m, l) = pipeline::train_qa(&kg, &emb, &questions.train, &questions.dev, &cfg, toggles)?;
        (m, l, None)
    };

    pipeline::save_checkpoint(opts.path(MODEL_CKPT), &model)?;

    // Contrastive-pair dump for audit.
    let lexicon = ContrastLexicon::default();
    let mut pairs_out = String::new();
    for q in &questions.train {
        if let Some(pair) = make_contrast(q, &lexicon) {
            pairs_out.push_str(&serde_json::to_string(&pair)?);
            pairs_out.push('\n');
        }
    }
    fs::write(opts.path("contrast_pairs.jsonl"), pairs_out)?;

    #[derive(Serialize)]
    struct TrainBody {
        stage1_log: Vec<embed::EpochLog>,
        stage2_log: Vec<pipeline::QaEpochLog>,
        dev_hits1: f64,
        m_test: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        lambda_sweep: Option<Vec<(f64, f64, f64)>>,
    }
    fs::write(
        opts.path("train_log.json"),
        serde_json::to_string_pretty(&ReportEnvelope {
            config: &model.config,
            git_describe: model.git_describe.clone(),
            body: TrainBody {
                stage1_log: emb.log.clone(),
                stage2_log: logs,
                dev_hits1: model.dev_hits1,
                m_test: model.m_test,
                lambda_sweep: sweep_rows,
            },
        })?,
    )?;
    println!(
        "trained model saved to {} (dev Hits@1 {:.4}, m_test {})",
        opts.path(MODEL_CKPT).display(),
        model.dev_hits1,
        model.m_test
    );
    Ok(())
}

/// Which question split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => "questions_train.jsonl",
            Split::Dev => "questions_dev.jsonl",
            Split::Test => "questions_test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => bail!("unknown split {other:?} (expected train|dev|test)"),
        }
    }
}

fn load_model(opts: &CommonOpts, checkpoint: Option<&Path>, kg: &TemporalKG) -> Result<TrainedModel> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| opts.path(MODEL_CKPT));
    let model =
        pipeline::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    pipeline::check_kg_match(&model, kg)?;
    Ok(model)
}

/// `eval`: score a split and write the report (JSON + aligned text table).
pub fn cmd_eval(opts: &CommonOpts, checkpoint: Option<&Path>, split: Split) -> Result<()> {
    let kg = load_kg(opts)?;
    let model = load_model(opts, checkpoint, &kg)?;
    let questions = read_jsonl(&opts.path(split.file()))?;
    let report = benchmark::evaluate(&model, &kg, &questions)?;
    report
        .check_invariants()
        .map_err(|e| anyhow::anyhow!("report invariant violated: {e}"))?;

    #[derive(Serialize)]
    struct EvalBody<'a> {
        split: &'a str,
        report: &'a benchmark::EvalReport,
    }
    let split_name = match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    };
    fs::write(
        opts.path("eval_report.json"),
        serde_json::to_string_pretty(&ReportEnvelope {
            config: &model.config,
            git_describe: model.git_describe.clone(),
            body: EvalBody {
                split: split_name,
                report: &report,
            },
        })?,
    )?;
    let text = benchmark::render_report_text(&format!("split: {split_name}"), &report);
    fs::write(opts.path("eval_report.txt"), &text)?;
    println!("{text}");
    Ok(())
}

/// `ablate`: cumulative feature-removal table over the test split.
pub fn cmd_ablate(opts: &CommonOpts) -> Result<()> {
    let cfg = opts.resolve_config()?;
    let kg = load_kg(opts)?;
    let questions = load_questions(opts)?;
    let outcomes = benchmark::run_ablation(&kg, &questions, &cfg)?;
    let rows: Vec<(String, benchmark::EvalReport)> = outcomes
        .iter()
        .map(|o| (o.name.clone(), o.report.clone()))
        .collect();

    #[derive(Serialize)]
    struct AblateBody<'a> {
        rows: &'a [(String, benchmark::EvalReport)],
    }
    fs::write(
        opts.path("ablation_report.json"),
        serde_json::to_string_pretty(&ReportEnvelope {
            config: &cfg,
            git_describe: pipeline::git_describe(),
            body: AblateBody { rows: &rows },
        })?,
    )?;
    let text = benchmark::render_ablation_text(&rows);
    fs::write(opts.path("ablation_report.txt"), &text)?;
    println!("{text}");
    Ok(())
}

/// `query`: answer a JSON-lines question file with top-k candidates.
/// Per-question failures become error objects; the process continues.
pub fn cmd_query(
    opts: &CommonOpts,
    checkpoint: Option<&Path>,
    questions_path: &Path,
    top_k: usize,
) -> Result<()> {
    let kg = load_kg(opts)?;
    let model = load_model(opts, checkpoint, &kg)?;
    let text = fs::read_to_string(questions_path)
        .with_context(|| format!("reading {}", questions_path.display()))?;

    #[derive(Serialize)]
    struct Candidate<'a> {
        kind: &'static str,
        id: i64,
        label: Option<&'a str>,
        score: f64,
        prob: f64,
    }
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Line<'a> {
        Ok {
            index: usize,
            raw_text: String,
            top: Vec<Candidate<'a>>,
        },
        Err {
            index: usize,
            error: String,
        },
    }

    let mut out = String::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let answered = (|| -> Result<(String, Vec<(usize, f64, f64)>, tkgqa_core::CandidateSet)> {
            let record: QuestionRecord = serde_json::from_str(line).context("bad record")?;
            for &e in &record.entity_ids {
                if e >= kg.num_entities() {
                    bail!("unknown entity id {e}");
                }
            }
            let cands = if model.toggles.ng {
                tkgqa_core::neighbor::extract(&kg, &record.entity_ids, model.m_test.max(1))?
            } else {
                tkgqa_core::CandidateSet::full(&kg)
            };
            let sc = pipeline::score_record(&model.store, &model.qa, &model.toggles, &kg, &record, &cands)?;
            let top = rank_answers(&sc, top_k)
                .into_iter()
                .map(|i| (i, sc.scores[i], sc.probs[i]))
                .collect();
            Ok((record.raw_text, top, cands))
        })();
        let rendered = match &answered {
            Ok((raw_text, top, cands)) => Line::Ok {
                index,
                raw_text: raw_text.clone(),
                top: top
                    .iter()
                    .map(|&(i, score, prob)| {
                        if i < cands.entities.len() {
                            let e = cands.entities[i];
                            Candidate {
                                kind: "entity",
                                id: e as i64,
                                label: Some(kg.entity_label(e)),
                                score,
                                prob,
                            }
                        } else {
                            Candidate {
                                kind: "time",
                                id: cands.timestamps[i - cands.entities.len()],
                                label: None,
                                score,
                                prob,
                            }
                        }
                    })
                    .collect(),
            },
            Err(e) => Line::Err {
                index,
                error: format!("{e:#}"),
            },
        };
        let json = serde_json::to_string(&rendered)?;
        println!("{json}");
        out.push_str(&json);
        out.push('\n');
    }
    fs::create_dir_all(&opts.out)?;
    fs::write(opts.path("answers.jsonl"), out)?;
    Ok(())
}
