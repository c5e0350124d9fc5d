use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use kemp::checkpoint;
use kemp::config::{Precision, RunConfig};
use kemp::corpus::{gen_corpus, gen_vqa, read_jsonl, write_jsonl, Corpus, CorpusRecord, Split, VQA_FILE};
use kemp::downstream::{
    classify, finetune_classification, finetune_generation, finetune_retrieval, finetune_vqa, generate_reports,
    label_matrix, retrieval_rankings, vqa_answer, FinetuneOptions, GenerationReport, RetrievalReport, Route, Task,
    VqaHead, VqaReport,
};
use kemp::gradcheck;
use kemp::graph_knowledge::KnowledgeGraph;
use kemp::injection::{run_injection, CHEST_LABELS};
use kemp::metrics::{auroc, f1_suite};
use kemp::model::{build_tokenizer, Knowledge, ModelState, QueueSizes};
use kemp::pretrain::{pretrain, PretrainOptions, StepLog};
use kemp::{Error, Result, Scalar};

const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const PROGRESS_LINES: u64 = 20;

#[derive(Parser)]
#[command(name = "kemp", version, about = "Knowledge-enhanced medical vision-language pretraining")]
struct Cli {
    /// TOML run configuration; MOTOR_* environment variables override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.corpus_dir.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Overrides run.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image-report corpus and its VQA questions.
    GenCorpus {
        #[arg(long)]
        records: Option<usize>,
        /// Overrides corpus.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain from scratch on the training split.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable general and specific knowledge injection.
        #[arg(long)]
        no_knowledge: bool,
    },
    /// Adapt a checkpoint to a downstream task.
    Finetune {
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a checkpoint on one split and write its predictions.
    Eval {
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// ITM re-ranking depth; defaults to the finetune setting for finetuned retrieval checkpoints, else 0.
        #[arg(long)]
        rerank: Option<usize>,
    },
    /// Write knowledge-injection attention maps for a few images.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Record ids; the first `--limit` records of the split when empty.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Dims::Tiny)]
        dims: Dims,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Retrieval,
    Generation,
    Classification,
    Vqa,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Retrieval => Task::Retrieval,
            TaskArg::Generation => Task::Generation,
            TaskArg::Classification => Task::Classification,
            TaskArg::Vqa => Task::Vqa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dims {
    Tiny,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.corpus {
        cfg.run.corpus_dir = dir;
    }
    if let Some(dir) = cli.out {
        cfg.run.out_dir = dir;
    }
    match &cli.cmd {
        Command::GenCorpus { records, seed } => {
            if let Some(n) = records {
                cfg.corpus.n_records = *n;
            }
            if let Some(s) = seed {
                cfg.corpus.seed = *s;
            }
        }
        Command::Pretrain { steps, seed, no_knowledge } => {
            if let Some(n) = steps {
                cfg.pretrain.steps = *n;
            }
            if let Some(s) = seed {
                cfg.run.seed = *s;
            }
            if *no_knowledge {
                cfg.pretrain.use_knowledge = false;
            }
        }
        Command::Finetune { task, steps: Some(n), .. } => cfg.finetune.task_mut((*task).into()).steps = *n,
        _ => {}
    }
    cfg.validate()?;
    let echo_dir = match cli.cmd {
        Command::GenCorpus { .. } => cfg.run.corpus_dir.clone(),
        _ => cfg.run.out_dir.clone(),
    };
    echo(&cfg, &echo_dir)?;
    match cfg.run.precision {
        Precision::F32 => dispatch::<f32>(&cfg, cli.cmd),
        Precision::F64 => dispatch::<f64>(&cfg, cli.cmd),
    }
}

fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = cfg.echo(dir)?;
    eprintln!("# resolved configuration ({})", path.display());
    eprint!("{}", cfg.to_toml()?);
    Ok(())
}

fn dispatch<T: Scalar>(cfg: &RunConfig, cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenCorpus { .. } => gen_corpus_cmd(cfg),
        Command::Pretrain { .. } => pretrain_cmd::<T>(cfg),
        Command::Finetune { task, checkpoint, .. } => finetune_cmd::<T>(cfg, task.into(), &checkpoint),
        Command::Eval { task, checkpoint, split, rerank } => {
            eval_cmd::<T>(cfg, task.into(), &checkpoint, split.into(), rerank)
        }
        Command::ExportAttention { checkpoint, split, ids, limit } => {
            export_attention::<T>(cfg, &checkpoint, split.into(), &ids, limit)
        }
        Command::Gradcheck { dims: Dims::Tiny } => gradcheck_cmd(cfg),
    }
}

fn gen_corpus_cmd(cfg: &RunConfig) -> Result<u8> {
    let corpus = gen_corpus(&cfg.corpus, &KnowledgeGraph::default_chest())?;
    let dir = &cfg.run.corpus_dir;
    corpus.save(dir)?;
    let vqa = gen_vqa(&corpus, cfg.run.vqa_seed)?;
    write_jsonl(&dir.join(VQA_FILE), &vqa)?;
    println!("wrote {} records and {} questions to {}", corpus.records.len(), vqa.len(), dir.display());
    Ok(0)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value)?;
    write_line(&mut w, path, &text)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn progress_every(steps: u64) -> u64 {
    (steps / PROGRESS_LINES).max(1)
}

struct LossLog {
    path: PathBuf,
    w: BufWriter<File>,
    every: u64,
    total: u64,
}

impl LossLog {
    fn new(path: PathBuf, header: &str, total: u64) -> Result<Self> {
        let mut w = create(&path)?;
        write_line(&mut w, &path, header)?;
        Ok(Self { path, w, every: progress_every(total), total })
    }

    fn step(&mut self, l: &StepLog) -> Result<()> {
        write_line(&mut self.w, &self.path, &l.csv_row())?;
        self.progress(l.step, l.loss);
        Ok(())
    }

    fn scalar(&mut self, step: u64, loss: f64) -> Result<()> {
        write_line(&mut self.w, &self.path, &format!("{step},{loss}"))?;
        self.progress(step, loss);
        Ok(())
    }

    /// `step` counts from 0.
    fn progress(&self, step: u64, loss: f64) {
        let done = step + 1;
        if done % self.every == 0 || done == self.total {
            eprintln!("step {done}/{} loss {loss:.4}", self.total);
        }
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn knowledge<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, state: &ModelState<T>) -> Result<Knowledge> {
    Knowledge::from_corpus(corpus, &state.tokenizer, cfg.pretrain.top_k, cfg.pretrain.triplet_cap)
}

fn pretrain_cmd<T: Scalar>(cfg: &RunConfig) -> Result<u8> {
    let corpus = Corpus::load(&cfg.run.corpus_dir)?;
    let tok = build_tokenizer(&corpus, &[], cfg.model.max_text_len);
    let p = &cfg.pretrain;
    let queues = QueueSizes { itc: p.itc_queue, report: p.report_queue };
    let mut state = ModelState::<T>::new(cfg.model.clone(), tok, queues, cfg.run.seed)?;
    let know = knowledge(cfg, &corpus, &state)?;
    let out = &cfg.run.out_dir;
    let meta = |step: u64| json!({ "stage": "pretrain", "step": step, "use_knowledge": p.use_knowledge });
    let mut log = LossLog::new(out.join("pretrain_losses.csv"), StepLog::CSV_HEADER, p.steps)?;
    let every = cfg.run.checkpoint_every;
    pretrain(&mut state, &corpus, &know, p, |st, l| {
        log.step(l)?;
        let done = l.step + 1;
        if every > 0 && done % every == 0 && done < p.steps {
            checkpoint::save(&out.join(format!("pretrain-{done:06}.ckpt")), st, &meta(done))?;
        }
        Ok(())
    })?;
    log.finish()?;
    let path = out.join(PRETRAIN_CKPT);
    checkpoint::save(&path, &state, &meta(state.step))?;
    println!("wrote {}", path.display());
    Ok(0)
}

/// Pretraining options of a loaded checkpoint: the configured ones with the
/// knowledge setting the checkpoint was trained with.
fn checkpoint_opts(cfg: &RunConfig, meta: &Value) -> PretrainOptions {
    let use_knowledge = meta["use_knowledge"].as_bool().unwrap_or(cfg.pretrain.use_knowledge);
    PretrainOptions { use_knowledge, ..cfg.pretrain.clone() }
}

fn vqa_records(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<CorpusRecord>> {
    let path = cfg.run.corpus_dir.join(VQA_FILE);
    if path.exists() {
        read_jsonl(&path)
    } else {
        gen_vqa(corpus, cfg.run.vqa_seed)
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Retrieval => "retrieval",
        Task::Generation => "generation",
        Task::Classification => "classification",
        Task::Vqa => "vqa",
    }
}

fn finetune_cmd<T: Scalar>(cfg: &RunConfig, task: Task, ckpt: &Path) -> Result<u8> {
    let (mut state, meta) = checkpoint::load::<T>(ckpt)?;
    let corpus = Corpus::load(&cfg.run.corpus_dir)?;
    let know = knowledge(cfg, &corpus, &state)?;
    let opts = checkpoint_opts(cfg, &meta);
    let f: &FinetuneOptions = cfg.finetune.task(task);
    let name = task_name(task);
    let out = &cfg.run.out_dir;
    let mut meta = json!({ "stage": "finetune", "task": name, "use_knowledge": opts.use_knowledge, "steps": f.steps });
    match task {
        Task::Retrieval | Task::Generation => {
            let mut log = LossLog::new(out.join(format!("finetune-{name}_losses.csv")), StepLog::CSV_HEADER, f.steps)?;
            let on_step = |_: &ModelState<T>, l: &StepLog| log.step(l);
            if task == Task::Retrieval {
                finetune_retrieval(&mut state, &corpus, &know, &opts, f, on_step)?;
            } else {
                finetune_generation(&mut state, &corpus, &know, &opts, f, on_step)?;
            }
            log.finish()?;
        }
        Task::Classification => {
            let mut log = LossLog::new(out.join(format!("finetune-{name}_losses.csv")), "step,loss", f.steps)?;
            finetune_classification(&mut state, &corpus, &know, &opts, f, |s, l| log.scalar(s, l))?;
            log.finish()?;
        }
        Task::Vqa => {
            let records = vqa_records(cfg, &corpus)?;
            let head = VqaHead::from_records(&records)?;
            let mut log = LossLog::new(out.join(format!("finetune-{name}_losses.csv")), "step,loss", f.steps)?;
            finetune_vqa(&mut state, &corpus, &know, &opts, f, &head, &records, |s, l| log.scalar(s, l))?;
            log.finish()?;
            meta["vqa_head"] = serde_json::to_value(&head)?;
        }
    }
    let path = out.join(format!("finetune-{name}.ckpt"));
    checkpoint::save(&path, &state, &meta)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn eval_cmd<T: Scalar>(cfg: &RunConfig, task: Task, ckpt: &Path, split: Split, rerank: Option<usize>) -> Result<u8> {
    let (state, meta) = checkpoint::load::<T>(ckpt)?;
    let corpus = Corpus::load(&cfg.run.corpus_dir)?;
    let know = knowledge(cfg, &corpus, &state)?;
    let opts = checkpoint_opts(cfg, &meta);
    let f = cfg.finetune.task(task);
    let indices = corpus.split_indices(split);
    let name = task_name(task);
    let split_name = format!("{split:?}").to_lowercase();
    let out = &cfg.run.out_dir;
    let pred_path = out.join(format!("predictions-{name}-{split_name}.jsonl"));
    let mut pred = create(&pred_path)?;
    let metrics = match task {
        Task::Retrieval => {
            let finetuned = meta["task"].as_str() == Some(name);
            let m = rerank.unwrap_or(if finetuned { f.rerank_top_m } else { 0 });
            let rankings = retrieval_rankings(&state, &know, &opts, &corpus, &indices, m)?;
            for (q, id) in rankings.queries.iter().enumerate() {
                let line = json!({ "id": id, "i2t": rankings.i2t[q], "t2i": rankings.t2i[q] });
                write_line(&mut pred, &pred_path, &line.to_string())?;
            }
            let r = RetrievalReport::from_rankings(&rankings);
            println!("gallery {} rerank {m}", r.gallery_size);
            println!("{:<10}{:>8}{:>8}{:>8}", "", "R@1", "R@5", "R@10");
            for (label, s) in [("RR (i2t)", r.i2t), ("IR (t2i)", r.t2i)] {
                println!("{label:<10}{:>8.4}{:>8.4}{:>8.4}", s.r1, s.r5, s.r10);
            }
            serde_json::to_value(r)?
        }
        Task::Generation => {
            let cands = generate_reports(&state, &know, &opts, &corpus, &indices, f.max_len, f.strategy())?;
            let refs: Vec<String> = indices.iter().map(|&i| corpus.records[i].report.clone()).collect();
            for (&i, c) in indices.iter().zip(&cands) {
                let line = json!({ "id": corpus.records[i].id, "report": c });
                write_line(&mut pred, &pred_path, &line.to_string())?;
            }
            let r = GenerationReport::score(&cands, &refs);
            println!("BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr-D {:.4}", r.bleu4, r.rouge_l, r.cider_d);
            serde_json::to_value(r)?
        }
        Task::Classification => {
            let probs = classify(&state, &know, &opts, &corpus, &indices, f.use_knowledge)?;
            for (k, &i) in indices.iter().enumerate() {
                let line = json!({ "id": corpus.records[i].id, "probs": probs.row(k).to_vec() });
                write_line(&mut pred, &pred_path, &line.to_string())?;
            }
            let labels = label_matrix(&corpus, &indices);
            let auc = auroc(probs.view(), labels.view());
            let f1 = f1_suite(probs.view(), labels.view(), 0.5);
            for (name, a) in CHEST_LABELS.iter().zip(&auc.per_class) {
                match a {
                    Some(a) => println!("{name:<28}{a:.4}"),
                    None => println!("{name:<28}-"),
                }
            }
            let mean = auc.mean.map_or("-".to_string(), |m| format!("{m:.4}"));
            println!("mean AUROC {mean}  macro F1 {:.4}  micro F1 {:.4}", f1.macro_f1, f1.micro_f1);
            json!({ "labels": CHEST_LABELS, "auroc": auc.per_class, "mean_auroc": auc.mean, "f1": f1.per_class,
                    "macro_f1": f1.macro_f1, "micro_f1": f1.micro_f1 })
        }
        Task::Vqa => {
            let head: VqaHead = serde_json::from_value(meta["vqa_head"].clone())
                .map_err(|_| Error::Checkpoint(format!("{} has no VQA head; finetune vqa first", ckpt.display())))?;
            let all = vqa_records(cfg, &corpus)?;
            let recs: Vec<&CorpusRecord> = all.iter().filter(|r| r.split == split).collect();
            let preds = vqa_answer(&state, &corpus, &know, &opts, &head, &recs, f.use_knowledge, Route::Auto)?;
            for p in &preds {
                write_line(&mut pred, &pred_path, &serde_json::to_string(p)?)?;
            }
            let r = VqaReport::score(&recs, &preds);
            println!(
                "closed {:.4}  open {:.4}  overall {:.4}  type {:.4}",
                r.closed_accuracy, r.open_accuracy, r.overall_accuracy, r.type_accuracy
            );
            serde_json::to_value(r)?
        }
    };
    pred.flush().map_err(|e| Error::io(&pred_path, e))?;
    let path = out.join(format!("eval-{name}-{split_name}.json"));
    write_json(&path, &json!({ "task": name, "split": split_name, "checkpoint": ckpt, "metrics": metrics }))?;
    println!("wrote {} and {}", path.display(), pred_path.display());
    Ok(0)
}

/// Row-major text matrix: a tab-separated header of column names, then one
/// line per image row.
fn write_matrix<T: Scalar>(path: &Path, columns: &[&str], m: &ndarray::Array2<T>) -> Result<()> {
    let mut w = create(path)?;
    write_line(&mut w, path, &columns.join("\t"))?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{:.6e}", v.as_f64())).collect();
        write_line(&mut w, path, &line.join("\t"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn export_attention<T: Scalar>(cfg: &RunConfig, ckpt: &Path, split: Split, ids: &[u64], limit: usize) -> Result<u8> {
    let (state, _) = checkpoint::load::<T>(ckpt)?;
    let corpus = Corpus::load(&cfg.run.corpus_dir)?;
    let know = knowledge(cfg, &corpus, &state)?;
    let indices: Vec<usize> = if ids.is_empty() {
        corpus.split_indices(split).into_iter().take(limit).collect()
    } else {
        ids.iter()
            .map(|&id| corpus.index_of(id).ok_or_else(|| Error::Precondition(format!("no record with id {id}"))))
            .collect::<Result<_>>()?
    };
    let nodes: Vec<&str> = know.graph.graph.nodes().iter().map(|n| n.name.as_str()).collect();
    let net = state.net();
    let dir = cfg.run.out_dir.join("attention");
    let index_path = dir.join("index.jsonl");
    let mut index = create(&index_path)?;
    for &i in &indices {
        let id = corpus.records[i].id;
        let image = corpus.image_tensor_at::<T>(i, state.cfg.image_size)?;
        let o = run_injection(
            &net,
            &know.graph,
            &know.labels,
            &image,
            &state.report_queue,
            |id| corpus.report(id),
            &know.sk,
            &state.tokenizer,
        )?;
        let tokens: Vec<&str> = o.sk_tokens.iter().map(|&t| state.tokenizer.word(t)).collect();
        let gk = dir.join(format!("{id}_gk.tsv"));
        let sk = dir.join(format!("{id}_sk.tsv"));
        write_matrix(&gk, &nodes, &o.attn_gk)?;
        write_matrix(&sk, &tokens, &o.attn_sk)?;
        let line = json!({
            "id": id,
            "attn_gk": gk.file_name().and_then(|n| n.to_str()),
            "attn_sk": sk.file_name().and_then(|n| n.to_str()),
            "retrieved_ids": o.retrieved_ids,
            "triplets": o.triplets.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            "mlc_scores": o.mlc_scores.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
        });
        write_line(&mut index, &index_path, &line.to_string())?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    println!("wrote attention for {} images to {}", indices.len(), dir.display());
    Ok(0)
}

fn gradcheck_cmd(cfg: &RunConfig) -> Result<u8> {
    let r = gradcheck::run(&cfg.gradcheck)?;
    let mut worst: Vec<_> = r.checks.iter().collect();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    for c in worst.iter().take(10) {
        println!(
            "{:<4} {:<32} {:?} analytic {:+.6e} numeric {:+.6e} rel {:.2e}",
            c.loss, c.param, c.index, c.analytic, c.numeric, c.rel_error
        );
    }
    println!(
        "{} entries, max relative error {:.3e} (tolerance {:.1e}); mlc reaches gk cross: {}; lm ignores labels: {}",
        r.checks.len(),
        r.max_rel_error,
        r.tolerance,
        r.mlc_reaches_gk_cross,
        r.lm_ignores_labels
    );
    write_json(&cfg.run.out_dir.join("gradcheck.json"), &serde_json::to_value(&r)?)?;
    if r.passed() {
        println!("gradcheck passed");
        Ok(0)
    } else {
        println!("gradcheck FAILED");
        Ok(3)
    }
}
