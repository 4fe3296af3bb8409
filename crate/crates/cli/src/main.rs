//! `dexprior` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dexprior::checkpoint::{self, load_agent};
use dexprior::config::RunConfig;
use dexprior::synergy::{best_nnmf, cross_task_overlap, vaf_curve, activation_matrix, OverlapMatrix};
use dexprior::tasks::{generate_suite, make_splits, suite_stats, SplitMode, SuiteFile, TaskSpec};
use dexprior::workflows::{
    self, read_csv, transfer_report, transfer_summary_csv, transfer_table, transfer_tasks_csv, write_csv,
    ExperimentRecord, NoiseEvalRow, RunKind, RunManifest, TransferRun,
};

#[derive(Parser)]
#[command(name = "dexprior", version, about = "Multi-task behavioral priors for a muscle-driven arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: the run seed for training and evaluation, the suite
    /// seed for `suite`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite, its statistics and the train/held-out split.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an expert, the multi-task prior, a fine-tuned policy or a student.
    Train {
        #[command(subcommand)]
        mode: TrainMode,
    },
    /// Deterministic evaluation of a checkpoint across observation-noise levels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task ids; defaults to the tasks recorded with the checkpoint.
        #[arg(long = "task", value_delimiter = ',')]
        tasks: Vec<String>,
        /// Noise standard deviations in millimeters.
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate completed run directories.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum TrainMode {
    Expert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Prior {
        #[command(flatten)]
        common: Common,
        /// Training tasks; defaults to the configured split.
        #[arg(long = "task", value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Distill {
        #[command(flatten)]
        common: Common,
        /// Expert run directories; each contributes its best checkpoint on its task.
        #[arg(long = "expert", required = true, value_delimiter = ',')]
        experts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportKind {
    /// Solved counts, success and iterations-to-solve per method.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long = "run", value_delimiter = ',')]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task synergy overlap for a prior and/or per-task experts, plus VAF curves.
    Synergy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long = "expert", value_delimiter = ',')]
        experts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success against noise level over evaluation outputs.
    Noise {
        #[command(flatten)]
        common: Common,
        #[arg(long = "run", value_delimiter = ',')]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn run_seed(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.or_else(|| cfg.workflow.seeds.first().copied()).unwrap_or(0)
}

fn suite(cfg: &RunConfig) -> Result<Vec<TaskSpec>> {
    Ok(generate_suite(&cfg.tasks, &cfg.plant)?)
}

fn find_tasks(suite: &[TaskSpec], ids: &[String]) -> Result<Vec<TaskSpec>> {
    ids.iter()
        .map(|id| {
            suite.iter().find(|t| &t.id == id).cloned().ok_or_else(|| dexprior::Error::UnknownTask(id.clone()).into())
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_suite(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.tasks.seed = s;
    }
    let suite = suite(&cfg)?;
    if suite.is_empty() {
        bail!(dexprior::Error::EmptySuite);
    }
    let stats = suite_stats(&suite)?;
    write(&out.join("suite.toml"), &SuiteFile { tasks: suite.clone() }.to_toml())?;
    let mut csv = String::from("task,family,pos_std,rot_std\n");
    for (t, s) in suite.iter().zip(&stats.per_task) {
        csv.push_str(&format!("{},{},{},{}\n", t.id, t.family, s.pos_std, s.rot_std));
    }
    write(&out.join("suite_stats.csv"), &csv)?;

    let mut splits = String::from("mode,task,set\n");
    for mode in [SplitMode::Diverse, SplitMode::Homogeneous] {
        let name = if mode == SplitMode::Diverse { "diverse" } else { "homogeneous" };
        match make_splits(&suite, mode, cfg.tasks.split_k, cfg.tasks.seed) {
            Ok(split) => {
                println!("{name}: {} train / {} held out", split.train.len(), split.heldout.len());
                println!("  train: {}", split.train.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join(" "));
                for (set, tasks) in [("train", &split.train), ("heldout", &split.heldout)] {
                    for t in tasks.iter() {
                        splits.push_str(&format!("{name},{},{set}\n", t.id));
                    }
                }
            }
            Err(e) => println!("{name}: unavailable ({e})"),
        }
    }
    write(&out.join("splits.csv"), &splits)?;
    println!("{} tasks written to {}", suite.len(), out.display());
    Ok(())
}

fn print_outcome(rec: &ExperimentRecord) {
    let m = &rec.manifest;
    println!(
        "{} run finished: {} iterations, best success {:.3} at iteration {}, output in {}",
        m.kind.name(),
        m.iterations_completed,
        m.best_success,
        m.best_iteration,
        rec.run_dir.display()
    );
}

fn cmd_train(mode: &TrainMode) -> Result<()> {
    match mode {
        TrainMode::Expert { common, task, iters, out } => {
            let cfg = load_config(common)?;
            let task = find_tasks(&suite(&cfg)?, std::slice::from_ref(task))?.remove(0);
            let n = iters.unwrap_or(cfg.workflow.expert_iters);
            let o = workflows::train_expert(&task, &cfg, run_seed(common, &cfg), n, out)?;
            print_outcome(&o.record);
        }
        TrainMode::Prior { common, tasks, iters, out } => {
            let cfg = load_config(common)?;
            let suite = suite(&cfg)?;
            let train = if tasks.is_empty() {
                make_splits(&suite, cfg.tasks.split_mode, cfg.tasks.split_k, cfg.tasks.seed)?.train
            } else {
                find_tasks(&suite, tasks)?
            };
            let n = iters.unwrap_or(cfg.workflow.prior_iters);
            let milestones = if iters.is_some() && cfg.workflow.milestones.is_empty() {
                workflows::default_milestones(n)
            } else {
                cfg.workflow.prior_milestones()
            };
            let o = workflows::train_prior(&train, &cfg, run_seed(common, &cfg), n, &milestones, out)?;
            print_outcome(&o.record);
        }
        TrainMode::Finetune { common, prior, task, iters, out } => {
            let cfg = load_config(common)?;
            let task = find_tasks(&suite(&cfg)?, std::slice::from_ref(task))?.remove(0);
            let n = iters.unwrap_or(cfg.workflow.finetune_iters);
            let o = workflows::finetune(prior, &task, &cfg, run_seed(common, &cfg), n, out).map_err(|e| {
                let label = common.config.as_ref().map_or("<defaults>".to_string(), |p| p.display().to_string());
                anyhow::Error::new(e).context(format!("fine-tuning under config {label}"))
            })?;
            print_outcome(&o.record);
        }
        TrainMode::Distill { common, experts, out } => {
            let cfg = load_config(common)?;
            let suite = suite(&cfg)?;
            let mut pairs = Vec::new();
            for dir in experts {
                let (ckpt, m) = best_checkpoint(dir)?;
                if m.task_ids.len() != 1 {
                    bail!("{} is not a single-task run", dir.display());
                }
                pairs.push((ckpt, find_tasks(&suite, &m.task_ids)?.remove(0)));
            }
            let o = workflows::distill(&pairs, &cfg, run_seed(common, &cfg), out)?;
            println!(
                "student trained on {} pairs, final mse {:.5}, checkpoint {}",
                o.dataset_size,
                o.rows.last().map_or(f64::NAN, |r| r.mse),
                o.checkpoint.display()
            );
        }
    }
    Ok(())
}

fn completed_manifest(dir: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(dir)?;
    if !m.completed {
        bail!("run {} is incomplete", dir.display());
    }
    Ok(m)
}

fn best_checkpoint(dir: &Path) -> Result<(PathBuf, RunManifest)> {
    let m = completed_manifest(dir)?;
    let rel = m
        .best_checkpoint
        .clone()
        .or_else(|| m.final_checkpoint.clone())
        .with_context(|| format!("run {} lists no checkpoint", dir.display()))?;
    Ok((dir.join(rel), m))
}

fn final_checkpoint(dir: &Path) -> Result<(PathBuf, RunManifest)> {
    let m = completed_manifest(dir)?;
    let rel = m.final_checkpoint.clone().with_context(|| format!("run {} lists no final checkpoint", dir.display()))?;
    Ok((dir.join(rel), m))
}

fn mm_label(mm: f64) -> String {
    format!("{mm}mm")
}

fn cmd_eval(
    common: &Common,
    ckpt: &Path,
    task_ids: &[String],
    noise: &Option<Vec<f64>>,
    episodes: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    if let Ok(existing) = RunManifest::load(out) {
        if existing.config_hash != cfg.hash() {
            bail!(
                "{} belongs to config {} but this evaluation uses config {}",
                out.display(),
                existing.config_hash,
                cfg.hash()
            );
        }
    }
    let ids = if task_ids.is_empty() { checkpoint::load_manifest(ckpt)?.task_ids } else { task_ids.to_vec() };
    let tasks = find_tasks(&suite(&cfg)?, &ids)?;
    let levels_mm = noise.clone().unwrap_or_else(|| cfg.workflow.noise_levels_mm.clone());
    let eps = episodes.unwrap_or(cfg.workflow.eval_episodes);
    let agent = load_agent(ckpt)?;
    for mm in &levels_mm {
        let mut rows = workflows::evaluate_noise_sweep(&agent, &tasks, &cfg, eps, &[mm / 1000.0], run_seed(common, &cfg))?;
        rows.iter_mut().for_each(|r| r.noise_mm = *mm);
        let path = out.join("eval").join(format!("{}.csv", mm_label(*mm)));
        write_csv(&path, &rows)?;
        let mean = rows.iter().map(|r| r.success).sum::<f64>() / rows.len().max(1) as f64;
        println!("noise {:>6} mm: mean success {:.3} over {} tasks", mm, mean, rows.len());
    }
    Ok(())
}

fn method_of(m: &RunManifest) -> String {
    match (m.kind, m.prior_kind.as_deref()) {
        (RunKind::Expert, _) => "scratch".into(),
        (RunKind::Finetune, Some("prior")) => "prior".into(),
        (RunKind::Finetune, Some("student")) => "student".into(),
        (RunKind::Finetune, Some("expert")) => "expert".into(),
        (kind, _) => kind.name().into(),
    }
}

fn cmd_report_transfer(common: &Common, runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let cfg = load_config(common)?;
    let incomplete: Vec<String> = runs
        .iter()
        .filter(|d| RunManifest::load(d).map_or(true, |m| !m.completed))
        .map(|d| d.display().to_string())
        .collect();
    if !incomplete.is_empty() {
        bail!("incomplete run directories: {}", incomplete.join(", "));
    }
    let mut groups: BTreeMap<String, Vec<TransferRun>> = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for dir in runs {
        let rec = ExperimentRecord::load(dir)?;
        hashes.entry(rec.manifest.config_hash.clone()).or_insert_with(|| dir.display().to_string());
        groups.entry(method_of(&rec.manifest)).or_default().push(TransferRun::from_record(&rec)?);
    }
    if hashes.len() > 1 {
        bail!("runs come from {} different configs: {:?}", hashes.len(), hashes);
    }
    let methods: Vec<(String, Vec<TransferRun>)> = groups.into_iter().collect();
    let summaries = transfer_report(&methods, cfg.workflow.solve_threshold)?;
    write(&out.join("transfer_tasks.csv"), &transfer_tasks_csv(&summaries))?;
    write(&out.join("transfer_summary.csv"), &transfer_summary_csv(&summaries))?;
    let table = transfer_table(&summaries);
    write(&out.join("transfer.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct VafRow {
    source: String,
    task: String,
    k: usize,
    vaf: f64,
}

#[derive(Serialize)]
struct OverlapSummaryRow {
    source: String,
    tasks: usize,
    k: usize,
    mean_overlap: f64,
}

fn cmd_report_synergy(common: &Common, prior: &Option<PathBuf>, experts: &[PathBuf], out: &Path) -> Result<()> {
    if prior.is_none() && experts.is_empty() {
        bail!("give --prior and/or --expert run directories");
    }
    let cfg = load_config(common)?;
    let seed = run_seed(common, &cfg);
    let suite = suite(&cfg)?;
    let syn = &cfg.synergy;
    let mut summary = Vec::new();
    let mut vafs = Vec::new();
    let mut saved = Vec::new();

    let mut record = |label: &str, om: &OverlapMatrix, tasks: &[TaskSpec]| -> Result<()> {
        write(&out.join(format!("overlap_{label}.csv")), &om.to_csv())?;
        summary.push(OverlapSummaryRow {
            source: label.to_string(),
            tasks: tasks.len(),
            k: syn.k,
            mean_overlap: om.mean_off_diagonal().unwrap_or(f64::NAN),
        });
        for (id, d) in om.task_ids.iter().zip(&om.decompositions) {
            saved.push((format!("{label}/{id}"), d.clone()));
        }
        Ok(())
    };

    if let Some(dir) = prior {
        let (ckpt, m) = final_checkpoint(dir)?;
        let agent = load_agent(&ckpt)?;
        let tasks = find_tasks(&suite, &m.task_ids)?;
        let om = cross_task_overlap(&[&agent], &tasks, &cfg.plant, &cfg.env, syn, seed)?;
        record("prior", &om, &tasks)?;
        for t in &tasks {
            let a = activation_matrix(&agent, t, &cfg.plant, &cfg.env, syn.rollouts, seed)?;
            for (k, v) in vaf_curve(&a, &syn.k_range, syn, seed)? {
                vafs.push(VafRow { source: "prior".into(), task: t.id.clone(), k, vaf: v });
            }
        }
    }
    if !experts.is_empty() {
        let mut agents = Vec::new();
        let mut tasks = Vec::new();
        for dir in experts {
            let (ckpt, m) = best_checkpoint(dir)?;
            agents.push(load_agent(&ckpt)?);
            tasks.extend(find_tasks(&suite, &m.task_ids)?);
        }
        let refs: Vec<_> = agents.iter().collect();
        let om = cross_task_overlap(&refs, &tasks, &cfg.plant, &cfg.env, syn, seed)?;
        record("experts", &om, &tasks)?;
        for (agent, t) in agents.iter().zip(&tasks) {
            let a = activation_matrix(agent, t, &cfg.plant, &cfg.env, syn.rollouts, seed)?;
            let d = best_nnmf(&a, syn.k, syn, seed)?;
            vafs.push(VafRow { source: "experts".into(), task: t.id.clone(), k: syn.k, vaf: d.vaf });
        }
    }
    write_csv(&out.join("overlap_summary.csv"), &summary)?;
    write_csv(&out.join("vaf_curve.csv"), &vafs)?;
    checkpoint::save_synergies(&out.join("synergies.ckpt"), &saved)?;
    for s in &summary {
        println!("{}: mean pairwise overlap {:.3} over {} tasks (k = {})", s.source, s.mean_overlap, s.tasks, s.k);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct NoiseSummaryRow {
    noise_mm: f64,
    evaluations: usize,
    success: f64,
    pos_error: f64,
}

fn cmd_report_noise(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        bail!("no evaluation directories given");
    }
    let mut acc: BTreeMap<u64, (f64, usize, f64, f64)> = BTreeMap::new();
    for dir in runs {
        let eval_dir = dir.join("eval");
        let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)
            .with_context(|| format!("incomplete evaluation directory {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            let rows: Vec<NoiseEvalRow> = read_csv(&f)?;
            for r in rows {
                let e = acc.entry(r.noise_mm.to_bits()).or_insert((r.noise_mm, 0, 0.0, 0.0));
                e.1 += 1;
                e.2 += r.success;
                e.3 += r.pos_error;
            }
        }
    }
    let mut rows: Vec<NoiseSummaryRow> = acc
        .into_values()
        .map(|(mm, n, s, p)| NoiseSummaryRow { noise_mm: mm, evaluations: n, success: s / n as f64, pos_error: p / n as f64 })
        .collect();
    rows.sort_by(|a, b| a.noise_mm.total_cmp(&b.noise_mm));
    write_csv(&out.join("noise.csv"), &rows)?;
    for r in &rows {
        println!("noise {:>6} mm: success {:.3}, position error {:.4} m", r.noise_mm, r.success, r.pos_error);
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEXPRIOR_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DEXPRIOR_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Suite { common, out } => cmd_suite(common, out),
        Command::Train { mode } => cmd_train(mode),
        Command::Eval { common, checkpoint, tasks, noise, episodes, out } => {
            cmd_eval(common, checkpoint, tasks, noise, *episodes, out)
        }
        Command::Report { kind } => match kind {
            ReportKind::Transfer { common, runs, out } => cmd_report_transfer(common, runs, out),
            ReportKind::Synergy { common, prior, experts, out } => cmd_report_synergy(common, prior, experts, out),
            ReportKind::Noise { runs, out, .. } => cmd_report_noise(runs, out),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
