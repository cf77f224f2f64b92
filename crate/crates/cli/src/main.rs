//! `dualseq`: generate cohorts, pretrain, train, evaluate and inspect models.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualseq::baselines::BaselineKind;
use dualseq::config::RunConfig;
use dualseq::data::{read_cohort, write_cohort, Cohort};
use dualseq::interpret::{export_embedding, feature_relevance, latent_points, tsne, write_relevance_csv, Aggregation};
use dualseq::model::{pretrain_input_nets, Branch, Model};
use dualseq::synth::{generate_cohort, write_latents};
use dualseq::train::{
    stratified_report, train, write_history_csv, write_report_csv, write_report_json, ModelFamily,
};
use dualseq::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "dualseq", version, about = "Dual recurrent classifier for paired event sequences")]
struct Cli {
    /// TOML run configuration; missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate a synthetic cohort (cohort.jsonl, latents.jsonl).
    Gen,
    /// Pretrain the input nets of a fresh model (pretrained.json).
    Pretrain {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        family: FamilyArgs,
    },
    /// Train a model on a whole cohort (model.json, history.csv).
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Start from this checkpoint instead of a fresh, pretrained model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        family: FamilyArgs,
    },
    /// Stratified k-fold evaluation (report.csv, report.json, history_fold<k>.csv).
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        family: FamilyArgs,
        /// Run folds on separate threads; results are identical.
        #[arg(long)]
        parallel: bool,
    },
    /// Rank input features by first-layer weights (relevance_<branch>.csv).
    Relevance {
        #[arg(long)]
        model: PathBuf,
        /// Cohort whose header supplies feature names.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "l2")]
        aggregation: AggregationArg,
        /// Features printed per branch.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// t-SNE of the merged latent vectors (embedding.csv).
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Whole patients are taken in cohort order until this many visits.
        #[arg(long, default_value_t = 3000)]
        max_points: usize,
    },
}

#[derive(Debug, Clone, Args)]
struct FamilyArgs {
    /// Attention window over previous patient outputs.
    #[arg(long, conflicts_with_all = ["no_attention", "baseline"])]
    attention: Option<usize>,
    #[arg(long, conflicts_with = "baseline")]
    no_attention: bool,
    /// Remove a branch; its slot in the merged vector stays zero.
    #[arg(long, value_enum, conflicts_with = "baseline")]
    ablate: Vec<BranchArg>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Skip input-net pretraining.
    #[arg(long, conflicts_with = "baseline")]
    no_pretrain: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BranchArg {
    Clinician,
    Patient,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Clinician => Branch::Clinician,
            BranchArg::Patient => Branch::Patient,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineArg {
    Logreg,
    #[value(alias = "ffnn")]
    Nn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    L2,
    Absmax,
}

impl FamilyArgs {
    fn family(&self, cfg: &RunConfig) -> ModelFamily {
        if let Some(b) = self.baseline {
            let kind = match b {
                BaselineArg::Logreg => BaselineKind::LogReg,
                BaselineArg::Nn => BaselineKind::Ffnn,
            };
            return ModelFamily::Baseline { kind };
        }
        let mut model = cfg.model.clone();
        if let Some(window) = self.attention {
            model.attention = window;
        }
        if self.no_attention {
            model.attention = 0;
        }
        ModelFamily::Sequential {
            model,
            ablate: self.ablate.iter().map(|b| Branch::from(*b)).collect(),
            pretrain: (!self.no_pretrain).then(|| cfg.pretrain.clone()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Json(_) => EXIT_VALIDATION,
                e if e.is_validation() => EXIT_VALIDATION,
                _ => 1,
            })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    Ok(cli.out.join(name))
}

fn fresh_model(cfg: &RunConfig, cohort: &Cohort, family: &ModelFamily) -> Result<Model> {
    let ModelFamily::Sequential { model, ablate, pretrain } = family else {
        return Err(Error::Validation("baselines have no input nets to pretrain; use `evaluate`".into()));
    };
    let mut net = Model::new(model.normalized_for(&cohort.header), cohort.k_c(), cohort.k_p(), cfg.train.seed)?;
    for branch in ablate {
        net.ablate(*branch);
    }
    if let Some(p) = pretrain {
        pretrain_input_nets(&mut net, cohort, p, cfg.train.seed)?;
    }
    Ok(net)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
        }
        Command::Gen => {
            let output = generate_cohort(&cfg.synth)?;
            let path = out_path(cli, "cohort.jsonl")?;
            write_cohort(&output.cohort, &path)?;
            write_latents(&output.latents, &out_path(cli, "latents.jsonl")?)?;
            log::info!(
                "wrote {} patients ({} visits) to {}",
                output.cohort.records.len(),
                output.cohort.n_visits(),
                path.display()
            );
        }
        Command::Pretrain { cohort, family } => {
            let cohort = read_cohort(cohort)?;
            let mut family = family.family(&cfg);
            if let ModelFamily::Sequential { pretrain, .. } = &mut family {
                pretrain.get_or_insert_with(|| cfg.pretrain.clone());
            }
            let model = fresh_model(&cfg, &cohort, &family)?;
            model.save(&out_path(cli, "pretrained.json")?)?;
        }
        Command::Train { cohort, init, family } => {
            let cohort = read_cohort(cohort)?;
            let family = family.family(&cfg);
            let mut model = match init {
                Some(path) => {
                    let mut model = Model::load(path)?;
                    if let ModelFamily::Sequential { ablate, .. } = &family {
                        ablate.iter().for_each(|b| model.ablate(*b));
                    }
                    model
                }
                None => fresh_model(&cfg, &cohort, &family)?,
            };
            let records: Vec<_> = cohort.records.iter().collect();
            let history = train(&mut model, &records, &cfg.train)?;
            model.save(&out_path(cli, "model.json")?)?;
            write_history_csv(&history, &out_path(cli, "history.csv")?)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                log::info!("loss {first:.4} -> {last:.4} over {} epochs", history.len() - 1);
            }
        }
        Command::Evaluate { cohort, family, parallel } => {
            let cohort = read_cohort(cohort)?;
            let family = family.family(&cfg);
            let report = stratified_report(&family, &cohort, &cfg.train, *parallel)?;
            write_report_csv(std::slice::from_ref(&report), &out_path(cli, "report.csv")?)?;
            write_report_json(std::slice::from_ref(&report), &out_path(cli, "report.json")?)?;
            for (k, fold) in report.folds.iter().enumerate() {
                if !fold.history.is_empty() {
                    write_history_csv(&fold.history, &out_path(cli, &format!("history_fold{k}.csv"))?)?;
                }
            }
            for metric in ["recall", "precision", "auc"] {
                if let Some(s) = report.get(metric, "all") {
                    log::info!("{} {metric} (all): {}", report.model, s.cell());
                }
            }
        }
        Command::Relevance { model, cohort, aggregation, top } => {
            let model = Model::load(model)?;
            let header = cohort.as_deref().map(read_cohort).transpose()?.map(|c| c.header);
            let aggregation = match aggregation {
                AggregationArg::L2 => Aggregation::L2,
                AggregationArg::Absmax => Aggregation::AbsMax,
            };
            for branch in [Branch::Clinician, Branch::Patient] {
                if model.is_ablated(branch) {
                    log::warn!("{branch} branch is ablated; no relevance table written");
                    continue;
                }
                let names = header.as_ref().map_or(&[][..], |h| match branch {
                    Branch::Clinician => &h.feature_names_c[..],
                    Branch::Patient => &h.feature_names_p[..],
                });
                let ranked = feature_relevance(&model, branch, aggregation, names)?;
                write_relevance_csv(&ranked, &out_path(cli, &format!("relevance_{branch}.csv"))?)?;
                println!("{branch}:");
                for r in ranked.iter().take(*top) {
                    println!("  {:.2}  {}", r.score, r.feature);
                }
            }
        }
        Command::Embed { model, cohort, perplexity, iters, max_points } => {
            let model = Model::load(model)?;
            let cohort = take_visits(read_cohort(cohort)?, *max_points)?;
            let points = latent_points(&model, &cohort)?;
            let mut tsne_cfg = cfg.tsne.clone();
            tsne_cfg.perplexity = perplexity.unwrap_or(tsne_cfg.perplexity);
            tsne_cfg.iters = iters.unwrap_or(tsne_cfg.iters);
            let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
            let result = tsne(&vectors, &tsne_cfg)?;
            export_embedding(&result.coords, &points, &out_path(cli, "embedding.csv")?)?;
            if let Some(kl) = result.kl_history.last() {
                log::info!("embedded {} visits, final KL {kl:.4}", points.len());
            }
        }
    }
    Ok(())
}

fn take_visits(mut cohort: Cohort, max_points: usize) -> Result<Cohort> {
    let mut total = 0;
    let keep = cohort
        .records
        .iter()
        .take_while(|r| {
            total += r.visits.len();
            total <= max_points
        })
        .count();
    if keep == 0 {
        return Err(Error::Validation(format!("--max-points {max_points} is smaller than the first patient")));
    }
    if keep < cohort.records.len() {
        log::warn!("embedding the first {keep} of {} patients to stay within {max_points} visits", cohort.records.len());
        cohort.records.truncate(keep);
    }
    Ok(cohort)
}
