use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use antkit::dataset::{ingest_annotations, make_all_lta_instances, write_instances, Split};
use antkit::metrics::{read_predictions, write_predictions};
use antkit::pipeline::{
    build_client, collect_rows, evaluate_instances, find_runs, goal_jobs, infer_goals, load_dataset, predict_local,
    render_table, rerun_from_manifest, resolve_backend, run_counterfactual_experiment, run_experiment, train_local,
    Approach, Dataset, ExperimentConfig, LocalModel, SyntheticCorpus,
};
use antkit::{Error, ErrorClass, LabelRendering, Result, Taxonomy};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "antkit", version, about = "Long-term action anticipation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Map every LLM output word to the vocabulary unconditionally and keep
    /// commas as the only separator.
    #[arg(long, global = true)]
    strict_paper: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a taxonomy and annotation file and dump anticipation instances.
    Ingest {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_seg: usize,
        #[arg(long, default_value_t = 20)]
        z: usize,
        /// Instance dump; omitted prints only a summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic corpus described by a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured local model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict test instances with a trained local model.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against the configured test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Infer a goal for each test instance with the configured LLM.
    GoalInfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Chain-of-thought anticipation with the configured LLM.
    Cot {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-predict each test instance under a swapped goal.
    Counterfactual {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train teacher, scratch and distilled students and compare them.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write fine-tuning samples as JSONL.
    ExportFinetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the experiment recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate finished runs under a directory.
    Report {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Emit JSON rows instead of a markdown table.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: &Path, strict: bool) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    c.apply_env(std::env::vars())?;
    c.llm.postprocess.strict_paper |= strict;
    c.validate()?;
    Ok(c)
}

fn with_approach(path: &Path, approach: Approach, strict: bool) -> Result<ExperimentConfig> {
    let mut c = load_config(path, strict)?;
    c.approach = approach;
    c.validate()?;
    Ok(c)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn test_instances(c: &ExperimentConfig, d: &Dataset) -> Result<Vec<antkit::dataset::LtaInstance>> {
    let test = d.instances(d.eval_split(), c.n_seg, c.z)?;
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    antkit::pipeline::recognize(&test, c.recognition_noise, c.seed, &d.taxonomy)
}

fn execute(command: Command, strict: bool) -> Result<()> {
    match command {
        Command::Ingest { taxonomy, annotations, n_seg, z, out } => {
            let tax = Taxonomy::load(&taxonomy)?;
            let videos = ingest_annotations(&annotations, &tax)?;
            let instances = make_all_lta_instances(&videos, n_seg, z)?;
            let count = |s: Split| instances.iter().filter(|i| i.split == s).count();
            print_json(&serde_json::json!({
                "videos": videos.len(),
                "verbs": tax.num_verbs(),
                "nouns": tax.num_nouns(),
                "taxonomy_fingerprint": tax.fingerprint(),
                "instances": { "train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test) },
            }))?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                write_instances(&mut w, &instances, &tax).and_then(|_| w.flush()).map_err(|e| Error::io(&out, e))?;
            }
        }
        Command::Synth { config, out } => {
            let c = load_config(&config, strict)?;
            if c.data.synthetic.is_none() {
                return Err(Error::Config("config has no synthetic data section".into()));
            }
            let d = load_dataset(&c.data)?;
            SyntheticCorpus { taxonomy: d.taxonomy, videos: d.videos }.write(&out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Train { config, out } => {
            let c = load_config(&config, strict)?;
            let d = load_dataset(&c.data)?;
            let train = d.instances(Split::Train, c.n_seg, c.z)?;
            let model = train_local(&c.model, c.precision, &train, &d.taxonomy, c.approach == Approach::TopDownLocal)?;
            let path = out.unwrap_or_else(|| c.output_dir.join(&c.name).join(model.file_name()));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            model.save(&path)?;
            println!("{}", path.display());
        }
        Command::Predict { config, model, out } => {
            let c = load_config(&config, strict)?;
            let d = load_dataset(&c.data)?;
            let m = LocalModel::load(&model)?;
            m.check_taxonomy(&d.taxonomy)?;
            let test = test_instances(&c, &d)?;
            let goals: Option<BTreeMap<String, String>> = m
                .as_model()
                .goal_conditioned()
                .then(|| test.iter().filter_map(|i| i.goal.clone().map(|g| (i.id(), g))).collect());
            let preds = predict_local(m.as_model(), &test, c.z, c.k, c.strategy, goals.as_ref())?;
            let mut w = create(&out)?;
            write_predictions(&mut w, &preds, &d.taxonomy).and_then(|_| w.flush()).map_err(|e| Error::io(&out, e))?;
        }
        Command::Evaluate { config, predictions } => {
            let c = load_config(&config, strict)?;
            let d = load_dataset(&c.data)?;
            let file = std::fs::File::open(&predictions).map_err(|e| Error::io(&predictions, e))?;
            let preds = read_predictions(std::io::BufReader::new(file), &d.taxonomy)?;
            print_json(&evaluate_instances(&preds, &test_instances(&c, &d)?)?)?;
        }
        Command::GoalInfer { config, out } => {
            let c = load_config(&config, strict)?;
            let d = load_dataset(&c.data)?;
            let train = d.instances(Split::Train, c.n_seg, c.z)?;
            let test = test_instances(&c, &d)?;
            let rendering = LabelRendering::new(&d.taxonomy, c.rendering);
            let jobs = goal_jobs(&c, &test, &train, &rendering)?;
            let dir = c.output_dir.join(&c.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let client = build_client(&c.llm, resolve_backend(&c.llm, &jobs, &rendering, c.z), &dir)?;
            let goals = infer_goals(&client, &jobs)?;
            let mut w = create(&out)?;
            for i in &test {
                let line = serde_json::json!({ "instance_id": i.id(), "goal": goals[&i.id()], "annotated": i.goal });
                writeln!(w, "{line}").map_err(|e| Error::io(&out, e))?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
        }
        Command::Run { config } => print_json(&run_experiment(&load_config(&config, strict)?, None)?.report)?,
        Command::Cot { config } => {
            print_json(&run_experiment(&with_approach(&config, Approach::LlmCot, strict)?, None)?.report)?
        }
        Command::Counterfactual { config } => {
            let (dir, report) = run_counterfactual_experiment(&load_config(&config, strict)?, None)?;
            print_json(&serde_json::json!({
                "dir": dir,
                "pairs": report.records.len(),
                "mean_divergence": report.mean_divergence,
                "control_divergence": report.control_divergence,
            }))?;
        }
        Command::Distill { config } => {
            let report = run_experiment(&with_approach(&config, Approach::Distill, strict)?, None)?.report;
            print_json(&report.distill)?;
        }
        Command::ExportFinetune { config } => {
            let out = run_experiment(&with_approach(&config, Approach::LlmFinetuneExport, strict)?, None)?;
            println!("{} samples in {}", out.report.exported_samples.unwrap_or(0), out.dir.display());
        }
        Command::Rerun { manifest, out } => print_json(&rerun_from_manifest(&manifest, &out, None)?.report)?,
        Command::Report { runs, json } => {
            let rows = collect_rows(&find_runs(&runs)?)?;
            if json {
                print_json(&rows)?;
            } else {
                print!("{}", render_table(&rows));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Endpoint => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command, cli.strict_paper) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
