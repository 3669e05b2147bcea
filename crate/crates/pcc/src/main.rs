use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pcc::checkpoint::Checkpoint;
use pcc::cluster::{
    generate_clusters, CategoryList, ClusterAssignment, PromptTemplates, StopCondition,
};
use pcc::config::RunConfig;
use pcc::data::synth::{generate_synthetic, SyntheticSpec};
use pcc::data::voc::ingest_voc_style;
use pcc::data::Split;
use pcc::error::{PccError, Result};
use pcc::fusion::FusionMode;
use pcc::llm::{default_cache_path, CacheStore, LlmBackend, LlmGateway, MockScript};
use pcc::miou::ConfusionAccumulator;
use pcc::pipeline::{compare_fusion_modes, generate_pseudo_labels, run_pipeline};
use pcc::pseudo::{load_mask_map, PseudoLabelMap};
use pcc::train::train;

#[derive(Parser)]
#[command(
    name = "pcc",
    version,
    about = "Weakly supervised segmentation: cluster class tags, train a patch classifier, emit pseudo-label masks, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum BackendKind {
    /// Replay recorded responses from a script file; no network.
    Mock,
    /// Talk to a chat-completions HTTP endpoint.
    Live,
}

#[derive(Subcommand)]
enum Command {
    /// Group a category list into tag clusters with a language model.
    Cluster {
        /// Text file, one category name per line ('#' comments allowed).
        #[arg(long)]
        categories: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        /// Destination for the cluster map (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Recorded responses for the mock backend.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Model identifier sent with each request.
        #[arg(long, default_value = "default-model")]
        model: String,
        /// Endpoint URL for the live backend (or set LLM_ENDPOINT).
        #[arg(long)]
        endpoint: Option<String>,
        /// Response cache file for the live backend.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Generation prompt template file (must name {categories}).
        #[arg(long, requires = "refine_template")]
        gen_template: Option<PathBuf>,
        /// Refinement prompt template file (must name {previous}).
        #[arg(long, requires = "gen_template")]
        refine_template: Option<PathBuf>,
        /// Consecutive identical iterates required to stop.
        #[arg(long, default_value_t = 2)]
        stability_window: usize,
        /// Hard cap on refinement iterations.
        #[arg(long, default_value_t = 10)]
        max_iterations: usize,
    },
    /// Train the patch classifier described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write pseudo-label masks for a dataset split from a checkpoint.
    Pseudo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to label: train or val.
        #[arg(long, default_value = "train")]
        split: String,
        /// Refine the masks with the dense pairwise smoother.
        #[arg(long)]
        crf: bool,
        /// Output directory (default: <outputs>/pseudo_<fusion_mode>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against ground-truth masks.
    Eval {
        /// Directory of predicted mask PNGs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth mask PNGs; defines the evaluated set.
        #[arg(long)]
        gt: PathBuf,
        /// Optional class-name file (one foreground name per line).
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Label value excluded from scoring.
        #[arg(long, default_value_t = 255)]
        ignore: u8,
    },
    /// Render a synthetic shape dataset from a spec file.
    Synth {
        /// Dataset spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Directory to write the dataset tree into.
        #[arg(long)]
        out: PathBuf,
    },
    /// End to end: load clusters, train, pseudo-label, evaluate.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run twice (fusion_mode none and cluster_token) and write a
        /// side-by-side comparison of the two reports.
        #[arg(long)]
        compare_fusion: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Cluster {
            categories,
            backend,
            out,
            script,
            model,
            endpoint,
            cache,
            gen_template,
            refine_template,
            stability_window,
            max_iterations,
        } => cmd_cluster(
            &categories,
            backend,
            &out,
            script.as_deref(),
            &model,
            endpoint,
            cache,
            gen_template.as_deref(),
            refine_template.as_deref(),
            stability_window,
            max_iterations,
        ),
        Command::Train { config } => cmd_train(&config),
        Command::Pseudo { checkpoint, split, crf, out } => {
            cmd_pseudo(&checkpoint, &split, crf, out)
        }
        Command::Eval { pred, gt, classes, ignore } => {
            cmd_eval(&pred, &gt, classes.as_deref(), ignore)
        }
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Run { config, compare_fusion } => cmd_run(&config, compare_fusion),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_cluster(
    categories: &std::path::Path,
    backend: BackendKind,
    out: &std::path::Path,
    script: Option<&std::path::Path>,
    model: &str,
    endpoint: Option<String>,
    cache: Option<PathBuf>,
    gen_template: Option<&std::path::Path>,
    refine_template: Option<&std::path::Path>,
    stability_window: usize,
    max_iterations: usize,
) -> Result<()> {
    let names: Vec<String> = fs::read_to_string(categories)
        .map_err(|e| PccError::format(format!("{}: {e}", categories.display())))?
        .lines()
        .map(str::trim)
        .filter(|line| !line.is_empty() && !line.starts_with('#'))
        .map(String::from)
        .collect();
    let list = CategoryList::new(names)?;

    let templates = match (gen_template, refine_template) {
        (Some(g), Some(r)) => PromptTemplates::load(g, r)?,
        (None, None) => PromptTemplates::default(),
        _ => unreachable!("clap enforces the pair"),
    };

    let gateway = match backend {
        BackendKind::Mock => {
            let script_path = script.ok_or_else(|| {
                PccError::config("the mock backend needs --script <recorded responses>")
            })?;
            LlmGateway::mock(model, MockScript::load(script_path)?)
        }
        BackendKind::Live => {
            let endpoint = endpoint
                .or_else(|| std::env::var("LLM_ENDPOINT").ok())
                .ok_or_else(|| {
                    PccError::config("the live backend needs --endpoint or LLM_ENDPOINT")
                })?;
            let backend = LlmBackend::new("cli", endpoint, model)?;
            let store = CacheStore::at_path(cache.unwrap_or_else(default_cache_path))?;
            LlmGateway::http(backend, store)?
        }
    };

    let stop = StopCondition::new(stability_window, max_iterations)?;
    let assignment = generate_clusters(&list, &gateway, &templates, stop)?;
    assignment.save(out)?;

    print!("{}", assignment.to_line_format());
    println!(
        "{} categories -> {} clusters after {} iteration(s){}; map written to {}",
        list.len(),
        assignment.num_clusters(),
        assignment.iteration_index + 1,
        if assignment.stalled { " (stalled at the iteration cap)" } else { "" },
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &std::path::Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate_paths()?;
    let manifest = ingest_voc_style(&cfg.paths.dataset, Split::Train)?;
    let assignment = match cfg.fusion_mode {
        FusionMode::ClusterToken => {
            let path = cfg.paths.cluster_map.as_ref().expect("validated");
            Some(ClusterAssignment::load(path)?)
        }
        _ => None,
    };
    let outcome = train(&cfg, &manifest, assignment.as_ref())?;
    match outcome.final_loss() {
        Some(loss) => println!(
            "trained epochs {}..={} on {} images; final loss {loss:.6}",
            outcome.start_epoch + 1,
            outcome.start_epoch + outcome.epochs_run,
            manifest.len()
        ),
        None => println!("nothing to do: checkpoint already covers {} epochs", cfg.max_epochs),
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics:    {}", outcome.metrics_path.display());
    Ok(())
}

fn cmd_pseudo(
    checkpoint: &std::path::Path,
    split: &str,
    crf: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let split: Split = split.parse()?;
    let manifest = ingest_voc_style(&ckpt.config.paths.dataset, split)?;
    let assignment = match ckpt.config.fusion_mode {
        FusionMode::ClusterToken => {
            let path = ckpt.config.paths.cluster_map.as_ref().ok_or_else(|| {
                PccError::config(
                    "checkpoint was trained with cluster_token fusion but names no cluster map",
                )
            })?;
            Some(ClusterAssignment::load(path)?)
        }
        _ => None,
    };
    let apply_crf = crf || ckpt.config.apply_crf;
    let out_dir = out.unwrap_or_else(|| {
        ckpt.config.paths.outputs.join(format!("pseudo_{}", ckpt.config.fusion_mode))
    });
    generate_pseudo_labels(&ckpt, &manifest, assignment.as_ref(), apply_crf, &out_dir)?;
    println!(
        "wrote {} pseudo-label mask(s){} to {}",
        manifest.len(),
        if apply_crf { " (smoothed)" } else { "" },
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    pred: &std::path::Path,
    gt: &std::path::Path,
    classes: Option<&std::path::Path>,
    ignore: u8,
) -> Result<()> {
    let mut ids: Vec<String> = fs::read_dir(gt)
        .map_err(|e| PccError::format(format!("{}: {e}", gt.display())))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().is_some_and(|ext| ext == "png") {
                Some(path.file_stem()?.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(PccError::config(format!(
            "no ground-truth .png masks found in {}",
            gt.display()
        )));
    }

    let mut pairs: Vec<(PseudoLabelMap, PseudoLabelMap)> = Vec::with_capacity(ids.len());
    for id in &ids {
        let gt_map = load_mask_map(&gt.join(format!("{id}.png")), id)?;
        let pred_map = load_mask_map(&pred.join(format!("{id}.png")), id)?;
        pairs.push((pred_map, gt_map));
    }

    let class_names: Option<Vec<String>> = match classes {
        Some(path) => {
            let mut names = vec!["background".to_string()];
            names.extend(
                fs::read_to_string(path)
                    .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?
                    .lines()
                    .map(str::trim)
                    .filter(|line| !line.is_empty())
                    .map(String::from),
            );
            Some(names)
        }
        None => None,
    };
    let num_classes = match &class_names {
        Some(names) => names.len(),
        None => {
            let max_label = pairs
                .iter()
                .flat_map(|(p, g)| p.labels().iter().chain(g.labels().iter()))
                .filter(|&&l| l != ignore)
                .max()
                .copied()
                .unwrap_or(0);
            usize::from(max_label) + 1
        }
    };

    let mut acc = ConfusionAccumulator::new(num_classes, Some(ignore));
    for (pred_map, gt_map) in &pairs {
        acc.add(pred_map, gt_map)?;
    }
    let report = acc.report();
    print!("{}", report.text_table(class_names.as_deref()));
    println!("scored {} image(s), {} pixel(s)", ids.len(), report.evaluated_pixels);
    Ok(())
}

fn cmd_synth(spec: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let spec = SyntheticSpec::load(spec)?;
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "rendered {} training image(s), classes [{}], into {}",
        manifest.len(),
        manifest.classes.join(", "),
        out.display()
    );
    if spec.val_fraction > 0.0 {
        let val = ingest_voc_style(out, Split::Val)?;
        println!("plus {} validation image(s) with masks", val.len());
    }
    Ok(())
}

fn cmd_run(config: &std::path::Path, compare_fusion: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if compare_fusion {
        let (plain, clustered) = compare_fusion_modes(&cfg)?;
        print!("{}", fs::read_to_string(cfg.paths.outputs.join("comparison.txt"))?);
        println!(
            "reports: {} / {}",
            plain.report_path.display(),
            clustered.report_path.display()
        );
    } else {
        let outcome = run_pipeline(&cfg)?;
        let summary = cfg.paths.outputs.join(format!("report_{}.txt", outcome.fusion_mode));
        print!("{}", fs::read_to_string(summary)?);
        println!("report: {}", outcome.report_path.display());
    }
    Ok(())
}
