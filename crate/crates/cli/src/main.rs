//! `mvp`: run motion-vector box propagation over videos, ablate its
//! components, generate synthetic scenes and score predictions.

mod config;
mod run;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use mvp_core::detector::write_detection_records;
use mvp_core::evalkit::{
    evaluate, import_vid_annotations, read_prediction_records, write_gt_records, EvalOptions,
};
use mvp_core::mvstream::{extract_mvs, write_mv_dump, Extractor};
use mvp_core::scheduler::PropagationMode;
use mvp_core::synth::generate;

use config::{Overrides, RunConfig};
use run::{AblationRow, StageTimings};

#[derive(Parser)]
#[command(
    name = "mvp",
    version,
    about = "Keyframe detection with motion-vector box propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over every input in a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run full MVP and each single-component ablation, then score them.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate motion vectors, ground truth and detections for scene files.
    Synth {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Score a predictions file against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Run log, for FPS and detector-call counts.
        #[arg(long)]
        run_log: Option<PathBuf>,
        #[arg(long)]
        class_agnostic: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump a video's motion vectors with an external extractor.
    Extract {
        video: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value = "extract_mvs")]
        extractor: String,
        #[arg(long = "extractor-arg", allow_hyphen_values = true)]
        extractor_args: Vec<String>,
        /// First frame number the extractor prints.
        #[arg(long, default_value_t = 1)]
        frame_base: u32,
    },
    /// Convert an ILSVRC VID annotation tree to a ground-truth file.
    ImportVid {
        root: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Keep WordNet synset ids instead of class names.
        #[arg(long)]
        raw_synsets: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, overrides } => cmd_run(&config, &overrides),
        Command::Ablate { config, overrides } => cmd_ablate(&config, &overrides),
        Command::Synth { scenes, output } => cmd_synth(&scenes, &output),
        Command::Eval {
            predictions,
            ground_truth,
            run_log,
            class_agnostic,
            output,
        } => cmd_eval(
            &predictions,
            &ground_truth,
            run_log.as_deref(),
            class_agnostic,
            output.as_deref(),
        ),
        Command::Extract {
            video,
            output,
            extractor,
            extractor_args,
            frame_base,
        } => {
            let ex = Extractor {
                program: extractor,
                args: extractor_args,
                frame_base,
            };
            let frames = extract_mvs(&video, &ex)?;
            let mut out = BufWriter::new(
                File::create(&output).with_context(|| format!("creating {}", output.display()))?,
            );
            write_mv_dump(&mut out, &frames)?;
            out.flush()?;
            println!(
                "{} frames with motion vectors -> {}",
                frames.len(),
                output.display()
            );
            Ok(())
        }
        Command::ImportVid {
            root,
            output,
            raw_synsets,
        } => {
            let records = import_vid_annotations(&root, !raw_synsets)?;
            let mut out = BufWriter::new(
                File::create(&output).with_context(|| format!("creating {}", output.display()))?,
            );
            write_gt_records(&mut out, &records)?;
            out.flush()?;
            println!("{} annotated frames -> {}", records.len(), output.display());
            Ok(())
        }
    }
}

fn prepare(config: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)
        .with_context(|| format!("creating {}", cfg.output.display()))?;
    std::fs::write(cfg.output.join("config.toml"), toml::to_string(&cfg)?)?;
    Ok(cfg)
}

fn cmd_run(config: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = prepare(config, overrides)?;
    let mut timings = StageTimings::default();
    let inputs = run::load_inputs(&cfg)?;
    timings.parse_ms = inputs.parse_ms;

    let (mode, mvp) = cfg.effective();
    let started = Instant::now();
    let runs = run::run_all(&cfg, &inputs, mode, &mvp)?;
    timings.add_runs(&runs, started.elapsed());

    let out = &cfg.output;
    let mut preds = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    write_detection_records(&mut preds, runs.iter().flat_map(|r| &r.outputs))?;
    preds.flush()?;
    run::write_jsonl(&out.join("runlog.jsonl"), runs.iter().flat_map(|r| &r.log))?;

    let frames: usize = runs.iter().map(|r| r.outputs.len()).sum();
    let calls: usize = runs.iter().map(|r| r.detector_calls()).sum();
    let fallbacks: usize = runs.iter().map(|r| r.fallback_calls()).sum();
    println!(
        "{} videos, {frames} frames, {calls} detector calls ({fallbacks} fallbacks) -> {}",
        runs.len(),
        out.display()
    );

    if let Some(gt) = &inputs.ground_truth {
        let e0 = Instant::now();
        let report = run::score(&runs, gt, cfg.class_agnostic)?;
        timings.eval_ms = e0.elapsed().as_secs_f64() * 1e3;
        run::write_json(&out.join("metrics.json"), &report)?;
        let table = report.to_table();
        std::fs::write(out.join("metrics.txt"), &table)?;
        print!("{table}");
    }
    run::write_json(&out.join("timings.json"), &timings)?;
    info!("stage timings: {timings:?}");
    Ok(())
}

fn cmd_ablate(config: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = prepare(config, overrides)?;
    let inputs = run::load_inputs(&cfg)?;
    let Some(gt) = &inputs.ground_truth else {
        bail!("ablation needs ground truth: set ground_truth or use scene inputs");
    };
    let mut rows = Vec::new();
    for (name, mvp) in run::ablation_variants(&cfg.mvp) {
        let runs = run::run_all(&cfg, &inputs, PropagationMode::Mvp, &mvp)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            metrics: run::score(&runs, gt, cfg.class_agnostic)?,
        });
    }
    let table = run::ablation_table(&rows);
    run::write_json(&cfg.output.join("ablation.json"), &rows)?;
    std::fs::write(cfg.output.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(scenes: &[PathBuf], output: &Path) -> Result<()> {
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    for path in scenes {
        let spec = run::load_scene(path)?;
        let scene = generate(&spec).with_context(|| format!("generating {}", path.display()))?;
        let create = |ext: &str| -> Result<BufWriter<File>> {
            let p = output.join(format!("{}.{ext}", scene.name));
            Ok(BufWriter::new(
                File::create(&p).with_context(|| format!("creating {}", p.display()))?,
            ))
        };
        let mut mvs = create("mvs")?;
        write_mv_dump(&mut mvs, &scene.mv_frames)?;
        mvs.flush()?;
        let mut gt = create("gt.jsonl")?;
        write_gt_records(&mut gt, &scene.ground_truth)?;
        gt.flush()?;
        let mut dets = create("dets.jsonl")?;
        write_detection_records(&mut dets, &scene.detections)?;
        dets.flush()?;
        let vectors: usize = scene.mv_frames.iter().map(|f| f.vectors.len()).sum();
        println!(
            "{}: {}x{}, {} frames, {vectors} vectors",
            scene.name, scene.frame_size.width, scene.frame_size.height, scene.frame_count
        );
    }
    Ok(())
}

fn cmd_eval(
    predictions: &Path,
    ground_truth: &Path,
    run_log: Option<&Path>,
    class_agnostic: bool,
    output: Option<&Path>,
) -> Result<()> {
    let file =
        File::open(predictions).with_context(|| format!("opening {}", predictions.display()))?;
    let preds = read_prediction_records(BufReader::new(file))
        .with_context(|| format!("reading {}", predictions.display()))?;
    let gt = run::load_gt(ground_truth)?;
    let mut report = evaluate(&preds, &gt, EvalOptions { class_agnostic })?;
    if let Some(p) = run_log {
        report = report.with_run_log(&run::read_run_log(p)?);
    }
    if let Some(p) = output {
        run::write_json(p, &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}
