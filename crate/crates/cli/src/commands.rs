//! Subcommand implementations.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attrbridge::attrs::{AttributeVector, ExclusiveGroups};
use attrbridge::checkpoint::{load_checkpoint, save_checkpoint};
use attrbridge::config::ExperimentConfig;
use attrbridge::eval::{evaluate, pretrained_feature_net, protocol_cases, EvalProtocol, MetricReport};
use attrbridge::imageio::{write_image, ImageGrid};
use attrbridge::nets::NetworkBundle;
use attrbridge::synthdata::SynthSample;
use attrbridge::trainer::{TrainState, TrainingSet};
use attrbridge::{Error, Result};

use crate::common::{create_dir, load_config, output_dir, require_dataset, SourceResolver};
use crate::error::{usage, CliResult};
use crate::infer::{apply_edits, run_inference, uniform_alphas, InferRequest, Mode};
use crate::{EvalArgs, GenDataArgs, InferArgs, TrainArgs};

/// Test sources shown in each training sample grid.
pub const SAMPLE_ROWS: usize = 4;
/// Interpolation rates of the sample-grid sweep, label-based first.
pub const SAMPLE_SWEEP: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.0];
const DEFAULT_ALPHA_COUNT: usize = 5;

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

pub fn sample_path(out: &Path, step: u64) -> PathBuf {
    out.join("samples").join(format!("step_{step:08}.ppm"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn due(step: u64, every: u64) -> bool {
    every > 0 && step % every == 0
}

/// Rows of source, reference, then the sweep from label-based (rate 1) to
/// reference-based (rate 0) output, all toward the reference's attributes.
pub fn sample_grid(net: &NetworkBundle<f32>, config: &ExperimentConfig, test: &[SynthSample]) -> Result<ImageGrid> {
    let protocol =
        EvalProtocol { sources: SAMPLE_ROWS, diversity_sources: 0, samples_per_source: 0, seed: config.seed };
    let cases = protocol_cases(test, &config.target_sampler(), &protocol)?;
    let groups = ExclusiveGroups::new(config.groups.clone(), config.n_attrs())?;
    let mut grid = ImageGrid::new();
    for (i, c) in cases.iter().enumerate() {
        let src = &test[c.source];
        let req = InferRequest {
            mode: Mode::Interp,
            source: (src.image.clone(), src.label.clone()),
            references: vec![(test[c.reference].image.clone(), test[c.reference].label.clone())],
            target: Some(c.reference_target.clone()),
            alphas: SAMPLE_SWEEP.to_vec(),
            noise_seed: config.seed.wrapping_add(i as u64),
            samples: 1,
        };
        let out = run_inference(net, &groups, &req)?;
        let caption =
            format!("sample {} {} -> {}", src.id, src.label.to_bit_string(), c.reference_target.to_bit_string());
        grid.push_row(caption, out.grid.rows()[0].clone())?;
    }
    grid.col_captions =
        ["source", "reference", "label-based", "alpha 0.75", "alpha 0.5", "alpha 0.25", "reference-based"]
            .map(String::from)
            .to_vec();
    Ok(grid)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut config = load_config(&a.config)?;
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let dataset = require_dataset(&config)?;
    let out = output_dir(&config);
    create_dir(&out.join("checkpoints"))?;
    let resuming = a.resume.is_some();
    let mut state: TrainState<f32> = match &a.resume {
        Some(p) => load_checkpoint(p, Some(&config))?,
        None => {
            let state = TrainState::new(&config)?;
            save_checkpoint(&state, &checkpoint_path(&out, 0))?;
            state
        }
    };
    if state.step >= config.steps {
        println!("step {} of {}: nothing to train", state.step, config.steps);
        return Ok(());
    }
    let data = TrainingSet::from_samples(&dataset.train)?;
    let log_path = out.join("train_log.tsv");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    create_dir(&out.join("samples"))?;
    while state.step < config.steps {
        let (mut report, aborted) = state.train_step_with_retries(&data)?;
        let step = state.step;
        if aborted > 0 {
            report.push("aborted_attempts", aborted as f64);
        }
        if due(step, config.log_every) || aborted > 0 {
            log.write_all(report.log_lines(step).as_bytes()).map_err(io_err(&log_path))?;
        }
        let last = step == config.steps;
        if due(step, config.checkpoint_every) || last {
            log.flush().map_err(io_err(&log_path))?;
            let path = checkpoint_path(&out, step);
            save_checkpoint(&state, &path)?;
            let value = |k: &str| report.get(k).unwrap_or(f64::NAN);
            println!(
                "step {step}/{} total_G {:.4} total_ME {:.4} total_DC {:.4} checkpoint {}",
                config.steps,
                value("total_G"),
                value("total_ME"),
                value("total_DC"),
                path.display()
            );
        }
        if due(step, config.sample_every) || last {
            sample_grid(&state.net, &config, &dataset.test)?.write(&sample_path(&out, step))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let expected = a.config.as_deref().map(load_config).transpose()?;
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint, expected.as_ref())?;
    let config = expected.unwrap_or_else(|| state.config.clone());
    let dataset = require_dataset(&config)?;
    let protocol = EvalProtocol {
        sources: a.sources,
        diversity_sources: a.diversity_sources,
        samples_per_source: a.samples_per_source,
        seed: a.seed,
    };
    let features = pretrained_feature_net(&config, &dataset.train)?;
    let used = protocol.sources.min(dataset.test.len());
    if used > 0 && used <= features.dim() {
        eprintln!("warning: {used} sources for {} features makes the Fréchet distances unreliable", features.dim());
    }
    let report = evaluate(
        &state.net,
        &config.attributes,
        &dataset.spec,
        &dataset.test,
        &config.target_sampler(),
        &features,
        &protocol,
    )?;
    let path = a.output.clone().unwrap_or_else(|| output_dir(&config).join("metrics.txt"));
    ensure_parent(&path)?;
    fs::write(&path, report.to_text()).map_err(io_err(&path))?;
    println!("{}", MetricReport::table_header());
    println!("{}", report.table_row());
    Ok(())
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    if a.mode != Mode::Interp && (a.alpha.is_some() || a.alpha_count.is_some()) {
        return Err(usage("--alpha and --alpha-count apply to interp mode only"));
    }
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint, None)?;
    let config = state.config.clone();
    let mut resolver = SourceResolver::new(&config)?;
    let source_label = a.source_label.as_deref().map(AttributeVector::parse_bit_string).transpose()?;
    let source = resolver.resolve(&a.source, source_label.as_ref())?;
    let references = a.reference.iter().map(|r| resolver.resolve(r, None)).collect::<CliResult<Vec<_>>>()?;
    let target = a.edit.as_ref().map(|e| apply_edits(&config.attributes, &source.1, &e.0)).transpose()?;
    let alphas = match (&a.alpha, a.alpha_count) {
        (Some(list), _) => list.clone(),
        (None, Some(count)) => uniform_alphas(count)?,
        (None, None) => uniform_alphas(DEFAULT_ALPHA_COUNT)?,
    };
    let req =
        InferRequest { mode: a.mode, source, references, target, alphas, noise_seed: a.noise_seed, samples: a.samples };
    let groups = ExclusiveGroups::new(config.groups.clone(), config.n_attrs())?;
    let out = run_inference(&state.net, &groups, &req)?;
    ensure_parent(&a.output)?;
    out.grid.write(&a.output)?;
    for (k, v) in &out.notes {
        println!("{k} = {v:.6}");
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let config = load_config(&a.config)?;
    let dataset = require_dataset(&config)?;
    let dir = output_dir(&config).join("data");
    create_dir(&dir)?;
    let manifest = dir.join("manifest.tsv");
    fs::write(&manifest, dataset.manifest()).map_err(io_err(&manifest))?;
    if a.images {
        for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
            let sub = dir.join(split);
            create_dir(&sub)?;
            for s in samples {
                write_image(&sub.join(format!("{:06}.ppm", s.id)), &s.image)?;
            }
        }
    }
    println!("wrote {} train and {} test samples to {}", dataset.train.len(), dataset.test.len(), dir.display());
    Ok(())
}
