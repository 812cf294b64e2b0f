use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stseg_core::data::synth::{synth_generate, SynthSpec};
use stseg_core::data::{load_dataset, Dataset, LabelMap};
use stseg_core::grid::WeightMode;
use stseg_core::model::{build, predict, FrameExtent, Model, ModelConfig, StMode};
use stseg_core::rng::Stream;
use stseg_core::tensor::Tensor;
use stseg_core::train::{
    evaluate, grad_check, log_to_csv, train, GradCheckOpts, OptimConfig, Supervision,
};
use stseg_core::{Error, Result};

use crate::Common;

/// The JSON run configuration; every field has a default so partial files
/// are fine. Command-line flags win over file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(common: &Common) -> Result<RunConfig> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.model.seed = seed;
            cfg.optim.seed = seed;
        }
        if let Some(ds) = &common.dataset {
            cfg.dataset = Some(ds.clone());
        }
        if let Some(out) = &common.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (--dataset or config file)".into()))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (--out)".into()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn cmd_synth(common: &Common, spec_path: Option<&Path>, preset: &str) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text)?
        }
        None => match preset {
            "motion" => SynthSpec::motion_preset(0),
            "static" => SynthSpec::static_preset(0),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}: use motion or static"
                )))
            }
        },
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("synth needs --out".into()))?;
    let bound = synth_generate(&spec, out)?;
    println!(
        "synth: wrote {} ({} train / {} val / {} test sequences, bayes bound {:.4})",
        out.display(),
        spec.sequences_train,
        spec.sequences_val,
        spec.sequences_test,
        bound.bound
    );
    Ok(())
}

pub fn build_for_dataset(config: &ModelConfig, dataset: &Dataset) -> Result<Model> {
    let mut config = config.clone();
    config.input_channels = dataset.input_channels;
    config.n_cl = dataset.n_cl;
    build(
        &config,
        FrameExtent {
            height: dataset.height,
            width: dataset.width,
        },
    )
}

pub fn cmd_train(common: &Common, st_override: Option<&str>) -> Result<()> {
    let mut cfg = RunConfig::load(common)?;
    if let Some(st) = st_override {
        cfg.model.st_mode = parse_st_mode(st)?;
    }
    let out = cfg.require_out()?.to_path_buf();
    let dataset = load_dataset(cfg.require_dataset()?)?;
    let mut model = build_for_dataset(&cfg.model, &dataset)?;
    cfg.model = model.config.clone();

    let result = train(
        &mut model,
        &dataset,
        &cfg.optim,
        Some(&out.join("checkpoints")),
    )?;
    for id in &result.skipped_sequences {
        eprintln!("stseg: sequence {id} shorter than the window, skipped");
    }
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("effective_config.json"), &cfg)?;
    std::fs::write(out.join("log.csv"), log_to_csv(&result.log))?;
    model.save_checkpoint(&out.join("checkpoint"))?;
    let final_loss = result.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "train: {} iterations over {} windows, final loss {final_loss:.6}, checkpoint at {}",
        result.log.len(),
        result.windows_used,
        out.join("checkpoint").display()
    );
    Ok(())
}

pub fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = RunConfig::load(common)?;
    let out = cfg.require_out()?.to_path_buf();
    let dataset = load_dataset(cfg.require_dataset()?)?;
    let model = Model::load_checkpoint(checkpoint)?;
    let (cm, skipped) = evaluate(&model, &dataset, common.threads)?;
    for id in &skipped {
        eprintln!("stseg: sequence {id} shorter than the window, skipped");
    }
    let report = cm.report()?;
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    println!(
        "eval: mean_iu {:.6}, pixel_accuracy {:.6}, mean_accuracy {:.6}",
        report.mean_iu, report.pixel_accuracy, report.mean_accuracy
    );
    Ok(())
}

/// The minimal spatio-temporal configuration used when gradcheck is run
/// without a config: 16×16 frames, 3 classes, 4 hidden units, window 2.
pub fn minimal_gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        n_cl: 3,
        encoder_widths: vec![4, 6, 8, 8],
        downsample: 8,
        st_mode: StMode::OnTop,
        grid_weights: WeightMode::PerLocation,
        hidden: 4,
        window: 2,
        deconv_learned: true,
        carry_state: false,
        seed,
    }
}

pub fn cmd_gradcheck(common: &Common, eps: f64, subsample: usize) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let (model, frames, label) = if common.config.is_some() || common.dataset.is_some() {
        let cfg = RunConfig::load(common)?;
        let dataset = load_dataset(cfg.require_dataset()?)?;
        let model = build_for_dataset(&cfg.model, &dataset)?;
        let plan = stseg_core::data::windows(
            &dataset,
            model.config.window,
            cfg.optim.window_rule,
        )?;
        let win = plan
            .windows
            .first()
            .ok_or_else(|| Error::Data("dataset has no windows to check on".into()))?;
        let (frames, labels) = stseg_core::data::assemble_window(&dataset, win);
        let label = labels
            .last()
            .copied()
            .flatten()
            .ok_or_else(|| Error::Data("window has no final label".into()))?
            .clone();
        (model, frames, label)
    } else {
        // built-in minimal configuration on a noise window
        let config = minimal_gradcheck_config(seed);
        let model = build(
            &config,
            FrameExtent {
                height: 16,
                width: 16,
            },
        )?;
        let mut s = Stream::named(seed, "gradcheck/window");
        let frames = Tensor::rand_uniform(&[config.window, 3, 16, 16], 0.0, 1.0, &mut s);
        let mut ls = Stream::named(seed, "gradcheck/labels");
        let label = LabelMap::from_fn(16, 16, |_, _| ls.below(3) as u8);
        (model, frames, label)
    };

    let t_len = frames.shape()[0];
    let mut labels: Vec<Option<&LabelMap>> = vec![None; t_len];
    labels[t_len - 1] = Some(&label);
    let opts = GradCheckOpts {
        eps,
        subsample,
        seed,
        supervision: Supervision::LastFrame,
    };
    let report = grad_check(&model, &frames, &labels, opts)?;
    if let Some(out) = &common.out {
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    println!(
        "gradcheck: max_rel_err {:.3e} over {} blocks ({} coords sampled, eps {:.0e}, {:.1}s)",
        report.max_rel_err,
        report.blocks.len(),
        report.blocks.iter().map(|b| b.checked).sum::<usize>(),
        eps,
        report.seconds
    );
    Ok(())
}

pub fn cmd_predict(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = RunConfig::load(common)?;
    let out = cfg.require_out()?.to_path_buf();
    let dataset = load_dataset(cfg.require_dataset()?)?;
    let mut model = Model::load_checkpoint(checkpoint)?;
    let t_window = model.config.window;

    let mut written = 0usize;
    for (si, seq) in dataset.sequences.iter().enumerate() {
        if seq.frames.len() < t_window {
            eprintln!("stseg: sequence {} shorter than the window, skipped", seq.id);
            continue;
        }
        let seq_dir = out.join(&seq.id);
        std::fs::create_dir_all(&seq_dir)?;
        let mut emit = |model: &mut Model, idx: &[usize], slots: std::ops::Range<usize>| -> Result<()> {
            let win = stseg_core::data::DataWindow {
                seq: si,
                frame_idx: idx.to_vec(),
            };
            let (frames, _) = stseg_core::data::assemble_window(&dataset, &win);
            let fwd = model.forward_window(&frames)?;
            let maps = predict(&fwd.logits)?;
            for slot in slots {
                let frame_n = seq.frame_numbers[idx[slot]];
                maps[slot].save_pgm(&seq_dir.join(format!("{frame_n}.pgm")))?;
                written += 1;
            }
            Ok(())
        };
        let all: Vec<usize> = (0..seq.frames.len()).collect();
        emit(&mut model, &all[0..t_window], 0..t_window)?;
        for end in t_window..all.len() {
            emit(&mut model, &all[end + 1 - t_window..=end], t_window - 1..t_window)?;
        }
    }
    println!("predict: wrote {written} label maps under {}", out.display());
    Ok(())
}

pub fn parse_st_mode(s: &str) -> Result<StMode> {
    match s {
        "off" => Ok(StMode::Off),
        "on_top" => Ok(StMode::OnTop),
        "fusion" => Ok(StMode::Fusion),
        other => Err(Error::Config(format!(
            "unknown st mode {other:?}: use off, on_top or fusion"
        ))),
    }
}
