use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use stcnet::autodiff::Checkpoint;
use stcnet::metrics::EvalReport;
use stcnet::nets::Consensus;
use stcnet::objectives::gaussian_reference;
use stcnet::synth::{generate as synth_generate, Dataset, OracleInput, Split};
use stcnet::trainer::{train as run_training, write_log_csv, Mode, Model, Scheme, TrainConfig};
use stcnet::wpm::{propose_windows, write_diagnostics_csv, WindowShape, WpmConfig};

use crate::config::RunConfig;
use crate::output::{write_atomic, write_bytes, Layout};
use crate::Common;

/// Resolves the config and echoes it into the output directory.
/// Resolves the effective config. `echo` names a report file for the config
/// echo; without one the echo becomes the run's base `config.toml`.
fn setup(common: &Common, overrides: &[(String, String)], echo: Option<&str>) -> Result<(Layout, RunConfig)> {
    let layout = Layout::new(&common.out)?;
    let base = match &common.config {
        Some(p) => Some(p.clone()),
        None => Some(layout.config()).filter(|p| p.exists()),
    };
    let mut overrides = overrides.to_vec();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = RunConfig::load(base.as_deref(), &overrides)?;
    let text = cfg.to_toml()?;
    let echo_path = match echo {
        Some(name) => layout.report(name),
        None => layout.config(),
    };
    write_bytes(&echo_path, text.as_bytes())?;
    Ok((layout, cfg))
}

fn load_dataset(layout: &Layout, path: Option<PathBuf>) -> Result<Dataset> {
    let path = path.unwrap_or_else(|| layout.dataset());
    let bytes = std::fs::read(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    Dataset::from_bytes(&bytes).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn generate(common: &Common, overrides: &[(String, String)]) -> Result<()> {
    let (layout, cfg) = setup(common, overrides, None)?;
    let ds = synth_generate(&cfg.synth()?)?;
    write_bytes(&layout.dataset(), &ds.to_bytes())?;
    let summary = serde_json::json!({
        "videos": ds.videos.len(),
        "train": ds.train().count(),
        "test": ds.test().count(),
        "oracle_segment_accuracy": ds.oracle_accuracy(OracleInput::Segment, Split::Test),
        "oracle_whole_video_accuracy": ds.oracle_accuracy(OracleInput::WholeVideo, Split::Test),
    });
    write_atomic(&layout.report("dataset.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        Ok(writeln!(w)?)
    })?;
    log::info!(
        "wrote {} videos to {} (oracle: segment {:.3}, whole video {:.3})",
        ds.videos.len(),
        layout.dataset().display(),
        summary["oracle_segment_accuracy"],
        summary["oracle_whole_video_accuracy"]
    );
    Ok(())
}

pub fn train(common: &Common, overrides: &[(String, String)], dataset: Option<PathBuf>) -> Result<()> {
    let (layout, cfg) = setup(common, overrides, None)?;
    let ds = load_dataset(&layout, dataset)?;
    let tcfg = cfg.train()?;
    let outcome = run_training(&ds, &tcfg)?;
    let ckpt = Checkpoint {
        config_hash: cfg.model_hash()?,
        epoch: outcome.epoch as u32,
        params: outcome.model.params.clone(),
    };
    write_bytes(&layout.checkpoint(), &ckpt.to_bytes())?;
    write_atomic(&layout.log("train.csv"), |w| Ok(write_log_csv(&outcome.log, w)?))?;
    log::info!("checkpoint (epoch {}) at {}", outcome.epoch, layout.checkpoint().display());
    Ok(())
}

fn load_model(cfg: &RunConfig, ds: &Dataset, path: &std::path::Path) -> Result<Model> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.config_hash != cfg.model_hash()? {
        bail!(
            "checkpoint {} was trained under a different configuration",
            path.display()
        );
    }
    let mut model = Model::for_dataset(&cfg.train()?, ds)?;
    model.load_params(ckpt.params)?;
    Ok(model)
}

pub fn eval(
    common: &Common,
    overrides: &[(String, String)],
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let (layout, cfg) = setup(common, overrides, Some("eval_config.toml"))?;
    let ds = load_dataset(&layout, dataset)?;
    let model = load_model(&cfg, &ds, &checkpoint.unwrap_or_else(|| layout.checkpoint()))?;
    let report = model.evaluate(&ds, Split::Test)?;
    write_report(&layout, &report)?;
    if cfg.diagnostics && model.lm.is_some() {
        let tcfg = cfg.train()?;
        let wpm = WpmConfig {
            n_std: tcfg.n_std,
            threshold: tcfg.threshold,
            shape: match tcfg.mode {
                Mode::FixedWindow(w) => WindowShape::Fixed(w),
                _ => WindowShape::Dynamic,
            },
        };
        write_atomic(&layout.report("windows.csv"), |w| {
            for (i, v) in report.videos.iter().enumerate() {
                write_diagnostics_csv(&mut *w, v.id, &propose_windows(&v.probs, &wpm), i == 0)?;
            }
            Ok(())
        })?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn write_report(layout: &Layout, report: &EvalReport) -> Result<()> {
    write_atomic(&layout.report("eval.json"), |w| {
        serde_json::to_writer(&mut *w, report)?;
        Ok(writeln!(w)?)
    })?;
    write_atomic(&layout.report("eval.txt"), |w| Ok(w.write_all(report.to_table().as_bytes())?))?;
    write_atomic(&layout.report("confusion.csv"), |w| Ok(report.write_confusion_csv(w)?))?;
    Ok(())
}

pub const SWEEPS: [&str; 5] = ["consensus", "losses", "schemes", "wpm", "baselines"];

/// One configuration of an ablation table.
struct Cell {
    label: String,
    cfg: TrainConfig,
}

fn sweep_cells(key: &str, base: &TrainConfig, run: &RunConfig) -> Result<Vec<Cell>> {
    let with = |label: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Cell { label, cfg }
    };
    let cells = match key {
        "losses" => [(true, false, true), (false, true, true), (true, true, false), (true, true, true)]
            .into_iter()
            .map(|(bce, cos, bg)| {
                let mark = |b: bool| if b { "+" } else { "-" };
                with(format!("bce{} cos{} bg{}", mark(bce), mark(cos), mark(bg)), &|c| {
                    c.mode = Mode::Stc;
                    c.use_bce = bce;
                    c.use_cos = cos;
                    c.use_bg = bg;
                })
            })
            .collect(),
        "schemes" => Scheme::ALL
            .into_iter()
            .map(|s| {
                with(s.to_string(), &|c| {
                    c.mode = Mode::Stc;
                    c.scheme = s;
                })
            })
            .collect(),
        "wpm" => {
            let mut v = vec![with("no_wpm".into(), &|c| c.mode = Mode::NoWpm)];
            for &w in &run.fixed_windows {
                v.push(with(format!("fixed_window:{w}"), &|c| c.mode = Mode::FixedWindow(w)));
            }
            v.push(with("stc".into(), &|c| c.mode = Mode::Stc));
            v
        }
        "baselines" => {
            let tw = run.trimmed_window;
            vec![
                with("full".into(), &|c| {
                    c.mode = Mode::Full;
                    c.scheme = Scheme::EndToEnd;
                }),
                with(format!("trimmed:{tw}"), &|c| {
                    c.mode = Mode::Trimmed(tw);
                    c.scheme = Scheme::EndToEnd;
                }),
                with("stc".into(), &|c| c.mode = Mode::Stc),
            ]
        }
        other => bail!("unknown ablation `{other}`; valid keys: {}", SWEEPS.join(", ")),
    };
    Ok(cells)
}

#[derive(Clone, Debug, Default)]
struct Row {
    label: String,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    ad: f64,
    mae: Option<f64>,
    iou: f64,
}

fn mean_row(label: String, reports: &[EvalReport]) -> Row {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mae = reports
        .iter()
        .map(|r| r.mae)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Row {
        label,
        accuracy: mean(&|r| r.scores.accuracy),
        precision: mean(&|r| r.scores.precision),
        recall: mean(&|r| r.scores.recall),
        f1: mean(&|r| r.scores.f1),
        ad: mean(&|r| r.scores.average_distance),
        mae,
        iou: mean(&|r| r.mean_window_iou),
    }
}

fn dataset_for_seed(ds: &Dataset, seed: u64) -> Result<Dataset> {
    if ds.config.seed == seed {
        return Ok(ds.clone());
    }
    Ok(synth_generate(&stcnet::synth::SynthConfig {
        seed,
        ..ds.config.clone()
    })?)
}

pub fn ablate(
    common: &Common,
    overrides: &[(String, String)],
    dataset: Option<PathBuf>,
    sweeps: &[String],
) -> Result<()> {
    for key in sweeps {
        if !SWEEPS.contains(&key.as_str()) {
            bail!("unknown ablation `{key}`; valid keys: {}", SWEEPS.join(", "));
        }
    }
    let (layout, cfg) = setup(common, overrides, Some("ablate_config.toml"))?;
    let ds = load_dataset(&layout, dataset)?;
    let base = cfg.train()?;
    let seeds = if cfg.ablate_seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate_seeds.clone()
    };
    let datasets = seeds
        .iter()
        .map(|&s| dataset_for_seed(&ds, s))
        .collect::<Result<Vec<_>>>()?;

    for key in sweeps {
        let rows = if key == "consensus" {
            let mut per: Vec<Vec<EvalReport>> = vec![Vec::new(); Consensus::ALL.len()];
            for (&seed, ds) in seeds.iter().zip(&datasets) {
                let tcfg = TrainConfig { seed, ..base.clone() };
                let model = run_training(ds, &tcfg)?.model;
                for (slot, r) in per
                    .iter_mut()
                    .zip(model.evaluate_strategies(ds, Split::Test, &Consensus::ALL)?)
                {
                    slot.push(r);
                }
            }
            Consensus::ALL
                .iter()
                .zip(per)
                .map(|(c, reports)| mean_row(c.to_string(), &reports))
                .collect::<Vec<_>>()
        } else {
            let mut rows = Vec::new();
            for cell in sweep_cells(key, &base, &cfg)? {
                let mut reports = Vec::with_capacity(seeds.len());
                for (&seed, ds) in seeds.iter().zip(&datasets) {
                    let tcfg = TrainConfig {
                        seed,
                        ..cell.cfg.clone()
                    };
                    log::info!("ablation {key}: {} (seed {seed})", cell.label);
                    let model = run_training(ds, &tcfg)?.model;
                    reports.push(model.evaluate(ds, Split::Test)?);
                }
                rows.push(mean_row(cell.label, &reports));
            }
            rows
        };
        write_ablation(&layout, key, &seeds, &rows)?;
    }
    Ok(())
}

fn write_ablation(layout: &Layout, key: &str, seeds: &[u64], rows: &[Row]) -> Result<()> {
    let header = ["setting", "accuracy", "precision", "recall", "f1", "ad", "mae", "window_iou"];
    write_atomic(&layout.report(&format!("ablation_{key}.csv")), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(header)?;
        for r in rows {
            csv.write_record([
                r.label.clone(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.precision),
                format!("{:.6}", r.recall),
                format!("{:.6}", r.f1),
                format!("{:.6}", r.ad),
                r.mae.map(|m| format!("{m:.6}")).unwrap_or_default(),
                format!("{:.6}", r.iou),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;

    let mut text = String::new();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(text, "ablation: {key} (mean over seeds {})", seeds.join(", "));
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
    let _ = writeln!(
        text,
        "{:<width$} | {:>8} | {:>8} | {:>6} | {:>8} | {:>6}",
        "setting", "Accuracy", "F1", "AD", "MAE", "IoU"
    );
    let _ = writeln!(text, "{}", "-".repeat(width + 53));
    for r in rows {
        let mae = r.mae.map(|m| format!("{m:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            text,
            "{:<width$} | {:>8.2} | {:>8.2} | {:>6.3} | {:>8} | {:>6.3}",
            r.label,
            100.0 * r.accuracy,
            100.0 * r.f1,
            r.ad,
            mae,
            r.iou
        );
    }
    print!("{text}");
    write_bytes(&layout.report(&format!("ablation_{key}.txt")), text.as_bytes())
}

pub fn plotdata(common: &Common, overrides: &[(String, String)], report: Option<PathBuf>) -> Result<()> {
    let (layout, cfg) = setup(common, overrides, Some("plotdata_config.toml"))?;
    let path = report.unwrap_or_else(|| layout.report("eval.json"));
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: EvalReport =
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))?;

    write_atomic(&layout.plot("confusion.csv"), |w| Ok(report.write_confusion_csv(w)?))?;
    write_atomic(&layout.plot("confusion_matrix.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut head = vec!["true".to_string()];
        head.extend((1..=report.classes).map(|k| format!("pred_{k}")));
        csv.write_record(&head)?;
        for (i, row) in report.scores.confusion.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(usize::to_string));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    })?;

    let mut traces = 0;
    for v in &report.videos {
        if v.probs.is_empty() {
            continue;
        }
        let reference = gaussian_reference(v.probs.len(), v.timestamp, cfg.delta as f64);
        write_atomic(&layout.plot(&format!("traces/video_{:04}.csv", v.id)), |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["frame", "prob", "reference", "fitted", "in_window", "in_segment", "annotated"])?;
            for (j, &p) in v.probs.iter().enumerate() {
                let inside: Vec<_> = v.windows.iter().filter(|win| win.start <= j && j < win.end).collect();
                let fitted = v.windows.iter().map(|win| win.fitted_value(j)).fold(0.0, f64::max);
                csv.write_record([
                    j.to_string(),
                    format!("{p:.9}"),
                    format!("{:.9}", reference[j]),
                    format!("{fitted:.9}"),
                    u8::from(!inside.is_empty()).to_string(),
                    u8::from(v.segment.0 <= j && j < v.segment.1).to_string(),
                    u8::from(j == v.timestamp).to_string(),
                ])?;
            }
            csv.flush()?;
            Ok(())
        })?;
        traces += 1;
    }
    log::info!("wrote confusion data and {traces} trace files under {}", layout.plot("").display());
    Ok(())
}
