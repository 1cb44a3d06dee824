//! Adam, the training schemes and modes, and the prediction pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::metrics::{Averaging, EvalReport, VideoRecord, WindowRecord};
use crate::nets::{
    argmax, consensus, reweight, Consensus, GmConfig, GradingNet, LmConfig, LocalizationNet, GM_PREFIX,
    LM_PREFIX,
};
use crate::objectives::{cross_entropy, grading_loss, localization_loss, total_loss, LocTerms};
use crate::synth::{Dataset, Split, SynthVideo};
use crate::wpm::{propose_windows, FitResult, WindowShape, WpmConfig};

/// Adam with bias correction and a per-parameter step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }

    /// Updates every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: p.grad.shape().to_vec(),
                });
            }
            let n = p.value.len();
            let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            if slot.m.len() != n {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: vec![n],
                    rhs: vec![slot.m.len()],
                });
            }
            slot.step += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    TwoStage,
    EndToEnd,
    Separate,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::EndToEnd, Scheme::Separate, Scheme::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::TwoStage => "two_stage",
            Scheme::EndToEnd => "end_to_end",
            Scheme::Separate => "separate",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown scheme `{s}` (two_stage, end_to_end, separate)")))
    }
}

/// What the grading network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Localize, propose Gaussian windows, grade each window.
    Stc,
    /// Whole sequence, no localizer.
    Full,
    /// `w`-frame window around the annotated timestamp, train and test.
    Trimmed(usize),
    /// STC with every window replaced by `μ ± w/2`.
    FixedWindow(usize),
    /// Reweight the whole sequence and grade it as a single window.
    NoWpm,
}

impl Mode {
    pub fn uses_localizer(self) -> bool {
        !matches!(self, Mode::Full | Mode::Trimmed(_))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Stc => f.write_str("stc"),
            Mode::Full => f.write_str("full"),
            Mode::NoWpm => f.write_str("no_wpm"),
            Mode::Trimmed(w) => write!(f, "trimmed:{w}"),
            Mode::FixedWindow(w) => write!(f, "fixed_window:{w}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let width = |w: &str| -> Result<usize> {
            match w.parse::<usize>() {
                Ok(w) if w > 0 => Ok(w),
                _ => Err(invalid(format!("window width in `{s}` must be a positive integer"))),
            }
        };
        match s.split_once(':') {
            None => match s {
                "stc" => Ok(Mode::Stc),
                "full" => Ok(Mode::Full),
                "no_wpm" => Ok(Mode::NoWpm),
                _ => Err(invalid(format!(
                    "unknown mode `{s}` (stc, full, no_wpm, trimmed:W, fixed_window:W)"
                ))),
            },
            Some(("trimmed", w)) => Ok(Mode::Trimmed(width(w)?)),
            Some(("fixed_window", w)) => Ok(Mode::FixedWindow(width(w)?)),
            Some(_) => Err(invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub e_frozen: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Tolerance `δ` in frames.
    pub delta: usize,
    pub n_std: f64,
    pub threshold: f64,
    pub scheme: Scheme,
    pub mode: Mode,
    pub consensus: Consensus,
    pub use_bce: bool,
    pub use_cos: bool,
    pub use_bg: bool,
    /// `input_dim` is taken from the dataset.
    pub lm: LmConfig,
    /// `input_dim`, `classes` and `background` are taken from the dataset and mode.
    pub gm: GmConfig,
    pub seed: u64,
    /// Validate on the test split every this many epochs (0 = never).
    pub val_every: usize,
    /// Keep the parameters of the best validation epoch instead of the last.
    pub select_best: bool,
    pub averaging: Averaging,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            e_frozen: 8,
            alpha: 1.0,
            beta: 1.0,
            delta: 3,
            n_std: 2.0,
            threshold: 0.5,
            scheme: Scheme::TwoStage,
            mode: Mode::Stc,
            consensus: Consensus::HighestPeak,
            use_bce: true,
            use_cos: true,
            use_bg: true,
            lm: LmConfig::default(),
            gm: GmConfig::default(),
            seed: 0,
            val_every: 1,
            select_best: false,
            averaging: Averaging::Macro,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_frozen > self.epochs {
            return Err(Error::Config(format!(
                "e_frozen {} exceeds epochs {}",
                self.e_frozen, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.lr)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("α and β must be non-negative".into()));
        }
        if self.delta == 0 {
            return Err(Error::Config("δ must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.n_std > 0.0) {
            return Err(Error::Config(format!("n_std {} must be positive", self.n_std)));
        }
        if !self.mode.uses_localizer() && self.scheme != Scheme::EndToEnd {
            return Err(Error::Config(format!(
                "mode {} has no localizer and only supports scheme end_to_end, got {}",
                self.mode, self.scheme
            )));
        }
        if self.select_best && self.val_every == 0 {
            return Err(Error::Config("select_best needs val_every > 0".into()));
        }
        Ok(())
    }

    fn wpm(&self) -> WpmConfig {
        WpmConfig {
            n_std: self.n_std,
            threshold: self.threshold,
            shape: match self.mode {
                Mode::FixedWindow(w) => WindowShape::Fixed(w),
                _ => WindowShape::Dynamic,
            },
        }
    }

    fn loc_terms(&self) -> LocTerms {
        LocTerms {
            bce: self.use_bce,
            cosine: self.use_cos,
        }
    }
}

/// Which parameters an epoch updates and with which loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Localization,
    Joint,
    Grading,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Localization => "localization",
            Stage::Joint => "joint",
            Stage::Grading => "grading",
        }
    }
}

pub fn stage_for(cfg: &TrainConfig, epoch: usize) -> Stage {
    if !cfg.mode.uses_localizer() {
        return Stage::Grading;
    }
    match cfg.scheme {
        Scheme::EndToEnd => Stage::Joint,
        Scheme::TwoStage if epoch < cfg.e_frozen => Stage::Localization,
        Scheme::TwoStage => Stage::Joint,
        Scheme::Separate if epoch < cfg.e_frozen => Stage::Localization,
        Scheme::Separate => Stage::Grading,
    }
}

/// SplitMix64 over `seed` and a list of stream labels.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_LM_INIT: u64 = 1;
const STREAM_GM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Networks and parameters of a trained or freshly initialized model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub lm: Option<LocalizationNet>,
    pub gm: GradingNet,
    pub params: ParamStore,
}

impl Model {
    /// Deterministically initialized model for `dim`-dimensional features and `classes` grades.
    pub fn init(cfg: &TrainConfig, dim: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let lm = if cfg.mode.uses_localizer() {
            let net = LocalizationNet::new(LmConfig {
                input_dim: dim,
                ..cfg.lm.clone()
            })?;
            net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_LM_INIT])));
            Some(net)
        } else {
            None
        };
        let gm = GradingNet::new(GmConfig {
            input_dim: dim,
            classes,
            background: cfg.mode.uses_localizer(),
            ..cfg.gm.clone()
        })?;
        gm.init(&mut params, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_GM_INIT])));
        Ok(Self {
            config: cfg.clone(),
            lm,
            gm,
            params,
        })
    }

    pub fn for_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        Self::init(cfg, dataset.config.dim, dataset.config.classes)
    }

    /// Replace parameters (e.g. from a checkpoint), checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        let expected: Vec<(&str, &[usize])> = self.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            return Err(Error::Config(
                "checkpoint parameters do not match the configured networks".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    fn trimmed_window(t: usize, w: usize, len: usize) -> (usize, usize) {
        let start = t.saturating_sub(w / 2);
        let end = (start + w).min(len);
        (start.min(end.saturating_sub(1)), end)
    }

    fn windows_for(&self, probs: &[f64]) -> Vec<WindowRecord> {
        let len = probs.len();
        match self.config.mode {
            Mode::NoWpm => {
                let peak = argmax(probs);
                vec![WindowRecord {
                    peak,
                    start: 0,
                    end: len,
                    amplitude_left: 0.0,
                    sigma_left: 0.0,
                    amplitude_right: 0.0,
                    sigma_right: 0.0,
                    logits: Vec::new(),
                }]
            }
            _ => propose_windows(probs, &self.config.wpm())
                .into_iter()
                .map(|p| {
                    let side = |f: &FitResult| (f.amplitude, f.sigma);
                    let ((al, sl), (ar, sr)) = (side(&p.left), side(&p.right));
                    WindowRecord {
                        peak: p.peak,
                        start: p.start,
                        end: p.end,
                        amplitude_left: al,
                        sigma_left: sl,
                        amplitude_right: ar,
                        sigma_right: sr,
                        logits: Vec::new(),
                    }
                })
                .collect(),
        }
    }

    /// Builds the loss for one video on `g`; returns it with its component values.
    fn video_loss(&self, g: &mut Graph, video: &SynthVideo, stage: Stage) -> Result<(Var, LossParts)> {
        let cfg = &self.config;
        let x = g.input(video.features.clone());
        let mut parts = LossParts::default();
        let Some(lm) = &self.lm else {
            let (a, b) = match cfg.mode {
                Mode::Trimmed(w) => Self::trimmed_window(video.timestamp, w, video.len()),
                _ => (0, video.len()),
            };
            let seg = if (a, b) == (0, video.len()) { x } else { g.slice_rows(x, a, b)? };
            let logits = self.gm.pooled(g, &self.params, seg)?;
            let loss = cross_entropy(g, logits, video.grade - 1)?;
            parts.grading = Some(g.value(loss).item()?);
            parts.total = parts.grading.unwrap_or(0.0);
            return Ok((loss, parts));
        };

        let scores = lm.forward(g, &self.params, x)?;
        let probs = g.sigmoid(scores);
        let (loc, lp) = localization_loss(g, scores, probs, video.timestamp, cfg.delta, cfg.alpha, cfg.loc_terms())?;
        parts.bce = Some(lp.bce);
        parts.cosine = Some(lp.cosine);
        if stage == Stage::Localization {
            parts.total = g.value(loc).item()?;
            return Ok((loc, parts));
        }

        let prob_values = g.value(probs).data().to_vec();
        let windows = self.windows_for(&prob_values);
        let xr = reweight(g, x, probs)?;
        let mut logits = Vec::with_capacity(windows.len());
        for w in &windows {
            let seg = if (w.start, w.end) == (0, video.len()) {
                xr
            } else {
                g.slice_rows(xr, w.start, w.end)?
            };
            logits.push(self.gm.pooled(g, &self.params, seg)?);
        }
        let peaks: Vec<usize> = windows.iter().map(|w| w.peak).collect();
        let grading = grading_loss(g, &logits, &peaks, video.timestamp, video.grade, cfg.use_bg)?;
        parts.grading = Some(g.value(grading).item()?);
        let loss = match stage {
            Stage::Joint => total_loss(g, grading, loc, cfg.beta)?,
            _ => grading,
        };
        parts.total = g.value(loss).item()?;
        Ok((loss, parts))
    }

    /// Evaluation-mode prediction for one video.
    pub fn predict(&self, video: &SynthVideo) -> Result<VideoRecord> {
        self.predict_with(video, self.config.consensus)
    }

    pub fn predict_with(&self, video: &SynthVideo, strategy: Consensus) -> Result<VideoRecord> {
        Ok(self.predict_all(video, &[strategy])?.remove(0))
    }

    /// One record per consensus strategy; the networks run once.
    pub fn predict_all(&self, video: &SynthVideo, strategies: &[Consensus]) -> Result<Vec<VideoRecord>> {
        let mut g = Graph::new();
        let x = g.input(video.features.clone());
        let len = video.len();
        let record = |predicted_grade, predicted_timestamp, windows, probs| VideoRecord {
            id: video.id,
            grade: video.grade,
            predicted_grade,
            timestamp: video.timestamp,
            predicted_timestamp,
            segment: video.segment,
            windows,
            probs,
        };
        let Some(lm) = &self.lm else {
            let (a, b) = match self.config.mode {
                Mode::Trimmed(w) => Self::trimmed_window(video.timestamp, w, len),
                _ => (0, len),
            };
            let seg = g.slice_rows(x, a, b)?;
            let pooled = self.gm.pooled(&mut g, &self.params, seg)?;
            let logits = g.value(pooled).data().to_vec();
            let grade = argmax(&logits) + 1;
            let window = WindowRecord {
                peak: a,
                start: a,
                end: b,
                amplitude_left: 0.0,
                sigma_left: 0.0,
                amplitude_right: 0.0,
                sigma_right: 0.0,
                logits,
            };
            return Ok(strategies
                .iter()
                .map(|_| record(grade, None, vec![window.clone()], Vec::new()))
                .collect());
        };

        let scores = lm.forward(&mut g, &self.params, x)?;
        let probs = g.sigmoid(scores);
        let prob_values = g.value(probs).data().to_vec();
        let t_hat = argmax(&prob_values);
        let mut windows = self.windows_for(&prob_values);
        let xr = reweight(&mut g, x, probs)?;
        for w in windows.iter_mut() {
            let seg = g.slice_rows(xr, w.start, w.end)?;
            let pooled = self.gm.pooled(&mut g, &self.params, seg)?;
            w.logits = g.value(pooled).data().to_vec();
        }
        let heights: Vec<f64> = windows.iter().map(|w| prob_values[w.peak]).collect();
        let logits: Vec<Vec<f64>> = windows.iter().map(|w| w.logits.clone()).collect();
        strategies
            .iter()
            .map(|&s| {
                let grade = consensus(&heights, &logits, s)?;
                Ok(record(grade, Some(t_hat), windows.clone(), prob_values.clone()))
            })
            .collect()
    }

    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<EvalReport> {
        Ok(self
            .evaluate_strategies(dataset, split, &[self.config.consensus])?
            .remove(0))
    }

    /// One report per consensus strategy from a single pass over the split.
    pub fn evaluate_strategies(
        &self,
        dataset: &Dataset,
        split: Split,
        strategies: &[Consensus],
    ) -> Result<Vec<EvalReport>> {
        let mut per: Vec<Vec<VideoRecord>> = vec![Vec::new(); strategies.len()];
        for v in dataset.split(split) {
            for (slot, rec) in per.iter_mut().zip(self.predict_all(v, strategies)?) {
                slot.push(rec);
            }
        }
        per.into_iter()
            .map(|records| {
                EvalReport::from_records(
                    self.config.mode.to_string(),
                    dataset.config.classes,
                    records,
                    self.config.averaging,
                )
            })
            .collect()
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: Option<f64>,
    pub cosine: Option<f64>,
    pub grading: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: LossParts,
    pub val_accuracy: Option<f64>,
    pub val_mae: Option<f64>,
}

pub fn write_log_csv(log: &[EpochLog], mut w: impl Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    writeln!(w, "epoch,stage,loss,bce,cosine,grading,val_accuracy,val_mae")?;
    for e in log {
        writeln!(
            w,
            "{},{},{:.9},{},{},{},{},{}",
            e.epoch,
            e.stage.as_str(),
            e.loss.total,
            opt(e.loss.bce),
            opt(e.loss.cosine),
            opt(e.loss.grading),
            opt(e.val_accuracy),
            opt(e.val_mae),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Epoch whose parameters the model holds (1-based; 0 = untrained).
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

fn set_stage_flags(params: &mut ParamStore, stage: Stage, has_lm: bool) {
    let (lm, gm) = match stage {
        Stage::Localization => (true, false),
        Stage::Joint => (true, true),
        Stage::Grading => (false, true),
    };
    if has_lm {
        params.set_trainable(LM_PREFIX, lm);
    }
    params.set_trainable(GM_PREFIX, gm);
}

/// Trains on the dataset's train split, one video per update.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut model = Model::for_dataset(cfg, dataset)?;
    train_model(&mut model, dataset)
}

pub fn train_model(model: &mut Model, dataset: &Dataset) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let train_set: Vec<&SynthVideo> = dataset.train().collect();
    if train_set.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let has_lm = model.lm.is_some();

    for epoch in 0..cfg.epochs {
        let stage = stage_for(&cfg, epoch);
        set_stage_flags(&mut model.params, stage, has_lm);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[STREAM_SHUFFLE, epoch as u64],
        )));

        let mut sums = LossParts::default();
        let add = |acc: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *acc = Some(acc.unwrap_or(0.0) + v);
            }
        };
        for (step, &i) in order.iter().enumerate() {
            let mut g = Graph::training(derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, step as u64]));
            let (loss, parts) = model.video_loss(&mut g, train_set[i], stage)?;
            if !parts.total.is_finite() {
                return Err(invalid(format!(
                    "non-finite loss at epoch {epoch}, video {}",
                    train_set[i].id
                )));
            }
            model.params.zero_grad();
            if g.requires_grad(loss) {
                g.backward(loss, &mut model.params)?;
            }
            adam.step(&mut model.params)?;
            sums.total += parts.total;
            add(&mut sums.bce, parts.bce);
            add(&mut sums.cosine, parts.cosine);
            add(&mut sums.grading, parts.grading);
        }
        let n = train_set.len() as f64;
        let mean = LossParts {
            total: sums.total / n,
            bce: sums.bce.map(|v| v / n),
            cosine: sums.cosine.map(|v| v / n),
            grading: sums.grading.map(|v| v / n),
        };

        let (mut val_accuracy, mut val_mae) = (None, None);
        if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
            let report = model.evaluate(dataset, Split::Test)?;
            val_accuracy = Some(report.scores.accuracy);
            val_mae = report.mae;
            if cfg.select_best && best.as_ref().is_none_or(|(acc, _, _)| report.scores.accuracy > *acc) {
                best = Some((report.scores.accuracy, epoch + 1, model.params.clone()));
            }
        }
        log::info!(
            "epoch {:>3} {:<12} loss {:.5}{}",
            epoch + 1,
            stage.as_str(),
            mean.total,
            val_accuracy.map(|a| format!("  val acc {:.2}%", 100.0 * a)).unwrap_or_default()
        );
        log.push(EpochLog {
            epoch: epoch + 1,
            stage,
            loss: mean,
            val_accuracy,
            val_mae,
        });
    }
    model.params.set_trainable(GM_PREFIX, true);
    if has_lm {
        model.params.set_trainable(LM_PREFIX, true);
    }
    let mut epoch = cfg.epochs;
    if let Some((_, e, params)) = best {
        model.params = params;
        epoch = e;
    }
    Ok(TrainOutcome {
        model: model.clone(),
        epoch,
        log,
    })
}

/// Trains with `cfg` and evaluates on the test split.
pub fn run_experiment(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(dataset, cfg)?;
    let report = outcome.model.evaluate(dataset, Split::Test)?;
    Ok((outcome, report))
}

/// [`run_experiment`] with the mode overridden.
pub fn run_baseline(dataset: &Dataset, mode: Mode, cfg: &TrainConfig) -> Result<EvalReport> {
    let cfg = TrainConfig {
        mode,
        ..cfg.clone()
    };
    Ok(run_experiment(dataset, &cfg)?.1)
}

/// Feature rows of `video` as a standalone tensor (used by tooling).
pub fn window_features(video: &SynthVideo, start: usize, end: usize) -> Result<Tensor> {
    if start >= end || end > video.len() {
        return Err(invalid(format!("window [{start}, {end}) outside [0, {})", video.len())));
    }
    let d = video.features.row_len();
    Tensor::new(
        vec![end - start, d],
        video.features.data()[start * d..end * d].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.5), true);
        store.accumulate("w", &Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut store).unwrap();
        let w = store.value("w").unwrap().item().unwrap();
        assert!((w - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_advances_counter_only() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap(), true);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(adam.steps("w"), 1);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let (lr, g) = (0.05, 0.3);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0), true);
        let mut adam = Adam::new(lr);
        for _ in 0..2 {
            store.zero_grad();
            store.accumulate("w", &Tensor::scalar(g)).unwrap();
            adam.step(&mut store).unwrap();
        }
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for k in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(store.value("w").unwrap().item().unwrap(), w);
    }

    #[test]
    fn adam_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), false);
        store.get_mut("w").unwrap().grad = Tensor::scalar(5.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value("w").unwrap().item().unwrap(), 1.0);
        assert_eq!(adam.steps("w"), 0);
    }

    #[test]
    fn mode_and_scheme_parse() {
        for m in ["stc", "full", "no_wpm", "trimmed:120", "fixed_window:60"] {
            assert_eq!(m.parse::<Mode>().unwrap().to_string(), m);
        }
        assert!("trimmed:0".parse::<Mode>().is_err());
        assert!("windowed".parse::<Mode>().is_err());
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
    }

    #[test]
    fn mode_scheme_conflict_rejected() {
        let cfg = TrainConfig {
            mode: Mode::Full,
            scheme: Scheme::TwoStage,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("end_to_end"), "{err}");
    }

    #[test]
    fn stages_follow_scheme() {
        let cfg = |scheme| TrainConfig {
            scheme,
            e_frozen: 2,
            epochs: 4,
            ..TrainConfig::default()
        };
        let stages = |c: &TrainConfig| (0..4).map(|e| stage_for(c, e)).collect::<Vec<_>>();
        use Stage::*;
        assert_eq!(stages(&cfg(Scheme::TwoStage)), [Localization, Localization, Joint, Joint]);
        assert_eq!(stages(&cfg(Scheme::EndToEnd)), [Joint; 4]);
        assert_eq!(stages(&cfg(Scheme::Separate)), [Localization, Localization, Grading, Grading]);
    }

    #[test]
    fn trimmed_window_clamps() {
        assert_eq!(Model::trimmed_window(50, 20, 200), (40, 60));
        assert_eq!(Model::trimmed_window(3, 20, 200), (0, 20));
        assert_eq!(Model::trimmed_window(195, 20, 200), (185, 200));
        assert_eq!(Model::trimmed_window(10, 400, 200), (0, 200));
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = generate(&SynthConfig {
            videos: 6,
            min_len: 40,
            max_len: 60,
            min_segment: 5,
            max_segment: 10,
            max_distractors: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            e_frozen: 1,
            delta: 3,
            lm: LmConfig {
                width: 8,
                dilations: vec![1, 2],
                ..LmConfig::default()
            },
            gm: GmConfig {
                width: 8,
                ..GmConfig::default()
            },
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn every_mode_trains_and_evaluates() {
        let (ds, cfg) = tiny();
        for mode in [
            Mode::Stc,
            Mode::Full,
            Mode::Trimmed(16),
            Mode::FixedWindow(12),
            Mode::NoWpm,
        ] {
            let scheme = if mode.uses_localizer() { Scheme::TwoStage } else { Scheme::EndToEnd };
            let cfg = TrainConfig { mode, scheme, ..cfg.clone() };
            let (outcome, report) = run_experiment(&ds, &cfg).unwrap();
            assert_eq!(outcome.log.len(), 2);
            assert_eq!(report.videos.len(), ds.test().count());
            assert_eq!(report.mae.is_some(), mode.uses_localizer(), "{mode}");
        }
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let (ds, cfg) = tiny();
        let outcome = train(&ds, &cfg).unwrap();
        let mut buf = Vec::new();
        write_log_csv(&outcome.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,localization,"));
        assert!(lines[2].starts_with("2,joint,"));
    }
}
