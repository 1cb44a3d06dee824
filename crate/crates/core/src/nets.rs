//! Localization and grading networks, window reweighting, top-K pooling and
//! the consensus block.
//!
//! Both networks are stacks of dilated residual temporal-convolution layers:
//! a 1×1 input projection, then per layer
//! `h ← h + dropout(W₁ₓ₁ · relu(conv_dilated(h)))`, then a 1×1 head. The
//! localization head emits one score per frame; the grading head emits
//! `C + 1` logits per frame (index 0 is background) or `C` logits when the
//! background class is disabled.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Localization network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub input_dim: usize,
    pub width: usize,
    /// One residual layer per entry.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            width: 64,
            dilations: vec![1, 2, 4, 8, 16],
            kernel: 3,
            dropout: 0.2,
        }
    }
}

/// Grading network shape and pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmConfig {
    pub input_dim: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
    /// Number of grades `C`.
    pub classes: usize,
    /// `K` of top-K pooling.
    pub pool_k: usize,
    /// Emit a leading background logit (`C + 1` outputs) instead of `C`.
    pub background: bool,
}

impl Default for GmConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            width: 64,
            dilations: vec![1, 2],
            kernel: 3,
            dropout: 0.2,
            classes: 5,
            pool_k: 8,
            background: true,
        }
    }
}

impl GmConfig {
    pub fn outputs(&self) -> usize {
        self.classes + usize::from(self.background)
    }
}

fn check_stack(what: &str, input_dim: usize, width: usize, kernel: usize, dropout: f64, dil: &[usize]) -> Result<()> {
    if input_dim == 0 || width == 0 {
        return Err(Error::Config(format!("{what}: widths must be positive")));
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("{what}: kernel must be odd, got {kernel}")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("{what}: dropout {dropout} outside [0, 1)")));
    }
    if dil.contains(&0) {
        return Err(Error::Config(format!("{what}: dilations must be positive")));
    }
    Ok(())
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        check_stack("lm", self.input_dim, self.width, self.kernel, self.dropout, &self.dilations)
    }
}

impl GmConfig {
    pub fn validate(&self) -> Result<()> {
        check_stack("gm", self.input_dim, self.width, self.kernel, self.dropout, &self.dilations)?;
        if self.classes < 2 {
            return Err(Error::Config(format!("gm: need C >= 2 classes, got {}", self.classes)));
        }
        if self.pool_k == 0 {
            return Err(Error::Config("gm: pool_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dilated residual stack shared by both networks.
struct ConvStack<'a> {
    prefix: &'a str,
    input_dim: usize,
    width: usize,
    dilations: &'a [usize],
    kernel: usize,
    dropout: f64,
    outputs: usize,
}

impl ConvStack<'_> {
    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let mut add = |name: String, taps: usize, cin: usize, cout: usize| {
            let bound = 1.0 / ((taps * cin) as f64).sqrt();
            let w: Vec<f64> = (0..taps * cin * cout)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(format!("{name}.w"), Tensor::new(vec![taps, cin, cout], w).expect("shape"), true);
            store.insert(format!("{name}.b"), Tensor::vector(b).expect("shape"), true);
        };
        let p = self.prefix;
        add(format!("{p}.in"), 1, self.input_dim, self.width);
        for (i, _) in self.dilations.iter().enumerate() {
            add(format!("{p}.l{i}.dil"), self.kernel, self.width, self.width);
            add(format!("{p}.l{i}.pw"), 1, self.width, self.width);
        }
        add(format!("{p}.head"), 1, self.width, self.outputs);
    }

    fn layer(&self, g: &mut Graph, store: &ParamStore, name: &str, x: Var, dilation: usize, pad: usize) -> Result<Var> {
        let w = g.param(store, &format!("{}.{name}.w", self.prefix))?;
        let b = g.param(store, &format!("{}.{name}.b", self.prefix))?;
        g.conv1d(x, w, Some(b), dilation, pad)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape {
                op: "temporal network input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let mut h = self.layer(g, store, "in", x, 1, 0)?;
        for (i, &d) in self.dilations.iter().enumerate() {
            let pad = d * (self.kernel - 1) / 2;
            let z = self.layer(g, store, &format!("l{i}.dil"), h, d, pad)?;
            let z = g.relu(z);
            let z = self.layer(g, store, &format!("l{i}.pw"), z, 1, 0)?;
            let z = g.dropout(z, self.dropout)?;
            h = g.add(h, z)?;
        }
        self.layer(g, store, "head", h, 1, 0)
    }
}

/// The localization module: `[T, D]` features → `[T]` frame scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationNet {
    pub config: LmConfig,
}

pub const LM_PREFIX: &str = "lm";
pub const GM_PREFIX: &str = "gm";

impl LocalizationNet {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn stack(&self) -> ConvStack<'_> {
        ConvStack {
            prefix: LM_PREFIX,
            input_dim: self.config.input_dim,
            width: self.config.width,
            dilations: &self.config.dilations,
            kernel: self.config.kernel,
            dropout: self.config.dropout,
            outputs: 1,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stack().init(store, rng);
    }

    /// Raw scores `ŷ` of shape `[T]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = g.shape(x).first().copied().unwrap_or(0);
        let out = self.stack().forward(g, store, x)?;
        g.reshape(out, vec![t])
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn localize(&self, store: &ParamStore, features: &Tensor) -> Result<LocalizationOutput> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let y = self.forward(&mut g, store, x)?;
        Ok(LocalizationOutput::from_scores(g.value(y).data().to_vec()))
    }
}

/// The grading module: reweighted window features `[Tᵢ, D]` → frame logits `[Tᵢ, C(+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradingNet {
    pub config: GmConfig,
}

impl GradingNet {
    pub fn new(config: GmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn stack(&self) -> ConvStack<'_> {
        ConvStack {
            prefix: GM_PREFIX,
            input_dim: self.config.input_dim,
            width: self.config.width,
            dilations: &self.config.dilations,
            kernel: self.config.kernel,
            dropout: self.config.dropout,
            outputs: self.config.outputs(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stack().init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.stack().forward(g, store, x)
    }

    /// Frame logits followed by top-K pooling into one logit per class.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let frames = self.forward(g, store, x)?;
        topk_pool(g, frames, self.config.pool_k)
    }
}

/// Frame scores, their sigmoid probabilities and the predicted timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationOutput {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub timestamp: usize,
}

impl LocalizationOutput {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let probs = scores.iter().map(|&s| sigmoid(s)).collect();
        let timestamp = argmax(&scores);
        Self {
            scores,
            probs,
            timestamp,
        }
    }
}

/// Index of the largest value; ties go to the smallest index. Empty → 0.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `X̃ = X ⊙ p + X`, with `p` broadcast across feature channels.
///
/// Gradients flow into both the features and the probabilities.
pub fn reweight(g: &mut Graph, x: Var, probs: Var) -> Result<Var> {
    let (sx, sp) = (g.shape(x).to_vec(), g.shape(probs).to_vec());
    if sx.len() != 2 || sp.len() != 1 || sx[0] != sp[0] {
        return Err(Error::Shape {
            op: "reweight",
            lhs: sx,
            rhs: sp,
        });
    }
    let col = g.reshape(probs, vec![sp[0], 1])?;
    let weighted = g.mul(x, col)?;
    g.add(weighted, x)
}

/// Per-class mean of the `k` largest frame logits (all frames when `Tᵢ < k`).
pub fn topk_pool(g: &mut Graph, frame_logits: Var, k: usize) -> Result<Var> {
    g.topk_mean(frame_logits, k)
}

/// Per-proposal grade logits together with the frame logits they were pooled from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalLogits {
    pub window: usize,
    pub logits: Vec<f64>,
    pub frame_logits: Tensor,
}

/// Rule for turning per-proposal logits into one grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    /// Proposal whose peak has the highest localization score.
    HighestPeak,
    /// Mean logits over all proposals.
    Average,
    /// Most frequent per-proposal grade; ties go to the highest mean logit.
    MajorityVote,
    /// Proposal holding the single largest grade logit.
    HighestConfidence,
}

impl Consensus {
    pub const ALL: [Consensus; 4] = [
        Consensus::Average,
        Consensus::MajorityVote,
        Consensus::HighestConfidence,
        Consensus::HighestPeak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Consensus::HighestPeak => "highest_peak",
            Consensus::Average => "average",
            Consensus::MajorityVote => "majority_vote",
            Consensus::HighestConfidence => "highest_confidence",
        }
    }
}

impl fmt::Display for Consensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Consensus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Consensus::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown consensus `{s}`")))
    }
}

/// Grade in `1..=C` from per-proposal `(C + 1)`-logit rows; index 0 (background)
/// never wins.
///
/// `peak_heights[i]` is the localization confidence at proposal `i`'s peak.
pub fn consensus(peak_heights: &[f64], logits: &[Vec<f64>], strategy: Consensus) -> Result<usize> {
    if logits.is_empty() {
        return Err(invalid("consensus over an empty proposal list"));
    }
    if peak_heights.len() != logits.len() {
        return Err(invalid(format!(
            "consensus: {} peak heights for {} proposals",
            peak_heights.len(),
            logits.len()
        )));
    }
    let width = logits[0].len();
    if width < 3 || logits.iter().any(|l| l.len() != width) {
        return Err(invalid("consensus: logit rows must share a width of at least 3"));
    }
    let grade_of = |row: &[f64]| 1 + argmax(&row[1..]);
    let mean: Vec<f64> = (0..width)
        .map(|j| logits.iter().map(|l| l[j]).sum::<f64>() / logits.len() as f64)
        .collect();

    let grade = match strategy {
        Consensus::HighestPeak => grade_of(&logits[argmax(peak_heights)]),
        Consensus::Average => grade_of(&mean),
        Consensus::MajorityVote => {
            let mut votes = vec![0usize; width];
            for l in logits {
                votes[grade_of(l)] += 1;
            }
            let top = *votes.iter().max().expect("non-empty");
            (1..width)
                .filter(|&c| votes[c] == top)
                .fold(None::<usize>, |best, c| match best {
                    Some(b) if mean[b] >= mean[c] => Some(b),
                    _ => Some(c),
                })
                .expect("at least one vote")
        }
        Consensus::HighestConfidence => {
            let best = logits
                .iter()
                .map(|l| l[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect::<Vec<_>>();
            grade_of(&logits[argmax(&best)])
        }
    };
    Ok(grade)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_store(net: &LocalizationNet) -> ParamStore {
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, p) in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn zero_weights_give_flat_half_probabilities() {
        let net = LocalizationNet::new(LmConfig {
            input_dim: 3,
            width: 4,
            ..LmConfig::default()
        })
        .unwrap();
        let store = zero_store(&net);
        let x = Tensor::matrix(6, 3, (0..18).map(f64::from).collect()).unwrap();
        let out = net.localize(&store, &x).unwrap();
        assert_eq!(out.scores, vec![0.0; 6]);
        assert_eq!(out.probs, vec![0.5; 6]);
        assert_eq!(out.timestamp, 0);

        let one = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = net.localize(&store, &one).unwrap();
        assert_eq!(out.scores.len(), 1);
        assert_eq!(out.timestamp, 0);
    }

    #[test]
    fn input_dim_mismatch_rejected() {
        let net = LocalizationNet::new(LmConfig {
            input_dim: 3,
            width: 4,
            ..LmConfig::default()
        })
        .unwrap();
        let store = zero_store(&net);
        let x = Tensor::matrix(5, 2, vec![0.0; 10]).unwrap();
        assert!(matches!(net.localize(&store, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn grading_zero_weights_emit_bias() {
        let net = GradingNet::new(GmConfig {
            input_dim: 2,
            width: 3,
            classes: 3,
            ..GmConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        for (name, p) in store.iter_mut() {
            if name == "gm.head.b" {
                p.value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
            } else {
                p.value.data_mut().fill(0.0);
            }
        }
        for t in [1usize, 7] {
            let mut g = Graph::new();
            let x = g.input(Tensor::full(&[t, 2], 1.3));
            let y = net.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[t, 4]);
            for r in 0..t {
                assert_eq!(g.value(y).row(r), &[0.5, -1.0, 2.0, 0.25]);
            }
        }
    }

    #[test]
    fn reweight_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let p = g.input(Tensor::vector(vec![0.5]).unwrap());
        let y = reweight(&mut g, x, p).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 3.0]);

        let xs = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, -3.0, 0.0]).unwrap();
        let x = g.input(xs.clone());
        let zero = g.input(Tensor::zeros(&[3]));
        let one = g.input(Tensor::full(&[3], 1.0));
        let y0 = reweight(&mut g, x, zero).unwrap();
        let y1 = reweight(&mut g, x, one).unwrap();
        assert_eq!(g.value(y0), &xs);
        assert_eq!(g.value(y1), &xs.map(|v| 2.0 * v));

        let bad = g.input(Tensor::zeros(&[2]));
        assert!(reweight(&mut g, x, bad).is_err());
    }

    #[test]
    fn reweight_sends_gradient_to_both_operands() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.variable(Tensor::vector(vec![0.25, 0.5]).unwrap());
        let y = reweight(&mut g, x, p).unwrap();
        let s = g.sum(y);
        let gr = g.gradients(s).unwrap();
        assert_eq!(gr.get(p).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(gr.get(x).unwrap().data(), &[1.25, 1.25, 1.5, 1.5]);
    }

    #[test]
    fn topk_examples() {
        let mut g = Graph::new();
        let col = g.input(Tensor::matrix(5, 1, vec![5.0, 1.0, 4.0, 2.0, 3.0]).unwrap());
        let y = topk_pool(&mut g, col, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.5]);

        let flat = g.input(Tensor::full(&[12, 3], -0.75));
        let y = topk_pool(&mut g, flat, 8).unwrap();
        assert_eq!(g.value(y).data(), &[-0.75; 3]);

        let short = g.input(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let y = topk_pool(&mut g, short, 8).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn consensus_excludes_background() {
        let logits = vec![vec![9.0, 1.0, 3.0]];
        for s in Consensus::ALL {
            assert_eq!(consensus(&[0.7], &logits, s).unwrap(), 2, "{s}");
        }
    }

    #[test]
    fn highest_peak_follows_the_peak() {
        let logits = vec![vec![0.0, 5.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 9.0]];
        assert_eq!(consensus(&[0.9, 0.6], &logits, Consensus::HighestPeak).unwrap(), 1);
    }

    #[test]
    fn strategies_disagree_on_constructed_case() {
        // Hand enumeration, background column first:
        //   p0: argmax c1 (2.0)   p1: argmax c1 (2.1)   p2: argmax c2 (6.0)
        //   mean = [0, 4/3.. ] -> c1: (2.0+2.1+0)/3 = 1.367, c2: (0+0+6)/3 = 2.0, c3: 1.0
        //   highest_peak: p2 (0.95) -> c2
        //   average: c2
        //   majority_vote: c1 (two votes)
        //   highest_confidence: p2 holds 6.0 -> c2
        let logits = vec![
            vec![0.0, 2.0, 0.0, 1.0],
            vec![0.0, 2.1, 0.0, 1.0],
            vec![0.0, 0.0, 6.0, 1.0],
        ];
        let peaks = [0.6, 0.7, 0.95];
        assert_eq!(consensus(&peaks, &logits, Consensus::MajorityVote).unwrap(), 1);
        assert_eq!(consensus(&peaks, &logits, Consensus::HighestConfidence).unwrap(), 2);
        assert_eq!(consensus(&peaks, &logits, Consensus::Average).unwrap(), 2);
        assert_eq!(consensus(&peaks, &logits, Consensus::HighestPeak).unwrap(), 2);
        // Same logits, peak moved to p0: only highest_peak changes.
        assert_eq!(consensus(&[0.99, 0.7, 0.95], &logits, Consensus::HighestPeak).unwrap(), 1);
    }

    #[test]
    fn majority_tie_uses_mean_logit() {
        let logits = vec![vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 4.0]];
        assert_eq!(consensus(&[0.5, 0.5], &logits, Consensus::MajorityVote).unwrap(), 2);
    }

    #[test]
    fn empty_consensus_rejected() {
        assert!(consensus(&[], &[], Consensus::Average).is_err());
    }
}
