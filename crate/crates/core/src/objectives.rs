//! Training losses built on the autodiff graph.
//!
//! * `bce_loss`: binary cross-entropy on frame probabilities where negatives
//!   inside the neutral zone `[t − 3δ, t + 3δ]` are skipped.
//! * `cosine_loss`: one minus the cosine between the temporal softmax of the
//!   scores and a Gaussian reference centered at `t` with deviation `δ`.
//! * `grading_loss`: cross-entropy of the proposal nearest to `t` against the
//!   grade plus the mean background cross-entropy of all other proposals.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Which localization terms are active (loss ablations).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocTerms {
    pub bce: bool,
    pub cosine: bool,
}

impl Default for LocTerms {
    fn default() -> Self {
        Self {
            bce: true,
            cosine: true,
        }
    }
}

/// Inclusive neutral zone `[t − 3δ, t + 3δ]` clipped to the sequence.
pub fn neutral_zone(t: usize, delta: usize, len: usize) -> (usize, usize) {
    let half = 3 * delta;
    (t.saturating_sub(half), (t + half).min(len.saturating_sub(1)))
}

/// `exp(−(j − t)²/(2δ²))` for `j = 0..len` (unit amplitude).
pub fn gaussian_reference(len: usize, t: usize, delta: f64) -> Vec<f64> {
    (0..len)
        .map(|j| {
            let d = j as f64 - t as f64;
            (-d * d / (2.0 * delta * delta)).exp()
        })
        .collect()
}

fn check_target(len: usize, t: usize, delta: usize) -> Result<()> {
    if t >= len {
        return Err(invalid(format!("timestamp {t} out of range for length {len}")));
    }
    if delta == 0 {
        return Err(invalid("tolerance δ must be at least 1"));
    }
    Ok(())
}

fn vector_len(g: &Graph, v: Var, op: &'static str) -> Result<usize> {
    match g.shape(v) {
        [n] => Ok(*n),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![0],
        }),
    }
}

/// `−log p_t − (1/(T−1))·Σ_{j ∉ zone} log(1 − p_j)` on clamped probabilities.
///
/// The normalizer stays `T − 1` regardless of how many frames fall outside
/// the zone; for `T = 1` the negative term is 0.
pub fn bce_loss(g: &mut Graph, probs: Var, t: usize, delta: usize) -> Result<Var> {
    let len = vector_len(g, probs, "bce_loss")?;
    check_target(len, t, delta)?;
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let pt = g.pick(p, t)?;
    let log_pt = g.log(pt);
    let positive = g.neg(log_pt);
    if len == 1 {
        return Ok(positive);
    }
    let (lo, hi) = neutral_zone(t, delta, len);
    let mask: Vec<f64> = (0..len)
        .map(|j| if j < lo || j > hi { 1.0 } else { 0.0 })
        .collect();
    let mask = g.input(Tensor::vector(mask)?);
    let neg_p = g.neg(p);
    let one_minus = g.add_scalar(neg_p, 1.0);
    let log_q = g.log(one_minus);
    let masked = g.mul(log_q, mask)?;
    let total = g.sum(masked);
    let negative = g.scale(total, -1.0 / (len as f64 - 1.0));
    g.add(positive, negative)
}

/// `1 − ⟨softmax(ŷ), 𝒩⟩ / (‖softmax(ŷ)‖·‖𝒩‖)` with `𝒩_j = exp(−(j−t)²/(2δ²))`.
pub fn cosine_loss(g: &mut Graph, scores: Var, t: usize, delta: usize) -> Result<Var> {
    let len = vector_len(g, scores, "cosine_loss")?;
    check_target(len, t, delta)?;
    let reference = gaussian_reference(len, t, delta as f64);
    let ref_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let reference = g.input(Tensor::vector(reference)?);
    let soft = g.softmax(scores, 0)?;
    let dot = g.dot(soft, reference)?;
    let norm = g.l2_norm(soft);
    let denom = g.scale(norm, ref_norm);
    let cos = g.div(dot, denom)?;
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Value breakdown of a localization loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocLossParts {
    pub bce: f64,
    pub cosine: f64,
}

/// `L_bce + α·L_cos`, with either term switchable off.
pub fn localization_loss(
    g: &mut Graph,
    scores: Var,
    probs: Var,
    t: usize,
    delta: usize,
    alpha: f64,
    terms: LocTerms,
) -> Result<(Var, LocLossParts)> {
    if alpha < 0.0 {
        return Err(invalid(format!("α must be non-negative, got {alpha}")));
    }
    let mut parts = LocLossParts::default();
    let mut total: Option<Var> = None;
    if terms.bce {
        let b = bce_loss(g, probs, t, delta)?;
        parts.bce = g.value(b).item()?;
        total = Some(b);
    }
    if terms.cosine {
        let c = cosine_loss(g, scores, t, delta)?;
        parts.cosine = g.value(c).item()?;
        let c = g.scale(c, alpha);
        total = Some(match total {
            Some(b) => g.add(b, c)?,
            None => c,
        });
    }
    let total = match total {
        Some(v) => v,
        None => g.input(Tensor::scalar(0.0)),
    };
    Ok((total, parts))
}

/// Index of the proposal whose peak is nearest to `t` (ties → smaller peak index).
pub fn positive_index(peaks: &[usize], t: usize) -> Option<usize> {
    peaks
        .iter()
        .enumerate()
        .min_by_key(|&(_, &mu)| (mu.abs_diff(t), mu))
        .map(|(i, _)| i)
}

/// `−log softmax(logits)[class]` for a `[C+1]` logit vector.
pub fn cross_entropy(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    let ls = g.log_softmax(logits, 0)?;
    let picked = g.pick(ls, class)?;
    Ok(g.neg(picked))
}

/// Background-aware grading loss over `M` proposals.
///
/// `logits[i]` are proposal `i`'s pooled `[C+1]` logits and `peaks[i]` its
/// peak frame; `grade ∈ 1..=C`. With `include_background` off only the
/// positive term is used; with `M = 1` the background term is 0.
pub fn grading_loss(
    g: &mut Graph,
    logits: &[Var],
    peaks: &[usize],
    t: usize,
    grade: usize,
    include_background: bool,
) -> Result<Var> {
    if logits.is_empty() {
        return Err(invalid("grading loss over an empty proposal set"));
    }
    if logits.len() != peaks.len() {
        return Err(invalid(format!(
            "grading loss: {} logit rows for {} peaks",
            logits.len(),
            peaks.len()
        )));
    }
    let width = vector_len(g, logits[0], "grading_loss")?;
    if grade == 0 || grade >= width {
        return Err(invalid(format!("grade {grade} outside 1..={}", width - 1)));
    }
    let pos = positive_index(peaks, t).expect("non-empty");
    let positive = cross_entropy(g, logits[pos], grade)?;
    let m = logits.len();
    if !include_background || m == 1 {
        return Ok(positive);
    }
    let mut acc: Option<Var> = None;
    for (i, &l) in logits.iter().enumerate() {
        if i == pos {
            continue;
        }
        let ce = cross_entropy(g, l, 0)?;
        acc = Some(match acc {
            Some(a) => g.add(a, ce)?,
            None => ce,
        });
    }
    let bg = g.scale(acc.expect("m > 1"), 1.0 / (m as f64 - 1.0));
    g.add(positive, bg)
}

/// `L_G + β·L_L`.
pub fn total_loss(g: &mut Graph, grading: Var, localization: Var, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(invalid(format!("β must be non-negative, got {beta}")));
    }
    let weighted = g.scale(localization, beta);
    g.add(grading, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.variable(Tensor::vector(v.to_vec()).unwrap())
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn bce_hand_value() {
        // T=10, t=5, δ=1 → zone [2, 8]; negatives at 0, 1, 9.
        let mut g = Graph::new();
        let p = vec_var(&mut g, &[0.5; 10]);
        let l = bce_loss(&mut g, p, 5, 1).unwrap();
        let ln2 = std::f64::consts::LN_2;
        let want = ln2 + 3.0 * ln2 / 9.0;
        assert!((value(&g, l) - want).abs() < 1e-12);
        assert!((value(&g, l) - 0.9242).abs() < 1e-4);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let mut probs = vec![PROB_EPS; 40];
        probs[20] = 1.0 - PROB_EPS;
        let mut g = Graph::new();
        let p = vec_var(&mut g, &probs);
        let l = bce_loss(&mut g, p, 20, 2).unwrap();
        assert!(value(&g, l) <= 3e-7);
    }

    #[test]
    fn bce_zone_is_neutral() {
        let base: Vec<f64> = (0..30).map(|i| 0.1 + 0.02 * i as f64).collect();
        let loss_of = |probs: &[f64]| {
            let mut g = Graph::new();
            let p = vec_var(&mut g, probs);
            let l = bce_loss(&mut g, p, 15, 2).unwrap();
            value(&g, l)
        };
        let reference = loss_of(&base);
        for j in 9..=21 {
            if j == 15 {
                continue;
            }
            let mut p = base.clone();
            p[j] = 0.99;
            assert_eq!(loss_of(&p), reference, "frame {j}");
        }
        let mut p = base.clone();
        p[3] = 0.99;
        assert!(loss_of(&p) > reference);
    }

    #[test]
    fn bce_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let p = vec_var(&mut g, &[0.5; 4]);
        assert!(bce_loss(&mut g, p, 4, 1).is_err());
    }

    #[test]
    fn cosine_zero_for_parallel_scores() {
        let (len, t, delta) = (60, 22, 4);
        // softmax(log 𝒩) ∝ 𝒩
        let scores: Vec<f64> = gaussian_reference(len, t, delta as f64)
            .iter()
            .map(|v| v.ln())
            .collect();
        let mut g = Graph::new();
        let s = vec_var(&mut g, &scores);
        let l = cosine_loss(&mut g, s, t, delta).unwrap();
        assert!(value(&g, l).abs() < 1e-12);
    }

    #[test]
    fn cosine_hand_value() {
        let gref = [(-2.0f64).exp(), (-0.5f64).exp(), 1.0, (-0.5f64).exp(), (-2.0f64).exp()];
        let norm = gref.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = 1.0 - (gref.iter().sum::<f64>() / 5.0) / ((1.0 / 5f64.sqrt()) * norm);
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[0.0; 5]);
        let l = cosine_loss(&mut g, s, 2, 1).unwrap();
        assert!((value(&g, l) - want).abs() < 1e-12);
    }

    #[test]
    fn localization_combinations() {
        let scores = [0.3, -1.0, 2.0, 0.5, -0.2, 0.1];
        let run = |alpha, terms| {
            let mut g = Graph::new();
            let s = vec_var(&mut g, &scores);
            let p = g.sigmoid(s);
            let (l, parts) = localization_loss(&mut g, s, p, 2, 1, alpha, terms).unwrap();
            (value(&g, l), parts)
        };
        let (l0, parts) = run(0.0, LocTerms::default());
        assert_eq!(l0, parts.bce);
        let (l1, parts) = run(1.0, LocTerms::default());
        assert!((l1 - (parts.bce + parts.cosine)).abs() < 1e-15);
        let (none, _) = run(1.0, LocTerms { bce: false, cosine: false });
        assert_eq!(none, 0.0);
    }

    #[test]
    fn grading_uniform_single_proposal() {
        let mut g = Graph::new();
        let l = vec_var(&mut g, &[0.0; 6]);
        let loss = grading_loss(&mut g, &[l], &[10], 10, 3, true).unwrap();
        assert!((value(&g, loss) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grading_saturated_is_tiny() {
        let mut g = Graph::new();
        let pos = vec_var(&mut g, &[0.0, 0.0, 20.0]);
        let neg1 = vec_var(&mut g, &[20.0, 0.0, 0.0]);
        let neg2 = vec_var(&mut g, &[20.0, 0.0, 0.0]);
        let loss = grading_loss(&mut g, &[neg1, pos, neg2], &[10, 50, 90], 48, 2, true).unwrap();
        assert!(value(&g, loss) <= 1e-8, "{}", value(&g, loss));
    }

    #[test]
    fn grading_three_proposals_hand_value() {
        // Independent evaluation: log-sum-exp by hand.
        let rows = [[0.2, 1.0, -0.5], [1.5, 0.0, 0.3], [-0.4, 0.8, 0.9]];
        let ce = |r: &[f64; 3], c: usize| {
            let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - r[c]
        };
        // peaks 30, 55, 70 with t = 60 → positive is proposal 1 (|55−60| = 5)
        let want = ce(&rows[1], 2) + 0.5 * (ce(&rows[0], 0) + ce(&rows[2], 0));
        let mut g = Graph::new();
        let vars: Vec<Var> = rows.iter().map(|r| vec_var(&mut g, r)).collect();
        let loss = grading_loss(&mut g, &vars, &[30, 55, 70], 60, 2, true).unwrap();
        assert!((value(&g, loss) - want).abs() < 1e-12);
        let pos_only = grading_loss(&mut g, &vars, &[30, 55, 70], 60, 2, false).unwrap();
        assert!((value(&g, pos_only) - ce(&rows[1], 2)).abs() < 1e-12);
    }

    #[test]
    fn positive_ties_pick_smaller_peak() {
        assert_eq!(positive_index(&[70, 50], 60), Some(1));
        assert_eq!(positive_index(&[], 60), None);
    }

    #[test]
    fn grading_rejects_empty_and_bad_grade() {
        let mut g = Graph::new();
        assert!(grading_loss(&mut g, &[], &[], 0, 1, true).is_err());
        let l = vec_var(&mut g, &[0.0; 3]);
        assert!(grading_loss(&mut g, &[l], &[0], 0, 0, true).is_err());
        assert!(grading_loss(&mut g, &[l], &[0], 0, 3, true).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.5));
        let b = g.input(Tensor::scalar(0.25));
        let t0 = total_loss(&mut g, a, b, 0.0).unwrap();
        let t1 = total_loss(&mut g, a, b, 1.0).unwrap();
        assert_eq!(value(&g, t0), 1.5);
        assert_eq!(value(&g, t1), 1.75);
        let z = g.input(Tensor::scalar(0.0));
        let tz = total_loss(&mut g, z, z, 1.0).unwrap();
        assert_eq!(value(&g, tz), 0.0);
    }
}
