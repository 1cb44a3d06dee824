//! Window proposals: peak detection on frame probabilities, a two-sided
//! Gaussian fit around each peak, and window bounds `μ ± N_std·(σ_l, σ_r)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::nets::argmax;

/// A local maximum of the probability curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub height: f64,
}

/// Local maxima with `height >= threshold`, in ascending index order.
///
/// A maximal run of equal values is a peak when both outside neighbours are
/// strictly lower (a sequence edge counts as lower); the run reports its
/// center, rounded down.
pub fn detect_peaks(probs: &[f64], threshold: f64) -> Vec<Peak> {
    let n = probs.len();
    let mut peaks = Vec::new();
    let mut start = 0;
    while start < n {
        let v = probs[start];
        let mut end = start;
        while end + 1 < n && probs[end + 1] == v {
            end += 1;
        }
        let left_lower = start == 0 || probs[start - 1] < v;
        let right_lower = end + 1 == n || probs[end + 1] < v;
        if left_lower && right_lower && v >= threshold {
            peaks.push(Peak {
                index: start + (end - start) / 2,
                height: v,
            });
        }
        start = end + 1;
    }
    peaks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Admissible σ range and the substitute used when a fit fails.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_fallback: f64,
}

impl FitBounds {
    pub const SIGMA_MIN: f64 = 2.0;
    pub const SIGMA_FALLBACK: f64 = 30.0;

    /// `[2, T]` frames with a 30-frame fallback.
    pub fn for_length(len: usize) -> Self {
        Self {
            sigma_min: Self::SIGMA_MIN,
            sigma_max: (len as f64).max(Self::SIGMA_MIN),
            sigma_fallback: Self::SIGMA_FALLBACK,
        }
    }
}

/// Outcome of one side's least-squares fit of `A·exp(−(τ−μ)²/(2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub amplitude: f64,
    pub sigma: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 100;
const REL_TOLERANCE: f64 = 1e-8;

fn sum_sq(xs: &[f64], ys: &[f64], mu: f64, amp: f64, sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let d = x - mu;
            let r = y - amp * (-d * d * inv).exp();
            r * r
        })
        .sum()
}

/// Levenberg–Marquardt over `(A, σ)` with `μ` held at the peak.
///
/// Samples are `τ ∈ [0, μ]` (left) or `τ ∈ [μ, T−1]` (right). Fewer than two
/// samples, a collapse below `sigma_min` or a blow-up past `sigma_max` clamp
/// σ to the violated bound; running out of iterations or a non-positive
/// amplitude substitutes `sigma_fallback`. All of these report
/// `converged = false`.
pub fn fit_side_gaussian(probs: &[f64], peak: usize, side: Side, bounds: &FitBounds) -> FitResult {
    let n = probs.len();
    let height = probs.get(peak).copied().unwrap_or(0.0);
    let range = match side {
        Side::Left => 0..peak.min(n.saturating_sub(1)) + 1,
        Side::Right => peak..n,
    };
    if peak >= n || range.len() < 2 {
        return FitResult {
            amplitude: height,
            sigma: bounds.sigma_min,
            residual_norm: 0.0,
            converged: false,
            iterations: 0,
        };
    }
    let xs: Vec<f64> = range.clone().map(|i| i as f64).collect();
    let ys: Vec<f64> = probs[range].to_vec();
    let mu = peak as f64;

    let mut amp = height;
    let mut sigma = (n as f64 / 50.0).max(5.0);
    let mut cost = sum_sq(&xs, &ys, mu, amp, sigma);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cost <= 1e-30 {
            converged = true;
            break;
        }
        // Normal equations of the model Jacobian J = [∂g/∂A, ∂g/∂σ].
        let (mut jaa, mut jas, mut jss, mut ra, mut rs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (&x, &y) in xs.iter().zip(&ys) {
            let d2 = (x - mu) * (x - mu);
            let e = (-d2 * inv).exp();
            let r = y - amp * e;
            let da = e;
            let ds = amp * e * d2 / (sigma * sigma * sigma);
            jaa += da * da;
            jas += da * ds;
            jss += ds * ds;
            ra += da * r;
            rs += ds * r;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let a11 = jaa + lambda * jaa.max(1e-12);
            let a22 = jss + lambda * jss.max(1e-12);
            let det = a11 * a22 - jas * jas;
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let step_a = (ra * a22 - rs * jas) / det;
            let step_s = (a11 * rs - jas * ra) / det;
            let cand_amp = amp + step_a;
            let cand_sigma = (sigma + step_s).abs().max(1e-6);
            let cand = sum_sq(&xs, &ys, mu, cand_amp, cand_sigma);
            if cand.is_finite() && cand < cost {
                let rel = (cost - cand) / cost;
                amp = cand_amp;
                sigma = cand_sigma;
                cost = cand;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < REL_TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No descent direction left: the current point is stationary.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let residual_norm = cost.sqrt();
    let (sigma, converged) = if !converged || amp <= 0.0 {
        (bounds.sigma_fallback, false)
    } else if sigma < bounds.sigma_min {
        (bounds.sigma_min, false)
    } else if sigma > bounds.sigma_max {
        (bounds.sigma_max, false)
    } else {
        (sigma, true)
    };
    FitResult {
        amplitude: amp,
        sigma,
        residual_norm,
        converged,
        iterations,
    }
}

/// How proposal bounds are derived from a peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowShape {
    /// Fitted two-sided Gaussian, bounds `μ ± N_std·σ`.
    Dynamic,
    /// Fixed width `w` centered on the peak, bounds `μ ± w/2`.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpmConfig {
    pub n_std: f64,
    pub threshold: f64,
    pub shape: WindowShape,
}

impl Default for WpmConfig {
    fn default() -> Self {
        Self {
            n_std: 2.0,
            threshold: 0.5,
            shape: WindowShape::Dynamic,
        }
    }
}

/// One candidate window `[start, end)` around a peak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowProposal {
    pub peak: usize,
    pub peak_height: f64,
    pub left: FitResult,
    pub right: FitResult,
    pub start: usize,
    pub end: usize,
    /// Emitted because no peak cleared the threshold.
    pub fallback: bool,
}

impl WindowProposal {
    pub fn sigma_left(&self) -> f64 {
        self.left.sigma
    }

    pub fn sigma_right(&self) -> f64 {
        self.right.sigma
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    /// The fitted two-sided Gaussian evaluated at frame `tau`.
    pub fn fitted_value(&self, tau: usize) -> f64 {
        let fit = if tau < self.peak { &self.left } else { &self.right };
        let d = tau as f64 - self.peak as f64;
        fit.amplitude * (-d * d / (2.0 * fit.sigma * fit.sigma)).exp()
    }
}

/// `[l, r)` with `l = round(μ − n·σ_l)`, `r = round(μ + n·σ_r)` (half away from
/// zero), clamped to `[0, len]`. The window always contains `μ` and spans at
/// least `min(2, len)` frames.
pub fn window_bounds(peak: usize, sigma_left: f64, sigma_right: f64, n_std: f64, len: usize) -> (usize, usize) {
    let mu = peak as f64;
    let clamp = |v: f64| v.round().clamp(0.0, len as f64) as usize;
    let mut l = clamp(mu - n_std * sigma_left).min(peak);
    let mut r = clamp(mu + n_std * sigma_right).max(peak + 1).min(len);
    while r - l < 2.min(len) {
        if l > 0 {
            l -= 1;
        }
        if r - l < 2 && r < len {
            r += 1;
        }
    }
    (l, r)
}

fn flat_fit(height: f64, sigma: f64) -> FitResult {
    FitResult {
        amplitude: height,
        sigma,
        residual_norm: 0.0,
        converged: false,
        iterations: 0,
    }
}

/// One proposal per detected peak, or a single fallback proposal at
/// `argmax(probs)` when nothing clears the threshold. Never empty for
/// non-empty input.
pub fn propose_windows(probs: &[f64], cfg: &WpmConfig) -> Vec<WindowProposal> {
    let len = probs.len();
    if len == 0 {
        return Vec::new();
    }
    let bounds = FitBounds::for_length(len);
    let mut peaks = detect_peaks(probs, cfg.threshold);
    let fallback = peaks.is_empty();
    if fallback {
        let index = argmax(probs);
        peaks.push(Peak {
            index,
            height: probs[index],
        });
    }
    peaks
        .into_iter()
        .map(|p| {
            let (left, right, start, end) = match (cfg.shape, fallback) {
                (WindowShape::Fixed(w), _) => {
                    let half = w as f64 / 2.0;
                    let (s, e) = window_bounds(p.index, half, half, 1.0, len);
                    (flat_fit(p.height, half), flat_fit(p.height, half), s, e)
                }
                (WindowShape::Dynamic, true) => {
                    let fit = flat_fit(p.height, bounds.sigma_fallback);
                    let (s, e) = window_bounds(p.index, fit.sigma, fit.sigma, cfg.n_std, len);
                    (fit, fit, s, e)
                }
                (WindowShape::Dynamic, false) => {
                    let l = fit_side_gaussian(probs, p.index, Side::Left, &bounds);
                    let r = fit_side_gaussian(probs, p.index, Side::Right, &bounds);
                    let (s, e) = window_bounds(p.index, l.sigma, r.sigma, cfg.n_std, len);
                    (l, r, s, e)
                }
            };
            WindowProposal {
                peak: p.index,
                peak_height: p.height,
                left,
                right,
                start,
                end,
                fallback,
            }
        })
        .collect()
}

/// Appends one CSV row per proposal (header when `header` is set).
pub fn write_diagnostics_csv(
    mut w: impl Write,
    video: usize,
    proposals: &[WindowProposal],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(
            w,
            "video,window,peak,peak_height,amp_left,sigma_left,amp_right,sigma_right,\
             left_converged,right_converged,fallback,start,end"
        )?;
    }
    for (i, p) in proposals.iter().enumerate() {
        writeln!(
            w,
            "{video},{i},{},{},{},{},{},{},{},{},{},{},{}",
            p.peak,
            p.peak_height,
            p.left.amplitude,
            p.left.sigma,
            p.right.amplitude,
            p.right.sigma,
            u8::from(p.left.converged),
            u8::from(p.right.converged),
            u8::from(p.fallback),
            p.start,
            p.end
        )?;
    }
    Ok(())
}
