use proptest::prelude::*;

use stcnet::autodiff::{Graph, ParamStore, Tensor};
use stcnet::metrics::{classification_metrics, interval_iou, Averaging};
use stcnet::objectives::{bce_loss, cosine_loss, gaussian_reference, grading_loss, neutral_zone};
use stcnet::synth::{generate, min_pairwise_distance, SynthConfig};
use stcnet::trainer::Adam;
use stcnet::wpm::{detect_peaks, propose_windows, window_bounds, WpmConfig};

/// Reference scan: maximal runs of equal values whose outside neighbours are lower.
fn brute_force_peaks(x: &[f64], threshold: f64) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        let left_lower = i == 0 || x[i - 1] < x[i];
        let right_lower = j == n - 1 || x[j + 1] < x[i];
        if left_lower && right_lower && x[i] >= threshold {
            out.push((i + j) / 2);
        }
        i = j + 1;
    }
    out
}

fn quantized_signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..=20, 1..200).prop_map(|v| v.into_iter().map(|q| q as f64 / 20.0).collect())
}

fn scalar(g: &Graph, v: stcnet::autodiff::Var) -> f64 {
    g.value(v).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn detector_matches_reference(x in quantized_signal(), th in 0.05f64..0.95) {
        let got: Vec<usize> = detect_peaks(&x, th).iter().map(|p| p.index).collect();
        prop_assert_eq!(got, brute_force_peaks(&x, th));
    }

    #[test]
    fn windows_are_valid(x in quantized_signal(), n_std in 0.5f64..4.0) {
        let cfg = WpmConfig { n_std, ..WpmConfig::default() };
        let props = propose_windows(&x, &cfg);
        prop_assert!(!props.is_empty());
        for p in &props {
            prop_assert!(p.start < p.end && p.end <= x.len());
            prop_assert!(p.start <= p.peak && p.peak <= p.end);
            prop_assert!(p.end - p.start >= 2.min(x.len()));
        }
    }

    #[test]
    fn wider_n_std_never_shrinks(mu in 0usize..500, sl in 0.5f64..80.0, sr in 0.5f64..80.0,
                                 a in 0.5f64..3.0, b in 0.0f64..2.0, extra in 1usize..500) {
        let len = mu + extra;
        let (l1, r1) = window_bounds(mu, sl, sr, a, len);
        let (l2, r2) = window_bounds(mu, sl, sr, a + b, len);
        prop_assert!(l2 <= l1 && r2 >= r1);
    }

    #[test]
    fn losses_nonnegative_and_cosine_bounded(scores in prop::collection::vec(-6.0f64..6.0, 2..80),
                                              t_frac in 0.0f64..1.0, delta in 1usize..10) {
        let t = ((scores.len() - 1) as f64 * t_frac) as usize;
        let mut g = Graph::new();
        let s = g.input(Tensor::vector(scores.clone()).unwrap());
        let p = g.sigmoid(s);
        let b = bce_loss(&mut g, p, t, delta).unwrap();
        let c = cosine_loss(&mut g, s, t, delta).unwrap();
        prop_assert!(scalar(&g, b) >= 0.0);
        prop_assert!(scalar(&g, c) >= -1e-12 && scalar(&g, c) <= 1.0 + 1e-12);
    }

    #[test]
    fn bce_gradient_zero_inside_zone(probs in prop::collection::vec(0.01f64..0.99, 5..120),
                                     t_frac in 0.0f64..1.0, delta in 1usize..8) {
        let t = ((probs.len() - 1) as f64 * t_frac) as usize;
        let mut g = Graph::new();
        let p = g.variable(Tensor::vector(probs.clone()).unwrap());
        let l = bce_loss(&mut g, p, t, delta).unwrap();
        let grads = g.gradients(l).unwrap();
        let gp = grads.get(p).unwrap();
        let (lo, hi) = neutral_zone(t, delta, probs.len());
        for j in lo..=hi {
            if j != t {
                prop_assert_eq!(gp.data()[j], 0.0);
            }
        }
    }

    #[test]
    fn cosine_shift_equivariant(scores in prop::collection::vec(-4.0f64..4.0, 10..60),
                                t_frac in 0.0f64..1.0, shift in 1usize..30, delta in 1usize..6) {
        // Pad with a very negative score so the softmax mass of the padding is nil,
        // and the reference tail falling on the padding is below f64 resolution.
        let pad = 40 * delta;
        let t = ((scores.len() - 1) as f64 * t_frac) as usize;
        let build = |lead: usize| {
            let mut v = vec![-800.0; lead];
            v.extend(&scores);
            v.extend(std::iter::repeat_n(-800.0, 2 * pad + shift - lead));
            v
        };
        let loss = |v: Vec<f64>, t: usize| {
            let mut g = Graph::new();
            let s = g.input(Tensor::vector(v).unwrap());
            let c = cosine_loss(&mut g, s, t, delta).unwrap();
            scalar(&g, c)
        };
        let a = loss(build(pad), pad + t);
        let b = loss(build(pad + shift), pad + shift + t);
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn cosine_reference_scale_invariant(scores in prop::collection::vec(-4.0f64..4.0, 3..50),
                                        t_frac in 0.0f64..1.0, k in 0.01f64..100.0) {
        let t = ((scores.len() - 1) as f64 * t_frac) as usize;
        let r = gaussian_reference(scores.len(), t, 3.0);
        let soft: Vec<f64> = {
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        };
        let cos = |r: &[f64]| {
            let dot: f64 = soft.iter().zip(r).map(|(a, b)| a * b).sum();
            let n1 = soft.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - dot / (n1 * n2)
        };
        let scaled: Vec<f64> = r.iter().map(|v| v * k).collect();
        prop_assert!((cos(&r) - cos(&scaled)).abs() < 1e-12);
        let mut g = Graph::new();
        let s = g.input(Tensor::vector(scores.clone()).unwrap());
        let l = cosine_loss(&mut g, s, t, 3).unwrap();
        prop_assert!((scalar(&g, l) - cos(&r)).abs() < 1e-12);
    }

    #[test]
    fn grading_label_changes_only_positive_term(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 2..5),
                                                 c1 in 1usize..6, c2 in 1usize..6) {
        let peaks: Vec<usize> = (0..rows.len()).map(|i| 10 * i).collect();
        let eval = |c: usize| {
            let mut g = Graph::new();
            let vars: Vec<_> = rows.iter().map(|r| g.input(Tensor::vector(r.clone()).unwrap())).collect();
            let l = grading_loss(&mut g, &vars, &peaks, 0, c, true).unwrap();
            scalar(&g, l)
        };
        let ce = |r: &[f64], c: usize| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[c];
        let diff = eval(c1) - eval(c2);
        prop_assert!((diff - (ce(&rows[0], c1) - ce(&rows[0], c2))).abs() < 1e-10);
    }

    #[test]
    fn metrics_invariants(pairs in prop::collection::vec((1usize..=5, 1usize..=5), 1..60), seed in any::<u64>()) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let s = classification_metrics(&p, &l, 5, Averaging::Macro).unwrap();
        let trace: usize = (0..5).map(|k| s.confusion[k][k]).sum();
        prop_assert_eq!(trace as f64 / p.len() as f64, s.accuracy);
        prop_assert_eq!(s.average_distance == 0.0, s.accuracy == 1.0);
        for (k, row) in s.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), l.iter().filter(|&&x| x == k + 1).count());
        }
        // permutation invariance
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let mut state = seed;
        for i in (1..idx.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (state >> 33) as usize % (i + 1));
        }
        let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
        let ll: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(classification_metrics(&pp, &ll, 5, Averaging::Macro).unwrap(), s);
    }

    #[test]
    fn iou_in_unit_interval(a in 0usize..100, la in 1usize..50, b in 0usize..100, lb in 1usize..50) {
        let v = interval_iou((a, a + la), (b, b + lb));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, interval_iou((b, b + lb), (a, a + la)));
    }

    #[test]
    fn adam_zero_lr_is_identity(vals in prop::collection::vec(-5.0f64..5.0, 1..20),
                                grads in prop::collection::vec(-5.0f64..5.0, 20)) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vals.clone()).unwrap(), true);
        store.accumulate("w", &Tensor::vector(grads[..vals.len()].to_vec()).unwrap()).unwrap();
        let mut adam = Adam::new(0.0);
        adam.step(&mut store).unwrap();
        prop_assert_eq!(store.value("w").unwrap().data(), &vals[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn synth_invariants(seed in any::<u64>(), videos in 5usize..30, overlap in 0.0f64..0.5) {
        let cfg = SynthConfig {
            videos,
            min_len: 30,
            max_len: 80,
            min_segment: 3,
            max_segment: 12,
            prototype_overlap: overlap,
            seed,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        prop_assert!(min_pairwise_distance(&ds.prototypes) >= cfg.separation * (1.0 - 1e-6));
        let mut counts = vec![0usize; cfg.classes];
        for v in &ds.videos {
            prop_assert!(v.segment.0 <= v.timestamp && v.timestamp < v.segment.1);
            prop_assert!(v.features.all_finite());
            counts[v.grade - 1] += 1;
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}
