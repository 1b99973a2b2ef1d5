use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_gradients, check_params, GradCheckOptions};

fn pixel_column(values: &[f64]) -> Tensor {
    Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
}

fn pool_values(x: Tensor, groups: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let p = cross_channel_pool(&mut g, v, groups).unwrap();
    g.value(p).data().to_vec()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn cross_channel_pool_hand_values() {
    let x = pixel_column(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(pool_values(x.clone(), 1), vec![2.5]);
    assert_eq!(pool_values(x.clone(), 2), vec![1.5, 3.5]);
    assert_eq!(pool_values(x, 4), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn cross_channel_pool_rejects_too_many_groups() {
    let mut g = Graph::new();
    let v = g.constant(pixel_column(&[1.0, 2.0, 3.0, 4.0]));
    assert!(cross_channel_pool(&mut g, v, 5).is_err());
    assert!(cross_channel_pool(&mut g, v, 0).is_err());
}

#[test]
fn remainder_groups_take_the_extra_channel_first() {
    assert_eq!(group_bounds(5, 2).unwrap(), vec![(0, 3), (3, 2)]);
    assert_eq!(group_bounds(7, 3).unwrap(), vec![(0, 3), (3, 2), (5, 2)]);
    assert_eq!(pool_values(pixel_column(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2), vec![2.0, 4.5]);
}

#[test]
fn constant_input_pools_to_constant() {
    let x = Tensor::full(&[2, 6, 3, 3], 0.7);
    for s in 1..=6 {
        assert!(pool_values(x.clone(), s).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}

fn ccpp_values(x: Tensor, scales: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let t = ccpp(&mut g, v, scales).unwrap();
    g.value(t).clone()
}

#[test]
fn ccpp_hand_values() {
    let t = ccpp_values(pixel_column(&[1.0, 2.0, 3.0, 4.0]), &[1, 2, 4]);
    assert_eq!(t.shape(), &[1, 7, 1, 1]);
    assert_eq!(t.data(), &[2.5, 1.5, 3.5, 1.0, 2.0, 3.0, 4.0]);
    assert!(ccpp_values(Tensor::zeros(&[1, 4, 2, 2]), &[1, 2, 4]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn scale_count_maps_to_powers_of_two() {
    assert_eq!(scales_for_count(1), vec![1]);
    assert_eq!(scales_for_count(3), vec![1, 2, 4]);
    assert_eq!(scales_for_count(3).iter().sum::<usize>(), 7);
    assert_eq!(scales_for_count(7).last(), Some(&64));
}

fn normalize_values(t: Tensor, xi: f64) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(t);
    let n = pixel_normalize(&mut g, v, xi).unwrap();
    g.value(n).clone()
}

#[test]
fn pixel_normalize_hand_values() {
    let t = pixel_column(&[2.5, 1.5, 3.5, 1.0, 2.0, 3.0, 4.0]);
    let expected = [0.0, -1.0, 1.0, -1.5, -0.5, 0.5, 1.5];
    let exact = normalize_values(t.clone(), 0.0);
    for (a, b) in exact.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let xi = 1e-5;
    let guarded = normalize_values(t, xi);
    for (a, b) in guarded.data().iter().zip(expected) {
        assert!((a - b / (1.0 + xi)).abs() < 1e-12);
    }
}

#[test]
fn pixel_normalize_of_equal_contexts_is_zero() {
    let out = normalize_values(Tensor::full(&[2, 7, 3, 3], 0.3), 1e-5);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn pixel_normalize_std_is_shrunk_by_xi() {
    let t = randn(&[1, 7, 2, 2], 3);
    let xi = 1e-3;
    let out = normalize_values(t.clone(), xi);
    for p in 0..4 {
        let col: Vec<f64> = (0..7).map(|d| t.data()[d * 4 + p]).collect();
        let mu = col.iter().sum::<f64>() / 7.0;
        let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0).sqrt();
        let ncol: Vec<f64> = (0..7).map(|d| out.data()[d * 4 + p]).collect();
        let nsd = (ncol.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
        assert!((nsd - sd / (sd + xi)).abs() < 1e-12);
    }
}

fn build(cfg: PpcaConfig, c: usize, h: usize, w: usize) -> (ParamStore, PpcaModule) {
    let mut store = ParamStore::new();
    let m = PpcaModule::new(cfg, c, h, w, &mut store, "ppca").unwrap();
    (store, m)
}

#[test]
fn zero_init_gate_is_one_half() {
    let (mut store, m) = build(PpcaConfig::default(), 8, 3, 4);
    let x = randn(&[2, 8, 3, 4], 5);
    let mut s = Session::new(&mut store, Mode::Train, true);
    let xv = s.graph.constant(x.clone());
    let out = m.forward(&mut s, xv).unwrap();
    assert!(s.graph.value(out.gate).data().iter().all(|&v| v == 0.5));
    let half = x.map(|v| 0.5 * v);
    assert!(s.graph.value(out.y).max_abs_diff(&half) < 1e-12);
}

#[test]
fn sum_adaption_on_normalized_context_is_one_half() {
    let cfg = PpcaConfig { adaption: AdaptionKind::Sum, ..PpcaConfig::default() };
    let (mut store, m) = build(cfg, 4, 1, 1);
    let mut s = Session::new(&mut store, Mode::Train, false);
    let xv = s.graph.constant(pixel_column(&[1.0, 2.0, 3.0, 4.0]));
    let out = m.forward(&mut s, xv).unwrap();
    assert!((s.graph.value(out.gate).item() - 0.5).abs() < 1e-15);
}

#[test]
fn pfc_with_unit_weights_equals_sum_adaption() {
    let x = randn(&[2, 8, 3, 3], 6);
    let gate = |adaption, init| {
        let cfg = PpcaConfig { adaption, init, ..PpcaConfig::default() };
        let (mut store, m) = build(cfg, 8, 3, 3);
        let mut s = Session::new(&mut store, Mode::Train, false);
        let xv = s.graph.constant(x.clone());
        let out = m.forward(&mut s, xv).unwrap();
        s.graph.value(out.gate).clone()
    };
    assert_eq!(gate(AdaptionKind::Pfc, InitKind::One), gate(AdaptionKind::Sum, InitKind::Zero));
}

#[test]
fn unit_gate_is_identity_recalibration() {
    let x = randn(&[1, 3, 2, 2], 7);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = g.mul(ones, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn pfc_param_count_is_seven_per_pixel() {
    let (store, m) = build(PpcaConfig::default(), 16, 28, 28);
    assert_eq!(m.param_count(), 7 * 28 * 28);
    assert_eq!(store.count(), 7 * 28 * 28);
    assert_eq!(store.count_role(ParamRole::Attention), 5488);
}

#[test]
fn weight_shape_follows_adaption_kind() {
    for (kind, count) in
        [(AdaptionKind::Pfc, 7 * 4 * 5), (AdaptionKind::Conv1x1, 7), (AdaptionKind::Conv5x5, 175), (AdaptionKind::Sum, 0)]
    {
        let cfg = PpcaConfig { adaption: kind, ..PpcaConfig::default() };
        let (store, m) = build(cfg, 4, 4, 5);
        assert_eq!(store.count(), count, "{kind}");
        assert_eq!(m.param_count(), count);
        if let Some(w) = m.weight() {
            assert!(store.get(w).value.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn invalid_scales_rejected() {
    let mut store = ParamStore::new();
    assert!(PpcaModule::new(PpcaConfig::default(), 3, 2, 2, &mut store, "p").is_err());
    let cfg = PpcaConfig { scales: vec![], ..PpcaConfig::default() };
    assert!(PpcaModule::new(cfg, 8, 2, 2, &mut store, "p").is_err());
}

fn normalized_with(norm: NormKind, x: Tensor, mode: Mode, store_warm: bool) -> Result<Tensor> {
    let cfg = PpcaConfig { norm, ..PpcaConfig::default() };
    let c = x.shape()[1];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (mut store, m) = build(cfg, c, h, w);
    if store_warm {
        let mut s = Session::new(&mut store, Mode::Train, false);
        let xv = s.graph.constant(x.clone());
        m.forward(&mut s, xv)?;
    }
    let mut s = Session::new(&mut store, mode, false);
    let tv = s.graph.constant(x);
    let out = m.normalize(&mut s, tv)?;
    Ok(s.graph.value(out).clone())
}

#[test]
fn none_normalization_is_identity() {
    let x = randn(&[2, 7, 3, 3], 8);
    assert_eq!(normalized_with(NormKind::None, x.clone(), Mode::Train, false).unwrap(), x);
}

#[test]
fn layer_norm_leaves_standardized_sample_unchanged() {
    let raw = randn(&[1, 7, 3, 3], 9);
    let mean = raw.mean();
    let sd = (raw.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
    let x = raw.map(|v| (v - mean) / sd);
    let out = normalized_with(NormKind::Layer, x.clone(), Mode::Train, false).unwrap();
    let shrink = 1.0 / (1.0 + PpcaConfig::default().epsilon).sqrt();
    assert!(out.max_abs_diff(&x.map(|v| v * shrink)) < 1e-12);
}

#[test]
fn instance_norm_of_constant_map_is_zero() {
    let out = normalized_with(NormKind::Instance, Tensor::full(&[2, 7, 3, 3], 4.0), Mode::Train, false).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_eval_needs_running_stats() {
    let x = randn(&[2, 7, 3, 3], 10);
    let err = normalized_with(NormKind::Batch, x.clone(), Mode::Eval, false).unwrap_err();
    assert!(matches!(err, Error::MissingRunningStats));
    let out = normalized_with(NormKind::Batch, x, Mode::Eval, true).unwrap();
    assert!(out.all_finite());
}

/// Gradient of a weighted mean of `Y` with respect to `W` and to `X`, for
/// every adaption and normalisation variant.
#[test]
fn forward_gradients_match_finite_differences() {
    let x = randn(&[2, 8, 4, 4], 11);
    let probe = randn(&[2, 8, 4, 4], 12);
    for adaption in [AdaptionKind::Pfc, AdaptionKind::Conv1x1, AdaptionKind::Conv5x5, AdaptionKind::Sum] {
        for norm in [NormKind::Pixel, NormKind::Batch, NormKind::Instance, NormKind::Layer, NormKind::None] {
            let cfg = PpcaConfig { adaption, norm, ..PpcaConfig::default() };
            let (mut store, m) = build(cfg, 8, 4, 4);
            if let Some(w) = m.weight() {
                let shape = store.get(w).value.shape().to_vec();
                store.get_mut(w).value = randn(&shape, 13).map(|v| 0.5 * v);
            }
            let weighted_mean = |s: &mut Session, y: Var| -> Result<Var> {
                let p = s.graph.constant(probe.clone());
                let z = s.graph.mul(y, p)?;
                Ok(s.graph.mean_all(z))
            };
            let wrt_w = check_params(
                &store,
                Mode::Train,
                |s| {
                    let xv = s.graph.constant(x.clone());
                    let y = m.forward(s, xv)?.y;
                    weighted_mean(s, y)
                },
                GradCheckOptions::default(),
                |_, _| None,
            )
            .unwrap();
            for r in &wrt_w {
                assert!(r.max_rel_error < 1e-4, "{adaption}/{norm} W: {}", r.max_rel_error);
            }
            let wrt_x = check_gradients(
                &|g: &mut Graph, v: &[Var]| {
                    let mut local = store.clone();
                    let mut s = Session::with_graph(std::mem::take(g), &mut local, Mode::Train, false);
                    let out = m.forward(&mut s, v[0]).and_then(|o| weighted_mean(&mut s, o.y));
                    *g = s.into_graph();
                    out
                },
                &[x.clone()],
                GradCheckOptions::default(),
                |_, _| None,
            )
            .unwrap();
            assert!(wrt_x[0].max_rel_error < 1e-4, "{adaption}/{norm} X: {}", wrt_x[0].max_rel_error);
        }
    }
}

#[test]
fn permuting_within_a_group_keeps_context_across_groups_changes_it() {
    let x = randn(&[1, 8, 3, 3], 14);
    let permute = |perm: &[usize]| -> Tensor {
        let mut out = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for p in 0..9 {
                out.data_mut()[dst * 9 + p] = x.data()[src * 9 + p];
            }
        }
        out
    };
    let base = ccpp_values(x.clone(), &[1, 2, 4]);
    // scales [1,2,4] on 8 channels: finest groups are {0,1},{2,3},{4,5},{6,7}
    let within = ccpp_values(permute(&[1, 0, 2, 3, 4, 5, 7, 6]), &[1, 2, 4]);
    assert!(within.max_abs_diff(&base) < 1e-15);
    let across = ccpp_values(permute(&[0, 1, 2, 4, 3, 5, 6, 7]), &[1, 2, 4]);
    assert!(across.max_abs_diff(&base) > 1e-3);
}

fn gate_for(m: &PpcaModule, store: &ParamStore, x: Tensor) -> Tensor {
    let mut local = store.clone();
    let mut s = Session::new(&mut local, Mode::Train, false);
    let xv = s.graph.constant(x);
    let out = m.forward(&mut s, xv).unwrap();
    s.graph.value(out.gate).clone()
}

/// PFC and SUM gates at a pixel depend only on that pixel's channels; the
/// convolutional variants see a neighbourhood (5x5 for Conv5x5).
#[test]
fn pixel_independence_of_gates() {
    let x = randn(&[1, 8, 6, 6], 15);
    let mut bumped = x.clone();
    for c in 0..8 {
        let v = bumped.at(&[0, c, 2, 3]);
        bumped.set(&[0, c, 2, 3], v + 0.5 * (c as f64 - 3.0));
    }
    for (kind, independent) in [
        (AdaptionKind::Pfc, true),
        (AdaptionKind::Sum, true),
        (AdaptionKind::Conv1x1, true),
        (AdaptionKind::Conv5x5, false),
    ] {
        let cfg = PpcaConfig { adaption: kind, init: InitKind::One, ..PpcaConfig::default() };
        let (store, m) = build(cfg, 8, 6, 6);
        let (a, b) = (gate_for(&m, &store, x.clone()), gate_for(&m, &store, bumped.clone()));
        let mut changed = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if a.at(&[0, 0, i, j]) != b.at(&[0, 0, i, j]) {
                    changed.push((i, j));
                }
            }
        }
        if independent {
            assert_eq!(changed, vec![(2, 3)], "{kind}");
        } else {
            assert!(changed.len() > 1 && changed.iter().all(|&(i, j)| i.abs_diff(2) <= 2 && j.abs_diff(3) <= 2));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Scale [1] is plain cross-channel average pooling.
    #[test]
    fn single_scale_is_channel_mean(c in 1usize..=8, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let x = randn(&[1, c, h, w], seed);
        let t = ccpp_values(x.clone(), &[1]);
        for i in 0..h {
            for j in 0..w {
                let brute = (0..c).map(|k| x.at(&[0, k, i, j])).sum::<f64>() / c as f64;
                prop_assert_eq!(t.at(&[0, 0, i, j]), brute);
            }
        }
    }

    /// Per-pixel sum of the normalised context is zero regardless of ξ.
    #[test]
    fn pixel_normalized_context_sums_to_zero(seed in any::<u64>(), xi in 0.0f64..1e-2, scale in 0.01f64..100.0) {
        let t = randn(&[2, 7, 3, 4], seed).map(|v| v * scale);
        let out = normalize_values(t, xi);
        for b in 0..2 {
            for p in 0..12 {
                let s: f64 = (0..7).map(|d| out.data()[(b * 7 + d) * 12 + p]).sum();
                prop_assert!(s.abs() < 1e-12, "sum {}", s);
            }
        }
    }

    /// A freshly built module with ZERO init halves any input.
    #[test]
    fn zero_init_halves_any_input(seed in any::<u64>(), c in 4usize..=12) {
        let (store, m) = build(PpcaConfig::default(), c, 3, 3);
        let x = randn(&[2, c, 3, 3], seed).map(|v| v * 10.0);
        let mut local = store.clone();
        let mut s = Session::new(&mut local, Mode::Train, false);
        let xv = s.graph.constant(x.clone());
        let out = m.forward(&mut s, xv).unwrap();
        prop_assert!(s.graph.value(out.y).max_abs_diff(&x.map(|v| 0.5 * v)) < 1e-12);
    }
}
