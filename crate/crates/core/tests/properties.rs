use num_complex::Complex;
use proptest::prelude::*;

use handfi::apps::softmax;
use handfi::csi_processing::*;
use handfi::geom::{self, Vec3};
use handfi::hand_model::*;
use handfi::losses::*;
use handfi::metrics::*;
use handfi::nn::Tensor;
use handfi::synth_sim::{generate_samples, default_domains, sample_pose, GestureSet, SimConfig};
use handfi::{Dataset, HandMask};

fn coord() -> impl Strategy<Value = f64> {
    -1.0..1.0f64
}

fn pose() -> impl Strategy<Value = HandPose<f64>> {
    prop::collection::vec(coord(), 63).prop_map(|v| HandPose::from_flat(&v).unwrap())
}

fn vec3() -> impl Strategy<Value = Vec3<f64>> {
    [coord(), coord(), coord()]
}

fn rotation() -> impl Strategy<Value = geom::Mat3<f64>> {
    (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64).prop_map(|(y, p, r)| geom::euler_zyx(y, p, r))
}

fn mask(side: usize) -> impl Strategy<Value = HandMask> {
    prop::collection::vec(0u8..2, side * side).prop_map(move |d| HandMask::new(side, d).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (HandMask, HandMask)> {
    (1usize..9).prop_flat_map(|s| (mask(s), mask(s)))
}

fn batch(rows: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0..2.0f64, rows * d).prop_map(move |v| Tensor::from_vec(rows, d, 1, 1, v).unwrap())
}

/// A simulator pose moved off its nominal shape, so constraint losses are
/// generally non-zero.
fn perturbed_pose() -> impl Strategy<Value = HandPose<f64>> {
    (0u64..500, prop::collection::vec(-0.08..0.08f64, 63)).prop_map(|(seed, noise)| {
        let base = sample_pose(seed, &HandModel::default()).unwrap().to_flat();
        let v: Vec<f64> = base.iter().zip(&noise).map(|(a, b)| a + b).collect();
        HandPose::from_flat(&v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joints_bones_joints_round_trip(p in pose()) {
        let topo = SkeletonTopology::default();
        let bones = bones_from_joints(&p, &topo).unwrap();
        let back = joints_from_bones(p.root(), &bones, &topo).unwrap();
        for (a, b) in back.joints().iter().zip(p.joints()) {
            prop_assert!(geom::dist(*a, *b) <= 1e-12);
        }
    }

    #[test]
    fn range_penalty_is_convex(a in -2.0..2.0f64, w in 0.0..2.0f64, x in -5.0..5.0f64, y in -5.0..5.0f64, t in 0.0..1.0f64) {
        let b = a + w;
        let f = |v: f64| range_penalty(v, a, b).unwrap();
        prop_assert!(f(t * x + (1.0 - t) * y) <= t * f(x) + (1.0 - t) * f(y) + 1e-12);
    }

    #[test]
    fn range_penalty_slope_matches_differences(a in -2.0..2.0f64, w in 0.0..2.0f64, x in -5.0..5.0f64) {
        let b = a + w;
        let h = 1e-4;
        prop_assume!((x - a).abs() > 2.0 * h && (x - b).abs() > 2.0 * h);
        let num = (range_penalty(x + h, a, b).unwrap() - range_penalty(x - h, a, b).unwrap()) / (2.0 * h);
        prop_assert!((range_penalty_slope(x, a, b) - num).abs() <= 1e-6);
    }

    #[test]
    fn cmc_angles_ignore_scale_and_rotation(p in perturbed_pose(), rot in rotation(), s in 0.2..5.0f64) {
        let topo = SkeletonTopology::default();
        let base = cmc_angles(&bones_from_joints(&p, &topo).unwrap()).unwrap();
        let scaled = cmc_angles(&bones_from_joints(&p.scaled(s), &topo).unwrap()).unwrap();
        let turned = cmc_angles(&bones_from_joints(&p.rotated(&rot, p.root()), &topo).unwrap()).unwrap();
        for i in 0..base.len() {
            prop_assert!((base[i] - scaled[i]).abs() <= 1e-9);
            prop_assert!((base[i] - turned[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn cmc_curvatures_ignore_rotation(p in perturbed_pose(), rot in rotation()) {
        let topo = SkeletonTopology::default();
        let base = cmc_curvatures(&bones_from_joints(&p, &topo).unwrap()).unwrap();
        let turned = cmc_curvatures(&bones_from_joints(&p.rotated(&rot, p.root()), &topo).unwrap()).unwrap();
        for i in 0..base.len() {
            prop_assert!((base[i] - turned[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn simulator_poses_have_zero_constraint_losses(seed in any::<u64>()) {
        let model = HandModel::default();
        let p = sample_pose(seed, &model).unwrap();
        prop_assert_eq!(bone_length_loss(&p, &model), 0.0);
        prop_assert_eq!(palmar_loss(&p, &model).unwrap(), 0.0);
    }

    #[test]
    fn constraint_losses_ignore_rigid_motion(p in perturbed_pose(), rot in rotation(), shift in vec3()) {
        let model = HandModel::default();
        let moved = p.rotated(&rot, p.root()).translated(shift);
        prop_assert!((bone_length_loss(&moved, &model) - bone_length_loss(&p, &model)).abs() <= 1e-9);
        prop_assert!((palmar_loss(&moved, &model).unwrap() - palmar_loss(&p, &model).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn losses_are_non_negative(p in pose(), q in pose(), (m, _) in mask_pair(), seed in any::<u64>()) {
        let model = HandModel::default();
        let probs: Vec<f64> = (0..m.len()).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 999.0).collect();
        prop_assert!(bce_loss(&probs, &m).unwrap() >= 0.0);
        prop_assert!(focal_mask_loss(&probs, &m, 2.0).unwrap() >= 0.0);
        prop_assert!(joint_loss(&p, &q) >= 0.0);
        prop_assert_eq!(joint_loss(&p, &p), 0.0);
        prop_assert!(bone_length_loss(&p, &model) >= 0.0);
        if let Ok(v) = palmar_loss(&p, &model) {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn focal_with_zero_gamma_is_bce((m, _) in mask_pair(), raw in prop::collection::vec(0.0..=1.0f64, 64)) {
        let probs = &raw[..m.len()];
        let a = focal_mask_loss(probs, &m, 0.0).unwrap();
        prop_assert!((a - bce_loss(probs, &m).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn coral_is_symmetric_and_shift_invariant(s1 in batch(6, 3), s2 in batch(5, 3), shift in vec3()) {
        let ab = coral_loss(&s1, &s2).unwrap();
        prop_assert!((ab - coral_loss(&s2, &s1).unwrap()).abs() <= 1e-12);
        let move_rows = |t: &Tensor<f64>| {
            let mut t = t.clone();
            for row in t.data.chunks_exact_mut(3) {
                for (v, s) in row.iter_mut().zip(shift) {
                    *v += s;
                }
            }
            t
        };
        prop_assert!((coral_loss(&move_rows(&s1), &move_rows(&s2)).unwrap() - ab).abs() <= 1e-9);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn mask_metrics_are_bounded((p, t) in mask_pair()) {
        let ev = MaskEval::new(&p, &t).unwrap();
        let (a, u) = (mean_pixel_accuracy(&ev), iou(&ev));
        prop_assert!((0.0..=1.0).contains(&a.value) && (0.0..=1.0).contains(&u.value));
        let hand = ev.counts[1][0] + ev.counts[1][1];
        if hand > 0 {
            prop_assert!(u.value <= ev.counts[1][1] as f64 / hand as f64 + 1e-12);
        }
    }

    #[test]
    fn mpjpe_is_a_metric(a in pose(), b in pose(), c in pose()) {
        prop_assert_eq!(mpjpe(&a, &a), 0.0);
        prop_assert!((mpjpe(&a, &b) - mpjpe(&b, &a)).abs() <= 1e-15);
        prop_assert!(mpjpe(&a, &c) <= mpjpe(&a, &b) + mpjpe(&b, &c) + 1e-12);
    }

    #[test]
    fn pck_limits(a in pose(), b in pose(), keep in prop::collection::vec(any::<bool>(), 21)) {
        let mut j = *b.joints();
        for (k, &same) in keep.iter().enumerate() {
            if same {
                j[k] = a.joint(k);
            }
        }
        let b = HandPose::new(j).unwrap();
        prop_assert_eq!(pck(&a, &b, &PckConfig::new(1e9).unwrap()), 1.0);
        let equal = keep.iter().filter(|&&s| s).count() as f64 / 21.0;
        prop_assert_eq!(pck(&a, &b, &PckConfig::new(1e-300).unwrap()), equal);
    }

    #[test]
    fn percentile_is_an_observed_value(v in prop::collection::vec(-10.0..10.0f64, 1..40), p in 0.0..=1.0f64) {
        let x = percentile(&v, p).unwrap();
        prop_assert!(v.contains(&x));
        prop_assert!(percentile(&v, 0.0).unwrap() <= x && x <= percentile(&v, 1.0).unwrap());
    }

    #[test]
    fn normalized_packets_have_unit_mean_magnitude(raw in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..30)) {
        let h: Vec<Complex<f64>> = raw.iter().map(|&(re, im)| Complex::new(re, im)).collect();
        prop_assume!(h.iter().any(|c| c.norm() > 1e-6));
        let n = normalize_packet(&h).unwrap();
        let mean = n.iter().map(|c| c.norm()).sum::<f64>() / n.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-9);
        for (a, b) in h.iter().zip(&n) {
            if a.norm() > 0.0 {
                prop_assert!((a.arg() - b.arg()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embedding_is_linear_per_antenna(
        vals in prop::collection::vec(-2.0..2.0f64, 4 * 3 * 4),
        w in prop::collection::vec(-1.0..1.0f64, 2 * 3 * 2),
        k in -3.0..3.0f64,
        bump in 0usize..4,
    ) {
        let stacked = StackedCsiTensor { subcarriers: 4, packets: 3, channels: 4, values: vals };
        let ew = EmbeddingWeights::new(2, 3, EmbeddingMode::Split, w).unwrap();
        let base = rf_embed(&stacked, &ew).unwrap();
        let zero = StackedCsiTensor { values: vec![0.0; 48], ..stacked.clone() };
        prop_assert!(rf_embed(&zero, &ew).unwrap().values.iter().all(|&v| v == 0.0));
        let scaled = StackedCsiTensor { values: stacked.values.iter().map(|v| v * k).collect(), ..stacked.clone() };
        for (a, b) in rf_embed(&scaled, &ew).unwrap().values.iter().zip(&base.values) {
            prop_assert!((a - k * b).abs() <= 1e-12);
        }
        // Perturb one input channel; only that antenna's outputs may move.
        let mut other = stacked.clone();
        for px in other.values.chunks_exact_mut(4) {
            px[bump] += 1.0;
        }
        let moved = rf_embed(&other, &ew).unwrap();
        let antenna = bump / 2;
        for (i, (a, b)) in moved.values.iter().zip(&base.values).enumerate() {
            if (i % 6) / 3 != antenna {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn softmax_ignores_logit_shift(z in prop::collection::vec(-20.0..20.0f64, 1..12), c in -50.0..50.0f64) {
        let a = softmax(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (x, y) in a.iter().zip(softmax(&shifted)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic_and_round_trips(seed in any::<u64>(), n in 1usize..6) {
        let mut sim = SimConfig::default();
        sim.channel.subcarriers = 8;
        sim.channel.packets = 3;
        let gen = || generate_samples(n, &default_domains(2), GestureSet::Postures, seed, &sim).unwrap();
        let a = gen();
        prop_assert_eq!(&a, &gen());
        let meta = handfi::synth_sim::dataset_meta(&sim, &default_domains(2), GestureSet::Postures);
        let d = Dataset::new(meta, a).unwrap();
        let bytes = d.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, d);
    }
}
