//! Property tests for the invariants of the parser, kinematics, features,
//! flow, training schedule and evaluation.

use gesticulate::audio::{mel_spectrogram, MelConfig, Waveform};
use gesticulate::bvh::{parse_bvh, write_bvh, Axis, Channel, Joint, MotionClip, Skeleton};
use gesticulate::dataset::{window_indices, Standardizer};
use gesticulate::evaluation::{clip_positions, occupancy_overlap, top_n_peaks, EvalConfig, GestureSpaceCloud};
use gesticulate::flow::{Coupling, FlowConfig, FlowModel};
use gesticulate::kinematics::rotation::{expmap_to_rotation, rotation_to_expmap};
use gesticulate::kinematics::{
    clip_to_pose_sequence, forward_kinematics, mirror_pose, pose_sequence_to_clip, MirrorConvention, MirrorMap,
    PoseVector, RootDelta, RootState,
};
use gesticulate::matrix::Matrix;
use gesticulate::synthesis::latent;
use gesticulate::tensorfile::{Tensor, TensorData, TensorFile};
use gesticulate::toy::toy_skeleton;
use gesticulate::training::TrainConfig;
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORDERS: [[Axis; 3]; 6] = [
    [Axis::X, Axis::Y, Axis::Z],
    [Axis::X, Axis::Z, Axis::Y],
    [Axis::Y, Axis::X, Axis::Z],
    [Axis::Y, Axis::Z, Axis::X],
    [Axis::Z, Axis::X, Axis::Y],
    [Axis::Z, Axis::Y, Axis::X],
];

/// Random tree in depth-first order: joint `j > 0` hangs off an ancestor of
/// joint `j - 1` (or `j - 1` itself).
fn skeleton_from(picks: &[usize], orders: &[usize], offsets: &[[f64; 3]], ends: &[bool]) -> Skeleton {
    let n = orders.len();
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut chain = vec![0];
    for j in 1..n {
        chain.truncate(1 + picks[j - 1] % chain.len());
        parents.push(chain.last().copied());
        chain.push(j);
    }
    let joints = (0..n)
        .map(|j| {
            let rot = ORDERS[orders[j]].map(Channel::Rotation);
            let mut channels = Vec::new();
            if j == 0 {
                channels.extend([Axis::X, Axis::Y, Axis::Z].map(Channel::Position));
            }
            channels.extend(rot);
            Joint {
                name: format!("j{j}"),
                parent: parents[j],
                offset: offsets[j],
                channels,
            }
        })
        .collect();
    let end_sites = (0..n).map(|j| ends[j].then_some([0.0, 1.5, 0.0])).collect();
    Skeleton::new(joints, end_sites).unwrap()
}

fn arb_skeleton() -> impl Strategy<Value = Skeleton> {
    (1usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<usize>(), n - 1),
            prop::collection::vec(0usize..6, n),
            prop::collection::vec(prop::array::uniform3(-30.0f64..30.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(p, o, off, e)| skeleton_from(&p, &o, &off, &e))
    })
}

fn arb_clip() -> impl Strategy<Value = (Skeleton, MotionClip)> {
    arb_skeleton().prop_flat_map(|sk| {
        let width = sk.channel_count();
        (0usize..6, 0.01f64..0.2).prop_flat_map(move |(frames, dt)| {
            let sk = sk.clone();
            prop::collection::vec(-180.0f64..180.0, frames * width)
                .prop_map(move |data| (sk.clone(), MotionClip::new(dt, width, data).unwrap()))
        })
    })
}

fn arb_expmap() -> impl Strategy<Value = Vector3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.1).prop_filter_map("axis too short", |(a, angle)| {
        let v = Vector3::from(a);
        (v.norm() > 1e-3).then(|| v.normalize() * angle)
    })
}

fn arb_pose(joints: usize) -> impl Strategy<Value = PoseVector> {
    (
        prop::collection::vec(arb_expmap(), joints),
        prop::array::uniform3(-5.0f64..5.0),
    )
        .prop_map(|(r, d)| PoseVector {
            joint_rotations: r,
            root: RootDelta {
                forward: d[0],
                lateral: d[1],
                angular: d[2] * 0.05,
            },
        })
}

/// World positions from a chain of homogeneous transforms.
fn homogeneous_fk(sk: &Skeleton, pose: &PoseVector, root: &RootState) -> Vec<Vector3<f64>> {
    let mut world: Vec<Isometry3<f64>> = Vec::new();
    for (j, joint) in sk.joints().iter().enumerate() {
        let local = UnitQuaternion::from_scaled_axis(pose.joint_rotations[j]);
        let t = match joint.parent {
            None => {
                let heading = UnitQuaternion::from_scaled_axis(Vector3::y() * root.heading);
                Isometry3::from_parts(Translation3::from(root.position), heading * local)
            }
            Some(p) => world[p] * Isometry3::from_parts(Translation3::from(Vector3::from(joint.offset)), local),
        };
        world.push(t);
    }
    world.iter().map(|t| t.translation.vector).collect()
}

fn chirp(amplitude: f64, freq: f64) -> Waveform {
    let sr = 16_000;
    let s = (0..sr / 2)
        .map(|i| {
            let t = i as f64 / sr as f64;
            amplitude * (2.0 * std::f64::consts::PI * freq * t * (1.0 + t)).sin()
        })
        .collect();
    Waveform::new(s, sr).unwrap()
}

fn small_flow(seed: u64) -> FlowModel<f64> {
    let cfg = FlowConfig::test_profile(6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = FlowModel::new(cfg, &mut rng).unwrap();
    let flat: Vec<f64> = m.to_flat().iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)).collect();
    m.load_flat(&flat).unwrap();
    m.enforce_constraints();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bvh_write_then_parse_round_trips((sk, clip) in arb_clip()) {
        let text = write_bvh(&sk, &clip).unwrap();
        let (sk2, clip2) = parse_bvh(&text).unwrap();
        prop_assert_eq!(sk2.joint_count(), sk.joint_count());
        for (a, b) in sk.joints().iter().zip(sk2.joints()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.parent, b.parent);
            prop_assert_eq!(&a.channels, &b.channels);
            for k in 0..3 {
                prop_assert!((a.offset[k] - b.offset[k]).abs() < 1e-4);
            }
        }
        prop_assert_eq!(sk.end_sites().iter().map(Option::is_some).collect::<Vec<_>>(),
            sk2.end_sites().iter().map(Option::is_some).collect::<Vec<_>>());
        prop_assert_eq!(clip2.frame_count(), clip.frame_count());
        prop_assert!((clip2.frame_time() - clip.frame_time()).abs() < 1e-6);
        for (a, b) in clip.data().iter().zip(clip2.data()) {
            prop_assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
    }

    #[test]
    fn expmap_round_trips(v in arb_expmap()) {
        let r = expmap_to_rotation(&v);
        let back = rotation_to_expmap(&r).unwrap();
        prop_assert!(back.norm() <= std::f64::consts::PI + 1e-12);
        prop_assert!((back - v).norm() < 1e-5, "{:?} vs {:?}", back, v);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-10);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fk_matches_homogeneous_chain(
        sk in arb_skeleton(),
        seed in any::<u64>(),
        pos in prop::array::uniform3(-50.0f64..50.0),
        heading in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = PoseVector {
            joint_rotations: (0..sk.joint_count())
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect(),
            root: RootDelta::default(),
        };
        let root = RootState { position: Vector3::from(pos), heading };
        let ours = forward_kinematics(&sk, &pose, &root).unwrap();
        let oracle = homogeneous_fk(&sk, &pose, &root);
        for (a, b) in ours.iter().zip(&oracle) {
            prop_assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn root_deltas_reintegrate(seed in any::<u64>()) {
        // a 200-frame walk with turning, converted to poses and back
        let sk = toy_skeleton();
        let width = sk.channel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut x, mut z, mut yaw) = (0.0f64, 0.0f64, rng.random_range(-180.0..180.0f64));
        let mut rows = Vec::new();
        for _ in 0..200 {
            yaw += rng.random_range(-4.0..4.0);
            x += rng.random_range(-3.0..3.0);
            z += rng.random_range(-3.0..3.0);
            let mut row: Vec<f64> = (0..width).map(|_| rng.random_range(-60.0..60.0)).collect();
            let root = &sk.joints()[0];
            let mut k = 0;
            for (c, ch) in root.channels.iter().enumerate() {
                match ch {
                    Channel::Position(Axis::X) => row[c] = x,
                    Channel::Position(Axis::Z) => row[c] = z,
                    Channel::Position(Axis::Y) => row[c] = 0.0,
                    Channel::Rotation(a) => {
                        // heading in the yaw channel, mild tilt elsewhere
                        row[c] = if *a == Axis::Y { yaw } else { rng.random_range(-20.0..20.0) };
                        k += 1;
                    }
                }
            }
            prop_assert_eq!(k, 3);
            rows.push(row);
        }
        let clip = MotionClip::from_rows(0.05, width, &rows).unwrap();
        let (poses, initial) = clip_to_pose_sequence(&sk, &clip).unwrap();
        let back = pose_sequence_to_clip(&sk, &poses, &initial, 0.05).unwrap();
        let a = clip_positions(&sk, &clip).unwrap();
        let b = clip_positions(&sk, &back).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (pa, pb) in fa.iter().zip(fb) {
                prop_assert!((pa - pb).norm() < 1e-3, "{} cm", (pa - pb).norm());
            }
        }
    }

    #[test]
    fn mirroring_is_an_involution(pose in arb_pose(8)) {
        let sk = toy_skeleton();
        let map = MirrorMap::from_convention(&sk, &MirrorConvention::default()).unwrap();
        let twice = mirror_pose(&mirror_pose(&pose, &map).unwrap(), &map).unwrap();
        for (a, b) in pose.to_vec().iter().zip(twice.to_vec()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut seen = vec![0; map.joint_count()];
        for j in 0..map.joint_count() {
            seen[map.counterpart(j)] += 1;
            prop_assert_eq!(map.counterpart(map.counterpart(j)), j);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn pose_vector_layout_round_trips(pose in arb_pose(5)) {
        let v = pose.to_vec();
        prop_assert_eq!(v.len(), PoseVector::dim_for(5));
        prop_assert_eq!(PoseVector::from_slice(&v).unwrap(), pose);
    }

    #[test]
    fn standardizer_round_trips(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..40),
        constant in any::<bool>(),
    ) {
        let mut rows = rows;
        if constant {
            for r in &mut rows {
                r[2] = 7.0;
            }
        }
        let m = Matrix::from_rows(4, &rows);
        let s = Standardizer::fit([&m]).unwrap();
        prop_assert!(s.std.iter().all(|&v| v >= 1e-6));
        for r in &rows {
            let back = s.destandardize(&s.standardize(r));
            for (a, b) in r.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
        let z = s.apply(&m);
        for c in 0..4 {
            let mean = z.iter_rows().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
            prop_assert!(mean.abs() < 1e-8);
        }
    }

    #[test]
    fn windows_match_clamped_slices(
        len in 1usize..40,
        t_frac in 0.0f64..1.0,
        history in prop::sample::select(vec![1usize, 10]),
        context in prop::sample::select(vec![0usize, 5]),
    ) {
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let (h, c) = window_indices(t, len, history, context);
        // pad the sequence with copies of its ends and slice
        let pad = history.max(context);
        let padded: Vec<usize> = (0..pad).map(|_| 0)
            .chain(0..len)
            .chain((0..pad).map(|_| len - 1))
            .collect();
        let tp = t + pad;
        prop_assert_eq!(&h[..], &padded[tp - history..tp]);
        prop_assert_eq!(&c[..], &padded[tp - context..=tp + context]);
        prop_assert!(h.iter().all(|&i| i <= t));
    }

    #[test]
    fn mel_is_deterministic_and_monotone_in_gain(amp in 0.01f64..0.4, freq in 80.0f64..3000.0, gain in 1.0f64..2.5) {
        let cfg = MelConfig::default();
        let w = chirp(amp, freq);
        let a = mel_spectrogram(&w, &cfg).unwrap();
        prop_assert_eq!(&a, &mel_spectrogram(&w, &cfg).unwrap());
        let b = mel_spectrogram(&w.scaled(gain), &cfg).unwrap();
        prop_assert_eq!(a.frame_count(), b.frame_count());
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!(y >= x, "{} < {}", y, x);
        }
    }

    #[test]
    fn flow_is_bijective(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 6), c in prop::collection::vec(-1.0f64..1.0, 16)) {
        let m = small_flow(seed);
        let (z, _) = m.forward(&x, &c).unwrap();
        let back = m.inverse(&z, &c).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for step in &m.steps {
            prop_assert!(step.linear.log_diag.iter().all(|&d| d >= 1e-8f64.ln()));
            prop_assert!(step.actnorm.scale().iter().all(|&s| s != 0.0));
        }
    }

    #[test]
    fn constraints_hold_after_arbitrary_updates(seed in any::<u64>(), scale in 1.0f64..100.0) {
        let mut m = small_flow(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = m.to_flat().iter().map(|v| v - scale * rng.random::<f64>()).collect();
        m.load_flat(&flat).unwrap();
        m.enforce_constraints();
        for step in &m.steps {
            let u: Vec<f64> = step.linear.log_diag.iter().map(|d| d.exp()).collect();
            prop_assert!(u.iter().all(|&d| d >= 1e-8 * (1.0 - 1e-12)));
            prop_assert!(step.actnorm.scale().iter().all(|&s| s.is_finite() && s != 0.0));
        }
    }

    #[test]
    fn coupling_log_scale_is_bounded(seed in any::<u64>(), weight in 1.0f64..50.0, x in prop::collection::vec(-10.0f64..10.0, 7)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Coupling::<f64>::new(7, 4, 8, seed % 2 == 0, 3.0, &mut rng);
        for w in c.w3.iter_mut().chain(c.b3.iter_mut()) {
            *w = weight * (rng.random::<f64>() - 0.5);
        }
        let cond = [1.0, -1.0, 0.5, 2.0];
        let mut y = vec![0.0; 7];
        let logdet = c.forward(&x, &cond, &mut y);
        prop_assert!(logdet.abs() <= c.nb() as f64 * 3.0 + 1e-12);
        let mut back = vec![0.0; 7];
        c.inverse(&y, &cond, &mut back);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn learning_rate_decays_monotonically(steps in 1usize..100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = TrainConfig { steps, ..TrainConfig::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s0, s1) = ((lo * steps as f64) as usize, (hi * steps as f64) as usize);
        prop_assert!(cfg.learning_rate(s1) <= cfg.learning_rate(s0));
        prop_assert!((cfg.learning_rate(0) - cfg.lr_max).abs() < 1e-18);
        prop_assert!((cfg.learning_rate(steps) - cfg.lr_final).abs() < 1e-15);
    }

    #[test]
    fn latent_draws_are_reproducible(seed in any::<u64>(), frame in 0usize..10_000, t in 0.0f64..2.0) {
        let a = latent(seed, frame, 9, t);
        prop_assert_eq!(&a, &latent(seed, frame, 9, t));
        prop_assert!(a.iter().all(|v| v.is_finite()));
        if t == 0.0 {
            prop_assert!(a.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tensor_file_round_trips_bit_exactly(
        values in prop::collection::vec(any::<f64>(), 0..50),
        ints in prop::collection::vec(any::<i64>(), 0..20),
        note in "[a-z ]{0,12}",
    ) {
        let mut f = TensorFile::new(serde_json::json!({ "note": note }));
        f.insert("a", Tensor::vector(values.clone()));
        f.insert("b/c", Tensor::i64(vec![ints.len()], ints.clone()).unwrap());
        let g = TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        match &g.get("a").unwrap().data {
            TensorData::F64(v) => {
                prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
            other => prop_assert!(false, "{:?}", other),
        }
        prop_assert_eq!(&g.get("b/c").unwrap().data, &TensorData::I64(ints));
        prop_assert_eq!(&g.meta, &f.meta);
    }

    #[test]
    fn top_peaks_are_sorted_local_maxima(
        x in prop::collection::vec(0u8..6, 0..80),
        n in 2usize..13,
    ) {
        let speed: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let times = top_n_peaks(&speed, n, 0.05);
        prop_assert!(times.len() <= n);
        let idx: Vec<usize> = times.iter().map(|t| (t / 0.05).round() as usize).collect();
        for &i in &idx {
            prop_assert!(i > 0 && i + 1 < speed.len());
            prop_assert!(speed[i] > speed[i - 1] && speed[i] >= speed[i + 1]);
        }
        for w in idx.windows(2) {
            prop_assert!(speed[w[0]] >= speed[w[1]]);
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        a in prop::collection::vec(prop::array::uniform2(-1.0f64..1.0), 1..60),
        b in prop::collection::vec(prop::array::uniform2(-1.0f64..1.0), 1..60),
    ) {
        let cloud = |p: Vec<[f64; 2]>| GestureSpaceCloud { frames: p.len(), points: p, source: String::new() };
        let (ca, cb) = (cloud(a), cloud(b));
        let cfg = EvalConfig::default();
        let ab = occupancy_overlap(&ca, &cb, &cfg).unwrap();
        let ba = occupancy_overlap(&cb, &ca, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((occupancy_overlap(&ca, &ca, &cfg).unwrap() - 1.0).abs() < 1e-9);
    }
}
