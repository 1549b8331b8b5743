//! Cross-checks the BVH parser and writer against the `bvh_anim` crate.

use std::path::{Path, PathBuf};

use gesticulate::bvh::{parse_bvh, write_bvh, BvhError, MotionClip, Skeleton};

fn fixtures() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "bvh"))
        .collect();
    v.sort();
    v
}

/// Asserts that `oracle` describes the same hierarchy and motion as ours.
/// The oracle tokenizes on ':' and has no end site on the root (the site
/// OFFSET overwrites the root offset), so those two are compared loosely.
fn assert_agrees(name: &str, sk: &Skeleton, clip: &MotionClip, oracle: &bvh_anim::Bvh) {
    let joints: Vec<_> = oracle.joints().collect();
    assert_eq!(joints.len(), sk.joint_count(), "{name}: joint count");
    let root_site = sk.end_sites()[0].is_some();
    for (ours, theirs) in sk.joints().iter().zip(&joints) {
        let data = theirs.data();
        let prefix = ours.name.split(':').next().unwrap();
        assert_eq!(data.name().to_string(), prefix, "{name}: joint name");
        assert_eq!(data.parent_index(), ours.parent, "{name}: parent of {}", ours.name);
        let channels: Vec<String> = data.channels().iter().map(|c| c.channel_type().as_str().to_string()).collect();
        let expected: Vec<String> = ours.channels.iter().map(ToString::to_string).collect();
        assert_eq!(channels, expected, "{name}: channels of {}", ours.name);
        let o = data.offset();
        if ours.parent.is_none() && root_site {
            continue;
        }
        for (k, v) in [o.x, o.y, o.z].into_iter().enumerate() {
            assert!((ours.offset[k] - v as f64).abs() < 1e-3, "{name}: offset of {}", ours.name);
        }
    }
    for (ours, theirs) in sk.end_sites().iter().zip(&joints).skip(usize::from(root_site)) {
        match (ours, theirs.data().end_site()) {
            (Some(a), Some(b)) => {
                for (k, v) in [b.x, b.y, b.z].into_iter().enumerate() {
                    assert!((a[k] - v as f64).abs() < 1e-3, "{name}: end site");
                }
            }
            (None, None) => {}
            (a, b) => panic!("{name}: end site presence differs: {a:?} vs {b:?}"),
        }
    }
    assert_eq!(oracle.num_frames(), clip.frame_count(), "{name}: frame count");
    assert!((oracle.frame_time().as_secs_f64() - clip.frame_time()).abs() < 1e-6, "{name}: frame time");
    for (ours, theirs) in clip.frames().zip(oracle.frames()) {
        assert_eq!(ours.len(), theirs.as_slice().len(), "{name}: frame width");
        for (a, b) in ours.iter().zip(theirs.as_slice()) {
            let tol = 1e-6 * a.abs().max(1.0) + 1e-4;
            assert!((a - *b as f64).abs() < tol, "{name}: {a} vs {b}");
        }
    }
}

/// The oracle drops leaf joints that lack an end site.
fn oracle_can_represent(sk: &Skeleton) -> bool {
    (0..sk.joint_count()).all(|j| sk.children(j).next().is_some() || sk.end_sites()[j].is_some())
}

#[test]
fn normalized_output_agrees_with_oracle() {
    let paths = fixtures();
    assert!(paths.len() >= 5);
    let mut compared = 0;
    for p in &paths {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let (sk, clip) = parse_bvh(&std::fs::read_to_string(p).unwrap()).unwrap();
        if !oracle_can_represent(&sk) {
            continue;
        }
        let text = write_bvh(&sk, &clip).unwrap();
        let oracle = bvh_anim::from_str(&text).unwrap_or_else(|e| panic!("{name}: oracle rejects our output: {e}"));
        assert_agrees(&name, &sk, &clip, &oracle);
        compared += 1;
    }
    assert!(compared >= 4, "{compared} fixtures compared");
}

#[test]
fn plain_fixtures_parse_like_oracle() {
    // files in the conventional layout that the oracle also reads directly
    for name in ["upper_body.bvh", "single_joint.bvh"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
        let bytes = std::fs::read(&p).unwrap();
        let (sk, clip) = parse_bvh(std::str::from_utf8(&bytes).unwrap()).unwrap();
        let oracle = bvh_anim::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_agrees(name, &sk, &clip, &oracle);
    }
}

#[test]
fn malformed_inputs_fail_with_a_line() {
    let good = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/upper_body.bvh")).unwrap();
    let cases = [
        good.replacen("CHANNELS 3", "CHANNELS 4", 1),
        good.replacen("OFFSET", "OFSET", 1),
        good.replacen("Frames: 12", "Frames: 13", 1),
        good.replacen("Frame Time:", "Frame Time: x", 1),
        good.replacen("Xrotation", "Wrotation", 1),
        good[..good.len() / 3].to_string(),
        good.replacen('}', "", 1),
    ];
    for (i, text) in cases.iter().enumerate() {
        match parse_bvh(text) {
            Err(BvhError::Parse { line, .. }) => assert!(line >= 1, "case {i}"),
            other => panic!("case {i}: expected a positioned parse error, got {other:?}"),
        }
    }
}
