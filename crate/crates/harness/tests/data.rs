//! Synthetic scenes: determinism, label-consistent boundaries, and normals
//! that agree with the depth map's slope.

use std::fs;

use mtmamba_harness::data::{generate_sample, Dataset, MANIFEST};
use proptest::prelude::*;

/// Edge pixels recomputed straight from the label grid.
fn edges(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let v = labels[(i * w as isize + j) as usize];
            for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (a, b) = (i + di, j + dj);
                if a >= 0 && b >= 0 && a < h as isize && b < w as isize && labels[(a * w as isize + b) as usize] != v {
                    out[(i * w as isize + j) as usize] = 1;
                }
            }
        }
    }
    out
}

#[test]
fn boundary_is_the_label_edge_set() {
    for idx in 0..12 {
        let s = generate_sample(9, idx, 64, 48, 5);
        assert_eq!(s.boundary, edges(&s.segmentation, 64, 48), "sample {idx}");
        assert!(s.boundary.iter().any(|&b| b == 1));
    }
}

#[test]
fn normals_match_central_difference_slope() {
    let (h, w) = (64, 64);
    let mut checked = 0;
    for idx in 0..8 {
        let s = generate_sample(5, idx, h, w, 5);
        let d = |i: usize, j: usize| s.depth[i * w + j] as f64;
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let inst = s.instance[i * w + j];
                let same = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                    .iter()
                    .all(|&(a, b)| s.instance[a * w + b] == inst);
                if !same {
                    continue;
                }
                let gx = (d(i, j + 1) - d(i, j - 1)) / 2.0;
                let gy = (d(i + 1, j) - d(i - 1, j)) / 2.0;
                let len = (gx * gx + gy * gy + 1.0).sqrt();
                let want = [-gx / len, -gy / len, 1.0 / len];
                for c in 0..3 {
                    let got = s.normal[(i * w + j) * 3 + c] as f64;
                    assert!((got - want[c]).abs() <= 1e-3, "sample {idx} ({i},{j}) c{c}: {got} vs {}", want[c]);
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000, "only {checked} interior pixels");
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(4, 32, 32, 5, 3, 2).unwrap();
    ds.save(a.path()).unwrap();
    Dataset::generate(4, 32, 32, 5, 3, 2).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 5 * 6);
    assert!(names.iter().any(|n| n == MANIFEST));
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n:?}");
    }
    assert_eq!(Dataset::load(a.path()).unwrap(), ds);
}

#[test]
fn corrupted_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::generate(1, 32, 32, 3, 1, 0).unwrap().save(dir.path()).unwrap();
    fs::write(dir.path().join(MANIFEST), "{\"format\": \"other\"}").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn samples_are_well_formed(seed in any::<u64>(), idx in 0u64..1000, k in 2usize..8) {
        let s = generate_sample(seed, idx, 32, 32, k);
        prop_assert!(s.segmentation.iter().all(|&c| (c as usize) < k));
        prop_assert!(s.depth.iter().all(|&d| d > 0.0 && d.is_finite()));
        for n in s.normal.chunks(3) {
            let len: f32 = n.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((len - 1.0).abs() < 1e-5);
            prop_assert!(n[2] > 0.0);
        }
        prop_assert_eq!(&s, &generate_sample(seed, idx, 32, 32, k));
    }
}
