#![allow(clippy::needless_range_loop)]

use lamotion::eval::{
    dice, evaluate_cycle, green_lagrange, hausdorff_mm, marching_cubes, marching_cubes_smoothed,
    mean_surface_distance, warp_mesh, MeanStd, TriMesh,
};
use lamotion::field::{DisplacementField, Grid, Mask};
use lamotion::phantom::{generate_case, PhantomConfig};
use lamotion::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, grid: Grid, fill: f64) -> Mask {
    let labels = (0..grid.len())
        .map(|_| u8::from(rng.random_bool(fill)))
        .collect();
    Mask::new(grid, labels).unwrap()
}

fn ball(grid: Grid, center: [f64; 3], r: f64) -> Mask {
    Mask::from_index_fn(grid, |i, j, k| {
        let d = [
            i as f64 - center[0],
            j as f64 - center[1],
            k as f64 - center[2],
        ];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
    })
}

/// Scripted surface extraction: foreground with a background 6-neighbour or on the grid edge.
fn oracle_surface(m: &Mask) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = m.grid.dims;
    let on = |i: i64, j: i64, k: i64| {
        i >= 0
            && j >= 0
            && k >= 0
            && i < nx as i64
            && j < ny as i64
            && k < nz as i64
            && m.at(i as usize, j as usize, k as usize)
    };
    let mut out = Vec::new();
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                if !on(i, j, k) {
                    continue;
                }
                let nb = [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ];
                if nb.iter().any(|(a, b, c)| !on(i + a, j + b, k + c)) {
                    let s = m.grid.spacing;
                    out.push([i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]]);
                }
            }
        }
    }
    out
}

fn oracle_directed(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (s.len() - 1) as f64;
    let f = rank.floor() as usize;
    let c = (f + 1).min(s.len() - 1);
    s[f] + (rank - f as f64) * (s[c] - s[f])
}

#[test]
fn dice_examples() {
    let g = Grid::cube(6, 1.0).unwrap();
    let a = Mask::from_index_fn(g, |i, j, k| i < 2 && j < 2 && k < 2);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    let far = Mask::from_index_fn(g, |i, j, k| i >= 4 && j >= 4 && k >= 4);
    assert_eq!(dice(&a, &far).unwrap(), 0.0);
    let half = Mask::from_index_fn(g, |i, j, k| (1..3).contains(&i) && j < 2 && k < 2);
    assert_eq!(dice(&a, &half).unwrap(), 0.5);
    assert_eq!(dice(&Mask::empty(g), &Mask::empty(g)).unwrap(), 1.0);
    assert_eq!(dice(&Mask::empty(g), &a).unwrap(), 0.0);
    let other = Grid::cube(5, 1.0).unwrap();
    assert!(matches!(
        dice(&a, &Mask::empty(other)),
        Err(Error::GridMismatch { .. })
    ));
}

#[test]
fn hausdorff_examples() {
    let g = Grid::cube(8, 1.5).unwrap();
    let a = Mask::from_index_fn(g, |i, j, k| (i, j, k) == (1, 4, 4));
    let b = Mask::from_index_fn(g, |i, j, k| (i, j, k) == (4, 4, 4));
    assert_eq!(hausdorff_mm(&a, &b, 100.0).unwrap(), 4.5);
    assert_eq!(hausdorff_mm(&a, &a, 100.0).unwrap(), 0.0);
    assert!(matches!(
        hausdorff_mm(&a, &Mask::empty(g), 100.0),
        Err(Error::EmptyMask(_))
    ));

    let g = Grid::cube(24, 1.0).unwrap();
    let s1 = ball(g, [10.0, 11.5, 11.5], 6.0);
    let s2 = ball(g, [12.0, 11.5, 11.5], 6.0);
    let hd = hausdorff_mm(&s1, &s2, 100.0).unwrap();
    assert!((hd - 2.0).abs() <= 0.5, "{hd}");
}

#[test]
fn hausdorff_scales_with_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g1 = Grid::cube(9, 1.0).unwrap();
    let g2 = Grid::cube(9, 2.0).unwrap();
    let a = random_mask(&mut rng, g1, 0.3);
    let b = random_mask(&mut rng, g1, 0.3);
    let a2 = Mask::new(g2, a.labels.clone()).unwrap();
    let b2 = Mask::new(g2, b.labels.clone()).unwrap();
    let (h1, h2) = (
        hausdorff_mm(&a, &b, 100.0).unwrap(),
        hausdorff_mm(&a2, &b2, 100.0).unwrap(),
    );
    assert!((h2 - 2.0 * h1).abs() < 1e-12);
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let dims = [
            rng.random_range(3..=12),
            rng.random_range(3..=12),
            rng.random_range(3..=12),
        ];
        let spacing = [
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        ];
        let g = Grid::new(dims, spacing).unwrap();
        let fill = rng.random_range(0.05..0.7);
        let mut a = random_mask(&mut rng, g, fill);
        let mut b = random_mask(&mut rng, g, fill);
        a.labels[0] = 1;
        b.labels[g.len() - 1] = 1;

        let inter = a
            .labels
            .iter()
            .zip(&b.labels)
            .filter(|(x, y)| **x == 1 && **y == 1)
            .count();
        let na = a.labels.iter().filter(|x| **x == 1).count();
        let nb = b.labels.iter().filter(|x| **x == 1).count();
        assert_eq!(dice(&a, &b).unwrap(), 2.0 * inter as f64 / (na + nb) as f64);

        let (sa, sb) = (oracle_surface(&a), oracle_surface(&b));
        let (ab, ba) = (oracle_directed(&sa, &sb), oracle_directed(&sb, &sa));
        let hd = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
        assert!((hausdorff_mm(&a, &b, 100.0).unwrap() - hd).abs() < 1e-9);
        let hd95 = oracle_percentile(&ab, 95.0).max(oracle_percentile(&ba, 95.0));
        assert!((hausdorff_mm(&a, &b, 95.0).unwrap() - hd95).abs() < 1e-9);
        let msd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        assert!((mean_surface_distance(&a, &b).unwrap() - msd).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn dice_and_hausdorff_are_symmetric(seed in any::<u64>(), fill in 0.1f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::cube(7, 1.3).unwrap();
        let mut a = random_mask(&mut rng, g, fill);
        let mut b = random_mask(&mut rng, g, fill);
        a.labels[3] = 1;
        b.labels[5] = 1;
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hausdorff_mm(&a, &b, 100.0).unwrap(), hausdorff_mm(&b, &a, 100.0).unwrap());
        prop_assert_eq!(hausdorff_mm(&a, &a, 100.0).unwrap(), 0.0);
    }
}

#[test]
fn empty_mask_gives_empty_mesh() {
    assert!(marching_cubes(&Mask::empty(Grid::cube(5, 1.0).unwrap())).is_empty());
}

#[test]
fn single_voxel_is_a_closed_sphere_topology() {
    let g = Grid::cube(5, 1.0).unwrap();
    let m = Mask::from_index_fn(g, |i, j, k| (i, j, k) == (2, 2, 2));
    let mesh = marching_cubes(&m);
    assert!(mesh.is_watertight());
    assert_eq!(mesh.euler_characteristic(), 2);
    assert!(mesh.signed_volume() > 0.0);
    mesh.validate().unwrap();
}

#[test]
fn sphere_area_matches_closed_form_after_smoothing() {
    let g = Grid::cube(26, 1.0).unwrap();
    let m = ball(g, [12.5, 12.5, 12.5], 10.0);
    let mesh = marching_cubes_smoothed(&m);
    let exact = 4.0 * std::f64::consts::PI * 100.0;
    let rel = (mesh.area() - exact).abs() / exact;
    assert!(rel < 0.05, "area {} vs {exact}", mesh.area());
    assert!(mesh.is_watertight());
    assert_eq!(mesh.euler_characteristic(), 2);
}

#[test]
fn raw_sphere_mesh_encloses_the_voxel_volume() {
    let g = Grid::cube(26, 1.0).unwrap();
    let m = ball(g, [12.5, 12.5, 12.5], 10.0);
    let mesh = marching_cubes(&m);
    assert!(mesh.is_watertight());
    assert_eq!(mesh.euler_characteristic(), 2);
    let r = (3.0 * mesh.signed_volume() / (4.0 * std::f64::consts::PI)).cbrt();
    assert!((r - 10.0).abs() < 0.1, "{r}");
}

#[test]
fn random_interior_masks_are_watertight() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let g = Grid::new([9, 8, 10], [1.0, 1.2, 0.8]).unwrap();
        let fill = rng.random_range(0.2..0.8);
        let mut m = random_mask(&mut rng, g, fill);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            if i == 0 || j == 0 || k == 0 || i == 8 || j == 7 || k == 9 {
                m.labels[idx] = 0;
            }
        }
        let mesh = marching_cubes(&m);
        mesh.validate().unwrap();
        assert!(mesh.is_watertight());
        assert!(mesh.signed_volume() > 0.0);
    }
}

#[test]
fn boundary_touching_mask_is_closed_by_padding() {
    let g = Grid::cube(4, 1.0).unwrap();
    let full = Mask::from_index_fn(g, |_, _, _| true);
    let mesh = marching_cubes(&full);
    assert!(mesh.is_watertight());
    assert_eq!(mesh.euler_characteristic(), 2);
}

#[test]
fn warp_mesh_examples() {
    let g = Grid::cube(16, 1.0).unwrap();
    let mesh = marching_cubes(&ball(g, [8.0, 8.0, 8.0], 4.0));
    let same = warp_mesh(&mesh, &DisplacementField::zeros(g, 0, 0));
    assert_eq!(same, mesh);

    let c = [0.5, -1.25, 2.0];
    let shifted = warp_mesh(&mesh, &DisplacementField::from_fn(g, 0, 1, |_| c));
    for (a, b) in shifted.vertices.iter().zip(&mesh.vertices) {
        for k in 0..3 {
            assert!((a[k] - b[k] - c[k]).abs() < 1e-12);
        }
    }
    assert_eq!(shifted.triangles, mesh.triangles);

    let linear = DisplacementField::from_fn(g, 0, 1, |p| [0.1 * p[0], 0.0, 0.0]);
    let probe = TriMesh::new(
        vec![[10.0, 3.0, 4.0], [10.0, 5.0, 4.0], [10.0, 3.0, 6.0]],
        vec![[0, 1, 2]],
    )
    .unwrap();
    for v in warp_mesh(&probe, &linear).vertices {
        assert!((v[0] - 11.0).abs() < 1e-12);
    }
}

#[test]
fn obj_round_trip() {
    let g = Grid::new([7, 6, 8], [0.7, 1.1, 1.9]).unwrap();
    let mesh = marching_cubes(&ball(g, [3.0, 2.5, 4.0], 2.2));
    let text = mesh.to_obj();
    assert!(text.starts_with("v "));
    let back = TriMesh::from_obj(&text).unwrap();
    assert_eq!(back, mesh);
    assert!(TriMesh::from_obj("v 0 0 0\nf 1 1 2\n").is_err());
    assert!(TriMesh::from_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n").is_ok());
}

#[test]
fn strain_closed_forms() {
    let g = Grid::new([6, 7, 5], [1.0, 1.5, 2.0]).unwrap();
    assert!(green_lagrange(&DisplacementField::zeros(g, 0, 1))
        .tensors
        .iter()
        .flatten()
        .flatten()
        .all(|v| *v == 0.0));
    let trans = DisplacementField::from_fn(g, 0, 1, |_| [1.0, -2.0, 0.5]);
    assert!(green_lagrange(&trans)
        .tensors
        .iter()
        .flatten()
        .flatten()
        .all(|v| *v == 0.0));

    let e = green_lagrange(&DisplacementField::from_fn(g, 0, 1, |p| {
        [0.1 * p[0], 0.0, 0.0]
    }));
    for t in &e.tensors {
        for r in 0..3 {
            for c in 0..3 {
                let expect = if (r, c) == (0, 0) {
                    0.5 * (1.1f64.powi(2) - 1.0)
                } else {
                    0.0
                };
                assert!((t[r][c] - expect).abs() < 1e-10);
            }
        }
    }
    for v in e.max_principal() {
        assert!((v - 0.105).abs() < 1e-10);
    }

    // general affine u = A x: E = ½(A + Aᵀ + AᵀA)
    let a = [[0.02, -0.05, 0.01], [0.03, 0.04, -0.02], [0.0, 0.06, -0.03]];
    let e = green_lagrange(&DisplacementField::from_fn(g, 0, 1, |p| {
        [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2])
    }));
    for t in &e.tensors {
        for r in 0..3 {
            for c in 0..3 {
                let ata: f64 = (0..3).map(|k| a[k][r] * a[k][c]).sum();
                assert!((t[r][c] - 0.5 * (a[r][c] + a[c][r] + ata)).abs() < 1e-10);
                assert_eq!(t[r][c], t[c][r]);
            }
        }
    }

    let th: f64 = 0.01;
    let rot = DisplacementField::from_fn(g, 0, 1, |p| {
        [
            th.cos() * p[0] - th.sin() * p[1] - p[0],
            th.sin() * p[0] + th.cos() * p[1] - p[1],
            0.0,
        ]
    });
    assert!(green_lagrange(&rot).frobenius().iter().all(|v| *v < 1e-4));
}

#[test]
fn cycle_evaluation_examples() {
    let g = Grid::cube(10, 1.2).unwrap();
    let r = ball(g, [4.5, 4.5, 4.5], 3.0);
    let masks = vec![r.clone(), r.clone(), r.clone()];
    let dvfs = vec![
        DisplacementField::zeros(g, 0, 1),
        DisplacementField::zeros(g, 0, 2),
    ];
    let rep = evaluate_cycle(&masks, &r, &dvfs, 95.0).unwrap();
    assert_eq!(rep.frames.len(), 2);
    for f in &rep.frames {
        assert_eq!((f.dice, f.hd_mm, f.hd95_mm, f.msd_mm), (1.0, 0.0, 0.0, 0.0));
    }

    let shrunk = ball(g, [4.5, 4.5, 4.5], 2.2);
    let moved = ball(g, [5.5, 4.5, 4.5], 3.0);
    let masks = vec![r.clone(), shrunk.clone(), moved.clone()];
    let rep = evaluate_cycle(&masks, &r, &dvfs, 95.0).unwrap();
    assert_eq!(rep.frames[0].dice, dice(&r, &shrunk).unwrap());
    assert_eq!(rep.frames[1].dice, dice(&r, &moved).unwrap());

    assert!(evaluate_cycle(&masks, &r, &dvfs[..1], 95.0).is_err());
    let csv = rep.frames_csv();
    assert!(csv.starts_with("frame,dice,hd_mm,hd95_mm,msd_mm,area_mm2\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(rep
        .summary_csv()
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("mean ± std,"));
}

#[test]
fn mean_std_format() {
    let m = MeanStd::of(&[0.85, 0.9, 0.89]);
    assert_eq!(m.to_string(), format!("{:.3} ± {:.3}", m.mean, m.std));
    assert_eq!(
        MeanStd {
            mean: 0.88,
            std: 0.027
        }
        .to_string(),
        "0.880 ± 0.027"
    );
    assert!((MeanStd::of(&[1.0, 3.0]).std - 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn ground_truth_fields_score_well_on_the_phantom() {
    let cfg = PhantomConfig {
        frames: 8,
        ..Default::default()
    };
    let case = generate_case(&cfg).unwrap();
    let rep = evaluate_cycle(&case.masks, &case.masks[0], &case.gt_dvfs, 95.0).unwrap();
    for f in &rep.frames {
        assert!(f.dice >= 0.95, "{f:?}");
        assert!(f.hd_mm <= 2.0 * cfg.spacing_mm, "{f:?}");
    }
}
