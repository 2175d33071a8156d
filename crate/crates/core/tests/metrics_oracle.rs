use neuromask::metrics::{pairwise_report, roi_density_vector, roi_similarity, DensityKind, Grouping, MaskContext};
use neuromask::seed::rng_from_seed;
use neuromask::volume::Volume;
use rand::Rng;

/// Voxel loop over explicit coordinates, one label at a time.
fn oracle_density(m: &Volume<f64>, atlas: &Volume<u32>, label: u32, mean: bool) -> f64 {
    let [d, h, w] = m.dims();
    let (mut s, mut n) = (0.0, 0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if atlas.get(z, y, x) == label {
                    s += 1.0 - m.get(z, y, x);
                    n += 1;
                }
            }
        }
    }
    if mean && n > 0 { s / n as f64 } else { s }
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn densities_and_similarity_match_voxel_loops() {
    let mut rng = rng_from_seed(9);
    for _ in 0..25 {
        let atlas = Volume::from_fn([5, 6, 7], |_, _, _| rng.gen_range(0..6u32));
        let a = Volume::from_fn([5, 6, 7], |_, _, _| if rng.gen_bool(0.7) { 1.0 } else { rng.gen_range(0.0..1.0) });
        let b = Volume::from_fn([5, 6, 7], |_, _, _| if rng.gen_bool(0.7) { 1.0 } else { rng.gen_range(0.0..1.0) });
        let max = *atlas.data().iter().max().unwrap();
        for (kind, mean) in [(DensityKind::Sum, false), (DensityKind::Mean, true)] {
            let va = roi_density_vector(&a, &atlas, kind).unwrap();
            let vb = roi_density_vector(&b, &atlas, kind).unwrap();
            assert_eq!(va.len(), max as usize);
            let oa: Vec<f64> = (1..=max).map(|l| oracle_density(&a, &atlas, l, mean)).collect();
            let ob: Vec<f64> = (1..=max).map(|l| oracle_density(&b, &atlas, l, mean)).collect();
            for (x, y) in va.densities.iter().zip(&oa) {
                assert!((x - y).abs() < 1e-12);
            }
            let s = roi_similarity(&va, &vb).unwrap().unwrap();
            assert!((s - oracle_cosine(&oa, &ob)).abs() < 1e-12);
        }
    }
}

#[test]
fn longitudinal_grouping_by_subject_and_baseline() {
    let atlas = Volume::from_fn([2, 2, 2], |z, _, _| z as u32 + 1);
    let mk = |name: &str, subject: &str, baseline: bool, low: f64| {
        let mut c = MaskContext::new(name, Volume::from_fn([2, 2, 2], |z, _, _| if z == 0 { low } else { 0.5 }));
        c.subject = Some(subject.to_string());
        c.baseline = baseline;
        c
    };
    let ctx = vec![mk("a0", "a", true, 0.0), mk("a1", "a", false, 0.1), mk("b0", "b", true, 0.9), mk("b1", "b", false, 1.0)];
    let r = pairwise_report(&ctx, &atlas, Grouping::Longitudinal, DensityKind::Sum, 1, 1.0).unwrap();
    assert_eq!(r.pairs.len(), 6);
    let intra = r.group("intra_subject").unwrap();
    let inter = r.group("inter_subject").unwrap();
    assert_eq!((intra.n_pairs, inter.n_pairs), (2, 1));
    assert_eq!(r.pairs.iter().filter(|p| p.group.is_none()).count(), 3);
    assert!(intra.mean_roi_similarity.unwrap() > inter.mean_roi_similarity.unwrap());
    assert!(r.pairs.iter().all(|p| p.probcnn_ab.is_none()));
    assert!(r.summary().contains("intra_subject.pairs=2"));
    assert_eq!(r.pairs_tsv().lines().count(), 7);
}

#[test]
fn all_ones_masks_have_undefined_similarity() {
    let atlas = Volume::filled([2, 2, 2], 1u32);
    let ctx = vec![MaskContext::new("x", Volume::filled([2, 2, 2], 1.0f64)), MaskContext::new("y", Volume::filled([2, 2, 2], 0.5))];
    let r = pairwise_report(&ctx, &atlas, Grouping::All, DensityKind::Sum, 1, 1.0).unwrap();
    assert_eq!(r.pairs[0].roi_similarity, None);
    assert_eq!(r.group("all").unwrap().n_undefined, 1);
    assert!(pairwise_report(&ctx[..1], &atlas, Grouping::All, DensityKind::Sum, 1, 1.0).is_err());
}
