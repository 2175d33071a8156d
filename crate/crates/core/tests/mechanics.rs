use neuromask::masker::{loss_outlier_flags, quality_check_stage1};
use neuromask::masker::{coverage, threshold_mask, DEFAULT_THRESHOLD};
use neuromask::trainer::{simulate_stop, EarlyStopPolicy};
use neuromask::volume::Volume;

#[test]
fn absolute_patience_hand_trace() {
    // Best at epoch 3, five rises after it.
    let trace = [1.0, 0.9, 0.8, 0.85, 0.81, 0.9, 0.95, 0.82, 0.7, 0.6];
    assert_eq!(simulate_stop(&EarlyStopPolicy::absolute(5, 30), &trace), 8);
    // An equal loss is not a violation.
    let flat = [1.0; 12];
    assert_eq!(simulate_stop(&EarlyStopPolicy::absolute(5, 30), &flat), 12);
    assert_eq!(simulate_stop(&EarlyStopPolicy::absolute(5, 30), &[1.0; 40]), 30);
}

#[test]
fn relative_tolerance_hand_trace() {
    // 1.04 is within 5 % of the best 1.0, 1.06 is not.
    let trace = [1.0, 1.04, 1.06, 1.06, 1.04, 1.06, 1.06, 1.06, 1.06, 1.06, 1.06];
    assert_eq!(simulate_stop(&EarlyStopPolicy::relative(0.05, 5, 150), &trace), 10);
    let trace = [1.0, 1.06, 1.06, 1.06, 1.06, 1.06];
    assert_eq!(simulate_stop(&EarlyStopPolicy::relative(0.05, 5, 150), &trace), 6);
    // A new best resets the count.
    let trace = [1.0, 1.2, 1.2, 1.2, 1.2, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6];
    assert_eq!(simulate_stop(&EarlyStopPolicy::relative(0.05, 5, 150), &trace), 11);
}

#[test]
fn session_policy_hand_trace() {
    let policy = EarlyStopPolicy::relative(0.01, 200, 5000);
    let mut trace = vec![1.0; 10];
    trace.extend(std::iter::repeat(1.02).take(300));
    assert_eq!(simulate_stop(&policy, &trace), 210);
    let within: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat(1.009).take(5999)).collect();
    assert_eq!(simulate_stop(&policy, &within), 5000);
}

#[test]
fn threshold_identities() {
    let m = Volume::new([1, 1, 6], vec![0.0, 0.5, 0.949, 0.95, 0.951, 1.0]).unwrap();
    let t = threshold_mask(&m, DEFAULT_THRESHOLD);
    assert_eq!(t.data(), &[0.0, 0.5, 0.949, 0.95, 1.0, 1.0]);
    assert_eq!(coverage(&t, DEFAULT_THRESHOLD), 3);
    assert_eq!(threshold_mask(&m, 0.0).data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn qc_identities() {
    let vols: Vec<Volume<f32>> = [0.94f32, 0.95, 1.0, 0.2].iter().map(|&v| Volume::filled([2, 2, 2], v)).collect();
    let refs: Vec<&Volume<f32>> = vols.iter().collect();
    let r = quality_check_stage1(&refs);
    assert_eq!(r.kept(), vec![1, 2]);
    assert_eq!(r.rejected(), vec![3, 0]);
    assert_eq!(r.entries.iter().map(|e| e.index).collect::<Vec<_>>(), vec![3, 0, 1, 2]);

    // median 1, MAD 0.1 -> cut 1 + 3 * 1.4826 * 0.1 = 1.44478
    let flags = loss_outlier_flags(&[1.0, 1.1, 0.9, 1.0, 5.0], 3.0).unwrap();
    assert_eq!(flags, vec![4]);
    assert_eq!(loss_outlier_flags(&[1.0, 1.1, 0.9, 1.0, 1.44], 3.0).unwrap(), Vec::<usize>::new());
    assert_eq!(loss_outlier_flags(&[1.0, 1.1, 0.9, 1.0, 1.45], 3.0).unwrap(), vec![4]);
    assert!(loss_outlier_flags(&[1.0, 2.0], 3.0).is_err());
}

#[test]
fn documented_examples() {
    use neuromask::metrics::{roi_similarity, RoiVector};
    use neuromask::trainer::balanced_accuracy;

    let trace = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95];
    assert_eq!(simulate_stop(&EarlyStopPolicy::absolute(5, 30), &trace), 7);

    // Sensitivity 4/5, specificity 3/5.
    let truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
    let pred = [1, 1, 1, 1, 0, 0, 0, 0, 1, 1];
    assert!((balanced_accuracy(&truth, &pred).unwrap() - 0.7).abs() < 1e-15);

    let v = |d: &[f64]| RoiVector { densities: d.to_vec() };
    assert_eq!(roi_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap(), Some(1.0));
    assert_eq!(roi_similarity(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 2.0, 0.0])).unwrap(), Some(0.0));
    let s = roi_similarity(&v(&[1.0, 1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap().unwrap();
    assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert_eq!(roi_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), None);
    assert!(roi_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());

    let m = Volume::new([1, 1, 3], vec![0.96f32, 0.95, 0.2]).unwrap();
    assert_eq!(threshold_mask(&m, DEFAULT_THRESHOLD).data(), &[1.0, 0.95, 0.2]);
    let ones = Volume::filled([2, 2, 2], 1.0f32);
    assert_eq!(threshold_mask(&ones, DEFAULT_THRESHOLD), ones);
    assert!(quality_check_stage1::<f32>(&[]).entries.is_empty());
}
