use dpvger_wasm_demo::{clip_and_noise_points, epsilon_curve_points};

#[test]
fn curve_is_increasing_in_steps() {
    let pts = epsilon_curve_points(0.01, 1.1, 1e-5, 1000, 10).unwrap();
    assert_eq!(pts.len(), 20);
    assert_eq!(pts[18], 1000.0);
    for w in pts.chunks(2).collect::<Vec<_>>().windows(2) {
        assert!(w[1][0] > w[0][0]);
        assert!(w[1][1] >= w[0][1]);
    }
}

#[test]
fn clipped_points_respect_the_bound() {
    let out = clip_and_noise_points(&[3.0, 4.0, 0.3, 0.4], 1.0, 0.0, 7).unwrap();
    assert_eq!(out.len(), 6);
    assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
    assert_eq!(&out[2..4], &[0.3, 0.4]);
    assert!((out[4] - 0.45).abs() < 1e-12 && (out[5] - 0.6).abs() < 1e-12);
    assert!(clip_and_noise_points(&[], 1.0, 1.0, 0).unwrap().is_empty());
}
