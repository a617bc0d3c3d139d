use rave_web::{band_responses, fidelity_curve, tone_distance};

#[test]
fn band_responses_split_the_spectrum() {
    let points = 257;
    let r = band_responses(4, 128, points).unwrap();
    assert_eq!(r.len(), 4 * points);
    // Each band peaks inside its own quarter of the spectrum.
    for k in 0..4 {
        let band = &r[k * points..(k + 1) * points];
        let peak = band
            .iter()
            .enumerate()
            .fold(0, |m, (i, v)| if *v > band[m] { i } else { m });
        let f = peak as f64 / (points - 1) as f64;
        assert!(
            f >= k as f64 / 4.0 && f <= (k + 1) as f64 / 4.0,
            "band {k} peaks at {f}"
        );
    }
    assert!(band_responses(0, 128, 8).is_err());
}

#[test]
fn tone_distance_grows_with_detuning() {
    // Identical inputs sit at the log floor of every scale.
    let floor = 5.0 * rave_core::dsp::SPECTRAL_EPSILON.ln();
    assert!((tone_distance(220.0, 220.0, 16_000).unwrap() - floor).abs() < 1e-9);
    let near = tone_distance(220.0, 225.0, 16_000).unwrap();
    let far = tone_distance(220.0, 440.0, 16_000).unwrap();
    assert!(floor < near && near < far, "{near} {far}");
}

#[test]
fn fidelity_curve_is_monotone() {
    let s: Vec<f64> = (0..16).map(|i| (-0.3 * i as f64).exp()).collect();
    let c = fidelity_curve(&s, 11).unwrap();
    assert_eq!(c.len(), 11);
    assert_eq!((c[0], c[10]), (0, 16));
    assert!(c.windows(2).all(|w| w[0] <= w[1]));
    assert!(fidelity_curve(&[1.0, 2.0], 3).is_err());
}
