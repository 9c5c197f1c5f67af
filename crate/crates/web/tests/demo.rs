use birl_core::corruption::Mechanism;
use birl_web::{
    calibration_curve, contour, filter_trace, filter_trace_json, posterior_ellipse,
    CalibrationParams, EllipseParams, FilterParams,
};

#[test]
fn filter_beats_fill_adjacent_on_missing_data() {
    for seed in 0..3 {
        let r = filter_trace(&FilterParams {
            eta: 0.3,
            sigma: 10.0,
            seed,
            ..FilterParams::default()
        })
        .unwrap();
        assert_eq!(r.truth.len(), 100);
        assert_eq!(r.bi_mean.len(), r.truth.len());
        assert_eq!(r.fa.len(), r.truth.len());
        assert!(r.missing_fraction > 0.05, "{}", r.missing_fraction);
        assert!(r.mse_bi < r.mse_fa, "seed {seed}: {} vs {}", r.mse_bi, r.mse_fa);
    }
}

#[test]
fn noiseless_complete_trace_is_exact() {
    let r = filter_trace(&FilterParams {
        mechanism: Mechanism::Mcar,
        eta: 0.0,
        sigma: 0.0,
        steps: 30,
        seed: 4,
    })
    .unwrap();
    assert_eq!(r.missing_fraction, 0.0);
    assert_eq!(r.bi_mean, r.truth);
    assert_eq!(r.fa, r.truth);
    assert!(r.observed.iter().flatten().all(|o| o.is_some()));
    assert!(r.bi_std.iter().flatten().all(|&s| s < 1e-6));
}

#[test]
fn json_entry_point_uses_defaults() {
    let text = filter_trace_json("{}").unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["truth"].as_array().unwrap().len(), 100);
    assert!(v["mse_bi"].as_f64().unwrap().is_finite());
}

#[test]
fn contour_lies_on_the_level_set() {
    let mean = [0.5, -1.0];
    let cov = [[2.0, -0.7], [-0.7, 0.5]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    for p in contour(mean, cov, 1.5, 40) {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        assert!((q - 2.25).abs() < 1e-9, "{q}");
    }
}

#[test]
fn ellipse_conditioning_cases() {
    let none = posterior_ellipse(&EllipseParams {
        observed: [false, false],
        ..EllipseParams::default()
    })
    .unwrap();
    assert_eq!(none.posterior_mean, none.prior_mean);
    assert_eq!(none.posterior_cov, none.prior_cov);

    let exact = posterior_ellipse(&EllipseParams {
        observed: [true, true],
        values: [0.7, -0.2],
        noise_std: 0.0,
        ..EllipseParams::default()
    })
    .unwrap();
    assert_eq!(exact.posterior_mean, [0.7, -0.2]);

    // one observed coordinate: closed-form scalar conditioning
    let p = EllipseParams::default();
    let r = posterior_ellipse(&p).unwrap();
    let s = p.cov[0][0] + p.noise_std * p.noise_std;
    let resid = p.values[0] - p.mean[0];
    assert!((r.posterior_mean[0] - (p.mean[0] + p.cov[0][0] / s * resid)).abs() < 1e-12);
    assert!((r.posterior_mean[1] - (p.mean[1] + p.cov[1][0] / s * resid)).abs() < 1e-12);
    assert!((r.posterior_cov[1][1] - (p.cov[1][1] - p.cov[1][0] * p.cov[0][1] / s)).abs() < 1e-12);
    assert_eq!(r.posterior_contour.len(), p.points + 1);
}

#[test]
fn ellipse_rejects_bad_input() {
    assert!(posterior_ellipse(&EllipseParams {
        noise_std: -1.0,
        ..EllipseParams::default()
    })
    .is_err());
    assert!(posterior_ellipse(&EllipseParams {
        cov: [[1.0, 2.0], [2.0, 1.0]],
        ..EllipseParams::default()
    })
    .is_err());
}

#[test]
fn calibration_hits_targets() {
    for mechanism in [Mechanism::Mcar, Mechanism::Mar] {
        let pts = calibration_curve(&CalibrationParams {
            mechanism,
            etas: vec![0.1, 0.2, 0.3],
            seed: 5,
        })
        .unwrap();
        for p in &pts {
            assert!((p.achieved - p.eta).abs() < 0.02, "{mechanism}: {p:?}");
            assert!(p.mean_missing.iter().all(|&m| m <= p.achieved + 1e-12));
            if mechanism == Mechanism::Mcar {
                assert_eq!(p.xi, p.eta);
            }
        }
    }
}
