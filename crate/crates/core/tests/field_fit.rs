use gsfield_core::field::{fit_field, FitConfig};
use gsfield_core::gs_model::{Gaussian, GaussianSplat};
use gsfield_core::gt_functions::{sample_training_queries, TruncationConfig};
use gsfield_core::GaussianField;

fn one_gaussian() -> GaussianSplat {
    GaussianSplat::new(vec![Gaussian {
        center: [0.1, -0.2, 0.05],
        rotation: [0.9238795325112867, 0.0, 0.3826834323650898, 0.0],
        scale: [0.008, 0.004, 0.006],
        opacity: 0.7,
        color: [0.9, 0.3, 0.15],
    }])
}

#[test]
fn one_gaussian_fit_reaches_low_probability_error() {
    let splat = one_gaussian();
    let cfg = TruncationConfig::default();
    let samples = sample_training_queries(&splat, 4000, 1000, 0.0125, 1, &cfg).unwrap();
    let t = std::time::Instant::now();
    let res = fit_field(&splat, &samples, &FitConfig::default()).unwrap();
    eprintln!("fit: {:?}, val prob L1 {}", t.elapsed(), res.val_prob_l1);
    eprintln!("val curve {:?}", res.val_loss);
    assert!(res.val_prob_l1 < 0.05, "{}", res.val_prob_l1);
    let first = res.val_loss[1].1;
    let last = res.val_loss.last().unwrap().1;
    assert!(last <= first, "{first} -> {last}");
    let c = splat.gaussians[0].center;
    assert!(res.field.eval_pf(c) > 0.9, "{}", res.field.eval_pf(c));
    let a = res.field.attributes(&[c])[0];
    for k in 0..3 {
        assert!((a.color[k] - splat.gaussians[0].color[k]).abs() < 0.05, "{:?}", a.color);
    }
    assert!((a.opacity - 0.7).abs() < 0.05, "{}", a.opacity);
}
