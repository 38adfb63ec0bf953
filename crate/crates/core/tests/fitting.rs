mod common;

use lig::{
    fit_level, init_cloud, io, is_positive_definite, mse_loss, render, ColorInit, FitConfig,
    ImagePlane, EPS_PSD,
};

fn crop(img: &ImagePlane<f32>, x0: usize, y0: usize, w: usize, h: usize) -> ImagePlane<f32> {
    ImagePlane::from_fn(w, h, img.channels(), |x, y, c| img.get(x0 + x, y0 + y, c))
}

#[test]
fn small_fit_halves_the_loss_and_keeps_covariances_valid() {
    let target = io::load_image(common::data("astronaut_32.png")).unwrap();
    let cfg = FitConfig {
        iters: 500,
        seed: 7,
        ..FitConfig::default()
    };
    let out = fit_level(&target, 64, &cfg).unwrap();
    assert_eq!(out.losses.len(), 500);
    assert!(
        out.final_loss < 0.5 * out.losses[0],
        "initial {} final {}",
        out.losses[0],
        out.final_loss
    );
    let eps = EPS_PSD as f32;
    assert!(out.cloud.cov().iter().all(|&k| is_positive_definite(k, eps)));
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn sampled_color_init_beats_zero_init() {
    let full = io::load_image(common::data("astronaut_256.png")).unwrap();
    let target = crop(&full, 60, 40, 100, 100);
    let sampled = FitConfig::default();
    let zero = FitConfig {
        color_init: ColorInit::Zero,
        ..FitConfig::default()
    };
    let rcfg = sampled.render_config();
    let err = |cfg: &FitConfig| {
        let cloud = init_cloud(10_000, &target, 1, cfg).unwrap();
        mse_loss(&render(&cloud, 100, 100, &rcfg), &target).unwrap().0
    };
    let (e_sampled, e_zero) = (err(&sampled), err(&zero));
    assert!(e_sampled < e_zero, "sampled {e_sampled} vs zero {e_zero}");
}

#[test]
fn same_seed_same_fit() {
    let target = io::load_image(common::data("astronaut_32.png")).unwrap();
    let cfg = FitConfig {
        iters: 30,
        seed: 9,
        ..FitConfig::default()
    };
    let a = fit_level(&target, 40, &cfg).unwrap();
    let b = fit_level(&target, 40, &cfg).unwrap();
    assert_eq!(a.cloud, b.cloud);
    assert_eq!(a.losses, b.losses);
}
