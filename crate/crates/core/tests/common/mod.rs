#![allow(dead_code)]

use std::path::PathBuf;

use lig::{
    mse_loss, naive_render, render, render_backward, CovUT, Gaussian2D, GaussianCloud, ImagePlane,
    RenderConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Positive-definite Gaussians with centers near (and sometimes outside) the image.
pub fn random_pd_cloud(r: &mut impl Rng, n: usize, w: usize, h: usize, c: usize) -> GaussianCloud<f64> {
    let mut cloud = GaussianCloud::new(c);
    for _ in 0..n {
        let mu = [
            r.gen_range(-3.0..w as f64 + 3.0),
            r.gen_range(-3.0..h as f64 + 3.0),
        ];
        let a: f64 = r.gen_range(0.6..12.0);
        let cc: f64 = r.gen_range(0.6..12.0);
        let rho: f64 = r.gen_range(-0.85..0.85);
        let cov = CovUT::new(a, rho * (a * cc).sqrt(), cc);
        let color = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
        cloud.push(Gaussian2D::new(mu, cov, color)).unwrap();
    }
    cloud
}

pub struct GradCase {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub checked: usize,
    /// Largest `|analytic - fd| / max(|fd|, tiny)` among entries that fail the
    /// absolute bound.
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Compares every analytic gradient entry of `L = Σ g·render(cloud)` to a
/// central difference of the naive renderer, in double precision with no
/// cutoff (the cutoff makes the render discontinuous).
pub fn gradient_case(seed: u64, h: f64, rel_tol: f64, abs_tol: f64) -> GradCase {
    let mut r = rng(seed);
    let width = r.gen_range(16..=32);
    let height = r.gen_range(16..=32);
    let channels = r.gen_range(1..=3);
    let n = r.gen_range(1..=20);
    let cloud = random_pd_cloud(&mut r, n, width, height, channels);
    let upstream = ImagePlane::from_fn(width, height, channels, |_, _, _| r.gen_range(-1.0..1.0));
    let cfg = RenderConfig {
        sigma_cut: f64::INFINITY,
        tile_size: [4, 8, 16][seed as usize % 3],
        ..RenderConfig::default()
    };
    let grads = render_backward(&cloud, &cfg, &upstream).unwrap();
    let loss = |cl: &GaussianCloud<f64>| -> f64 {
        let img = naive_render(cl, width, height, &cfg);
        img.as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let fd = |edit: &dyn Fn(&mut GaussianCloud<f64>, f64)| -> f64 {
        let mut plus = cloud.clone();
        edit(&mut plus, h);
        let mut minus = cloud.clone();
        edit(&mut minus, -h);
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    };

    let mut out = GradCase {
        n,
        width,
        height,
        channels,
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let mut check = |label: String, analytic: f64, numeric: f64| {
        out.checked += 1;
        let diff = (analytic - numeric).abs();
        if diff <= abs_tol {
            return;
        }
        let rel = diff / numeric.abs().max(f64::MIN_POSITIVE);
        out.worst_rel = out.worst_rel.max(rel);
        if rel > rel_tol {
            out.failures.push(format!(
                "{label}: analytic {analytic:e} vs numeric {numeric:e}"
            ));
        }
    };
    for i in 0..n {
        for axis in 0..2 {
            let num = fd(&|cl, d| cl.mu_mut()[i][axis] += d);
            check(format!("g{i}.mu[{axis}]"), grads.d_mu[i][axis], num);
        }
        let num = fd(&|cl, d| cl.cov_mut()[i].a += d);
        check(format!("g{i}.a"), grads.d_cov[i].a, num);
        let num = fd(&|cl, d| cl.cov_mut()[i].b += d);
        check(format!("g{i}.b"), grads.d_cov[i].b, num);
        let num = fd(&|cl, d| cl.cov_mut()[i].c += d);
        check(format!("g{i}.c"), grads.d_cov[i].c, num);
        for ch in 0..channels {
            let num = fd(&|cl, d| cl.color_mut()[i * channels + ch] += d);
            check(format!("g{i}.color[{ch}]"), grads.d_color[i * channels + ch], num);
        }
    }
    out
}

/// Largest per-sample gap between the tiled and naive renders, and the
/// allowed bound `n·max|c|·exp(-cut) + 1e-5`.
pub fn raster_oracle_case(seed: u64) -> (f64, f64, String) {
    let mut r = rng(seed ^ 0x5eed);
    let width = r.gen_range(1..=70);
    let height = r.gen_range(1..=70);
    let channels = r.gen_range(1..=3);
    let n = r.gen_range(0..=60);
    let mut cloud = random_pd_cloud(&mut r, n, width, height, channels);
    // A few very elongated or large Gaussians to stress the binning boxes.
    for k in 0..n.min(3) {
        let cov = &mut cloud.cov_mut()[k];
        cov.a *= r.gen_range(1.0..30.0);
        cov.b *= r.gen_range(0.0..1.0);
    }
    let cfg = RenderConfig {
        tile_size: r.gen_range(1..=24),
        deterministic: r.gen(),
        ..RenderConfig::default()
    };
    let max_c = cloud.color().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = n as f64 * max_c * (-cfg.sigma_cut).exp() + 1e-5;
    let reference = naive_render(&cloud, width, height, &cfg);
    let tiled64 = render(&cloud, width, height, &cfg);
    let tiled32 = render(&cloud.cast::<f32>(), width, height, &cfg).cast::<f64>();
    let mut worst = 0.0f64;
    for ((&a, &b), &f) in reference
        .as_slice()
        .iter()
        .zip(tiled64.as_slice())
        .zip(tiled32.as_slice())
    {
        worst = worst.max((a - b).abs()).max((a - f).abs());
    }
    let desc = format!(
        "{width}x{height}x{channels}, n={n}, tile={}",
        cfg.tile_size
    );
    (worst, bound, desc)
}

/// Central-difference check of the MSE gradient at a random point.
pub fn mse_gradient_ok(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (w, h, c) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..4));
    let x = ImagePlane::from_fn(w, h, c, |_, _, _| r.gen_range(-1.0..2.0f64));
    let t = ImagePlane::from_fn(w, h, c, |_, _, _| r.gen_range(0.0..1.0f64));
    let (_, grad) = mse_loss(&x, &t).map_err(|e| e.to_string())?;
    let step = 1e-4;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.as_mut_slice()[i] += step;
        let mut m = x.clone();
        m.as_mut_slice()[i] -= step;
        let num = (mse_loss(&p, &t).unwrap().0 - mse_loss(&m, &t).unwrap().0) / (2.0 * step);
        let a = grad.as_slice()[i];
        let diff = (a - num).abs();
        if diff > 1e-8 && diff > 1e-5 * num.abs() {
            return Err(format!("sample {i}: analytic {a} vs numeric {num}"));
        }
    }
    Ok(())
}
