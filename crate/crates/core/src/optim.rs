//! MSE loss, Adam, initialization, and the single-level fit loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{CovUT, Gaussian2D, GaussianCloud, Real, EPS_PSD};
use crate::plane::ImagePlane;
use crate::raster::{Frame, ParamGrads, RenderConfig, DEFAULT_SIGMA_CUT, DEFAULT_TILE_SIZE};

/// How initial colors are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorInit {
    /// Target sampled at `μ`, divided by the expected overlap count.
    #[default]
    Sampled,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub sigma_cut: f64,
    pub eps_psd: f64,
    pub tile_size: usize,
    pub seed: u64,
    pub init_sigma_scale: f64,
    pub color_init: ColorInit,
    pub deterministic: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 30_000,
            lr: 0.018,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sigma_cut: DEFAULT_SIGMA_CUT,
            eps_psd: EPS_PSD,
            tile_size: DEFAULT_TILE_SIZE,
            seed: 0,
            init_sigma_scale: 1.0,
            color_init: ColorInit::Sampled,
            deterministic: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.iters < 1 {
            return bad("iters must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.sigma_cut > 0.0) {
            return bad("sigma_cut must be positive".into());
        }
        if !(self.eps_psd > 0.0 && self.eps_psd < 1.0) {
            return bad("eps_psd must lie in (0, 1)".into());
        }
        if self.tile_size == 0 {
            return bad("tile_size must be at least 1".into());
        }
        if !(self.init_sigma_scale > 0.0) {
            return bad("init_sigma_scale must be positive".into());
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            tile_size: self.tile_size,
            sigma_cut: self.sigma_cut,
            deterministic: self.deterministic,
            ..RenderConfig::default()
        }
    }
}

/// Mean squared error over all samples and its gradient `2(r - t)/N`.
pub fn mse_loss<T: Real>(
    rendered: &ImagePlane<T>,
    target: &ImagePlane<T>,
) -> Result<(f64, ImagePlane<T>)> {
    rendered.same_dims(target)?;
    let n = rendered.len().max(1) as f64;
    let scale = T::lit(2.0 / n);
    let mut sum = 0.0f64;
    let grad = rendered.zip_map(target, |r, t| {
        let d = r - t;
        sum += d.to_f64_lossy() * d.to_f64_lossy();
        d * scale
    })?;
    Ok((sum / n, grad))
}

/// First/second moment buffers laid out as `[positions (2n), covariances (3n), colors (C·n)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn for_cloud(cloud: &GaussianCloud<T>) -> Self {
        Self::new(cloud.len() * (5 + cloud.channels()))
    }
}

struct AdamCoefs<T> {
    beta1: T,
    beta2: T,
    step: T,
    v_corr: T,
    eps: T,
}

impl<T: Real> AdamCoefs<T> {
    fn new(cfg: &FitConfig, t: u64) -> Self {
        let t = t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        Self {
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            step: T::lit(cfg.lr / bc1),
            v_corr: T::lit(1.0 / bc2),
            eps: T::lit(cfg.adam_eps),
        }
    }

    #[inline]
    fn apply<'a>(
        &self,
        params: impl Iterator<Item = &'a mut T>,
        grads: impl Iterator<Item = T>,
        m: &mut [T],
        v: &mut [T],
    ) {
        let one = T::one();
        for (((p, g), m), v) in params.zip(grads).zip(m).zip(v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            *p = *p - self.step * *m / ((*v * self.v_corr).sqrt() + self.eps);
        }
    }
}

fn check_finite<T: Real>(group: &'static str, vals: impl IntoIterator<Item = T>) -> Result<()> {
    if vals.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { group })
    }
}

/// Bias-corrected Adam on a flat parameter vector.
pub fn adam_step_flat<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &FitConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dims(params.len(), grads.len().max(state.m.len())));
    }
    check_finite("params", grads.iter().copied())?;
    state.t += 1;
    let k = AdamCoefs::new(cfg, state.t);
    k.apply(params.iter_mut(), grads.iter().copied(), &mut state.m, &mut state.v);
    Ok(())
}

/// One Adam update of every cloud parameter with a single shared learning
/// rate. A non-finite gradient aborts the step before anything is modified.
pub fn adam_step<T: Real>(
    cloud: &mut GaussianCloud<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &FitConfig,
) -> Result<()> {
    let n = cloud.len();
    let c = cloud.channels();
    if grads.len() != n || grads.channels != c || grads.d_color.len() != n * c {
        return Err(Error::dims(
            format!("gradients for {n} Gaussians x {c} channels"),
            format!("{} x {}", grads.len(), grads.channels),
        ));
    }
    if state.m.len() != n * (5 + c) || state.v.len() != state.m.len() {
        return Err(Error::dims(n * (5 + c), state.m.len()));
    }
    check_finite("position", grads.d_mu.iter().flatten().copied())?;
    check_finite(
        "covariance",
        grads.d_cov.iter().flat_map(|k| [k.a, k.b, k.c]),
    )?;
    check_finite("color", grads.d_color.iter().copied())?;

    state.t += 1;
    let k = AdamCoefs::new(cfg, state.t);
    let (m_mu, m_rest) = state.m.split_at_mut(2 * n);
    let (m_cov, m_col) = m_rest.split_at_mut(3 * n);
    let (v_mu, v_rest) = state.v.split_at_mut(2 * n);
    let (v_cov, v_col) = v_rest.split_at_mut(3 * n);

    k.apply(
        cloud.mu_mut().iter_mut().flatten(),
        grads.d_mu.iter().flatten().copied(),
        m_mu,
        v_mu,
    );
    k.apply(
        cloud
            .cov_mut()
            .iter_mut()
            .flat_map(|k| [&mut k.a, &mut k.b, &mut k.c]),
        grads.d_cov.iter().flat_map(|k| [k.a, k.b, k.c]),
        m_cov,
        v_cov,
    );
    k.apply(
        cloud.color_mut().iter_mut(),
        grads.d_color.iter().copied(),
        m_col,
        v_col,
    );
    Ok(())
}

/// Isotropic std-dev giving each of `n` points an equal share of the image area.
pub fn init_scale(n: usize, width: usize, height: usize, cfg: &FitConfig) -> f64 {
    cfg.init_sigma_scale * ((width * height) as f64 / n as f64).sqrt()
}

/// Seeded random initialization: uniform positions, isotropic covariance
/// `s²·I`, and colors sampled from the target divided by the expected number
/// of overlapping cutoff ellipses (at least 1).
pub fn init_cloud<T: Real>(
    n: usize,
    target: &ImagePlane<T>,
    seed: u64,
    cfg: &FitConfig,
) -> Result<GaussianCloud<T>> {
    if n < 1 {
        return Err(Error::InvalidArgument("point count must be at least 1".into()));
    }
    let (w, h, c) = target.dims();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("target image is empty".into()));
    }
    let s = init_scale(n, w, h, cfg);
    let area = (w * h) as f64;
    let overlap = (std::f64::consts::PI * 2.0 * cfg.sigma_cut * s * s * n as f64 / area).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(c, n);
    let cov = CovUT::isotropic(T::lit(s * s));
    for _ in 0..n {
        let mu = [
            T::lit(rng.gen::<f64>() * w as f64),
            T::lit(rng.gen::<f64>() * h as f64),
        ];
        let color = match cfg.color_init {
            ColorInit::Sampled => (0..c)
                .map(|ch| target.sample_bilinear(mu[0], mu[1], ch) / T::lit(overlap))
                .collect(),
            ColorInit::Zero => vec![T::zero(); c],
        };
        cloud.push(Gaussian2D::new(mu, cov, color))?;
    }
    Ok(cloud)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub cloud: GaussianCloud<f32>,
    /// Loss of the render at the start of each iteration.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

/// Optimizes `cloud` against `target` for `cfg.iters` full-image steps:
/// render, MSE, backward, Adam, covariance repair.
pub fn fit_cloud(
    mut cloud: GaussianCloud<f32>,
    target: &ImagePlane<f32>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if !target.is_finite() {
        return Err(Error::NonFiniteInput("fit target"));
    }
    if cloud.channels() != target.channels() {
        return Err(Error::dims(target.channels(), cloud.channels()));
    }
    let (w, h) = (target.width(), target.height());
    let rcfg = cfg.render_config();
    let eps_psd = cfg.eps_psd as f32;
    cloud.repair(eps_psd);
    let mut state = AdamState::for_cloud(&cloud);
    let mut losses = Vec::with_capacity(cfg.iters);
    for iteration in 0..cfg.iters {
        let grads = {
            let frame = Frame::new(&cloud, w, h, &rcfg);
            let (loss, d_image) = mse_loss(&frame.render(), target)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            losses.push(loss);
            frame.backward(&d_image)?
        };
        adam_step(&mut cloud, &grads, &mut state, cfg)?;
        cloud.repair(eps_psd);
    }
    let (final_loss, _) = mse_loss(&crate::raster::render(&cloud, w, h, &rcfg), target)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.iters,
        });
    }
    Ok(FitOutcome {
        cloud,
        losses,
        final_loss,
    })
}

/// Initializes `n` points from `cfg.seed` and fits them to `target`.
pub fn fit_level(target: &ImagePlane<f32>, n: usize, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let cloud = init_cloud(n, target, cfg.seed, cfg)?;
    fit_cloud(cloud, target, cfg)
}
