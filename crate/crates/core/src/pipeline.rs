//! Two-level coarse/residual fitting.
//!
//! Level 0 fits a box-downsampled copy of the image. Its render is upsampled
//! and subtracted from the image; the residual is min-max normalized into
//! `[0, 1]` and fitted by level 1 at full resolution while level 0 stays
//! frozen. Reconstruction inverts the chain:
//! `UP(render(L0)) + denorm(render(L1))`.

use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Real};
use crate::optim::{fit_level, FitConfig};
use crate::plane::{bilinear_taps, lerp, ImagePlane};
use crate::raster::{benchmark_render, render, RenderConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LogConfig {
    pub total_points: usize,
    /// Fraction of the budget given to the coarse level.
    pub ratio: f64,
    pub down_factor: usize,
    /// Shared by both levels.
    pub fit: FitConfig,
}

impl LogConfig {
    pub fn new(total_points: usize) -> Self {
        Self {
            total_points,
            ratio: 0.125,
            down_factor: 4,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "allocation ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        if self.down_factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "down factor must be at least 2, got {}",
                self.down_factor
            )));
        }
        if self.total_points < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 points in total, got {}",
                self.total_points
            )));
        }
        self.fit.validate()
    }
}

/// One level: a cloud and the resolution it is rendered at.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub width: usize,
    pub height: usize,
    pub cloud: GaussianCloud<f32>,
}

impl Level {
    pub fn render(&self, cfg: &RenderConfig) -> ImagePlane<f32> {
        render(&self.cloud, self.width, self.height, cfg)
    }
}

/// Complete representation of one image. `coarse` is `None` for single-level
/// fits, which store `res_min = 0`, `res_max = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogModel {
    pub full_w: usize,
    pub full_h: usize,
    pub channels: usize,
    pub coarse: Option<Level>,
    pub fine: Level,
    pub res_min: f32,
    pub res_max: f32,
}

impl LogModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.full_w == 0 || self.full_h == 0 || self.channels == 0 {
            return bad("empty image dimensions".into());
        }
        if (self.fine.width, self.fine.height) != (self.full_w, self.full_h) {
            return bad(format!(
                "fine level renders at {}x{}, image is {}x{}",
                self.fine.width, self.fine.height, self.full_w, self.full_h
            ));
        }
        for level in self.levels() {
            if level.cloud.channels() != self.channels {
                return bad("level channel count differs from the image".into());
            }
            if level.width == 0 || level.height == 0 {
                return bad("level render size is empty".into());
            }
        }
        if let Some(c) = &self.coarse {
            if c.width > self.full_w || c.height > self.full_h {
                return bad("coarse level is larger than the image".into());
            }
        }
        if !(self.res_min.is_finite() && self.res_max.is_finite() && self.res_min <= self.res_max)
        {
            return bad(format!(
                "residual bounds [{}, {}] are not ordered finite values",
                self.res_min, self.res_max
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = &Level> {
        self.coarse.iter().chain(std::iter::once(&self.fine))
    }

    /// `(n0, n1)`; `n0 = 0` for single-level models.
    pub fn point_counts(&self) -> (usize, usize) {
        (
            self.coarse.as_ref().map_or(0, |c| c.cloud.len()),
            self.fine.cloud.len(),
        )
    }
}

/// `n0 = round(r·total)`, `n1 = total - n0`, each at least 1.
pub fn allocate_points(total: usize, r: f64) -> Result<(usize, usize)> {
    if total < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 points in total, got {total}"
        )));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "allocation ratio must lie in (0, 1), got {r}"
        )));
    }
    let n0 = ((r * total as f64).round() as usize).clamp(1, total - 1);
    Ok((n0, total - n0))
}

/// Box average over `factor × factor` blocks; edge blocks average only the
/// pixels that exist.
pub fn downsample<T: Real>(img: &ImagePlane<T>, factor: usize) -> Result<ImagePlane<T>> {
    if factor < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor must be at least 2, got {factor}"
        )));
    }
    let (w, h, c) = img.dims();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = ImagePlane::zeros(ow, oh, c);
    let mut acc = vec![0.0f64; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for y in ys {
                for x in xs.clone() {
                    for (a, v) in acc.iter_mut().zip(img.pixel(x, y)) {
                        *a += v.to_f64_lossy();
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(ox, oy, ch, T::lit(a / count));
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel-center alignment and edge clamping.
pub fn upsample<T: Real>(img: &ImagePlane<T>, out_w: usize, out_h: usize) -> Result<ImagePlane<T>> {
    let (w, h, c) = img.dims();
    if out_w < w || out_h < h {
        return Err(Error::InvalidArgument(format!(
            "upsample target {out_w}x{out_h} is smaller than the source {w}x{h}"
        )));
    }
    if w == 0 || h == 0 {
        return Ok(ImagePlane::zeros(out_w, out_h, c));
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let xtaps: Vec<_> = (0..out_w)
        .map(|x| bilinear_taps(T::lit((x as f64 + 0.5) * sx - 0.5), w))
        .collect();
    let mut out = ImagePlane::zeros(out_w, out_h, c);
    for y in 0..out_h {
        let (y0, y1, fy) = bilinear_taps(T::lit((y as f64 + 0.5) * sy - 0.5), h);
        for (x, &(x0, x1, fx)) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(img.get(x0, y0, ch), img.get(x1, y0, ch), fx);
                let bot = lerp(img.get(x0, y1, ch), img.get(x1, y1, ch), fx);
                out.set(x, y, ch, lerp(top, bot, fy));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T> {
    pub image: ImagePlane<T>,
    pub res_min: T,
    pub res_max: T,
}

/// Span below which a residual is treated as constant.
pub const DEGENERATE_SPAN: f64 = 1e-12;

/// Global min-max scaling into `[0, 1]` with two scalar bounds. A constant
/// residual maps to all zeros and records `res_max = res_min`.
pub fn normalize_residual<T: Real>(residual: &ImagePlane<T>) -> Result<Normalized<T>> {
    if !residual.is_finite() {
        return Err(Error::NonFiniteInput("residual"));
    }
    let (lo, hi) = residual
        .as_slice()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if residual.is_empty() {
        return Ok(Normalized {
            image: residual.clone(),
            res_min: T::zero(),
            res_max: T::zero(),
        });
    }
    let span = hi - lo;
    if span.to_f64_lossy() < DEGENERATE_SPAN {
        return Ok(Normalized {
            image: residual.map(|_| T::zero()),
            res_min: lo,
            res_max: lo,
        });
    }
    Ok(Normalized {
        image: residual.map(|v| ((v - lo) / span).max(T::zero()).min(T::one())),
        res_min: lo,
        res_max: hi,
    })
}

/// `x·(max - min) + min`.
pub fn denormalize<T: Real>(img: &ImagePlane<T>, res_min: T, res_max: T) -> ImagePlane<T> {
    let span = res_max - res_min;
    img.map(|v| v * span + res_min)
}

/// Model plus per-stage final training losses (coarse first).
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: LogModel,
    pub stage_losses: Vec<f64>,
}

fn check_image(image: &ImagePlane<f32>) -> Result<()> {
    if !image.is_finite() {
        return Err(Error::NonFiniteInput("image"));
    }
    if image.is_empty() {
        return Err(Error::InvalidArgument("image is empty".into()));
    }
    Ok(())
}

/// Two-stage fit: coarse level on `Down(I)`, then fine level on
/// `Norm(I - UP(render(L0)))` with the coarse level frozen. Both stages run
/// `cfg.fit.iters` iterations.
pub fn fit_log(image: &ImagePlane<f32>, cfg: &LogConfig) -> Result<FitReport> {
    cfg.validate()?;
    check_image(image)?;
    let (w, h, c) = image.dims();
    if w < cfg.down_factor || h < cfg.down_factor {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is smaller than the down factor {}",
            cfg.down_factor
        )));
    }
    let (n0, n1) = allocate_points(cfg.total_points, cfg.ratio)?;
    let rcfg = cfg.fit.render_config();

    let low = downsample(image, cfg.down_factor)?;
    let stage0 = fit_level(&low, n0, &cfg.fit)?;
    let coarse = Level {
        width: low.width(),
        height: low.height(),
        cloud: stage0.cloud,
    };

    let base = upsample(&coarse.render(&rcfg), w, h)?;
    let residual = image.zip_map(&base, |a, b| a - b)?;
    let norm = normalize_residual(&residual)?;
    let fine_cfg = FitConfig {
        seed: cfg.fit.seed.wrapping_add(1),
        ..cfg.fit.clone()
    };
    let stage1 = fit_level(&norm.image, n1, &fine_cfg)?;

    let model = LogModel {
        full_w: w,
        full_h: h,
        channels: c,
        coarse: Some(coarse),
        fine: Level {
            width: w,
            height: h,
            cloud: stage1.cloud,
        },
        res_min: norm.res_min,
        res_max: norm.res_max,
    };
    Ok(FitReport {
        model,
        stage_losses: vec![stage0.final_loss, stage1.final_loss],
    })
}

/// Baseline without levels: all points fit the full image directly.
pub fn fit_single(image: &ImagePlane<f32>, total_points: usize, cfg: &FitConfig) -> Result<FitReport> {
    check_image(image)?;
    let (w, h, c) = image.dims();
    let out = fit_level(image, total_points, cfg)?;
    Ok(FitReport {
        model: LogModel {
            full_w: w,
            full_h: h,
            channels: c,
            coarse: None,
            fine: Level {
                width: w,
                height: h,
                cloud: out.cloud,
            },
            res_min: 0.0,
            res_max: 1.0,
        },
        stage_losses: vec![out.final_loss],
    })
}

/// `UP(render(L0)) + denorm(render(L1))`, unclamped.
pub fn reconstruct(model: &LogModel) -> ImagePlane<f32> {
    reconstruct_with(model, &RenderConfig::default())
}

pub fn reconstruct_with(model: &LogModel, cfg: &RenderConfig) -> ImagePlane<f32> {
    let (w, h) = (model.full_w, model.full_h);
    let fine = denormalize(&model.fine.render(cfg), model.res_min, model.res_max);
    match &model.coarse {
        None => fine,
        Some(coarse) => {
            let base = upsample(&coarse.render(cfg), w, h)
                .expect("coarse level is never larger than the image");
            base.zip_map(&fine, |a, b| a + b)
                .expect("both levels render at full size")
        }
    }
}

/// Renders per second of the full reconstruction (both levels, upsample, denormalize, add).
pub fn benchmark_model(model: &LogModel, repeats: usize) -> Result<f64> {
    benchmark_render(repeats, || reconstruct(model))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR with peak 1. `reconstructed` is clamped to `[0, 1]` first; identical
/// images give `f64::INFINITY`.
pub fn psnr<T: Real>(reconstructed: &ImagePlane<T>, reference: &ImagePlane<T>) -> Result<f64> {
    reconstructed.same_dims(reference)?;
    let n = reconstructed.len().max(1) as f64;
    let sum: f64 = reconstructed
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(&a, &b)| {
            let a = a.to_f64_lossy().clamp(0.0, 1.0);
            let d = a - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sum / n))
}
