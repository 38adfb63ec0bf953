//! Tile-based accumulated-summation rasterizer.
//!
//! Each pixel receives `Σ color_n · exp(-σ_n)` over the Gaussians binned to its
//! tile whose `σ` lies in `[0, sigma_cut]`. Gaussians that fail the
//! positive-definite check are dropped before binning and contribute nothing,
//! to the image or to the gradients.
//!
//! Work is split per tile. Within a pixel, contributions are accumulated in
//! ascending Gaussian index, so the forward pass is bit-reproducible. The
//! backward pass produces per-tile partial gradients which are either reduced
//! in tile order (deterministic) or folded per worker thread (fast).

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    invert_cov, is_positive_definite, quad_form, CovUT, GaussianCloud, Real, EPS_DET,
};
use crate::plane::ImagePlane;

/// `exp(-9.21) < 1e-4`.
pub const DEFAULT_SIGMA_CUT: f64 = 9.21;
pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Contributions with `σ > sigma_cut` are skipped. May be `f64::INFINITY`.
    pub sigma_cut: f64,
    /// Threshold handed to [`is_positive_definite`] by the render filter.
    pub pd_eps: f64,
    /// Reduce backward partials in fixed tile order.
    pub deterministic: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            sigma_cut: DEFAULT_SIGMA_CUT,
            pd_eps: EPS_DET,
            deterministic: true,
        }
    }
}

/// Per-tile Gaussian index lists in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl TileGrid {
    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Gaussians binned to tile `(tx, ty)`, ascending.
    pub fn bin(&self, tx: usize, ty: usize) -> &[u32] {
        self.bin_by_index(ty * self.tiles_x + tx)
    }

    pub fn bin_by_index(&self, t: usize) -> &[u32] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Total number of (tile, Gaussian) pairs.
    pub fn pairs(&self) -> usize {
        self.indices.len()
    }
}

/// Gradients of a scalar loss with respect to every cloud parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub d_mu: Vec<[T; 2]>,
    pub d_cov: Vec<CovUT<T>>,
    /// Flat, `channels` entries per Gaussian.
    pub d_color: Vec<T>,
    pub channels: usize,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(n: usize, channels: usize) -> Self {
        Self {
            d_mu: vec![[T::zero(); 2]; n],
            d_cov: vec![CovUT::default(); n],
            d_color: vec![T::zero(); n * channels],
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.d_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }

    /// Adds a packed `[mu(2), cov(3), color(C)]` record into Gaussian `i`.
    #[inline]
    fn add_packed(&mut self, i: usize, rec: &[T]) {
        let c = self.channels;
        let m = &mut self.d_mu[i];
        m[0] = m[0] + rec[0];
        m[1] = m[1] + rec[1];
        let k = &mut self.d_cov[i];
        k.a = k.a + rec[2];
        k.b = k.b + rec[3];
        k.c = k.c + rec[4];
        for (d, &s) in self.d_color[i * c..(i + 1) * c].iter_mut().zip(&rec[5..]) {
            *d = *d + s;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for i in 0..self.len() {
            let m = other.d_mu[i];
            let k = other.d_cov[i];
            let mut rec = vec![m[0], m[1], k.a, k.b, k.c];
            rec.extend_from_slice(&other.d_color[i * self.channels..(i + 1) * self.channels]);
            self.add_packed(i, &rec);
        }
        self
    }
}

/// Per-Gaussian data resolved once per pass.
#[derive(Debug, Clone, Copy)]
struct Prepared<T> {
    mu: [T; 2],
    inv: CovUT<T>,
    /// Inclusive pixel-index box of centers inside the cutoff ellipse's bounding box.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Binning half-extents along x and y: `R·sqrt(Σ₀₀)`, `R·sqrt(Σ₁₁)`, `R = sqrt(2·sigma_cut)`.
fn half_extents<T: Real>(cov: CovUT<T>, sigma_cut: f64) -> (f64, f64) {
    let r = (2.0 * sigma_cut).sqrt();
    (r * cov.a.to_f64_lossy().sqrt(), r * cov.c.to_f64_lossy().sqrt())
}

fn prepare<T: Real>(
    cloud: &GaussianCloud<T>,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Vec<Option<Prepared<T>>> {
    let pd_eps = T::lit(cfg.pd_eps);
    (0..cloud.len())
        .map(|i| {
            let cov = cloud.cov()[i];
            let mu = cloud.mu()[i];
            if width == 0 || height == 0 || !is_positive_definite(cov, pd_eps) {
                return None;
            }
            if !(mu[0].is_finite() && mu[1].is_finite()) {
                return None;
            }
            let (inv, _) = invert_cov(cov).ok()?;
            let (ex, ey) = half_extents(cov, cfg.sigma_cut);
            let (mx, my) = (mu[0].to_f64_lossy(), mu[1].to_f64_lossy());
            // Small slack so boundary pixels are decided by the σ test itself.
            let slack = 1e-3;
            let x0 = (mx - ex - 0.5 - slack).ceil().max(0.0);
            let x1 = (mx + ex - 0.5 + slack).floor().min((width - 1) as f64);
            let y0 = (my - ey - 0.5 - slack).ceil().max(0.0);
            let y1 = (my + ey - 0.5 + slack).floor().min((height - 1) as f64);
            if !(x0 <= x1 && y0 <= y1) {
                return None;
            }
            Some(Prepared {
                mu,
                inv,
                x0: x0 as usize,
                x1: x1 as usize,
                y0: y0 as usize,
                y1: y1 as usize,
            })
        })
        .collect()
}

fn tile_range(lo: f64, hi: f64, tile: usize, count: usize) -> Option<(usize, usize)> {
    let t = tile as f64;
    let first = (lo / t).floor();
    let last = (hi / t).floor();
    if !(last >= 0.0 && first <= (count - 1) as f64) {
        return None;
    }
    Some((first.max(0.0) as usize, last.min((count - 1) as f64) as usize))
}

fn build_grid<T: Real>(
    cloud: &GaussianCloud<T>,
    keep: &[bool],
    width: usize,
    height: usize,
    tile_size: usize,
    sigma_cut: f64,
) -> TileGrid {
    let tile_size = tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let ranges: Vec<Option<((usize, usize), (usize, usize))>> = (0..cloud.len())
        .map(|i| {
            if !keep[i] || tiles_x == 0 || tiles_y == 0 {
                return None;
            }
            let mu = cloud.mu()[i];
            let (ex, ey) = half_extents(cloud.cov()[i], sigma_cut);
            let (mx, my) = (mu[0].to_f64_lossy(), mu[1].to_f64_lossy());
            if mx + ex < 0.0 || my + ey < 0.0 || mx - ex > width as f64 || my - ey > height as f64 {
                return None;
            }
            let rx = tile_range(mx - ex, mx + ex, tile_size, tiles_x)?;
            let ry = tile_range(my - ey, my + ey, tile_size, tiles_y)?;
            Some((rx, ry))
        })
        .collect();

    let num_tiles = tiles_x * tiles_y;
    let mut counts = vec![0usize; num_tiles + 1];
    for ((x0, x1), (y0, y1)) in ranges.iter().flatten() {
        for ty in *y0..=*y1 {
            for tx in *x0..=*x1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 0..num_tiles {
        counts[t + 1] += counts[t];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let mut indices = vec![0u32; offsets[num_tiles]];
    for (i, r) in ranges.iter().enumerate() {
        if let Some(((x0, x1), (y0, y1))) = r {
            for ty in *y0..=*y1 {
                for tx in *x0..=*x1 {
                    let t = ty * tiles_x + tx;
                    indices[cursor[t]] = i as u32;
                    cursor[t] += 1;
                }
            }
        }
    }
    TileGrid {
        tile_size,
        tiles_x,
        tiles_y,
        offsets,
        indices,
    }
}

/// Assigns every positive-definite Gaussian to each tile overlapped by the
/// axis-aligned box of its cutoff ellipse `{p : σ(p) ≤ sigma_cut}`.
pub fn bin_gaussians<T: Real>(
    cloud: &GaussianCloud<T>,
    width: usize,
    height: usize,
    tile_size: usize,
    sigma_cut: f64,
) -> TileGrid {
    let pd_eps = T::lit(RenderConfig::default().pd_eps);
    let keep: Vec<bool> = cloud
        .cov()
        .iter()
        .map(|&c| is_positive_definite(c, pd_eps))
        .collect();
    build_grid(cloud, &keep, width, height, tile_size, sigma_cut)
}

/// Binned, prepared state for one frame. Forward and backward passes built
/// from the same frame make identical filter decisions.
pub struct Frame<'a, T> {
    cloud: &'a GaussianCloud<T>,
    width: usize,
    height: usize,
    cfg: RenderConfig,
    prepared: Vec<Option<Prepared<T>>>,
    grid: TileGrid,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` covered by a tile.
#[derive(Clone, Copy)]
struct TileRect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Per-row terms of `σ` for one Gaussian.
struct Row<T> {
    dy: T,
    /// `2·b·dy` and `c·dy²`.
    k1: T,
    k0: T,
}

impl<T: Real> Row<T> {
    #[inline(always)]
    fn new(p: &Prepared<T>, y: usize) -> Self {
        let dy = T::lit(y as f64) + T::lit(0.5) - p.mu[1];
        Self {
            dy,
            k1: T::lit(2.0) * p.inv.b * dy,
            k0: p.inv.c * dy * dy,
        }
    }
}

/// Pixels per row chunk.
const LANES: usize = 16;

fn lane_offsets<T: Real>() -> [T; LANES] {
    std::array::from_fn(|j| T::lit(j as f64))
}

/// In fixed lane order.
#[inline]
fn lane_sum<T: Real>(v: &[T; LANES]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x)
}

/// `dx` and `exp(-σ)` for one row chunk. `e` is exactly zero past the chunk
/// length and where `σ` exceeds the cutoff.
struct Lanes<T> {
    dx: [T; LANES],
    e: [T; LANES],
}

impl<T: Real> Default for Lanes<T> {
    fn default() -> Self {
        Self {
            dx: [T::zero(); LANES],
            e: [T::zero(); LANES],
        }
    }
}

impl<T: Real> Lanes<T> {
    #[inline(always)]
    fn fill(&mut self, p: &Prepared<T>, row: &Row<T>, x: usize, n: usize, cut: T, offs: &[T; LANES]) {
        let half = T::lit(0.5);
        let dx0 = T::lit(x as f64) + half - p.mu[0];
        let (ia, k1, k0) = (p.inv.a, row.k1, row.k0);
        for j in 0..LANES {
            let dx = dx0 + offs[j];
            // PD ⇒ σ ≥ 0; clamp rounding noise at the center.
            let s = (half * ((ia * dx + k1) * dx + k0)).max(T::zero());
            let e = s.exp_neg();
            self.dx[j] = dx;
            self.e[j] = if s <= cut && j < n { e } else { T::zero() };
        }
    }
}

impl<'a, T: Real> Frame<'a, T> {
    pub fn new(cloud: &'a GaussianCloud<T>, width: usize, height: usize, cfg: &RenderConfig) -> Self {
        let prepared = prepare(cloud, width, height, cfg);
        let keep: Vec<bool> = prepared.iter().map(Option::is_some).collect();
        let grid = build_grid(cloud, &keep, width, height, cfg.tile_size, cfg.sigma_cut);
        Self {
            cloud,
            width,
            height,
            cfg: *cfg,
            prepared,
            grid,
        }
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    fn rect(&self, t: usize) -> TileRect {
        let ts = self.grid.tile_size;
        let (tx, ty) = (t % self.grid.tiles_x, t / self.grid.tiles_x);
        TileRect {
            x0: tx * ts,
            x1: ((tx + 1) * ts).min(self.width),
            y0: ty * ts,
            y1: ((ty + 1) * ts).min(self.height),
        }
    }

    /// Pixel ranges of `rect` covered by `p`'s box.
    #[inline]
    fn spans(p: &Prepared<T>, rect: TileRect) -> (Range<usize>, Range<usize>) {
        (
            p.x0.max(rect.x0)..(p.x1 + 1).min(rect.x1),
            p.y0.max(rect.y0)..(p.y1 + 1).min(rect.y1),
        )
    }

    /// Planar tile buffer: `channels` planes of `tile_h` rows, each row
    /// `tile_w + LANES` long so chunks never straddle the end.
    fn render_tile(&self, t: usize) -> Vec<T> {
        let c = self.cloud.channels();
        let rect = self.rect(t);
        let stride_x = rect.x1 - rect.x0 + LANES;
        let plane = stride_x * (rect.y1 - rect.y0);
        let mut buf = vec![T::zero(); plane * c];
        let cut = T::lit(self.cfg.sigma_cut);
        let offs = lane_offsets::<T>();
        let mut lanes = Lanes::default();
        for &gi in self.grid.bin_by_index(t) {
            let gi = gi as usize;
            let Some(p) = &self.prepared[gi] else { continue };
            let color = self.cloud.color_of(gi);
            let (xs, ys) = Self::spans(p, rect);
            for y in ys {
                let row = Row::new(p, y);
                let o = (y - rect.y0) * stride_x;
                for x in xs.clone().step_by(LANES) {
                    lanes.fill(p, &row, x, LANES.min(xs.end - x), cut, &offs);
                    for (ch, &col) in color.iter().enumerate() {
                        let at = ch * plane + o + x - rect.x0;
                        let dst: &mut [T; LANES] = (&mut buf[at..at + LANES]).try_into().unwrap();
                        for (d, &e) in dst.iter_mut().zip(&lanes.e) {
                            *d = *d + col * e;
                        }
                    }
                }
            }
        }
        buf
    }

    pub fn render(&self) -> ImagePlane<T> {
        let c = self.cloud.channels();
        let tiles: Vec<Vec<T>> = (0..self.grid.num_tiles())
            .into_par_iter()
            .map(|t| self.render_tile(t))
            .collect();
        let mut out = ImagePlane::zeros(self.width, self.height, c);
        let row_len = self.width * c;
        let data = out.as_mut_slice();
        for (t, buf) in tiles.iter().enumerate() {
            let rect = self.rect(t);
            let tw = rect.x1 - rect.x0;
            let stride_x = tw + LANES;
            let plane = stride_x * (rect.y1 - rect.y0);
            for (r, y) in (rect.y0..rect.y1).enumerate() {
                let dst = &mut data[y * row_len + rect.x0 * c..][..tw * c];
                for (ch, src) in buf.chunks_exact(plane).enumerate() {
                    for (i, &v) in src[r * stride_x..r * stride_x + tw].iter().enumerate() {
                        dst[i * c + ch] = v;
                    }
                }
            }
        }
        out
    }

    /// Packed `[mu(2), cov(3), color(C)]` partials for each entry of the
    /// tile's bin. `d_planar` holds the upstream gradient as channel planes
    /// with rows `width + LANES` long.
    fn backward_tile(&self, t: usize, d_planar: &[T]) -> Vec<T> {
        let c = self.cloud.channels();
        let rect = self.rect(t);
        let stride = 5 + c;
        let stride_x = self.width + LANES;
        let plane = stride_x * self.height;
        let bin = self.grid.bin_by_index(t);
        let mut out = vec![T::zero(); bin.len() * stride];
        let half = T::lit(0.5);
        let cut = T::lit(self.cfg.sigma_cut);
        let offs = lane_offsets::<T>();
        let zero = [T::zero(); LANES];
        let mut lanes = Lanes::default();
        let mut gcol = vec![zero; c];
        for (k, &gi) in bin.iter().enumerate() {
            let gi = gi as usize;
            let Some(p) = &self.prepared[gi] else { continue };
            let color = self.cloud.color_of(gi);
            let inv = p.inv;
            let (mut gx, mut gy, mut ga, mut gb, mut gc) = (zero, zero, zero, zero, zero);
            gcol.fill(zero);
            let (xs, ys) = Self::spans(p, rect);
            for y in ys {
                let row = Row::new(p, y);
                let (bdy, cdy) = (inv.b * row.dy, inv.c * row.dy);
                for x in xs.clone().step_by(LANES) {
                    let n = LANES.min(xs.end - x);
                    lanes.fill(p, &row, x, n, cut, &offs);
                    let mut w = zero;
                    for ch in 0..c {
                        let o = ch * plane + y * stride_x + x;
                        let d: &[T; LANES] = d_planar[o..o + LANES].try_into().unwrap();
                        let (g, col) = (&mut gcol[ch], color[ch]);
                        for j in 0..LANES {
                            w[j] = w[j] + d[j] * col;
                            g[j] = g[j] + d[j] * lanes.e[j];
                        }
                    }
                    for j in 0..LANES {
                        let wj = w[j] * lanes.e[j];
                        let u0 = inv.a * lanes.dx[j] + bdy;
                        let u1 = inv.b * lanes.dx[j] + cdy;
                        let wu0 = wj * u0;
                        gx[j] = gx[j] + wu0;
                        gy[j] = gy[j] + wj * u1;
                        ga[j] = ga[j] + half * wu0 * u0;
                        gb[j] = gb[j] + wu0 * u1;
                        gc[j] = gc[j] + half * wj * u1 * u1;
                    }
                }
            }
            let rec = &mut out[k * stride..(k + 1) * stride];
            for (r, lane) in rec.iter_mut().zip([gx, gy, ga, gb, gc].iter().chain(gcol.iter())) {
                *r = lane_sum(lane);
            }
        }
        out
    }

    /// Gradients of `Σ d_image · render` with respect to the cloud parameters.
    pub fn backward(&self, d_image: &ImagePlane<T>) -> Result<ParamGrads<T>> {
        let c = self.cloud.channels();
        if d_image.dims() != (self.width, self.height, c) {
            return Err(Error::dims(
                format!("{}x{}x{}", self.width, self.height, c),
                format!(
                    "{}x{}x{}",
                    d_image.width(),
                    d_image.height(),
                    d_image.channels()
                ),
            ));
        }
        let n = self.cloud.len();
        let stride = 5 + c;
        let tiles = 0..self.grid.num_tiles();
        // Channel planes with rows padded by a lane block, so kernels read
        // fixed-width chunks without bounds juggling.
        let stride_x = self.width + LANES;
        let plane = stride_x * self.height;
        let mut d_planar = vec![T::zero(); plane * c];
        for (i, px) in d_image.as_slice().chunks_exact(c).enumerate() {
            let o = (i / self.width) * stride_x + i % self.width;
            for (ch, &v) in px.iter().enumerate() {
                d_planar[ch * plane + o] = v;
            }
        }
        let d_image = &d_planar[..];
        if self.cfg.deterministic {
            let partials: Vec<Vec<T>> = tiles
                .into_par_iter()
                .map(|t| self.backward_tile(t, d_image))
                .collect();
            let mut grads = ParamGrads::zeros(n, c);
            for (t, part) in partials.iter().enumerate() {
                for (k, &gi) in self.grid.bin_by_index(t).iter().enumerate() {
                    grads.add_packed(gi as usize, &part[k * stride..(k + 1) * stride]);
                }
            }
            Ok(grads)
        } else {
            Ok(tiles
                .into_par_iter()
                .fold(
                    || ParamGrads::zeros(n, c),
                    |mut acc, t| {
                        let part = self.backward_tile(t, d_image);
                        for (k, &gi) in self.grid.bin_by_index(t).iter().enumerate() {
                            acc.add_packed(gi as usize, &part[k * stride..(k + 1) * stride]);
                        }
                        acc
                    },
                )
                .reduce(|| ParamGrads::zeros(n, c), ParamGrads::merge))
        }
    }
}

/// Tiled forward render. Output is not clamped.
pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> ImagePlane<T> {
    Frame::new(cloud, width, height, cfg).render()
}

/// Backward pass paired with [`render`]; the image size is taken from `d_image`.
pub fn render_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    cfg: &RenderConfig,
    d_image: &ImagePlane<T>,
) -> Result<ParamGrads<T>> {
    if d_image.channels() != cloud.channels() {
        return Err(Error::dims(
            format!("{} channels", cloud.channels()),
            d_image.channels(),
        ));
    }
    Frame::new(cloud, d_image.width(), d_image.height(), cfg).backward(d_image)
}

/// Reference renderer: every pixel against every Gaussian, no tiles and no
/// cutoff, with the per-pixel `σ > 0` filter. Positive-definite Gaussians also
/// keep `σ = 0` (their own center). Non-invertible covariances are skipped.
pub fn naive_render<T: Real>(
    cloud: &GaussianCloud<T>,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> ImagePlane<T> {
    let c = cloud.channels();
    let pd_eps = T::lit(cfg.pd_eps);
    let inverses: Vec<Option<(CovUT<T>, bool)>> = cloud
        .cov()
        .iter()
        .map(|&cov| {
            invert_cov(cov)
                .ok()
                .map(|(inv, _)| (inv, is_positive_definite(cov, pd_eps)))
        })
        .collect();
    let mut out = ImagePlane::zeros(width, height, c);
    let half = T::lit(0.5);
    for y in 0..height {
        for x in 0..width {
            let px = [T::lit(x as f64) + half, T::lit(y as f64) + half];
            for (i, entry) in inverses.iter().enumerate() {
                let Some((inv, pd)) = entry else { continue };
                let mu = cloud.mu()[i];
                let s = quad_form(*inv, px[0] - mu[0], px[1] - mu[1]);
                let keep = *pd || s > T::zero();
                if !keep {
                    continue;
                }
                let e = (-s.max(T::zero())).exp();
                for (ch, &col) in cloud.color_of(i).iter().enumerate() {
                    let v = out.get(x, y, ch) + col * e;
                    out.set(x, y, ch, v);
                }
            }
        }
    }
    out
}

/// Median renders per second over `repeats` timed calls after one untimed warm-up.
pub fn benchmark_render<R>(repeats: usize, mut render_once: impl FnMut() -> R) -> Result<f64> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs at least 3 repeats, got {repeats}"
        )));
    }
    std::hint::black_box(render_once());
    let mut secs: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(render_once());
            start.elapsed().as_secs_f64()
        })
        .collect();
    secs.sort_by(f64::total_cmp);
    let median = if repeats % 2 == 1 {
        secs[repeats / 2]
    } else {
        0.5 * (secs[repeats / 2 - 1] + secs[repeats / 2])
    };
    Ok(1.0 / median.max(1e-12))
}
