//! Part detector learning: whitened clustering, LDA filters, latent
//! placement refinement, and SVM retraining with hard negatives.
//!
//! A part is a small bank of linear filters over the HOG descriptor plus a
//! 2x2 covariance describing where the detector fires relative to the true
//! landmark. Training per landmark:
//!
//! 1. cluster the positive patches in whitened feature space into up to m
//!    appearance components,
//! 2. give each component the closed-form LDA filter against the shared
//!    background statistics,
//! 3. alternate between re-placing every training patch inside a small disc
//!    around its annotation and refitting the filters (latent refinement),
//! 4. retrain each filter as a linear SVM with hard-negative mining,
//! 5. estimate the residual placement covariance from the final offsets.
//!
//! Filters are biasless: every consumer ranks or compares scores, none
//! thresholds them, so a constant shift is irrelevant.

pub mod features;

use std::collections::HashSet;
use std::path::Path;

use base64::Engine;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::selection::Detection;
use crate::{Error, Result};
pub use features::{
    extract_feature, extract_feature_padded, mirror_feature, FeatureConfig, GrayImage,
};

/// Background statistics shared by every part: pooled feature covariance
/// (ridge-regularized) and the mean background feature.
#[derive(Debug, Clone)]
pub struct WhiteningModel {
    mean_bg: DVector<f64>,
    sigma: DMatrix<f64>,
    inv: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    epsilon: f64,
}

impl WhiteningModel {
    /// Pools positives and negatives into one covariance estimate with an
    /// `epsilon * I` ridge (default `1e-2 * trace / d`), so zero-variance
    /// dimensions and sample counts below the feature dimension still give
    /// an SPD matrix. The background mean comes from the negatives alone.
    pub fn fit(
        positives: &[DVector<f64>],
        negatives: &[DVector<f64>],
        epsilon: Option<f64>,
    ) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::InvalidInput(
                "whitening needs at least one background sample".into(),
            ));
        }
        let pooled: Vec<&DVector<f64>> = positives.iter().chain(negatives.iter()).collect();
        let n = pooled.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "whitening needs at least two pooled samples, got {n}"
            )));
        }
        let d = pooled[0].len();
        if pooled.iter().any(|f| f.len() != d) {
            return Err(Error::DimensionMismatch("mixed feature lengths".into()));
        }
        if n < d {
            // A rank-deficient estimate leaves the ridge in charge of d - n
            // directions and the LDA filter inherits sampling noise along
            // them; localization gets visibly unreliable.
            log::warn!(
                "whitening fit from {n} samples in dimension {d}; \
                 covariance is singular, consider more negatives"
            );
        }
        let mut mean = DVector::zeros(d);
        for f in &pooled {
            mean += *f;
        }
        mean /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        for f in &pooled {
            let c = *f - &mean;
            sigma.ger(1.0 / (n as f64 - 1.0), &c, &c, 1.0);
        }
        let eps = epsilon
            .unwrap_or_else(|| 1e-2 * sigma.trace() / d as f64)
            .max(1e-12);
        for i in 0..d {
            sigma[(i, i)] += eps;
        }
        let mut bg = DVector::zeros(d);
        for f in negatives {
            bg += f;
        }
        bg /= negatives.len() as f64;
        Self::from_parts(bg, sigma, eps)
    }

    /// Rebuilds the derived inverse and inverse square root from the stored
    /// covariance; used by [`Self::fit`] and deserialization.
    pub fn from_parts(mean_bg: DVector<f64>, sigma: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let d = mean_bg.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} covariance for dimension {d}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let inv = sigma
            .clone()
            .cholesky()
            .ok_or(Error::CovarianceNotSpd)?
            .inverse();
        let eig = sigma.clone().symmetric_eigen();
        // Eigenvalues are >= epsilon up to roundoff; clamp so the root
        // never takes sqrt of a tiny negative.
        let scaled = DMatrix::from_fn(d, d, |i, j| {
            eig.eigenvectors[(i, j)] / eig.eigenvalues[j].max(1e-300).sqrt()
        });
        let inv_sqrt = &scaled * eig.eigenvectors.transpose();
        Ok(Self { mean_bg, sigma, inv, inv_sqrt, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.mean_bg.len()
    }

    pub fn mean_bg(&self) -> &DVector<f64> {
        &self.mean_bg
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Maps a raw feature into the whitened space where the pooled
    /// covariance is the identity.
    pub fn whiten(&self, feature: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt * (feature - &self.mean_bg)
    }

    /// Closed-form LDA filter for one appearance component: the whitened
    /// difference between the component mean and the background mean,
    /// mapped back so it scores raw features directly.
    pub fn lda_filter(&self, positives: &[DVector<f64>]) -> Result<DVector<f64>> {
        if positives.is_empty() {
            return Err(Error::InvalidInput("LDA filter from zero positives".into()));
        }
        let mut mean = DVector::zeros(self.dim());
        for f in positives {
            if f.len() != self.dim() {
                return Err(Error::DimensionMismatch("feature length".into()));
            }
            mean += f;
        }
        mean /= positives.len() as f64;
        Ok(&self.inv * (mean - &self.mean_bg))
    }
}

/// K-means++ in whitened space. Returns one component index per feature.
/// Requests for more components than samples are clamped with a warning;
/// ties and restarts are fully deterministic in `seed`.
pub fn cluster_components(
    whitening: &WhiteningModel,
    features: &[DVector<f64>],
    components: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if features.is_empty() || components == 0 {
        return Err(Error::InvalidInput("clustering needs samples and components".into()));
    }
    let m = components.min(features.len());
    if m < components {
        log::warn!("only {} samples for {} components; clamping", features.len(), components);
    }
    let points: Vec<DVector<f64>> = features.iter().map(|f| whitening.whiten(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..10 {
        let (inertia, assign) = lloyd_once(&points, m, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.unwrap().1)
}

fn lloyd_once(points: &[DVector<f64>], m: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    // K-means++ seeding: the next center is drawn proportionally to the
    // squared distance to the nearest existing center.
    let mut centers: Vec<DVector<f64>> = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with a center; any unused point works.
            (0..n).find(|&i| d2[i] > 0.0).unwrap_or(centers.len() % n)
        } else {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc > r {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - centers.last().unwrap()).norm_squared());
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let dist = (p - center).norm_squared();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        let mut counts = vec![0usize; m];
        let mut sums = vec![DVector::zeros(points[0].len()); m];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            sums[assign[i]] += p;
        }
        for c in 0..m {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            } else {
                // Deterministic repair: restart the empty center at the
                // point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (&points[a] - &centers[assign[a]]).norm_squared();
                        let db = (&points[b] - &centers[assign[b]]).norm_squared();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &c)| (p - &centers[c]).norm_squared())
        .sum();
    (inertia, assign)
}

/// Highest response over a filter bank and the index that achieved it
/// (lowest index on ties).
pub fn best_response(filters: &[DVector<f64>], feature: &DVector<f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (c, w) in filters.iter().enumerate() {
        let s = w.dot(feature);
        if s > best.0 {
            best = (s, c);
        }
    }
    best
}

/// One landmark's trained detector: a filter per appearance component and
/// the covariance of its placement error around the true landmark.
#[derive(Debug, Clone)]
pub struct PartModel {
    pub landmark: usize,
    pub filters: Vec<DVector<f64>>,
    pub covariance: Matrix2<f64>,
}

impl PartModel {
    pub fn score(&self, feature: &DVector<f64>) -> (f64, usize) {
        best_response(&self.filters, feature)
    }
}

/// A training patch: which image it lives in and the annotated center.
#[derive(Debug, Clone, Copy)]
pub struct TrainingPatch {
    pub image: usize,
    pub center: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    /// Disc radius (pixels) each patch may move inside.
    pub radius: f64,
    pub rounds: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { radius: 8.0, rounds: 3 }
    }
}

/// Per-patch outcome of the latent refinement plus the mean best score
/// recorded after each placement round.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    pub offsets: Vec<Vector2<f64>>,
    pub assignments: Vec<usize>,
    pub mean_scores: Vec<f64>,
}

/// Alternates patch re-placement and filter refits. Each round places every
/// patch at the integer offset inside the disc that maximizes the filter
/// bank response (ties: smaller offset norm, then smaller (dy, dx)), then
/// refits each component's LDA filter from the patches assigned to it. A
/// radius below one pixel pins every offset to zero and leaves the filters
/// untouched.
pub fn latent_update(
    filters: &mut Vec<DVector<f64>>,
    whitening: &WhiteningModel,
    images: &[GrayImage],
    patches: &[TrainingPatch],
    feature_cfg: &FeatureConfig,
    cfg: &LatentConfig,
) -> Result<LatentTrace> {
    if filters.is_empty() || patches.is_empty() {
        return Err(Error::InvalidInput("latent update needs filters and patches".into()));
    }
    for p in patches {
        if p.image >= images.len() {
            return Err(Error::InvalidInput(format!("patch references image {}", p.image)));
        }
    }
    let offsets = disc_offsets(cfg.radius);
    let mut trace = LatentTrace {
        offsets: vec![Vector2::zeros(); patches.len()],
        assignments: vec![0; patches.len()],
        mean_scores: Vec::with_capacity(cfg.rounds),
    };
    let frozen = cfg.radius < 1.0;
    for round in 0..cfg.rounds {
        let mut total = 0.0;
        let mut placed: Vec<DVector<f64>> = Vec::with_capacity(patches.len());
        for (i, patch) in patches.iter().enumerate() {
            let img = &images[patch.image];
            let mut best: Option<(f64, Vector2<f64>, usize, DVector<f64>)> = None;
            for off in &offsets {
                let f = extract_feature_padded(
                    img,
                    patch.center.x + off.x,
                    patch.center.y + off.y,
                    feature_cfg,
                );
                let (score, comp) = best_response(filters, &f);
                // Offsets are pre-sorted by (norm, dy, dx); strict > keeps
                // the first maximizer, which is the tie-break rule.
                if best.as_ref().map_or(true, |b| score > b.0) {
                    best = Some((score, *off, comp, f));
                }
            }
            let (score, off, comp, f) = best.unwrap();
            total += score;
            trace.offsets[i] = off;
            trace.assignments[i] = comp;
            placed.push(f);
        }
        trace.mean_scores.push(total / patches.len() as f64);
        if frozen {
            continue;
        }
        let last_round = round + 1 == cfg.rounds;
        if last_round {
            break;
        }
        for (c, filter) in filters.iter_mut().enumerate() {
            let members: Vec<DVector<f64>> = trace
                .assignments
                .iter()
                .zip(&placed)
                .filter(|(a, _)| **a == c)
                .map(|(_, f)| f.clone())
                .collect();
            if members.is_empty() {
                log::warn!("component {c} emptied during latent refinement; filter kept");
                continue;
            }
            *filter = whitening.lda_filter(&members)?;
        }
    }
    Ok(trace)
}

/// Integer offsets with norm at most `radius`, sorted by (norm, dy, dx) so
/// strict-improvement scans implement the documented tie-break.
fn disc_offsets(radius: f64) -> Vec<Vector2<f64>> {
    let r = if radius < 1.0 { 0 } else { radius.floor() as i64 };
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 <= radius.max(0.0) * radius.max(0.0) {
                offs.push(Vector2::new(dx as f64, dy as f64));
            }
        }
    }
    offs.sort_by(|a, b| {
        (a.norm_squared(), a.y, a.x)
            .partial_cmp(&(b.norm_squared(), b.y, b.x))
            .unwrap()
    });
    if offs.is_empty() {
        offs.push(Vector2::zeros());
    }
    offs
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// L2 regularization weight.
    pub lambda: f64,
    /// Full-batch subgradient steps per fit.
    pub iters: usize,
    pub hard_negative_rounds: usize,
    /// Violators appended to the cache per mining round.
    pub mined_per_round: usize,
    /// Negatives seeding the cache before any mining.
    pub cache_init: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            iters: 2000,
            hard_negative_rounds: 2,
            mined_per_round: 100,
            cache_init: 200,
        }
    }
}

/// Deterministic full-batch subgradient descent on the class-balanced
/// hinge loss with L2 regularization, returning the average of the second
/// half of the iterates. Classes are weighted equally regardless of pool
/// sizes so a large negative cache cannot drown the positives.
pub fn train_svm(
    positives: &[DVector<f64>],
    negatives: &[DVector<f64>],
    lambda: f64,
    iters: usize,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if positives.is_empty() || negatives.is_empty() || lambda <= 0.0 || iters == 0 {
        return Err(Error::InvalidInput("SVM needs both classes, lambda > 0, iters > 0".into()));
    }
    let d = positives[0].len();
    let wp = 0.5 / positives.len() as f64;
    let wn = 0.5 / negatives.len() as f64;
    let mut w = init.cloned().unwrap_or_else(|| DVector::zeros(d));
    if w.len() != d {
        return Err(Error::DimensionMismatch("SVM warm start length".into()));
    }
    let mut avg = DVector::zeros(d);
    let mut avg_count = 0usize;
    for t in 1..=iters {
        let mut grad = &w * lambda;
        for x in positives {
            if w.dot(x) < 1.0 {
                grad.axpy(-wp, x, 1.0);
            }
        }
        for x in negatives {
            if -w.dot(x) < 1.0 {
                grad.axpy(wn, x, 1.0);
            }
        }
        w.axpy(-1.0 / (lambda * t as f64), &grad, 1.0);
        if t > iters / 2 {
            avg += &w;
            avg_count += 1;
        }
    }
    Ok(avg / avg_count as f64)
}

/// Balanced hinge objective [`train_svm`] minimizes; exposed so tests can
/// compare against an independent solver.
pub fn svm_objective(
    w: &DVector<f64>,
    positives: &[DVector<f64>],
    negatives: &[DVector<f64>],
    lambda: f64,
) -> f64 {
    let wp = 0.5 / positives.len() as f64;
    let wn = 0.5 / negatives.len() as f64;
    let mut obj = 0.5 * lambda * w.norm_squared();
    for x in positives {
        obj += wp * (1.0 - w.dot(x)).max(0.0);
    }
    for x in negatives {
        obj += wn * (1.0 + w.dot(x)).max(0.0);
    }
    obj
}

/// Cache growth per component across mining rounds, for logging and tests.
#[derive(Debug, Clone)]
pub struct SvmReport {
    pub cache_sizes: Vec<usize>,
}

/// Retrains each component filter as an SVM. The negative cache starts with
/// a fixed prefix of the pool; each mining round scores the whole pool and
/// appends the highest-scoring uncached margin violators, then refits.
/// Components whose positive set is empty keep their current filter.
pub fn retrain_svm(
    filters: &mut [DVector<f64>],
    positives_per_component: &[Vec<DVector<f64>>],
    negative_pool: &[DVector<f64>],
    cfg: &SvmConfig,
) -> Result<SvmReport> {
    if filters.len() != positives_per_component.len() {
        return Err(Error::DimensionMismatch("one positive set per filter".into()));
    }
    if negative_pool.is_empty() {
        return Err(Error::InvalidInput("empty negative pool".into()));
    }
    let mut report = SvmReport { cache_sizes: Vec::with_capacity(filters.len()) };
    for (filter, pos) in filters.iter_mut().zip(positives_per_component) {
        if pos.is_empty() {
            log::warn!("component with no positives keeps its LDA filter");
            report.cache_sizes.push(0);
            continue;
        }
        let mut cache: Vec<usize> = (0..negative_pool.len().min(cfg.cache_init)).collect();
        let mut cached: HashSet<usize> = cache.iter().copied().collect();
        let mut w = fit_on_cache(pos, negative_pool, &cache, cfg, Some(filter))?;
        for _ in 0..cfg.hard_negative_rounds {
            let mut violators: Vec<(f64, usize)> = negative_pool
                .iter()
                .enumerate()
                .filter(|(i, x)| !cached.contains(i) && w.dot(x) > -1.0)
                .map(|(i, x)| (w.dot(x), i))
                .collect();
            if violators.is_empty() {
                break;
            }
            violators.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, i) in violators.into_iter().take(cfg.mined_per_round) {
                cache.push(i);
                cached.insert(i);
            }
            w = fit_on_cache(pos, negative_pool, &cache, cfg, Some(&w))?;
        }
        report.cache_sizes.push(cache.len());
        *filter = w;
    }
    Ok(report)
}

fn fit_on_cache(
    positives: &[DVector<f64>],
    pool: &[DVector<f64>],
    cache: &[usize],
    cfg: &SvmConfig,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let negs: Vec<DVector<f64>> = cache.iter().map(|&i| pool[i].clone()).collect();
    train_svm(positives, &negs, cfg.lambda, cfg.iters, init)
}

/// Sample covariance of detector placement offsets plus a quarter-pixel
/// jitter floor. Fewer than two offsets cannot define a spread, so the
/// fallback is an isotropic two-pixel standard deviation (flagged `true`).
pub fn estimate_covariance(offsets: &[Vector2<f64>]) -> (Matrix2<f64>, bool) {
    if offsets.len() < 2 {
        return (Matrix2::identity() * 4.0, true);
    }
    let n = offsets.len() as f64;
    let mean: Vector2<f64> = offsets.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for o in offsets {
        let c = o - mean;
        cov += c * c.transpose();
    }
    cov /= n - 1.0;
    (cov + Matrix2::identity() * 0.25, false)
}

/// Dense grid of descriptors over one image. Features do not depend on
/// which landmark is being scored, so each image is featurized once and
/// every part's filters dot against the same grid.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    positions: Vec<Vector2<f64>>,
    features: Vec<DVector<f64>>,
}

impl FeatureGrid {
    /// Extracts descriptors at every in-bounds center on a square stride.
    /// Images smaller than the patch yield an empty grid.
    pub fn build(image: &GrayImage, cfg: &FeatureConfig, stride: usize) -> Result<Self> {
        cfg.validate()?;
        if stride == 0 {
            return Err(Error::Config("zero detection stride".into()));
        }
        let margin = cfg.patch_size / 2;
        let mut positions = Vec::new();
        let mut features = Vec::new();
        if image.width() >= cfg.patch_size && image.height() >= cfg.patch_size {
            let mut y = margin;
            while y + margin <= image.height() {
                let mut x = margin;
                while x + margin <= image.width() {
                    positions.push(Vector2::new(x as f64, y as f64));
                    features.push(extract_feature(image, x as f64, y as f64, cfg)?);
                    x += stride;
                }
                y += stride;
            }
        }
        Ok(Self { positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> Vector2<f64> {
        self.positions[i]
    }

    pub fn feature(&self, i: usize) -> &DVector<f64> {
        &self.features[i]
    }
}

/// Scores a filter bank over a grid and returns up to `top_k` detections
/// after greedy non-maximum suppression within `nms_radius` pixels.
pub fn detect(
    grid: &FeatureGrid,
    filters: &[DVector<f64>],
    top_k: usize,
    nms_radius: f64,
) -> Vec<Detection> {
    let mut order: Vec<(f64, usize)> = (0..grid.len())
        .map(|i| (best_response(filters, grid.feature(i)).0, i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<Detection> = Vec::new();
    for (score, i) in order {
        if kept.len() >= top_k {
            break;
        }
        let p = grid.position(i);
        let suppressed = kept
            .iter()
            .any(|d| (d.location() - p).norm() <= nms_radius);
        if !suppressed {
            kept.push(Detection { x: p.x, y: p.y, score });
        }
    }
    kept
}

/// One training image's ground truth: landmark pixel locations, a 0/1
/// visibility flag per landmark, and an optional object box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub file: String,
    pub landmarks: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub images: Vec<GrayImage>,
    pub annotations: Vec<Annotation>,
}

impl TrainingCorpus {
    pub fn landmark_count(&self) -> usize {
        self.annotations.first().map_or(0, |a| a.landmarks.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.annotations.len() {
            return Err(Error::DimensionMismatch("one annotation per image".into()));
        }
        if self.annotations.is_empty() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        let p = self.landmark_count();
        for (i, a) in self.annotations.iter().enumerate() {
            if a.landmarks.len() != p || a.visibility.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "annotation {i} has {} landmarks and {} visibility flags, expected {p}",
                    a.landmarks.len(),
                    a.visibility.len()
                )));
            }
        }
        Ok(())
    }

    /// Loads `annotations.json` from `dir` and every image it names.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("annotations.json"))?;
        let annotations: Vec<Annotation> = serde_json::from_str(&text)?;
        let mut images = Vec::with_capacity(annotations.len());
        for a in &annotations {
            images.push(GrayImage::load(&dir.join(&a.file))?);
        }
        let corpus = Self { images, annotations };
        corpus.validate()?;
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartTrainConfig {
    pub feature: FeatureConfig,
    /// Appearance components per landmark.
    pub components: usize,
    pub latent: LatentConfig,
    pub svm: SvmConfig,
    pub negatives_per_image: usize,
    pub seed: u64,
    /// Match radius (pixels) for average precision.
    pub ap_radius: f64,
    pub stride: usize,
    pub detections_per_image: usize,
    pub nms_radius: f64,
}

impl Default for PartTrainConfig {
    fn default() -> Self {
        Self {
            feature: FeatureConfig::default(),
            components: 3,
            latent: LatentConfig::default(),
            svm: SvmConfig::default(),
            negatives_per_image: 200,
            seed: 7,
            ap_radius: 20.0,
            stride: 2,
            detections_per_image: 20,
            nms_radius: 8.0,
        }
    }
}

/// Average precision per trained landmark before (LDA) and after
/// (latent + SVM) refinement; `None` where the corpus has no visible
/// instance to score. Rows are parallel to `landmarks`, which lists the
/// ids that actually trained (never-visible ones are skipped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(default)]
    pub landmarks: Vec<usize>,
    pub ap_before: Vec<Option<f64>>,
    pub ap_after: Vec<Option<f64>>,
    pub components_used: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedParts {
    pub parts: Vec<PartModel>,
    pub whitening: WhiteningModel,
    pub feature: FeatureConfig,
    pub report: TrainReport,
}

/// Full per-landmark training pass over an annotated corpus.
pub fn train_parts(corpus: &TrainingCorpus, cfg: &PartTrainConfig) -> Result<TrainedParts> {
    corpus.validate()?;
    cfg.feature.validate()?;
    let p = corpus.landmark_count();

    // Positive patches at the annotated centers of visible landmarks.
    let mut patches: Vec<Vec<TrainingPatch>> = vec![Vec::new(); p];
    let mut pos_feats: Vec<Vec<DVector<f64>>> = vec![Vec::new(); p];
    let mut all_pos: Vec<DVector<f64>> = Vec::new();
    for (i, ann) in corpus.annotations.iter().enumerate() {
        for (j, (lm, vis)) in ann.landmarks.iter().zip(&ann.visibility).enumerate() {
            if *vis == 0 {
                continue;
            }
            let center = Vector2::new(lm[0], lm[1]);
            let f = extract_feature_padded(&corpus.images[i], center.x, center.y, &cfg.feature);
            patches[j].push(TrainingPatch { image: i, center });
            pos_feats[j].push(f.clone());
            all_pos.push(f);
        }
    }
    if pos_feats.iter().all(|f| f.is_empty()) {
        return Err(Error::InvalidInput(
            "no landmark has a visible annotation in the corpus".into(),
        ));
    }

    let negatives = sample_negatives(corpus, cfg);
    let whitening = WhiteningModel::fit(&all_pos, &negatives, None)?;

    // Featurize each image once; every landmark scores the same grids.
    let mut grids = Vec::with_capacity(corpus.images.len());
    for img in &corpus.images {
        grids.push(FeatureGrid::build(img, &cfg.feature, cfg.stride)?);
    }
    let truths: Vec<Vec<Vec<Vector2<f64>>>> = (0..p)
        .map(|j| {
            corpus
                .annotations
                .iter()
                .map(|a| {
                    if a.visibility[j] != 0 {
                        vec![Vector2::new(a.landmarks[j][0], a.landmarks[j][1])]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        })
        .collect();

    let mut parts = Vec::with_capacity(p);
    let mut report = TrainReport {
        landmarks: Vec::with_capacity(p),
        ap_before: Vec::with_capacity(p),
        ap_after: Vec::with_capacity(p),
        components_used: Vec::with_capacity(p),
    };
    for j in 0..p {
        if pos_feats[j].is_empty() {
            log::warn!("landmark {j} has no visible annotation, skipping");
            continue;
        }
        report.landmarks.push(j);
        let assignments = cluster_components(
            &whitening,
            &pos_feats[j],
            cfg.components,
            cfg.seed.wrapping_add(j as u64),
        )?;
        // Drop empty components and renumber the survivors.
        let m = assignments.iter().max().unwrap() + 1;
        let groups: Vec<Vec<usize>> = (0..m)
            .map(|c| (0..assignments.len()).filter(|&i| assignments[i] == c).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        let mut filters = Vec::with_capacity(groups.len());
        for g in &groups {
            let members: Vec<DVector<f64>> = g.iter().map(|&i| pos_feats[j][i].clone()).collect();
            filters.push(whitening.lda_filter(&members)?);
        }
        report.components_used.push(filters.len());
        report.ap_before.push(grid_ap(&grids, &filters, &truths[j], cfg)?);

        let trace = latent_update(
            &mut filters,
            &whitening,
            &corpus.images,
            &patches[j],
            &cfg.feature,
            &cfg.latent,
        )?;
        let mut per_comp: Vec<Vec<DVector<f64>>> = vec![Vec::new(); filters.len()];
        for (i, patch) in patches[j].iter().enumerate() {
            let off = trace.offsets[i];
            let f = extract_feature_padded(
                &corpus.images[patch.image],
                patch.center.x + off.x,
                patch.center.y + off.y,
                &cfg.feature,
            );
            per_comp[trace.assignments[i]].push(f);
        }
        retrain_svm(&mut filters, &per_comp, &negatives, &cfg.svm)?;
        report.ap_after.push(grid_ap(&grids, &filters, &truths[j], cfg)?);

        let (covariance, fallback) = estimate_covariance(&trace.offsets);
        if fallback {
            log::warn!("landmark {j}: too few offsets, using fallback placement covariance");
        }
        parts.push(PartModel { landmark: j, filters, covariance });
    }
    Ok(TrainedParts { parts, whitening, feature: cfg.feature, report })
}

fn grid_ap(
    grids: &[FeatureGrid],
    filters: &[DVector<f64>],
    truths: &[Vec<Vector2<f64>>],
    cfg: &PartTrainConfig,
) -> Result<Option<f64>> {
    let dets: Vec<Vec<Detection>> = grids
        .iter()
        .map(|g| detect(g, filters, cfg.detections_per_image, cfg.nms_radius))
        .collect();
    match crate::selection::compute_ap(&dets, truths, cfg.ap_radius) {
        Ok(ap) => Ok(Some(ap)),
        Err(Error::UndefinedAp) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Random background patches with zero overlap against any visible
/// landmark patch in the same image. Deterministic per (seed, image).
fn sample_negatives(corpus: &TrainingCorpus, cfg: &PartTrainConfig) -> Vec<DVector<f64>> {
    let patch = cfg.feature.patch_size;
    let margin = patch / 2;
    let mut negatives = Vec::new();
    for (i, img) in corpus.images.iter().enumerate() {
        if img.width() < 2 * patch || img.height() < 2 * patch {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let ann = &corpus.annotations[i];
        let mut taken = 0usize;
        let mut attempts = 0usize;
        while taken < cfg.negatives_per_image && attempts < 50 * cfg.negatives_per_image {
            attempts += 1;
            let x = rng.gen_range(margin..=img.width() - margin) as f64;
            let y = rng.gen_range(margin..=img.height() - margin) as f64;
            let overlaps = ann.landmarks.iter().zip(&ann.visibility).any(|(lm, vis)| {
                *vis != 0
                    && (lm[0] - x).abs() < patch as f64
                    && (lm[1] - y).abs() < patch as f64
            });
            if overlaps {
                continue;
            }
            negatives.push(extract_feature_padded(img, x, y, &cfg.feature));
            taken += 1;
        }
    }
    negatives
}

/// Serializable bundle of every trained part plus the shared whitening
/// statistics. Float arrays are base64-encoded little-endian f64 so the
/// JSON stays byte-exact across a save/load round trip.
#[derive(Debug, Clone)]
pub struct PartSet {
    pub feature: FeatureConfig,
    pub whitening: WhiteningModel,
    pub parts: Vec<PartModel>,
    pub report: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
struct RawPartSet {
    feature: FeatureConfig,
    whitening: RawWhitening,
    parts: Vec<RawPart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
struct RawWhitening {
    dim: usize,
    mean_bg: String,
    /// Row-major dim x dim covariance; the inverse and inverse square root
    /// are recomputed deterministically on load.
    sigma: String,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPart {
    landmark: usize,
    filters: Vec<String>,
    covariance: [[f64; 2]; 2],
}

fn floats_to_b64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn b64_to_floats(text: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidInput(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput("float payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl PartSet {
    pub fn from_trained(trained: TrainedParts) -> Self {
        Self {
            feature: trained.feature,
            whitening: trained.whitening,
            parts: trained.parts,
            report: Some(trained.report),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let d = self.whitening.dim();
        let raw = RawPartSet {
            feature: self.feature,
            whitening: RawWhitening {
                dim: d,
                mean_bg: floats_to_b64(self.whitening.mean_bg().as_slice()),
                sigma: floats_to_b64(&matrix_row_major(self.whitening.sigma())),
                epsilon: self.whitening.epsilon(),
            },
            parts: self
                .parts
                .iter()
                .map(|p| RawPart {
                    landmark: p.landmark,
                    filters: p.filters.iter().map(|f| floats_to_b64(f.as_slice())).collect(),
                    covariance: [
                        [p.covariance[(0, 0)], p.covariance[(0, 1)]],
                        [p.covariance[(1, 0)], p.covariance[(1, 1)]],
                    ],
                })
                .collect(),
            report: self.report.clone(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawPartSet = serde_json::from_str(text)?;
        let d = raw.whitening.dim;
        let mean_bg = DVector::from_vec(b64_to_floats(&raw.whitening.mean_bg)?);
        let sigma_flat = b64_to_floats(&raw.whitening.sigma)?;
        if mean_bg.len() != d || sigma_flat.len() != d * d {
            return Err(Error::DimensionMismatch("whitening payload lengths".into()));
        }
        let sigma = DMatrix::from_fn(d, d, |i, j| sigma_flat[i * d + j]);
        let whitening = WhiteningModel::from_parts(mean_bg, sigma, raw.whitening.epsilon)?;
        let mut parts = Vec::with_capacity(raw.parts.len());
        for rp in raw.parts {
            let mut filters = Vec::with_capacity(rp.filters.len());
            for f in &rp.filters {
                let v = b64_to_floats(f)?;
                if v.len() != raw.feature.dim() {
                    return Err(Error::DimensionMismatch("filter length".into()));
                }
                filters.push(DVector::from_vec(v));
            }
            let c = rp.covariance;
            parts.push(PartModel {
                landmark: rp.landmark,
                filters,
                covariance: Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]),
            });
        }
        Ok(Self { feature: raw.feature, whitening, parts, report: raw.report })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn matrix_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_features(seed: u64, n: usize, shift: f64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                DVector::from_fn(6, |i, _| shift * (i as f64 + 1.0) + 0.3 * rng.gen::<f64>())
            })
            .collect()
    }

    #[test]
    fn whitening_inverse_consistency() {
        let pos = toy_features(1, 8, 1.0);
        let neg = toy_features(2, 12, 0.0);
        let w = WhiteningModel::fit(&pos, &neg, None).unwrap();
        let ident = w.inv_sqrt.transpose() * w.sigma() * &w.inv_sqrt;
        assert_abs_diff_eq!(
            (ident - DMatrix::identity(6, 6)).amax(),
            0.0,
            epsilon = 1e-8
        );
        let prod = &w.inv * w.sigma();
        assert_abs_diff_eq!((prod - DMatrix::identity(6, 6)).amax(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn lda_filter_separates_means() {
        let pos = toy_features(3, 10, 1.0);
        let neg = toy_features(4, 10, 0.0);
        let w = WhiteningModel::fit(&pos, &neg, None).unwrap();
        let filter = w.lda_filter(&pos).unwrap();
        let mean = |fs: &[DVector<f64>]| {
            fs.iter().fold(DVector::zeros(6), |a, f| a + f) / fs.len() as f64
        };
        assert!(filter.dot(&mean(&pos)) > filter.dot(&mean(&neg)));
    }

    #[test]
    fn clustering_separates_obvious_groups() {
        let mut feats = toy_features(5, 6, 0.0);
        feats.extend(toy_features(6, 6, 5.0));
        let neg = toy_features(7, 10, 2.0);
        let w = WhiteningModel::fit(&feats, &neg, None).unwrap();
        let assign = cluster_components(&w, &feats, 2, 11).unwrap();
        assert!(assign[..6].iter().all(|&a| a == assign[0]));
        assert!(assign[6..].iter().all(|&a| a == assign[6]));
        assert_ne!(assign[0], assign[6]);
    }

    #[test]
    fn covariance_fallback_and_floor() {
        let (cov, warn) = estimate_covariance(&[]);
        assert!(warn);
        assert_abs_diff_eq!(cov[(0, 0)], 4.0);
        let offs = vec![
            Vector2::new(1.0, 0.0),
            Vector2::new(-1.0, 0.0),
            Vector2::new(0.0, 2.0),
            Vector2::new(0.0, -2.0),
        ];
        let (cov, warn) = estimate_covariance(&offs);
        assert!(!warn);
        // Sample covariance: diag(2/3, 8/3), plus the 0.25 floor.
        assert_abs_diff_eq!(cov[(0, 0)], 2.0 / 3.0 + 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 1)], 8.0 / 3.0 + 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_offsets_hit_jitter_floor() {
        let offs = vec![Vector2::zeros(); 5];
        let (cov, warn) = estimate_covariance(&offs);
        assert!(!warn);
        assert_abs_diff_eq!((cov - Matrix2::identity() * 0.25).amax(), 0.0);
    }

    #[test]
    fn svm_separates_linear_data() {
        let pos = toy_features(8, 15, 1.0);
        let neg: Vec<DVector<f64>> = toy_features(9, 15, 1.0)
            .into_iter()
            .map(|f| -f)
            .collect();
        let w = train_svm(&pos, &neg, 1e-2, 3000, None).unwrap();
        for x in &pos {
            assert!(w.dot(x) > 0.0);
        }
        for x in &neg {
            assert!(w.dot(x) < 0.0);
        }
    }

    #[test]
    fn latent_radius_below_pixel_is_identity() {
        let img = GrayImage::from_fn(64, 64, |x, y| {
            ((x as f64 * 0.4).sin() + (y as f64 * 0.6).cos()) * 0.25 + 0.5
        });
        let cfg = FeatureConfig::default();
        let f = extract_feature_padded(&img, 32.0, 32.0, &cfg);
        let neg = vec![
            extract_feature_padded(&img, 20.0, 20.0, &cfg),
            extract_feature_padded(&img, 44.0, 40.0, &cfg),
        ];
        let w = WhiteningModel::fit(&[f.clone()], &neg, None).unwrap();
        let mut filters = vec![w.lda_filter(&[f]).unwrap()];
        let before = filters[0].clone();
        let patches = vec![TrainingPatch { image: 0, center: Vector2::new(32.0, 32.0) }];
        let trace = latent_update(
            &mut filters,
            &w,
            &[img],
            &patches,
            &cfg,
            &LatentConfig { radius: 0.5, rounds: 3 },
        )
        .unwrap();
        assert_abs_diff_eq!((filters[0].clone() - before).amax(), 0.0);
        assert_abs_diff_eq!(trace.offsets[0].norm(), 0.0);
        assert_eq!(trace.mean_scores.len(), 3);
    }

    #[test]
    fn disc_offsets_sorted_and_bounded() {
        let offs = disc_offsets(2.0);
        assert!(offs.iter().all(|o| o.norm_squared() <= 4.0 + 1e-12));
        assert_eq!(offs[0], Vector2::zeros());
        assert!(offs.windows(2).all(|w| w[0].norm_squared() <= w[1].norm_squared()));
        assert_eq!(offs.len(), 13);
        assert_eq!(disc_offsets(0.2), vec![Vector2::zeros()]);
    }

    #[test]
    fn nms_suppresses_near_duplicates() {
        let img = GrayImage::from_fn(96, 96, |x, y| {
            let d = ((x as f64 - 48.0).powi(2) + (y as f64 - 48.0).powi(2)).sqrt();
            if d < 10.0 {
                1.0
            } else {
                0.0
            }
        });
        let cfg = FeatureConfig::default();
        let grid = FeatureGrid::build(&img, &cfg, 2).unwrap();
        let template = extract_feature_padded(&img, 48.0, 48.0, &cfg);
        let dets = detect(&grid, &[template], 5, 12.0);
        assert!(!dets.is_empty());
        for (a, d1) in dets.iter().enumerate() {
            for d2 in &dets[a + 1..] {
                let dist = (d1.location() - d2.location()).norm();
                assert!(dist > 12.0, "detections {dist} apart survived NMS");
            }
        }
        // The best detection is at the blob center.
        assert_abs_diff_eq!(dets[0].x, 48.0);
        assert_abs_diff_eq!(dets[0].y, 48.0);
    }

    #[test]
    fn part_set_roundtrip_is_exact() {
        let pos = toy_features(12, 8, 1.0);
        let neg = toy_features(13, 9, 0.0);
        let w = WhiteningModel::fit(&pos, &neg, None).unwrap();
        let part = PartModel {
            landmark: 0,
            filters: vec![w.lda_filter(&pos).unwrap()],
            covariance: Matrix2::new(1.5, 0.25, 0.25, 2.0),
        };
        let set = PartSet {
            feature: FeatureConfig { patch_size: 8, cells: 1, bins: 6 },
            whitening: w,
            parts: vec![part],
            report: None,
        };
        let json = set.to_json().unwrap();
        let back = PartSet::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.parts[0].filters[0], set.parts[0].filters[0]);
        assert_eq!(back.whitening.sigma(), set.whitening.sigma());
    }
}
