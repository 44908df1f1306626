//! Embedding model, factor statistics and the image–annotation dataset.
//!
//! Images and annotations share one latent space of dimension `k`. An image
//! is identified only by its row index; there is no raw feature vector, so the
//! image map is a plain row lookup.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Score gaps at or below this value are treated as ties when comparing rankings.
pub const TIE_EPSILON: f64 = 1e-9;

/// Sign with `sgn(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major image and annotation factor matrices sharing dimension `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    num_images: usize,
    num_annotations: usize,
    k: usize,
    image_factors: Vec<f64>,
    annotation_factors: Vec<f64>,
}

impl EmbeddingModel {
    pub fn zeros(num_images: usize, num_annotations: usize, k: usize) -> Result<Self> {
        Self::from_parts(
            num_images,
            num_annotations,
            k,
            vec![0.0; num_images * k],
            vec![0.0; num_annotations * k],
        )
    }

    /// Every factor drawn independently from `N(0, std^2)`.
    pub fn gaussian<R: Rng + ?Sized>(
        num_images: usize,
        num_annotations: usize,
        k: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::config(format!("init std must be finite and >= 0, got {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let image_factors = (0..num_images * k).map(|_| normal.sample(rng)).collect();
        let annotation_factors = (0..num_annotations * k).map(|_| normal.sample(rng)).collect();
        Self::from_parts(num_images, num_annotations, k, image_factors, annotation_factors)
    }

    pub fn from_parts(
        num_images: usize,
        num_annotations: usize,
        k: usize,
        image_factors: Vec<f64>,
        annotation_factors: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("embedding dimension k must be positive"));
        }
        if image_factors.len() != num_images * k || annotation_factors.len() != num_annotations * k {
            return Err(Error::config(format!(
                "factor buffers do not match shape ({num_images}+{num_annotations})x{k}"
            )));
        }
        if image_factors.iter().chain(&annotation_factors).any(|v| !v.is_finite()) {
            return Err(Error::config("factor matrices contain non-finite values"));
        }
        Ok(Self {
            num_images,
            num_annotations,
            k,
            image_factors,
            annotation_factors,
        })
    }

    /// Builds a model from explicit rows; all rows must have the same length.
    pub fn from_rows(images: &[Vec<f64>], annotations: &[Vec<f64>]) -> Result<Self> {
        let k = images
            .first()
            .or(annotations.first())
            .map(Vec::len)
            .ok_or_else(|| Error::config("model needs at least one row"))?;
        if images.iter().chain(annotations).any(|r| r.len() != k) {
            return Err(Error::config("rows have inconsistent lengths"));
        }
        Self::from_parts(
            images.len(),
            annotations.len(),
            k,
            images.concat(),
            annotations.concat(),
        )
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_annotations(&self) -> usize {
        self.num_annotations
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn image_factors(&self) -> &[f64] {
        &self.image_factors
    }

    pub fn annotation_factors(&self) -> &[f64] {
        &self.annotation_factors
    }

    /// Image row `i`. Panics when out of range.
    #[inline]
    pub fn image(&self, i: usize) -> &[f64] {
        &self.image_factors[i * self.k..(i + 1) * self.k]
    }

    /// Annotation row `a`. Panics when out of range.
    #[inline]
    pub fn annotation(&self, a: usize) -> &[f64] {
        &self.annotation_factors[a * self.k..(a + 1) * self.k]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.k;
        &mut self.image_factors[i * k..(i + 1) * k]
    }

    pub fn annotation_mut(&mut self, a: usize) -> &mut [f64] {
        let k = self.k;
        &mut self.annotation_factors[a * k..(a + 1) * k]
    }

    /// Mutable access to one image row and two distinct annotation rows at once.
    pub(crate) fn triplet_rows_mut(
        &mut self,
        i: usize,
        p: usize,
        n: usize,
    ) -> (&mut [f64], &mut [f64], &mut [f64]) {
        assert_ne!(p, n, "positive and negative rows must differ");
        let k = self.k;
        let image = &mut self.image_factors[i * k..(i + 1) * k];
        let (lo, hi, swapped) = if p < n { (p, n, false) } else { (n, p, true) };
        let (head, tail) = self.annotation_factors.split_at_mut(hi * k);
        let lo_row = &mut head[lo * k..(lo + 1) * k];
        let hi_row = &mut tail[..k];
        if swapped {
            (image, hi_row, lo_row)
        } else {
            (image, lo_row, hi_row)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.image_factors
            .iter()
            .chain(&self.annotation_factors)
            .all(|v| v.is_finite())
    }

    pub(crate) fn check_image(&self, i: usize) -> Result<()> {
        if i >= self.num_images {
            return Err(Error::Index {
                what: "image",
                index: i,
                limit: self.num_images,
            });
        }
        Ok(())
    }

    pub(crate) fn check_annotation(&self, a: usize) -> Result<()> {
        if a >= self.num_annotations {
            return Err(Error::Index {
                what: "annotation",
                index: a,
                limit: self.num_annotations,
            });
        }
        Ok(())
    }

    /// Inner product `s_i(a)` between image row `i` and annotation row `a`.
    pub fn score(&self, i: usize, a: usize) -> Result<f64> {
        self.check_image(i)?;
        self.check_annotation(a)?;
        Ok(self.score_unchecked(i, a))
    }

    #[inline]
    pub fn score_unchecked(&self, i: usize, a: usize) -> f64 {
        dot(self.image(i), self.annotation(a))
    }

    /// Scores of every annotation for image `i`, in annotation index order.
    pub fn scores_for_image(&self, i: usize) -> Vec<f64> {
        let row = self.image(i);
        self.annotation_factors
            .chunks_exact(self.k)
            .map(|a| dot(row, a))
            .collect()
    }

    /// Standardized score `s*_i(a) = sum_f p(f|i) sgn(v_if) v*_af` with
    /// `p(f|i) = |v_if| sigma_f` and `v*_af = (v_af - mu_f) / sigma_f`.
    ///
    /// Differs from [`score`](Self::score) by `sum_f v_if mu_f`, which does not
    /// depend on `a`, so both induce the same annotation ranking for an image.
    /// Dimensions with `sigma_f = 0` contribute nothing.
    pub fn transformed_score(&self, stats: &FactorStats, i: usize, a: usize) -> Result<f64> {
        self.check_image(i)?;
        self.check_annotation(a)?;
        if stats.k() != self.k {
            return Err(Error::config("factor statistics do not match model dimension"));
        }
        let vi = self.image(i);
        let va = self.annotation(a);
        let mut total = 0.0;
        for f in 0..self.k {
            let sigma = stats.sigma[f];
            if sigma == 0.0 {
                continue;
            }
            let importance = vi[f].abs() * sigma;
            let standardized = (va[f] - stats.mu[f]) / sigma;
            total += importance * sign(vi[f]) * standardized;
        }
        Ok(total)
    }

    /// The per-image offset `sum_f |v_if| sgn(v_if) mu_f` separating `s` from `s*`.
    pub fn transform_offset(&self, stats: &FactorStats, i: usize) -> Result<f64> {
        self.check_image(i)?;
        let vi = self.image(i);
        Ok((0..self.k)
            .filter(|&f| stats.sigma[f] != 0.0)
            .map(|f| vi[f].abs() * sign(vi[f]) * stats.mu[f])
            .sum())
    }
}

/// Per-dimension population mean and standard deviation of the annotation factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Draw counter value at the time the statistics were taken.
    pub drawn_at: u64,
}

impl FactorStats {
    pub fn k(&self) -> usize {
        self.mu.len()
    }
}

/// Population mean and standard deviation (divide by `|A|`) of every factor
/// dimension over all annotation rows.
pub fn compute_factor_stats(model: &EmbeddingModel) -> FactorStats {
    compute_factor_stats_at(model, 0)
}

pub fn compute_factor_stats_at(model: &EmbeddingModel, drawn_at: u64) -> FactorStats {
    let k = model.k();
    let n = model.num_annotations();
    let mut mu = vec![0.0; k];
    let mut sigma = vec![0.0; k];
    if n == 0 {
        return FactorStats { mu, sigma, drawn_at };
    }
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for row in model.annotation_factors().chunks_exact(k) {
        for f in 0..k {
            mu[f] += row[f];
            lo[f] = lo[f].min(row[f]);
            hi[f] = hi[f].max(row[f]);
        }
    }
    for f in 0..k {
        mu[f] /= n as f64;
        // A constant column has exactly zero spread; pin the mean to avoid rounding drift.
        if lo[f] == hi[f] {
            mu[f] = lo[f];
        }
    }
    for row in model.annotation_factors().chunks_exact(k) {
        for f in 0..k {
            let d = row[f] - mu[f];
            sigma[f] += d * d;
        }
    }
    for f in 0..k {
        sigma[f] = if lo[f] == hi[f] {
            0.0
        } else {
            (sigma[f] / n as f64).sqrt()
        };
    }
    FactorStats { mu, sigma, drawn_at }
}

/// Positive image–annotation pairs over dense indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    num_images: usize,
    num_annotations: usize,
    pairs: Vec<(usize, usize)>,
    positives: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates and indexes `pairs`. Rejects out-of-range indices, duplicate
    /// pairs and images without any positive annotation.
    pub fn from_pairs(
        num_images: usize,
        num_annotations: usize,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let mut positives = vec![Vec::new(); num_images];
        for &(i, a) in &pairs {
            if i >= num_images {
                return Err(Error::Index {
                    what: "image",
                    index: i,
                    limit: num_images,
                });
            }
            if a >= num_annotations {
                return Err(Error::Index {
                    what: "annotation",
                    index: a,
                    limit: num_annotations,
                });
            }
            positives[i].push(a);
        }
        for (i, set) in positives.iter_mut().enumerate() {
            if set.is_empty() {
                return Err(Error::config(format!("image {i} has no positive annotation")));
            }
            set.sort_unstable();
            if set.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config(format!("duplicate pair for image {i}")));
            }
        }
        Ok(Self {
            num_images,
            num_annotations,
            pairs,
            positives,
        })
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_annotations(&self) -> usize {
        self.num_annotations
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sorted positive annotations of image `i`.
    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    #[inline]
    pub fn is_positive(&self, i: usize, a: usize) -> bool {
        self.positives[i].binary_search(&a).is_ok()
    }

    pub fn num_negatives(&self, i: usize) -> usize {
        self.num_annotations - self.positives[i].len()
    }
}

/// One sampled SGD event `(image, positive, negative)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub image: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(dataset: &Dataset, image: usize, positive: usize, negative: usize) -> Result<Self> {
        if image >= dataset.num_images() {
            return Err(Error::Index {
                what: "image",
                index: image,
                limit: dataset.num_images(),
            });
        }
        if !dataset.is_positive(image, positive) {
            return Err(Error::config(format!(
                "annotation {positive} is not a positive of image {image}"
            )));
        }
        if negative >= dataset.num_annotations() || dataset.is_positive(image, negative) {
            return Err(Error::config(format!(
                "annotation {negative} is not a negative of image {image}"
            )));
        }
        Ok(Self {
            image,
            positive,
            negative,
        })
    }
}
