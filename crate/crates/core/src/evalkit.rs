//! Reconstruction and representation metrics.
//!
//! Images live in `[-1, 1]`, so the default PSNR peak and the SSIM dynamic
//! range are both 2.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::data::{Dataset, ImageBatch};
use crate::distill::alignment_penalty;
use crate::encoder::{mean_pool, Encoder, FeatureSource};
use crate::error::{Error, Result};
use crate::nn::Real;
use crate::trainer::Model;

/// Value range of `[-1, 1]` pixels.
pub const SIGNED_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Diagonal regularizer for the Gaussian fits.
pub const FRECHET_EPS: f64 = 1e-6;

fn same_shape(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!("reference {:?} vs reconstruction {:?}", a.data.shape(), b.data.shape())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; infinite for `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn image_mse(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / a.len() as f64
}

/// Per-image PSNR with peak 2, averaged. Any exact match makes the mean infinite.
pub fn psnr(reference: &ImageBatch, recon: &ImageBatch) -> Result<f64> {
    same_shape(reference, recon)?;
    let n = reference.len();
    Ok((0..n).map(|i| psnr_from_mse(image_mse(reference.image(i), recon.image(i)), SIGNED_RANGE)).sum::<f64>() / n as f64)
}

/// Mean squared error over all pixels.
pub fn mse(reference: &ImageBatch, recon: &ImageBatch) -> Result<f64> {
    same_shape(reference, recon)?;
    let n = reference.data.len() as f64;
    Ok(reference.data.iter().zip(recon.data.iter()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / n)
}

/// Mean SSIM over all 8x8 windows (stride 1) of every channel of every image.
///
/// Uniform window weights, population statistics, `C1 = (0.01 * 2)^2`,
/// `C2 = (0.03 * 2)^2`.
pub fn ssim(reference: &ImageBatch, recon: &ImageBatch) -> Result<f64> {
    same_shape(reference, recon)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("{h}x{w} images are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..reference.len() {
        for c in 0..3 {
            let a = reference.data.slice(ndarray::s![i, c, .., ..]);
            let b = recon.data.slice(ndarray::s![i, c, .., ..]);
            let (sum, n) = ssim_plane(a, b, SIGNED_RANGE);
            total += sum;
            count += n;
        }
    }
    Ok(total / count as f64)
}

/// Sum of window SSIM values over one plane and the number of windows.
fn ssim_plane(a: ArrayView2<f32>, b: ArrayView2<f32>, range: f64) -> (f64, usize) {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (h, w) = a.dim();
    // summed-area tables of a, b, a^2, b^2, ab
    let mut tables = vec![Array2::<f64>::zeros((h + 1, w + 1)); 5];
    for y in 0..h {
        for x in 0..w {
            let (p, q) = (f64::from(a[[y, x]]), f64::from(b[[y, x]]));
            for (t, v) in tables.iter_mut().zip([p, q, p * p, q * q, p * q]) {
                t[[y + 1, x + 1]] = v + t[[y, x + 1]] + t[[y + 1, x]] - t[[y, x]];
            }
        }
    }
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut sum = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let s: Vec<f64> = tables.iter().map(|t| (t[[y + k, x + k]] - t[[y, x + k]] - t[[y + k, x]] + t[[y, x]]) / n).collect();
            let (ma, mb) = (s[0], s[1]);
            let va = (s[2] - ma * ma).max(0.0);
            let vb = (s[3] - mb * mb).max(0.0);
            let cov = s[4] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    (sum, (h - k + 1) * (w - k + 1))
}

/// Mean vector and sample covariance (`n - 1`) of feature rows.
pub fn gaussian_fit(features: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let mu = features.mean_axis(Axis(0)).expect("non-empty");
    let centered = &features - &mu;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues clamp to 0.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B`, computed as `Tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sqrt_psd(a.clone());
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// Both covariances get `FRECHET_EPS` on the diagonal; the cross term is
/// averaged over both argument orders so the result is exactly symmetric.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    let d = a.ncols();
    let reg = Array2::<f64>::eye(d) * FRECHET_EPS;
    let (s1, s2) = (to_dmatrix(&(s1 + &reg)), to_dmatrix(&(s2 + &reg)));
    let mean_term = (&mu1 - &mu2).mapv(|v| v * v).sum();
    let cross = 0.5 * (trace_sqrt_product(&s1, &s2) + trace_sqrt_product(&s2, &s1));
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean-pooled final-layer features of a frozen probe encoder.
pub fn probe_features<T: Real>(probe: &Encoder<T>, images: &ImageBatch, chunk: usize) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    for start in (0..images.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(images.len())).collect();
        let part = images.select(&idx);
        let (stack, _) = probe.encode_layers(&part, FeatureSource::Teacher)?;
        rows.push(mean_pool(stack.final_layer(), part.len()).mapv(|v| v.as_f64()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Fréchet proxy: the Fréchet distance of probe-encoder features of two image sets.
/// A desk-scale stand-in for the usual Inception-based score, not comparable to it.
pub fn frechet_proxy<T: Real>(real: &ImageBatch, generated: &ImageBatch, probe: &Encoder<T>) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::InvalidArgument("frechet proxy needs at least 2 images per side".into()));
    }
    let fa = probe_features(probe, real, 64)?;
    let fb = probe_features(probe, generated, 64)?;
    frechet_distance(fa.view(), fb.view())
}

/// Mean tokenwise cosine similarity, `1 - alpha`.
pub fn teacher_alignment<T: Real>(student_final: ArrayView2<T>, teacher_final: ArrayView2<T>) -> Result<f64> {
    Ok(1.0 - alignment_penalty(student_final, teacher_final)?.as_f64())
}

/// Mean absolute neighbour difference across patch boundaries minus the same
/// statistic for neighbour pairs inside a patch. Horizontal and vertical pairs
/// are pooled.
pub fn seam_energy(images: &ImageBatch, patch_size: usize) -> Result<f64> {
    let (h, w) = (images.height(), images.width());
    if patch_size < 2 || h % patch_size != 0 || w % patch_size != 0 || h / patch_size < 2 {
        return Err(Error::InvalidArgument(format!("seam energy needs at least a 2x2 grid of patches of size >= 2, got {h}x{w} / {patch_size}")));
    }
    let (mut seam, mut seam_n, mut inner, mut inner_n) = (0.0, 0usize, 0.0, 0usize);
    for img in images.data.outer_iter() {
        for plane in img.outer_iter() {
            for y in 0..h {
                for x in 0..w {
                    let v = f64::from(plane[[y, x]]);
                    if x + 1 < w {
                        let d = (v - f64::from(plane[[y, x + 1]])).abs();
                        if (x + 1) % patch_size == 0 {
                            seam += d;
                            seam_n += 1;
                        } else {
                            inner += d;
                            inner_n += 1;
                        }
                    }
                    if y + 1 < h {
                        let d = (v - f64::from(plane[[y + 1, x]])).abs();
                        if (y + 1) % patch_size == 0 {
                            seam += d;
                            seam_n += 1;
                        } else {
                            inner += d;
                            inner_n += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(seam / seam_n as f64 - inner / inner_n as f64)
}

/// Train/test row indices for [`linear_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeSplit {
    /// Seeded random split holding out `test_fraction` of the rows.
    pub fn holdout(n: usize, test_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let test = idx.split_off(n - n_test);
        Self { train: idx, test }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_TOLERANCE: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 20_000;

/// Multinomial logistic regression on frozen features.
///
/// Features are standardized with train-split statistics, a small L2 penalty
/// (`PROBE_L2`, bias excluded) keeps the optimum finite, and full-batch
/// gradient descent with Barzilai-Borwein steps and an Armijo safeguard runs
/// until the gradient norm drops below `PROBE_TOLERANCE`.
pub fn linear_probe(features: ArrayView2<f64>, labels: &[usize], split: &ProbeSplit) -> Result<ProbeResult> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows vs {} labels", features.nrows(), labels.len())));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidArgument("probe split needs non-empty train and test sets".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let train_y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let distinct = {
        let mut seen = vec![false; classes];
        train_y.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two classes in the train split".into()));
    }
    let train_x = features.select(Axis(0), &split.train);
    let test_x = features.select(Axis(0), &split.test);
    let mu = train_x.mean_axis(Axis(0)).expect("non-empty");
    let sd = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xs = |x: &Array2<f64>| {
        let mut z = (x - &mu) / &sd;
        let ones = Array2::<f64>::ones((z.nrows(), 1));
        z = ndarray::concatenate(Axis(1), &[z.view(), ones.view()]).expect("same rows");
        z
    };
    let (xtr, xte) = (xs(&train_x), xs(&test_x));
    let d = xtr.ncols();
    let objective = |w: &Array2<f64>| -> (f64, Array2<f64>) {
        let n = xtr.nrows() as f64;
        let logits = xtr.dot(w);
        let mut p = logits.clone();
        let mut loss = 0.0;
        for (mut row, &y) in p.rows_mut().into_iter().zip(&train_y) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            loss -= (row[y] / s).ln();
            row /= s;
            row[y] -= 1.0;
        }
        let mut grad = xtr.t().dot(&p) / n;
        let mut reg = 0.0;
        for j in 0..d - 1 {
            for c in 0..classes {
                reg += w[[j, c]] * w[[j, c]];
                grad[[j, c]] += 2.0 * PROBE_L2 * w[[j, c]];
            }
        }
        (loss / n + PROBE_L2 * reg, grad)
    };
    let mut w = Array2::<f64>::zeros((d, classes));
    let (mut f, mut g) = objective(&w);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gnorm = g.mapv(|v| v * v).sum().sqrt();
    while gnorm >= PROBE_TOLERANCE && iterations < PROBE_MAX_ITERS {
        iterations += 1;
        let mut t = step;
        let (w_new, f_new, g_new) = loop {
            let cand = &w - &(&g * t);
            let (fc, gc) = objective(&cand);
            if fc <= f - 1e-4 * t * gnorm * gnorm || t < 1e-12 {
                break (cand, fc, gc);
            }
            t *= 0.5;
        };
        let s = &w_new - &w;
        let yv = &g_new - &g;
        let sy = (&s * &yv).sum();
        step = if sy > 0.0 { ((&s * &s).sum() / sy).clamp(1e-6, 1e6) } else { 1.0 };
        w = w_new;
        f = f_new;
        g = g_new;
        gnorm = g.mapv(|v| v * v).sum().sqrt();
    }
    let acc = |x: &Array2<f64>, idx: &[usize]| {
        let logits = x.dot(&w);
        let correct = logits
            .rows()
            .into_iter()
            .zip(idx)
            .filter(|(row, &i)| {
                let pred = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (k, &v)| if v > a.1 { (k, v) } else { a }).0;
                pred == labels[i]
            })
            .count();
        correct as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        accuracy: acc(&xte, &split.test),
        train_accuracy: acc(&xtr, &split.train),
        iterations,
        grad_norm: gnorm,
        converged: gnorm < PROBE_TOLERANCE,
    })
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// One evaluation of a trained model on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub frechet_proxy: f64,
    pub seam_energy: f64,
    pub teacher_alignment: f64,
    pub probe_accuracy: Option<f64>,
    pub reconstruction_mse: f64,
    pub euler_steps: usize,
    pub images: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub const CSV_HEADER: &'static str = "psnr_db,ssim,frechet_proxy,seam_energy,teacher_alignment,probe_accuracy,reconstruction_mse,euler_steps,images";

    pub fn csv_row(&self) -> String {
        let psnr = if self.psnr_db.is_infinite() { "inf".to_string() } else { self.psnr_db.to_string() };
        let probe = self.probe_accuracy.map_or(String::new(), |a| a.to_string());
        format!(
            "{psnr},{},{},{},{},{probe},{},{},{}",
            self.ssim, self.frechet_proxy, self.seam_energy, self.teacher_alignment, self.reconstruction_mse, self.euler_steps, self.images
        )
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub euler_steps: usize,
    pub seed: u64,
    pub chunk: usize,
    /// Fit a linear probe on student features when labels are available.
    pub probe: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { euler_steps: 1, seed: 0, chunk: 64, probe: true }
    }
}

/// Reconstructs `data`, then computes every metric on the same split.
///
/// The Fréchet proxy uses the frozen teacher as feature extractor.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, opts: &EvalOptions) -> Result<(MetricsReport, ImageBatch)> {
    let images = &data.images;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let recon = model.reconstruct(images, opts.euler_steps, opts.chunk, &mut rng)?;
    let mut alignment = 0.0;
    let mut feats = Vec::new();
    for start in (0..images.len()).step_by(opts.chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + opts.chunk.max(1)).min(images.len())).collect();
        let part = images.select(&idx);
        let (s, t) = model.final_features(&part)?;
        alignment += teacher_alignment(s.final_layer().view(), t.final_layer().view())? * part.len() as f64;
        feats.push(mean_pool(s.final_layer(), part.len()).mapv(|v| v.as_f64()));
    }
    let probe_accuracy = match (opts.probe, data.labels()) {
        (true, Some(labels)) if labels.iter().any(|&l| l != labels[0]) && labels.len() >= 4 => {
            let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
            let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let split = ProbeSplit::holdout(labels.len(), 0.2, opts.seed);
            Some(linear_probe(x.view(), labels, &split)?.accuracy)
        }
        _ => None,
    };
    let report = MetricsReport {
        psnr_db: psnr(images, &recon)?,
        ssim: ssim(images, &recon)?,
        frechet_proxy: frechet_proxy(images, &recon, model.teacher())?,
        seam_energy: seam_energy(&recon, model.decoder.patch_size())?,
        teacher_alignment: alignment / images.len() as f64,
        probe_accuracy,
        reconstruction_mse: mse(images, &recon)?,
        euler_steps: opts.euler_steps,
        images: images.len(),
    };
    Ok((report, recon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(data: Array4<f32>) -> ImageBatch {
        ImageBatch::new(data, None).unwrap()
    }

    fn noisy(seed: u64, amp: f32) -> (ImageBatch, ImageBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array4::from_shape_simple_fn((2, 3, 16, 16), || rng.random_range(-0.5f32..0.5));
        let b = &a + &Array4::from_shape_simple_fn((2, 3, 16, 16), || amp * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32);
        (batch(a), batch(b))
    }

    #[test]
    fn psnr_kernels() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        let ones = batch(Array4::ones((1, 3, 8, 8)));
        let neg = batch(Array4::from_elem((1, 3, 8, 8), -1.0));
        assert_eq!(psnr(&ones, &neg).unwrap(), 0.0);
        assert_eq!(psnr(&ones, &ones).unwrap(), f64::INFINITY);
        assert!(psnr(&ones, &batch(Array4::ones((1, 3, 8, 16)))).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let v: Vec<f64> = [0.01f32, 0.05, 0.2].iter().map(|&a| {
            let (x, y) = noisy(1, a);
            psnr(&x, &y).unwrap()
        }).collect();
        assert!(v[0] > v[1] && v[1] > v[2]);
    }

    /// Direct per-window evaluation without summed-area tables.
    fn naive_ssim(a: &ImageBatch, b: &ImageBatch) -> f64 {
        let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
        let (mut s, mut n) = (0.0, 0);
        for i in 0..a.len() {
            for c in 0..3 {
                for y in 0..=a.height() - 8 {
                    for x in 0..=a.width() - 8 {
                        let pa: Vec<f64> = (0..64).map(|k| f64::from(a.data[[i, c, y + k / 8, x + k % 8]])).collect();
                        let pb: Vec<f64> = (0..64).map(|k| f64::from(b.data[[i, c, y + k / 8, x + k % 8]])).collect();
                        let ma = pa.iter().sum::<f64>() / 64.0;
                        let mb = pb.iter().sum::<f64>() / 64.0;
                        let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
                        let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
                        let cov = pa.iter().zip(&pb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 64.0;
                        s += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        n += 1;
                    }
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let (a, b) = noisy(2, 0.1);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-10);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = noisy(3, 1.0);
        let v = ssim(&a, &b).unwrap();
        assert!((v - naive_ssim(&a, &b)).abs() < 1e-10);
        assert!(v < 0.5, "ssim under heavy noise {v}");
        let flat = batch(Array4::from_elem((1, 3, 8, 8), 0.25));
        assert_eq!(ssim(&flat, &flat).unwrap(), 1.0);
        let small = batch(Array4::zeros((1, 3, 4, 4)));
        assert!(ssim(&small, &small).is_err());
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn frechet_closed_forms() {
        let a = gaussian(600, 6, 4);
        assert!(frechet_distance(a.view(), a.view()).unwrap().abs() < 1e-9);
        let delta = Array1::from(vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.75]);
        let b = &a + &delta;
        let want = delta.mapv(|v| v * v).sum();
        assert!((frechet_distance(a.view(), b.view()).unwrap() - want).abs() < 1e-6);
        let c = gaussian(500, 6, 5) * 1.5;
        assert_eq!(frechet_distance(a.view(), c.view()).unwrap(), frechet_distance(c.view(), a.view()).unwrap());
        let shift = Array1::from(vec![3.0; 6]);
        let moved = frechet_distance((&a + &shift).view(), (&c + &shift).view()).unwrap();
        assert!((moved - frechet_distance(a.view(), c.view()).unwrap()).abs() < 1e-8);
        assert!(frechet_distance(a.slice(ndarray::s![..1, ..]), a.view()).is_err());
    }

    #[test]
    fn seam_energy_sees_blocky_images() {
        // constant 4x4 blocks with distinct levels: all variation sits on seams
        let blocky = Array4::from_shape_fn((1, 3, 8, 8), |(_, _, y, x)| ((y / 4) * 2 + x / 4) as f32 * 0.2);
        assert!(seam_energy(&batch(blocky), 4).unwrap() > 0.1);
        let ramp = Array4::from_shape_fn((1, 3, 8, 8), |(_, _, _, x)| x as f32 * 0.1);
        assert!(seam_energy(&batch(ramp), 4).unwrap().abs() < 1e-6);
    }

    #[test]
    fn alignment_identity() {
        let s = gaussian(10, 4, 6);
        let t = gaussian(10, 4, 7);
        assert_eq!(teacher_alignment(s.view(), s.view()).unwrap(), 1.0);
        let a = teacher_alignment(s.view(), t.view()).unwrap();
        assert!((a + alignment_penalty(s.view(), t.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut x = gaussian(n, 5, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
            row[0] += if y == 1 { 4.0 } else { -4.0 };
        }
        (x, labels)
    }

    #[test]
    fn probe_separates_blobs_and_ignores_duplicates() {
        let (x, y) = blobs(400, 8);
        let split = ProbeSplit::holdout(400, 0.25, 1);
        let r = linear_probe(x.view(), &y, &split).unwrap();
        assert!(r.accuracy >= 0.99, "{r:?}");
        assert!(r.converged);
        let dup = ndarray::concatenate(Axis(1), &[x.view(), x.view()]).unwrap();
        assert_eq!(linear_probe(dup.view(), &y, &split).unwrap().accuracy, r.accuracy);
        assert!(linear_probe(x.view(), &vec![1; 400], &split).is_err());
    }

    #[test]
    fn probe_on_shuffled_labels_is_near_chance() {
        let (x, mut y) = blobs(600, 9);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let split = ProbeSplit::holdout(600, 0.5, 3);
        let acc = linear_probe(x.view(), &y, &split).unwrap().accuracy;
        let sigma = (0.25f64 / 300.0).sqrt();
        assert!((acc - 0.5).abs() < 3.0 * sigma, "{acc}");
    }

    #[test]
    fn report_json_uses_inf_sentinel() {
        let r = MetricsReport {
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            frechet_proxy: 0.0,
            seam_energy: 0.0,
            teacher_alignment: 1.0,
            probe_accuracy: None,
            reconstruction_mse: 0.0,
            euler_steps: 1,
            images: 2,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["psnr_db"], "inf");
        assert!(r.csv_row().starts_with("inf,1,"));
        assert_eq!(r.csv_row().split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
    }
}
