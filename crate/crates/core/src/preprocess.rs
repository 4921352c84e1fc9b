//! Instance normalization, patching and patch embedding of hourly series.

use crate::autodiff::{kernels::gemm, ParamId, Scope, Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Lower bound applied to per-instance standard deviations.
pub const STD_EPS: f64 = 1e-5;

/// Mean and (guarded) population standard deviation of one channel of one
/// instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Batch of multivariate series shaped `(B, N, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub channel_names: Vec<String>,
    /// One entry per `(instance, channel)`, row-major; set once normalized.
    pub norm_stats: Option<Vec<NormStats>>,
}

impl SeriesBatch {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.ndim() != 3 {
            return dim_err(format!("series batch must be (B, N, L), got {:?}", values.shape()));
        }
        if channel_names.len() != values.shape()[1] {
            return dim_err(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.shape()[1]
            ));
        }
        Ok(Self {
            values,
            channel_names,
            norm_stats: None,
        })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Number of windows of length `patch` taken every `stride` steps from `len`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> usize {
    (len - patch) / stride + 1
}

/// Normalizes every `(instance, channel)` series to zero mean and unit
/// population standard deviation, recording the statistics.
pub fn instance_normalize(batch: &SeriesBatch) -> Result<SeriesBatch> {
    if batch.values.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Data("series contains NaN".into()));
    }
    let len = batch.steps();
    let mut out = batch.values.clone();
    let mut stats = Vec::with_capacity(batch.batch() * batch.channels());
    for row in out.data_mut().chunks_mut(len) {
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let std = var.sqrt().max(STD_EPS);
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
        stats.push(NormStats { mean, std });
    }
    Ok(SeriesBatch {
        values: out,
        channel_names: batch.channel_names.clone(),
        norm_stats: Some(stats),
    })
}

/// Maps normalized-space values `(B, N, …)` back through the stored
/// per-instance statistics.
pub fn denormalize(batch: &SeriesBatch, predictions: &Tensor) -> Result<Tensor> {
    let stats = batch
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::State("series batch has not been normalized".into()))?;
    let shape = predictions.shape();
    if shape.len() < 2 || shape[0] != batch.batch() || shape[1] != batch.channels() {
        return dim_err(format!(
            "predictions {shape:?} do not match batch ({}, {})",
            batch.batch(),
            batch.channels()
        ));
    }
    let per = predictions.len() / stats.len();
    let mut out = predictions.clone();
    for (chunk, s) in out.data_mut().chunks_mut(per).zip(stats) {
        for v in chunk {
            *v = *v * s.std + s.mean;
        }
    }
    Ok(out)
}

/// Cuts each series into windows `[t·S, t·S + P)`; a trailing remainder
/// shorter than `P` is dropped. Returns `(B, N, T, P)`.
pub fn patch(batch: &SeriesBatch, patch_size: usize, stride: usize) -> Result<Tensor> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::Contract("patch size and stride must be positive".into()));
    }
    let len = batch.steps();
    if len < patch_size {
        return Err(Error::Data(format!(
            "series length {len} is shorter than the patch size {patch_size}"
        )));
    }
    let t = patch_count(len, patch_size, stride);
    let mut out = Vec::with_capacity(batch.batch() * batch.channels() * t * patch_size);
    for series in batch.values.data().chunks(len) {
        for w in 0..t {
            out.extend_from_slice(&series[w * stride..w * stride + patch_size]);
        }
    }
    Tensor::new(vec![batch.batch(), batch.channels(), t, patch_size], out)
}

/// Embedded patch tokens shaped `(B, N, T, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

/// Projects every length-`P` window to a length-`C` token with one shared
/// `(P, C)` matrix.
pub fn embed_patches(windows: &Tensor, projection: &Tensor, stride: usize) -> Result<PatchTokens> {
    let ws = windows.shape();
    let ps = projection.shape();
    if ws.len() != 4 || ps.len() != 2 || ws[3] != ps[0] {
        return dim_err(format!("cannot embed windows {ws:?} with projection {ps:?}"));
    }
    let (p, c) = (ps[0], ps[1]);
    let rows = windows.len() / p;
    let mut out = vec![0.0; rows * c];
    gemm(rows, p, c, windows.data(), false, projection.data(), false, &mut out, false);
    Ok(PatchTokens {
        tokens: Tensor::new(vec![ws[0], ws[1], ws[2], c], out)?,
        patch_size: p,
        stride,
        embed_dim: c,
    })
}

/// Learnable patch projection used inside a model.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbedding {
    pub projection: ParamId,
}

impl PatchEmbedding {
    /// `windows (…, P) → tokens (…, C)` on the tape.
    pub fn forward(&self, scope: &mut Scope, windows: Var) -> Result<Var> {
        let w = scope.param(self.projection)?;
        scope.tape.matmul(windows, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(b: usize, n: usize, data: Vec<f64>) -> SeriesBatch {
        let l = data.len() / (b * n);
        let names = (0..n).map(|i| format!("c{i}")).collect();
        SeriesBatch::new(Tensor::new(vec![b, n, l], data).unwrap(), names).unwrap()
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let out = instance_normalize(&batch(1, 1, vec![5.0; 4])).unwrap();
        assert_eq!(out.values.data(), &[0.0; 4]);
        let s = out.norm_stats.unwrap()[0];
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, STD_EPS);
    }

    #[test]
    fn two_point_series_uses_population_std() {
        let out = instance_normalize(&batch(1, 1, vec![1.0, 3.0])).unwrap();
        assert_eq!(out.values.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn nan_input_is_a_data_error() {
        let r = instance_normalize(&batch(1, 1, vec![1.0, f64::NAN]));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn random_series_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..3 * 2 * 50).map(|_| rng.random_range(-40.0..90.0)).collect();
        let out = instance_normalize(&batch(3, 2, data)).unwrap();
        // recompute moments independently
        for row in out.values.data().chunks(50) {
            let mean = row.iter().sum::<f64>() / 50.0;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn denormalize_known_stats() {
        let mut b = batch(1, 1, vec![0.0; 2]);
        b.norm_stats = Some(vec![NormStats { mean: 10.0, std: 2.0 }]);
        let p = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        assert_eq!(denormalize(&b, &p).unwrap().data(), &[13.0]);
    }

    #[test]
    fn denormalize_requires_stats() {
        let b = batch(1, 1, vec![0.0; 2]);
        let p = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(denormalize(&b, &p), Err(Error::State(_))));
    }

    #[test]
    fn round_trip_on_many_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..100 * 48).map(|_| rng.random_range(-5.0..200.0)).collect();
        let orig = batch(25, 4, data);
        let norm = instance_normalize(&orig).unwrap();
        let back = denormalize(&norm, &norm.values).unwrap();
        assert!(back.max_abs_diff(&orig.values) < 1e-9);
    }

    #[test]
    fn patching_geometry() {
        let b = batch(1, 1, (0..240).map(f64::from).collect());
        let w = patch(&b, 24, 24).unwrap();
        assert_eq!(w.shape(), &[1, 1, 10, 24]);
        assert_eq!(w.at(&[0, 0, 3, 0]), 72.0);

        let b = batch(1, 1, (0..24).map(f64::from).collect());
        let w = patch(&b, 24, 24).unwrap();
        assert_eq!(w.data(), b.values.data());

        let b = batch(1, 1, (0..30).map(f64::from).collect());
        let w = patch(&b, 24, 24).unwrap();
        assert_eq!(w.shape(), &[1, 1, 1, 24]);
        assert_eq!(w.data().last(), Some(&23.0));

        let b = batch(1, 1, vec![0.0; 10]);
        assert!(matches!(patch(&b, 24, 24), Err(Error::Data(_))));
    }

    #[test]
    fn patch_count_matches_enumeration() {
        for p in [1usize, 3, 24] {
            for l in p..=4 * p {
                for s in 1..=p {
                    let mut windows = 0;
                    let mut start = 0;
                    while start + p <= l {
                        windows += 1;
                        start += s;
                    }
                    assert_eq!(patch_count(l, p, s), windows, "L={l} P={p} S={s}");
                }
            }
        }
    }

    #[test]
    fn embedding_identity_and_zero() {
        let b = batch(2, 3, (0..2 * 3 * 8).map(f64::from).collect());
        let w = patch(&b, 4, 4).unwrap();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let tok = embed_patches(&w, &eye, 4).unwrap();
        assert_eq!(tok.tokens.data(), w.data());
        let zero = Tensor::zeros(&[4, 128]);
        let tok = embed_patches(&w, &zero, 4).unwrap();
        assert!(tok.tokens.data().iter().all(|&v| v == 0.0));
        assert_eq!(tok.tokens.shape(), &[2, 3, 2, 128]);
        let bad = Tensor::zeros(&[5, 8]);
        assert!(matches!(embed_patches(&w, &bad, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn day_patch_geometry_token_dim() {
        let b = batch(1, 5, vec![1.0; 5 * 240]);
        let w = patch(&b, 24, 24).unwrap();
        let tok = embed_patches(&w, &Tensor::full(&[24, 128], 0.01), 24).unwrap();
        assert_eq!(tok.tokens.shape(), &[1, 5, 10, 128]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 30).map(|_| rng.random_range(0.0..50.0)).collect();
        let once = instance_normalize(&batch(2, 2, data)).unwrap();
        let twice = instance_normalize(&once).unwrap();
        assert!(twice.values.max_abs_diff(&once.values) < 1e-6);
    }

    #[test]
    fn tokens_are_channel_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..3 * 48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = batch(1, 3, data.clone());
        let mut permuted = Vec::new();
        for ch in [2usize, 0, 1] {
            permuted.extend_from_slice(&data[ch * 48..(ch + 1) * 48]);
        }
        let bp = batch(1, 3, permuted);
        let proj = Tensor::from_fn(&[24, 6], |i| (i as f64 * 0.37).sin());
        let t = embed_patches(&patch(&b, 24, 24).unwrap(), &proj, 24).unwrap().tokens;
        let tp = embed_patches(&patch(&bp, 24, 24).unwrap(), &proj, 24).unwrap().tokens;
        let per = 2 * 6;
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
            assert_eq!(&tp.data()[dst * per..(dst + 1) * per], &t.data()[src * per..(src + 1) * per]);
        }
    }
}
