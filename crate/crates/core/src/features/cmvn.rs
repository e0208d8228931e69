use super::StackedFeatureVector;
use crate::error::{KwsError, Result};

/// Running per-dimension mean and variance (Welford accumulation).
///
/// `count` is real-valued so a stored prior can enter with a pseudo-count.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    variance_floor: f64,
}

impl CmvnStats {
    pub fn new(dim: usize, variance_floor: f64) -> Self {
        CmvnStats {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            variance_floor,
        }
    }

    /// Starts from known statistics weighted as `count` observations.
    pub fn from_prior(mean: &[f64], variance: &[f64], count: f64, variance_floor: f64) -> Self {
        assert_eq!(mean.len(), variance.len());
        CmvnStats {
            count: count.max(0.0),
            mean: mean.to_vec(),
            m2: variance.iter().map(|v| v.max(0.0) * count.max(0.0)).collect(),
            variance_floor,
        }
    }

    /// Exact statistics of a set of vectors.
    pub fn from_vectors<'a, I>(dim: usize, vectors: I, variance_floor: f64) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut s = CmvnStats::new(dim, variance_floor);
        for v in vectors {
            s.update(v);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count > 0.0 {
            self.m2.iter().map(|m| (m / self.count).max(0.0)).collect()
        } else {
            vec![0.0; self.dim()]
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1.0;
        for ((m, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *m2 += d * (v - *m);
        }
    }

    /// Normalizes with the current statistics without updating them. With no
    /// observations yet the input passes through; dimensions whose variance is
    /// under the floor map to exactly zero.
    pub fn normalize_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.count <= 0.0 {
            out.extend_from_slice(x);
            return;
        }
        out.extend(x.iter().zip(&self.mean).zip(&self.m2).map(|((&v, &m), &m2)| {
            let var = (m2 / self.count).max(0.0);
            if var < self.variance_floor {
                0.0
            } else {
                (v - m) / var.sqrt()
            }
        }));
    }

    /// Normalizes `x` with everything seen so far, then folds `x` in.
    pub fn normalize_then_update(&mut self, x: &[f64], out: &mut Vec<f64>) {
        self.normalize_into(x, out);
        self.update(x);
    }
}

pub enum CmvnMode<'a> {
    /// Zero mean, unit variance per dimension over the utterance.
    PerUtterance { variance_floor: f64 },
    /// Each vector is normalized with the running statistics accumulated
    /// before it and then added to them, so results do not depend on how a
    /// stream is chunked.
    Streaming(&'a mut CmvnStats),
}

pub fn apply_cmvn(
    vectors: &[StackedFeatureVector],
    mode: CmvnMode<'_>,
) -> Result<Vec<StackedFeatureVector>> {
    match mode {
        CmvnMode::PerUtterance { variance_floor } => {
            if vectors.len() < 2 {
                return Err(KwsError::InsufficientData(format!(
                    "per-utterance CMVN needs at least 2 vectors, got {}",
                    vectors.len()
                )));
            }
            let dim = vectors[0].0.len();
            let n = vectors.len() as f64;
            let mut mean = vec![0.0; dim];
            for v in vectors {
                for (m, x) in mean.iter_mut().zip(&v.0) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; dim];
            for v in vectors {
                for ((s, x), m) in var.iter_mut().zip(&v.0).zip(&mean) {
                    *s += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            Ok(vectors
                .iter()
                .map(|v| {
                    StackedFeatureVector(
                        v.0.iter()
                            .zip(&mean)
                            .zip(&var)
                            .map(|((x, m), &s)| {
                                if s < variance_floor {
                                    0.0
                                } else {
                                    (x - m) / s.sqrt()
                                }
                            })
                            .collect(),
                    )
                })
                .collect())
        }
        CmvnMode::Streaming(stats) => Ok(vectors
            .iter()
            .map(|v| {
                let mut out = Vec::with_capacity(v.0.len());
                stats.normalize_then_update(&v.0, &mut out);
                StackedFeatureVector(out)
            })
            .collect()),
    }
}
