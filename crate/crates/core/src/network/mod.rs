//! Fully connected feedforward acoustic model: ReLU hidden layers, an affine
//! output layer and a softmax over phoneme units plus blank.

mod io;
mod kernels;

pub use io::{load_model, load_model_file, save_model, save_model_file, MODEL_MAGIC, MODEL_VERSION};

use crate::error::{KwsError, Result};
use crate::features::{CmvnStats, FrontendConfig};
use kernels::{affine_rows, axpy};

/// Index of the CTC blank in every inventory.
pub const BLANK: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    /// No hidden nonlinearity; only used to test the backward pass in closed form.
    Identity,
}

impl Nonlinearity {
    fn tag(self) -> u8 {
        match self {
            Nonlinearity::Relu => 0,
            Nonlinearity::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Nonlinearity::Relu),
            1 => Some(Nonlinearity::Identity),
            _ => None,
        }
    }
}

/// Weight matrix (row-major, `rows = n_out`, `cols = n_in`) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LayerParams {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn weight_row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights followed by bias.
    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// The complete model: layer stack, output inventory and the front-end
/// constants it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub layers: Vec<LayerParams>,
    pub nonlinearity: Nonlinearity,
    pub frontend: FrontendConfig,
    /// Unit names, blank first.
    pub inventory: Vec<String>,
    /// Global statistics of stacked training features, used to seed streaming CMVN.
    pub cmvn_mean: Vec<f64>,
    pub cmvn_var: Vec<f64>,
}

impl ModelParameters {
    /// A zero-initialized model. `hidden` lists the hidden layer widths.
    pub fn zeros(frontend: FrontendConfig, hidden: &[usize], inventory: Vec<String>) -> Self {
        let n0 = frontend.input_dim();
        let mut dims = vec![n0];
        dims.extend_from_slice(hidden);
        dims.push(inventory.len());
        let layers = dims
            .windows(2)
            .map(|d| LayerParams::zeros(d[1], d[0]))
            .collect();
        ModelParameters {
            layers,
            nonlinearity: Nonlinearity::Relu,
            frontend,
            inventory,
            cmvn_mean: vec![0.0; n0],
            cmvn_var: vec![1.0; n0],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// `[n0, n1, ..., n_out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    pub fn count_multiplies_per_frame(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn cmvn_prior(&self) -> CmvnStats {
        CmvnStats::from_prior(
            &self.cmvn_mean,
            &self.cmvn_var,
            self.frontend.cmvn_prior_frames,
            self.frontend.cmvn_variance_floor,
        )
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.inventory.iter().position(|u| u == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(KwsError::InvalidParams("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(KwsError::InvalidParams(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && l.cols != self.layers[i - 1].rows {
                return Err(KwsError::Shape {
                    layer: i,
                    expected: self.layers[i - 1].rows,
                    actual: l.cols,
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(KwsError::InvalidParams(format!("layer {i} has non-finite values")));
            }
        }
        if self.output_dim() != self.inventory.len() {
            return Err(KwsError::InvalidParams(format!(
                "output layer has {} units but inventory has {}",
                self.output_dim(),
                self.inventory.len()
            )));
        }
        if self.input_dim() != self.frontend.input_dim() {
            return Err(KwsError::InvalidParams(format!(
                "input layer expects {} dims, front end produces {}",
                self.input_dim(),
                self.frontend.input_dim()
            )));
        }
        if self.cmvn_mean.len() != self.input_dim() || self.cmvn_var.len() != self.input_dim() {
            return Err(KwsError::InvalidParams("CMVN prior dimension mismatch".into()));
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, the precision of the model file.
    pub fn snap_to_f32(&mut self) {
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    fn check_inputs<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<()> {
        let n0 = self.input_dim();
        match inputs.iter().find(|r| r.as_ref().len() != n0) {
            Some(bad) => Err(KwsError::Shape {
                layer: 0,
                expected: n0,
                actual: bad.as_ref().len(),
            }),
            None => Ok(()),
        }
    }

    fn run<R: AsRef<[f64]>>(&self, inputs: &[R], keep: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        self.check_inputs(inputs)?;
        let t = inputs.len();
        let mut x: Vec<f64> = Vec::with_capacity(t * self.input_dim());
        for r in inputs {
            x.extend_from_slice(r.as_ref());
        }
        let relu = self.nonlinearity == Nonlinearity::Relu;
        let mut hidden = Vec::new();
        let mut cur = x;
        let mut input = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let out = affine_rows(layer, &cur, t, relu && !last);
            let prev = std::mem::replace(&mut cur, out);
            if keep {
                if i == 0 {
                    input = prev;
                } else {
                    hidden.push(prev);
                }
            }
        }
        Ok((input, hidden, cur))
    }

    /// Posteriors for each input frame. Frames are computed independently, so
    /// splitting a sequence into batches does not change any row.
    pub fn forward<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<PosteriorGram> {
        let (_, _, logits) = self.run(inputs, false)?;
        Ok(PosteriorGram::from_logits(self.output_dim(), &logits))
    }

    /// Forward pass that keeps what [`ModelParameters::backward`] needs.
    pub fn forward_cached<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<(PosteriorGram, ForwardCache)> {
        let (input, hidden, logits) = self.run(inputs, true)?;
        let post = PosteriorGram::from_logits(self.output_dim(), &logits);
        Ok((
            post,
            ForwardCache {
                frames: inputs.len(),
                dims: self.dims(),
                input,
                hidden,
                logits,
            },
        ))
    }

    /// Parameter gradients given the loss gradient with respect to the
    /// logits (`frames x output_dim`, row-major). The ReLU derivative at 0 is 0.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        if cache.dims != self.dims() || cache.hidden.len() != self.num_hidden() {
            return Err(KwsError::Contract(
                "forward cache was produced by a model with different dimensions".into(),
            ));
        }
        let t = cache.frames;
        if grad_logits.len() != t * self.output_dim() {
            return Err(KwsError::Contract(format!(
                "grad_logits has {} values, expected {} frames x {} units",
                grad_logits.len(),
                t,
                self.output_dim()
            )));
        }
        let relu = self.nonlinearity == Nonlinearity::Relu;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };
            let g = &mut grads.layers[li];
            let (rows, cols) = (layer.rows, layer.cols);
            for o in 0..rows {
                let grow = &mut g.weights[o * cols..(o + 1) * cols];
                let mut gb = 0.0;
                for f in 0..t {
                    let d = delta[f * rows + o];
                    if d != 0.0 {
                        axpy(grow, d, &input[f * cols..(f + 1) * cols]);
                        gb += d;
                    }
                }
                g.bias[o] = gb;
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; t * cols];
            for f in 0..t {
                let p = &mut prev[f * cols..(f + 1) * cols];
                for o in 0..rows {
                    let d = delta[f * rows + o];
                    if d != 0.0 {
                        axpy(p, d, layer.weight_row(o));
                    }
                }
                if relu {
                    for (pv, &a) in p.iter_mut().zip(&input[f * cols..(f + 1) * cols]) {
                        if a <= 0.0 {
                            *pv = 0.0;
                        }
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }
}

/// Activations retained by [`ModelParameters::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    frames: usize,
    dims: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Output of hidden layer `i` (after the nonlinearity), row-major.
    pub fn hidden(&self, i: usize) -> &[f64] {
        &self.hidden[i]
    }

    /// Pre-softmax outputs, row-major.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Gradients shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParameters) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                ta.iter_mut().zip(tb).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)))
    }
}

/// Per-frame distributions over units (blank at index 0). Log-probabilities
/// are kept alongside so CTC scoring never takes the log of an underflowed 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGram {
    units: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl PosteriorGram {
    /// Row-wise softmax of `logits` (`frames x units`), max-subtracted.
    pub fn from_logits(units: usize, logits: &[f64]) -> Self {
        assert!(units > 0 && logits.len() % units == 0);
        let mut probs = Vec::with_capacity(logits.len());
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits.chunks_exact(units) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let log_z = max + sum.ln();
            for &z in row {
                let lp = z - log_z;
                log_probs.push(lp);
                probs.push(lp.exp());
            }
        }
        PosteriorGram {
            units,
            probs,
            log_probs,
        }
    }

    /// From explicit probability rows (each should sum to 1).
    pub fn from_probs(rows: &[Vec<f64>]) -> Self {
        let units = rows.first().map_or(1, Vec::len);
        let probs: Vec<f64> = rows.iter().flatten().copied().collect();
        assert!(rows.iter().all(|r| r.len() == units));
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        PosteriorGram {
            units,
            probs,
            log_probs,
        }
    }

    pub fn empty(units: usize) -> Self {
        PosteriorGram {
            units,
            probs: Vec::new(),
            log_probs: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.probs.len() / self.units
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.units..(t + 1) * self.units]
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.units..(t + 1) * self.units]
    }

    /// Rows `range` as a new posteriorgram.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PosteriorGram {
        let (a, b) = (range.start * self.units, range.end * self.units);
        PosteriorGram {
            units: self.units,
            probs: self.probs[a..b].to_vec(),
            log_probs: self.log_probs[a..b].to_vec(),
        }
    }

    pub fn push_rows(&mut self, other: &PosteriorGram) {
        assert_eq!(self.units, other.units);
        self.probs.extend_from_slice(&other.probs);
        self.log_probs.extend_from_slice(&other.log_probs);
    }

    /// Drops the first `n` rows.
    pub fn drop_front(&mut self, n: usize) {
        let k = (n * self.units).min(self.probs.len());
        self.probs.drain(..k);
        self.log_probs.drain(..k);
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::StackingParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_frontend(n0: usize) -> FrontendConfig {
        let mut f = FrontendConfig::default();
        f.frame.num_filters = n0;
        f.stacking = StackingParams {
            left_context: 0,
            right_context: 0,
        };
        f
    }

    fn units(n: usize) -> Vec<String> {
        (0..n).map(|i| if i == 0 { "<b>".into() } else { format!("u{i}") }).collect()
    }

    pub(crate) fn random_model(seed: u64, n0: usize, hidden: &[usize], out: usize) -> ModelParameters {
        let mut m = ModelParameters::zeros(tiny_frontend(n0), hidden, units(out));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut m.layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
        }
        m
    }

    fn random_inputs(seed: u64, t: usize, n0: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| (0..n0).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn zero_model_gives_uniform_posteriors() {
        for depth in 0..4 {
            let m = ModelParameters::zeros(tiny_frontend(5), &vec![7; depth], units(9));
            let y = m.forward(&vec![vec![0.0; 5]; 3]).unwrap();
            assert!(y.probs().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        }
    }

    #[test]
    fn relu_clips_negative_hidden_units() {
        let mut m = ModelParameters::zeros(tiny_frontend(2), &[2], units(2));
        m.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let (_, cache) = m.forward_cached(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(cache.hidden(0), &[3.0, 0.0]);
    }

    #[test]
    fn equal_logits_over_72_units() {
        let y = PosteriorGram::from_logits(72, &[1.0; 72]);
        assert!(y.row(0).iter().all(|&p| (p - 1.0 / 72.0).abs() < 1e-15));
    }

    #[test]
    fn shape_error_names_layer() {
        let m = random_model(1, 4, &[3], 3);
        match m.forward(&[vec![0.0; 5]]) {
            Err(KwsError::Shape { layer: 0, expected: 4, actual: 5 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn three_by_128_parameter_count() {
        let m = ModelParameters::zeros(FrontendConfig::default(), &[128, 128, 128], units(72));
        assert_eq!(m.input_dim(), 640);
        let formula = 640 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 72 + 72;
        assert_eq!(formula, 124_360);
        assert_eq!(m.count_parameters(), formula);
        assert_eq!(m.count_multiplies_per_frame(), formula - (128 * 3 + 72));
        let single = ModelParameters::zeros(tiny_frontend(2), &[], units(2));
        assert_eq!(single.count_parameters(), 6);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let m = random_model(2, 4, &[3], 3);
        let (_, cache) = m.forward_cached(&random_inputs(3, 5, 4)).unwrap();
        assert!(m.backward(&cache, &vec![0.0; 15]).unwrap().is_zero());
    }

    #[test]
    fn linear_output_gradient_is_outer_product() {
        let mut m = random_model(4, 3, &[4], 3);
        m.nonlinearity = Nonlinearity::Identity;
        let (_, cache) = m.forward_cached(&random_inputs(5, 1, 3)).unwrap();
        let g_logits = [0.3, -1.2, 0.5];
        let g = m.backward(&cache, &g_logits).unwrap();
        let h = cache.hidden(0);
        for o in 0..3 {
            for j in 0..4 {
                assert_eq!(g.layers[1].weights[o * 4 + j], g_logits[o] * h[j]);
            }
            assert_eq!(g.layers[1].bias[o], g_logits[o]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = random_model(1, 4, &[3], 3);
        let b = random_model(1, 4, &[5], 3);
        let (_, cache) = a.forward_cached(&random_inputs(1, 2, 4)).unwrap();
        assert!(matches!(b.backward(&cache, &[0.0; 6]), Err(KwsError::Contract(_))));
        assert!(matches!(a.backward(&cache, &[0.0; 5]), Err(KwsError::Contract(_))));
    }

    #[test]
    fn batching_does_not_change_rows() {
        let m = random_model(8, 6, &[16, 16], 5);
        let x = random_inputs(9, 37, 6);
        let whole = m.forward(&x).unwrap();
        let mut parts = m.forward(&x[..10]).unwrap();
        parts.push_rows(&m.forward(&x[10..11]).unwrap());
        parts.push_rows(&m.forward(&x[11..]).unwrap());
        assert_eq!(whole, parts);
    }

    /// Scalar loss L = sum_t sum_j c_tj * z_tj for fixed random c; its logit
    /// gradient is c, so backward(c) must match finite differences of L.
    #[test]
    fn backward_matches_finite_differences() {
        let (mut checked, mut skipped) = (0usize, 0usize);
        for seed in 0..20u64 {
            let depth = 1 + (seed % 3) as usize;
            let hidden: Vec<usize> = (0..depth).map(|i| 3 + ((seed as usize + i) % 6)).collect();
            let m = random_model(seed, 4, &hidden, 3);
            let x = random_inputs(100 + seed, 3, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let c: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |m: &ModelParameters| -> f64 {
                let (_, cache) = m.forward_cached(&x).unwrap();
                cache.logits().iter().zip(&c).map(|(z, c)| z * c).sum()
            };
            let pattern = |m: &ModelParameters| -> Vec<bool> {
                let (_, cache) = m.forward_cached(&x).unwrap();
                (0..m.num_hidden()).flat_map(|i| cache.hidden(i).iter().map(|&h| h > 0.0)).collect()
            };
            let (_, cache) = m.forward_cached(&x).unwrap();
            let g = m.backward(&cache, &c).unwrap();
            let eps = 1e-4;
            for li in 0..m.layers.len() {
                for which in 0..2 {
                    let n = m.layers[li].tensors()[which].len();
                    for k in 0..n {
                        let mut p = m.clone();
                        p.layers[li].tensors_mut()[which][k] += eps;
                        let mut q = m.clone();
                        q.layers[li].tensors_mut()[which][k] -= eps;
                        // a perturbation that flips a ReLU has no meaningful derivative
                        if pattern(&p) != pattern(&q) {
                            skipped += 1;
                            continue;
                        }
                        checked += 1;
                        let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                        let an = g.layers[li].tensors()[which][k];
                        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                        assert!(err < 1e-4, "seed {seed} layer {li} t{which}[{k}]: fd {fd} an {an}");
                    }
                }
            }
        }
        assert!(skipped * 100 < checked, "{skipped} kink crossings vs {checked} checks");
    }

    #[test]
    fn rows_sum_to_one_and_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..72 * 20).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let y = PosteriorGram::from_logits(72, &logits);
        let shifted: Vec<f64> = logits.iter().map(|z| z + 17.25).collect();
        let y2 = PosteriorGram::from_logits(72, &shifted);
        for t in 0..20 {
            let s: f64 = y.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y.row(t).iter().all(|&p| p > 0.0 && p <= 1.0));
            for (a, b) in y.row(t).iter().zip(y2.row(t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
