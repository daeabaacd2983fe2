use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, LearningError};
use crate::rng;
use crate::vector::{GradientVector, VectorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Multinomial logistic regression.
    LogisticRegression,
    /// One tanh hidden layer followed by a softmax output.
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn param_count(&self, n_features: usize, n_classes: usize) -> usize {
        match *self {
            Architecture::LogisticRegression => n_classes * n_features + n_classes,
            Architecture::Mlp { hidden } => {
                hidden * n_features + hidden + n_classes * hidden + n_classes
            }
        }
    }
}

/// A classifier with a flat parameter vector.
///
/// Layouts (row-major weights, then biases):
/// - logistic regression: `W[n_classes][n_features]`, `b[n_classes]`
/// - MLP: `W1[hidden][n_features]`, `b1[hidden]`, `W2[n_classes][hidden]`,
///   `b2[n_classes]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    n_features: usize,
    n_classes: usize,
    params: Vec<f64>,
}

impl Model {
    /// Logistic regression starts at zero; the MLP gets a seeded
    /// Glorot-uniform initialisation so its hidden units are not symmetric.
    pub fn new(
        arch: Architecture,
        n_features: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, LearningError> {
        if n_features == 0 || n_classes < 2 {
            return Err(LearningError::InvalidTraining(
                "models need n_features >= 1 and n_classes >= 2".into(),
            ));
        }
        let mut params = vec![0.0; arch.param_count(n_features, n_classes)];
        if let Architecture::Mlp { hidden } = arch {
            if hidden == 0 {
                return Err(LearningError::InvalidTraining(
                    "MLP hidden width is 0".into(),
                ));
            }
            let mut r = rng::stream(seed, "model/init", &[]);
            let w1 = hidden * n_features;
            let limit1 = (6.0 / (n_features + hidden) as f64).sqrt();
            let u1 = Uniform::new_inclusive(-limit1, limit1);
            params[..w1].iter_mut().for_each(|p| *p = u1.sample(&mut r));
            let w2_start = w1 + hidden;
            let limit2 = (6.0 / (hidden + n_classes) as f64).sqrt();
            let u2 = Uniform::new_inclusive(-limit2, limit2);
            params[w2_start..w2_start + n_classes * hidden]
                .iter_mut()
                .for_each(|p| *p = u2.sample(&mut r));
        }
        Ok(Self {
            arch,
            n_features,
            n_classes,
            params,
        })
    }

    pub fn from_params(
        arch: Architecture,
        n_features: usize,
        n_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self, LearningError> {
        let expected = arch.param_count(n_features, n_classes);
        if params.len() != expected {
            return Err(VectorError::DimensionMismatch {
                expected,
                actual: params.len(),
            }
            .into());
        }
        if let Some((index, &value)) = params.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VectorError::NonFinite { index, value }.into());
        }
        Ok(Self {
            arch,
            n_features,
            n_classes,
            params,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// `params + update`; pure.
    pub fn apply_update(&self, update: &GradientVector) -> Result<Model, LearningError> {
        update.check_dim(self.dim())?;
        let params = self
            .params
            .iter()
            .zip(update.values())
            .map(|(p, g)| p + g)
            .collect();
        Model::from_params(self.arch, self.n_features, self.n_classes, params)
    }

    /// Parameter difference `self - other` as a vector.
    pub fn delta_from(&self, other: &Model) -> Result<GradientVector, LearningError> {
        if other.dim() != self.dim() {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            }
            .into());
        }
        Ok(GradientVector::new(
            self.params
                .iter()
                .zip(&other.params)
                .map(|(a, b)| a - b)
                .collect(),
        )?)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_features(&self, data: &Dataset) -> Result<(), LearningError> {
        if data.n_features() != self.n_features {
            return Err(LearningError::FeatureMismatch {
                expected: self.n_features,
                actual: data.n_features(),
            });
        }
        Ok(())
    }

    /// Output logits for one sample; `hidden` receives the tanh activations
    /// for the MLP (left empty for logistic regression).
    fn forward(&self, x: &[f64], hidden_out: &mut Vec<f64>, logits: &mut [f64]) {
        let (nf, nc) = (self.n_features, self.n_classes);
        match self.arch {
            Architecture::LogisticRegression => {
                let (w, b) = self.params.split_at(nc * nf);
                for (k, logit) in logits.iter_mut().enumerate() {
                    *logit = b[k] + dot(&w[k * nf..(k + 1) * nf], x);
                }
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * nf);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(nc * hidden);
                hidden_out.clear();
                hidden_out.extend(
                    (0..hidden).map(|j| (b1[j] + dot(&w1[j * nf..(j + 1) * nf], x)).tanh()),
                );
                for (k, logit) in logits.iter_mut().enumerate() {
                    *logit = b2[k] + dot(&w2[k * hidden..(k + 1) * hidden], hidden_out);
                }
            }
        }
    }

    /// Predicted class for each row: argmax of the logits, ties broken toward
    /// the lowest class index.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>, LearningError> {
        self.check_features(data)?;
        let mut hidden = Vec::new();
        let mut logits = vec![0.0; self.n_classes];
        Ok((0..data.len())
            .map(|i| {
                self.forward(data.row(i), &mut hidden, &mut logits);
                argmax(&logits)
            })
            .collect())
    }

    /// Fraction of correctly classified samples.
    pub fn evaluate(&self, test: &Dataset) -> Result<f64, LearningError> {
        let predictions = self.predict(test)?;
        let correct = predictions
            .iter()
            .zip(test.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / test.len() as f64)
    }

    /// Mean softmax cross-entropy over `rows` and its gradient with respect to
    /// the parameters (written into `grad`, which is overwritten).
    pub(crate) fn loss_and_grad(&self, data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64 {
        let (nf, nc) = (self.n_features, self.n_classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hidden = Vec::new();
        let mut logits = vec![0.0; nc];
        let mut delta = vec![0.0; nc];
        let mut loss = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let x = data.row(i);
            let y = data.labels()[i];
            self.forward(x, &mut hidden, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            loss += (z.ln() + max - logits[y]) * scale;
            for k in 0..nc {
                delta[k] = ((logits[k] - max).exp() / z - f64::from(u8::from(k == y))) * scale;
            }
            match self.arch {
                Architecture::LogisticRegression => {
                    let (gw, gb) = grad.split_at_mut(nc * nf);
                    for k in 0..nc {
                        axpy(delta[k], x, &mut gw[k * nf..(k + 1) * nf]);
                        gb[k] += delta[k];
                    }
                }
                Architecture::Mlp { hidden: h } => {
                    let w2 = &self.params[h * nf + h..h * nf + h + nc * h];
                    let (gw1, rest) = grad.split_at_mut(h * nf);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(nc * h);
                    let mut back = vec![0.0; h];
                    for k in 0..nc {
                        axpy(delta[k], &hidden, &mut gw2[k * h..(k + 1) * h]);
                        gb2[k] += delta[k];
                        axpy(delta[k], &w2[k * h..(k + 1) * h], &mut back);
                    }
                    for j in 0..h {
                        let dz = back[j] * (1.0 - hidden[j] * hidden[j]);
                        axpy(dz, x, &mut gw1[j * nf..(j + 1) * nf]);
                        gb1[j] += dz;
                    }
                }
            }
        }
        loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{BlobGenerator, BlobSpec};

    fn blobs(n: usize, classes: usize, seed: u64) -> Dataset {
        let spec = BlobSpec {
            n_features: 5,
            n_classes: classes,
            separation: 1.0,
            noise: 1.0,
        };
        BlobGenerator::new(spec, seed)
            .unwrap()
            .sample(n, seed + 1)
            .unwrap()
    }

    #[test]
    fn constant_class_zero_predictor() {
        // Zero logistic regression: all logits tie, argmax picks class 0.
        let m = Model::new(Architecture::LogisticRegression, 2, 3, 0).unwrap();
        let all_zero = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, vec![0, 0], 3).unwrap();
        let no_zero = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, vec![1, 2], 3).unwrap();
        assert_eq!(m.evaluate(&all_zero).unwrap(), 1.0);
        assert_eq!(m.evaluate(&no_zero).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_matches_independent_argmax_loop() {
        let data = blobs(200, 10, 3);
        let mut r = rng::stream(42, "test", &[]);
        let u = Uniform::new(-1.0, 1.0);
        let params: Vec<f64> = (0..10 * 5 + 10).map(|_| u.sample(&mut r)).collect();
        let model =
            Model::from_params(Architecture::LogisticRegression, 5, 10, params.clone()).unwrap();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let x = data.row(i);
            let mut best_k = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..10 {
                let mut v = params[50 + k];
                for f in 0..5 {
                    v += params[k * 5 + f] * x[f];
                }
                if v > best_v {
                    best_v = v;
                    best_k = k;
                }
            }
            correct += usize::from(best_k == data.labels()[i]);
        }
        assert_eq!(model.evaluate(&data).unwrap(), correct as f64 / 200.0);
    }

    #[test]
    fn feature_mismatch_is_an_error() {
        let m = Model::new(Architecture::LogisticRegression, 3, 2, 0).unwrap();
        let d = Dataset::new(vec![1.0, 2.0], 2, vec![0], 2).unwrap();
        assert!(matches!(
            m.evaluate(&d),
            Err(LearningError::FeatureMismatch { .. })
        ));
    }

    #[test]
    fn apply_update_is_exact_addition() {
        let m = Model::new(Architecture::Mlp { hidden: 4 }, 3, 2, 9).unwrap();
        let g = GradientVector::new((0..m.dim()).map(|i| i as f64 * 0.25 - 2.0).collect()).unwrap();
        assert_eq!(m.apply_update(&GradientVector::zeros(m.dim())).unwrap(), m);
        assert!(m.apply_update(&GradientVector::zeros(m.dim() + 1)).is_err());

        // Arbitrary floats: inverse holds to rounding.
        let back = m
            .apply_update(&g)
            .unwrap()
            .apply_update(&g.scale(-1.0))
            .unwrap();
        for (a, b) in back.params().iter().zip(m.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Dyadic parameters: no rounding occurs, so the inverse is exact.
        let grid = Model::from_params(
            m.arch(),
            3,
            2,
            (0..m.dim()).map(|i| i as f64 / 8.0 - 1.0).collect(),
        )
        .unwrap();
        assert_eq!(
            grid.apply_update(&g)
                .unwrap()
                .apply_update(&g.scale(-1.0))
                .unwrap(),
            grid
        );
    }

    /// Central finite differences against the analytic gradient, both
    /// architectures.
    #[test]
    fn gradients_match_finite_differences() {
        let data = blobs(12, 3, 11);
        let rows: Vec<usize> = (0..12).collect();
        for arch in [
            Architecture::LogisticRegression,
            Architecture::Mlp { hidden: 4 },
        ] {
            let mut model = Model::new(arch, 5, 3, 17).unwrap();
            let mut r = rng::stream(1, "fd", &[]);
            let u = Uniform::new(-0.5, 0.5);
            model
                .params_mut()
                .iter_mut()
                .for_each(|p| *p += u.sample(&mut r));
            let mut grad = vec![0.0; model.dim()];
            model.loss_and_grad(&data, &rows, &mut grad);
            let mut scratch = vec![0.0; model.dim()];
            let h = 1e-6;
            for (i, &g) in grad.iter().enumerate() {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.loss_and_grad(&data, &rows, &mut scratch)
                    - minus.loss_and_grad(&data, &rows, &mut scratch))
                    / (2.0 * h);
                assert!((fd - g).abs() < 1e-6, "{arch:?} param {i}: {fd} vs {g}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn accuracy_is_bounded(seed: u64) {
            let data = blobs(30, 4, seed % 1000);
            let mut model = Model::new(Architecture::Mlp { hidden: 3 }, 5, 4, seed).unwrap();
            let mut r = rng::stream(seed, "p", &[]);
            let u = Uniform::new(-3.0, 3.0);
            model.params_mut().iter_mut().for_each(|p| *p = u.sample(&mut r));
            let acc = model.evaluate(&data).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&acc));
        }

        #[test]
        fn apply_update_composes(a in proptest::collection::vec(-10.0f64..10.0, 33), b in proptest::collection::vec(-10.0f64..10.0, 33)) {
            let m = Model::new(Architecture::LogisticRegression, 10, 3, 0).unwrap();
            let ga = GradientVector::new(a).unwrap();
            let gb = GradientVector::new(b).unwrap();
            let once = m.apply_update(&ga.add(&gb).unwrap()).unwrap();
            let twice = m.apply_update(&ga).unwrap().apply_update(&gb).unwrap();
            // Starting from zero parameters: 0+(a+b) and (0+a)+b agree exactly.
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
