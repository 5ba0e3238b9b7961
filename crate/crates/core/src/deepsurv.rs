//! DeepSurv: a feed-forward network whose scalar output is the log-risk,
//! trained full-batch on the Cox negative log partial likelihood.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{grad_hess_with_order, nll_with_order, RiskOrder};
use crate::dataset::SurvivalDataset;
use crate::seed::rng_for;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeepSurvError {
    #[error("no events: the partial likelihood is undefined")]
    NoEvents,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at epoch {epoch} (trace: {trace:?})")]
    DivergedLoss { epoch: usize, trace: Vec<f64> },
    #[error("expected {expected} input features, found {found}")]
    FeatureMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Widths of every layer after the input; the last must be 1.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: Batch,
    pub weight_init_seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            layer_widths: vec![32, 32, 1],
            activation: Activation::Relu,
            dropout: 0.1,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 500,
            batch: Batch::FullBatch,
            weight_init_seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), DeepSurvError> {
        let bad = |m: &str| Err(DeepSurvError::InvalidConfig(m.to_string()));
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return bad("the output layer must have width 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// `z = h W^T + b`; `w` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepSurvModel {
    pub version: u32,
    pub config: MlpConfig,
    pub n_features: usize,
    pub layers: Vec<Layer>,
    pub train_loss_trace: Vec<f64>,
}

fn activate(a: Activation, z: &mut Array2<f64>) {
    match a {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

/// Derivative expressed through the activation output.
fn activation_grad(a: Activation, out: f64) -> f64 {
    match a {
        Activation::Relu => {
            if out > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - out * out,
    }
}

impl DeepSurvModel {
    /// Seeded initialization: He-uniform for ReLU, Xavier-uniform for Tanh
    /// and for the linear output layer; zero biases.
    pub fn init(n_features: usize, config: &MlpConfig) -> Result<Self, DeepSurvError> {
        config.validate()?;
        let mut rng = rng_for(config.weight_init_seed, "deepsurv/init");
        let mut fan_in = n_features;
        let last = config.layer_widths.len() - 1;
        let layers = config
            .layer_widths
            .iter()
            .enumerate()
            .map(|(l, &out)| {
                let bound = if l < last && config.activation == Activation::Relu {
                    (6.0 / fan_in.max(1) as f64).sqrt()
                } else {
                    (6.0 / (fan_in + out).max(1) as f64).sqrt()
                };
                let w = Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..=bound));
                fan_in = out;
                Layer { w, b: Array1::zeros(out) }
            })
            .collect();
        Ok(Self {
            version: MODEL_VERSION,
            config: config.clone(),
            n_features,
            layers,
            train_loss_trace: Vec::new(),
        })
    }

    /// Forward pass; `masks[l]` (already scaled by `1/(1-p)`) multiplies the
    /// output of hidden layer `l`. Returns every layer's output, input first.
    fn forward_all(&self, x: &Array2<f64>, masks: Option<&[Array2<f64>]>) -> Vec<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut outs = vec![x.to_owned()];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = outs[l].dot(&layer.w.t()) + &layer.b;
            if l < last {
                activate(self.config.activation, &mut z);
                if let Some(m) = masks {
                    z *= &m[l];
                }
            }
            outs.push(z);
        }
        outs
    }

    /// Log-risk `f(x)` for every row, dropout off.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let outs = self.forward_all(x, None);
        outs.last().unwrap().column(0).to_vec()
    }

    pub fn risk_score(&self, x: &[f64]) -> f64 {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.predict(&row)[0]
    }

    pub fn risk_scores(&self, x: &Array2<f64>) -> Vec<f64> {
        self.predict(x)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    pub fn set_params_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params(), "parameter vector length");
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = v[k];
                k += 1;
            }
            for b in l.b.iter_mut() {
                *b = v[k];
                k += 1;
            }
        }
    }

    /// Training loss `cox_nll / n_events` and its gradient with respect to
    /// [`Self::params_flat`], by backpropagation.
    pub fn loss_and_grad(
        &self,
        x: &Array2<f64>,
        order: &RiskOrder,
        event: &[bool],
        masks: Option<&[Array2<f64>]>,
    ) -> (f64, Vec<Layer>) {
        let outs = self.forward_all(x, masks);
        let f = outs.last().unwrap().column(0).to_vec();
        let scale = 1.0 / order.n_events as f64;
        let loss = nll_with_order(order, &f, event) * scale;
        let (g, _) = grad_hess_with_order(order, &f, event);
        let mut delta = Array2::from_shape_fn((f.len(), 1), |(i, _)| g[i] * scale);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &outs[l];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { w: gw, b: gb });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].w);
                // outs[l] is the post-activation (and post-dropout) output of layer l-1
                let act = self.config.activation;
                match masks {
                    Some(m) => {
                        let mask = &m[l - 1];
                        ndarray::Zip::from(&mut back).and(&outs[l]).and(mask).for_each(|d, &o, &mk| {
                            if mk == 0.0 {
                                *d = 0.0;
                            } else {
                                *d *= activation_grad(act, o / mk) * mk;
                            }
                        });
                    }
                    None => {
                        ndarray::Zip::from(&mut back)
                            .and(&outs[l])
                            .for_each(|d, &o| *d *= activation_grad(act, o));
                    }
                }
                delta = back;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn loss(&self, x: &Array2<f64>, time: &[f64], event: &[bool]) -> Result<f64, DeepSurvError> {
        if !event.iter().any(|e| *e) {
            return Err(DeepSurvError::NoEvents);
        }
        let order = RiskOrder::new(time, event);
        let f = self.predict(x);
        Ok(nll_with_order(&order, &f, event) / order.n_events as f64)
    }
}

fn flatten(grads: &[Layer]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in grads {
        v.extend(l.w.iter());
        v.extend(l.b.iter());
    }
    v
}

/// Loss and flat gradient at the model's current parameters, dropout off.
pub fn loss_and_flat_grad(model: &DeepSurvModel, x: &Array2<f64>, time: &[f64], event: &[bool]) -> (f64, Vec<f64>) {
    let order = RiskOrder::new(time, event);
    let (loss, g) = model.loss_and_grad(x, &order, event, None);
    (loss, flatten(&g))
}

fn dropout_masks(model: &DeepSurvModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let p = model.config.dropout;
    let keep = 1.0 / (1.0 - p);
    model.layers[..model.layers.len() - 1]
        .iter()
        .map(|l| Array2::from_shape_fn((n, l.b.len()), |_| if rng.random::<f64>() < p { 0.0 } else { keep }))
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

pub fn fit_deepsurv(ds: &SurvivalDataset, cfg: &MlpConfig) -> Result<DeepSurvModel, DeepSurvError> {
    cfg.validate()?;
    if ds.n_events() == 0 {
        return Err(DeepSurvError::NoEvents);
    }
    let mut model = DeepSurvModel::init(ds.p(), cfg)?;
    let x = ds.x.to_owned();
    let order = RiskOrder::new(&ds.time, &ds.event);
    let mut rng = rng_for(cfg.weight_init_seed, "deepsurv/dropout");
    let n_params = model.n_params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut params = model.params_flat();
    for epoch in 0..cfg.epochs {
        let masks = (cfg.dropout > 0.0).then(|| dropout_masks(&model, ds.n(), &mut rng));
        let (loss, grads) = model.loss_and_grad(&x, &order, &ds.event, masks.as_deref());
        let mut g = flatten(&grads);
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            model.train_loss_trace.push(loss);
            return Err(DeepSurvError::DivergedLoss {
                epoch,
                trace: model.train_loss_trace,
            });
        }
        model.train_loss_trace.push(loss);
        if let Some(clip) = cfg.clip_norm {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam => {
                adam.t += 1;
                let c1 = 1.0 - f64::powi(b1, adam.t);
                let c2 = 1.0 - f64::powi(b2, adam.t);
                for k in 0..n_params {
                    adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g[k];
                    adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g[k] * g[k];
                    let mh = adam.m[k] / c1;
                    let vh = adam.v[k] / c2;
                    params[k] -= cfg.learning_rate * mh / (vh.sqrt() + eps);
                }
            }
        }
        model.set_params_flat(&params);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> SurvivalDataset {
        let x = array![[0.5, -1.0], [1.5, 0.2], [-0.3, 0.7], [0.9, -0.4], [-1.2, 1.1], [0.1, 0.0]];
        SurvivalDataset::new(
            x,
            vec!["a".into(), "b".into()],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![true, false, true, true, false, true],
            (0..6).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_forward() {
        let cfg = MlpConfig {
            layer_widths: vec![2, 1],
            dropout: 0.0,
            ..MlpConfig::default()
        };
        let mut m = DeepSurvModel::init(2, &cfg).unwrap();
        m.layers[0].w = array![[1.0, -1.0], [0.5, 2.0]];
        m.layers[0].b = array![0.0, -1.0];
        m.layers[1].w = array![[2.0, -3.0]];
        m.layers[1].b = array![0.25];
        // x = (1, 2): hidden = relu(-1, 3.5) = (0, 3.5); out = -10.5 + 0.25
        assert_eq!(m.risk_score(&[1.0, 2.0]), -10.25);
        // x = (3, 0): hidden = relu(3, 0.5) = (3, 0.5); out = 6 - 1.5 + 0.25
        assert_eq!(m.risk_score(&[3.0, 0.0]), 4.75);
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut m = DeepSurvModel::init(3, &MlpConfig::default()).unwrap();
        let z = vec![0.0; m.n_params()];
        m.set_params_flat(&z);
        assert!(m.predict(&Array2::ones((4, 3))).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let cfg = MlpConfig {
            epochs: 0,
            ..MlpConfig::default()
        };
        let fit = fit_deepsurv(&toy(), &cfg).unwrap();
        let init = DeepSurvModel::init(2, &cfg).unwrap();
        assert_eq!(fit.layers, init.layers);
        assert!(fit.train_loss_trace.is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            let cfg = MlpConfig {
                layer_widths: vec![4, 3, 1],
                activation: act,
                dropout: 0.0,
                ..MlpConfig::default()
            };
            let ds = toy();
            let mut m = DeepSurvModel::init(2, &cfg).unwrap();
            // nonzero biases keep every pre-activation away from the ReLU kink
            for (l, layer) in m.layers.iter_mut().enumerate() {
                layer.b.iter_mut().enumerate().for_each(|(k, b)| *b = 0.1 + 0.05 * (k + l) as f64);
            }
            let (_, g) = loss_and_flat_grad(&m, &ds.x, &ds.time, &ds.event);
            let p0 = m.params_flat();
            for k in 0..p0.len() {
                let h = 1e-6;
                let mut mp = m.clone();
                let mut p = p0.clone();
                p[k] += h;
                mp.set_params_flat(&p);
                let up = mp.loss(&ds.x, &ds.time, &ds.event).unwrap();
                p[k] -= 2.0 * h;
                mp.set_params_flat(&p);
                let down = mp.loss(&ds.x, &ds.time, &ds.event).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{act:?} param {k}: fd {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            MlpConfig {
                layer_widths: vec![3, 2],
                ..MlpConfig::default()
            },
            MlpConfig {
                dropout: 1.0,
                ..MlpConfig::default()
            },
            MlpConfig {
                learning_rate: 0.0,
                ..MlpConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(DeepSurvError::InvalidConfig(_))));
        }
    }

    #[test]
    fn all_censored_is_error() {
        let mut ds = toy();
        ds.event = vec![false; 6];
        assert_eq!(fit_deepsurv(&ds, &MlpConfig::default()), Err(DeepSurvError::NoEvents));
    }
}
