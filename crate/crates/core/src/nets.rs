//! Fully connected networks for daily totals (T) and hourly shares (D).
//!
//! Layers are dense with a shared activation; the loss is mean squared
//! error averaged over samples and outputs. Training is minibatch gradient
//! descent with a seeded shuffle, so a fixed seed reproduces the exact
//! parameter trajectory.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{denormalize_total, Dataset, EnvFeatures, NormalizationInfo, ENV_WIDTH};
use crate::ingest::HOURS;
use crate::metrics::median;
use crate::predictor::{check_input, ModelError, Predictor, SavedModel, Target, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Logistic function on hidden and output layers.
    #[default]
    Sigmoid,
    Tanh,
    Relu,
    /// Logistic hidden layers with a softmax output layer.
    SoftmaxOutput,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "softmax" | "softmax_output" => Some(Activation::SoftmaxOutput),
            _ => None,
        }
    }

    fn hidden(self) -> Elementwise {
        match self {
            Activation::Sigmoid | Activation::SoftmaxOutput => Elementwise::Sigmoid,
            Activation::Tanh => Elementwise::Tanh,
            Activation::Relu => Elementwise::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
}

impl Elementwise {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Elementwise::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Elementwise::Tanh => z.tanh(),
            Elementwise::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a`.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Elementwise::Sigmoid => a * (1.0 - a),
            Elementwise::Tanh => 1.0 - a * a,
            Elementwise::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub output_width: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(target: Target, hidden_widths: Vec<usize>) -> Self {
        MlpSpec {
            input_width: ENV_WIDTH,
            hidden_widths,
            output_width: target.width(),
            activation: Activation::Sigmoid,
        }
    }

    /// Six hidden layers of 36 units, one output.
    pub fn network_t() -> Self {
        Self::new(Target::Total, vec![36; 6])
    }

    /// Seven hidden layers of 82 units, 24 outputs.
    pub fn network_d() -> Self {
        Self::new(Target::Hourly, vec![82; 7])
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Parses `7x82` (seven layers of 82) or an explicit list `36,36,24`.
    pub fn parse_hidden(s: &str) -> Option<Vec<usize>> {
        let s = s.trim();
        if let Some((n, w)) = s.split_once(['x', 'X']) {
            let n: usize = n.trim().parse().ok()?;
            let w: usize = w.trim().parse().ok()?;
            return (w > 0).then(|| vec![w; n]);
        }
        if s.is_empty() {
            return Some(Vec::new());
        }
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse().ok())
            .collect::<Option<_>>()?;
        v.iter().all(|&w| w > 0).then_some(v)
    }

    pub fn label(&self) -> String {
        match self.hidden_widths.first() {
            Some(&w) if self.hidden_widths.iter().all(|&x| x == w) => {
                format!("{}x{}", self.hidden_widths.len(), w)
            }
            _ => self
                .hidden_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_width == 0 || self.output_width == 0 || self.hidden_widths.contains(&0) {
            return Err(ModelError::Invalid(format!("layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.hidden_widths);
        w.push(self.output_width);
        w
    }
}

/// A trained or freshly initialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpFile", try_from = "MlpFile")]
pub struct MlpModel {
    pub kind: Target,
    pub spec: MlpSpec,
    /// Per layer, `(out, in)`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub norm_info: NormalizationInfo,
    pub format_version: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpFile {
    format_version: u32,
    spec: MlpSpec,
    /// Row-major `(out, in)` per layer.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    norm_info: NormalizationInfo,
}

impl From<MlpModel> for MlpFile {
    fn from(m: MlpModel) -> Self {
        MlpFile {
            format_version: m.format_version,
            weights: m
                .weights
                .iter()
                .map(|w| w.outer_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: m.biases.iter().map(|b| b.to_vec()).collect(),
            spec: m.spec,
            norm_info: m.norm_info,
        }
    }
}

impl TryFrom<MlpFile> for MlpModel {
    type Error = String;
    fn try_from(f: MlpFile) -> Result<Self, String> {
        let kind = match f.spec.output_width {
            1 => Target::Total,
            HOURS => Target::Hourly,
            w => return Err(format!("output width {w} is neither 1 nor 24")),
        };
        let mut weights = Vec::with_capacity(f.weights.len());
        for rows in f.weights {
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != c) {
                return Err("ragged weight matrix".into());
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(Array2::from_shape_vec((r, c), flat).map_err(|e| e.to_string())?);
        }
        let m = MlpModel {
            kind,
            spec: f.spec,
            weights,
            biases: f.biases.into_iter().map(Array1::from).collect(),
            norm_info: f.norm_info,
            format_version: f.format_version,
        };
        m.validate().map_err(|e| e.to_string())?;
        Ok(m)
    }
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    fn zeros_like(m: &MlpModel) -> Self {
        Grads {
            weights: m.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: m.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flat parameter addressing: layer by layer, weights row-major then bias.
    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if i < w.len() {
                return w.as_slice().expect("contiguous")[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range");
    }
}

/// Initializes weights uniformly in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_model(spec: &MlpSpec, norm_info: NormalizationInfo, seed: u64) -> Result<MlpModel, ModelError> {
    spec.validate()?;
    let kind = match spec.output_width {
        1 => Target::Total,
        HOURS => Target::Hourly,
        w => return Err(ModelError::Invalid(format!("output width {w} is neither 1 nor 24"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = spec.widths();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpModel {
        kind,
        spec: spec.clone(),
        weights,
        biases,
        norm_info,
        format_version: FORMAT_VERSION,
    })
}

impl MlpModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.spec.validate()?;
        let widths = self.spec.widths();
        if self.weights.len() != widths.len() - 1 || self.biases.len() != widths.len() - 1 {
            return Err(ModelError::Invalid("layer count does not match spec".into()));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if self.weights[l].dim() != (pair[1], pair[0]) || self.biases[l].len() != pair[1] {
                return Err(ModelError::Invalid(format!("layer {l} shape does not match spec")));
            }
        }
        if !self.all_finite() {
            return Err(ModelError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return &mut w.as_slice_mut().expect("contiguous")[i];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn param(&mut self, index: usize) -> f64 {
        *self.param_mut(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.param_mut(index) = value;
    }

    /// Activations of every layer for a batch (rows are samples); entry 0 is the input.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let hidden = self.spec.activation.hidden();
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l == last && self.spec.activation == Activation::SoftmaxOutput {
                for mut row in z.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row /= s;
                }
            } else {
                z.mapv_inplace(|v| hidden.apply(v));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_input(x)?;
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let out = self.forward_batch(&xb).pop().expect("at least one layer");
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Mean squared error over a batch and its gradient.
    pub fn loss_and_grad(&self, x: &Array2<f64>, t: &Array2<f64>) -> (f64, Grads) {
        let acts = self.forward_batch(x);
        let y = acts.last().expect("output");
        let n = (y.nrows() * y.ncols()) as f64;
        let diff = y - t;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mut g = diff * (2.0 / n);

        let hidden = self.spec.activation.hidden();
        let mut delta = if self.spec.activation == Activation::SoftmaxOutput {
            let mut d = g.clone();
            for (mut drow, (grow, yrow)) in d.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows())) {
                let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut drow)
                    .and(&grow)
                    .and(&yrow)
                    .for_each(|d, &gv, &yv| *d = yv * (gv - dot));
            }
            d
        } else {
            Zip::from(&mut g).and(y).for_each(|gv, &a| *gv *= hidden.slope(a));
            g
        };

        let mut grads = Grads::zeros_like(self);
        for l in (0..self.weights.len()).rev() {
            grads.weights[l] = delta.t().dot(&acts[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.weights[l]);
                Zip::from(&mut next).and(&acts[l]).for_each(|d, &a| *d *= hidden.slope(a));
                delta = next;
            }
        }
        (loss, grads)
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let y = self.forward_batch(x).pop().expect("output");
        let n = (y.nrows() * y.ncols()) as f64;
        (&y - t).iter().map(|d| d * d).sum::<f64>() / n
    }
}

impl Predictor for MlpModel {
    fn algorithm(&self) -> &'static str {
        "mlp"
    }

    fn target(&self) -> Target {
        self.kind
    }

    fn norm_info(&self) -> &NormalizationInfo {
        &self.norm_info
    }

    fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.forward(x)
    }

    fn to_saved(&self) -> SavedModel {
        match self.kind {
            Target::Total => SavedModel::T(self.clone()),
            Target::Hourly => SavedModel::D(self.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain minibatch gradient descent.
    #[default]
    Sgd,
    Momentum {
        beta: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Optimizer::Sgd),
            "momentum" => Some(Optimizer::Momentum { beta: 0.9 }),
            "adam" => Some(Self::adam()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Median accuracies are computed every `eval_every` epochs (and on the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// When set, the step size follows a cosine from `learning_rate` down to this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_min: Option<f64>,
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_min {
            Some(lo) if self.epochs > 1 => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                lo + 0.5 * (self.learning_rate - lo) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.learning_rate,
        }
    }
}

fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_eval_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            shuffle: true,
            optimizer: Optimizer::Sgd,
            eval_every: 1,
            lr_min: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `1 - median accuracy` on the training rows.
    pub train_error: Option<f64>,
    /// `1 - median accuracy` on the held-out rows.
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Design matrix and targets for the usable rows of a dataset.
pub fn design(ds: &Dataset, target: Target) -> (Array2<f64>, Array2<f64>) {
    let rows: Vec<_> = ds.samples.iter().filter(|s| target.usable(s)).collect();
    let mut x = Array2::zeros((rows.len(), ENV_WIDTH));
    let mut t = Array2::zeros((rows.len(), target.width()));
    for (i, s) in rows.iter().enumerate() {
        x.row_mut(i).assign(&Array1::from(s.env.to_vec().to_vec()));
        t.row_mut(i).assign(&Array1::from(target.values(s)));
    }
    (x, t)
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// Median accuracy over a design matrix, using the scoring rule of the target.
fn batch_median(model: &MlpModel, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    if x.nrows() == 0 {
        return f64::NAN;
    }
    let y = model.forward_batch(x).pop().expect("output");
    let mut acc = Vec::with_capacity(x.nrows());
    for (yrow, trow) in y.rows().into_iter().zip(t.rows()) {
        match model.kind {
            Target::Total => {
                if let Ok(a) = crate::metrics::accuracy_total(trow[0], yrow[0]) {
                    acc.push(a);
                }
            }
            Target::Hourly => {
                let mut p = yrow.to_vec();
                crate::predictor::renormalize(&mut p);
                let l1: f64 = trow.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
                acc.push(1.0 - l1);
            }
        }
    }
    median(&acc)
}

struct OptState {
    step: i32,
    m: Grads,
    v: Grads,
}

fn apply_update(model: &mut MlpModel, grads: &Grads, lr: f64, cfg: &TrainConfig, st: &mut OptState) {
    st.step += 1;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (w, g) in model.weights.iter_mut().zip(&grads.weights) {
                w.scaled_add(-lr, g);
            }
            for (b, g) in model.biases.iter_mut().zip(&grads.biases) {
                b.scaled_add(-lr, g);
            }
        }
        Optimizer::Momentum { beta } => {
            for l in 0..model.weights.len() {
                st.m.weights[l].zip_mut_with(&grads.weights[l], |m, &g| *m = beta * *m + g);
                st.m.biases[l].zip_mut_with(&grads.biases[l], |m, &g| *m = beta * *m + g);
                model.weights[l].scaled_add(-lr, &st.m.weights[l]);
                model.biases[l].scaled_add(-lr, &st.m.biases[l]);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(st.step);
            let c2 = 1.0 - beta2.powi(st.step);
            let step = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for l in 0..model.weights.len() {
                Zip::from(&mut model.weights[l])
                    .and(&mut st.m.weights[l])
                    .and(&mut st.v.weights[l])
                    .and(&grads.weights[l])
                    .for_each(|p, m, v, &g| step(p, m, v, g));
                Zip::from(&mut model.biases[l])
                    .and(&mut st.m.biases[l])
                    .and(&mut st.v.biases[l])
                    .and(&grads.biases[l])
                    .for_each(|p, m, v, &g| step(p, m, v, g));
            }
        }
    }
}

/// Trains `model` on the usable rows of `train_set`.
///
/// When `heldout` is given its median error is recorded alongside the
/// training error. Fails with [`ModelError::Divergence`] as soon as the
/// loss or any parameter becomes non-finite.
pub fn train(
    model: &MlpModel,
    train_set: &Dataset,
    cfg: &TrainConfig,
    heldout: Option<&Dataset>,
) -> Result<(MlpModel, TrainHistory), ModelError> {
    let (x, t) = design(train_set, model.kind);
    let n = x.nrows();
    if n == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    let held = heldout.map(|h| design(h, model.kind));
    let batch = cfg.batch_size.max(1);
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut st = OptState {
        step: 0,
        m: Grads::zeros_like(&model),
        v: Grads::zeros_like(&model),
    };
    let mut history = TrainHistory::default();
    let every = cfg.eval_every.max(1);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (xb, tb) = if chunk.len() == n && !cfg.shuffle {
                (x.clone(), t.clone())
            } else {
                (select_rows(&x, chunk), select_rows(&t, chunk))
            };
            let (loss, grads) = model.loss_and_grad(&xb, &tb);
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            apply_update(&mut model, &grads, cfg.lr_at(epoch), cfg, &mut st);
        }
        let loss = loss_sum / n as f64;
        if !model.all_finite() {
            return Err(ModelError::Divergence { epoch, loss: f64::NAN });
        }
        let evaluate = (epoch + 1) % every == 0 || epoch + 1 == cfg.epochs;
        let (train_error, test_error) = if evaluate {
            (
                Some(1.0 - batch_median(&model, &x, &t)),
                held.as_ref().map(|(hx, ht)| 1.0 - batch_median(&model, hx, ht)),
            )
        } else {
            (None, None)
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            train_error,
            test_error,
        });
    }
    Ok((model, history))
}

/// Gradient of the mean loss over all usable rows in one batch.
pub fn full_batch_gradient(model: &MlpModel, ds: &Dataset) -> (f64, Grads) {
    let (x, t) = design(ds, model.kind);
    model.loss_and_grad(&x, &t)
}

/// Combined prediction in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPrediction {
    pub total_vht: f64,
    pub hourly_vht: Vec<f64>,
    pub proportions: Vec<f64>,
}

/// Daily total from the T model, hourly shares from the D model.
pub fn predict_hybrid(
    model_t: &dyn Predictor,
    model_d: &dyn Predictor,
    env: &EnvFeatures,
) -> Result<HybridPrediction, ModelError> {
    if model_t.target() != Target::Total {
        return Err(ModelError::WrongTarget {
            expected: Target::Total,
            got: model_t.target(),
        });
    }
    if model_d.target() != Target::Hourly {
        return Err(ModelError::WrongTarget {
            expected: Target::Hourly,
            got: model_d.target(),
        });
    }
    if model_t.norm_info() != model_d.norm_info() {
        return Err(ModelError::NormMismatch);
    }
    let x = env.to_vec();
    let total_norm = model_t.predict_raw(&x)?[0];
    let total_vht = denormalize_total(total_norm, model_t.norm_info()).max(0.0);
    let proportions = model_d.predict(&x)?;
    let hourly_vht = proportions.iter().map(|p| p * total_vht).collect();
    Ok(HybridPrediction {
        total_vht,
        hourly_vht,
        proportions,
    })
}
