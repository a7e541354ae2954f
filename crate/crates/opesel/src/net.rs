//! From-scratch feedforward networks used by FQI, FQE, AM, and behavior
//! cloning: ReLU MLP trained with Adam, mini-batching, and early stopping on
//! an internal validation split.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataset::derive_seed;
use crate::error::{OpeselError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(hidden_layers: usize, hidden_units: usize, learning_rate: f64, seed: u64) -> Self {
        NetConfig {
            hidden_layers,
            hidden_units,
            learning_rate,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.10,
            seed,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::new(1, 1000, 1e-3, 0)
    }
}

/// Training targets. Masked regression fits only the output unit named per
/// sample (the Q-head at the logged action); other outputs carry no loss.
#[derive(Debug, Clone)]
pub enum Targets {
    Regression(Array2<f64>),
    MaskedRegression {
        outputs: Vec<usize>,
        values: Vec<f64>,
        out_dim: usize,
    },
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
}

#[derive(Debug, Clone)]
pub struct PatternSet {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl PatternSet {
    fn out_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(y) => y.ncols(),
            Targets::MaskedRegression { out_dim, .. } => *out_dim,
            Targets::Classes { n_classes, .. } => *n_classes,
        }
    }

    fn len(&self) -> usize {
        self.inputs.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    /// Weight matrices in (fan_in, fan_out) layout.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub classifier: bool,
    pub best_epoch: usize,
}

impl Mlp {
    fn init(in_dim: usize, out_dim: usize, config: &NetConfig, classifier: bool) -> Self {
        let mut dims = vec![in_dim];
        for _ in 0..config.hidden_layers {
            dims.push(config.hidden_units);
        }
        dims.push(out_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x11));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[k] as f64).sqrt();
            let w = Array2::from_shape_fn((dims[k], dims[k + 1]), |_| {
                rng.gen_range(-bound..bound)
            });
            weights.push(w);
            biases.push(Array1::zeros(dims[k + 1]));
        }
        Mlp { weights, biases, classifier, best_epoch: 0 }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    /// Forward pass returning raw outputs (logits for classifiers).
    pub fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut a = inputs.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = a.dot(w) + b;
            if k + 1 < self.weights.len() {
                a.mapv_inplace(|z| z.max(0.0));
            }
        }
        a
    }

    /// Deterministic prediction: regression outputs, or class probabilities
    /// (softmax rows) for classifiers.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.in_dim() {
            return Err(OpeselError::DimensionMismatch(format!(
                "expected {} input features, got {}",
                self.in_dim(),
                inputs.ncols()
            )));
        }
        let out = self.forward(inputs);
        Ok(if self.classifier { softmax_rows(&out) } else { out })
    }

    pub fn predict_one(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = input.insert_axis(Axis(0)).to_owned();
        Ok(self.predict(&batch)?.row(0).to_owned())
    }

    /// Text weight dump, round-trip exact via hex-encoded f64 bits.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(
            out,
            "# opesel-mlp v1; layers={}; classifier={}; best_epoch={}",
            self.weights.len(),
            u8::from(self.classifier),
            self.best_epoch
        )
        .unwrap();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            writeln!(out, "layer {} {}", w.nrows(), w.ncols()).unwrap();
            for v in w.iter().chain(b.iter()) {
                writeln!(out, "{:016x}", v.to_bits()).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| OpeselError::Parse {
            line: 1,
            message: "empty model file".into(),
        })?;
        let header = header.strip_prefix("# opesel-mlp v1; ").ok_or_else(|| OpeselError::Parse {
            line: 1,
            message: "missing opesel-mlp header".into(),
        })?;
        let mut n_layers = 0usize;
        let mut classifier = false;
        let mut best_epoch = 0usize;
        for field in header.split("; ") {
            if let Some((k, v)) = field.split_once('=') {
                match k {
                    "layers" => n_layers = v.parse().unwrap_or(0),
                    "classifier" => classifier = v == "1",
                    "best_epoch" => best_epoch = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for _ in 0..n_layers {
            let (lineno, decl) = lines.next().ok_or_else(|| OpeselError::Parse {
                line: 0,
                message: "truncated model file".into(),
            })?;
            let parts: Vec<&str> = decl.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "layer" {
                return Err(OpeselError::Parse {
                    line: lineno + 1,
                    message: format!("bad layer declaration `{decl}`"),
                });
            }
            let rows: usize = parts[1].parse().map_err(|_| OpeselError::Parse {
                line: lineno + 1,
                message: "bad layer rows".into(),
            })?;
            let cols: usize = parts[2].parse().map_err(|_| OpeselError::Parse {
                line: lineno + 1,
                message: "bad layer cols".into(),
            })?;
            let mut values = Vec::with_capacity(rows * cols + cols);
            for _ in 0..rows * cols + cols {
                let (lineno, v) = lines.next().ok_or_else(|| OpeselError::Parse {
                    line: 0,
                    message: "truncated model file".into(),
                })?;
                let bits = u64::from_str_radix(v.trim(), 16).map_err(|_| OpeselError::Parse {
                    line: lineno + 1,
                    message: format!("bad weight value `{v}`"),
                })?;
                values.push(f64::from_bits(bits));
            }
            let b = Array1::from_vec(values.split_off(rows * cols));
            let w = Array2::from_shape_vec((rows, cols), values).unwrap();
            weights.push(w);
            biases.push(b);
        }
        Ok(Mlp { weights, biases, classifier, best_epoch })
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|z| z / sum);
    }
    out
}

struct Adam {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
    lr: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &Mlp, lr: f64) -> Self {
        Adam {
            m_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for k in 0..model.weights.len() {
            adam_tensor(&mut self.m_w[k], &mut self.v_w[k], &grads.weights[k], bc1, bc2);
            apply_step(&mut model.weights[k], &self.m_w[k], &self.v_w[k], self.lr, bc1, bc2);
            adam_vec(&mut self.m_b[k], &mut self.v_b[k], &grads.biases[k], bc1, bc2);
            apply_step_vec(&mut model.biases[k], &self.m_b[k], &self.v_b[k], self.lr, bc1, bc2);
        }
    }
}

fn adam_tensor(m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>, _bc1: f64, _bc2: f64) {
    m.zip_mut_with(g, |mi, &gi| *mi = BETA1 * *mi + (1.0 - BETA1) * gi);
    v.zip_mut_with(g, |vi, &gi| *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi);
}

fn adam_vec(m: &mut Array1<f64>, v: &mut Array1<f64>, g: &Array1<f64>, _bc1: f64, _bc2: f64) {
    m.zip_mut_with(g, |mi, &gi| *mi = BETA1 * *mi + (1.0 - BETA1) * gi);
    v.zip_mut_with(g, |vi, &gi| *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi);
}

fn apply_step(
    w: &mut Array2<f64>,
    m: &Array2<f64>,
    v: &Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(w).and(m).and(v).for_each(|wi, &mi, &vi| {
        *wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
    });
}

fn apply_step_vec(
    b: &mut Array1<f64>,
    m: &Array1<f64>,
    v: &Array1<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(b).and(m).and(v).for_each(|bi, &mi, &vi| {
        *bi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
    });
}

struct Gradients {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Loss and output-layer gradient for a batch; the loss is averaged over
/// samples (and, for full regression, summed over outputs).
fn output_loss_grad(
    model: &Mlp,
    outputs: &Array2<f64>,
    patterns: &PatternSet,
    indices: &[usize],
) -> (f64, Array2<f64>) {
    let n = indices.len() as f64;
    let mut grad = Array2::zeros(outputs.raw_dim());
    let mut loss = 0.0;
    match &patterns.targets {
        Targets::Regression(y) => {
            for (row, &i) in indices.iter().enumerate() {
                for k in 0..y.ncols() {
                    let d = outputs[[row, k]] - y[[i, k]];
                    loss += d * d;
                    grad[[row, k]] = 2.0 * d / n;
                }
            }
            loss /= n;
        }
        Targets::MaskedRegression { outputs: outs, values, .. } => {
            for (row, &i) in indices.iter().enumerate() {
                let k = outs[i];
                let d = outputs[[row, k]] - values[i];
                loss += d * d;
                grad[[row, k]] = 2.0 * d / n;
            }
            loss /= n;
        }
        Targets::Classes { labels, .. } => {
            let probs = softmax_rows(outputs);
            for (row, &i) in indices.iter().enumerate() {
                let label = labels[i];
                loss += -(probs[[row, label]].max(1e-300)).ln();
                for k in 0..probs.ncols() {
                    grad[[row, k]] = (probs[[row, k]] - f64::from(k == label)) / n;
                }
            }
            loss /= n;
        }
    }
    let _ = model;
    (loss, grad)
}

fn batch_rows(patterns: &PatternSet, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), patterns.inputs.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).assign(&patterns.inputs.row(i));
    }
    out
}

fn loss_and_grads(model: &Mlp, patterns: &PatternSet, indices: &[usize]) -> (f64, Gradients) {
    let x = batch_rows(patterns, indices);
    // Forward with cached activations.
    let mut activations = vec![x];
    let mut pre_acts = Vec::new();
    for (k, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let z = activations.last().unwrap().dot(w) + b;
        if k + 1 < model.weights.len() {
            let a = z.mapv(|v| v.max(0.0));
            pre_acts.push(z);
            activations.push(a);
        } else {
            pre_acts.push(z.clone());
            activations.push(z);
        }
    }
    let outputs = activations.last().unwrap();
    let (loss, mut delta) = output_loss_grad(model, outputs, patterns, indices);
    let mut grads = Gradients {
        weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
        biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
    };
    for k in (0..model.weights.len()).rev() {
        grads.weights[k] = activations[k].t().dot(&delta);
        grads.biases[k] = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut prev = delta.dot(&model.weights[k].t());
            prev.zip_mut_with(&pre_acts[k - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }
    (loss, grads)
}

fn evaluate_loss(model: &Mlp, patterns: &PatternSet, indices: &[usize]) -> f64 {
    let x = batch_rows(patterns, indices);
    let out = model.forward(&x);
    output_loss_grad(model, &out, patterns, indices).0
}

fn fit(patterns: &PatternSet, config: &NetConfig, classifier: bool) -> Result<Mlp> {
    if patterns.len() == 0 {
        return Err(OpeselError::InvalidArgument("empty pattern set".into()));
    }
    let mut model = Mlp::init(patterns.inputs.ncols(), patterns.out_dim(), config, classifier);
    let mut optimizer = Adam::new(&model, config.learning_rate);

    // Internal validation split: last val_fraction of a seeded shuffle.
    let n = patterns.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x22));
    order.shuffle(&mut rng);
    let n_val = ((config.val_fraction * n as f64).floor() as usize).min(n - 1);
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let train_idx = train_idx.to_vec();
    let val_idx: Vec<usize> = if val_idx.is_empty() {
        train_idx.clone()
    } else {
        val_idx.to_vec()
    };

    let mut best_loss = f64::INFINITY;
    let mut best_weights = (model.weights.clone(), model.biases.clone());
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut epoch_order = train_idx.clone();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x33 + epoch as u64));
        epoch_order.shuffle(&mut epoch_rng);
        for batch in epoch_order.chunks(config.batch_size) {
            let (loss, grads) = loss_and_grads(&model, patterns, batch);
            if !loss.is_finite() {
                return Err(OpeselError::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            optimizer.update(&mut model, &grads);
        }
        let val_loss = evaluate_loss(&model, patterns, &val_idx);
        if !val_loss.is_finite() {
            return Err(OpeselError::TrainingDiverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best_weights = (model.weights.clone(), model.biases.clone());
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.weights = best_weights.0;
    model.biases = best_weights.1;
    model.best_epoch = best_epoch;
    Ok(model)
}

/// Fits an MSE regressor; best-validation-epoch weights are restored.
pub fn fit_regressor(patterns: &PatternSet, config: &NetConfig) -> Result<Mlp> {
    match patterns.targets {
        Targets::Classes { .. } => Err(OpeselError::InvalidArgument(
            "fit_regressor requires regression targets".into(),
        )),
        _ => fit(patterns, config, false),
    }
}

/// Fits a softmax cross-entropy classifier.
pub fn fit_classifier(patterns: &PatternSet, config: &NetConfig) -> Result<Mlp> {
    match patterns.targets {
        Targets::Classes { .. } => fit(patterns, config, true),
        _ => Err(OpeselError::InvalidArgument(
            "fit_classifier requires class targets".into(),
        )),
    }
}

#[derive(Debug)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub worst_layer: usize,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares analytic gradients against central finite differences over every
/// parameter, on the full pattern set.
pub fn gradient_check(model: &Mlp, patterns: &PatternSet, tolerance: f64) -> GradientCheckReport {
    const STEP: f64 = 1e-5;
    let indices: Vec<usize> = (0..patterns.len()).collect();
    let (_, analytic) = loss_and_grads(model, patterns, &indices);
    let mut probe = model.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst_layer = 0;
    let mut worst_index = 0;
    let n_layers = model.weights.len();
    for k in 0..n_layers {
        let n_w = model.weights[k].len();
        let n_b = model.biases[k].len();
        for j in 0..n_w + n_b {
            let orig = if j < n_w {
                probe.weights[k].as_slice_mut().unwrap()[j]
            } else {
                probe.biases[k][j - n_w]
            };
            let set = |m: &mut Mlp, v: f64| {
                if j < n_w {
                    m.weights[k].as_slice_mut().unwrap()[j] = v;
                } else {
                    m.biases[k][j - n_w] = v;
                }
            };
            set(&mut probe, orig + STEP);
            let plus = evaluate_loss(&probe, patterns, &indices);
            set(&mut probe, orig - STEP);
            let minus = evaluate_loss(&probe, patterns, &indices);
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * STEP);
            let exact = if j < n_w {
                analytic.weights[k].as_slice().unwrap()[j]
            } else {
                analytic.biases[k][j - n_w]
            };
            let scale = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / scale;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_layer = k;
                worst_index = j;
            }
        }
    }
    GradientCheckReport {
        max_rel_error,
        worst_layer,
        worst_index,
        passed: max_rel_error <= tolerance,
    }
}
