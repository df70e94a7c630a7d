//! A small multilayer perceptron: ReLU hidden layers, softmax output, mean
//! cross-entropy loss. Parameters are stored as `f32` so they can carry the
//! watermark; all arithmetic accumulates in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{LayerTensor, Model, TensorEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Row-major sample matrix with one label per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Samples { dim, inputs: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.dim);
        self.inputs.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut out = Samples::new(self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Samples,
    pub validation: Samples,
    pub test: Samples,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim
    }

    pub fn split(&self, split: Split) -> &Samples {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Splits `all` 60/20/20 in its current row order.
    pub fn from_ordered(classes: usize, all: &Samples) -> Dataset {
        let (n_train, n_val) = split_sizes(all.len());
        let idx: Vec<usize> = (0..all.len()).collect();
        Dataset {
            classes,
            train: all.subset(&idx[..n_train]),
            validation: all.subset(&idx[n_train..n_train + n_val]),
            test: all.subset(&idx[n_train + n_val..]),
        }
    }
}

/// Train and validation sizes of a 60/20/20 split; test takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize) {
    (n * 60 / 100, n * 20 / 100)
}

/// Gaussian clusters whose means sit evenly spaced on a circle of `radius`
/// in the first two coordinates.
pub fn gen_blobs(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    radius: f64,
    sigma: f64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::Config(format!(
            "blobs need classes >= 2, dim >= 2, n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite() && radius.is_finite()) {
        return Err(Error::Config("blobs need finite radius and sigma >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut all = Samples::new(dim);
    let mut row = vec![0.0; dim];
    for class in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        for _ in 0..n_per_class {
            for (j, x) in row.iter_mut().enumerate() {
                let mean = match j {
                    0 => radius * angle.cos(),
                    1 => radius * angle.sin(),
                    _ => 0.0,
                };
                *x = mean + noise.sample(&mut rng);
            }
            all.push(&row, class);
        }
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    Ok(Dataset::from_ordered(classes, &all.subset(&order)))
}

/// Fully connected network. `weights[l]` is `dims[l+1] x dims[l]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: Vec<usize>,
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
}

/// Gradients of the mean cross-entropy, shaped like [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    /// Gradient for parameter tensor `k` in [`ToyModel::tensor`] order.
    pub fn tensor(&self, k: usize) -> &[f64] {
        if k.is_multiple_of(2) {
            &self.weights[k / 2]
        } else {
            &self.biases[k / 2]
        }
    }
}

struct Trace {
    /// Post-activation values per layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(ToyModel {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: dims[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// He-uniform weights, zero biases.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let bound = (6.0 / dims[l] as f64).sqrt() as f32;
            for x in w.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Number of parameter tensors (weights and biases interleaved).
    pub fn n_tensors(&self) -> usize {
        2 * self.n_layers()
    }

    pub fn tensor(&self, k: usize) -> &[f32] {
        if k.is_multiple_of(2) {
            &self.weights[k / 2]
        } else {
            &self.biases[k / 2]
        }
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [f32] {
        if k.is_multiple_of(2) {
            &mut self.weights[k / 2]
        } else {
            &mut self.biases[k / 2]
        }
    }

    pub fn tensor_name(k: usize) -> String {
        format!("fc{}.{}", k / 2, if k.is_multiple_of(2) { "weight" } else { "bias" })
    }

    pub fn tensor_shape(&self, k: usize) -> Vec<usize> {
        let l = k / 2;
        if k.is_multiple_of(2) {
            vec![self.dims[l + 1], self.dims[l]]
        } else {
            vec![self.dims[l + 1]]
        }
    }

    pub fn to_layer_tensor(&self, k: usize) -> LayerTensor {
        LayerTensor::from_f32(Self::tensor_name(k), self.tensor_shape(k), self.tensor(k))
            .expect("shape matches by construction")
    }

    /// Container view: `fc0.weight, fc0.bias, fc1.weight, ...`. Tensor `k`
    /// sits at layer index `k`.
    pub fn to_model(&self) -> Model {
        Model::from_layers((0..self.n_tensors()).map(|k| self.to_layer_tensor(k)).collect())
    }

    /// Inverse of [`ToyModel::to_model`]; dims are read off the weight shapes.
    pub fn from_model(model: &Model) -> Result<Self> {
        let entries = &model.entries;
        if entries.is_empty() || !entries.len().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "expected weight/bias pairs, found {} tensors",
                entries.len()
            )));
        }
        let mut dims = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in entries.chunks(2) {
            let (TensorEntry::Float32(w), TensorEntry::Float32(b)) = (&pair[0], &pair[1]) else {
                return Err(Error::Shape("toy model tensors must be float32".into()));
            };
            let &[out, inp] = w.shape.as_slice() else {
                return Err(Error::Shape(format!("`{}` is not a matrix", w.name)));
            };
            if b.shape != [out] {
                return Err(Error::Shape(format!("`{}` does not match `{}`", b.name, w.name)));
            }
            match dims.last() {
                None => dims.push(inp),
                Some(&prev) if prev == inp => {}
                Some(&prev) => {
                    return Err(Error::Shape(format!(
                        "`{}` expects {inp} inputs but previous layer has {prev} outputs",
                        w.name
                    )))
                }
            }
            dims.push(out);
            weights.push(w.values());
            biases.push(b.values());
        }
        check_dims(&dims)?;
        Ok(ToyModel { dims, weights, biases })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|x| x.is_finite())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let a = &acts[l];
            let w = &self.weights[l];
            let mut z: Vec<f64> = (0..out)
                .map(|i| {
                    let row = &w[i * inp..(i + 1) * inp];
                    self.biases[l][i] as f64
                        + row.iter().zip(a).map(|(&wij, &aj)| wij as f64 * aj).sum::<f64>()
                })
                .collect();
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let probs = softmax(acts.last().unwrap());
        Trace { acts, probs }
    }

    fn check_width(&self, samples: &Samples) -> Result<()> {
        if samples.dim != self.dims[0] {
            return Err(Error::Shape(format!(
                "input width {} does not match model input {}",
                samples.dim, self.dims[0]
            )));
        }
        Ok(())
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, samples: &Samples) -> Result<Vec<Vec<f64>>> {
        self.check_width(samples)?;
        Ok((0..samples.len()).map(|i| self.trace(samples.row(i)).probs).collect())
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.trace(x).probs)
    }

    pub fn loss(&self, samples: &Samples) -> Result<f64> {
        self.check_width(samples)?;
        if samples.is_empty() {
            return Err(Error::EmptySplit("batch"));
        }
        let total: f64 = (0..samples.len())
            .map(|i| -self.trace(samples.row(i)).probs[samples.labels[i]].max(1e-300).ln())
            .sum();
        Ok(total / samples.len() as f64)
    }

    /// Exact backprop gradients of the mean cross-entropy over `batch`.
    pub fn gradients(&self, batch: &Samples) -> Result<GradientSet> {
        self.check_width(batch)?;
        if batch.is_empty() {
            return Err(Error::EmptySplit("batch"));
        }
        let classes = self.classes();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let scale = 1.0 / batch.len() as f64;
        for s in 0..batch.len() {
            let tr = self.trace(batch.row(s));
            let mut delta = tr.probs.clone();
            delta[batch.labels[s]] -= 1.0;
            for l in (0..self.n_layers()).rev() {
                let inp = self.dims[l];
                let a = &tr.acts[l];
                for (i, &d) in delta.iter().enumerate() {
                    gb[l][i] += d * scale;
                    let row = &mut gw[l][i * inp..(i + 1) * inp];
                    for (g, &aj) in row.iter_mut().zip(a) {
                        *g += d * aj * scale;
                    }
                }
                if l == 0 {
                    break;
                }
                let w = &self.weights[l];
                delta = (0..inp)
                    .map(|j| {
                        if a[j] <= 0.0 {
                            return 0.0;
                        }
                        delta
                            .iter()
                            .enumerate()
                            .map(|(i, &d)| d * w[i * inp + j] as f64)
                            .sum()
                    })
                    .collect();
            }
        }
        Ok(GradientSet { weights: gw, biases: gb })
    }

    /// Fraction of rows whose argmax (ties to the lowest index) matches the label.
    pub fn accuracy(&self, samples: &Samples) -> Result<f64> {
        self.check_width(samples)?;
        if samples.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let hits = (0..samples.len())
            .filter(|&i| self.predict(samples.row(i)) == samples.labels[i])
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }

    pub fn accuracy_on(&self, data: &Dataset, split: Split) -> Result<f64> {
        self.accuracy(data.split(split))
            .map_err(|e| match e {
                Error::EmptySplit(_) => Error::EmptySplit(split.name()),
                e => e,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, learning_rate: 0.05, batch_size: 32, seed: 0 }
    }
}

/// Minibatch SGD. Returns the trained model and the train-split loss
/// after each epoch.
pub fn train_logged(model: &ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<(ToyModel, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut model = model.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((model, losses));
    }
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.subset(chunk);
            let g = model.gradients(&batch)?;
            for (w, gw) in model.weights.iter_mut().zip(&g.weights) {
                for (x, d) in w.iter_mut().zip(gw) {
                    *x = (*x as f64 - cfg.learning_rate * d) as f32;
                }
            }
            for (b, gb) in model.biases.iter_mut().zip(&g.biases) {
                for (x, d) in b.iter_mut().zip(gb) {
                    *x = (*x as f64 - cfg.learning_rate * d) as f32;
                }
            }
        }
        let loss = model.loss(&data.train)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(loss);
    }
    Ok((model, losses))
}

pub fn train(model: &ToyModel, data: &Dataset, epochs: usize, learning_rate: f64, seed: u64) -> Result<ToyModel> {
    let cfg = TrainConfig { epochs, learning_rate, seed, ..TrainConfig::default() };
    train_logged(model, data, &cfg).map(|(m, _)| m)
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
    }
    if dims[dims.len() - 1] < 2 {
        return Err(Error::Shape("need at least two output classes".into()));
    }
    Ok(())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
