//! Minimal differentiable-network toolkit with analytic reverse-mode
//! gradients. Tensors are 2-D (rows = time/batch, cols = features); a
//! vector is a 1 x d tensor. The layer zoo is deliberately small: affine,
//! tanh, relu, mean-pool over time, L2-normalize, log-softmax.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;

pub type Tensor = Mat;

#[derive(Debug, Clone)]
pub enum Layer {
    /// y = x W + b, W is in_dim x out_dim.
    Affine { weights: Mat, bias: Vec<f64> },
    Tanh,
    Relu,
    /// [T, d] -> [1, d] mean over rows.
    MeanPoolTime,
    /// Per-row x / ||x||; gradient at the zero vector is defined as zero.
    L2Normalize,
    /// Per-row log-softmax.
    LogSoftmax,
}

impl Layer {
    fn tag(&self) -> u8 {
        match self {
            Layer::Affine { .. } => 1,
            Layer::Tanh => 2,
            Layer::Relu => 3,
            Layer::MeanPoolTime => 4,
            Layer::L2Normalize => 5,
            Layer::LogSoftmax => 6,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::Tanh => "tanh",
            Layer::Relu => "relu",
            Layer::MeanPoolTime => "mean_pool_time",
            Layer::L2Normalize => "l2_normalize",
            Layer::LogSoftmax => "log_softmax",
        }
    }
}

/// Xavier-ish random affine layer; all randomness comes from the caller's rng.
pub fn affine_random(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
    let scale = (1.0 / in_dim as f64).sqrt();
    let mut w = Mat::zeros(in_dim, out_dim);
    for v in w.data.iter_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    Layer::Affine {
        weights: w,
        bias: vec![0.0; out_dim],
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Activations retained by forward: acts[i] is the input to layer i,
/// acts[len] is the network output.
#[derive(Debug, Clone)]
pub struct Activations {
    pub acts: Vec<Mat>,
}

impl Activations {
    pub fn output(&self) -> &Mat {
        self.acts.last().expect("nonempty")
    }
}

/// Gradients mirroring the parameter store: input gradient plus per-layer
/// (weight, bias) gradients for affine layers.
#[derive(Debug, Clone)]
pub struct GradRecord {
    pub input_grad: Mat,
    pub param_grads: BTreeMap<usize, (Mat, Vec<f64>)>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Activations> {
        if !input.is_finite() {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let y = match layer {
                Layer::Affine { weights, bias } => {
                    if x.cols != weights.rows {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx} affine expects {} inputs, got {}",
                            weights.rows, x.cols
                        )));
                    }
                    let mut y = x.matmul(weights);
                    for r in 0..y.rows {
                        for (c, &b) in bias.iter().enumerate() {
                            y.data[r * y.cols + c] += b;
                        }
                    }
                    y
                }
                Layer::Tanh => x.map(f64::tanh),
                Layer::Relu => x.map(|v| v.max(0.0)),
                Layer::MeanPoolTime => {
                    let mut y = Mat::zeros(1, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            y.data[c] += x.get(r, c);
                        }
                    }
                    let t = x.rows as f64;
                    y.data.iter_mut().for_each(|v| *v /= t);
                    y
                }
                Layer::L2Normalize => {
                    let mut y = x.clone();
                    for r in 0..y.rows {
                        let row = y.row_mut(r);
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            row.iter_mut().for_each(|v| *v /= norm);
                        }
                    }
                    y
                }
                Layer::LogSoftmax => {
                    let mut y = x.clone();
                    for r in 0..y.rows {
                        let row = y.row_mut(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        row.iter_mut().for_each(|v| *v -= lse);
                    }
                    y
                }
            };
            acts.push(y);
        }
        Ok(Activations { acts })
    }

    /// Reverse-mode gradients of the scalar loss whose output-space
    /// gradient is `upstream`.
    pub fn backward(&self, acts: &Activations, upstream: &Tensor) -> Result<GradRecord> {
        if acts.acts.len() != self.layers.len() + 1 {
            return Err(Error::Precondition(
                "backward requires retained activations from forward".into(),
            ));
        }
        let out = acts.output();
        if upstream.rows != out.rows || upstream.cols != out.cols {
            return Err(Error::ShapeMismatch(format!(
                "upstream {}x{} vs output {}x{}",
                upstream.rows, upstream.cols, out.rows, out.cols
            )));
        }
        let mut grad = upstream.clone();
        let mut param_grads = BTreeMap::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts.acts[idx];
            let y = &acts.acts[idx + 1];
            grad = match layer {
                Layer::Affine { weights, bias: _ } => {
                    let w_grad = x.transpose().matmul(&grad);
                    let mut b_grad = vec![0.0; weights.cols];
                    for r in 0..grad.rows {
                        for (bg, &g) in b_grad.iter_mut().zip(grad.row(r)) {
                            *bg += g;
                        }
                    }
                    param_grads.insert(idx, (w_grad, b_grad));
                    grad.matmul(&weights.transpose())
                }
                Layer::Tanh => {
                    let mut g = grad;
                    for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                        *gv *= 1.0 - yv * yv;
                    }
                    g
                }
                Layer::Relu => {
                    let mut g = grad;
                    for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                Layer::MeanPoolTime => {
                    let t = x.rows as f64;
                    let mut g = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            g.set(r, c, grad.get(0, c) / t);
                        }
                    }
                    g
                }
                Layer::L2Normalize => {
                    let mut g = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue; // gradient pinned to zero at the singularity
                        }
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..x.cols {
                            g.set(r, c, (gr[c] - yr[c] * dot) / norm);
                        }
                    }
                    g
                }
                Layer::LogSoftmax => {
                    let mut g = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..x.cols {
                            g.set(r, c, gr[c] - yr[c].exp() * gsum);
                        }
                    }
                    g
                }
            };
        }
        Ok(GradRecord {
            input_grad: grad,
            param_grads,
        })
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Compare analytic gradients against central finite differences for every
/// input coordinate and every parameter. The scalar loss is the dot product
/// of the network output with `loss_seed`.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    loss_seed: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Precondition("grad_check step must be > 0".into()));
    }
    let loss = |net: &Network, x: &Tensor| -> Result<f64> {
        let acts = net.forward(x)?;
        Ok(acts
            .output()
            .data
            .iter()
            .zip(&loss_seed.data)
            .map(|(a, b)| a * b)
            .sum())
    };
    let acts = net.forward(input)?;
    let rec = net.backward(&acts, loss_seed)?;
    let mut failures = Vec::new();
    let mut checked = 0usize;

    for i in 0..input.data.len() {
        let mut xp = input.clone();
        xp.data[i] += step;
        let mut xm = input.clone();
        xm.data[i] -= step;
        let numeric = (loss(net, &xp)? - loss(net, &xm)?) / (2.0 * step);
        let analytic = rec.input_grad.data[i];
        checked += 1;
        let e = rel_err(analytic, numeric);
        if e > tol {
            failures.push(GradCheckFailure {
                location: format!("input[{i}]"),
                analytic,
                numeric,
                rel_error: e,
            });
        }
    }

    for (layer_idx, layer) in net.layers.iter().enumerate() {
        let Layer::Affine { weights, bias } = layer else {
            continue;
        };
        let (w_grad, b_grad) = &rec.param_grads[&layer_idx];
        for i in 0..weights.data.len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut n2 = net.clone();
                if let Layer::Affine { weights, .. } = &mut n2.layers[layer_idx] {
                    weights.data[i] += delta;
                }
                loss(&n2, input)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let analytic = w_grad.data[i];
            checked += 1;
            let e = rel_err(analytic, numeric);
            if e > tol {
                failures.push(GradCheckFailure {
                    location: format!("layer{layer_idx}.w[{i}]"),
                    analytic,
                    numeric,
                    rel_error: e,
                });
            }
        }
        for i in 0..bias.len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut n2 = net.clone();
                if let Layer::Affine { bias, .. } = &mut n2.layers[layer_idx] {
                    bias[i] += delta;
                }
                loss(&n2, input)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let analytic = b_grad[i];
            checked += 1;
            let e = rel_err(analytic, numeric);
            if e > tol {
                failures.push(GradCheckFailure {
                    location: format!("layer{layer_idx}.b[{i}]"),
                    analytic,
                    numeric,
                    rel_error: e,
                });
            }
        }
    }
    Ok(GradCheckReport { checked, failures })
}

// ---------------------------------------------------------------------------
// Classifier training
// ---------------------------------------------------------------------------

/// Labeled dataset: each item is a (1 x d) feature row with a class label.
pub type Dataset = Vec<(Tensor, usize)>;

/// Full-batch gradient descent on the negative log-likelihood. The network
/// must end in LogSoftmax. Returns the per-epoch mean loss curve.
pub fn train_classifier(
    net: &mut Network,
    dataset: &Dataset,
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    if epochs == 0 {
        return Err(Error::Precondition("epochs must be >= 1".into()));
    }
    if let Some((_, bad)) = dataset.iter().find(|(_, l)| *l >= n_classes) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let mut curve = Vec::with_capacity(epochs);
    let inv_n = 1.0 / dataset.len() as f64;
    for _ in 0..epochs {
        let mut total_loss = 0.0;
        let mut accum: BTreeMap<usize, (Mat, Vec<f64>)> = BTreeMap::new();
        for (x, label) in dataset {
            let acts = net.forward(x)?;
            let out = acts.output();
            total_loss += -out.get(0, *label);
            let mut upstream = Mat::zeros(out.rows, out.cols);
            upstream.set(0, *label, -inv_n);
            let rec = net.backward(&acts, &upstream)?;
            for (idx, (wg, bg)) in rec.param_grads {
                let entry = accum.entry(idx).or_insert_with(|| {
                    (Mat::zeros(wg.rows, wg.cols), vec![0.0; bg.len()])
                });
                for (a, v) in entry.0.data.iter_mut().zip(&wg.data) {
                    *a += v;
                }
                for (a, v) in entry.1.iter_mut().zip(&bg) {
                    *a += v;
                }
            }
        }
        for (idx, (wg, bg)) in &accum {
            if let Layer::Affine { weights, bias } = &mut net.layers[*idx] {
                for (w, g) in weights.data.iter_mut().zip(&wg.data) {
                    *w -= lr * g;
                }
                for (b, g) in bias.iter_mut().zip(bg) {
                    *b -= lr * g;
                }
            }
        }
        curve.push(total_loss * inv_n);
    }
    Ok(curve)
}

/// Classification accuracy of a LogSoftmax-terminated network.
pub fn classify_accuracy(net: &Network, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, label) in dataset {
        let out = net.forward(x)?;
        let row = out.output().row(0);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

// ---------------------------------------------------------------------------
// Persistence: versioned binary parameters + text shape manifest
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"VSNET01\n";

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    let mut manifest = String::new();
    for layer in &net.layers {
        buf.push(layer.tag());
        match layer {
            Layer::Affine { weights, bias } => {
                buf.extend_from_slice(&(weights.rows as u32).to_le_bytes());
                buf.extend_from_slice(&(weights.cols as u32).to_le_bytes());
                for &v in &weights.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                for &v in bias {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                manifest.push_str(&format!("affine {}x{}\n", weights.rows, weights.cols));
            }
            other => manifest.push_str(&format!("{}\n", other.name())),
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    let manifest_path = path.with_extension("manifest");
    std::fs::write(&manifest_path, manifest).map_err(|source| Error::Io {
        path: manifest_path,
        source,
    })?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let bad = |msg: &str| Error::MalformedWav(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Config(format!(
            "{}: not a network parameter file",
            path.display()
        )));
    }
    let mut pos = 8;
    let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(bad("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let n_layers = read_u32(&bytes, &mut pos)?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        if pos >= bytes.len() {
            return Err(bad("truncated layer table"));
        }
        let tag = bytes[pos];
        pos += 1;
        let layer = match tag {
            1 => {
                let rows = read_u32(&bytes, &mut pos)? as usize;
                let cols = read_u32(&bytes, &mut pos)? as usize;
                let n = rows * cols + cols;
                if pos + 4 * n > bytes.len() {
                    return Err(bad("truncated affine parameters"));
                }
                let mut vals = Vec::with_capacity(n);
                for _ in 0..n {
                    let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                    vals.push(v as f64);
                    pos += 4;
                }
                let bias = vals.split_off(rows * cols);
                Layer::Affine {
                    weights: Mat {
                        rows,
                        cols,
                        data: vals,
                    },
                    bias,
                }
            }
            2 => Layer::Tanh,
            3 => Layer::Relu,
            4 => Layer::MeanPoolTime,
            5 => Layer::L2Normalize,
            6 => Layer::LogSoftmax,
            t => return Err(bad(&format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    Ok(Network { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seeded_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Mat::zeros(rows, cols);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut w = Mat::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let net = Network::new(vec![Layer::Affine {
            weights: w,
            bias: vec![0.0; 3],
        }]);
        let x = Mat::from_rows(vec![vec![1.0, -2.0, 0.5]]);
        let acts = net.forward(&x).unwrap();
        assert_eq!(acts.output(), &x);
    }

    #[test]
    fn l2_normalize_unit_vector() {
        let net = Network::new(vec![Layer::L2Normalize]);
        let x = Mat::from_rows(vec![vec![3.0, 4.0]]);
        let y = net.forward(&x).unwrap();
        assert!((y.output().get(0, 0) - 0.6).abs() < 1e-12);
        assert!((y.output().get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Network::new(vec![Layer::Relu]);
        let x = Mat::from_rows(vec![vec![-1.0, 2.0]]);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.output().row(0), &[0.0, 2.0]);
    }

    #[test]
    fn backward_linear_map_input_grad() {
        // y = Wx, loss = y1 -> input grad is the first row of W (as x W, the
        // first column of W).
        let w = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let net = Network::new(vec![Layer::Affine {
            weights: w,
            bias: vec![0.0; 2],
        }]);
        let x = Mat::from_rows(vec![vec![0.1, 0.2, 0.3]]);
        let acts = net.forward(&x).unwrap();
        let rec = net
            .backward(&acts, &Mat::from_rows(vec![vec![1.0, 0.0]]))
            .unwrap();
        assert_eq!(rec.input_grad.row(0), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let net = Network::new(vec![Layer::Tanh]);
        let x = Mat::from_rows(vec![vec![0.0]]);
        let acts = net.forward(&x).unwrap();
        let rec = net.backward(&acts, &Mat::from_rows(vec![vec![1.0]])).unwrap();
        assert!((rec.input_grad.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_before_forward_rejected() {
        let net = Network::new(vec![Layer::Tanh]);
        let fake = Activations { acts: vec![] };
        assert!(net
            .backward(&fake, &Mat::from_rows(vec![vec![1.0]]))
            .is_err());
    }

    #[test]
    fn grad_check_two_layer_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = Network::new(vec![
            affine_random(5, 8, &mut rng),
            Layer::Tanh,
            affine_random(8, 3, &mut rng),
        ]);
        let x = seeded_tensor(1, 5, &mut rng);
        let seed = seeded_tensor(1, 3, &mut rng);
        let report = grad_check(&net, &x, &seed, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
    }

    #[test]
    fn grad_check_all_layer_types_50_cases() {
        for case in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
            let net = Network::new(vec![
                affine_random(6, 10, &mut rng),
                Layer::Tanh,
                affine_random(10, 7, &mut rng),
                Layer::Relu,
                Layer::MeanPoolTime,
                affine_random(7, 4, &mut rng),
                Layer::L2Normalize,
            ]);
            let x = seeded_tensor(3, 6, &mut rng);
            let seed = seeded_tensor(1, 4, &mut rng);
            let report = grad_check(&net, &x, &seed, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "case {case}: {:?}", report.failures);
        }
    }

    #[test]
    fn grad_check_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::new(vec![affine_random(4, 5, &mut rng), Layer::LogSoftmax]);
        let x = seeded_tensor(1, 4, &mut rng);
        let seed = seeded_tensor(1, 5, &mut rng);
        let report = grad_check(&net, &x, &seed, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn grad_check_detects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::new(vec![affine_random(3, 3, &mut rng)]);
        let x = seeded_tensor(1, 3, &mut rng);
        let seed = seeded_tensor(1, 3, &mut rng);
        assert!(grad_check(&net, &x, &seed, 1e-5, 1e-6).unwrap().passed());
        // Corrupt one weight after linearization: backward of a *different*
        // network must fail the check against this one.
        if let Layer::Affine { weights, .. } = &mut net.layers[0] {
            weights.data[4] += 0.5;
        }
        // Fault injection: wrap a network whose analytic grad we corrupt by
        // comparing a hand-offset analytic value.
        let acts = net.forward(&x).unwrap();
        let rec = net.backward(&acts, &seed).unwrap();
        let corrupted = rec.param_grads[&0].0.data[4] + 1.0;
        let step = 1e-5;
        let perturbed = |delta: f64| {
            let mut n2 = net.clone();
            if let Layer::Affine { weights, .. } = &mut n2.layers[0] {
                weights.data[4] += delta;
            }
            let out = n2.forward(&x).unwrap();
            out.output()
                .data
                .iter()
                .zip(&seed.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = (perturbed(step) - perturbed(-step)) / (2.0 * step);
        assert!(super::rel_err(corrupted, numeric) > 1e-4);
    }

    #[test]
    fn l2_normalize_zero_input_zero_grad() {
        let net = Network::new(vec![Layer::L2Normalize]);
        let x = Mat::from_rows(vec![vec![0.0, 0.0]]);
        let acts = net.forward(&x).unwrap();
        let rec = net.backward(&acts, &Mat::from_rows(vec![vec![1.0, 1.0]])).unwrap();
        assert_eq!(rec.input_grad.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn train_separable_two_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Linearly separable: class by sign of first coordinate.
        let mut dataset = Dataset::new();
        for _ in 0..40 {
            let x0: f64 = rng.gen_range(0.2..1.0);
            let x1: f64 = rng.gen_range(-1.0..1.0);
            dataset.push((Mat::from_rows(vec![vec![x0, x1]]), 0));
            dataset.push((Mat::from_rows(vec![vec![-x0, x1]]), 1));
        }
        let mut net = Network::new(vec![affine_random(2, 2, &mut rng), Layer::LogSoftmax]);
        let curve = train_classifier(&mut net, &dataset, 2, 200, 1.0).unwrap();
        assert!(curve.last().unwrap() <= curve.first().unwrap());
        assert!((classify_accuracy(&net, &dataset).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_zero_epochs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(vec![affine_random(2, 2, &mut rng), Layer::LogSoftmax]);
        let ds = vec![(Mat::from_rows(vec![vec![1.0, 0.0]]), 0usize)];
        assert!(train_classifier(&mut net, &ds, 2, 0, 0.1).is_err());
    }

    #[test]
    fn train_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut net = Network::new(vec![affine_random(2, 2, &mut rng), Layer::LogSoftmax]);
            let ds = vec![
                (Mat::from_rows(vec![vec![1.0, 0.3]]), 0usize),
                (Mat::from_rows(vec![vec![-1.0, 0.3]]), 1usize),
            ];
            train_classifier(&mut net, &ds, 2, 50, 0.5).unwrap();
            net
        };
        let a = build();
        let b = build();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            if let (Layer::Affine { weights: wa, .. }, Layer::Affine { weights: wb, .. }) = (la, lb)
            {
                assert_eq!(wa.data, wb.data);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::new(vec![
            affine_random(4, 6, &mut rng),
            Layer::Tanh,
            Layer::L2Normalize,
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        assert!(path.with_extension("manifest").exists());
        let back = load_network(&path).unwrap();
        assert_eq!(back.layers.len(), 3);
        if let (Layer::Affine { weights: wa, .. }, Layer::Affine { weights: wb, .. }) =
            (&net.layers[0], &back.layers[0])
        {
            for (a, b) in wa.data.iter().zip(&wb.data) {
                assert!((a - b).abs() < 1e-6); // f32 storage
            }
        } else {
            panic!("layer 0 should be affine");
        }
    }
}
