//! MLP embedding network with a linear classification head, plus Adam and
//! text checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer computing `x · weight + bias`; `weight` is in × out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.cols()] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn he_uniform(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: Tensor::new(vec![inputs, outputs], data).expect("shape matches data"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Width F of the last embedding layer.
    pub embedding_dim: usize,
    /// Number N of source classes.
    pub classes: usize,
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn toy(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embedding_dim: 32,
            classes,
            init_seed: 0,
        }
    }
}

/// Embedding MLP φ with ReLU after every layer, plus a linear head `W, b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layers: Vec<Linear>,
    head: Linear,
}

impl Backbone {
    /// He-uniform weights from `config.init_seed`, zero biases.
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(config.input_dim)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(config.embedding_dim))
            .collect();
        if widths.contains(&0) || config.classes == 0 {
            return Err(Error::Config(format!(
                "layer widths and class count must be positive: {widths:?}, {} classes",
                config.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = widths
            .windows(2)
            .map(|w| Linear::he_uniform(&mut rng, w[0], w[1]))
            .collect();
        let head = Linear::he_uniform(&mut rng, config.embedding_dim, config.classes);
        Ok(Self { layers, head })
    }

    pub fn from_layers(layers: Vec<Linear>, head: Linear) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one embedding layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "backbone",
                    format!("layer widths {} → {} do not chain", pair[0].outputs(), pair[1].inputs()),
                ));
            }
        }
        let f = layers.last().map(Linear::outputs).unwrap_or_default();
        if head.inputs() != f {
            return Err(Error::shape(
                "backbone",
                format!("head expects {} inputs, F = {f}", head.inputs()),
            ));
        }
        Ok(Self { layers, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `(name, tensor)` for every parameter in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundBackbone> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push((g.leaf(l.weight.clone())?, g.leaf(l.bias.clone())?));
        }
        let head = (g.leaf(self.head.weight.clone())?, g.leaf(self.head.bias.clone())?);
        Ok(BoundBackbone { layers, head })
    }

    /// Inference-only embeddings of a batch (rows of `inputs`).
    pub fn embed_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut h = g.constant(inputs.clone())?;
        for l in &self.layers {
            let w = g.constant(l.weight.clone())?;
            let b = g.constant(l.bias.clone())?;
            h = linear_relu(&mut g, h, w, b, "embed")?;
        }
        Ok(g.value(h).clone())
    }
}

fn linear_relu(g: &mut Graph, x: Var, w: Var, b: Var, op: &'static str) -> Result<Var> {
    let (have, want) = (g.value(x).cols(), g.value(w).rows());
    if g.value(x).shape().len() != 2 || have != want {
        return Err(Error::shape(op, format!("input width {have}, layer expects {want}")));
    }
    let z = g.matmul(x, w)?;
    let z = g.add_row(z, b)?;
    g.relu(z)
}

/// Parameter leaves of a [`Backbone`] inside one graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    layers: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl BoundBackbone {
    /// Embeddings φ(x), batch × F. No output normalisation.
    pub fn embed(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let mut h = inputs;
        for &(w, b) in &self.layers {
            h = linear_relu(g, h, w, b, "embed")?;
        }
        Ok(h)
    }

    /// Logits `φ · W + b`, batch × N.
    pub fn classify(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        let (w, b) = self.head;
        let (have, want) = (g.value(embeddings).cols(), g.value(w).rows());
        if g.value(embeddings).shape().len() != 2 || have != want {
            return Err(Error::shape(
                "classify",
                format!("embedding width {have}, head expects {want}"),
            ));
        }
        let z = g.matmul(embeddings, w)?;
        g.add_row(z, b)
    }

    pub fn parameters(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain([self.head.0, self.head.1])
            .collect()
    }

    /// Gradients after `backward`, zero for parameters the root does not reach.
    pub fn gradients(&self, g: &Graph) -> Vec<Tensor> {
        self.parameters()
            .into_iter()
            .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step schedule: `base · factor^(−⌊epoch / period⌋)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub period: usize,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.003,
            period: 20,
            factor: 10.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("schedule period must be positive".into()));
        }
        if !(self.base > 0.0 && self.base.is_finite() && self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} and factor {} must be positive",
                self.base, self.factor
            )));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.period) as i32;
        self.base / self.factor.powi(drops)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(backbone: &Backbone, lr: f64) -> Self {
        let zeros: Vec<Tensor> = backbone
            .parameters()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            lr,
        }
    }

    fn matches(&self, backbone: &Backbone) -> bool {
        let params = backbone.parameters();
        self.first.len() == params.len()
            && self.second.len() == params.len()
            && params
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|((_, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One Adam update at the state's current learning rate. Gradients are
/// checked before anything is modified.
pub fn adam_step(
    backbone: &mut Backbone,
    state: &mut OptimizerState,
    gradients: &[Tensor],
    config: &AdamConfig,
) -> Result<()> {
    let names: Vec<String> = backbone.parameters().into_iter().map(|(n, _)| n).collect();
    if !state.matches(backbone) || gradients.len() != names.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", gradients.len(), names.len()),
        ));
    }
    for ((name, (_, p)), grad) in names.iter().zip(backbone.parameters()).zip(gradients) {
        if grad.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of {name} has shape {:?}", grad.shape()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (k, param) in backbone.parameters_mut().into_iter().enumerate() {
        let g = gradients[k].data();
        let m = state.first[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
        }
        let v = state.second[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
        }
        let (m, v) = (state.first[k].data(), state.second[k].data());
        for ((p, mi), vi) in param.data_mut().iter_mut().zip(m).zip(v) {
            *p -= state.lr * (mi / c1) / ((vi / c2).sqrt() + config.eps);
        }
        if !param.all_finite() {
            return Err(Error::NonFinite(format!("parameter {} after Adam step", names[k])));
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "dmmd-checkpoint 1";

/// A backbone plus, optionally, the optimizer state it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor(out: &mut String, tag: &str, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{tag} {name} {}", dims.join("x"));
    let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
    out.push_str(&values.join(" "));
    out.push('\n');
}

impl Checkpoint {
    /// Structured text: a version line, then for each tensor a
    /// `tag name RxC` line followed by its values in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "layers {}", self.backbone.layers.len());
        for (name, t) in self.backbone.parameters() {
            write_tensor(&mut out, "param", &name, t);
        }
        if let Some(opt) = &self.optimizer {
            let _ = writeln!(out, "adam step={} lr={}", opt.step, opt.lr);
            let params = self.backbone.parameters();
            for ((name, _), (m, v)) in params.iter().zip(opt.first.iter().zip(&opt.second)) {
                write_tensor(&mut out, "m", name, m);
                write_tensor(&mut out, "v", name, v);
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&CHECKPOINT_MAGIC) {
            return Err(err(1, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let layer_count: usize = lines
            .get(1)
            .and_then(|l| l.strip_prefix("layers "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| err(2, "expected `layers <count>`".into()))?;
        let mut pos = 2;

        let read_tensor = |pos: &mut usize, tag: &str, name: &str| -> Result<Tensor> {
            let head_no = *pos + 1;
            let head = lines
                .get(*pos)
                .ok_or_else(|| err(head_no, format!("missing {tag} {name}")))?;
            let rest = head
                .strip_prefix(tag)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|r| r.strip_prefix(name))
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| err(head_no, format!("expected `{tag} {name} <shape>`, found `{head}`")))?;
            let shape = rest
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(head_no, format!("bad shape `{rest}`")))?;
            let body = lines
                .get(*pos + 1)
                .ok_or_else(|| err(head_no + 1, format!("missing values of {name}")))?;
            let values = if body.is_empty() {
                Vec::new()
            } else {
                body.split(' ')
                    .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| err(head_no + 1, format!("bad value in {name}")))?
            };
            *pos += 2;
            Tensor::new(shape, values).map_err(|e| err(head_no + 1, e.to_string()))
        };

        let mut layers = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            let w = read_tensor(&mut pos, "param", &format!("layer{i}.weight"))?;
            let b = read_tensor(&mut pos, "param", &format!("layer{i}.bias"))?;
            layers.push(Linear::new(w, b)?);
        }
        let head = Linear::new(
            read_tensor(&mut pos, "param", "head.weight")?,
            read_tensor(&mut pos, "param", "head.bias")?,
        )?;
        let backbone = Backbone::from_layers(layers, head)?;

        let names: Vec<String> = backbone.parameters().into_iter().map(|(n, _)| n).collect();
        let optimizer = match lines.get(pos) {
            None => None,
            Some(line) => {
                let line_no = pos + 1;
                let fields: Option<(u64, f64)> = line.strip_prefix("adam step=").and_then(|r| {
                    let (s, lr) = r.split_once(" lr=")?;
                    Some((s.parse().ok()?, lr.parse().ok()?))
                });
                let (step, lr) = fields.ok_or_else(|| err(line_no, format!("unexpected `{line}`")))?;
                pos += 1;
                let mut first = Vec::new();
                let mut second = Vec::new();
                for name in &names {
                    first.push(read_tensor(&mut pos, "m", name)?);
                    second.push(read_tensor(&mut pos, "v", name)?);
                }
                let state = OptimizerState {
                    first,
                    second,
                    step,
                    lr,
                };
                if !state.matches(&backbone) {
                    return Err(err(line_no, "optimizer moments do not match parameter shapes".into()));
                }
                Some(state)
            }
        };
        if pos < lines.len() {
            return Err(err(pos + 1, "trailing content".into()));
        }
        Ok(Self { backbone, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy_smoothed;

    fn single_layer(weight: Tensor, bias: Vec<f64>, classes: usize) -> Backbone {
        let f = weight.cols();
        Backbone::from_layers(
            vec![Linear::new(weight, Tensor::vector(bias)).unwrap()],
            Linear::zeros(f, classes),
        )
        .unwrap()
    }

    #[test]
    fn zero_network_embeds_to_zero() {
        let b = single_layer(Tensor::zeros(&[3, 4]), vec![0.0; 4], 2);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let e = b.embed_batch(&x).unwrap();
        assert_eq!(e.shape(), [2, 4]);
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_is_relu() {
        let b = single_layer(Tensor::identity(3), vec![0.0; 3], 2);
        let x = Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(b.embed_batch(&x).unwrap().data(), [1.5, 0.0, 0.25]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let b = Backbone::new(&BackboneConfig::toy(4, 3)).unwrap();
        let x = Tensor::matrix(1, 5, vec![0.0; 5]).unwrap();
        assert!(matches!(b.embed_batch(&x), Err(Error::Shape { .. })));

        let mut g = Graph::new();
        let bound = b.bind(&mut g).unwrap();
        let wrong = g.constant(Tensor::matrix(2, 7, vec![0.0; 14]).unwrap()).unwrap();
        assert!(bound.classify(&mut g, wrong).is_err());
    }

    #[test]
    fn output_widths_match_configuration() {
        let b = Backbone::new(&BackboneConfig::toy(16, 50)).unwrap();
        let x = Tensor::matrix(3, 16, (0..48).map(|i| i as f64 / 10.0).collect()).unwrap();
        let mut g = Graph::new();
        let bound = b.bind(&mut g).unwrap();
        let xv = g.constant(x).unwrap();
        let e = bound.embed(&mut g, xv).unwrap();
        let l = bound.classify(&mut g, e).unwrap();
        assert_eq!(g.value(e).shape(), [3, 32]);
        assert_eq!(g.value(l).shape(), [3, 50]);
    }

    #[test]
    fn classify_hand_product() {
        let layer = Linear::zeros(1, 1);
        let head = Linear::new(
            Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        let b = Backbone::from_layers(vec![layer], head).unwrap();
        let mut g = Graph::new();
        let bound = b.bind(&mut g).unwrap();
        let e = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let logits = bound.classify(&mut g, e).unwrap();
        assert_eq!(g.value(logits).data(), [2.0, -2.0]);

        let s = g.sum(logits).unwrap();
        g.backward(s).unwrap();
        let grads = bound.gradients(&g);
        assert_eq!(grads.last().unwrap().data(), [1.0, 1.0]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let b = single_layer(Tensor::identity(2), vec![0.0; 2], 3);
        let mut g = Graph::new();
        let bound = b.bind(&mut g).unwrap();
        let x = g.constant(Tensor::matrix(1, 2, vec![4.0, 1.0]).unwrap()).unwrap();
        let e = bound.embed(&mut g, x).unwrap();
        let l = bound.classify(&mut g, e).unwrap();
        assert_eq!(g.value(l).data(), [0.0; 3]);
    }

    #[test]
    fn initialisation_is_deterministic() {
        let cfg = BackboneConfig::toy(8, 5);
        assert_eq!(Backbone::new(&cfg).unwrap(), Backbone::new(&cfg).unwrap());
        let other = Backbone::new(&BackboneConfig { init_seed: 1, ..cfg }).unwrap();
        assert_ne!(other, Backbone::new(&BackboneConfig::toy(8, 5)).unwrap());
    }

    #[test]
    fn schedule_steps_down_every_period() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.003);
        assert_eq!(s.at(19), 0.003);
        assert!((s.at(20) - 0.0003).abs() < 1e-18);
        assert!((s.at(40) - 0.00003).abs() < 1e-18);
        assert!(LrSchedule { period: 0, ..s }.validate().is_err());
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut b = Backbone::new(&BackboneConfig::toy(4, 3)).unwrap();
        let before = b.clone();
        let mut state = OptimizerState::new(&b, 0.003);
        let grads: Vec<Tensor> = b.parameters().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        adam_step(&mut b, &mut state, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(b, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut b = single_layer(Tensor::matrix(1, 1, vec![0.5]).unwrap(), vec![0.0], 1);
        let mut state = OptimizerState::new(&b, 0.003);
        let grads = vec![
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
            Tensor::zeros(&[1, 1]),
            Tensor::zeros(&[1]),
        ];
        adam_step(&mut b, &mut state, &grads, &AdamConfig::default()).unwrap();
        let w = b.layers()[0].weight.item();
        assert!(w < 0.5);
        // First bias-corrected Adam step has magnitude lr.
        assert!((0.5 - w - 0.003).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut b = Backbone::new(&BackboneConfig::toy(4, 3)).unwrap();
        let before = b.clone();
        let mut state = OptimizerState::new(&b, 0.003);
        let mut grads: Vec<Tensor> = b.parameters().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[3].data_mut()[0] = f64::NAN;
        match adam_step(&mut b, &mut state, &grads, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layer1.bias"),
            other => panic!("{other:?}"),
        }
        assert_eq!(b, before);
    }

    #[test]
    fn separable_toy_problem_trains_below_ln2() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            rows.push(vec![1.0 + t, 0.5 - t]);
            labels.push(0);
            rows.push(vec![-1.0 - t, -0.5 + t]);
            labels.push(1);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = BackboneConfig {
            input_dim: 2,
            hidden: vec![8],
            embedding_dim: 4,
            classes: 2,
            init_seed: 3,
        };
        let mut b = Backbone::new(&cfg).unwrap();
        let mut state = OptimizerState::new(&b, 0.003);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let mut g = Graph::new();
            let bound = b.bind(&mut g).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let e = bound.embed(&mut g, xv).unwrap();
            let l = bound.classify(&mut g, e).unwrap();
            let loss = cross_entropy_smoothed(&mut g, l, &labels, 0.1).unwrap();
            losses.push(g.scalar(loss));
            g.backward(loss).unwrap();
            adam_step(&mut b, &mut state, &bound.gradients(&g), &AdamConfig::default()).unwrap();
        }
        assert!(*losses.last().unwrap() < 2f64.ln(), "{losses:?}");
        for w in losses.windows(20) {
            assert!(w[19] < w[0]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut b = Backbone::new(&BackboneConfig::toy(5, 4)).unwrap();
        let mut state = OptimizerState::new(&b, 0.003);
        let grads: Vec<Tensor> = b
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape(), 0.1234567890123))
            .collect();
        adam_step(&mut b, &mut state, &grads, &AdamConfig::default()).unwrap();
        let ckpt = Checkpoint {
            backbone: b,
            optimizer: Some(state),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in back.backbone.parameters().iter().zip(ckpt.backbone.parameters()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }

        let bare = Checkpoint {
            backbone: ckpt.backbone.clone(),
            optimizer: None,
        };
        assert_eq!(Checkpoint::from_text(&bare.to_text(), &path).unwrap(), bare);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let b = Backbone::new(&BackboneConfig::toy(3, 2)).unwrap();
        let text = Checkpoint {
            backbone: b,
            optimizer: None,
        }
        .to_text();
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_text("nonsense", p).is_err());
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Checkpoint::from_text(&cut, p), Err(Error::Parse { .. })));
        let bad = text.replacen("param layer0.bias 64", "param layer0.bias 63", 1);
        assert!(Checkpoint::from_text(&bad, p).is_err());
    }
}
