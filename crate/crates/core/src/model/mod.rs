//! The full classification pipeline: input-side feature attention, BiLSTM,
//! output-side temporal attention, pooling, and the fully connected head,
//! plus parameter bookkeeping and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, CheckpointMeta};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{iam_forward, AttentionAxis};
use crate::error::{Error, Result};
use crate::recurrent::{bilstm_forward, LstmNodes, LstmParams};
use crate::seeding;
use crate::tensor::{Graph, NodeId, Tensor};

/// How the attended sequence is reduced before the fully connected head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over the time axis (uses every attended step).
    MeanOverTime,
    /// The final time step only.
    LastStep,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub num_features: usize,
    pub hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 10,
            num_features: 52,
            hidden: 128,
            fc1: 128,
            fc2: 64,
            num_classes: 21,
            dropout: 0.2,
            pooling: Pooling::MeanOverTime,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("num_features", self.num_features),
            ("hidden", self.hidden),
            ("fc1", self.fc1),
            ("fc2", self.fc2),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("model.{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of trainable scalars this architecture declares: two dynamic
    /// scales, eight gate weight/bias pairs per direction, and the three
    /// dense layers of the head.
    pub fn param_count(&self) -> usize {
        let (f, h) = (self.num_features, self.hidden);
        let lstm_dir = 4 * (h * (h + f) + h);
        let head = (2 * h * self.fc1 + self.fc1)
            + (self.fc1 * self.fc2 + self.fc2)
            + (self.fc2 * self.num_classes + self.num_classes);
        2 + 2 * lstm_dir + head
    }
}

/// Ordered name → tensor map of every trainable leaf.
///
/// Iteration order is insertion order and therefore deterministic; names are
/// unique. The registry is the single source of truth for parameter values:
/// each forward pass binds copies into a fresh graph.
#[derive(Debug, Clone, Default)]
pub struct ParameterRegistry {
    entries: Vec<(String, Tensor)>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.entries.push((name.to_string(), tensor.with_requires_grad()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind_all(&self, g: &mut Graph) -> Binding {
        let ids = self.entries.iter().map(|(n, t)| (n.clone(), g.leaf(t))).collect();
        Binding { ids }
    }

    /// Adds each bound leaf's gradient into the matching tensor's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &Binding) -> Result<()> {
        if binding.ids.len() != self.entries.len() {
            return Err(Error::Contract("binding does not match registry".into()));
        }
        for ((name, tensor), (bound_name, id)) in self.entries.iter_mut().zip(&binding.ids) {
            if name != bound_name {
                return Err(Error::Contract(format!("binding order mismatch at {name}")));
            }
            let src = g.grad(*id)?;
            let dst = tensor.grad.get_or_insert_with(|| vec![0.0; src.len()]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }
}

/// Graph handles of one forward pass's bound parameters, in registry order.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<(String, NodeId)>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Contract(format!("no bound parameter named {name}")))
    }
}

/// Forward or evaluation behaviour (dropout on or off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result handles of one forward pass.
#[derive(Debug)]
pub struct ModelOutput {
    /// `[B, num_classes]` raw scores; softmax lives inside the loss.
    pub logits: NodeId,
    /// Feature-attention weights `[B, F, F]` from the input block.
    pub attn_in: NodeId,
    /// Temporal-attention weights `[B, L, L]` from the output block.
    pub attn_out: NodeId,
    /// Parameter binding of this pass, for gradient collection.
    pub binding: Binding,
}

const LSTM_SUFFIXES: [&str; 8] = ["w_f", "w_i", "w_c", "w_o", "b_f", "b_i", "b_c", "b_o"];

fn expected_params(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (f, h) = (config.num_features, config.hidden);
    let mut out = vec![
        ("lambda_in".to_string(), vec![1]),
        ("lambda_out".to_string(), vec![1]),
    ];
    for dir in ["fwd", "bwd"] {
        for suffix in LSTM_SUFFIXES {
            let shape = if suffix.starts_with('w') { vec![h, h + f] } else { vec![1, h] };
            out.push((format!("bilstm.{dir}.{suffix}"), shape));
        }
    }
    out.push(("fc1.weight".to_string(), vec![2 * h, config.fc1]));
    out.push(("fc1.bias".to_string(), vec![1, config.fc1]));
    out.push(("fc2.weight".to_string(), vec![config.fc1, config.fc2]));
    out.push(("fc2.bias".to_string(), vec![1, config.fc2]));
    out.push(("classifier.weight".to_string(), vec![config.fc2, config.num_classes]));
    out.push(("classifier.bias".to_string(), vec![1, config.num_classes]));
    out
}

fn linear_init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, rng);
    let b = Tensor::zeros(&[1, fan_out]);
    (w, b)
}

/// The trained artifact: configuration plus its parameter registry.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: ParameterRegistry,
}

impl Model {
    /// Fresh seeded initialization. Dynamic scales start at 1 (plain scaled
    /// dot-product behaviour), LSTM weights are uniform `±1/√H` with a
    /// forget-gate bias of 1, dense layers uniform `±1/√fan_in`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng_for(seed, "init");
        let mut registry = ParameterRegistry::new();
        registry.insert("lambda_in", Tensor::scalar(1.0)?)?;
        registry.insert("lambda_out", Tensor::scalar(1.0)?)?;
        for dir in ["fwd", "bwd"] {
            let p = LstmParams::init(config.num_features, config.hidden, &mut rng);
            for (suffix, t) in LSTM_SUFFIXES.iter().zip([p.w_f, p.w_i, p.w_c, p.w_o, p.b_f, p.b_i, p.b_c, p.b_o]) {
                registry.insert(&format!("bilstm.{dir}.{suffix}"), t)?;
            }
        }
        let (w1, b1) = linear_init(2 * config.hidden, config.fc1, &mut rng);
        registry.insert("fc1.weight", w1)?;
        registry.insert("fc1.bias", b1)?;
        let (w2, b2) = linear_init(config.fc1, config.fc2, &mut rng);
        registry.insert("fc2.weight", w2)?;
        registry.insert("fc2.bias", b2)?;
        let (wc, bc) = linear_init(config.fc2, config.num_classes, &mut rng);
        registry.insert("classifier.weight", wc)?;
        registry.insert("classifier.bias", bc)?;
        Ok(Model { config, registry })
    }

    /// Rebuilds a model from loaded parts, checking the registry against the
    /// architecture the config declares.
    pub fn from_parts(config: ModelConfig, registry: ParameterRegistry) -> Result<Self> {
        config.validate()?;
        let expected = expected_params(&config);
        if registry.len() != expected.len() {
            return Err(Error::Contract(format!(
                "registry has {} parameters, config declares {}",
                registry.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match registry.get(name) {
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, config declares {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, registry })
    }

    /// One forward pass over `[B, seq_len, num_features]`.
    ///
    /// Dropout draws from `rng` only in `Train` mode; `Eval` is deterministic
    /// and leaves the generator untouched.
    pub fn forward<R: Rng>(&self, g: &mut Graph, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<ModelOutput> {
        let expect = [batch.shape().first().copied().unwrap_or(0), self.config.seq_len, self.config.num_features];
        if batch.rank() != 3 || batch.shape() != expect || expect[0] == 0 {
            return Err(Error::dim(
                "model_forward",
                format!(
                    "batch shape {:?} does not match config [B, {}, {}]",
                    batch.shape(),
                    self.config.seq_len,
                    self.config.num_features
                ),
            ));
        }
        let binding = self.registry.bind_all(g);
        let x = g.leaf(batch);

        let (y1, attn_in) = iam_forward(g, x, AttentionAxis::Feature, binding.id("lambda_in")?)?;

        let lstm_nodes = |g: &mut Graph, dir: &str| -> Result<LstmNodes> {
            let id = |suffix: &str| binding.id(&format!("bilstm.{dir}.{suffix}"));
            LstmNodes::from_leaves(
                g,
                self.config.hidden,
                [id("w_f")?, id("w_i")?, id("w_c")?, id("w_o")?],
                [id("b_f")?, id("b_i")?, id("b_c")?, id("b_o")?],
            )
        };
        let fwd = lstm_nodes(g, "fwd")?;
        let bwd = lstm_nodes(g, "bwd")?;
        let h = bilstm_forward(g, y1, &fwd, &bwd)?;

        let (y2, attn_out) = iam_forward(g, h, AttentionAxis::Time, binding.id("lambda_out")?)?;

        let batch_size = expect[0];
        let pooled = match self.config.pooling {
            Pooling::MeanOverTime => g.mean(y2, Some(1))?,
            Pooling::LastStep => {
                let last = g.slice(y2, 1, self.config.seq_len - 1, self.config.seq_len)?;
                g.reshape(last, &[batch_size, 2 * self.config.hidden])?
            }
        };

        let training = mode == Mode::Train;
        let dense = |g: &mut Graph, input: NodeId, layer: &str| -> Result<NodeId> {
            let wx = g.matmul(input, binding.id(&format!("{layer}.weight"))?)?;
            g.add(wx, binding.id(&format!("{layer}.bias"))?)
        };
        let z1 = dense(g, pooled, "fc1")?;
        let a1 = g.relu(z1)?;
        let d1 = g.dropout(a1, self.config.dropout, training, rng)?;
        let z2 = dense(g, d1, "fc2")?;
        let a2 = g.relu(z2)?;
        let d2 = g.dropout(a2, self.config.dropout, training, rng)?;
        let logits = dense(g, d2, "classifier")?;

        Ok(ModelOutput { logits, attn_in, attn_out, binding })
    }
}

/// Argmax prediction per row of a `[B, C]` logits tensor; ties resolve to
/// the lowest class index.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(Error::dim("predictions", format!("expected [B, C], got {sh:?}")));
    }
    let classes = sh[1];
    Ok(logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}
