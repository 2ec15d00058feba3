//! Model configuration and the parameter store.
//!
//! Parameters live in a name-indexed store with stable insertion order; the
//! optimizer, the checkpoint format, and tape binding all iterate that order,
//! which keeps training deterministic and checkpoints layout-stable.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// `d` is the shared latent dimension both modalities are projected into
/// (32 is a desk-scale default; 512 reproduces the reference configuration).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension D.
    pub d: usize,
    /// Number of conv blocks in the shared sequence encoder.
    pub num_conv_layers: usize,
    /// Temporal kernel width; odd so 'same' padding is symmetric.
    pub conv_kernel: usize,
    /// Self-attention heads; must divide `d`.
    pub num_heads: usize,
    /// Hidden width of the interaction FFN (4D -> ffn_hidden -> D).
    pub ffn_hidden: usize,
    pub param_init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            num_conv_layers: 4,
            conv_kernel: 3,
            num_heads: 4,
            ffn_hidden: 32,
            param_init_seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("latent dimension d must be positive".into()));
        }
        if self.num_heads == 0 || self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must be positive and divide d {}",
                self.num_heads, self.d
            )));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd and positive, got {}",
                self.conv_kernel
            )));
        }
        if self.num_conv_layers == 0 {
            return Err(Error::Config("num_conv_layers must be at least 1".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Named parameter matrices with stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[(String, Array2<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    /// Replace a tensor, enforcing the existing shape. Used by checkpoint
    /// restore.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &self.entries[idx].1;
        if current.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, checkpoint holds {:?}",
                current.dim(),
                value.dim()
            )));
        }
        self.entries[idx].1 = value;
        Ok(())
    }
}

/// Parameters bound onto a tape as leaves, looked up by name while building
/// a graph and iterated in store order when collecting gradients.
pub struct TapeParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl TapeParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[self.index[name]]
    }

    /// Node ids in store order, aligned with [`ParamStore::entries`].
    pub fn ordered_ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// The full grounding model: two modality projections, a shared sequence
/// encoder, the interaction FFN, and two scoring heads.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub d_v: usize,
    pub d_q: usize,
    pub params: ParamStore,
}

impl Model {
    /// Initialize parameters deterministically from
    /// `config.param_init_seed`: Xavier-uniform weights, zero biases,
    /// identity layer norms.
    pub fn new(config: ModelConfig, d_v: usize, d_q: usize) -> Result<Self> {
        config.validate()?;
        if d_v == 0 || d_q == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_init_seed);
        let d = config.d;
        let mut params = ParamStore::default();

        let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
        };

        params.insert("proj_v.w", xavier(&mut rng, d_v, d));
        params.insert("proj_v.b", Array2::zeros((1, d)));
        params.insert("proj_q.w", xavier(&mut rng, d_q, d));
        params.insert("proj_q.b", Array2::zeros((1, d)));

        for layer in 0..config.num_conv_layers {
            let prefix = format!("enc.conv{layer}");
            params.insert(&format!("{prefix}.w"), xavier(&mut rng, config.conv_kernel * d, d));
            params.insert(&format!("{prefix}.b"), Array2::zeros((1, d)));
            params.insert(&format!("{prefix}.ln_g"), Array2::ones((1, d)));
            params.insert(&format!("{prefix}.ln_b"), Array2::zeros((1, d)));
        }

        for name in ["q", "k", "v", "o"] {
            params.insert(&format!("enc.attn.w{name}"), xavier(&mut rng, d, d));
            params.insert(&format!("enc.attn.b{name}"), Array2::zeros((1, d)));
        }
        params.insert("enc.attn.ln_g", Array2::ones((1, d)));
        params.insert("enc.attn.ln_b", Array2::zeros((1, d)));

        params.insert("ffn.w1", xavier(&mut rng, 4 * d, config.ffn_hidden));
        params.insert("ffn.b1", Array2::zeros((1, config.ffn_hidden)));
        params.insert("ffn.w2", xavier(&mut rng, config.ffn_hidden, d));
        params.insert("ffn.b2", Array2::zeros((1, d)));

        for head in ["head_s", "head_w"] {
            params.insert(&format!("{head}.w1"), xavier(&mut rng, d, d));
            params.insert(&format!("{head}.b1"), Array2::zeros((1, d)));
            params.insert(&format!("{head}.w2"), xavier(&mut rng, d, d));
            params.insert(&format!("{head}.b2"), Array2::zeros((1, d)));
            params.insert(&format!("{head}.w3"), xavier(&mut rng, d, 1));
            params.insert(&format!("{head}.b3"), Array2::zeros((1, 1)));
        }

        Ok(Model { config, d_v, d_q, params })
    }

    /// Bind every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> TapeParams {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (name, value) in self.params.entries() {
            index.insert(name.clone(), ids.len());
            ids.push(tape.leaf(value.clone()));
        }
        TapeParams { ids, index }
    }
}
