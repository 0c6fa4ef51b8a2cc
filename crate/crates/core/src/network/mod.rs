//! Multi-encoder segmentation network: configuration, parameter layout and
//! initialization. The forward pass lives in [`model`], serialization in
//! [`checkpoint`].

pub mod checkpoint;
pub mod model;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::SOURCES;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volumes::Source;

pub use checkpoint::{Checkpoint, OptimizerState, TrainingState};
pub use model::{
    encode, forward_full, fuse_attention, generate_m5, predict, segment, FeaturePyramid,
    ForwardOutput, ForwardResult, Prediction, Segmentation, Session,
};

/// Tag written into every store and checkpoint; bumped when the layout changes.
pub const STORE_VERSION: &str = "mmseg-params-1";

pub const CLASSES: usize = 4;

/// Initial summed background logit. With zero foreground logits this starts
/// every voxel at about 95% background, so the foreground-only Dice loss does
/// not have to fight a uniform softmax over mostly empty space.
pub const BACKGROUND_LOGIT: f32 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub dilation_rates: (usize, usize),
    pub dropout_rate: f32,
    pub deep_supervision: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_filters: 8,
            input_shape: [32, 32, 32],
            classes: CLASSES,
            dilation_rates: (2, 4),
            dropout_rate: 0.3,
            deep_supervision: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.classes != CLASSES {
            return Err(Error::Config(format!("classes must be {CLASSES}, got {}", self.classes)));
        }
        let factor = 1usize << (self.levels - 1);
        if self.input_shape.iter().any(|&n| n == 0 || n % factor != 0) {
            return Err(Error::Config(format!(
                "input shape {:?} is not divisible by 2^(levels-1) = {factor}",
                self.input_shape
            )));
        }
        if self.dilation_rates.0 == 0 || self.dilation_rates.1 == 0 {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Feature channels at `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial size at `level`.
    pub fn spatial(&self, level: usize) -> [usize; 3] {
        self.input_shape.map(|n| n >> level)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Levels that emit class logits.
    pub fn head_levels(&self) -> Vec<usize> {
        if self.deep_supervision {
            (0..self.levels).collect()
        } else {
            vec![0]
        }
    }
}

/// Parameter-group name: `encoder.<source>` for encoders, otherwise the first
/// path component (`feg`, `fusion`, `seg`, `cpem`).
pub fn group_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or("");
    if first == "encoder" {
        match parts.next() {
            Some(second) => &name[..first.len() + 1 + second.len()],
            None => first,
        }
    } else {
        first
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f32),
    Zeros,
    /// Correlation-weight bias: 1/4 on the four mixing weights, 0 on the offset.
    CorrelationBias,
    /// Class-logit bias: this head's share of the background prior.
    HeadBias(usize),
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv(specs: &mut Vec<ParamSpec>, name: String, cout: usize, cin: usize, k: usize) {
    specs.push(ParamSpec {
        name,
        shape: vec![cout, cin, k, k, k],
        init: Init::He(cin * k * k * k),
    });
}

fn bias(specs: &mut Vec<ParamSpec>, name: String, n: usize) {
    specs.push(ParamSpec {
        name,
        shape: vec![n],
        init: Init::Zeros,
    });
}

fn dense(specs: &mut Vec<ParamSpec>, prefix: &str, nout: usize, nin: usize, w_init: Init) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![nout, nin],
        init: w_init,
    });
    bias(specs, format!("{prefix}.b"), nout);
}

fn res_dil(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    conv(specs, format!("{prefix}.res.conv1.w"), c, c, 3);
    conv(specs, format!("{prefix}.res.conv2.w"), c, c, 3);
}

/// Every parameter the configuration declares, in a fixed order.
fn layout(config: &NetworkConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let levels = config.levels;
    for source in Source::ALL {
        let p = format!("encoder.{}", source.name());
        for l in 0..levels {
            let c = config.channels(l);
            if l == 0 {
                conv(&mut s, format!("{p}.l0.conv.w"), c, 1, 3);
            } else {
                conv(&mut s, format!("{p}.l{l}.down.w"), c, config.channels(l - 1), 3);
            }
            res_dil(&mut s, &format!("{p}.l{l}"), c);
        }
    }

    // generator decoder: four acquired pyramids in, one volume out
    let cb = config.bottleneck_channels();
    conv(&mut s, "feg.bottom.conv.w".into(), cb, 4 * cb, 3);
    res_dil(&mut s, "feg.bottom", cb);
    for l in (0..levels - 1).rev() {
        let c = config.channels(l);
        conv(&mut s, format!("feg.l{l}.up.w"), c, config.channels(l + 1), 3);
        conv(&mut s, format!("feg.l{l}.merge.w"), c, 5 * c, 3);
        res_dil(&mut s, &format!("feg.l{l}"), c);
    }
    conv(&mut s, "feg.out.w".into(), 1, config.channels(0), 1);
    bias(&mut s, "feg.out.b".into(), 1);

    for l in 0..levels {
        let c = config.channels(l);
        let p = format!("fusion.l{l}");
        dense(&mut s, &format!("{p}.se1"), c, SOURCES * c, Init::He(SOURCES * c));
        dense(&mut s, &format!("{p}.se2"), SOURCES * c, c, Init::He(c));
        conv(&mut s, format!("{p}.spatial.w"), 1, SOURCES * c, 1);
        bias(&mut s, format!("{p}.spatial.b"), 1);
        conv(&mut s, format!("{p}.proj.w"), c, SOURCES * c, 1);
    }

    conv(&mut s, "seg.bottom.conv.w".into(), cb, cb, 3);
    res_dil(&mut s, "seg.bottom", cb);
    for l in (0..levels - 1).rev() {
        let c = config.channels(l);
        conv(&mut s, format!("seg.l{l}.up.w"), c, config.channels(l + 1), 3);
        conv(&mut s, format!("seg.l{l}.merge.w"), c, 2 * c, 3);
        res_dil(&mut s, &format!("seg.l{l}"), c);
    }
    // Coarse heads start silent: their up-sampled logits paint whole blocks,
    // and letting them speak before the full-resolution head has localized the
    // small classes makes those classes flood the background.
    for l in config.head_levels() {
        s.push(ParamSpec {
            name: format!("seg.head{l}.w"),
            shape: vec![config.classes, config.channels(l), 1, 1, 1],
            init: if l == 0 { Init::He(config.channels(l)) } else { Init::Zeros },
        });
        s.push(ParamSpec {
            name: format!("seg.head{l}.b"),
            shape: vec![config.classes],
            init: Init::HeadBias(config.head_levels().len()),
        });
    }

    for i in 0..SOURCES {
        let p = format!("cpem.{i}");
        dense(&mut s, &format!("{p}.fc1"), cb, cb, Init::He(cb));
        s.push(ParamSpec {
            name: format!("{p}.fc2.w"),
            shape: vec![SOURCES * cb, cb],
            init: Init::Normal(0.01),
        });
        s.push(ParamSpec {
            name: format!("{p}.fc2.b"),
            shape: vec![SOURCES * cb],
            init: Init::CorrelationBias,
        });
    }
    s
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub version: String,
    pub seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn from_tensors(version: impl Into<String>, seed: u64, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            version: version.into(),
            seed,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.tensors.keys().map(|n| group_of(n).to_string()).collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.tensors.keys().any(|n| group_of(n) == group)
    }

    /// Drop every parameter whose group is not listed.
    pub fn retain_groups(&mut self, keep: &[&str]) {
        self.tensors.retain(|n, _| keep.contains(&group_of(n)));
    }

    /// The store must hold exactly the declared parameters of its groups,
    /// with the declared shapes.
    pub fn check_layout(&self, config: &NetworkConfig) -> Result<()> {
        config.validate()?;
        let groups = self.groups();
        let expected: BTreeMap<String, Vec<usize>> = layout(config)
            .into_iter()
            .filter(|p| groups.contains(group_of(&p.name)))
            .map(|p| (p.name, p.shape))
            .collect();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|n| !expected.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Allocate and initialize every block of the network.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in layout(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::He(fan_in) => {
                let d = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::HeadBias(heads) => (0..n)
                .map(|i| if i == 0 { BACKGROUND_LOGIT / heads as f32 } else { 0.0 })
                .collect(),
            Init::CorrelationBias => {
                let c = n / SOURCES;
                (0..n).map(|i| if i < 4 * c { 0.25 } else { 0.0 }).collect()
            }
        };
        tensors.insert(spec.name, Tensor::from_vec(&spec.shape, data)?);
    }
    Ok(ParameterStore {
        version: STORE_VERSION.to_string(),
        seed,
        tensors,
    })
}
