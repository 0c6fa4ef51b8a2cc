//! Forward pass on a [`Graph`].
//!
//! A [`Session`] binds each named parameter to at most one graph leaf, so a
//! block used by several paths (the acquired-sequence encoders feed both the
//! generator and the segmentation decoder) accumulates gradient from all of
//! them.

use std::collections::HashMap;

use super::{NetworkConfig, ParameterStore};
use crate::correlation::{source_order, CPEM_SLOPE, SOURCES};
use crate::dropout::{apply_pattern, PatternMask};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, Tensor, Var};
use crate::volumes::{LabelVolume, Modality, MultiModalVolume, Source, Volume};

const SLOPE: f32 = 0.01;
const CONV3: ConvSpec = ConvSpec::new(3, 1, 1);
const DOWN: ConvSpec = ConvSpec::new(3, 2, 1);

/// Graph handles produced by [`Session::forward_full`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, D, H, W]`
    pub m5: Var,
    /// `[classes, D, H, W]`
    pub probs: Var,
    /// Per-level logits before up-sampling, finest first.
    pub logits: Vec<Var>,
    /// Deepest features of the five sources (four acquired, then M5).
    pub bottlenecks: [Var; SOURCES],
}

pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParameterStore,
    config: &'a NetworkConfig,
    bound: HashMap<String, Var>,
    track_grads: bool,
    force_unit_gates: bool,
}

impl<'a> Session<'a> {
    /// `training` enables dropout and gradient tracking.
    pub fn new(store: &'a ParameterStore, config: &'a NetworkConfig, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(training, seed),
            store,
            config,
            bound: HashMap::new(),
            track_grads: training,
            force_unit_gates: false,
        }
    }

    /// Keep gradient tracking but make dropout the identity.
    pub fn without_dropout(mut self) -> Self {
        self.graph = Graph::new(false, 0);
        self
    }

    /// Test hook: every attention gate outputs exactly 1.
    pub fn with_unit_gates(mut self) -> Self {
        self.force_unit_gates = true;
        self
    }

    pub fn config(&self) -> &NetworkConfig {
        self.config
    }

    /// Leaves bound so far, by parameter name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} is not in the store")))?
            .clone();
        let v = if self.track_grads {
            self.graph.parameter(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, w: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(w)?;
        Ok(self.graph.conv3d(x, w, None, spec))
    }

    fn conv_bias(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.graph.conv3d(x, w, Some(b), spec))
    }

    fn norm_act(&mut self, x: Var) -> Var {
        let n = self.graph.instance_norm(x);
        self.graph.leaky_relu(n, SLOPE)
    }

    /// Dilated pair with dropout between and the input added back.
    fn res_dil(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (r1, r2) = self.config.dilation_rates;
        let y = self.conv(x, &format!("{prefix}.res.conv1.w"), ConvSpec::new(3, 1, r1))?;
        let y = self.norm_act(y);
        let y = self.graph.dropout(y, self.config.dropout_rate);
        let y = self.conv(y, &format!("{prefix}.res.conv2.w"), ConvSpec::new(3, 1, r2))?;
        let y = self.graph.instance_norm(y);
        let s = self.graph.add(x, y);
        Ok(self.graph.leaky_relu(s, SLOPE))
    }

    /// Convolution to the level width followed by a residual dilated block.
    fn block1(&mut self, x: Var, conv_w: &str, prefix: &str) -> Result<Var> {
        let y = self.conv(x, conv_w, CONV3)?;
        let y = self.norm_act(y);
        self.res_dil(y, prefix)
    }

    /// Nearest ×2 up-sampling and a convolution.
    fn block3(&mut self, x: Var, conv_w: &str) -> Result<Var> {
        let u = self.graph.upsample(x, 2);
        let y = self.conv(u, conv_w, CONV3)?;
        Ok(self.norm_act(y))
    }

    fn input_var(&mut self, v: &Volume) -> Result<Var> {
        if v.shape != self.config.input_shape {
            return Err(Error::Shape(format!(
                "volume shape {:?} does not match network input {:?}",
                v.shape, self.config.input_shape
            )));
        }
        let [d, h, w] = v.shape;
        Ok(self.graph.constant(Tensor::from_vec(&[1, d, h, w], v.data.clone())?))
    }

    /// Encoder pyramid for one source, finest level first.
    pub fn encode(&mut self, source: Source, volume: &Volume) -> Result<Vec<Var>> {
        let x = self.input_var(volume)?;
        self.encode_var(source, x)
    }

    fn encode_var(&mut self, source: Source, x: Var) -> Result<Vec<Var>> {
        let p = format!("encoder.{}", source.name());
        let mut levels = Vec::with_capacity(self.config.levels);
        let mut h = self.block1(x, &format!("{p}.l0.conv.w"), &format!("{p}.l0"))?;
        levels.push(h);
        for l in 1..self.config.levels {
            let y = self.conv(h, &format!("{p}.l{l}.down.w"), DOWN)?;
            let y = self.norm_act(y);
            h = self.res_dil(y, &format!("{p}.l{l}"))?;
            levels.push(h);
        }
        Ok(levels)
    }

    fn zeros_at(&mut self, level: usize) -> Var {
        let [d, h, w] = self.config.spatial(level);
        self.graph.constant(Tensor::zeros(&[self.config.channels(level), d, h, w]))
    }

    /// Pyramids of absent sequences are zero at every level, which is what
    /// the encoder produces for a zero volume (no biases precede a norm).
    fn fill_absent(&mut self, pyramids: &[Option<Vec<Var>>; 4]) -> [Vec<Var>; 4] {
        let levels = self.config.levels;
        std::array::from_fn(|i| match &pyramids[i] {
            Some(p) => p.clone(),
            None => (0..levels).map(|l| self.zeros_at(l)).collect(),
        })
    }

    /// Generator decoder over the acquired-sequence pyramids.
    pub fn generate_m5(&mut self, pyramids: &[Option<Vec<Var>>; 4]) -> Result<Var> {
        if pyramids.iter().all(Option::is_none) {
            return Err(Error::Availability("generator needs at least one available sequence".into()));
        }
        let full = self.fill_absent(pyramids);
        let top = self.config.levels - 1;
        let bottoms: Vec<Var> = full.iter().map(|p| p[top]).collect();
        let cat = self.graph.concat(&bottoms);
        let mut h = self.block1(cat, "feg.bottom.conv.w", "feg.bottom")?;
        for l in (0..top).rev() {
            let up = self.block3(h, &format!("feg.l{l}.up.w"))?;
            let mut parts = vec![up];
            parts.extend(full.iter().map(|p| p[l]));
            let cat = self.graph.concat(&parts);
            h = self.block1(cat, &format!("feg.l{l}.merge.w"), &format!("feg.l{l}"))?;
        }
        self.conv_bias(h, "feg.out", ConvSpec::pointwise())
    }

    /// Channel and spatial attention over the five maps of one level, summed
    /// and projected back to the level width.
    pub fn fuse_attention(&mut self, level: usize, maps: &[Var; SOURCES]) -> Result<Var> {
        let shape = self.graph.value(maps[0]).shape().to_vec();
        if maps.iter().any(|m| self.graph.value(*m).shape() != shape.as_slice()) {
            return Err(Error::Shape(format!("fusion inputs at level {level} differ in shape")));
        }
        let x = self.graph.concat(maps);
        let (cg, sg) = self.attention_gates(level, x)?;
        let xc = self.graph.channel_gate(x, cg);
        let xs = self.graph.spatial_gate(x, sg);
        let sum = self.graph.add(xc, xs);
        self.project(level, sum)
    }

    /// Channel gate `[5C]` and spatial gate `[1, D, H, W]` for a concatenated level.
    pub fn attention_gates(&mut self, level: usize, x: Var) -> Result<(Var, Var)> {
        if self.force_unit_gates {
            let c = self.graph.value(x).channels();
            let n = self.graph.value(x).per_channel();
            let cg = self.graph.constant(Tensor::full(&[c], 1.0));
            let sg = self.graph.constant(Tensor::full(&[1, n], 1.0));
            return Ok((cg, sg));
        }
        let p = format!("fusion.l{level}");
        let pooled = self.graph.global_avg_pool(x);
        let (w1, b1) = (self.param(&format!("{p}.se1.w"))?, self.param(&format!("{p}.se1.b"))?);
        let hid = self.graph.linear(pooled, w1, b1);
        let hid = self.graph.leaky_relu(hid, 0.0);
        let (w2, b2) = (self.param(&format!("{p}.se2.w"))?, self.param(&format!("{p}.se2.b"))?);
        let cg = self.graph.linear(hid, w2, b2);
        let cg = self.graph.sigmoid(cg);
        let sg = self.conv_bias(x, &format!("{p}.spatial"), ConvSpec::pointwise())?;
        Ok((cg, self.graph.sigmoid(sg)))
    }

    fn project(&mut self, level: usize, x: Var) -> Result<Var> {
        let y = self.conv(x, &format!("fusion.l{level}.proj.w"), ConvSpec::pointwise())?;
        Ok(self.norm_act(y))
    }

    /// Decoder over the fused pyramid; returns probabilities and the raw
    /// per-level logits.
    pub fn segment(&mut self, fused: &[Var]) -> Result<(Var, Vec<Var>)> {
        let top = self.config.levels - 1;
        if fused.len() != self.config.levels {
            return Err(Error::Shape(format!(
                "fused pyramid has {} levels, expected {}",
                fused.len(),
                self.config.levels
            )));
        }
        let heads = self.config.head_levels();
        let mut h = self.block1(fused[top], "seg.bottom.conv.w", "seg.bottom")?;
        let mut logits = vec![None; self.config.levels];
        if heads.contains(&top) {
            logits[top] = Some(self.conv_bias(h, &format!("seg.head{top}"), ConvSpec::pointwise())?);
        }
        for l in (0..top).rev() {
            let up = self.block3(h, &format!("seg.l{l}.up.w"))?;
            let cat = self.graph.concat(&[up, fused[l]]);
            h = self.block1(cat, &format!("seg.l{l}.merge.w"), &format!("seg.l{l}"))?;
            if heads.contains(&l) {
                logits[l] = Some(self.conv_bias(h, &format!("seg.head{l}"), ConvSpec::pointwise())?);
            }
        }
        let logits: Vec<Var> = logits.into_iter().flatten().collect();
        let ups: Vec<(Var, f32)> = heads
            .iter()
            .zip(&logits)
            .map(|(&l, &v)| (self.graph.upsample(v, 1 << l), 1.0))
            .collect();
        let total = if ups.len() == 1 { ups[0].0 } else { self.graph.combine(&ups) };
        Ok((self.graph.softmax_channels(total), logits))
    }

    /// Apply the pattern, encode, generate and encode M5, fuse every level
    /// and segment.
    ///
    /// Without generator parameters (the baseline ablation) the M5 slot is a
    /// zero volume.
    pub fn forward_full(&mut self, volume: &MultiModalVolume, pattern: PatternMask) -> Result<ForwardOutput> {
        let input = apply_pattern(volume, pattern)?;
        let mut pyramids: [Option<Vec<Var>>; 4] = Default::default();
        for m in Modality::ALL {
            if pattern.contains(m) {
                let v = input.get(m).expect("pattern checked");
                pyramids[m.index()] = Some(self.encode(Source::Acquired(m), v)?);
            }
        }
        let with_generator = self.store.has_group("feg");
        let (m5, m5_pyramid) = if with_generator {
            let m5 = self.generate_m5(&pyramids)?;
            (m5, self.encode_var(Source::M5, m5)?)
        } else {
            let [d, h, w] = self.config.input_shape;
            let z = self.graph.constant(Tensor::zeros(&[1, d, h, w]));
            let levels = (0..self.config.levels).map(|l| self.zeros_at(l)).collect();
            (z, levels)
        };
        let acquired = self.fill_absent(&pyramids);
        let mut fused = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            let maps = [acquired[0][l], acquired[1][l], acquired[2][l], acquired[3][l], m5_pyramid[l]];
            fused.push(self.fuse_attention(l, &maps)?);
        }
        let (probs, logits) = self.segment(&fused)?;
        let top = self.config.levels - 1;
        let bottlenecks = [acquired[0][top], acquired[1][top], acquired[2][top], acquired[3][top], m5_pyramid[top]];
        Ok(ForwardOutput {
            m5,
            probs,
            logits,
            bottlenecks,
        })
    }

    /// Correlation weights `Γ_i` for slot `i` from its bottleneck.
    pub fn cpem(&mut self, slot: usize, feature: Var) -> Result<Var> {
        let p = format!("cpem.{slot}");
        let pooled = self.graph.global_avg_pool(feature);
        let (w1, b1) = (self.param(&format!("{p}.fc1.w"))?, self.param(&format!("{p}.fc1.b"))?);
        let h = self.graph.linear(pooled, w1, b1);
        let h = self.graph.leaky_relu(h, CPEM_SLOPE);
        let (w2, b2) = (self.param(&format!("{p}.fc2.w"))?, self.param(&format!("{p}.fc2.b"))?);
        Ok(self.graph.linear(h, w2, b2))
    }

    /// `Σ_i KL(P(f_i) ‖ Q(F_i))` over the five bottlenecks.
    pub fn correlation_loss(&mut self, bottlenecks: &[Var; SOURCES]) -> Result<Var> {
        let mut terms = Vec::with_capacity(SOURCES);
        for (i, &f) in bottlenecks.iter().enumerate() {
            let gamma = self.cpem(i, f)?;
            let others = source_order(i).map(|j| bottlenecks[j]);
            let corr = self.graph.lcem(gamma, others);
            terms.push((self.graph.kl_logits(f, corr), 1.0));
        }
        Ok(self.graph.combine(&terms))
    }
}

/// Inference-time feature pyramid, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn bottleneck(&self) -> &Tensor {
        self.levels.last().expect("non-empty pyramid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub probabilities: Tensor,
    /// Per-level logits, finest first; one entry without deep supervision.
    pub aux_logits: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub m5: Volume,
    pub probabilities: Tensor,
    pub bottlenecks: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelVolume,
    pub m5: Volume,
    pub probabilities: Tensor,
}

fn inference<'a>(store: &'a ParameterStore, config: &'a NetworkConfig) -> Result<Session<'a>> {
    config.validate()?;
    Ok(Session::new(store, config, false, 0))
}

pub fn encode(store: &ParameterStore, config: &NetworkConfig, source: Source, volume: &Volume) -> Result<FeaturePyramid> {
    let mut s = inference(store, config)?;
    let vars = s.encode(source, volume)?;
    Ok(FeaturePyramid {
        levels: vars.iter().map(|v| s.graph.value(*v).clone()).collect(),
    })
}

/// Generator output from acquired-sequence pyramids (`None` for absent ones).
pub fn generate_m5(
    store: &ParameterStore,
    config: &NetworkConfig,
    pyramids: [Option<&FeaturePyramid>; 4],
) -> Result<Volume> {
    let mut s = inference(store, config)?;
    let mut vars: [Option<Vec<Var>>; 4] = Default::default();
    for (slot, p) in vars.iter_mut().zip(pyramids) {
        if let Some(p) = p {
            if p.levels.len() != config.levels {
                return Err(Error::Shape("pyramid depth does not match the network".into()));
            }
            *slot = Some(p.levels.iter().map(|t| s.graph.constant(t.clone())).collect());
        }
    }
    let out = s.generate_m5(&vars)?;
    Volume::new(config.input_shape, s.graph.value(out).data().to_vec())
}

pub fn fuse_attention(
    store: &ParameterStore,
    config: &NetworkConfig,
    level: usize,
    maps: [&Tensor; SOURCES],
) -> Result<Tensor> {
    let mut s = inference(store, config)?;
    let vars = maps.map(|t| s.graph.constant(t.clone()));
    let out = s.fuse_attention(level, &vars)?;
    Ok(s.graph.value(out).clone())
}

pub fn segment(store: &ParameterStore, config: &NetworkConfig, fused: &[Tensor]) -> Result<Segmentation> {
    let mut s = inference(store, config)?;
    let vars: Vec<Var> = fused.iter().map(|t| s.graph.constant(t.clone())).collect();
    let (probs, logits) = s.segment(&vars)?;
    Ok(Segmentation {
        probabilities: s.graph.value(probs).clone(),
        aux_logits: logits.iter().map(|v| s.graph.value(*v).clone()).collect(),
    })
}

pub fn forward_full(
    store: &ParameterStore,
    config: &NetworkConfig,
    volume: &MultiModalVolume,
    pattern: PatternMask,
) -> Result<ForwardResult> {
    let mut s = inference(store, config)?;
    let out = s.forward_full(volume, pattern)?;
    Ok(ForwardResult {
        m5: Volume::new(config.input_shape, s.graph.value(out.m5).data().to_vec())?,
        probabilities: s.graph.value(out.probs).clone(),
        bottlenecks: out.bottlenecks.iter().map(|v| s.graph.value(*v).clone()).collect(),
    })
}

/// Arg-max label map under `pattern`.
pub fn predict(
    store: &ParameterStore,
    config: &NetworkConfig,
    volume: &MultiModalVolume,
    pattern: PatternMask,
) -> Result<Prediction> {
    let r = forward_full(store, config, volume, pattern)?;
    Ok(Prediction {
        labels: LabelVolume::from_class_scores(config.input_shape, r.probabilities.data()),
        m5: r.m5,
        probabilities: r.probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::super::build_network;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(levels: usize, base: usize, n: usize) -> NetworkConfig {
        NetworkConfig {
            levels,
            base_filters: base,
            input_shape: [n; 3],
            ..Default::default()
        }
    }

    fn random_subject(n: usize, seed: u64) -> MultiModalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vols = Modality::ALL.map(|_| {
            Some(Volume::new([n; 3], (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        });
        MultiModalVolume::new("r", vols).unwrap()
    }

    #[test]
    fn zero_volume_encodes_to_zero() {
        let c = cfg(3, 2, 8);
        let store = build_network(&c, 1).unwrap();
        let p = encode(&store, &c, Source::Acquired(Modality::T1), &Volume::zeros([8; 3])).unwrap();
        assert_eq!(p.levels.len(), 3);
        for t in &p.levels {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unit_gates_reduce_to_projection_of_doubled_concat() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let maps: Vec<Tensor> = (0..5)
            .map(|_| Tensor::from_vec(&[2, 8, 8, 8], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let mut s = Session::new(&store, &c, false, 0).with_unit_gates();
        let vars: [Var; 5] = std::array::from_fn(|i| s.graph.constant(maps[i].clone()));
        let fused = s.fuse_attention(0, &vars).unwrap();
        let got = s.graph.value(fused).clone();

        let mut r = Session::new(&store, &c, false, 0);
        let vars: Vec<Var> = maps.iter().map(|t| r.graph.constant(t.clone())).collect();
        let cat = r.graph.concat(&vars);
        let doubled = r.graph.combine(&[(cat, 2.0)]);
        let expected = r.project(0, doubled).unwrap();
        assert!(got.max_abs_diff(r.graph.value(expected)) < 1e-5);
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = Session::new(&store, &c, false, 0);
        let x = s.graph.constant(
            Tensor::from_vec(&[20, 4, 4, 4], (0..20 * 64).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap(),
        );
        let (cg, sg) = s.attention_gates(1, x).unwrap();
        assert_eq!(s.graph.value(cg).len(), 20);
        assert_eq!(s.graph.value(sg).len(), 64);
        for g in [cg, sg] {
            assert!(s.graph.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn identical_maps_commute() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = || Tensor::from_vec(&[2, 8, 8, 8], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, b, d) = (t(), t(), t());
        let x = fuse_attention(&store, &c, 0, [&a, &b, &b, &d, &a]).unwrap();
        let y = fuse_attention(&store, &c, 0, [&a, &b, &b, &d, &a]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shapes_follow_level_formula() {
        for (levels, n) in [(2, 16), (3, 16), (4, 16), (2, 32), (3, 32), (4, 32)] {
            let c = cfg(levels, 2, n);
            let store = build_network(&c, 0).unwrap();
            let subject = random_subject(n, 1);
            let p = encode(&store, &c, Source::Acquired(Modality::Flair), subject.get(Modality::Flair).unwrap()).unwrap();
            assert_eq!(p.levels.len(), levels);
            for (l, t) in p.levels.iter().enumerate() {
                let s = c.spatial(l);
                assert_eq!(t.shape(), &[c.channels(l), s[0], s[1], s[2]]);
            }
            let r = forward_full(&store, &c, &subject, PatternMask::FULL).unwrap();
            assert_eq!(r.m5.shape, [n; 3]);
            assert_eq!(r.probabilities.shape(), &[4, n, n, n]);
            assert_eq!(r.bottlenecks.len(), 5);
            let nvox = n * n * n;
            for v in 0..nvox {
                let s: f32 = (0..4).map(|k| r.probabilities.data()[k * nvox + v]).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn deep_supervision_toggle_keeps_output_shape() {
        let mut c = cfg(3, 2, 8);
        c.deep_supervision = false;
        let store = build_network(&c, 0).unwrap();
        assert!(!store.contains("seg.head1.w"));
        let r = forward_full(&store, &c, &random_subject(8, 0), PatternMask::FULL).unwrap();
        assert_eq!(r.probabilities.shape(), &[4, 8, 8, 8]);
        let fused: Vec<Tensor> = (0..3)
            .map(|l| {
                let s = c.spatial(l);
                Tensor::zeros(&[c.channels(l), s[0], s[1], s[2]])
            })
            .collect();
        assert_eq!(segment(&store, &c, &fused).unwrap().aux_logits.len(), 1);
    }

    #[test]
    fn generator_needs_an_input_and_stays_finite() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 0).unwrap();
        assert!(matches!(generate_m5(&store, &c, [None, None, None, None]), Err(Error::Availability(_))));
        let p = encode(&store, &c, Source::Acquired(Modality::T2), &random_subject(8, 2).volumes[3].clone().unwrap()).unwrap();
        let m5 = generate_m5(&store, &c, [None, None, None, Some(&p)]).unwrap();
        assert_eq!(m5.shape, [8; 3]);
        assert!(m5.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_is_repeatable_and_uses_inputs() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 7).unwrap();
        let s = random_subject(8, 5);
        let a = forward_full(&store, &c, &s, PatternMask::FULL).unwrap();
        let b = forward_full(&store, &c, &s, PatternMask::FULL).unwrap();
        assert_eq!(a, b);
        let single = forward_full(&store, &c, &s, PatternMask::from_bits(0b1000).unwrap()).unwrap();
        assert_ne!(a.probabilities, single.probabilities);
        assert!(matches!(
            forward_full(&store, &c, &random_subject(16, 0), PatternMask::FULL),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shared_encoder_receives_gradient_from_both_paths() {
        let c = cfg(2, 2, 8);
        let store = build_network(&c, 9).unwrap();
        let subject = random_subject(8, 6);
        let target = Tensor::zeros(&[1, 8, 8, 8]).map(|_| 0.5);
        let name = "encoder.flair.l0.conv.w";
        let grad_of = |use_gen: bool, use_seg: bool| -> Tensor {
            let mut s = Session::new(&store, &c, true, 0).without_dropout();
            let out = s.forward_full(&subject, PatternMask::from_bits(0b1010).unwrap()).unwrap();
            let consts = crate::losses::SsimConstants::new(0.01, 0.03).unwrap();
            let mut terms = Vec::new();
            if use_gen {
                terms.push((s.graph.ssim_loss(out.m5, &target, consts), 1.0));
            }
            if use_seg {
                let onehot = Tensor::from_vec(&[4, 8, 8, 8], (0..2048).map(|i| (i < 512) as u8 as f32).collect()).unwrap();
                terms.push((s.graph.dice_loss(out.probs, &onehot), 1.0));
            }
            let loss = s.graph.combine(&terms);
            let g = s.graph.backward(loss);
            g.get(s.bound()[name]).cloned().unwrap()
        };
        let gen = grad_of(true, false);
        let seg = grad_of(false, true);
        let both = grad_of(true, true);
        assert!(gen.data().iter().any(|&v| v != 0.0));
        assert!(seg.data().iter().any(|&v| v != 0.0));
        let mut sum = gen.clone();
        sum.add_assign(&seg);
        assert!(both.max_abs_diff(&sum) <= 1e-4 * (1.0 + sum.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn mutating_the_shared_encoder_changes_both_outputs() {
        let c = cfg(2, 2, 8);
        let mut store = build_network(&c, 9).unwrap();
        let subject = random_subject(8, 6);
        let p = PatternMask::from_bits(0b1100).unwrap();
        let before = forward_full(&store, &c, &subject, p).unwrap();
        for v in store.get_mut("encoder.flair.l0.conv.w").unwrap().data_mut() {
            *v *= -1.5;
        }
        let after = forward_full(&store, &c, &subject, p).unwrap();
        assert_ne!(before.m5, after.m5);
        assert_ne!(before.probabilities, after.probabilities);
    }

    #[test]
    fn baseline_store_uses_zero_m5() {
        let c = cfg(2, 2, 8);
        let mut store = build_network(&c, 1).unwrap();
        store.retain_groups(&["encoder.flair", "encoder.t1", "encoder.t1c", "encoder.t2", "fusion", "seg"]);
        let r = forward_full(&store, &c, &random_subject(8, 1), PatternMask::FULL).unwrap();
        assert!(r.m5.data.iter().all(|&v| v == 0.0));
        assert!(r.bottlenecks[4].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_group_gets_gradient() {
        let c = cfg(2, 2, 16);
        let store = build_network(&c, 11).unwrap();
        let subject = random_subject(16, 4);
        let mut s = Session::new(&store, &c, true, 3);
        let out = s.forward_full(&subject, PatternMask::from_bits(0b1001).unwrap()).unwrap();
        let target = Tensor::from_vec(&[1, 16, 16, 16], subject.volumes[1].clone().unwrap().data).unwrap();
        let gen = s.graph.ssim_loss(out.m5, &target, crate::losses::SsimConstants::for_target(target.data()));
        let onehot = Tensor::from_vec(&[4, 16, 16, 16], (0..4 * 4096).map(|i| ((i / 4096) == (i % 4)) as u8 as f32).collect()).unwrap();
        let seg = s.graph.dice_loss(out.probs, &onehot);
        let cc = s.correlation_loss(&out.bottlenecks).unwrap();
        let total = s.graph.combine(&[(seg, 1.0), (gen, 0.1), (cc, 0.1)]);
        let g = s.graph.backward(total);
        let mut nonzero = std::collections::BTreeSet::new();
        for (name, v) in s.bound() {
            if g.get(*v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) {
                nonzero.insert(super::super::group_of(name).to_string());
            }
        }
        // T1 and T1c are dropped by the pattern, so their encoders are idle
        for group in ["encoder.flair", "encoder.t2", "encoder.m5", "feg", "fusion", "seg", "cpem"] {
            assert!(nonzero.contains(group), "{group} got no gradient");
        }
    }
}
