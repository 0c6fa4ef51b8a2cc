//! Python bindings. Volumes cross the boundary as flat lists in (D, H, W)
//! raster order together with their shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mmseg::correlation::{joint_intensity_histogram, kl_from_logits, lcem_forward_flat, CorrelationParams};
use mmseg::dropout::{enumerate_patterns as all_patterns, PatternMask};
use mmseg::losses::{dice_loss_flat, ssim_loss_flat, SsimConstants};
use mmseg::metrics::{dice_score as mask_dice, hausdorff as mask_hausdorff};
use mmseg::network::{build_network, predict, Checkpoint, NetworkConfig};
use mmseg::pipeline::{evaluate_path, load_dataset, synthesize_dataset, train as run_training, Ablation, RunConfig};
use mmseg::volumes::{generate_phantom, Mask, Modality, MultiModalVolume, PhantomSpec, Volume};

fn err(e: mmseg::Error) -> PyErr {
    match e {
        mmseg::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pattern(bits: u8) -> PyResult<PatternMask> {
    PatternMask::from_bits(bits).map_err(err)
}

fn mask(shape: [usize; 3], data: Vec<bool>) -> PyResult<Mask> {
    Mask::new(shape, data).map_err(err)
}

/// The 15 availability patterns in table order, as 4-bit integers (FLAIR = 8, T1 = 4, T1c = 2, T2 = 1).
#[pyfunction]
fn enumerate_patterns() -> Vec<u8> {
    all_patterns().into_iter().map(PatternMask::bits).collect()
}

/// `•`/`◦` string of a pattern in F, T1, T1c, T2 order.
#[pyfunction]
fn pattern_symbols(bits: u8) -> PyResult<String> {
    Ok(pattern(bits)?.symbols())
}

/// Soft Dice loss over foreground classes of class-major `[classes, N]` maps.
#[pyfunction]
fn dice_loss(probs: Vec<f64>, target: Vec<f64>, classes: usize) -> PyResult<f64> {
    if classes < 2 || probs.len() != target.len() || probs.len() % classes != 0 {
        return Err(PyValueError::new_err("probs and target must both be [classes, N] with classes >= 2"));
    }
    Ok(dice_loss_flat(&probs, &target, classes))
}

/// `1 − SSIM` from whole-volume statistics; constants follow the target range.
#[pyfunction]
fn ssim_loss(generated: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    if generated.len() != target.len() || generated.len() < 2 {
        return Err(PyValueError::new_err("need two equally long inputs of at least 2 values"));
    }
    let (lo, hi) = target
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ssim_loss_flat(&generated, &target, SsimConstants::for_range(hi - lo)))
}

/// `KL(softmax(p) ‖ softmax(q))` over flattened maps.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PyValueError::new_err("maps must be non-empty and equally long"));
    }
    Ok(kl_from_logits(&p, &q))
}

/// Linear correlated map from weights `[α | β | γ | δ | σ]` (5·C values) and
/// four `[C, S]` source maps.
#[pyfunction]
fn lcem_forward(weights: Vec<f64>, sources: [Vec<f64>; 4], channels: usize) -> PyResult<Vec<f64>> {
    let params = CorrelationParams::from_flat(&weights, channels).map_err(err)?;
    lcem_forward_flat(&params, [&sources[0], &sources[1], &sources[2], &sources[3]], channels).map_err(err)
}

#[pyfunction]
fn dice_score(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3]) -> PyResult<f64> {
    mask_dice(&mask(shape, pred)?, &mask(shape, gt)?).map_err(err)
}

/// Symmetric surface Hausdorff distance in mm; None when either mask is empty.
#[pyfunction]
#[pyo3(signature = (pred, gt, shape, spacing = [1.0, 1.0, 1.0]))]
fn hausdorff(pred: Vec<bool>, gt: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> PyResult<Option<f64>> {
    mask_hausdorff(&mask(shape, pred)?, &mask(shape, gt)?, spacing).map_err(err)
}

/// Joint histogram counts and Pearson r over voxels nonzero in either input.
#[pyfunction]
#[pyo3(signature = (a, b, bins = 64))]
fn joint_histogram(a: Vec<f32>, b: Vec<f32>, bins: usize) -> PyResult<(Vec<Vec<u64>>, f64)> {
    let h = joint_intensity_histogram(&a, &b, bins).map_err(err)?;
    Ok((h.counts, h.pearson))
}

/// One synthetic subject: `([flair, t1, t1c, t2], labels)` as flat lists.
#[pyfunction]
#[pyo3(signature = (shape = [32, 32, 32], seed = 0))]
fn phantom(shape: [usize; 3], seed: u64) -> PyResult<(Vec<Vec<f32>>, Vec<u8>)> {
    use rand::SeedableRng;
    let k = *shape.iter().min().unwrap_or(&32) as f64 / 32.0;
    let base = PhantomSpec::default();
    let spec = PhantomSpec {
        shape,
        seed,
        tumor_radius: (base.tumor_radius.0 * k, base.tumor_radius.1 * k),
        ..base
    };
    let (volume, labels) =
        generate_phantom(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
    let seqs = Modality::ALL
        .iter()
        .map(|&m| volume.get(m).map(|v| v.data.clone()).unwrap_or_default())
        .collect();
    Ok((seqs, labels.data))
}

/// Write `count` phantoms as subject directories under `out`.
#[pyfunction]
#[pyo3(signature = (out, count, shape = [32, 32, 32], seed = 0))]
fn synth_data(out: PathBuf, count: usize, shape: [usize; 3], seed: u64) -> PyResult<usize> {
    let k = *shape.iter().min().unwrap_or(&32) as f64 / 32.0;
    let base = PhantomSpec::default();
    let spec = PhantomSpec {
        shape,
        tumor_radius: (base.tumor_radius.0 * k, base.tumor_radius.1 * k),
        ..base
    };
    Ok(synthesize_dataset(&out, count, &spec, seed).map_err(err)?.len())
}

/// Per-pattern results of a checkpoint on a dataset directory, one dict per
/// (pattern, region).
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf) -> PyResult<Vec<Py<PyAny>>> {
    let table = evaluate_path(&checkpoint, &data, &all_patterns(), "model").map_err(err)?;
    let mut out = Vec::new();
    for row in &table.rows {
        for (region, s) in ["WT", "TC", "ET"].iter().zip(&row.regions) {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("pattern", row.pattern.bits())?;
            d.set_item("region", *region)?;
            d.set_item("dice", s.dice)?;
            d.set_item("hd", s.hd)?;
            out.push(d.into_any().unbind());
        }
    }
    Ok(out)
}

/// Network parameters plus the configuration they were built for.
#[pyclass]
struct Model {
    checkpoint: Checkpoint,
}

#[pymethods]
impl Model {
    /// Freshly initialized network.
    #[new]
    #[pyo3(signature = (levels = 4, base_filters = 8, shape = [32, 32, 32], seed = 0))]
    fn new(levels: usize, base_filters: usize, shape: [usize; 3], seed: u64) -> PyResult<Self> {
        let network = NetworkConfig {
            levels,
            base_filters,
            input_shape: shape,
            ..Default::default()
        };
        let params = build_network(&network, seed).map_err(err)?;
        Ok(Self {
            checkpoint: Checkpoint::new(network, params),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            checkpoint: Checkpoint::load(&path).map_err(err)?,
        })
    }

    /// Train on a dataset directory and return the best-validation model.
    #[staticmethod]
    #[pyo3(signature = (data, ablation = "fe_g_cc", epochs = 10, levels = 3, base_filters = 4, shape = [32, 32, 32], learning_rate = 5e-4, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data: PathBuf,
        ablation: &str,
        epochs: usize,
        levels: usize,
        base_filters: usize,
        shape: [usize; 3],
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = RunConfig {
            network: NetworkConfig {
                levels,
                base_filters,
                input_shape: shape,
                ..Default::default()
            },
            ablation: ablation.parse::<Ablation>().map_err(err)?,
            max_epochs: epochs,
            learning_rate,
            seed,
            ..Default::default()
        }
        .resolved()
        .map_err(err)?;
        let subjects = load_dataset(&data, shape).map_err(err)?;
        let outcome = run_training(config, &subjects, Default::default()).map_err(err)?;
        Ok(Self { checkpoint: outcome.best })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.checkpoint.network.input_shape
    }

    #[getter]
    fn levels(&self) -> usize {
        self.checkpoint.network.levels
    }

    /// Number of scalar parameters.
    #[getter]
    fn parameter_count(&self) -> usize {
        self.checkpoint.params.scalar_count()
    }

    /// Segment one subject. `sequences` holds FLAIR, T1, T1c, T2 (None when
    /// missing), already normalized and at the model's shape. Returns the
    /// label codes and the synthesized M5 volume.
    #[pyo3(signature = (sequences, pattern = None))]
    fn predict(&self, sequences: [Option<Vec<f32>>; 4], pattern: Option<u8>) -> PyResult<(Vec<u8>, Vec<f32>)> {
        let shape = self.checkpoint.network.input_shape;
        let mut vols: [Option<Volume>; 4] = Default::default();
        for (slot, seq) in vols.iter_mut().zip(sequences) {
            if let Some(data) = seq {
                *slot = Some(Volume::new(shape, data).map_err(err)?);
            }
        }
        let subject = MultiModalVolume::new("python", vols).map_err(err)?;
        let p = match pattern {
            Some(bits) => self::pattern(bits)?,
            None => subject.availability,
        };
        let input = mmseg::dropout::apply_pattern(&subject, p).map_err(err)?;
        let r = predict(&self.checkpoint.params, &self.checkpoint.network, &input, p).map_err(err)?;
        Ok((r.labels.data, r.m5.data))
    }
}

#[pymodule]
fn mmseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(enumerate_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_symbols, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(lcem_forward, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(joint_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
