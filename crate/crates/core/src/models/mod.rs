//! The two network architectures, the composite loss, training and
//! whole-volume prediction.

mod loss;
pub mod rescnn;
pub mod resdnn;
mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use loss::{composite_loss, sample_loss, LossValue, LossWeights, Prediction};
pub use train::{evaluate_loss, split_indices, train, train_from, train_with_progress, EpochRecord, TrainConfig, TrainLog};

use crate::dataset::extract_patch;
use crate::error::{Error, Result};
use crate::nn::{Gradients, Objective, ParameterStore, Probe};
use crate::phantom::TissueFractions;
use crate::sh::ShCoefficients;
use crate::volume::{Mask, Volume4D};

/// Initialization gain of the two linear output heads relative to He-uniform.
/// Small heads start predictions near zero, which speeds up early training.
pub const HEAD_INIT_GAIN: f64 = 0.1;

/// SH order of every network input and output.
pub const ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Architecture {
    ResDnn,
    ResCnn,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::ResDnn => "resdnn",
            Architecture::ResCnn => "rescnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resdnn" => Some(Architecture::ResDnn),
            "rescnn" => Some(Architecture::ResCnn),
            _ => None,
        }
    }

    /// Flat input length: one SH vector, or a 3×3×3 patch of them.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::ResDnn => resdnn::INPUT,
            Architecture::ResCnn => rescnn::INPUT,
        }
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Architecture::ResDnn => resdnn::layout(),
            Architecture::ResCnn => rescnn::layout(),
        }
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub enum Workspace {
    Dnn(resdnn::Cache),
    Cnn(rescnn::Cache),
}

impl Workspace {
    pub fn new(arch: Architecture) -> Self {
        match arch {
            Architecture::ResDnn => Workspace::Dnn(Default::default()),
            Architecture::ResCnn => Workspace::Cnn(Default::default()),
        }
    }

    fn outputs(&self) -> (&[f64], &[f64; 3]) {
        match self {
            Workspace::Dnn(c) => (&c.sh, &c.fractions),
            Workspace::Cnn(c) => (&c.sh, &c.fractions),
        }
    }
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    architecture: Architecture,
    params: ParameterStore,
}

impl Model {
    /// Freshly initialized network.
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        let params = match architecture {
            Architecture::ResDnn => resdnn::init(seed),
            Architecture::ResCnn => rescnn::init(seed),
        };
        Self { architecture, params }
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parameters(architecture: Architecture, params: ParameterStore) -> Result<Self> {
        let layout = architecture.layout();
        if layout.len() != params.len() {
            return Err(Error::LengthMismatch {
                context: "parameter tensors for architecture",
                expected: layout.len(),
                found: params.len(),
            });
        }
        for (slot, (name, shape)) in layout.iter().enumerate() {
            if params.name(slot) != name || params.value(slot).shape() != &shape[..] {
                return Err(Error::InvalidParameter(alloc::format!(
                    "parameter {slot} is `{}` {:?}, expected `{name}` {shape:?}",
                    params.name(slot),
                    params.value(slot).shape()
                )));
            }
        }
        Ok(Self { architecture, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.architecture.input_len() {
            return Err(Error::LengthMismatch {
                context: "network input",
                expected: self.architecture.input_len(),
                found: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass leaving activations in `ws` for [`Model::backward`].
    pub fn forward_with(&self, input: &[f64], ws: &mut Workspace) -> Result<()> {
        self.check_input(input)?;
        match (self.architecture, &mut *ws) {
            (Architecture::ResDnn, Workspace::Dnn(c)) => resdnn::forward(&self.params, input, c),
            (Architecture::ResCnn, Workspace::Cnn(c)) => rescnn::forward(&self.params, input, c),
            _ => {
                *ws = Workspace::new(self.architecture);
                return self.forward_with(input, ws);
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients given output gradients, using the
    /// activations of the last [`Model::forward_with`] on `ws`.
    pub fn backward(&self, ws: &Workspace, d_sh: &[f64], d_fractions: &[f64; 3], grads: &mut Gradients) {
        match ws {
            Workspace::Dnn(c) => resdnn::backward(&self.params, c, d_sh, d_fractions, grads),
            Workspace::Cnn(c) => rescnn::backward(&self.params, c, d_sh, d_fractions, grads),
        }
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        let mut ws = Workspace::new(self.architecture);
        self.predict_with(input, &mut ws)
    }

    pub fn predict_with(&self, input: &[f64], ws: &mut Workspace) -> Result<Prediction> {
        self.forward_with(input, ws)?;
        let (sh, fr) = ws.outputs();
        Ok(Prediction {
            fodf_sh: ShCoefficients::new(ORDER, sh.to_vec())?,
            fractions: *fr,
        })
    }

    /// Network input for one voxel of an order-8 SH volume.
    pub fn voxel_input(&self, input_sh: &Volume4D, voxel: usize) -> Vec<f64> {
        match self.architecture {
            Architecture::ResDnn => input_sh.series(voxel),
            Architecture::ResCnn => {
                let [nx, ny, _] = input_sh.spatial_dims();
                extract_patch(input_sh, [voxel % nx, (voxel / nx) % ny, voxel / (nx * ny)])
            }
        }
    }
}

/// Loss of a fixed batch as a function of the model parameters, for
/// gradient checking. Activations of the unperturbed parameters are cached
/// so single-coordinate perturbations only recompute what they affect.
pub struct BatchObjective<'a> {
    model: &'a Model,
    inputs: Vec<Vec<f64>>,
    targets: Vec<(Vec<f64>, [f64; 3])>,
    weights: LossWeights,
    caches: Vec<Workspace>,
}

impl<'a> BatchObjective<'a> {
    pub fn new(
        model: &'a Model,
        inputs: Vec<Vec<f64>>,
        targets: Vec<(Vec<f64>, [f64; 3])>,
        weights: LossWeights,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("objective batch"));
        }
        let mut caches = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let mut ws = Workspace::new(model.architecture);
            model.forward_with(x, &mut ws)?;
            caches.push(ws);
        }
        Ok(Self {
            model,
            inputs,
            targets,
            weights,
            caches,
        })
    }

    fn batch_loss(&self, outputs: impl Iterator<Item = (Vec<f64>, [f64; 3])>) -> f64 {
        let scale = 1.0 / self.inputs.len() as f64;
        let mut d_sh = vec![0.0; ORDER_COEFFS];
        let mut d_fr = [0.0; 3];
        outputs
            .zip(&self.targets)
            .map(|((sh, fr), (t_sh, t_fr))| {
                scale * sample_loss(&sh, &fr, t_sh, t_fr, &self.weights, scale, &mut d_sh, &mut d_fr)
            })
            .sum()
    }
}

const ORDER_COEFFS: usize = crate::sh::n_coeffs(ORDER);

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParameterStore) -> f64 {
        let model = Model {
            architecture: self.model.architecture,
            params: params.clone(),
        };
        self.batch_loss(self.inputs.iter().map(|x| {
            let p = model.predict(x).expect("validated input");
            (p.fodf_sh.into_vec(), p.fractions)
        }))
    }

    fn loss_and_gradient(&self, params: &ParameterStore) -> (f64, Gradients) {
        let model = Model {
            architecture: self.model.architecture,
            params: params.clone(),
        };
        let scale = 1.0 / self.inputs.len() as f64;
        let mut grads = params.zero_gradients();
        let mut ws = Workspace::new(model.architecture);
        let mut d_sh = vec![0.0; ORDER_COEFFS];
        let mut d_fr = [0.0; 3];
        let mut total = 0.0;
        for (x, (t_sh, t_fr)) in self.inputs.iter().zip(&self.targets) {
            model.forward_with(x, &mut ws).expect("validated input");
            let (sh, fr) = ws.outputs();
            total += scale * sample_loss(sh, fr, t_sh, t_fr, &self.weights, scale, &mut d_sh, &mut d_fr);
            model.backward(&ws, &d_sh, &d_fr, &mut grads);
        }
        (total, grads)
    }

    fn probe(&self, params: &mut ParameterStore, slot: usize, index: usize, value: f64) -> Probe {
        let mut region: u64 = 0;
        let loss = self.batch_loss(self.caches.iter().map(|ws| {
            let (sh, fr, r) = match ws {
                Workspace::Dnn(c) => {
                    let c = resdnn::perturbed(params, c, slot, index, value);
                    let r = c.region();
                    (c.sh, c.fractions, r)
                }
                Workspace::Cnn(c) => {
                    let c = rescnn::perturbed(params, c, slot, index, value);
                    let r = c.region();
                    (c.sh, c.fractions, r)
                }
            };
            region = region.rotate_left(17) ^ r;
            (sh, fr)
        }));
        Probe { loss, region }
    }
}

/// FNV-1a over the on/off state of every ReLU input.
pub(crate) fn activation_region<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for v in part {
            h ^= u64::from(*v > 0.0);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Whole-volume network output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedVolumes {
    pub fodf: Volume4D,
    /// Raw fraction head values.
    pub fractions_raw: Volume4D,
    /// Fractions clamped to `[0, 1]`.
    pub fractions: Volume4D,
}

impl PredictedVolumes {
    pub fn zeros(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let [x, y, z] = dims;
        Ok(Self {
            fodf: Volume4D::zeros([x, y, z, ORDER_COEFFS], voxel_size)?,
            fractions_raw: Volume4D::zeros([x, y, z, 3], voxel_size)?,
            fractions: Volume4D::zeros([x, y, z, 3], voxel_size)?,
        })
    }

    pub fn set(&mut self, voxel: usize, p: &Prediction) {
        self.fodf.set_series(voxel, p.fodf_sh.as_slice());
        self.fractions_raw.set_series(voxel, &p.fractions);
        self.fractions.set_series(voxel, &TissueFractions::clamped(p.fractions).to_array());
    }
}

/// Checks that `input_sh` is an order-8 volume matching the mask.
pub fn check_prediction_input(input_sh: &Volume4D, mask: &Mask) -> Result<()> {
    if input_sh.spatial_dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            context: "input SH volume vs mask",
            left: input_sh.spatial_dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    if input_sh.n_volumes() != ORDER_COEFFS {
        return Err(Error::CoefficientCount {
            order: ORDER,
            expected: ORDER_COEFFS,
            found: input_sh.n_volumes(),
        });
    }
    Ok(())
}

/// Predicts every masked voxel; voxels outside the mask stay zero.
pub fn predict_volume(model: &Model, input_sh: &Volume4D, mask: &Mask) -> Result<PredictedVolumes> {
    check_prediction_input(input_sh, mask)?;
    let mut out = PredictedVolumes::zeros(mask.dims(), input_sh.voxel_size())?;
    let mut ws = Workspace::new(model.architecture());
    for v in mask.indices() {
        let p = model.predict_with(&model.voxel_input(input_sh, v), &mut ws)?;
        out.set(v, &p);
    }
    Ok(out)
}
