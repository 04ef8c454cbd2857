//! Synthetic multi-tissue diffusion phantom.
//!
//! White matter is a mixture of axially symmetric tensors, grey matter and
//! CSF are isotropic. The ground-truth fODF of a voxel is the apodized delta
//! mixture of its fibres scaled by the WM fraction, so its magnitude carries
//! apparent fibre density.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, exp, fabs, sin, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::GradientScheme;
use crate::error::{Error, Result};
use crate::sh::{delta_expansion, n_coeffs, Direction, ShCoefficients};
use crate::sphere::SphereGrid;
use crate::volume::{Mask, Volume4D};

pub const DEFAULT_D_CSF: f64 = 3.0e-3;
pub const DEFAULT_D_GM: f64 = 0.8e-3;
pub const DEFAULT_LAMBDA_PAR: f64 = 1.7e-3;
pub const DEFAULT_LAMBDA_PERP: f64 = 0.2e-3;
pub const DEFAULT_APODIZATION: f64 = 0.02;
pub const DEFAULT_SNR: f64 = 30.0;
pub const DEFAULT_DIRS_PER_SHELL: usize = 90;
pub const DEFAULT_B0_COUNT: usize = 18;

/// CSF, GM and WM volume fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TissueFractions {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl TissueFractions {
    const SLACK: f64 = 1e-6;

    /// Each fraction must lie in [0, 1] (tiny rounding excursions are clamped).
    pub fn new(csf: f64, gm: f64, wm: f64) -> Result<Self> {
        let check = |v: f64| {
            if v.is_finite() && (-Self::SLACK..=1.0 + Self::SLACK).contains(&v) {
                Ok(v.clamp(0.0, 1.0))
            } else {
                Err(Error::InvalidParameter(alloc::format!(
                    "tissue fraction {v} outside [0, 1]"
                )))
            }
        };
        Ok(Self {
            csf: check(csf)?,
            gm: check(gm)?,
            wm: check(wm)?,
        })
    }

    /// Clamp arbitrary (e.g. predicted) values into range.
    pub fn clamped(values: [f64; 3]) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self {
            csf: c(values[0]),
            gm: c(values[1]),
            wm: c(values[2]),
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.csf, self.gm, self.wm]
    }

    pub fn sum(&self) -> f64 {
        self.csf + self.gm + self.wm
    }
}

/// One to three fibre populations with a shared axially symmetric tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberConfig {
    directions: Vec<Direction>,
    weights: Vec<f64>,
    /// (λ∥, λ⊥) in mm²/s.
    eigenvalues: (f64, f64),
}

impl FiberConfig {
    pub fn new(directions: Vec<Direction>, weights: Vec<f64>, eigenvalues: (f64, f64)) -> Result<Self> {
        if directions.is_empty() || directions.len() > 3 {
            return Err(Error::InvalidParameter(alloc::format!(
                "a fibre configuration needs 1 to 3 fibres, got {}",
                directions.len()
            )));
        }
        if weights.len() != directions.len() {
            return Err(Error::LengthMismatch {
                context: "fibre weights vs directions",
                expected: directions.len(),
                found: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || fabs(total - 1.0) > 1e-9 {
            return Err(Error::InvalidParameter(alloc::format!(
                "fibre weights must be nonnegative and sum to 1, got {total}"
            )));
        }
        Ok(Self {
            directions,
            weights,
            eigenvalues,
        })
    }

    pub fn single(direction: Direction, eigenvalues: (f64, f64)) -> Self {
        Self {
            directions: vec![direction],
            weights: vec![1.0],
            eigenvalues,
        }
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        self.eigenvalues
    }
}

/// Isotropic compartment diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IsotropicDiffusivities {
    pub csf: f64,
    pub gm: f64,
}

impl Default for IsotropicDiffusivities {
    fn default() -> Self {
        Self {
            csf: DEFAULT_D_CSF,
            gm: DEFAULT_D_GM,
        }
    }
}

/// Normalized signal `S/S0` of one voxel for one measurement.
pub fn simulate_signal(
    fractions: &TissueFractions,
    fibers: &FiberConfig,
    iso: &IsotropicDiffusivities,
    b: f64,
    g: &Direction,
) -> f64 {
    debug_assert!(b >= 0.0);
    let (lpar, lperp) = fibers.eigenvalues;
    let wm: f64 = fibers
        .directions
        .iter()
        .zip(&fibers.weights)
        .map(|(d, w)| {
            let c = d.dot(g);
            w * exp(-b * (lperp + (lpar - lperp) * c * c))
        })
        .sum();
    fractions.csf * exp(-b * iso.csf) + fractions.gm * exp(-b * iso.gm) + fractions.wm * wm
}

/// `wm_fraction * Σ w_k * delta(dir_k)`, apodized.
pub fn ground_truth_fodf(
    fibers: &FiberConfig,
    wm_fraction: f64,
    order: usize,
    apodization: f64,
) -> Result<ShCoefficients> {
    let mut out = ShCoefficients::zeros(order)?;
    if wm_fraction == 0.0 {
        return Ok(out);
    }
    for (d, w) in fibers.directions.iter().zip(&fibers.weights) {
        out.add_scaled(&delta_expansion(d, 1.0, order, apodization)?, wm_fraction * w)?;
    }
    Ok(out)
}

/// Tissue zone of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Zone {
    Csf = 0,
    Gm = 1,
    Wm = 2,
    Crossing = 3,
}

impl Zone {
    pub fn from_code(code: u8) -> Option<Zone> {
        match code {
            0 => Some(Zone::Csf),
            1 => Some(Zone::Gm),
            2 => Some(Zone::Wm),
            3 => Some(Zone::Crossing),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Zone::Csf => "csf",
            Zone::Gm => "gm",
            Zone::Wm => "wm",
            Zone::Crossing => "crossing",
        }
    }
}

/// Nested-box layout: CSF border, GM shell, single-fibre WM with a smoothly
/// rotating orientation and a 90° crossing core. Depths are in voxels from
/// the volume faces.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ZoneLayout {
    /// Depth of the CSF→GM transition.
    pub csf_depth: f64,
    /// Depth of the GM→WM transition.
    pub gm_depth: f64,
    /// Logistic width of both transitions.
    pub transition_width: f64,
    /// Half-width in voxels of the central crossing cube.
    pub crossing_half_width: f64,
}

impl Default for ZoneLayout {
    fn default() -> Self {
        Self {
            csf_depth: 1.0,
            gm_depth: 2.0,
            transition_width: 0.35,
            crossing_half_width: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Layout {
    Zones(ZoneLayout),
    /// Every voxel identical; fibres given as (direction, weight).
    Homogeneous {
        fractions: TissueFractions,
        fibers: Vec<(Direction, f64)>,
    },
}

/// Everything needed to synthesize a phantom; the seed fixes the output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub layout: Layout,
    pub diffusivities: IsotropicDiffusivities,
    pub lambda_par: f64,
    pub lambda_perp: f64,
    /// `None` for noiseless output. Defined on the b0 signal.
    pub snr: Option<f64>,
    pub seed: u64,
    pub apodization: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            voxel_size: [1.25, 1.25, 1.25],
            layout: Layout::Zones(ZoneLayout::default()),
            diffusivities: IsotropicDiffusivities::default(),
            lambda_par: DEFAULT_LAMBDA_PAR,
            lambda_perp: DEFAULT_LAMBDA_PERP,
            snr: Some(DEFAULT_SNR),
            seed: 0,
            apodization: DEFAULT_APODIZATION,
        }
    }
}

/// Output of [`generate_volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolumes {
    /// Raw signal with S0 = 1, one volume per scheme row.
    pub dwi: Volume4D,
    /// Order-8 ground-truth fODF, 45 volumes.
    pub fodf: Volume4D,
    /// CSF, GM, WM.
    pub fractions: Volume4D,
    pub mask: Mask,
    pub zones: Vec<Zone>,
    /// Ground-truth fibres per voxel (empty where WM fraction is zero).
    pub fibers: Vec<Option<FiberConfig>>,
}

impl PhantomVolumes {
    pub fn zone_volume(&self) -> Volume4D {
        let [nx, ny, nz] = self.mask.dims();
        let data = self.zones.iter().map(|z| *z as u8 as f64).collect();
        Volume4D::new([nx, ny, nz, 1], self.dwi.voxel_size(), data).expect("zone dims")
    }
}

/// HCP-like scheme: `n_b0` b0s then `dirs_per_shell` directions per shell.
/// Each shell uses the hemisphere spiral turned about z by a shell-specific angle.
pub fn default_scheme(shells: &[f64], dirs_per_shell: usize, n_b0: usize) -> GradientScheme {
    let base = SphereGrid::fibonacci_hemisphere(dirs_per_shell);
    let parts: Vec<(f64, Vec<Direction>)> = shells
        .iter()
        .enumerate()
        .map(|(s, &b)| {
            let a = s as f64 * 2.0 * PI / 7.0;
            let (ca, sa) = (cos(a), sin(a));
            let dirs = base
                .directions()
                .iter()
                .map(|d| {
                    Direction::normalized(ca * d.x() - sa * d.y(), sa * d.x() + ca * d.y(), d.z())
                        .expect("rotated unit vector")
                })
                .collect();
            (b, dirs)
        })
        .collect();
    GradientScheme::from_shells(n_b0, &parts)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

struct OrientationField {
    phi0: f64,
    theta0: f64,
    psi0: f64,
    alpha0: f64,
    beta0: f64,
}

impl OrientationField {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            phi0: rng.random_range(0.0..2.0 * PI),
            theta0: rng.random_range(0.5..0.7),
            psi0: rng.random_range(0.0..2.0 * PI),
            alpha0: rng.random_range(0.0..PI),
            beta0: rng.random_range(-0.3..0.3),
        }
    }

    // u, v, w in [-1, 1] over the volume.
    fn single(&self, u: f64, v: f64, w: f64) -> Direction {
        let phi = self.phi0 + PI * (0.6 * u + 0.4 * w);
        let theta = self.theta0 * sin(PI * v + self.psi0);
        Direction::normalized(cos(theta) * cos(phi), cos(theta) * sin(phi), sin(theta)).expect("unit")
    }

    // uc, vc, wc in [-1, 1] over the crossing core.
    fn crossing(&self, uc: f64, vc: f64, wc: f64) -> (Direction, Direction) {
        let alpha = self.alpha0 + 0.25 * PI * (uc + wc);
        let beta = self.beta0 + 0.35 * vc;
        let f1 = Direction::normalized(cos(alpha), sin(alpha), 0.0).expect("unit");
        let f2 = Direction::normalized(-sin(alpha) * cos(beta), cos(alpha) * cos(beta), sin(beta)).expect("unit");
        (f1, f2)
    }
}

/// Realize a phantom on `scheme`. Noise is added when `spec.snr` is set.
pub fn generate_volume(spec: &PhantomSpec, scheme: &GradientScheme) -> Result<PhantomVolumes> {
    let [nx, ny, nz] = spec.dims;
    if spec.dims.iter().any(|&d| d < 5) {
        return Err(Error::InvalidParameter(alloc::format!(
            "phantom dims must be at least 5 per axis, got {:?}",
            spec.dims
        )));
    }
    if let Some(snr) = spec.snr {
        if !(snr > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!("SNR must be positive, got {snr}")));
        }
    }
    let eig = (spec.lambda_par, spec.lambda_perp);
    let nvox = nx * ny * nz;
    let nmeas = scheme.len();
    let dirs: Vec<Option<Direction>> = (0..nmeas).map(|i| scheme.direction(i)).collect();

    let mut dwi = vec![0.0; nvox * nmeas];
    let mut fodf = vec![0.0; nvox * n_coeffs(8)];
    let mut fractions = vec![0.0; nvox * 3];
    let mut zones = Vec::with_capacity(nvox);
    let mut fibers_out = Vec::with_capacity(nvox);

    let field = OrientationField::from_seed(spec.seed);
    let min_dim = nx.min(ny).min(nz) as f64;
    if let Layout::Zones(z) = &spec.layout {
        let wm_start = z.gm_depth + 0.5;
        if min_dim / 2.0 <= wm_start || z.crossing_half_width > min_dim / 2.0 - wm_start {
            return Err(Error::InvalidParameter(alloc::format!(
                "dims {:?} too small for CSF depth {}, GM depth {} and crossing half-width {}",
                spec.dims,
                z.csf_depth,
                z.gm_depth,
                z.crossing_half_width
            )));
        }
    }

    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = i + nx * (j + ny * k);
                let (fr, fib, zone) = match &spec.layout {
                    Layout::Homogeneous { fractions, fibers } => {
                        let fc = if fibers.is_empty() {
                            None
                        } else {
                            Some(FiberConfig::new(
                                fibers.iter().map(|f| f.0).collect(),
                                fibers.iter().map(|f| f.1).collect(),
                                eig,
                            )?)
                        };
                        let zone = dominant_zone(fractions, fibers.len() > 1);
                        (*fractions, fc, zone)
                    }
                    Layout::Zones(z) => voxel_in_zones(z, &field, spec.dims, [i, j, k], eig),
                };
                for (t, f) in fr.to_array().iter().enumerate() {
                    fractions[v + nvox * t] = *f;
                }
                let fc = match fib {
                    Some(fc) if fr.wm > 0.0 => Some(fc),
                    _ => None,
                };
                let empty = FiberConfig::single(Direction::PLUS_Z, eig);
                let used = fc.as_ref().unwrap_or(&empty);
                let wm_frac = if fc.is_some() { fr.wm } else { 0.0 };
                let fr_used = TissueFractions { wm: wm_frac, ..fr };
                for (m, d) in dirs.iter().enumerate() {
                    let b = scheme.bvals()[m];
                    dwi[v + nvox * m] = match d {
                        Some(g) => simulate_signal(&fr_used, used, &spec.diffusivities, b, g),
                        None => simulate_signal(&fr_used, used, &spec.diffusivities, 0.0, &Direction::PLUS_Z),
                    };
                }
                if let Some(fc) = &fc {
                    let c = ground_truth_fodf(fc, fr.wm, 8, spec.apodization)?;
                    for (t, val) in c.as_slice().iter().enumerate() {
                        fodf[v + nvox * t] = *val;
                    }
                }
                zones.push(zone);
                fibers_out.push(fc);
            }
        }
    }

    let vs = spec.voxel_size;
    let mut dwi = Volume4D::new([nx, ny, nz, nmeas], vs, dwi)?;
    if let Some(snr) = spec.snr {
        dwi = add_noise(&dwi, snr, noise_seed(spec.seed));
    }
    Ok(PhantomVolumes {
        dwi,
        fodf: Volume4D::new([nx, ny, nz, n_coeffs(8)], vs, fodf)?,
        fractions: Volume4D::new([nx, ny, nz, 3], vs, fractions)?,
        mask: Mask::full(spec.dims),
        zones,
        fibers: fibers_out,
    })
}

/// Noise stream seed derived from the phantom seed.
pub fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x6e6f_6973_6521_0001
}

fn dominant_zone(f: &TissueFractions, crossing: bool) -> Zone {
    if f.wm >= f.gm && f.wm >= f.csf {
        if crossing {
            Zone::Crossing
        } else {
            Zone::Wm
        }
    } else if f.gm >= f.csf {
        Zone::Gm
    } else {
        Zone::Csf
    }
}

fn voxel_in_zones(
    z: &ZoneLayout,
    field: &OrientationField,
    dims: [usize; 3],
    ijk: [usize; 3],
    eig: (f64, f64),
) -> (TissueFractions, Option<FiberConfig>, Zone) {
    let depth = (0..3)
        .map(|a| {
            let c = ijk[a] as f64 + 0.5;
            c.min(dims[a] as f64 - c)
        })
        .fold(f64::INFINITY, f64::min);
    let tissue = logistic((depth - z.csf_depth) / z.transition_width);
    let white = logistic((depth - z.gm_depth) / z.transition_width);
    let fr = TissueFractions {
        csf: 1.0 - tissue,
        gm: tissue * (1.0 - white),
        wm: tissue * white,
    };
    let norm = |a: usize| 2.0 * (ijk[a] as f64 + 0.5) / dims[a] as f64 - 1.0;
    let centered = |a: usize| ijk[a] as f64 - (dims[a] as f64 - 1.0) / 2.0;
    let in_core = (0..3).all(|a| fabs(centered(a)) < z.crossing_half_width);
    if in_core {
        let c = |a: usize| centered(a) / z.crossing_half_width;
        let (f1, f2) = field.crossing(c(0), c(1), c(2));
        let fc = FiberConfig {
            directions: vec![f1, f2],
            weights: vec![0.5, 0.5],
            eigenvalues: eig,
        };
        (fr, Some(fc), Zone::Crossing)
    } else {
        let d = field.single(norm(0), norm(1), norm(2));
        (fr, Some(FiberConfig::single(d, eig)), dominant_zone(&fr, false))
    }
}

/// Rician noise: `sqrt((s + n1/snr)^2 + (n2/snr)^2)`, one ChaCha stream per voxel
/// so the result does not depend on evaluation order. Infinite SNR is a no-op.
pub fn add_noise(dwi: &Volume4D, snr: f64, seed: u64) -> Volume4D {
    if snr.is_infinite() {
        return dwi.clone();
    }
    let sigma = 1.0 / snr;
    let nvox = dwi.n_voxels();
    let mut out = dwi.clone();
    let data = out.data_mut();
    for v in 0..nvox {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v as u64);
        for m in 0..dwi.n_volumes() {
            let s = data[v + nvox * m];
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let re = s + sigma * n1;
            let im = sigma * n2;
            data[v + nvox * m] = sqrt(re * re + im * im);
        }
    }
    out
}
