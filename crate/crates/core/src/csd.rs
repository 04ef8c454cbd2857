//! Single-shell constrained spherical deconvolution.
//!
//! The fODF is scaled so that a unit-weight delta convolved with the
//! response reproduces the response signal exactly.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{log, sqrt};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, symmetric_eigen, Matrix, QrFactor};
use crate::sh::{self, degree_of, n_coeffs, rotation_between, Direction, ShCoefficients, ShFitter};
use crate::sphere::SphereGrid;
use crate::volume::{Mask, Volume4D};

const ZONAL_ORDERS: usize = sh::MAX_ORDER / 2 + 1;

/// Zonal SH coefficients `r_l` (l = 0, 2, .., 8) of the signal from a single
/// z-aligned fibre.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResponseFunction {
    coefficients: [f64; ZONAL_ORDERS],
}

impl ResponseFunction {
    pub fn new(coefficients: [f64; ZONAL_ORDERS]) -> Result<Self> {
        if coefficients.iter().any(|c| !c.is_finite()) || !(coefficients[0] > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "response needs finite coefficients and r_0 > 0, got {coefficients:?}"
            )));
        }
        Ok(Self { coefficients })
    }

    /// Unvalidated, e.g. the all-zero response.
    pub fn from_raw(coefficients: [f64; ZONAL_ORDERS]) -> Self {
        Self { coefficients }
    }

    pub fn coefficients(&self) -> &[f64; ZONAL_ORDERS] {
        &self.coefficients
    }

    pub fn zonal(&self, l: usize) -> f64 {
        self.coefficients[l / 2]
    }
}

/// A single-fibre voxel used for response estimation.
#[derive(Debug, Clone, Copy)]
pub struct ResponseVoxel<'a> {
    pub signal: &'a [f64],
    pub directions: &'a [Direction],
    pub axis: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseEstimate {
    pub response: ResponseFunction,
    /// Mean over voxels of the m≠0 share of non-DC coefficient energy in the
    /// axis-aligned fit; near zero for a good axis.
    pub nonaxial_energy: f64,
    pub n_voxels: usize,
}

/// Fit each voxel in a frame where its fibre axis is +z and average the m=0
/// coefficients per order. Rotating the gradient directions stands in for
/// rotating the SH expansion.
pub fn estimate_response(voxels: &[ResponseVoxel<'_>], regularization: f64) -> Result<ResponseEstimate> {
    if voxels.is_empty() {
        return Err(Error::Empty("response voxels"));
    }
    let mut sum = [0.0; ZONAL_ORDERS];
    let mut nonaxial = 0.0;
    for vox in voxels {
        let rot = rotation_between(&vox.axis, &Direction::PLUS_Z);
        let dirs: Vec<Direction> = vox.directions.iter().map(|d| d.rotated(&rot)).collect();
        let c = sh::fit_coefficients(vox.signal, &dirs, sh::MAX_ORDER, regularization)?;
        let mut axial = 0.0;
        let mut off = 0.0;
        for (j, v) in c.as_slice().iter().enumerate() {
            let (l, m) = degree_of(j);
            if m == 0 {
                sum[l / 2] += v;
                if l > 0 {
                    axial += v * v;
                }
            } else {
                off += v * v;
            }
        }
        if axial + off > 0.0 {
            nonaxial += off / (axial + off);
        }
    }
    let n = voxels.len() as f64;
    Ok(ResponseEstimate {
        response: ResponseFunction::new(sum.map(|s| s / n))?,
        nonaxial_energy: nonaxial / n,
        n_voxels: voxels.len(),
    })
}

/// `A[i, j] = Y_j(dir_i) * sqrt(4π/(2l+1)) * r_l`, so `A f` is the signal of fODF `f`.
pub fn convolution_matrix(response: &ResponseFunction, dirs: &[Direction], order: usize) -> Result<Matrix> {
    let mut a = sh::eval_basis(dirs, order)?;
    let scale: Vec<f64> = (0..n_coeffs(order))
        .map(|j| {
            let (l, _) = degree_of(j);
            sqrt(4.0 * PI / (2 * l + 1) as f64) * response.zonal(l)
        })
        .collect();
    for r in 0..a.rows() {
        for (v, s) in a.row_mut(r).iter_mut().zip(&scale) {
            *v *= s;
        }
    }
    Ok(a)
}

/// Tuning of the constrained fit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CsdParams {
    /// Penalty weight, relative to the per-row scale of the convolution matrix.
    pub lambda: f64,
    /// Constraint threshold as a fraction of the mean initial fODF amplitude.
    pub tau: f64,
    pub max_iter: usize,
}

impl Default for CsdParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.1,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsdFit {
    pub coefficients: ShCoefficients,
    pub iterations: usize,
    pub converged: bool,
    /// `|A f - s|` after every constrained solve.
    pub residuals: Vec<f64>,
    /// Size of the penalized set at every constrained solve.
    pub constrained_counts: Vec<usize>,
}

/// Precomputed deconvolution operator for one scheme and response.
#[derive(Debug, Clone)]
pub struct CsdModel {
    conv: Matrix,
    init: QrFactor,
    constraint: Matrix,
    lambda: f64,
    params: CsdParams,
}

const INIT_ORDER: usize = 4;

impl CsdModel {
    pub fn new(
        response: &ResponseFunction,
        dirs: &[Direction],
        constraint_grid: &SphereGrid,
        params: CsdParams,
    ) -> Result<Self> {
        if !(params.lambda > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "CSD lambda must be positive, got {}",
                params.lambda
            )));
        }
        let conv = convolution_matrix(response, dirs, sh::MAX_ORDER)?;
        let init = QrFactor::new(&conv.leading_columns(n_coeffs(INIT_ORDER))).map_err(|e| Error::Singular {
            order: degree_of(e.column).0,
        })?;
        let constraint = sh::eval_basis(constraint_grid.directions(), sh::MAX_ORDER)?;
        let row_scale_a = conv.frobenius_norm() / sqrt(conv.rows() as f64);
        let row_scale_c = constraint.frobenius_norm() / sqrt(constraint.rows() as f64);
        Ok(Self {
            lambda: params.lambda * row_scale_a / row_scale_c,
            conv,
            init,
            constraint,
            params,
        })
    }

    pub fn n_dirs(&self) -> usize {
        self.conv.rows()
    }

    pub fn convolution(&self) -> &Matrix {
        &self.conv
    }

    pub fn constraint_basis(&self) -> &Matrix {
        &self.constraint
    }

    pub fn fit(&self, signal: &[f64]) -> Result<CsdFit> {
        if signal.len() != self.conv.rows() {
            return Err(Error::LengthMismatch {
                context: "CSD signal vs directions",
                expected: self.conv.rows(),
                found: signal.len(),
            });
        }
        let n = n_coeffs(sh::MAX_ORDER);
        let mut f = vec![0.0; n];
        f[..n_coeffs(INIT_ORDER)].copy_from_slice(&self.init.solve(signal));
        let mut amps = self.constraint.matvec(&f);
        let threshold = self.params.tau * amps.iter().sum::<f64>() / amps.len() as f64;

        let mut previous: Option<Vec<usize>> = None;
        let mut residuals = Vec::new();
        let mut counts = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.params.max_iter {
            let negative: Vec<usize> = (0..amps.len()).filter(|&i| amps[i] < threshold).collect();
            if previous.as_ref() == Some(&negative) {
                converged = true;
                break;
            }
            iterations += 1;
            f = self.solve_penalized(signal, &negative)?;
            residuals.push(self.residual(&f, signal));
            counts.push(negative.len());
            amps = self.constraint.matvec(&f);
            previous = Some(negative);
        }
        if !converged && iterations > 0 {
            // Budget exhausted: converged only if the last solve left the set unchanged.
            let negative: Vec<usize> = (0..amps.len()).filter(|&i| amps[i] < threshold).collect();
            converged = previous.as_ref() == Some(&negative);
        }
        Ok(CsdFit {
            coefficients: ShCoefficients::new(sh::MAX_ORDER, f)?,
            iterations,
            converged,
            residuals,
            constrained_counts: counts,
        })
    }

    fn residual(&self, f: &[f64], s: &[f64]) -> f64 {
        let pred = self.conv.matvec(f);
        sqrt(pred.iter().zip(s).map(|(p, x)| (p - x) * (p - x)).sum())
    }

    fn solve_penalized(&self, signal: &[f64], negative: &[usize]) -> Result<Vec<f64>> {
        let mut penalty = self.constraint.select_rows(negative);
        penalty.scale(self.lambda);
        let system = self.conv.vstack(&penalty);
        let mut rhs = vec![0.0; system.rows()];
        rhs[..signal.len()].copy_from_slice(signal);
        match lstsq(&system, &rhs) {
            Ok(f) => Ok(f),
            Err(_) => {
                // Fewer measurements than unknowns and too few active
                // constraints: fall back to a minimal ridge.
                let n = system.cols();
                let mut ridge = Matrix::identity(n);
                ridge.scale(1e-6 * self.conv.frobenius_norm() / sqrt(self.conv.rows() as f64));
                let system = system.vstack(&ridge);
                let mut rhs2 = vec![0.0; system.rows()];
                rhs2[..signal.len()].copy_from_slice(signal);
                lstsq(&system, &rhs2).map_err(|e| Error::Singular {
                    order: degree_of(e.column).0,
                })
            }
        }
    }
}

/// One-shot constrained fit.
pub fn csd_fit(
    signal: &[f64],
    dirs: &[Direction],
    response: &ResponseFunction,
    constraint_grid: &SphereGrid,
    params: CsdParams,
) -> Result<CsdFit> {
    CsdModel::new(response, dirs, constraint_grid, params)?.fit(signal)
}

/// Diffusion tensor from a log-linear fit, used to pick response voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorFit {
    /// Descending.
    pub eigenvalues: [f64; 3],
    pub axis: Direction,
    pub fa: f64,
}

/// Log-linear tensor fit of normalized signal `S/S0` measured at `bvals`, `dirs`.
pub fn fit_tensor(signal: &[f64], bvals: &[f64], dirs: &[Direction]) -> Result<TensorFit> {
    if signal.len() != dirs.len() || bvals.len() != dirs.len() {
        return Err(Error::LengthMismatch {
            context: "tensor fit inputs",
            expected: dirs.len(),
            found: signal.len(),
        });
    }
    let mut design = Matrix::zeros(dirs.len(), 6);
    let mut y = Vec::with_capacity(dirs.len());
    for (i, (d, b)) in dirs.iter().zip(bvals).enumerate() {
        let (x, yy, z) = (d.x(), d.y(), d.z());
        let row = design.row_mut(i);
        row.copy_from_slice(&[x * x, yy * yy, z * z, 2.0 * x * yy, 2.0 * x * z, 2.0 * yy * z]);
        row.iter_mut().for_each(|v| *v *= b);
        y.push(-log(signal[i].max(1e-6)));
    }
    let t = lstsq(&design, &y).map_err(|_| Error::Singular { order: 2 })?;
    let dmat = Matrix::from_vec(3, 3, vec![t[0], t[3], t[4], t[3], t[1], t[5], t[4], t[5], t[2]]);
    let (vals, vecs) = symmetric_eigen(&dmat);
    let axis = Direction::normalized(vecs[(0, 0)], vecs[(1, 0)], vecs[(2, 0)])
        .ok_or(Error::Singular { order: 2 })?;
    let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
    let num: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    let den: f64 = vals.iter().map(|v| v * v).sum();
    let fa = if den > 0.0 { sqrt(1.5 * num / den) } else { 0.0 };
    Ok(TensorFit {
        eigenvalues: [vals[0], vals[1], vals[2]],
        axis,
        fa,
    })
}

/// Automatic response: tensor-fit every masked voxel of a normalized
/// single-shell volume, keep the `max_voxels` highest-FA voxels with
/// FA ≥ `fa_threshold`, and estimate from their principal axes.
pub fn estimate_response_from_fa(
    signal: &Volume4D,
    dirs: &[Direction],
    bval: f64,
    mask: &Mask,
    fa_threshold: f64,
    max_voxels: usize,
) -> Result<ResponseEstimate> {
    if signal.n_volumes() != dirs.len() {
        return Err(Error::LengthMismatch {
            context: "signal volumes vs directions",
            expected: dirs.len(),
            found: signal.n_volumes(),
        });
    }
    let bvals = vec![bval; dirs.len()];
    let mut candidates: Vec<(f64, usize, Direction)> = Vec::new();
    for v in mask.indices() {
        let s = signal.series(v);
        if let Ok(t) = fit_tensor(&s, &bvals, dirs) {
            if t.fa >= fa_threshold && t.fa.is_finite() {
                candidates.push((t.fa, v, t.axis));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Empty("voxels above the FA threshold"));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(max_voxels.max(1));
    let series: Vec<Vec<f64>> = candidates.iter().map(|c| signal.series(c.1)).collect();
    let voxels: Vec<ResponseVoxel<'_>> = candidates
        .iter()
        .zip(&series)
        .map(|(c, s)| ResponseVoxel {
            signal: s,
            directions: dirs,
            axis: c.2,
        })
        .collect();
    estimate_response(&voxels, 0.0)
}

/// Deconvolve every masked voxel. Returns the fODF volume and the number of
/// voxels that hit `max_iter` without settling.
pub fn csd_volume(model: &CsdModel, signal: &Volume4D, mask: &Mask) -> Result<(Volume4D, usize)> {
    let [nx, ny, nz] = signal.spatial_dims();
    let mut out = Volume4D::zeros([nx, ny, nz, n_coeffs(sh::MAX_ORDER)], signal.voxel_size())?;
    let mut unconverged = 0;
    for v in mask.indices() {
        let fit = model.fit(&signal.series(v))?;
        if !fit.converged {
            unconverged += 1;
        }
        out.set_series(v, fit.coefficients.as_slice());
    }
    Ok((out, unconverged))
}

/// SH fitter and CSD share the same basis; this exposes plain fitting to
/// response-free callers.
pub fn unconstrained_fit(signal: &[f64], dirs: &[Direction]) -> Result<ShCoefficients> {
    ShFitter::new(dirs, sh::MAX_ORDER, 0.0)?.fit(signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peaks::PeakFinder;
    use crate::phantom::{simulate_signal, FiberConfig, IsotropicDiffusivities, TissueFractions};

    fn wm_signal(fibers: &FiberConfig, dirs: &[Direction]) -> Vec<f64> {
        let f = TissueFractions::new(0.0, 0.0, 1.0).unwrap();
        dirs.iter()
            .map(|g| simulate_signal(&f, fibers, &IsotropicDiffusivities::default(), 1000.0, g))
            .collect()
    }

    fn z_response(dirs: &[Direction]) -> ResponseFunction {
        let fib = FiberConfig::single(Direction::PLUS_Z, (1.7e-3, 0.2e-3));
        let s = wm_signal(&fib, dirs);
        estimate_response(
            &[ResponseVoxel {
                signal: &s,
                directions: dirs,
                axis: Direction::PLUS_Z,
            }],
            0.0,
        )
        .unwrap()
        .response
    }

    #[test]
    fn aligned_fit_is_axial() {
        // Azimuthally uniform sampling keeps out-of-band energy out of m != 0.
        let dirs = SphereGrid::hemisphere_rings(6, 18).directions().to_vec();
        let fib = FiberConfig::single(Direction::PLUS_Z, (1.7e-3, 0.2e-3));
        let s = wm_signal(&fib, &dirs);
        let est = estimate_response(
            &[ResponseVoxel {
                signal: &s,
                directions: &dirs,
                axis: Direction::PLUS_Z,
            }],
            0.0,
        )
        .unwrap();
        let c = sh::fit_coefficients(&s, &dirs, 8, 0.0).unwrap();
        for (j, v) in c.as_slice().iter().enumerate() {
            if degree_of(j).1 != 0 {
                assert!(v.abs() < 1e-6, "coefficient {j} = {v}");
            }
        }
        assert!(est.nonaxial_energy < 1e-10);
    }

    #[test]
    fn duplicate_voxels_average_to_same_response() {
        let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
        let axis = Direction::normalized(1.0, 2.0, -0.5).unwrap();
        let fib = FiberConfig::single(axis, (1.7e-3, 0.2e-3));
        let s = wm_signal(&fib, &dirs);
        let one = ResponseVoxel {
            signal: &s,
            directions: &dirs,
            axis,
        };
        let a = estimate_response(&[one], 0.0).unwrap().response;
        let b = estimate_response(&[one, one], 0.0).unwrap().response;
        for (x, y) in a.coefficients().iter().zip(b.coefficients()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(estimate_response(&[], 0.0).is_err());
    }

    #[test]
    fn isotropic_fodf_predicts_constant_signal() {
        let dirs = SphereGrid::fibonacci_hemisphere(60).directions().to_vec();
        let a = convolution_matrix(&z_response(&dirs), &dirs, 8).unwrap();
        let mut f = vec![0.0; 45];
        f[0] = 1.0;
        let s = a.matvec(&f);
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-12));
    }

    #[test]
    fn delta_predicts_perpendicular_maximum() {
        let dirs = vec![Direction::PLUS_Z, Direction::PLUS_X];
        let fit_dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
        let a = convolution_matrix(&z_response(&fit_dirs), &dirs, 8).unwrap();
        let f = sh::delta_expansion(&Direction::PLUS_Z, 1.0, 8, 0.0).unwrap();
        let s = a.matvec(f.as_slice());
        assert!(s[1] > s[0]);
        // a unit delta reproduces the response signal itself
        assert!((s[1] - (-0.2f64).exp()).abs() < 1e-3);
        assert!((s[0] - (-1.7f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn zero_response_gives_zero_matrix() {
        let dirs = SphereGrid::fibonacci_hemisphere(30).directions().to_vec();
        let a = convolution_matrix(&ResponseFunction::from_raw([0.0; 5]), &dirs, 8).unwrap();
        assert!(a.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_fiber_recovered() {
        let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
        let truth = Direction::normalized(0.4, -0.7, 0.3).unwrap();
        let s = wm_signal(&FiberConfig::single(truth, (1.7e-3, 0.2e-3)), &dirs);
        let fit = csd_fit(
            &s,
            &dirs,
            &z_response(&dirs),
            &SphereGrid::default_constraint_grid(),
            CsdParams::default(),
        )
        .unwrap();
        assert!(fit.converged);
        let peaks = PeakFinder::with_defaults().find(&fit.coefficients).unwrap();
        assert!(peaks[0].direction.axial_angle_deg(&truth) < 5.0);
    }

    #[test]
    fn isotropic_signal_gives_near_dc() {
        let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
        let resp = z_response(&dirs);
        // Constant signal equal to the response's own spherical mean.
        let level = resp.zonal(0) / (2.0 * PI.sqrt());
        let s = vec![level; dirs.len()];
        let fit = csd_fit(&s, &dirs, &resp, &SphereGrid::default_constraint_grid(), CsdParams::default()).unwrap();
        let c = fit.coefficients.as_slice();
        let non_dc = c[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(non_dc / c[0].abs() < 0.05);
    }

    #[test]
    fn tensor_fit_recovers_axis_and_eigenvalues() {
        let dirs = SphereGrid::fibonacci_hemisphere(60).directions().to_vec();
        let axis = Direction::normalized(0.3, 0.9, 0.2).unwrap();
        let s = wm_signal(&FiberConfig::single(axis, (1.7e-3, 0.2e-3)), &dirs);
        let t = fit_tensor(&s, &vec![1000.0; 60], &dirs).unwrap();
        assert!(t.axis.axial_angle_deg(&axis) < 1e-6);
        assert!((t.eigenvalues[0] - 1.7e-3).abs() < 1e-9);
        assert!((t.eigenvalues[2] - 0.2e-3).abs() < 1e-9);
        assert!(t.fa > 0.8);
    }
}
