//! Gradient schemes, b0 normalization, shell extraction, volumetric SH fitting
//! and assembly of voxel / patch training samples.

use alloc::vec;
use alloc::vec::Vec;

use libm::fabs;

use crate::error::{Error, Result};
use crate::phantom::TissueFractions;
use crate::sh::{n_coeffs, Direction, ShCoefficients, ShFitter};
use crate::volume::{Mask, Volume4D};

/// Default half-width of a shell, s/mm².
pub const DEFAULT_SHELL_TOLERANCE: f64 = 50.0;

/// Mean-b0 values at or below this fraction of the volume maximum are excluded.
pub const RELATIVE_B0_FLOOR: f64 = 1e-6;

/// Acquisition b-values and gradient directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
    shell_tolerance: f64,
}

impl GradientScheme {
    /// Diffusion-weighted rows are normalized to unit length; b0 rows keep
    /// whatever vector they were given.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, shell_tolerance: f64) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::LengthMismatch {
                context: "bvals vs bvecs",
                expected: bvals.len(),
                found: bvecs.len(),
            });
        }
        let mut out = Vec::with_capacity(bvecs.len());
        for (b, v) in bvals.iter().zip(&bvecs) {
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::InvalidParameter(alloc::format!("invalid b-value {b}")));
            }
            if *b <= shell_tolerance {
                out.push(*v);
            } else {
                let d = Direction::normalized(v[0], v[1], v[2]).ok_or_else(|| {
                    Error::InvalidParameter(alloc::format!("zero gradient vector on a b={b} row"))
                })?;
                out.push(d.to_array());
            }
        }
        Ok(Self {
            bvals,
            bvecs: out,
            shell_tolerance,
        })
    }

    /// `n_b0` b0 rows followed by each shell sampled on `dirs`.
    pub fn from_shells(n_b0: usize, shells: &[(f64, Vec<Direction>)]) -> Self {
        let mut bvals = vec![0.0; n_b0];
        let mut bvecs = vec![[0.0; 3]; n_b0];
        for (b, dirs) in shells {
            for d in dirs {
                bvals.push(*b);
                bvecs.push(d.to_array());
            }
        }
        Self {
            bvals,
            bvecs,
            shell_tolerance: DEFAULT_SHELL_TOLERANCE,
        }
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn shell_tolerance(&self) -> f64 {
        self.shell_tolerance
    }

    pub fn is_b0(&self, idx: usize) -> bool {
        self.bvals[idx] <= self.shell_tolerance
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_b0(i)).collect()
    }

    pub fn dw_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_b0(i)).collect()
    }

    /// Unit direction of a diffusion-weighted row.
    pub fn direction(&self, idx: usize) -> Option<Direction> {
        if self.is_b0(idx) {
            None
        } else {
            let v = self.bvecs[idx];
            Direction::normalized(v[0], v[1], v[2])
        }
    }

    pub fn directions(&self, indices: &[usize]) -> Result<Vec<Direction>> {
        indices
            .iter()
            .map(|&i| {
                self.direction(i).ok_or_else(|| {
                    Error::InvalidParameter(alloc::format!("row {i} is a b0 and has no direction"))
                })
            })
            .collect()
    }

    /// Mean b-value of each cluster of non-b0 rows, ascending.
    pub fn shells(&self) -> Vec<f64> {
        let mut bs: Vec<f64> = self.bvals.iter().copied().filter(|b| *b > self.shell_tolerance).collect();
        bs.sort_by(f64::total_cmp);
        let mut shells: Vec<Vec<f64>> = Vec::new();
        for b in bs {
            match shells.last_mut() {
                Some(cluster) if b - cluster[0] <= 2.0 * self.shell_tolerance => cluster.push(b),
                _ => shells.push(vec![b]),
            }
        }
        shells
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Rows with `|b - target_b| <= tolerance`.
    pub fn extract_shell(&self, target_b: f64) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| fabs(self.bvals[i] - target_b) <= self.shell_tolerance)
            .collect();
        if idx.is_empty() {
            return Err(Error::ShellNotFound {
                target: target_b,
                tolerance: self.shell_tolerance,
                available: self.shells(),
            });
        }
        Ok(idx)
    }

    pub fn subset(&self, indices: &[usize]) -> GradientScheme {
        GradientScheme {
            bvals: indices.iter().map(|&i| self.bvals[i]).collect(),
            bvecs: indices.iter().map(|&i| self.bvecs[i]).collect(),
            shell_tolerance: self.shell_tolerance,
        }
    }
}

/// Diffusion-weighted volumes divided by the mean b0.
#[derive(Debug, Clone)]
pub struct NormalizedDwi {
    /// DW volumes only, in original row order.
    pub volume: Volume4D,
    /// Scheme of the retained rows.
    pub scheme: GradientScheme,
    /// Voxels with a usable b0.
    pub mask: Mask,
}

/// Divide every diffusion-weighted volume by the voxelwise mean b0 and drop
/// the b0s. Voxels whose mean b0 is not above a small fraction of the brightest
/// mean b0 are zeroed and left out of the mask.
pub fn normalize_by_b0(dwi: &Volume4D, scheme: &GradientScheme) -> Result<NormalizedDwi> {
    if dwi.n_volumes() != scheme.len() {
        return Err(Error::LengthMismatch {
            context: "DWI volumes vs gradient rows",
            expected: scheme.len(),
            found: dwi.n_volumes(),
        });
    }
    let b0s = scheme.b0_indices();
    if b0s.is_empty() {
        return Err(Error::NoB0);
    }
    let dws = scheme.dw_indices();
    let nvox = dwi.n_voxels();
    let data = dwi.data();
    let mean_b0: Vec<f64> = (0..nvox)
        .map(|v| b0s.iter().map(|&b| data[v + nvox * b]).sum::<f64>() / b0s.len() as f64)
        .collect();
    let peak = mean_b0.iter().copied().fold(0.0f64, f64::max);
    let floor = RELATIVE_B0_FLOOR * peak;
    let mut mask = Mask::full(dwi.spatial_dims());
    let mut out = vec![0.0; nvox * dws.len()];
    for v in 0..nvox {
        let m = mean_b0[v];
        if !(m > floor) || !m.is_finite() {
            mask.set(v, false);
            continue;
        }
        for (o, &src) in dws.iter().enumerate() {
            out[v + nvox * o] = data[v + nvox * src] / m;
        }
    }
    let [nx, ny, nz] = dwi.spatial_dims();
    Ok(NormalizedDwi {
        volume: Volume4D::new([nx, ny, nz, dws.len()], dwi.voxel_size(), out)?,
        scheme: scheme.subset(&dws),
        mask,
    })
}

/// Laplace–Beltrami weight used when fitting noisy measured signals.
pub const NOISY_FIT_REGULARIZATION: f64 = 1e-3;

/// Normalize by b0, keep the shell nearest `shell_b` and fit order-`order`
/// SH at every voxel with a usable b0. Returns the SH volume and that mask.
pub fn single_shell_sh(
    dwi: &Volume4D,
    scheme: &GradientScheme,
    shell_b: f64,
    order: usize,
    regularization: f64,
) -> Result<(Volume4D, Mask)> {
    let rows = scheme.extract_shell(shell_b)?;
    if rows.iter().any(|&r| scheme.is_b0(r)) {
        return Err(Error::InvalidParameter(alloc::format!(
            "shell b={shell_b} selects b0 volumes; pick a diffusion-weighted shell"
        )));
    }
    let norm = normalize_by_b0(dwi, scheme)?;
    // rows of the normalized volume are the DW rows in original order
    let dw = scheme.dw_indices();
    let local: Vec<usize> = rows
        .iter()
        .map(|r| dw.iter().position(|d| d == r).expect("shell rows are diffusion weighted"))
        .collect();
    let signal = norm.volume.select_volumes(&local)?;
    let dirs = scheme.directions(&rows)?;
    let sh = fit_sh_volume(&signal, &dirs, order, regularization, &norm.mask)?;
    Ok((sh, norm.mask))
}

/// Fit SH coefficients at every masked voxel. Unmasked voxels stay zero.
pub fn fit_sh_volume(
    signal: &Volume4D,
    dirs: &[Direction],
    order: usize,
    regularization: f64,
    mask: &Mask,
) -> Result<Volume4D> {
    if signal.n_volumes() != dirs.len() {
        return Err(Error::LengthMismatch {
            context: "signal volumes vs directions",
            expected: dirs.len(),
            found: signal.n_volumes(),
        });
    }
    check_spatial(signal.spatial_dims(), mask.dims(), "signal vs mask")?;
    let fitter = ShFitter::new(dirs, order, regularization)?;
    let [nx, ny, nz] = signal.spatial_dims();
    let mut out = Volume4D::zeros([nx, ny, nz, n_coeffs(order)], signal.voxel_size())?;
    for v in mask.indices() {
        let c = fitter.fit(&signal.series(v))?;
        out.set_series(v, c.as_slice());
    }
    Ok(out)
}

/// Anything the trainer can consume.
pub trait TrainingSample {
    fn input(&self) -> &[f64];
    fn target_sh(&self) -> &[f64];
    fn target_fractions(&self) -> [f64; 3];
}

/// Single-voxel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSample {
    pub input_sh: ShCoefficients,
    pub target_sh: ShCoefficients,
    pub target_fractions: TissueFractions,
    pub voxel: [usize; 3],
}

/// 3×3×3 neighbourhood pair. `input_patch` is laid out `[dk][dj][di][coeff]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub input_patch: Vec<f64>,
    pub target_sh: ShCoefficients,
    pub target_fractions: TissueFractions,
    pub center: [usize; 3],
}

pub const PATCH_WIDTH: usize = 3;

impl TrainingSample for VoxelSample {
    fn input(&self) -> &[f64] {
        self.input_sh.as_slice()
    }
    fn target_sh(&self) -> &[f64] {
        self.target_sh.as_slice()
    }
    fn target_fractions(&self) -> [f64; 3] {
        self.target_fractions.to_array()
    }
}

impl TrainingSample for PatchSample {
    fn input(&self) -> &[f64] {
        &self.input_patch
    }
    fn target_sh(&self) -> &[f64] {
        self.target_sh.as_slice()
    }
    fn target_fractions(&self) -> [f64; 3] {
        self.target_fractions.to_array()
    }
}

fn check_spatial(a: [usize; 3], b: [usize; 3], context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn check_inputs(input_sh: &Volume4D, target_sh: &Volume4D, fractions: &Volume4D, mask: &Mask) -> Result<()> {
    let dims = input_sh.spatial_dims();
    check_spatial(dims, target_sh.spatial_dims(), "input vs target SH")?;
    check_spatial(dims, fractions.spatial_dims(), "input SH vs fractions")?;
    check_spatial(dims, mask.dims(), "input SH vs mask")?;
    if fractions.n_volumes() != 3 {
        return Err(Error::LengthMismatch {
            context: "fraction volumes",
            expected: 3,
            found: fractions.n_volumes(),
        });
    }
    ShCoefficients::from_slice(&vec![0.0; input_sh.n_volumes()])?;
    ShCoefficients::from_slice(&vec![0.0; target_sh.n_volumes()])?;
    Ok(())
}

fn fractions_at(fractions: &Volume4D, v: usize) -> Result<TissueFractions> {
    let f = fractions.series(v);
    TissueFractions::new(f[0], f[1], f[2])
}

/// One sample per masked voxel, x fastest.
pub fn assemble_dataset(
    input_sh: &Volume4D,
    target_sh: &Volume4D,
    fractions: &Volume4D,
    mask: &Mask,
) -> Result<Vec<VoxelSample>> {
    check_inputs(input_sh, target_sh, fractions, mask)?;
    mask.indices()
        .into_iter()
        .map(|v| {
            Ok(VoxelSample {
                input_sh: ShCoefficients::from_slice(&input_sh.series(v))?,
                target_sh: ShCoefficients::from_slice(&target_sh.series(v))?,
                target_fractions: fractions_at(fractions, v)?,
                voxel: mask.coords(v),
            })
        })
        .collect()
}

/// Input patch around `(i, j, k)` with nearest-edge replication at borders.
pub fn extract_patch(input_sh: &Volume4D, center: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = input_sh.spatial_dims();
    let nc = input_sh.n_volumes();
    let nvox = input_sh.n_voxels();
    let data = input_sh.data();
    let clampi = |c: usize, d: usize, n: usize| (c + d).saturating_sub(1).min(n - 1);
    let mut patch = Vec::with_capacity(PATCH_WIDTH.pow(3) * nc);
    for dk in 0..PATCH_WIDTH {
        for dj in 0..PATCH_WIDTH {
            for di in 0..PATCH_WIDTH {
                let i = clampi(center[0], di, nx);
                let j = clampi(center[1], dj, ny);
                let k = clampi(center[2], dk, nz);
                let v = i + nx * (j + ny * k);
                patch.extend((0..nc).map(|c| data[v + nvox * c]));
            }
        }
    }
    patch
}

/// One 3×3×3 patch sample per masked voxel. Unmasked neighbours still
/// contribute their values to a patch.
pub fn assemble_patches(
    input_sh: &Volume4D,
    target_sh: &Volume4D,
    fractions: &Volume4D,
    mask: &Mask,
) -> Result<Vec<PatchSample>> {
    check_inputs(input_sh, target_sh, fractions, mask)?;
    mask.indices()
        .into_iter()
        .map(|v| {
            let center = mask.coords(v);
            Ok(PatchSample {
                input_patch: extract_patch(input_sh, center),
                target_sh: ShCoefficients::from_slice(&target_sh.series(v))?,
                target_fractions: fractions_at(fractions, v)?,
                center,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme(bvals: &[f64]) -> GradientScheme {
        let bvecs = bvals
            .iter()
            .enumerate()
            .map(|(i, b)| if *b > 0.0 { [1.0, i as f64 * 0.1, 0.0] } else { [0.0; 3] })
            .collect();
        GradientScheme::new(bvals.to_vec(), bvecs, DEFAULT_SHELL_TOLERANCE).unwrap()
    }

    #[test]
    fn shell_extraction() {
        let s = scheme(&[0.0, 1000.0, 2000.0, 1005.0]);
        assert_eq!(s.extract_shell(1000.0).unwrap(), vec![1, 3]);
        match s.extract_shell(3000.0) {
            Err(Error::ShellNotFound { available, .. }) => assert_eq!(available.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hcp_like_scheme_extracts_ninety() {
        let dirs = crate::sphere::SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
        let s = GradientScheme::from_shells(18, &[(1000.0, dirs.clone()), (2000.0, dirs.clone()), (3000.0, dirs)]);
        assert_eq!(s.len(), 288);
        let idx = s.extract_shell(2000.0).unwrap();
        assert_eq!(idx.len(), 90);
        assert!(idx.iter().all(|&i| (s.bvals()[i] - 2000.0).abs() < 1e-9));
        assert_eq!(s.shells(), vec![1000.0, 2000.0, 3000.0]);
    }

    #[test]
    fn normalization_examples() {
        // voxel 0: b0s 100,100 dw 50 ; voxel 1: b0s 80,120 dw 100 ; voxel 2: b0s 0,0
        let s = scheme(&[0.0, 0.0, 1000.0]);
        let data = vec![100.0, 80.0, 0.0, 100.0, 120.0, 0.0, 50.0, 100.0, 7.0];
        let v = Volume4D::new([3, 1, 1, 3], [1.0; 3], data).unwrap();
        let n = normalize_by_b0(&v, &s).unwrap();
        assert_eq!(n.volume.n_volumes(), 1);
        assert_eq!(n.volume.data(), &[0.5, 1.0, 0.0]);
        assert_eq!(n.mask.as_slice(), &[true, true, false]);
        assert_eq!(n.scheme.len(), 1);
    }

    #[test]
    fn normalization_needs_b0() {
        let s = scheme(&[1000.0]);
        let v = Volume4D::new([1, 1, 1, 1], [1.0; 3], vec![1.0]).unwrap();
        assert_eq!(normalize_by_b0(&v, &s).unwrap_err(), Error::NoB0);
    }

    fn sample_volumes(n: usize) -> (Volume4D, Volume4D, Volume4D) {
        let dims = [n, n, n];
        let nv = n * n * n;
        let input: Vec<f64> = (0..nv * 45).map(|x| x as f64).collect();
        let target: Vec<f64> = (0..nv * 45).map(|x| -(x as f64)).collect();
        let mut fr = vec![0.0; nv * 3];
        fr[..nv].iter_mut().for_each(|v| *v = 1.0);
        (
            Volume4D::new([dims[0], dims[1], dims[2], 45], [1.0; 3], input).unwrap(),
            Volume4D::new([dims[0], dims[1], dims[2], 45], [1.0; 3], target).unwrap(),
            Volume4D::new([dims[0], dims[1], dims[2], 3], [1.0; 3], fr).unwrap(),
        )
    }

    #[test]
    fn assembly_counts_and_order() {
        let (a, b, c) = sample_volumes(5);
        let mask = Mask::full([5, 5, 5]);
        let vox = assemble_dataset(&a, &b, &c, &mask).unwrap();
        let pat = assemble_patches(&a, &b, &c, &mask).unwrap();
        assert_eq!(vox.len(), 125);
        assert_eq!(pat.len(), 125);
        assert_eq!(vox[1].voxel, [1, 0, 0]);
        assert_eq!(vox[5].voxel, [0, 1, 0]);
        assert_eq!(pat[0].input_patch.len(), 27 * 45);
    }

    #[test]
    fn corner_patch_replicates_edges() {
        let (a, _, _) = sample_volumes(5);
        let p = extract_patch(&a, [0, 0, 0]);
        // offsets (-1,-1,-1) and (0,0,0) both map to voxel 0
        assert_eq!(&p[..45], &p[13 * 45..14 * 45]);
        assert_eq!(p[0], a.get(0, 0, 0, 0));
        // (+1, 0, 0) neighbour sits at di=2, dj=1, dk=1
        let pos = ((3 + 1) * 3 + 2) * 45;
        assert_eq!(p[pos], a.get(1, 0, 0, 0));
    }

    #[test]
    fn masked_voxel_still_feeds_neighbours() {
        let (a, b, c) = sample_volumes(5);
        let mut mask = Mask::full([5, 5, 5]);
        let hole = a.voxel_index(2, 2, 2);
        mask.set(hole, false);
        let pat = assemble_patches(&a, &b, &c, &mask).unwrap();
        assert_eq!(pat.len(), 124);
        assert!(pat.iter().all(|p| p.center != [2, 2, 2]));
        let nb = pat.iter().find(|p| p.center == [1, 2, 2]).unwrap();
        let pos = ((3 + 1) * 3 + 2) * 45;
        assert_eq!(nb.input_patch[pos], a.get(2, 2, 2, 0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (a, b, c) = sample_volumes(5);
        let mask = Mask::full([4, 5, 5]);
        assert!(assemble_dataset(&a, &b, &c, &mask).is_err());
    }
}
