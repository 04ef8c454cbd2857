//! Local-maximum peak extraction from SH fODFs.

use alloc::vec::Vec;

use libm::{cos, sin, sqrt};

use crate::error::Result;
use crate::sh::{Direction, SampledBasis, ShCoefficients};
use crate::sphere::SphereGrid;

pub const DEFAULT_MIN_SEPARATION_DEG: f64 = 25.0;
pub const DEFAULT_RELATIVE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub direction: Direction,
    pub amplitude: f64,
}

/// Precomputed search structure for one grid and SH order.
#[derive(Debug, Clone)]
pub struct PeakFinder {
    grid: SphereGrid,
    basis: SampledBasis,
    neighbors: Vec<Vec<usize>>,
    min_separation_deg: f64,
    relative_threshold: f64,
}

impl PeakFinder {
    pub fn new(grid: SphereGrid, order: usize, min_separation_deg: f64, relative_threshold: f64) -> Result<Self> {
        let basis = SampledBasis::new(grid.directions(), order)?;
        let radius = 1.6 * grid.typical_spacing_deg();
        let neighbors = grid.neighbors(radius);
        Ok(Self {
            grid,
            basis,
            neighbors,
            min_separation_deg,
            relative_threshold: relative_threshold.clamp(0.0, 1.0),
        })
    }

    /// Default grid and thresholds at order 8.
    pub fn with_defaults() -> Self {
        Self::new(
            SphereGrid::default_peak_grid(),
            8,
            DEFAULT_MIN_SEPARATION_DEG,
            DEFAULT_RELATIVE_THRESHOLD,
        )
        .expect("default peak grid is valid")
    }

    pub fn find(&self, c: &ShCoefficients) -> Result<Vec<Peak>> {
        let amps = self.basis.amplitudes(c)?;
        let dirs = self.grid.directions();
        let mut candidates: Vec<Peak> = Vec::new();
        for (i, &a) in amps.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            if self.neighbors[i].iter().all(|&j| amps[j] < a) {
                let (direction, amplitude) = refine(c, dirs[i], a);
                candidates.push(Peak { direction, amplitude });
            }
        }
        let Some(max_amp) = candidates.iter().map(|p| p.amplitude).reduce(f64::max) else {
            return Ok(Vec::new());
        };
        candidates.retain(|p| p.amplitude >= self.relative_threshold * max_amp);
        candidates.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
        let mut peaks: Vec<Peak> = Vec::new();
        for p in candidates {
            // Antipodal copies fall within any separation by the axial metric.
            if peaks
                .iter()
                .all(|q| q.direction.axial_angle_deg(&p.direction) >= self.min_separation_deg)
            {
                peaks.push(p);
            }
        }
        Ok(peaks)
    }
}

/// Peaks of an fODF: strict local maxima on `grid`, refined by gradient ascent,
/// thresholded relative to the largest and merged within `min_separation_deg`.
pub fn extract_peaks(
    c: &ShCoefficients,
    grid: &SphereGrid,
    min_separation_deg: f64,
    relative_threshold: f64,
) -> Result<Vec<Peak>> {
    PeakFinder::new(grid.clone(), c.order(), min_separation_deg, relative_threshold)?.find(c)
}

// Projected gradient ascent in the tangent plane with a halving step.
fn refine(c: &ShCoefficients, start: Direction, start_amp: f64) -> (Direction, f64) {
    let mut d = start;
    let mut amp = start_amp;
    let mut step = 0.05;
    let h = 1e-6;
    for _ in 0..60 {
        let (t1, t2) = tangent_basis(&d);
        let along = |t: &[f64; 3], s: f64| {
            let v = d.to_array();
            Direction::normalized(v[0] + s * t[0], v[1] + s * t[1], v[2] + s * t[2]).expect("tangent step")
        };
        let g1 = (c.evaluate(&along(&t1, h)) - c.evaluate(&along(&t1, -h))) / (2.0 * h);
        let g2 = (c.evaluate(&along(&t2, h)) - c.evaluate(&along(&t2, -h))) / (2.0 * h);
        let gn = sqrt(g1 * g1 + g2 * g2);
        if gn < 1e-12 {
            break;
        }
        let dir = [
            (g1 * t1[0] + g2 * t2[0]) / gn,
            (g1 * t1[1] + g2 * t2[1]) / gn,
            (g1 * t1[2] + g2 * t2[2]) / gn,
        ];
        let mut improved = false;
        while step > 1e-8 {
            let cand = {
                let v = d.to_array();
                let (cs, sn) = (cos(step), sin(step));
                Direction::normalized(
                    cs * v[0] + sn * dir[0],
                    cs * v[1] + sn * dir[1],
                    cs * v[2] + sn * dir[2],
                )
                .expect("great-circle step")
            };
            let a = c.evaluate(&cand);
            if a > amp {
                d = cand;
                amp = a;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (d, amp)
}

fn tangent_basis(d: &Direction) -> ([f64; 3], [f64; 3]) {
    let helper = if libm::fabs(d.x()) < 0.9 { Direction::PLUS_X } else { Direction::PLUS_Y };
    let t1 = d.cross(&helper);
    let n1 = sqrt(t1.iter().map(|v| v * v).sum());
    let t1 = [t1[0] / n1, t1[1] / n1, t1[2] / n1];
    let t1d = Direction::normalized(t1[0], t1[1], t1[2]).expect("tangent");
    let t2 = d.cross(&t1d);
    (t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::delta_expansion;
    use alloc::vec;

    #[test]
    fn dc_only_has_no_peaks() {
        let mut v = vec![0.0; 45];
        v[0] = 1.0;
        let c = ShCoefficients::new(8, v).unwrap();
        assert!(PeakFinder::with_defaults().find(&c).unwrap().is_empty());
    }

    #[test]
    fn nonpositive_fodf_has_no_peaks() {
        let mut c = delta_expansion(&Direction::PLUS_Z, 1.0, 8, 0.02).unwrap();
        c = c.scaled(-1.0);
        c.as_mut_slice()[0] -= 5.0;
        assert!(PeakFinder::with_defaults().find(&c).unwrap().is_empty());
    }

    #[test]
    fn single_delta_peak() {
        let d = Direction::normalized(0.1, 0.3, 0.9).unwrap();
        let c = delta_expansion(&d, 1.0, 8, 0.02).unwrap();
        let peaks = PeakFinder::with_defaults().find(&c).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!(peaks[0].direction.axial_angle_deg(&d) < 0.5);
    }
}
