//! Direction sets on the unit sphere.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{acos, cos, fabs, sin, sqrt};

use crate::error::{Error, Result};
use crate::sh::Direction;

/// A set of directions with optional quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    directions: Vec<Direction>,
    weights: Option<Vec<f64>>,
}

impl SphereGrid {
    pub fn new(directions: Vec<Direction>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Empty("sphere grid"));
        }
        Ok(Self {
            directions,
            weights: None,
        })
    }

    /// Weights must be nonnegative and sum to 4π (within 1e-9 relative).
    pub fn with_weights(directions: Vec<Direction>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != directions.len() {
            return Err(Error::LengthMismatch {
                context: "grid weights",
                expected: directions.len(),
                found: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || fabs(total - 4.0 * PI) > 1e-9 * 4.0 * PI {
            return Err(Error::InvalidParameter(format!(
                "quadrature weights must be nonnegative and sum to 4π, got {total}"
            )));
        }
        let mut g = Self::new(directions)?;
        g.weights = Some(weights);
        Ok(g)
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Geodesic subdivision of the icosahedron: `10 f^2 + 2` vertices on the
    /// full sphere, closed under antipodal reflection.
    pub fn icosphere(frequency: usize) -> Self {
        let f = frequency.max(1);
        let verts = icosahedron_vertices();
        let faces = icosahedron_faces(&verts);
        let mut out: Vec<Direction> = Vec::with_capacity(10 * f * f + 2);
        for [a, b, c] in faces {
            for i in 0..=f {
                for j in 0..=f - i {
                    let k = f - i - j;
                    let p: [f64; 3] = core::array::from_fn(|t| {
                        (verts[a][t] * k as f64 + verts[b][t] * i as f64 + verts[c][t] * j as f64) / f as f64
                    });
                    let d = Direction::normalized(p[0], p[1], p[2]).expect("nonzero barycentric point");
                    if !out.iter().any(|e| e.dot(&d) > 1.0 - 1e-10) {
                        out.push(d);
                    }
                }
            }
        }
        Self {
            directions: out,
            weights: None,
        }
    }

    /// `n` directions spread over the upper hemisphere (z > 0) on a Fibonacci
    /// spiral. No two are antipodal.
    pub fn fibonacci_hemisphere(n: usize) -> Self {
        let golden = PI * (3.0 - sqrt(5.0));
        let directions = (0..n)
            .map(|i| {
                let z = 1.0 - (i as f64 + 0.5) / n as f64;
                let r = sqrt(1.0 - z * z);
                let phi = golden * i as f64;
                Direction::normalized(r * cos(phi), r * sin(phi), z).expect("unit spiral point")
            })
            .collect();
        Self {
            directions,
            weights: None,
        }
    }

    /// Upper-hemisphere rings equally spaced in `z` (midpoint rule), each ring
    /// sampled at `n_phi` equally spaced azimuths. Sums over this grid are
    /// near-quadrature for even functions.
    pub fn hemisphere_rings(n_rings: usize, n_phi: usize) -> Self {
        let mut directions = Vec::with_capacity(n_rings * n_phi);
        for r in 0..n_rings {
            let z = (r as f64 + 0.5) / n_rings as f64;
            let rho = sqrt(1.0 - z * z);
            for p in 0..n_phi {
                let phi = 2.0 * PI * p as f64 / n_phi as f64;
                directions.push(Direction::normalized(rho * cos(phi), rho * sin(phi), z).expect("unit ring point"));
            }
        }
        Self {
            directions,
            weights: None,
        }
    }

    /// Peak-search grid: frequency-9 icosphere, 812 directions (406 axes).
    pub fn default_peak_grid() -> Self {
        Self::icosphere(9)
    }

    /// Non-negativity constraint grid: 300 hemisphere directions.
    pub fn default_constraint_grid() -> Self {
        Self::fibonacci_hemisphere(300)
    }

    /// One representative of every antipodal pair (upper hemisphere, with a
    /// deterministic tie-break on the equator).
    pub fn hemisphere(&self) -> Self {
        let eps = 1e-12;
        let directions = self
            .directions
            .iter()
            .copied()
            .filter(|d| {
                d.z() > eps
                    || (fabs(d.z()) <= eps && (d.y() > eps || (fabs(d.y()) <= eps && d.x() > 0.0)))
            })
            .collect();
        Self {
            directions,
            weights: None,
        }
    }

    /// Median angle (degrees) from each direction to its nearest neighbour.
    pub fn typical_spacing_deg(&self) -> f64 {
        let n = self.directions.len();
        if n < 2 {
            return 180.0;
        }
        let mut nearest: Vec<f64> = (0..n)
            .map(|i| {
                let best = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| self.directions[i].dot(&self.directions[j]))
                    .fold(-1.0f64, f64::max);
                acos(best.clamp(-1.0, 1.0)).to_degrees()
            })
            .collect();
        nearest.sort_by(f64::total_cmp);
        nearest[n / 2]
    }

    /// For each direction, the indices of all others within `radius_deg`.
    pub fn neighbors(&self, radius_deg: f64) -> Vec<Vec<usize>> {
        let cos_r = cos(radius_deg.to_radians());
        let n = self.directions.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && self.directions[i].dot(&self.directions[j]) >= cos_r)
                    .collect()
            })
            .collect()
    }
}

fn icosahedron_vertices() -> [[f64; 3]; 12] {
    let p = (1.0 + sqrt(5.0)) / 2.0;
    [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ]
}

// Faces are the vertex triples that are pairwise one edge (length 2) apart.
fn icosahedron_faces(v: &[[f64; 3]; 12]) -> Vec<[usize; 3]> {
    let adjacent = |a: usize, b: usize| {
        let d2: f64 = (0..3).map(|t| (v[a][t] - v[b][t]) * (v[a][t] - v[b][t])).sum();
        fabs(d2 - 4.0) < 1e-9
    };
    let mut faces = Vec::with_capacity(20);
    for a in 0..12 {
        for b in a + 1..12 {
            for c in b + 1..12 {
                if adjacent(a, b) && adjacent(b, c) && adjacent(a, c) {
                    faces.push([a, b, c]);
                }
            }
        }
    }
    faces
}
