//! FSL-style `bvals` / `bvecs` text files.

use std::fmt::Write as _;

use fodfnet_core::dataset::GradientScheme;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradientError {
    #[error("{file}: token {token:?} at row {row}, column {column} is not a number")]
    NotANumber {
        file: &'static str,
        row: usize,
        column: usize,
        token: String,
    },
    #[error("bvecs must have 3 non-empty rows, found {0}")]
    BvecRows(usize),
    #[error("bvecs row {row} has {found} entries but row 1 has {expected}")]
    RaggedBvecs { row: usize, expected: usize, found: usize },
    #[error("bvals lists {bvals} entries but bvecs has {bvecs} columns")]
    CountMismatch { bvals: usize, bvecs: usize },
    #[error("no entries in bvals")]
    Empty,
    #[error("bval {value} at entry {index} is negative or not finite")]
    BadBval { index: usize, value: f64 },
    #[error("entry {index} has b={bval} but a zero-length bvec")]
    ZeroBvec { index: usize, bval: f64 },
}

fn parse_rows(text: &str, file: &'static str) -> Result<Vec<Vec<f64>>, GradientError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(r, line)| {
            line.split_whitespace()
                .enumerate()
                .map(|(c, tok)| {
                    tok.parse::<f64>().map_err(|_| GradientError::NotANumber {
                        file,
                        row: r + 1,
                        column: c + 1,
                        token: tok.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Parse a gradient table. `bvals` may span several lines; `bvecs` must be
/// three rows of x, y and z components. Diffusion-weighted vectors are
/// normalized; b0 vectors are kept as given.
pub fn parse_gradient_table(bvals: &str, bvecs: &str, shell_tolerance: f64) -> Result<GradientScheme, GradientError> {
    let b: Vec<f64> = parse_rows(bvals, "bvals")?.into_iter().flatten().collect();
    if b.is_empty() {
        return Err(GradientError::Empty);
    }
    if let Some((index, &value)) = b.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(GradientError::BadBval { index, value });
    }
    let rows = parse_rows(bvecs, "bvecs")?;
    if rows.len() != 3 {
        return Err(GradientError::BvecRows(rows.len()));
    }
    for (r, row) in rows.iter().enumerate().skip(1) {
        if row.len() != rows[0].len() {
            return Err(GradientError::RaggedBvecs {
                row: r + 1,
                expected: rows[0].len(),
                found: row.len(),
            });
        }
    }
    if rows[0].len() != b.len() {
        return Err(GradientError::CountMismatch {
            bvals: b.len(),
            bvecs: rows[0].len(),
        });
    }
    let mut vecs = Vec::with_capacity(b.len());
    for (i, &bval) in b.iter().enumerate() {
        let v = [rows[0][i], rows[1][i], rows[2][i]];
        if bval > shell_tolerance && !(v.iter().map(|x| x * x).sum::<f64>() > 0.0) {
            return Err(GradientError::ZeroBvec { index: i, bval });
        }
        vecs.push(v);
    }
    Ok(GradientScheme::new(b, vecs, shell_tolerance).expect("validated gradient table"))
}

/// `(bvals, bvecs)` file contents. Values use the shortest exact decimal form.
pub fn format_gradient_table(scheme: &GradientScheme) -> (String, String) {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        let mut s = String::new();
        for (i, v) in it.enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v}").expect("write to String");
        }
        s.push('\n');
        s
    };
    let bvals = join(&mut scheme.bvals().iter().copied());
    let bvecs = (0..3).map(|c| join(&mut scheme.bvecs().iter().map(|v| v[c]))).collect();
    (bvals, bvecs)
}
