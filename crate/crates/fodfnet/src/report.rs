//! Evaluation outputs: `metrics.csv`, `acc_hist.csv`, `summary.json` and
//! per-slice maps as 16-bit PGM images with CSVs of the raw values.


use fodfnet_core::metrics::{EvaluationReport, MethodReport, SignedRankResult, Summary, ACC_SENTINEL};
use fodfnet_core::{Mask, Volume4D};
use serde::Serialize;

use crate::files::to_json;

pub const TISSUES: [&str; 3] = ["csf", "gm", "wm"];

/// Binary PGM (P5) with 16-bit big-endian samples; rows run along x.
pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

/// Linear map of `[lo, hi]` onto pixels `1..=65535`; pixel 0 is reserved
/// for undefined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
}

impl Scale {
    pub fn pixel(&self, v: f64) -> u16 {
        if !v.is_finite() {
            return 0;
        }
        let span = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        let t = ((v - self.lo) / span).clamp(0.0, 1.0);
        1 + (t * 65534.0).round() as u16
    }
}

/// Axial slice `k` of volume 0 of `vol` as pixels; voxels outside `mask` or
/// equal to `sentinel` map to 0.
pub fn slice_pixels(vol: &Volume4D, component: usize, k: usize, mask: &Mask, scale: Scale, sentinel: Option<f64>) -> Vec<u16> {
    let [nx, ny, _] = vol.spatial_dims();
    let mut px = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v = vol.get(i, j, k, component);
            let inside = mask.get(vol.voxel_index(i, j, k));
            px.push(if !inside || Some(v) == sentinel { 0 } else { scale.pixel(v) });
        }
    }
    px
}

/// `i,j,k,value` for every masked voxel; undefined values are left empty.
pub fn map_csv(vol: &Volume4D, component: usize, mask: &Mask, sentinel: Option<f64>) -> String {
    let mut s = String::from("i,j,k,value\n");
    for v in mask.indices() {
        let [i, j, k] = mask.coords(v);
        let x = vol.get(i, j, k, component);
        if Some(x) == sentinel {
            s.push_str(&format!("{i},{j},{k},\n"));
        } else {
            s.push_str(&format!("{i},{j},{k},{x}\n"));
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub name: String,
    pub acc: Summary,
    pub rmse_sh: f64,
    /// Clamped predictions, CSF/GM/WM.
    pub rmse_fractions: Option<[f64; 3]>,
    pub rmse_fractions_raw: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSummary {
    pub first: String,
    pub second: String,
    pub paired_voxels: usize,
    pub test: Option<SignedRankResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub evaluated_voxels: usize,
    pub acc_sentinel: f64,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<ComparisonSummary>,
}

pub fn summary(report: &EvaluationReport, mask: &Mask) -> ReportSummary {
    ReportSummary {
        evaluated_voxels: mask.count(),
        acc_sentinel: ACC_SENTINEL,
        methods: report
            .methods
            .iter()
            .map(|m| MethodSummary {
                name: m.name.clone(),
                acc: m.acc_summary,
                rmse_sh: m.rmse_sh,
                rmse_fractions: m.rmse_fractions,
                rmse_fractions_raw: m.rmse_fractions_raw,
            })
            .collect(),
        comparisons: report
            .comparisons
            .iter()
            .map(|c| ComparisonSummary {
                first: c.first.clone(),
                second: c.second.clone(),
                paired_voxels: c.paired_voxels,
                test: c.test,
            })
            .collect(),
    }
}

fn finite_or_empty(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// One `method,metric,value` row per method and metric.
pub fn metrics_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("method,metric,value\n");
    for m in &report.methods {
        let mut row = |metric: &str, value: String| s.push_str(&format!("{},{metric},{value}\n", m.name));
        row("acc_mean", finite_or_empty(m.acc_summary.mean));
        row("acc_median", finite_or_empty(m.acc_summary.median));
        row("acc_defined_voxels", m.acc_summary.n.to_string());
        row("acc_undefined_voxels", m.acc_summary.undefined.to_string());
        row("rmse_sh", m.rmse_sh.to_string());
        if let (Some(c), Some(r)) = (m.rmse_fractions, m.rmse_fractions_raw) {
            for (t, name) in TISSUES.iter().enumerate() {
                row(&format!("rmse_{name}"), c[t].to_string());
            }
            for (t, name) in TISSUES.iter().enumerate() {
                row(&format!("rmse_{name}_raw"), r[t].to_string());
            }
        }
    }
    s
}

/// Bin edges followed by one count column per method.
pub fn histogram_csv(methods: &[MethodReport]) -> String {
    let mut s = String::from("bin_lo,bin_hi");
    for m in methods {
        s.push(',');
        s.push_str(&m.name);
    }
    s.push('\n');
    let Some(first) = methods.first() else {
        return s;
    };
    let edges = &first.acc_histogram.edges;
    for b in 0..first.acc_histogram.counts.len() {
        s.push_str(&format!("{},{}", edges[b], edges[b + 1]));
        for m in methods {
            s.push_str(&format!(",{}", m.acc_histogram.counts[b]));
        }
        s.push('\n');
    }
    s
}

pub fn comparisons_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("first,second,paired_voxels,method,n,w_plus,w_minus,p_two_sided,p_greater,p_less\n");
    for c in &report.comparisons {
        match &c.test {
            Some(t) => s.push_str(&format!(
                "{},{},{},{:?},{},{},{},{},{},{}\n",
                c.first, c.second, c.paired_voxels, t.method, t.n, t.w_plus, t.w_minus, t.p_two_sided, t.p_greater, t.p_less
            )),
            None => s.push_str(&format!("{},{},{},,,,,,,\n", c.first, c.second, c.paired_voxels)),
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
struct LegendEntry {
    map: String,
    value_at_pixel_1: f64,
    value_at_pixel_65535: f64,
    pixel_0: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct Legend {
    slice_axis: &'static str,
    rows: &'static str,
    acc_sentinel_value: f64,
    maps: Vec<LegendEntry>,
}

fn max_finite(vols: &[&Volume4D]) -> f64 {
    vols.iter()
        .flat_map(|v| v.data().iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
}

/// Every map of every method plus `legend.json`, as (file name, bytes).
pub fn maps(report: &EvaluationReport, mask: &Mask) -> Vec<(String, Vec<u8>)> {
    let [nx, ny, nz] = mask.dims();
    let mut files = Vec::new();
    let mut emit = |name: String, vol: &Volume4D, c: usize, scale: Scale, sentinel: Option<f64>| {
        files.push((format!("{name}.csv"), map_csv(vol, c, mask, sentinel).into_bytes()));
        for k in 0..nz {
            let px = slice_pixels(vol, c, k, mask, scale, sentinel);
            files.push((format!("{name}_z{k:03}.pgm"), encode_pgm16(nx, ny, &px)));
        }
    };
    let acc_scale = Scale { lo: -1.0, hi: 1.0 };
    let sq: Vec<&Volume4D> = report.methods.iter().filter_map(|m| m.squared_error.as_ref()).collect();
    let summed: Vec<&Volume4D> = report.methods.iter().filter_map(|m| m.summed_squared_error.as_ref()).collect();
    let sq_scale = Scale { lo: 0.0, hi: max_finite(&sq) };
    let sum_scale = Scale { lo: 0.0, hi: max_finite(&summed) };
    for m in &report.methods {
        emit(format!("{}_acc", m.name), &m.acc_map, 0, acc_scale, Some(ACC_SENTINEL));
        if let (Some(sq), Some(sum)) = (&m.squared_error, &m.summed_squared_error) {
            for (t, tissue) in TISSUES.iter().enumerate() {
                emit(format!("{}_sqerr_{tissue}", m.name), sq, t, sq_scale, None);
            }
            emit(format!("{}_sqerr_sum", m.name), sum, 0, sum_scale, None);
        }
    }
    let mut maps = vec![LegendEntry {
        map: "*_acc".into(),
        value_at_pixel_1: acc_scale.lo,
        value_at_pixel_65535: acc_scale.hi,
        pixel_0: "outside the mask, or ACC undefined (zero non-DC energy)",
    }];
    if !sq.is_empty() {
        maps.push(LegendEntry {
            map: "*_sqerr_{csf,gm,wm}".into(),
            value_at_pixel_1: sq_scale.lo,
            value_at_pixel_65535: sq_scale.hi,
            pixel_0: "outside the mask",
        });
        maps.push(LegendEntry {
            map: "*_sqerr_sum".into(),
            value_at_pixel_1: sum_scale.lo,
            value_at_pixel_65535: sum_scale.hi,
            pixel_0: "outside the mask",
        });
    }
    let legend = Legend {
        slice_axis: "z (one image per axial slice, suffix _zNNN)",
        rows: "image row j, column i",
        acc_sentinel_value: ACC_SENTINEL,
        maps,
    };
    files.push(("legend.json".into(), to_json(&legend).into_bytes()));
    files
}
